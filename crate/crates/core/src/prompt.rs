//! Few-shot prompt rendering.
//!
//! A prompt is the element definitions, an output-format instruction for the
//! requested element order, the demonstrations, and finally the input block
//! `Text: <sentence>\nSentiment elements:`. Everything up to and including
//! `Text: ` of the input block is the prefix shared by every instance with the
//! same order, shot sample, task and dataset.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::PromptError;
use crate::grammar::format_tuples;
use crate::types::{CategorySet, ElementKind, Instance, Permutation};

pub const INPUT_LABEL: &str = "Text: ";
pub const OUTPUT_MARKER: &str = "Sentiment elements:";

const DEFAULT_INTRO: &str = "According to the following sentiment elements definition:";

const DEFAULT_FORMAT: &str = "Recognize all sentiment elements with their corresponding {names} \
in the following text with the format of [({order}), ...]. Copy terms from the text \
exactly as they appear, and write NULL for an aspect that is only implied.";

fn default_description(kind: ElementKind) -> &'static str {
    match kind {
        ElementKind::AspectTerm => {
            "The \"aspect term\" refers to a specific feature, attribute, or aspect of a product \
or service that a user may express an opinion about. The aspect term might be \"NULL\" for an \
implicit aspect."
        }
        ElementKind::AspectCategory => {
            "The \"aspect category\" refers to the category that the aspect belongs to, and the \
available categories include: {categories}."
        }
        ElementKind::OpinionTerm => {
            "The \"opinion term\" refers to the sentiment or attitude expressed by a user towards \
a particular aspect or feature of a product or service."
        }
        ElementKind::Polarity => {
            "The \"sentiment polarity\" refers to the degree of positivity, negativity or \
neutrality expressed in the opinion towards a particular aspect or feature of a product or \
service, and the available polarities include: \"positive\", \"negative\" and \"neutral\"."
        }
    }
}

/// Editable prompt wording.
///
/// On disk a template is a directory holding `intro.txt`, `format.txt` and
/// one `<code>.txt` per element (`at.txt`, `ac.txt`, `ot.txt`, `p.txt`).
/// Missing files fall back to the built-in wording. `{categories}` expands to
/// the dataset's category list; `format.txt` may use `{order}` (element names
/// in the requested order) and `{names}` (the same names as prose).
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub intro: String,
    pub element_descriptions: HashMap<ElementKind, String>,
    pub format_spec: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            intro: DEFAULT_INTRO.to_owned(),
            element_descriptions: ElementKind::ALL
                .iter()
                .map(|&k| (k, default_description(k).to_owned()))
                .collect(),
            format_spec: DEFAULT_FORMAT.to_owned(),
        }
    }
}

impl PromptTemplate {
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let read = |name: &str| -> Result<Option<String>, PromptError> {
            let path = dir.join(name);
            match fs::read_to_string(&path) {
                Ok(s) => Ok(Some(s.trim_end().to_owned())),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound && dir.is_dir() => Ok(None),
                Err(source) => Err(PromptError::Template { path, source }),
            }
        };
        let mut template = Self::default();
        if let Some(s) = read("intro.txt")? {
            template.intro = s;
        }
        if let Some(s) = read("format.txt")? {
            template.format_spec = s;
        }
        for kind in ElementKind::ALL {
            if let Some(s) = read(&format!("{}.txt", kind.code()))? {
                template.element_descriptions.insert(kind, s);
            }
        }
        Ok(template)
    }

    /// Writes the template as a directory loadable by [`Self::from_dir`].
    pub fn write_dir(&self, dir: &Path) -> Result<(), PromptError> {
        let write = |name: String, text: &str| {
            let path: PathBuf = dir.join(name);
            fs::write(&path, format!("{text}\n")).map_err(|source| PromptError::Template { path, source })
        };
        fs::create_dir_all(dir).map_err(|source| PromptError::Template {
            path: dir.to_owned(),
            source,
        })?;
        write("intro.txt".into(), &self.intro)?;
        write("format.txt".into(), &self.format_spec)?;
        for kind in ElementKind::ALL {
            write(format!("{}.txt", kind.code()), self.description(kind))?;
        }
        Ok(())
    }

    fn description(&self, kind: ElementKind) -> &str {
        self.element_descriptions
            .get(&kind)
            .map_or_else(|| default_description(kind), String::as_str)
    }

    /// Definitions and format instruction for one element order.
    pub fn header(&self, permutation: &Permutation, categories: &CategorySet) -> String {
        let category_list = categories.iter().collect::<Vec<_>>().join(", ");
        let mut out = String::new();
        out.push_str(&self.intro);
        out.push('\n');
        for &kind in permutation.task().elements() {
            out.push_str("- ");
            out.push_str(&self.description(kind).replace("{categories}", &category_list));
            out.push('\n');
        }
        let names: Vec<&str> = permutation.order().iter().map(|k| k.display_name()).collect();
        let prose = match names.split_last() {
            Some((last, rest)) if !rest.is_empty() => format!("{} and {last}", rest.join(", ")),
            _ => names.join(""),
        };
        out.push('\n');
        out.push_str(
            &self
                .format_spec
                .replace("{order}", &names.join(", "))
                .replace("{names}", &prose)
                .replace("{categories}", &category_list),
        );
        out
    }
}

/// A prompt split where the input sentence begins.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub prefix: String,
    pub suffix: String,
    pub permutation_id: String,
    pub shot_k: usize,
}

impl RenderedPrompt {
    pub fn full(&self) -> String {
        format!("{}{}", self.prefix, self.suffix)
    }
}

/// One demonstration block: the text and its label in `permutation` order.
pub fn demonstration(shot: &Instance, permutation: &Permutation) -> Result<String, PromptError> {
    let gold = shot
        .gold
        .as_ref()
        .filter(|g| g.iter().all(|t| t.fits(permutation.task())))
        .ok_or_else(|| PromptError::MalformedDemonstration(shot.id.clone()))?;
    Ok(format!(
        "{INPUT_LABEL}{}\n{OUTPUT_MARKER} {}",
        shot.text,
        format_tuples(gold, permutation)
    ))
}

/// Renders the prompt for `instance` under `permutation` with `shots` as
/// demonstrations, in the given order.
pub fn render(
    template: &PromptTemplate,
    permutation: &Permutation,
    categories: &CategorySet,
    shots: &[Instance],
    instance: &Instance,
) -> Result<RenderedPrompt, PromptError> {
    Ok(RenderedPrompt {
        prefix: render_prefix(template, permutation, categories, shots)?,
        suffix: render_suffix(instance),
        permutation_id: permutation.id(),
        shot_k: shots.len(),
    })
}

/// The instance-independent part of a prompt.
pub fn render_prefix(
    template: &PromptTemplate,
    permutation: &Permutation,
    categories: &CategorySet,
    shots: &[Instance],
) -> Result<String, PromptError> {
    let mut prefix = template.header(permutation, categories);
    prefix.push_str("\n\n");
    for shot in shots {
        prefix.push_str(&demonstration(shot, permutation)?);
        prefix.push_str("\n\n");
    }
    prefix.push_str(INPUT_LABEL);
    Ok(prefix)
}

pub fn render_suffix(instance: &Instance) -> String {
    format!("{}\n{OUTPUT_MARKER}", instance.text)
}
