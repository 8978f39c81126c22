//! Prompt diversification: contextual dimensions, covering arrays over
//! their options, and the weighted prompt format.
//!
//! A weighted prompt is a comma separated list of `(segment:W)` items with
//! the weight printed to one decimal:
//!
//! ```text
//! (saint bernard:1.5), (dog:1.2), (garden:1.0), (sitting:1.0), (morning:1.0), (low angle:1.0)
//! ```

pub mod banks;
pub mod covering;

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use covering::{build_covering_array, verify_coverage, Coverage, CoveringArray};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("covering array needs k >= t >= 2 and v >= 2 (got k={k}, v={v}, t={t})")]
    CoveringParams { k: usize, v: usize, t: usize },
    #[error("dimension `{0}` needs at least two options")]
    TooFewOptions(String),
    #[error("dimension `{dim}` lists option `{option}` twice")]
    DuplicateOption { dim: String, option: String },
    #[error("weight of `{0}` must be positive and finite")]
    BadWeight(String),
    #[error("`{0}` contains one of the reserved characters ( ) : ,")]
    ReservedChar(String),
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("row {row} has {got} entries but there are {want} dimensions")]
    Arity { row: usize, got: usize, want: usize },
    #[error("row {row} selects option {level} of dimension `{dim}` which has {options}")]
    LevelOutOfRange {
        row: usize,
        level: usize,
        dim: String,
        options: usize,
    },
    #[error("template `{0}` has no {{class}} placeholder")]
    MissingPlaceholder(String),
    #[error("cannot parse prompt segment `{0}`")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("option bank: {0}")]
    Bank(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, PromptError>;

const RESERVED: [char; 4] = ['(', ')', ':', ','];

fn check_segment(s: &str) -> Result<()> {
    if s.trim().is_empty() {
        return Err(PromptError::Empty("prompt segment"));
    }
    if s.contains(RESERVED) {
        return Err(PromptError::ReservedChar(s.to_string()));
    }
    Ok(())
}

fn check_weight(what: &str, w: f32) -> Result<()> {
    if !(w.is_finite() && w > 0.0) {
        return Err(PromptError::BadWeight(what.to_string()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextualDimension {
    pub name: String,
    pub weight: f32,
    pub options: Vec<String>,
}

impl ContextualDimension {
    pub fn new(name: impl Into<String>, weight: f32, options: Vec<String>) -> Result<Self> {
        let d = Self {
            name: name.into(),
            weight,
            options,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        check_weight(&self.name, self.weight)?;
        if self.options.len() < 2 {
            return Err(PromptError::TooFewOptions(self.name.clone()));
        }
        for (i, o) in self.options.iter().enumerate() {
            check_segment(o)?;
            if self.options[..i].contains(o) {
                return Err(PromptError::DuplicateOption {
                    dim: self.name.clone(),
                    option: o.clone(),
                });
            }
        }
        Ok(())
    }
}

/// A set of dimensions as stored in an option bank file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptionBank {
    pub dimensions: Vec<ContextualDimension>,
}

impl OptionBank {
    pub fn builtin(options: usize) -> Self {
        Self {
            dimensions: banks::default_dimensions(options),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let bank: Self = toml::from_str(text)?;
        bank.dimensions
            .iter()
            .try_for_each(ContextualDimension::validate)?;
        Ok(bank)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("option bank serialises")
    }
}

/// Class name and superclass with their prompt weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrompt {
    pub name: String,
    pub weight: f32,
    pub superclass: String,
    pub superclass_weight: f32,
}

impl ClassPrompt {
    pub fn new(name: &str, superclass: &str) -> Self {
        Self {
            name: name.to_string(),
            weight: 1.5,
            superclass: superclass.to_string(),
            superclass_weight: 1.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub dimension: String,
    pub option: String,
    pub level: usize,
    pub weight: f32,
}

/// One diversified prompt: the class, its superclass and one option per
/// dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub class_name: String,
    pub class_weight: f32,
    pub superclass: String,
    pub superclass_weight: f32,
    pub selections: Vec<Selection>,
}

impl PromptSpec {
    pub fn segments(&self) -> Vec<(String, f32)> {
        let mut out = vec![
            (self.class_name.clone(), self.class_weight),
            (self.superclass.clone(), self.superclass_weight),
        ];
        out.extend(self.selections.iter().map(|s| (s.option.clone(), s.weight)));
        out
    }

    /// Option indices in dimension order.
    pub fn levels(&self) -> Vec<usize> {
        self.selections.iter().map(|s| s.level).collect()
    }
}

impl fmt::Display for PromptSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_weighted(&self.segments()))
    }
}

pub fn format_weighted(segments: &[(String, f32)]) -> String {
    segments
        .iter()
        .map(|(s, w)| format!("({s}:{w:.1})"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Splits a prompt into `(segment, weight)` pairs. Comma separated parts of
/// the form `(text:W)` carry weight `W`; any other part has weight 1.
pub fn parse_weighted(prompt: &str) -> Result<Vec<(String, f32)>> {
    let mut out = Vec::new();
    for part in prompt.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        if let Some(inner) = part.strip_prefix('(') {
            let inner = inner
                .strip_suffix(')')
                .ok_or_else(|| PromptError::Parse(part.into()))?;
            let (text, w) = inner
                .rsplit_once(':')
                .ok_or_else(|| PromptError::Parse(part.into()))?;
            let w: f32 = w
                .trim()
                .parse()
                .map_err(|_| PromptError::Parse(part.into()))?;
            check_weight(text, w)?;
            out.push((text.trim().to_string(), w));
        } else if part.contains(RESERVED) {
            return Err(PromptError::Parse(part.into()));
        } else {
            out.push((part.to_string(), 1.0));
        }
    }
    if out.is_empty() {
        return Err(PromptError::Empty("prompt"));
    }
    Ok(out)
}

/// One prompt per covering-array row, segments in the order class,
/// superclass, dimensions.
pub fn assemble_prompts(
    class: &ClassPrompt,
    dimensions: &[ContextualDimension],
    array: &CoveringArray,
) -> Result<Vec<PromptSpec>> {
    check_segment(&class.name)?;
    check_segment(&class.superclass)?;
    check_weight(&class.name, class.weight)?;
    check_weight(&class.superclass, class.superclass_weight)?;
    dimensions
        .iter()
        .try_for_each(ContextualDimension::validate)?;
    array
        .rows
        .iter()
        .enumerate()
        .map(|(r, row)| {
            if row.len() != dimensions.len() {
                return Err(PromptError::Arity {
                    row: r,
                    got: row.len(),
                    want: dimensions.len(),
                });
            }
            let selections = row
                .iter()
                .zip(dimensions)
                .map(|(&level, d)| {
                    let option =
                        d.options
                            .get(level)
                            .ok_or_else(|| PromptError::LevelOutOfRange {
                                row: r,
                                level,
                                dim: d.name.clone(),
                                options: d.options.len(),
                            })?;
                    Ok(Selection {
                        dimension: d.name.clone(),
                        option: option.clone(),
                        level,
                        weight: d.weight,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PromptSpec {
                class_name: class.name.clone(),
                class_weight: class.weight,
                superclass: class.superclass.clone(),
                superclass_weight: class.superclass_weight,
                selections,
            })
        })
        .collect()
}

pub fn zero_shot_prompt(class_name: &str, superclass: &str) -> Result<String> {
    if class_name.is_empty() {
        return Err(PromptError::Empty("class name"));
    }
    if superclass.is_empty() {
        return Err(PromptError::Empty("superclass"));
    }
    Ok(format!(
        "a photo of a {class_name}, which is a type of {superclass}"
    ))
}

/// Each class's zero-shot prompt repeated `n_copies` times, class by class.
pub fn simple_prompt_bank(classes: &[(String, String)], n_copies: usize) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(classes.len() * n_copies);
    for (c, s) in classes {
        let p = zero_shot_prompt(c, s)?;
        out.extend(std::iter::repeat_n(p, n_copies));
    }
    Ok(out)
}

/// Instantiates every template for one class; duplicates are kept.
pub fn prompt_ensemble(
    templates: &[&str],
    class_name: &str,
    superclass: &str,
) -> Result<Vec<String>> {
    if templates.is_empty() {
        return Err(PromptError::Empty("template list"));
    }
    if class_name.is_empty() {
        return Err(PromptError::Empty("class name"));
    }
    templates
        .iter()
        .map(|t| {
            if !t.contains("{class}") {
                return Err(PromptError::MissingPlaceholder(t.to_string()));
            }
            Ok(t.replace("{class}", class_name)
                .replace("{superclass}", superclass))
        })
        .collect()
}

/// UTF-8, one prompt per line.
pub fn write_prompts<S: AsRef<str>>(path: &Path, prompts: &[S]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in prompts {
        writeln!(f, "{}", p.as_ref())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_prompts(path: &Path) -> Result<Vec<String>> {
    Ok(std::fs::read_to_string(path)?
        .lines()
        .map(str::to_string)
        .collect())
}
