//! Experiment configuration, read from TOML.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::train::{FinetuneConfig, StageOpt, TeacherConfig};
use super::{PipelineError, Result};
use crate::model::Arch;
use crate::shapes::{CorruptionKind, Diversity, Domain, NaturalStyle, SpuriousMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Teacher,
    Pretrain,
    Finetune,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::Teacher,
        Stage::Pretrain,
        Stage::Finetune,
        Stage::Eval,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Teacher => "teacher",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Eval => "eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| PipelineError::UnknownStage(s.into()))
    }
}

/// Dataset sizes and rendering style shared by every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Per class and domain, for the teacher's clean natural + synthetic data.
    pub teacher_per_class: usize,
    /// Per class and domain, for the general pre-training pool.
    pub pool_per_class: usize,
    pub heldout_per_class: usize,
    pub finetune_per_class: usize,
    pub test_per_class: usize,
    /// Options per contextual dimension of the prompt covering array.
    pub options: usize,
    pub style: NaturalStyle,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            teacher_per_class: 192,
            pool_per_class: 128,
            heldout_per_class: 16,
            finetune_per_class: 128,
            test_per_class: 64,
            options: 15,
            style: NaturalStyle::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    pub arch: Arch,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            arch: Arch::MlpSmall,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub opt: StageOpt,
    /// Required relative drop of the training loss from the first to the last step.
    pub min_drop: f64,
    /// Required mean student-teacher cosine on the held-out pool.
    pub min_cosine: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            opt: StageOpt {
                steps: 2000,
                ..Default::default()
            },
            min_drop: 0.5,
            min_cosine: 0.8,
        }
    }
}

/// One fine-tuning run: a loss on a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub name: String,
    pub loss: String,
    #[serde(default = "one")]
    pub lambda: f32,
    #[serde(default = "synthetic")]
    pub domain: Domain,
    #[serde(default)]
    pub spurious: SpuriousMode,
    #[serde(default)]
    pub diversity: Diversity,
}

fn one() -> f32 {
    1.0
}

fn synthetic() -> Domain {
    Domain::Synthetic
}

fn severity() -> u8 {
    3
}

/// Which corruptions a test set applies: one kind, or the mean over all.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionSel {
    All,
    Kind(CorruptionKind),
}

impl Serialize for CorruptionSel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            CorruptionSel::All => s.serialize_str("all"),
            CorruptionSel::Kind(k) => s.serialize_str(k.as_str()),
        }
    }
}

impl<'de> Deserialize<'de> for CorruptionSel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s == "all" {
            return Ok(CorruptionSel::All);
        }
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .map(CorruptionSel::Kind)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown corruption `{s}`")))
    }
}

/// An evaluation set. `train_of` reuses the training set of a run instead
/// of rendering a new one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestSpec {
    pub name: String,
    #[serde(default = "natural")]
    pub domain: Domain,
    #[serde(default)]
    pub spurious: SpuriousMode,
    #[serde(default)]
    pub diversity: Diversity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corruption: Option<CorruptionSel>,
    #[serde(default = "severity")]
    pub severity: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_of: Option<String>,
}

fn natural() -> Domain {
    Domain::Natural
}

/// A pass/fail check on mean top-1 percentages. Cells are named
/// `model@testset`; the value is `sum(plus) - sum(minus)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gate {
    pub name: String,
    pub plus: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub minus: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at_least: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at_most: Option<f64>,
}

/// A row of the summary table: one test set, one model per column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableRow {
    pub label: String,
    pub testset: String,
    pub models: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TableConfig {
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    /// Independent repetitions with seeds `seed, seed + 1, ...`.
    pub replicates: usize,
    pub out: PathBuf,
    pub stages: Vec<Stage>,
    pub data: DataConfig,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub runs: Vec<RunSpec>,
    pub testsets: Vec<TestSpec>,
    pub table: TableConfig,
    pub gates: Vec<Gate>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seed: 0,
            replicates: 1,
            out: PathBuf::from("runs/experiment"),
            stages: Stage::ALL.to_vec(),
            data: DataConfig::default(),
            teacher: TeacherConfig::default(),
            student: StudentConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            runs: vec![
                RunSpec {
                    name: "l2".into(),
                    loss: "l2_feature".into(),
                    lambda: 1.0,
                    domain: Domain::Synthetic,
                    spurious: SpuriousMode::None,
                    diversity: Diversity::Diversified,
                },
                RunSpec {
                    name: "clip".into(),
                    loss: "clip".into(),
                    lambda: 1.0,
                    domain: Domain::Synthetic,
                    spurious: SpuriousMode::None,
                    diversity: Diversity::Diversified,
                },
            ],
            testsets: vec![
                TestSpec {
                    name: "natural".into(),
                    domain: Domain::Natural,
                    spurious: SpuriousMode::None,
                    diversity: Diversity::Diversified,
                    corruption: None,
                    severity: 3,
                    train_of: None,
                },
                TestSpec {
                    name: "synthetic".into(),
                    domain: Domain::Synthetic,
                    spurious: SpuriousMode::None,
                    diversity: Diversity::Diversified,
                    corruption: None,
                    severity: 3,
                    train_of: None,
                },
            ],
            table: TableConfig::default(),
            gates: Vec::new(),
        }
    }
}

/// The configurations shipped with the crate.
pub const BUNDLED: [(&str, &str); 2] = [
    ("table2_toy", include_str!("../../configs/table2_toy.toml")),
    ("table3_toy", include_str!("../../configs/table3_toy.toml")),
];

impl ExperimentConfig {
    /// Parses TOML; errors carry the line and the offending key.
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config {
            origin: origin.into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text, &path.display().to_string())
    }

    /// A bundled configuration by name, or a file path.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        match BUNDLED.iter().find(|(n, _)| *n == name_or_path) {
            Some((n, text)) => Self::from_toml(text, n),
            None => Self::load(Path::new(name_or_path)),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serialises")
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.replicates as u64).map(|r| self.seed + r).collect()
    }

    pub fn run(&self, name: &str) -> Option<&RunSpec> {
        self.runs.iter().find(|r| r.name == name)
    }

    /// Model names that can appear in reports: the teacher, the pre-trained
    /// student and every run.
    pub fn model_names(&self) -> Vec<String> {
        let mut v = vec!["teacher".to_string(), "pretrained".to_string()];
        v.extend(self.runs.iter().map(|r| r.name.clone()));
        v
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: String, message: String| Err(PipelineError::Invalid { key, message });
        if self.replicates == 0 {
            return bad("replicates".into(), "must be at least 1".into());
        }
        let sizes = [
            ("data.teacher_per_class", self.data.teacher_per_class),
            ("data.pool_per_class", self.data.pool_per_class),
            ("data.heldout_per_class", self.data.heldout_per_class),
            ("data.finetune_per_class", self.data.finetune_per_class),
            ("data.test_per_class", self.data.test_per_class),
        ];
        for (k, v) in sizes {
            if v == 0 {
                return bad(k.into(), "must be at least 1".into());
            }
        }
        let models = self.model_names();
        for (i, r) in self.runs.iter().enumerate() {
            if models.iter().filter(|m| **m == r.name).count() > 1 {
                return bad(
                    format!("runs[{i}].name"),
                    format!("duplicate model name `{}`", r.name),
                );
            }
            if let Err(e) = super::parse_loss(&r.loss, r.lambda) {
                return bad(format!("runs[{i}].loss"), e.to_string());
            }
        }
        let mut tests: Vec<&str> = Vec::new();
        for (i, t) in self.testsets.iter().enumerate() {
            if tests.contains(&t.name.as_str()) {
                return bad(
                    format!("testsets[{i}].name"),
                    format!("duplicate test set `{}`", t.name),
                );
            }
            tests.push(&t.name);
            if let Some(r) = &t.train_of {
                if self.run(r).is_none() {
                    return bad(
                        format!("testsets[{i}].train_of"),
                        format!("no run named `{r}`"),
                    );
                }
            }
            if t.corruption.is_some() && !(1..=5).contains(&t.severity) {
                return bad(format!("testsets[{i}].severity"), "must be in 1..=5".into());
            }
        }
        let cell = |key: String, c: &str| -> Result<()> {
            match c.split_once('@') {
                Some((m, t)) if models.iter().any(|x| x == m) && tests.contains(&t) => Ok(()),
                _ => bad(
                    key,
                    format!("`{c}` is not `model@testset` over known names"),
                ),
            }
        };
        for (i, g) in self.gates.iter().enumerate() {
            if g.plus.is_empty() {
                return bad(format!("gates[{i}].plus"), "needs at least one cell".into());
            }
            for c in &g.plus {
                cell(format!("gates[{i}].plus"), c)?;
            }
            for c in &g.minus {
                cell(format!("gates[{i}].minus"), c)?;
            }
            if g.at_least.is_none() && g.at_most.is_none() {
                return bad(format!("gates[{i}]"), "needs at_least or at_most".into());
            }
        }
        for (i, row) in self.table.rows.iter().enumerate() {
            if row.models.len() != self.table.columns.len() {
                return bad(
                    format!("table.rows[{i}].models"),
                    format!(
                        "{} entries for {} columns",
                        row.models.len(),
                        self.table.columns.len()
                    ),
                );
            }
            for m in row.models.iter().filter(|m| !m.is_empty()) {
                cell(
                    format!("table.rows[{i}].models"),
                    &format!("{m}@{}", row.testset),
                )?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_configs_parse() {
        for (name, text) in BUNDLED {
            let cfg = ExperimentConfig::from_toml(text, name).unwrap();
            assert_eq!(cfg.name, name);
        }
    }

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml(), "default").unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err =
            ExperimentConfig::from_toml("seed = 1\n\n[teacher]\nflor = 0.9\n", "x").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("flor"), "{msg}");
        assert!(msg.contains("line 4"), "{msg}");
    }

    #[test]
    fn bad_cell_reference() {
        let text = "[[gates]]\nname = \"g\"\nplus = [\"nobody@natural\"]\nat_least = 1.0\n";
        let err = ExperimentConfig::from_toml(text, "x").unwrap_err();
        assert!(err.to_string().contains("gates[0].plus"));
    }
}
