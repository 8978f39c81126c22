//! Training and distillation objectives over row-normalised embeddings.
//!
//! All functions append to a caller-owned [`Graph`] and return the scalar
//! loss node. Teacher-side inputs are detached inside the distillation
//! losses, so a teacher tensor can be passed without care for its
//! `requires_grad` flag.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, ParamStore, Real, Tensor, TensorError, Var};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{0} labels supplied for a batch of {1}")]
    LabelCount(usize, usize),
    #[error("sample {0} has no positive class")]
    NoPositive(usize),
    #[error("training and distillation losses are both `none`")]
    NothingToOptimize,
    #[error("no value supplied for the `{0}` component")]
    MissingComponent(LossTag),
    #[error("lambda must be non-negative, got {0}")]
    NegativeLambda(f32),
    #[error("softening temperature must be positive, got {0}")]
    BadSoftening(f64),
    #[error("unknown loss tag `{0}`")]
    UnknownTag(String),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Learnable temperature stored as `s = ln(1/τ)`; the effective logit scale
/// is `min(exp(s), ceiling)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperature {
    pub log_inv: f32,
    pub ceiling: f32,
}

impl Default for Temperature {
    /// τ ≈ 0.07, i.e. 1/τ = 14.3, capped at 100.
    fn default() -> Self {
        Self {
            log_inv: 14.3f32.ln(),
            ceiling: 100.0,
        }
    }
}

/// A [`Temperature`] placed on a graph.
#[derive(Debug, Clone, Copy)]
pub struct BoundTemperature {
    pub log_inv: Var,
    pub ceiling: f32,
}

impl Temperature {
    pub const PARAM: &'static str = "logit_scale";

    pub fn with_inv(inv: f32) -> Self {
        Self {
            log_inv: inv.ln(),
            ..Self::default()
        }
    }

    pub fn inv(&self) -> f32 {
        self.log_inv.exp().min(self.ceiling)
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>, trainable: bool) -> BoundTemperature {
        BoundTemperature {
            log_inv: g.leaf(Tensor::scalar(T::from_f64(self.log_inv as f64)), trainable),
            ceiling: self.ceiling,
        }
    }

    /// Uses the bound `logit_scale` parameter as `s` when present, otherwise
    /// a frozen copy of `self`.
    pub fn bind_from<T: Real>(
        &self,
        g: &mut Graph<T>,
        bound: &BTreeMap<String, Var>,
    ) -> BoundTemperature {
        match bound.get(Self::PARAM) {
            Some(&v) => BoundTemperature {
                log_inv: v,
                ceiling: self.ceiling,
            },
            None => self.bind(g, false),
        }
    }

    /// Pulls `logit_scale` in `store` back under the ceiling after an update.
    pub fn clamp_store(&self, store: &mut ParamStore) {
        if let Some(s) = store.get_mut(Self::PARAM) {
            let max = self.ceiling.ln();
            s.data_mut().iter_mut().for_each(|v| *v = v.min(max));
        }
    }
}

fn logit_scale<T: Real>(g: &mut Graph<T>, t: BoundTemperature) -> Var {
    let e = g.exp(t.log_inv);
    g.clamp_max(e, t.ceiling as f64)
}

/// `scale · a · bᵀ`
fn scaled_similarity<T: Real>(
    g: &mut Graph<T>,
    a: Var,
    b: Var,
    t: BoundTemperature,
) -> Result<Var> {
    let bt = g.transpose(b)?;
    let sim = g.matmul(a, bt)?;
    let k = logit_scale(g, t);
    Ok(g.scale_by(sim, k)?)
}

fn same_shape<T: Real>(g: &Graph<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (ta, tb) = (g.value(a), g.value(b));
    if ta.shape() != tb.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: ta.shape().to_vec(),
            right: tb.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

fn one_hot<T: Real>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros([labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(LossError::LabelOutOfRange { label: l, classes });
        }
        t.data_mut()[i * classes + l] = T::ONE;
    }
    Ok(t)
}

/// `−Σᵢⱼ wᵢⱼ · logp ᵢⱼ · k`
fn weighted_nll<T: Real>(g: &mut Graph<T>, logp: Var, weights: Tensor<T>, k: f64) -> Result<Var> {
    let w = g.constant(weights);
    let picked = g.mul(logp, w)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -k))
}

/// `Σᵢ ‖Sᵢ − Tᵢ‖₂`: sum over the batch of unsquared row distances.
pub fn feature_l2<T: Real>(g: &mut Graph<T>, student: Var, teacher: Var) -> Result<Var> {
    same_shape(g, "feature_l2", student, teacher)?;
    let t = g.detach(teacher);
    let d = g.sub(student, t)?;
    let n = g.row_norm(d);
    Ok(g.sum(n))
}

/// Symmetric image↔text InfoNCE with matched pairs on the diagonal,
/// averaged over both directions and over the batch.
pub fn clip_loss<T: Real>(
    g: &mut Graph<T>,
    images: Var,
    texts: Var,
    temp: BoundTemperature,
) -> Result<Var> {
    same_shape(g, "clip_loss", images, texts)?;
    let n = g.value(images).dims2().0;
    let logits = scaled_similarity(g, images, texts, temp)?;
    let img2txt = g.log_softmax(logits, 1)?;
    let txt2img = g.log_softmax(logits, 0)?;
    let a = weighted_nll(g, img2txt, Tensor::identity(n), 0.5 / n as f64)?;
    let b = weighted_nll(g, txt2img, Tensor::identity(n), 0.5 / n as f64)?;
    Ok(g.add(a, b)?)
}

/// Cross-entropy between the class-prompt softmax `q` and a one-hot `p`,
/// averaged over the batch.
pub fn multi_positive_loss<T: Real>(
    g: &mut Graph<T>,
    images: Var,
    prompts: Var,
    labels: &[usize],
    temp: BoundTemperature,
) -> Result<Var> {
    let positives: Vec<Vec<usize>> = labels.iter().map(|&l| vec![l]).collect();
    multi_positive_loss_sets(g, images, prompts, &positives, temp)
}

/// General form: `p` is uniform over each sample's set of positive classes.
pub fn multi_positive_loss_sets<T: Real>(
    g: &mut Graph<T>,
    images: Var,
    prompts: Var,
    positives: &[Vec<usize>],
    temp: BoundTemperature,
) -> Result<Var> {
    let n = g.value(images).dims2().0;
    let m = g.value(prompts).dims2().0;
    if positives.len() != n {
        return Err(LossError::LabelCount(positives.len(), n));
    }
    let mut p = Tensor::zeros([n, m]);
    for (i, set) in positives.iter().enumerate() {
        if set.is_empty() {
            return Err(LossError::NoPositive(i));
        }
        for &k in set {
            if k >= m {
                return Err(LossError::LabelOutOfRange {
                    label: k,
                    classes: m,
                });
            }
        }
        // indicator ratio: repeated indices count once
        let mut hit = vec![false; m];
        set.iter().for_each(|&k| hit[k] = true);
        let count = hit.iter().filter(|&&h| h).count() as f64;
        for k in 0..m {
            if hit[k] {
                p.data_mut()[i * m + k] = T::from_f64(1.0 / count);
            }
        }
    }
    let logits = scaled_similarity(g, images, prompts, temp)?;
    let logq = g.log_softmax(logits, 1)?;
    weighted_nll(g, logq, p, 1.0 / n as f64)
}

/// `Σᵢ −log softmax(⟨Sᵢ, T·⟩/τ)ᵢ` with the teacher rows as candidates.
pub fn contrastive_image_loss<T: Real>(
    g: &mut Graph<T>,
    student: Var,
    teacher: Var,
    temp: BoundTemperature,
) -> Result<Var> {
    same_shape(g, "contrastive_image_loss", student, teacher)?;
    let n = g.value(student).dims2().0;
    let t = g.detach(teacher);
    let logits = scaled_similarity(g, student, t, temp)?;
    let logq = g.log_softmax(logits, 1)?;
    weighted_nll(g, logq, Tensor::identity(n), 1.0)
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy_head<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, m) = g.value(logits).dims2();
    if labels.len() != n {
        return Err(LossError::LabelCount(labels.len(), n));
    }
    let onehot = one_hot(labels, m)?;
    let logp = g.log_softmax(logits, 1)?;
    weighted_nll(g, logp, onehot, 1.0 / n as f64)
}

/// `T² · meanᵢ KL(softmax(teacherᵢ/T) ‖ softmax(studentᵢ/T))`.
pub fn hinton_kd<T: Real>(
    g: &mut Graph<T>,
    student_logits: Var,
    teacher_logits: Var,
    softening: f64,
) -> Result<Var> {
    if !(softening > 0.0) {
        return Err(LossError::BadSoftening(softening));
    }
    same_shape(g, "hinton_kd", student_logits, teacher_logits)?;
    let (n, m) = g.value(student_logits).dims2();
    let tl = g.value(teacher_logits).clone();
    // teacher distribution as constants (detached)
    let mut pt = Tensor::<T>::zeros([n, m]);
    let mut cross_const = 0.0f64;
    for i in 0..n {
        let row: Vec<f64> = tl.row(i).iter().map(|&x| x.to_f64() / softening).collect();
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
        for (k, x) in row.iter().enumerate() {
            let logp = x - lse;
            let p = logp.exp();
            pt.data_mut()[i * m + k] = T::from_f64(p);
            cross_const += p * logp;
        }
    }
    let scaled = g.scale(student_logits, 1.0 / softening);
    let ls = g.log_softmax(scaled, 1)?;
    let t2 = softening * softening;
    // KL = Σ p log p − Σ p log q
    let neg_cross = weighted_nll(g, ls, pt, t2 / n as f64)?;
    let entropy_term = g.constant(Tensor::scalar(T::from_f64(cross_const * t2 / n as f64)));
    Ok(g.add(neg_cross, entropy_term)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTag {
    L2Feature,
    Clip,
    Mp,
    ContrastiveImage,
    Ce,
    HintonKd,
    None,
}

impl LossTag {
    pub const ALL: [LossTag; 7] = [
        LossTag::L2Feature,
        LossTag::Clip,
        LossTag::Mp,
        LossTag::ContrastiveImage,
        LossTag::Ce,
        LossTag::HintonKd,
        LossTag::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossTag::L2Feature => "l2_feature",
            LossTag::Clip => "clip",
            LossTag::Mp => "mp",
            LossTag::ContrastiveImage => "contrastive_image",
            LossTag::Ce => "ce",
            LossTag::HintonKd => "hinton_kd",
            LossTag::None => "none",
        }
    }
}

impl fmt::Display for LossTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossTag {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self> {
        LossTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| LossError::UnknownTag(s.to_string()))
    }
}

/// `L = L_training + λ · L_distillation`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f32,
    pub training: LossTag,
    pub distillation: LossTag,
}

impl Default for LossConfig {
    /// Pure feature distillation.
    fn default() -> Self {
        Self {
            lambda: 1.0,
            training: LossTag::None,
            distillation: LossTag::L2Feature,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(LossError::NegativeLambda(self.lambda));
        }
        if self.training == LossTag::None && self.distillation == LossTag::None {
            return Err(LossError::NothingToOptimize);
        }
        Ok(())
    }

    /// Tags whose values `combined_loss` will read.
    pub fn active(&self) -> Vec<LossTag> {
        let mut v = Vec::new();
        if self.training != LossTag::None {
            v.push(self.training);
        }
        if self.distillation != LossTag::None && !v.contains(&self.distillation) {
            v.push(self.distillation);
        }
        v
    }
}

/// Weighted sum of already evaluated components, keyed by tag.
pub fn combined_loss<T: Real>(
    g: &mut Graph<T>,
    cfg: &LossConfig,
    components: &BTreeMap<LossTag, Var>,
) -> Result<Var> {
    cfg.validate()?;
    let get = |t: LossTag| {
        components
            .get(&t)
            .copied()
            .ok_or(LossError::MissingComponent(t))
    };
    let training = match cfg.training {
        LossTag::None => None,
        t => Some(get(t)?),
    };
    let distill = match cfg.distillation {
        LossTag::None => None,
        t => Some(g.scale(get(t)?, cfg.lambda as f64)),
    };
    Ok(match (training, distill) {
        (Some(a), Some(b)) => g.add(a, b)?,
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => unreachable!("validated"),
    })
}
