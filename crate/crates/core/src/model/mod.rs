//! Image encoders with a linear projection head, the text tower, and the
//! checkpoint format.
//!
//! | arch | encoder | d_enc |
//! |---|---|---|
//! | `mlp-small` | 1728 → 64, ReLU | 64 |
//! | `mlp-large` | 1728 → 256 → 128, ReLU | 128 |
//! | `conv-small` | conv3×3 (3→8), pool, conv3×3 (8→16), pool, 576 → 64, ReLU | 64 |
//!
//! Every encoder is followed by the bias-free head `d_enc → D_EMB`.

mod checkpoint;
mod text;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_VERSION, MAGIC};
pub use text::{fnv1a, tokenize, TextTower, VOCAB};

use crate::shapes::{IMAGE_LEN, SIDE};
use crate::tensor::{Graph, ParamStore, Tensor, TensorError, Var};

/// Shared embedding width of image and text towers.
pub const D_EMB: usize = 32;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unknown architecture `{0}`")]
    UnknownArch(String),
    #[error("checkpoint holds a `{found}` model, expected `{expected}`")]
    ArchMismatch { expected: String, found: String },
    #[error("bad magic: expected {:?}, found {found:?}", MAGIC)]
    BadMagic { found: [u8; 4] },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint has unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("checkpoint lacks parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint metadata: {0}")]
    Meta(#[from] serde_json::Error),
    #[error("prompt: {0}")]
    Prompt(#[from] crate::prompts::PromptError),
    #[error("prompt `{0}` has no tokens")]
    EmptyPrompt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    MlpSmall,
    MlpLarge,
    ConvSmall,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::MlpSmall, Arch::MlpLarge, Arch::ConvSmall];

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::MlpSmall => "mlp-small",
            Arch::MlpLarge => "mlp-large",
            Arch::ConvSmall => "conv-small",
        }
    }

    pub fn d_enc(self) -> usize {
        match self {
            Arch::MlpSmall | Arch::ConvSmall => 64,
            Arch::MlpLarge => 128,
        }
    }

    /// Parameter names and shapes, sorted by name.
    pub fn param_shapes(self) -> Vec<(String, Vec<usize>)> {
        let mut v: Vec<(String, Vec<usize>)> = match self {
            Arch::MlpSmall => vec![
                ("enc.l0.w".into(), vec![IMAGE_LEN, 64]),
                ("enc.l0.b".into(), vec![64]),
            ],
            Arch::MlpLarge => vec![
                ("enc.l0.w".into(), vec![IMAGE_LEN, 256]),
                ("enc.l0.b".into(), vec![256]),
                ("enc.l1.w".into(), vec![256, 128]),
                ("enc.l1.b".into(), vec![128]),
            ],
            Arch::ConvSmall => vec![
                ("enc.c0.w".into(), vec![9 * 3, 8]),
                ("enc.c0.b".into(), vec![8]),
                ("enc.c1.w".into(), vec![9 * 8, 16]),
                ("enc.c1.b".into(), vec![16]),
                ("enc.fc.w".into(), vec![(SIDE / 4) * (SIDE / 4) * 16, 64]),
                ("enc.fc.b".into(), vec![64]),
            ],
        };
        v.push(("head.w".into(), vec![self.d_enc(), D_EMB]));
        v.sort();
        v
    }

    pub fn param_count(self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| ModelError::UnknownArch(s.to_string()))
    }
}

/// An image encoder plus projection head.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageModel {
    pub arch: Arch,
    pub params: ParamStore,
}

impl ImageModel {
    /// He-normal weights, zero biases.
    pub fn new(arch: Arch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in arch.param_shapes() {
            let len: usize = shape.iter().product();
            let data = if name.ends_with(".b") {
                vec![0.0; len]
            } else {
                let std = (2.0 / shape[0] as f32).sqrt();
                let n = Normal::new(0.0, std).expect("finite std");
                (0..len).map(|_| n.sample(&mut rng)).collect()
            };
            params.insert(name, Tensor::new(shape, data).expect("shape matches"));
        }
        Self { arch, params }
    }

    pub fn param_count(&self) -> usize {
        self.params.num_values()
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let t = g.value(x);
        if t.shape().len() != 2 || t.shape()[1] != IMAGE_LEN {
            return Err(TensorError::ShapeMismatch {
                op: "encode_image",
                left: t.shape().to_vec(),
                right: vec![t.shape()[0], IMAGE_LEN],
            }
            .into());
        }
        Ok(())
    }

    /// Unnormalised head output `(B, D_EMB)` using parameters bound on `g`.
    pub fn forward(&self, g: &mut Graph, p: &BTreeMap<String, Var>, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        let dense = |g: &mut Graph, x: Var, l: &str| -> Result<Var> {
            let h = g.matmul(x, p[&format!("enc.{l}.w")])?;
            let h = g.add_row(h, p[&format!("enc.{l}.b")])?;
            Ok(g.relu(h))
        };
        let h = match self.arch {
            Arch::MlpSmall => dense(g, x, "l0")?,
            Arch::MlpLarge => {
                let h = dense(g, x, "l0")?;
                dense(g, h, "l1")?
            }
            Arch::ConvSmall => {
                let h = g.conv3x3(x, p["enc.c0.w"], p["enc.c0.b"], SIDE, SIDE)?;
                let h = g.relu(h);
                let h = g.avg_pool2(h, SIDE, SIDE)?;
                let h = g.conv3x3(h, p["enc.c1.w"], p["enc.c1.b"], SIDE / 2, SIDE / 2)?;
                let h = g.relu(h);
                let h = g.avg_pool2(h, SIDE / 2, SIDE / 2)?;
                dense(g, h, "fc")?
            }
        };
        Ok(g.matmul(h, p["head.w"])?)
    }

    /// Row-normalised embeddings `(B, D_EMB)`.
    pub fn encode(&self, g: &mut Graph, p: &BTreeMap<String, Var>, x: Var) -> Result<Var> {
        let f = self.forward(g, p, x)?;
        Ok(g.l2_normalize(f)?)
    }

    /// Inference helper: normalised embeddings of `images`, evaluated in
    /// chunks on throwaway graphs.
    pub fn encode_image(&self, images: &Tensor) -> Result<Tensor> {
        self.run(images, true)
    }

    /// Unnormalised head features of `images`.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        self.run(images, false)
    }

    fn run(&self, images: &Tensor, normalize: bool) -> Result<Tensor> {
        const CHUNK: usize = 256;
        if images.shape().len() != 2 || images.shape()[1] != IMAGE_LEN {
            return Err(TensorError::ShapeMismatch {
                op: "encode_image",
                left: images.shape().to_vec(),
                right: vec![images.shape().first().copied().unwrap_or(0), IMAGE_LEN],
            }
            .into());
        }
        let n = images.shape()[0];
        let mut out = Vec::with_capacity(n * D_EMB);
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let base = g.len();
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let chunk = Tensor::new(
                [end - start, IMAGE_LEN],
                images.data()[start * IMAGE_LEN..end * IMAGE_LEN].to_vec(),
            )?;
            let x = g.constant(chunk);
            let y = if normalize {
                self.encode(&mut g, &p, x)?
            } else {
                self.forward(&mut g, &p, x)?
            };
            out.extend_from_slice(g.value(y).data());
            g.truncate(base);
        }
        Ok(Tensor::new([n, D_EMB], out)?)
    }

    pub fn to_checkpoint(&self, seed: u64, stage: &str) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                arch: self.arch.as_str().to_string(),
                d_emb: D_EMB,
                seed,
                stage: stage.to_string(),
                param_count: self.param_count(),
                extra: BTreeMap::new(),
            },
            params: self.params.clone(),
        }
    }

    /// Rebuilds a model of architecture `expected` from `ckpt`, checking
    /// the tag and every parameter name and shape.
    pub fn from_checkpoint(ckpt: &Checkpoint, expected: Arch) -> Result<Self> {
        if ckpt.meta.arch != expected.as_str() {
            return Err(ModelError::ArchMismatch {
                expected: expected.as_str().into(),
                found: ckpt.meta.arch.clone(),
            });
        }
        let params = checkpoint::match_params(&ckpt.params, &expected.param_shapes())?;
        Ok(Self {
            arch: expected,
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capacity_ladder() {
        let s = Arch::MlpSmall.param_count();
        let l = Arch::MlpLarge.param_count();
        assert!(s < l, "{s} vs {l}");
        for a in Arch::ALL {
            assert_eq!(ImageModel::new(a, 0).param_count(), a.param_count());
            assert_eq!(a.as_str().parse::<Arch>().unwrap(), a);
        }
    }

    #[test]
    fn encode_shapes_and_norms() {
        let x = Tensor::filled([3, IMAGE_LEN], 0.5);
        for a in Arch::ALL {
            let m = ImageModel::new(a, 1);
            let e = m.encode_image(&x).unwrap();
            assert_eq!(e.shape(), &[3, D_EMB]);
            for r in 0..3 {
                let n: f32 = e.row(r).iter().map(|v| v * v).sum::<f32>().sqrt();
                assert!((n - 1.0).abs() < 1e-6);
            }
            assert_eq!(e.row(0), e.row(2));
        }
    }

    #[test]
    fn wrong_input_width() {
        let m = ImageModel::new(Arch::MlpSmall, 0);
        assert!(m.encode_image(&Tensor::zeros([2, 10])).is_err());
    }
}
