//! Differentiable scenarios shared by the gradient and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use zsdistill::losses::{
    clip_loss, contrastive_image_loss, cross_entropy_head, feature_l2, hinton_kd,
    multi_positive_loss, BoundTemperature, LossError, Temperature,
};
use zsdistill::tensor::{Graph, Real, Result as TResult, ScalarFn, Tensor, TensorError, Var};

pub const H: f64 = 1e-3;
pub const TOL: f64 = 1e-3;
pub const D: usize = 8;
pub const M: usize = 3;

pub fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    let data = (0..r * c).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::new([r, c], data).unwrap()
}

pub fn unit_rows(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    let mut g = Graph::<f32>::new();
    let x = g.constant(uniform(rng, r, c));
    let y = g.l2_normalize(x).unwrap();
    g.value(y).clone()
}

fn l(e: LossError) -> TensorError {
    match e {
        LossError::Tensor(t) => t,
        other => panic!("{other}"),
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Kind {
    FeatureL2,
    Clip,
    ClipTextSide,
    MultiPositive,
    ContrastiveImage,
    CrossEntropy,
    HintonKd,
    ClipTemperature,
    MatmulBiasRelu,
    Weights,
    Mixed,
    LogSoftmaxCols,
    ConvPool,
    ConvWeights,
}

/// One differentiable scenario; `aux` holds the fixed operands.
pub struct Case {
    pub kind: Kind,
    pub aux: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub temp: Temperature,
}

impl Case {
    pub fn new(kind: Kind, aux: Vec<Tensor>) -> Self {
        Self {
            kind,
            aux,
            labels: Vec::new(),
            temp: Temperature::default(),
        }
    }
}

impl ScalarFn for Case {
    fn eval<T: Real>(&self, g: &mut Graph<T>, x: Var) -> TResult<Var> {
        let a: Vec<Var> = self.aux.iter().map(|t| g.constant(t.cast())).collect();
        match self.kind {
            Kind::FeatureL2 => {
                let s = g.l2_normalize(x)?;
                feature_l2(g, s, a[0]).map_err(l)
            }
            Kind::Clip => {
                let s = g.l2_normalize(x)?;
                let tp = self.temp.bind(g, false);
                clip_loss(g, s, a[0], tp).map_err(l)
            }
            Kind::ClipTextSide => {
                let t = g.l2_normalize(x)?;
                let tp = self.temp.bind(g, false);
                clip_loss(g, a[0], t, tp).map_err(l)
            }
            Kind::MultiPositive => {
                let s = g.l2_normalize(x)?;
                let tp = self.temp.bind(g, false);
                multi_positive_loss(g, s, a[0], &self.labels, tp).map_err(l)
            }
            Kind::ContrastiveImage => {
                let s = g.l2_normalize(x)?;
                let tp = self.temp.bind(g, false);
                contrastive_image_loss(g, s, a[0], tp).map_err(l)
            }
            Kind::CrossEntropy => cross_entropy_head(g, x, &self.labels).map_err(l),
            Kind::HintonKd => hinton_kd(g, x, a[0], 2.0).map_err(l),
            Kind::ClipTemperature => {
                let tp = BoundTemperature {
                    log_inv: x,
                    ceiling: 100.0,
                };
                clip_loss(g, a[0], a[1], tp).map_err(l)
            }
            Kind::MatmulBiasRelu => {
                let h = g.matmul(x, a[0])?;
                let h = g.add_row(h, a[1])?;
                let h = g.relu(h);
                Ok(g.sum(h))
            }
            Kind::Weights => {
                let h = g.matmul(a[0], x)?;
                let t = g.transpose(h)?;
                let sq = g.mul(t, t)?;
                Ok(g.mean(sq))
            }
            Kind::Mixed => {
                let d = g.sub(x, a[0])?;
                let e = g.exp(d);
                let e1 = g.scale(e, 0.5);
                let c = g.concat(&[e1, x], 1)?;
                let r = g.gather_rows(c, &[3, 0, 0])?;
                let sq = g.mul(r, r)?;
                let s = g.sum_rows(sq);
                let one = g.constant(Tensor::filled([3], T::ONE));
                let s1 = g.add(s, one)?;
                let lg = g.ln(s1);
                Ok(g.sum(lg))
            }
            Kind::LogSoftmaxCols => {
                let ls = g.log_softmax(x, 0)?;
                let p = g.mul(ls, a[0])?;
                Ok(g.sum(p))
            }
            Kind::ConvPool => {
                let y = g.conv3x3(x, a[0], a[1], 4, 4)?;
                let p = g.avg_pool2(y, 4, 4)?;
                let sq = g.mul(p, p)?;
                Ok(g.sum(sq))
            }
            Kind::ConvWeights => {
                let y = g.conv3x3(a[0], x, a[1], 4, 4)?;
                let sq = g.mul(y, y)?;
                Ok(g.mean(sq))
            }
        }
    }
}

/// The six loss scenarios at one seed and batch size: feature ℒ₂, CLIP,
/// multi-positive, contrastive image, cross-entropy and Hinton KD.
pub fn loss_cases(seed: u64, n: usize) -> Vec<(Case, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + n as u64);
    let x = uniform(&mut rng, n, D);
    let teacher = unit_rows(&mut rng, n, D);
    let texts = unit_rows(&mut rng, n, D);
    let prompts = unit_rows(&mut rng, M, D);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..M)).collect();
    let logits_t = uniform(&mut rng, n, M);
    let logits_x = uniform(&mut rng, n, M);
    let mut mp = Case::new(Kind::MultiPositive, vec![prompts]);
    mp.labels = labels.clone();
    let mut ce = Case::new(Kind::CrossEntropy, vec![]);
    ce.labels = labels;
    vec![
        (Case::new(Kind::FeatureL2, vec![teacher.clone()]), x.clone()),
        (Case::new(Kind::Clip, vec![texts]), x.clone()),
        (
            Case::new(Kind::ClipTextSide, vec![teacher.clone()]),
            x.clone(),
        ),
        (mp, x.clone()),
        (Case::new(Kind::ContrastiveImage, vec![teacher]), x),
        (ce, logits_x.clone()),
        (Case::new(Kind::HintonKd, vec![logits_t]), logits_x),
    ]
}
