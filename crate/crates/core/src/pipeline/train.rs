//! The three training stages: teacher, feature pre-training and fine-tuning.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::eval::{similarities, Classifier, ZeroShot};
use crate::losses::{
    clip_loss, combined_loss, contrastive_image_loss, cross_entropy_head, feature_l2, hinton_kd,
    multi_positive_loss, LossConfig, LossTag, Temperature,
};
use crate::model::{Arch, Checkpoint, ImageModel, TextTower, D_EMB};
use crate::prompts::zero_shot_prompt;
use crate::shapes::{random_crop, ClassDef, Dataset, IMAGE_LEN};
use crate::tensor::{AdamW, AdamWConfig, Graph, ParamStore, Tensor, Var};

/// Optimisation settings shared by every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageOpt {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub weight_decay: f32,
    /// Smallest random crop side; the full side disables cropping.
    pub min_crop: usize,
}

impl Default for StageOpt {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 64,
            lr: 5e-4,
            weight_decay: 0.0,
            min_crop: 20,
        }
    }
}

/// Progress reported by a training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub steps: usize,
    pub first_loss: f32,
    pub last_loss: f32,
}

pub type Log<'a> = &'a mut dyn FnMut(&str);

/// Zero-shot prompt embeddings of `classes` under `text`.
pub fn class_text(text: &TextTower, classes: &[ClassDef]) -> Result<Tensor> {
    Ok(crate::eval::class_embeddings(text, classes)?)
}

fn zero_shot_prompts(classes: &[ClassDef]) -> Result<Vec<String>> {
    Ok(classes
        .iter()
        .map(|c| zero_shot_prompt(&c.name, &c.superclass))
        .collect::<std::result::Result<_, _>>()?)
}

/// Draws a batch of indices and, when cropping is on, crops each image.
fn draw_batch(
    set: &[&Dataset],
    opt: &StageOpt,
    rng: &mut ChaCha8Rng,
) -> (Tensor, Vec<usize>, Vec<(usize, usize)>) {
    let total: usize = set.iter().map(|d| d.len()).sum();
    let mut data = Vec::with_capacity(opt.batch * IMAGE_LEN);
    let mut labels = Vec::with_capacity(opt.batch);
    let mut which = Vec::with_capacity(opt.batch);
    for _ in 0..opt.batch {
        let mut i = rng.random_range(0..total);
        let mut d = 0;
        while i >= set[d].len() {
            i -= set[d].len();
            d += 1;
        }
        let s = &set[d].samples[i];
        if opt.min_crop < crate::shapes::SIDE {
            data.extend(random_crop(&s.pixels, opt.min_crop, rng));
        } else {
            data.extend_from_slice(&s.pixels);
        }
        labels.push(s.class_id);
        which.push((d, i));
    }
    (
        Tensor::new([opt.batch, IMAGE_LEN], data).expect("batch"),
        labels,
        which,
    )
}

/// Runs `steps` AdamW updates of `params`, with the loss built by `f`.
fn optimize(
    stage: &str,
    params: &mut ParamStore,
    opt: &StageOpt,
    log: Log,
    mut f: impl FnMut(&mut Graph, &BTreeMap<String, Var>, usize) -> Result<Var>,
) -> Result<StageStats> {
    let mut adam = AdamW::new(AdamWConfig {
        lr: opt.lr,
        weight_decay: opt.weight_decay,
        ..Default::default()
    });
    let mut stats = StageStats {
        steps: 0,
        first_loss: f32::NAN,
        last_loss: f32::NAN,
    };
    let every = (opt.steps / 10).max(1);
    for step in 0..opt.steps {
        let mut g = Graph::new();
        let p = params.bind(&mut g, true);
        let loss = f(&mut g, &p, step)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(PipelineError::Diverged {
                stage: stage.into(),
                step,
            });
        }
        g.backward(loss)?;
        let grads = ParamStore::collect_grads(&g, &p);
        adam.step(params, &grads)?;
        Temperature::default().clamp_store(params);
        if step == 0 {
            stats.first_loss = value;
        }
        stats.last_loss = value;
        stats.steps = step + 1;
        if step % every == 0 || step + 1 == opt.steps {
            log(&format!("{stage} step={} loss={value:.4}", step + 1));
        }
    }
    Ok(stats)
}

/// Teacher image tower, text tower and the temperature they were trained at.
#[derive(Debug, Clone, PartialEq)]
pub struct Teacher {
    pub image: ImageModel,
    pub text: TextTower,
    pub temperature: Temperature,
}

impl Teacher {
    pub fn zero_shot<'a>(&'a self, z: &'a Tensor) -> ZeroShot<'a> {
        ZeroShot {
            model: &self.image,
            classes: z,
        }
    }

    pub fn checkpoints(&self, seed: u64) -> (Checkpoint, Checkpoint) {
        let mut image = self.image.to_checkpoint(seed, "teacher");
        image
            .meta
            .extra
            .insert("logit_scale".into(), self.temperature.log_inv.to_string());
        (image, self.text.to_checkpoint(seed, "teacher"))
    }

    pub fn from_checkpoints(image: &Checkpoint, text: &Checkpoint, arch: Arch) -> Result<Self> {
        Ok(Self {
            image: ImageModel::from_checkpoint(image, arch)?,
            text: TextTower::from_checkpoint(text)?,
            temperature: read_temperature(image),
        })
    }
}

fn read_temperature(ck: &Checkpoint) -> Temperature {
    let mut t = Temperature::default();
    if let Some(v) = ck
        .meta
        .extra
        .get("logit_scale")
        .and_then(|s| s.parse().ok())
    {
        t.log_inv = v;
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub arch: Arch,
    pub opt: StageOpt,
    /// Initial `1/τ`.
    pub inv_temperature: f32,
    /// Minimum clean zero-shot top-1 on every teacher test set.
    pub floor: f64,
    /// Minimum linear-probe accuracy on clean data.
    pub probe_floor: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            arch: Arch::MlpLarge,
            opt: StageOpt {
                steps: 1500,
                lr: 1e-3,
                ..Default::default()
            },
            inv_temperature: 14.3,
            floor: 0.90,
            probe_floor: 0.95,
        }
    }
}

/// Trains image and text towers jointly with the CLIP loss on captioned
/// clean data; the returned text tower is frozen.
pub fn train_teacher(
    cfg: &TeacherConfig,
    train: &[&Dataset],
    seed: u64,
    log: Log,
) -> Result<(Teacher, StageStats)> {
    let classes = &train
        .first()
        .ok_or(PipelineError::EmptyData("teacher"))?
        .spec
        .classes;
    let prompts = zero_shot_prompts(classes)?;
    let refs: Vec<&str> = prompts.iter().map(String::as_str).collect();
    let image = ImageModel::new(cfg.arch, seed);
    let text = TextTower::new(seed ^ 0x7465_7874);
    let temp = Temperature::with_inv(cfg.inv_temperature);

    let mut params = ParamStore::new();
    for (k, v) in image.params.iter().chain(text.params.iter()) {
        params.insert(k.clone(), v.clone());
    }
    params.insert(Temperature::PARAM, Tensor::scalar(temp.log_inv));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stats = optimize("teacher", &mut params, &cfg.opt, log, |g, p, _| {
        let (x, labels, _) = draw_batch(train, &cfg.opt, &mut rng);
        let x = g.constant(x);
        let img = image.encode(g, p, x)?;
        let z = text.embed_graph(g, p, &refs)?;
        let txt = g.gather_rows(z, &labels)?;
        let t = temp.bind_from(g, p);
        Ok(clip_loss(g, img, txt, t)?)
    })?;

    let split = |prefix: &str| {
        let mut s = ParamStore::new();
        for (k, v) in params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            s.insert(k.clone(), v.clone());
        }
        s
    };
    let mut image_params = split("enc.");
    image_params.insert("head.w", params.get("head.w").expect("head").clone());
    let teacher = Teacher {
        image: ImageModel {
            arch: cfg.arch,
            params: image_params,
        },
        text: TextTower {
            params: split("text."),
            frozen: true,
        },
        temperature: Temperature {
            log_inv: params.get(Temperature::PARAM).expect("temperature").item(),
            ..temp
        },
    };
    Ok((teacher, stats))
}

/// A student image encoder, with an optional linear classification head
/// (`cls.w`, `cls.b`) for the cross-entropy variants.
#[derive(Debug, Clone, PartialEq)]
pub struct Student {
    pub model: ImageModel,
    pub head: Option<ParamStore>,
    pub temperature: Temperature,
}

impl Student {
    pub fn new(arch: Arch, seed: u64) -> Self {
        Self {
            model: ImageModel::new(arch, seed),
            head: None,
            temperature: Temperature::default(),
        }
    }

    pub fn to_checkpoint(&self, seed: u64, stage: &str) -> Checkpoint {
        let mut ck = self.model.to_checkpoint(seed, stage);
        if let Some(h) = &self.head {
            for (k, v) in h.iter() {
                ck.params.insert(k.clone(), v.clone());
            }
            ck.meta.param_count = ck.params.num_values();
        }
        ck.meta
            .extra
            .insert("logit_scale".into(), self.temperature.log_inv.to_string());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, arch: Arch) -> Result<Self> {
        let mut body = ck.clone();
        let mut head = ParamStore::new();
        let mut rest = ParamStore::new();
        for (k, v) in ck.params.iter() {
            if k.starts_with("cls.") {
                head.insert(k.clone(), v.clone());
            } else {
                rest.insert(k.clone(), v.clone());
            }
        }
        body.params = rest;
        Ok(Self {
            model: ImageModel::from_checkpoint(&body, arch)?,
            head: (!head.is_empty()).then_some(head),
            temperature: read_temperature(ck),
        })
    }

    /// Zero-shot scoring through `z`, or the classification head if present.
    pub fn classifier<'a>(&'a self, z: &'a Tensor) -> Box<dyn Classifier + 'a> {
        match &self.head {
            Some(h) => Box::new(HeadClassifier {
                model: &self.model,
                head: h,
            }),
            None => Box::new(ZeroShot {
                model: &self.model,
                classes: z,
            }),
        }
    }
}

struct HeadClassifier<'a> {
    model: &'a ImageModel,
    head: &'a ParamStore,
}

impl Classifier for HeadClassifier<'_> {
    fn num_classes(&self) -> usize {
        self.head.get("cls.b").map_or(0, Tensor::len)
    }

    fn scores(&self, images: &Tensor) -> crate::eval::Result<Tensor> {
        let f = self.model.features(images)?;
        let mut g = Graph::new();
        let p = self.head.bind(&mut g, false);
        let x = g.constant(f);
        let h = g.matmul(x, p["cls.w"])?;
        let h = g.add_row(h, p["cls.b"])?;
        Ok(g.value(h).clone())
    }
}

/// Feature pre-training outcome measured on a held-out pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainStats {
    pub train: StageStats,
    pub heldout_l2_init: f64,
    pub heldout_l2_final: f64,
    pub heldout_cosine: f64,
}

fn mean_row_l2_and_cos(a: &Tensor, b: &Tensor) -> (f64, f64) {
    let n = a.dims2().0;
    let (mut l2, mut cos) = (0.0, 0.0);
    for i in 0..n {
        let (x, y) = (a.row(i), b.row(i));
        l2 += x
            .iter()
            .zip(y)
            .map(|(p, q)| ((p - q) as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        cos += x.iter().zip(y).map(|(p, q)| (p * q) as f64).sum::<f64>();
    }
    (l2 / n as f64, cos / n as f64)
}

/// Pure feature distillation on the general pool: per-batch loss is the
/// summed row distance divided by the batch size.
pub fn pretrain_student(
    arch: Arch,
    opt: &StageOpt,
    teacher: &Teacher,
    pool: &[&Dataset],
    heldout: &Dataset,
    seed: u64,
    log: Log,
) -> Result<(Student, PretrainStats)> {
    if pool.is_empty() {
        return Err(PipelineError::EmptyData("pretrain"));
    }
    let mut student = Student::new(arch, seed);
    let targets: Vec<Tensor> = pool
        .iter()
        .map(|d| teacher.image.encode_image(&d.images()))
        .collect::<std::result::Result<_, _>>()?;
    let held_teacher = teacher.image.encode_image(&heldout.images())?;
    let held_x = heldout.images();
    let (l2_init, _) = mean_row_l2_and_cos(&student.model.encode_image(&held_x)?, &held_teacher);

    let no_crop = StageOpt {
        min_crop: crate::shapes::SIDE,
        ..opt.clone()
    };
    let model = student.model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = optimize(
        "pretrain",
        &mut student.model.params,
        opt,
        log,
        |g, p, _| {
            let (x, _, which) = draw_batch(pool, &no_crop, &mut rng);
            let mut t = Vec::with_capacity(which.len() * D_EMB);
            for &(d, i) in &which {
                t.extend_from_slice(targets[d].row(i));
            }
            let x = g.constant(x);
            let s = model.encode(g, p, x)?;
            let t = g.constant(Tensor::new([which.len(), D_EMB], t)?);
            let l = feature_l2(g, s, t)?;
            Ok(g.scale(l, 1.0 / which.len() as f64))
        },
    )?;
    let (l2_final, cos) = mean_row_l2_and_cos(&student.model.encode_image(&held_x)?, &held_teacher);
    Ok((
        student,
        PretrainStats {
            train,
            heldout_l2_init: l2_init,
            heldout_l2_final: l2_final,
            heldout_cosine: cos,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub opt: StageOpt,
    /// Initial student `1/τ` for the contrastive objectives.
    pub inv_temperature: f32,
    pub learn_temperature: bool,
    /// Softening temperature of the Hinton KD term.
    pub softening: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            opt: StageOpt {
                lr: 3e-3,
                ..Default::default()
            },
            inv_temperature: 14.3,
            learn_temperature: true,
            softening: 4.0,
        }
    }
}

/// Parses a loss spec such as `l2_feature`, `clip`, `l2+mp` or
/// `ce+hinton_kd` into training and distillation tags. In a pair the
/// non-distillation term is the training loss.
pub fn parse_loss(spec: &str, lambda: f32) -> Result<LossConfig> {
    let alias = |s: &str| -> Result<LossTag> {
        match s.trim() {
            "l2" => Ok(LossTag::L2Feature),
            t => t
                .parse()
                .map_err(|_| PipelineError::UnknownLoss(spec.to_string())),
        }
    };
    let parts: Vec<&str> = spec.split('+').collect();
    let distill = |t: LossTag| {
        matches!(
            t,
            LossTag::L2Feature | LossTag::HintonKd | LossTag::ContrastiveImage
        )
    };
    let cfg = match parts.as_slice() {
        [a] => {
            let a = alias(a)?;
            if distill(a) {
                LossConfig {
                    lambda,
                    training: LossTag::None,
                    distillation: a,
                }
            } else {
                LossConfig {
                    lambda,
                    training: a,
                    distillation: LossTag::None,
                }
            }
        }
        [a, b] => {
            let (a, b) = (alias(a)?, alias(b)?);
            let (train, dist) = match (distill(a), distill(b)) {
                (false, true) => (a, b),
                (true, false) => (b, a),
                _ => return Err(PipelineError::UnknownLoss(spec.to_string())),
            };
            LossConfig {
                lambda,
                training: train,
                distillation: dist,
            }
        }
        _ => return Err(PipelineError::UnknownLoss(spec.to_string())),
    };
    if cfg.active().contains(&LossTag::None)
        || (cfg.distillation == LossTag::HintonKd && cfg.training != LossTag::Ce)
    {
        return Err(PipelineError::UnknownLoss(spec.to_string()));
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Fine-tunes `student` on `set` under `loss`, starting from its weights.
/// Each step crops the batch randomly; the teacher sees the same crops.
pub fn finetune_student(
    cfg: &FinetuneConfig,
    loss: &LossConfig,
    mut student: Student,
    teacher: &Teacher,
    set: &Dataset,
    seed: u64,
    log: Log,
) -> Result<(Student, StageStats)> {
    loss.validate()?;
    let active = loss.active();
    let uses = |t: LossTag| active.contains(&t);
    let m = set.num_classes();
    let z = class_text(&teacher.text, &set.spec.classes)?;
    let temp = Temperature::with_inv(cfg.inv_temperature);

    let mut params = student.model.params.clone();
    let with_head = uses(LossTag::Ce);
    if with_head {
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x0063_6c73);
        let d = D_EMB;
        let std = (1.0 / d as f32).sqrt();
        let w = (0..d * m)
            .map(|_| (r.random::<f32>() * 2.0 - 1.0) * std)
            .collect();
        params.insert("cls.w", Tensor::new([d, m], w)?);
        params.insert("cls.b", Tensor::zeros([m]));
    }
    let contrastive = uses(LossTag::Clip) || uses(LossTag::Mp) || uses(LossTag::ContrastiveImage);
    if contrastive && cfg.learn_temperature {
        params.insert(Temperature::PARAM, Tensor::scalar(temp.log_inv));
    }
    let needs_teacher =
        uses(LossTag::L2Feature) || uses(LossTag::ContrastiveImage) || uses(LossTag::HintonKd);
    let model = student.model.clone();
    let teacher_scale = teacher.temperature.inv() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let stats = optimize("finetune", &mut params, &cfg.opt, log, |g, p, _| {
        let (x, labels, _) = draw_batch(&[set], &cfg.opt, &mut rng);
        let n = labels.len();
        let t_emb = if needs_teacher {
            Some(teacher.image.encode_image(&x)?)
        } else {
            None
        };
        let xv = g.constant(x);
        let feats = model.forward(g, p, xv)?;
        let s = g.l2_normalize(feats)?;
        let t = temp.bind_from(g, p);
        let mut parts = BTreeMap::new();
        for tag in &active {
            let v = match tag {
                LossTag::L2Feature => {
                    let tv = g.constant(t_emb.clone().expect("teacher"));
                    let l = feature_l2(g, s, tv)?;
                    g.scale(l, 1.0 / n as f64)
                }
                LossTag::Clip => {
                    let zc = g.constant(z.clone());
                    let txt = g.gather_rows(zc, &labels)?;
                    clip_loss(g, s, txt, t)?
                }
                LossTag::Mp => {
                    let zc = g.constant(z.clone());
                    multi_positive_loss(g, s, zc, &labels, t)?
                }
                LossTag::ContrastiveImage => {
                    let tv = g.constant(t_emb.clone().expect("teacher"));
                    let l = contrastive_image_loss(g, s, tv, t)?;
                    g.scale(l, 1.0 / n as f64)
                }
                LossTag::Ce => {
                    let h = g.matmul(feats, p["cls.w"])?;
                    let h = g.add_row(h, p["cls.b"])?;
                    cross_entropy_head(g, h, &labels)?
                }
                LossTag::HintonKd => {
                    let te = t_emb.as_ref().expect("teacher");
                    let mut tl = similarities(te, &z)?;
                    tl.data_mut()
                        .iter_mut()
                        .for_each(|v| *v *= teacher_scale as f32);
                    let tl = g.constant(tl);
                    let h = g.matmul(feats, p["cls.w"])?;
                    let h = g.add_row(h, p["cls.b"])?;
                    hinton_kd(g, h, tl, cfg.softening)?
                }
                LossTag::None => continue,
            };
            parts.insert(*tag, v);
        }
        Ok(combined_loss(g, loss, &parts)?)
    })?;

    if let Some(s) = params.get(Temperature::PARAM) {
        student.temperature = Temperature {
            log_inv: s.item(),
            ..temp
        };
    }
    let mut body = ParamStore::new();
    let mut head = ParamStore::new();
    for (k, v) in params.iter() {
        if k.starts_with("cls.") {
            head.insert(k.clone(), v.clone());
        } else if k != Temperature::PARAM {
            body.insert(k.clone(), v.clone());
        }
    }
    student.model.params = body;
    student.head = with_head.then_some(head);
    Ok((student, stats))
}
