//! Zero-shot classification, top-k accuracy, linear probing and the
//! robustness protocols.
//!
//! Report CSV columns, in order:
//!
//! ```text
//! model, testset, condition, n, top1, top5, class_0 … class_{M-1}
//! ```
//!
//! Accuracies are percentages rounded to one decimal on output only.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::cross_entropy_head;
use crate::model::{ImageModel, ModelError, TextTower};
use crate::prompts::{prompt_ensemble, zero_shot_prompt, PromptError};
use crate::shapes::{ClassDef, CorruptionKind, Dataset, ShapesError};
use crate::tensor::{AdamW, AdamWConfig, Graph, ParamStore, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("zero-shot classification needs at least one class")]
    NoClasses,
    #[error("linear probe needs at least two classes, got {0}")]
    SingleClass(usize),
    #[error("{0} labels for {1} samples")]
    LabelCount(usize, usize),
    #[error("k = {k} exceeds the {m} classes")]
    KTooLarge { k: usize, m: usize },
    #[error("test set `{0}` uses a different class list")]
    ClassMismatch(String),
    #[error("embedding widths differ: images {0}, classes {1}")]
    Width(usize, usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Shapes(#[from] ShapesError),
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Zero-shot prompt embeddings, one row per class.
pub fn class_embeddings(tower: &TextTower, classes: &[ClassDef]) -> Result<Tensor> {
    let prompts: Vec<String> = classes
        .iter()
        .map(|c| zero_shot_prompt(&c.name, &c.superclass))
        .collect::<std::result::Result<_, _>>()?;
    let refs: Vec<&str> = prompts.iter().map(String::as_str).collect();
    Ok(tower.embed(&refs)?)
}

/// Per class, the mean of the normalised template embeddings, renormalised.
pub fn ensemble_embeddings(
    tower: &TextTower,
    classes: &[ClassDef],
    templates: &[&str],
) -> Result<Tensor> {
    let mut out = Vec::new();
    let mut width = 0;
    for c in classes {
        let prompts = prompt_ensemble(templates, &c.name, &c.superclass)?;
        let refs: Vec<&str> = prompts.iter().map(String::as_str).collect();
        let e = tower.embed(&refs)?;
        width = e.shape()[1];
        let mut mean = vec![0.0f64; width];
        for r in 0..e.shape()[0] {
            for (m, v) in mean.iter_mut().zip(e.row(r)) {
                *m += *v as f64;
            }
        }
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        out.extend(mean.iter().map(|v| (v / norm) as f32));
    }
    if classes.is_empty() {
        return Err(EvalError::NoClasses);
    }
    Ok(Tensor::new([classes.len(), width], out)?)
}

/// `images · classesᵀ`, shape `(N, M)`.
pub fn similarities(images: &Tensor, classes: &Tensor) -> Result<Tensor> {
    let (n, d) = images.dims2();
    let (m, dz) = classes.dims2();
    if m == 0 || classes.is_empty() {
        return Err(EvalError::NoClasses);
    }
    if d != dz {
        return Err(EvalError::Width(d, dz));
    }
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let a = images.row(i);
        for k in 0..m {
            out.push(
                a.iter()
                    .zip(classes.row(k))
                    .map(|(x, y)| *x as f64 * *y as f64)
                    .sum::<f64>() as f32,
            );
        }
    }
    Ok(Tensor::new([n, m], out)?)
}

/// Class indices of each row ordered by decreasing score; equal scores keep
/// the lower class index first.
pub fn rank_classes(scores: &Tensor) -> Vec<Vec<usize>> {
    let (n, m) = scores.dims2();
    (0..n)
        .map(|i| {
            let row = scores.row(i);
            let mut idx: Vec<usize> = (0..m).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            idx
        })
        .collect()
}

/// Top-1 predictions by argmax similarity, ties to the lowest index.
pub fn zero_shot_classify(images: &Tensor, classes: &Tensor) -> Result<Vec<usize>> {
    Ok(rank_classes(&similarities(images, classes)?)
        .into_iter()
        .map(|r| r[0])
        .collect())
}

pub fn topk_accuracy(rankings: &[Vec<usize>], labels: &[usize], k: usize) -> Result<f64> {
    if rankings.len() != labels.len() {
        return Err(EvalError::LabelCount(labels.len(), rankings.len()));
    }
    if let Some(r) = rankings.first() {
        if k > r.len() {
            return Err(EvalError::KTooLarge { k, m: r.len() });
        }
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let hits = rankings
        .iter()
        .zip(labels)
        .filter(|(r, l)| r[..k].contains(l))
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub best_reg: f64,
    pub val_accuracy: Vec<(f64, f64)>,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub reg_grid: Vec<f64>,
    pub val_fraction: f64,
    pub steps: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            reg_grid: vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0],
            val_fraction: 0.2,
            steps: 500,
            lr: 1e-2,
            seed: 0,
        }
    }
}

/// Multinomial logistic regression weights and the standardisation they
/// were fitted under.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearClassifier {
    fn standardize(&self, x: &Tensor) -> Tensor {
        let (n, d) = x.dims2();
        let mut out = x.data().to_vec();
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = (out[i * d + j] - self.mean[j]) / self.std[j];
            }
        }
        Tensor::new([n, d], out).expect("same shape")
    }

    pub fn scores(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(self.standardize(x));
        let w = g.constant(self.w.clone());
        let b = g.constant(self.b.clone());
        let h = g.matmul(xv, w)?;
        let h = g.add_row(h, b)?;
        Ok(g.value(h).clone())
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let r = rank_classes(&self.scores(x)?);
        topk_accuracy(&r, labels, 1)
    }
}

fn select_rows(x: &Tensor, idx: &[usize]) -> Tensor {
    let (_, d) = x.dims2();
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(x.row(i));
    }
    Tensor::new([idx.len(), d], out).expect("rows")
}

/// Fits a linear classifier with penalty `reg · ‖W‖²` by full-batch AdamW.
pub fn fit_logistic(
    x: &Tensor,
    labels: &[usize],
    classes: usize,
    reg: f64,
    cfg: &ProbeConfig,
) -> Result<LinearClassifier> {
    let (n, d) = x.dims2();
    let mut mean = vec![0.0f32; d];
    let mut std = vec![0.0f32; d];
    for j in 0..d {
        let m = (0..n).map(|i| x.data()[i * d + j] as f64).sum::<f64>() / n as f64;
        let v = (0..n)
            .map(|i| (x.data()[i * d + j] as f64 - m).powi(2))
            .sum::<f64>()
            / n as f64;
        mean[j] = m as f32;
        std[j] = (v.sqrt() as f32).max(1e-6);
    }
    let mut clf = LinearClassifier {
        mean,
        std,
        w: Tensor::zeros([d, classes]),
        b: Tensor::zeros([classes]),
    };
    let xs = clf.standardize(x);
    let mut params = ParamStore::new();
    params.insert("probe.b", clf.b.clone());
    params.insert("probe.w", clf.w.clone());
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    for _ in 0..cfg.steps {
        let mut g = Graph::new();
        let p = params.bind(&mut g, true);
        let xv = g.constant(xs.clone());
        let h = g.matmul(xv, p["probe.w"])?;
        let h = g.add_row(h, p["probe.b"])?;
        let ce = cross_entropy_head(&mut g, h, labels)?;
        let sq = g.mul(p["probe.w"], p["probe.w"])?;
        let pen = g.sum(sq);
        let pen = g.scale(pen, reg);
        let loss = g.add(ce, pen)?;
        g.backward(loss)?;
        let grads = ParamStore::collect_grads(&g, &p);
        opt.step(&mut params, &grads)?;
    }
    clf.w = params.get("probe.w").expect("bound").clone();
    clf.b = params.get("probe.b").expect("bound").clone();
    Ok(clf)
}

/// Sweeps the regularisation grid on a held-out part of the training
/// features and reports test accuracy of the best setting.
pub fn linear_probe(
    train: &Tensor,
    train_labels: &[usize],
    test: &Tensor,
    test_labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<(LinearClassifier, ProbeReport)> {
    if train_labels.len() != train.dims2().0 {
        return Err(EvalError::LabelCount(train_labels.len(), train.dims2().0));
    }
    if test_labels.len() != test.dims2().0 {
        return Err(EvalError::LabelCount(test_labels.len(), test.dims2().0));
    }
    let classes = train_labels
        .iter()
        .chain(test_labels)
        .max()
        .map_or(0, |m| m + 1);
    let distinct: std::collections::BTreeSet<_> = train_labels.iter().collect();
    if distinct.len() < 2 {
        return Err(EvalError::SingleClass(distinct.len()));
    }
    let mut idx: Vec<usize> = (0..train_labels.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_val = ((idx.len() as f64 * cfg.val_fraction).round() as usize).clamp(1, idx.len() - 1);
    let (val_idx, fit_idx) = idx.split_at(n_val);
    let fit_x = select_rows(train, fit_idx);
    let fit_y: Vec<usize> = fit_idx.iter().map(|&i| train_labels[i]).collect();
    let val_x = select_rows(train, val_idx);
    let val_y: Vec<usize> = val_idx.iter().map(|&i| train_labels[i]).collect();

    let mut best: Option<(f64, f64, LinearClassifier)> = None;
    let mut val_accuracy = Vec::new();
    for &reg in &cfg.reg_grid {
        let clf = fit_logistic(&fit_x, &fit_y, classes, reg, cfg)?;
        let acc = clf.accuracy(&val_x, &val_y)?;
        val_accuracy.push((reg, acc));
        if best.as_ref().is_none_or(|b| acc > b.1) {
            best = Some((reg, acc, clf));
        }
    }
    let (best_reg, _, clf) = best.ok_or(EvalError::SingleClass(0))?;
    let test_accuracy = clf.accuracy(test, test_labels)?;
    Ok((
        clf,
        ProbeReport {
            best_reg,
            val_accuracy,
            test_accuracy,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub testset: String,
    pub condition: String,
    pub n: usize,
    pub top1: f64,
    pub top5: f64,
    pub per_class: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_corruption: Option<BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeReport>,
}

/// Anything that scores images against `M` classes.
pub trait Classifier {
    fn num_classes(&self) -> usize;
    /// Scores `(N, M)`; higher is more likely.
    fn scores(&self, images: &Tensor) -> Result<Tensor>;
}

/// Image encoder plus precomputed class embeddings.
pub struct ZeroShot<'a> {
    pub model: &'a ImageModel,
    pub classes: &'a Tensor,
}

impl Classifier for ZeroShot<'_> {
    fn num_classes(&self) -> usize {
        self.classes.dims2().0
    }

    fn scores(&self, images: &Tensor) -> Result<Tensor> {
        similarities(&self.model.encode_image(images)?, self.classes)
    }
}

/// Report of `clf` on `set`.
pub fn evaluate(
    clf: &dyn Classifier,
    set: &Dataset,
    model_id: &str,
    testset: &str,
) -> Result<EvalReport> {
    let condition = match set.spec.corruption {
        Some(c) if c.severity > 0 => format!("{}_s{}", c.kind, c.severity),
        _ => "clean".to_string(),
    };
    report_from_scores(
        &clf.scores(&set.images())?,
        &set.labels(),
        model_id,
        testset,
        &condition,
    )
}

pub fn report_from_scores(
    scores: &Tensor,
    labels: &[usize],
    model_id: &str,
    testset: &str,
    condition: &str,
) -> Result<EvalReport> {
    let ranks = rank_classes(scores);
    let m = scores.dims2().1;
    if m == 0 {
        return Err(EvalError::NoClasses);
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= m) {
        return Err(EvalError::Loss(crate::losses::LossError::LabelOutOfRange {
            label: l,
            classes: m,
        }));
    }
    let mut hit = vec![0usize; m];
    let mut count = vec![0usize; m];
    for (r, &l) in ranks.iter().zip(labels) {
        count[l] += 1;
        hit[l] += (r[0] == l) as usize;
    }
    Ok(EvalReport {
        model: model_id.into(),
        testset: testset.into(),
        condition: condition.into(),
        n: labels.len(),
        top1: topk_accuracy(&ranks, labels, 1)?,
        top5: topk_accuracy(&ranks, labels, 5.min(m))?,
        per_class: hit
            .iter()
            .zip(&count)
            .map(|(&h, &c)| if c == 0 { 0.0 } else { h as f64 / c as f64 })
            .collect(),
        per_corruption: None,
        probe: None,
    })
}

/// Top-1 per corruption kind at `severity`; the report's `top1`/`top5` are
/// means over kinds.
pub fn corruption_sweep(
    clf: &dyn Classifier,
    set: &Dataset,
    kinds: &[CorruptionKind],
    severity: u8,
    model_id: &str,
    testset: &str,
) -> Result<EvalReport> {
    let mut per = BTreeMap::new();
    let (mut t1, mut t5) = (0.0, 0.0);
    let mut per_class = vec![0.0; clf.num_classes()];
    for &k in kinds {
        let r = evaluate(clf, &set.corrupted(k, severity)?, model_id, testset)?;
        per.insert(k.as_str().to_string(), r.top1);
        t1 += r.top1;
        t5 += r.top5;
        per_class
            .iter_mut()
            .zip(&r.per_class)
            .for_each(|(a, b)| *a += b);
    }
    let n = kinds.len().max(1) as f64;
    per_class.iter_mut().for_each(|a| *a /= n);
    Ok(EvalReport {
        model: model_id.into(),
        testset: testset.into(),
        condition: format!("corrupted_s{severity}"),
        n: set.len(),
        top1: t1 / n,
        top5: t5 / n,
        per_class,
        per_corruption: Some(per),
        probe: None,
    })
}

/// One zero-shot report per named test set; every set must share `classes`.
pub fn cross_domain_eval(
    clf: &dyn Classifier,
    classes: &[ClassDef],
    sets: &[(&str, &Dataset)],
    model_id: &str,
) -> Result<Vec<EvalReport>> {
    sets.iter()
        .map(|(name, set)| {
            if set.spec.classes != classes {
                return Err(EvalError::ClassMismatch(name.to_string()));
            }
            evaluate(clf, set, model_id, name)
        })
        .collect()
}

/// `top1(a) − top1(b)` for two named test sets of one model.
pub fn gap(reports: &[EvalReport], model: &str, a: &str, b: &str) -> Option<f64> {
    let find = |t: &str| {
        reports
            .iter()
            .find(|r| r.model == model && r.testset == t)
            .map(|r| r.top1)
    };
    Some(find(a)? - find(b)?)
}

fn pct(x: f64) -> String {
    format!("{:.1}", x * 100.0)
}

/// Writes reports as CSV with the documented column order.
pub fn write_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let m = reports.iter().map(|r| r.per_class.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["model", "testset", "condition", "n", "top1", "top5"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..m).map(|c| format!("class_{c}")));
    w.write_record(&header)?;
    for r in reports {
        let mut row = vec![
            r.model.clone(),
            r.testset.clone(),
            r.condition.clone(),
            r.n.to_string(),
            pct(r.top1),
            pct(r.top5),
        ];
        row.extend((0..m).map(|c| r.per_class.get(c).map_or(String::new(), |&v| pct(v))));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f32]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn exact_match_wins() {
        let z = t(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let i = t(&[&[0.0, 1.0, 0.0]]);
        assert_eq!(zero_shot_classify(&i, &z).unwrap(), vec![1]);
    }

    #[test]
    fn ties_go_to_class_zero() {
        let z = t(&[&[0.6, 0.8], &[0.6, 0.8], &[0.6, 0.8]]);
        let i = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(zero_shot_classify(&i, &z).unwrap(), vec![0, 0]);
    }

    #[test]
    fn hand_set_cosines() {
        let scores = t(&[&[0.9, 0.4]]);
        let r = rank_classes(&scores);
        assert_eq!(r, vec![vec![0, 1]]);
        assert_eq!(topk_accuracy(&r, &[1], 2).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&r, &[1], 1).unwrap(), 0.0);
    }

    #[test]
    fn crafted_top2() {
        let r = vec![vec![0, 1, 2], vec![1, 2, 0], vec![2, 0, 1], vec![0, 2, 1]];
        assert_eq!(topk_accuracy(&r, &[1, 2, 1, 2], 2).unwrap(), 0.75);
        assert_eq!(topk_accuracy(&r, &[1, 2, 1, 2], 3).unwrap(), 1.0);
        assert!(topk_accuracy(&r, &[0, 0, 0, 0], 4).is_err());
    }

    #[test]
    fn no_classes() {
        assert!(zero_shot_classify(&t(&[&[1.0]]), &Tensor::zeros([1, 2])).is_err());
    }
}
