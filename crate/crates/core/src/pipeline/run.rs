//! Staged execution of an [`ExperimentConfig`] with checkpoint caching.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::config::{CorruptionSel, ExperimentConfig, RunSpec, Stage, TestSpec};
use super::report::{self, GateResult, Summary};
use super::train::{
    class_text, finetune_student, parse_loss, pretrain_student, train_teacher, PretrainStats,
    StageStats, Student, Teacher,
};
use super::{PipelineError, Result};
use crate::eval::{corruption_sweep, evaluate, linear_probe, EvalReport, ProbeConfig};
use crate::model::{Checkpoint, TextTower};
use crate::shapes::{
    make_dataset, seed_hash, CorruptionKind, Dataset, DatasetSpec, Diversity, Domain, SpuriousMode,
};
use crate::tensor::Tensor;

/// Which stages to execute; `None` uses the configured list.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub stages: Option<Vec<Stage>>,
    /// Mirror the run log on stderr.
    pub echo: bool,
}

/// Appends to `run.log` and counts optimisation steps actually taken.
pub struct RunLog {
    file: File,
    echo: bool,
    pub trained_steps: usize,
}

impl RunLog {
    pub fn create(path: &Path, echo: bool) -> Result<Self> {
        if let Some(d) = path.parent() {
            std::fs::create_dir_all(d)?;
        }
        Ok(Self {
            file: File::create(path)?,
            echo,
            trained_steps: 0,
        })
    }

    pub fn line(&mut self, s: &str) {
        if self.echo {
            eprintln!("{s}");
        }
        let _ = writeln!(self.file, "{s}");
    }
}

fn short_hash(v: &serde_json::Value) -> String {
    let d = Sha256::digest(v.to_string().as_bytes());
    hex::encode(&d[..8])
}

/// SHA-256 over the text tower's parameter bytes.
pub fn text_tower_hash(t: &TextTower) -> String {
    let mut h = Sha256::new();
    for (k, v) in t.params.iter() {
        h.update(k.as_bytes());
        for x in v.data() {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn domain_id(d: Domain) -> u64 {
    d as u64
}

fn spurious_id(s: SpuriousMode) -> u64 {
    s as u64
}

fn diversity_id(d: Diversity) -> u64 {
    d as u64
}

/// Datasets of one replicate, rendered on first use.
struct World<'a> {
    cfg: &'a ExperimentConfig,
    seed: u64,
    cache: HashMap<String, Dataset>,
}

impl<'a> World<'a> {
    fn new(cfg: &'a ExperimentConfig, seed: u64) -> Self {
        Self {
            cfg,
            seed,
            cache: HashMap::new(),
        }
    }

    fn spec(&self, domain: Domain, per_class: usize, split: &[u64]) -> DatasetSpec {
        let mut parts = vec![self.seed];
        parts.extend_from_slice(split);
        DatasetSpec {
            domain,
            per_class,
            split_seed: seed_hash(&parts),
            options: self.cfg.data.options,
            style: self.cfg.data.style,
            ..Default::default()
        }
    }

    fn get(&mut self, key: &str, spec: impl FnOnce(&Self) -> DatasetSpec) -> Result<&Dataset> {
        if !self.cache.contains_key(key) {
            let d = make_dataset(&spec(self))?;
            self.cache.insert(key.to_string(), d);
        }
        Ok(&self.cache[key])
    }

    fn fixed(&mut self, key: &str) -> Result<&Dataset> {
        let d = &self.cfg.data;
        let (domain, n, role) = match key {
            "teacher_natural" => (Domain::Natural, d.teacher_per_class, 1),
            "teacher_synthetic" => (Domain::Synthetic, d.teacher_per_class, 2),
            "pool_natural" => (Domain::Natural, d.pool_per_class, 3),
            "pool_synthetic" => (Domain::Synthetic, d.pool_per_class, 4),
            "heldout" => (Domain::Natural, d.heldout_per_class, 5),
            "gate_natural" => (Domain::Natural, d.test_per_class, 6),
            "gate_synthetic" => (Domain::Synthetic, d.test_per_class, 7),
            _ => unreachable!("unknown fixed dataset {key}"),
        };
        self.get(key, |w| w.spec(domain, n, &[role]))
    }

    fn train_set(&mut self, run: &RunSpec) -> Result<&Dataset> {
        let key = format!(
            "train:{:?}:{:?}:{:?}",
            run.domain, run.spurious, run.diversity
        );
        let n = self.cfg.data.finetune_per_class;
        self.get(&key, |w| {
            let ids = [
                8,
                domain_id(run.domain),
                spurious_id(run.spurious),
                diversity_id(run.diversity),
            ];
            DatasetSpec {
                spurious: run.spurious,
                diversity: run.diversity,
                ..w.spec(run.domain, n, &ids)
            }
        })
    }

    fn test_set(&mut self, t: &TestSpec) -> Result<&Dataset> {
        if let Some(r) = &t.train_of {
            let run = self.cfg.run(r).expect("validated").clone();
            return self.train_set(&run);
        }
        let key = format!("test:{:?}:{:?}:{:?}", t.domain, t.spurious, t.diversity);
        let n = self.cfg.data.test_per_class;
        self.get(&key, |w| {
            let ids = [
                9,
                domain_id(t.domain),
                spurious_id(t.spurious),
                diversity_id(t.diversity),
            ];
            DatasetSpec {
                spurious: t.spurious,
                diversity: t.diversity,
                ..w.spec(t.domain, n, &ids)
            }
        })
    }
}

/// Clean zero-shot and probe accuracy of a teacher on fresh test sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSummary {
    pub seed: u64,
    pub natural_top1: f64,
    pub synthetic_top1: f64,
    pub probe_top1: f64,
    pub train: StageStats,
    pub checkpoint: String,
    pub text_tower_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub seed: u64,
    pub stats: PretrainStats,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub seed: u64,
    pub run: String,
    pub train: StageStats,
    /// Passes over the fine-tuning set implied by the step budget.
    pub epochs: f64,
    pub checkpoint: String,
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    stages: Vec<Stage>,
    dir: PathBuf,
    log: RunLog,
    seconds: BTreeMap<String, f64>,
}

impl Runner<'_> {
    fn ckpt_path(&self, name: &str) -> PathBuf {
        self.dir.join("checkpoints").join(format!("{name}.zsdk"))
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.dir).unwrap_or(p).display().to_string()
    }

    fn wants(&self, s: Stage) -> bool {
        self.stages.contains(&s)
    }

    fn time(&mut self, stage: Stage, t: Instant) {
        *self.seconds.entry(stage.to_string()).or_default() += t.elapsed().as_secs_f64();
    }

    fn train_log(&mut self, seed: u64) -> impl FnMut(&str) + '_ {
        let log = &mut self.log;
        move |s: &str| log.line(&format!("[seed {seed}] {s}"))
    }

    fn missing(&self, stage: Stage, needed_by: &str, path: &Path) -> PipelineError {
        PipelineError::MissingDependency {
            stage: stage.to_string(),
            needed_by: needed_by.into(),
            path: path.to_path_buf(),
        }
    }

    fn teacher(
        &mut self,
        world: &mut World,
        needed_by: &str,
    ) -> Result<(Teacher, String, TeacherSummary)> {
        let t0 = Instant::now();
        let cfg = self.cfg;
        let seed = world.seed;
        let hash = short_hash(&json!({
            "stage": "teacher", "seed": seed, "data": cfg.data, "teacher": cfg.teacher,
        }));
        let (ip, tp) = (
            self.ckpt_path(&format!("teacher-{hash}-image")),
            self.ckpt_path(&format!("teacher-{hash}-text")),
        );
        let (teacher, stats) = if ip.exists() && tp.exists() {
            let (ic, tc) = (Checkpoint::load(&ip)?, Checkpoint::load(&tp)?);
            let t = Teacher::from_checkpoints(&ic, &tc, cfg.teacher.arch)?;
            self.log.line(&format!(
                "[seed {seed}] teacher cached {} steps=0",
                self.rel(&ip)
            ));
            (t, read_stats(&ic, "stats")?)
        } else if self.wants(Stage::Teacher) {
            let sets = [
                world.fixed("teacher_natural")?.clone(),
                world.fixed("teacher_synthetic")?.clone(),
            ];
            let refs: Vec<&Dataset> = sets.iter().collect();
            let (t, stats) = {
                let mut log = self.train_log(seed);
                train_teacher(&cfg.teacher, &refs, seed_hash(&[seed, 100]), &mut log)?
            };
            self.log.trained_steps += stats.steps;
            let (mut ic, tc) = t.checkpoints(seed);
            ic.meta
                .extra
                .insert("stats".into(), serde_json::to_string(&stats)?);
            ic.save(&ip)?;
            tc.save(&tp)?;
            self.log.line(&format!(
                "[seed {seed}] teacher trained steps={} -> {}",
                stats.steps,
                self.rel(&ip)
            ));
            (t, stats)
        } else {
            return Err(self.missing(Stage::Teacher, needed_by, &ip));
        };

        let z = class_text(&teacher.text, &world.fixed("gate_natural")?.spec.classes)?;
        let zs = teacher.zero_shot(&z);
        let nat = evaluate(&zs, world.fixed("gate_natural")?, "teacher", "natural")?.top1;
        let syn = evaluate(&zs, world.fixed("gate_synthetic")?, "teacher", "synthetic")?.top1;
        let probe = teacher_probe(&teacher, world, seed)?;
        let summary = TeacherSummary {
            seed,
            natural_top1: nat,
            synthetic_top1: syn,
            probe_top1: probe,
            train: stats,
            checkpoint: self.rel(&ip),
            text_tower_sha256: text_tower_hash(&teacher.text),
        };
        self.log.line(&format!(
            "[seed {seed}] teacher natural={nat:.4} synthetic={syn:.4} probe={probe:.4}"
        ));
        self.time(Stage::Teacher, t0);
        let floor = cfg.teacher.floor;
        if nat < floor || syn < floor || probe < cfg.teacher.probe_floor {
            return Err(PipelineError::Gate {
                stage: "teacher".into(),
                message: format!(
                    "zero-shot natural {nat:.3}, synthetic {syn:.3} (floor {floor}); probe {probe:.3} (floor {})",
                    cfg.teacher.probe_floor
                ),
            });
        }
        Ok((teacher, hash, summary))
    }

    fn pretrain(
        &mut self,
        world: &mut World,
        teacher: &Teacher,
        parent: &str,
        needed_by: &str,
    ) -> Result<(Student, String, PretrainSummary)> {
        let t0 = Instant::now();
        let cfg = self.cfg;
        let seed = world.seed;
        let hash = short_hash(&json!({
            "stage": "pretrain", "parent": parent, "seed": seed, "data": cfg.data,
            "student": cfg.student, "pretrain": cfg.pretrain,
        }));
        let path = self.ckpt_path(&format!("pretrain-{hash}"));
        let arch = cfg.student.arch;
        let (student, stats) = if path.exists() {
            let ck = Checkpoint::load(&path)?;
            self.log.line(&format!(
                "[seed {seed}] pretrain cached {} steps=0",
                self.rel(&path)
            ));
            (
                Student::from_checkpoint(&ck, arch)?,
                read_stats(&ck, "stats")?,
            )
        } else if self.wants(Stage::Pretrain) {
            let pool = [
                world.fixed("pool_natural")?.clone(),
                world.fixed("pool_synthetic")?.clone(),
            ];
            let refs: Vec<&Dataset> = pool.iter().collect();
            let held = world.fixed("heldout")?.clone();
            let (s, stats) = {
                let mut log = self.train_log(seed);
                pretrain_student(
                    arch,
                    &cfg.pretrain.opt,
                    teacher,
                    &refs,
                    &held,
                    seed_hash(&[seed, 101]),
                    &mut log,
                )?
            };
            self.log.trained_steps += stats.train.steps;
            let mut ck = s.to_checkpoint(seed, "pretrain");
            ck.meta
                .extra
                .insert("stats".into(), serde_json::to_string(&stats)?);
            ck.save(&path)?;
            self.log.line(&format!(
                "[seed {seed}] pretrain trained steps={} -> {}",
                stats.train.steps,
                self.rel(&path)
            ));
            (s, stats)
        } else {
            return Err(self.missing(Stage::Pretrain, needed_by, &path));
        };
        let drop = 1.0 - stats.train.last_loss as f64 / stats.train.first_loss as f64;
        self.log.line(&format!(
            "[seed {seed}] pretrain heldout_l2 {:.4}->{:.4} cosine={:.4} loss_drop={drop:.3}",
            stats.heldout_l2_init, stats.heldout_l2_final, stats.heldout_cosine
        ));
        self.time(Stage::Pretrain, t0);
        let p = &cfg.pretrain;
        if !(stats.heldout_l2_final < stats.heldout_l2_init)
            || drop < p.min_drop
            || stats.heldout_cosine <= p.min_cosine
        {
            return Err(PipelineError::Gate {
                stage: "pretrain".into(),
                message: format!(
                    "held-out ℒ₂ {:.4} -> {:.4}, loss drop {drop:.3} (min {}), cosine {:.3} (min {})",
                    stats.heldout_l2_init, stats.heldout_l2_final, p.min_drop, stats.heldout_cosine, p.min_cosine
                ),
            });
        }
        let summary = PretrainSummary {
            seed,
            stats,
            checkpoint: self.rel(&path),
        };
        Ok((student, hash, summary))
    }

    fn finetune(
        &mut self,
        world: &mut World,
        teacher: &Teacher,
        pretrained: &Student,
        parent: &str,
        run: &RunSpec,
    ) -> Result<(Student, FinetuneSummary)> {
        let t0 = Instant::now();
        let cfg = self.cfg;
        let seed = world.seed;
        let hash = short_hash(&json!({
            "stage": "finetune", "parent": parent, "seed": seed, "data": cfg.data,
            "finetune": cfg.finetune, "loss": run.loss, "lambda": run.lambda, "domain": run.domain,
            "spurious": run.spurious, "diversity": run.diversity,
        }));
        let path = self.ckpt_path(&format!("finetune-{}-{hash}", run.name));
        let set_len = world.train_set(run)?.len();
        let (student, stats) = if path.exists() {
            let ck = Checkpoint::load(&path)?;
            self.log.line(&format!(
                "[seed {seed}] finetune {} cached {} steps=0",
                run.name,
                self.rel(&path)
            ));
            (
                Student::from_checkpoint(&ck, cfg.student.arch)?,
                read_stats(&ck, "stats")?,
            )
        } else if self.wants(Stage::Finetune) {
            let set = world.train_set(run)?.clone();
            let loss = parse_loss(&run.loss, run.lambda)?;
            let (s, stats) = {
                let mut log = self.train_log(seed);
                let mut tagged = |s: &str| log(&format!("{} {s}", run.name));
                let fs = seed_hash(&[seed, 102]);
                finetune_student(
                    &cfg.finetune,
                    &loss,
                    pretrained.clone(),
                    teacher,
                    &set,
                    fs,
                    &mut tagged,
                )?
            };
            self.log.trained_steps += stats.steps;
            let mut ck = s.to_checkpoint(seed, "finetune");
            ck.meta
                .extra
                .insert("stats".into(), serde_json::to_string(&stats)?);
            ck.meta.extra.insert("loss".into(), run.loss.clone());
            ck.meta
                .extra
                .insert("epochs".into(), format!("{:.2}", epochs(cfg, set_len)));
            ck.save(&path)?;
            self.log.line(&format!(
                "[seed {seed}] finetune {} trained steps={} -> {}",
                run.name,
                stats.steps,
                self.rel(&path)
            ));
            (s, stats)
        } else {
            return Err(self.missing(Stage::Finetune, "eval", &path));
        };
        self.time(Stage::Finetune, t0);
        let summary = FinetuneSummary {
            seed,
            run: run.name.clone(),
            train: stats,
            epochs: epochs(cfg, set_len),
            checkpoint: self.rel(&path),
        };
        Ok((student, summary))
    }

    fn check_text(&self, teacher: &Teacher, expected: &str, after: &str) -> Result<()> {
        let h = text_tower_hash(&teacher.text);
        if h != expected {
            return Err(PipelineError::TextTowerChanged {
                after: after.into(),
            });
        }
        Ok(())
    }
}

fn epochs(cfg: &ExperimentConfig, set_len: usize) -> f64 {
    (cfg.finetune.opt.steps * cfg.finetune.opt.batch) as f64 / set_len.max(1) as f64
}

fn read_stats<T: for<'de> Deserialize<'de>>(ck: &Checkpoint, key: &str) -> Result<T> {
    let s = ck.meta.extra.get(key).ok_or_else(|| PipelineError::Gate {
        stage: ck.meta.stage.clone(),
        message: format!("cached checkpoint lacks `{key}` metadata"),
    })?;
    Ok(serde_json::from_str(s)?)
}

/// Linear probe on teacher features: clean teacher training data against
/// the clean gate test sets of both domains.
fn teacher_probe(teacher: &Teacher, world: &mut World, seed: u64) -> Result<f64> {
    let mut feats = |keys: &[&str]| -> Result<(Tensor, Vec<usize>)> {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for k in keys {
            let d = world.fixed(k)?;
            let f = teacher.image.features(&d.images())?;
            for i in 0..d.len() {
                rows.push(f.row(i).to_vec());
            }
            labels.extend(d.labels());
        }
        Ok((Tensor::from_rows(&rows)?, labels))
    };
    let (x, y) = feats(&["teacher_natural", "teacher_synthetic"])?;
    let (xt, yt) = feats(&["gate_natural", "gate_synthetic"])?;
    let cfg = ProbeConfig {
        seed,
        ..Default::default()
    };
    let (_, r) = linear_probe(&x, &y, &xt, &yt, &cfg)?;
    Ok(r.test_accuracy)
}

fn eval_one(
    clf: &dyn crate::eval::Classifier,
    set: &Dataset,
    t: &TestSpec,
    model: &str,
) -> Result<EvalReport> {
    Ok(match t.corruption {
        None => evaluate(clf, set, model, &t.name)?,
        Some(CorruptionSel::All) => {
            corruption_sweep(clf, set, &CorruptionKind::ALL, t.severity, model, &t.name)?
        }
        Some(CorruptionSel::Kind(k)) => {
            evaluate(clf, &set.corrupted(k, t.severity)?, model, &t.name)?
        }
    })
}

/// Runs the configured stages for every replicate and writes the reports.
/// Returns the summary; gate failures are recorded, not raised.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Summary> {
    let dir = cfg.out.clone();
    std::fs::create_dir_all(dir.join("checkpoints"))?;
    std::fs::create_dir_all(dir.join("reports"))?;
    let stages = opts.stages.clone().unwrap_or_else(|| cfg.stages.clone());
    let mut r = Runner {
        cfg,
        stages: stages.clone(),
        dir: dir.clone(),
        log: RunLog::create(&dir.join("run.log"), opts.echo)?,
        seconds: BTreeMap::new(),
    };
    let last = stages.iter().max().copied().unwrap_or(Stage::Teacher);
    r.log.line(&format!(
        "experiment {} seeds={:?} stages={:?}",
        cfg.name,
        cfg.seeds(),
        stages.iter().map(|s| s.as_str()).collect::<Vec<_>>()
    ));

    let mut summary = Summary {
        name: cfg.name.clone(),
        seeds: cfg.seeds(),
        ..Default::default()
    };
    let mut sums: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    for seed in cfg.seeds() {
        let mut world = World::new(cfg, seed);
        let (teacher, th, ts) = r.teacher(&mut world, last.as_str())?;
        let text_hash = ts.text_tower_sha256.clone();
        summary.teacher.push(ts);
        if last == Stage::Teacher {
            continue;
        }
        let (pre, ph, ps) = r.pretrain(&mut world, &teacher, &th, last.as_str())?;
        r.check_text(&teacher, &text_hash, "pretrain")?;
        summary.pretrain.push(ps);
        if last == Stage::Pretrain {
            continue;
        }
        let mut students = Vec::new();
        for run in &cfg.runs {
            let (s, fs) = r.finetune(&mut world, &teacher, &pre, &ph, run)?;
            r.check_text(&teacher, &text_hash, &format!("finetune {}", run.name))?;
            summary.finetune.push(fs);
            students.push((run.name.clone(), s));
        }
        if last == Stage::Finetune {
            continue;
        }

        let t0 = Instant::now();
        let z = class_text(&teacher.text, &world.fixed("gate_natural")?.spec.classes)?;
        let teacher_clf = teacher.zero_shot(&z);
        let pre_clf = pre.classifier(&z);
        let mut models: Vec<(&str, &dyn crate::eval::Classifier)> =
            vec![("teacher", &teacher_clf), ("pretrained", pre_clf.as_ref())];
        let run_clfs: Vec<_> = students
            .iter()
            .map(|(n, s)| (n.as_str(), s.classifier(&z)))
            .collect();
        models.extend(run_clfs.iter().map(|(n, c)| (*n, c.as_ref())));
        let mut reports = Vec::new();
        for t in &cfg.testsets {
            let set = world.test_set(t)?;
            for (name, clf) in &models {
                let rep = eval_one(*clf, set, t, name)?;
                let e = sums.entry((name.to_string(), t.name.clone())).or_default();
                e.0 += rep.top1;
                e.1 += 1;
                reports.push(rep);
            }
        }
        crate::eval::write_csv(
            &dir.join("reports").join(format!("eval_seed{seed}.csv")),
            &reports,
        )?;
        r.log
            .line(&format!("[seed {seed}] eval reports={}", reports.len()));
        r.time(Stage::Eval, t0);
    }

    for ((m, t), (s, n)) in sums {
        summary
            .matrix
            .entry(m)
            .or_default()
            .insert(t, 100.0 * s / n as f64);
    }
    if last == Stage::Eval {
        summary.gates = evaluate_gates(cfg, &summary.matrix);
    }
    summary.passed = summary.gates.iter().all(|g| g.pass);
    summary.trained_steps = r.log.trained_steps;
    summary.seconds = r.seconds.clone();
    r.log
        .line(&format!("trained steps total={}", r.log.trained_steps));
    for g in &summary.gates {
        r.log.line(&format!(
            "gate {} value={} {}",
            g.name,
            g.value.map_or("n/a".into(), |v| format!("{v:.2}")),
            if g.pass { "PASS" } else { "FAIL" }
        ));
    }
    report::write_all(&dir, cfg, &summary)?;
    Ok(summary)
}

/// Gate values over the mean top-1 matrix (percent).
pub fn evaluate_gates(
    cfg: &ExperimentConfig,
    matrix: &BTreeMap<String, BTreeMap<String, f64>>,
) -> Vec<GateResult> {
    let cell = |c: &str| {
        let (m, t) = c.split_once('@')?;
        matrix.get(m)?.get(t).copied()
    };
    cfg.gates
        .iter()
        .map(|g| {
            let sum = |cs: &[String]| cs.iter().map(|c| cell(c)).sum::<Option<f64>>();
            let value = sum(&g.plus).zip(sum(&g.minus)).map(|(a, b)| a - b);
            let pass = value.is_some_and(|v| {
                g.at_least.is_none_or(|lo| v >= lo) && g.at_most.is_none_or(|hi| v <= hi)
            });
            GateResult {
                name: g.name.clone(),
                value,
                at_least: g.at_least,
                at_most: g.at_most,
                pass,
            }
        })
        .collect()
}

/// Renders every dataset one replicate uses and exports each under
/// `dir/<name>`. Returns `(name, samples)` pairs.
pub fn export_data(
    cfg: &ExperimentConfig,
    seed: u64,
    dir: &Path,
    png: bool,
) -> Result<Vec<(String, usize)>> {
    let mut world = World::new(cfg, seed);
    let mut out = Vec::new();
    let fixed = [
        "teacher_natural",
        "teacher_synthetic",
        "pool_natural",
        "pool_synthetic",
        "heldout",
        "gate_natural",
        "gate_synthetic",
    ];
    for k in fixed {
        let d = world.fixed(k)?;
        d.export(&dir.join(k), png)?;
        out.push((k.to_string(), d.len()));
    }
    for run in &cfg.runs {
        let name = format!("train_{}", run.name);
        let d = world.train_set(run)?;
        d.export(&dir.join(&name), png)?;
        out.push((name, d.len()));
    }
    for t in cfg.testsets.iter().filter(|t| t.train_of.is_none()) {
        let name = format!("test_{}", t.name);
        let d = world.test_set(t)?;
        let d = match t.corruption {
            Some(CorruptionSel::Kind(k)) => d.corrupted(k, t.severity)?,
            _ => d.clone(),
        };
        d.export(&dir.join(&name), png)?;
        out.push((name, d.len()));
    }
    Ok(out)
}

/// The diversified prompts behind every synthetic training set of one
/// replicate, as `(dataset, class, prompt)` rows.
pub fn export_prompts(cfg: &ExperimentConfig, seed: u64, path: &Path) -> Result<usize> {
    let mut world = World::new(cfg, seed);
    let mut sets = vec![(
        "teacher_synthetic".to_string(),
        world.fixed("teacher_synthetic")?.spec.clone(),
    )];
    for run in cfg
        .runs
        .iter()
        .filter(|r| r.domain != Domain::Natural && r.diversity == Diversity::Diversified)
    {
        sets.push((
            format!("train_{}", run.name),
            world.train_set(run)?.spec.clone(),
        ));
    }
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["dataset", "class", "prompt"])?;
    let mut n = 0;
    for (name, spec) in &sets {
        for (c, class) in spec.classes.iter().enumerate() {
            for p in crate::shapes::class_prompts(spec, c)? {
                w.write_record([name.as_str(), class.name.as_str(), &p.to_string()])?;
                n += 1;
            }
        }
    }
    w.flush()?;
    Ok(n)
}
