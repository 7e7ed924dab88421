//! Training loop, leave-one-domain-out protocol and the ablation harness.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Sgd, Tensor};
use crate::checkpoint::Checkpoint;
use crate::codebook::{codeword_stats, commitment_loss, vq_loss_sgd, Codebook, UpdateMode, DEFAULT_GAMMA};
use crate::data::{batches, default_domains, generate, sequential_batches, split_train_val, DatasetManifest, DomainDataset, DomainSpec};
use crate::error::{invalid, Error, Result};
use crate::model::{forward, total_loss, Architecture, LossWeights, ModelParams, TeacherState, DEFAULT_TEACHER_DECAY};
use crate::report::{aggregate, AblationReport, AblationRow, DomainResult, ExperimentReport, PairGap};
use crate::rng::{derive_seed, derive_seed_path, Prng};
use crate::theory::labelled_refinement_check;

const SEED_MODEL: u64 = 10;
const SEED_CODEBOOK: u64 = 11;
const SEED_SPLIT: u64 = 12;
const SEED_EPOCH: u64 = 13;
const SEED_RESEED: u64 = 14;
const EVAL_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodebookConfig {
    /// When false the classifier sees the continuous features directly.
    pub enabled: bool,
    pub size: usize,
    pub dim: usize,
    pub gamma: f64,
    pub mode: UpdateMode,
    /// Adds the commitment term (weight beta, or eta in SGD-VQ mode).
    pub commitment: bool,
    /// EMA mode only: after each update, codewords whose EMA count fell
    /// below this value are re-seeded to random in-batch features.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reseed_dead_below: Option<f64>,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self { enabled: true, size: 64, dim: 16, gamma: DEFAULT_GAMMA, mode: UpdateMode::Ema, commitment: true, reseed_dead_below: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: DatasetManifest,
    pub domains: Vec<DomainSpec>,
    pub target_domain: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_at: f64,
    pub lr_decay_factor: f64,
    pub loss: LossWeights,
    pub codebook: CodebookConfig,
    pub hidden: usize,
    pub teacher_decay: f64,
    pub val_every: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: DatasetManifest::default(),
            domains: default_domains(),
            target_domain: 0,
            iterations: 2000,
            batch_size: 32,
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay_at: 0.8,
            lr_decay_factor: 0.1,
            loss: LossWeights::default(),
            codebook: CodebookConfig::default(),
            hidden: 32,
            teacher_decay: DEFAULT_TEACHER_DECAY,
            val_every: 50,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.manifest.validate()?;
        if self.domains.len() != self.manifest.domains {
            return Err(invalid(format!("{} domain specs for {} domains", self.domains.len(), self.manifest.domains)));
        }
        for d in &self.domains {
            d.validate()?;
        }
        if self.target_domain >= self.manifest.domains {
            return Err(invalid(format!("target domain {} out of range", self.target_domain)));
        }
        if self.iterations == 0 {
            return Err(invalid("iterations must be at least 1"));
        }
        if self.batch_size == 0 || self.val_every == 0 || self.hidden == 0 {
            return Err(invalid("batch_size, val_every and hidden must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(invalid("momentum must lie in [0, 1) and weight decay be nonnegative"));
        }
        if !(self.lr_decay_at > 0.0 && self.lr_decay_at <= 1.0) || !(self.lr_decay_factor > 0.0) {
            return Err(invalid("lr_decay_at must lie in (0, 1] and lr_decay_factor be positive"));
        }
        if !(self.teacher_decay >= 0.0 && self.teacher_decay < 1.0) {
            return Err(invalid("teacher decay must lie in [0, 1)"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(invalid("validation fraction must lie in (0, 1)"));
        }
        let cb = &self.codebook;
        if cb.size == 0 || cb.dim == 0 || !(0.0..=1.0).contains(&cb.gamma) {
            return Err(invalid("codebook needs size >= 1, dim >= 1 and gamma in [0, 1]"));
        }
        if cb.reseed_dead_below.is_some_and(|t| !(t >= 0.0 && t.is_finite())) {
            return Err(invalid("reseed threshold must be finite and nonnegative"));
        }
        self.loss.validate()
    }

    pub fn architecture(&self) -> Architecture {
        Architecture { patch: self.manifest.patch, hidden: self.hidden, dim: self.codebook.dim, classes: self.manifest.classes }
    }

    /// Learning rate of step `step` (0-based): decayed once from
    /// `floor(lr_decay_at * iterations)` on.
    pub fn lr_at(&self, step: usize) -> f64 {
        let decay_step = (self.lr_decay_at * self.iterations as f64).floor() as usize;
        if step >= decay_step {
            self.lr * self.lr_decay_factor
        } else {
            self.lr
        }
    }

    /// SHA-256 over the JSON form with `target_domain` and `seed` zeroed, so
    /// every run of one experiment shares the hash.
    pub fn config_hash(&self) -> String {
        let normalized = RunConfig { target_domain: 0, seed: 0, ..self.clone() };
        let json = serde_json::to_vec(&normalized).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn for_target(&self, target: usize, master_seed: u64) -> Self {
        RunConfig { target_domain: target, seed: derive_seed(master_seed, target as u64), ..self.clone() }
    }
}

/// One progress line per validation step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogLine {
    pub target_domain: usize,
    pub iteration: usize,
    pub lr: f64,
    pub total: f64,
    pub classification: f64,
    pub consistency: f64,
    pub commitment: Option<f64>,
    pub vq: Option<f64>,
    pub val_accuracy: f64,
    pub perplexity: Option<f64>,
}

impl std::fmt::Display for LogLine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "target={} iter={} lr={:.3e} loss={:.6} cla={:.6} con={:.6}",
            self.target_domain, self.iteration, self.lr, self.total, self.classification, self.consistency
        )?;
        if let Some(c) = self.commitment {
            write!(f, " comm={c:.6}")?;
        }
        if let Some(v) = self.vq {
            write!(f, " vq={v:.6}")?;
        }
        write!(f, " val_acc={:.4}", self.val_accuracy)?;
        if let Some(p) = self.perplexity {
            write!(f, " perplexity={p:.3}")?;
        }
        Ok(())
    }
}

pub type Observer<'a> = &'a (dyn Fn(&LogLine) + Sync);

pub fn silent(_: &LogLine) {}

/// Class predictions plus, when quantizing, codeword indices per patch and
/// the continuous features.
pub struct Inference {
    pub predictions: Vec<usize>,
    pub codes: Option<Vec<usize>>,
    pub features: Vec<f64>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

pub fn infer(params: &ModelParams<f64>, codebook: Option<&Codebook<f64>>, dataset: &DomainDataset) -> Result<Inference> {
    if dataset.is_empty() {
        return Err(invalid("cannot evaluate on an empty dataset"));
    }
    let side = dataset.manifest.image_side;
    let classes = params.classes();
    let mut predictions = Vec::with_capacity(dataset.len());
    let mut codes = codebook.map(|_| Vec::new());
    let mut features = Vec::new();
    for batch in sequential_batches(dataset, EVAL_BATCH)? {
        let mut graph = Graph::new();
        let fwd = forward(&mut graph, params, false, &batch.images, side, codebook)?;
        predictions.extend(graph.value(fwd.logits).values().chunks_exact(classes).map(argmax));
        if let (Some(all), Some(idx)) = (codes.as_mut(), fwd.indices) {
            all.extend(idx);
        }
        features.extend_from_slice(graph.value(fwd.z).values());
    }
    Ok(Inference { predictions, codes, features })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainAccuracy {
    pub domain: usize,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Argmax accuracy of the checkpoint's student per domain present.
pub fn evaluate(checkpoint: &Checkpoint, dataset: &DomainDataset) -> Result<Vec<DomainAccuracy>> {
    check_compatible(checkpoint, &dataset.manifest)?;
    let inf = infer(&checkpoint.student, checkpoint.active_codebook(), dataset)?;
    let mut out = Vec::new();
    for domain in dataset.domains_present() {
        let (mut correct, mut total) = (0, 0);
        for (s, &p) in dataset.samples.iter().zip(&inf.predictions) {
            if s.domain == domain {
                total += 1;
                correct += usize::from(s.label == p);
            }
        }
        out.push(DomainAccuracy { domain, correct, total, accuracy: correct as f64 / total as f64 });
    }
    Ok(out)
}

pub fn check_compatible(checkpoint: &Checkpoint, manifest: &DatasetManifest) -> Result<()> {
    let arch = checkpoint.student.architecture();
    if arch.classes != manifest.classes {
        return Err(invalid(format!("model has {} classes, dataset {}", arch.classes, manifest.classes)));
    }
    if arch.patch != manifest.patch || manifest.image_side % arch.patch != 0 {
        return Err(invalid(format!("model patch {} does not fit dataset patch {}", arch.patch, manifest.patch)));
    }
    if checkpoint.codebook.dim() != arch.dim {
        return Err(Error::ShapeMismatch {
            op: "check_compatible",
            detail: format!("codeword dimension {} vs feature dimension {}", checkpoint.codebook.dim(), arch.dim),
        });
    }
    Ok(())
}

fn accuracy(predictions: &[usize], dataset: &DomainDataset) -> f64 {
    let correct = dataset.samples.iter().zip(predictions).filter(|(s, &p)| s.label == p).count();
    correct as f64 / dataset.len() as f64
}

struct StepLosses {
    total: f64,
    classification: f64,
    consistency: f64,
    commitment: Option<f64>,
    vq: Option<f64>,
}

struct Trainer<'a> {
    config: &'a RunConfig,
    student: ModelParams<f64>,
    teacher: TeacherState<f64>,
    codebook: Codebook<f64>,
    optimizer: Sgd<f64>,
    codeword_optimizer: Sgd<f64>,
    reseed_rng: Prng,
}

impl Trainer<'_> {
    fn active_codebook(&self) -> Option<&Codebook<f64>> {
        self.config.codebook.enabled.then_some(&self.codebook)
    }

    fn step(&mut self, images: &[f64], labels: &[usize], lr: f64) -> Result<StepLosses> {
        let cfg = self.config;
        let side = cfg.manifest.image_side;
        let quantize = cfg.codebook.enabled;
        let mode = self.codebook.mode();

        let teacher_logits = {
            let mut tg = Graph::new();
            let tf = forward(&mut tg, &self.teacher.params, false, images, side, self.active_codebook())?;
            tg.value(tf.logits).clone()
        };

        let mut graph = Graph::new();
        let fwd = forward(&mut graph, &self.student, true, images, side, self.active_codebook())?;
        let zq_value: Tensor<f64> = graph.value(fwd.zq).clone();
        let comm = if quantize && cfg.codebook.commitment {
            Some(commitment_loss(&mut graph, fwd.z, &zq_value)?)
        } else {
            None
        };
        let sgd_vq = quantize && mode == UpdateMode::SgdVq;
        // In SGD-VQ mode the commitment term is weighted by eta next to L_vq.
        let terms = total_loss(&mut graph, fwd.logits, &teacher_logits, labels, if sgd_vq { None } else { comm }, &cfg.loss)?;
        let mut total = terms.total;
        let mut codeword_node = None;
        let mut vq = None;
        if sgd_vq {
            let node = graph.param(self.codebook.codewords().clone());
            let indices = fwd.indices.as_deref().unwrap_or_default();
            let z_value = graph.value(fwd.z).clone();
            let v = vq_loss_sgd(&mut graph, mode, &z_value, node, indices)?;
            total = graph.add(total, v)?;
            if let Some(c) = comm {
                let weighted = graph.scale(c, cfg.loss.eta)?;
                total = graph.add(total, weighted)?;
            }
            codeword_node = Some(node);
            vq = Some(v);
        }
        graph.backward(total)?;

        let losses = StepLosses {
            total: graph.value(total).item(),
            classification: graph.value(terms.classification).item(),
            consistency: graph.value(terms.consistency).item(),
            commitment: comm.map(|c| graph.value(c).item()),
            vq: vq.map(|v| graph.value(v).item()),
        };

        let grads: Vec<Vec<f64>> =
            fwd.params.all().into_iter().map(|id| graph.take_grad(id).expect("parameter gradient")).collect();
        let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        self.optimizer.step(&mut self.student.tensors_mut(), &grad_refs, lr)?;
        if let Some(node) = codeword_node {
            let g = graph.take_grad(node).expect("codeword gradient");
            self.codeword_optimizer.step(&mut [self.codebook.codewords_mut()], &[&g], lr)?;
        }
        if quantize && mode == UpdateMode::Ema {
            let indices = fwd.indices.as_deref().unwrap_or_default();
            let rows = graph.value(fwd.z).values();
            self.codebook.ema_update_rows(rows, indices)?;
            if let Some(threshold) = cfg.codebook.reseed_dead_below {
                self.codebook.reseed_dead(rows, threshold, &mut self.reseed_rng);
            }
        }
        self.teacher.update(&self.student)?;
        Ok(losses)
    }

    fn snapshot(&self, iteration: usize, best_val_accuracy: f64) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            student: self.student.clone(),
            teacher: self.teacher.clone(),
            codebook: self.codebook.clone(),
            iteration: iteration as u64,
            best_val_accuracy,
        }
    }
}

/// Generates the configured dataset and trains on it.
pub fn train(config: &RunConfig, observer: Observer<'_>) -> Result<(Checkpoint, ExperimentReport)> {
    config.validate()?;
    let dataset = generate(&config.manifest, &config.domains)?;
    train_on(config, &dataset, observer)
}

/// Trains on the source domains of `dataset`. The target domain is removed
/// before splitting and is touched again only for the final report.
pub fn train_on(config: &RunConfig, dataset: &DomainDataset, observer: Observer<'_>) -> Result<(Checkpoint, ExperimentReport)> {
    let started = Instant::now();
    let checkpoint = fit(config, dataset, observer)?;
    let mut report = run_report(&checkpoint, dataset)?;
    report.wall_time_secs = started.elapsed().as_secs_f64();
    Ok((checkpoint, report))
}

fn fit(config: &RunConfig, dataset: &DomainDataset, observer: Observer<'_>) -> Result<Checkpoint> {
    config.validate()?;
    if dataset.manifest != config.manifest {
        return Err(invalid("dataset manifest differs from the run configuration"));
    }
    let target = config.target_domain;
    let sources = dataset.filter(|s| s.domain != target);
    let (train_set, val_set) = split_train_val(&sources, config.val_fraction, derive_seed_path(config.seed, &[SEED_SPLIT]))?;
    let leaked = train_set.samples.iter().chain(&val_set.samples).filter(|s| s.domain == target).count();
    if leaked > 0 {
        return Err(Error::TargetLeakage(leaked));
    }

    let student = ModelParams::init(&config.architecture(), derive_seed_path(config.seed, &[SEED_MODEL]))?;
    let teacher = TeacherState::new(&student, config.teacher_decay)?;
    let cb = &config.codebook;
    let codebook = Codebook::init(cb.size, cb.dim, cb.gamma, cb.mode, derive_seed_path(config.seed, &[SEED_CODEBOOK]))?;
    let mut trainer = Trainer {
        config,
        student,
        teacher,
        codebook,
        optimizer: Sgd::new(config.momentum, config.weight_decay),
        codeword_optimizer: Sgd::new(config.momentum, 0.0),
        reseed_rng: Prng::new(derive_seed_path(config.seed, &[SEED_RESEED])),
    };

    let mut best: Option<Checkpoint> = None;
    let mut epoch = 0u64;
    let mut order = batches(&train_set, config.batch_size, derive_seed_path(config.seed, &[SEED_EPOCH, epoch]))?;
    for step in 0..config.iterations {
        let batch = match order.next() {
            Some(b) => b,
            None => {
                epoch += 1;
                order = batches(&train_set, config.batch_size, derive_seed_path(config.seed, &[SEED_EPOCH, epoch]))?;
                order.next().expect("training split is nonempty")
            }
        };
        let lr = config.lr_at(step);
        let losses = match trainer.step(&batch.images, &batch.labels, lr) {
            Ok(l) if l.total.is_finite() => l,
            Ok(_) | Err(Error::NonFinite { .. }) => {
                return Err(Error::NonFiniteLoss { iteration: step + 1, last_good: best.map(Box::new) })
            }
            Err(e) => return Err(e),
        };
        let iteration = step + 1;
        if iteration % config.val_every == 0 || iteration == config.iterations {
            let inf = infer(&trainer.student, trainer.active_codebook(), &val_set)?;
            let val_accuracy = accuracy(&inf.predictions, &val_set);
            let perplexity = match &inf.codes {
                Some(codes) => Some(codeword_stats(codes, cb.size)?.perplexity),
                None => None,
            };
            observer(&LogLine {
                target_domain: target,
                iteration,
                lr,
                total: losses.total,
                classification: losses.classification,
                consistency: losses.consistency,
                commitment: losses.commitment,
                vq: losses.vq,
                val_accuracy,
                perplexity,
            });
            if best.as_ref().is_none_or(|b| val_accuracy > b.best_val_accuracy) {
                best = Some(trainer.snapshot(iteration, val_accuracy));
            }
        }
    }
    Ok(best.expect("the final iteration always validates"))
}

/// Sign pattern of a feature row, one bit per channel (first 64 channels).
pub fn sign_bits(row: &[f64]) -> u64 {
    row.iter().take(64).enumerate().fold(0u64, |acc, (i, &x)| if x > 0.0 { acc | (1 << i) } else { acc })
}

/// Per domain, the (codeword, sign pattern) cell of every patch feature.
/// Grouping by codeword gives the Voronoi cells; the sign pattern refines
/// each of them.
pub fn fine_cells(dataset: &DomainDataset, codes: &[usize], features: &[f64], dim: usize) -> Vec<Vec<(usize, u64)>> {
    let cells = codes.len() / dataset.len().max(1);
    let mut fine: Vec<Vec<(usize, u64)>> = vec![Vec::new(); dataset.manifest.domains];
    for (i, s) in dataset.samples.iter().enumerate() {
        for c in i * cells..(i + 1) * cells {
            fine[s.domain].push((codes[c], sign_bits(&features[c * dim..(c + 1) * dim])));
        }
    }
    fine
}

/// Target accuracy, source validation accuracy, codeword usage and the
/// per-pair refinement gaps of a trained checkpoint.
pub fn run_report(checkpoint: &Checkpoint, dataset: &DomainDataset) -> Result<ExperimentReport> {
    let config = &checkpoint.config;
    check_compatible(checkpoint, &dataset.manifest)?;
    let target = config.target_domain;
    let target_set = dataset.domain(target);
    let inf = infer(&checkpoint.student, checkpoint.active_codebook(), dataset)?;
    let target_predictions: Vec<usize> =
        dataset.samples.iter().zip(&inf.predictions).filter(|(s, _)| s.domain == target).map(|(_, &p)| p).collect();
    let target_accuracy = accuracy(&target_predictions, &target_set);

    let mut usage = None;
    let mut gaps = Vec::new();
    if let Some(codes) = &inf.codes {
        let stats = codeword_stats(codes, checkpoint.codebook.size())?;
        usage = Some((stats.perplexity, stats.dead));
        let fine = fine_cells(dataset, codes, &inf.features, checkpoint.codebook.dim());
        for source in (0..dataset.manifest.domains).filter(|&s| s != target) {
            let (quantized_l1, continuous_l1) = labelled_refinement_check(&fine[source], &fine[target], |k| k.0)?;
            gaps.push(PairGap { source, target, quantized_l1, continuous_l1 });
        }
    }
    let name = config.domains[target].name.clone();
    let result = DomainResult {
        domain: target,
        name,
        seed: config.seed,
        accuracy: target_accuracy,
        source_val_accuracy: checkpoint.best_val_accuracy,
        best_iteration: checkpoint.iteration,
        perplexity: usage.map(|u| u.0),
        dead_codewords: usage.map(|u| u.1),
        gaps,
    };
    ExperimentReport::new(config.config_hash(), config.seed, vec![result], 0.0)
}

/// Runs `tasks` on up to `jobs` threads and returns results in task order.
pub fn run_parallel<T, R, F>(tasks: Vec<T>, jobs: usize, work: F) -> Vec<R>
where
    T: Sync + Send,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let jobs = jobs.max(1).min(tasks.len().max(1));
    if jobs == 1 {
        return tasks.iter().map(&work).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build().expect("thread pool");
    pool.install(|| tasks.par_iter().map(&work).collect())
}

/// Output of one leave-one-out sweep: a checkpoint per target plus the
/// aggregated report.
pub struct LeaveOneOut {
    pub checkpoints: Vec<Checkpoint>,
    pub report: ExperimentReport,
}

/// Trains one model per held-out domain. The run for target `t` uses seed
/// `derive_seed(master_seed, t)`, so results do not depend on run order.
pub fn leave_one_out(template: &RunConfig, master_seed: u64, jobs: usize, observer: Observer<'_>) -> Result<LeaveOneOut> {
    template.validate()?;
    let dataset = generate(&template.manifest, &template.domains)?;
    leave_one_out_on(template, &dataset, master_seed, jobs, observer)
}

pub fn leave_one_out_on(
    template: &RunConfig,
    dataset: &DomainDataset,
    master_seed: u64,
    jobs: usize,
    observer: Observer<'_>,
) -> Result<LeaveOneOut> {
    let started = Instant::now();
    let targets: Vec<usize> = (0..template.manifest.domains).collect();
    let results = run_parallel(targets, jobs, |&t| train_on(&template.for_target(t, master_seed), dataset, observer));
    let mut checkpoints = Vec::new();
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (t, r) in results.into_iter().enumerate() {
        match r {
            Ok((c, rep)) => {
                checkpoints.push(c);
                reports.push(rep);
            }
            Err(e) => failures.push(format!("target {t}: {e}")),
        }
    }
    if !failures.is_empty() {
        return Err(Error::InvalidArgument(format!("leave-one-out runs failed: {}", failures.join("; "))));
    }
    let mut report = aggregate(&reports)?;
    report.seed = master_seed;
    report.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(LeaveOneOut { checkpoints, report })
}

pub const ABLATION_ROWS: [&str; 6] = ["I", "II", "III", "IV", "V", "VI"];

/// Component toggles of ablation row `row` (0-based, I..VI): no
/// discretization; commitment only; SGD-VQ; EMA; commitment + SGD-VQ;
/// commitment + EMA. Row I also drops the consistency term.
pub fn ablation_row_config(template: &RunConfig, row: usize) -> Result<RunConfig> {
    let mut c = template.clone();
    let (enabled, mode, commitment) = match row {
        0 => (false, UpdateMode::Frozen, false),
        1 => (true, UpdateMode::Frozen, true),
        2 => (true, UpdateMode::SgdVq, false),
        3 => (true, UpdateMode::Ema, false),
        4 => (true, UpdateMode::SgdVq, true),
        5 => (true, UpdateMode::Ema, true),
        _ => return Err(invalid(format!("ablation row index {row} out of range"))),
    };
    c.codebook.enabled = enabled;
    c.codebook.mode = mode;
    c.codebook.commitment = commitment;
    if row == 0 {
        c.loss.alpha = 0.0;
        c.loss.beta = 0.0;
    }
    Ok(c)
}

pub fn ablation_description(row: usize) -> &'static str {
    ["no discretization", "commitment only", "SGD-VQ", "EMA", "commitment + SGD-VQ", "commitment + EMA"][row]
}

/// Leave-one-out sweeps for the requested ablation rows over `seeds`; the
/// row summaries average the per-seed mean target accuracies.
pub fn ablate(template: &RunConfig, rows: &[usize], seeds: &[u64], jobs: usize, observer: Observer<'_>) -> Result<AblationReport> {
    template.validate()?;
    if seeds.is_empty() {
        return Err(invalid("ablation needs at least one seed"));
    }
    let started = Instant::now();
    let dataset = generate(&template.manifest, &template.domains)?;
    let configs: Vec<RunConfig> = rows.iter().map(|&r| ablation_row_config(template, r)).collect::<Result<_>>()?;
    let tasks: Vec<(usize, u64, usize)> = (0..rows.len())
        .flat_map(|ri| seeds.iter().flat_map(move |&s| (0..template.manifest.domains).map(move |t| (ri, s, t))))
        .collect();
    let results = run_parallel(tasks.clone(), jobs, |&(ri, seed, t)| {
        train_on(&configs[ri].for_target(t, seed), &dataset, observer).map(|(_, r)| r)
    });
    let mut failures = Vec::new();
    let mut by_run: Vec<Vec<Vec<ExperimentReport>>> = vec![vec![Vec::new(); seeds.len()]; rows.len()];
    for (&(ri, seed, t), r) in tasks.iter().zip(results) {
        match r {
            Ok(rep) => by_run[ri][seeds.iter().position(|&s| s == seed).expect("seed")].push(rep),
            Err(e) => failures.push(format!("row {} seed {seed} target {t}: {e}", ABLATION_ROWS[rows[ri]])),
        }
    }
    if !failures.is_empty() {
        return Err(Error::InvalidArgument(format!("ablation runs failed: {}", failures.join("; "))));
    }
    let mut out_rows = Vec::new();
    for (ri, &row) in rows.iter().enumerate() {
        let mut per_seed = Vec::new();
        for (si, reps) in by_run[ri].iter().enumerate() {
            let mut rep = aggregate(reps)?;
            rep.seed = seeds[si];
            per_seed.push(rep);
        }
        out_rows.push(AblationRow::new(ABLATION_ROWS[row], ablation_description(row), configs[ri].config_hash(), per_seed));
    }
    Ok(AblationReport {
        template_hash: template.config_hash(),
        seeds: seeds.to_vec(),
        rows: out_rows,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    fn tiny() -> RunConfig {
        RunConfig {
            manifest: DatasetManifest { seed: 11, classes: 3, domains: 3, samples_per_domain: 30, image_side: 8, patch: 4 },
            domains: default_domains()[..3].to_vec(),
            iterations: 40,
            batch_size: 8,
            val_every: 10,
            hidden: 8,
            codebook: CodebookConfig { size: 8, dim: 4, ..CodebookConfig::default() },
            seed: 5,
            ..RunConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(tiny().validate().is_ok());
        assert!(RunConfig { iterations: 0, ..tiny() }.validate().is_err());
        assert!(RunConfig { lr_decay_at: 0.0, ..tiny() }.validate().is_err());
        assert!(RunConfig { lr_decay_at: 1.5, ..tiny() }.validate().is_err());
        assert!(RunConfig { target_domain: 3, ..tiny() }.validate().is_err());
        assert!(RunConfig { lr: 0.0, ..tiny() }.validate().is_err());
        assert!(train(&RunConfig { iterations: 0, ..tiny() }, &silent).is_err());
    }

    #[test]
    fn lr_decays_once_at_the_configured_fraction() {
        let c = RunConfig { iterations: 100, lr: 0.5, ..tiny() };
        assert_eq!(c.lr_at(0), 0.5);
        assert_eq!(c.lr_at(79), 0.5);
        assert_eq!(c.lr_at(80), 0.5 * 0.1);
        assert_eq!(c.lr_at(99), 0.5 * 0.1);
    }

    #[test]
    fn config_hash_ignores_target_and_seed_only() {
        let c = tiny();
        assert_eq!(c.config_hash(), c.for_target(2, 99).config_hash());
        assert_ne!(c.config_hash(), RunConfig { lr: 0.02, ..tiny() }.config_hash());
        assert_eq!(c.config_hash().len(), 64);
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let lines = Mutex::new(Vec::new());
        let record = |l: &LogLine| lines.lock().unwrap().push(l.iteration);
        let (a, ra) = train(&tiny(), &record).unwrap();
        let (b, rb) = train(&tiny(), &silent).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(ra.to_csv(), rb.to_csv());
        assert_eq!(*lines.lock().unwrap(), vec![10, 20, 30, 40]);
        assert!(a.iteration % 10 == 0 && a.best_val_accuracy >= 0.0);
        let (c, _) = train(&RunConfig { seed: 6, ..tiny() }, &silent).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn every_mode_trains() {
        for row in 0..6 {
            let c = ablation_row_config(&tiny(), row).unwrap();
            let (ck, rep) = train(&c, &silent).unwrap();
            assert_eq!(ck.active_codebook().is_some(), row != 0);
            assert_eq!(rep.domains[0].gaps.is_empty(), row == 0);
            for g in &rep.domains[0].gaps {
                assert!(g.quantized_l1 <= g.continuous_l1 + 1e-12);
            }
        }
        let frozen = ablation_row_config(&tiny(), 1).unwrap();
        let (ck, _) = train(&frozen, &silent).unwrap();
        let init = Codebook::init(8, 4, frozen.codebook.gamma, UpdateMode::Frozen, derive_seed_path(frozen.seed, &[SEED_CODEBOOK])).unwrap();
        assert_eq!(ck.codebook, init);
    }

    #[test]
    fn reseeding_revives_dead_codewords() {
        let mut c = tiny();
        c.codebook.reseed_dead_below = Some(0.9);
        let (ck, _) = train(&c, &silent).unwrap();
        let (plain, _) = train(&tiny(), &silent).unwrap();
        assert_ne!(ck.codebook, plain.codebook);
        assert!(RunConfig { codebook: CodebookConfig { reseed_dead_below: Some(-1.0), ..tiny().codebook }, ..tiny() }.validate().is_err());
    }

    #[test]
    fn ablation_rows_toggle_components() {
        let t = tiny();
        let erm = ablation_row_config(&t, 0).unwrap();
        assert!(!erm.codebook.enabled && erm.loss.alpha == 0.0 && erm.loss.beta == 0.0);
        let full = ablation_row_config(&t, 5).unwrap();
        assert!(full.codebook.enabled && full.codebook.commitment && full.codebook.mode == UpdateMode::Ema);
        assert_eq!(full.loss, t.loss);
        let sgd = ablation_row_config(&t, 4).unwrap();
        assert_eq!(sgd.codebook.mode, UpdateMode::SgdVq);
        assert!(ablation_row_config(&t, 6).is_err());
    }

    #[test]
    fn target_labels_never_reach_the_model() {
        let c = tiny();
        let data = generate(&c.manifest, &c.domains).unwrap();
        let mut poisoned = data.clone();
        for s in poisoned.samples.iter_mut().filter(|s| s.domain == c.target_domain) {
            s.label = (s.label + 1) % c.manifest.classes;
        }
        let (a, _) = train_on(&c, &data, &silent).unwrap();
        let (b, _) = train_on(&c, &poisoned, &silent).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let wrong = DomainDataset { manifest: DatasetManifest { seed: 12, ..c.manifest }, samples: data.samples.clone() };
        assert!(train_on(&c, &wrong, &silent).is_err());
    }

    #[test]
    fn evaluation_checks_inputs() {
        let c = tiny();
        let (ck, _) = train(&c, &silent).unwrap();
        let data = generate(&c.manifest, &c.domains).unwrap();
        let acc = evaluate(&ck, &data).unwrap();
        assert_eq!(acc.len(), 3);
        assert_eq!(acc, evaluate(&ck, &data).unwrap());
        assert!(acc.iter().all(|a| a.total == 30 && (0.0..=1.0).contains(&a.accuracy)));
        let empty = DomainDataset { manifest: data.manifest, samples: Vec::new() };
        assert!(evaluate(&ck, &empty).is_err());
        let other = DatasetManifest { classes: 4, ..c.manifest };
        let mismatched = generate(&other, &c.domains).unwrap();
        assert!(evaluate(&ck, &mismatched).is_err());
    }

    #[test]
    fn untrained_model_is_at_chance() {
        let config = RunConfig::default();
        let manifest = DatasetManifest { samples_per_domain: 250, ..config.manifest };
        let data = generate(&manifest, &config.domains).unwrap();
        let mut correct = 0usize;
        let mut total = 0usize;
        for seed in 0..4 {
            let student = ModelParams::init(&config.architecture(), 1000 + seed).unwrap();
            let inf = infer(&student, None, &data).unwrap();
            total += data.len();
            correct += data.samples.iter().zip(&inf.predictions).filter(|(s, &p)| s.label == p).count();
        }
        // Binomial(4000, 0.2) has standard deviation about 0.0063; allow a
        // wide margin since an untrained net is biased toward some classes.
        let acc = correct as f64 / total as f64;
        assert!((acc - 0.2).abs() < 0.1, "accuracy {acc}");
    }

    #[test]
    fn divergence_aborts_with_last_good_checkpoint() {
        let c = RunConfig { lr: 1e12, iterations: 40, val_every: 1, momentum: 0.0, ..tiny() };
        match train(&c, &silent) {
            Err(Error::NonFiniteLoss { iteration, last_good }) => {
                assert!(iteration >= 1);
                if let Some(ck) = last_good {
                    assert!(ck.iteration < iteration as u64);
                }
            }
            other => panic!("expected a non-finite loss abort, got {:?}", other.map(|r| r.1)),
        }
    }

    #[test]
    fn leave_one_out_is_order_independent() {
        let c = tiny();
        let serial = leave_one_out(&c, 21, 1, &silent).unwrap();
        let parallel = leave_one_out(&c, 21, 3, &silent).unwrap();
        assert_eq!(serial.report.domains.len(), 3);
        for (a, b) in serial.checkpoints.iter().zip(&parallel.checkpoints) {
            assert_eq!(a.to_bytes(), b.to_bytes());
        }
        let single = train(&c.for_target(2, 21), &silent).unwrap().0;
        assert_eq!(single.to_bytes(), serial.checkpoints[2].to_bytes());
        let mean = serial.report.domains.iter().map(|d| d.accuracy).sum::<f64>() / 3.0;
        assert!((serial.report.average - mean).abs() < 1e-12);
    }

    #[test]
    fn run_parallel_keeps_order() {
        let out = run_parallel((0..20).collect(), 4, |&x: &u64| x * x);
        assert_eq!(out, (0..20).map(|x| x * x).collect::<Vec<u64>>());
        assert!(run_parallel(Vec::<u8>::new(), 3, |&x| x).is_empty());
    }
}
