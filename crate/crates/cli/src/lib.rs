//! Command-line surface of the laboratory: configuration files, the
//! subcommands and their output files.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ddg_core::checkpoint::Checkpoint;
use ddg_core::codebook::codeword_stats;
use ddg_core::data::{default_domains, generate, DatasetManifest, DomainDataset, DomainSpec};
use ddg_core::error::Error as CoreError;
use ddg_core::model::LossWeights;
use ddg_core::theory::{
    continuous_gap, discrete_gap, discretize, labelled_refinement_check, randomized_suite, theorem_check, GapReport,
    Partition, PiecewiseDensity, SuiteSummary,
};
use ddg_core::training::{
    ablate, check_compatible, evaluate, fine_cells, infer, leave_one_out_on, train_on, CodebookConfig, LogLine, RunConfig,
    ABLATION_ROWS,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Exit code when theorem-check finds an inequality violation.
pub const EXIT_VIOLATION: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "ddg-lab", version, about = "Discrete codebook domain generalization experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output file or directory, overriding the configuration.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overwrite existing output files.
    #[arg(long)]
    pub force: bool,
    /// Parallel runs; capped by DDG_LAB_THREADS.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic dataset file.
    GenData(Common),
    /// Train one model with the configured target domain held out.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train on this dataset file instead of regenerating it.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Per-domain accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Leave-one-domain-out sweep.
    Loo(Common),
    /// Ablation rows I-VI, each a leave-one-out sweep over several seeds.
    Ablate(Common),
    /// Randomized and user-specified discretization gap checks.
    TheoremCheck(Common),
    /// Codeword index grids, usage histogram and cross-domain distances.
    InspectCodebook {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

/// Training fields of [`RunConfig`]; the manifest and domains come from
/// their own sections.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
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

impl Default for RunSection {
    fn default() -> Self {
        let r = RunConfig::default();
        Self {
            target_domain: r.target_domain,
            iterations: r.iterations,
            batch_size: r.batch_size,
            lr: r.lr,
            momentum: r.momentum,
            weight_decay: r.weight_decay,
            lr_decay_at: r.lr_decay_at,
            lr_decay_factor: r.lr_decay_factor,
            loss: r.loss,
            codebook: r.codebook,
            hidden: r.hidden,
            teacher_decay: r.teacher_decay,
            val_every: r.val_every,
            val_fraction: r.val_fraction,
            seed: r.seed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    /// Master seed of `loo`.
    pub master_seed: u64,
    /// Master seeds of `ablate`.
    pub seeds: Vec<u64>,
    /// Ablation row ids to run.
    pub rows: Vec<String>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self { master_seed: 1, seeds: vec![1, 2, 3], rows: ABLATION_ROWS.iter().map(|s| s.to_string()).collect() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dataset: PathBuf,
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dataset: PathBuf::from("dataset.ddg"), dir: PathBuf::from("out") }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityPair {
    pub name: String,
    /// Shared breakpoints of both densities.
    pub breakpoints: Vec<f64>,
    /// Densities per cell; each must integrate to 1.
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    /// Uniform partition cells.
    pub cells: usize,
    #[serde(default = "one")]
    pub b_phi: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoremSection {
    pub seed: u64,
    pub cases: usize,
    pub bounds: Vec<f64>,
    /// Partitions with `2^k` cells, `k = 0..=depth`, in the refinement CSV.
    pub depth: u32,
    pub pairs: Vec<DensityPair>,
}

impl Default for TheoremSection {
    fn default() -> Self {
        Self { seed: 1, cases: 200, bounds: vec![0.5, 1.0, 3.0], depth: 6, pairs: Vec::new() }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub dataset: DatasetManifest,
    /// Defaults to the built-in styles when absent.
    pub domains: Option<Vec<DomainSpec>>,
    pub run: RunSection,
    pub experiment: ExperimentSection,
    pub output: OutputSection,
    pub theorem: TheoremSection,
}

/// A parsed configuration plus the directory its relative paths refer to.
pub struct LoadedConfig {
    pub file: ConfigFile,
    pub base: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let file: ConfigFile = toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { file, base })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn domains(&self) -> Vec<DomainSpec> {
        self.file.domains.clone().unwrap_or_else(|| {
            let mut d = default_domains();
            d.truncate(self.file.dataset.domains);
            d
        })
    }

    pub fn run_config(&self) -> RunConfig {
        let r = &self.file.run;
        RunConfig {
            manifest: self.file.dataset,
            domains: self.domains(),
            target_domain: r.target_domain,
            iterations: r.iterations,
            batch_size: r.batch_size,
            lr: r.lr,
            momentum: r.momentum,
            weight_decay: r.weight_decay,
            lr_decay_at: r.lr_decay_at,
            lr_decay_factor: r.lr_decay_factor,
            loss: r.loss,
            codebook: r.codebook.clone(),
            hidden: r.hidden,
            teacher_decay: r.teacher_decay,
            val_every: r.val_every,
            val_fraction: r.val_fraction,
            seed: r.seed,
        }
    }

    fn out_dir(&self, common: &Common) -> PathBuf {
        common.out.clone().unwrap_or_else(|| self.resolve(&self.file.output.dir))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Parallel run count: `--jobs` or the available cores, capped by
/// `DDG_LAB_THREADS` when set.
pub fn effective_jobs(flag: Option<usize>) -> Result<usize> {
    let base = flag.unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    let cap = match std::env::var("DDG_LAB_THREADS") {
        Ok(v) => v.trim().parse::<usize>().map_err(|_| anyhow!("DDG_LAB_THREADS must be a positive integer, got {v:?}"))?,
        Err(_) => usize::MAX,
    };
    if cap == 0 {
        bail!("DDG_LAB_THREADS must be a positive integer");
    }
    Ok(base.max(1).min(cap))
}

/// Writes every file or none: existing targets abort the batch unless
/// `force` is set. Prints each path with its SHA-256.
pub fn write_outputs(files: &[(PathBuf, Vec<u8>)], force: bool) -> Result<()> {
    if !force {
        if let Some((p, _)) = files.iter().find(|(p, _)| p.exists()) {
            bail!("{} already exists; pass --force to overwrite", p.display());
        }
    }
    for (path, bytes) in files {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        }
        fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))?;
        println!("wrote {} sha256={}", path.display(), sha256_hex(bytes));
    }
    Ok(())
}

fn require_config(common: &Common) -> Result<LoadedConfig> {
    let path = common.config.as_ref().ok_or_else(|| anyhow!("--config is required for this command"))?;
    LoadedConfig::load(path)
}

fn load_dataset(path: &Path) -> Result<DomainDataset> {
    let bytes = fs::read(path).with_context(|| format!("cannot read dataset {}", path.display()))?;
    Ok(DomainDataset::from_bytes(&bytes)?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).with_context(|| format!("cannot read checkpoint {}", path.display()))?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}

fn dataset_for_checkpoint(ck: &Checkpoint, path: Option<&Path>) -> Result<DomainDataset> {
    match path {
        Some(p) => load_dataset(p),
        None => Ok(generate(&ck.config.manifest, &ck.config.domains)?),
    }
}

fn log_line(line: &LogLine) {
    eprintln!("{line}");
}

/// Runs one parsed command. `Ok(code)` carries a nonzero code for checks
/// that completed but failed.
pub fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::GenData(c) => cmd_gen_data(&c),
        Command::Train { common, dataset } => cmd_train(&common, dataset.as_deref()),
        Command::Eval { common, checkpoint, dataset } => cmd_eval(&common, &checkpoint, dataset.as_deref()),
        Command::Loo(c) => cmd_loo(&c),
        Command::Ablate(c) => cmd_ablate(&c),
        Command::TheoremCheck(c) => cmd_theorem_check(&c),
        Command::InspectCodebook { common, checkpoint, dataset } => {
            cmd_inspect_codebook(&common, &checkpoint, dataset.as_deref())
        }
    }
}

pub fn cmd_gen_data(common: &Common) -> Result<u8> {
    let cfg = require_config(common)?;
    let mut manifest = cfg.file.dataset;
    if let Some(s) = common.seed {
        manifest.seed = s;
    }
    let data = generate(&manifest, &cfg.domains())?;
    let path = common.out.clone().unwrap_or_else(|| cfg.resolve(&cfg.file.output.dataset));
    write_outputs(&[(path, data.to_bytes())], common.force)?;
    Ok(0)
}

fn report_files(dir: &Path, report: &ddg_core::report::ExperimentReport) -> Vec<(PathBuf, Vec<u8>)> {
    vec![
        (dir.join("report.json"), report.to_json().into_bytes()),
        (dir.join("report.csv"), report.to_csv().into_bytes()),
        (dir.join("gaps.csv"), report.gaps_csv().into_bytes()),
    ]
}

pub fn cmd_train(common: &Common, dataset: Option<&Path>) -> Result<u8> {
    let cfg = require_config(common)?;
    let mut config = cfg.run_config();
    if let Some(s) = common.seed {
        config.seed = s;
    }
    config.validate()?;
    let data = match dataset {
        Some(p) => load_dataset(p)?,
        None => generate(&config.manifest, &config.domains)?,
    };
    let dir = cfg.out_dir(common);
    println!("config sha256={}", config.config_hash());
    match train_on(&config, &data, &log_line) {
        Ok((ck, report)) => {
            let mut files = vec![(dir.join("checkpoint.ckpt"), ck.to_bytes())];
            files.extend(report_files(&dir, &report));
            write_outputs(&files, common.force)?;
            Ok(0)
        }
        Err(CoreError::NonFiniteLoss { iteration, last_good }) => {
            if let Some(ck) = last_good {
                write_outputs(&[(dir.join("checkpoint.last-good.ckpt"), ck.to_bytes())], common.force)?;
            }
            bail!("non-finite loss at iteration {iteration}; training aborted")
        }
        Err(e) => Err(e.into()),
    }
}

pub fn cmd_eval(common: &Common, checkpoint: &Path, dataset: Option<&Path>) -> Result<u8> {
    let ck = load_checkpoint(checkpoint)?;
    let data = dataset_for_checkpoint(&ck, dataset)?;
    let hash = ck.config.config_hash();
    let mut csv = String::from("config_hash,domain,name,correct,total,accuracy\n");
    for a in evaluate(&ck, &data)? {
        let name = ck.config.domains.get(a.domain).map_or("?", |d| d.name.as_str());
        csv += &format!("{hash},{},{name},{},{},{}\n", a.domain, a.correct, a.total, a.accuracy);
    }
    match &common.out {
        Some(p) => write_outputs(&[(p.clone(), csv.into_bytes())], common.force)?,
        None => print!("{csv}"),
    }
    Ok(0)
}

pub fn cmd_loo(common: &Common) -> Result<u8> {
    let cfg = require_config(common)?;
    let template = cfg.run_config();
    template.validate()?;
    let master = common.seed.unwrap_or(cfg.file.experiment.master_seed);
    let data = generate(&template.manifest, &template.domains)?;
    println!("config sha256={}", template.config_hash());
    let out = leave_one_out_on(&template, &data, master, effective_jobs(common.jobs)?, &log_line)?;
    let dir = cfg.out_dir(common);
    let mut files: Vec<(PathBuf, Vec<u8>)> = out
        .checkpoints
        .iter()
        .map(|c| (dir.join(format!("checkpoint-target-{}.ckpt", c.config.target_domain)), c.to_bytes()))
        .collect();
    files.extend(report_files(&dir, &out.report));
    write_outputs(&files, common.force)?;
    Ok(0)
}

pub fn parse_rows(ids: &[String]) -> Result<Vec<usize>> {
    ids.iter()
        .map(|id| ABLATION_ROWS.iter().position(|r| r == id).ok_or_else(|| anyhow!("unknown ablation row {id:?}")))
        .collect()
}

pub fn cmd_ablate(common: &Common) -> Result<u8> {
    let cfg = require_config(common)?;
    let template = cfg.run_config();
    template.validate()?;
    let rows = parse_rows(&cfg.file.experiment.rows)?;
    let mut seeds = cfg.file.experiment.seeds.clone();
    if let Some(s) = common.seed {
        seeds = (0..seeds.len().max(1) as u64).map(|i| s.wrapping_add(i)).collect();
    }
    println!("config sha256={}", template.config_hash());
    let report = ablate(&template, &rows, &seeds, effective_jobs(common.jobs)?, &log_line)?;
    let dir = cfg.out_dir(common);
    write_outputs(
        &[
            (dir.join("ablation.json"), report.to_json().into_bytes()),
            (dir.join("ablation.csv"), report.to_csv().into_bytes()),
        ],
        common.force,
    )?;
    Ok(0)
}

#[derive(Serialize)]
struct PairResult {
    name: String,
    report: GapReport,
}

#[derive(Serialize)]
struct TheoremOutput {
    config_hash: String,
    seed: u64,
    suite: SuiteSummary,
    pairs: Vec<PairResult>,
    violations: usize,
}

pub fn cmd_theorem_check(common: &Common) -> Result<u8> {
    let mut section = match &common.config {
        Some(p) => LoadedConfig::load(p)?.file.theorem,
        None => TheoremSection::default(),
    };
    if let Some(s) = common.seed {
        section.seed = s;
    }
    if section.bounds.iter().any(|&b| !(b > 0.0 && b.is_finite())) {
        bail!("theorem bounds must be positive");
    }
    let config_hash = sha256_hex(&serde_json::to_vec(&section)?);
    let suite = randomized_suite(section.seed, section.cases, &section.bounds);
    let mut violations = suite.violations + suite.equality_failures;
    let mut pairs = Vec::new();
    let mut csv = String::from("config_hash,pair,depth,cells,continuous_gap,discrete_gap\n");
    for pair in &section.pairs {
        let p = PiecewiseDensity::new(pair.breakpoints.clone(), pair.p.clone()).with_context(|| format!("pair {}: density p", pair.name))?;
        let q = PiecewiseDensity::new(pair.breakpoints.clone(), pair.q.clone()).with_context(|| format!("pair {}: density q", pair.name))?;
        let partition = Partition::uniform(p.lo(), p.hi(), pair.cells).with_context(|| format!("pair {}", pair.name))?;
        match theorem_check(&p, &q, &partition, pair.b_phi) {
            Ok(report) => pairs.push(PairResult { name: pair.name.clone(), report }),
            Err(CoreError::GapViolation { continuous, discrete }) => {
                violations += 1;
                eprintln!("pair {}: discrete gap {discrete} exceeds continuous gap {continuous}", pair.name);
            }
            Err(e) => return Err(anyhow::Error::from(e).context(format!("pair {}", pair.name))),
        }
        let cont = continuous_gap(&p, &q, pair.b_phi)?;
        for k in 0..=section.depth {
            let part = Partition::uniform(p.lo(), p.hi(), 1usize << k)?;
            let disc = discrete_gap(&discretize(&p, &part)?, &discretize(&q, &part)?, pair.b_phi)?;
            csv += &format!("{config_hash},{},{k},{},{cont},{disc}\n", pair.name, 1usize << k);
        }
    }
    let output = TheoremOutput { config_hash, seed: section.seed, suite, pairs, violations };
    let json = serde_json::to_string_pretty(&output)? + "\n";
    match &common.out {
        Some(path) => {
            let mut files = vec![(path.clone(), json.into_bytes())];
            if !section.pairs.is_empty() {
                files.push((path.with_extension("refinement.csv"), csv.into_bytes()));
            }
            write_outputs(&files, common.force)?;
        }
        None => print!("{json}"),
    }
    if violations > 0 {
        eprintln!("violations: {violations}");
        return Ok(EXIT_VIOLATION);
    }
    Ok(0)
}

pub fn cmd_inspect_codebook(common: &Common, checkpoint: &Path, dataset: Option<&Path>) -> Result<u8> {
    let ck = load_checkpoint(checkpoint)?;
    let data = dataset_for_checkpoint(&ck, dataset)?;
    check_compatible(&ck, &data.manifest)?;
    let dir = common.out.clone().ok_or_else(|| anyhow!("--out <DIR> is required for inspect-codebook"))?;
    let hash = ck.config.config_hash();
    let cb = &ck.codebook;
    let features = infer(&ck.student, None, &data)?.features;
    let (codes, _) = cb.quantize_rows(&features)?;
    let cells = codes.len() / data.len();

    let mut grid_csv = format!(
        "config_hash,sample,domain,label,{}\n",
        (0..cells).map(|c| format!("c{c}")).collect::<Vec<_>>().join(",")
    );
    for (i, s) in data.samples.iter().enumerate() {
        let row: Vec<String> = codes[i * cells..(i + 1) * cells].iter().map(usize::to_string).collect();
        grid_csv += &format!("{hash},{i},{},{},{}\n", s.domain, s.label, row.join(","));
    }

    let stats = codeword_stats(&codes, cb.size())?;
    let mut usage_csv = String::from("config_hash,codeword,count\n");
    for (v, n) in stats.histogram.iter().enumerate() {
        usage_csv += &format!("{hash},{v},{n}\n");
    }

    let domains = data.domains_present();
    let fine = fine_cells(&data, &codes, &features, cb.dim());
    let mut l1_csv = String::from("config_hash,domain_a,domain_b,quantized_l1,continuous_l1\n");
    for &a in &domains {
        for &b in &domains {
            let (q, f) = labelled_refinement_check(&fine[a], &fine[b], |k| k.0)?;
            l1_csv += &format!("{hash},{a},{b},{q},{f}\n");
        }
    }
    println!("codebook perplexity={} dead={}", stats.perplexity, stats.dead);
    write_outputs(
        &[
            (dir.join("codes.csv"), grid_csv.into_bytes()),
            (dir.join("usage.csv"), usage_csv.into_bytes()),
            (dir.join("domain_l1.csv"), l1_csv.into_bytes()),
        ],
        common.force,
    )?;
    Ok(0)
}
