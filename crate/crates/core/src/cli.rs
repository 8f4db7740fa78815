//! The `mrp` command-line tool.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, Denoiser};
use crate::bench::{self, Cell, MeasureConfig, TheoryRow, DEFAULT_KS, DEFAULT_TAUS};
use crate::checkpoint;
use crate::corpus::{read_dataset, sample_problems, build_examples, write_dataset, Example, Split, TaskConfig};
use crate::diffusion::{DecodeTrace, Policy, SequenceState};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::inference::{self, DecodeConfig, Mode};
use crate::mrp::{BoundHead, MrpConfig, MrpHead, Objective, ResidualHead};
use crate::training::{self, write_log, TrainConfig};

pub const SEED_ENV: &str = "MRP_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub taus: Vec<f64>,
    pub ks: Vec<usize>,
    pub modes: Vec<Mode>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            taus: DEFAULT_TAUS.to_vec(),
            ks: DEFAULT_KS.to_vec(),
            modes: vec![Mode::Direct, Mode::Spec],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    pub trials: usize,
    pub vocab_sizes: Vec<usize>,
    pub shuffles: usize,
    /// Static reveal counts used for the contraction traces.
    pub reveal_counts: Vec<usize>,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            trials: 10_000,
            vocab_sizes: vec![2, 16, 64],
            shuffles: 1000,
            reveal_counts: vec![1, 2],
        }
    }
}

/// Everything a run needs besides paths. Loaded from JSON; flags override.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub task: TaskConfig,
    pub backbone: BackboneConfig,
    pub mrp: MrpConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub measure: MeasureConfig,
    pub sweep: SweepConfig,
    pub theory: TheoryConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact(path.display().to_string())
            } else {
                Error::io(path, e)
            }
        })?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    /// Seed precedence: config file, then `MRP_SEED`, then `--seed`.
    pub fn resolve_seed(&mut self, env: Option<&str>, flag: Option<u64>) -> Result<()> {
        if let Some(v) = env {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        if let Some(s) = flag {
            self.seed = s;
        }
        self.train.seed = self.seed;
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "mrp", version, about = "Block diffusion decoding with multi-token residual prediction")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed and MRP_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write an arithmetic dataset.
    GenData(GenDataArgs),
    /// Train the backbone denoiser.
    TrainBackbone(TrainBackboneArgs),
    /// Train a residual head against a frozen backbone.
    TrainMrp(TrainMrpArgs),
    /// Decode one prompt.
    Generate(GenerateArgs),
    /// Accuracy and forward counts for one decoding setting.
    Eval(EvalArgs),
    /// Residual magnitudes by revealed-token distance.
    Measure(MeasureArgs),
    /// Threshold and K grid.
    Sweep(SweepArgs),
    /// Grid per residual-head depth.
    DepthSweep(DepthSweepArgs),
    /// Softmax sensitivity, contraction and decay checks.
    Theory(TheoryArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    #[arg(long, default_value = "train", value_parser = parse_split)]
    pub split: Split,
    #[arg(long)]
    pub max_operand: Option<u32>,
    #[arg(long)]
    pub sub_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainBackboneArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainMrpArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub backbone: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub objective: Option<Objective>,
    #[arg(long)]
    pub unroll: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct DecodeArgs {
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Dynamic policy threshold.
    #[arg(long, conflicts_with = "r")]
    pub tau: Option<f64>,
    /// Static policy: tokens per step.
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    pub strict_recompute_on_reject: bool,
}

impl DecodeArgs {
    fn apply(&self, d: &mut DecodeConfig) {
        if let Some(m) = self.mode {
            d.mode = m;
        }
        if let Some(k) = self.k {
            d.k = k;
        }
        if let Some(tau) = self.tau {
            d.policy = Policy::Dynamic { tau };
        }
        if let Some(r) = self.r {
            d.policy = Policy::Static { r };
        }
        if let Some(n) = self.max_new_tokens {
            d.max_new_tokens = n;
        }
        if self.strict_recompute_on_reject {
            d.strict_recompute_on_reject = true;
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub backbone: PathBuf,
    #[arg(long)]
    pub mrp: Option<PathBuf>,
    #[arg(long)]
    pub prompt: String,
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Write the decode trace in the checkpoint container format.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub backbone: PathBuf,
    #[arg(long)]
    pub mrp: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub limit: Option<usize>,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Debug, Args)]
pub struct MeasureArgs {
    #[arg(long)]
    pub backbone: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub min_blocks: Option<usize>,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub backbone: PathBuf,
    #[arg(long)]
    pub mrp: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub taus: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DepthSweepArgs {
    #[arg(long)]
    pub backbone: PathBuf,
    /// One residual-head checkpoint per depth.
    #[arg(long, required = true, num_args = 1..)]
    pub mrp: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub taus: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TheoryArgs {
    #[arg(long)]
    pub backbone: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub limit: Option<usize>,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "eval" => Ok(Split::Eval),
        "any" => Ok(Split::Any),
        other => Err(format!("unknown split {other:?} (train, eval, any)")),
    }
}

/// Per-run bookkeeping written next to the outputs.
#[derive(Debug, Default, Serialize)]
pub struct Manifest {
    pub version: String,
    pub command: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    fn new(command: &str) -> Self {
        Self {
            version: format!("mrp {}", env!("CARGO_PKG_VERSION")),
            command: command.into(),
            ..Default::default()
        }
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), checkpoint::file_sha256(path)?);
        Ok(())
    }

    fn output(&mut self, path: &Path) -> Result<()> {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        self.outputs.insert(name, checkpoint::file_sha256(path)?);
        Ok(())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    checkpoint::write_bytes(path, text.as_bytes())
}

fn finish_run(out: &Path, config: &RunConfig, manifest: &Manifest) -> Result<()> {
    write_json(&out.join("config.json"), config)?;
    write_json(&out.join("manifest.json"), manifest)
}

fn exec_mode(threads: Option<usize>) -> ExecMode {
    match threads {
        Some(1) => ExecMode::Sequential,
        _ => ExecMode::Parallel,
    }
}

fn load_data(path: &Path, block_size: usize, limit: Option<usize>) -> Result<Vec<Example>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    let mut data = read_dataset(path, block_size)?;
    if let Some(n) = limit {
        data.truncate(n);
    }
    Ok(data)
}

fn prompts(data: &[Example], block_size: usize, max_new_tokens: usize) -> Result<Vec<SequenceState>> {
    data.iter()
        .map(|e| SequenceState::for_generation(&e.ids[..e.prompt_len], max_new_tokens.div_ceil(block_size), block_size))
        .collect()
}

pub fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let env = std::env::var(SEED_ENV).ok();
    config.resolve_seed(env.as_deref(), cli.seed)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidConfig("--threads must be at least 1".into()));
        }
        exec::set_threads(n);
    }
    let mode = exec_mode(cli.threads);
    match cli.command {
        Command::GenData(a) => gen_data(config, a),
        Command::TrainBackbone(a) => train_backbone(config, a, mode),
        Command::TrainMrp(a) => train_mrp(config, a, mode),
        Command::Generate(a) => generate(config, a),
        Command::Eval(a) => eval(config, a, mode),
        Command::Measure(a) => measure(config, a, mode),
        Command::Sweep(a) => sweep(config, a, mode),
        Command::DepthSweep(a) => depth_sweep(config, a, mode),
        Command::Theory(a) => theory(config, a, mode),
    }
}

fn gen_data(mut config: RunConfig, a: GenDataArgs) -> Result<()> {
    if let Some(m) = a.max_operand {
        config.task.max_operand = m;
    }
    if let Some(f) = a.sub_fraction {
        config.task.sub_fraction = f;
    }
    let problems = sample_problems(config.seed, a.count, &config.task, a.split)?;
    let examples = build_examples(&problems, config.backbone.block_size)?;
    write_dataset(&a.out, &examples)?;
    println!("{}", examples.len());
    Ok(())
}

fn train_backbone(mut config: RunConfig, a: TrainBackboneArgs, mode: ExecMode) -> Result<()> {
    if let Some(e) = a.epochs {
        config.train.epochs = e;
    }
    if a.steps.is_some() {
        config.train.total_steps = a.steps;
    }
    config.backbone.validate()?;
    config.train.validate()?;
    let data = load_data(&a.data, config.backbone.block_size, None)?;
    let mut manifest = Manifest::new("train-backbone");
    manifest.input(&a.data)?;
    let (backbone, log) = training::train_backbone(&data, &config.backbone, &config.train, mode, |r| {
        if r.step % 100 == 0 {
            training::progress_line(r, &mut std::io::stderr());
        }
    })?;
    let ckpt = a.out.join("backbone.mrpc");
    let log_path = a.out.join("train_log.csv");
    checkpoint::save_backbone(&ckpt, &backbone)?;
    write_log(&log_path, &log, 0)?;
    manifest.output(&ckpt)?;
    finish_run(&a.out, &config, &manifest)?;
    println!("{}", ckpt.display());
    Ok(())
}

fn train_mrp(mut config: RunConfig, a: TrainMrpArgs, mode: ExecMode) -> Result<()> {
    if let Some(o) = a.objective {
        config.mrp.objective = o;
    }
    if let Some(u) = a.unroll {
        config.train.unroll = u;
    }
    if let Some(d) = a.depth {
        config.mrp.depth = d;
    }
    if let Some(e) = a.epochs {
        config.train.epochs = e;
    }
    if a.steps.is_some() {
        config.train.total_steps = a.steps;
    }
    config.mrp.validate()?;
    config.train.validate()?;
    let backbone = checkpoint::load_backbone(&a.backbone)?;
    config.backbone = backbone.config.clone();
    let data = load_data(&a.data, backbone.config.block_size, None)?;
    let mut manifest = Manifest::new("train-mrp");
    manifest.input(&a.data)?;
    manifest.input(&a.backbone)?;
    let (head, log) = training::train_mrp(&data, &backbone, &config.mrp, &config.train, mode, |r| {
        if r.step % 50 == 0 {
            training::progress_line(r, &mut std::io::stderr());
        }
    })?;
    let ckpt = a.out.join("mrp.mrpc");
    let log_path = a.out.join("train_log.csv");
    checkpoint::save_mrp(&ckpt, &head)?;
    write_log(&log_path, &log, config.train.unroll)?;
    manifest.output(&ckpt)?;
    finish_run(&a.out, &config, &manifest)?;
    println!("{}", ckpt.display());
    Ok(())
}

struct Models {
    backbone: Backbone,
    head: Option<MrpHead>,
}

impl Models {
    fn load(backbone: &Path, mrp: Option<&Path>, manifest: &mut Manifest) -> Result<Self> {
        let b = checkpoint::load_backbone(backbone)?;
        manifest.input(backbone)?;
        let head = match mrp {
            Some(p) => {
                let h = checkpoint::load_mrp(p)?;
                manifest.input(p)?;
                if h.d_model != b.config.d_model {
                    return Err(Error::InvalidConfig(format!(
                        "head width {} does not match backbone width {}",
                        h.d_model, b.config.d_model
                    )));
                }
                Some(h)
            }
            None => None,
        };
        Ok(Self { backbone: b, head })
    }

    fn bound(&self) -> Option<BoundHead<'_, Backbone>> {
        self.head.as_ref().map(|h| BoundHead {
            head: h,
            backbone: &self.backbone,
        })
    }
}

fn needs_head(d: &DecodeConfig, has_head: bool) -> Result<()> {
    if d.mode != Mode::Baseline && d.k > 0 && !has_head {
        return Err(Error::InvalidConfig(format!("{} mode with k > 0 needs --mrp", d.mode.name())));
    }
    Ok(())
}

fn generate(mut config: RunConfig, a: GenerateArgs) -> Result<()> {
    a.decode.apply(&mut config.decode);
    config.decode.validate()?;
    needs_head(&config.decode, a.mrp.is_some())?;
    let mut manifest = Manifest::new("generate");
    let models = Models::load(&a.backbone, a.mrp.as_deref(), &mut manifest)?;
    let bound = models.bound();
    let head = bound.as_ref().map(|b| b as &dyn ResidualHead);
    let (text, stats, trace) = inference::generate(
        &models.backbone,
        head,
        &a.prompt,
        &config.decode,
        models.backbone.config.max_len,
    )?;
    println!("{text}");
    eprintln!("backbone_forwards {}", stats.backbone_forwards);
    eprintln!("mrp_forwards {}", stats.mrp_forwards);
    eprintln!("tokens {}", stats.tokens);
    eprintln!("forwards_per_token {}", stats.backbone_per_token());
    match stats.accept_rate() {
        Some(r) => eprintln!("accept_rate {r}"),
        None => eprintln!("accept_rate -"),
    }
    if let Some(p) = &a.trace {
        checkpoint::write_bytes(p, &checkpoint::trace_bytes(&trace)?)?;
    }
    Ok(())
}

fn eval(mut config: RunConfig, a: EvalArgs, mode: ExecMode) -> Result<()> {
    a.decode.apply(&mut config.decode);
    config.decode.validate()?;
    needs_head(&config.decode, a.mrp.is_some())?;
    let mut manifest = Manifest::new("eval");
    let models = Models::load(&a.backbone, a.mrp.as_deref(), &mut manifest)?;
    let data = load_data(&a.data, models.backbone.config.block_size, a.limit)?;
    manifest.input(&a.data)?;
    let bound = models.bound();
    let head = bound.as_ref().map(|b| b as &dyn ResidualHead);
    let cell = Cell {
        mode: config.decode.mode,
        policy: config.decode.policy,
        k: config.decode.k,
    };
    let depth = models.head.as_ref().map(|h| h.config.depth);
    let rows = bench::run_table(&models.backbone, head, &data, &[cell], depth, config.decode.max_new_tokens, mode)?;
    let table = a.out.join("table.csv");
    bench::write_table(&table, &rows)?;
    manifest.output(&table)?;
    finish_run(&a.out, &config, &manifest)?;
    println!("accuracy {}", rows[0].accuracy);
    Ok(())
}

fn measure(mut config: RunConfig, a: MeasureArgs, mode: ExecMode) -> Result<()> {
    if let Some(m) = a.min_blocks {
        config.measure.min_blocks = m;
    }
    let mut manifest = Manifest::new("measure");
    let models = Models::load(&a.backbone, None, &mut manifest)?;
    let b = models.backbone.config.block_size;
    let data = load_data(&a.data, b, a.limit)?;
    manifest.input(&a.data)?;
    let xs = prompts(&data, b, config.measure.max_new_tokens)?;
    let report = bench::measure_residuals(&models.backbone, &xs, &config.measure, mode)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let path = a.out.join("residuals.csv");
    bench::write_residuals(&path, &report.curves)?;
    manifest.output(&path)?;
    finish_run(&a.out, &config, &manifest)?;
    print!("{}", bench::residual_histogram(&report.curves));
    Ok(())
}

fn sweep(mut config: RunConfig, a: SweepArgs, mode: ExecMode) -> Result<()> {
    if let Some(t) = a.taus {
        config.sweep.taus = t;
    }
    if let Some(k) = a.ks {
        config.sweep.ks = k;
    }
    let mut manifest = Manifest::new("sweep");
    let models = Models::load(&a.backbone, Some(&a.mrp), &mut manifest)?;
    let data = load_data(&a.data, models.backbone.config.block_size, a.limit)?;
    manifest.input(&a.data)?;
    let grid = bench::sweep_grid(&config.sweep.taus, &config.sweep.ks, &config.sweep.modes);
    for c in &grid {
        c.policy.validate()?;
    }
    let bound = models.bound().expect("head loaded");
    let depth = models.head.as_ref().map(|h| h.config.depth);
    let rows = bench::run_table(&models.backbone, Some(&bound), &data, &grid, depth, config.decode.max_new_tokens, mode)?;
    let table = a.out.join("table.csv");
    bench::write_table(&table, &rows)?;
    manifest.output(&table)?;
    finish_run(&a.out, &config, &manifest)?;
    println!("{} rows", rows.len());
    Ok(())
}

fn depth_sweep(mut config: RunConfig, a: DepthSweepArgs, mode: ExecMode) -> Result<()> {
    if let Some(t) = a.taus {
        config.sweep.taus = t;
    }
    if let Some(k) = a.ks {
        config.sweep.ks = k;
    }
    let mut manifest = Manifest::new("depth-sweep");
    let backbone = checkpoint::load_backbone(&a.backbone)?;
    manifest.input(&a.backbone)?;
    let mut heads = Vec::with_capacity(a.mrp.len());
    for p in &a.mrp {
        heads.push(checkpoint::load_mrp(p)?);
        manifest.input(p)?;
    }
    let data = load_data(&a.data, backbone.config.block_size, a.limit)?;
    manifest.input(&a.data)?;
    let grid = bench::sweep_grid(&config.sweep.taus, &config.sweep.ks, &config.sweep.modes);
    let bound: Vec<BoundHead<Backbone>> = heads
        .iter()
        .map(|h| BoundHead {
            head: h,
            backbone: &backbone,
        })
        .collect();
    let pairs: Vec<(usize, &dyn ResidualHead)> = heads
        .iter()
        .zip(&bound)
        .map(|(h, b)| (h.config.depth, b as &dyn ResidualHead))
        .collect();
    let rows = bench::depth_sweep(&backbone, &pairs, &data, &grid, config.decode.max_new_tokens, mode)?;
    let table = a.out.join("table.csv");
    bench::write_table(&table, &rows)?;
    manifest.output(&table)?;
    finish_run(&a.out, &config, &manifest)?;
    println!("{} rows", rows.len());
    Ok(())
}

/// Theory rows for a backbone and a set of prompts. Fails with an
/// assertion error if the softmax sensitivity bound is exceeded.
pub fn theory_rows(
    backbone: &Backbone,
    xs: &[SequenceState],
    config: &TheoryConfig,
    seed: u64,
    mode: ExecMode,
) -> Result<Vec<TheoryRow>> {
    let mut rows = Vec::new();
    let mut violated = Vec::new();
    for (i, &v) in config.vocab_sizes.iter().enumerate() {
        let mut rng = exec::stream_rng(seed, 100, i as u64);
        let max = bench::check_softmax_lipschitz(config.trials, v, &mut rng)?;
        let ok = max <= bench::SOFTMAX_TV_BOUND + 1e-9;
        if !ok {
            violated.push(format!("V={v}: {max}"));
        }
        rows.push(TheoryRow::new(format!("lipschitz_max_v{v}"), max, config.trials, if ok { "ok" } else { "violation" }));
    }

    let mut all = Vec::new();
    let mut greedy: Vec<DecodeTrace> = Vec::new();
    for &r in &config.reveal_counts {
        let cfg = DecodeConfig {
            mode: Mode::Baseline,
            policy: Policy::Static { r },
            k: 0,
            max_new_tokens: xs.first().map_or(backbone.block_size(), |x| x.response_range().len()),
            strict_recompute_on_reject: false,
        };
        let traces = inference::decode_many(backbone, None, xs, &cfg, mode)?
            .into_iter()
            .map(|(_, _, t)| t)
            .collect::<Vec<_>>();
        all.extend(bench::transitions(backbone, &traces)?);
        if r == 1 {
            greedy = traces;
        }
    }
    let report = bench::check_contraction(&all)?;
    let n = report.tv.len();
    rows.push(TheoryRow::new("kappa_hat", report.kappa_hat, report.transitions, ""));
    rows.push(TheoryRow::new("d_max", report.d_max, report.transitions, ""));
    rows.push(TheoryRow::new("tv_mean", report.mean_tv(), n, ""));
    rows.push(TheoryRow::new("tv_max", report.tv.iter().copied().fold(0.0, f64::max), n, ""));
    rows.push(TheoryRow::new("slack_mean", report.mean_slack(), n, ""));
    rows.push(TheoryRow::new(
        "violations",
        report.violations as f64,
        n,
        if report.violations == 0 { "ok" } else { "violation" },
    ));
    for (r, &(mean, count)) in &report.tv_by_revealed {
        rows.push(TheoryRow::new(format!("tv_mean_revealed_{r}"), mean, count, ""));
    }

    if !greedy.is_empty() {
        let series = bench::decay_series(&greedy);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xDECA_F000);
        let d = bench::check_decay(&series, config.shuffles, &mut rng)?;
        let flag = if d.degenerate { "degenerate" } else { "" };
        rows.push(TheoryRow::new("decay_spearman", d.rho, d.n, flag));
        rows.push(TheoryRow::new("decay_p_value", d.p_value, config.shuffles, flag));
    }
    if !violated.is_empty() {
        return Err(Error::Assertion(format!("softmax sensitivity above 1/2: {}", violated.join(", "))));
    }
    Ok(rows)
}

fn theory(mut config: RunConfig, a: TheoryArgs, mode: ExecMode) -> Result<()> {
    if let Some(t) = a.trials {
        config.theory.trials = t;
    }
    let mut manifest = Manifest::new("theory");
    let models = Models::load(&a.backbone, None, &mut manifest)?;
    let b = models.backbone.config.block_size;
    let data = load_data(&a.data, b, a.limit)?;
    manifest.input(&a.data)?;
    let xs = prompts(&data, b, b)?;
    let rows = theory_rows(&models.backbone, &xs, &config.theory, config.seed, mode)?;
    let path = a.out.join("theory.csv");
    bench::write_theory(&path, &rows)?;
    manifest.output(&path)?;
    finish_run(&a.out, &config, &manifest)?;
    for r in &rows {
        println!("{} {} {}", r.metric, r.value, r.flag);
    }
    Ok(())
}

/// Parses arguments, runs, and maps errors to exit codes.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_precedence() {
        let mut c = RunConfig {
            seed: 1,
            ..Default::default()
        };
        c.resolve_seed(None, None).unwrap();
        assert_eq!((c.seed, c.train.seed), (1, 1));
        c.resolve_seed(Some("7"), None).unwrap();
        assert_eq!(c.seed, 7);
        c.resolve_seed(Some("7"), Some(9)).unwrap();
        assert_eq!((c.seed, c.train.seed), (9, 9));
        assert!(c.resolve_seed(Some("x"), None).is_err());
    }

    #[test]
    fn unknown_config_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sede": 3}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"mrp": {"depht": 3}}"#).is_err());
        let c: RunConfig = serde_json::from_str(r#"{"mrp": {"depth": 2}}"#).unwrap();
        assert_eq!(c.mrp.depth, 2);
    }

    #[test]
    fn sweep_defaults() {
        let c = SweepConfig::default();
        assert_eq!(bench::sweep_grid(&c.taus, &c.ks, &c.modes).len(), 5 * 4 * 2);
    }
}
