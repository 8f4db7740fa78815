//! Desk-scale measurements: residual magnitudes, the contraction and decay
//! checks, softmax sensitivity, and accuracy/forward-count tables.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Denoiser};
use crate::corpus::{response_text, Example, Vocab};
use crate::diffusion::{DecodeTrace, Policy, SequenceState, StepKind};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::inference::{decode, DecodeConfig, DecodeStats, Mode};
use crate::mrp::ResidualHead;
use crate::numerics::{l2, rms, softmax_rows, tv_distance, Tensor};

/// Largest softmax total-variation change per unit of logit L2 distance.
pub const SOFTMAX_TV_BOUND: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Logits,
    Hidden,
}

impl Space {
    pub fn name(self) -> &'static str {
        match self {
            Space::Logits => "logits",
            Space::Hidden => "hidden",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualCurve {
    pub space: Space,
    pub k: usize,
    pub rms_residual: f64,
    pub rms_reference: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasureConfig {
    pub min_blocks: usize,
    /// Only the first `max_blocks_per_prompt` decoded blocks of each prompt
    /// are measured.
    pub max_blocks_per_prompt: usize,
    /// Prompts whose laid-out length exceeds this are skipped.
    pub max_prompt_len: usize,
    pub max_new_tokens: usize,
}

impl Default for MeasureConfig {
    fn default() -> Self {
        Self {
            min_blocks: 200,
            max_blocks_per_prompt: 4,
            max_prompt_len: 64,
            max_new_tokens: 8,
        }
    }
}

/// The `B + 1` states of one decoded block, restricted to the block rows.
#[derive(Clone, Debug)]
pub struct BlockStates {
    pub hidden: Vec<Tensor>,
    pub logits: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct ResidualReport {
    pub curves: Vec<ResidualCurve>,
    pub blocks: usize,
    pub skipped_prompts: usize,
    pub warnings: Vec<String>,
}

/// Decodes `x` with static r=1 and returns its trace and final state.
pub fn greedy_trace<F: Denoiser + ?Sized>(f: &F, x: &SequenceState) -> Result<(SequenceState, DecodeTrace)> {
    let cfg = DecodeConfig {
        mode: Mode::Baseline,
        policy: Policy::Static { r: 1 },
        k: 0,
        max_new_tokens: x.response_range().len(),
        strict_recompute_on_reject: false,
    };
    let (y, _, trace) = decode(f, None, x, &cfg)?;
    Ok((y, trace))
}

/// Block states `s = 0..=B` from a greedy trace: the recorded forwards plus
/// one extra forward on each fully revealed block.
pub fn block_states<F: Denoiser + ?Sized>(
    f: &F,
    final_state: &SequenceState,
    trace: &DecodeTrace,
    max_blocks: usize,
) -> Result<Vec<BlockStates>> {
    let mut by_block: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in trace.steps.iter().enumerate() {
        if s.kind == StepKind::Backbone {
            by_block.entry(s.block).or_default().push(i);
        }
    }
    let b = final_state.block_size;
    let mut out = Vec::new();
    for (&block, steps) in by_block.iter().take(max_blocks) {
        if steps.len() != b {
            return Err(Error::Contract(format!(
                "block {block} has {} recorded states, expected {b}",
                steps.len()
            )));
        }
        let range = final_state.block_range(block);
        let mut hidden = Vec::with_capacity(b + 1);
        let mut logits = Vec::with_capacity(b + 1);
        for &i in steps {
            let s = &trace.steps[i];
            hidden.push(s.h.slice_rows(range.start, range.end));
            logits.push(s.logits.slice_rows(range.start, range.end));
        }
        let full = f.forward(&final_state.ids[..range.end], final_state.prompt_len)?;
        hidden.push(full.h.slice_rows(range.start, range.end));
        logits.push(full.logits.slice_rows(range.start, range.end));
        out.push(BlockStates { hidden, logits });
    }
    Ok(out)
}

fn rms_diff(a: &Tensor, b: &Tensor) -> f64 {
    let d: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| y - x).collect();
    rms(&d)
}

/// Mean RMS of `X^(t+k) − X^(t)` over all valid `(t, k)`, against the mean
/// RMS of `X^(s)` for `s = 1..=B`.
pub fn residual_curves(blocks: &[BlockStates], block_size: usize) -> Vec<ResidualCurve> {
    let mut curves = Vec::with_capacity(2 * block_size);
    for space in [Space::Logits, Space::Hidden] {
        let pick = |bs: &BlockStates| -> Vec<Tensor> {
            match space {
                Space::Logits => bs.logits.clone(),
                Space::Hidden => bs.hidden.clone(),
            }
        };
        let mut ref_sum = 0.0;
        let mut ref_n = 0usize;
        let mut sums = vec![0.0; block_size + 1];
        let mut counts = vec![0usize; block_size + 1];
        for bs in blocks {
            let xs = pick(bs);
            for x in &xs[1..] {
                ref_sum += x.rms();
                ref_n += 1;
            }
            for k in 1..=block_size {
                for t in 0..=(block_size - k) {
                    sums[k] += rms_diff(&xs[t], &xs[t + k]);
                    counts[k] += 1;
                }
            }
        }
        let reference = if ref_n == 0 { 0.0 } else { ref_sum / ref_n as f64 };
        for k in 1..=block_size {
            curves.push(ResidualCurve {
                space,
                k,
                rms_residual: if counts[k] == 0 { 0.0 } else { sums[k] / counts[k] as f64 },
                rms_reference: reference,
                n: counts[k],
            });
        }
    }
    curves
}

/// Greedy static r=1 decoding of every prompt, then residual magnitudes by
/// revealed-token distance `k`.
pub fn measure_residuals<F: Denoiser + ?Sized>(
    f: &F,
    prompts: &[SequenceState],
    config: &MeasureConfig,
    mode: ExecMode,
) -> Result<ResidualReport> {
    let kept: Vec<&SequenceState> = prompts.iter().filter(|x| x.prompt_len <= config.max_prompt_len).collect();
    let skipped_prompts = prompts.len() - kept.len();
    let per_prompt = exec::map_with(mode, &kept, |x| -> Result<Vec<BlockStates>> {
        let (y, trace) = greedy_trace(f, x)?;
        block_states(f, &y, &trace, config.max_blocks_per_prompt)
    });
    let mut blocks = Vec::new();
    for r in per_prompt {
        blocks.extend(r?);
    }
    let mut warnings = Vec::new();
    if blocks.len() < config.min_blocks {
        let w = format!("only {} blocks measured, minimum is {}", blocks.len(), config.min_blocks);
        log::warn!("{w}");
        warnings.push(w);
    }
    Ok(ResidualReport {
        curves: residual_curves(&blocks, f.block_size()),
        blocks: blocks.len(),
        skipped_prompts,
        warnings,
    })
}

/// `D_TV(softmax a, softmax b) / ‖a − b‖₂`, or 0 when `a == b`.
pub fn softmax_tv_ratio(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let dist = l2(&d);
    if dist == 0.0 {
        return 0.0;
    }
    let p = softmax_rows(&Tensor::new(vec![1, a.len()], a.to_vec()).expect("row")).expect("row");
    let q = softmax_rows(&Tensor::new(vec![1, b.len()], b.to_vec()).expect("row")).expect("row");
    tv_distance(p.data(), q.data()) / dist
}

/// Maximum TV/L2 ratio over random logit pairs of width `v`. Scales of the
/// logits and of the perturbation are drawn log-uniformly so that both the
/// flat and the saturated regimes are probed.
pub fn check_softmax_lipschitz<R: Rng + ?Sized>(trials: usize, v: usize, rng: &mut R) -> Result<f64> {
    if trials == 0 || v == 0 {
        return Err(Error::InvalidConfig("trials and vocabulary width must be positive".into()));
    }
    let normal = rand_distr::StandardNormal;
    let mut max_ratio = 0.0f64;
    for _ in 0..trials {
        let scale = 10f64.powf(rng.random_range(-2.0..1.5));
        let eps = 10f64.powf(rng.random_range(-4.0..1.0));
        let a: Vec<f64> = (0..v).map(|_| scale * rng.sample::<f64, _>(normal)).collect();
        let b: Vec<f64> = a.iter().map(|x| x + eps * rng.sample::<f64, _>(normal)).collect();
        max_ratio = max_ratio.max(softmax_tv_ratio(&a, &b));
    }
    Ok(max_ratio)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Transition {
    /// Number of positions revealed between the two states.
    pub revealed: usize,
    /// Sequence length seen by the forward.
    pub len: usize,
    /// Largest embedding distance among the revealed positions.
    pub max_embed_dist: f64,
    /// Per still-masked position: (TV distance, logit-difference L2 norm).
    pub positions: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TheoryReport {
    pub kappa_hat: f64,
    pub tv: Vec<f64>,
    pub bounds: Vec<f64>,
    pub violations: usize,
    pub d_max: f64,
    /// Mean TV keyed by the number of revealed positions, with counts.
    pub tv_by_revealed: BTreeMap<usize, (f64, usize)>,
    pub transitions: usize,
}

impl TheoryReport {
    pub fn mean_tv(&self) -> f64 {
        if self.tv.is_empty() {
            0.0
        } else {
            self.tv.iter().sum::<f64>() / self.tv.len() as f64
        }
    }

    /// Mean of `bound − tv`.
    pub fn mean_slack(&self) -> f64 {
        if self.tv.is_empty() {
            return 0.0;
        }
        self.bounds.iter().zip(&self.tv).map(|(b, t)| b - t).sum::<f64>() / self.tv.len() as f64
    }
}

/// Consecutive same-block backbone states of each trace.
pub fn transitions(backbone: &Backbone, traces: &[DecodeTrace]) -> Result<Vec<Transition>> {
    let mut out = Vec::new();
    for trace in traces {
        let steps: Vec<_> = trace.steps.iter().filter(|s| s.kind == StepKind::Backbone).collect();
        for pair in steps.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if a.block != b.block || a.h.rows() != b.h.rows() {
                continue;
            }
            let rows = a.logits.rows();
            let dists = backbone.row_distances(&a.ids[..rows], &b.ids[..rows])?;
            let pa = softmax_rows(&a.logits)?;
            let pb = softmax_rows(&b.logits)?;
            let positions = (0..rows)
                .filter(|&i| a.masked[i] && b.masked[i])
                .map(|i| {
                    let d: Vec<f64> = a.logits.row(i).iter().zip(b.logits.row(i)).map(|(x, y)| y - x).collect();
                    (tv_distance(pa.row(i), pb.row(i)), l2(&d))
                })
                .collect();
            out.push(Transition {
                revealed: dists.len(),
                len: rows,
                max_embed_dist: dists.iter().copied().fold(0.0, f64::max),
                positions,
            });
        }
    }
    Ok(out)
}

/// Contraction check against `TV ≤ κ̂ · |R|/L · D`, with `κ̂` the largest
/// observed `L · ‖Δℓ‖₂ / (|R| · D)`.
pub fn check_contraction(transitions: &[Transition]) -> Result<TheoryReport> {
    if transitions.is_empty() {
        return Err(Error::InvalidConfig("no transitions to check".into()));
    }
    let mut kappa = 0.0f64;
    for t in transitions {
        if t.revealed == 0 || t.max_embed_dist == 0.0 {
            continue;
        }
        let scale = t.revealed as f64 * t.max_embed_dist / t.len as f64;
        for &(_, dl) in &t.positions {
            kappa = kappa.max(dl / scale);
        }
    }
    let mut report = TheoryReport {
        kappa_hat: kappa,
        transitions: transitions.len(),
        ..Default::default()
    };
    for t in transitions {
        report.d_max = report.d_max.max(t.max_embed_dist);
        let bound = kappa * t.revealed as f64 / t.len as f64 * t.max_embed_dist;
        for &(tv, _) in &t.positions {
            report.tv.push(tv);
            report.bounds.push(bound);
            if tv > bound + 1e-12 {
                report.violations += 1;
            }
            let e = report.tv_by_revealed.entry(t.revealed).or_insert((0.0, 0));
            e.0 += tv;
            e.1 += 1;
        }
    }
    for e in report.tv_by_revealed.values_mut() {
        e.0 /= e.1 as f64;
    }
    Ok(report)
}

/// Average ranks, ties sharing the mean of their positions (1-based).
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Spearman correlation; `None` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    pearson(&ranks(x), &ranks(y))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecayReport {
    pub rho: f64,
    /// One-sided permutation p-value for `rho < 0`.
    pub p_value: f64,
    pub n: usize,
    pub blocks: usize,
    pub degenerate: bool,
}

/// Per block, the RMS of the logit residual between consecutive greedy
/// states over the block rows still masked after the step, indexed by step.
/// Steps that leave nothing masked are dropped.
pub fn decay_series(traces: &[DecodeTrace]) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for trace in traces {
        let mut by_block: BTreeMap<usize, Vec<&crate::diffusion::StepRecord>> = BTreeMap::new();
        for s in trace.steps.iter().filter(|s| s.kind == StepKind::Backbone) {
            by_block.entry(s.block).or_default().push(s);
        }
        for steps in by_block.values() {
            let series: Vec<f64> = steps
                .windows(2)
                .filter_map(|w| {
                    let rows = w[0].logits.rows().min(w[1].logits.rows());
                    let d: Vec<f64> = (0..rows)
                        .filter(|&i| w[1].masked[i])
                        .flat_map(|i| w[0].logits.row(i).iter().zip(w[1].logits.row(i)).map(|(a, b)| b - a))
                        .collect();
                    (!d.is_empty()).then(|| rms(&d))
                })
                .collect();
            out.push(series);
        }
    }
    out
}

fn pooled_rho(series: &[Vec<f64>]) -> Option<f64> {
    let mut s = Vec::new();
    let mut v = Vec::new();
    for block in series {
        for (i, &r) in block.iter().enumerate() {
            s.push(i as f64);
            v.push(r);
        }
    }
    spearman(&s, &v)
}

/// Step-vs-residual Spearman correlation pooled over blocks, with a
/// permutation test that shuffles residuals within each block.
pub fn check_decay<R: Rng + ?Sized>(series: &[Vec<f64>], shuffles: usize, rng: &mut R) -> Result<DecayReport> {
    let n: usize = series.iter().map(Vec::len).sum();
    if n < 2 {
        return Err(Error::InvalidConfig("decay check needs at least two residuals".into()));
    }
    let Some(rho) = pooled_rho(series) else {
        return Ok(DecayReport {
            rho: 0.0,
            p_value: 1.0,
            n,
            blocks: series.len(),
            degenerate: true,
        });
    };
    let mut work: Vec<Vec<f64>> = series.to_vec();
    let mut as_extreme = 0usize;
    for _ in 0..shuffles {
        for b in work.iter_mut() {
            b.shuffle(rng);
        }
        if pooled_rho(&work).unwrap_or(0.0) <= rho {
            as_extreme += 1;
        }
    }
    Ok(DecayReport {
        rho,
        p_value: (as_extreme + 1) as f64 / (shuffles + 1) as f64,
        n,
        blocks: series.len(),
        degenerate: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mode: Mode,
    pub policy: Policy,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub mode: Mode,
    pub policy: Policy,
    pub k: usize,
    pub depth: Option<usize>,
    pub accuracy: f64,
    pub backbone_fpt: f64,
    pub mrp_fpt: f64,
    pub accept_rate: Option<f64>,
    pub speedup: f64,
}

/// Decodes every example's prompt under `cell`; returns accuracy and stats.
pub fn evaluate<F: Denoiser + ?Sized>(
    f: &F,
    head: Option<&dyn ResidualHead>,
    eval: &[Example],
    cell: &Cell,
    max_new_tokens: usize,
    mode: ExecMode,
) -> Result<(f64, DecodeStats, Vec<String>)> {
    let b = f.block_size();
    let cfg = DecodeConfig {
        mode: cell.mode,
        policy: cell.policy,
        k: cell.k,
        max_new_tokens,
        strict_recompute_on_reject: false,
    };
    let xs = eval
        .iter()
        .map(|e| SequenceState::for_generation(&e.ids[..e.prompt_len], max_new_tokens.div_ceil(b), b))
        .collect::<Result<Vec<_>>>()?;
    let results = exec::map_with(mode, &xs, |x| decode(f, head, x, &cfg));
    let vocab = Vocab::new();
    let mut stats = DecodeStats::default();
    let mut texts = Vec::with_capacity(eval.len());
    let mut hits = 0;
    for (r, e) in results.into_iter().zip(eval) {
        let (y, s, _) = r?;
        stats.merge(&s);
        let text = response_text(&vocab, y.response());
        if text == e.response_text {
            hits += 1;
        }
        texts.push(text);
    }
    let acc = if eval.is_empty() { 0.0 } else { hits as f64 / eval.len() as f64 };
    Ok((acc, stats, texts))
}

/// One row per cell; `speedup` is the baseline backbone forwards per token
/// at the same policy divided by the cell's.
pub fn run_table<F: Denoiser + ?Sized>(
    f: &F,
    head: Option<&dyn ResidualHead>,
    eval: &[Example],
    grid: &[Cell],
    depth: Option<usize>,
    max_new_tokens: usize,
    mode: ExecMode,
) -> Result<Vec<TableRow>> {
    let mut base_fpt: Vec<(Policy, f64)> = Vec::new();
    let mut rows = Vec::with_capacity(grid.len());
    for cell in grid {
        let (acc, stats, _) = evaluate(f, head, eval, cell, max_new_tokens, mode)?;
        let fpt = stats.backbone_per_token();
        let base = match base_fpt.iter().find(|(p, _)| p == &cell.policy) {
            Some(&(_, v)) => v,
            None => {
                let v = if cell.mode == Mode::Baseline {
                    fpt
                } else {
                    let base_cell = Cell {
                        mode: Mode::Baseline,
                        policy: cell.policy,
                        k: 0,
                    };
                    evaluate(f, None, eval, &base_cell, max_new_tokens, mode)?.1.backbone_per_token()
                };
                base_fpt.push((cell.policy, v));
                v
            }
        };
        rows.push(TableRow {
            mode: cell.mode,
            policy: cell.policy,
            k: cell.k,
            depth,
            accuracy: acc,
            backbone_fpt: fpt,
            mrp_fpt: stats.mrp_per_token(),
            accept_rate: stats.accept_rate(),
            speedup: if fpt > 0.0 { base / fpt } else { 0.0 },
        });
    }
    Ok(rows)
}

/// `run_table` once per (depth, head) pair.
pub fn depth_sweep<F: Denoiser + ?Sized>(
    f: &F,
    heads: &[(usize, &dyn ResidualHead)],
    eval: &[Example],
    grid: &[Cell],
    max_new_tokens: usize,
    mode: ExecMode,
) -> Result<Vec<TableRow>> {
    let mut rows = Vec::new();
    for &(depth, head) in heads {
        rows.extend(run_table(f, Some(head), eval, grid, Some(depth), max_new_tokens, mode)?);
    }
    Ok(rows)
}

/// The τ × K × mode grid; K=0 appears once per τ as the baseline cell.
pub fn sweep_grid(taus: &[f64], ks: &[usize], modes: &[Mode]) -> Vec<Cell> {
    let mut grid = Vec::new();
    for &tau in taus {
        let policy = Policy::Dynamic { tau };
        for &mode in modes {
            for &k in ks {
                grid.push(Cell { mode, policy, k });
            }
        }
    }
    grid
}

pub const DEFAULT_TAUS: [f64; 5] = [1.0, 0.975, 0.95, 0.925, 0.9];
pub const DEFAULT_KS: [usize; 4] = [0, 1, 2, 3];

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    csv::Writer::from_path(path).map_err(Error::from)
}

fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_residuals(path: &Path, curves: &[ResidualCurve]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["space", "k", "rms_residual", "rms_reference", "n"])?;
    for c in curves {
        w.write_record([
            c.space.name().to_string(),
            c.k.to_string(),
            c.rms_residual.to_string(),
            c.rms_reference.to_string(),
            c.n.to_string(),
        ])?;
    }
    finish(w, path)
}

pub fn write_table(path: &Path, rows: &[TableRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "mode",
        "policy",
        "param",
        "K",
        "depth",
        "accuracy",
        "backbone_fpt",
        "mrp_fpt",
        "accept_rate",
        "speedup",
    ])?;
    for r in rows {
        w.write_record([
            r.mode.name().to_string(),
            r.policy.name().to_string(),
            r.policy.param().to_string(),
            r.k.to_string(),
            r.depth.map(|d| d.to_string()).unwrap_or_default(),
            r.accuracy.to_string(),
            r.backbone_fpt.to_string(),
            r.mrp_fpt.to_string(),
            r.accept_rate.map(|a| a.to_string()).unwrap_or_default(),
            r.speedup.to_string(),
        ])?;
    }
    finish(w, path)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TheoryRow {
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub flag: String,
}

impl TheoryRow {
    pub fn new(metric: impl Into<String>, value: f64, n: usize, flag: impl Into<String>) -> Self {
        Self {
            metric: metric.into(),
            value,
            n,
            flag: flag.into(),
        }
    }
}

pub fn write_theory(path: &Path, rows: &[TheoryRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["metric", "value", "n", "flag"])?;
    for r in rows {
        w.write_record([r.metric.clone(), r.value.to_string(), r.n.to_string(), r.flag.clone()])?;
    }
    finish(w, path)
}

/// Plain-text bar chart of residual curves.
pub fn residual_histogram(curves: &[ResidualCurve]) -> String {
    let max = curves.iter().map(|c| c.rms_reference.max(c.rms_residual)).fold(0.0, f64::max);
    let mut out = Vec::new();
    for c in curves {
        let width = if max > 0.0 { (40.0 * c.rms_residual / max).round() as usize } else { 0 };
        let _ = writeln!(
            out,
            "{:<7} k={:<2} {:<40} {:.4} / {:.4}",
            c.space.name(),
            c.k,
            "#".repeat(width),
            c.rms_residual,
            c.rms_reference
        );
    }
    String::from_utf8(out).expect("ascii")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rms_closed_form() {
        assert!((rms(&[3.0, 4.0]) - (12.5f64).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn two_way_softmax_ratio() {
        let r = softmax_tv_ratio(&[1.0, 0.0], &[0.0, 0.0]);
        let e = std::f64::consts::E;
        assert!((r - (e / (e + 1.0) - 0.5)).abs() < 1e-12);
        assert_eq!(softmax_tv_ratio(&[0.3, 0.1], &[0.3, 0.1]), 0.0);
    }

    #[test]
    fn spearman_extremes() {
        let s = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(spearman(&s, &[4.0, 3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&s, &[1.0, 2.0, 3.0, 9.0]), Some(1.0));
        assert_eq!(spearman(&s, &[1.0, 1.0, 1.0, 1.0]), None);
        assert_eq!(ranks(&[2.0, 1.0, 2.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn decay_on_synthetic_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let down: Vec<Vec<f64>> = (0..30).map(|_| (0..7).rev().map(|i| i as f64).collect()).collect();
        let r = check_decay(&down, 200, &mut rng).unwrap();
        assert_eq!(r.rho, -1.0);
        assert!(r.p_value < 0.01);
        let flat = vec![vec![1.0; 7]; 3];
        let r = check_decay(&flat, 10, &mut rng).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.rho, 0.0);
    }

    #[test]
    fn empty_transition_list_is_an_error() {
        assert!(check_contraction(&[]).is_err());
    }

    #[test]
    fn no_op_transition_has_zero_tv() {
        let t = Transition {
            revealed: 0,
            len: 8,
            max_embed_dist: 0.0,
            positions: vec![(0.0, 0.0); 3],
        };
        let r = check_contraction(&[t]).unwrap();
        assert!(r.tv.iter().all(|&v| v == 0.0));
        assert_eq!(r.violations, 0);
    }

    #[test]
    fn grid_accounting() {
        let g = sweep_grid(&DEFAULT_TAUS, &DEFAULT_KS, &[Mode::Direct, Mode::Spec]);
        assert_eq!(g.len(), 5 * 4 * 2);
    }
}
