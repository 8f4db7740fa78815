//! Baseline, direct (residual-corrected) and speculative block decoding.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::backbone::Denoiser;
use crate::corpus::{layout_prompt, response_text, Vocab};
use crate::diffusion::{
    confidence_of, denoise_block_baseline, forward_current, row_candidate, select_static, Candidate,
    DecodeTrace, Policy, SequenceState, StepKind, StepRecord,
};
pub use crate::diffusion::DraftRecord;
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::mrp::{apply, Objective, ResidualHead, ResidualOutput};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    Direct,
    Spec,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Direct => "direct",
            Mode::Spec => "spec",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" | "base" => Ok(Mode::Baseline),
            "direct" => Ok(Mode::Direct),
            "spec" | "speculative" => Ok(Mode::Spec),
            other => Err(Error::InvalidConfig(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub mode: Mode,
    pub policy: Policy,
    pub k: usize,
    pub max_new_tokens: usize,
    /// In speculative mode, run a fresh backbone forward instead of reusing
    /// the verification pass whenever a draft was rejected.
    #[serde(default)]
    pub strict_recompute_on_reject: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Baseline,
            policy: Policy::Dynamic { tau: 1.0 },
            k: 0,
            max_new_tokens: 8,
            strict_recompute_on_reject: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidConfig("max_new_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeStats {
    pub backbone_forwards: usize,
    pub mrp_forwards: usize,
    /// Positions decoded by the loop; PAD filled after EOS is not counted.
    pub tokens: usize,
    pub drafts_proposed: usize,
    pub drafts_accepted: usize,
    /// Loop iterations per decoded block.
    pub block_steps: Vec<usize>,
}

impl DecodeStats {
    pub fn merge(&mut self, other: &DecodeStats) {
        self.backbone_forwards += other.backbone_forwards;
        self.mrp_forwards += other.mrp_forwards;
        self.tokens += other.tokens;
        self.drafts_proposed += other.drafts_proposed;
        self.drafts_accepted += other.drafts_accepted;
        self.block_steps.extend_from_slice(&other.block_steps);
    }

    pub fn backbone_per_token(&self) -> f64 {
        self.backbone_forwards as f64 / self.tokens.max(1) as f64
    }

    pub fn mrp_per_token(&self) -> f64 {
        self.mrp_forwards as f64 / self.tokens.max(1) as f64
    }

    pub fn accept_rate(&self) -> Option<f64> {
        (self.drafts_proposed > 0).then(|| self.drafts_accepted as f64 / self.drafts_proposed as f64)
    }
}

fn split(c: &[Candidate]) -> (Vec<usize>, Vec<usize>) {
    c.iter().map(|c| (c.position, c.token)).unzip()
}

fn require_block_start(x: &SequenceState) -> Result<()> {
    if x.is_done() || x.current_masked().len() != x.block_size {
        return Err(Error::Contract("current block must be fully masked".into()));
    }
    Ok(())
}

fn predict(
    head: &dyn ResidualHead,
    x: &SequenceState,
    run_h: &Tensor,
    run_logits: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let out: ResidualOutput = head.predict(&x.ids[..run_h.rows()], x.prompt_len, run_h)?;
    apply(head.objective(), run_h, run_logits, out)
}

/// Algorithm 2 over the current block: each backbone forward is followed by
/// `k` residual rounds that unmask on the corrected logits.
pub fn direct_decode<F: Denoiser + ?Sized>(
    f: &F,
    head: Option<&dyn ResidualHead>,
    x: &SequenceState,
    policy: &Policy,
    k: usize,
) -> Result<(SequenceState, DecodeStats, DecodeTrace)> {
    require_block_start(x)?;
    if k > 0 && head.is_none() {
        return Err(Error::Contract("direct decoding with k > 0 needs a residual head".into()));
    }
    let mut x = x.clone();
    let block = x.current_block;
    let mut stats = DecodeStats::default();
    let mut trace = DecodeTrace::default();
    let mut iterations = 0;
    while !x.current_masked().is_empty() {
        iterations += 1;
        let out = forward_current(f, &x)?;
        stats.backbone_forwards += 1;
        let mut rec = StepRecord::new(StepKind::Backbone, &x, out.h, out.logits);
        let (pos, tok) = split(&policy.select(&confidence_of(&rec.logits, &x)));
        x.place(&pos, &tok)?;
        rec.revealed = pos.into_iter().zip(tok).collect();
        let (mut run_h, mut run_logits) = (rec.h.clone(), rec.logits.clone());
        trace.steps.push(rec);

        for _ in 0..k {
            if x.current_masked().is_empty() {
                break;
            }
            let head = head.expect("checked above");
            (run_h, run_logits) = predict(head, &x, &run_h, &run_logits)?;
            stats.mrp_forwards += 1;
            let mut rec = StepRecord::new(StepKind::Mrp, &x, run_h.clone(), run_logits.clone());
            let (pos, tok) = split(&policy.select(&confidence_of(&run_logits, &x)));
            x.place(&pos, &tok)?;
            rec.revealed = pos.into_iter().zip(tok).collect();
            trace.steps.push(rec);
        }
    }
    debug_assert_eq!(x.current_block, block);
    x.advance();
    stats.tokens = x.block_size;
    stats.block_steps.push(iterations);
    Ok((x, stats, trace))
}

/// Position-wise acceptance of `drafts` against verification logits.
/// `policy_revealed` lists positions unmasked by the policy in the same
/// iteration; a draft there is a contract violation.
pub fn verify(
    drafts: &[DraftRecord],
    logits: &Tensor,
    policy_revealed: &[usize],
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    for d in drafts {
        if policy_revealed.contains(&d.position) {
            return Err(Error::Contract(format!(
                "draft at {} was already unmasked by the policy",
                d.position
            )));
        }
        if d.position >= logits.rows() {
            return Err(Error::InvalidShape(format!("draft at {} outside logits", d.position)));
        }
        if row_candidate(logits.row(d.position), d.position).token == d.token {
            accepted.push(d.position);
        } else {
            rejected.push(d.position);
        }
    }
    Ok((accepted, rejected))
}

/// Algorithm 3 over the current block: `k` single-token drafts per
/// iteration, one verification forward, position-wise acceptance, and the
/// verification pass reused as the next iteration's backbone output.
pub fn spec_decode<F: Denoiser + ?Sized>(
    f: &F,
    head: Option<&dyn ResidualHead>,
    x: &SequenceState,
    policy: &Policy,
    k: usize,
    strict_recompute_on_reject: bool,
) -> Result<(SequenceState, DecodeStats, DecodeTrace)> {
    require_block_start(x)?;
    if k > 0 && head.is_none() {
        return Err(Error::Contract("speculative decoding with k > 0 needs a residual head".into()));
    }
    let mut x = x.clone();
    let mut stats = DecodeStats::default();
    let mut trace = DecodeTrace::default();
    let mut iterations = 0;
    // Index of the verification record whose forward seeds the next iteration.
    let mut reused: Option<usize> = None;
    while !x.current_masked().is_empty() {
        iterations += 1;
        let base_idx = match reused.take() {
            Some(i) => i,
            None => {
                let out = forward_current(f, &x)?;
                stats.backbone_forwards += 1;
                trace.steps.push(StepRecord::new(StepKind::Backbone, &x, out.h, out.logits));
                trace.steps.len() - 1
            }
        };
        let (pos, tok) = split(&policy.select(&confidence_of(&trace.steps[base_idx].logits, &x)));
        x.place(&pos, &tok)?;
        trace.steps[base_idx].revealed = pos.iter().copied().zip(tok).collect();
        if x.current_masked().is_empty() || k == 0 {
            continue;
        }

        let head = head.expect("checked above");
        let (mut run_h, mut run_logits) = (trace.steps[base_idx].h.clone(), trace.steps[base_idx].logits.clone());
        let mut drafts = Vec::new();
        for round in 1..=k {
            if x.current_masked().is_empty() {
                break;
            }
            (run_h, run_logits) = predict(head, &x, &run_h, &run_logits)?;
            stats.mrp_forwards += 1;
            let mut rec = StepRecord::new(StepKind::Mrp, &x, run_h.clone(), run_logits.clone());
            let best = select_static(&confidence_of(&run_logits, &x), 1);
            let d = DraftRecord {
                position: best[0].position,
                token: best[0].token,
                round,
                confidence: best[0].prob,
            };
            x.place(&[d.position], &[d.token])?;
            rec.drafts.push(d);
            trace.steps.push(rec);
            drafts.push(d);
        }

        let out = forward_current(f, &x)?;
        stats.backbone_forwards += 1;
        let (accepted, rejected) = verify(&drafts, &out.logits, &pos)?;
        x.remask(&rejected)?;
        stats.drafts_proposed += drafts.len();
        stats.drafts_accepted += accepted.len();
        let mut rec = StepRecord::new(StepKind::Verify, &x, out.h, out.logits);
        // The verification forward saw the drafted sequence.
        for d in &drafts {
            rec.ids[d.position] = d.token;
            rec.masked[d.position] = false;
        }
        rec.drafts = drafts;
        rec.accepted = accepted;
        rec.rejected = rejected;
        let reject = !rec.rejected.is_empty();
        trace.steps.push(rec);
        if !(strict_recompute_on_reject && reject) {
            reused = Some(trace.steps.len() - 1);
        }
    }
    x.advance();
    stats.tokens = x.block_size;
    stats.block_steps.push(iterations);
    Ok((x, stats, trace))
}

/// Baseline decoding of the current block with stats.
pub fn baseline_decode<F: Denoiser + ?Sized>(
    f: &F,
    x: &SequenceState,
    policy: &Policy,
) -> Result<(SequenceState, DecodeStats, DecodeTrace)> {
    let (y, trace) = denoise_block_baseline(f, x, policy)?;
    let stats = DecodeStats {
        backbone_forwards: trace.backbone_forwards(),
        tokens: x.block_size,
        block_steps: vec![trace.steps.len()],
        ..Default::default()
    };
    Ok((y, stats, trace))
}

/// Decodes every remaining block of `x` left to right.
pub fn decode<F: Denoiser + ?Sized>(
    f: &F,
    head: Option<&dyn ResidualHead>,
    x: &SequenceState,
    config: &DecodeConfig,
) -> Result<(SequenceState, DecodeStats, DecodeTrace)> {
    config.validate()?;
    let mut x = x.clone();
    let mut stats = DecodeStats::default();
    let mut trace = DecodeTrace::default();
    while !x.is_done() {
        let (y, s, t) = match config.mode {
            Mode::Baseline => baseline_decode(f, &x, &config.policy)?,
            Mode::Direct => direct_decode(f, head, &x, &config.policy, config.k)?,
            Mode::Spec => spec_decode(f, head, &x, &config.policy, config.k, config.strict_recompute_on_reject)?,
        };
        x = y;
        stats.merge(&s);
        trace.extend(t);
    }
    Ok((x, stats, trace))
}

/// Prompt laid out on the block grid with room for `max_new_tokens`.
pub fn prepare(prompt: &str, block_size: usize, max_new_tokens: usize, max_len: usize) -> Result<SequenceState> {
    let ids = layout_prompt(&Vocab::new(), prompt, block_size)?;
    let n_blocks = max_new_tokens.div_ceil(block_size);
    let total = ids.len() + n_blocks * block_size;
    if total > max_len {
        return Err(Error::InvalidConfig(format!(
            "prompt plus {max_new_tokens} new tokens needs {total} positions, max_len is {max_len}"
        )));
    }
    SequenceState::for_generation(&ids, n_blocks, block_size)
}

/// Decodes `prompt` and returns the response text up to EOS.
pub fn generate<F: Denoiser + ?Sized>(
    f: &F,
    head: Option<&dyn ResidualHead>,
    prompt: &str,
    config: &DecodeConfig,
    max_len: usize,
) -> Result<(String, DecodeStats, DecodeTrace)> {
    let x = prepare(prompt, f.block_size(), config.max_new_tokens, max_len)?;
    let (y, stats, trace) = decode(f, head, &x, config)?;
    Ok((response_text(&Vocab::new(), y.response()), stats, trace))
}

/// Decodes many prepared sequences; results keep input order.
pub fn decode_many<F: Denoiser + ?Sized>(
    f: &F,
    head: Option<&dyn ResidualHead>,
    xs: &[SequenceState],
    config: &DecodeConfig,
    mode: ExecMode,
) -> Result<Vec<(SequenceState, DecodeStats, DecodeTrace)>> {
    exec::map_with(mode, xs, |x| decode(f, head, x, config)).into_iter().collect()
}

/// Residual head that replays hidden states recorded from baseline traces:
/// for a sequence it has seen, it returns exactly the step to that state's
/// recorded hidden state.
pub struct OracleHead<'a> {
    states: HashMap<Vec<usize>, Tensor>,
    lm_head: &'a Tensor,
}

impl<'a> OracleHead<'a> {
    pub fn from_traces<'t>(traces: impl IntoIterator<Item = &'t DecodeTrace>, lm_head: &'a Tensor) -> Self {
        let mut states = HashMap::new();
        for t in traces {
            for s in &t.steps {
                if s.kind == StepKind::Backbone {
                    states.insert(s.ids[..s.h.rows()].to_vec(), s.h.clone());
                }
            }
        }
        Self { states, lm_head }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

impl ResidualHead for OracleHead<'_> {
    fn objective(&self) -> Objective {
        Objective::Residual
    }

    fn predict(&self, ids: &[usize], _prompt_len: usize, h: &Tensor) -> Result<ResidualOutput> {
        let target = self
            .states
            .get(ids)
            .ok_or_else(|| Error::MissingArtifact("oracle has no recorded state for this sequence".into()))?;
        let delta_h = target.sub(h)?;
        let delta_logits = delta_h.matmul(self.lm_head)?;
        Ok(ResidualOutput { delta_h, delta_logits })
    }
}
