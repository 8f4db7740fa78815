//! Masking process, confidence-based unmasking policies and the baseline
//! block-denoising loop.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Denoiser;
use crate::corpus::{Example, EOS, MASK, PAD};
use crate::error::{Error, Result};
use crate::numerics::{softmax_in_place, Tensor};

/// Token ids plus mask flags on a block grid. The prompt occupies
/// `ids[..prompt_len]`; the response is `n_blocks` blocks of `block_size`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceState {
    pub ids: Vec<usize>,
    pub masked: Vec<bool>,
    pub prompt_len: usize,
    pub block_size: usize,
    /// Index of the first response block that still holds a mask; equals
    /// the number of response blocks once decoding is complete.
    pub current_block: usize,
}

impl SequenceState {
    /// Fully clean state of a training example.
    pub fn from_example(e: &Example, block_size: usize) -> Result<Self> {
        Self::new(e.ids.clone(), vec![false; e.ids.len()], e.prompt_len, block_size)
    }

    /// Prompt followed by `n_blocks` fully masked response blocks.
    pub fn for_generation(prompt: &[usize], n_blocks: usize, block_size: usize) -> Result<Self> {
        let mut ids = prompt.to_vec();
        ids.extend(std::iter::repeat_n(MASK, n_blocks * block_size));
        let masked = ids.iter().enumerate().map(|(i, _)| i >= prompt.len()).collect();
        Self::new(ids, masked, prompt.len(), block_size)
    }

    pub fn new(ids: Vec<usize>, masked: Vec<bool>, prompt_len: usize, block_size: usize) -> Result<Self> {
        if ids.len() != masked.len() {
            return Err(Error::InvalidShape("ids and mask flags differ in length".into()));
        }
        if block_size == 0 || prompt_len > ids.len() || !(ids.len() - prompt_len).is_multiple_of(block_size) {
            return Err(Error::InvalidConfig(format!(
                "response of length {} is not a whole number of blocks of {block_size}",
                ids.len().saturating_sub(prompt_len)
            )));
        }
        let mut s = Self {
            ids,
            masked,
            prompt_len,
            block_size,
            current_block: 0,
        };
        s.check()?;
        s.current_block = s.first_masked_block();
        Ok(s)
    }

    fn check(&self) -> Result<()> {
        for (i, (&id, &m)) in self.ids.iter().zip(&self.masked).enumerate() {
            if m != (id == MASK) {
                return Err(Error::Contract(format!("mask flag disagrees with id at {i}")));
            }
            if m && i < self.prompt_len {
                return Err(Error::Contract(format!("prompt position {i} is masked")));
            }
        }
        Ok(())
    }

    fn first_masked_block(&self) -> usize {
        (0..self.n_blocks())
            .find(|&b| self.masked[self.block_range(b)].iter().any(|&m| m))
            .unwrap_or(self.n_blocks())
    }

    /// Recomputes `current_block` from the mask flags.
    pub fn refresh_block(&mut self) {
        self.current_block = self.first_masked_block();
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_blocks(&self) -> usize {
        (self.ids.len() - self.prompt_len) / self.block_size
    }

    pub fn is_done(&self) -> bool {
        self.current_block >= self.n_blocks()
    }

    /// Absolute positions of response block `b`.
    pub fn block_range(&self, b: usize) -> Range<usize> {
        let start = self.prompt_len + b * self.block_size;
        start..start + self.block_size
    }

    pub fn current_range(&self) -> Range<usize> {
        self.block_range(self.current_block.min(self.n_blocks().saturating_sub(1)))
    }

    pub fn response_range(&self) -> Range<usize> {
        self.prompt_len..self.ids.len()
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn masked_in(&self, range: Range<usize>) -> Vec<usize> {
        range.filter(|&i| self.masked[i]).collect()
    }

    pub fn current_masked(&self) -> Vec<usize> {
        if self.is_done() {
            return Vec::new();
        }
        self.masked_in(self.current_range())
    }

    pub fn response(&self) -> &[usize] {
        &self.ids[self.prompt_len..]
    }

    /// Sets tokens at masked positions without advancing the block pointer.
    pub fn place(&mut self, positions: &[usize], tokens: &[usize]) -> Result<()> {
        if positions.len() != tokens.len() {
            return Err(Error::InvalidShape("positions and tokens differ in length".into()));
        }
        for (&p, &t) in positions.iter().zip(tokens) {
            if p >= self.len() || !self.masked[p] {
                return Err(Error::Contract(format!("position {p} is not masked")));
            }
            if t == MASK {
                return Err(Error::Contract(format!("revealing MASK at {p}")));
            }
        }
        for (&p, &t) in positions.iter().zip(tokens) {
            self.ids[p] = t;
            self.masked[p] = false;
        }
        Ok(())
    }

    /// Returns previously placed response positions to MASK.
    pub fn remask(&mut self, positions: &[usize]) -> Result<()> {
        for &p in positions {
            if p < self.prompt_len || p >= self.len() || self.masked[p] {
                return Err(Error::Contract(format!("cannot remask position {p}")));
            }
        }
        for &p in positions {
            self.ids[p] = MASK;
            self.masked[p] = true;
        }
        Ok(())
    }

    /// Moves past completed blocks. A completed block holding EOS ends the
    /// sequence: every later position becomes PAD.
    pub fn advance(&mut self) {
        while !self.is_done() && self.current_masked().is_empty() {
            let r = self.current_range();
            if self.ids[r.clone()].contains(&EOS) {
                for i in r.end..self.len() {
                    self.ids[i] = PAD;
                    self.masked[i] = false;
                }
                self.current_block = self.n_blocks();
                return;
            }
            self.current_block += 1;
        }
    }

    /// Sequence-level end marker seen in a completed block.
    pub fn finished_by_eos(&self) -> bool {
        self.is_done() && self.response().contains(&EOS)
    }

    /// Length of the prefix a forward for the current block needs.
    pub fn context_end(&self) -> usize {
        if self.is_done() {
            self.len()
        } else {
            self.current_range().end
        }
    }
}

/// `place` then `advance`.
pub fn reveal(x: &SequenceState, positions: &[usize], tokens: &[usize]) -> Result<SequenceState> {
    let mut y = x.clone();
    y.place(positions, tokens)?;
    y.advance();
    Ok(y)
}

/// Masks every response position of `x0` independently with probability
/// `u ~ Uniform(0, 1)`.
pub fn corrupt<R: Rng + ?Sized>(x0: &SequenceState, rng: &mut R) -> Result<SequenceState> {
    let u: f64 = rng.random();
    corrupt_at_rate(x0, u, rng)
}

pub fn corrupt_at_rate<R: Rng + ?Sized>(x0: &SequenceState, rate: f64, rng: &mut R) -> Result<SequenceState> {
    if x0.masked.iter().any(|&m| m) {
        return Err(Error::Contract("corrupt expects a clean sequence".into()));
    }
    let mut x = x0.clone();
    for i in x.response_range() {
        if rng.random::<f64>() < rate {
            x.ids[i] = MASK;
            x.masked[i] = true;
        }
    }
    x.current_block = x.first_masked_block();
    Ok(x)
}

/// Max softmax probability and its token at one masked position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub position: usize,
    pub prob: f64,
    pub token: usize,
}

pub type Confidence = Vec<Candidate>;

/// Max-probability candidate of one logits row. MASK is never proposed;
/// ties go to the lowest token id.
pub fn row_candidate(row: &[f64], position: usize) -> Candidate {
    let mut p = row.to_vec();
    softmax_in_place(&mut p);
    let mut best = None;
    for (i, &v) in p.iter().enumerate() {
        if i != MASK && best.is_none_or(|b: usize| v > p[b]) {
            best = Some(i);
        }
    }
    let best = best.unwrap_or(MASK);
    Candidate {
        position,
        prob: p[best],
        token: best,
    }
}

/// Candidates for the masked positions of the current block, in position
/// order. `logits` rows are aligned with `x` positions.
pub fn confidence_of(logits: &Tensor, x: &SequenceState) -> Confidence {
    x.current_masked()
        .into_iter()
        .filter(|&i| i < logits.rows())
        .map(|i| row_candidate(logits.row(i), i))
        .collect()
}

fn ranked(conf: &Confidence) -> Vec<Candidate> {
    let mut c = conf.clone();
    c.sort_by(|a, b| b.prob.total_cmp(&a.prob).then(a.position.cmp(&b.position)));
    c
}

/// The `min(r, n)` most confident candidates, returned in position order.
pub fn select_static(conf: &Confidence, r: usize) -> Vec<Candidate> {
    let mut c = ranked(conf);
    c.truncate(r.max(1));
    c.sort_by_key(|c| c.position);
    c
}

/// Candidates with probability strictly above `tau`, or the single most
/// confident one if none qualifies.
pub fn select_dynamic(conf: &Confidence, tau: f64) -> Vec<Candidate> {
    let above: Vec<Candidate> = conf.iter().copied().filter(|c| c.prob > tau).collect();
    if above.is_empty() {
        select_static(conf, 1)
    } else {
        above
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    Static { r: usize },
    Dynamic { tau: f64 },
}

impl Policy {
    pub fn select(&self, conf: &Confidence) -> Vec<Candidate> {
        if conf.is_empty() {
            return Vec::new();
        }
        match *self {
            Policy::Static { r } => select_static(conf, r),
            Policy::Dynamic { tau } => select_dynamic(conf, tau),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Policy::Static { r: 0 } => Err(Error::InvalidConfig("r must be at least 1".into())),
            Policy::Dynamic { tau } if !(tau > 0.0 && tau <= 1.0) => {
                Err(Error::InvalidConfig(format!("tau {tau} outside (0, 1]")))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Policy::Static { .. } => "static",
            Policy::Dynamic { .. } => "dynamic",
        }
    }

    pub fn param(&self) -> f64 {
        match *self {
            Policy::Static { r } => r as f64,
            Policy::Dynamic { tau } => tau,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Backbone,
    Mrp,
    Verify,
}

impl StepKind {
    pub fn code(self) -> u8 {
        match self {
            StepKind::Backbone => 0,
            StepKind::Mrp => 1,
            StepKind::Verify => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(StepKind::Backbone),
            1 => Some(StepKind::Mrp),
            2 => Some(StepKind::Verify),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DraftRecord {
    pub position: usize,
    pub token: usize,
    /// 1-based residual-head round that proposed the draft.
    pub round: usize,
    pub confidence: f64,
}

/// One denoising state: the sequence a forward saw, what it produced and
/// what was decided from it.
///
/// For `Mrp` records `h` and `logits` are the accumulated corrected values.
/// For `Verify` records `ids` is the drafted sequence the backbone saw.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub kind: StepKind,
    pub block: usize,
    pub ids: Vec<usize>,
    pub masked: Vec<bool>,
    pub h: Tensor,
    pub logits: Tensor,
    pub revealed: Vec<(usize, usize)>,
    pub drafts: Vec<DraftRecord>,
    pub accepted: Vec<usize>,
    pub rejected: Vec<usize>,
}

impl StepRecord {
    pub fn new(kind: StepKind, x: &SequenceState, h: Tensor, logits: Tensor) -> Self {
        Self {
            kind,
            block: x.current_block,
            ids: x.ids.clone(),
            masked: x.masked.clone(),
            h,
            logits,
            revealed: Vec::new(),
            drafts: Vec::new(),
            accepted: Vec::new(),
            rejected: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecodeTrace {
    pub steps: Vec<StepRecord>,
}

impl DecodeTrace {
    pub fn backbone_forwards(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| matches!(s.kind, StepKind::Backbone | StepKind::Verify))
            .count()
    }

    pub fn extend(&mut self, other: DecodeTrace) {
        self.steps.extend(other.steps);
    }
}

/// Forward on the prefix needed for the current block.
pub fn forward_current<F: Denoiser + ?Sized>(f: &F, x: &SequenceState) -> Result<crate::backbone::ForwardOut> {
    f.forward(&x.ids[..x.context_end()], x.prompt_len)
}

/// Denoises the current block one forward at a time until it is clean.
pub fn denoise_block_baseline<F: Denoiser + ?Sized>(
    f: &F,
    x: &SequenceState,
    policy: &Policy,
) -> Result<(SequenceState, DecodeTrace)> {
    let start = x.current_block;
    if x.is_done() || x.current_masked().len() != x.block_size {
        return Err(Error::Contract("current block must be fully masked".into()));
    }
    let mut x = x.clone();
    let mut trace = DecodeTrace::default();
    while !x.is_done() && x.current_block == start {
        let out = forward_current(f, &x)?;
        let mut rec = StepRecord::new(StepKind::Backbone, &x, out.h, out.logits);
        let chosen = policy.select(&confidence_of(&rec.logits, &x));
        let (pos, tok): (Vec<usize>, Vec<usize>) = chosen.iter().map(|c| (c.position, c.token)).unzip();
        x.place(&pos, &tok)?;
        x.advance();
        rec.revealed = pos.into_iter().zip(tok).collect();
        trace.steps.push(rec);
    }
    Ok((x, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn conf(probs: &[f64]) -> Confidence {
        probs
            .iter()
            .enumerate()
            .map(|(i, &p)| Candidate {
                position: i,
                prob: p,
                token: 4,
            })
            .collect()
    }

    fn positions(c: &[Candidate]) -> Vec<usize> {
        c.iter().map(|c| c.position).collect()
    }

    #[test]
    fn static_selection() {
        assert_eq!(positions(&select_static(&conf(&[0.9, 0.3, 0.8]), 2)), [0, 2]);
        assert_eq!(positions(&select_static(&conf(&[0.9, 0.3]), 5)), [0, 1]);
        assert_eq!(positions(&select_static(&conf(&[0.1, 0.5, 0.2, 0.5]), 1)), [1]);
    }

    #[test]
    fn dynamic_selection() {
        assert_eq!(positions(&select_dynamic(&conf(&[0.95, 0.5, 0.99]), 0.9)), [0, 2]);
        assert_eq!(positions(&select_dynamic(&conf(&[0.5, 0.6]), 0.9)), [1]);
        assert_eq!(positions(&select_dynamic(&conf(&[1.0, 1.0]), 1.0)), [0]);
    }

    #[test]
    fn candidate_examples() {
        let mut row = vec![0.0; 6];
        row[4] = 10.0;
        let c = row_candidate(&row, 3);
        assert_eq!(c.token, 4);
        assert!((c.prob - 10f64.exp() / (10f64.exp() + 5.0)).abs() < 1e-15);
        let c = row_candidate(&[0.0; 4], 0);
        assert_eq!(c.prob, 0.25);
        assert_eq!(c.token, 1);
    }

    #[test]
    fn corrupt_extremes() {
        let x0 = SequenceState::new(vec![2, 5, 6, 7, 8, 9], vec![false; 6], 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(corrupt_at_rate(&x0, 0.0, &mut rng).unwrap(), x0);
        let all = corrupt_at_rate(&x0, 1.0, &mut rng).unwrap();
        assert_eq!(all.masked, [false, false, true, true, true, true]);
        assert_eq!(all.current_block, 0);
    }

    #[test]
    fn reveal_rules() {
        let x = SequenceState::for_generation(&[2, 5], 2, 2).unwrap();
        assert_eq!(reveal(&x, &[], &[]).unwrap(), x);
        let y = reveal(&x, &[2], &[6]).unwrap();
        assert_eq!(y.masked_count(), 3);
        assert_eq!(y.current_block, 0);
        let z = reveal(&y, &[3], &[7]).unwrap();
        assert_eq!(z.current_block, 1);
        assert!(matches!(reveal(&z, &[3], &[7]), Err(Error::Contract(_))));
    }

    #[test]
    fn eos_fills_later_blocks() {
        let x = SequenceState::for_generation(&[2, 5], 3, 2).unwrap();
        let y = reveal(&x, &[2, 3], &[EOS, PAD]).unwrap();
        assert!(y.is_done());
        assert_eq!(y.ids, [2, 5, EOS, PAD, PAD, PAD, PAD, PAD]);
        assert_eq!(y.masked_count(), 0);
    }
}
