//! Synthetic arithmetic task and its character-level tokenizer.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MASK: usize = 0;
pub const PAD: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;

const SYMBOLS: &str = "0123456789+-= abcdefghijklmnopqrstuvwxyz";
const FIRST_SYMBOL: usize = 4;

/// Fixed vocabulary: four specials followed by the printable symbols.
#[derive(Clone, Debug)]
pub struct Vocab {
    symbols: Vec<char>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        Self {
            symbols: SYMBOLS.chars().collect(),
        }
    }

    pub fn size(&self) -> usize {
        FIRST_SYMBOL + self.symbols.len()
    }

    pub fn is_special(id: usize) -> bool {
        id < FIRST_SYMBOL
    }

    pub fn id_of(&self, ch: char) -> Option<usize> {
        self.symbols.iter().position(|&c| c == ch).map(|i| i + FIRST_SYMBOL)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .enumerate()
            .map(|(offset, ch)| self.id_of(ch).ok_or(Error::UnknownChar { ch, offset }))
            .collect()
    }

    /// Specials render as nothing; ids outside the vocabulary too.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| !Self::is_special(id))
            .filter_map(|&id| self.symbols.get(id - FIRST_SYMBOL))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Add,
    Sub,
}

impl Op {
    pub fn symbol(self) -> char {
        match self {
            Op::Add => '+',
            Op::Sub => '-',
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Problem {
    pub a: u32,
    pub op: Op,
    pub b: u32,
}

impl Problem {
    pub fn question(&self) -> String {
        format!("{}{}{}=", self.a, self.op.symbol(), self.b)
    }

    pub fn answer(&self) -> String {
        match self.op {
            Op::Add => (self.a + self.b).to_string(),
            Op::Sub => (self.a - self.b).to_string(),
        }
    }

    /// Deterministic one-in-ten split used to keep evaluation problems out
    /// of training data.
    pub fn is_held_out(&self) -> bool {
        let key = (self.a as u64) * 2_000_003 + (self.b as u64) * 7919 + self.op as u64;
        let mut z = key.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        z.is_multiple_of(10)
    }
}

/// A question/answer pair laid out on the block grid.
///
/// `ids[..prompt_len]` is `[PAD..] BOS question`, left-padded so the
/// response starts on a block boundary. The response is the answer digits,
/// one EOS, then PAD up to the next block boundary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub prompt_text: String,
    pub response_text: String,
    pub ids: Vec<usize>,
    pub prompt_len: usize,
}

impl Example {
    pub fn new(vocab: &Vocab, prompt_text: &str, response_text: &str, block_size: usize) -> Result<Self> {
        let prompt = layout_prompt(vocab, prompt_text, block_size)?;
        let prompt_len = prompt.len();
        let mut ids = prompt;
        ids.extend(vocab.tokenize(response_text)?);
        ids.push(EOS);
        while ids.len() % block_size != 0 {
            ids.push(PAD);
        }
        Ok(Self {
            prompt_text: prompt_text.to_string(),
            response_text: response_text.to_string(),
            ids,
            prompt_len,
        })
    }

    pub fn response(&self) -> &[usize] {
        &self.ids[self.prompt_len..]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// `[PAD..] BOS prompt` with the PAD run sized so the length is a multiple
/// of `block_size`.
pub fn layout_prompt(vocab: &Vocab, prompt_text: &str, block_size: usize) -> Result<Vec<usize>> {
    if block_size == 0 {
        return Err(Error::InvalidConfig("block size must be positive".into()));
    }
    let body = vocab.tokenize(prompt_text)?;
    let used = body.len() + 1;
    let padded = used.div_ceil(block_size) * block_size;
    let mut ids = vec![PAD; padded - used];
    ids.push(BOS);
    ids.extend(body);
    Ok(ids)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Eval,
    Any,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub max_operand: u32,
    /// Fraction of problems that are subtractions.
    pub sub_fraction: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            max_operand: 99,
            sub_fraction: 0.0,
        }
    }
}

/// Samples problems with operands uniform on `[0, max_operand]`.
/// Subtractions order their operands so the result is non-negative.
pub fn sample_problems(seed: u64, count: usize, task: &TaskConfig, split: Split) -> Result<Vec<Problem>> {
    if task.max_operand > 999 {
        return Err(Error::InvalidConfig(format!(
            "max_operand {} exceeds 999",
            task.max_operand
        )));
    }
    if !(0.0..=1.0).contains(&task.sub_fraction) {
        return Err(Error::InvalidConfig("sub_fraction must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > count.saturating_mul(1000).max(1000) {
            return Err(Error::InvalidConfig("split too small for the requested count".into()));
        }
        let a = rng.random_range(0..=task.max_operand);
        let b = rng.random_range(0..=task.max_operand);
        let op = if rng.random::<f64>() < task.sub_fraction {
            Op::Sub
        } else {
            Op::Add
        };
        let p = match op {
            Op::Sub if a < b => Problem { a: b, op, b: a },
            _ => Problem { a, op, b },
        };
        let keep = match split {
            Split::Any => true,
            Split::Train => !p.is_held_out(),
            Split::Eval => p.is_held_out(),
        };
        if keep {
            out.push(p);
        }
    }
    Ok(out)
}

pub fn gen_arithmetic(seed: u64, count: usize, max_operand: u32) -> Result<Vec<Example>> {
    let task = TaskConfig {
        max_operand,
        sub_fraction: 0.5,
    };
    build_examples(&sample_problems(seed, count, &task, Split::Any)?, 8)
}

pub fn build_examples(problems: &[Problem], block_size: usize) -> Result<Vec<Example>> {
    let vocab = Vocab::new();
    problems
        .iter()
        .map(|p| Example::new(&vocab, &p.question(), &p.answer(), block_size))
        .collect()
}

/// Response text before the first EOS; specials dropped.
pub fn response_text(vocab: &Vocab, response_ids: &[usize]) -> String {
    let end = response_ids.iter().position(|&id| id == EOS).unwrap_or(response_ids.len());
    vocab.detokenize(&response_ids[..end])
}

pub fn exact_match_accuracy(decoded: &[String], refs: &[Example]) -> Result<f64> {
    if decoded.len() != refs.len() {
        return Err(Error::InvalidShape(format!(
            "{} decoded responses for {} references",
            decoded.len(),
            refs.len()
        )));
    }
    if refs.is_empty() {
        return Ok(0.0);
    }
    let hits = decoded
        .iter()
        .zip(refs)
        .filter(|(d, r)| **d == r.response_text)
        .count();
    Ok(hits as f64 / refs.len() as f64)
}

pub fn write_dataset(path: &Path, examples: &[Example]) -> Result<()> {
    let mut buf = Vec::new();
    for e in examples {
        writeln!(buf, "{}\t{}", e.prompt_text, e.response_text).expect("write to vec");
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path, block_size: usize) -> Result<Vec<Example>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let vocab = Vocab::new();
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|line| {
            let (p, r) = line
                .split_once('\t')
                .ok_or_else(|| Error::InvalidConfig(format!("dataset line without TAB: {line:?}")))?;
            Example::new(&vocab, p, r, block_size)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_layout() {
        let v = Vocab::new();
        assert!(v.size() <= 64);
        assert_eq!(v.id_of('0'), Some(4));
        assert_eq!(v.tokenize("1+1=").unwrap().len(), 4);
        assert_eq!(v.detokenize(&[MASK, PAD, BOS, EOS]), "");
        assert_eq!(v.tokenize("").unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn unknown_char_names_offset() {
        let err = Vocab::new().tokenize("12#").unwrap_err();
        assert!(matches!(err, Error::UnknownChar { ch: '#', offset: 2 }));
    }

    #[test]
    fn example_layout_on_block_grid() {
        let v = Vocab::new();
        let e = Example::new(&v, "17+25=", "42", 8).unwrap();
        assert_eq!(e.prompt_len, 8);
        assert_eq!(e.ids[1], BOS);
        assert_eq!(e.len() % 8, 0);
        assert_eq!(e.response().iter().filter(|&&i| i == EOS).count(), 1);
        assert_eq!(response_text(&v, e.response()), "42");
    }

    #[test]
    fn subtraction_never_negative() {
        let task = TaskConfig {
            max_operand: 50,
            sub_fraction: 1.0,
        };
        for p in sample_problems(3, 500, &task, Split::Any).unwrap() {
            assert!(p.a >= p.b);
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let task = TaskConfig::default();
        let train = sample_problems(1, 2000, &task, Split::Train).unwrap();
        let eval = sample_problems(2, 200, &task, Split::Eval).unwrap();
        assert!(train.iter().all(|p| !p.is_held_out()));
        assert!(eval.iter().all(|p| p.is_held_out()));
    }

    #[test]
    fn accuracy_counts() {
        let v = Vocab::new();
        let refs: Vec<Example> = ["1", "2", "3", "4"]
            .iter()
            .map(|r| Example::new(&v, "0+0=", r, 8).unwrap())
            .collect();
        let dec: Vec<String> = ["1", "2", "3", "5"].iter().map(|s| s.to_string()).collect();
        assert_eq!(exact_match_accuracy(&dec, &refs).unwrap(), 0.75);
    }
}
