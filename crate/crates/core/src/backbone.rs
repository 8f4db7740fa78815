//! Block-causal bidirectional transformer producing hidden states and logits.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{LayerIds, LayerInit};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalKind {
    LearnedAbsolute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub vocab_size: usize,
    pub block_size: usize,
    pub max_len: usize,
    pub norm_eps: f64,
    pub positional: PositionalKind,
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            vocab_size: crate::corpus::Vocab::new().size(),
            block_size: 8,
            max_len: 128,
            norm_eps: 1e-6,
            positional: PositionalKind::LearnedAbsolute,
            mlp_ratio: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.block_size == 0 || !self.max_len.is_multiple_of(self.block_size) {
            return bad(format!(
                "block_size {} must divide max_len {}",
                self.block_size, self.max_len
            ));
        }
        if self.vocab_size < 5 || self.vocab_size > 64 {
            return bad(format!("vocab_size {} outside [5, 64]", self.vocab_size));
        }
        if self.n_layers == 0 || self.mlp_ratio == 0 {
            return bad("n_layers and mlp_ratio must be positive".into());
        }
        if !(self.norm_eps > 0.0) {
            return bad("norm_eps must be positive".into());
        }
        Ok(())
    }
}

/// Block index of position `i`: the prompt is one leading block, the
/// response is cut into blocks of `block_size`.
pub fn block_of(i: usize, prompt_len: usize, block_size: usize) -> usize {
    if i < prompt_len {
        0
    } else {
        (i - prompt_len) / block_size + usize::from(prompt_len > 0)
    }
}

/// `allowed[q * len + k]` iff key `k` sits in the same or an earlier block
/// than query `q`.
pub fn attention_mask(len: usize, block_size: usize, prompt_len: usize) -> Result<Vec<bool>> {
    if block_size == 0 || prompt_len > len || !(len - prompt_len).is_multiple_of(block_size) {
        return Err(Error::InvalidConfig(format!(
            "response region {} of length {len} is not a whole number of blocks of {block_size}",
            len.saturating_sub(prompt_len)
        )));
    }
    let blocks: Vec<usize> = (0..len).map(|i| block_of(i, prompt_len, block_size)).collect();
    Ok((0..len * len).map(|i| blocks[i % len] <= blocks[i / len]).collect())
}

/// Hidden states (post final norm) and logits for every position.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOut {
    pub h: Tensor,
    pub logits: Tensor,
}

/// Anything that maps a partially masked sequence to `(h, ℓ)` with
/// `ℓ = h · W_lm`.
pub trait Denoiser: Sync {
    fn block_size(&self) -> usize;
    fn d_model(&self) -> usize;
    fn vocab_size(&self) -> usize;
    fn forward(&self, ids: &[usize], prompt_len: usize) -> Result<ForwardOut>;
    fn lm_head(&self) -> &Tensor;
    fn token_embeddings(&self) -> &Tensor;
    fn positional_embeddings(&self) -> &Tensor;
}

#[derive(Clone, Debug)]
pub struct BackboneIds {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub layers: Vec<LayerIds>,
    pub final_norm: ParamId,
    pub lm_head: ParamId,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub params: ParamStore,
    pub ids: BackboneIds,
}

/// Graph handles produced by one backbone pass.
pub struct BackboneVars {
    pub h: Var,
    pub logits: Var,
    pub lm_head: Var,
}

impl Backbone {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut params = ParamStore::new();
        let tok_emb = params.add("tok_emb", Tensor::randn(&[config.vocab_size, d], 0.1, &mut rng));
        let pos_emb = params.add("pos_emb", Tensor::randn(&[config.max_len, d], 0.1, &mut rng));
        let proj_std = 1.0 / (d as f64).sqrt();
        let init = LayerInit {
            proj_std,
            out_std: proj_std / (2.0 * config.n_layers as f64).sqrt(),
        };
        let layers = (0..config.n_layers)
            .map(|i| {
                LayerIds::create(
                    &mut params,
                    &format!("layers.{i}"),
                    d,
                    d * config.mlp_ratio,
                    init,
                    &mut rng,
                )
            })
            .collect();
        let final_norm = params.add("final_norm", Tensor::full(&[d], 1.0));
        let lm_head = params.add("lm_head", Tensor::randn(&[d, config.vocab_size], 0.02, &mut rng));
        Ok(Self {
            config,
            params,
            ids: BackboneIds {
                tok_emb,
                pos_emb,
                layers,
                final_norm,
                lm_head,
            },
        })
    }

    /// Rebuilds the id table from a store whose names follow [`Backbone::new`].
    pub fn from_params(config: BackboneConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let need = |name: &str| {
            params
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let layers = (0..config.n_layers)
            .map(|i| {
                LayerIds::find(&params, &format!("layers.{i}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensors for layer {i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let ids = BackboneIds {
            tok_emb: need("tok_emb")?,
            pos_emb: need("pos_emb")?,
            layers,
            final_norm: need("final_norm")?,
            lm_head: need("lm_head")?,
        };
        let fresh = Backbone::new(config.clone(), 0)?;
        for (a, b) in fresh.params.iter().zip(params.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, config implies {} {:?}",
                    b.name,
                    b.value.shape(),
                    a.name,
                    a.value.shape()
                )));
            }
        }
        if fresh.params.len() != params.len() {
            return Err(Error::Checkpoint("tensor count does not match config".into()));
        }
        Ok(Self { config, params, ids })
    }

    /// Records the forward pass in `g`. Parameters are tracked when `track`.
    pub fn build<'a>(
        &'a self,
        g: &mut Graph<'a>,
        ids: &[usize],
        prompt_len: usize,
        track: bool,
    ) -> Result<BackboneVars> {
        let len = ids.len();
        if len > self.config.max_len {
            return Err(Error::InvalidShape(format!(
                "sequence length {len} exceeds max_len {}",
                self.config.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::InvalidShape(format!("token id {bad} outside vocabulary")));
        }
        let allowed = Arc::new(attention_mask(len, self.config.block_size, prompt_len)?);
        let p = &self.params;
        let tok = g.param_or_const(p, self.ids.tok_emb, track);
        let pos = g.param_or_const(p, self.ids.pos_emb, track);
        let positions: Vec<usize> = (0..len).collect();
        let te = g.embedding(tok, ids)?;
        let pe = g.embedding(pos, &positions)?;
        let mut x = g.add(te, pe)?;
        for layer in &self.ids.layers {
            x = layer.forward(g, p, track, x, self.config.n_heads, &allowed, self.config.norm_eps)?;
        }
        let gain = g.param_or_const(p, self.ids.final_norm, track);
        let h = g.rms_norm(x, gain, self.config.norm_eps)?;
        let lm_head = g.param_or_const(p, self.ids.lm_head, track);
        let logits = g.matmul(h, lm_head)?;
        Ok(BackboneVars { h, logits, lm_head })
    }

    /// Per-row distances `‖E[b_i] − E[a_i]‖₂` at positions where the
    /// sequences differ, in position order.
    pub fn row_distances(&self, a: &[usize], b: &[usize]) -> Result<Vec<f64>> {
        if a.len() != b.len() {
            return Err(Error::InvalidShape(format!(
                "sequences of length {} and {}",
                a.len(),
                b.len()
            )));
        }
        let e = self.token_embeddings();
        Ok(a.iter()
            .zip(b)
            .filter(|(x, y)| x != y)
            .map(|(&x, &y)| {
                e.row(x)
                    .iter()
                    .zip(e.row(y))
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect())
    }

    /// Frobenius norm of the input-embedding difference between two
    /// sequences.
    pub fn perturbation_norm(&self, a: &[usize], b: &[usize]) -> Result<f64> {
        Ok(self.row_distances(a, b)?.iter().map(|d| d * d).sum::<f64>().sqrt())
    }
}

impl Denoiser for Backbone {
    fn block_size(&self) -> usize {
        self.config.block_size
    }

    fn d_model(&self) -> usize {
        self.config.d_model
    }

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn forward(&self, ids: &[usize], prompt_len: usize) -> Result<ForwardOut> {
        let mut g = Graph::new();
        let vars = self.build(&mut g, ids, prompt_len, false)?;
        Ok(ForwardOut {
            h: g.value(vars.h).clone(),
            logits: g.value(vars.logits).clone(),
        })
    }

    fn lm_head(&self) -> &Tensor {
        self.params.value(self.ids.lm_head)
    }

    fn token_embeddings(&self) -> &Tensor {
        self.params.value(self.ids.tok_emb)
    }

    fn positional_embeddings(&self) -> &Tensor {
        self.params.value(self.ids.pos_emb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Backbone {
        Backbone::new(
            BackboneConfig {
                d_model: 16,
                n_heads: 2,
                n_layers: 2,
                block_size: 4,
                max_len: 32,
                ..Default::default()
            },
            5,
        )
        .unwrap()
    }

    fn rows(mask: &[bool], len: usize) -> Vec<String> {
        mask.chunks(len)
            .map(|r| r.iter().map(|&b| if b { '1' } else { '0' }).collect())
            .collect()
    }

    #[test]
    fn mask_examples() {
        let m = attention_mask(4, 2, 0).unwrap();
        assert_eq!(rows(&m, 4), ["1100", "1100", "1111", "1111"]);
        assert!(attention_mask(6, 6, 0).unwrap().iter().all(|&b| b));
        assert!(matches!(attention_mask(5, 2, 0), Err(Error::InvalidConfig(_))));
        let m = attention_mask(7, 2, 3).unwrap();
        assert_eq!(rows(&m, 7)[0], "1110000");
        assert_eq!(rows(&m, 7)[3], "1111100");
    }

    #[test]
    fn shapes_and_determinism() {
        let b = small();
        let ids = vec![2, 5, 6, 7, 0, 0, 0, 0];
        let a = b.forward(&ids, 4).unwrap();
        assert_eq!(a.h.shape(), &[8, 16]);
        assert_eq!(a.logits.shape(), &[8, b.config.vocab_size]);
        assert_eq!(a, b.forward(&ids, 4).unwrap());
    }

    #[test]
    fn later_blocks_do_not_leak() {
        let b = small();
        let ids = vec![2, 5, 6, 7, 0, 0, 0, 0, 0, 0, 0, 0];
        let mut other = ids.clone();
        other[9] = 11;
        let (x, y) = (b.forward(&ids, 4).unwrap(), b.forward(&other, 4).unwrap());
        assert_eq!(&x.logits.data()[..8 * 44], &y.logits.data()[..8 * 44]);
        assert_ne!(x.logits.data(), y.logits.data());
    }

    #[test]
    fn prefix_forward_matches_full() {
        let b = small();
        let ids = vec![2, 5, 6, 7, 9, 0, 0, 0, 0, 0, 0, 0];
        let full = b.forward(&ids, 4).unwrap();
        let pre = b.forward(&ids[..8], 4).unwrap();
        assert_eq!(pre.logits.data(), &full.logits.data()[..8 * 44]);
    }

    #[test]
    fn too_long_rejected() {
        let b = small();
        assert!(b.forward(&vec![0; 36], 4).is_err());
    }

    #[test]
    fn perturbation_norm_cases() {
        let b = small();
        let a = [0, 0, 5, 6];
        assert_eq!(b.perturbation_norm(&a, &a).unwrap(), 0.0);
        let e = b.token_embeddings();
        let d1: f64 = e.row(0).iter().zip(e.row(9)).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let d2: f64 = e.row(0).iter().zip(e.row(4)).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        assert_eq!(b.perturbation_norm(&a, &[9, 0, 5, 6]).unwrap(), d1);
        let both = b.perturbation_norm(&a, &[9, 4, 5, 6]).unwrap();
        assert!((both - (d1 * d1 + d2 * d2).sqrt()).abs() < 1e-14);
        assert!(b.perturbation_norm(&a, &[0, 0]).is_err());
    }

    #[test]
    fn logits_are_hidden_times_head() {
        let b = small();
        let out = b.forward(&[2, 5, 6, 7, 0, 9, 0, 0], 4).unwrap();
        let direct = out.h.matmul(b.lm_head()).unwrap();
        assert_eq!(direct, out.logits);
    }
}
