//! Residual head g: predicts the change in hidden state and logits between
//! consecutive denoising states, sharing the backbone's LM head.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{attention_mask, Denoiser};
use crate::error::{Error, Result};
use crate::layers::{LayerIds, LayerInit};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// What the head's output means.
///
/// `Residual`: the output is Δ and is added to the running state.
/// `Direct`: the output is a replacement hidden state whose logits are used
/// as they are.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Residual,
    Direct,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual" => Ok(Objective::Residual),
            "direct" => Ok(Objective::Direct),
            other => Err(Error::InvalidConfig(format!("unknown objective {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MrpConfig {
    pub depth: usize,
    pub init_std: f64,
    pub objective: Objective,
}

impl Default for MrpConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            init_std: 0.2,
            objective: Objective::Residual,
        }
    }
}

impl MrpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::InvalidConfig("MRP depth must be at least 1".into()));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::InvalidConfig("init_std must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MrpIds {
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
    pub layers: Vec<LayerIds>,
    pub out_norm: ParamId,
    pub out_w: ParamId,
}

/// Trainable parameters of g. Names carry the `mrp.` prefix.
#[derive(Clone, Debug)]
pub struct MrpHead {
    pub config: MrpConfig,
    pub d_model: usize,
    pub n_heads: usize,
    pub norm_eps: f64,
    pub params: ParamStore,
    pub ids: MrpIds,
}

/// `Δ` (L × d) and `δ = Δ · W_lm` (L × V).
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualOutput {
    pub delta_h: Tensor,
    pub delta_logits: Tensor,
}

pub struct MrpVars {
    pub delta_h: Var,
    pub delta_logits: Var,
}

impl MrpHead {
    pub fn new(config: MrpConfig, d_model: usize, n_heads: usize, norm_eps: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = d_model;
        let std = config.init_std;
        let mut params = ParamStore::new();
        let fuse_w = params.add("mrp.fuse.w", Tensor::randn(&[2 * d, d], std, &mut rng));
        let fuse_b = params.add("mrp.fuse.b", Tensor::zeros(&[d]));
        let init = LayerInit {
            proj_std: std,
            out_std: std,
        };
        let layers = (0..config.depth)
            .map(|i| LayerIds::create(&mut params, &format!("mrp.layers.{i}"), d, 4 * d, init, &mut rng))
            .collect();
        let out_norm = params.add("mrp.out_norm", Tensor::full(&[d], 1.0));
        let out_w = params.add("mrp.out.w", Tensor::zeros(&[d, d]));
        Ok(Self {
            config,
            d_model,
            n_heads,
            norm_eps,
            params,
            ids: MrpIds {
                fuse_w,
                fuse_b,
                layers,
                out_norm,
                out_w,
            },
        })
    }

    /// Head shaped for `backbone`.
    pub fn for_backbone<F: Denoiser + ?Sized>(
        config: MrpConfig,
        backbone: &F,
        n_heads: usize,
        norm_eps: f64,
        seed: u64,
    ) -> Result<Self> {
        Self::new(config, backbone.d_model(), n_heads, norm_eps, seed)
    }

    pub fn from_params(
        config: MrpConfig,
        d_model: usize,
        n_heads: usize,
        norm_eps: f64,
        params: ParamStore,
    ) -> Result<Self> {
        let fresh = Self::new(config.clone(), d_model, n_heads, norm_eps, 0)?;
        if fresh.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "MRP checkpoint has {} tensors, config implies {}",
                params.len(),
                fresh.params.len()
            )));
        }
        for (a, b) in fresh.params.iter().zip(params.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    b.name,
                    b.value.shape(),
                    a.name,
                    a.value.shape()
                )));
            }
        }
        Ok(Self { params, ..fresh })
    }

    pub fn objective(&self) -> Objective {
        self.config.objective
    }

    /// Zeroes every trainable tensor.
    pub fn zero_all(&mut self) {
        for p in self.params.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Records `g(x, h)` in the graph. `h` is the running hidden state
    /// aligned with `ids`; embeddings, positions and the LM head come from
    /// the frozen backbone.
    #[allow(clippy::too_many_arguments)]
    pub fn build<'a, F: Denoiser + ?Sized>(
        &'a self,
        g: &mut Graph<'a>,
        backbone: &'a F,
        ids: &[usize],
        prompt_len: usize,
        h: Var,
        track: bool,
    ) -> Result<MrpVars> {
        let len = ids.len();
        let hv = g.value(h);
        if hv.shape() != [len, self.d_model] {
            return Err(Error::InvalidShape(format!(
                "hidden state {:?} for {len} tokens of width {}",
                hv.shape(),
                self.d_model
            )));
        }
        let pos_table = backbone.positional_embeddings();
        if len > pos_table.rows() {
            return Err(Error::InvalidShape(format!("sequence length {len} exceeds positions")));
        }
        let allowed = Arc::new(attention_mask(len, backbone.block_size(), prompt_len)?);
        let p = &self.params;
        let tok = g.constant(backbone.token_embeddings());
        let pos = g.constant(pos_table);
        let e = g.embedding(tok, ids)?;
        let fused_in = g.concat_cols(e, h)?;
        let w = g.param_or_const(p, self.ids.fuse_w, track);
        let b = g.param_or_const(p, self.ids.fuse_b, track);
        let z = g.matmul(fused_in, w)?;
        let z = g.add_row(z, b)?;
        let positions: Vec<usize> = (0..len).collect();
        let pe = g.embedding(pos, &positions)?;
        let mut x = g.add(z, pe)?;
        for layer in &self.ids.layers {
            x = layer.forward(g, p, track, x, self.n_heads, &allowed, self.norm_eps)?;
        }
        let gain = g.param_or_const(p, self.ids.out_norm, track);
        let x = g.rms_norm(x, gain, self.norm_eps)?;
        let w_out = g.param_or_const(p, self.ids.out_w, track);
        let delta_h = g.matmul(x, w_out)?;
        let lm = g.constant(backbone.lm_head());
        let delta_logits = g.matmul(delta_h, lm)?;
        Ok(MrpVars { delta_h, delta_logits })
    }

    pub fn forward<F: Denoiser + ?Sized>(
        &self,
        backbone: &F,
        ids: &[usize],
        prompt_len: usize,
        h: &Tensor,
    ) -> Result<ResidualOutput> {
        let mut g = Graph::new();
        let hv = g.constant(h);
        let vars = self.build(&mut g, backbone, ids, prompt_len, hv, false)?;
        Ok(ResidualOutput {
            delta_h: g.value(vars.delta_h).clone(),
            delta_logits: g.value(vars.delta_logits).clone(),
        })
    }
}

/// Anything that proposes the next hidden/logit update during decoding.
pub trait ResidualHead: Sync {
    fn objective(&self) -> Objective;

    /// `ids` is the post-reveal sequence prefix; `h` the running hidden
    /// state for the same rows.
    fn predict(&self, ids: &[usize], prompt_len: usize, h: &Tensor) -> Result<ResidualOutput>;
}

/// A trained head bound to the backbone whose modules it shares.
pub struct BoundHead<'a, F: Denoiser + ?Sized> {
    pub head: &'a MrpHead,
    pub backbone: &'a F,
}

impl<F: Denoiser + ?Sized> ResidualHead for BoundHead<'_, F> {
    fn objective(&self) -> Objective {
        self.head.objective()
    }

    fn predict(&self, ids: &[usize], prompt_len: usize, h: &Tensor) -> Result<ResidualOutput> {
        self.head.forward(self.backbone, ids, prompt_len, h)
    }
}

/// `(run_h + Δ, run_ℓ + δ)`.
pub fn accumulate(run_h: &Tensor, run_logits: &Tensor, out: &ResidualOutput) -> Result<(Tensor, Tensor)> {
    Ok((run_h.add(&out.delta_h)?, run_logits.add(&out.delta_logits)?))
}

/// Running state after one head round under `objective`.
pub fn apply(
    objective: Objective,
    run_h: &Tensor,
    run_logits: &Tensor,
    out: ResidualOutput,
) -> Result<(Tensor, Tensor)> {
    match objective {
        Objective::Residual => accumulate(run_h, run_logits, &out),
        Objective::Direct => {
            if out.delta_h.shape() != run_h.shape() || out.delta_logits.shape() != run_logits.shape() {
                return Err(Error::InvalidShape("head output does not match running state".into()));
            }
            Ok((out.delta_h, out.delta_logits))
        }
    }
}
