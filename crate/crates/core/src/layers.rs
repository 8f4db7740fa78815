//! Pre-norm transformer layer shared by the backbone and the residual head.

use std::sync::Arc;

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct LayerIds {
    pub attn_norm: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub mlp_norm: ParamId,
    pub w1: ParamId,
    pub w2: ParamId,
}

/// Standard deviations used when creating a layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerInit {
    pub proj_std: f64,
    pub out_std: f64,
}

impl LayerIds {
    pub fn create<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        hidden: usize,
        init: LayerInit,
        rng: &mut R,
    ) -> Self {
        let mut add = |name: &str, t: Tensor| store.add(format!("{prefix}.{name}"), t);
        Self {
            attn_norm: add("attn_norm", Tensor::full(&[d], 1.0)),
            wq: add("wq", Tensor::randn(&[d, d], init.proj_std, rng)),
            wk: add("wk", Tensor::randn(&[d, d], init.proj_std, rng)),
            wv: add("wv", Tensor::randn(&[d, d], init.proj_std, rng)),
            wo: add("wo", Tensor::randn(&[d, d], init.out_std, rng)),
            mlp_norm: add("mlp_norm", Tensor::full(&[d], 1.0)),
            w1: add("w1", Tensor::randn(&[d, hidden], init.proj_std, rng)),
            w2: add("w2", Tensor::randn(&[hidden, d], init.out_std, rng)),
        }
    }

    /// Looks the layer up by name in a loaded store.
    pub fn find(store: &ParamStore, prefix: &str) -> Option<Self> {
        let f = |name: &str| store.find(&format!("{prefix}.{name}"));
        Some(Self {
            attn_norm: f("attn_norm")?,
            wq: f("wq")?,
            wk: f("wk")?,
            wv: f("wv")?,
            wo: f("wo")?,
            mlp_norm: f("mlp_norm")?,
            w1: f("w1")?,
            w2: f("w2")?,
        })
    }

    /// `x + attn(norm(x))`, then `+ mlp(norm(·))`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        track: bool,
        x: Var,
        heads: usize,
        allowed: &Arc<Vec<bool>>,
        eps: f64,
    ) -> Result<Var> {
        let p = |id: ParamId, g: &mut Graph<'a>| g.param_or_const(store, id, track);
        let gain = p(self.attn_norm, g);
        let n = g.rms_norm(x, gain, eps)?;
        let (wq, wk, wv, wo) = (p(self.wq, g), p(self.wk, g), p(self.wv, g), p(self.wo, g));
        let q = g.matmul(n, wq)?;
        let k = g.matmul(n, wk)?;
        let v = g.matmul(n, wv)?;
        let a = g.attention(q, k, v, heads, allowed.clone())?;
        let a = g.matmul(a, wo)?;
        let x = g.add(x, a)?;

        let gain = p(self.mlp_norm, g);
        let n = g.rms_norm(x, gain, eps)?;
        let (w1, w2) = (p(self.w1, g), p(self.w2, g));
        let u = g.matmul(n, w1)?;
        let u = g.gelu(u);
        let u = g.matmul(u, w2)?;
        g.add(x, u)
    }
}
