#![allow(dead_code)]

use mrp_core::backbone::{Backbone, BackboneConfig, Denoiser, ForwardOut};
use mrp_core::corpus::MASK;
use mrp_core::corpus::{build_examples, sample_problems, Example, Split, TaskConfig};
use mrp_core::diffusion::SequenceState;
use mrp_core::mrp::{MrpConfig, MrpHead, Objective};
use mrp_core::numerics::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const B: usize = 8;

pub fn tiny_config() -> BackboneConfig {
    BackboneConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        ..Default::default()
    }
}

pub fn tiny_backbone(seed: u64) -> Backbone {
    Backbone::new(tiny_config(), seed).unwrap()
}

/// Backbone with larger weights so that its argmaxes are decisive and vary
/// with context.
pub fn sharp_backbone(seed: u64) -> Backbone {
    let mut b = tiny_backbone(seed);
    let id = b.params.find("lm_head").unwrap();
    let w = b.params.value(id).clone();
    let scaled: Vec<f64> = w.data().iter().map(|v| v * 20.0).collect();
    b.params.get_mut(id).value = Tensor::new(w.shape().to_vec(), scaled).unwrap();
    b
}

pub fn examples(seed: u64, n: usize) -> Vec<Example> {
    let task = TaskConfig {
        max_operand: 99,
        sub_fraction: 0.5,
    };
    build_examples(&sample_problems(seed, n, &task, Split::Any).unwrap(), B).unwrap()
}

pub fn prompts(seed: u64, n: usize, blocks: usize) -> Vec<SequenceState> {
    examples(seed, n)
        .iter()
        .map(|e| SequenceState::for_generation(&e.ids[..e.prompt_len], blocks, B).unwrap())
        .collect()
}

/// Residual head whose output projection is random, so it changes logits.
pub fn noisy_head(backbone: &Backbone, objective: Objective, seed: u64) -> MrpHead {
    let config = MrpConfig {
        depth: 1,
        objective,
        ..Default::default()
    };
    let mut head = MrpHead::for_backbone(config, backbone, 2, 1e-6, seed).unwrap();
    let d = head.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    head.params.get_mut(head.ids.out_w).value = Tensor::randn(&[d, d], 0.5, &mut rng);
    head
}

/// Backbone whose logits at visible positions favour the visible token, so
/// verification accepts every draft.
pub struct Copying<'a>(pub &'a Backbone);

impl Denoiser for Copying<'_> {
    fn block_size(&self) -> usize {
        self.0.block_size()
    }

    fn d_model(&self) -> usize {
        self.0.d_model()
    }

    fn vocab_size(&self) -> usize {
        self.0.vocab_size()
    }

    fn forward(&self, ids: &[usize], prompt_len: usize) -> mrp_core::Result<ForwardOut> {
        let mut out = self.0.forward(ids, prompt_len)?;
        for (i, &t) in ids.iter().enumerate() {
            if t != MASK {
                out.logits.row_mut(i)[t] += 1e3;
            }
        }
        Ok(out)
    }

    fn lm_head(&self) -> &Tensor {
        self.0.lm_head()
    }

    fn token_embeddings(&self) -> &Tensor {
        self.0.token_embeddings()
    }

    fn positional_embeddings(&self) -> &Tensor {
        self.0.positional_embeddings()
    }
}
