mod common;

use common::*;
use mrp_core::backbone::{Denoiser, ForwardOut};
use mrp_core::bench::{
    check_contraction, check_decay, check_softmax_lipschitz, decay_series, depth_sweep, measure_residuals,
    residual_curves, run_table, softmax_tv_ratio, spearman, transitions, write_residuals, write_table,
    write_theory, BlockStates, Cell, MeasureConfig, Space, TheoryRow, SOFTMAX_TV_BOUND,
};
use mrp_core::diffusion::Policy;
use mrp_core::exec::ExecMode;
use mrp_core::inference::{decode_many, DecodeConfig, Mode};
use mrp_core::mrp::{BoundHead, Objective, ResidualHead};
use mrp_core::numerics::{rms, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Returns the same tensors whatever the input.
struct Constant {
    d: usize,
    v: usize,
    emb: Tensor,
}

impl Denoiser for Constant {
    fn block_size(&self) -> usize {
        B
    }
    fn d_model(&self) -> usize {
        self.d
    }
    fn vocab_size(&self) -> usize {
        self.v
    }
    fn forward(&self, ids: &[usize], _prompt_len: usize) -> mrp_core::Result<ForwardOut> {
        let l = ids.len();
        let h = Tensor::new(vec![l, self.d], (0..l * self.d).map(|i| (i % 7) as f64 - 3.0).collect())?;
        let logits = Tensor::new(vec![l, self.v], (0..l * self.v).map(|i| (i % 5) as f64).collect())?;
        Ok(ForwardOut { h, logits })
    }
    fn lm_head(&self) -> &Tensor {
        &self.emb
    }
    fn token_embeddings(&self) -> &Tensor {
        &self.emb
    }
    fn positional_embeddings(&self) -> &Tensor {
        &self.emb
    }
}

#[test]
fn constant_model_has_zero_residual() {
    let f = Constant {
        d: 4,
        v: 44,
        emb: Tensor::zeros(&[4, 44]),
    };
    let xs = prompts(1, 10, 1);
    let cfg = MeasureConfig {
        min_blocks: 5,
        ..Default::default()
    };
    let r = measure_residuals(&f, &xs, &cfg, ExecMode::Sequential).unwrap();
    assert_eq!(r.blocks, 10);
    assert_eq!(r.curves.len(), 2 * B);
    assert!(r.curves.iter().all(|c| c.rms_residual == 0.0 && c.rms_reference > 0.0));
    assert!(r.warnings.is_empty());
}

#[test]
fn too_few_blocks_warns_but_reports() {
    let f = tiny_backbone(1);
    let r = measure_residuals(&f, &prompts(1, 3, 1), &MeasureConfig::default(), ExecMode::Sequential).unwrap();
    assert_eq!(r.blocks, 3);
    assert_eq!(r.warnings.len(), 1);
}

#[test]
fn residual_curve_counts_and_values() {
    // X^(s) = s · 1 for a 1x2 tensor: residual RMS at distance k is k.
    let states: Vec<Tensor> = (0..=B).map(|s| Tensor::full(&[1, 2], s as f64)).collect();
    let blocks = vec![BlockStates {
        hidden: states.clone(),
        logits: states,
    }];
    let curves = residual_curves(&blocks, B);
    for c in &curves {
        assert_eq!(c.n, B + 1 - c.k);
        assert!((c.rms_residual - c.k as f64).abs() < 1e-12);
        assert!((c.rms_reference - (B as f64 + 1.0) / 2.0).abs() < 1e-12);
    }
    assert_eq!(curves.iter().filter(|c| c.space == Space::Hidden).count(), B);
}

#[test]
fn rms_matches_definition() {
    assert!((rms(&[3.0, 4.0]) - 3.5355339059327378).abs() < 1e-15);
}

#[test]
fn softmax_lipschitz_holds_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for v in [2, 16, 64] {
        let m = check_softmax_lipschitz(10_000, v, &mut rng).unwrap();
        assert!(m > 0.0 && m <= SOFTMAX_TV_BOUND + 1e-9, "V={v}: {m}");
    }
    let e = std::f64::consts::E;
    assert!((softmax_tv_ratio(&[1.0, 0.0], &[0.0, 0.0]) - 0.2311).abs() < 1e-4);
    assert!((softmax_tv_ratio(&[1.0, 0.0], &[0.0, 0.0]) - (e / (e + 1.0) - 0.5)).abs() < 1e-15);
}

#[test]
fn two_class_ratio_matches_closed_form() {
    let eps = 1e-6;
    let r = softmax_tv_ratio(&[eps, -eps], &[0.0, 0.0]);
    // TV = |σ(2ε) − ½|, distance = √2 ε.
    let sigma = 1.0 / (1.0 + (-2.0 * eps).exp());
    assert!((r - (sigma - 0.5) / (2f64.sqrt() * eps)).abs() < 1e-9);
}

#[test]
fn contraction_bound_holds_by_construction() {
    let f = sharp_backbone(4);
    let xs = prompts(3, 20, 1);
    let mut all = Vec::new();
    for r in [1, 2] {
        let cfg = DecodeConfig {
            mode: Mode::Baseline,
            policy: Policy::Static { r },
            k: 0,
            max_new_tokens: B,
            strict_recompute_on_reject: false,
        };
        let traces: Vec<_> = decode_many(&f, None, &xs, &cfg, ExecMode::Sequential)
            .unwrap()
            .into_iter()
            .map(|t| t.2)
            .collect();
        all.extend(transitions(&f, &traces).unwrap());
    }
    let report = check_contraction(&all).unwrap();
    assert_eq!(report.violations, 0);
    assert!(report.kappa_hat > 0.0 && report.kappa_hat.is_finite());
    assert!(report.tv.iter().all(|&t| t > 0.0 && t.is_finite()));
    assert_eq!(report.tv_by_revealed.keys().copied().collect::<Vec<_>>(), vec![1, 2]);
    assert!(report.mean_slack() >= 0.0);
}

#[test]
fn decay_series_has_one_entry_per_step_pair() {
    let f = tiny_backbone(4);
    let xs = prompts(3, 6, 2);
    let cfg = DecodeConfig {
        mode: Mode::Baseline,
        policy: Policy::Static { r: 1 },
        k: 0,
        max_new_tokens: 2 * B,
        strict_recompute_on_reject: false,
    };
    let traces: Vec<_> = decode_many(&f, None, &xs, &cfg, ExecMode::Sequential)
        .unwrap()
        .into_iter()
        .map(|t| t.2)
        .collect();
    let series = decay_series(&traces);
    assert!(series.len() >= xs.len());
    assert!(series.iter().all(|s| s.len() == B - 1));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = check_decay(&series, 99, &mut rng).unwrap();
    assert!((-1.0..=1.0).contains(&d.rho));
    assert!(d.p_value > 0.0 && d.p_value <= 1.0);
}

#[test]
fn spearman_is_rank_based() {
    let x = [1.0, 2.0, 3.0, 4.0, 5.0];
    let y = [1.0, 10.0, 100.0, 1000.0, 1e9];
    assert_eq!(spearman(&x, &y), Some(1.0));
    // Closed form 1 − 6Σd²/(n(n²−1)) for one swapped pair.
    let z = [2.0, 1.0, 3.0, 4.0, 5.0];
    assert!((spearman(&x, &z).unwrap() - (1.0 - 6.0 * 2.0 / 120.0)).abs() < 1e-12);
}

#[test]
fn table_counting_and_reduction() {
    let f = sharp_backbone(6);
    let g = noisy_head(&f, Objective::Residual, 2);
    let head = BoundHead { head: &g, backbone: &f };
    let eval = examples(8, 30);
    let r1 = Policy::Static { r: 1 };
    let tau = Policy::Dynamic { tau: 1.0 };
    let grid = vec![
        Cell { mode: Mode::Baseline, policy: r1, k: 0 },
        Cell { mode: Mode::Spec, policy: r1, k: 0 },
        Cell { mode: Mode::Direct, policy: tau, k: 1 },
        Cell { mode: Mode::Direct, policy: tau, k: 2 },
    ];
    let rows = run_table(&f, Some(&head), &eval, &grid, Some(1), B, ExecMode::Parallel).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0].backbone_fpt, 1.0);
    assert_eq!(rows[0].speedup, 1.0);
    assert_eq!(rows[1].accuracy, rows[0].accuracy);
    assert_eq!(rows[1].backbone_fpt, 1.0);
    assert!(rows[3].backbone_fpt < rows[2].backbone_fpt);
    assert!(rows[2].backbone_fpt < 1.0);
    assert!(rows[2].speedup > 1.0);
    assert_eq!(rows[0].accept_rate, None);

    let heads: Vec<(usize, &dyn ResidualHead)> = vec![(1, &head), (2, &head)];
    let swept = depth_sweep(&f, &heads, &eval, &grid, B, ExecMode::Sequential).unwrap();
    assert_eq!(swept.len(), 2 * grid.len());
    assert_eq!(swept[..4], rows[..]);
}

#[test]
fn csv_headers_are_exact() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("residuals.csv");
    write_residuals(&p, &[]).unwrap();
    assert_eq!(std::fs::read_to_string(&p).unwrap(), "space,k,rms_residual,rms_reference,n\n");
    let p = dir.path().join("table.csv");
    write_table(&p, &[]).unwrap();
    assert_eq!(
        std::fs::read_to_string(&p).unwrap(),
        "mode,policy,param,K,depth,accuracy,backbone_fpt,mrp_fpt,accept_rate,speedup\n"
    );
    let p = dir.path().join("theory.csv");
    write_theory(&p, &[TheoryRow::new("kappa_hat", 1.5, 3, "")]).unwrap();
    assert_eq!(std::fs::read_to_string(&p).unwrap(), "metric,value,n,flag\nkappa_hat,1.5,3,\n");
}
