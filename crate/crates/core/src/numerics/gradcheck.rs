//! Central finite-difference checks for the graph's backward rules.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::graph::{Graph, Var};
use super::tensor::{softmax_in_place, Tensor};

pub const STEP: f64 = 1e-5;

/// Largest relative error, `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`
/// per input, between backward and central differences of the scalar `f`.
pub fn max_relative_error<F>(inputs: &[Tensor], f: F, h: f64) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt_or_zero(*v);
        let mut numeric = vec![0.0; analytic.len()];
        for j in 0..numeric.len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * h);
        }
        let diff = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let scale = super::tensor::l2(&analytic).max(super::tensor::l2(&numeric));
        if scale > 1e-10 {
            worst = worst.max(diff / scale);
        }
    }
    Ok(worst)
}

fn project<'g>(g: &mut Graph<'g>, out: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let w = g.input(Tensor::randn(&shape, 1.0, rng));
    let m = g.mul(out, w)?;
    Ok(g.sum(m))
}

fn distribution(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut row: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    softmax_in_place(&mut row);
    row
}

/// Checks every differentiable graph operation on random inputs and returns
/// `(name, max relative error)` per operation.
pub fn check_all_ops(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let h = STEP;

    macro_rules! check {
        ($name:expr, $inputs:expr, |$g:ident, $v:ident, $r:ident| $body:expr) => {{
            let inputs: Vec<Tensor> = $inputs;
            let proj_seed: u64 = rng.random();
            let err = max_relative_error(
                &inputs,
                |$g: &mut Graph<'_>, $v: &[Var]| {
                    let mut $r = ChaCha8Rng::seed_from_u64(proj_seed);
                    $body
                },
                h,
            )?;
            out.push(($name, err));
        }};
    }

    let t = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::randn(shape, 1.0, rng);

    check!("matmul", vec![t(&[3, 4], &mut rng), t(&[4, 5], &mut rng)], |g, v, r| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y, &mut r)
    });
    check!("add", vec![t(&[3, 4], &mut rng), t(&[3, 4], &mut rng)], |g, v, r| {
        let y = g.add(v[0], v[1])?;
        project(g, y, &mut r)
    });
    check!("add_row", vec![t(&[3, 4], &mut rng), t(&[4], &mut rng)], |g, v, r| {
        let y = g.add_row(v[0], v[1])?;
        project(g, y, &mut r)
    });
    check!("mul", vec![t(&[3, 4], &mut rng), t(&[3, 4], &mut rng)], |g, v, r| {
        let y = g.mul(v[0], v[1])?;
        project(g, y, &mut r)
    });
    check!("scale", vec![t(&[2, 3], &mut rng)], |g, v, r| {
        let y = g.scale(v[0], -1.7);
        project(g, y, &mut r)
    });
    check!("gelu", vec![t(&[4, 5], &mut rng)], |g, v, r| {
        let y = g.gelu(v[0]);
        project(g, y, &mut r)
    });
    check!("rms_norm", vec![t(&[3, 6], &mut rng), t(&[6], &mut rng)], |g, v, r| {
        let y = g.rms_norm(v[0], v[1], 1e-6)?;
        project(g, y, &mut r)
    });
    check!("embedding", vec![t(&[5, 3], &mut rng)], |g, v, r| {
        let y = g.embedding(v[0], &[4, 0, 4, 2])?;
        project(g, y, &mut r)
    });
    check!("concat_cols", vec![t(&[3, 2], &mut rng), t(&[3, 4], &mut rng)], |g, v, r| {
        let y = g.concat_cols(v[0], v[1])?;
        project(g, y, &mut r)
    });
    let l = 6;
    let allowed: Arc<Vec<bool>> = Arc::new(
        (0..l * l)
            .map(|i| {
                let (q, k) = (i / l, i % l);
                k / 2 <= q / 2
            })
            .collect(),
    );
    check!(
        "attention",
        vec![t(&[l, 8], &mut rng), t(&[l, 8], &mut rng), t(&[l, 8], &mut rng)],
        |g, v, r| {
            let y = g.attention(v[0], v[1], v[2], 2, allowed.clone())?;
            project(g, y, &mut r)
        }
    );
    check!("softmax_rows", vec![t(&[3, 5], &mut rng)], |g, v, r| {
        let y = g.softmax_rows(v[0])?;
        project(g, y, &mut r)
    });
    check!("cross_entropy", vec![t(&[4, 6], &mut rng)], |g, v, _r| {
        g.cross_entropy(v[0], &[(0, 1), (2, 5), (3, 0), (0, 4)], 0.25)
    });
    let teacher: Vec<f64> = [distribution(6, &mut rng), distribution(6, &mut rng)].concat();
    for (name, temp) in [("kl_to_logits", 1.0), ("kl_to_logits_tempered", 2.0)] {
        let teacher = teacher.clone();
        check!(name, vec![t(&[4, 6], &mut rng)], |g, v, _r| {
            g.kl_to_logits(v[0], &[1, 3], teacher.clone(), temp, 0.5)
        });
    }
    check!("weighted_sum", vec![t(&[3], &mut rng), t(&[2, 2], &mut rng)], |g, v, _r| {
        let a = g.sum(v[0]);
        let sq = g.mul(v[1], v[1])?;
        let b = g.sum(sq);
        g.weighted_sum(&[(a, 0.3), (b, 0.7)])
    });
    check!("sum", vec![t(&[2, 3], &mut rng)], |g, v, _r| {
        let sq = g.mul(v[0], v[0])?;
        Ok(g.sum(sq))
    });
    Ok(out)
}
