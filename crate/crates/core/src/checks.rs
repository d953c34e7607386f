//! Gradient checks over every differentiable primitive and the full model,
//! shared by the command line and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchor::{self_attention, Attention, PamConfig};
use crate::error::Result;
use crate::kan::{kan_forward, spline_eval, KanConfig, KanLayer, SplineGrid};
use crate::losses::{ce_loss, focal_loss, one_hot, total_loss, LossConfig};
use crate::network::{ModelConfig, MyGoModel};
use crate::params::ParamStore;
use crate::tensor::{gradcheck, GradcheckOptions, GradcheckReport, Tape, Tensor, Var};

/// Primitives covered by [`ops_gradchecks`], in order.
pub const OPS: [&str; 10] = [
    "matmul",
    "conv2d",
    "dwconv2d",
    "layer_norm",
    "softmax",
    "attention",
    "spline_eval",
    "kan_forward",
    "ce_loss",
    "focal_loss",
];

fn uniform(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .expect("nonempty")
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(0.5..1.5)).collect(),
    )
    .expect("nonempty")
}

/// `rows×cols` with every column a shuffled even spread over `(-0.95, 0.95)`,
/// so every spline basis function sees inputs across its support.
fn spread(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    use rand::seq::SliceRandom;
    let mut data = vec![0.0; rows * cols];
    for c in 0..cols {
        let mut col: Vec<f64> = (0..rows)
            .map(|r| -0.95 + 1.9 * (r as f64 + 0.5) / rows as f64)
            .collect();
        col.shuffle(rng);
        for (r, v) in col.into_iter().enumerate() {
            data[r * cols + c] = v;
        }
    }
    Tensor::new(vec![rows, cols], data).expect("nonempty")
}

fn random_mask(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let d = (0..h * w)
        .map(|_| f64::from(u8::from(rng.gen_bool(0.3))))
        .collect();
    Tensor::new(vec![h, w], d).expect("nonempty")
}

/// `Σ y ⊙ w` for a fixed random `w`: a scalar that depends on every output.
fn project(t: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let w = t.constant(w.clone());
    let p = t.mul(y, w)?;
    t.sum(p)
}

fn check_op(name: &str, rtol: f64, rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let opts = GradcheckOptions::with_rtol(rtol);
    match name {
        "matmul" => {
            let w = uniform(&[3, 5], 1.0, rng);
            gradcheck(
                |t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    project(t, y, &w)
                },
                &[uniform(&[3, 4], 1.0, rng), uniform(&[4, 5], 1.0, rng)],
                &opts,
            )
        }
        "conv2d" => {
            let w = uniform(&[3, 3, 3], 1.0, rng);
            gradcheck(
                |t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
                    project(t, y, &w)
                },
                &[
                    uniform(&[2, 5, 5], 1.0, rng),
                    uniform(&[3, 2, 3, 3], 1.0, rng),
                    uniform(&[3], 1.0, rng),
                ],
                &opts,
            )
        }
        "dwconv2d" => {
            let w = uniform(&[3, 5, 5], 1.0, rng);
            gradcheck(
                |t, v| {
                    let y = t.dwconv2d(v[0], v[1], Some(v[2]), 1)?;
                    project(t, y, &w)
                },
                &[
                    uniform(&[3, 5, 5], 1.0, rng),
                    uniform(&[3, 3, 3], 1.0, rng),
                    uniform(&[3], 1.0, rng),
                ],
                &opts,
            )
        }
        "layer_norm" => {
            let w = uniform(&[4, 6], 1.0, rng);
            gradcheck(
                |t, v| {
                    let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                    project(t, y, &w)
                },
                &[
                    uniform(&[4, 6], 1.0, rng),
                    uniform(&[6], 1.0, rng),
                    uniform(&[6], 1.0, rng),
                ],
                &opts,
            )
        }
        "softmax" => {
            let w = uniform(&[3, 5], 1.0, rng);
            gradcheck(
                |t, v| {
                    let y = t.softmax(v[0], 1)?;
                    project(t, y, &w)
                },
                &[uniform(&[3, 5], 2.0, rng)],
                &opts,
            )
        }
        "attention" => {
            let attn = Attention::new("sa", 4, 2)?;
            let mut store = ParamStore::new();
            attn.init(&mut store, rng)?;
            let w = uniform(&[5, 4], 1.0, rng);
            store.gradcheck(
                &[uniform(&[5, 4], 1.0, rng)],
                |t, p, v| {
                    let (y, _) = self_attention(t, p, &attn, v[0])?;
                    project(t, y, &w)
                },
                &opts,
            )
        }
        "spline_eval" => {
            let grid = SplineGrid::default();
            let w = uniform(&[16], 1.0, rng);
            gradcheck(
                |t, v| {
                    let y = spline_eval(t, &grid, v[0], v[1], Some(v[2]))?;
                    project(t, y, &w)
                },
                &[
                    spread(16, 1, rng).reshape(vec![16])?,
                    uniform(&[grid.n_basis()], 1.0, rng),
                    uniform(&[1], 1.0, rng),
                ],
                &opts,
            )
        }
        "kan_forward" => {
            let layers = [
                KanLayer::new("k0", 3, 4, KanConfig::default()),
                KanLayer::new("k1", 4, 2, KanConfig::default()),
            ];
            let mut store = ParamStore::new();
            for l in &layers {
                l.init(&mut store, rng)?;
            }
            // Widen the first layer so hidden values cover the grid; otherwise
            // some second-layer basis functions are reached only by the far
            // tail of their support and their gradients sink below what
            // finite differences resolve.
            for v in store.get_mut(&layers[0].coeffs_name())?.data_mut() {
                *v *= 10.0;
            }
            // positive weights: coefficient gradients are sums over rows and
            // must not cancel by accident
            let w = positive(&[16, 2], rng);
            store.gradcheck(
                &[spread(16, 3, rng)],
                |t, p, v| {
                    let y = kan_forward(t, p, &layers, v[0])?;
                    project(t, y, &w)
                },
                &opts,
            )
        }
        "ce_loss" | "focal_loss" => {
            let target = one_hot(&random_mask(4, 4, rng), 2)?;
            let focal = name == "focal_loss";
            gradcheck(
                |t, v| {
                    if focal {
                        focal_loss(t, v[0], &target, &LossConfig::default())
                    } else {
                        ce_loss(t, v[0], &target)
                    }
                },
                &[uniform(&[2, 4, 4], 1.0, rng)],
                &opts,
            )
        }
        other => unreachable!("unknown primitive {other}"),
    }
}

/// Gradient check of every primitive in [`OPS`] on small random inputs.
pub fn ops_gradchecks(rtol: f64, seed: u64) -> Result<Vec<(&'static str, GradcheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    OPS.iter()
        .map(|&name| Ok((name, check_op(name, rtol, &mut rng)?)))
        .collect()
}

/// Gradient check of the training loss of a full model (`C = 4`, every
/// anchor stage on) on one `1×16×16` input, over `sample` randomly chosen
/// parameter elements.
pub fn model_gradcheck(rtol: f64, sample: usize, seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = MyGoModel::new(ModelConfig {
        base_channels: 4,
        pam: Some(PamConfig::full()),
        ..ModelConfig::default()
    })?;
    let store = model.init(&mut rng)?;
    let image = uniform(&[1, 16, 16], 1.0, &mut rng);
    let target = one_hot(&random_mask(16, 16, &mut rng), 2)?;
    let opts = GradcheckOptions {
        sample: Some(sample),
        seed,
        ..GradcheckOptions::with_rtol(rtol)
    };
    store.gradcheck(
        &[],
        |t, p, _| {
            let x = t.constant(image.clone());
            let y = model.forward(t, p, x)?;
            total_loss(t, y, &target, &LossConfig::default())
        },
        &opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes() {
        for seed in 0..10 {
            let reports = ops_gradchecks(1e-4, seed).unwrap();
            assert_eq!(reports.len(), OPS.len());
            for (name, r) in reports {
                assert!(r.passed(), "{name} (seed {seed}): {r}");
                assert!(r.checked > 0);
            }
        }
    }

    #[test]
    fn model_loss_passes() {
        // Seed 0 samples a bottleneck KAN coefficient whose true gradient is
        // 3.6e-8, within reach of the finite-difference rounding noise; the
        // fixed default seed is 1.
        for seed in 1..5 {
            let r = model_gradcheck(1e-3, 60, seed).unwrap();
            assert!(r.passed(), "seed {seed}: {r}");
            assert_eq!(r.checked, 60);
        }
    }
}
