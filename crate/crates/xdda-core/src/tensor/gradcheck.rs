//! Central finite-difference gradient verification.
//!
//! The checker never touches the reverse-mode path it verifies: it reads
//! analytic gradients once, then re-evaluates the loss under coordinate
//! perturbations of the leaf parameters.

use rand::Rng;

use super::Tensor;
use crate::rng::rng_from;

impl Tensor {
    /// Clear gradients on every tensor reachable from this node.
    pub fn zero_reachable_grads(&self) {
        for t in self.topo_order() {
            t.zero_grad();
        }
    }
}

#[derive(Debug, Default)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    pub max_rel_err: f64,
    /// Coordinates whose primary-step probe straddled a non-smooth point
    /// (relu / smooth-L1 corner) and only agreed after step refinement.
    pub refined_coords: usize,
}

/// Compare reverse-mode gradients of `build_loss` against central finite
/// differences for every listed leaf tensor.
///
/// Relative error uses `|fd - an| / max(|fd|, |an|, 0.01)` so that
/// finite-difference noise on near-zero gradients does not dominate. Tensors
/// larger than `max_coords_per_tensor` are spot-checked on a seeded random
/// coordinate subset.
///
/// Piecewise-smooth losses have no derivative where an activation kink falls
/// inside the probe interval, so a coordinate that misses the tolerance at
/// the primary step is re-probed at h/4 and h/16. A kink clears the interval
/// as the step shrinks and the probe converges to the analytic value; a wrong
/// gradient disagrees at every step and still fails.
pub fn check_gradients<F>(
    mut build_loss: F,
    params: &[(&str, &Tensor)],
    h: f64,
    tol: f64,
    max_coords_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport, String>
where
    F: FnMut() -> Tensor,
{
    let loss = build_loss();
    loss.zero_reachable_grads();
    loss.backward().map_err(|e| format!("backward failed: {e}"))?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, t)| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut rng = rng_from(seed);
    let mut report = GradCheckReport::default();
    let mut failures: Vec<String> = Vec::new();

    for (pi, (name, t)) in params.iter().enumerate() {
        let n = t.numel();
        let coords: Vec<usize> = if n <= max_coords_per_tensor {
            (0..n).collect()
        } else {
            (0..max_coords_per_tensor)
                .map(|_| rng.random_range(0..n))
                .collect()
        };
        for ci in coords {
            let an = analytic[pi][ci];
            let mut rel = f64::INFINITY;
            let mut fd = f64::NAN;
            for (step_idx, step) in [h, h / 4.0, h / 16.0].into_iter().enumerate() {
                t.apply_update(|d| d[ci] += step);
                let f_plus = build_loss().item();
                t.apply_update(|d| d[ci] -= 2.0 * step);
                let f_minus = build_loss().item();
                t.apply_update(|d| d[ci] += step);

                fd = (f_plus - f_minus) / (2.0 * step);
                rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-2);
                if rel <= tol {
                    if step_idx > 0 {
                        report.refined_coords += 1;
                    }
                    break;
                }
            }
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
            }
            if rel > tol && failures.len() < 8 {
                failures.push(format!(
                    "{name}[{ci}]: analytic {an:.6e} vs finite-diff {fd:.6e} (rel {rel:.3e})"
                ));
            }
        }
    }

    // Leave the graph clean for whatever the caller does next.
    build_loss().zero_reachable_grads();

    if failures.is_empty() {
        Ok(report)
    } else {
        Err(failures.join("; "))
    }
}

fn randn_tensor(shape: &[usize], seed: u64, requires_grad: bool) -> Tensor {
    let mut rng = rng_from(seed);
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| crate::rng::sample_normal(&mut rng)).collect();
    Tensor::from_vec(shape, data, requires_grad).unwrap()
}

/// Nudge values away from a non-smooth point so central differences stay
/// second-order accurate.
fn away_from(data: Vec<f64>, kink: f64, margin: f64) -> Vec<f64> {
    data.into_iter()
        .map(|x| {
            if (x - kink).abs() < margin {
                kink + margin * if x >= kink { 1.0 } else { -1.0 }
            } else {
                x
            }
        })
        .collect()
}

/// Run the finite-difference oracle over every differentiable op, on
/// `instances` random instances each. Returns `(op name, max rel err)` per
/// op, or a description of the first failures.
pub fn op_gradient_sweep(instances: usize, h: f64, tol: f64) -> Result<Vec<(String, f64)>, String> {
    use crate::tensor::PixelRect;

    let mut results = Vec::new();
    let mut run = |name: &str,
                   build: &mut dyn FnMut(u64) -> (Vec<(&'static str, Tensor)>, Box<dyn Fn(&[Tensor]) -> Tensor>)|
     -> Result<(), String> {
        let mut worst = 0.0f64;
        for i in 0..instances {
            let seed = crate::rng::derive_seed(0xA11, (name.len() as u64) << 32 | i as u64);
            let (params, loss_fn) = build(seed);
            let tensors: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
            let named: Vec<(&str, &Tensor)> = params
                .iter()
                .zip(tensors.iter())
                .map(|((n, _), t)| (*n, t))
                .collect();
            let report = check_gradients(|| loss_fn(&tensors), &named, h, tol, 96, seed)
                .map_err(|e| format!("{name} instance {i}: {e}"))?;
            worst = worst.max(report.max_rel_err);
        }
        results.push((name.to_string(), worst));
        Ok(())
    };

    // Random constant cotangent so the sweep exercises the full
    // Jacobian-transpose action rather than a uniform one.
    fn cot(shape: &[usize], seed: u64) -> Tensor {
        randn_tensor(shape, seed ^ 0xC07, false)
    }

    run("matmul", &mut |s| {
        let a = randn_tensor(&[3, 4], s, true);
        let b = randn_tensor(&[4, 2], s + 1, true);
        let c = cot(&[3, 2], s);
        (
            vec![("a", a), ("b", b)],
            Box::new(move |p| p[0].matmul(&p[1]).unwrap().mul(&c).unwrap().sum_all()),
        )
    })?;

    run("transpose", &mut |s| {
        let a = randn_tensor(&[3, 5], s, true);
        let c = cot(&[5, 3], s);
        (
            vec![("a", a)],
            Box::new(move |p| p[0].transpose().unwrap().mul(&c).unwrap().sum_all()),
        )
    })?;

    run("add", &mut |s| {
        let a = randn_tensor(&[2, 3], s, true);
        let b = randn_tensor(&[2, 3], s + 1, true);
        let c = cot(&[2, 3], s);
        (
            vec![("a", a), ("b", b)],
            Box::new(move |p| p[0].add(&p[1]).unwrap().mul(&c).unwrap().sum_all()),
        )
    })?;

    run("sub", &mut |s| {
        let a = randn_tensor(&[2, 3], s, true);
        let b = randn_tensor(&[2, 3], s + 1, true);
        let c = cot(&[2, 3], s);
        (
            vec![("a", a), ("b", b)],
            Box::new(move |p| p[0].sub(&p[1]).unwrap().mul(&c).unwrap().sum_all()),
        )
    })?;

    run("mul", &mut |s| {
        let a = randn_tensor(&[2, 3], s, true);
        let b = randn_tensor(&[2, 3], s + 1, true);
        let c = cot(&[2, 3], s);
        (
            vec![("a", a), ("b", b)],
            Box::new(move |p| p[0].mul(&p[1]).unwrap().mul(&c).unwrap().sum_all()),
        )
    })?;

    run("div", &mut |s| {
        let a = randn_tensor(&[2, 3], s, true);
        let bdata: Vec<f64> = randn_tensor(&[2, 3], s + 1, false)
            .to_vec()
            .into_iter()
            .map(|x| x.signum() * (x.abs() + 0.5))
            .collect();
        let b = Tensor::from_vec(&[2, 3], bdata, true).unwrap();
        let c = cot(&[2, 3], s);
        (
            vec![("a", a), ("b", b)],
            Box::new(move |p| p[0].div(&p[1]).unwrap().mul(&c).unwrap().sum_all()),
        )
    })?;

    run("add_bias", &mut |s| {
        let a = randn_tensor(&[3, 4], s, true);
        let b = randn_tensor(&[4], s + 1, true);
        let c = cot(&[3, 4], s);
        (
            vec![("x", a), ("bias", b)],
            Box::new(move |p| p[0].add_bias(&p[1]).unwrap().mul(&c).unwrap().sum_all()),
        )
    })?;

    run("scale_add_scalar", &mut |s| {
        let a = randn_tensor(&[2, 3], s, true);
        let c = cot(&[2, 3], s);
        (
            vec![("a", a)],
            Box::new(move |p| p[0].scale(1.7).add_scalar(0.3).mul(&c).unwrap().sum_all()),
        )
    })?;

    run("relu", &mut |s| {
        let raw = away_from(randn_tensor(&[3, 3], s, false).to_vec(), 0.0, 0.05);
        let a = Tensor::from_vec(&[3, 3], raw, true).unwrap();
        let c = cot(&[3, 3], s);
        (
            vec![("a", a)],
            Box::new(move |p| p[0].relu().mul(&c).unwrap().sum_all()),
        )
    })?;

    run("exp", &mut |s| {
        let a = randn_tensor(&[2, 3], s, true);
        let c = cot(&[2, 3], s);
        (
            vec![("a", a)],
            Box::new(move |p| p[0].exp().mul(&c).unwrap().sum_all()),
        )
    })?;

    run("log", &mut |s| {
        let raw: Vec<f64> = randn_tensor(&[2, 3], s, false)
            .to_vec()
            .into_iter()
            .map(|x| x.abs() + 0.2)
            .collect();
        let a = Tensor::from_vec(&[2, 3], raw, true).unwrap();
        let c = cot(&[2, 3], s);
        (
            vec![("a", a)],
            Box::new(move |p| p[0].log().mul(&c).unwrap().sum_all()),
        )
    })?;

    run("sigmoid", &mut |s| {
        let a = randn_tensor(&[2, 3], s, true);
        let c = cot(&[2, 3], s);
        (
            vec![("a", a)],
            Box::new(move |p| p[0].sigmoid().mul(&c).unwrap().sum_all()),
        )
    })?;

    run("pow_scalar", &mut |s| {
        let raw: Vec<f64> = randn_tensor(&[2, 3], s, false)
            .to_vec()
            .into_iter()
            .map(|x| x.abs() + 0.2)
            .collect();
        let a = Tensor::from_vec(&[2, 3], raw, true).unwrap();
        let c = cot(&[2, 3], s);
        (
            vec![("a", a)],
            Box::new(move |p| p[0].pow_scalar(1.7).mul(&c).unwrap().sum_all()),
        )
    })?;

    run("smooth_l1", &mut |s| {
        let raw = away_from(away_from(randn_tensor(&[3, 4], s, false).to_vec(), 1.0, 0.05), -1.0, 0.05);
        let a = Tensor::from_vec(&[3, 4], raw, true).unwrap();
        let c = cot(&[3, 4], s);
        (
            vec![("a", a)],
            Box::new(move |p| p[0].smooth_l1().mul(&c).unwrap().sum_all()),
        )
    })?;

    run("sum_mean_all", &mut |s| {
        let a = randn_tensor(&[3, 3], s, true);
        (
            vec![("a", a)],
            Box::new(move |p| p[0].sum_all().scale(0.3).add(&p[0].mean_all().scale(1.3)).unwrap()),
        )
    })?;

    run("row_sum", &mut |s| {
        let a = randn_tensor(&[3, 4], s, true);
        let c = cot(&[3, 1], s);
        (
            vec![("a", a)],
            Box::new(move |p| p[0].row_sum().unwrap().mul(&c).unwrap().sum_all()),
        )
    })?;

    run("repeat_cols", &mut |s| {
        let a = randn_tensor(&[3, 1], s, true);
        let c = cot(&[3, 4], s);
        (
            vec![("a", a)],
            Box::new(move |p| p[0].repeat_cols(4).unwrap().mul(&c).unwrap().sum_all()),
        )
    })?;

    run("softmax_rows", &mut |s| {
        let a = randn_tensor(&[3, 4], s, true);
        let c = cot(&[3, 4], s);
        (
            vec![("a", a)],
            Box::new(move |p| p[0].softmax_rows().unwrap().mul(&c).unwrap().sum_all()),
        )
    })?;

    run("log_softmax_rows", &mut |s| {
        let a = randn_tensor(&[3, 4], s, true);
        let c = cot(&[3, 4], s);
        (
            vec![("a", a)],
            Box::new(move |p| p[0].log_softmax_rows().unwrap().mul(&c).unwrap().sum_all()),
        )
    })?;

    run("concat_cols", &mut |s| {
        let a = randn_tensor(&[3, 2], s, true);
        let b = randn_tensor(&[3, 3], s + 1, true);
        let c = cot(&[3, 5], s);
        (
            vec![("a", a), ("b", b)],
            Box::new(move |p| {
                Tensor::concat_cols(&[p[0].clone(), p[1].clone()])
                    .unwrap()
                    .mul(&c)
                    .unwrap()
                    .sum_all()
            }),
        )
    })?;

    run("concat_rows", &mut |s| {
        let a = randn_tensor(&[2, 3], s, true);
        let b = randn_tensor(&[3, 3], s + 1, true);
        let c = cot(&[5, 3], s);
        (
            vec![("a", a), ("b", b)],
            Box::new(move |p| {
                Tensor::concat_rows(&[p[0].clone(), p[1].clone()])
                    .unwrap()
                    .mul(&c)
                    .unwrap()
                    .sum_all()
            }),
        )
    })?;

    run("gather_rows", &mut |s| {
        let a = randn_tensor(&[4, 3], s, true);
        let c = cot(&[3, 3], s);
        (
            vec![("a", a)],
            Box::new(move |p| p[0].gather_rows(&[2, 0, 2]).unwrap().mul(&c).unwrap().sum_all()),
        )
    })?;

    run("select_per_row", &mut |s| {
        let a = randn_tensor(&[3, 4], s, true);
        let c = cot(&[3, 1], s);
        (
            vec![("a", a)],
            Box::new(move |p| {
                p[0].select_per_row(&[1, 3, 0]).unwrap().mul(&c).unwrap().sum_all()
            }),
        )
    })?;

    run("slice_cols", &mut |s| {
        let a = randn_tensor(&[3, 5], s, true);
        let c = cot(&[3, 2], s);
        (
            vec![("a", a)],
            Box::new(move |p| p[0].slice_cols(1, 3).unwrap().mul(&c).unwrap().sum_all()),
        )
    })?;

    run("reshape", &mut |s| {
        let a = randn_tensor(&[2, 6], s, true);
        let c = cot(&[3, 4], s);
        (
            vec![("a", a)],
            Box::new(move |p| p[0].reshape(&[3, 4]).unwrap().mul(&c).unwrap().sum_all()),
        )
    })?;

    run("conv2d", &mut |s| {
        let x = randn_tensor(&[2, 6, 6], s, true);
        let w = randn_tensor(&[3, 2, 3, 3], s + 1, true);
        let b = randn_tensor(&[3], s + 2, true);
        let c = cot(&[3, 3, 3], s);
        (
            vec![("x", x), ("w", w), ("b", b)],
            Box::new(move |p| {
                p[0].conv2d(&p[1], &p[2], 2, 1)
                    .unwrap()
                    .reshape(&[3, 9])
                    .unwrap()
                    .mul(&c.reshape(&[3, 9]).unwrap())
                    .unwrap()
                    .sum_all()
            }),
        )
    })?;

    run("box_avg_pool", &mut |s| {
        let x = randn_tensor(&[2, 5, 5], s, true);
        let windows = vec![
            vec![
                PixelRect { y0: 0, y1: 2, x0: 0, x1: 3 },
                PixelRect { y0: 2, y1: 5, x0: 1, x1: 4 },
            ],
            vec![
                PixelRect { y0: 1, y1: 4, x0: 0, x1: 2 },
                PixelRect { y0: 0, y1: 5, x0: 0, x1: 5 },
            ],
        ];
        let c = cot(&[2, 4], s);
        (
            vec![("x", x)],
            Box::new(move |p| p[0].box_avg_pool(&windows).unwrap().mul(&c).unwrap().sum_all()),
        )
    })?;

    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::sample_normal;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rng_from(seed);
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| sample_normal(&mut rng)).collect();
        Tensor::from_vec(shape, data, true).unwrap()
    }

    #[test]
    fn passes_on_correct_gradient() {
        let x = randn(&[3, 2], 1);
        let w = randn(&[2, 4], 2);
        let report = check_gradients(
            || x.matmul(&w).unwrap().sigmoid().mean_all(),
            &[("x", &x), ("w", &w)],
            1e-3,
            1e-4,
            64,
            0,
        )
        .unwrap();
        assert_eq!(report.coords_checked, 14);
        assert!(report.max_rel_err < 1e-4);
    }

    #[test]
    fn catches_a_wrong_gradient() {
        let x = randn(&[2, 2], 3);
        // exp pretending to be identity in backward would be caught; simulate
        // by checking a loss whose analytic grad we corrupt via a detached
        // reuse: loss = sum(exp(x)) but compare against grads of sum(x).
        let y = x.detach();
        let err = check_gradients(
            || {
                // gradient lands on x, finite differences see exp(y+delta)?
                // No: build a mismatched pair on purpose by perturbing y while
                // differentiating x.
                x.sum_all().add(&y.exp().sum_all()).unwrap()
            },
            &[("y", &y)],
            1e-3,
            1e-4,
            16,
            0,
        );
        // y is a constant (requires_grad = false): analytic grad is zero while
        // finite differences see exp'(y) != 0, so the check must fail.
        assert!(err.is_err());
    }
}
