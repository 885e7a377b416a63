//! Central-difference verification of the analytic backward passes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;
use crate::geometry::BBox;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Largest relative error between the analytic gradient returned by `f` at
/// `point` and central differences of its value with step `eps`.
pub fn finite_diff_check<F>(mut f: F, point: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (_, analytic) = f(point)?;
    let mut x = point.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let (hi, _) = f(&x)?;
        x[i] = orig - eps;
        let (lo, _) = f(&x)?;
        x[i] = orig;
        let numeric = (hi - lo) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Faults the suite can inject into an op's backward to prove it notices.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    ReluSignFlip,
}

#[derive(Clone, Debug)]
pub struct OpReport {
    pub op: &'static str,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub const SUITE_OPS: [&str; 11] = [
    "conv2d",
    "deconv2d",
    "maxpool2d",
    "relu",
    "batchnorm2d_train",
    "batchnorm2d_eval",
    "avgpool_global",
    "fc",
    "softmax_xent",
    "smooth_l1",
    "roi_pool",
];

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Values with pairwise gaps far larger than the difference step, so max
/// selections never flip while probing.
fn separated(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    v.shuffle(rng);
    v
}

fn t(shape: &[usize], v: &[f64]) -> Result<Tensor<f64>> {
    Tensor::from_vec(shape, v.to_vec())
}

fn project(y: &Tensor<f64>, r: &[f64]) -> f64 {
    y.data().iter().zip(r).map(|(a, b)| a * b).sum()
}

fn check_one(op: &str, seed: u64, fault: Fault) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9) ^ op.len() as u64);
    let eps = DEFAULT_EPS;
    match op {
        "conv2d" | "deconv2d" => {
            let deconv = op == "deconv2d";
            let xs = [1, 2, 5, 5];
            let ws = if deconv { [2, 3, 3, 3] } else { [3, 2, 3, 3] };
            let geom = ConvGeom::new(2, 1);
            let nx = 50;
            let nw = 54;
            let point = randn(&mut rng, nx + nw + 3);
            let out_shape = {
                let x = t(&xs, &point[..nx])?;
                let w = t(&ws, &point[nx..nx + nw])?;
                if deconv { deconv2d(&x, &w, None, geom)? } else { conv2d(&x, &w, None, geom)? }
                    .shape()
                    .to_vec()
            };
            let r = randn(&mut rng, out_shape.iter().product());
            finite_diff_check(
                |p| {
                    let x = t(&xs, &p[..nx])?;
                    let w = t(&ws, &p[nx..nx + nw])?;
                    let b = t(&[3], &p[nx + nw..])?;
                    let (y, g) = if deconv {
                        let y = deconv2d(&x, &w, Some(&b), geom)?;
                        let g = deconv2d_backward(&x, &w, geom, &t(y.shape(), &r)?)?;
                        (y, g)
                    } else {
                        let y = conv2d(&x, &w, Some(&b), geom)?;
                        let g = conv2d_backward(&x, &w, geom, &t(y.shape(), &r)?)?;
                        (y, g)
                    };
                    let mut grad = g.input.to_f64_vec();
                    grad.extend(g.weight.to_f64_vec());
                    grad.extend(g.bias.to_f64_vec());
                    Ok((project(&y, &r), grad))
                },
                &point,
                eps,
            )
        }
        "maxpool2d" => {
            let shape = [1, 2, 6, 6];
            let point = separated(&mut rng, 72);
            let r = randn(&mut rng, 18);
            finite_diff_check(
                |p| {
                    let x = t(&shape, p)?;
                    let out = maxpool2d(&x, 2, 2)?;
                    let dx = maxpool2d_backward(&shape, &out.argmax, &t(out.output.shape(), &r)?)?;
                    Ok((project(&out.output, &r), dx.to_f64_vec()))
                },
                &point,
                eps,
            )
        }
        "relu" => {
            let mut point = randn(&mut rng, 24);
            point.iter_mut().filter(|v| v.abs() < 1e-3).for_each(|v| *v = 0.5);
            let r = randn(&mut rng, 24);
            finite_diff_check(
                |p| {
                    let x = t(&[1, 2, 3, 4], p)?;
                    let y = relu(&x);
                    let mut dx = relu_backward(&x, &t(&[1, 2, 3, 4], &r)?)?.to_f64_vec();
                    if fault == Fault::ReluSignFlip {
                        dx.iter_mut().for_each(|v| *v = -*v);
                    }
                    Ok((project(&y, &r), dx))
                },
                &point,
                eps,
            )
        }
        "batchnorm2d_train" | "batchnorm2d_eval" => {
            let mode = if op == "batchnorm2d_train" { BnMode::Train } else { BnMode::Eval };
            let shape = [2, 3, 2, 2];
            let mut point = randn(&mut rng, 24);
            point.extend((0..3).map(|_| rng.random_range(0.5..1.5)));
            point.extend(randn(&mut rng, 3));
            let stats = RunningStats {
                mean: randn(&mut rng, 3),
                var: (0..3).map(|_| rng.random_range(0.5..2.0)).collect(),
                initialized: true,
            };
            let r = randn(&mut rng, 24);
            finite_diff_check(
                |p| {
                    let x = t(&shape, &p[..24])?;
                    let g = t(&[3], &p[24..27])?;
                    let b = t(&[3], &p[27..])?;
                    let mut st = stats.clone();
                    let (y, cache) = batchnorm2d(&x, &g, &b, &mut st, mode)?;
                    let grads = batchnorm2d_backward(&cache, &g, &t(&shape, &r)?)?;
                    let mut grad = grads.input.to_f64_vec();
                    grad.extend(grads.gamma.to_f64_vec());
                    grad.extend(grads.beta.to_f64_vec());
                    Ok((project(&y, &r), grad))
                },
                &point,
                eps,
            )
        }
        "avgpool_global" => {
            let shape = [2, 2, 3, 3];
            let point = randn(&mut rng, 36);
            let r = randn(&mut rng, 4);
            finite_diff_check(
                |p| {
                    let x = t(&shape, p)?;
                    let y = avgpool_global(&x)?;
                    let dx = avgpool_global_backward(&shape, &t(&[2, 2], &r)?)?;
                    Ok((project(&y, &r), dx.to_f64_vec()))
                },
                &point,
                eps,
            )
        }
        "fc" => {
            let point = randn(&mut rng, 4 * 5 + 3 * 5 + 3);
            let r = randn(&mut rng, 12);
            finite_diff_check(
                |p| {
                    let x = t(&[4, 5], &p[..20])?;
                    let w = t(&[3, 5], &p[20..35])?;
                    let b = t(&[3], &p[35..])?;
                    let y = fc(&x, &w, &b)?;
                    let g = fc_backward(&x, &w, &t(&[4, 3], &r)?)?;
                    let mut grad = g.input.to_f64_vec();
                    grad.extend(g.weight.to_f64_vec());
                    grad.extend(g.bias.to_f64_vec());
                    Ok((project(&y, &r), grad))
                },
                &point,
                eps,
            )
        }
        "softmax_xent" => {
            let point: Vec<f64> = randn(&mut rng, 15).into_iter().map(|v| 2.0 * v).collect();
            let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..3)).collect();
            finite_diff_check(
                |p| {
                    let l = t(&[5, 3], p)?;
                    let loss = softmax_xent(&l, &labels, None)?;
                    let g = softmax_xent_backward(&l, &labels, None, 1.0)?;
                    Ok((loss.data()[0], g.to_f64_vec()))
                },
                &point,
                eps,
            )
        }
        "smooth_l1" => {
            let mut point: Vec<f64> = randn(&mut rng, 16).into_iter().map(|v| 2.0 * v).collect();
            let target = randn(&mut rng, 16);
            // stay off the |x| = 1 kink
            for (p, tg) in point.iter_mut().zip(&target) {
                if ((*p - tg).abs() - 1.0).abs() <= 1e-3 {
                    *p += 0.01;
                }
            }
            let mask = [true, false, true, true];
            finite_diff_check(
                |p| {
                    let pr = t(&[4, 4], p)?;
                    let tg = t(&[4, 4], &target)?;
                    let loss = smooth_l1(&pr, &tg, &mask)?;
                    let g = smooth_l1_backward(&pr, &tg, &mask, 1.0)?;
                    Ok((loss.data()[0], g.to_f64_vec()))
                },
                &point,
                eps,
            )
        }
        "roi_pool" => {
            let shape = [1, 2, 8, 8];
            let point = separated(&mut rng, 128);
            let rois: Vec<RoiRef> = (0..3)
                .map(|_| {
                    let x1 = rng.random_range(0.0..20.0);
                    let y1 = rng.random_range(0.0..20.0);
                    RoiRef {
                        batch: 0,
                        bbox: BBox::new(x1, y1, x1 + rng.random_range(4.0..12.0), y1 + rng.random_range(4.0..12.0)),
                    }
                })
                .collect();
            let r = randn(&mut rng, 3 * 2 * 9);
            finite_diff_check(
                |p| {
                    let x = t(&shape, p)?;
                    let out = roi_pool(&x, &rois, (3, 3), 4)?;
                    let dx = roi_pool_backward(&shape, &out.argmax, &t(out.output.shape(), &r)?)?;
                    Ok((project(&out.output, &r), dx.to_f64_vec()))
                },
                &point,
                eps,
            )
        }
        other => Err(crate::error::ZipError::invalid("grad_check", format!("unknown op {other}"))),
    }
}

/// Runs every op in [`SUITE_OPS`] over `seeds` seeds.
pub fn run_suite(seeds: usize, fault: Fault) -> Result<Vec<OpReport>> {
    SUITE_OPS
        .iter()
        .map(|&op| {
            let mut worst: f64 = 0.0;
            for seed in 0..seeds as u64 {
                worst = worst.max(check_one(op, seed, fault)?);
            }
            Ok(OpReport {
                op,
                seeds,
                max_rel_error: worst,
                passed: worst < TOLERANCE,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let err = finite_diff_check(
            |p| Ok((3.0 * p[0] - 2.0 * p[1] + 0.5, vec![3.0, -2.0])),
            &[0.3, -1.2],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let err = finite_diff_check(|p| Ok((p[0] * p[0], vec![p[0]])), &[1.0], DEFAULT_EPS).unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn relu_fault_is_caught() {
        let reports = run_suite(1, Fault::ReluSignFlip).unwrap();
        let relu = reports.iter().find(|r| r.op == "relu").unwrap();
        assert!(!relu.passed);
    }
}
