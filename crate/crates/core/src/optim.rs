//! Bounded derivative-free maximization.
//!
//! Nelder–Mead over a box, with candidates projected onto the bounds and a
//! deterministic quasi-random (Halton) multistart to cope with multimodal
//! objectives. Coordinates whose lower and upper bounds coincide are frozen
//! and excluded from the search.

use crate::error::{Error, Result};

/// First 25 primes: Halton bases for up to 25 free coordinates.
const PRIMES: [u64; 25] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
    97,
];

/// Radical-inverse (Halton) sequence member in [0, 1).
fn halton(mut index: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while index > 0 {
        f /= base as f64;
        r += f * (index % base) as f64;
        index /= base;
    }
    r
}

#[derive(Clone, Debug)]
pub struct NelderMeadOptions {
    /// Restart count; the first start is the box midpoint, the rest follow
    /// the Halton sequence.
    pub restarts: usize,
    /// Iteration budget per restart.
    pub max_iters: usize,
    /// Convergence: maximum simplex edge length (∞-norm).
    pub diameter_tol: f64,
    /// Initial simplex edge as a fraction of each coordinate's span.
    pub initial_scale: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            restarts: 20,
            max_iters: 2000,
            diameter_tol: 1e-8,
            initial_scale: 0.15,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimResult {
    /// Best point found (full coordinates, frozen components included).
    pub x: Vec<f64>,
    pub value: f64,
    /// Total iterations across restarts.
    pub iterations: usize,
    /// Whether at least one restart met the diameter tolerance.
    pub converged: bool,
}

/// Maximizes `f` over the box, restarting from quasi-random interior points.
///
/// Deterministic: the restart schedule depends only on the bounds and
/// options. Errors if the bounds are malformed or the dimension exceeds the
/// available Halton bases.
pub fn maximize_in_box<F>(
    f: F,
    bounds: &[(f64, f64)],
    opts: &NelderMeadOptions,
) -> Result<OptimResult>
where
    F: Fn(&[f64]) -> f64,
{
    if bounds.is_empty() {
        return Err(Error::InvalidArgument("empty bounds".into()));
    }
    for &(lo, hi) in bounds {
        if !lo.is_finite() || !hi.is_finite() || lo > hi {
            return Err(Error::InvalidArgument(format!(
                "malformed bound ({lo}, {hi})"
            )));
        }
    }
    let free: Vec<usize> = bounds
        .iter()
        .enumerate()
        .filter(|(_, (lo, hi))| hi > lo)
        .map(|(i, _)| i)
        .collect();
    let frozen_base: Vec<f64> = bounds.iter().map(|&(lo, _)| lo).collect();
    if free.is_empty() {
        let value = f(&frozen_base);
        return Ok(OptimResult {
            x: frozen_base,
            value,
            iterations: 0,
            converged: true,
        });
    }
    if free.len() > PRIMES.len() {
        return Err(Error::InvalidArgument(format!(
            "{} free coordinates exceed the supported maximum {}",
            free.len(),
            PRIMES.len()
        )));
    }

    // Work in the free-coordinate subspace; embed for evaluation.
    let embed = |z: &[f64]| -> Vec<f64> {
        let mut x = frozen_base.clone();
        for (zi, &i) in z.iter().zip(&free) {
            x[i] = zi.clamp(bounds[i].0, bounds[i].1);
        }
        x
    };
    let eval = |z: &[f64]| f(&embed(z));

    let spans: Vec<f64> = free.iter().map(|&i| bounds[i].1 - bounds[i].0).collect();
    let d = free.len();
    let mut best_x: Option<Vec<f64>> = None;
    let mut best_v = f64::NEG_INFINITY;
    let mut iterations = 0;
    let mut converged = false;

    for restart in 0..opts.restarts.max(1) {
        let z0: Vec<f64> = free
            .iter()
            .enumerate()
            .map(|(j, &i)| {
                let u = if restart == 0 {
                    0.5
                } else {
                    halton(restart as u64, PRIMES[j])
                };
                bounds[i].0 + u * spans[j]
            })
            .collect();

        // Initial simplex: z0 plus a step along each free coordinate,
        // flipped if it would leave the box.
        let mut simplex: Vec<Vec<f64>> = vec![z0.clone()];
        for j in 0..d {
            let mut p = z0.clone();
            let step = opts.initial_scale * spans[j];
            let i = free[j];
            p[j] = if p[j] + step <= bounds[i].1 {
                p[j] + step
            } else {
                p[j] - step
            };
            simplex.push(p);
        }
        let mut values: Vec<f64> = simplex.iter().map(|z| eval(z)).collect();

        for _ in 0..opts.max_iters {
            iterations += 1;
            // Order descending by value (we maximize).
            let mut order: Vec<usize> = (0..=d).collect();
            order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap());
            let reorder_s: Vec<Vec<f64>> = order.iter().map(|&i| simplex[i].clone()).collect();
            let reorder_v: Vec<f64> = order.iter().map(|&i| values[i]).collect();
            simplex = reorder_s;
            values = reorder_v;

            let diameter = simplex[1..]
                .iter()
                .map(|p| {
                    p.iter()
                        .zip(&simplex[0])
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max)
                })
                .fold(0.0, f64::max);
            if diameter < opts.diameter_tol {
                converged = true;
                break;
            }

            // Centroid of all but the worst.
            let mut centroid = vec![0.0; d];
            for p in &simplex[..d] {
                for (c, x) in centroid.iter_mut().zip(p) {
                    *c += x / d as f64;
                }
            }
            let worst = simplex[d].clone();
            let worst_v = values[d];
            let lerp = |alpha: f64| -> Vec<f64> {
                centroid
                    .iter()
                    .zip(&worst)
                    .map(|(c, w)| c + alpha * (c - w))
                    .collect()
            };

            let reflected = lerp(1.0);
            let vr = eval(&reflected);
            if vr > values[0] {
                let expanded = lerp(2.0);
                let ve = eval(&expanded);
                if ve > vr {
                    simplex[d] = expanded;
                    values[d] = ve;
                } else {
                    simplex[d] = reflected;
                    values[d] = vr;
                }
            } else if vr > values[d - 1] {
                simplex[d] = reflected;
                values[d] = vr;
            } else {
                let contracted = if vr > worst_v { lerp(0.5) } else { lerp(-0.5) };
                let vc = eval(&contracted);
                if vc > worst_v.max(vr) {
                    simplex[d] = contracted;
                    values[d] = vc;
                } else {
                    // Shrink toward the best vertex.
                    for i in 1..=d {
                        let p: Vec<f64> = simplex[i]
                            .iter()
                            .zip(&simplex[0])
                            .map(|(x, b)| b + 0.5 * (x - b))
                            .collect();
                        values[i] = eval(&p);
                        simplex[i] = p;
                    }
                }
            }
        }

        let (restart_best, restart_v) = simplex
            .iter()
            .zip(&values)
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(p, v)| (p.clone(), *v))
            .unwrap();
        if restart_v > best_v {
            best_v = restart_v;
            best_x = Some(embed(&restart_best));
        }
    }

    Ok(OptimResult {
        x: best_x.unwrap(),
        value: best_v,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn quadratic_maximum_is_found_to_high_accuracy() {
        let f = |x: &[f64]| -(x[0] - 0.3) * (x[0] - 0.3);
        let r = maximize_in_box(f, &[(-1.0, 1.0)], &NelderMeadOptions::default()).unwrap();
        assert!(r.converged);
        assert_relative_eq!(r.x[0], 0.3, epsilon = 1e-6);
        assert!(r.value > -1e-12);
    }

    #[test]
    fn restarts_escape_local_maxima() {
        // sin(5x)sin(5y) on [0, π]²: many local maxima of height < 1 and
        // several global ones of height exactly 1.
        let f = |x: &[f64]| (5.0 * x[0]).sin() * (5.0 * x[1]).sin();
        let pi = std::f64::consts::PI;
        let bounds = [(0.0, pi), (0.0, pi)];
        let few = NelderMeadOptions {
            restarts: 1,
            ..Default::default()
        };
        let many = NelderMeadOptions::default();
        let r_many = maximize_in_box(f, &bounds, &many).unwrap();
        assert!((r_many.value - 1.0).abs() < 1e-9);
        // A single start from the midpoint lands on a stationary ridge of
        // lower value; the multistart is what finds the global maximum.
        let r_few = maximize_in_box(f, &bounds, &few).unwrap();
        assert!(r_few.value <= r_many.value + 1e-12);
    }

    #[test]
    fn frozen_coordinates_stay_put() {
        let f = |x: &[f64]| -((x[0] - 5.0) * (x[0] - 5.0)) - (x[1] - 0.5) * (x[1] - 0.5);
        let bounds = [(2.0, 2.0), (-1.0, 1.0)];
        let r = maximize_in_box(f, &bounds, &NelderMeadOptions::default()).unwrap();
        assert_eq!(r.x[0], 2.0);
        assert_relative_eq!(r.x[1], 0.5, epsilon = 1e-6);
    }

    #[test]
    fn fully_frozen_box_returns_the_point() {
        let f = |x: &[f64]| x[0] + x[1];
        let r = maximize_in_box(f, &[(1.0, 1.0), (2.0, 2.0)], &NelderMeadOptions::default())
            .unwrap();
        assert_eq!(r.x, vec![1.0, 2.0]);
        assert_eq!(r.value, 3.0);
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn boundary_maxima_are_reached() {
        let f = |x: &[f64]| x[0] + 0.5 * x[1];
        let r =
            maximize_in_box(f, &[(0.0, 1.0), (0.0, 1.0)], &NelderMeadOptions::default()).unwrap();
        assert_relative_eq!(r.x[0], 1.0, epsilon = 1e-6);
        assert_relative_eq!(r.x[1], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn malformed_bounds_are_rejected() {
        let f = |_: &[f64]| 0.0;
        assert!(maximize_in_box(f, &[], &NelderMeadOptions::default()).is_err());
        assert!(maximize_in_box(f, &[(1.0, 0.0)], &NelderMeadOptions::default()).is_err());
        assert!(
            maximize_in_box(f, &[(0.0, f64::INFINITY)], &NelderMeadOptions::default()).is_err()
        );
    }

    #[test]
    fn results_are_deterministic() {
        let f = |x: &[f64]| (3.0 * x[0]).sin() + (2.0 * x[1]).cos();
        let bounds = [(-2.0, 2.0), (-2.0, 2.0)];
        let a = maximize_in_box(f, &bounds, &NelderMeadOptions::default()).unwrap();
        let b = maximize_in_box(f, &bounds, &NelderMeadOptions::default()).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.value, b.value);
    }
}
