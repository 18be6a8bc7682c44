//! Mixture negative log-likelihood, the off-road penalty and their learned
//! uncertainty-weighted combination.
//!
//! Each loss comes in two forms: a plain function over points, and a tape form over
//! batched network outputs used for training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::scene::DrivableGrid;
use crate::tensor::{Tape, Tensor, Var};

/// Off-road counts above this are clamped before exponentiation.
pub const OFFROAD_CLAMP: f64 = 30.0;

/// Learned task uncertainties, `sigma_i = exp(log_sigma_i)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MultitaskWeights {
    pub log_sigma1: f64,
    pub log_sigma2: f64,
}

impl MultitaskWeights {
    pub fn sigma1(&self) -> f64 {
        self.log_sigma1.exp()
    }

    pub fn sigma2(&self) -> f64 {
        self.log_sigma2.exp()
    }
}

fn check_credibility(credibility: &[f64]) -> Result<()> {
    let sum: f64 = credibility.iter().sum();
    if credibility.iter().any(|&c| !(c > 0.0)) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!(
            "credibility must be positive and sum to 1, got {credibility:?}"
        )));
    }
    Ok(())
}

fn check_modes(truth: &[Point], preds: &[Vec<Point>]) -> Result<()> {
    if preds.is_empty() || truth.is_empty() {
        return Err(Error::invalid("empty prediction or ground truth"));
    }
    if let Some(p) = preds.iter().find(|p| p.len() != truth.len()) {
        return Err(Error::invalid(format!(
            "prediction horizon {} differs from ground truth horizon {}",
            p.len(),
            truth.len()
        )));
    }
    Ok(())
}

/// Total squared displacement between a mode and the ground truth.
fn squared_residual(truth: &[Point], mode: &[Point]) -> f64 {
    truth
        .iter()
        .zip(mode)
        .map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))
        .sum()
}

/// Mixture NLL under unit-variance Gaussians, evaluated with the log-sum-exp shift
/// `a* = max_k (log c_k - R_k / 2)`.
pub fn nll_mixture_loss(truth: &[Point], preds: &[Vec<Point>], credibility: &[f64]) -> Result<f64> {
    check_modes(truth, preds)?;
    if credibility.len() != preds.len() {
        return Err(Error::invalid(format!(
            "{} modes with {} credibilities",
            preds.len(),
            credibility.len()
        )));
    }
    check_credibility(credibility)?;
    let mut exps: Vec<f64> = preds
        .iter()
        .zip(credibility)
        .map(|(mode, &c)| c.ln() - 0.5 * squared_residual(truth, mode))
        .collect();
    // a fixed summation order makes the result exactly invariant to mode order
    exps.sort_by(|a, b| b.total_cmp(a));
    let a = exps[0];
    let sum: f64 = exps.iter().map(|e| (e - a).exp()).sum();
    Ok(-a - sum.ln())
}

/// Mean mixture NLL over a batch.
///
/// `positions` is `[B, K, H, 2]`, `logits` are credibility logits `[B, K]` and
/// `truth` is `[B, H, 2]`. Credibility enters through a log-softmax of the logits.
pub fn nll_mixture_tape(tape: &mut Tape, positions: Var, logits: Var, truth: &Tensor) -> Result<Var> {
    let s = tape.shape(positions).to_vec();
    if s.len() != 4 || s[3] != 2 || truth.shape() != [s[0], s[2], 2] || tape.shape(logits) != [s[0], s[1]] {
        return Err(Error::shape("nll_mixture_tape", &s, truth.shape()));
    }
    let (b, k, h) = (s[0], s[1], s[2]);
    let per = h * 2;
    let tiled = Tensor::from_fn(&s, |i| {
        let bi = i / (k * per);
        truth.data()[bi * per + i % per]
    });
    let t = tape.constant(tiled);
    let diff = tape.sub(positions, t)?;
    let sq = tape.square(diff);
    let per_step = tape.sum_axis(sq, 3)?;
    let r = tape.sum_axis(per_step, 2)?;
    let half = tape.scale(r, -0.5);
    let log_c = tape.log_softmax(logits)?;
    let exps = tape.add(half, log_c)?;
    let lse = tape.logsumexp(exps)?;
    debug_assert_eq!(tape.shape(lse), [b]);
    let m = tape.mean(lse);
    Ok(tape.scale(m, -1.0))
}

/// Number of waypoints over all modes that fall off the drivable area.
pub fn offroad_count(preds: &[Vec<Point>], grid: &DrivableGrid) -> usize {
    preds.iter().flatten().filter(|&&p| grid.is_offroad(p)).count()
}

/// Off-road count together with the loss value derived from it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OffroadLoss {
    pub count: usize,
    pub value: f64,
}

/// `exp(count)` with the count clamped at [`OFFROAD_CLAMP`]. With `normalized` the
/// loss is instead the fraction `count / (K * H)` of off-road waypoints.
pub fn offroad_loss(preds: &[Vec<Point>], grid: &DrivableGrid, normalized: bool) -> OffroadLoss {
    let count = offroad_count(preds, grid);
    let value = if normalized {
        let total = preds.iter().map(Vec::len).sum::<usize>().max(1);
        count as f64 / total as f64
    } else {
        (count as f64).min(OFFROAD_CLAMP).exp()
    };
    OffroadLoss { count, value }
}

/// Surrogate gradient of [`offroad_loss`] with respect to each waypoint.
///
/// Every off-road waypoint gets a unit vector pointing away from the center of its
/// nearest free cell, so that descent moves it toward that center, scaled by the
/// derivative of the loss with respect to the count: `exp(min(count, 30))`, or
/// `1 / (K * H)` when normalized. On-road waypoints get zero. A grid without any
/// free cell yields zero everywhere.
pub fn straight_through_offroad_gradient(
    preds: &[Vec<Point>],
    grid: &DrivableGrid,
    normalized: bool,
) -> Vec<Vec<Point>> {
    let loss = offroad_loss(preds, grid, normalized);
    let scale = if normalized {
        1.0 / preds.iter().map(Vec::len).sum::<usize>().max(1) as f64
    } else {
        loss.value
    };
    let mut warned = false;
    preds
        .iter()
        .map(|mode| {
            mode.iter()
                .map(|&p| {
                    if !grid.is_offroad(p) {
                        return [0.0, 0.0];
                    }
                    let Some(c) = grid.nearest_free_center(p) else {
                        if !warned {
                            log::warn!("no drivable cell in grid; off-road gradient is zero");
                            warned = true;
                        }
                        return [0.0, 0.0];
                    };
                    let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
                    let norm = dx.hypot(dy);
                    if norm == 0.0 {
                        [0.0, 0.0]
                    } else {
                        [scale * dx / norm, scale * dy / norm]
                    }
                })
                .collect()
        })
        .collect()
}

/// Mean off-road loss over a batch of `[B, K, H, 2]` positions, one grid per sample.
///
/// The node carries the surrogate gradient. Also returns the per-sample counts.
pub fn offroad_tape(
    tape: &mut Tape,
    positions: Var,
    grids: &[&DrivableGrid],
    normalized: bool,
) -> Result<(Var, Vec<usize>)> {
    let s = tape.shape(positions).to_vec();
    if s.len() != 4 || s[3] != 2 || s[0] != grids.len() {
        return Err(Error::shape("offroad_tape", &s, &[grids.len()]));
    }
    let (b, k, h) = (s[0], s[1], s[2]);
    let data = tape.value(positions).data();
    let mut grad = Vec::with_capacity(data.len());
    let mut counts = Vec::with_capacity(b);
    let mut total = 0.0;
    for (bi, grid) in grids.iter().enumerate() {
        let modes: Vec<Vec<Point>> = (0..k)
            .map(|m| {
                (0..h)
                    .map(|t| {
                        let o = ((bi * k + m) * h + t) * 2;
                        [data[o], data[o + 1]]
                    })
                    .collect()
            })
            .collect();
        let loss = offroad_loss(&modes, grid, normalized);
        total += loss.value;
        counts.push(loss.count);
        let g = straight_through_offroad_gradient(&modes, grid, normalized);
        grad.extend(g.iter().flatten().flat_map(|p| [p[0] / b as f64, p[1] / b as f64]));
    }
    let node = tape.custom_scalar(positions, total / b as f64, Tensor::new(&s, grad)?)?;
    Ok((node, counts))
}

/// `L_c / sigma1^2 + L_o / sigma2^2 + ln(sigma1 + 1) + ln(sigma2 + 1)`.
///
/// Without an off-road term only the first task and its regularizer remain.
pub fn multitask_loss(l_c: f64, l_o: Option<f64>, w: &MultitaskWeights) -> f64 {
    let mut total = l_c * (-2.0 * w.log_sigma1).exp() + (w.sigma1() + 1.0).ln();
    if let Some(l_o) = l_o {
        total += l_o * (-2.0 * w.log_sigma2).exp() + (w.sigma2() + 1.0).ln();
    }
    total
}

fn weighted_term(tape: &mut Tape, loss: Var, log_sigma: Var) -> Result<Var> {
    let inv_var = {
        let s = tape.scale(log_sigma, -2.0);
        tape.exp(s)
    };
    let weighted = tape.mul(loss, inv_var)?;
    let sigma = tape.exp(log_sigma);
    let shifted = tape.add_scalar(sigma, 1.0);
    let reg = tape.log(shifted);
    tape.add(weighted, reg)
}

/// Tape form of [`multitask_loss`]; all inputs are scalars.
pub fn multitask_tape(tape: &mut Tape, l_c: Var, l_o: Option<Var>, log_sigma1: Var, log_sigma2: Var) -> Result<Var> {
    let first = weighted_term(tape, l_c, log_sigma1)?;
    match l_o {
        Some(l_o) => {
            let second = weighted_term(tape, l_o, log_sigma2)?;
            tape.add(first, second)
        }
        None => Ok(first),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Polygon;
    use crate::tensor::check_gradient;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct evaluation: `-ln sum_k c_k prod_t N(x_t | mu_kt, I)` without the 2*pi
    /// normalizers, which the closed form drops.
    fn naive_nll(truth: &[Point], preds: &[Vec<Point>], cred: &[f64]) -> f64 {
        let mut sum = 0.0;
        for (mode, &c) in preds.iter().zip(cred) {
            let mut density = 1.0;
            for (a, b) in truth.iter().zip(mode) {
                let dx = a[0] - b[0];
                let dy = a[1] - b[1];
                density *= (-0.5 * dx * dx).exp() * (-0.5 * dy * dy).exp();
            }
            sum += c * density;
        }
        -sum.ln()
    }

    fn random_instance(
        rng: &mut ChaCha8Rng,
        k: usize,
        h: usize,
        spread: f64,
    ) -> (Vec<Point>, Vec<Vec<Point>>, Vec<f64>) {
        let truth: Vec<Point> = (0..h)
            .map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)])
            .collect();
        let preds = (0..k)
            .map(|_| {
                truth
                    .iter()
                    .map(|p| {
                        [
                            p[0] + rng.gen_range(-spread..spread),
                            p[1] + rng.gen_range(-spread..spread),
                        ]
                    })
                    .collect()
            })
            .collect();
        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        (truth, preds, raw.iter().map(|r| r / total).collect())
    }

    #[test]
    fn closed_form_examples() {
        let truth = vec![[0.0, 0.0], [1.0, 1.0]];
        assert_eq!(
            nll_mixture_loss(&truth, std::slice::from_ref(&truth), &[1.0]).unwrap(),
            0.0
        );
        let off = vec![[1.0, 0.0], [1.0, 2.0]];
        assert!((nll_mixture_loss(&truth, &[off], &[1.0]).unwrap() - 1.0).abs() < 1e-15);
        let far = vec![[1e3, 0.0], [1e3, 0.0]];
        let l = nll_mixture_loss(&truth, &[truth.clone(), far], &[0.5, 0.5]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l - naive_nll(&truth, &[truth.clone(), vec![[1e3, 0.0]; 2]], &[0.5, 0.5])).abs() < 1e-12);
    }

    #[test]
    fn matches_naive_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let k = rng.gen_range(1..5);
            let (truth, preds, cred) = random_instance(&mut rng, k, 6, 2.0);
            let naive = naive_nll(&truth, &preds, &cred);
            assert!(naive.is_finite());
            let fast = nll_mixture_loss(&truth, &preds, &cred).unwrap();
            assert!(
                (fast - naive).abs() <= 1e-10 * naive.abs().max(1e-300),
                "{fast} vs {naive}"
            );
        }
    }

    #[test]
    fn stays_finite_where_naive_overflows() {
        let truth = vec![[0.0, 0.0]; 50];
        let preds = vec![vec![[1e3, 1e3]; 50], vec![[-1e3, 1e3]; 50]];
        assert!(!naive_nll(&truth, &preds, &[0.5, 0.5]).is_finite());
        let l = nll_mixture_loss(&truth, &preds, &[0.5, 0.5]).unwrap();
        assert!((l - (0.5 * 50.0 * 2e6)).abs() < 1e-6);
    }

    #[test]
    fn unnormalized_credibility_is_rejected() {
        let t = vec![[0.0, 0.0]];
        assert!(nll_mixture_loss(&t, &[t.clone(), t.clone()], &[0.5, 0.6]).is_err());
        assert!(nll_mixture_loss(&t, &[t.clone(), t.clone()], &[1.0, 0.0]).is_err());
        assert!(nll_mixture_loss(&t, &[vec![[0.0, 0.0]; 2]], &[1.0]).is_err());
    }

    #[test]
    fn tape_matches_plain_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (b, k, h) = (3, 2, 4);
        let positions = Tensor::randn(&[b, k, h, 2], 1.5, &mut rng);
        let logits = Tensor::randn(&[b, k], 1.0, &mut rng);
        let truth = Tensor::randn(&[b, h, 2], 1.5, &mut rng);
        let mut tape = Tape::new();
        let p = tape.constant(positions.clone());
        let l = tape.constant(logits.clone());
        let out = nll_mixture_tape(&mut tape, p, l, &truth).unwrap();
        let cred = crate::tensor::softmax_rows(&logits).unwrap();
        let mut expected = 0.0;
        for bi in 0..b {
            let t: Vec<Point> = (0..h).map(|i| [truth.at(&[bi, i, 0]), truth.at(&[bi, i, 1])]).collect();
            let modes: Vec<Vec<Point>> = (0..k)
                .map(|m| {
                    (0..h)
                        .map(|i| [positions.at(&[bi, m, i, 0]), positions.at(&[bi, m, i, 1])])
                        .collect()
                })
                .collect();
            expected += nll_mixture_loss(&t, &modes, &cred.data()[bi * k..(bi + 1) * k]).unwrap();
        }
        assert!((tape.value(out).item() - expected / b as f64).abs() < 1e-12);
    }

    #[test]
    fn tape_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth = Tensor::randn(&[2, 3, 2], 1.0, &mut rng);
            let params = [
                Tensor::randn(&[2, 3, 3, 2], 1.0, &mut rng),
                Tensor::randn(&[2, 3], 1.0, &mut rng),
            ];
            let report = check_gradient(|t, v| nll_mixture_tape(t, v[0], v[1], &truth), &params, 1e-5).unwrap();
            assert!(report.max_rel_diff < 1e-4, "seed {seed}: {report:?}");
        }
    }

    fn half_plane_grid() -> DrivableGrid {
        // drivable for y >= 0 over a 10 x 10 grid of 1 m cells centered at the origin
        let poly = Polygon::rectangle([-5.0, 0.0], [5.0, 5.0]);
        DrivableGrid::from_polygons(&[poly], [-5.0, -5.0], 1.0, 10, 10).unwrap()
    }

    #[test]
    fn offroad_examples() {
        let grid = half_plane_grid();
        let on = vec![vec![[0.3, 1.2], [2.5, 3.5]]];
        assert_eq!(offroad_loss(&on, &grid, false), OffroadLoss { count: 0, value: 1.0 });
        let one = vec![vec![[0.3, 1.2], [2.5, -3.5]]];
        let l = offroad_loss(&one, &grid, false);
        assert_eq!(l.count, 1);
        assert!((l.value - std::f64::consts::E).abs() < 1e-15);
        assert_eq!(offroad_loss(&one, &grid, true).value, 0.5);
        let all = vec![vec![[0.5, -2.5]; 50]; 3];
        let l = offroad_loss(&all, &grid, false);
        assert_eq!(l.count, 150);
        assert_eq!(l.value, 30f64.exp());
    }

    #[test]
    fn count_matches_brute_force_over_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = half_plane_grid();
        for _ in 0..50 {
            let preds: Vec<Vec<Point>> = (0..3)
                .map(|_| {
                    (0..5)
                        .map(|_| [rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0)])
                        .collect()
                })
                .collect();
            let mut brute = 0;
            for p in preds.iter().flatten() {
                let (lo, hi) = grid.extent();
                let outside = !(p[0] >= lo[0] && p[0] <= hi[0] && p[1] >= lo[1] && p[1] <= hi[1]);
                let mut inside_blocked = false;
                for r in 0..grid.rows {
                    for c in 0..grid.cols {
                        if grid.is_blocked(r, c) && crate::geometry::point_in_cell(*p, &grid.cell(r, c)) {
                            inside_blocked = true;
                        }
                    }
                }
                if outside || inside_blocked {
                    brute += 1;
                }
            }
            assert_eq!(offroad_count(&preds, &grid), brute);
        }
    }

    #[test]
    fn surrogate_points_toward_free_cell() {
        let grid = half_plane_grid();
        let on = vec![vec![[0.3, 1.2]]];
        assert_eq!(
            straight_through_offroad_gradient(&on, &grid, false),
            vec![vec![[0.0, 0.0]]]
        );
        let p = [0.5, -2.5];
        let g = straight_through_offroad_gradient(&[vec![p, [0.3, 1.2]]], &grid, false);
        let c = grid.nearest_free_center(p).unwrap();
        assert!(!grid.is_offroad(c) && c[1] > 0.0);
        // descent direction -g points at the free center
        let (dx, dy) = (c[0] - p[0], c[1] - p[1]);
        let n = dx.hypot(dy);
        let scale = std::f64::consts::E;
        assert!((-g[0][0][0] - scale * dx / n).abs() < 1e-12 && (-g[0][0][1] - scale * dy / n).abs() < 1e-12);
        assert_eq!(g[0][1], [0.0, 0.0]);
    }

    #[test]
    fn surrogate_magnitude_grows_with_count() {
        let grid = half_plane_grid();
        for count in 1..6usize {
            let preds = vec![vec![[0.5, -2.5]; count]];
            let g = straight_through_offroad_gradient(&preds, &grid, false);
            let mag = g[0][0][0].hypot(g[0][0][1]);
            assert!((mag - (count as f64).exp()).abs() < 1e-9 * mag);
        }
    }

    #[test]
    fn fully_blocked_grid_gives_zero_gradient() {
        let grid = DrivableGrid::from_polygons(&[], [0.0, 0.0], 1.0, 4, 4).unwrap();
        let g = straight_through_offroad_gradient(&[vec![[1.5, 1.5]]], &grid, false);
        assert_eq!(g, vec![vec![[0.0, 0.0]]]);
    }

    #[test]
    fn offroad_tape_carries_surrogate() {
        let grid = half_plane_grid();
        let pos = Tensor::new(&[2, 1, 2, 2], vec![0.5, -2.5, 0.3, 1.2, 0.3, 1.2, 0.3, 1.2]).unwrap();
        let mut tape = Tape::new();
        let p = tape.param(pos);
        let (loss, counts) = offroad_tape(&mut tape, p, &[&grid, &grid], false).unwrap();
        assert_eq!(counts, vec![1, 0]);
        assert!((tape.value(loss).item() - (std::f64::consts::E + 1.0) / 2.0).abs() < 1e-12);
        let g = tape.backward(loss);
        let gp = g.get(p).unwrap();
        let single = straight_through_offroad_gradient(&[vec![[0.5, -2.5]]], &grid, false)[0][0];
        assert!((gp.data()[0] - single[0] / 2.0).abs() < 1e-12);
        assert!((gp.data()[1] - single[1] / 2.0).abs() < 1e-12);
        assert!(gp.data()[2..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn multitask_example() {
        let l = multitask_loss(2.0, Some(1.0), &MultitaskWeights::default());
        assert!((l - 4.386294).abs() < 1e-6);
        assert!((multitask_loss(2.0, None, &MultitaskWeights::default()) - (2.0 + 2f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn multitask_has_interior_minimum_in_sigma() {
        let (l_c, l_o) = (3.0, 0.7);
        let values: Vec<f64> = (0..2000)
            .map(|i| {
                let s = -5.0 + i as f64 * 0.01;
                multitask_loss(
                    l_c,
                    Some(l_o),
                    &MultitaskWeights {
                        log_sigma1: s,
                        log_sigma2: s,
                    },
                )
            })
            .collect();
        let argmin = (0..values.len())
            .min_by(|&a, &b| values[a].total_cmp(&values[b]))
            .unwrap();
        assert!(argmin > 0 && argmin < values.len() - 1);
        assert!(values[..argmin].windows(2).all(|w| w[1] <= w[0]));
        assert!(values[argmin..].windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn multitask_tape_gradients() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params: Vec<Tensor> = [
                rng.gen_range(0.1..5.0),
                rng.gen_range(0.1..5.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]
            .map(Tensor::scalar)
            .to_vec();
            let value = {
                let mut tape = Tape::new();
                let v: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
                let out = multitask_tape(&mut tape, v[0], Some(v[1]), v[2], v[3]).unwrap();
                tape.value(out).item()
            };
            let w = MultitaskWeights {
                log_sigma1: params[2].item(),
                log_sigma2: params[3].item(),
            };
            assert!((value - multitask_loss(params[0].item(), Some(params[1].item()), &w)).abs() < 1e-12);
            let report = check_gradient(|t, v| multitask_tape(t, v[0], Some(v[1]), v[2], v[3]), &params, 1e-5).unwrap();
            assert!(report.max_rel_diff < 1e-6, "seed {seed}: {report:?}");
        }
    }

    proptest! {
        #[test]
        fn larger_residual_never_lowers_loss(seed in 0u64..10_000, mode in 0usize..3, step in 0usize..4, axis in 0usize..2, extra in 0.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (truth, preds, cred) = random_instance(&mut rng, 3, 4, 3.0);
            let base = nll_mixture_loss(&truth, &preds, &cred).unwrap();
            let mut moved = preds.clone();
            let r = moved[mode][step][axis] - truth[step][axis];
            moved[mode][step][axis] += extra * if r >= 0.0 { 1.0 } else { -1.0 };
            prop_assert!(nll_mixture_loss(&truth, &moved, &cred).unwrap() >= base);
        }

        #[test]
        fn mode_permutation_leaves_loss_unchanged(seed in 0u64..10_000, rot in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (truth, mut preds, mut cred) = random_instance(&mut rng, 4, 5, 2.0);
            let base = nll_mixture_loss(&truth, &preds, &cred).unwrap();
            preds.rotate_left(rot);
            cred.rotate_left(rot);
            let permuted = nll_mixture_loss(&truth, &preds, &cred).unwrap();
            prop_assert_eq!(permuted, base);
        }
    }
}
