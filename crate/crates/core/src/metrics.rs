//! Displacement metrics over the most credible modes and the off-road rate.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::model::PredictionSet;
use crate::scene::{AgentId, DrivableGrid};

/// Mode counts reported in a [`MetricsTable`].
pub const TABLE_K: [usize; 3] = [1, 3, 6];
/// Mode count of the reported off-road rate.
pub const OFFROAD_K: usize = 3;

/// One predicted agent with its ground truth and the grid for off-road checks.
#[derive(Clone, Debug)]
pub struct EvalRecord {
    pub scene_id: String,
    pub agent_id: AgentId,
    pub truth: Vec<Point>,
    pub prediction: PredictionSet,
    pub grid: Arc<DrivableGrid>,
}

impl EvalRecord {
    pub fn validate(&self) -> Result<()> {
        self.prediction.validate()?;
        if self.truth.len() != self.prediction.horizon() {
            return Err(Error::invalid(format!(
                "{}/{}: truth has {} steps, prediction {}",
                self.scene_id,
                self.agent_id,
                self.truth.len(),
                self.prediction.horizon()
            )));
        }
        Ok(())
    }
}

fn top_modes<'a>(truth: &[Point], pred: &'a PredictionSet, k_eval: usize) -> Result<Vec<&'a [Point]>> {
    if k_eval == 0 || k_eval > pred.modes() {
        return Err(Error::invalid(format!(
            "K_eval = {k_eval} with {} predicted modes",
            pred.modes()
        )));
    }
    if truth.len() != pred.horizon() {
        return Err(Error::invalid(format!(
            "truth has {} steps, prediction {}",
            truth.len(),
            pred.horizon()
        )));
    }
    Ok(pred.ranked()[..k_eval]
        .iter()
        .map(|&m| pred.trajectories[m].as_slice())
        .collect())
}

fn dist(a: Point, b: Point) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    (dx * dx + dy * dy).sqrt()
}

/// Smallest mean displacement among the `k_eval` most credible modes.
pub fn min_ade(truth: &[Point], pred: &PredictionSet, k_eval: usize) -> Result<f64> {
    let n = truth.len() as f64;
    Ok(top_modes(truth, pred, k_eval)?
        .into_iter()
        .map(|mode| truth.iter().zip(mode).map(|(&a, &b)| dist(a, b)).sum::<f64>() / n)
        .fold(f64::INFINITY, f64::min))
}

/// Smallest final-step displacement among the `k_eval` most credible modes.
pub fn min_fde(truth: &[Point], pred: &PredictionSet, k_eval: usize) -> Result<f64> {
    let last = *truth.last().ok_or_else(|| Error::invalid("empty ground truth"))?;
    Ok(top_modes(truth, pred, k_eval)?
        .into_iter()
        .map(|mode| dist(last, mode[mode.len() - 1]))
        .fold(f64::INFINITY, f64::min))
}

/// Fraction of off-road waypoints among the `k_eval` most credible modes of one record.
pub fn record_offroad_rate(record: &EvalRecord, k_eval: usize) -> Result<f64> {
    let modes = top_modes(&record.truth, &record.prediction, k_eval)?;
    let total = modes.iter().map(|m| m.len()).sum::<usize>();
    let off = modes
        .iter()
        .flat_map(|m| m.iter())
        .filter(|&&p| record.grid.is_offroad(p))
        .count();
    Ok(off as f64 / total as f64)
}

/// Per-record off-road fractions averaged over records.
pub fn offroad_rate(records: &[EvalRecord], k_eval: usize) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid("no records to evaluate"));
    }
    let rates = records
        .iter()
        .map(|r| record_offroad_rate(r, k_eval))
        .collect::<Result<Vec<_>>>()?;
    Ok(rates.iter().sum::<f64>() / records.len() as f64)
}

/// Instance-averaged metrics of one evaluation run.
///
/// Mode counts above a model's K are evaluated at K.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsTable {
    #[serde(rename = "minADE_1")]
    pub min_ade_1: f64,
    #[serde(rename = "minADE_3")]
    pub min_ade_3: f64,
    #[serde(rename = "minADE_6")]
    pub min_ade_6: f64,
    #[serde(rename = "minFDE_1")]
    pub min_fde_1: f64,
    #[serde(rename = "minFDE_3")]
    pub min_fde_3: f64,
    #[serde(rename = "minFDE_6")]
    pub min_fde_6: f64,
    #[serde(rename = "offroad_rate_3")]
    pub offroad_rate_3: f64,
    pub instances: usize,
}

/// Metrics of a single record, indexed like [`TABLE_K`].
#[derive(Clone, Debug, PartialEq)]
pub struct RecordMetrics {
    pub min_ade: [f64; 3],
    pub min_fde: [f64; 3],
    pub offroad_rate: f64,
}

pub fn record_metrics(record: &EvalRecord) -> Result<RecordMetrics> {
    record.validate()?;
    let k = record.prediction.modes();
    let mut min_ade_k = [0.0; 3];
    let mut min_fde_k = [0.0; 3];
    for (i, &want) in TABLE_K.iter().enumerate() {
        min_ade_k[i] = min_ade(&record.truth, &record.prediction, want.min(k))?;
        min_fde_k[i] = min_fde(&record.truth, &record.prediction, want.min(k))?;
    }
    Ok(RecordMetrics {
        min_ade: min_ade_k,
        min_fde: min_fde_k,
        offroad_rate: record_offroad_rate(record, OFFROAD_K.min(k))?,
    })
}

/// Averages per-record metrics. Records are reduced in `(scene_id, agent_id)` order
/// so the result does not depend on input order or thread count.
pub fn evaluate_dataset(records: &[EvalRecord]) -> Result<MetricsTable> {
    if records.is_empty() {
        return Err(Error::invalid("no records to evaluate"));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        (&records[a].scene_id, records[a].agent_id).cmp(&(&records[b].scene_id, records[b].agent_id))
    });
    let per: Vec<RecordMetrics> = order
        .par_iter()
        .map(|&i| record_metrics(&records[i]))
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let mean = |f: &dyn Fn(&RecordMetrics) -> f64| per.iter().map(f).sum::<f64>() / n;
    Ok(MetricsTable {
        min_ade_1: mean(&|r| r.min_ade[0]),
        min_ade_3: mean(&|r| r.min_ade[1]),
        min_ade_6: mean(&|r| r.min_ade[2]),
        min_fde_1: mean(&|r| r.min_fde[0]),
        min_fde_3: mean(&|r| r.min_fde[1]),
        min_fde_6: mean(&|r| r.min_fde[2]),
        offroad_rate_3: mean(&|r| r.offroad_rate),
        instances: per.len(),
    })
}

impl MetricsTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid(format!("metrics table: {e}")))
    }

    /// `(name, value)` rows in display order.
    pub fn rows(&self) -> [(&'static str, f64); 7] {
        [
            ("minADE_1", self.min_ade_1),
            ("minADE_3", self.min_ade_3),
            ("minADE_6", self.min_ade_6),
            ("minFDE_1", self.min_fde_1),
            ("minFDE_3", self.min_fde_3),
            ("minFDE_6", self.min_fde_6),
            ("offroad_rate_3", self.offroad_rate_3),
        ]
    }
}

impl fmt::Display for MetricsTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16}{:>12}", "metric", "value")?;
        for (name, v) in self.rows() {
            writeln!(f, "{name:<16}{v:>12.4}")?;
        }
        write!(f, "{:<16}{:>12}", "instances", self.instances)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Polygon;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn open_grid() -> DrivableGrid {
        DrivableGrid::from_polygons(
            &[Polygon::rectangle([-50.0, -50.0], [50.0, 50.0])],
            [-50.0, -50.0],
            1.0,
            100,
            100,
        )
        .unwrap()
    }

    /// Drivable for y >= 0 on [-5, 5]^2.
    fn half_grid() -> DrivableGrid {
        DrivableGrid::from_polygons(
            &[Polygon::rectangle([-5.0, 0.0], [5.0, 5.0])],
            [-5.0, -5.0],
            1.0,
            10,
            10,
        )
        .unwrap()
    }

    fn record(truth: Vec<Point>, trajectories: Vec<Vec<Point>>, cred: Vec<f64>, grid: DrivableGrid) -> EvalRecord {
        EvalRecord {
            scene_id: "s".into(),
            agent_id: 1,
            truth,
            prediction: PredictionSet::new(trajectories, cred).unwrap(),
            grid: Arc::new(grid),
        }
    }

    #[test]
    fn displacement_examples() {
        let truth: Vec<Point> = (0..5).map(|t| [t as f64, 0.0]).collect();
        let exact = PredictionSet::new(vec![truth.clone()], vec![1.0]).unwrap();
        assert_eq!(min_ade(&truth, &exact, 1).unwrap(), 0.0);
        let shifted: Vec<Point> = truth.iter().map(|p| [p[0] + 3.0, p[1] + 4.0]).collect();
        let pred = PredictionSet::new(vec![shifted], vec![1.0]).unwrap();
        assert_eq!(min_ade(&truth, &pred, 1).unwrap(), 5.0);
        let far: Vec<Point> = truth.iter().map(|p| [p[0], p[1] + 5.0]).collect();
        let near: Vec<Point> = truth.iter().map(|p| [p[0], p[1] - 1.0]).collect();
        let two = PredictionSet::new(vec![far, near], vec![0.6, 0.4]).unwrap();
        assert_eq!(min_ade(&truth, &two, 2).unwrap(), 1.0);
        assert_eq!(min_ade(&truth, &two, 1).unwrap(), 5.0);
        let mut end = truth.clone();
        end[4][1] += 2.0;
        end[1][0] += 7.0;
        let p = PredictionSet::new(vec![end], vec![1.0]).unwrap();
        assert_eq!(min_fde(&truth, &p, 1).unwrap(), 2.0);
        assert!(min_ade(&truth, &p, 2).is_err());
        assert!(min_ade(&truth[..3], &p, 1).is_err());
    }

    #[test]
    fn offroad_examples() {
        let on = vec![[0.5, 0.5], [1.5, 2.5]];
        let r = record(on.clone(), vec![on.clone(), on.clone()], vec![0.5, 0.5], half_grid());
        assert_eq!(offroad_rate(&[r], 2).unwrap(), 0.0);
        let one = vec![[0.5, 0.5], [1.5, -2.5]];
        let r = record(on.clone(), vec![on.clone(), one], vec![0.5, 0.5], half_grid());
        assert_eq!(offroad_rate(&[r], 2).unwrap(), 0.25);
        let off = vec![[0.5, -0.5], [1.5, -2.5]];
        let r = record(on, vec![off.clone(), off], vec![0.5, 0.5], half_grid());
        assert_eq!(offroad_rate(&[r], 2).unwrap(), 1.0);
        assert!(offroad_rate(&[], 1).is_err());
    }

    #[test]
    fn duplicated_records_give_same_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let truth: Vec<Point> = (0..6)
            .map(|_| [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)])
            .collect();
        let modes: Vec<Vec<Point>> = (0..6)
            .map(|_| truth.iter().map(|p| [p[0] + rng.gen_range(-1.0..1.0), p[1]]).collect())
            .collect();
        let r = record(truth, modes, vec![1.0 / 6.0; 6], half_grid());
        let single = evaluate_dataset(std::slice::from_ref(&r)).unwrap();
        let many = evaluate_dataset(&vec![r; 10]).unwrap();
        assert_eq!(single.instances, 1);
        assert_eq!(many.instances, 10);
        for (a, b) in single.rows().iter().zip(many.rows()) {
            assert!((a.1 - b.1).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_predictor_scores_zero() {
        let truth: Vec<Point> = (0..4).map(|t| [t as f64, 1.0]).collect();
        let r = record(truth.clone(), vec![truth.clone(); 3], vec![0.2, 0.5, 0.3], open_grid());
        let t = evaluate_dataset(&[r]).unwrap();
        assert_eq!(t.rows()[..6].iter().map(|r| r.1).sum::<f64>(), 0.0);
        assert_eq!(t.offroad_rate_3, 0.0);
        assert!(evaluate_dataset(&[]).is_err());
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let t = MetricsTable {
            min_ade_1: 0.1 + 0.2,
            min_ade_3: 1.0 / 3.0,
            min_ade_6: 2.0f64.sqrt(),
            min_fde_1: 1e-17,
            min_fde_3: 123456.789,
            min_fde_6: 0.0,
            offroad_rate_3: 0.07,
            instances: 42,
        };
        assert_eq!(MetricsTable::from_json(&t.to_json()).unwrap(), t);
        assert!(MetricsTable::from_json("{\"minADE_1\": 1}").is_err());
        assert!(t.to_string().contains("offroad_rate_3"));
    }

    #[test]
    fn reduction_is_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut recs: Vec<EvalRecord> = (0..12)
            .map(|i| {
                let truth: Vec<Point> = (0..3)
                    .map(|_| [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)])
                    .collect();
                let modes = (0..3)
                    .map(|_| {
                        truth
                            .iter()
                            .map(|p| [p[0] + rng.gen_range(-2.0..2.0), p[1] + rng.gen::<f64>()])
                            .collect()
                    })
                    .collect();
                EvalRecord {
                    scene_id: format!("s{i:03}"),
                    ..record(truth, modes, vec![0.2, 0.3, 0.5], half_grid())
                }
            })
            .collect();
        let a = evaluate_dataset(&recs).unwrap();
        recs.reverse();
        assert_eq!(evaluate_dataset(&recs).unwrap(), a);
    }

    fn rotate(p: Point, a: f64, t: Point) -> Point {
        let (s, c) = a.sin_cos();
        [c * p[0] - s * p[1] + t[0], s * p[0] + c * p[1] + t[1]]
    }

    proptest! {
        #[test]
        fn metrics_non_increasing_in_k(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth: Vec<Point> = (0..5).map(|_| [rng.gen_range(-9.0..9.0), rng.gen_range(-9.0..9.0)]).collect();
            let modes: Vec<Vec<Point>> = (0..6)
                .map(|_| truth.iter().map(|p| [p[0] + rng.gen_range(-3.0..3.0), p[1] + rng.gen_range(-3.0..3.0)]).collect())
                .collect();
            let raw: Vec<f64> = (0..6).map(|_| rng.gen_range(0.1..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let pred = PredictionSet::new(modes, raw.iter().map(|r| r / s).collect()).unwrap();
            for k in 1..6 {
                prop_assert!(min_ade(&truth, &pred, k + 1).unwrap() <= min_ade(&truth, &pred, k).unwrap());
                prop_assert!(min_fde(&truth, &pred, k + 1).unwrap() <= min_fde(&truth, &pred, k).unwrap());
            }
            let best = min_ade(&truth, &pred, 6).unwrap();
            let max_step = pred.trajectories.iter()
                .map(|m| m.iter().zip(&truth).map(|(&a, &b)| dist(a, b)).fold(0.0, f64::max))
                .fold(f64::INFINITY, f64::min);
            prop_assert!(best <= max_step + 1e-12);
        }

        #[test]
        fn metrics_invariant_under_rigid_motion(seed in 0u64..5000, angle in -3.2f64..3.2, tx in -50.0f64..50.0, ty in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth: Vec<Point> = (0..5).map(|_| [rng.gen_range(-9.0..9.0), rng.gen_range(-9.0..9.0)]).collect();
            let modes: Vec<Vec<Point>> = (0..3)
                .map(|_| truth.iter().map(|p| [p[0] + rng.gen_range(-3.0..3.0), p[1] + rng.gen_range(-3.0..3.0)]).collect())
                .collect();
            let pred = PredictionSet::new(modes, vec![0.5, 0.3, 0.2]).unwrap();
            let moved_truth: Vec<Point> = truth.iter().map(|&p| rotate(p, angle, [tx, ty])).collect();
            let moved = PredictionSet::new(
                pred.trajectories.iter().map(|m| m.iter().map(|&p| rotate(p, angle, [tx, ty])).collect()).collect(),
                pred.credibility.clone(),
            ).unwrap();
            for k in 1..=3 {
                prop_assert!((min_ade(&truth, &pred, k).unwrap() - min_ade(&moved_truth, &moved, k).unwrap()).abs() < 1e-9);
                prop_assert!((min_fde(&truth, &pred, k).unwrap() - min_fde(&moved_truth, &moved, k).unwrap()).abs() < 1e-9);
            }
        }
    }
}
