//! Per-agent training samples with cached rasters and drivable grids.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{to_actor_frame, Point, Pose};
use crate::model::{ModelConfig, ModelInput};
use crate::scene::{build_drivable_grid, AgentId, DrivableGrid, RoadTemplate, Scene};

/// One target agent of one scene, in its actor frame.
#[derive(Clone, Debug)]
pub struct Sample {
    pub scene_id: String,
    pub template: Option<RoadTemplate>,
    pub agent_id: AgentId,
    /// Actor frame relative to the world.
    pub pose: Pose,
    pub input: ModelInput,
    /// Future positions over the horizon.
    pub truth: Vec<Point>,
    pub grid: Arc<DrivableGrid>,
}

pub fn prepare_scene(scene: &Scene, cfg: &ModelConfig, grid_cell: f64) -> Result<Vec<Sample>> {
    if scene.history_len != cfg.history || scene.horizon != cfg.horizon {
        return Err(Error::invalid(format!(
            "scene {} has m = {}, H = {}; model expects m = {}, H = {}",
            scene.scene_id, scene.history_len, scene.horizon, cfg.history, cfg.horizon
        )));
    }
    scene
        .targets()
        .into_iter()
        .map(|id| {
            let (input, pose) = ModelInput::from_scene(scene, id, cfg)?;
            let truth = to_actor_frame(&scene.future(id)?, &pose)?.points();
            let grid = build_drivable_grid(scene, id, grid_cell, &cfg.raster)?;
            Ok(Sample {
                scene_id: scene.scene_id.clone(),
                template: scene.template,
                agent_id: id,
                pose,
                input,
                truth,
                grid: Arc::new(grid),
            })
        })
        .collect()
}

/// Samples of every target agent, in scene order. Scenes are processed in parallel;
/// the result does not depend on the thread count.
pub fn prepare_samples(scenes: &[Scene], cfg: &ModelConfig, grid_cell: f64) -> Result<Vec<Sample>> {
    let per: Vec<Vec<Sample>> = scenes
        .par_iter()
        .map(|s| prepare_scene(s, cfg, grid_cell))
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// Scene indices for training, validation and test.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded 70/15/15 split of `n` scenes. Train and validation get at least one
/// scene each when `n >= 2`.
pub fn split_scenes(n: usize, seed: u64) -> Result<Split> {
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 scenes to split, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * 0.70).round() as usize).clamp(1, n - 1);
    let n_val = ((n as f64 * 0.15).round() as usize).clamp(1, n - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(Split { train: idx, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, GenConfig};

    #[test]
    fn split_is_a_seeded_partition() {
        let s = split_scenes(200, 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (140, 30, 30));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
        assert_eq!(split_scenes(200, 3).unwrap(), s);
        assert_ne!(split_scenes(200, 4).unwrap(), s);
        let tiny = split_scenes(2, 0).unwrap();
        assert_eq!((tiny.train.len(), tiny.val.len(), tiny.test.len()), (1, 1, 0));
        assert!(split_scenes(1, 0).is_err());
    }

    #[test]
    fn samples_match_scene_geometry() {
        let gen = GenConfig {
            agents: 2,
            ..GenConfig::default()
        };
        let scene = generate_scene(&gen, 11).unwrap();
        let cfg = ModelConfig::desk();
        let samples = prepare_scene(&scene, &cfg, 0.5).unwrap();
        assert_eq!(samples.len(), 2);
        for s in &samples {
            assert_eq!(s.truth.len(), cfg.horizon);
            assert!(s.truth.iter().all(|&p| !s.grid.is_offroad(p)));
            let world = scene.future(s.agent_id).unwrap().points();
            for (a, b) in s.truth.iter().zip(world) {
                let w = s.pose.to_world(*a);
                assert!((w[0] - b[0]).abs() < 1e-9 && (w[1] - b[1]).abs() < 1e-9);
            }
        }
        let wrong = ModelConfig { horizon: 20, ..cfg };
        assert!(prepare_scene(&scene, &wrong, 0.5).is_err());
    }
}
