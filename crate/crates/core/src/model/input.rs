use crate::error::Result;
use crate::geometry::{to_actor_frame, Point, Pose};
use crate::scene::{rasterize, AgentId, RasterImage, Scene};

use super::config::ModelConfig;

/// Everything the network sees for one target agent, in its actor frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub raster: RasterImage,
    /// `m` positions ending at the reference time (the origin).
    pub target_history: Vec<Point>,
    /// The autonomous vehicle over the same steps.
    pub av_history: Vec<Point>,
}

impl ModelInput {
    pub fn from_scene(scene: &Scene, agent: AgentId, cfg: &ModelConfig) -> Result<(ModelInput, Pose)> {
        let pose = scene.actor_pose(agent)?;
        let local = |id: AgentId| -> Result<Vec<Point>> { Ok(to_actor_frame(&scene.history(id)?, &pose)?.points()) };
        let input = ModelInput {
            raster: rasterize(scene, agent, &cfg.raster)?,
            target_history: local(agent)?,
            av_history: local(scene.av_id)?,
        };
        if input.target_history.len() != cfg.history {
            return Err(crate::Error::invalid(format!(
                "scene history length {} differs from model history {}",
                input.target_history.len(),
                cfg.history
            )));
        }
        Ok((input, pose))
    }
}
