//! Synthetic road scenes, rasterization, drivable grids and the dataset file format.

mod dataset;
mod generate;
mod grid;
mod polygon;
mod raster;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{derive_kinematics, Pose, Trajectory};

pub use dataset::{load_dataset, read_dataset, save_dataset, write_dataset, DatasetHeader};
pub use generate::{generate_dataset, generate_scene, GenConfig, RoadTemplate};
pub use grid::{build_drivable_grid, DrivableGrid};
pub use polygon::{fill_centers, Lattice, Polygon, Polyline};
pub use raster::{rasterize, RasterConfig, RasterImage, CHANNELS};

pub type AgentId = u32;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MapData {
    /// Drivable area as a union of polygons.
    pub drivable: Vec<Polygon>,
    pub lanes: Vec<Polyline>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentTrack {
    pub id: AgentId,
    pub trajectory: Trajectory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub template: Option<RoadTemplate>,
    pub map: MapData,
    pub agents: Vec<AgentTrack>,
    pub av_id: AgentId,
    pub ref_time: i64,
    pub history_len: usize,
    pub horizon: usize,
    pub dt: f64,
}

impl Scene {
    pub fn agent(&self, id: AgentId) -> Result<&Trajectory> {
        self.agents
            .iter()
            .find(|a| a.id == id)
            .map(|a| &a.trajectory)
            .ok_or_else(|| Error::invalid(format!("scene {} has no agent {id}", self.scene_id)))
    }

    /// Agents to predict: everyone except the autonomous vehicle.
    pub fn targets(&self) -> Vec<AgentId> {
        self.agents
            .iter()
            .map(|a| a.id)
            .filter(|&id| id != self.av_id)
            .collect()
    }

    /// The `m` observed states ending at the reference time.
    pub fn history(&self, id: AgentId) -> Result<Trajectory> {
        let m = self.history_len as i64;
        self.agent(id)?.window(self.ref_time - m + 1, self.ref_time)
    }

    /// The `H` states after the reference time.
    pub fn future(&self, id: AgentId) -> Result<Trajectory> {
        self.agent(id)?
            .window(self.ref_time + 1, self.ref_time + self.horizon as i64)
    }

    /// Actor-centered frame: position at the reference time, heading of the last
    /// observed displacement.
    pub fn actor_pose(&self, id: AgentId) -> Result<Pose> {
        let traj = self.agent(id)?;
        let here = traj
            .at(self.ref_time)
            .ok_or_else(|| Error::invalid(format!("agent {id} has no state at reference time {}", self.ref_time)))?;
        let window = traj.window(self.ref_time - self.history_len as i64, self.ref_time)?;
        let kin = derive_kinematics(&window)?;
        Pose::new(here.point(), *kin.heading.last().unwrap())
    }

    pub fn validate(&self) -> Result<()> {
        if self.history_len == 0 || self.horizon == 0 || !(self.dt > 0.0) {
            return Err(Error::invalid("scene needs m >= 1, H >= 1 and dt > 0"));
        }
        self.agent(self.av_id)?;
        let m = self.history_len as i64;
        for a in &self.agents {
            a.trajectory
                .window(self.ref_time - m, self.ref_time + self.horizon as i64)
                .map_err(|_| {
                    Error::invalid(format!(
                        "scene {}: agent {} does not cover {} past and {} future steps",
                        self.scene_id,
                        a.id,
                        m + 1,
                        self.horizon
                    ))
                })?;
        }
        Ok(())
    }
}
