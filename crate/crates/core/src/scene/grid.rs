use std::collections::VecDeque;

use super::polygon::{fill_centers, Lattice, Polygon};
use super::raster::RasterConfig;
use super::{AgentId, Scene};
use crate::error::{Error, Result};
use crate::geometry::{point_in_axis_aligned, GridCell, Point};

/// Axis-aligned grid over the raster extent in the actor frame. Rows run
/// bottom-up; `blocked` is row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DrivableGrid {
    pub cell_size: f64,
    /// Bottom-left corner of the extent.
    pub origin: Point,
    pub cols: usize,
    pub rows: usize,
    pub blocked: Vec<bool>,
    /// For every cell, the index of a nearby unblocked cell (itself if free).
    nearest_free: Vec<Option<u32>>,
}

const NEIGHBORS: [(i64, i64); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

impl DrivableGrid {
    /// Grid whose cells are blocked iff their center lies outside every polygon.
    pub fn from_polygons(
        polygons: &[Polygon],
        origin: Point,
        cell_size: f64,
        cols: usize,
        rows: usize,
    ) -> Result<Self> {
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::invalid(format!("cell size must be positive, got {cell_size}")));
        }
        if cols == 0 || rows == 0 {
            return Err(Error::invalid("grid must have at least one cell"));
        }
        let lattice = Lattice {
            origin,
            spacing: cell_size,
            cols,
            rows,
        };
        let blocked: Vec<bool> = fill_centers(polygons, &lattice).into_iter().map(|d| !d).collect();
        let nearest_free = nearest_free_cells(&blocked, cols, rows);
        Ok(DrivableGrid {
            cell_size,
            origin,
            cols,
            rows,
            blocked,
            nearest_free,
        })
    }

    pub fn extent(&self) -> (Point, Point) {
        (
            self.origin,
            [
                self.origin[0] + self.cols as f64 * self.cell_size,
                self.origin[1] + self.rows as f64 * self.cell_size,
            ],
        )
    }

    pub fn is_blocked(&self, row: usize, col: usize) -> bool {
        self.blocked[row * self.cols + col]
    }

    pub fn blocked_count(&self) -> usize {
        self.blocked.iter().filter(|&&b| b).count()
    }

    fn bounds(&self, row: usize, col: usize) -> (Point, Point) {
        let x0 = self.origin[0] + col as f64 * self.cell_size;
        let y0 = self.origin[1] + row as f64 * self.cell_size;
        ([x0, y0], [x0 + self.cell_size, y0 + self.cell_size])
    }

    pub fn cell(&self, row: usize, col: usize) -> GridCell {
        let (min, max) = self.bounds(row, col);
        GridCell::axis_aligned(min, max)
    }

    pub fn cell_center(&self, row: usize, col: usize) -> Point {
        let (min, max) = self.bounds(row, col);
        [(min[0] + max[0]) / 2.0, (min[1] + max[1]) / 2.0]
    }

    /// Cell whose half-open square `[x0, x1) x [y0, y1)` contains `p`.
    pub fn locate(&self, p: Point) -> Option<(usize, usize)> {
        let c = ((p[0] - self.origin[0]) / self.cell_size).floor();
        let r = ((p[1] - self.origin[1]) / self.cell_size).floor();
        if c < 0.0 || r < 0.0 || c >= self.cols as f64 || r >= self.rows as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }

    /// Whether `p` lies strictly inside a blocked cell, or outside the grid.
    ///
    /// Equivalent to testing every blocked cell with the corner sign test, but
    /// only the candidate cell is examined.
    pub fn is_offroad(&self, p: Point) -> bool {
        match self.locate(p) {
            None => true,
            Some((r, c)) => {
                let (min, max) = self.bounds(r, c);
                self.is_blocked(r, c) && point_in_axis_aligned(p, min, max)
            }
        }
    }

    /// Center of a nearby unblocked cell, or `None` if every cell is blocked.
    /// Points outside the grid are first clamped to the border.
    pub fn nearest_free_center(&self, p: Point) -> Option<Point> {
        let c = ((p[0] - self.origin[0]) / self.cell_size).floor();
        let r = ((p[1] - self.origin[1]) / self.cell_size).floor();
        let c = c.clamp(0.0, (self.cols - 1) as f64) as usize;
        let r = r.clamp(0.0, (self.rows - 1) as f64) as usize;
        let idx = self.nearest_free[r * self.cols + c]? as usize;
        Some(self.cell_center(idx / self.cols, idx % self.cols))
    }
}

/// Multi-source breadth-first search from every free cell over the 8-neighborhood.
fn nearest_free_cells(blocked: &[bool], cols: usize, rows: usize) -> Vec<Option<u32>> {
    let mut nearest = vec![None; blocked.len()];
    let mut queue = VecDeque::new();
    for (i, &b) in blocked.iter().enumerate() {
        if !b {
            nearest[i] = Some(i as u32);
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (r, c) = ((i / cols) as i64, (i % cols) as i64);
        for (dr, dc) in NEIGHBORS {
            let (nr, nc) = (r + dr, c + dc);
            if nr < 0 || nc < 0 || nr >= rows as i64 || nc >= cols as i64 {
                continue;
            }
            let j = nr as usize * cols + nc as usize;
            if nearest[j].is_none() {
                nearest[j] = nearest[i];
                queue.push_back(j);
            }
        }
    }
    nearest
}

/// Drivable grid around `agent_id`, covering the same extent as its raster.
pub fn build_drivable_grid(
    scene: &Scene,
    agent_id: AgentId,
    cell_size: f64,
    raster: &RasterConfig,
) -> Result<DrivableGrid> {
    raster.validate()?;
    if !(cell_size > 0.0 && cell_size.is_finite()) {
        return Err(Error::invalid(format!("cell size must be positive, got {cell_size}")));
    }
    let pose = scene.actor_pose(agent_id)?;
    let local: Vec<_> = scene.map.drivable.iter().map(|p| p.to_local(&pose)).collect();
    let [w, h] = raster.extent();
    let cols = (w / cell_size - 1e-9).ceil().max(1.0) as usize;
    let rows = (h / cell_size - 1e-9).ceil().max(1.0) as usize;
    DrivableGrid::from_polygons(&local, raster.origin(), cell_size, cols, rows)
}
