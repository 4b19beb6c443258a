//! Demo state, independent of the JS bindings.

use std::collections::BTreeSet;

use genprim::coord::Coord;
use genprim::gca::GcaState;
use genprim::gca_train::{roll_degenerate, ExemplarVoxels};
use genprim::patch_consistency::{run_consistency, ConsistencyConfig};
use genprim::synthetic::{torus_exemplar, TorusSpec};
use genprim::voxelizer::{
    assign_representative_features, build_surface_voxels, occupancy_iou, upsample_coarse, Bounds, CellData, VoxelGrid,
    VoxelizerConfig,
};
use genprim::Feature;

const COARSE: u32 = 8;

#[derive(Debug, thiserror::Error)]
pub enum DemoError {
    #[error(transparent)]
    Core(#[from] genprim::Error),
    #[error("{0}")]
    Input(&'static str),
}

type Result<T> = std::result::Result<T, DemoError>;

fn colour(f: Option<&Feature>) -> [f32; 3] {
    match f {
        Some(f) => [0, 1, 2].map(|k| (0.5 + 0.5 * f[k]).clamp(0.0, 1.0)),
        None => [0.6, 0.6, 0.6],
    }
}

pub fn points(grid: &VoxelGrid) -> Vec<f32> {
    let mut out = Vec::with_capacity(grid.len() * 6);
    for (c, d) in &grid.cells {
        let p = grid.cell_center(*c);
        out.extend(p.map(|v| v as f32));
        out.extend(colour(d.feature.as_ref()));
    }
    out
}

pub struct Session {
    spec: TorusSpec,
    seed: u64,
    resolution: u32,
    exemplar: ExemplarVoxels,
    conditioning: VoxelGrid,
    states: Vec<GcaState>,
    refined: Option<VoxelGrid>,
}

impl Session {
    /// Procedural bumpy torus with `points` Gaussians, voxelized at 32³.
    pub fn new(points: usize, seed: u64) -> Result<Session> {
        let spec = TorusSpec { points: points.max(500), ..Default::default() };
        let (_, exemplar) = torus_exemplar(&spec, seed, 32, COARSE)?;
        let conditioning = exemplar.coarse.clone();
        Ok(Session { spec, seed, resolution: 32, exemplar, conditioning, states: Vec::new(), refined: None })
    }

    /// Re-voxelizes the exemplar. `resolution` is 16, 32 or 64.
    pub fn voxelize(&mut self, resolution: u32, eta_thres: f64) -> Result<usize> {
        let (cloud, _) = torus_exemplar(&self.spec, self.seed, resolution, COARSE)?;
        let cfg = VoxelizerConfig { eta_thres, ..Default::default() };
        let (surface, _) = build_surface_voxels(&cloud, Bounds::unit(), resolution, &cfg)?;
        if surface.is_empty() {
            return Err(DemoError::Input("no Gaussian passes the opacity threshold"));
        }
        let target = assign_representative_features(&surface, &cloud)?;
        self.exemplar = ExemplarVoxels::new(target, COARSE)?;
        self.resolution = resolution;
        self.conditioning = self.exemplar.coarse.clone();
        self.states.clear();
        self.refined = None;
        Ok(self.exemplar.target.len())
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn exemplar_points(&self) -> Vec<f32> {
        points(&self.exemplar.target)
    }

    /// Occupancy of coarse slice `z` as `8 x 8` bytes, row `y`, column `x`.
    pub fn conditioning_slice(&self, z: i32) -> Vec<u8> {
        let mut out = vec![0u8; (COARSE * COARSE) as usize];
        for c in self.conditioning.cells.keys() {
            if c[2] == z {
                out[(c[1] * COARSE as i32 + c[0]) as usize] = 1;
            }
        }
        out
    }

    /// Flips one coarse cell; returns whether it is now occupied.
    pub fn toggle_coarse(&mut self, x: i32, y: i32, z: i32) -> Result<bool> {
        let c: Coord = [x, y, z];
        if !self.conditioning.in_bounds(c) {
            return Err(DemoError::Input("cell outside the conditioning grid"));
        }
        self.states.clear();
        self.refined = None;
        if self.conditioning.cells.remove(&c).is_some() {
            return Ok(false);
        }
        self.conditioning.cells.insert(c, CellData::default());
        Ok(true)
    }

    pub fn reset_conditioning(&mut self) {
        self.conditioning = self.exemplar.coarse.clone();
        self.states.clear();
        self.refined = None;
    }

    /// Rolls the infused kernel with `α = 1`, `σ = 0` from the upsampled
    /// conditioning; returns the number of states (including the initial one).
    pub fn grow(&mut self, steps: usize, radius: i32) -> Result<usize> {
        if self.conditioning.is_empty() {
            return Err(DemoError::Input("empty conditioning"));
        }
        let fine = upsample_coarse(&self.conditioning, self.resolution)?;
        let s0 = GcaState::from_grid(&fine);
        self.states = roll_degenerate(&self.exemplar, &s0, steps, radius.max(1));
        self.refined = None;
        Ok(self.states.len())
    }

    /// Cells of state `t` of the last [`Session::grow`].
    pub fn state_points(&self, t: usize) -> Vec<f32> {
        self.states.get(t).map(|s| points(&s.to_grid(Bounds::unit()))).unwrap_or_default()
    }

    /// Patch-consistency refinement of the final grown state against the exemplar.
    pub fn refine(&mut self, iterations: usize) -> Result<usize> {
        let Some(last) = self.states.last() else {
            return Err(DemoError::Input("grow first"));
        };
        if last.is_empty() {
            return Err(DemoError::Input("the grown state is empty"));
        }
        let cfg = ConsistencyConfig { iterations: iterations.max(1), ..Default::default() };
        let refined = run_consistency(&last.to_grid(Bounds::unit()), &self.exemplar.target, &cfg)?;
        let n = refined.len();
        self.refined = Some(refined);
        Ok(n)
    }

    pub fn refined_points(&self) -> Vec<f32> {
        self.refined.as_ref().map(points).unwrap_or_default()
    }

    /// Occupancy IoU of the last grown (or refined) grid against the exemplar.
    pub fn iou(&self) -> f64 {
        let grid = match (&self.refined, self.states.last()) {
            (Some(r), _) => r.clone(),
            (None, Some(s)) => s.to_grid(Bounds::unit()),
            _ => return 0.0,
        };
        occupancy_iou(&grid, &self.exemplar.target)
    }

    /// Exemplar cells the grown state has not reached.
    pub fn unreached(&self) -> usize {
        let Some(s) = self.states.last() else { return self.exemplar.target.len() };
        let reached: BTreeSet<Coord> = s.support();
        self.exemplar.target.cells.keys().filter(|c| !reached.contains(*c)).count()
    }

    pub fn conditioning_json(&self) -> String {
        self.conditioning.to_json()
    }
}
