//! Generative cellular automaton over sparse voxel states: neighbourhoods,
//! stochastic transitions, conditional initialization and the inference loop.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::coord::{dilate, Coord};
use crate::sparse_net::{BnMode, ForwardPass, NetInput, TransitionKernelModel};
use crate::voxelizer::{upsample_coarse, Bounds, CellData, VoxelGrid};
use crate::{Error, Feature, Result, FEATURE_DIM};

/// Occupied cells and their features; presence means occupancy 1.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GcaState {
    pub resolution: u32,
    pub cells: BTreeMap<Coord, Feature>,
}

impl GcaState {
    pub fn new(resolution: u32) -> Self {
        Self { resolution, cells: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn support(&self) -> BTreeSet<Coord> {
        self.cells.keys().copied().collect()
    }

    pub fn to_grid(&self, bounds: Bounds) -> VoxelGrid {
        let mut g = VoxelGrid::new(self.resolution, bounds);
        for (c, f) in &self.cells {
            g.cells.insert(*c, CellData { feature: Some(*f), ..Default::default() });
        }
        g
    }

    pub fn from_grid(grid: &VoxelGrid) -> Self {
        Self {
            resolution: grid.resolution,
            cells: grid.cells.iter().map(|(c, d)| (*c, d.feature.unwrap_or([0.0; FEATURE_DIM]))).collect(),
        }
    }
}

/// `σ_t = e^(−1 − 0.01 t)`.
pub fn sigma(t: usize) -> f64 {
    (-1.0 - 0.01 * t as f64).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub t_infer: usize,
    /// L1 neighbourhood radius.
    pub radius: i32,
    pub mode_seeking: bool,
    pub seed: u64,
    /// Maximum state size before the sampler aborts; `None` uses
    /// `max(4·|s⁰|, 8·R²)`.
    pub cell_budget: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { t_infer: 7, radius: 2, mode_seeking: true, seed: 0, cell_budget: None }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_infer == 0 || self.radius < 1 {
            return Err(Error::Parameter("T must be >= 1 and r >= 1".into()));
        }
        Ok(())
    }
}

/// Union of L1 balls of radius `r` around the occupied cells, clipped to the grid.
pub fn neighborhood(state: &GcaState, r: i32) -> Vec<Coord> {
    dilate(state.cells.keys(), r, state.resolution)
}

/// Network input rows `[z, occupancy, mask]` on `eval`.
pub fn build_input(state: &GcaState, mask: &BTreeSet<Coord>, eval: &[Coord]) -> NetInput<f32> {
    let mut features = Vec::with_capacity(eval.len() * (FEATURE_DIM + 2));
    for c in eval {
        match state.cells.get(c) {
            Some(z) => {
                features.extend_from_slice(z);
                features.push(1.0);
            }
            None => {
                features.extend_from_slice(&[0.0; FEATURE_DIM]);
                features.push(0.0);
            }
        }
        features.push(if mask.contains(c) { 1.0 } else { 0.0 });
    }
    NetInput { coords: eval.to_vec(), features }
}

/// Per-cell kernel parameters on a coordinate set.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelOutput {
    pub coords: Vec<Coord>,
    pub lambda: Vec<f64>,
    pub mu: Vec<Feature>,
}

impl KernelOutput {
    pub fn from_pass(pass: &ForwardPass<f32>) -> Self {
        let mut mu = Vec::with_capacity(pass.len());
        for i in 0..pass.len() {
            let mut f = [0.0; FEATURE_DIM];
            f.copy_from_slice(pass.mu(i));
            mu.push(f);
        }
        Self {
            coords: pass.coords.clone(),
            lambda: (0..pass.len()).map(|i| crate::splat_io::logistic(pass.logit(i) as f64)).collect(),
            mu,
        }
    }
}

/// Draws `s^{t+1}`: each cell is occupied with probability λ and then gets
/// `z = μ + σ ε`. Draws are made in coordinate order.
pub fn sample_transition(kernel: &KernelOutput, sigma: f64, resolution: u32, rng: &mut impl Rng) -> GcaState {
    let mut out = GcaState::new(resolution);
    for (i, c) in kernel.coords.iter().enumerate() {
        let u: f64 = rng.random();
        if u < kernel.lambda[i] {
            let mut z = kernel.mu[i];
            for v in z.iter_mut() {
                let e: f64 = rng.sample(StandardNormal);
                *v = (*v as f64 + sigma * e) as f32;
            }
            out.cells.insert(*c, z);
        }
    }
    out
}

/// Deterministic step: occupancy `λ ≥ 0.5`, features `μ`.
pub fn mode_seek(kernel: &KernelOutput, resolution: u32) -> GcaState {
    let mut out = GcaState::new(resolution);
    for (i, c) in kernel.coords.iter().enumerate() {
        if kernel.lambda[i] >= 0.5 {
            out.cells.insert(*c, kernel.mu[i]);
        }
    }
    out
}

/// Upsampled coarse cells with standard-normal features, and the (static) conditioning mask.
pub fn init_conditional(coarse: &VoxelGrid, target: u32, rng: &mut impl Rng) -> Result<(GcaState, BTreeSet<Coord>)> {
    if coarse.is_empty() {
        return Err(Error::Parameter("empty conditioning".into()));
    }
    let ratio = target / coarse.resolution.max(1);
    if !matches!(ratio, 2 | 4 | 8) || coarse.resolution * ratio != target {
        return Err(Error::Parameter(format!("conditioning ratio {target}/{} must be 2, 4 or 8", coarse.resolution)));
    }
    let fine = upsample_coarse(coarse, target)?;
    let mut state = GcaState::new(target);
    for c in fine.cells.keys() {
        let mut z = [0.0f32; FEATURE_DIM];
        for v in z.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v = e as f32;
        }
        state.cells.insert(*c, z);
    }
    let mask = fine.occupancy();
    Ok((state, mask))
}

/// Evaluates the kernel on `N(state)`.
pub fn evaluate_kernel(
    model: &TransitionKernelModel<f32>,
    state: &GcaState,
    mask: &BTreeSet<Coord>,
    radius: i32,
    mode: BnMode,
) -> Result<KernelOutput> {
    let eval = neighborhood(state, radius);
    let pass = model.forward(&build_input(state, mask, &eval), mode)?;
    Ok(KernelOutput::from_pass(&pass))
}

/// Runs `T` stochastic transitions and the optional mode-seeking step from a
/// coarse conditioning grid. `on_step(t, state)` receives every intermediate
/// state in order, `t = 0` being the initial one.
pub fn run_sampler(
    model: &TransitionKernelModel<f32>,
    coarse: &VoxelGrid,
    target: u32,
    cfg: &SamplerConfig,
    on_step: &mut dyn FnMut(usize, &GcaState),
) -> Result<GcaState> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut state, mask) = init_conditional(coarse, target, &mut rng)?;
    let budget = cfg.cell_budget.unwrap_or_else(|| (4 * state.len()).max(8 * (target as usize).pow(2)));
    on_step(0, &state);
    for t in 0..cfg.t_infer {
        let kernel = evaluate_kernel(model, &state, &mask, cfg.radius, BnMode::Running)?;
        state = sample_transition(&kernel, sigma(t), target, &mut rng);
        if state.len() > budget {
            return Err(Error::SamplerAborted(format!(
                "state grew to {} cells at step {} (budget {budget})",
                state.len(),
                t + 1
            )));
        }
        on_step(t + 1, &state);
    }
    if cfg.mode_seeking {
        let kernel = evaluate_kernel(model, &state, &mask, cfg.radius, BnMode::Running)?;
        state = mode_seek(&kernel, target);
        on_step(cfg.t_infer + 1, &state);
    }
    Ok(state)
}
