//! Single-exemplar infusion training of the transition kernel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::coord::Coord;
use crate::gca::{build_input, init_conditional, neighborhood, sigma, GcaState, KernelOutput};
use crate::sparse_net::{AdamW, AdamWConfig, BnMode, NetworkConfig, TransitionKernelModel};
use crate::voxelizer::{downsample_to, VoxelGrid};
use crate::{Error, Feature, Result, FEATURE_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfusionSchedule {
    pub alpha0: f64,
    pub alpha_t: f64,
    pub t_train: usize,
    pub lambda_z: f64,
    pub iterations: usize,
}

impl Default for InfusionSchedule {
    fn default() -> Self {
        Self { alpha0: 0.1, alpha_t: 0.25, t_train: 5, lambda_z: 0.01, iterations: 10_000 }
    }
}

impl InfusionSchedule {
    /// Per-step growth `(α_T − α_0) / T`.
    pub fn alpha1(&self) -> f64 {
        (self.alpha_t - self.alpha0) / self.t_train as f64
    }

    /// `α_t = min(α_0 + α_1 t, 1)`.
    pub fn alpha(&self, t: usize) -> f64 {
        (self.alpha0 + self.alpha1() * t as f64).min(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.alpha0 && self.alpha0 <= self.alpha_t && self.alpha_t <= 1.0) {
            return Err(Error::Parameter(format!("need 0 <= alpha0 <= alphaT <= 1, got {self:?}")));
        }
        if self.t_train == 0 {
            return Err(Error::Parameter("T_train must be >= 1".into()));
        }
        if !(self.lambda_z >= 0.0) {
            return Err(Error::Parameter("lambda_z must be non-negative".into()));
        }
        Ok(())
    }
}

/// Featured target grid and its coarse conditioning grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarVoxels {
    pub target: VoxelGrid,
    pub coarse: VoxelGrid,
}

impl ExemplarVoxels {
    pub fn new(target: VoxelGrid, coarse_resolution: u32) -> Result<Self> {
        if !target.is_featured() {
            return Err(Error::State("exemplar target grid lacks features".into()));
        }
        let coarse = downsample_to(&target.occupancy_only(), coarse_resolution)?;
        Ok(Self { target, coarse })
    }

    pub fn ratio(&self) -> u32 {
        self.target.resolution / self.coarse.resolution
    }

    fn feature(&self, c: &Coord) -> Option<Feature> {
        self.target.feature(c).copied()
    }
}

/// Samples from the kernel biased towards the exemplar:
/// occupancy `~ Ber((1−α)λ + α·1[c∈x])`, then `z ~ N((1−α)μ + α z^x, σ² I)`.
pub fn infused_sample(
    kernel: &KernelOutput,
    sigma: f64,
    alpha: f64,
    x: &ExemplarVoxels,
    rng: &mut impl Rng,
) -> GcaState {
    let mut out = GcaState::new(x.target.resolution);
    for (i, c) in kernel.coords.iter().enumerate() {
        let zx = x.feature(c);
        let y = if zx.is_some() { 1.0 } else { 0.0 };
        let q = (1.0 - alpha) * kernel.lambda[i] + alpha * y;
        let u: f64 = rng.random();
        if u < q {
            let zx = zx.unwrap_or([0.0; FEATURE_DIM]);
            let mut z = [0.0f32; FEATURE_DIM];
            for k in 0..FEATURE_DIM {
                let e: f64 = rng.sample(StandardNormal);
                let mean = (1.0 - alpha) * kernel.mu[i][k] as f64 + alpha * zx[k] as f64;
                z[k] = (mean + sigma * e) as f32;
            }
            out.cells.insert(*c, z);
        }
    }
    out
}

/// Loss terms (means over cells) and gradients per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct KlTerms {
    pub loss_o: f64,
    pub loss_z: f64,
    pub d_logit: Vec<f64>,
    /// `n x K`, row-major.
    pub d_mu: Vec<f64>,
}

impl KlTerms {
    pub fn total(&self) -> f64 {
        self.loss_o + self.loss_z
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y
    }
}

/// KL between the infused kernel and the learned kernel on `coords`, with
/// the Bernoulli part `KL(q‖λ)` and the Gaussian part `q·λ_z·‖μ_q − μ‖²/(2σ²)`.
/// `logits` has one entry per cell and `mu` is `n x K`.
pub fn kl_loss(
    coords: &[Coord],
    logits: &[f64],
    mu: &[f64],
    alpha: f64,
    sigma: f64,
    x: &ExemplarVoxels,
    lambda_z: f64,
) -> KlTerms {
    let n = coords.len();
    let k = FEATURE_DIM;
    let mut loss_o = 0.0;
    let mut loss_z = 0.0;
    let mut d_logit = vec![0.0; n];
    let mut d_mu = vec![0.0; n * k];
    let inv_n = if n > 0 { 1.0 / n as f64 } else { 0.0 };
    let s2 = sigma * sigma;
    for (i, c) in coords.iter().enumerate() {
        let l = logits[i];
        let zx = x.feature(c);
        let y = if zx.is_some() { 1.0 } else { 0.0 };
        let (log_p, log_1mp) = (-softplus(-l), -softplus(l));
        let p = log_p.exp();
        let pq = p * (1.0 - p);
        let q = (1.0 - alpha) * p + alpha * y;
        let one_minus_q = (1.0 - alpha) * (1.0 - p) + alpha * (1.0 - y);
        let (log_q, log_1mq) = (q.ln(), one_minus_q.ln());
        let lo = xlogy(q, log_q - log_p) + xlogy(one_minus_q, log_1mq - log_1mp);
        let mut dl = p - q;
        if alpha < 1.0 {
            dl += (1.0 - alpha) * pq * ((log_q - log_p) - (log_1mq - log_1mp));
        }
        let zx = zx.unwrap_or([0.0; FEATURE_DIM]);
        let mut sq = 0.0;
        for j in 0..k {
            let diff = zx[j] as f64 - mu[i * k + j];
            sq += diff * diff;
        }
        let a2 = alpha * alpha;
        let lz = if s2 > 0.0 { q * lambda_z * a2 * sq / (2.0 * s2) } else { 0.0 };
        if s2 > 0.0 {
            for j in 0..k {
                d_mu[i * k + j] = q * lambda_z * a2 * (mu[i * k + j] - zx[j] as f64) / s2 * inv_n;
            }
            dl += (1.0 - alpha) * pq * lambda_z * a2 * sq / (2.0 * s2);
        }
        loss_o += lo;
        loss_z += lz;
        d_logit[i] = dl * inv_n;
    }
    KlTerms { loss_o: loss_o * inv_n, loss_z: loss_z * inv_n, d_logit, d_mu }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropConfig {
    pub min_fraction: f64,
    pub max_fraction: f64,
    pub min_voxels: usize,
    pub max_attempts: usize,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self { min_fraction: 0.5, max_fraction: 1.0, min_voxels: 32, max_attempts: 20 }
    }
}

/// Axis-aligned crop snapped to coarse cells, kept at its original position.
pub fn crop_augment(x: &ExemplarVoxels, cfg: &CropConfig, rng: &mut impl Rng) -> ExemplarVoxels {
    if x.coarse.is_empty() {
        return x.clone();
    }
    let k = x.ratio() as i32;
    let mut lo = [i32::MAX; 3];
    let mut hi = [i32::MIN; 3];
    for c in x.coarse.cells.keys() {
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    for _ in 0..cfg.max_attempts {
        let mut start = [0i32; 3];
        let mut end = [0i32; 3];
        for a in 0..3 {
            let extent = hi[a] - lo[a] + 1;
            let f = if cfg.max_fraction > cfg.min_fraction {
                rng.random_range(cfg.min_fraction..=cfg.max_fraction)
            } else {
                cfg.max_fraction
            };
            let size = ((f * extent as f64).round() as i32).clamp(1, extent);
            start[a] = lo[a] + rng.random_range(0..=extent - size);
            end[a] = start[a] + size;
        }
        let inside = |c: &Coord| (0..3).all(|a| c[a] >= start[a] * k && c[a] < end[a] * k);
        let mut target = VoxelGrid::new(x.target.resolution, x.target.bounds);
        target.cells = x.target.cells.iter().filter(|(c, _)| inside(c)).map(|(c, d)| (*c, d.clone())).collect();
        if target.len() >= cfg.min_voxels {
            let coarse = downsample_to(&target.occupancy_only(), x.coarse.resolution).expect("ratio checked");
            return ExemplarVoxels { target, coarse };
        }
    }
    x.clone()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub net: NetworkConfig,
    pub schedule: InfusionSchedule,
    pub optimizer: AdamWConfig,
    pub crop: CropConfig,
    pub radius: i32,
    pub seed: u64,
    pub log_every: usize,
    /// Iteration from which the learning rate falls linearly to zero at the
    /// last iteration; `None` keeps it constant.
    #[serde(default)]
    pub lr_decay_start: Option<usize>,
}

impl TrainConfig {
    /// Learning rate of the update that completes iteration `iteration + 1`.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let lr = self.optimizer.lr;
        match self.lr_decay_start {
            Some(start) if iteration >= start && self.schedule.iterations > start => {
                let left = self.schedule.iterations.saturating_sub(iteration) as f64;
                lr * left / (self.schedule.iterations - start) as f64
            }
            _ => lr,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net: NetworkConfig::default(),
            schedule: InfusionSchedule::default(),
            optimizer: AdamWConfig::default(),
            crop: CropConfig::default(),
            radius: 2,
            seed: 0,
            log_every: 100,
            lr_decay_start: None,
        }
    }
}

/// One line of the training log: window means since the previous record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub iteration: usize,
    pub loss_o: f64,
    pub loss_z: f64,
    pub total: f64,
    pub wall_clock: f64,
}

/// Loss of one iteration (mean over its T steps).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationLoss {
    pub loss_o: f64,
    pub loss_z: f64,
}

impl IterationLoss {
    pub fn total(&self) -> f64 {
        self.loss_o + self.loss_z
    }
}

/// Incremental trainer; [`train_primitive`] drives it to completion.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    model: TransitionKernelModel<f32>,
    optimizer: AdamW,
    rng: ChaCha8Rng,
    exemplar: ExemplarVoxels,
    iteration: usize,
    window: (f64, f64, usize),
    log: Vec<TrainLogRecord>,
    losses: Vec<IterationLoss>,
    #[cfg(not(target_arch = "wasm32"))]
    started: std::time::Instant,
}

/// Training stopped on a non-finite loss; `checkpoint` holds the last finite parameters.
#[derive(Debug)]
pub struct TrainAbort {
    pub iteration: usize,
    pub checkpoint: Box<TransitionKernelModel<f32>>,
    pub log: Vec<TrainLogRecord>,
}

impl std::fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "non-finite loss at iteration {}", self.iteration)
    }
}

impl std::error::Error for TrainAbort {}

impl From<TrainAbort> for Error {
    fn from(a: TrainAbort) -> Self {
        Error::NonFiniteLoss { iteration: a.iteration }
    }
}

/// Trained model plus its log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TransitionKernelModel<f32>,
    pub log: Vec<TrainLogRecord>,
    pub losses: Vec<IterationLoss>,
}

/// Progress notification for [`train_primitive`].
#[derive(Debug, Clone, Copy)]
pub struct TrainProgress<'a> {
    pub iteration: usize,
    pub iterations: usize,
    pub loss: IterationLoss,
    pub record: Option<&'a TrainLogRecord>,
}

impl Trainer {
    pub fn new(exemplar: ExemplarVoxels, config: TrainConfig) -> Result<Self> {
        config.schedule.validate()?;
        if exemplar.target.is_empty() {
            return Err(Error::Parameter("empty exemplar".into()));
        }
        if config.radius < 1 {
            return Err(Error::Parameter("radius must be >= 1".into()));
        }
        let mut seeds = ChaCha8Rng::seed_from_u64(config.seed);
        let model = TransitionKernelModel::new(config.net, seeds.random())?;
        Ok(Self {
            config,
            model,
            optimizer: AdamW::new(config.optimizer),
            rng: ChaCha8Rng::seed_from_u64(seeds.random()),
            exemplar,
            iteration: 0,
            window: (0.0, 0.0, 0),
            log: Vec::new(),
            losses: Vec::new(),
            #[cfg(not(target_arch = "wasm32"))]
            started: std::time::Instant::now(),
        })
    }

    pub fn model(&self) -> &TransitionKernelModel<f32> {
        &self.model
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn log(&self) -> &[TrainLogRecord] {
        &self.log
    }

    fn wall_clock(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        {
            self.started.elapsed().as_secs_f64()
        }
        #[cfg(target_arch = "wasm32")]
        {
            0.0
        }
    }

    /// One optimizer step over a fresh crop and a rolled infused trajectory.
    pub fn step(&mut self) -> Result<IterationLoss, TrainAbort> {
        let sched = self.config.schedule;
        let crop = crop_augment(&self.exemplar, &self.config.crop, &mut self.rng);
        let r_t = crop.target.resolution;
        let (mut state, mask) = init_conditional(&crop.coarse, r_t, &mut self.rng).expect("crop has coarse cells");
        let mut acc: Vec<Vec<f32>> = self.model.values().iter().map(|v| vec![0.0; v.len()]).collect();
        let mut loss = IterationLoss { loss_o: 0.0, loss_z: 0.0 };
        let inv_t = 1.0 / sched.t_train as f64;
        for t in 0..sched.t_train {
            if state.is_empty() {
                break;
            }
            let eval = neighborhood(&state, self.config.radius);
            let input = build_input(&state, &mask, &eval);
            let pass = self.model.forward(&input, BnMode::Batch).expect("input shape is consistent");
            let n = pass.len();
            let logits: Vec<f64> = (0..n).map(|i| pass.logit(i) as f64).collect();
            let mu: Vec<f64> = (0..n).flat_map(|i| pass.mu(i).iter().map(|&v| v as f64)).collect();
            let (alpha, s) = (sched.alpha(t), sigma(t));
            let kl = kl_loss(&eval, &logits, &mu, alpha, s, &crop, sched.lambda_z);
            if !kl.total().is_finite() {
                return Err(self.abort());
            }
            loss.loss_o += kl.loss_o * inv_t;
            loss.loss_z += kl.loss_z * inv_t;
            let dl: Vec<f32> = kl.d_logit.iter().map(|&g| (g * inv_t) as f32).collect();
            let dm: Vec<f32> = kl.d_mu.iter().map(|&g| (g * inv_t) as f32).collect();
            let grads = self.model.backward(&pass, &dl, &dm).expect("pass is current");
            for (a, g) in acc.iter_mut().zip(&grads) {
                a.iter_mut().zip(g).for_each(|(x, y)| *x += *y);
            }
            self.model.commit_batch_stats(&pass).expect("batch pass");
            let kernel = KernelOutput::from_pass(&pass);
            state = infused_sample(&kernel, s, alpha, &crop, &mut self.rng);
        }
        if acc.iter().flatten().any(|g| !g.is_finite()) {
            return Err(self.abort());
        }
        self.optimizer.config.lr = self.config.lr_at(self.iteration);
        self.optimizer.step(&mut self.model, &acc).expect("gradient table matches");
        self.iteration += 1;
        self.losses.push(loss);
        self.window.0 += loss.loss_o;
        self.window.1 += loss.loss_z;
        self.window.2 += 1;
        if self.config.log_every > 0 && self.iteration % self.config.log_every == 0 {
            self.flush_log();
        }
        Ok(loss)
    }

    fn flush_log(&mut self) {
        let (o, z, n) = self.window;
        if n == 0 {
            return;
        }
        let nf = n as f64;
        self.log.push(TrainLogRecord {
            iteration: self.iteration,
            loss_o: o / nf,
            loss_z: z / nf,
            total: (o + z) / nf,
            wall_clock: self.wall_clock(),
        });
        self.window = (0.0, 0.0, 0);
    }

    fn abort(&self) -> TrainAbort {
        TrainAbort { iteration: self.iteration, checkpoint: Box::new(self.model.clone()), log: self.log.clone() }
    }

    pub fn finish(mut self) -> TrainOutcome {
        self.flush_log();
        TrainOutcome { model: self.model, log: self.log, losses: self.losses }
    }
}

/// Trains a kernel for `config.schedule.iterations` iterations.
pub fn train_primitive(
    exemplar: &ExemplarVoxels,
    config: &TrainConfig,
    progress: &mut dyn FnMut(&TrainProgress),
) -> Result<TrainOutcome, TrainAbort> {
    let mut trainer = match Trainer::new(exemplar.clone(), *config) {
        Ok(t) => t,
        Err(_) => {
            return Err(TrainAbort {
                iteration: 0,
                checkpoint: Box::new(TransitionKernelModel::new(NetworkConfig::default(), 0).expect("default config")),
                log: Vec::new(),
            })
        }
    };
    let total = config.schedule.iterations;
    for _ in 0..total {
        let loss = trainer.step()?;
        let logged = config.log_every > 0 && trainer.iteration % config.log_every == 0;
        progress(&TrainProgress {
            iteration: trainer.iteration,
            iterations: total,
            loss,
            record: if logged { trainer.log.last() } else { None },
        });
    }
    Ok(trainer.finish())
}

/// Support reached by rolling the infused kernel with `α = 1` and `σ = 0`:
/// every step keeps exactly the exemplar cells of the current neighbourhood.
pub fn roll_degenerate(x: &ExemplarVoxels, s0: &GcaState, steps: usize, radius: i32) -> Vec<GcaState> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut states = vec![s0.clone()];
    for _ in 0..steps {
        let cur = states.last().unwrap();
        let coords = neighborhood(cur, radius);
        let n = coords.len();
        let kernel = KernelOutput { coords, lambda: vec![0.5; n], mu: vec![[0.0; FEATURE_DIM]; n] };
        let next = infused_sample(&kernel, 0.0, 1.0, x, &mut rng);
        states.push(next);
    }
    states
}

/// Occupancy IoU and mean feature cosine over the cells both grids share.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub iou: f64,
    pub mean_cosine: f64,
    pub matched: usize,
}

pub fn fidelity(generated: &GcaState, target: &VoxelGrid) -> Fidelity {
    let mut matched = 0usize;
    let mut cos_sum = 0.0;
    for (c, z) in &generated.cells {
        if let Some(zx) = target.feature(c) {
            matched += 1;
            let (mut d, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
            for k in 0..FEATURE_DIM {
                d += z[k] as f64 * zx[k] as f64;
                na += (z[k] as f64).powi(2);
                nb += (zx[k] as f64).powi(2);
            }
            let den = (na * nb).sqrt();
            cos_sum += if den > 0.0 { d / den } else { 0.0 };
        }
    }
    let union = generated.len() + target.len() - matched;
    Fidelity {
        iou: if union == 0 { 1.0 } else { matched as f64 / union as f64 },
        mean_cosine: if matched == 0 { 0.0 } else { cos_sum / matched as f64 },
        matched,
    }
}
