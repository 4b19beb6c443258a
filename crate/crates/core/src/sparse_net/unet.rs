//! The light sparse U-Net that predicts per-cell occupancy logits and feature means.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kernel_map::{ConvKind, KernelMap};
use super::ops::BnStats;
use super::tape::{NodeId, Tape};
use super::Scalar;
use crate::coord::{parents, Coord};
use crate::{Error, Result, FEATURE_DIM};

const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub channel_mult: usize,
    /// Number of resolutions; the encoder downsamples `depth - 1` times.
    pub depth: usize,
    pub blocks_per_level: usize,
    /// State feature dimension K; the input has K + 2 channels.
    pub feature_dim: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { base_channels: 16, channel_mult: 2, depth: 2, blocks_per_level: 1, feature_dim: FEATURE_DIM }
    }
}

impl NetworkConfig {
    pub fn with_depth(depth: usize) -> Self {
        Self { depth, ..Self::default() }
    }

    pub fn in_channels(&self) -> usize {
        self.feature_dim + 2
    }

    pub fn out_channels(&self) -> usize {
        self.feature_dim + 1
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mult.pow(level as u32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.channel_mult == 0 || self.feature_dim == 0 {
            return Err(Error::Parameter(format!("invalid network config {self:?}")));
        }
        Ok(())
    }
}

/// Name, shape and trainability of one stored tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy)]
struct ConvL {
    w: usize,
    b: usize,
    kind: ConvKind,
}

#[derive(Debug, Clone, Copy)]
struct NormL {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    conv1: ConvL,
    norm1: NormL,
    conv2: ConvL,
    norm2: NormL,
    skip: Option<ConvL>,
}

#[derive(Debug, Clone)]
struct Plan {
    input: ConvL,
    enc: Vec<Vec<Block>>,
    down: Vec<ConvL>,
    middle: Vec<Block>,
    dec: Vec<Vec<Block>>,
    up: Vec<ConvL>,
    out_norm: NormL,
    head: ConvL,
}

struct Builder<'a> {
    meta: Vec<Param>,
    values: Vec<Vec<f32>>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn tensor(&mut self, name: String, shape: Vec<usize>, trainable: bool, data: Vec<f32>) -> usize {
        self.meta.push(Param { name, shape, trainable });
        self.values.push(data);
        self.values.len() - 1
    }

    fn conv(&mut self, name: &str, kind: ConvKind, cin: usize, cout: usize, zero: bool) -> ConvL {
        let kvol = kind.kvol();
        let bound = 1.0 / ((kvol * cin) as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f32> {
            if zero {
                vec![0.0; n]
            } else {
                (0..n).map(|_| self.rng.random_range(-bound..bound) as f32).collect()
            }
        };
        let wd = draw(kvol * cin * cout);
        let bd = draw(cout);
        let w = self.tensor(format!("{name}.weight"), vec![kvol, cin, cout], true, wd);
        let b = self.tensor(format!("{name}.bias"), vec![cout], true, bd);
        ConvL { w, b, kind }
    }

    fn norm(&mut self, name: &str, c: usize) -> NormL {
        NormL {
            gamma: self.tensor(format!("{name}.gamma"), vec![c], true, vec![1.0; c]),
            beta: self.tensor(format!("{name}.beta"), vec![c], true, vec![0.0; c]),
            mean: self.tensor(format!("{name}.running_mean"), vec![c], false, vec![0.0; c]),
            var: self.tensor(format!("{name}.running_var"), vec![c], false, vec![1.0; c]),
        }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize) -> Block {
        let sub = ConvKind::Submanifold;
        Block {
            conv1: self.conv(&format!("{name}.conv1"), sub, cin, cout, false),
            norm1: self.norm(&format!("{name}.norm1"), cout),
            conv2: self.conv(&format!("{name}.conv2"), sub, cout, cout, false),
            norm2: self.norm(&format!("{name}.norm2"), cout),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), sub, cin, cout, false)),
        }
    }
}

fn build_plan(cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> (Plan, Vec<Param>, Vec<Vec<f32>>) {
    let mut b = Builder { meta: Vec::new(), values: Vec::new(), rng };
    let sub = ConvKind::Submanifold;
    let c0 = cfg.channels(0);
    let input = b.conv("input", sub, cfg.in_channels(), c0, false);
    let mut ch = c0;
    let mut skips = vec![ch];
    let mut enc = Vec::new();
    let mut down = Vec::new();
    for level in 0..cfg.depth {
        let mut blocks = Vec::new();
        for j in 0..cfg.blocks_per_level {
            blocks.push(b.block(&format!("enc{level}.{j}"), ch, cfg.channels(level)));
            ch = cfg.channels(level);
            skips.push(ch);
        }
        enc.push(blocks);
        if level + 1 < cfg.depth {
            down.push(b.conv(&format!("down{level}"), ConvKind::Down, ch, ch, false));
            skips.push(ch);
        }
    }
    let middle = (0..2).map(|j| b.block(&format!("mid.{j}"), ch, ch)).collect();
    let mut dec = vec![Vec::new(); cfg.depth];
    let mut up = vec![None; cfg.depth.saturating_sub(1)];
    for level in (0..cfg.depth).rev() {
        for j in 0..=cfg.blocks_per_level {
            let s = skips.pop().expect("skip stack balanced");
            dec[level].push(b.block(&format!("dec{level}.{j}"), ch + s, cfg.channels(level)));
            ch = cfg.channels(level);
        }
        if level > 0 {
            up[level - 1] = Some(b.conv(&format!("up{}", level - 1), ConvKind::Up, ch, ch, false));
        }
    }
    let out_norm = b.norm("out.norm", ch);
    let head = b.conv("head", sub, ch, cfg.out_channels(), true);
    let plan = Plan { input, enc, down, middle, dec, up: up.into_iter().map(|u| u.unwrap()).collect(), out_norm, head };
    (plan, b.meta, b.values)
}

/// How normalization layers obtain their statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics over the active cells (training).
    Batch,
    /// Running statistics (inference).
    Running,
}

/// Network input on the evaluation coordinates: row `i` holds
/// `[z (K), occupancy, conditioning mask]` for `coords[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetInput<S> {
    pub coords: Vec<Coord>,
    pub features: Vec<S>,
}

/// Outputs and the recorded graph of one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardPass<S> {
    pub coords: Vec<Coord>,
    /// `n x (1 + K)`: occupancy logit followed by the feature mean.
    pub head: Vec<S>,
    out_channels: usize,
    tape: Tape<S>,
    head_node: NodeId,
    version: u64,
    mode: BnMode,
    stats: Vec<(NormL, BnStats<S>)>,
}

impl<S: Scalar> ForwardPass<S> {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn logit(&self, i: usize) -> S {
        self.head[i * self.out_channels]
    }

    pub fn lambda(&self, i: usize) -> S {
        S::one() / (S::one() + (-self.logit(i)).exp())
    }

    pub fn mu(&self, i: usize) -> &[S] {
        &self.head[i * self.out_channels + 1..(i + 1) * self.out_channels]
    }

    pub fn relu_pattern(&self) -> Vec<bool> {
        self.tape.relu_pattern()
    }
}

/// Transition-kernel network parameters plus running statistics.
#[derive(Debug, Clone)]
pub struct TransitionKernelModel<S = f32> {
    pub config: NetworkConfig,
    params: Vec<Param>,
    values: Vec<Vec<S>>,
    plan: Plan,
    version: u64,
}

impl<S: Scalar> PartialEq for TransitionKernelModel<S> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params && self.values == other.values
    }
}

impl TransitionKernelModel<f32> {
    /// Fan-in uniform initialization; output heads start at zero.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (plan, params, values) = build_plan(&config, &mut rng);
        Ok(Self { config, params, values, plan, version: 0 })
    }
}

impl<S: Scalar> TransitionKernelModel<S> {
    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn values(&self) -> &[Vec<S>] {
        &self.values
    }

    /// Mutable tensors; bumps the version so that outstanding passes go stale.
    pub fn values_mut(&mut self) -> &mut [Vec<S>] {
        self.version += 1;
        &mut self.values
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn param_count(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().zip(&self.values).filter(|(p, _)| p.trainable).map(|(_, v)| v.len()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> TransitionKernelModel<T> {
        TransitionKernelModel {
            config: self.config,
            params: self.params.clone(),
            values: self.values.iter().map(|v| v.iter().map(|x| T::of(x.f64())).collect()).collect(),
            plan: self.plan.clone(),
            version: self.version,
        }
    }

    /// Gives the zero-initialized heads random weights (used by sensitivity and gradient checks).
    pub fn randomize_heads(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, b) = (self.plan.head.w, self.plan.head.b);
        let fan_in = self.params[w].shape[0] * self.params[w].shape[1];
        let bound = 1.0 / (fan_in as f64).sqrt();
        for i in [w, b] {
            for v in self.values[i].iter_mut() {
                *v = S::of(rng.random_range(-bound..bound));
            }
        }
        self.version += 1;
    }

    pub(crate) fn replace_values(&mut self, values: Vec<Vec<S>>) -> Result<()> {
        if values.len() != self.values.len() || values.iter().zip(&self.values).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Shape("parameter table does not match the architecture".into()));
        }
        self.values = values;
        self.version += 1;
        Ok(())
    }

    pub fn forward(&self, input: &NetInput<S>, mode: BnMode) -> Result<ForwardPass<S>> {
        let cin = self.config.in_channels();
        if input.features.len() != input.coords.len() * cin {
            return Err(Error::Shape(format!(
                "input has {} values for {} cells x {cin} channels",
                input.features.len(),
                input.coords.len()
            )));
        }
        let depth = self.config.depth;
        let mut levels = vec![input.coords.clone()];
        for i in 1..depth {
            let next = parents(&levels[i - 1]);
            levels.push(next);
        }
        let sub: Vec<Arc<KernelMap>> = levels.iter().map(|c| Arc::new(KernelMap::submanifold(c))).collect();
        let down: Vec<Arc<KernelMap>> =
            (0..depth - 1).map(|i| Arc::new(KernelMap::down(&levels[i], &levels[i + 1]))).collect();
        let up: Vec<Arc<KernelMap>> =
            (0..depth - 1).map(|i| Arc::new(KernelMap::up(&levels[i + 1], &levels[i]))).collect();

        let mut run = Run { values: &self.values, tape: Tape::new(), mode, stats: Vec::new() };
        let p = &self.plan;
        let x = run.tape.leaf(cin, input.features.clone());
        let mut h = run.conv(x, p.input, &sub[0]);
        let mut skips = vec![h];
        for level in 0..depth {
            for blk in &p.enc[level] {
                h = run.block(h, blk, &sub[level]);
                skips.push(h);
            }
            if level + 1 < depth {
                h = run.conv(h, p.down[level], &down[level]);
                skips.push(h);
            }
        }
        for blk in &p.middle {
            h = run.block(h, blk, &sub[depth - 1]);
        }
        for level in (0..depth).rev() {
            for blk in &p.dec[level] {
                let s = skips.pop().expect("skip stack balanced");
                let cat = run.tape.concat(h, s);
                h = run.block(cat, blk, &sub[level]);
            }
            if level > 0 {
                h = run.conv(h, p.up[level - 1], &up[level - 1]);
            }
        }
        let n = run.norm(h, p.out_norm);
        let r = run.tape.relu(n);
        let head_node = run.conv(r, p.head, &sub[0]);
        Ok(ForwardPass {
            coords: input.coords.clone(),
            head: run.tape.value(head_node).to_vec(),
            out_channels: self.config.out_channels(),
            tape: run.tape,
            head_node,
            version: self.version,
            mode,
            stats: run.stats,
        })
    }

    /// Parameter gradients given gradients at the occupancy logits (`n`) and means (`n x K`).
    pub fn backward(&self, pass: &ForwardPass<S>, d_logit: &[S], d_mu: &[S]) -> Result<Vec<Vec<S>>> {
        Ok(self.backward_full(pass, d_logit, d_mu)?.0)
    }

    /// Like [`Self::backward`], also returning the gradient at the network input.
    pub fn backward_full(&self, pass: &ForwardPass<S>, d_logit: &[S], d_mu: &[S]) -> Result<(Vec<Vec<S>>, Vec<S>)> {
        if pass.version != self.version {
            return Err(Error::State("forward pass was recorded for a different parameter version".into()));
        }
        let n = pass.len();
        let k = self.config.feature_dim;
        if d_logit.len() != n || d_mu.len() != n * k {
            return Err(Error::Shape("output gradient shape mismatch".into()));
        }
        let mut seed = Vec::with_capacity(n * (k + 1));
        for i in 0..n {
            seed.push(d_logit[i]);
            seed.extend_from_slice(&d_mu[i * k..(i + 1) * k]);
        }
        let g = pass.tape.backward(&self.values, &[(pass.head_node, &seed)]);
        let dx = g.nodes[0].clone().unwrap_or_else(|| vec![S::zero(); n * self.config.in_channels()]);
        Ok((g.params, dx))
    }

    /// Folds the batch statistics of a training pass into the running statistics.
    pub fn commit_batch_stats(&mut self, pass: &ForwardPass<S>) -> Result<()> {
        if pass.mode != BnMode::Batch {
            return Err(Error::State("pass did not use batch statistics".into()));
        }
        let m = S::of(BN_MOMENTUM);
        for (norm, stats) in &pass.stats {
            for (r, b) in self.values[norm.mean].iter_mut().zip(&stats.mean) {
                *r = (S::one() - m) * *r + m * *b;
            }
            for (r, b) in self.values[norm.var].iter_mut().zip(&stats.var_unbiased) {
                *r = (S::one() - m) * *r + m * *b;
            }
        }
        Ok(())
    }
}

struct Run<'a, S> {
    values: &'a [Vec<S>],
    tape: Tape<S>,
    mode: BnMode,
    stats: Vec<(NormL, BnStats<S>)>,
}

impl<S: Scalar> Run<'_, S> {
    fn conv(&mut self, x: NodeId, c: ConvL, map: &Arc<KernelMap>) -> NodeId {
        debug_assert_eq!(map.kvol, c.kind.kvol());
        self.tape.conv(self.values, x, c.w, c.b, map.clone())
    }

    fn norm(&mut self, x: NodeId, n: NormL) -> NodeId {
        match self.mode {
            BnMode::Batch => {
                let (id, stats) = self.tape.norm_batch(self.values, x, n.gamma, n.beta);
                self.stats.push((n, stats));
                id
            }
            BnMode::Running => {
                let (mean, var) = (&self.values[n.mean], &self.values[n.var]);
                self.tape.norm_fixed(self.values, x, n.gamma, n.beta, mean, var)
            }
        }
    }

    /// conv-norm-ReLU twice, plus an identity (or 3³ projection) skip.
    fn block(&mut self, x: NodeId, b: &Block, map: &Arc<KernelMap>) -> NodeId {
        let h = self.conv(x, b.conv1, map);
        let h = self.norm(h, b.norm1);
        let h = self.tape.relu(h);
        let h = self.conv(h, b.conv2, map);
        let h = self.norm(h, b.norm2);
        let h = self.tape.relu(h);
        let s = match b.skip {
            Some(c) => self.conv(x, c, map),
            None => x,
        };
        self.tape.add(h, s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    pub(crate) fn random_input(seed: u64, n: usize, extent: i32, cfg: &NetworkConfig) -> NetInput<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = std::collections::BTreeSet::new();
        while s.len() < n {
            s.insert([rng.random_range(0..extent), rng.random_range(0..extent), rng.random_range(0..extent)]);
        }
        let coords: Vec<Coord> = s.into_iter().collect();
        let features = (0..n * cfg.in_channels()).map(|_| rng.random_range(-1.0..1.0)).collect();
        NetInput { coords, features }
    }

    #[test]
    fn zero_heads_give_half_and_zero() {
        let cfg = NetworkConfig::default();
        let m = TransitionKernelModel::new(cfg, 0).unwrap().cast::<f64>();
        let x = random_input(1, 50, 6, &cfg);
        let out = m.forward(&x, BnMode::Batch).unwrap();
        assert_eq!(out.coords, x.coords);
        assert_eq!(out.head.len(), 50 * 9);
        for i in 0..50 {
            assert_eq!(out.lambda(i), 0.5);
            assert!(out.mu(i).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn conditioning_channel_matters() {
        let cfg = NetworkConfig::default();
        let mut m = TransitionKernelModel::new(cfg, 3).unwrap().cast::<f64>();
        m.randomize_heads(4);
        let x = random_input(2, 80, 6, &cfg);
        let mut x2 = x.clone();
        let c = cfg.in_channels();
        for i in 0..80 {
            x2.features[i * c + c - 1] *= 2.0;
        }
        let a = m.forward(&x, BnMode::Batch).unwrap();
        let b = m.forward(&x2, BnMode::Batch).unwrap();
        assert!(a.head.iter().zip(&b.head).any(|(u, v)| (u - v).abs() > 1e-8));
    }

    #[test]
    fn stale_pass_is_rejected() {
        let cfg = NetworkConfig::with_depth(1);
        let mut m = TransitionKernelModel::new(cfg, 0).unwrap();
        let x = random_input(0, 10, 4, &cfg);
        let x = NetInput { coords: x.coords, features: x.features.iter().map(|&v| v as f32).collect() };
        let pass = m.forward(&x, BnMode::Batch).unwrap();
        m.values_mut();
        assert!(matches!(m.backward(&pass, &[0.0; 10], &[0.0; 80]), Err(Error::State(_))));
    }

    #[test]
    fn deterministic_forward_backward() {
        let cfg = NetworkConfig::default();
        let mut m = TransitionKernelModel::new(cfg, 11).unwrap();
        m.randomize_heads(12);
        let x = random_input(5, 200, 8, &cfg);
        let x = NetInput { coords: x.coords, features: x.features.iter().map(|&v| v as f32).collect() };
        let run = || {
            let p = m.forward(&x, BnMode::Batch).unwrap();
            let dl: Vec<f32> = (0..200).map(|i| (i as f32 * 0.37).sin()).collect();
            let dm: Vec<f32> = (0..1600).map(|i| (i as f32 * 0.11).cos()).collect();
            (p.head.clone(), m.backward(&p, &dl, &dm).unwrap())
        };
        let (h1, g1) = run();
        let (h2, g2) = run();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&h1), bits(&h2));
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn running_stats_move_toward_batch() {
        let cfg = NetworkConfig::with_depth(1);
        let mut m = TransitionKernelModel::new(cfg, 0).unwrap();
        let x = random_input(0, 30, 5, &cfg);
        let x = NetInput { coords: x.coords, features: x.features.iter().map(|&v| v as f32 + 3.0).collect() };
        let pass = m.forward(&x, BnMode::Batch).unwrap();
        let v = m.version();
        m.commit_batch_stats(&pass).unwrap();
        assert_eq!(m.version(), v);
        let i = m.params().iter().position(|p| p.name == "enc0.0.norm1.running_mean").unwrap();
        assert!(m.values()[i].iter().any(|&r| r != 0.0));
        let eval = m.forward(&x, BnMode::Running).unwrap();
        assert!(m.commit_batch_stats(&eval).is_err());
    }

    #[test]
    fn empty_input() {
        let cfg = NetworkConfig::default();
        let m = TransitionKernelModel::new(cfg, 0).unwrap();
        let out = m.forward(&NetInput { coords: vec![], features: vec![] }, BnMode::Batch).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn full_network_finite_differences() {
        let cfg = NetworkConfig::default();
        let mut m = TransitionKernelModel::new(cfg, 21).unwrap().cast::<f64>();
        m.randomize_heads(22);
        let x = random_input(23, 60, 6, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let wl: Vec<f64> = (0..60).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wm: Vec<f64> = (0..480).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |m: &TransitionKernelModel<f64>, x: &NetInput<f64>| {
            let p = m.forward(x, BnMode::Batch).unwrap();
            (0..60).map(|i| wl[i] * p.logit(i) + (0..8).map(|k| wm[i * 8 + k] * p.mu(i)[k]).sum::<f64>()).sum::<f64>()
        };
        let pass = m.forward(&x, BnMode::Batch).unwrap();
        let (grads, dx) = m.backward_full(&pass, &wl, &wm).unwrap();
        let h = 1e-5;
        let close = |a: f64, fd: f64| (a - fd).abs() <= 1e-4 * a.abs().max(fd.abs()) + 1e-9;
        for t in 0..m.params().len() {
            if !m.params()[t].trainable {
                continue;
            }
            for _ in 0..2 {
                let j = rng.random_range(0..m.values()[t].len());
                let mut mp = m.clone();
                mp.values_mut()[t][j] += h;
                let mut mm = m.clone();
                mm.values_mut()[t][j] -= h;
                let fd = (loss(&mp, &x) - loss(&mm, &x)) / (2.0 * h);
                assert!(close(grads[t][j], fd), "{}[{j}]: {} vs {fd}", m.params()[t].name, grads[t][j]);
            }
        }
        for _ in 0..20 {
            let j = rng.random_range(0..x.features.len());
            let mut xp = x.clone();
            xp.features[j] += h;
            let mut xm = x.clone();
            xm.features[j] -= h;
            let fd = (loss(&m, &xp) - loss(&m, &xm)) / (2.0 * h);
            assert!(close(dx[j], fd), "input[{j}]: {} vs {fd}", dx[j]);
        }
    }

    #[test]
    fn serialized_sizes_in_bands() {
        let mb = |d| {
            super::super::serialize_model(&TransitionKernelModel::new(NetworkConfig::with_depth(d), 0).unwrap()).len()
                as f64
                / 1e6
        };
        assert!((0.4..=2.0).contains(&mb(1)));
        assert!((2.0..=8.0).contains(&mb(2)));
    }
}
