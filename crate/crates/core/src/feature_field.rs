//! Feature reduction and quantization: per-half PCA down to 8 dimensions,
//! unit-norm re-normalization of each half, k-means clustering and cluster
//! selection masks.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::splat_io::SplatCloud;
use crate::{Error, Feature, Result, FEATURE_DIM, HALF_DIM};

/// Mean plus the top-k principal directions of a sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// `k` orthonormal rows of length `D`.
    pub components: Vec<Vec<f64>>,
    /// Non-increasing variances along each component.
    pub explained_variance: Vec<f64>,
}

impl PcaBasis {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.components.iter().map(|c| c.iter().zip(x).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum()).collect()
    }

    pub fn reconstruct(&self, y: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &w) in self.components.iter().zip(y) {
            for (o, v) in out.iter_mut().zip(c) {
                *o += w * v;
            }
        }
        out
    }
}

/// Fits the top-`k` principal components of the rows of `samples` (`M x D`).
pub fn fit_pca(samples: &DMatrix<f64>, k: usize) -> Result<PcaBasis> {
    let (m, d) = samples.shape();
    if k == 0 || k > m.min(d) {
        return Err(Error::Dimension(format!("cannot fit {k} components to {m} samples of dimension {d}")));
    }
    let mean: DVector<f64> = samples.row_mean().transpose();
    let mut centered = samples.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let denom = if m > 1 { (m - 1) as f64 } else { 1.0 };
    let cov = (centered.transpose() * &centered) / denom;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = Vec::with_capacity(k);
    let mut explained_variance = Vec::with_capacity(k);
    for &j in order.iter().take(k) {
        let mut v: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
        // Sign convention: the largest-magnitude entry is positive.
        let pivot = v.iter().enumerate().fold(0, |best, (i, x)| if x.abs() > v[best].abs() + 1e-12 { i } else { best });
        if v[pivot] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        explained_variance.push(eig.eigenvalues[j].max(0.0));
    }
    Ok(PcaBasis { mean: mean.iter().copied().collect(), components, explained_variance })
}

/// Split of the reduced feature into an appearance and a semantic half.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub appearance_dims: usize,
    pub semantic_dims: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { appearance_dims: HALF_DIM, semantic_dims: HALF_DIM }
    }
}

impl FeatureConfig {
    pub fn total(&self) -> usize {
        self.appearance_dims + self.semantic_dims
    }
}

/// Scales each half of `f` to unit L2 norm; zero halves stay zero.
pub fn normalize_halves(f: &mut [f64; FEATURE_DIM]) {
    for half in f.chunks_mut(HALF_DIM) {
        let n = half.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            half.iter_mut().for_each(|v| *v /= n);
        }
    }
}

/// Projects appearance (and optionally semantic) inputs and normalizes each half.
///
/// Without a semantic basis the semantic half is filled with appearance
/// components `4..8`, so `basis_app` must then carry 8 components (missing
/// components read as zero).
pub fn project_and_normalize(
    appearance: &DMatrix<f64>,
    semantic: Option<&DMatrix<f64>>,
    basis_app: &PcaBasis,
    basis_sem: Option<&PcaBasis>,
    cfg: &FeatureConfig,
) -> Result<Vec<Feature>> {
    if cfg.total() != FEATURE_DIM || cfg.appearance_dims != HALF_DIM {
        return Err(Error::Parameter(format!("feature split must be {HALF_DIM}+{HALF_DIM}")));
    }
    let n = appearance.nrows();
    if appearance.ncols() != basis_app.dim() {
        return Err(Error::Shape("appearance inputs do not match basis".into()));
    }
    let sem = match (semantic, basis_sem) {
        (Some(s), Some(b)) => {
            if s.nrows() != n || s.ncols() != b.dim() {
                return Err(Error::Shape("semantic inputs do not match basis".into()));
            }
            Some((s, b))
        }
        (None, None) => None,
        _ => return Err(Error::Parameter("semantic inputs and basis must be given together".into())),
    };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row: Vec<f64> = appearance.row(i).iter().copied().collect();
        let pa = basis_app.project(&row);
        let mut f = [0.0f64; FEATURE_DIM];
        for j in 0..HALF_DIM {
            f[j] = pa.get(j).copied().unwrap_or(0.0);
        }
        match sem {
            Some((s, b)) => {
                let row: Vec<f64> = s.row(i).iter().copied().collect();
                let ps = b.project(&row);
                for j in 0..HALF_DIM {
                    f[HALF_DIM + j] = ps.get(j).copied().unwrap_or(0.0);
                }
            }
            None => {
                for j in 0..HALF_DIM {
                    f[HALF_DIM + j] = pa.get(HALF_DIM + j).copied().unwrap_or(0.0);
                }
            }
        }
        normalize_halves(&mut f);
        out.push(f.map(|v| v as f32));
    }
    Ok(out)
}

/// Fitted reduction for one primitive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureReducer {
    pub config: FeatureConfig,
    pub appearance: PcaBasis,
    pub semantic: Option<PcaBasis>,
    /// Set when no raw features were available and the semantic half holds
    /// appearance components 4..8.
    pub semantic_substituted: bool,
}

fn appearance_matrix(cloud: &SplatCloud) -> DMatrix<f64> {
    DMatrix::from_fn(cloud.len(), 48, |i, j| cloud.sh_flat(i)[j] as f64)
}

fn semantic_matrix(cloud: &SplatCloud) -> Option<DMatrix<f64>> {
    cloud.raw_features.as_ref().map(|f| DMatrix::from_fn(f.rows, f.dim, |i, j| f.row(i)[j] as f64))
}

/// Deterministic stride subsample of at most `max` rows.
fn subsample(m: &DMatrix<f64>, max: usize) -> DMatrix<f64> {
    if m.nrows() <= max {
        return m.clone();
    }
    let idx: Vec<usize> = (0..max).map(|i| i * m.nrows() / max).collect();
    m.select_rows(idx.iter())
}

const MAX_FIT_SAMPLES: usize = 20_000;

impl FeatureReducer {
    pub fn fit(cloud: &SplatCloud, config: FeatureConfig) -> Result<Self> {
        if cloud.is_empty() {
            return Err(Error::Parameter("cannot fit features on an empty cloud".into()));
        }
        let app = subsample(&appearance_matrix(cloud), MAX_FIT_SAMPLES);
        let sem = semantic_matrix(cloud).map(|s| subsample(&s, MAX_FIT_SAMPLES));
        let want_app = if sem.is_some() { config.appearance_dims } else { config.total() };
        let k_app = want_app.min(app.nrows()).min(app.ncols());
        let appearance = fit_pca(&app, k_app)?;
        let semantic = match &sem {
            Some(s) => Some(fit_pca(s, config.semantic_dims.min(s.nrows()).min(s.ncols()))?),
            None => None,
        };
        Ok(Self { config, appearance, semantic_substituted: semantic.is_none(), semantic })
    }

    pub fn reduce(&self, cloud: &SplatCloud) -> Result<Vec<Feature>> {
        let app = appearance_matrix(cloud);
        let sem = if self.semantic.is_some() {
            Some(semantic_matrix(cloud).ok_or_else(|| Error::State("cloud lacks raw features".into()))?)
        } else {
            None
        };
        project_and_normalize(&app, sem.as_ref(), &self.appearance, self.semantic.as_ref(), &self.config)
    }
}

/// Result of [`kmeans_quantize`].
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub labels: Vec<u32>,
    /// `k x dim`, row-major.
    pub centroids: Vec<f64>,
    pub dim: usize,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
}

impl KMeans {
    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim.max(1)
    }

    pub fn inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(0.0)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[f64], dim: usize) -> (u32, f64) {
    let mut best = (0u32, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j as u32, d);
        }
    }
    best
}

fn assign(data: &[f64], dim: usize, centroids: &[f64]) -> Vec<(u32, f64)> {
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_exact(dim).map(|p| nearest(p, centroids, dim)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_exact(dim).map(|p| nearest(p, centroids, dim)).collect()
    }
}

const KMEANS_MAX_ITERS: usize = 100;

/// Lloyd's k-means over `data` (`N x dim`, row-major), seeded by farthest-point
/// selection from a random first center.
pub fn kmeans_quantize(data: &[f64], dim: usize, k: usize, seed: u64) -> Result<KMeans> {
    if dim == 0 || data.len() % dim != 0 {
        return Err(Error::Shape("data length is not a multiple of dim".into()));
    }
    let n = data.len() / dim;
    if k == 0 || k > n {
        return Err(Error::Parameter(format!("k must be in 1..={n}, got {k}")));
    }
    let point = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.random_range(0..n);
    let mut centroids = point(first).to_vec();
    let mut min_d: Vec<f64> = (0..n).map(|i| sq_dist(point(i), point(first))).collect();
    for _ in 1..k {
        let mut far = 0;
        for i in 1..n {
            if min_d[i] > min_d[far] {
                far = i;
            }
        }
        centroids.extend_from_slice(point(far));
        for i in 0..n {
            min_d[i] = min_d[i].min(sq_dist(point(i), point(far)));
        }
    }

    let mut labels: Vec<u32> = Vec::new();
    let mut history = Vec::new();
    for _ in 0..KMEANS_MAX_ITERS {
        let assigned = assign(data, dim, &centroids);
        let new_labels: Vec<u32> = assigned.iter().map(|a| a.0).collect();
        history.push(assigned.iter().map(|a| a.1).sum());
        if new_labels == labels {
            break;
        }
        labels = new_labels;
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l as usize] += 1;
            for (s, v) in sums[l as usize * dim..(l as usize + 1) * dim].iter_mut().zip(point(i)) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                for a in 0..dim {
                    centroids[j * dim + a] = sums[j * dim + a] / counts[j] as f64;
                }
            }
        }
    }
    Ok(KMeans { labels, centroids, dim, inertia_history: history })
}

/// Boolean mask over the points of a cloud.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionMask(pub Vec<bool>);

impl SelectionMask {
    pub fn empty(n: usize) -> Self {
        Self(vec![false; n])
    }

    pub fn full(n: usize) -> Self {
        Self(vec![true; n])
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.0.iter().enumerate().filter_map(|(i, &b)| b.then_some(i)).collect()
    }

    pub fn union(&self, other: &Self) -> Self {
        Self(self.0.iter().zip(&other.0).map(|(a, b)| *a || *b).collect())
    }

    pub fn difference(&self, other: &Self) -> Self {
        Self(self.0.iter().zip(&other.0).map(|(a, b)| *a && !*b).collect())
    }

    /// Manually adds / removes individual points.
    pub fn with_edits(mut self, add: &[usize], remove: &[usize]) -> Self {
        for &i in add {
            if let Some(b) = self.0.get_mut(i) {
                *b = true;
            }
        }
        for &i in remove {
            if let Some(b) = self.0.get_mut(i) {
                *b = false;
            }
        }
        self
    }
}

/// Mask of the points whose label is in `chosen`.
pub fn select_by_clusters(labels: &[u32], k: usize, chosen: &[u32]) -> Result<SelectionMask> {
    if let Some(bad) = chosen.iter().find(|&&c| c as usize >= k) {
        return Err(Error::Parameter(format!("unknown cluster label {bad} (k = {k})")));
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::Parameter(format!("label {bad} out of range for k = {k}")));
    }
    let mut wanted = vec![false; k];
    for &c in chosen {
        wanted[c as usize] = true;
    }
    Ok(SelectionMask(labels.iter().map(|&l| wanted[l as usize]).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rows(data: &[[f64; 2]]) -> DMatrix<f64> {
        DMatrix::from_fn(data.len(), 2, |i, j| data[i][j])
    }

    #[test]
    fn line_first_component() {
        let pts: Vec<[f64; 2]> = (0..10).map(|i| [i as f64, 2.0 * i as f64]).collect();
        let b = fit_pca(&rows(&pts), 1).unwrap();
        let s5 = 5f64.sqrt();
        assert!((b.components[0][0] - 1.0 / s5).abs() < 1e-9);
        assert!((b.components[0][1] - 2.0 / s5).abs() < 1e-9);
    }

    #[test]
    fn affine_subspace_reconstructs_exactly() {
        // Points on the plane z = 1 + x - 2y in 3D.
        let m = DMatrix::from_fn(12, 3, |i, j| {
            let (x, y) = ((i % 4) as f64, (i / 4) as f64 * 0.7);
            [x, y, 1.0 + x - 2.0 * y][j]
        });
        let b = fit_pca(&m, 2).unwrap();
        for i in 0..12 {
            let row: Vec<f64> = m.row(i).iter().copied().collect();
            let r = b.reconstruct(&b.project(&row));
            for (a, e) in r.iter().zip(&row) {
                assert!((a - e).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn full_rank_preserves_distances() {
        let m = DMatrix::from_fn(8, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 - 0.3 * j as f64);
        let b = fit_pca(&m, 4).unwrap();
        let proj: Vec<Vec<f64>> = (0..8).map(|i| b.project(&m.row(i).iter().copied().collect::<Vec<_>>())).collect();
        for i in 0..8 {
            for j in 0..8 {
                let d0 = (m.row(i) - m.row(j)).norm();
                let d1 = sq_dist(&proj[i], &proj[j]).sqrt();
                assert!((d0 - d1).abs() < 1e-6);
            }
        }
        for r in b.components.iter() {
            let n: f64 = r.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert!(b.explained_variance.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn too_many_components() {
        let m = DMatrix::from_element(3, 2, 1.0);
        assert!(matches!(fit_pca(&m, 3), Err(Error::Dimension(_))));
    }

    #[test]
    fn normalize_examples() {
        let mut f = [3.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        normalize_halves(&mut f);
        assert_eq!(f, [0.6, 0.8, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn kmeans_single_cluster_is_mean() {
        let data = [0.0, 0.0, 2.0, 0.0, 1.0, 3.0];
        let r = kmeans_quantize(&data, 2, 1, 0).unwrap();
        assert!((r.centroids[0] - 1.0).abs() < 1e-12 && (r.centroids[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kmeans_k_equals_n() {
        let data = [0.0, 1.0, 5.0, 2.0, 9.0, 4.5];
        let r = kmeans_quantize(&data, 1, 6, 3).unwrap();
        assert_eq!(r.inertia(), 0.0);
        let mut l = r.labels.clone();
        l.sort();
        l.dedup();
        assert_eq!(l.len(), 6);
    }

    #[test]
    fn kmeans_errors() {
        assert!(kmeans_quantize(&[1.0, 2.0], 1, 0, 0).is_err());
        assert!(kmeans_quantize(&[1.0, 2.0], 1, 3, 0).is_err());
    }

    #[test]
    fn selection_sets() {
        let labels = [0, 1, 2, 1, 0];
        assert_eq!(select_by_clusters(&labels, 3, &[0, 1, 2]).unwrap(), SelectionMask::full(5));
        assert_eq!(select_by_clusters(&labels, 3, &[]).unwrap(), SelectionMask::empty(5));
        let a = select_by_clusters(&labels, 3, &[0]).unwrap();
        let b = select_by_clusters(&labels, 3, &[2]).unwrap();
        assert_eq!(a.union(&b), select_by_clusters(&labels, 3, &[0, 2]).unwrap());
        assert!(select_by_clusters(&labels, 3, &[3]).is_err());
        let m = a.with_edits(&[1], &[0]);
        assert_eq!(m.indices(), vec![1, 4]);
    }

    proptest! {
        #[test]
        fn halves_have_unit_or_zero_norm(
            app in prop::collection::vec(-5.0f64..5.0, 48 * 12),
            sem in prop::collection::vec(-5.0f64..5.0, 16 * 12),
        ) {
            let a = DMatrix::from_row_slice(12, 48, &app);
            let s = DMatrix::from_row_slice(12, 16, &sem);
            let ba = fit_pca(&a, 4).unwrap();
            let bs = fit_pca(&s, 4).unwrap();
            let out = project_and_normalize(&a, Some(&s), &ba, Some(&bs), &FeatureConfig::default()).unwrap();
            for f in out {
                for half in f.chunks(HALF_DIM) {
                    let n = half.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
                    prop_assert!(n.abs() < 1e-6 || (n - 1.0).abs() < 1e-6);
                    prop_assert!(half.iter().all(|v| v.abs() <= 1.0));
                }
            }
        }

        #[test]
        fn reconstruction_error_non_increasing_in_k(data in prop::collection::vec(-3.0f64..3.0, 10 * 5)) {
            let m = DMatrix::from_row_slice(10, 5, &data);
            let mut prev = f64::INFINITY;
            for k in 1..=5 {
                let b = fit_pca(&m, k).unwrap();
                let err: f64 = (0..10).map(|i| {
                    let row: Vec<f64> = m.row(i).iter().copied().collect();
                    sq_dist(&b.reconstruct(&b.project(&row)), &row)
                }).sum();
                prop_assert!(err <= prev + 1e-9);
                prev = err;
            }
        }

        #[test]
        fn kmeans_inertia_monotone_and_seed_deterministic(
            data in prop::collection::vec(-10.0f64..10.0, 2 * 40),
            k in 1usize..6,
            seed in 0u64..1000,
        ) {
            let a = kmeans_quantize(&data, 2, k, seed).unwrap();
            let b = kmeans_quantize(&data, 2, k, seed).unwrap();
            prop_assert_eq!(&a.labels, &b.labels);
            prop_assert!(a.inertia_history.windows(2).all(|w| w[1] <= w[0] + 1e-9));
        }
    }
}
