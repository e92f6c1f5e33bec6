//! Quality-aware diversity kernel and exact k-DPP sampling.
//!
//! `I_ij = exp(β q̃_i) · exp(β q̃_j) · κ(φ_i, φ_j)` with an RBF κ whose
//! bandwidth defaults to the median pairwise squared distance. Subsets of
//! size K are drawn with probability proportional to `det(I_S)`, either by
//! enumerating every subset or, for large ground sets, with the spectral
//! two-phase sampler.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{normalize_counts, FeatureVector};

/// Above this many K-subsets the spectral sampler is used.
pub const ENUMERATION_LIMIT: u128 = 10_000;
/// Subset determinants at or below this are treated as zero.
pub const DET_FLOOR: f64 = 1e-12;
/// Eigenvalues below this are clamped to zero.
pub const EIG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectionError {
    #[error("no candidates")]
    Empty,
    #[error("{features} feature vectors but {qualities} quality scores")]
    LengthMismatch { features: usize, qualities: usize },
    #[error("non-finite value in feature vector {0}")]
    NonFiniteFeature(usize),
    #[error("non-finite quality score at {0}")]
    NonFiniteQuality(usize),
    #[error("feature vectors have different dimensions")]
    RaggedFeatures,
    #[error("subset size {k} invalid for {m} candidates")]
    InvalidSubsetSize { k: usize, m: usize },
    #[error("kernel is not square and symmetric")]
    NotSymmetric,
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Bandwidth {
    /// σ² = median pairwise squared distance, or 1 when that is 0.
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelMatrix {
    pub entries: DMatrix<f64>,
    pub beta: f64,
    pub sigma2: f64,
    /// Embeddings the similarity was computed on.
    pub features: Vec<Vec<f64>>,
    pub q_tilde: Vec<f64>,
}

impl KernelMatrix {
    /// Wraps a precomputed kernel. `q_tilde` drives the degenerate fallback.
    pub fn from_entries(entries: DMatrix<f64>, q_tilde: Vec<f64>) -> Result<Self, SelectionError> {
        if !entries.is_square() || entries.nrows() != q_tilde.len() {
            return Err(SelectionError::NotSymmetric);
        }
        if entries.nrows() == 0 {
            return Err(SelectionError::Empty);
        }
        let n = entries.nrows();
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (entries[(i, j)], entries[(j, i)]);
                if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                    return Err(SelectionError::NotSymmetric);
                }
            }
        }
        Ok(Self {
            entries,
            beta: 0.0,
            sigma2: 1.0,
            features: Vec::new(),
            q_tilde,
        })
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.entries.clone())
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn principal_minor(&self, subset: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(subset.len(), subset.len(), |r, c| self.entries[(subset[r], subset[c])])
    }

    pub fn subset_det(&self, subset: &[usize]) -> f64 {
        if subset.is_empty() {
            return 1.0;
        }
        self.principal_minor(subset).determinant()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    })
}

/// Kernel over structural features. Count features are z-normalized across
/// the candidates first.
pub fn build_kernel(
    features: &[FeatureVector],
    q_tilde: &[f64],
    beta: f64,
) -> Result<KernelMatrix, SelectionError> {
    for (i, f) in features.iter().enumerate() {
        if !f.is_finite() {
            return Err(SelectionError::NonFiniteFeature(i));
        }
    }
    build_kernel_from_vectors(&normalize_counts(features), q_tilde, beta, Bandwidth::Median)
}

pub fn build_kernel_from_vectors(
    vectors: &[Vec<f64>],
    q_tilde: &[f64],
    beta: f64,
    bandwidth: Bandwidth,
) -> Result<KernelMatrix, SelectionError> {
    let m = vectors.len();
    if m == 0 {
        return Err(SelectionError::Empty);
    }
    if q_tilde.len() != m {
        return Err(SelectionError::LengthMismatch {
            features: m,
            qualities: q_tilde.len(),
        });
    }
    let dim = vectors[0].len();
    for (i, v) in vectors.iter().enumerate() {
        if v.len() != dim {
            return Err(SelectionError::RaggedFeatures);
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(SelectionError::NonFiniteFeature(i));
        }
        if !q_tilde[i].is_finite() {
            return Err(SelectionError::NonFiniteQuality(i));
        }
    }
    let sigma2 = match bandwidth {
        Bandwidth::Fixed(s) => s,
        Bandwidth::Median => {
            let mut d = Vec::with_capacity(m * (m - 1) / 2);
            for i in 0..m {
                for j in (i + 1)..m {
                    d.push(sq_dist(&vectors[i], &vectors[j]));
                }
            }
            match median(d) {
                Some(med) if med > 0.0 => med,
                _ => 1.0,
            }
        }
    };
    let weight: Vec<f64> = q_tilde.iter().map(|q| (beta * q).exp()).collect();
    let mut entries = DMatrix::zeros(m, m);
    for i in 0..m {
        entries[(i, i)] = weight[i] * weight[i];
        for j in (i + 1)..m {
            let k = (-sq_dist(&vectors[i], &vectors[j]) / (2.0 * sigma2)).exp();
            let v = weight[i] * weight[j] * k;
            entries[(i, j)] = v;
            entries[(j, i)] = v;
        }
    }
    Ok(KernelMatrix {
        entries,
        beta,
        sigma2,
        features: vectors.to_vec(),
        q_tilde: q_tilde.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    FullSet,
    Enumeration,
    Spectral,
    DegenerateFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetSample {
    /// Sorted 0-based candidate indices.
    pub indices: Vec<usize>,
    /// `ln det(I_S)`, absent when the determinant is not positive.
    pub log_det: Option<f64>,
    pub rng_seed: Option<u64>,
    pub method: SamplerKind,
    pub degenerate_kernel: bool,
}

/// `C(n, k)`, saturating.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    acc
}

/// All K-subsets of `0..n` in lexicographic order.
pub fn k_subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut cur: Vec<usize> = (0..k).collect();
    loop {
        out.push(cur.clone());
        let Some(i) = (0..k).rev().find(|&i| cur[i] < n - k + i) else {
            return out;
        };
        cur[i] += 1;
        for j in (i + 1)..k {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

/// Top-K by q̃, ties by lowest index, returned sorted.
pub fn degenerate_fallback(q_tilde: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..q_tilde.len()).collect();
    order.sort_by(|&a, &b| q_tilde[b].total_cmp(&q_tilde[a]).then(a.cmp(&b)));
    let mut pick: Vec<usize> = order.into_iter().take(k).collect();
    pick.sort_unstable();
    pick
}

fn check_k(kernel: &KernelMatrix, k: usize) -> Result<(), SelectionError> {
    let m = kernel.size();
    if k == 0 || k > m {
        return Err(SelectionError::InvalidSubsetSize { k, m });
    }
    Ok(())
}

fn log_det(kernel: &KernelMatrix, subset: &[usize]) -> Option<f64> {
    let d = kernel.subset_det(subset);
    (d > 0.0).then(|| d.ln())
}

/// Exact k-DPP by enumerating every K-subset.
#[derive(Debug, Clone)]
pub struct ExactKdpp {
    subsets: Vec<Vec<usize>>,
    weights: Vec<f64>,
    total: f64,
}

impl ExactKdpp {
    pub fn new(kernel: &KernelMatrix, k: usize) -> Result<Self, SelectionError> {
        check_k(kernel, k)?;
        let subsets = k_subsets(kernel.size(), k);
        let weights: Vec<f64> = subsets
            .iter()
            .map(|s| kernel.subset_det(s).max(0.0))
            .collect();
        let total = weights.iter().sum();
        Ok(Self {
            subsets,
            weights,
            total,
        })
    }

    /// All subset determinants at or below [`DET_FLOOR`].
    pub fn is_degenerate(&self) -> bool {
        self.weights.iter().all(|&w| w <= DET_FLOOR)
    }

    /// `(subset, probability)` for every K-subset.
    pub fn probabilities(&self) -> Vec<(Vec<usize>, f64)> {
        self.subsets
            .iter()
            .zip(&self.weights)
            .map(|(s, w)| (s.clone(), if self.total > 0.0 { w / self.total } else { 0.0 }))
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let target = rng.gen::<f64>() * self.total;
        let mut acc = 0.0;
        for (s, w) in self.subsets.iter().zip(&self.weights) {
            acc += w;
            if target < acc {
                return s.clone();
            }
        }
        // rounding at the top end
        let last = self
            .weights
            .iter()
            .rposition(|&w| w > 0.0)
            .unwrap_or(self.subsets.len() - 1);
        self.subsets[last].clone()
    }
}

/// Two-phase spectral k-DPP sampler (eigenvector selection through
/// elementary symmetric polynomials, then sequential projection sampling).
#[derive(Debug, Clone)]
pub struct SpectralKdpp {
    k: usize,
    eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<f64>,
    /// `esp[l][n]` = e_l of the first n scaled eigenvalues.
    esp: Vec<Vec<f64>>,
    /// e_K of the unscaled eigenvalues.
    e_k: f64,
}

impl SpectralKdpp {
    pub fn new(kernel: &KernelMatrix, k: usize) -> Result<Self, SelectionError> {
        check_k(kernel, k)?;
        let eig = SymmetricEigen::new(kernel.entries.clone());
        let raw: Vec<f64> = eig
            .eigenvalues
            .iter()
            .map(|&l| if l < EIG_FLOOR { 0.0 } else { l })
            .collect();
        let scale = raw.iter().copied().fold(0.0, f64::max);
        let lambda: Vec<f64> = if scale > 0.0 {
            raw.iter().map(|l| l / scale).collect()
        } else {
            raw.clone()
        };
        let n = lambda.len();
        let mut esp = vec![vec![0.0; n + 1]; k + 1];
        esp[0] = vec![1.0; n + 1];
        for l in 1..=k {
            for i in 1..=n {
                esp[l][i] = esp[l][i - 1] + lambda[i - 1] * esp[l - 1][i - 1];
            }
        }
        let e_k = esp[k][n] * scale.powi(k as i32);
        Ok(Self {
            k,
            eigenvalues: lambda,
            eigenvectors: eig.eigenvectors,
            esp,
            e_k,
        })
    }

    /// `e_K(λ) ≤ DET_FLOOR`; since e_K sums every K-subset determinant this
    /// implies each of them is at or below the floor.
    pub fn is_degenerate(&self) -> bool {
        !(self.e_k > DET_FLOOR)
    }

    fn select_eigenvectors<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let mut picked = Vec::with_capacity(self.k);
        let mut l = self.k;
        for n in (1..=self.eigenvalues.len()).rev() {
            if l == 0 {
                break;
            }
            let denom = self.esp[l][n];
            let p = if denom > 0.0 {
                self.eigenvalues[n - 1] * self.esp[l - 1][n - 1] / denom
            } else {
                0.0
            };
            if n == l || rng.gen::<f64>() < p {
                picked.push(n - 1);
                l -= 1;
            }
        }
        picked
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let cols = self.select_eigenvectors(rng);
        let n = self.eigenvectors.nrows();
        let mut basis: Vec<DVector<f64>> = cols
            .iter()
            .map(|&c| self.eigenvectors.column(c).into_owned())
            .collect();
        let mut chosen = Vec::with_capacity(self.k);
        while !basis.is_empty() {
            let weights: Vec<f64> = (0..n)
                .map(|i| {
                    if chosen.contains(&i) {
                        0.0
                    } else {
                        basis.iter().map(|v| v[i] * v[i]).sum::<f64>()
                    }
                })
                .collect();
            let total: f64 = weights.iter().sum();
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut item = weights.iter().rposition(|&w| w > 0.0).unwrap_or(0);
            for (i, w) in weights.iter().enumerate() {
                acc += w;
                if target < acc {
                    item = i;
                    break;
                }
            }
            chosen.push(item);
            // eliminate the coordinate of `item` using the vector with the
            // largest entry there, then re-orthonormalize the rest
            let pivot = (0..basis.len())
                .max_by(|&a, &b| basis[a][item].abs().total_cmp(&basis[b][item].abs()))
                .expect("nonempty basis");
            let pv = basis.swap_remove(pivot);
            let pval = pv[item];
            for v in basis.iter_mut() {
                let f = v[item] / pval;
                *v -= &pv * f;
            }
            basis = gram_schmidt(basis);
        }
        chosen.sort_unstable();
        chosen
    }
}

fn gram_schmidt(vs: Vec<DVector<f64>>) -> Vec<DVector<f64>> {
    let mut out: Vec<DVector<f64>> = Vec::with_capacity(vs.len());
    for mut v in vs {
        for u in &out {
            let d = u.dot(&v);
            v -= u * d;
        }
        let norm = v.norm();
        if norm > 1e-10 {
            out.push(v / norm);
        }
    }
    out
}

fn finish(
    kernel: &KernelMatrix,
    indices: Vec<usize>,
    method: SamplerKind,
    degenerate: bool,
) -> SubsetSample {
    SubsetSample {
        log_det: log_det(kernel, &indices),
        indices,
        rng_seed: None,
        method,
        degenerate_kernel: degenerate,
    }
}

/// Draws one size-K subset with probability proportional to `det(I_S)`.
///
/// Enumerates when `C(M, K) <= 10_000`, otherwise uses [`eig_kdpp`]. When
/// every subset determinant is at or below 1e-12, falls back to the top-K
/// candidates by q̃ and flags the sample.
pub fn kdpp_sample<R: Rng + ?Sized>(
    kernel: &KernelMatrix,
    k: usize,
    rng: &mut R,
) -> Result<SubsetSample, SelectionError> {
    check_k(kernel, k)?;
    let m = kernel.size();
    if k == m {
        let all: Vec<usize> = (0..m).collect();
        let degenerate = kernel.subset_det(&all) <= DET_FLOOR;
        return Ok(finish(kernel, all, SamplerKind::FullSet, degenerate));
    }
    if binomial(m, k) > ENUMERATION_LIMIT {
        return eig_kdpp(kernel, k, rng);
    }
    let exact = ExactKdpp::new(kernel, k)?;
    if exact.is_degenerate() {
        let pick = degenerate_fallback(&kernel.q_tilde, k);
        return Ok(finish(kernel, pick, SamplerKind::DegenerateFallback, true));
    }
    let pick = exact.sample(rng);
    Ok(finish(kernel, pick, SamplerKind::Enumeration, false))
}

/// Spectral sampler regardless of ground-set size.
pub fn eig_kdpp<R: Rng + ?Sized>(
    kernel: &KernelMatrix,
    k: usize,
    rng: &mut R,
) -> Result<SubsetSample, SelectionError> {
    let spectral = SpectralKdpp::new(kernel, k)?;
    if spectral.is_degenerate() {
        let pick = degenerate_fallback(&kernel.q_tilde, k);
        return Ok(finish(kernel, pick, SamplerKind::DegenerateFallback, true));
    }
    let pick = spectral.sample(rng);
    Ok(finish(kernel, pick, SamplerKind::Spectral, false))
}

/// [`kdpp_sample`] with a fresh seeded generator; the seed is recorded.
pub fn kdpp_sample_seeded(kernel: &KernelMatrix, k: usize, seed: u64) -> Result<SubsetSample, SelectionError> {
    let mut rng = seeded_rng(seed);
    let mut s = kdpp_sample(kernel, k, &mut rng)?;
    s.rng_seed = Some(seed);
    Ok(s)
}

/// JSON-friendly selection dump for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionDump {
    pub task_id: String,
    pub candidates: Vec<usize>,
    pub kernel: Vec<Vec<f64>>,
    pub beta: f64,
    pub sigma2: f64,
    pub q_tilde: Vec<f64>,
    /// Present when the ground set is small enough to enumerate.
    pub subset_probabilities: Option<Vec<(Vec<usize>, f64)>>,
    pub sample: SubsetSample,
}

impl SelectionDump {
    pub fn new(task_id: &str, candidates: Vec<usize>, kernel: &KernelMatrix, k: usize, sample: SubsetSample) -> Self {
        let m = kernel.size();
        let probs = (k <= m && binomial(m, k) <= ENUMERATION_LIMIT)
            .then(|| ExactKdpp::new(kernel, k).ok().map(|e| e.probabilities()))
            .flatten();
        Self {
            task_id: task_id.to_string(),
            candidates,
            kernel: (0..m)
                .map(|i| (0..m).map(|j| kernel.entries[(i, j)]).collect())
                .collect(),
            beta: kernel.beta,
            sigma2: kernel.sigma2,
            q_tilde: kernel.q_tilde.clone(),
            subset_probabilities: probs,
            sample,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(values: &[f64]) -> KernelMatrix {
        let m = DMatrix::from_diagonal(&DVector::from_vec(values.to_vec()));
        KernelMatrix::from_entries(m, vec![0.0; values.len()]).unwrap()
    }

    #[test]
    fn single_candidate_kernel() {
        let k = build_kernel_from_vectors(&[vec![0.3, 1.0]], &[0.6], 1.5, Bandwidth::Median).unwrap();
        assert!((k.entries[(0, 0)] - (2.0f64 * 1.5 * 0.6).exp()).abs() < 1e-12);
    }

    #[test]
    fn identical_candidates_give_rank_one() {
        let v = vec![vec![1.0, 2.0]; 3];
        let k = build_kernel_from_vectors(&v, &[0.5; 3], 1.0, Bandwidth::Median).unwrap();
        for s in k_subsets(3, 2) {
            assert!(k.subset_det(&s).abs() < 1e-12);
        }
        let e = k.entries[(0, 0)];
        assert!(k.entries.iter().all(|x| (x - e).abs() < 1e-12));
    }

    #[test]
    fn two_candidates_at_two_sigma() {
        let k = build_kernel_from_vectors(
            &[vec![0.0, 0.0], vec![1.0, 1.0]],
            &[0.0, 0.0],
            1.0,
            Bandwidth::Fixed(1.0),
        )
        .unwrap();
        let e1 = (-1.0f64).exp();
        assert!((k.entries[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((k.entries[(0, 1)] - e1).abs() < 1e-15);
        assert!((k.entries[(1, 0)] - e1).abs() < 1e-15);
    }

    #[test]
    fn median_bandwidth() {
        let v = vec![vec![0.0], vec![1.0], vec![3.0]];
        // pairwise squared distances 1, 9, 4 -> median 4
        let k = build_kernel_from_vectors(&v, &[0.0; 3], 1.0, Bandwidth::Median).unwrap();
        assert_eq!(k.sigma2, 4.0);
        let k = build_kernel_from_vectors(&[vec![1.0], vec![1.0]], &[0.0; 2], 1.0, Bandwidth::Median).unwrap();
        assert_eq!(k.sigma2, 1.0);
    }

    #[test]
    fn non_finite_features_rejected() {
        let r = build_kernel_from_vectors(&[vec![f64::NAN]], &[0.0], 1.0, Bandwidth::Median);
        assert_eq!(r.unwrap_err(), SelectionError::NonFiniteFeature(0));
        let r = build_kernel_from_vectors(&[vec![0.0], vec![1.0]], &[0.0], 1.0, Bandwidth::Median);
        assert!(matches!(r, Err(SelectionError::LengthMismatch { .. })));
    }

    #[test]
    fn subsets_enumerated_in_order() {
        assert_eq!(
            k_subsets(4, 2),
            vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]
        );
        assert_eq!(k_subsets(3, 3), vec![vec![0, 1, 2]]);
        assert_eq!(k_subsets(5, 1).len(), 5);
        assert_eq!(binomial(30, 15), 155_117_520);
        assert_eq!(binomial(3, 4), 0);
    }

    #[test]
    fn full_set_is_certain() {
        let k = diag(&[1.0, 2.0, 3.0]);
        for seed in 0..20 {
            let s = kdpp_sample_seeded(&k, 3, seed).unwrap();
            assert_eq!(s.indices, vec![0, 1, 2]);
            assert_eq!(s.method, SamplerKind::FullSet);
        }
    }

    #[test]
    fn diagonal_probabilities_are_exact() {
        let probs = ExactKdpp::new(&diag(&[1.0, 2.0, 3.0]), 2).unwrap().probabilities();
        let expect = [2.0 / 11.0, 3.0 / 11.0, 6.0 / 11.0];
        for ((_, p), e) in probs.iter().zip(expect) {
            assert!((p - e).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_kernel_falls_back_to_quality() {
        let entries = DMatrix::from_element(3, 3, 1.0);
        let k = KernelMatrix::from_entries(entries, vec![0.9, 0.1, 0.5]).unwrap();
        let s = kdpp_sample_seeded(&k, 2, 1).unwrap();
        assert_eq!(s.indices, vec![0, 2]);
        assert!(s.degenerate_kernel);
        assert_eq!(s.method, SamplerKind::DegenerateFallback);
        let s = eig_kdpp(&k, 2, &mut seeded_rng(1)).unwrap();
        assert_eq!(s.indices, vec![0, 2]);
    }

    #[test]
    fn invalid_k() {
        let k = diag(&[1.0, 2.0]);
        assert!(kdpp_sample_seeded(&k, 0, 0).is_err());
        assert!(kdpp_sample_seeded(&k, 3, 0).is_err());
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let k = diag(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let a: Vec<_> = (0..50).map(|s| kdpp_sample_seeded(&k, 2, s).unwrap()).collect();
        let b: Vec<_> = (0..50).map(|s| kdpp_sample_seeded(&k, 2, s).unwrap()).collect();
        assert_eq!(a, b);
        let mut r1 = seeded_rng(9);
        let mut r2 = seeded_rng(9);
        let sp = SpectralKdpp::new(&k, 3).unwrap();
        for _ in 0..50 {
            assert_eq!(sp.sample(&mut r1), sp.sample(&mut r2));
        }
    }

    #[test]
    fn large_ground_set_uses_spectral() {
        let values: Vec<f64> = (1..=30).map(|i| i as f64).collect();
        let s = kdpp_sample_seeded(&diag(&values), 10, 3).unwrap();
        assert_eq!(s.method, SamplerKind::Spectral);
        assert_eq!(s.indices.len(), 10);
        assert!(s.indices.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn selection_dump_serializes() {
        let k = diag(&[1.0, 2.0, 3.0]);
        let s = kdpp_sample_seeded(&k, 2, 0).unwrap();
        let d = SelectionDump::new("t", vec![0, 1, 2], &k, 2, s);
        let v = serde_json::to_value(&d).unwrap();
        assert_eq!(v["subset_probabilities"].as_array().unwrap().len(), 3);
    }
}
