//! Synthetic multi-domain classification data with known feature regions.
//!
//! Each raw dimension is built from one of four latent blocks:
//!
//! | region | class signal | domain signal | construction              |
//! |--------|--------------|---------------|---------------------------|
//! | I      | no           | yes           | `N(ν_d, σ²)`              |
//! | II     | no           | no            | `N(μ_const, σ²)`          |
//! | III    | yes          | yes           | `N(s_d ⊙ μ′_y, σ²)`       |
//! | IV     | yes          | no            | `N(μ_y, σ²)`              |
//!
//! and optionally rotated by a random orthogonal matrix.

mod io;

pub use io::{load_dataset, save_dataset, DATASET_HEADER};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::Tensor;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator configuration: {0}")]
    Config(String),
    #[error("domain {domain} not present (dataset has {n_domains} domains)")]
    UnknownDomain { domain: usize, n_domains: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Venn region of a feature dimension with respect to label and domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    /// Domain-specific, class-irrelevant.
    I,
    /// Domain-invariant, class-irrelevant.
    II,
    /// Domain-specific, class-relevant.
    III,
    /// Domain-invariant, class-relevant.
    IV,
}

impl Region {
    pub fn is_class_relevant(self) -> bool {
        matches!(self, Region::III | Region::IV)
    }

    pub fn is_domain_relevant(self) -> bool {
        matches!(self, Region::I | Region::III)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Region::I => "I",
            Region::II => "II",
            Region::III => "III",
            Region::IV => "IV",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "I" => Some(Region::I),
            "II" => Some(Region::II),
            "III" => Some(Region::III),
            "IV" => Some(Region::IV),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Mixing {
    #[default]
    Identity,
    RandomOrthogonal,
}

/// Per-region dimension counts and latent scales.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub k_i: usize,
    pub k_ii: usize,
    pub k_iii: usize,
    pub k_iv: usize,
    pub noise_std: f64,
    pub mixing: Mixing,
    /// Minimum pairwise distance between class means, in units of `noise_std`.
    pub class_separation: f64,
    /// Std of the class means `μ_y` and class pattern `μ′_y`.
    pub class_scale: f64,
    /// Std of the per-domain means `ν_d`.
    pub domain_scale: f64,
    /// Std of the shared constant `μ_const`.
    pub const_scale: f64,
}

impl Default for RegionSpec {
    fn default() -> Self {
        Self {
            k_i: 8,
            k_ii: 8,
            k_iii: 8,
            k_iv: 8,
            noise_std: 0.3,
            mixing: Mixing::Identity,
            class_separation: 4.0,
            class_scale: 0.4,
            domain_scale: 1.0,
            const_scale: 1.0,
        }
    }
}

impl RegionSpec {
    pub fn dims(&self) -> usize {
        self.k_i + self.k_ii + self.k_iii + self.k_iv
    }

    /// Region of each latent coordinate, in concatenation order I, II, III, IV.
    pub fn latent_regions(&self) -> Vec<Region> {
        let mut out = Vec::with_capacity(self.dims());
        out.extend(std::iter::repeat_n(Region::I, self.k_i));
        out.extend(std::iter::repeat_n(Region::II, self.k_ii));
        out.extend(std::iter::repeat_n(Region::III, self.k_iii));
        out.extend(std::iter::repeat_n(Region::IV, self.k_iv));
        out
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.dims() == 0 {
            return Err(SynthError::Config("at least one feature dimension is required".into()));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(SynthError::Config(format!("noise_std must be nonnegative, got {}", self.noise_std)));
        }
        if !(self.class_separation > 0.0) {
            return Err(SynthError::Config(format!(
                "class separation must be positive, got {}",
                self.class_separation
            )));
        }
        for (name, v) in [
            ("class_scale", self.class_scale),
            ("domain_scale", self.domain_scale),
            ("const_scale", self.const_scale),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(SynthError::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.k_iii + self.k_iv > 0 && self.class_scale == 0.0 {
            return Err(SynthError::Config("zero class separation: class_scale is 0".into()));
        }
        Ok(())
    }
}

/// Latent parameters a dataset was drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentParams {
    /// `μ_y`, `[n_classes][k_iv]`.
    pub class_means: Vec<Vec<f64>>,
    /// `μ′_y`, `[n_classes][k_iii]`.
    pub class_pattern: Vec<Vec<f64>>,
    /// `s_d`, `[n_domains][k_iii]`.
    pub domain_scales: Vec<Vec<f64>>,
    /// `ν_d`, `[n_domains][k_i]`.
    pub domain_means: Vec<Vec<f64>>,
    /// `μ_const`, `[k_ii]`.
    pub const_mean: Vec<f64>,
    /// Orthogonal `M` (row-major `[dims][dims]`); `None` for identity mixing.
    pub mixing: Option<Vec<Vec<f64>>>,
    pub latent_regions: Vec<Region>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
    pub d: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub dims: usize,
    pub n_domains: usize,
    pub n_classes: usize,
    pub seed: u64,
    /// Region of every raw dimension; `None` when no ground truth is known
    /// (loaded without a region map, or mixed by a rotation).
    pub region_of_dim: Option<Vec<Region>>,
    /// Original domain id of each dense domain index.
    pub domain_ids: Vec<usize>,
    pub samples: Vec<Sample>,
    pub latent: Option<LatentParams>,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            std * e
        })
        .collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Class means with every pairwise distance at least `min_dist` (and nonzero).
fn separated_means(
    rng: &mut ChaCha8Rng,
    n_classes: usize,
    k: usize,
    std: f64,
    min_dist: f64,
) -> Result<Vec<Vec<f64>>, SynthError> {
    if k == 0 {
        return Ok(vec![Vec::new(); n_classes]);
    }
    const ATTEMPTS: usize = 10_000;
    for _ in 0..ATTEMPTS {
        let means: Vec<Vec<f64>> = (0..n_classes).map(|_| normal_vec(rng, k, std)).collect();
        let ok = (0..n_classes).all(|a| {
            (a + 1..n_classes).all(|b| {
                let dist = distance(&means[a], &means[b]);
                dist > 0.0 && dist >= min_dist
            })
        });
        if ok {
            return Ok(means);
        }
    }
    Err(SynthError::Config(format!(
        "could not draw {n_classes} class means in {k} dims with pairwise separation {min_dist}"
    )))
}

/// Random orthogonal matrix via doubly re-orthogonalized Gram-Schmidt.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    loop {
        let mut cols: Vec<Vec<f64>> = (0..n).map(|_| normal_vec(rng, n, 1.0)).collect();
        let mut degenerate = false;
        for j in 0..n {
            for _pass in 0..2 {
                for i in 0..j {
                    let dot: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                    let (head, tail) = cols.split_at_mut(j);
                    for (c, q) in tail[0].iter_mut().zip(&head[i]) {
                        *c -= dot * q;
                    }
                }
            }
            let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-8 {
                degenerate = true;
                break;
            }
            for c in cols[j].iter_mut() {
                *c /= norm;
            }
        }
        if !degenerate {
            // Columns are orthonormal; return row-major M with those columns.
            return (0..n).map(|r| (0..n).map(|c| cols[c][r]).collect()).collect();
        }
    }
}

/// Draws a dataset with `n_per_domain` samples per domain and balanced labels.
pub fn generate(
    spec: &RegionSpec,
    n_domains: usize,
    n_classes: usize,
    n_per_domain: usize,
    seed: u64,
) -> Result<SynthDataset, SynthError> {
    spec.validate()?;
    if n_domains == 0 {
        return Err(SynthError::Config("n_domains must be at least 1".into()));
    }
    if n_classes < 2 {
        return Err(SynthError::Config(format!("n_classes must be at least 2, got {n_classes}")));
    }
    if n_per_domain == 0 || !n_per_domain.is_multiple_of(n_classes) {
        return Err(SynthError::Config(format!(
            "n_per_domain ({n_per_domain}) must be a positive multiple of n_classes ({n_classes})"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_dist = spec.class_separation * spec.noise_std;
    let class_means = separated_means(&mut rng, n_classes, spec.k_iv, spec.class_scale, min_dist)?;
    let class_pattern = separated_means(&mut rng, n_classes, spec.k_iii, spec.class_scale, min_dist)?;
    let domain_scales: Vec<Vec<f64>> = (0..n_domains)
        .map(|_| (0..spec.k_iii).map(|_| rng.random_range(0.5..1.5)).collect())
        .collect();
    let domain_means: Vec<Vec<f64>> = (0..n_domains)
        .map(|_| normal_vec(&mut rng, spec.k_i, spec.domain_scale))
        .collect();
    let const_mean = normal_vec(&mut rng, spec.k_ii, spec.const_scale);
    let dims = spec.dims();
    let mixing = match spec.mixing {
        Mixing::Identity => None,
        Mixing::RandomOrthogonal => Some(random_orthogonal(&mut rng, dims)),
    };

    let mut samples = Vec::with_capacity(n_domains * n_per_domain);
    for d in 0..n_domains {
        for i in 0..n_per_domain {
            let y = i % n_classes;
            let mut u = Vec::with_capacity(dims);
            let noisy = |mean: f64, rng: &mut ChaCha8Rng| {
                let e: f64 = StandardNormal.sample(rng);
                mean + spec.noise_std * e
            };
            for &m in &domain_means[d] {
                u.push(noisy(m, &mut rng));
            }
            for &m in &const_mean {
                u.push(noisy(m, &mut rng));
            }
            for (s, m) in domain_scales[d].iter().zip(&class_pattern[y]) {
                u.push(noisy(s * m, &mut rng));
            }
            for &m in &class_means[y] {
                u.push(noisy(m, &mut rng));
            }
            let x = match &mixing {
                None => u,
                Some(rows) => rows
                    .iter()
                    .map(|row| row.iter().zip(&u).map(|(a, b)| a * b).sum())
                    .collect(),
            };
            samples.push(Sample { x, y, d });
        }
    }

    let latent_regions = spec.latent_regions();
    let region_of_dim = match spec.mixing {
        Mixing::Identity => Some(latent_regions.clone()),
        Mixing::RandomOrthogonal => None,
    };
    Ok(SynthDataset {
        dims,
        n_domains,
        n_classes,
        seed,
        region_of_dim,
        domain_ids: (0..n_domains).collect(),
        samples,
        latent: Some(LatentParams {
            class_means,
            class_pattern,
            domain_scales,
            domain_means,
            const_mean,
            mixing,
            latent_regions,
        }),
    })
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn has_ground_truth(&self) -> bool {
        self.region_of_dim.is_some()
    }

    /// Row-stacked features of the selected samples, `[indices.len(), dims]`.
    pub fn features(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.dims);
        for &i in indices {
            data.extend_from_slice(&self.samples[i].x);
        }
        Tensor::new(vec![indices.len(), self.dims], data).expect("non-empty selection")
    }

    pub fn all_features(&self) -> Tensor {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.features(&idx)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.y).collect()
    }

    pub fn domains(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.d).collect()
    }

    pub fn count_by_domain_class(&self) -> Vec<Vec<usize>> {
        let mut counts = vec![vec![0; self.n_classes]; self.n_domains];
        for s in &self.samples {
            counts[s.d][s.y] += 1;
        }
        counts
    }

    /// Dense index of the domain whose original id is `original`.
    pub fn dense_domain(&self, original: usize) -> Option<usize> {
        self.domain_ids.iter().position(|&id| id == original)
    }

    /// Splits off domain `target` (dense index) as the unseen test domain.
    ///
    /// Train domains are renumbered `0..n_domains-1` in their original order;
    /// `domain_ids` records the mapping back. The test set has one domain.
    pub fn split_leave_one_out(&self, target: usize) -> Result<(SynthDataset, SynthDataset), SynthError> {
        if target >= self.n_domains {
            return Err(SynthError::UnknownDomain {
                domain: target,
                n_domains: self.n_domains,
            });
        }
        let mut remap = vec![usize::MAX; self.n_domains];
        let mut train_ids = Vec::with_capacity(self.n_domains - 1);
        for d in (0..self.n_domains).filter(|&d| d != target) {
            remap[d] = train_ids.len();
            train_ids.push(self.domain_ids[d]);
        }
        let (test_samples, train_samples): (Vec<Sample>, Vec<Sample>) =
            self.samples.iter().cloned().partition(|s| s.d == target);
        let train = SynthDataset {
            n_domains: self.n_domains - 1,
            domain_ids: train_ids,
            samples: train_samples
                .into_iter()
                .map(|s| Sample { d: remap[s.d], ..s })
                .collect(),
            ..self.clone_header()
        };
        let test = SynthDataset {
            n_domains: 1,
            domain_ids: vec![self.domain_ids[target]],
            samples: test_samples.into_iter().map(|s| Sample { d: 0, ..s }).collect(),
            ..self.clone_header()
        };
        Ok((train, test))
    }

    fn clone_header(&self) -> SynthDataset {
        SynthDataset {
            dims: self.dims,
            n_domains: self.n_domains,
            n_classes: self.n_classes,
            seed: self.seed,
            region_of_dim: self.region_of_dim.clone(),
            domain_ids: self.domain_ids.clone(),
            samples: Vec::new(),
            latent: self.latent.clone(),
        }
    }

    /// Same samples with labels permuted; keeps features and domains.
    pub fn with_shuffled_labels(&self, seed: u64) -> SynthDataset {
        let mut labels = self.labels();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut out = self.clone();
        for (s, y) in out.samples.iter_mut().zip(labels) {
            s.y = y;
        }
        out
    }
}
