//! Off-surface query generation and per-iteration batch sampling.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::TrainerConfig;
use crate::error::{Error, Result};
use crate::geometry::{random_subset, PointCloud, SpatialIndex, Vec3};

/// Training samples for one shape.
///
/// Patches are stored as their centroids at each configured scale; the
/// losses never need the individual members.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySampleSet {
    /// The (possibly capped) input cloud.
    pub cloud: Vec<Vec3>,
    /// On-surface samples, a seeded permutation of `cloud`.
    pub surface: Vec<Vec3>,
    /// Distance from each cloud point to its `k`-th neighbour.
    pub local_scale: Vec<f64>,
    pub queries: Vec<OffSurfaceSample>,
    /// Patch sizes, matching each sample's `centroids`.
    pub scales: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OffSurfaceSample {
    /// Index of the cloud point that was perturbed.
    pub source: usize,
    pub offset: Vec3,
    pub position: Vec3,
    /// Nearest cloud point to `position`.
    pub target: Vec3,
    /// Centroid of the `scales[s]` nearest cloud points.
    pub centroids: Vec<Vec3>,
}

/// Builds the query set.
///
/// Every cloud point gets a local scale (distance to its
/// `scale_neighbors`-th neighbour, excluding itself). Each round then
/// perturbs every point by an isotropic Gaussian with standard deviation
/// `dis_scale × local scale`.
pub fn generate_queries(cloud: &PointCloud, cfg: &TrainerConfig) -> Result<QuerySampleSet> {
    cfg.validate()?;
    cloud.check_finite()?;
    let needed = cfg.scale_neighbors + 1;
    if cloud.len() < needed {
        return Err(Error::InsufficientPoints {
            needed,
            got: cloud.len(),
        });
    }
    let capped = random_subset(cloud, cfg.point_cap, cfg.seed);
    let points = capped.points;
    let index = SpatialIndex::new(&points);
    let largest = cfg.scales.iter().copied().max().unwrap_or(1).min(points.len());

    let mut local_scale = Vec::with_capacity(points.len());
    for p in &points {
        local_scale.push(index.knn(p, needed)?[cfg.scale_neighbors].distance);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x51ee_d0ff);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut queries = Vec::with_capacity(points.len() * cfg.rounds);
    for _ in 0..cfg.rounds {
        for (i, p) in points.iter().enumerate() {
            let sigma = cfg.dis_scale * local_scale[i];
            let offset = Vec3::from_fn(|_, _| std_normal.sample(&mut rng) * sigma);
            let position = p + offset;
            let patch = index.knn(&position, largest)?;
            let target = points[patch[0].index];
            let centroids = cfg
                .scales
                .iter()
                .map(|&k| {
                    let k = k.min(patch.len());
                    patch[..k]
                        .iter()
                        .fold(Vec3::zeros(), |acc, n| acc + points[n.index])
                        / k as f64
                })
                .collect();
            queries.push(OffSurfaceSample {
                source: i,
                offset,
                position,
                target,
                centroids,
            });
        }
    }

    let mut perm: Vec<usize> = (0..points.len()).collect();
    let mut perm_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6e0f_5a11);
    rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut perm_rng);
    let surface = perm.iter().map(|&i| points[i]).collect();

    Ok(QuerySampleSet {
        cloud: points,
        surface,
        local_scale,
        queries,
        scales: cfg.scales.clone(),
    })
}

/// One training batch: off-surface rows first, then on-surface rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub queries: Vec<Vec3>,
    pub targets: Vec<Vec3>,
    /// `centroids[s][i]` for scale `s` and query `i`.
    pub centroids: Vec<Vec<Vec3>>,
    pub surface: Vec<Vec3>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.queries.len() + self.surface.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Assembles a batch from explicit sample indices.
    pub fn gather(set: &QuerySampleSet, off: &[usize], on: &[usize]) -> Self {
        let pick = |s: usize| off.iter().map(|&i| set.queries[i].centroids[s]).collect();
        Self {
            queries: off.iter().map(|&i| set.queries[i].position).collect(),
            targets: off.iter().map(|&i| set.queries[i].target).collect(),
            centroids: (0..set.scales.len()).map(pick).collect(),
            surface: on.iter().map(|&i| set.surface[i]).collect(),
        }
    }
}

/// Draws seeded batches without replacement within each batch.
pub struct BatchSampler {
    rng: ChaCha8Rng,
    off: usize,
    on: usize,
}

impl BatchSampler {
    pub fn new(seed: u64, off: usize, on: usize) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0xba7c_4e5d),
            off,
            on,
        }
    }

    pub fn next(&mut self, set: &QuerySampleSet) -> Batch {
        let off = index::sample(&mut self.rng, set.queries.len(), self.off.min(set.queries.len()));
        let on = index::sample(&mut self.rng, set.surface.len(), self.on.min(set.surface.len()));
        Batch::gather(set, &off.into_vec(), &on.into_vec())
    }
}
