//! Point clouds, synthetic datasets, splitting and file I/O.

mod shapes;
mod xyz;

pub use shapes::{gen_synthetic, sample_surface, Point, ShapeKind, ShapeSpec};
pub use xyz::{load_dataset, load_xyz, save_dataset, save_xyz, DATASET_MANIFEST};

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// An unordered set of 3-D points with a class label.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub label: usize,
    pub source_id: String,
}

impl PointCloud {
    pub fn new(points: Vec<Point>, label: usize, source_id: impl Into<String>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Numerical("point coordinates must be finite".into()));
        }
        Ok(PointCloud {
            points,
            label,
            source_id: source_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for i in 0..3 {
                c[i] += p[i];
            }
        }
        c.map(|v| v / n)
    }

    pub fn max_norm(&self) -> f64 {
        self.points.iter().map(norm).fold(0.0, f64::max)
    }

    /// Centers the cloud on its centroid and scales the farthest point to
    /// norm 1. A cloud collapsed onto a single location maps to the origin.
    pub fn normalized(mut self) -> Self {
        let c = self.centroid();
        for p in &mut self.points {
            for i in 0..3 {
                p[i] -= c[i];
            }
        }
        let scale = self.max_norm();
        if scale > 0.0 {
            for p in &mut self.points {
                for v in p.iter_mut() {
                    *v /= scale;
                }
            }
        }
        self
    }
}

fn norm(p: &Point) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

pub fn normalize_unit_sphere(cloud: PointCloud) -> PointCloud {
    cloud.normalized()
}

/// Draws exactly `n` points: without replacement when the cloud has at
/// least `n` points, with replacement otherwise.
pub fn sample_points(cloud: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::config("sample size must be positive"));
    }
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mut rng = rng::stream(seed, Stream::Sample);
    let total = cloud.len();
    let points = if total >= n {
        index::sample(&mut rng, total, n)
            .into_iter()
            .map(|i| cloud.points[i])
            .collect()
    } else {
        (0..n)
            .map(|_| cloud.points[rng.random_range(0..total)])
            .collect()
    };
    Ok(PointCloud {
        points,
        label: cloud.label,
        source_id: cloud.source_id.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<PointCloud>,
    pub test: Vec<PointCloud>,
    pub class_count: usize,
    pub seed: u64,
}

/// Stratified shuffle split: each class sends `round(ratio * count)` clouds
/// to training, adjusted by largest remainder so the global train count is
/// `round(ratio * total)`.
pub fn split_dataset(clouds: Vec<PointCloud>, ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    if clouds.len() < 2 {
        return Err(Error::config("need at least 2 clouds to split"));
    }
    let mut ids: Vec<&str> = clouds.iter().map(|c| c.source_id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::config(format!("duplicate source id {:?}", w[0])));
    }
    let class_count = clouds.iter().map(|c| c.label).max().unwrap_or(0) + 1;
    let mut by_class: Vec<Vec<PointCloud>> = vec![Vec::new(); class_count];
    for c in clouds {
        by_class[c.label].push(c);
    }
    if let Some(empty) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::config(format!("class {empty} has no clouds")));
    }

    let total: usize = by_class.iter().map(Vec::len).sum();
    let target = (ratio * total as f64).round() as usize;
    let mut quotas: Vec<usize> = Vec::with_capacity(class_count);
    let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(class_count);
    for (c, members) in by_class.iter().enumerate() {
        let exact = ratio * members.len() as f64;
        quotas.push(exact.floor() as usize);
        remainders.push((exact - exact.floor(), c));
    }
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut missing = target.saturating_sub(quotas.iter().sum());
    for &(_, c) in &remainders {
        if missing == 0 {
            break;
        }
        if quotas[c] < by_class[c].len() {
            quotas[c] += 1;
            missing -= 1;
        }
    }

    let mut rng = rng::stream(seed, Stream::Split);
    let mut train = Vec::with_capacity(target);
    let mut test = Vec::with_capacity(total - target);
    for (mut members, quota) in by_class.into_iter().zip(quotas) {
        members.shuffle(&mut rng);
        let held_out = members.split_off(quota);
        train.extend(members);
        test.extend(held_out);
    }
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);
    Ok(DatasetSplit {
        train,
        test,
        class_count,
        seed,
    })
}

pub const DEFAULT_SHAPE_VARIATION: f64 = 0.3;

/// Synthetic dataset parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub classes: usize,
    pub per_class: usize,
    pub points: usize,
    pub jitter_sigma: f64,
    /// See [`ShapeSpec::variation`].
    pub shape_variation: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            classes: 8,
            per_class: 150,
            points: 512,
            jitter_sigma: 0.02,
            shape_variation: DEFAULT_SHAPE_VARIATION,
        }
    }
}

/// Generates `per_class` clouds for each of `classes` classes. Cloud `i`
/// draws from its own seed derived from `(seed, i)`.
pub fn gen_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Vec<PointCloud>> {
    if cfg.classes < 2 {
        return Err(Error::config("need at least 2 classes"));
    }
    if cfg.per_class == 0 {
        return Err(Error::config("per_class must be positive"));
    }
    let mut clouds = Vec::with_capacity(cfg.classes * cfg.per_class);
    for label in 0..cfg.classes {
        let spec = ShapeSpec::for_class(label, cfg.jitter_sigma, cfg.points)?
            .with_variation(cfg.shape_variation);
        for i in 0..cfg.per_class {
            let idx = (label * cfg.per_class + i) as u64;
            let mut cloud = gen_synthetic(&spec, label, rng::derive(seed, idx))?;
            cloud.source_id = format!("c{label:02}_{i:04}");
            clouds.push(cloud);
        }
    }
    Ok(clouds)
}

/// Packs equally sized clouds into a `[B, N, 3]` tensor.
pub fn stack_points(clouds: &[&PointCloud]) -> Result<Tensor> {
    let first = clouds.first().ok_or(Error::EmptyCloud)?;
    let n = first.len();
    if n == 0 {
        return Err(Error::EmptyCloud);
    }
    let mut data = Vec::with_capacity(clouds.len() * n * 3);
    for c in clouds {
        if c.len() != n {
            return Err(Error::Contract(format!(
                "clouds in a batch must share a point count: {} vs {n}",
                c.len()
            )));
        }
        data.extend(c.points.iter().flatten());
    }
    Tensor::new([clouds.len(), n, 3], data)
}

/// Inverse of [`stack_points`] for a single batch row.
pub fn unstack_cloud(batch: &Tensor, index: usize, template: &PointCloud) -> PointCloud {
    let n = batch.shape()[1];
    let rows = &batch.data()[index * n * 3..(index + 1) * n * 3];
    PointCloud {
        points: rows.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect(),
        label: template.label,
        source_id: template.source_id.clone(),
    }
}
