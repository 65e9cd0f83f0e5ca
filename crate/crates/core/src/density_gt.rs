//! Ground-truth density maps from head annotations.

use ndarray::Array2;

use crate::config::{PdaNetConfig, SigmaMode};
use crate::data_io::{DensityMap, Point};
use crate::error::{Error, Result};

/// Lower bound on adaptive kernel widths (coincident heads).
pub const SIGMA_MIN: f64 = 0.5;

/// Kernels are evaluated out to this many standard deviations.
const KERNEL_REACH: f64 = 4.0;

pub const DEFAULT_REGION_WINDOW: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DensityClass {
    Sparse = 0,
    Dense = 1,
}

impl DensityClass {
    pub fn label(self) -> u8 {
        self as u8
    }

    pub fn from_label(label: u8) -> Result<Self> {
        match label {
            0 => Ok(DensityClass::Sparse),
            1 => Ok(DensityClass::Dense),
            other => Err(Error::InvalidArgument(format!("class label must be 0 or 1, got {other}"))),
        }
    }
}

/// Geometry-adaptive kernel widths: `beta` times the mean distance to the
/// `k` nearest other heads, clamped to [`SIGMA_MIN`]. With fewer than
/// `k + 1` heads every width falls back to `sigma_fixed`.
pub fn knn_sigma(points: &[Point], k: usize, beta: f64, sigma_fixed: f64) -> Vec<f64> {
    if k == 0 || points.len() < k + 1 {
        return vec![sigma_fixed; points.len()];
    }
    let mut nearest = Vec::with_capacity(k + 1);
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            // sorted insertion into a k-long buffer
            nearest.clear();
            for (j, q) in points.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = p.dist(q);
                if nearest.len() == k && d >= nearest[k - 1] {
                    continue;
                }
                let at = nearest.partition_point(|&x| x <= d);
                nearest.insert(at, d);
                nearest.truncate(k);
            }
            let mean = nearest.iter().sum::<f64>() / k as f64;
            (beta * mean).max(SIGMA_MIN)
        })
        .collect()
}

/// Sum of per-head Gaussians, each truncated to the image and renormalized
/// to unit mass. Kernels are sampled at pixel centers.
pub fn render_density(points: &[Point], sigmas: &[f64], height: usize, width: usize) -> Result<DensityMap> {
    if points.len() != sigmas.len() {
        return Err(Error::InvalidArgument(format!(
            "{} points but {} sigmas",
            points.len(),
            sigmas.len()
        )));
    }
    if let Some(s) = sigmas.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {s}")));
    }
    let mut acc = Array2::<f64>::zeros((height, width));
    let mut kernel = Vec::new();
    for (p, &sigma) in points.iter().zip(sigmas) {
        if !(p.x >= 0.0 && p.x < width as f64 && p.y >= 0.0 && p.y < height as f64) {
            return Err(Error::InvalidArgument(format!("point ({}, {}) outside the map", p.x, p.y)));
        }
        let reach = (KERNEL_REACH * sigma).ceil().max(1.0);
        let r0 = (p.y - reach).floor().max(0.0) as usize;
        let r1 = ((p.y + reach).ceil() as usize).min(height);
        let c0 = (p.x - reach).floor().max(0.0) as usize;
        let c1 = ((p.x + reach).ceil() as usize).min(width);
        let inv = -0.5 / (sigma * sigma);
        kernel.clear();
        let mut total = 0.0;
        for i in r0..r1 {
            let dy = i as f64 + 0.5 - p.y;
            for j in c0..c1 {
                let dx = j as f64 + 0.5 - p.x;
                let v = ((dx * dx + dy * dy) * inv).exp();
                total += v;
                kernel.push(v);
            }
        }
        if total > 0.0 {
            let mut it = kernel.iter();
            for i in r0..r1 {
                for j in c0..c1 {
                    acc[[i, j]] += it.next().unwrap() / total;
                }
            }
        } else {
            // kernel narrower than a pixel
            acc[[p.y as usize, p.x as usize]] += 1.0;
        }
    }
    Ok(DensityMap::new(acc.mapv(|v| v as f32), 1))
}

pub fn fixed_sigma_density(points: &[Point], height: usize, width: usize, sigma: f64) -> Result<DensityMap> {
    render_density(points, &vec![sigma; points.len()], height, width)
}

/// Stride-1 density for an annotated image using the configured kernel rule.
pub fn scene_density(points: &[Point], height: usize, width: usize, config: &PdaNetConfig) -> Result<DensityMap> {
    let sigmas = match config.sigma_mode {
        SigmaMode::Knn => knn_sigma(points, config.knn_k, config.beta, config.sigma_fixed),
        SigmaMode::Fixed => vec![config.sigma_fixed; points.len()],
    };
    render_density(points, &sigmas, height, width)
}

/// Block-sums `factor × factor` cells. Ragged edges are zero-padded.
pub fn downsample_preserving_count(map: &DensityMap, factor: usize) -> Result<DensityMap> {
    if factor < 1 {
        return Err(Error::InvalidArgument("downsample factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(map.clone());
    }
    let (h, w) = map.values.dim();
    let (oh, ow) = (h.div_ceil(factor), w.div_ceil(factor));
    let mut acc = Array2::<f64>::zeros((oh, ow));
    for ((i, j), &v) in map.values.indexed_iter() {
        acc[[i / factor, j / factor]] += v as f64;
    }
    Ok(DensityMap::new(acc.mapv(|v| v as f32), map.stride * factor as u32))
}

/// Mean over a `window × window` box centered on each cell, zero-padded.
fn box_mean(values: &Array2<f32>, window: usize) -> Array2<f64> {
    let (h, w) = values.dim();
    let mut integral = Array2::<f64>::zeros((h + 1, w + 1));
    for i in 0..h {
        let mut row = 0.0;
        for j in 0..w {
            row += values[[i, j]] as f64;
            integral[[i + 1, j + 1]] = integral[[i, j + 1]] + row;
        }
    }
    let half = window / 2;
    let area = (window * window) as f64;
    Array2::from_shape_fn((h, w), |(i, j)| {
        let (r0, r1) = (i.saturating_sub(half), (i + window - half).min(h));
        let (c0, c1) = (j.saturating_sub(half), (j + window - half).min(w));
        let s = integral[[r1, c1]] - integral[[r0, c1]] - integral[[r1, c0]] + integral[[r0, c0]];
        s / area
    })
}

/// Splits a map into `(sparse, dense)` parts: cells whose box-smoothed
/// density exceeds `tau` go to the dense part. The two parts add back to
/// the input exactly.
pub fn split_sparse_dense(map: &DensityMap, tau: f64) -> (DensityMap, DensityMap) {
    split_sparse_dense_with_window(map, tau, DEFAULT_REGION_WINDOW)
}

pub fn split_sparse_dense_with_window(map: &DensityMap, tau: f64, window: usize) -> (DensityMap, DensityMap) {
    let smooth = box_mean(&map.values, window.max(1));
    let mut sparse = map.values.clone();
    let mut dense = Array2::<f32>::zeros(map.values.dim());
    ndarray::Zip::from(&mut sparse)
        .and(&mut dense)
        .and(&smooth)
        .for_each(|s, d, &m| {
            if m > tau {
                *d = *s;
                *s = 0.0;
            }
        });
    (DensityMap::new(sparse, map.stride), DensityMap::new(dense, map.stride))
}

/// Dense iff the map's count reaches `theta_cls`.
pub fn class_label(map: &DensityMap, theta_cls: f64) -> DensityClass {
    if map.sum() >= theta_cls {
        DensityClass::Dense
    } else {
        DensityClass::Sparse
    }
}

/// Median head count, floored at one person so the threshold stays
/// positive.
pub fn default_class_threshold(counts: &[f64]) -> f64 {
    if counts.is_empty() {
        return 1.0;
    }
    let mut sorted = counts.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    median.max(1.0)
}

/// Four times the mean of all positive cells.
pub fn default_region_threshold<'a>(maps: impl IntoIterator<Item = &'a DensityMap>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for m in maps {
        for &v in m.values.iter().filter(|v| **v > 0.0) {
            sum += v as f64;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        4.0 * sum / n as f64
    }
}

/// Training targets for one image at the model's output stride.
#[derive(Debug, Clone)]
pub struct DensityTargets {
    pub full: DensityMap,
    pub sparse: DensityMap,
    pub dense: DensityMap,
    pub class: DensityClass,
    pub count: f64,
}

/// Renders at stride 1, splits there, then block-sums every part down to
/// `stride`.
pub fn build_targets(
    points: &[Point],
    height: usize,
    width: usize,
    config: &PdaNetConfig,
    class_threshold: f64,
    region_threshold: f64,
    stride: usize,
) -> Result<DensityTargets> {
    let map = scene_density(points, height, width, config)?;
    let (sparse, dense) = split_sparse_dense_with_window(&map, region_threshold, config.region_window);
    Ok(DensityTargets {
        class: class_label(&map, class_threshold),
        count: points.len() as f64,
        full: downsample_preserving_count(&map, stride)?,
        sparse: downsample_preserving_count(&sparse, stride)?,
        dense: downsample_preserving_count(&dense, stride)?,
    })
}
