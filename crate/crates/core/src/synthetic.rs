//! Deterministic synthetic crowd scenes.
//!
//! Heads are scattered around a few Gaussian cluster centers so that one
//! image holds both sparse and crowded areas. Every random draw comes from
//! a counter-based generator keyed on `(seed, stream, index)`.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Array2;

use crate::data_io::{save_annotations, write_manifest, AnnotatedScene, Point};
use crate::error::{Error, Result};

/// Attempts per head before placement gives up.
pub const PLACEMENT_ATTEMPTS: usize = 64;

const MIN_SIDE: u32 = 64;

const STREAM_CENTER: u64 = 1;
const STREAM_ASSIGN: u64 = 2;
const STREAM_OFFSET: u64 = 3;
const STREAM_TEXTURE: u64 = 4;
const STREAM_SPEC: u64 = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_people: usize,
    pub height: u32,
    pub width: u32,
    pub n_clusters: usize,
    pub cluster_spread: f64,
    pub blob_radius: f64,
}

impl SynthSpec {
    pub fn new(seed: u64, n_people: usize, height: u32, width: u32) -> Self {
        Self {
            seed,
            n_people,
            height,
            width,
            n_clusters: 3,
            cluster_spread: height.min(width) as f64 / 6.0,
            blob_radius: 2.5,
        }
    }

    /// The `index`-th spec of a family: head count drawn uniformly from
    /// `people` and 1–4 clusters.
    pub fn varied(base_seed: u64, index: usize, height: u32, width: u32, people: (usize, usize)) -> Self {
        let seed = mix(base_seed, STREAM_SPEC, index as u64);
        let span = (people.1.saturating_sub(people.0) + 1) as u64;
        let n_people = people.0 + (mix(seed, STREAM_SPEC, 0) % span) as usize;
        let n_clusters = 1 + (mix(seed, STREAM_SPEC, 1) % 4) as usize;
        Self {
            n_clusters,
            ..Self::new(seed, n_people, height, width)
        }
    }

    pub fn id(&self) -> String {
        format!("synth_{:016x}", self.seed)
    }

    fn validate(&self) -> Result<()> {
        if self.height < MIN_SIDE || self.width < MIN_SIDE {
            return Err(Error::InvalidArgument(format!(
                "synthetic scenes must be at least {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if self.n_clusters == 0 {
            return Err(Error::InvalidArgument("n_clusters must be >= 1".into()));
        }
        if !(self.cluster_spread > 0.0 && self.blob_radius > 0.0) {
            return Err(Error::InvalidArgument("cluster_spread and blob_radius must be positive".into()));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer over a combined key.
fn mix(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index.wrapping_mul(0x8CB9_2BA7_2F3D_8DD7))
        .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn uniform(seed: u64, stream: u64, index: u64) -> f64 {
    (mix(seed, stream, index) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn gaussian_pair(seed: u64, stream: u64, index: u64) -> (f64, f64) {
    let u1 = uniform(seed, stream, 2 * index).max(f64::MIN_POSITIVE);
    let u2 = uniform(seed, stream, 2 * index + 1);
    let r = (-2.0 * u1.ln()).sqrt();
    let t = std::f64::consts::TAU * u2;
    (r * t.cos(), r * t.sin())
}

fn place_points(spec: &SynthSpec) -> Result<Vec<Point>> {
    let (w, h) = (spec.width as f64, spec.height as f64);
    let centers: Vec<Point> = (0..spec.n_clusters as u64)
        .map(|c| {
            Point::new(
                w * (0.1 + 0.8 * uniform(spec.seed, STREAM_CENTER, 2 * c)),
                h * (0.1 + 0.8 * uniform(spec.seed, STREAM_CENTER, 2 * c + 1)),
            )
        })
        .collect();
    let mut taken = HashSet::new();
    let mut points = Vec::with_capacity(spec.n_people);
    for i in 0..spec.n_people {
        let center = centers[(mix(spec.seed, STREAM_ASSIGN, i as u64) % spec.n_clusters as u64) as usize];
        let placed = (0..PLACEMENT_ATTEMPTS).find_map(|attempt| {
            let (dx, dy) = gaussian_pair(spec.seed, STREAM_OFFSET, (i * PLACEMENT_ATTEMPTS + attempt) as u64);
            let p = Point::new(center.x + dx * spec.cluster_spread, center.y + dy * spec.cluster_spread);
            let inside = p.x >= 0.0 && p.x < w && p.y >= 0.0 && p.y < h;
            // at most one head per pixel
            (inside && taken.insert((p.x as u32, p.y as u32))).then_some(p)
        });
        match placed {
            Some(p) => points.push(p),
            None => {
                return Err(Error::Placement {
                    index: i,
                    attempts: PLACEMENT_ATTEMPTS,
                })
            }
        }
    }
    Ok(points)
}

/// Per-pixel blob strength in `[0, 1]`, evaluated at pixel centers.
pub fn blob_darkness(points: &[Point], height: usize, width: usize, radius: f64) -> Array2<f32> {
    let mut dark = Array2::<f32>::zeros((height, width));
    let reach = (2.0 * radius).ceil() as isize + 1;
    for p in points {
        let (px, py) = (p.x.floor() as isize, p.y.floor() as isize);
        for i in (py - reach).max(0)..(py + reach + 1).min(height as isize) {
            for j in (px - reach).max(0)..(px + reach + 1).min(width as isize) {
                let dx = j as f64 + 0.5 - p.x;
                let dy = i as f64 + 0.5 - p.y;
                let f = (-(dx * dx + dy * dy) / (radius * radius)).exp() as f32;
                let cell = &mut dark[[i as usize, j as usize]];
                *cell = cell.max(f);
            }
        }
    }
    dark
}

/// Renders one scene; identical specs give byte-identical output.
pub fn generate_scene(spec: &SynthSpec) -> Result<AnnotatedScene> {
    spec.validate()?;
    let points = place_points(spec)?;
    let (w, h) = (spec.width, spec.height);
    let dark = blob_darkness(&points, h as usize, w as usize, spec.blob_radius);
    let phase = uniform(spec.seed, STREAM_TEXTURE, u64::MAX) * std::f64::consts::TAU;
    let image = RgbImage::from_fn(w, h, |x, y| {
        let noise = uniform(spec.seed, STREAM_TEXTURE, y as u64 * w as u64 + x as u64);
        let wave = ((x as f64 * 0.07 + phase).sin() + (y as f64 * 0.05).cos()) * 12.0;
        let base = 170.0 + wave + 30.0 * (noise - 0.5);
        let shade = 1.0 - 0.85 * dark[[y as usize, x as usize]] as f64;
        let v = |offset: f64| ((base + offset) * shade).round().clamp(0.0, 255.0) as u8;
        Rgb([v(10.0), v(0.0), v(-15.0)])
    });
    AnnotatedScene::new(spec.id(), image, points)
}

/// Writes every scene plus `manifest.json` into `out_dir`.
pub fn generate_dataset(specs: &[SynthSpec], out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    let mut ids = HashSet::new();
    if let Some(dup) = specs.iter().find(|s| !ids.insert(s.id())) {
        return Err(Error::InvalidArgument(format!("duplicate scene id {}", dup.id())));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(specs.len());
    for spec in specs {
        let scene = generate_scene(spec)?;
        let json = save_annotations(&scene, out_dir)?;
        entries.push(json.file_name().unwrap().to_string_lossy().into_owned());
    }
    let manifest = out_dir.join("manifest.json");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_count_in_bounds() {
        let scene = generate_scene(&SynthSpec::new(7, 50, 96, 128)).unwrap();
        assert_eq!(scene.count(), 50);
        for p in &scene.points {
            assert!(p.x >= 0.0 && p.x < 128.0 && p.y >= 0.0 && p.y < 96.0);
        }
    }

    #[test]
    fn empty_scene_is_background_only() {
        let scene = generate_scene(&SynthSpec::new(3, 0, 64, 64)).unwrap();
        assert!(scene.points.is_empty());
        // background never drops below the unshaded texture floor
        assert!(scene.image.pixels().all(|p| p[1] >= 120));
    }

    #[test]
    fn deterministic() {
        let spec = SynthSpec::new(11, 40, 64, 80);
        let a = generate_scene(&spec).unwrap();
        let b = generate_scene(&spec).unwrap();
        assert_eq!(a.image.as_raw(), b.image.as_raw());
        assert_eq!(a.points, b.points);
        assert_ne!(generate_scene(&SynthSpec::new(12, 40, 64, 80)).unwrap().points, a.points);
    }

    #[test]
    fn blob_centered_on_label() {
        let p = Point::new(30.3, 17.8);
        let dark = blob_darkness(&[p], 48, 64, 2.5);
        let (mut sx, mut sy, mut s) = (0.0, 0.0, 0.0);
        for ((i, j), &v) in dark.indexed_iter() {
            sx += v as f64 * (j as f64 + 0.5);
            sy += v as f64 * (i as f64 + 0.5);
            s += v as f64;
        }
        assert!((sx / s - p.x).abs() < 0.5 && (sy / s - p.y).abs() < 0.5);
        let scene = generate_scene(&SynthSpec {
            n_clusters: 1,
            ..SynthSpec::new(5, 1, 64, 64)
        })
        .unwrap();
        let q = scene.points[0];
        let at = scene.image.get_pixel(q.x as u32, q.y as u32)[1];
        assert!(at < 60, "blob pixel {at} should be dark");
    }

    #[test]
    fn overfull_scene_fails_placement() {
        let err = generate_scene(&SynthSpec::new(1, 64 * 64 + 1, 64, 64)).unwrap_err();
        assert!(matches!(err, Error::Placement { .. }));
    }

    #[test]
    fn rejects_small_images() {
        assert!(generate_scene(&SynthSpec::new(1, 1, 32, 64)).is_err());
    }

    #[test]
    fn dataset_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let specs: Vec<_> = (0..4).map(|i| SynthSpec::varied(9, i, 64, 64, (5, 20))).collect();
        let manifest = generate_dataset(&specs, dir.path()).unwrap();
        let first = std::fs::read_to_string(&manifest).unwrap();
        assert_eq!(crate::data_io::read_manifest(&manifest).unwrap().len(), 4);
        generate_dataset(&specs, dir.path()).unwrap();
        assert_eq!(std::fs::read_to_string(&manifest).unwrap(), first);

        let empty = tempfile::tempdir().unwrap();
        let manifest = generate_dataset(&[], empty.path()).unwrap();
        assert!(crate::data_io::read_manifest(&manifest).unwrap().is_empty());
    }
}
