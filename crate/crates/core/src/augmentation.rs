//! Corner/random crops and aspect-dependent resizing that carry head
//! annotations along. Density targets are always re-rendered from the
//! transformed points afterwards.

use image::imageops::{self, FilterType};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data_io::{AnnotatedScene, Point};
use crate::error::{Error, Result};

/// Target size `(height, width)` for portrait inputs.
pub const PORTRAIT: (u32, u32) = (1024, 768);
/// Target size `(height, width)` for landscape and square inputs.
pub const LANDSCAPE: (u32, u32) = (768, 1024);

/// Crops a `height × width` window at `(top, left)`, keeping the points
/// that fall inside it (half-open) in window coordinates.
pub fn crop(scene: &AnnotatedScene, top: u32, left: u32, height: u32, width: u32, suffix: &str) -> Result<AnnotatedScene> {
    if top + height > scene.height() || left + width > scene.width() || height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!(
            "crop {height}x{width}@({top},{left}) exceeds {}x{}",
            scene.height(),
            scene.width()
        )));
    }
    let image = imageops::crop_imm(&scene.image, left, top, width, height).to_image();
    let (x0, y0) = (left as f64, top as f64);
    let (x1, y1) = (x0 + width as f64, y0 + height as f64);
    let points = scene
        .points
        .iter()
        .filter(|p| p.x >= x0 && p.x < x1 && p.y >= y0 && p.y < y1)
        .map(|p| Point::new(p.x - x0, p.y - y0))
        .collect();
    AnnotatedScene::new(format!("{}_{suffix}", scene.id), image, points)
}

/// Four quarter-area corner tiles (top-left, top-right, bottom-left,
/// bottom-right) plus one tile of the same size at a seeded offset.
///
/// Odd sides are floored when halving, so the last row or column of an
/// odd-sized image is not covered by the corner tiles.
pub fn five_crops(scene: &AnnotatedScene, rng_seed: u64) -> Result<Vec<AnnotatedScene>> {
    let (h, w) = (scene.height(), scene.width());
    if h < 2 || w < 2 {
        return Err(Error::InvalidArgument(format!("cannot crop a {h}x{w} image")));
    }
    let (ch, cw) = (h / 2, w / 2);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let top = rng.gen_range(0..=h - ch);
    let left = rng.gen_range(0..=w - cw);
    Ok(vec![
        crop(scene, 0, 0, ch, cw, "tl")?,
        crop(scene, 0, cw, ch, cw, "tr")?,
        crop(scene, ch, 0, ch, cw, "bl")?,
        crop(scene, ch, cw, ch, cw, "br")?,
        crop(scene, top, left, ch, cw, "rand")?,
    ])
}

/// `(height, width)` chosen by the aspect rule: portrait inputs become
/// 1024×768, everything else 768×1024.
pub fn aspect_target(height: u32, width: u32) -> (u32, u32) {
    if height > width {
        PORTRAIT
    } else {
        LANDSCAPE
    }
}

/// Bilinear resize to `(height, width)`; points are scaled per axis.
pub fn resize_to(scene: &AnnotatedScene, height: u32, width: u32, suffix: &str) -> Result<AnnotatedScene> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument("resize to an empty image".into()));
    }
    let image = if scene.image.dimensions() == (width, height) {
        scene.image.clone()
    } else {
        imageops::resize(&scene.image, width, height, FilterType::Triangle)
    };
    let sx = width as f64 / scene.width() as f64;
    let sy = height as f64 / scene.height() as f64;
    let below = |v: f64, limit: u32| {
        let limit = limit as f64;
        if v < limit {
            v
        } else {
            limit * (1.0 - f64::EPSILON)
        }
    };
    let points = scene
        .points
        .iter()
        .map(|p| Point::new(below(p.x * sx, width), below(p.y * sy, height)))
        .collect();
    let id = if suffix.is_empty() {
        scene.id.clone()
    } else {
        format!("{}_{suffix}", scene.id)
    };
    AnnotatedScene::new(id, image, points)
}

pub fn aspect_resize(scene: &AnnotatedScene) -> Result<AnnotatedScene> {
    let (h, w) = aspect_target(scene.height(), scene.width());
    resize_to(scene, h, w, "resized")
}

/// Nearest legal input size: each side rounded to a multiple of `multiple`
/// and at least `min_side`.
pub fn legal_size(height: u32, width: u32, multiple: u32, min_side: u32) -> (u32, u32) {
    let round = |v: u32| {
        let r = ((v as f64 / multiple as f64).round() as u32).max(1) * multiple;
        r.max(min_side.div_ceil(multiple) * multiple)
    };
    (round(height), round(width))
}

/// Original scene followed by its augmented variants (five crops and/or the
/// aspect resize).
pub fn augment_pool(scene: &AnnotatedScene, crops: bool, resize: bool, seed: u64) -> Result<Vec<AnnotatedScene>> {
    let mut pool = vec![scene.clone()];
    if crops {
        pool.extend(five_crops(scene, seed)?);
    }
    if resize {
        pool.push(aspect_resize(scene)?);
    }
    Ok(pool)
}
