//! Scenes, density maps, and their on-disk formats.
//!
//! Annotation JSON:
//! `{"id": str, "image": relative-path, "width": int, "height": int, "points": [[x, y], ...]}`
//!
//! Density binary (all little-endian):
//! `b"PDM1" | u32 height | u32 width | u32 stride | height*width f32, row-major`

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DENSITY_MAGIC: &[u8; 4] = b"PDM1";
const DENSITY_HEADER: usize = 16;

/// Head position in continuous pixel coordinates; `x` is the column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// An RGB image plus its head annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedScene {
    pub id: String,
    pub image: RgbImage,
    pub points: Vec<Point>,
}

impl AnnotatedScene {
    /// Builds a scene, rejecting points outside `[0, W) × [0, H)`.
    pub fn new(id: impl Into<String>, image: RgbImage, points: Vec<Point>) -> Result<Self> {
        let (width, height) = image.dimensions();
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("scene image is empty".into()));
        }
        if let Some((index, p)) = points
            .iter()
            .enumerate()
            .find(|(_, p)| !(p.x >= 0.0 && p.x < width as f64 && p.y >= 0.0 && p.y < height as f64))
        {
            return Err(Error::PointOutOfBounds {
                index,
                x: p.x,
                y: p.y,
                width,
                height,
            });
        }
        Ok(Self {
            id: id.into(),
            image,
            points,
        })
    }

    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationFile {
    id: String,
    image: String,
    width: u32,
    height: u32,
    points: Vec<[f64; 2]>,
}

/// Reads an annotation file and the image it references (relative to the
/// annotation's directory).
pub fn load_annotations(path: impl AsRef<Path>) -> Result<AnnotatedScene> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: AnnotationFile = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    if file.width == 0 || file.height == 0 {
        return Err(Error::InvalidArgument(format!("{}: zero image dimension", path.display())));
    }
    let points: Vec<Point> = file.points.iter().map(|&[x, y]| Point::new(x, y)).collect();
    // bounds are checked against the declared size before touching the image
    if let Some((index, p)) = points
        .iter()
        .enumerate()
        .find(|(_, p)| !(p.x >= 0.0 && p.x < file.width as f64 && p.y >= 0.0 && p.y < file.height as f64))
    {
        return Err(Error::PointOutOfBounds {
            index,
            x: p.x,
            y: p.y,
            width: file.width,
            height: file.height,
        });
    }
    let image_path = path.parent().unwrap_or(Path::new(".")).join(&file.image);
    let image = image::open(&image_path)
        .map_err(|source| Error::Image {
            path: image_path.clone(),
            source,
        })?
        .to_rgb8();
    if image.dimensions() != (file.width, file.height) {
        return Err(Error::Shape(format!(
            "{}: image is {}x{}, annotation says {}x{}",
            image_path.display(),
            image.width(),
            image.height(),
            file.width,
            file.height
        )));
    }
    AnnotatedScene::new(file.id, image, points)
}

/// Writes `<dir>/<id>.json` and `<dir>/<id>.png`; returns the JSON path.
pub fn save_annotations(scene: &AnnotatedScene, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let image_name = format!("{}.png", scene.id);
    let image_path = dir.join(&image_name);
    scene.image.save(&image_path).map_err(|source| Error::Image {
        path: image_path.clone(),
        source,
    })?;
    let file = AnnotationFile {
        id: scene.id.clone(),
        image: image_name,
        width: scene.width(),
        height: scene.height(),
        points: scene.points.iter().map(|p| [p.x, p.y]).collect(),
    };
    let json_path = dir.join(format!("{}.json", scene.id));
    let text = serde_json::to_string_pretty(&file).expect("annotation serializes");
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok(json_path)
}

/// Manifest: a JSON list of annotation paths, relative to the manifest.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[String]) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(entries).expect("manifest serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Resolved annotation paths listed in a manifest.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<String> = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(entries.iter().map(|e| base.join(e)).collect())
}

pub fn load_manifest_scenes(path: impl AsRef<Path>) -> Result<Vec<AnnotatedScene>> {
    read_manifest(path)?.iter().map(load_annotations).collect()
}

/// People-per-cell grid; `stride` is the number of source pixels per cell
/// side.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    pub values: Array2<f32>,
    pub stride: u32,
}

impl DensityMap {
    pub fn new(values: Array2<f32>, stride: u32) -> Self {
        Self { values, stride }
    }

    pub fn zeros(height: usize, width: usize, stride: u32) -> Self {
        Self::new(Array2::zeros((height, width)), stride)
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    /// Sum over all cells, accumulated in f64.
    pub fn sum(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(DENSITY_HEADER + 4 * self.values.len());
        out.extend_from_slice(DENSITY_MAGIC);
        out.extend_from_slice(&(self.height() as u32).to_le_bytes());
        out.extend_from_slice(&(self.width() as u32).to_le_bytes());
        out.extend_from_slice(&self.stride.to_le_bytes());
        for v in self.values.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != DENSITY_MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < DENSITY_HEADER {
            return Err(Error::Truncated {
                expected: DENSITY_HEADER,
                actual: bytes.len(),
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let (height, width, stride) = (word(4) as usize, word(8) as usize, word(12));
        let expected = DENSITY_HEADER + 4 * height * width;
        if bytes.len() != expected {
            return Err(Error::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        let values = bytes[DENSITY_HEADER..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self::new(Array2::from_shape_vec((height, width), values).expect("size checked"), stride))
    }
}

pub fn save_density_map(map: &DensityMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, map.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_density_map(path: impl AsRef<Path>) -> Result<DensityMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    DensityMap::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn write_annotation(dir: &Path, json: &str, w: u32, h: u32) -> PathBuf {
        RgbImage::new(w, h).save(dir.join("img.png")).unwrap();
        let path = dir.join("scene.json");
        fs::write(&path, json).unwrap();
        path
    }

    #[test]
    fn loads_single_point() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_annotation(
            dir.path(),
            r#"{"id":"a","image":"img.png","width":100,"height":50,"points":[[10,20]]}"#,
            100,
            50,
        );
        let scene = load_annotations(path).unwrap();
        assert_eq!(scene.points, vec![Point::new(10.0, 20.0)]);
        assert_eq!((scene.width(), scene.height()), (100, 50));
    }

    #[test]
    fn loads_empty_points() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_annotation(
            dir.path(),
            r#"{"id":"a","image":"img.png","width":100,"height":50,"points":[]}"#,
            100,
            50,
        );
        assert_eq!(load_annotations(path).unwrap().count(), 0);
    }

    #[test]
    fn rejects_point_on_right_edge() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_annotation(
            dir.path(),
            r#"{"id":"a","image":"img.png","width":100,"height":50,"points":[[100,20]]}"#,
            100,
            50,
        );
        let err = load_annotations(path).unwrap_err();
        assert!(err.to_string().starts_with("point 0 out of bounds"), "{err}");
    }

    #[test]
    fn missing_and_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_annotations(dir.path().join("none.json")), Err(Error::Io { .. })));
        let path = dir.path().join("bad.json");
        fs::write(&path, "{not json").unwrap();
        assert!(matches!(load_annotations(&path), Err(Error::Json { .. })));
    }

    #[test]
    fn density_file_layout() {
        let map = DensityMap::new(array![[0.0, 1.0], [2.0, 3.0]], 1);
        let bytes = map.to_bytes();
        assert_eq!(bytes.len(), 4 + 4 + 4 + 4 + 16);
        assert_eq!(&bytes[..4], b"PDM1");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &1.0f32.to_le_bytes());
        assert_eq!(DensityMap::from_bytes(&bytes).unwrap(), map);
    }

    #[test]
    fn density_single_cell() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pdm");
        save_density_map(&DensityMap::new(array![[0.5]], 8), &path).unwrap();
        let back = load_density_map(&path).unwrap();
        assert_eq!(back.sum(), 0.5);
        assert_eq!(back.stride, 8);
    }

    #[test]
    fn density_errors() {
        let err = DensityMap::from_bytes(&[]).unwrap_err();
        assert_eq!(err.to_string(), "bad magic");
        let mut bytes = DensityMap::new(array![[1.0, 2.0]], 1).to_bytes();
        bytes.pop();
        let err = DensityMap::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Truncated { expected: 24, actual: 23 }));
    }
}
