//! Counting metrics, evaluation runs and report tables.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::checkpoint::load_checkpoint;
use crate::data_io::{load_manifest_scenes, AnnotatedScene, DensityMap};
use crate::error::{Error, Result};
use crate::model::PdaNet;
use crate::training::to_legal_size;

pub fn count_from_density(map: &DensityMap) -> f64 {
    map.sum()
}

fn check_lengths(est: &[f64], gt: &[f64]) -> Result<()> {
    if est.len() != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "{} estimates for {} ground-truth counts",
            est.len(),
            gt.len()
        )));
    }
    if est.is_empty() {
        return Err(Error::InvalidArgument("no counts to compare".into()));
    }
    Ok(())
}

/// Mean absolute count error.
pub fn mae(est: &[f64], gt: &[f64]) -> Result<f64> {
    check_lengths(est, gt)?;
    Ok(est.iter().zip(gt).map(|(e, g)| (e - g).abs()).sum::<f64>() / est.len() as f64)
}

/// Root of the mean squared count error (reported as "MSE" in counting
/// tables).
pub fn mse(est: &[f64], gt: &[f64]) -> Result<f64> {
    check_lengths(est, gt)?;
    let mean = est.iter().zip(gt).map(|(e, g)| (e - g).powi(2)).sum::<f64>() / est.len() as f64;
    Ok(mean.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub id: String,
    pub gt_count: f64,
    pub est_count: f64,
    pub abs_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub rows: Vec<EvalRow>,
    pub mae: f64,
    pub mse: f64,
}

impl EvalResult {
    pub fn from_rows(rows: Vec<EvalRow>) -> Result<Self> {
        let est: Vec<f64> = rows.iter().map(|r| r.est_count).collect();
        let gt: Vec<f64> = rows.iter().map(|r| r.gt_count).collect();
        Ok(Self {
            mae: mae(&est, &gt)?,
            mse: mse(&est, &gt)?,
            rows,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,gt_count,est_count,abs_err\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.id, r.gt_count, r.est_count, r.abs_err).unwrap();
        }
        out
    }
}

/// Count for one scene, resized to the nearest legal input size. The
/// ground truth is the number of annotated heads.
pub fn evaluate_scene(model: &PdaNet<f32>, scene: &AnnotatedScene) -> Result<EvalRow> {
    let legal = to_legal_size(scene, model.config())?;
    let out = model.predict(&legal.image)?;
    let est = count_from_density(&out.dm_final);
    let gt = scene.count() as f64;
    Ok(EvalRow {
        id: scene.id.clone(),
        gt_count: gt,
        est_count: est,
        abs_err: (est - gt).abs(),
    })
}

/// Evaluates every scene with predicted routing. Scenes are spread over the
/// available cores; rows keep the input order.
pub fn evaluate(model: &PdaNet<f32>, scenes: &[AnnotatedScene]) -> Result<EvalResult> {
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("no scenes to evaluate".into()));
    }
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(scenes.len());
    let chunk = scenes.len().div_ceil(workers);
    let rows = std::thread::scope(|s| {
        let handles: Vec<_> = scenes
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|sc| evaluate_scene(model, sc)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut rows = Vec::with_capacity(scenes.len());
        for h in handles {
            rows.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok::<_, Error>(rows)
    })?;
    EvalResult::from_rows(rows)
}

pub fn evaluate_manifest(model: &PdaNet<f32>, manifest: impl AsRef<Path>) -> Result<EvalResult> {
    evaluate(model, &load_manifest_scenes(manifest)?)
}

pub fn evaluate_checkpoint(checkpoint: impl AsRef<Path>, manifest: impl AsRef<Path>) -> Result<EvalResult> {
    let model = load_checkpoint::<f32>(checkpoint)?;
    evaluate_manifest(&model, manifest)
}

/// A published result, kept verbatim as text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ReferenceRow {
    pub dataset: &'static str,
    pub metric: &'static str,
    pub value: &'static str,
}

const fn reference(dataset: &'static str, metric: &'static str, value: &'static str) -> ReferenceRow {
    ReferenceRow { dataset, metric, value }
}

/// Published PDANet results on the standard benchmarks.
pub const REFERENCE_ROWS: [ReferenceRow; 10] = [
    reference("ShanghaiTech A", "MAE / MSE", "58.5 / 93.4"),
    reference("ShanghaiTech B", "MAE / MSE", "7.1 / 10.9"),
    reference("WorldExpo10 S1", "MAE", "1.8"),
    reference("WorldExpo10 S2", "MAE", "9.1"),
    reference("WorldExpo10 S3", "MAE", "9.6"),
    reference("WorldExpo10 S4", "MAE", "7.3"),
    reference("WorldExpo10 S5", "MAE", "2.2"),
    reference("WorldExpo10 avg", "MAE", "6.0"),
    reference("UCF CC 50", "MAE / MSE", "119.8 / 159"),
    reference("UCSD", "MAE / MSE", "0.93 / 1.21"),
];

pub const REFERENCE_LABEL: &str = "literature (not reproduced)";

/// Fixed-width table of our results followed by the reference rows.
pub fn report(results: &[(String, EvalResult)]) -> String {
    let mut out = String::new();
    writeln!(out, "{:<24} {:<10} {:<20} {}", "dataset", "metric", "value", "source").unwrap();
    writeln!(out, "{}", "-".repeat(82)).unwrap();
    for (name, r) in results {
        let value = format!("{:.2} / {:.2}", r.mae, r.mse);
        let source = format!("this run ({} images)", r.rows.len());
        writeln!(out, "{:<24} {:<10} {:<20} {}", name, "MAE / MSE", value, source).unwrap();
    }
    for row in &REFERENCE_ROWS {
        writeln!(out, "{:<24} {:<10} {:<20} {}", row.dataset, row.metric, row.value, REFERENCE_LABEL).unwrap();
    }
    out
}

#[derive(Serialize)]
struct JsonReport<'a> {
    results: Vec<JsonResult<'a>>,
    reference: Vec<JsonReference>,
}

#[derive(Serialize)]
struct JsonResult<'a> {
    name: &'a str,
    images: usize,
    mae: f64,
    mse: f64,
}

#[derive(Serialize)]
struct JsonReference {
    #[serde(flatten)]
    row: ReferenceRow,
    source: &'static str,
}

pub fn report_json(results: &[(String, EvalResult)]) -> serde_json::Value {
    let report = JsonReport {
        results: results
            .iter()
            .map(|(name, r)| JsonResult {
                name,
                images: r.rows.len(),
                mae: r.mae,
                mse: r.mse,
            })
            .collect(),
        reference: REFERENCE_ROWS
            .iter()
            .map(|&row| JsonReference {
                row,
                source: REFERENCE_LABEL,
            })
            .collect(),
    };
    serde_json::to_value(report).expect("report serializes")
}
