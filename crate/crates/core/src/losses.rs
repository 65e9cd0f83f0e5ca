//! Training objective: pixel MSE on the sparse, dense and final maps plus
//! clipped binary cross-entropy on the classifier.

use ndarray::{ArrayD, IxDyn};

use crate::config::LossWeights;
use crate::data_io::DensityMap;
use crate::density_gt::DensityClass;
use crate::error::{Error, Result};
use crate::model::{ForwardPass, ModelOutput};
use crate::tensor::{clip_prob, Scalar, Tensor};

/// Individual terms (unweighted) and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub sparse: f64,
    pub dense: f64,
    pub final_map: f64,
    pub cls: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn weighted(sparse: f64, dense: f64, final_map: f64, cls: f64, w: &LossWeights) -> Self {
        Self {
            sparse,
            dense,
            final_map,
            cls,
            total: w.sparse * sparse + w.dense * dense + w.final_map * final_map + w.cls * cls,
        }
    }
}

fn check_maps(pred: &DensityMap, gt: &DensityMap) -> Result<()> {
    if pred.values.dim() != gt.values.dim() || pred.stride != gt.stride {
        return Err(Error::Shape(format!(
            "density loss: {:?}@{} vs {:?}@{}",
            pred.values.dim(),
            pred.stride,
            gt.values.dim(),
            gt.stride
        )));
    }
    Ok(())
}

/// Mean squared pixel error.
pub fn density_loss(pred: &DensityMap, gt: &DensityMap) -> Result<f64> {
    check_maps(pred, gt)?;
    let n = pred.values.len().max(1) as f64;
    Ok(pred
        .values
        .iter()
        .zip(gt.values.iter())
        .map(|(&p, &g)| (p as f64 - g as f64).powi(2))
        .sum::<f64>()
        / n)
}

/// `-[y ln p + (1-y) ln(1-p)]` with `p` clipped to `[1e-7, 1 - 1e-7]`.
pub fn classification_loss(prob: f64, label: DensityClass) -> f64 {
    let p = clip_prob(prob);
    let y = label.label() as f64;
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

pub fn total_loss(
    out: &ModelOutput,
    gt_sparse: &DensityMap,
    gt_dense: &DensityMap,
    gt_final: &DensityMap,
    label: DensityClass,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    Ok(LossBreakdown::weighted(
        density_loss(&out.dm_sparse, gt_sparse)?,
        density_loss(&out.dm_dense, gt_dense)?,
        density_loss(&out.dm_final, gt_final)?,
        classification_loss(out.prob, label),
        weights,
    ))
}

/// Targets in the network's precision, shaped like the decoder maps.
#[derive(Debug, Clone)]
pub struct TargetTensors<T: Scalar> {
    pub sparse: ArrayD<T>,
    pub dense: ArrayD<T>,
    pub full: ArrayD<T>,
    pub class: DensityClass,
}

pub fn map_tensor<T: Scalar>(map: &DensityMap) -> ArrayD<T> {
    let (h, w) = map.values.dim();
    ArrayD::from_shape_vec(
        IxDyn(&[1, h, w]),
        map.values.iter().map(|&v| T::from_f32(v).unwrap()).collect(),
    )
    .expect("shape")
}

impl<T: Scalar> TargetTensors<T> {
    pub fn new(sparse: &DensityMap, dense: &DensityMap, full: &DensityMap, class: DensityClass) -> Self {
        Self {
            sparse: map_tensor(sparse),
            dense: map_tensor(dense),
            full: map_tensor(full),
            class,
        }
    }
}

/// The four weighted loss terms `[sparse, dense, final, cls]` as graph
/// scalars.
pub fn weighted_loss_terms<T: Scalar>(
    pass: &ForwardPass<T>,
    targets: &TargetTensors<T>,
    weights: &LossWeights,
) -> Result<[Tensor<T>; 4]> {
    let w = |v: f64| T::lit(v);
    Ok([
        pass.dm_sparse.mse(&targets.sparse)?.scale(w(weights.sparse)),
        pass.dm_dense.mse(&targets.dense)?.scale(w(weights.dense)),
        pass.dm_final.mse(&targets.full)?.scale(w(weights.final_map)),
        pass.prob.bce(T::lit(targets.class.label() as f64)).scale(w(weights.cls)),
    ])
}

/// Differentiable total loss for a forward pass.
pub fn total_loss_tensor<T: Scalar>(
    pass: &ForwardPass<T>,
    targets: &TargetTensors<T>,
    weights: &LossWeights,
) -> Result<(Tensor<T>, LossBreakdown)> {
    let ls = pass.dm_sparse.mse(&targets.sparse)?;
    let ld = pass.dm_dense.mse(&targets.dense)?;
    let lf = pass.dm_final.mse(&targets.full)?;
    let lc = pass.prob.bce(T::lit(targets.class.label() as f64));
    let w = |v: f64| T::lit(v);
    let total = ls
        .scale(w(weights.sparse))
        .add(&ld.scale(w(weights.dense)))?
        .add(&lf.scale(w(weights.final_map)))?
        .add(&lc.scale(w(weights.cls)))?;
    let f = |t: &Tensor<T>| t.item().to_f64().unwrap();
    let breakdown = LossBreakdown {
        sparse: f(&ls),
        dense: f(&ld),
        final_map: f(&lf),
        cls: f(&lc),
        total: f(&total),
    };
    Ok((total, breakdown))
}
