//! Optimization loop and the finite-difference gradient check.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augmentation::{augment_pool, legal_size, resize_to};
use crate::checkpoint::save_checkpoint;
use crate::config::{OptimConfig, PdaNetConfig};
use crate::data_io::{load_manifest_scenes, AnnotatedScene};
use crate::density_gt::{build_targets, default_class_threshold, default_region_threshold, scene_density, DensityClass};
use crate::error::{Error, Result};
use crate::losses::{total_loss_tensor, weighted_loss_terms, LossBreakdown, TargetTensors};
use crate::model::{image_tensor, PdaNet};
use crate::params::{Binding, Gradients, ParamStore};
use crate::synthetic::{generate_scene, SynthSpec};
use crate::tensor::{with_branch_trace, Tensor};

pub const CHECKPOINT_FILE: &str = "model.pdck";
pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_HEADER: &str = "iter,loss,loss_s,loss_d,loss_f,loss_cls,train_mae";

/// Adam over a parameter store.
#[derive(Debug, Clone)]
pub struct Adam {
    config: OptimConfig,
    step: u64,
    m: Vec<Option<ArrayD<f32>>>,
    v: Vec<Option<ArrayD<f32>>>,
}

impl Adam {
    pub fn new(config: OptimConfig, n_params: usize) -> Self {
        Self {
            config,
            step: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Parameters without a gradient are left alone and keep their moments.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &Gradients<f32>) {
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let lr = (c.lr / bc1) as f32;
        let sqrt_bc2 = bc2.sqrt() as f32;
        let eps = c.eps as f32;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self.v[i].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
            });
            ndarray::Zip::from(store.value_mut(id)).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * m / (v.sqrt() / sqrt_bc2 + eps);
            });
        }
    }
}

/// Resizes a scene to the nearest size the network accepts.
pub fn to_legal_size(scene: &AnnotatedScene, config: &PdaNetConfig) -> Result<AnnotatedScene> {
    let (h, w) = legal_size(
        scene.height(),
        scene.width(),
        config.input_multiple() as u32,
        config.min_input_side() as u32,
    );
    if (h, w) == (scene.height(), scene.width()) {
        Ok(scene.clone())
    } else {
        resize_to(scene, h, w, "legal")
    }
}

/// One ready-to-train image.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: ArrayD<f32>,
    pub targets: TargetTensors<f32>,
    pub count: f64,
}

/// Expands every scene into its augmentation pool, resolves the automatic
/// thresholds on that pool (writing them back into `config`) and builds the
/// targets.
pub fn prepare_samples(config: &mut PdaNetConfig, scenes: &[AnnotatedScene]) -> Result<Vec<Sample>> {
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("no training scenes".into()));
    }
    let mut pool = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        let seed = config.seed.wrapping_add(i as u64);
        for item in augment_pool(scene, config.augment.crops, config.augment.resize, seed)? {
            pool.push(to_legal_size(&item, config)?);
        }
    }
    if config.class_threshold.is_none() {
        let counts: Vec<f64> = pool.iter().map(|s| s.count() as f64).collect();
        config.class_threshold = Some(default_class_threshold(&counts));
    }
    if config.region_threshold.is_none() {
        let maps = pool
            .iter()
            .map(|s| scene_density(&s.points, s.height() as usize, s.width() as usize, config))
            .collect::<Result<Vec<_>>>()?;
        config.region_threshold = Some(default_region_threshold(&maps));
    }
    let (class_thr, region_thr) = (config.class_threshold.unwrap(), config.region_threshold.unwrap());
    let stride = config.output_stride();
    pool.iter()
        .map(|s| {
            let t = build_targets(
                &s.points,
                s.height() as usize,
                s.width() as usize,
                config,
                class_thr,
                region_thr,
                stride,
            )?;
            Ok(Sample {
                id: s.id.clone(),
                image: image_tensor(&s.image),
                targets: TargetTensors::new(&t.sparse, &t.dense, &t.full, t.class),
                count: t.count,
            })
        })
        .collect()
}

/// One row of the metrics log. `train_mae` is the mean absolute count error
/// over the most recent epoch of samples (fewer at the start).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub loss: LossBreakdown,
    pub train_mae: f64,
}

impl IterRecord {
    pub fn csv_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{}",
            self.iter, l.total, l.sparse, l.dense, l.final_map, l.cls, self.train_mae
        )
    }
}

#[derive(Debug)]
pub struct TrainRun {
    pub model: PdaNet<f32>,
    pub history: Vec<IterRecord>,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

/// Trains from a manifest, writing the checkpoint and CSV log to `out_dir`.
pub fn train(config: &PdaNetConfig, manifest: impl AsRef<Path>, out_dir: impl AsRef<Path>) -> Result<TrainRun> {
    let scenes = load_manifest_scenes(manifest)?;
    train_scenes(config, &scenes, Some(out_dir.as_ref()))
}

/// Training on in-memory scenes. Output files are written only when
/// `out_dir` is given.
pub fn train_scenes(config: &PdaNetConfig, scenes: &[AnnotatedScene], out_dir: Option<&Path>) -> Result<TrainRun> {
    let mut config = config.clone();
    config.validate()?;
    let samples = prepare_samples(&mut config, scenes)?;
    let iterations = config.train.iterations;
    let mut model = PdaNet::<f32>::new(config.clone())?;
    let mut adam = Adam::new(config.train.clone(), model.params().len());
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_0de5);

    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let checkpoint = out_dir.map(|d| d.join(CHECKPOINT_FILE));

    let n = samples.len();
    let mut order: Vec<usize> = Vec::new();
    let mut recent_err = vec![f64::NAN; n];
    let mut history = Vec::with_capacity(iterations);
    for iter in 0..iterations {
        if order.is_empty() {
            order = (0..n).collect();
            order.shuffle(&mut order_rng);
            order.reverse();
        }
        let idx = order.pop().unwrap();
        let sample = &samples[idx];

        let (loss, grads, err) = {
            let b = Binding::tracked(model.params());
            let x = Tensor::constant(sample.image.clone());
            let pass = model.forward(&b, &x, Some(sample.targets.class))?;
            let (total, breakdown) = total_loss_tensor(&pass, &sample.targets, &config.loss)?;
            let est = pass.dm_final.value().iter().map(|&v| v as f64).sum::<f64>();
            let grads = total.backward(model.params().len());
            (breakdown, grads, (est - sample.count).abs())
        };
        if !loss.total.is_finite() || !grads.all_finite() {
            let saved = match &checkpoint {
                Some(path) => {
                    save_checkpoint(&model, path)?;
                    Some(path.clone())
                }
                None => None,
            };
            return Err(Error::Diverged {
                iteration: iter,
                checkpoint: saved,
            });
        }
        adam.step(model.params_mut(), &grads);

        recent_err[idx] = err;
        let seen: Vec<f64> = recent_err.iter().copied().filter(|e| !e.is_nan()).collect();
        let record = IterRecord {
            iter,
            loss,
            train_mae: seen.iter().sum::<f64>() / seen.len() as f64,
        };
        if let Some((f, path)) = &mut log {
            writeln!(f, "{}", record.csv_line()).map_err(|e| Error::io(&*path, e))?;
        }
        if iter % 100 == 0 || iter + 1 == iterations {
            log::info!("iter {iter}: loss {:.6e} train_mae {:.3}", loss.total, record.train_mae);
        }
        history.push(record);
    }
    if let Some(path) = &checkpoint {
        save_checkpoint(&model, path)?;
    }
    Ok(TrainRun {
        model,
        history,
        checkpoint,
        log: log.map(|(_, p)| p),
    })
}

/// Widest channel multiplier the gradient check accepts.
pub const GRAD_CHECK_MAX_MULTIPLIER: f64 = 1.0 / 32.0;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `(parameter name, relative error)` for every parameter tensor.
    pub per_tensor: Vec<(String, f64)>,
    pub max_rel_error: f64,
    /// Coordinates where `x ± eps` crossed a rectifier, max or clipping
    /// boundary.
    pub kink_steps: usize,
}

/// A step that crosses a kink is divided by ten at most this many times.
const MAX_SHRINKS: usize = 3;

/// `‖a − n‖ / max(‖a‖, ‖n‖)`. Differences no larger than `floor` (the
/// rounding noise of the finite differences) count as agreement.
pub fn relative_error(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>, floor: f64) -> f64 {
    let norm = |a: &ArrayD<f64>| a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff = (analytic - numeric).iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if diff <= floor || scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Checks every parameter gradient of the total loss, summed over both
/// decoder routes, against central differences in 64-bit precision. The
/// network is built from `config` with small random biases so that no
/// rectifier sits exactly at its kink; the input is a small synthetic scene.
pub fn grad_check(config: &PdaNetConfig, eps: f64) -> Result<GradCheckReport> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    if config.channel_multiplier > GRAD_CHECK_MAX_MULTIPLIER {
        return Err(Error::Config(format!(
            "gradient check needs channel_multiplier <= 1/32, got {}",
            config.channel_multiplier
        )));
    }
    let mut config = config.clone();
    let side = config.min_input_side() as u32;
    let scene = generate_scene(&SynthSpec::new(config.seed, 6, side, side))?;
    let mut samples = prepare_samples(&mut config, &[scene])?;
    let sample = samples.remove(0);
    let mut model = PdaNet::<f64>::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xb1a5);
    let ids: Vec<_> = model.params().ids().collect();
    for &id in &ids {
        if model.params().name(id).ends_with(".bias") {
            model.params_mut().value_mut(id).mapv_inplace(|_| rng.gen_range(-0.1..0.1));
        }
    }
    grad_check_model(&model, &sample.image.mapv(f64::from), &cast_targets(&sample.targets), eps)
}

fn cast_targets(t: &TargetTensors<f32>) -> TargetTensors<f64> {
    TargetTensors {
        sparse: t.sparse.mapv(f64::from),
        dense: t.dense.mapv(f64::from),
        full: t.full.mapv(f64::from),
        class: t.class,
    }
}

/// Gradient check on an existing model; the model itself is not modified.
/// When a central difference straddles a kink of the piecewise-smooth loss
/// (a probe lands on a different piece than the base point), a one-sided
/// second-order difference on the unbroken side is used instead, and failing
/// that the step shrinks.
pub fn grad_check_model(
    model: &PdaNet<f64>,
    image: &ArrayD<f64>,
    targets: &TargetTensors<f64>,
    eps: f64,
) -> Result<GradCheckReport> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let weights = &model.config().loss;
    let routes = [DensityClass::Sparse, DensityClass::Dense];
    let terms = |b: &Binding<'_, f64>| -> Result<Vec<Tensor<f64>>> {
        let x = Tensor::constant(image.clone());
        let mut out = Vec::new();
        for pass in model.forward_routes(b, &x, &routes)? {
            out.extend(weighted_loss_terms(&pass, targets, weights)?);
        }
        Ok(out)
    };

    let store = model.params();
    let grads = {
        let parts = terms(&Binding::tracked(store))?;
        let mut total = parts[0].clone();
        for p in &parts[1..] {
            total = total.add(p)?;
        }
        total.backward(store.len())
    };
    // terms are differenced one by one, which keeps the small density terms
    // from being rounded against the larger classification term
    let eval = |probe: &ParamStore<f64>| -> Result<(Vec<f64>, u64)> {
        let (parts, trace) = with_branch_trace(|| terms(&Binding::frozen(probe)));
        Ok((parts?.iter().map(|t| t.item()).collect(), trace))
    };
    let combine = |coef: &[(f64, &[f64])], h: f64| -> f64 {
        let n = coef[0].1.len();
        (0..n).map(|k| coef.iter().map(|(c, v)| c * v[k]).sum::<f64>()).sum::<f64>() / (2.0 * h)
    };
    let (base, base_trace) = eval(store)?;
    // size of one rounding error in a central difference of the loss
    let roundoff = f64::EPSILON * base.iter().map(|v| v.abs()).sum::<f64>() / (2.0 * eps);
    let mut probe = store.clone();
    let mut per_tensor = Vec::with_capacity(store.len());
    let mut kink_steps = 0;
    for id in store.ids() {
        let analytic = grads
            .get(id)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(store.value(id).raw_dim()));
        let mut numeric = ArrayD::zeros(analytic.raw_dim());
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = store.value(id).as_slice().expect("contiguous")[i];
            let mut at = |x: f64| {
                probe.value_mut(id).as_slice_mut().unwrap()[i] = x;
                let r = eval(&probe);
                probe.value_mut(id).as_slice_mut().unwrap()[i] = orig;
                r
            };
            let mut h = eps;
            let mut shrinks = 0;
            let mut kinked = false;
            *slot = loop {
                let (up, up_trace) = at(orig + h)?;
                let (down, down_trace) = at(orig - h)?;
                if up_trace == base_trace && down_trace == base_trace {
                    break combine(&[(1.0, &up), (-1.0, &down)], h);
                }
                kinked = true;
                // second-order one-sided difference on a side that stays on
                // the base piece
                if up_trace == base_trace {
                    let (up2, t) = at(orig + 2.0 * h)?;
                    if t == base_trace {
                        break combine(&[(4.0, &up), (-3.0, &base), (-1.0, &up2)], h);
                    }
                }
                if down_trace == base_trace {
                    let (down2, t) = at(orig - 2.0 * h)?;
                    if t == base_trace {
                        break combine(&[(3.0, &base), (-4.0, &down), (1.0, &down2)], h);
                    }
                }
                if shrinks == MAX_SHRINKS {
                    break combine(&[(1.0, &up), (-1.0, &down)], h);
                }
                h /= 10.0;
                shrinks += 1;
            };
            if kinked {
                kink_steps += 1;
            }
        }
        let floor = roundoff * (analytic.len() as f64).sqrt();
        per_tensor.push((store.name(id).to_string(), relative_error(&analytic, &numeric, floor)));
    }
    let max_rel_error = per_tensor.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_tensor,
        max_rel_error,
        kink_steps,
    })
}
