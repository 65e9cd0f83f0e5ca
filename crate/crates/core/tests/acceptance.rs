//! Acceptance suite. Runs every criterion in sequence, prints one
//! `PASS`/`FAIL` line each and exits nonzero if any failed.

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use image::RgbImage;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pdanet::augmentation::five_crops;
use pdanet::checkpoint::{checkpoint_bytes, load_checkpoint, model_from_bytes, save_checkpoint};
use pdanet::data_io::{load_density_map, save_density_map};
use pdanet::density_gt::{
    default_region_threshold, downsample_preserving_count, scene_density, split_sparse_dense,
};
use pdanet::evaluation::{count_from_density, evaluate, mae, mse, report, report_json, REFERENCE_LABEL, REFERENCE_ROWS};
use pdanet::losses::{total_loss_tensor, TargetTensors};
use pdanet::model::{image_tensor, route};
use pdanet::params::Binding;
use pdanet::synthetic::{generate_scene, SynthSpec};
use pdanet::tensor::Tensor;
use pdanet::training::{grad_check, prepare_samples, train_scenes};
use pdanet::{AnnotatedScene, DensityClass, DensityMap, PdaNet, PdaNetConfig};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(elapsed: Duration, limit: Duration) -> Outcome {
    ensure!(elapsed < limit, "took {elapsed:.1?}, limit {limit:?}");
    Ok(format!("{elapsed:.1?}"))
}

fn count_conservation() -> Outcome {
    let start = Instant::now();
    let config = PdaNetConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let h = rng.gen_range(64..=320);
        let w = rng.gen_range(64..=320);
        let scene = generate_scene(&SynthSpec::varied(11, i, h, w, (0, 500))).map_err(|e| e.to_string())?;
        let map = scene_density(&scene.points, h as usize, w as usize, &config).map_err(|e| e.to_string())?;
        let n = scene.count() as f64;
        let err = (count_from_density(&map) - n).abs() / n.max(1.0);
        ensure!(err <= 1e-4, "scene {i} ({n} people): relative error {err:e}");
        worst = worst.max(err);
    }
    let time = within(start.elapsed(), Duration::from_secs(60))?;
    Ok(format!("200 scenes, worst {worst:.2e}, {time}"))
}

fn random_map(rng: &mut ChaCha8Rng) -> DensityMap {
    let h = rng.gen_range(1..=300);
    let w = rng.gen_range(1..=300);
    let sparsity = rng.gen_range(0.0..0.9);
    let values = Array2::from_shape_simple_fn((h, w), || {
        if rng.gen_bool(sparsity) {
            0.0
        } else {
            rng.gen_range(0.0f32..0.05)
        }
    });
    DensityMap::new(values, 1)
}

fn block_downsample_conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let map = random_map(&mut rng);
        let down = downsample_preserving_count(&map, 8).map_err(|e| e.to_string())?;
        ensure!(
            down.values.dim() == (map.height().div_ceil(8), map.width().div_ceil(8)),
            "map {i}: shape {:?}",
            down.values.dim()
        );
        let total = map.sum();
        let err = (down.sum() - total).abs() / total.max(f64::MIN_POSITIVE);
        ensure!(err <= 1e-5, "map {i}: relative error {err:e}");
        worst = worst.max(err);
    }
    Ok(format!("100 maps, worst {worst:.2e}"))
}

fn partition_laws() -> Outcome {
    let config = PdaNetConfig::default();
    for i in 0..20u64 {
        let h = 64 + 2 * (i as u32 * 7 % 40);
        let w = 64 + 2 * (i as u32 * 13 % 50);
        let scene = generate_scene(&SynthSpec::new(300 + i, 40 * i as usize, h, w)).map_err(|e| e.to_string())?;
        let crops = five_crops(&scene, i).map_err(|e| e.to_string())?;
        let (ch, cw) = (f64::from(h / 2), f64::from(w / 2));
        let offsets = [(0.0, 0.0), (cw, 0.0), (0.0, ch), (cw, ch)];
        let mut back: Vec<(f64, f64)> = crops[..4]
            .iter()
            .zip(offsets)
            .flat_map(|(c, (dx, dy))| c.points.iter().map(move |p| (p.x + dx, p.y + dy)))
            .collect();
        ensure!(
            back.len() == scene.count(),
            "scene {i}: corner crops hold {} of {} points",
            back.len(),
            scene.count()
        );
        let mut orig: Vec<(f64, f64)> = scene.points.iter().map(|p| (p.x, p.y)).collect();
        back.sort_by(|a, b| a.partial_cmp(b).unwrap());
        orig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (a, b) in back.iter().zip(&orig) {
            ensure!(
                (a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9,
                "scene {i}: point {b:?} came back as {a:?}"
            );
        }

        let map = scene_density(&scene.points, h as usize, w as usize, &config).map_err(|e| e.to_string())?;
        let tau = default_region_threshold([&map]);
        for tau in [tau, 0.0, f64::INFINITY] {
            let (sparse, dense) = split_sparse_dense(&map, tau);
            let max_abs = (&sparse.values + &dense.values - &map.values)
                .iter()
                .fold(0.0f32, |m, v| m.max(v.abs()));
            ensure!(max_abs == 0.0, "scene {i}, tau {tau}: reconstruction error {max_abs}");
        }
    }
    Ok("20 scenes".into())
}

fn shape_law() -> Outcome {
    let model = PdaNet::<f32>::new(PdaNetConfig::default()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut shapes = Vec::new();
    for (h, w) in [(768u32, 1024u32), (1024, 768), (384, 512)] {
        let image = RgbImage::from_fn(w, h, |_, _| image::Rgb(rng.gen()));
        let out = model.predict(&image).map_err(|e| e.to_string())?;
        let expected = (h as usize / 8, w as usize / 8);
        for (name, map) in [("sparse", &out.dm_sparse), ("dense", &out.dm_dense), ("final", &out.dm_final)] {
            ensure!(map.values.dim() == expected, "{h}x{w} {name}: {:?}", map.values.dim());
            ensure!(map.values.iter().all(|&v| v >= 0.0), "{h}x{w} {name}: negative value");
        }
        ensure!((0.0..=1.0).contains(&out.prob), "{h}x{w}: prob {}", out.prob);
        shapes.push(format!("{}x{}", expected.0, expected.1));
    }
    Ok(format!("full width, maps {}", shapes.join(", ")))
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let report = grad_check(&PdaNetConfig::tiny(1.0 / 32.0), 1e-4).map_err(|e| e.to_string())?;
    ensure!(
        report.max_rel_error < 1e-3,
        "max relative error {:e} (worst tensors: {:?})",
        report.max_rel_error,
        report.per_tensor.iter().filter(|(_, e)| *e >= 1e-3).collect::<Vec<_>>()
    );
    let time = within(start.elapsed(), Duration::from_secs(600))?;
    Ok(format!(
        "{} tensors, max relative error {:.2e}, {time}",
        report.per_tensor.len(),
        report.max_rel_error
    ))
}

fn overfit_config() -> PdaNetConfig {
    let mut config = PdaNetConfig::tiny(1.0 / 16.0);
    config.seed = 0;
    config.train.lr = 1e-3;
    config.train.beta2 = 0.99;
    config.train.eps = 1e-6;
    config.train.iterations = 2000;
    config
}

fn overfit_scenes() -> Result<Vec<AnnotatedScene>, String> {
    (0..4u64)
        .map(|i| generate_scene(&SynthSpec::new(100 + i, 4 + 4 * i as usize, 64, 64)).map_err(|e| e.to_string()))
        .collect()
}

fn overfit_smoke() -> Outcome {
    let start = Instant::now();
    let config = overfit_config();
    let scenes = overfit_scenes()?;
    let first = train_scenes(&config, &scenes, None).map_err(|e| e.to_string())?;
    let second = train_scenes(&config, &scenes, None).map_err(|e| e.to_string())?;
    ensure!(first.history.len() == 2000, "{} iterations", first.history.len());
    let bits = |run: &pdanet::training::TrainRun| -> Vec<[u64; 5]> {
        run.history
            .iter()
            .map(|r| {
                let l = r.loss;
                [l.total, l.sparse, l.dense, l.final_map, l.cls].map(f64::to_bits)
            })
            .collect()
    };
    ensure!(bits(&first) == bits(&second), "loss histories differ between runs");
    ensure!(
        checkpoint_bytes(&first.model) == checkpoint_bytes(&second.model),
        "final parameters differ between runs"
    );
    let result = evaluate(&first.model, &scenes).map_err(|e| e.to_string())?;
    ensure!(result.mae < 1.0, "train MAE {:.3}", result.mae);
    let time = within(start.elapsed(), Duration::from_secs(30 * 60))?;
    Ok(format!("train MAE {:.3}, loss history bit-identical, {time} for two runs", result.mae))
}

fn routing() -> Outcome {
    let mut config = PdaNetConfig::tiny(1.0 / 32.0);
    let scene = generate_scene(&SynthSpec::new(7, 20, 64, 64)).map_err(|e| e.to_string())?;
    let sample = prepare_samples(&mut config, &[scene.clone()]).map_err(|e| e.to_string())?.remove(0);
    let model = PdaNet::<f32>::new(config.clone()).map_err(|e| e.to_string())?;
    let exclusive = model.dense_branch_params(DensityClass::Dense);
    ensure!(!exclusive.is_empty(), "dense branch has no parameters");

    let grads_for = |teacher: DensityClass, scale: f64| {
        let b = Binding::tracked(model.params());
        let x = Tensor::constant(sample.image.clone());
        let pass = model.forward(&b, &x, Some(teacher)).unwrap();
        let targets = TargetTensors { class: teacher, ..sample.targets.clone() };
        let mut weights = config.loss;
        weights.sparse *= scale;
        weights.dense *= scale;
        weights.final_map *= scale;
        weights.cls *= scale;
        let (total, _) = total_loss_tensor(&pass, &targets, &weights).unwrap();
        total.backward(model.params().len())
    };
    let nonzero = |g: &pdanet::params::Gradients<f32>| -> Vec<bool> {
        model
            .params()
            .ids()
            .map(|id| g.get(id).is_some_and(|a| a.iter().any(|&v| v != 0.0)))
            .collect()
    };

    let sparse = grads_for(DensityClass::Sparse, 1.0);
    for &id in &exclusive {
        let zero = sparse.get(id).map_or(true, |g| g.iter().all(|&v| v == 0.0));
        ensure!(zero, "{} has gradient under teacher label 0", model.params().name(id));
    }
    ensure!(
        nonzero(&sparse) == nonzero(&grads_for(DensityClass::Sparse, 3.5)),
        "scaling the loss changed which parameters receive gradient"
    );
    let dense = grads_for(DensityClass::Dense, 1.0);
    ensure!(
        exclusive.iter().any(|&id| dense.get(id).is_some_and(|g| g.iter().any(|&v| v != 0.0))),
        "dense branch receives no gradient under teacher label 1"
    );

    ensure!(route(0.5) == DensityClass::Dense, "route(0.5) is not dense");
    ensure!(route(0.75) == DensityClass::Dense, "route(0.75) is not dense");
    ensure!(route(0.5 - 1e-12) == DensityClass::Sparse, "route just below 0.5 is not sparse");
    let mut zeroed = model.clone();
    zeroed.params_mut().fill(0.0);
    let out = zeroed.predict(&scene.image).map_err(|e| e.to_string())?;
    ensure!(out.prob == 0.5, "zeroed classifier gives prob {}", out.prob);
    ensure!(out.routed_branch == DensityClass::Dense, "prob 0.5 routed to {:?}", out.routed_branch);
    let b = Binding::frozen(model.params());
    let free = model
        .forward(&b, &Tensor::constant(image_tensor::<f32>(&scene.image)), None)
        .map_err(|e| e.to_string())?;
    ensure!(free.routed == route(free.prob.item() as f64), "untaught forward ignored the routing rule");
    Ok(format!("{} dense-branch tensors gradient-free under label 0", exclusive.len()))
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let n = rng.gen_range(1..=200);
        let est: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1000.0)).collect();
        let gt: Vec<f64> = (0..n).map(|_| rng.gen_range(0..1000) as f64).collect();
        let mut abs_sum = 0.0;
        let mut sq_sum = 0.0;
        for k in 0..n {
            let d = est[k] - gt[k];
            abs_sum += d.abs();
            sq_sum += d * d;
        }
        let oracle_mae = abs_sum / n as f64;
        let oracle_mse = (sq_sum / n as f64).sqrt();
        let (m, s) = (mae(&est, &gt).map_err(|e| e.to_string())?, mse(&est, &gt).map_err(|e| e.to_string())?);
        ensure!(rel(m, oracle_mae) <= 1e-9, "vector {i}: mae {m} vs {oracle_mae}");
        ensure!(rel(s, oracle_mse) <= 1e-9, "vector {i}: mse {s} vs {oracle_mse}");
        ensure!(m <= s, "vector {i}: MAE {m} > MSE {s}");
        worst = worst.max(rel(m, oracle_mae)).max(rel(s, oracle_mse));
    }
    let (m, s) = (mae(&[10.0, 20.0], &[12.0, 18.0]).unwrap(), mse(&[10.0, 20.0], &[12.0, 18.0]).unwrap());
    ensure!(m == 2.0 && s == 2.0, "worked case gives {m}/{s}");
    Ok(format!("1000 vectors, worst relative deviation {worst:.1e}, worked case 2.0/2.0"))
}

fn report_fidelity() -> Outcome {
    let expected = [
        ("ShanghaiTech A", "58.5 / 93.4"),
        ("ShanghaiTech B", "7.1 / 10.9"),
        ("WorldExpo10 S1", "1.8"),
        ("WorldExpo10 S2", "9.1"),
        ("WorldExpo10 S3", "9.6"),
        ("WorldExpo10 S4", "7.3"),
        ("WorldExpo10 S5", "2.2"),
        ("WorldExpo10 avg", "6.0"),
        ("UCF CC 50", "119.8 / 159"),
        ("UCSD", "0.93 / 1.21"),
    ];
    for (row, (dataset, value)) in REFERENCE_ROWS.iter().zip(expected) {
        ensure!(row.dataset == dataset && row.value == value, "row {row:?}, expected {dataset} {value}");
    }
    let text = report(&[]);
    for (dataset, value) in expected {
        let line = text
            .lines()
            .find(|l| l.starts_with(&format!("{dataset} ")))
            .ok_or_else(|| format!("{dataset} missing from report"))?;
        ensure!(line.contains(value) && line.contains(REFERENCE_LABEL), "report line {line:?}");
    }
    let json = report_json(&[]);
    let refs = json["reference"].as_array().ok_or("no reference array")?;
    ensure!(refs.len() == expected.len(), "{} json reference rows", refs.len());
    for (r, (dataset, value)) in refs.iter().zip(expected) {
        ensure!(
            r["dataset"] == dataset && r["value"] == value && r["source"] == REFERENCE_LABEL,
            "json row {r}"
        );
    }
    Ok(format!("{} rows labelled {REFERENCE_LABEL:?}", expected.len()))
}

fn format_roundtrips() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for i in 0..20 {
        let mut map = random_map(&mut rng);
        map.stride = [1, 2, 4, 8][i % 4];
        if i == 0 {
            map.values[[0, 0]] = f32::MIN_POSITIVE / 2.0;
        }
        let bytes = map.to_bytes();
        let back = DensityMap::from_bytes(&bytes).map_err(|e| e.to_string())?;
        ensure!(back.to_bytes() == bytes, "map {i}: byte round-trip differs");
        let path = dir.path().join(format!("{i}.pdm"));
        save_density_map(&map, &path).map_err(|e| e.to_string())?;
        let loaded = load_density_map(&path).map_err(|e| e.to_string())?;
        ensure!(loaded.stride == map.stride, "map {i}: stride {}", loaded.stride);
        ensure!(
            loaded.values.iter().zip(&map.values).all(|(a, b)| a.to_bits() == b.to_bits()),
            "map {i}: file round-trip differs"
        );
    }

    for multiplier in [1.0 / 32.0, 1.0 / 16.0] {
        let mut config = PdaNetConfig::tiny(multiplier);
        config.seed = 21;
        let model = PdaNet::<f32>::new(config).map_err(|e| e.to_string())?;
        let bytes = checkpoint_bytes(&model);
        let back: PdaNet<f32> = model_from_bytes(&bytes).map_err(|e| e.to_string())?;
        ensure!(checkpoint_bytes(&back) == bytes, "checkpoint bytes differ");
        let path = dir.path().join("model.pdck");
        save_checkpoint(&model, &path).map_err(|e| e.to_string())?;
        let loaded: PdaNet<f32> = load_checkpoint(&path).map_err(|e| e.to_string())?;
        ensure!(loaded.config() == model.config(), "config changed");
        for id in model.params().ids() {
            let same = model
                .params()
                .value(id)
                .iter()
                .zip(loaded.params().value(id).iter())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            ensure!(same, "{} changed", model.params().name(id));
        }
        let image = RgbImage::from_fn(64, 96, |x, y| image::Rgb([x as u8, y as u8, (x ^ y) as u8]));
        let (a, b) = (model.predict(&image), loaded.predict(&image));
        ensure!(
            a.map_err(|e| e.to_string())? == b.map_err(|e| e.to_string())?,
            "reloaded model predicts differently"
        );
    }
    Ok("20 density maps, 2 checkpoints".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("count conservation", count_conservation),
        ("block-downsample conservation", block_downsample_conservation),
        ("partition laws", partition_laws),
        ("shape law", shape_law),
        ("gradient fidelity", gradient_fidelity),
        ("overfit smoke", overfit_smoke),
        ("routing correctness", routing),
        ("metric oracle", metric_oracle),
        ("report fidelity", report_fidelity),
        ("format round-trips", format_roundtrips),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let label = format!("criterion {:>2} {name}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| label.contains(f.as_str())) {
            continue;
        }
        let outcome = match panic::catch_unwind(AssertUnwindSafe(run)) {
            Ok(outcome) => outcome,
            Err(payload) => Err(payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        match outcome {
            Ok(detail) => println!("PASS {label}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {label}: {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
