//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Environment:
//! - `MIXWB_ACCEPTANCE_ONLY=gradients,trend,...` runs a subset;
//! - `MIXWB_ACCEPTANCE_QUICK=1` skips the training-based criteria;
//! - `MIXWB_ACCEPTANCE_STRICT=1` exits non-zero when any criterion fails.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use mixwb::color::{
    angular_error, cct_to_illuminant, ciede2000, diagonal_wb, srgb_decode, srgb_degamma, srgb_encode, srgb_gamma,
    ColorSpace, Image, Lab, WbSetting,
};
use mixwb::eas::{edge_aware_smooth, EasParams};
use mixwb::eval::Aggregate;
use mixwb::experiment::{baseline_reports, correct_scenes, load_eval_scenes, report_for, Comparison, EvalScene};
use mixwb::gradcheck::{check_gradients, GradCheckConfig};
use mixwb::infer::{correct_image_detailed, predict_weights_ensemble, upsample_weights, InferenceConfig};
use mixwb::isp::{apply_mapping, fit_mapping, rms, FitSpace, PresetStack};
use mixwb::model::Model;
use mixwb::nn::GridNetConfig;
use mixwb::scene::{
    derive_seed, generate_testset, render_scene, AlbedoKind, LightSpec, MixField, SceneSpec, TestsetOptions,
};
use mixwb::train::{train, TrainConfig, TrainOptions, TrainingSet};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Outcome { pass, detail }
    }
}

type Check = fn(&mut Shared) -> Outcome;

const SEED: u64 = 0;
const N_TRAIN: usize = 40;
const N_TEST: usize = 20;
const TRAIN_SIZE: usize = 128;
const TEST_SIZE: usize = 256;
const SMALL_SIZE: usize = 128;

/// State shared by the criteria that need the trained models.
#[derive(Default)]
struct Shared {
    experiment: Option<Result<Experiment, String>>,
}

struct Experiment {
    scenes: Vec<EvalScene>,
    model: Model,
    trend_time: Duration,
    lambda0: Option<Model>,
}

fn main() -> ExitCode {
    let only: Option<Vec<String>> =
        std::env::var("MIXWB_ACCEPTANCE_ONLY").ok().map(|s| s.split(',').map(|p| p.trim().to_string()).collect());
    let quick = std::env::var("MIXWB_ACCEPTANCE_QUICK").is_ok_and(|v| v == "1");
    let strict = std::env::var("MIXWB_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let checks: [(&str, bool, Check); 8] = [
        ("gradients", false, gradients),
        ("normalization", false, normalization),
        ("oracles", false, oracles),
        ("model-size", false, model_size),
        ("determinism", false, determinism),
        ("trend", true, trend),
        ("ablation", true, ablation),
        ("smoothness", true, smoothness),
    ];
    let mut shared = Shared::default();
    let mut failed = 0;
    for (name, heavy, check) in checks {
        if only.as_ref().is_some_and(|o| !o.iter().any(|n| n == name)) {
            continue;
        }
        if heavy && quick {
            println!("SKIP {name}");
            continue;
        }
        let t = Instant::now();
        let o = check(&mut shared);
        let status = if o.pass { "PASS" } else { "FAIL" };
        failed += !o.pass as usize;
        println!("{status} {name}: {} [{:.1}s]", o.detail, t.elapsed().as_secs_f64());
    }
    println!("acceptance: {failed} failed");
    if strict && failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn gradients(_: &mut Shared) -> Outcome {
    let t = Instant::now();
    let cfg = GradCheckConfig::default();
    let mut worst = 0.0f64;
    for seed in 0..5 {
        match check_gradients(seed, &cfg) {
            Ok(r) => worst = worst.max(r.max_rel_error),
            Err(e) => return Outcome::new(false, format!("seed {seed}: {e}")),
        }
    }
    let secs = t.elapsed().as_secs_f64();
    Outcome::new(
        worst <= 1e-3 && secs < 120.0,
        format!("max rel error {worst:.2e} over 5 seeds (<= 1e-3), {secs:.1}s (< 120s)"),
    )
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
    Image::from_fn(w, h, ColorSpace::GammaSrgb, |_, _| [rng.gen(), rng.gen(), rng.gen()])
}

fn normalization(_: &mut Shared) -> Outcome {
    let mut worst = [0.0f64; 4];
    let mut hull = 0.0f32;
    let mut models = Vec::new();
    for (i, presets) in ["tds", "tfdcs"].iter().enumerate() {
        let presets = WbSetting::parse_list(presets).unwrap();
        let mut m = Model::new(GridNetConfig::new(presets.len()), &presets, 100 + i as u64).unwrap();
        // Push the softmax away from uniform.
        let mut rng = ChaCha8Rng::seed_from_u64(200 + i as u64);
        for v in &mut m.params {
            *v += rng.gen_range(-0.2..0.2);
        }
        models.push(m);
    }
    for case in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let model = &models[(case % 2) as usize];
        let small = rng.gen_range(32..=64);
        let (fw, fh) = (small + rng.gen_range(0..64), small + rng.gen_range(0..64));
        let smalls = (0..model.presets.len()).map(|_| random_image(&mut rng, small, small)).collect();
        let stack =
            match PresetStack::from_images(&model.presets, random_image(&mut rng, fw, fh), smalls, FitSpace::Gamma) {
                Ok(s) => s,
                Err(e) => return Outcome::new(false, format!("case {case}: {e}")),
            };
        let run = || -> mixwb::Result<([f64; 4], f32)> {
            let forward =
                predict_weights_ensemble(&stack, model, &InferenceConfig { ensemble: false, ..Default::default() })?;
            let ens = predict_weights_ensemble(&stack, model, &InferenceConfig::default())?;
            let up = upsample_weights(&ens, fw, fh)?;
            let eas = edge_aware_smooth(&up, &stack.full_fixed, &EasParams::default())?;
            let out = correct_image_detailed(&stack, model, &InferenceConfig::default())?.image;
            let mut excess = 0.0f32;
            for (i, &v) in out.data().iter().enumerate() {
                let vals = stack.mapped_fulls.iter().map(|m| m.data()[i]);
                let lo = vals.clone().fold(f32::INFINITY, f32::min);
                let hi = vals.fold(f32::NEG_INFINITY, f32::max);
                excess = excess.max(lo - v).max(v - hi);
            }
            Ok(([forward.max_sum_error(), ens.max_sum_error(), up.max_sum_error(), eas.max_sum_error()], excess))
        };
        match run() {
            Ok((errs, excess)) => {
                for (w, e) in worst.iter_mut().zip(errs) {
                    *w = w.max(e);
                }
                hull = hull.max(excess);
            }
            Err(e) => return Outcome::new(false, format!("case {case}: {e}")),
        }
    }
    let pass = worst.iter().all(|&e| e <= 1e-5) && hull <= 1e-6;
    Outcome::new(
        pass,
        format!(
            "100 inputs; max |sum-1| forward {:.1e}, ensemble {:.1e}, upsample {:.1e}, EAS {:.1e} (<= 1e-5); max hull excess {:.1e}",
            worst[0], worst[1], worst[2], worst[3], hull
        ),
    )
}

#[derive(Deserialize)]
struct FixturePair {
    lab1: [f64; 3],
    lab2: [f64; 3],
    delta_e: f64,
}

#[derive(Deserialize)]
struct Fixture {
    pairs: Vec<FixturePair>,
}

fn oracles(_: &mut Shared) -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/ciede2000_pairs.json");
    let fixture: Fixture = match std::fs::read_to_string(&path)
        .map_err(|e| e.to_string())
        .and_then(|t| serde_json::from_str(&t).map_err(|e| e.to_string()))
    {
        Ok(f) => f,
        Err(e) => return Outcome::new(false, format!("{}: {e}", path.display())),
    };
    let lab = |v: [f64; 3]| Lab { l: v[0], a: v[1], b: v[2] };
    let de_err =
        fixture.pairs.iter().map(|p| (ciede2000(lab(p.lab1), lab(p.lab2)) - p.delta_e).abs()).fold(0.0, f64::max);

    let angular_ok = angular_error([1.0, 1.0, 1.0], [3.0, 3.0, 3.0]) == Some(0.0)
        && angular_error([1.0, 0.0, 0.0], [0.0, 0.0, 1.0]) == Some(90.0)
        && angular_error([0.0, 1.0, 0.0], [0.0, 1.0, 1.0]).is_some_and(|a| (a - 45.0).abs() <= 1e-12);

    let spec = SceneSpec {
        seed: 3,
        width: 96,
        height: 96,
        albedo: AlbedoKind::Mixed,
        lights: vec![
            LightSpec { cct: 2850.0, field: MixField::Halfplane { angle: 0.7, offset: 0.5, width: 0.25 } },
            LightSpec { cct: 7500.0, field: MixField::complement_halfplane(0.7, 0.5, 0.25) },
        ],
        camera_wb_cct: 5500.0,
        exposure: None,
    };
    let fits = || -> mixwb::Result<(f64, f64)> {
        let src = render_scene(&spec)?.input;
        let id = fit_mapping(&src, &src, FitSpace::Gamma)?;
        let id_rms = rms(&apply_mapping(&src, &id)?, &src);
        let tgt = srgb_gamma(&diagonal_wb(&srgb_degamma(&src)?, &cct_to_illuminant(3800.0)?)?)?;
        let diag = fit_mapping(&src, &tgt, FitSpace::Gamma)?;
        Ok((id_rms, rms(&apply_mapping(&src, &diag)?, &tgt)))
    };
    let (id_rms, diag_rms) = match fits() {
        Ok(v) => v,
        Err(e) => return Outcome::new(false, format!("mapping fit: {e}")),
    };
    let gamma = (0..=100_000)
        .map(|i| i as f64 / 100_000.0)
        .map(|v| (srgb_decode(srgb_encode(v)) - v).abs().max((srgb_encode(srgb_decode(v)) - v).abs()))
        .fold(0.0, f64::max);
    let pass = fixture.pairs.len() == 20
        && de_err <= 1e-4
        && angular_ok
        && id_rms <= 1e-4
        && diag_rms <= 5e-3
        && gamma <= 1e-6;
    Outcome::new(
        pass,
        format!(
            "CIEDE2000 max err {de_err:.1e} on {} pairs; angular cases {}; identity fit {id_rms:.1e}; diagonal fit {diag_rms:.1e}; gamma round trip {gamma:.1e}",
            fixture.pairs.len(),
            if angular_ok { "exact" } else { "wrong" }
        ),
    )
}

fn model_size(_: &mut Shared) -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for (presets, mb) in [("tds", 5.09), ("tfdcs", 5.10)] {
        let presets = WbSetting::parse_list(presets).unwrap();
        let m = Model::new(GridNetConfig::new(presets.len()), &presets, 0).unwrap();
        let got = m.parameter_bytes() as f64 / 1e6;
        let rel = (got - mb) / mb;
        pass &= rel.abs() <= 0.25;
        parts.push(format!("k={} {got:.2} MB vs {mb} MB ({:+.1}%)", presets.len(), 100.0 * rel));
    }
    Outcome::new(pass, parts.join("; "))
}

fn determinism(_: &mut Shared) -> Outcome {
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return Outcome::new(false, e.to_string()),
    };
    let cfg = dir.path().join("pipeline.json");
    let config = r#"{"n_train": 6, "n_test": 4, "train_size": 64, "test_size": 64,
        "train": {"net": "tiny", "epochs": 2, "lr": 0.001, "lr_milestones": []},
        "inference": {"small_size": 64}}"#;
    if let Err(e) = std::fs::write(&cfg, config) {
        return Outcome::new(false, e.to_string());
    }
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_mixwb"))
            .args(["--quiet", "pipeline", "--seed", "7", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .env_remove("MIXWB_SEED")
            .output();
        match status {
            Ok(o) if o.status.success() => {}
            Ok(o) => {
                return Outcome::new(
                    false,
                    format!("pipeline run {run} failed: {}", String::from_utf8_lossy(&o.stderr)),
                )
            }
            Err(e) => return Outcome::new(false, e.to_string()),
        }
        match std::fs::read(out.join("report.json")) {
            Ok(b) => reports.push(b),
            Err(e) => return Outcome::new(false, format!("run {run}: {e}")),
        }
    }
    let same = reports[0] == reports[1];
    Outcome::new(
        same,
        format!(
            "two seeded pipeline runs, report.json {} ({} bytes)",
            if same { "byte-identical" } else { "differs" },
            reports[0].len()
        ),
    )
}

fn synth_train_config() -> TrainConfig {
    TrainConfig { seed: SEED, ..TrainConfig::desk() }
}

fn inference(ensemble: bool, eas: bool) -> InferenceConfig {
    InferenceConfig { ensemble, eas, small_size: SMALL_SIZE, ..Default::default() }
}

fn run_experiment(with_lambda0: bool) -> Result<Experiment, String> {
    let err = |e: mixwb::Error| e.to_string();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let t = Instant::now();
    let opts = |size| TestsetOptions { width: size, height: size, ..Default::default() };
    generate_testset(N_TRAIN, derive_seed(SEED, 0), dir.path().join("train"), &opts(TRAIN_SIZE)).map_err(err)?;
    generate_testset(N_TEST, derive_seed(SEED, 1), dir.path().join("test"), &opts(TEST_SIZE)).map_err(err)?;
    let cfg = synth_train_config();
    let presets = cfg.preset_list().map_err(err)?;
    let set = TrainingSet::load(dir.path().join("train"), &presets).map_err(err)?;
    let model = train(&set, &cfg, &TrainOptions::default()).map_err(err)?.checkpoint.model;
    let scenes = load_eval_scenes(dir.path().join("test"), &presets, SMALL_SIZE, FitSpace::Gamma).map_err(err)?;
    correct_scenes(&scenes, &model, &inference(true, true)).map_err(err)?;
    let trend_time = t.elapsed();
    let lambda0 = if with_lambda0 {
        let cfg0 = TrainConfig { lambda: 0.0, ..cfg };
        Some(train(&set, &cfg0, &TrainOptions::default()).map_err(err)?.checkpoint.model)
    } else {
        None
    };
    Ok(Experiment { scenes, model, trend_time, lambda0 })
}

fn experiment(shared: &mut Shared) -> Result<&Experiment, String> {
    if shared.experiment.is_none() {
        let only = std::env::var("MIXWB_ACCEPTANCE_ONLY").ok();
        let need_lambda0 = only.map_or(true, |o| o.split(',').any(|n| n.trim() == "smoothness"));
        shared.experiment = Some(run_experiment(need_lambda0));
    }
    shared.experiment.as_ref().unwrap().as_ref().map_err(Clone::clone)
}

fn mean(a: &Option<Aggregate>) -> f64 {
    a.as_ref().map_or(f64::NAN, |a| a.mean)
}

fn trend(shared: &mut Shared) -> Outcome {
    let x = match experiment(shared) {
        Ok(x) => x,
        Err(e) => return Outcome::new(false, e),
    };
    let run = || -> mixwb::Result<(bool, String)> {
        let outs: Vec<Image> =
            correct_scenes(&x.scenes, &x.model, &inference(true, true))?.into_iter().map(|c| c.image).collect();
        let ours = report_for("ours", None, &x.scenes, &outs)?;
        let mut pass = true;
        let mut parts =
            vec![format!("ours MSE {:.1} ΔE {:.2}", mean(&ours.aggregate.mse), mean(&ours.aggregate.de2000))];
        for b in baseline_reports(&x.scenes, None)? {
            if b.method_label == "camera input" {
                continue;
            }
            let c = Comparison::new(&ours, &b)?;
            pass &= c.dominates(0.7);
            parts.push(format!(
                "vs {} (MSE {:.1}, ΔE {:.2}): wins {:.0}%/{:.0}%",
                c.baseline,
                c.mean_mse[1],
                c.mean_de2000[1],
                100.0 * c.mse_win_rate,
                100.0 * c.de2000_win_rate
            ));
        }
        let mins = x.trend_time.as_secs_f64() / 60.0;
        pass &= mins <= 30.0;
        parts.push(format!("{mins:.1} min (<= 30)"));
        Ok((pass, parts.join("; ")))
    };
    match run() {
        Ok((pass, detail)) => Outcome::new(pass, detail),
        Err(e) => Outcome::new(false, e.to_string()),
    }
}

fn ablation(shared: &mut Shared) -> Outcome {
    let x = match experiment(shared) {
        Ok(x) => x,
        Err(e) => return Outcome::new(false, e),
    };
    let run = || -> mixwb::Result<(bool, String)> {
        let single = correct_scenes(&x.scenes, &x.model, &inference(false, false))?;
        let ens = correct_scenes(&x.scenes, &x.model, &inference(true, false))?;
        let ens_eas = correct_scenes(&x.scenes, &x.model, &inference(true, true))?;
        let tv = |c: &mixwb::infer::Correction| c.small_weights.as_ref().map_or(f64::NAN, |w| w.total_variation());
        let smoother = single.iter().zip(&ens).filter(|(s, e)| tv(e) < tv(s)).count();
        let rate = smoother as f64 / x.scenes.len() as f64;
        let mse = |cs: &[mixwb::infer::Correction]| -> mixwb::Result<f64> {
            let outs: Vec<Image> = cs.iter().map(|c| c.image.clone()).collect();
            Ok(mean(&report_for("m", None, &x.scenes, &outs)?.aggregate.mse))
        };
        let (m_ens, m_eas) = (mse(&ens)?, mse(&ens_eas)?);
        let pass = rate >= 0.8 && m_eas <= 1.02 * m_ens;
        Ok((
            pass,
            format!(
                "ensembling lowers TV on {:.0}% of scenes (>= 80%); MSE ens {m_ens:.2}, ens+EAS {m_eas:.2} (<= +2%)",
                100.0 * rate
            ),
        ))
    };
    match run() {
        Ok((pass, detail)) => Outcome::new(pass, detail),
        Err(e) => Outcome::new(false, e.to_string()),
    }
}

fn smoothness(shared: &mut Shared) -> Outcome {
    let x = match experiment(shared) {
        Ok(x) => x,
        Err(e) => return Outcome::new(false, e),
    };
    let Some(m0) = &x.lambda0 else {
        return Outcome::new(false, "lambda=0 model was not trained".into());
    };
    let energy = |m: &Model| -> mixwb::Result<f64> {
        let mut total = 0.0;
        for s in &x.scenes {
            total += m.predict(&s.stack.smalls)?.sobel_energy();
        }
        Ok(total / x.scenes.len() as f64)
    };
    match (energy(&x.model), energy(m0)) {
        (Ok(e100), Ok(e0)) => {
            Outcome::new(e0 > e100, format!("mean Sobel energy lambda=0 {e0:.3e} vs lambda=100 {e100:.3e}"))
        }
        (Err(e), _) | (_, Err(e)) => Outcome::new(false, e.to_string()),
    }
}
