use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use mixwb::color::{ColorSpace, WbSetting};
use mixwb::digest::{config_digest, short};
use mixwb::eval::{evaluate, format_table, MetricsReport};
use mixwb::experiment::{
    baseline_reports, correct_scenes, effective_small_size, load_eval_scenes, save_outputs, write_stacks, Comparison,
    EvalScene, StackIndex, FIXED_PRESET, STACK_INDEX_FILE,
};
use mixwb::image_io::{load_image, save_gray, save_image};
use mixwb::infer::{correct_image_detailed, Correction, InferenceConfig};
use mixwb::isp::{build_preset_stack, FitSpace, PresetStack};
use mixwb::model::{Checkpoint, Model};
use mixwb::scene::{derive_seed, generate_testset, Manifest, SceneTemplate, TestsetOptions, MANIFEST_FILE};
use mixwb::train::{train as run_training, NetSize, TrainConfig, TrainOptions, TrainingSet, CHECKPOINT_FILE};
use mixwb::weights::WeightMaps;

use crate::config::Loaded;
use crate::{AblateArgs, CliError, EvalArgs, InferArgs, PipelineArgs, RenderArgs, SynthArgs, TrainArgs};

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub template: SceneTemplate,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { n: 12, seed: 0, width: 256, height: 256, template: SceneTemplate::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub presets: String,
    pub small_size: usize,
    pub fit_space: FitSpace,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig { presets: "tds".into(), small_size: 384, fit_space: FitSpace::Gamma }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub label: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { label: "method".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// Reference inference settings; the three inference rows toggle
    /// `ensemble` and `eas` on top of these.
    pub inference: InferenceConfig,
    /// Settings for every retrained model.
    pub train: TrainConfig,
    pub retrain_lambda0: bool,
    pub preset_toggle: bool,
    pub patch_sweep: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Seeds the synthesized datasets and replaces `train.seed`.
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            n_train: 40,
            n_test: 12,
            train_size: 128,
            test_size: 256,
            train: TrainConfig::desk(),
            inference: InferenceConfig { small_size: 128, ..Default::default() },
        }
    }
}

fn digest_of<T: Serialize>(command: &str, cfg: &T) -> CliResult<String> {
    Ok(config_digest(&json!({ "command": command, "config": cfg }))?)
}

fn parse_enum<T: for<'de> Deserialize<'de>>(what: &str, s: &str) -> CliResult<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| CliError::config(format!("invalid {what} {s:?}")))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::data(format!("{}: {e}", parent.display())))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(mixwb::Error::from)? + "\n";
    std::fs::write(path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn run_record(path: &Path, command: &str, digest: &str, cfg: &impl Serialize) -> CliResult<()> {
    write_json(path, &json!({ "command": command, "config_digest": digest, "config": cfg }))
}

// ---------------------------------------------------------------------------

pub fn synth(a: SynthArgs) -> CliResult<()> {
    let l = Loaded::<SynthConfig>::from_file(a.config.as_deref())?;
    let mut c = l.value.clone();
    c.seed = l.seed(a.seed, &["seed"], c.seed)?;
    c.n = a.n.unwrap_or(c.n);
    c.width = a.width.unwrap_or(c.width);
    c.height = a.height.unwrap_or(c.height);
    if a.light_ccts.is_some() {
        c.template.light_ccts = a.light_ccts;
    }
    if a.camera_wb.is_some() {
        c.template.camera_wb_cct = a.camera_wb;
    }
    let digest = digest_of("synth", &c)?;
    let m = run_synth(&c, &a.out, &digest)?;
    log::info!("wrote {} scenes to {} (config {})", m.count, a.out.display(), short(&digest));
    Ok(())
}

fn run_synth(c: &SynthConfig, out: &Path, digest: &str) -> CliResult<Manifest> {
    let opts = TestsetOptions {
        width: c.width,
        height: c.height,
        template: c.template.clone(),
        digest: Some(digest.to_string()),
    };
    Ok(generate_testset(c.n, c.seed, out, &opts)?)
}

pub fn render_presets(a: RenderArgs) -> CliResult<()> {
    let l = Loaded::<RenderConfig>::from_file(a.config.as_deref())?;
    let mut c = l.value.clone();
    if let Some(p) = a.presets {
        c.presets = p;
    }
    c.small_size = a.small_size.unwrap_or(c.small_size);
    if let Some(f) = a.fit_space {
        c.fit_space = parse_enum("fit space", &f)?;
    }
    let presets = WbSetting::parse_list(&c.presets)?;
    let digest = digest_of("render-presets", &c)?;
    let scenes = load_eval_scenes(&a.data, &presets, c.small_size, c.fit_space)?;
    write_stacks(&scenes, &a.out, c.small_size, c.fit_space, Some(&digest))?;
    log::info!("rendered {} stacks into {}", scenes.len(), a.out.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let l = Loaded::<TrainConfig>::from_file(a.config.as_deref())?;
    let mut c = l.value.clone();
    c.seed = l.seed(a.seed, &["seed"], c.seed)?;
    if let Some(p) = a.presets {
        c.presets = p;
    }
    c.patch_size = a.patch.unwrap_or(c.patch_size);
    c.epochs = a.epochs.unwrap_or(c.epochs);
    c.lr = a.lr.unwrap_or(c.lr);
    c.lambda = a.lambda.unwrap_or(c.lambda);
    if let Some(n) = a.net {
        c.net = parse_enum("network size", &n)?;
    }
    c.validate()?;
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let digest = digest_of("train", &c)?;
    train_into(&a.data, &a.out, &c, &digest, resume)?;
    Ok(())
}

fn train_into(
    data: &Path,
    out: &Path,
    c: &TrainConfig,
    digest: &str,
    resume: Option<Checkpoint>,
) -> CliResult<Checkpoint> {
    let presets = c.preset_list()?;
    let set = TrainingSet::load(data, &presets)?;
    log::info!(
        "training {} net on {} images, {} epochs, presets {}, p={}, lambda={}",
        format!("{:?}", c.net).to_lowercase(),
        set.images.len(),
        c.epochs,
        c.presets,
        c.patch_size,
        c.lambda
    );
    std::fs::create_dir_all(out).map_err(|e| CliError::data(format!("{}: {e}", out.display())))?;
    run_record(&out.join("run.json"), "train", digest, c)?;
    let opts = TrainOptions { out_dir: Some(out.to_path_buf()), config_digest: Some(digest.to_string()), resume };
    let outcome = run_training(&set, c, &opts)?;
    if let (Some(first), Some(last)) = (outcome.history.first(), outcome.history.last()) {
        log::info!("L_r {:.3} -> {:.3}; checkpoint {}", first.l_r, last.l_r, out.join(CHECKPOINT_FILE).display());
    }
    Ok(outcome.checkpoint)
}

// ---------------------------------------------------------------------------

fn infer_config(base: InferenceConfig, a: &InferArgs) -> InferenceConfig {
    let mut c = base;
    if let Some(s) = &a.scales {
        c.scales = s.clone();
    }
    if a.no_ensemble {
        c.ensemble = false;
    }
    if a.no_eas {
        c.eas = false;
    }
    c.small_size = a.small_size.unwrap_or(c.small_size);
    c
}

fn dump_weights(dir: &Path, w: &WeightMaps, presets: &[WbSetting], digest: &str) -> CliResult<()> {
    for (i, p) in presets.iter().enumerate() {
        save_gray(dir.join(format!("w_{}.png", p.letter())), w.width, w.height, w.plane(i), Some(digest))?;
    }
    Ok(())
}

enum InferInput {
    StackSet(StackIndex),
    Stack,
    Dataset,
    RawScene,
}

fn classify(dir: &Path) -> CliResult<InferInput> {
    if dir.join(STACK_INDEX_FILE).exists() {
        Ok(InferInput::StackSet(StackIndex::load(dir)?))
    } else if dir.join("fixed.png").exists() {
        Ok(InferInput::Stack)
    } else if dir.join(MANIFEST_FILE).exists() {
        Ok(InferInput::Dataset)
    } else if dir.join("raw.png").exists() {
        Ok(InferInput::RawScene)
    } else {
        Err(CliError::data(format!("{} holds no stack, stack set, dataset or raw scene", dir.display())))
    }
}

pub fn infer(a: InferArgs) -> CliResult<()> {
    let l = Loaded::<InferenceConfig>::from_file(a.config.as_deref())?;
    let c = infer_config(l.value.clone(), &a);
    c.validate()?;
    let ck = Checkpoint::load(&a.ckpt)?;
    let model = ck.model;
    let digest = digest_of("infer", &json!({ "inference": c, "model": ck.config_digest }))?;
    let single = |stack: PresetStack| -> CliResult<()> {
        let corr = correct_image_detailed(&stack, &model, &c)?;
        save_image(&a.out, &corr.image, Some(&digest))?;
        if let Some(d) = &a.dump_weights {
            dump_weights(d, &corr.weights, &model.presets, &digest)?;
        }
        log::info!("wrote {}", a.out.display());
        Ok(())
    };
    let batch = |ids: Vec<String>, corrections: Vec<Correction>| -> CliResult<()> {
        for (id, corr) in ids.iter().zip(&corrections) {
            save_image(a.out.join(format!("{id}.png")), &corr.image, Some(&digest))?;
            if let Some(d) = &a.dump_weights {
                dump_weights(&d.join(id), &corr.weights, &model.presets, &digest)?;
            }
        }
        log::info!("wrote {} corrected images to {}", ids.len(), a.out.display());
        Ok(())
    };
    match classify(&a.stack)? {
        InferInput::Stack => single(PresetStack::load(&a.stack, &model.presets, c.fit_space)?),
        InferInput::RawScene => {
            let raw = load_image(a.stack.join("raw.png"), ColorSpace::LinearRaw)?;
            let small = effective_small_size(c.small_size, raw.width(), raw.height());
            single(build_preset_stack(&raw, &model.presets, FIXED_PRESET, small, c.fit_space)?)
        }
        InferInput::StackSet(index) => {
            if index.preset_list()? != model.presets {
                return Err(CliError::config(format!(
                    "stacks hold presets {} but the model uses {}",
                    index.presets,
                    WbSetting::list_name(&model.presets)
                )));
            }
            let mut corrections = Vec::new();
            for id in &index.scenes {
                let stack = PresetStack::load(a.stack.join(id), &model.presets, index.fit_space)?;
                corrections.push(correct_image_detailed(&stack, &model, &c)?);
            }
            batch(index.scenes, corrections)
        }
        InferInput::Dataset => {
            let scenes = load_eval_scenes(&a.stack, &model.presets, c.small_size, c.fit_space)?;
            let corrections = correct_scenes(&scenes, &model, &c)?;
            batch(scenes.into_iter().map(|s| s.id).collect(), corrections)
        }
    }
}

pub fn eval(a: EvalArgs) -> CliResult<()> {
    let l = Loaded::<EvalConfig>::from_file(a.config.as_deref())?;
    let mut c = l.value.clone();
    if let Some(label) = a.label {
        c.label = label;
    }
    let digest = digest_of("eval", &c)?;
    let report = evaluate(&a.pred, &a.gt, &c.label, Some(&digest))?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::data(format!("{}: {e}", parent.display())))?;
    }
    report.save(&a.out)?;
    let table = report.to_table();
    write_text(&a.out.with_extension("txt"), &table)?;
    print!("{table}");
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    /// Mean total variation of the small-resolution weight maps.
    pub mean_small_tv: Option<f64>,
    /// Mean Sobel energy of the full-resolution weight maps.
    pub mean_sobel_energy: f64,
    pub report: MetricsReport,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Corrects every scene, writes the outputs to `dir`, and scores the files.
fn score_variant(
    label: &str,
    scenes: &[EvalScene],
    data: &Path,
    model: &Model,
    cfg: &InferenceConfig,
    dir: &Path,
    digest: &str,
) -> CliResult<AblationRow> {
    let corrections = correct_scenes(scenes, model, cfg)?;
    let images: Vec<_> = corrections.iter().map(|c| c.image.clone()).collect();
    save_outputs(dir, scenes, &images, Some(digest))?;
    let report = evaluate(dir, data, label, Some(digest))?;
    Ok(AblationRow {
        label: label.to_string(),
        mean_small_tv: mean(corrections.iter().filter_map(|c| c.small_weights.as_ref()).map(|w| w.total_variation())),
        mean_sobel_energy: mean(corrections.iter().map(|c| c.weights.sobel_energy())).unwrap_or(0.0),
        report,
    })
}

fn ablation_table(rows: &[AblationRow], baselines: &[MetricsReport]) -> String {
    let mut reports: Vec<MetricsReport> = baselines.to_vec();
    reports.extend(rows.iter().map(|r| r.report.clone()));
    let mut out = format_table(&reports);
    out.push('\n');
    out.push_str("Weight-map statistics\n");
    for r in rows {
        let tv = r.mean_small_tv.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into());
        out.push_str(&format!("{:<28} TV(small) {tv:>10}  Sobel(full) {:.3e}\n", r.label, r.mean_sobel_energy));
    }
    out
}

fn other_presets(p: &str) -> &'static str {
    if p == "tds" {
        "tfdcs"
    } else {
        "tds"
    }
}

pub fn ablate(a: AblateArgs) -> CliResult<()> {
    let l = Loaded::<AblateConfig>::from_file(a.config.as_deref())?;
    let mut c = l.value.clone();
    c.train.seed = l.seed(a.seed, &["train", "seed"], c.train.seed)?;
    c.retrain_lambda0 |= a.retrain_lambda0;
    c.preset_toggle |= a.preset_toggle;
    if let Some(p) = a.patch_sweep {
        c.patch_sweep = p;
    }
    c.train.epochs = a.epochs.unwrap_or(c.train.epochs);
    c.inference.small_size = a.small_size.unwrap_or(c.inference.small_size);
    c.inference.validate()?;
    let retraining = c.retrain_lambda0 || c.preset_toggle || !c.patch_sweep.is_empty();
    if retraining && a.train_data.is_none() {
        return Err(CliError::config("retraining toggles need --train-data"));
    }
    let digest = digest_of("ablate", &c)?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::data(format!("{}: {e}", a.out.display())))?;
    run_record(&a.out.join("run.json"), "ablate", &digest, &c)?;

    let model = Checkpoint::load(&a.ckpt)?.model;
    let inf = &c.inference;
    let scenes = load_eval_scenes(&a.data, &model.presets, inf.small_size, inf.fit_space)?;
    let baselines = baseline_reports(&scenes, Some(&digest))?;
    let mut rows = Vec::new();
    for (slug, label, ensemble, eas) in [
        ("plain", "w/o ensembling, w/o EAS", false, false),
        ("ensemble", "w/ ensembling, w/o EAS", true, false),
        ("ensemble-eas", "w/ ensembling, w/ EAS", true, true),
    ] {
        let cfg = InferenceConfig { ensemble, eas, ..inf.clone() };
        log::info!("ablation row: {label}");
        rows.push(score_variant(label, &scenes, &a.data, &model, &cfg, &a.out.join(slug), &digest)?);
    }
    if let Some(train_data) = &a.train_data {
        let mut variants: Vec<(String, String, TrainConfig)> = Vec::new();
        if c.retrain_lambda0 {
            variants.push((
                "lambda0".into(),
                "w/o L_s (lambda=0)".into(),
                TrainConfig { lambda: 0.0, ..c.train.clone() },
            ));
        }
        if c.preset_toggle {
            let p = other_presets(&WbSetting::list_name(&model.presets)).to_string();
            variants.push((
                format!("presets-{p}"),
                format!("WB={{{}}}", p.chars().map(String::from).collect::<Vec<_>>().join(",")),
                TrainConfig { presets: p, ..c.train.clone() },
            ));
        }
        for &p in &c.patch_sweep {
            variants.push((format!("patch-{p}"), format!("p={p}"), TrainConfig { patch_size: p, ..c.train.clone() }));
        }
        for (slug, label, tc) in variants {
            log::info!("ablation retrain: {label}");
            let ck = train_into(train_data, &a.out.join("models").join(&slug), &tc, &digest, None)?;
            let presets = &ck.model.presets;
            let own = if *presets == model.presets {
                None
            } else {
                Some(load_eval_scenes(&a.data, presets, inf.small_size, inf.fit_space)?)
            };
            let sc = own.as_deref().unwrap_or(&scenes);
            rows.push(score_variant(&label, sc, &a.data, &ck.model, inf, &a.out.join(&slug), &digest)?);
        }
    }
    write_json(
        &a.out.join("ablation.json"),
        &json!({ "config_digest": digest, "baselines": baselines, "rows": rows }),
    )?;
    let table = ablation_table(&rows, &baselines);
    write_text(&a.out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

// ---------------------------------------------------------------------------

fn stage<T>(name: &str, r: CliResult<T>) -> CliResult<T> {
    r.map_err(|e| e.in_stage(name))
}

pub fn pipeline(a: PipelineArgs) -> CliResult<()> {
    let l = Loaded::<PipelineConfig>::from_file(a.config.as_deref())?;
    let mut c = l.value.clone();
    c.seed = l.seed(a.seed, &["seed"], c.seed)?;
    c.train.seed = c.seed;
    c.n_train = a.n_train.unwrap_or(c.n_train);
    c.n_test = a.n_test.unwrap_or(c.n_test);
    if let Some(p) = a.presets {
        c.train.presets = p;
    }
    c.train.epochs = a.epochs.unwrap_or(c.train.epochs);
    c.train.patch_size = a.patch.unwrap_or(c.train.patch_size);
    if let Some(n) = a.net {
        c.train.net = parse_enum::<NetSize>("network size", &n)?;
    }
    if a.no_ensemble {
        c.inference.ensemble = false;
    }
    if a.no_eas {
        c.inference.eas = false;
    }
    c.train.validate()?;
    c.inference.validate()?;
    let digest = digest_of("pipeline", &c)?;
    let out = &a.out;
    std::fs::create_dir_all(out).map_err(|e| CliError::data(format!("{}: {e}", out.display())))?;
    run_record(&out.join("run.json"), "pipeline", &digest, &c)?;
    log::info!("pipeline config {}", short(&digest));

    let test_data: PathBuf = match &a.test_data {
        Some(d) => d.clone(),
        None => {
            let dir = out.join("data").join("test");
            let sc = SynthConfig {
                n: c.n_test,
                seed: derive_seed(c.seed, 1),
                width: c.test_size,
                height: c.test_size,
                template: SceneTemplate::default(),
            };
            stage("synth", run_synth(&sc, &dir, &digest))?;
            dir
        }
    };
    let model = match &a.ckpt {
        Some(p) => stage("train", Checkpoint::load(p).map_err(CliError::from))?.model,
        None => {
            let train_data = match &a.train_data {
                Some(d) => d.clone(),
                None => {
                    let dir = out.join("data").join("train");
                    let sc = SynthConfig {
                        n: c.n_train,
                        seed: derive_seed(c.seed, 0),
                        width: c.train_size,
                        height: c.train_size,
                        template: SceneTemplate::default(),
                    };
                    stage("synth", run_synth(&sc, &dir, &digest))?;
                    dir
                }
            };
            stage("train", train_into(&train_data, &out.join("model"), &c.train, &digest, None))?.model
        }
    };
    let inf = &c.inference;
    let scenes = stage(
        "render-presets",
        load_eval_scenes(&test_data, &model.presets, inf.small_size, inf.fit_space).map_err(CliError::from),
    )?;
    stage(
        "render-presets",
        write_stacks(&scenes, out.join("stacks"), inf.small_size, inf.fit_space, Some(&digest)).map_err(CliError::from),
    )?;
    let corrections = stage("infer", correct_scenes(&scenes, &model, inf).map_err(CliError::from))?;
    let images: Vec<_> = corrections.iter().map(|c| c.image.clone()).collect();
    stage("infer", save_outputs(out.join("pred"), &scenes, &images, Some(&digest)).map_err(CliError::from))?;
    let report = stage("eval", evaluate(out.join("pred"), &test_data, "ours", Some(&digest)).map_err(CliError::from))?;
    stage("eval", report.save(out.join("report.json")).map_err(CliError::from))?;
    let baselines = stage("eval", baseline_reports(&scenes, Some(&digest)).map_err(CliError::from))?;
    let mut all = baselines.clone();
    all.push(report.clone());
    let mut table = format_table(&all);
    for b in baselines.iter().filter(|b| b.method_label != "camera input") {
        let cmp = Comparison::new(&report, b)?;
        table.push_str(&format!(
            "vs {:<12} MSE win rate {:.2}, ΔE2000 win rate {:.2}\n",
            cmp.baseline, cmp.mse_win_rate, cmp.de2000_win_rate
        ));
    }
    write_text(&out.join("report.txt"), &table)?;
    write_json(&out.join("baselines.json"), &baselines)?;
    print!("{table}");
    Ok(())
}
