use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use dcis_core::agreement::{self, Level, LevelReport, RunKappas};
use dcis_core::datamodel::{stratified_patient_split, SplitFractions, SplitWarning};
use dcis_core::inference::{self, EvalLevel, Evaluation, InferenceConfig};
use dcis_core::model::{self, Architecture, BackboneConfig, Checkpoint, TrainConfig};
use dcis_core::patchkit::{self, AugmentationConfig, PatchSource, PatchSpec};
use dcis_core::synthgen::{self, SynthSpec};
use dcis_core::{seed, DatasetManifest, Grade, Subset};

use crate::config::{parse_list, Settings};
use crate::{
    ArchitectureArg, Cli, Command, EvalArgs, ExtractArgs, LevelArg, PatchArgs, ReportArgs, SplitArgs,
    SubsetArg, SynthArgs, TrainArgs, UsageError,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METADATA_FILE: &str = "metadata.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EVAL_DIR: &str = "eval";

struct Ctx<'a> {
    cli: &'a Cli,
    settings: Settings,
    seed: u64,
}

impl Ctx<'_> {
    fn out(&self) -> Result<PathBuf> {
        self.settings
            .pick_opt(self.cli.out.clone(), "out")?
            .ok_or_else(|| UsageError("--out is required for this command".into()).into())
    }

    fn say(&self, text: impl AsRef<str>) {
        if !self.cli.quiet {
            println!("{}", text.as_ref());
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let section = match cli.command {
        Command::Synth(_) => "synth",
        Command::Split(_) => "split",
        Command::Extract(_) => "extract",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Report(_) => "report",
    };
    let settings = Settings::load(cli.config.as_deref(), section)?;
    let seed = settings.pick(cli.seed, "seed", 0)?;
    let ctx = Ctx { cli, settings, seed };
    match &cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::Split(a) => split(&ctx, a),
        Command::Extract(a) => extract(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Report(a) => report(&ctx, a),
    }
}

fn pair<T: Copy + std::str::FromStr + serde::de::DeserializeOwned>(
    s: &Settings,
    flag: Option<&str>,
    key: &str,
    default: (T, T),
) -> Result<(T, T)> {
    Ok(s.pick_list::<T>(flag, key, 2)?
        .map(|v| (v[0], v[1]))
        .unwrap_or(default))
}

fn triple(s: &Settings, flag: Option<&str>, key: &str) -> Result<Option<[f64; 3]>> {
    Ok(s.pick_list::<f64>(flag, key, 3)?.map(|v| [v[0], v[1], v[2]]))
}

/// Loads a manifest with absolute image paths, so it can be re-saved
/// anywhere.
fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let abs = std::fs::canonicalize(path).map_err(|e| {
        anyhow!(dcis_core::Error::Manifest(format!("cannot open manifest {}: {e}", path.display())))
    })?;
    Ok(DatasetManifest::load(&abs)?)
}

fn required_manifest(s: &Settings, flag: &Option<PathBuf>) -> Result<PathBuf> {
    s.pick_opt(flag.clone(), "manifest")?
        .ok_or_else(|| UsageError("--manifest is required".into()).into())
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|source| {
        dcis_core::Error::Json {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

fn percent(n: usize, total: usize) -> String {
    format!("{n} ({:.0}%)", 100.0 * n as f64 / total.max(1) as f64)
}

/// Patient and lesion counts with the consensus grade histogram.
pub fn summary_table(manifest: &DatasetManifest) -> Result<String> {
    let mut lesion_hist = [0usize; 3];
    for l in &manifest.lesions {
        lesion_hist[l.label().consensus.index()] += 1;
    }
    let mut patient_hist = [0usize; 3];
    for p in &manifest.patients {
        patient_hist[manifest.consensus_patient_grade(p)?.index()] += 1;
    }
    let (np, nl) = (manifest.patients.len(), manifest.lesions.len());
    let mut out = String::new();
    writeln!(out, "{:<22} {:>12} {:>12}", "", "Patients", "Lesions")?;
    writeln!(out, "{:<22} {:>12} {:>12}", "Total", np, nl)?;
    writeln!(out, "Consensus grade")?;
    for g in Grade::ALL {
        writeln!(
            out,
            "{:<22} {:>12} {:>12}",
            format!("  Grade {g}"),
            percent(patient_hist[g.index()], np),
            percent(lesion_hist[g.index()], nl)
        )?;
    }
    if let Some(split) = &manifest.split {
        writeln!(out, "Split")?;
        for s in Subset::ALL {
            let patients = split.values().filter(|v| **v == s).count();
            writeln!(
                out,
                "{:<22} {:>12} {:>12}",
                format!("  {s}"),
                patients,
                manifest.lesions_in(s).len()
            )?;
        }
    }
    Ok(out)
}

fn synth(ctx: &Ctx, a: &SynthArgs) -> Result<()> {
    let s = &ctx.settings;
    let d = SynthSpec::default();
    let spec = SynthSpec {
        n_patients: s.pick(a.patients, "patients", d.n_patients)?,
        lesions_per_patient: pair(
            s,
            a.lesions_per_patient.as_deref(),
            "lesions-per-patient",
            d.lesions_per_patient,
        )?,
        grade_mix: triple(s, a.grade_mix.as_deref(), "grade-mix")?.unwrap_or(d.grade_mix),
        observer_error_rate: s.pick(a.error_rate, "error-rate", d.observer_error_rate)?,
        image_mpp: s.pick(a.mpp, "mpp", d.image_mpp)?,
        lesion_size_px: pair(s, a.lesion_size.as_deref(), "lesion-size", d.lesion_size_px)?,
        seed: ctx.seed,
    };
    spec.validate()?;
    let out = ctx.out()?;
    let ds = synthgen::generate_dataset(&spec, &out)?;
    write_json(&out.join("synth_spec.json"), &spec)?;
    ctx.say(format!("wrote {}", ds.manifest_path.display()));
    ctx.say(summary_table(&ds.manifest)?);
    Ok(())
}

fn split_fractions(s: &Settings, flag: Option<&str>, key: &str) -> Result<SplitFractions> {
    match triple(s, flag, key)? {
        Some(f) => Ok(SplitFractions::new(f[0], f[1], f[2])?),
        None => Ok(SplitFractions::reference()),
    }
}

fn report_warnings(ctx: &Ctx, warnings: &[SplitWarning]) {
    for w in warnings {
        ctx.say(format!("warning: {w}"));
    }
}

fn split(ctx: &Ctx, a: &SplitArgs) -> Result<()> {
    let s = &ctx.settings;
    let manifest = load_manifest(&required_manifest(s, &a.manifest)?)?;
    let fractions = split_fractions(s, a.fractions.as_deref(), "fractions")?;
    let (split, warnings) = stratified_patient_split(&manifest, fractions, ctx.seed)?;
    let out = ctx.out()?;
    create_dir(&out)?;
    split.save(&out.join(MANIFEST_FILE))?;
    split.write_split_csv(&out.join("split.csv"))?;
    report_warnings(ctx, &warnings);
    ctx.say(summary_table(&split)?);
    Ok(())
}

fn patch_spec(s: &Settings, a: &PatchArgs) -> Result<PatchSpec> {
    let d = PatchSpec::default();
    let spec = PatchSpec {
        size_px: s.pick(a.patch_size, "patch-size", d.size_px)?,
        target_mpp: s.pick(a.target_mpp, "target-mpp", d.target_mpp)?,
        border_um: s.pick(a.border_um, "border-um", d.border_um)?,
    };
    spec.validate()?;
    Ok(spec)
}

fn subset_of(arg: SubsetArg) -> Subset {
    match arg {
        SubsetArg::Train => Subset::Train,
        SubsetArg::Validation => Subset::Validation,
        SubsetArg::Test => Subset::Test,
    }
}

fn extract(ctx: &Ctx, a: &ExtractArgs) -> Result<()> {
    let s = &ctx.settings;
    let manifest = load_manifest(&required_manifest(s, &a.manifest)?)?;
    let spec = patch_spec(s, &a.patch)?;
    let draws = s.pick(a.draws, "draws", 10)?;
    let lesions = match s.pick_opt(a.subset, "subset")? {
        Some(sub) => {
            if manifest.split.is_none() {
                bail!(dcis_core::Error::Manifest("--subset needs a manifest with a split".into()));
            }
            manifest.lesions_in(subset_of(sub))
        }
        None => manifest.lesions.iter().collect(),
    };
    let out = ctx.out()?;
    let source = PatchSource::new(spec);
    let entries = patchkit::write_patch_cache(&source, lesions, draws, ctx.seed, &out)?;
    ctx.say(format!("wrote {} patches to {}", entries.len(), out.display()));
    Ok(())
}

/// Everything a run directory records besides the checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetadata {
    pub tool_version: String,
    pub mode: String,
    pub run_index: usize,
    pub seed: u64,
    /// Seed of the patch stream used for validation and evaluation.
    pub eval_seed: u64,
    pub source_manifest: PathBuf,
    pub truth_csv: Option<PathBuf>,
    pub split_fractions: Option<[f64; 3]>,
    pub split_warnings: Vec<String>,
    pub patch: PatchSpec,
    pub augmentation: AugmentationConfig,
    pub inference: InferenceConfig,
    pub best_epoch: usize,
    pub best_val_kappa: Option<f64>,
    pub epochs_run: usize,
    pub started: String,
    pub finished: String,
}

/// The effective training settings, written as `config.toml`.
#[derive(Debug, Clone, Serialize)]
struct ConfigSnapshot {
    seed: u64,
    manifest: PathBuf,
    baseline: bool,
    patch: PatchSpec,
    augmentation: AugmentationConfig,
    backbone: BackboneConfig,
    train: TrainConfig,
    inference: InferenceConfig,
}

fn train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let s = &ctx.settings;
    let manifest_path = required_manifest(s, &a.manifest)?;
    let manifest = load_manifest(&manifest_path)?;
    let source_manifest = std::fs::canonicalize(&manifest_path)?;
    let truth = source_manifest.with_file_name("truth.csv");
    let truth_csv = truth.is_file().then_some(truth);

    let split_flag = triple(s, a.split.as_deref(), "split")?;
    let fractions = match split_flag {
        Some(f) => Some(SplitFractions::new(f[0], f[1], f[2])?),
        None if manifest.split.is_none() => Some(SplitFractions::reference()),
        None => None,
    };

    let patch = patch_spec(s, &a.patch)?;
    let db = BackboneConfig::default();
    let architecture = match s.pick_opt(a.architecture, "architecture")? {
        None | Some(ArchitectureArg::SmallCnn) => Architecture::SmallCnn,
        Some(ArchitectureArg::Densenet121) => Architecture::Densenet121,
    };
    let widths = match (&a.widths, s.pick_opt::<toml_list::Widths>(None, "widths")?) {
        (Some(w), _) => parse_list(w, "widths")?,
        (None, Some(w)) => w.into_vec()?,
        (None, None) => db.widths.clone(),
    };
    let backbone = BackboneConfig {
        architecture,
        input_size_px: patch.size_px,
        widths,
        trunk_units: s.pick(a.trunk_units, "trunk-units", db.trunk_units)?,
        pretrained_weights: s.pick_opt(a.pretrained_weights.clone(), "pretrained-weights")?,
    };
    if backbone.architecture == Architecture::SmallCnn {
        backbone.shape().validate()?;
    }
    let baseline = s.flag(a.baseline, "baseline")?;
    let dt = TrainConfig::default();
    let base_train = TrainConfig {
        batch_size: s.pick(a.batch_size, "batch-size", dt.batch_size)?,
        per_grade_per_batch: s.pick(a.per_grade, "per-grade", dt.per_grade_per_batch)?,
        balanced_batches: !s.flag(a.unbalanced, "unbalanced")?,
        learning_rate: s.pick(a.learning_rate, "learning-rate", dt.learning_rate)?,
        momentum: s.pick(a.momentum, "momentum", dt.momentum)?,
        max_epochs: s.pick(a.epochs, "epochs", dt.max_epochs)?,
        early_stop_patience: s.pick(a.patience, "patience", dt.early_stop_patience)?,
        dual_target: !baseline,
        agreement_loss_weight: s.pick(a.agreement_weight, "agreement-weight", dt.agreement_loss_weight)?,
        batches_per_epoch: s.pick_opt(a.batches_per_epoch, "batches-per-epoch")?,
        seed: ctx.seed,
    };
    base_train.validate()?;
    let augmentation = if s.flag(a.no_augment, "no-augment")? {
        AugmentationConfig::disabled()
    } else {
        AugmentationConfig::default()
    };
    let n_patches = s.pick(a.n_patches, "n-patches", InferenceConfig::default().n_patches)?;
    let runs = s.pick(a.runs, "runs", 1)?;
    if runs == 0 {
        bail!(UsageError("--runs must be at least 1".into()));
    }
    let out = ctx.out()?;
    let source = PatchSource::new(patch);

    for run_index in 1..=runs {
        let run_seed = ctx.seed.wrapping_add(run_index as u64 - 1);
        let run_dir = if runs == 1 {
            out.clone()
        } else {
            out.join(format!("run_{run_index}"))
        };
        create_dir(&run_dir)?;
        let started = chrono::Utc::now().to_rfc3339();
        let (split_manifest, warnings) = match fractions {
            Some(f) => stratified_patient_split(&manifest, f, run_seed)?,
            None => (manifest.clone(), Vec::new()),
        };
        report_warnings(ctx, &warnings);
        split_manifest.save(&run_dir.join(MANIFEST_FILE))?;
        split_manifest.write_split_csv(&run_dir.join("split.csv"))?;

        let config = TrainConfig {
            seed: run_seed,
            ..base_train.clone()
        };
        let inference = InferenceConfig {
            n_patches,
            seed: seed::derive_seed(run_seed, "eval"),
            ..Default::default()
        };
        let snapshot = ConfigSnapshot {
            seed: run_seed,
            manifest: source_manifest.clone(),
            baseline,
            patch,
            augmentation,
            backbone: backbone.clone(),
            train: config.clone(),
            inference,
        };
        std::fs::write(run_dir.join("config.toml"), toml::to_string_pretty(&snapshot)?)?;

        ctx.say(format!(
            "run {run_index}/{runs}: seed {run_seed}, {} train / {} validation lesions",
            split_manifest.lesions_in(Subset::Train).len(),
            split_manifest.lesions_in(Subset::Validation).len()
        ));
        let outcome = model::train(&split_manifest, &source, &augmentation, &backbone, &config, &inference)?;
        outcome.checkpoint.save(&run_dir.join(CHECKPOINT_FILE))?;
        model::write_log_csv(&outcome.log, &run_dir.join("train_log.csv"))?;
        let metadata = RunMetadata {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            mode: if baseline { "baseline" } else { "dual_target" }.to_string(),
            run_index,
            seed: run_seed,
            eval_seed: inference.seed,
            source_manifest: source_manifest.clone(),
            truth_csv: truth_csv.clone(),
            split_fractions: fractions.map(|f| f.0),
            split_warnings: warnings.iter().map(ToString::to_string).collect(),
            patch,
            augmentation,
            inference,
            best_epoch: outcome.checkpoint.epoch,
            best_val_kappa: outcome.checkpoint.best_val_kappa,
            epochs_run: outcome.log.len(),
            started,
            finished: chrono::Utc::now().to_rfc3339(),
        };
        write_json(&run_dir.join(METADATA_FILE), &metadata)?;
        ctx.say(format!(
            "run {run_index}: best epoch {} of {}, validation kappa {}",
            metadata.best_epoch,
            metadata.epochs_run,
            metadata
                .best_val_kappa
                .map_or("undefined".to_string(), |k| format!("{k:.4}"))
        ));
    }
    Ok(())
}

mod toml_list {
    use serde::Deserialize;

    /// Conv widths from the config file, as an array or a comma string.
    #[derive(Deserialize)]
    #[serde(untagged)]
    pub enum Widths {
        List(Vec<usize>),
        Text(String),
    }

    impl Widths {
        pub fn into_vec(self) -> anyhow::Result<Vec<usize>> {
            match self {
                Widths::List(v) => Ok(v),
                Widths::Text(s) => crate::config::parse_list(&s, "widths"),
            }
        }
    }
}

fn level_of(arg: LevelArg) -> EvalLevel {
    match arg {
        LevelArg::Lesion => EvalLevel::Lesion,
        LevelArg::Patient => EvalLevel::Patient,
        LevelArg::Both => EvalLevel::Both,
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalSummary {
    pub run: PathBuf,
    pub mode: String,
    pub eval_seed: u64,
    pub n_patches: usize,
    pub test_lesions: usize,
    pub chosen_percentile: Option<f64>,
    pub validation_patient_kappa: Option<f64>,
    /// Lesion-level kappa of the model against the true grades, if known.
    pub model_vs_truth_kappa: Option<f64>,
}

fn write_level(dir: &Path, report: &LevelReport) -> Result<()> {
    let tag = report.level.as_str();
    report.write_kappa_csv(&dir.join(format!("kappa_{tag}.csv")))?;
    report.write_confusion_csv(&dir.join(format!("confusion_{tag}.csv")))?;
    report.write_heatmap_png(&dir.join(format!("heatmap_{tag}.png")))?;
    Ok(())
}

/// Kappa of every observer and the model against the true lesion grades.
fn write_truth_kappas(
    eval: &Evaluation,
    truth: &BTreeMap<String, Grade>,
    path: &Path,
) -> Result<Option<f64>> {
    let mut truth_grades = Vec::new();
    let mut raters: [Vec<Grade>; 4] = Default::default();
    for l in &eval.lesions {
        let t = *truth
            .get(&l.lesion_id)
            .ok_or_else(|| dcis_core::Error::Manifest(format!("no true grade for {}", l.lesion_id)))?;
        truth_grades.push(t);
        for (r, g) in raters.iter_mut().zip(l.observers) {
            r.push(g);
        }
        raters[3].push(l.predicted);
    }
    let mut text = String::from("rater,kappa_vs_truth,n\n");
    let mut model_kappa = None;
    for (rater, grades) in agreement::Rater::ALL.iter().zip(&raters) {
        let k = agreement::qwk(&agreement::confusion(grades, &truth_grades)?).ok();
        if *rater == agreement::Rater::Model {
            model_kappa = k;
        }
        writeln!(
            text,
            "{},{},{}",
            rater.name(),
            k.map_or("NA".to_string(), |k| format!("{k:.6}")),
            grades.len()
        )?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(model_kappa)
}

fn eval_run(ctx: &Ctx, a: &EvalArgs, run: &Path, out: &Path) -> Result<(Evaluation, EvalSummary)> {
    let s = &ctx.settings;
    let ckpt_path = run.join(CHECKPOINT_FILE);
    if !ckpt_path.is_file() {
        bail!(dcis_core::Error::Checkpoint(format!(
            "no checkpoint at {}; was this run directory produced by `train`?",
            ckpt_path.display()
        )));
    }
    let checkpoint = Checkpoint::load(&ckpt_path)?;
    let meta: RunMetadata = read_json(&run.join(METADATA_FILE))?;
    let manifest_path = s
        .pick_opt(a.manifest.clone(), "manifest")?
        .unwrap_or_else(|| run.join(MANIFEST_FILE));
    let manifest = load_manifest(&manifest_path)?;
    if manifest.split.is_none() {
        bail!(dcis_core::Error::Manifest(format!("{} has no split", manifest_path.display())));
    }
    let level = level_of(s.pick_opt(a.level, "level")?.unwrap_or(LevelArg::Both));
    let grid = match (&a.percentile_grid, s.pick_opt::<Vec<f64>>(None, "percentile-grid")?) {
        (Some(g), _) => parse_list(g, "percentile-grid")?,
        (None, Some(g)) => g,
        (None, None) => inference::default_percentile_grid(),
    };
    let confidence = s.pick(a.confidence, "confidence", 0.95)?;
    let config = InferenceConfig {
        n_patches: s.pick(a.n_patches, "n-patches", meta.inference.n_patches)?,
        ..meta.inference
    };
    let source = PatchSource::new(meta.patch);
    let evaluation = inference::evaluate(
        &checkpoint.model,
        &source,
        &manifest,
        &config,
        level,
        &grid,
        confidence,
    )?;

    create_dir(out)?;
    inference::write_lesion_csv(&evaluation.lesions, &out.join("lesion_predictions.csv"))?;
    if let Some(rows) = &evaluation.patients {
        inference::write_patient_csv(rows, &out.join("patient_predictions.csv"))?;
    }
    if let Some(sweep) = &evaluation.sweep {
        let mut text = String::from("percentile,kappa\n");
        for (p, k) in &sweep.kappas {
            writeln!(text, "{p},{}", k.map_or("NA".to_string(), |k| format!("{k:.6}")))?;
        }
        std::fs::write(out.join("percentile_sweep.csv"), text)?;
    }
    for report in [&evaluation.report.lesion, &evaluation.report.patient].into_iter().flatten() {
        write_level(out, report)?;
    }
    let truth_path = s.pick_opt(a.truth.clone(), "truth")?.or(meta.truth_csv.clone());
    let model_vs_truth_kappa = match truth_path {
        Some(p) if p.is_file() => {
            let truth = synthgen::read_truth_csv(&p)?;
            write_truth_kappas(&evaluation, &truth, &out.join("truth_kappa.csv"))?
        }
        _ => None,
    };
    let summary = EvalSummary {
        run: run.to_path_buf(),
        mode: meta.mode.clone(),
        eval_seed: config.seed,
        n_patches: config.n_patches,
        test_lesions: evaluation.lesions.len(),
        chosen_percentile: evaluation.sweep.as_ref().map(|s| s.best_percentile),
        validation_patient_kappa: evaluation.sweep.as_ref().map(|s| s.best_kappa),
        model_vs_truth_kappa,
    };
    write_json(&out.join("eval_summary.json"), &summary)?;
    Ok((evaluation, summary))
}

fn render_level(report: &LevelReport) -> String {
    let mut out = format!("{}-level quadratic weighted kappa\n", report.level.as_str());
    for p in &report.pairs {
        let _ = match p.kappa {
            Some(k) => writeln!(
                out,
                "  {:<10} vs {:<10} {:>7.3}  [{:.3}, {:.3}]  n={}",
                p.rater_a.name(),
                p.rater_b.name(),
                k.kappa,
                k.ci_low,
                k.ci_high,
                p.matrix.n()
            ),
            None => writeln!(
                out,
                "  {:<10} vs {:<10} undefined  n={}",
                p.rater_a.name(),
                p.rater_b.name(),
                p.matrix.n()
            ),
        };
    }
    out
}

fn eval(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let out_flag = ctx.settings.pick_opt(ctx.cli.out.clone(), "out")?;
    let mut all = Vec::new();
    for run in &a.runs {
        let dir = match (&out_flag, a.runs.len()) {
            (Some(o), 1) => o.clone(),
            _ => run.join(EVAL_DIR),
        };
        let (evaluation, summary) = eval_run(ctx, a, run, &dir)?;
        ctx.say(format!("{}: {} test lesions", run.display(), summary.test_lesions));
        if let Some(p) = summary.chosen_percentile {
            ctx.say(format!("  chosen percentile P = {p}"));
        }
        if let Some(k) = summary.model_vs_truth_kappa {
            ctx.say(format!("  model vs true grade (lesion level): {k:.4}"));
        }
        for report in [&evaluation.report.lesion, &evaluation.report.patient].into_iter().flatten() {
            ctx.say(render_level(report));
        }
        all.push(evaluation.report.kappas());
    }
    if all.len() > 1 {
        let dir = out_flag.unwrap_or_else(|| {
            a.runs[0]
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."))
        });
        write_multi_run(ctx, &all, &dir)?;
    }
    Ok(())
}

fn write_multi_run(ctx: &Ctx, runs: &[RunKappas], dir: &Path) -> Result<()> {
    let rows = agreement::multi_run_table(runs)?;
    create_dir(dir)?;
    let path = dir.join("multi_run_kappa.csv");
    agreement::write_multi_run_csv(&rows, &path)?;
    let mut text = Vec::new();
    agreement::render_multi_run_table(&rows, &mut text)?;
    ctx.say(format!("kappa over {} runs (written to {})", runs.len(), path.display()));
    ctx.say(String::from_utf8_lossy(&text).trim_end());
    Ok(())
}

fn report(ctx: &Ctx, a: &ReportArgs) -> Result<()> {
    let mut runs = Vec::new();
    for run in &a.runs {
        let dir = run.join(EVAL_DIR);
        let dir = if dir.is_dir() { dir } else { run.clone() };
        let mut kappas = RunKappas::default();
        let mut found = false;
        for level in [Level::Lesion, Level::Patient] {
            let path = dir.join(format!("kappa_{}.csv", level.as_str()));
            if path.is_file() {
                found = true;
                let rows = agreement::read_kappa_csv(&path)?;
                match level {
                    Level::Lesion => kappas.lesion = rows,
                    Level::Patient => kappas.patient = rows,
                }
            }
        }
        if !found {
            bail!(dcis_core::Error::Manifest(format!(
                "no kappa tables in {}; run `eval` first",
                dir.display()
            )));
        }
        runs.push(kappas);
    }
    let out = ctx
        .settings
        .pick_opt(ctx.cli.out.clone(), "out")?
        .unwrap_or_else(|| PathBuf::from("."));
    write_multi_run(ctx, &runs, &out)
}
