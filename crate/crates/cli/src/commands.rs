//! Subcommand definitions and their implementations.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use drae_core::aggregation::{evaluate, run_decision, strip_decision, timing_stats, Level, TimingStats, RUNS};
use drae_core::checkpoint::Checkpoint;
use drae_core::imagecore::extract_patches;
use drae_core::network::Generator;
use drae_core::scoring::{calibrate_regions, classify_patch, score_patches, RegionThresholds};
use drae_core::synthkit::{build_kit, render_frames, write_strip, KitManifest, KitPlan, Split, StripSpec};
use drae_core::training::{FitOptions, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{preset, RunConfig, ThresholdsFile};
use crate::pipeline::{
    acquisition_images, layout_for, score_acquisition, score_split, ssim_params, training_patches, write_scores_csv,
    Source,
};
use crate::render::{save_heatmap, save_panel};

#[derive(Debug, Parser)]
#[command(name = "drae", version, about = "Vial-strip anomaly detection: data, training, calibration, inference")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// TOML file with optional [net], [train], [kit] and [strip] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed taken from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for data generation (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic train/calibration/test kit to disk.
    GenData(GenDataArgs),
    /// Train generator and discriminator on the kit's nominal strips.
    Train(TrainArgs),
    /// Sweep per-region thresholds on the calibration split.
    Calibrate(CalibrateArgs),
    /// Score one strip and write heatmaps for rejected patches.
    Infer(InferArgs),
    /// Patch-, strip- and run-level reports on the test split.
    Evaluate(EvaluateArgs),
    /// Latency of 60-patch batches against the acquisition slot.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KitPreset {
    /// 100 training strips, 141/120 test strips.
    Default,
    /// 70 training strips x 2 runs (~50k patches), 141/120 test strips.
    Desk,
    /// ~2k training patches, small evaluation splits.
    Smoke,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: KitPreset,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Network preset (paper, desk, toy); overrides the config's [net] section.
    #[arg(long)]
    pub net: Option<String>,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Stop after this many optimizer steps in total.
    #[arg(long)]
    pub max_steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "strip")]
    pub level: LevelArg,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub thresholds: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Strip id from the manifest.
    #[arg(long)]
    pub strip: String,
    /// Single run; all runs (with the 7-of-10 verdict) when omitted.
    #[arg(long)]
    pub run: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LevelArg {
    Patch,
    Strip,
    Run,
    All,
}

impl LevelArg {
    fn levels(self) -> Vec<Level> {
        match self {
            LevelArg::Patch => vec![Level::Patch],
            LevelArg::Strip => vec![Level::Strip],
            LevelArg::Run => vec![Level::Run],
            LevelArg::All => Level::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub level: LevelArg,
    /// Fixed thresholds for every level instead of per-level calibration.
    #[arg(long)]
    pub thresholds: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Model to time; a freshly initialized preset when omitted.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "toy")]
    pub net: String,
    /// Slot budget for one 60-patch batch (p99).
    #[arg(long, default_value_t = 500.0)]
    pub budget_ms: f64,
    #[arg(long, default_value_t = 50)]
    pub batches: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    /// Also write the report as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// How a successful invocation ended.
#[derive(Debug, PartialEq, Eq)]
pub enum Outcome {
    Done,
    /// Bench p99 exceeded the slot budget.
    BudgetExceeded,
}

pub fn run(cli: Cli) -> Result<Outcome> {
    if let Some(n) = cli.global.threads {
        ensure!(n > 0, "--threads must be positive");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
    }
    let cfg = RunConfig::load(cli.global.config.as_deref())?;
    let seed = cli.global.seed;
    match cli.command {
        Command::GenData(a) => gen_data(&cfg, seed, &a).map(|_| Outcome::Done),
        Command::Train(a) => train(&cfg, seed, &a).map(|_| Outcome::Done),
        Command::Calibrate(a) => calibrate(&a).map(|_| Outcome::Done),
        Command::Infer(a) => infer(&a).map(|_| Outcome::Done),
        Command::Evaluate(a) => evaluate_cmd(&a).map(|_| Outcome::Done),
        Command::Bench(a) => {
            let r = bench(&cfg, seed, &a)?;
            Ok(if r.within_budget { Outcome::Done } else { Outcome::BudgetExceeded })
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn load_model(path: &Path) -> Result<(Checkpoint<f32>, Generator<f32>)> {
    let ckpt = Checkpoint::<f32>::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let gen = ckpt.generator()?;
    Ok((ckpt, gen))
}

fn load_manifest(root: &Path) -> Result<KitManifest> {
    KitManifest::load(root).with_context(|| format!("no dataset manifest under {}", root.display()))
}

pub fn gen_data(cfg: &RunConfig, seed: Option<u64>, a: &GenDataArgs) -> Result<KitManifest> {
    let plan = cfg.kit.clone().unwrap_or_else(|| match a.preset {
        KitPreset::Default => KitPlan::default(),
        KitPreset::Desk => KitPlan::desk(),
        KitPreset::Smoke => KitPlan::smoke(),
    });
    let spec = cfg.strip.clone().unwrap_or_default();
    let manifest = build_kit(&plan, &spec, seed.unwrap_or(0))?;
    create_dir(&a.out)?;
    manifest.strips.par_iter().try_for_each(|e| write_strip(&manifest, &a.out, e))?;
    manifest.save(&a.out)?;
    let count = |s: Split, d: bool| manifest.split(s).filter(|e| e.defective == d).count();
    println!(
        "wrote {}: train {} strips ({} patches), cal {}+{}, test {}+{} (defective+nominal)",
        a.out.display(),
        count(Split::Train, false),
        plan.train_patches(),
        count(Split::Cal, true),
        count(Split::Cal, false),
        count(Split::Test, true),
        count(Split::Test, false)
    );
    Ok(manifest)
}

pub fn train(cfg: &RunConfig, seed: Option<u64>, a: &TrainArgs) -> Result<()> {
    let manifest = load_manifest(&a.data)?;
    let mut trainer = match &a.checkpoint {
        Some(path) => Trainer::<f32>::from_checkpoint(&Checkpoint::load(path)?)?,
        None => {
            let net = match (&a.net, &cfg.net) {
                (Some(name), _) => preset(name)?,
                _ => cfg.net()?,
            };
            let mut tc = cfg.train();
            if let Some(s) = seed {
                tc.seed = s;
            }
            if let Some(e) = a.epochs {
                tc.epochs = e;
            }
            Trainer::new(net, tc)?
        }
    };
    let data = training_patches(&manifest, Source::Disk(&a.data), trainer.gen.config().input_size)?;
    create_dir(&a.out)?;
    let log_path = a.out.join("telemetry.jsonl");
    let mut log = BufWriter::new(fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let report = trainer.fit(
        &data,
        FitOptions { checkpoint_dir: Some(a.out.clone()), telemetry: Some(&mut log), max_steps: a.max_steps },
    )?;
    log.flush()?;
    trainer.to_checkpoint().save(&a.out.join("model.ckpt"))?;
    write_json(&a.out.join("fit_report.json"), &report)?;
    let last = report.epochs.last();
    println!(
        "trained {} steps on {} patches; validation SSIM {:.4} -> {:.4}",
        trainer.step(),
        report.train_patches,
        report.initial_val_ssim,
        last.map_or(f64::NAN, |e| e.val_ssim)
    );
    Ok(())
}

pub fn calibrate(a: &CalibrateArgs) -> Result<ThresholdsFile> {
    let level = match a.level {
        LevelArg::All => bail!("calibrate needs a single --level"),
        l => l.levels()[0],
    };
    let manifest = load_manifest(&a.data)?;
    let (ckpt, gen) = load_model(&a.checkpoint)?;
    let kit = score_split(&gen, &manifest, Source::Disk(&a.data), Split::Cal, &ssim_params(&ckpt))?;
    let samples = drae_core::aggregation::calibration_samples(&kit, level)?;
    let (thresholds, ba) = calibrate_regions(&samples)?;
    let file = ThresholdsFile { level, thresholds: thresholds.thresholds, calibration_balanced_accuracy: ba };
    create_dir(&a.out)?;
    file.save(&a.out.join("thresholds.toml"))?;
    write_scores_csv(&a.out.join("calibration_scores.csv"), &kit)?;
    println!("{} thresholds {:?}", level.name(), file.thresholds);
    Ok(file)
}

#[derive(Debug, Serialize)]
pub struct RunVerdict {
    pub run: usize,
    pub reject: bool,
    pub rejected_patches: Vec<String>,
    pub batch_ms: f64,
}

#[derive(Debug, Serialize)]
pub struct InferReport {
    pub strip: String,
    pub thresholds: Vec<f64>,
    pub runs: Vec<RunVerdict>,
    /// 7-of-10 product label when every run was scored.
    pub product: Option<drae_core::aggregation::ProductLabel>,
    pub heatmaps: Vec<PathBuf>,
}

pub fn infer(a: &InferArgs) -> Result<InferReport> {
    let manifest = load_manifest(&a.data)?;
    let entry = manifest.strip(&a.strip).with_context(|| format!("strip {} is not in the manifest", a.strip))?;
    let (ckpt, gen) = load_model(&a.checkpoint)?;
    let thresholds = RegionThresholds::new(ThresholdsFile::load(&a.thresholds)?.thresholds)?;
    let ssim = ssim_params(&ckpt);
    let layout = layout_for(&manifest, gen.config().input_size)?;
    let runs: Vec<usize> = match a.run {
        Some(r) => {
            ensure!(r < entry.run_seeds.len(), "strip {} has no run {r}", entry.id);
            vec![r]
        }
        None => (0..entry.run_seeds.len()).collect(),
    };
    create_dir(&a.out)?;
    let mut report =
        InferReport { strip: entry.id.clone(), thresholds: thresholds.thresholds.clone(), runs: vec![], product: None, heatmaps: vec![] };
    for run in runs {
        let images = acquisition_images(&manifest, Source::Disk(&a.data), entry, run)?;
        let (scored, ms) = score_acquisition(&gen, &images, entry, run, &layout, &ssim)?;
        let mut rejected = Vec::new();
        for s in &scored {
            let verdict = classify_patch(s, &thresholds)?;
            if let Some(heat) = verdict.heatmap {
                let stem = format!("{}_r{}_f{:02}_v{}_g{}", entry.id, run, s.id.frame, s.id.vial, s.id.region);
                let hp = a.out.join(format!("{stem}_heatmap.png"));
                save_heatmap(&hp, &heat)?;
                let pp = a.out.join(format!("{stem}_panel.png"));
                save_panel(&pp, &s.input, &s.reconstruction, &heat)?;
                report.heatmaps.extend([hp, pp]);
                rejected.push(format!("frame {} vial {} region {} score {:.6}", s.id.frame, s.id.vial, s.id.region, s.score));
            }
        }
        let acq = drae_core::aggregation::StripAcquisition::new(
            entry.id.clone(),
            run,
            scored.iter().map(|s| drae_core::aggregation::PatchScore { id: s.id.clone(), score: s.score }).collect(),
        )?;
        let reject = strip_decision(&acq, &thresholds)?;
        debug_assert_eq!(reject, !rejected.is_empty());
        println!("{} run {run}: {}", entry.id, if reject { "REJECT" } else { "accept" });
        report.runs.push(RunVerdict { run, reject, rejected_patches: rejected, batch_ms: ms });
    }
    if report.runs.len() == RUNS {
        let flags: Vec<bool> = report.runs.iter().map(|r| r.reject).collect();
        let v = run_decision(entry.id.clone(), &flags, entry.defective)?;
        println!("{}: product {:?}", entry.id, v.label);
        report.product = Some(v.label);
    }
    write_json(&a.out.join(format!("verdict_{}.json", entry.id)), &report)?;
    Ok(report)
}

/// One results-table row.
#[derive(Debug, Serialize)]
pub struct LevelReport {
    pub level: Level,
    pub positive_class: String,
    pub threshold_source: String,
    pub thresholds: Vec<f64>,
    pub units: usize,
    pub confusion: drae_core::aggregation::Confusion,
    pub accuracy: f64,
    pub tpr: f64,
    pub tnr: f64,
    pub balanced_accuracy: f64,
    /// Mean wall time of one 60-patch batch (forward + scoring), ms.
    pub mean_batch_ms: f64,
    /// `mean_batch_ms / 60`.
    pub mean_patch_ms: f64,
    pub timing: Option<TimingStats>,
}

pub fn evaluate_cmd(a: &EvaluateArgs) -> Result<Vec<LevelReport>> {
    let manifest = load_manifest(&a.data)?;
    let (ckpt, gen) = load_model(&a.checkpoint)?;
    let ssim = ssim_params(&ckpt);
    let fixed = a.thresholds.as_deref().map(ThresholdsFile::load).transpose()?;
    let cal = match fixed {
        Some(_) => None,
        None => Some(score_split(&gen, &manifest, Source::Disk(&a.data), Split::Cal, &ssim)?),
    };
    let test = score_split(&gen, &manifest, Source::Disk(&a.data), Split::Test, &ssim)?;
    create_dir(&a.out)?;
    write_scores_csv(&a.out.join("test_scores.csv"), &test)?;
    let mut out = Vec::new();
    for level in a.level.levels() {
        let (thresholds, source) = match (&fixed, &cal) {
            (Some(f), _) => (RegionThresholds::new(f.thresholds.clone())?, format!("file ({} level)", f.level.name())),
            (None, Some(cal)) => {
                let samples = drae_core::aggregation::calibration_samples(cal, level)?;
                (calibrate_regions(&samples)?.0, "calibration split".to_string())
            }
            (None, None) => unreachable!(),
        };
        let r = evaluate(&test, &thresholds, level)?;
        let timing = r.timing.clone();
        let report = LevelReport {
            level,
            positive_class: r.positive_class,
            threshold_source: source,
            thresholds: r.thresholds,
            units: r.units,
            confusion: r.confusion,
            accuracy: r.accuracy,
            tpr: r.tpr,
            tnr: r.tnr,
            balanced_accuracy: r.balanced_accuracy,
            mean_batch_ms: timing.as_ref().map_or(f64::NAN, |t| t.mean_batch_ms),
            mean_patch_ms: timing.as_ref().map_or(f64::NAN, |t| t.mean_patch_ms),
            timing,
        };
        println!(
            "{:>5}: accuracy {:.4}  TPR {:.4}  TNR {:.4}  balanced {:.4}  ({} units)",
            level.name(),
            report.accuracy,
            report.tpr,
            report.tnr,
            report.balanced_accuracy,
            report.units
        );
        write_json(&a.out.join(format!("report_{}.json", level.name())), &report)?;
        out.push(report);
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub net: String,
    pub patch_size: usize,
    pub budget_ms: f64,
    /// Forward pass + scoring of each 60-patch batch.
    pub model: TimingStats,
    /// Patch extraction + forward + scoring.
    pub end_to_end: TimingStats,
    pub within_budget: bool,
}

pub fn bench(cfg: &RunConfig, seed: Option<u64>, a: &BenchArgs) -> Result<BenchReport> {
    ensure!(a.batches > 0, "--batches must be positive");
    ensure!(a.budget_ms > 0.0, "--budget-ms must be positive");
    let seed = seed.unwrap_or(0);
    let (gen, ssim, name) = match &a.checkpoint {
        Some(p) => {
            let (ckpt, gen) = load_model(p)?;
            (gen, ssim_params(&ckpt), p.display().to_string())
        }
        None => {
            let gen = Generator::<f32>::new(preset(&a.net)?, &mut ChaCha8Rng::seed_from_u64(seed))?;
            (gen, cfg.train().ssim, a.net.clone())
        }
    };
    let spec: StripSpec = cfg.strip.clone().unwrap_or_default().with_seed(seed);
    let size = gen.config().input_size;
    let layout = spec.layout(size)?;
    let frames = render_frames::<f32>(&spec, seed, &drae_core::synthkit::TEST_FRAME_INDICES)?;
    let mut model_ms = Vec::with_capacity(a.batches);
    let mut total_ms = Vec::with_capacity(a.batches);
    for i in 0..a.warmup + a.batches {
        let start = Instant::now();
        let mut ids = Vec::with_capacity(60);
        let mut xs = Vec::with_capacity(60);
        for (f, img) in frames.iter().enumerate() {
            for ((vial, region), p) in extract_patches(img, &layout)?.patches {
                ids.push(drae_core::imagecore::PatchId::new("bench", 0, f, vial, region)?);
                xs.push(p);
            }
        }
        let t = Instant::now();
        let scored = score_patches(&gen, &ids, &xs, &ssim)?;
        let m = t.elapsed().as_secs_f64() * 1e3;
        let e = start.elapsed().as_secs_f64() * 1e3;
        ensure!(scored.len() == 60, "bench batch holds {} patches", scored.len());
        if i >= a.warmup {
            model_ms.push(m);
            total_ms.push(e);
        }
    }
    let model = timing_stats(&model_ms, 60)?;
    let end_to_end = timing_stats(&total_ms, 60)?;
    let within_budget = model.p99_batch_ms <= a.budget_ms;
    println!(
        "{} batches of 60 ({}x{} patches, {}): mean batch {:.3} ms, mean per patch {:.4} ms, p95 {:.3} ms, p99 {:.3} ms, max {:.3} ms",
        model.batches, size, size, name, model.mean_batch_ms, model.mean_patch_ms, model.p95_batch_ms, model.p99_batch_ms, model.max_batch_ms
    );
    println!("end-to-end mean batch {:.3} ms; budget {:.1} ms: {}", end_to_end.mean_batch_ms, a.budget_ms, if within_budget { "ok" } else { "EXCEEDED" });
    let report = BenchReport { net: name, patch_size: size, budget_ms: a.budget_ms, model, end_to_end, within_budget };
    if let Some(out) = &a.out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        write_json(out, &report)?;
    }
    Ok(report)
}
