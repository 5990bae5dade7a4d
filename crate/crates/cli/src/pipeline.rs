//! Kit-level glue: load or render acquisitions, score them in 60-patch
//! batches, collect the tables the reports are built from.

use std::path::Path;
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use drae_core::aggregation::{KitResults, PatchScore, StripAcquisition, StripResult};
use drae_core::checkpoint::Checkpoint;
use drae_core::imagecore::{PatchId, RegionLayout};
use drae_core::metrics::SsimParams;
use drae_core::network::Generator;
use drae_core::scoring::{score_patches, ScoredPatch};
use drae_core::synthkit::{acquisition_patches, load_acquisition, ImageKind, KitManifest, Split, StripEntry};
use drae_core::training::TrainConfig;
use drae_core::Image;

/// Where acquisition images come from.
#[derive(Clone, Copy, Debug)]
pub enum Source<'a> {
    /// Rendered from the manifest seeds.
    Memory,
    /// PNG files under a dataset root.
    Disk(&'a Path),
}

pub fn acquisition_images(
    manifest: &KitManifest,
    source: Source<'_>,
    entry: &StripEntry,
    run: usize,
) -> Result<Vec<(ImageKind, Image)>> {
    Ok(match source {
        Source::Memory => manifest.render(entry, run)?,
        Source::Disk(root) => load_acquisition(root, entry, run)
            .with_context(|| format!("loading {} run {run}", entry.id))?,
    })
}

/// Patch layout of the kit's strips at the model's input size.
pub fn layout_for(manifest: &KitManifest, patch_size: usize) -> Result<RegionLayout> {
    Ok(manifest.spec.layout(patch_size)?)
}

/// Every training patch of the kit.
pub fn training_patches(manifest: &KitManifest, source: Source<'_>, patch_size: usize) -> Result<Vec<Image>> {
    let layout = layout_for(manifest, patch_size)?;
    let mut out = Vec::with_capacity(manifest.plan.train_patches());
    for entry in manifest.split(Split::Train) {
        for run in 0..entry.run_seeds.len() {
            let images = acquisition_images(manifest, source, entry, run)?;
            out.extend(acquisition_patches(entry, run, &images, &layout)?.into_iter().map(|(_, p)| p));
        }
    }
    ensure!(!out.is_empty(), "the kit has no training patches");
    Ok(out)
}

/// One acquisition scored in a single batch, with the wall time of the
/// forward pass plus SSIM scoring in milliseconds.
pub fn score_acquisition(
    model: &Generator<f32>,
    images: &[(ImageKind, Image)],
    entry: &StripEntry,
    run: usize,
    layout: &RegionLayout,
    ssim: &SsimParams,
) -> Result<(Vec<ScoredPatch<f32>>, f64)> {
    let patches = acquisition_patches(entry, run, images, layout)?;
    let (ids, xs): (Vec<PatchId>, Vec<Image>) = patches.into_iter().unzip();
    let start = Instant::now();
    let scored = score_patches(model, &ids, &xs, ssim)?;
    Ok((scored, start.elapsed().as_secs_f64() * 1e3))
}

/// Scores every acquisition of a split.
pub fn score_split(
    model: &Generator<f32>,
    manifest: &KitManifest,
    source: Source<'_>,
    split: Split,
    ssim: &SsimParams,
) -> Result<KitResults> {
    let layout = layout_for(manifest, model.config().input_size)?;
    let mut kit = KitResults::default();
    for entry in manifest.split(split) {
        let mut runs = Vec::with_capacity(entry.run_seeds.len());
        for run in 0..entry.run_seeds.len() {
            let images = acquisition_images(manifest, source, entry, run)?;
            let (scored, ms) = score_acquisition(model, &images, entry, run, &layout, ssim)?;
            kit.batch_ms.push(ms);
            let scores = scored.into_iter().map(|s| PatchScore { id: s.id, score: s.score }).collect();
            runs.push(StripAcquisition::new(entry.id.clone(), run, scores)?);
        }
        kit.strips.push(StripResult {
            strip: entry.id.clone(),
            defective: entry.defective,
            defect_cells: entry.defect_cells(),
            runs,
        });
    }
    ensure!(!kit.strips.is_empty(), "split {} is empty", split.name());
    Ok(kit)
}

/// SSIM settings the model was trained with (defaults if absent).
pub fn ssim_params(ckpt: &Checkpoint<f32>) -> SsimParams {
    serde_json::from_value::<TrainConfig>(ckpt.train.clone()).map(|c| c.ssim).unwrap_or_default()
}

/// Flat per-patch table: one row per scored patch.
pub fn write_scores_csv(path: &Path, kit: &KitResults) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["strip", "run", "frame", "vial", "region", "score", "cell_defective", "strip_defective"])?;
    for s in &kit.strips {
        for a in &s.runs {
            for p in &a.patches {
                w.write_record([
                    s.strip.clone(),
                    p.id.run.to_string(),
                    p.id.frame.to_string(),
                    p.id.vial.to_string(),
                    p.id.region.to_string(),
                    format!("{:.9}", p.score),
                    s.cell_defective(p.id.vial, p.id.region).to_string(),
                    s.defective.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
