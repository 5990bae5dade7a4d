//! Patch → strip → product decisions, confusion metrics and timing summaries.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{PatchId, REGIONS, VIALS};
use crate::scoring::{CalibrationSample, RegionThresholds};

/// Frames kept per test acquisition (first, eighth, last).
pub const TEST_FRAMES: usize = 3;
/// Patches per strip acquisition: frames × vials × regions.
pub const PATCHES_PER_ACQUISITION: usize = TEST_FRAMES * VIALS * REGIONS;
/// Acquisitions per product.
pub const RUNS: usize = 10;
/// Runs that must agree with the truth for a product to count as correct.
pub const AGREEMENT: usize = 7;

/// Score of one patch, without the images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchScore {
    pub id: PatchId,
    pub score: f64,
}

/// The 60 scored patches of one strip acquisition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StripAcquisition {
    pub strip: String,
    pub run: usize,
    pub patches: Vec<PatchScore>,
}

impl StripAcquisition {
    /// Requires exactly one patch per (frame, vial, region) cell.
    pub fn new(strip: impl Into<String>, run: usize, patches: Vec<PatchScore>) -> Result<Self> {
        let strip = strip.into();
        if patches.len() != PATCHES_PER_ACQUISITION {
            return Err(Error::Invalid(format!(
                "acquisition {strip}/{run} has {} patches, expected {PATCHES_PER_ACQUISITION}",
                patches.len()
            )));
        }
        let cells: BTreeSet<(usize, usize, usize)> =
            patches.iter().map(|p| (p.id.frame, p.id.vial, p.id.region)).collect();
        let frames: BTreeSet<usize> = patches.iter().map(|p| p.id.frame).collect();
        if cells.len() != PATCHES_PER_ACQUISITION || frames.len() != TEST_FRAMES {
            return Err(Error::Invalid(format!("acquisition {strip}/{run} does not cover every cell once")));
        }
        if patches.iter().any(|p| p.id.strip != strip || p.id.run != run || !p.score.is_finite()) {
            return Err(Error::Invalid(format!("acquisition {strip}/{run} holds foreign or non-finite patches")));
        }
        Ok(StripAcquisition { strip, run, patches })
    }

    /// Maximum score per region.
    pub fn region_maxima(&self) -> [f64; REGIONS] {
        let mut m = [f64::NEG_INFINITY; REGIONS];
        for p in &self.patches {
            m[p.id.region] = m[p.id.region].max(p.score);
        }
        m
    }
}

/// Max-over-patches score with its location.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitScore {
    pub score: f64,
    pub argmax: PatchId,
    /// Maximum per vial (`NEG_INFINITY` for vials without patches).
    pub per_vial: [f64; VIALS],
}

/// `θ = max φᵢ` over a decision unit; the first maximal patch is retained.
pub fn vial_score(patches: &[PatchScore]) -> Result<UnitScore> {
    let first = patches.first().ok_or_else(|| Error::Invalid("no patches to aggregate".into()))?;
    let mut best = first;
    let mut per_vial = [f64::NEG_INFINITY; VIALS];
    for p in patches {
        if p.score > best.score {
            best = p;
        }
        per_vial[p.id.vial] = per_vial[p.id.vial].max(p.score);
    }
    Ok(UnitScore { score: best.score, argmax: best.id.clone(), per_vial })
}

/// Reject (`true`) iff some patch exceeds its region's threshold.
pub fn strip_decision(acq: &StripAcquisition, thresholds: &RegionThresholds) -> Result<bool> {
    thresholds.validate()?;
    let maxima = acq.region_maxima();
    for (r, m) in maxima.iter().enumerate() {
        if *m > thresholds.get(r)? {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Product label after the run series.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProductLabel {
    Defective,
    Nominal,
    /// Neither label reached the agreement quota.
    Undecided,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductVerdict {
    pub strip: String,
    /// Per-run reject flags.
    pub runs: Vec<bool>,
    pub label: ProductLabel,
    pub defective: bool,
    pub correct: bool,
}

/// Correct iff at least 7 of the 10 runs agree with the ground truth.
pub fn run_decision(strip: impl Into<String>, verdicts: &[bool], defective: bool) -> Result<ProductVerdict> {
    if verdicts.len() != RUNS {
        return Err(Error::Invalid(format!("expected {RUNS} run verdicts, got {}", verdicts.len())));
    }
    let rejects = verdicts.iter().filter(|&&v| v).count();
    let label = if rejects >= AGREEMENT {
        ProductLabel::Defective
    } else if RUNS - rejects >= AGREEMENT {
        ProductLabel::Nominal
    } else {
        ProductLabel::Undecided
    };
    let correct = label == if defective { ProductLabel::Defective } else { ProductLabel::Nominal };
    Ok(ProductVerdict { strip: strip.into(), runs: verdicts.to_vec(), label, defective, correct })
}

/// Confusion counts with defective as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
}

impl Confusion {
    pub fn add(&mut self, defective: bool, predicted_defective: bool) {
        match (defective, predicted_defective) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fp += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.tn + self.fp
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    /// NaN when the kit holds no defective unit.
    pub fn tpr(&self) -> f64 {
        self.tp as f64 / (self.tp + self.fn_) as f64
    }

    /// NaN when the kit holds no nominal unit.
    pub fn tnr(&self) -> f64 {
        self.tn as f64 / (self.tn + self.fp) as f64
    }

    pub fn balanced_accuracy(&self) -> f64 {
        0.5 * (self.tpr() + self.tnr())
    }
}

/// Evaluation granularity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    /// Every patch against its own cell label.
    Patch,
    /// Every strip acquisition (one run).
    Strip,
    /// Every product after the 7-of-10 policy.
    Run,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Patch, Level::Strip, Level::Run];

    pub fn name(self) -> &'static str {
        match self {
            Level::Patch => "patch",
            Level::Strip => "strip",
            Level::Run => "run",
        }
    }
}

impl std::str::FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patch" => Ok(Level::Patch),
            "strip" => Ok(Level::Strip),
            "run" => Ok(Level::Run),
            other => Err(Error::Config(format!("unknown level {other:?} (patch, strip, run)"))),
        }
    }
}

/// Per-batch latency summary. `μ_tf = μ_tb / patches_per_batch`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub batches: usize,
    pub patches_per_batch: usize,
    pub mean_batch_ms: f64,
    pub mean_patch_ms: f64,
    pub p95_batch_ms: f64,
    pub p99_batch_ms: f64,
    pub max_batch_ms: f64,
}

/// Nearest-rank percentile of an ascending slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn timing_stats(batch_ms: &[f64], patches_per_batch: usize) -> Result<TimingStats> {
    if batch_ms.is_empty() || patches_per_batch == 0 {
        return Err(Error::Invalid("timing needs at least one batch of at least one patch".into()));
    }
    let mut sorted = batch_ms.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = batch_ms.iter().sum::<f64>() / batch_ms.len() as f64;
    Ok(TimingStats {
        batches: batch_ms.len(),
        patches_per_batch,
        mean_batch_ms: mean,
        mean_patch_ms: mean / patches_per_batch as f64,
        p95_batch_ms: percentile(&sorted, 95.0),
        p99_batch_ms: percentile(&sorted, 99.0),
        max_batch_ms: *sorted.last().unwrap(),
    })
}

/// Scores of one test product across its runs, with ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StripResult {
    pub strip: String,
    pub defective: bool,
    /// `(vial, region)` cells that carry a defect.
    pub defect_cells: Vec<(usize, usize)>,
    pub runs: Vec<StripAcquisition>,
}

impl StripResult {
    pub fn region_defective(&self, region: usize) -> bool {
        self.defect_cells.iter().any(|&(_, r)| r == region)
    }

    pub fn cell_defective(&self, vial: usize, region: usize) -> bool {
        self.defect_cells.contains(&(vial, region))
    }
}

/// Everything an evaluation reads.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KitResults {
    pub strips: Vec<StripResult>,
    /// Wall time of each 60-patch forward + scoring pass.
    pub batch_ms: Vec<f64>,
}

/// One row of the results tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub level: Level,
    pub positive_class: String,
    pub units: usize,
    pub confusion: Confusion,
    pub accuracy: f64,
    pub tpr: f64,
    pub tnr: f64,
    pub balanced_accuracy: f64,
    pub thresholds: Vec<f64>,
    pub timing: Option<TimingStats>,
}

/// Product verdicts for every strip of the kit.
pub fn product_verdicts(kit: &KitResults, thresholds: &RegionThresholds) -> Result<Vec<ProductVerdict>> {
    kit.strips
        .iter()
        .map(|s| {
            let flags = s.runs.iter().map(|a| strip_decision(a, thresholds)).collect::<Result<Vec<_>>>()?;
            run_decision(s.strip.clone(), &flags, s.defective)
        })
        .collect()
}

pub fn evaluate(kit: &KitResults, thresholds: &RegionThresholds, level: Level) -> Result<MetricsReport> {
    if kit.strips.is_empty() {
        return Err(Error::Invalid("empty kit".into()));
    }
    thresholds.validate()?;
    let mut c = Confusion::default();
    match level {
        Level::Patch => {
            for s in &kit.strips {
                for a in &s.runs {
                    for p in &a.patches {
                        c.add(s.cell_defective(p.id.vial, p.id.region), thresholds.rejects(p.id.region, p.score)?);
                    }
                }
            }
        }
        Level::Strip => {
            for s in &kit.strips {
                for a in &s.runs {
                    c.add(s.defective, strip_decision(a, thresholds)?);
                }
            }
        }
        Level::Run => {
            for v in product_verdicts(kit, thresholds)? {
                c.add(v.defective, if v.correct { v.defective } else { !v.defective });
            }
        }
    }
    let timing = if kit.batch_ms.is_empty() { None } else { Some(timing_stats(&kit.batch_ms, PATCHES_PER_ACQUISITION)?) };
    Ok(MetricsReport {
        level,
        positive_class: "defective".into(),
        units: c.total(),
        confusion: c,
        accuracy: c.accuracy(),
        tpr: c.tpr(),
        tnr: c.tnr(),
        balanced_accuracy: c.balanced_accuracy(),
        thresholds: thresholds.thresholds.clone(),
        timing,
    })
}

/// Calibration observations at the granularity of `level`.
///
/// * patch: each patch, labeled by its own cell;
/// * strip: each acquisition's region maximum, labeled by whether the strip
///   carries a defect in that region;
/// * run: per product and region, an order statistic of the 10 run maxima.
///   A defective product needs 7 flagging runs (7th-largest must exceed the
///   threshold); a nominal one at most 3 (4th-largest must stay below it),
///   since 4 to 6 flags leave it undecided.
pub fn calibration_samples(kit: &KitResults, level: Level) -> Result<Vec<CalibrationSample>> {
    let mut out = Vec::new();
    for s in &kit.strips {
        match level {
            Level::Patch => {
                for a in &s.runs {
                    for p in &a.patches {
                        out.push(CalibrationSample {
                            region: p.id.region,
                            score: p.score,
                            defective: s.cell_defective(p.id.vial, p.id.region),
                        });
                    }
                }
            }
            Level::Strip => {
                for a in &s.runs {
                    for (region, &score) in a.region_maxima().iter().enumerate() {
                        out.push(CalibrationSample { region, score, defective: s.region_defective(region) });
                    }
                }
            }
            Level::Run => {
                if s.runs.len() != RUNS {
                    return Err(Error::Invalid(format!("strip {} has {} runs", s.strip, s.runs.len())));
                }
                for region in 0..REGIONS {
                    let mut m: Vec<f64> = s.runs.iter().map(|a| a.region_maxima()[region]).collect();
                    m.sort_by(|a, b| b.total_cmp(a));
                    let defective = s.region_defective(region);
                    let k = if defective { AGREEMENT - 1 } else { RUNS - AGREEMENT };
                    out.push(CalibrationSample { region, score: m[k], defective });
                }
            }
        }
    }
    Ok(out)
}
