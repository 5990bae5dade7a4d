//! Patch anomaly scores, residual heatmaps and per-region threshold
//! calibration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{minmax_normalize, Image, PatchId, REGIONS};
use crate::metrics::{ssim, SsimParams};
use crate::network::Generator;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Anything that maps a `[n, 1, s, s]` batch to its reconstruction.
pub trait Reconstructor<T: Scalar> {
    fn patch_size(&self) -> usize;
    fn reconstruct_batch(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Scalar> Reconstructor<T> for Generator<T> {
    fn patch_size(&self) -> usize {
        self.config().input_size
    }

    fn reconstruct_batch(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.reconstruct(x)
    }
}

/// A scored patch with the images needed to recompute and explain it.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPatch<T> {
    pub id: PatchId,
    /// `φ = 1 − SSIM(x, x̂)`.
    pub score: f64,
    pub input: Image<T>,
    pub reconstruction: Image<T>,
    pub heatmap: Option<Image<T>>,
}

/// Scores a batch of patches with one forward pass.
pub fn score_patches<T: Scalar, M: Reconstructor<T> + ?Sized>(
    model: &M,
    ids: &[PatchId],
    patches: &[Image<T>],
    params: &SsimParams,
) -> Result<Vec<ScoredPatch<T>>> {
    if ids.len() != patches.len() {
        return Err(Error::Invalid(format!("{} ids for {} patches", ids.len(), patches.len())));
    }
    if patches.is_empty() {
        return Ok(Vec::new());
    }
    let s = model.patch_size();
    if let Some(p) = patches.iter().find(|p| p.width() != s || p.height() != s) {
        return Err(Error::Dimension(format!("patch is {}×{}, model expects {s}×{s}", p.width(), p.height())));
    }
    let recon = Image::from_batch_tensor(&model.reconstruct_batch(&Image::batch_tensor(patches)?)?)?;
    ids.iter()
        .zip(patches)
        .zip(recon)
        .map(|((id, x), r)| {
            let sim = ssim(x, &r, params)?.to_f64().unwrap();
            Ok(ScoredPatch { id: id.clone(), score: 1.0 - sim, input: x.clone(), reconstruction: r, heatmap: None })
        })
        .collect()
}

pub fn score_patch<T: Scalar, M: Reconstructor<T> + ?Sized>(
    model: &M,
    id: PatchId,
    x: &Image<T>,
    params: &SsimParams,
) -> Result<ScoredPatch<T>> {
    Ok(score_patches(model, &[id], std::slice::from_ref(x), params)?.remove(0))
}

/// Min-max normalized absolute residual.
pub fn heatmap<T: Scalar>(x: &Image<T>, x_hat: &Image<T>) -> Result<Image<T>> {
    if (x.width(), x.height()) != (x_hat.width(), x_hat.height()) {
        return Err(Error::Dimension("heatmap inputs differ in size".into()));
    }
    let residual = x.data().iter().zip(x_hat.data()).map(|(&a, &b)| (a - b).abs()).collect();
    Ok(minmax_normalize(&Image::from_vec_clamped(x.width(), x.height(), residual)?))
}

/// One threshold per region; a patch is rejected when its score is strictly
/// greater than its region's threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionThresholds {
    pub thresholds: Vec<f64>,
}

impl RegionThresholds {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        let t = RegionThresholds { thresholds };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.thresholds.len() != REGIONS {
            return Err(Error::Config(format!("expected {REGIONS} region thresholds, got {}", self.thresholds.len())));
        }
        if self.thresholds.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::Config("thresholds must be positive".into()));
        }
        Ok(())
    }

    pub fn get(&self, region: usize) -> Result<f64> {
        self.thresholds
            .get(region)
            .copied()
            .ok_or_else(|| Error::Config(format!("no threshold for region {region}")))
    }

    pub fn rejects(&self, region: usize, score: f64) -> Result<bool> {
        Ok(score > self.get(region)?)
    }
}

/// Outcome of [`classify_patch`].
#[derive(Clone, Debug, PartialEq)]
pub struct PatchVerdict<T> {
    pub reject: bool,
    /// Present only for rejected patches.
    pub heatmap: Option<Image<T>>,
}

pub fn classify_patch<T: Scalar>(scored: &ScoredPatch<T>, thresholds: &RegionThresholds) -> Result<PatchVerdict<T>> {
    let reject = thresholds.rejects(scored.id.region, scored.score)?;
    let heatmap = if reject { Some(heatmap(&scored.input, &scored.reconstruction)?) } else { None };
    Ok(PatchVerdict { reject, heatmap })
}

/// One labeled calibration observation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub region: usize,
    pub score: f64,
    pub defective: bool,
}

/// Balanced accuracy of the rule `defective ⇔ score > threshold`.
pub fn balanced_accuracy_at(samples: &[(f64, bool)], threshold: f64) -> f64 {
    let (mut tp, mut pos, mut tn, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for &(s, d) in samples {
        if d {
            pos += 1;
            tp += (s > threshold) as usize;
        } else {
            neg += 1;
            tn += (s <= threshold) as usize;
        }
    }
    0.5 * (tp as f64 / pos as f64 + tn as f64 / neg as f64)
}

/// Best threshold for one region: exhaustive sweep over midpoints between
/// consecutive distinct scores, lowest threshold on ties.
pub fn sweep_threshold(samples: &[(f64, bool)], region: usize) -> Result<(f64, f64)> {
    let err = |reason: &str| Error::Calibration { region, reason: reason.into() };
    if samples.iter().any(|(s, _)| !s.is_finite()) {
        return Err(err("non-finite score"));
    }
    let pos = samples.iter().filter(|(_, d)| *d).count();
    if pos == 0 || pos == samples.len() {
        return Err(err("calibration data holds a single class"));
    }
    let mut sorted: Vec<(f64, bool)> = samples.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let neg = samples.len() - pos;
    // Walking upward, every sample at or below the threshold is accepted.
    let (mut fn_, mut tn) = (0usize, 0usize);
    let mut best: Option<(f64, f64)> = None;
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == v {
            if sorted[i].1 {
                fn_ += 1;
            } else {
                tn += 1;
            }
            i += 1;
        }
        if i == sorted.len() {
            break;
        }
        let t = 0.5 * (v + sorted[i].0);
        let ba = 0.5 * ((pos - fn_) as f64 / pos as f64 + tn as f64 / neg as f64);
        if best.is_none_or(|(_, b)| ba > b) {
            best = Some((t, ba));
        }
    }
    best.ok_or_else(|| err("all scores are identical"))
}

/// Per-region sweep; every region needs both classes.
pub fn calibrate_thresholds(samples: &[CalibrationSample]) -> Result<RegionThresholds> {
    Ok(calibrate_regions(samples)?.0)
}

/// Thresholds plus the balanced accuracy each one reaches on `samples`.
pub fn calibrate_regions(samples: &[CalibrationSample]) -> Result<(RegionThresholds, Vec<f64>)> {
    if let Some(s) = samples.iter().find(|s| s.region >= REGIONS) {
        return Err(Error::Calibration { region: s.region, reason: "unknown region".into() });
    }
    let mut thresholds = Vec::with_capacity(REGIONS);
    let mut accuracy = Vec::with_capacity(REGIONS);
    for region in 0..REGIONS {
        let own: Vec<(f64, bool)> =
            samples.iter().filter(|s| s.region == region).map(|s| (s.score, s.defective)).collect();
        let (t, ba) = sweep_threshold(&own, region)?;
        if !(t > 0.0) {
            return Err(Error::Calibration { region, reason: format!("degenerate threshold {t}") });
        }
        thresholds.push(t);
        accuracy.push(ba);
    }
    Ok((RegionThresholds::new(thresholds)?, accuracy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Copy;
    impl Reconstructor<f64> for Copy {
        fn patch_size(&self) -> usize {
            16
        }
        fn reconstruct_batch(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
            Ok(x.clone())
        }
    }

    struct Blur;
    impl Reconstructor<f64> for Blur {
        fn patch_size(&self) -> usize {
            16
        }
        fn reconstruct_batch(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
            Ok(x.map(|v| 0.5 * v + 0.25))
        }
    }

    fn id(region: usize) -> PatchId {
        PatchId::new("s", 0, 0, 0, region).unwrap()
    }

    fn rand_img(rng: &mut ChaCha8Rng) -> Image<f64> {
        Image::from_vec(16, 16, (0..256).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn copying_model_scores_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = SsimParams { window: 7, ..SsimParams::default() };
        let s = score_patch(&Copy, id(0), &rand_img(&mut rng), &p).unwrap();
        assert!(s.score.abs() < 1e-12);
    }

    #[test]
    fn score_is_recomputable() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = SsimParams { window: 7, ..SsimParams::default() };
        for _ in 0..10 {
            let s = score_patch(&Blur, id(1), &rand_img(&mut rng), &p).unwrap();
            assert!(s.score >= 0.0 && s.score <= 2.0);
            let again = 1.0 - ssim(&s.input, &s.reconstruction, &p).unwrap();
            assert!((again - s.score).abs() < 1e-12);
        }
        assert!(matches!(
            score_patch(&Blur, id(0), &Image::filled(8, 8, 0.0), &p),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn heatmap_cases() {
        let x = Image::from_vec(2, 2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        assert!(heatmap(&x, &x).unwrap().data().iter().all(|&v| v == 0.0));
        let y = Image::from_vec(2, 2, vec![0.4, 0.4, 0.2, 0.4]).unwrap();
        assert_eq!(heatmap(&x, &y).unwrap().data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn hand_calibration_example() {
        let s = [(0.01, false), (0.02, false), (0.05, true), (0.06, true)];
        let (t, ba) = sweep_threshold(&s, 0).unwrap();
        assert!((t - 0.035).abs() < 1e-15);
        assert_eq!(ba, 1.0);
    }

    #[test]
    fn single_class_region_is_named() {
        let mut samples = Vec::new();
        for r in 0..REGIONS {
            samples.push(CalibrationSample { region: r, score: 0.1, defective: false });
            if r != 2 {
                samples.push(CalibrationSample { region: r, score: 0.3, defective: true });
            }
        }
        match calibrate_thresholds(&samples) {
            Err(Error::Calibration { region, .. }) => assert_eq!(region, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn strict_boundary_rule() {
        let t = RegionThresholds::new(vec![0.015589, 0.02, 0.046568, 0.029593]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_img(&mut rng);
        let mk = |score, region| ScoredPatch {
            id: id(region),
            score,
            input: x.clone(),
            reconstruction: x.map(|v| v * 0.9),
            heatmap: None,
        };
        assert!(!classify_patch(&mk(0.02, 1), &t).unwrap().reject);
        assert!(classify_patch(&mk(0.02, 0), &t).unwrap().reject);
        assert!(classify_patch(&mk(0.02, 0), &t).unwrap().heatmap.is_some());
        assert!(classify_patch(&mk(0.0, 3), &t).unwrap().heatmap.is_none());
        assert!(RegionThresholds::new(vec![0.1; 3]).is_err());
        assert!(RegionThresholds::new(vec![0.1, 0.0, 0.1, 0.1]).is_err());
    }

    proptest! {
        #[test]
        fn sweep_matches_bruteforce(scores in prop::collection::vec((0u32..50, any::<bool>()), 2..40)) {
            let samples: Vec<(f64, bool)> = scores.iter().map(|&(s, d)| (s as f64 / 100.0, d)).collect();
            let pos = samples.iter().filter(|s| s.1).count();
            let mut distinct: Vec<f64> = samples.iter().map(|s| s.0).collect();
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            prop_assume!(pos > 0 && pos < samples.len() && distinct.len() > 1);
            let (t, ba) = sweep_threshold(&samples, 0).unwrap();
            let mut best = (f64::NAN, -1.0);
            for w in distinct.windows(2) {
                let c = 0.5 * (w[0] + w[1]);
                let b = balanced_accuracy_at(&samples, c);
                if b > best.1 {
                    best = (c, b);
                }
            }
            prop_assert_eq!(t, best.0);
            prop_assert!((ba - best.1).abs() < 1e-12);
            let doubled: Vec<(f64, bool)> = samples.iter().chain(samples.iter()).copied().collect();
            prop_assert_eq!(sweep_threshold(&doubled, 0).unwrap().0, t);
        }

        #[test]
        fn heatmap_is_bounded_and_peaks_at_max_residual(a in prop::collection::vec(0.0f64..1.0, 16), b in prop::collection::vec(0.0f64..1.0, 16)) {
            let x = Image::from_vec(4, 4, a).unwrap();
            let y = Image::from_vec(4, 4, b).unwrap();
            let h = heatmap(&x, &y).unwrap();
            prop_assert!(h.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let res: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()).collect();
            let arg = (0..16).max_by(|&i, &j| res[i].total_cmp(&res[j])).unwrap();
            prop_assert!(h.data()[arg] == 1.0 || res.iter().all(|&r| r == res[0]));
        }

        #[test]
        fn raising_threshold_never_rejects_more(score in 0.0f64..1.0, t in 0.001f64..1.0, dt in 0.0f64..1.0) {
            let lo = RegionThresholds::new(vec![t; 4]).unwrap();
            let hi = RegionThresholds::new(vec![t + dt; 4]).unwrap();
            prop_assert!(hi.rejects(0, score).unwrap() <= lo.rejects(0, score).unwrap());
        }
    }
}
