//! Perlin gradient noise and the training-time perturbation that overlays it
//! on nominal patches.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::Image;
use crate::scalar::{lit, Scalar};

/// Noise-field and perturbation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerlinParams {
    /// Candidate lattice cell counts across the image; one is drawn per axis.
    pub periods: Vec<usize>,
    pub min_octaves: usize,
    pub max_octaves: usize,
    pub persistence: f64,
    /// Noise region = pixels whose rescaled field value exceeds this.
    pub threshold: f64,
    /// Probability of perturbing a sample.
    pub q: f64,
}

impl Default for PerlinParams {
    fn default() -> Self {
        PerlinParams {
            periods: vec![2, 4, 8, 16],
            min_octaves: 1,
            max_octaves: 4,
            persistence: 0.5,
            threshold: 0.5,
            q: 0.75,
        }
    }
}

impl PerlinParams {
    pub fn validate(&self) -> Result<()> {
        if self.periods.is_empty() || self.periods.contains(&0) {
            return Err(Error::Config("perlin periods must be nonempty and positive".into()));
        }
        if self.min_octaves == 0 || self.max_octaves < self.min_octaves {
            return Err(Error::Config("octave count must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.q) {
            return Err(Error::Config(format!("q = {} outside [0, 1]", self.q)));
        }
        Ok(())
    }
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// One octave of gradient noise with `rx`×`ry` lattice cells over the image.
fn octave<R: Rng + ?Sized>(width: usize, height: usize, rx: usize, ry: usize, rng: &mut R) -> Vec<f64> {
    let grads: Vec<(f64, f64)> = (0..(rx + 1) * (ry + 1))
        .map(|_| {
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            (a.cos(), a.sin())
        })
        .collect();
    let g = |i: usize, j: usize| grads[j * (rx + 1) + i];
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let v = y as f64 * ry as f64 / height as f64;
        let j = (v.floor() as usize).min(ry - 1);
        let fv = v - j as f64;
        for x in 0..width {
            let u = x as f64 * rx as f64 / width as f64;
            let i = (u.floor() as usize).min(rx - 1);
            let fu = u - i as f64;
            let dot = |ci: usize, cj: usize, dx: f64, dy: f64| {
                let (gx, gy) = g(ci, cj);
                gx * dx + gy * dy
            };
            let n00 = dot(i, j, fu, fv);
            let n10 = dot(i + 1, j, fu - 1.0, fv);
            let n01 = dot(i, j + 1, fu, fv - 1.0);
            let n11 = dot(i + 1, j + 1, fu - 1.0, fv - 1.0);
            let (su, sv) = (fade(fu), fade(fv));
            let a = n00 + su * (n10 - n00);
            let b = n01 + su * (n11 - n01);
            out.push(a + sv * (b - a));
        }
    }
    out
}

/// Fractal gradient noise with explicit base periods and octave count,
/// min-max rescaled to `[0, 1]`.
pub fn perlin_field_with<T: Scalar, R: Rng + ?Sized>(
    width: usize,
    height: usize,
    base: (usize, usize),
    octaves: usize,
    persistence: f64,
    rng: &mut R,
) -> Result<Image<T>> {
    if width == 0 || height == 0 {
        return Err(Error::Dimension("perlin field must be nonempty".into()));
    }
    if octaves == 0 || base.0 == 0 || base.1 == 0 {
        return Err(Error::Config("perlin needs at least one octave and positive periods".into()));
    }
    let mut acc = vec![0.0; width * height];
    let mut amp = 1.0;
    for o in 0..octaves {
        let layer = octave(width, height, base.0 << o, base.1 << o, rng);
        for (a, l) in acc.iter_mut().zip(layer) {
            *a += amp * l;
        }
        amp *= persistence;
    }
    let (lo, hi) = acc.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if hi <= lo {
        return Ok(Image::filled(width, height, T::zero()));
    }
    Image::from_vec_clamped(width, height, acc.iter().map(|&v| lit::<T>((v - lo) / (hi - lo))).collect())
}

/// Smooth noise field in `[0, 1]` with randomly drawn periods and octaves.
pub fn perlin_field<T: Scalar, R: Rng + ?Sized>(
    width: usize,
    height: usize,
    params: &PerlinParams,
    rng: &mut R,
) -> Result<Image<T>> {
    params.validate()?;
    let px = params.periods[rng.gen_range(0..params.periods.len())];
    let py = params.periods[rng.gen_range(0..params.periods.len())];
    let octaves = rng.gen_range(params.min_octaves..=params.max_octaves);
    perlin_field_with(width, height, (px, py), octaves, params.persistence, rng)
}

/// 1 where `field > threshold`, else 0.
pub fn binarize_mask<T: Scalar>(field: &Image<T>, threshold: T) -> Image<T> {
    field.map(|v| if v > threshold { T::one() } else { T::zero() })
}

/// Output of [`perturb`].
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationResult<T> {
    pub x_star: Image<T>,
    pub mask: Image<T>,
    pub noise: Image<T>,
    pub beta: T,
    pub applied: bool,
}

/// The random part of a perturbation: noise region, isolated noise and blend.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationDraw<T> {
    pub mask: Image<T>,
    pub noise: Image<T>,
    pub beta: T,
}

impl<T: Scalar> PerturbationDraw<T> {
    /// Draws β ~ U(0.5, 1) and a Perlin noise region of the given size.
    pub fn sample<R: Rng + ?Sized>(width: usize, height: usize, params: &PerlinParams, rng: &mut R) -> Result<Self> {
        let beta = lit(rng.gen_range(0.5..=1.0));
        let field = perlin_field::<T, R>(width, height, params, rng)?;
        let mask = binarize_mask(&field, lit(params.threshold));
        // Noise painted on a black image, kept only inside the region.
        let noise = Image::from_vec(
            width,
            height,
            field.data().iter().zip(mask.data()).map(|(&f, &m)| f * m).collect(),
        )?;
        Ok(PerturbationDraw { mask, noise, beta })
    }
}

/// `X* = (1 − M)·X + (1 − β)·M·X + β·N`.
pub fn apply_perturbation<T: Scalar>(x: &Image<T>, draw: &PerturbationDraw<T>) -> Result<PerturbationResult<T>> {
    if (x.width(), x.height()) != (draw.mask.width(), draw.mask.height()) {
        return Err(Error::Dimension("perturbation size differs from image".into()));
    }
    let b = draw.beta;
    let data = x
        .data()
        .iter()
        .zip(draw.mask.data())
        .zip(draw.noise.data())
        .map(|((&xv, &m), &n)| (T::one() - m) * xv + (T::one() - b) * m * xv + b * n)
        .collect();
    Ok(PerturbationResult {
        x_star: Image::from_vec_clamped(x.width(), x.height(), data)?,
        mask: draw.mask.clone(),
        noise: draw.noise.clone(),
        beta: b,
        applied: true,
    })
}

/// Identity bundle: `X* = X`, `M = 0`, `N = 0`.
pub fn identity_perturbation<T: Scalar>(x: &Image<T>) -> PerturbationResult<T> {
    let zero = Image::filled(x.width(), x.height(), T::zero());
    PerturbationResult { x_star: x.clone(), mask: zero.clone(), noise: zero, beta: T::zero(), applied: false }
}

/// With probability `q` overlays Perlin noise, otherwise returns the identity
/// bundle.
pub fn perturb<T: Scalar, R: Rng + ?Sized>(
    x: &Image<T>,
    params: &PerlinParams,
    rng: &mut R,
) -> Result<PerturbationResult<T>> {
    params.validate()?;
    if !rng.gen_bool(params.q) {
        return Ok(identity_perturbation(x));
    }
    let draw = PerturbationDraw::sample(x.width(), x.height(), params, rng)?;
    apply_perturbation(x, &draw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lag1_autocorr(im: &Image<f64>) -> f64 {
        let d = im.data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var: f64 = d.iter().map(|v| (v - mean).powi(2)).sum();
        let mut cov = 0.0;
        for y in 0..im.height() {
            for x in 0..im.width() - 1 {
                cov += (im.get(x, y) - mean) * (im.get(x + 1, y) - mean);
            }
        }
        cov / var
    }

    #[test]
    fn field_is_deterministic_and_rescaled() {
        let p = PerlinParams::default();
        let a: Image<f64> = perlin_field(64, 48, &p, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b: Image<f64> = perlin_field(64, 48, &p, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let single: Image<f64> = perlin_field_with(32, 32, (1, 1), 1, 0.5, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let (lo, hi) = single.min_max();
        assert_eq!((lo, hi), (0.0, 1.0));
    }

    #[test]
    fn field_is_smoother_than_white_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let field: Image<f64> = perlin_field(64, 64, &PerlinParams::default(), &mut rng).unwrap();
        let white = Image::from_vec(64, 64, (0..64 * 64).map(|_| rng.gen::<f64>()).collect()).unwrap();
        assert!(lag1_autocorr(&field) > lag1_autocorr(&white));
    }

    #[test]
    fn binarize_edge_thresholds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = Image::from_vec(8, 8, (0..64).map(|_| rng.gen_range(0.01..1.0)).collect()).unwrap();
        assert!(binarize_mask(&f, 1.0).data().iter().all(|&v| v == 0.0));
        assert!(binarize_mask(&f, 0.0).data().iter().all(|&v| v == 1.0));
        let m = binarize_mask(&f, 0.5);
        for (a, b) in m.data().iter().zip(f.data()) {
            assert_eq!(*a, if *b > 0.5 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn q_zero_never_perturbs() {
        let p = PerlinParams { q: 0.0, ..PerlinParams::default() };
        let x = Image::<f64>::filled(32, 32, 0.4);
        for s in 0..50 {
            let r = perturb(&x, &p, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
            assert!(!r.applied);
            assert_eq!(r.x_star, x);
            assert!(r.mask.data().iter().chain(r.noise.data()).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn beta_one_replaces_masked_pixels_with_noise() {
        let x = Image::<f64>::filled(32, 32, 0.3);
        let mut draw = PerturbationDraw::sample(32, 32, &PerlinParams::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        draw.beta = 1.0;
        let r = apply_perturbation(&x, &draw).unwrap();
        for i in 0..32 * 32 {
            if r.mask.data()[i] == 1.0 {
                assert_eq!(r.x_star.data()[i], r.noise.data()[i]);
            } else {
                assert_eq!(r.x_star.data()[i], 0.3);
            }
        }
    }

    proptest! {
        #[test]
        fn blend_identity_holds(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Image::from_vec(24, 24, (0..576).map(|_| rng.gen::<f64>()).collect()).unwrap();
            let p = PerlinParams { q: 1.0, ..PerlinParams::default() };
            let r = perturb(&x, &p, &mut rng).unwrap();
            prop_assert!(r.applied);
            prop_assert!(r.beta >= 0.5 && r.beta <= 1.0);
            for i in 0..576 {
                let (xv, m, n) = (x.data()[i], r.mask.data()[i], r.noise.data()[i]);
                prop_assert!(m == 0.0 || m == 1.0);
                if m == 0.0 {
                    prop_assert_eq!(n, 0.0);
                    prop_assert_eq!(r.x_star.data()[i], xv);
                }
                let want = (1.0 - m) * xv + (1.0 - r.beta) * m * xv + r.beta * n;
                prop_assert!((r.x_star.data()[i] - want).abs() <= 1e-12);
                prop_assert!((0.0..=1.0).contains(&r.x_star.data()[i]));
            }
        }
    }
}
