//! Similarity and loss primitives shared by training and scoring.
//!
//! The slice kernels here are the single implementation: the image-level
//! functions call them directly and the autograd ops call them (plus their
//! adjoints) inside the training graph.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::Image;
use crate::scalar::{lit, Scalar};

/// Windowed SSIM configuration. SSIM is evaluated on the "valid" region:
/// only windows that fit entirely inside the image contribute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, dynamic_range: 1.0 }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::Config(format!("ssim window must be odd, got {}", self.window)));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0 && self.sigma > 0.0 && self.dynamic_range > 0.0) {
            return Err(Error::Config("ssim constants must be positive".into()));
        }
        Ok(())
    }

    pub fn c1<T: Scalar>(&self) -> T {
        lit((self.k1 * self.dynamic_range).powi(2))
    }

    pub fn c2<T: Scalar>(&self) -> T {
        lit((self.k2 * self.dynamic_range).powi(2))
    }

    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps<T: Scalar>(&self) -> Vec<T> {
        let c = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - c;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| lit(v / s)).collect()
    }

    pub(crate) fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        if h < self.window || w < self.window {
            return Err(Error::Dimension(format!(
                "image {}x{} smaller than ssim window {}",
                w, h, self.window
            )));
        }
        Ok(())
    }
}

/// Separable "valid" filtering of an h×w plane.
fn filter_valid<T: Scalar>(src: &[T], h: usize, w: usize, g: &[T]) -> Vec<T> {
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![T::zero(); h * ow];
    for r in 0..h {
        let row = &src[r * w..(r + 1) * w];
        let out = &mut tmp[r * ow..(r + 1) * ow];
        for (c, o) in out.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (j, &gj) in g.iter().enumerate() {
                acc += gj * row[c + j];
            }
            *o = acc;
        }
    }
    let mut out = vec![T::zero(); oh * ow];
    for r in 0..oh {
        for (i, &gi) in g.iter().enumerate() {
            let src_row = &tmp[(r + i) * ow..(r + i + 1) * ow];
            let dst = &mut out[r * ow..(r + 1) * ow];
            for (d, &s) in dst.iter_mut().zip(src_row) {
                *d += gi * s;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters an (h−k+1)×(w−k+1) map back onto h×w.
fn filter_valid_adjoint<T: Scalar>(grad: &[T], h: usize, w: usize, g: &[T], out: &mut [T], scale: T) {
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![T::zero(); h * ow];
    for r in 0..oh {
        let src = &grad[r * ow..(r + 1) * ow];
        for (i, &gi) in g.iter().enumerate() {
            let dst = &mut tmp[(r + i) * ow..(r + i + 1) * ow];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += gi * s;
            }
        }
    }
    for r in 0..h {
        let src = &tmp[r * ow..(r + 1) * ow];
        let dst = &mut out[r * w..(r + 1) * w];
        for (c, &s) in src.iter().enumerate() {
            let s = s * scale;
            for (j, &gj) in g.iter().enumerate() {
                dst[c + j] += gj * s;
            }
        }
    }
}

struct LocalStats<T> {
    mx: Vec<T>,
    my: Vec<T>,
    sxx: Vec<T>,
    syy: Vec<T>,
    sxy: Vec<T>,
}

fn local_stats<T: Scalar>(x: &[T], y: &[T], h: usize, w: usize, g: &[T]) -> LocalStats<T> {
    let mx = filter_valid(x, h, w, g);
    let my = filter_valid(y, h, w, g);
    let xx: Vec<T> = x.iter().map(|&v| v * v).collect();
    let yy: Vec<T> = y.iter().map(|&v| v * v).collect();
    let xy: Vec<T> = x.iter().zip(y).map(|(&a, &b)| a * b).collect();
    let mut sxx = filter_valid(&xx, h, w, g);
    let mut syy = filter_valid(&yy, h, w, g);
    let mut sxy = filter_valid(&xy, h, w, g);
    for i in 0..mx.len() {
        sxx[i] -= mx[i] * mx[i];
        syy[i] -= my[i] * my[i];
        sxy[i] -= mx[i] * my[i];
    }
    LocalStats { mx, my, sxx, syy, sxy }
}

/// Mean SSIM of one h×w plane pair.
pub(crate) fn ssim_plane<T: Scalar>(x: &[T], y: &[T], h: usize, w: usize, p: &SsimParams) -> T {
    let g = p.taps::<T>();
    let (c1, c2) = (p.c1::<T>(), p.c2::<T>());
    let st = local_stats(x, y, h, w, &g);
    let two = lit::<T>(2.0);
    let mut acc = T::zero();
    for i in 0..st.mx.len() {
        let a1 = two * st.mx[i] * st.my[i] + c1;
        let a2 = two * st.sxy[i] + c2;
        let b1 = st.mx[i] * st.mx[i] + st.my[i] * st.my[i] + c1;
        let b2 = st.sxx[i] + st.syy[i] + c2;
        acc += (a1 * a2) / (b1 * b2);
    }
    acc / T::from_usize(st.mx.len()).unwrap()
}

/// Accumulates `scale · ∂ mean-SSIM / ∂x` (and ∂y) of one plane pair.
pub(crate) fn ssim_plane_grad<T: Scalar>(
    x: &[T],
    y: &[T],
    h: usize,
    w: usize,
    p: &SsimParams,
    scale: T,
    gx: Option<&mut [T]>,
    gy: Option<&mut [T]>,
) {
    let g = p.taps::<T>();
    let (c1, c2) = (p.c1::<T>(), p.c2::<T>());
    let st = local_stats(x, y, h, w, &g);
    let m = st.mx.len();
    let inv = T::one() / T::from_usize(m).unwrap();
    let two = lit::<T>(2.0);

    let mut d_mx = vec![T::zero(); m];
    let mut d_my = vec![T::zero(); m];
    let mut d_sq = vec![T::zero(); m]; // ∂S/∂σx² = ∂S/∂σy²
    let mut d_sxy = vec![T::zero(); m];
    for i in 0..m {
        let (mx, my) = (st.mx[i], st.my[i]);
        let a1 = two * mx * my + c1;
        let a2 = two * st.sxy[i] + c2;
        let b1 = mx * mx + my * my + c1;
        let b2 = st.sxx[i] + st.syy[i] + c2;
        let s = (a1 * a2) / (b1 * b2);
        d_mx[i] = inv * (two * my * a2 / (b1 * b2) - two * mx * s / b1);
        d_my[i] = inv * (two * mx * a2 / (b1 * b2) - two * my * s / b1);
        d_sq[i] = -inv * s / b2;
        d_sxy[i] = inv * two * a1 / (b1 * b2);
    }

    let mut back_sq = vec![T::zero(); h * w];
    filter_valid_adjoint(&d_sq, h, w, &g, &mut back_sq, T::one());
    let mut back_xy = vec![T::zero(); h * w];
    filter_valid_adjoint(&d_sxy, h, w, &g, &mut back_xy, T::one());

    if let Some(gx) = gx {
        let a: Vec<T> = (0..m)
            .map(|i| d_mx[i] - two * st.mx[i] * d_sq[i] - st.my[i] * d_sxy[i])
            .collect();
        let mut back_a = vec![T::zero(); h * w];
        filter_valid_adjoint(&a, h, w, &g, &mut back_a, T::one());
        for i in 0..h * w {
            gx[i] += scale * (back_a[i] + two * x[i] * back_sq[i] + y[i] * back_xy[i]);
        }
    }
    if let Some(gy) = gy {
        let a: Vec<T> = (0..m)
            .map(|i| d_my[i] - two * st.my[i] * d_sq[i] - st.mx[i] * d_sxy[i])
            .collect();
        let mut back_a = vec![T::zero(); h * w];
        filter_valid_adjoint(&a, h, w, &g, &mut back_a, T::one());
        for i in 0..h * w {
            gy[i] += scale * (back_a[i] + two * y[i] * back_sq[i] + x[i] * back_xy[i]);
        }
    }
}

#[inline]
pub(crate) fn huber_elem<T: Scalar>(d: T, delta: T) -> T {
    let a = d.abs();
    if a <= delta {
        lit::<T>(0.5) * d * d
    } else {
        delta * (a - lit::<T>(0.5) * delta)
    }
}

#[inline]
pub(crate) fn huber_elem_grad<T: Scalar>(d: T, delta: T) -> T {
    if d.abs() <= delta {
        d
    } else {
        delta * d.signum()
    }
}

fn same_dims<T: Scalar>(x: &Image<T>, y: &Image<T>) -> Result<()> {
    if x.width() != y.width() || x.height() != y.height() {
        return Err(Error::Dimension(format!(
            "{}x{} vs {}x{}",
            x.width(),
            x.height(),
            y.width(),
            y.height()
        )));
    }
    Ok(())
}

/// Mean local SSIM over all valid windows.
pub fn ssim<T: Scalar>(x: &Image<T>, y: &Image<T>, params: &SsimParams) -> Result<T> {
    same_dims(x, y)?;
    params.validate()?;
    params.check_dims(x.height(), x.width())?;
    Ok(ssim_plane(x.data(), y.data(), x.height(), x.width(), params))
}

pub fn ssim_loss<T: Scalar>(x: &Image<T>, y: &Image<T>, params: &SsimParams) -> Result<T> {
    Ok(T::one() - ssim(x, y, params)?)
}

/// Mean Huber penalty of the residual `x − y`.
pub fn huber<T: Scalar>(x: &Image<T>, y: &Image<T>, delta: T) -> Result<T> {
    same_dims(x, y)?;
    let s: T = x.data().iter().zip(y.data()).map(|(&a, &b)| huber_elem(a - b, delta)).sum();
    Ok(s / T::from_usize(x.data().len()).unwrap())
}

/// Mean absolute difference.
pub fn l1<T: Scalar>(x: &[T], y: &[T]) -> Result<T> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Dimension(format!("l1 over {} vs {} elements", x.len(), y.len())));
    }
    let s: T = x.iter().zip(y).map(|(&a, &b)| (a - b).abs()).sum();
    Ok(s / T::from_usize(x.len()).unwrap())
}

/// Mean squared difference.
pub fn l2<T: Scalar>(x: &[T], y: &[T]) -> Result<T> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Dimension(format!("l2 over {} vs {} elements", x.len(), y.len())));
    }
    let s: T = x.iter().zip(y).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok(s / T::from_usize(x.len()).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Image<f64> {
        Image::from_vec(w, h, (0..w * h).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn self_similarity_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_image(24, 20, &mut rng);
        assert_abs_diff_eq!(ssim(&x, &x, &SsimParams::default()).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ssim_loss(&x, &x, &SsimParams::default()).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_black_vs_white_matches_closed_form() {
        let p = SsimParams::default();
        let x = Image::<f64>::filled(16, 16, 0.0);
        let y = Image::<f64>::filled(16, 16, 1.0);
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        // μx = 0, μy = 1, all variances zero.
        let want = (2.0 * 0.0 * 1.0 + c1) * (0.0 + c2) / ((0.0 + 1.0 + c1) * (0.0 + 0.0 + c2));
        assert_abs_diff_eq!(ssim(&x, &y, &p).unwrap(), want, epsilon = 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let x = Image::<f64>::filled(16, 16, 0.0);
        let y = Image::<f64>::filled(16, 17, 0.0);
        assert!(matches!(ssim(&x, &y, &SsimParams::default()), Err(Error::Dimension(_))));
        assert!(matches!(huber(&x, &y, 1.0), Err(Error::Dimension(_))));
        assert!(l1(&[0.0f64], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn window_larger_than_image_is_rejected() {
        let x = Image::<f64>::filled(8, 8, 0.5);
        assert!(ssim(&x, &x, &SsimParams::default()).is_err());
    }

    #[test]
    fn huber_hand_values() {
        let a = Image::<f64>::from_vec(1, 1, vec![0.1]).unwrap();
        let z = Image::<f64>::from_vec(1, 1, vec![0.0]).unwrap();
        assert_abs_diff_eq!(huber(&a, &z, 1.0).unwrap(), 0.005, epsilon = 1e-15);
        assert_abs_diff_eq!(huber_elem(2.0f64, 1.0), 1.5, epsilon = 1e-15);
        assert_eq!(huber(&a, &a, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn l1_l2_hand_values() {
        assert_eq!(l1(&[0.0f64, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(l2(&[0.0f64, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(l2(&[0.3f64, 0.2], &[0.3, 0.2]).unwrap(), 0.0);
    }

    fn fd_check(window: usize) {
        let p = SsimParams { window, sigma: 1.0, ..SsimParams::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (h, w) = (8, 8);
        let x = random_image(w, h, &mut rng);
        let y = random_image(w, h, &mut rng);
        let mut gx = vec![0.0; h * w];
        let mut gy = vec![0.0; h * w];
        ssim_plane_grad(x.data(), y.data(), h, w, &p, 1.0, Some(&mut gx), Some(&mut gy));
        let eps = 1e-6;
        for i in 0..h * w {
            for (which, g) in [(0, &gx), (1, &gy)] {
                let mut xp = x.data().to_vec();
                let mut yp = y.data().to_vec();
                let mut xm = x.data().to_vec();
                let mut ym = y.data().to_vec();
                if which == 0 {
                    xp[i] += eps;
                    xm[i] -= eps;
                } else {
                    yp[i] += eps;
                    ym[i] -= eps;
                }
                let fd = (ssim_plane(&xp, &yp, h, w, &p) - ssim_plane(&xm, &ym, h, w, &p)) / (2.0 * eps);
                let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
                assert!(err < 1e-4, "pixel {i} arg {which}: fd {fd} vs analytic {}", g[i]);
            }
        }
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        fd_check(5);
        fd_check(3);
    }

    #[test]
    fn huber_is_half_l2_inside_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let d: f64 = rng.gen_range(-1.0..1.0);
            assert_abs_diff_eq!(huber_elem(d, 1.0), 0.5 * d * d, epsilon = 1e-15);
        }
    }
}
