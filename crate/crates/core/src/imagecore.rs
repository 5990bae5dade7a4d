//! Grayscale rasters, frame stacks, rank filtering, patch extraction and the
//! nominal-only training augmentations.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Vials per strip.
pub const VIALS: usize = 5;
/// Logical regions per vial: flag, top body, liquid body, bottom.
pub const REGIONS: usize = 4;
pub const REGION_NAMES: [&str; REGIONS] = ["flag", "top_body", "liquid_body", "bottom"];

/// Single-channel raster, row-major, intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension("image must be nonempty".into()));
        }
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "{}x{} image needs {} pixels, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::Range(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Image { width, height, data })
    }

    /// Builds an image, clamping every value into `[0, 1]`.
    pub fn from_vec_clamped(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        let data = data.into_iter().map(|v| clamp01(v)).collect();
        Self::from_vec(width, height, data)
    }

    pub fn filled(width: usize, height: usize, v: T) -> Self {
        Image { width, height, data: vec![clamp01(v); width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        1
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    /// Applies `f` to every pixel; the result is clamped into `[0, 1]`.
    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Image { width: self.width, height: self.height, data: self.data.iter().map(|&v| clamp01(f(v))).collect() }
    }

    /// Rectangular crop.
    pub fn crop(&self, rect: Rect) -> Result<Self> {
        if rect.w == 0 || rect.h == 0 || rect.x + rect.w > self.width || rect.y + rect.h > self.height {
            return Err(Error::Geometry(format!(
                "rectangle {:?} outside {}x{} image",
                rect, self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(rect.w * rect.h);
        for y in rect.y..rect.y + rect.h {
            data.extend_from_slice(&self.data[y * self.width + rect.x..y * self.width + rect.x + rect.w]);
        }
        Ok(Image { width: rect.w, height: rect.h, data })
    }

    /// Bilinear resize with pixel-center alignment.
    pub fn resize(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                data.push(clamp01(self.sample_clamped(fx, fy)));
            }
        }
        Image { width, height, data }
    }

    fn sample_clamped(&self, fx: f64, fy: f64) -> T {
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax: T = lit(fx - x0 as f64);
        let ay: T = lit(fy - y0 as f64);
        let top = self.get(x0, y0) * (T::one() - ax) + self.get(x1, y0) * ax;
        let bot = self.get(x0, y1) * (T::one() - ax) + self.get(x1, y1) * ax;
        top * (T::one() - ay) + bot * ay
    }

    pub fn min_max(&self) -> (T, T) {
        self.data.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64().unwrap()).unwrap()).collect(),
        }
    }

    /// Batch tensor `[n, 1, h, w]`; all images must share dimensions.
    pub fn batch_tensor(images: &[Image<T>]) -> Result<Tensor<T>> {
        let first = images.first().ok_or_else(|| Error::Dimension("empty image batch".into()))?;
        let (w, h) = (first.width, first.height);
        let mut data = Vec::with_capacity(images.len() * w * h);
        for im in images {
            if im.width != w || im.height != h {
                return Err(Error::Dimension("batch images differ in size".into()));
            }
            data.extend_from_slice(&im.data);
        }
        Tensor::from_vec(&[images.len(), 1, h, w], data)
    }

    /// Splits a `[n, 1, h, w]` tensor into images, clamping to `[0, 1]`.
    pub fn from_batch_tensor(t: &Tensor<T>) -> Result<Vec<Image<T>>> {
        let s = t.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::Shape(format!("expected [n, 1, h, w], got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        t.data().chunks(h * w).map(|c| Image::from_vec_clamped(w, h, c.to_vec())).collect()
    }

    /// Loads an 8- or 16-bit grayscale PNG, scaling to `[0, 1]`.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Codec { path: path.to_path_buf(), source })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data: Vec<T> = match img {
            image::DynamicImage::ImageLuma16(buf) => {
                buf.into_raw().into_iter().map(|v| lit(v as f64 / 65535.0)).collect()
            }
            other => other.to_luma8().into_raw().into_iter().map(|v| lit(v as f64 / 255.0)).collect(),
        };
        Image::from_vec(w, h, data)
    }

    /// Writes an 8-bit grayscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_u8();
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, image::ExtendedColorType::L8)
            .map_err(|source| Error::Codec { path: path.to_path_buf(), source })
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v.to_f64().unwrap() * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }

    /// Quantizes to 8 bits and back, matching a PNG save/load cycle.
    pub fn quantized(&self) -> Self {
        Image {
            width: self.width,
            height: self.height,
            data: self.to_u8().into_iter().map(|v| lit(v as f64 / 255.0)).collect(),
        }
    }
}

#[inline]
fn clamp01<T: Scalar>(v: T) -> T {
    if v.is_nan() {
        T::zero()
    } else {
        v.max(T::zero()).min(T::one())
    }
}

/// Ordered frames of one acquisition.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameStack<T> {
    frames: Vec<Image<T>>,
    pub acquisition_id: String,
}

impl<T: Scalar> FrameStack<T> {
    pub fn new(frames: Vec<Image<T>>, acquisition_id: impl Into<String>) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::Dimension("frame stack must be nonempty".into()))?;
        let (w, h) = (first.width(), first.height());
        if frames.iter().any(|f| f.width() != w || f.height() != h) {
            return Err(Error::Dimension("frames in a stack must share dimensions".into()));
        }
        Ok(FrameStack { frames, acquisition_id: acquisition_id.into() })
    }

    pub fn frames(&self) -> &[Image<T>] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }
}

/// Per-pixel temporal rank filter: rank 1 is the minimum over frames, rank
/// `len` the maximum.
pub fn rank_filter<T: Scalar>(stack: &FrameStack<T>, rank: usize) -> Result<Image<T>> {
    let a = stack.len();
    if rank == 0 || rank > a {
        return Err(Error::Range(format!("rank {rank} outside [1, {a}]")));
    }
    let (w, h) = (stack.width(), stack.height());
    let mut buf = vec![T::zero(); a];
    let mut out = Vec::with_capacity(w * h);
    for i in 0..w * h {
        for (b, f) in buf.iter_mut().zip(stack.frames()) {
            *b = f.data()[i];
        }
        buf.sort_by(|x, y| x.partial_cmp(y).unwrap());
        out.push(buf[rank - 1]);
    }
    Image::from_vec(w, h, out)
}

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn contains(&self, px: usize, py: usize) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }
}

/// One named cell of the vial × region grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutCell {
    pub vial: usize,
    pub region: usize,
    #[serde(flatten)]
    pub rect: Rect,
}

/// Product-specific region geometry plus the patch resolution fed to the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionLayout {
    pub patch_size: usize,
    pub cells: Vec<LayoutCell>,
}

impl RegionLayout {
    /// Five equal vial columns split into horizontal bands with the given
    /// row boundaries (`band_edges` has `REGIONS + 1` increasing entries).
    pub fn columns(width: usize, band_edges: &[usize], patch_size: usize) -> Result<Self> {
        if band_edges.len() != REGIONS + 1 || band_edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Geometry(format!("need {} increasing band edges", REGIONS + 1)));
        }
        if width < VIALS {
            return Err(Error::Geometry("strip narrower than vial count".into()));
        }
        let vw = width / VIALS;
        let mut cells = Vec::with_capacity(VIALS * REGIONS);
        for vial in 0..VIALS {
            for region in 0..REGIONS {
                cells.push(LayoutCell {
                    vial,
                    region,
                    rect: Rect {
                        x: vial * vw,
                        y: band_edges[region],
                        w: vw,
                        h: band_edges[region + 1] - band_edges[region],
                    },
                });
            }
        }
        Ok(RegionLayout { patch_size, cells })
    }

    /// Uniform 5×4 grid over a `width`×`height` strip.
    pub fn uniform(width: usize, height: usize, patch_size: usize) -> Result<Self> {
        let edges: Vec<usize> = (0..=REGIONS).map(|i| i * height / REGIONS).collect();
        Self::columns(width, &edges, patch_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::Geometry("patch size must be positive".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.cells {
            if c.vial >= VIALS || c.region >= REGIONS {
                return Err(Error::Geometry(format!("cell ({}, {}) outside 5x4 grid", c.vial, c.region)));
            }
            if !seen.insert((c.vial, c.region)) {
                return Err(Error::Geometry(format!("duplicate cell ({}, {})", c.vial, c.region)));
            }
        }
        if seen.len() != VIALS * REGIONS {
            return Err(Error::Geometry(format!("layout has {} cells, need 20", seen.len())));
        }
        Ok(())
    }

    pub fn cell(&self, vial: usize, region: usize) -> Option<&LayoutCell> {
        self.cells.iter().find(|c| c.vial == vial && c.region == region)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let layout: RegionLayout =
            toml::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), reason: e.to_string() })?;
        layout.validate()?;
        Ok(layout)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("layout serializes")
    }
}

/// The 20 patches of one image, keyed by `(vial, region)`.
#[derive(Clone, Debug)]
pub struct PatchGrid<T> {
    pub patches: BTreeMap<(usize, usize), Image<T>>,
    pub source_width: usize,
    pub source_height: usize,
}

impl<T: Scalar> PatchGrid<T> {
    pub fn get(&self, vial: usize, region: usize) -> Option<&Image<T>> {
        self.patches.get(&(vial, region))
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Crops every layout cell and resizes it to `patch_size`².
pub fn extract_patches<T: Scalar>(image: &Image<T>, layout: &RegionLayout) -> Result<PatchGrid<T>> {
    layout.validate()?;
    let mut patches = BTreeMap::new();
    for c in &layout.cells {
        let crop = image.crop(c.rect)?;
        patches.insert((c.vial, c.region), crop.resize(layout.patch_size, layout.patch_size));
    }
    Ok(PatchGrid { patches, source_width: image.width(), source_height: image.height() })
}

/// Identity of one scored patch.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatchId {
    pub strip: String,
    pub run: usize,
    pub frame: usize,
    pub vial: usize,
    pub region: usize,
}

impl PatchId {
    pub fn new(strip: impl Into<String>, run: usize, frame: usize, vial: usize, region: usize) -> Result<Self> {
        if run > 9 || vial >= VIALS || region >= REGIONS {
            return Err(Error::Range(format!("patch index run={run} vial={vial} region={region}")));
        }
        Ok(PatchId { strip: strip.into(), run, frame, vial, region })
    }
}

/// One draw of the training augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    /// Rotation angle in radians, within `[−π/8, π/8]`.
    pub theta: f64,
    /// Upside-down flip (row `i` ↦ row `h−1−i`).
    pub vflip: bool,
}

pub const MAX_ROTATION: f64 = std::f64::consts::FRAC_PI_8;

impl AugmentDraw {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        AugmentDraw { theta: rng.gen_range(-MAX_ROTATION..=MAX_ROTATION), vflip: rng.gen_bool(0.5) }
    }
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Rotation about the image center (bilinear, reflected borders) followed by
/// an optional vertical flip.
pub fn augment_with<T: Scalar>(patch: &Image<T>, draw: AugmentDraw) -> Image<T> {
    let (w, h) = (patch.width(), patch.height());
    let rotated = if draw.theta == 0.0 {
        patch.clone()
    } else {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let (s, c) = draw.theta.sin_cos();
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                // inverse rotation: source = R(−θ)·(dest − center) + center
                let sx = c * dx + s * dy + cx;
                let sy = -s * dx + c * dy + cy;
                let x0 = sx.floor();
                let y0 = sy.floor();
                let ax: T = lit(sx - x0);
                let ay: T = lit(sy - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                let p = |xx: isize, yy: isize| patch.get(reflect(xx, w), reflect(yy, h));
                let top = p(x0, y0) * (T::one() - ax) + p(x0 + 1, y0) * ax;
                let bot = p(x0, y0 + 1) * (T::one() - ax) + p(x0 + 1, y0 + 1) * ax;
                data.push(clamp01(top * (T::one() - ay) + bot * ay));
            }
        }
        Image { width: w, height: h, data }
    };
    if !draw.vflip {
        return rotated;
    }
    let mut data = Vec::with_capacity(w * h);
    for y in (0..h).rev() {
        data.extend_from_slice(&rotated.data[y * w..(y + 1) * w]);
    }
    Image { width: w, height: h, data }
}

/// Random rotation in `[−π/8, π/8]` plus vertical flip with probability ½.
pub fn augment<T: Scalar, R: Rng + ?Sized>(patch: &Image<T>, rng: &mut R) -> Image<T> {
    augment_with(patch, AugmentDraw::sample(rng))
}

/// Min-max normalization into `[0, 1]`; a flat image maps to all zeros.
pub fn minmax_normalize<T: Scalar>(image: &Image<T>) -> Image<T> {
    let (lo, hi) = image.min_max();
    if hi <= lo {
        return Image::filled(image.width(), image.height(), T::zero());
    }
    let span = hi - lo;
    image.map(|v| (v - lo) / span)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(w: usize, h: usize, mut f: impl FnMut(usize, usize) -> f64) -> Image<f64> {
        let mut d = Vec::new();
        for y in 0..h {
            for x in 0..w {
                d.push(f(x, y));
            }
        }
        Image::from_vec(w, h, d).unwrap()
    }

    #[test]
    fn image_invariants_are_enforced() {
        assert!(matches!(Image::<f32>::from_vec(2, 2, vec![0.0; 3]), Err(Error::Dimension(_))));
        assert!(matches!(Image::<f32>::from_vec(1, 1, vec![1.5]), Err(Error::Range(_))));
        assert!(matches!(Image::<f32>::from_vec(1, 1, vec![f32::NAN]), Err(Error::Range(_))));
        assert_eq!(Image::<f32>::filled(3, 2, 0.2).channels(), 1);
    }

    #[test]
    fn rank_filter_cases() {
        let a = img(2, 1, |x, _| [0.2, 0.9][x]);
        let b = img(2, 1, |x, _| [0.8, 0.1][x]);
        let c = img(2, 1, |x, _| [0.5, 0.4][x]);
        let s = FrameStack::new(vec![a, b, c], "t").unwrap();
        assert_eq!(rank_filter(&s, 2).unwrap().data(), &[0.5, 0.4]);
        assert_eq!(rank_filter(&s, 1).unwrap().data(), &[0.2, 0.1]);
        assert_eq!(rank_filter(&s, 3).unwrap().data(), &[0.8, 0.9]);
        assert!(matches!(rank_filter(&s, 0), Err(Error::Range(_))));
        assert!(matches!(rank_filter(&s, 4), Err(Error::Range(_))));

        let same = img(3, 3, |x, y| (x + y) as f64 / 10.0);
        let s = FrameStack::new(vec![same.clone(); 16], "s").unwrap();
        for r in [1, 8, 16] {
            assert_eq!(rank_filter(&s, r).unwrap(), same);
        }
    }

    #[test]
    fn mismatched_frames_are_rejected() {
        let r = FrameStack::new(vec![Image::<f32>::filled(2, 2, 0.0), Image::filled(3, 2, 0.0)], "x");
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    proptest! {
        #[test]
        fn rank_filter_min_and_monotone(seed in 0u64..1000, w in 1usize..8, h in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frames: Vec<Image<f64>> = (0..4).map(|_| img(w, h, |_, _| rng.gen())).collect();
            let s = FrameStack::new(frames.clone(), "p").unwrap();
            let r1 = rank_filter(&s, 1).unwrap();
            for i in 0..w * h {
                let m = frames.iter().map(|f| f.data()[i]).fold(f64::INFINITY, f64::min);
                prop_assert_eq!(r1.data()[i], m);
            }
            let mut prev = r1;
            for r in 2..=4 {
                let cur = rank_filter(&s, r).unwrap();
                prop_assert!(prev.data().iter().zip(cur.data()).all(|(a, b)| a <= b));
                prev = cur;
            }
        }

        #[test]
        fn minmax_is_bounded_and_idempotent(v in proptest::collection::vec(0.0f64..=1.0, 2..64)) {
            let im = Image::from_vec(v.len(), 1, v).unwrap();
            let n = minmax_normalize(&im);
            prop_assert!(n.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
            let (lo, hi) = im.min_max();
            if hi > lo {
                let n2 = minmax_normalize(&n);
                for (a, b) in n.data().iter().zip(n2.data()) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn augment_stays_in_unit_range(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = img(16, 16, |x, y| if (x / 3 + y / 5) % 2 == 0 { 1.0 } else { 0.0 });
            let out = augment(&p, &mut rng);
            prop_assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn minmax_hand_values() {
        let im = Image::<f64>::from_vec(3, 1, vec![0.2, 0.4, 0.6]).unwrap();
        let n = minmax_normalize(&im);
        for (a, b) in n.data().iter().zip([0.0, 0.5, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let full = Image::from_vec(3, 1, vec![0.0, 0.3, 1.0]).unwrap();
        assert_eq!(minmax_normalize(&full), full);
        let flat = Image::<f64>::filled(4, 4, 0.7);
        assert!(minmax_normalize(&flat).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn extract_uniform_grid() {
        let strip = img(1280, 1024, |x, y| ((x / 256 + y / 256) % 3) as f64 / 2.0);
        let layout = RegionLayout::uniform(1280, 1024, 256).unwrap();
        let grid = extract_patches(&strip, &layout).unwrap();
        assert_eq!(grid.len(), 20);
        for ((v, r), p) in &grid.patches {
            assert_eq!((p.width(), p.height()), (256, 256));
            let want = ((v + r) % 3) as f64 / 2.0;
            assert!(p.data().iter().all(|&q| (q - want).abs() < 1e-12));
        }
    }

    #[test]
    fn extract_irregular_layout_always_twenty() {
        let strip = img(320, 200, |x, y| ((x * 7 + y * 3) % 11) as f64 / 10.0);
        let layout = RegionLayout::columns(320, &[0, 30, 70, 160, 200], 32).unwrap();
        let grid = extract_patches(&strip, &layout).unwrap();
        assert_eq!(grid.len(), 20);
        // Union of the rectangles covers every pixel exactly once.
        let mut cover = vec![0u8; 320 * 200];
        for c in &layout.cells {
            for y in c.rect.y..c.rect.y + c.rect.h {
                for x in c.rect.x..c.rect.x + c.rect.w {
                    cover[y * 320 + x] += 1;
                }
            }
        }
        assert!(cover.iter().all(|&c| c == 1));
        assert_eq!(extract_patches(&strip, &layout).unwrap().patches, grid.patches);
    }

    #[test]
    fn layout_outside_image_is_geometry_error() {
        let strip = img(100, 100, |_, _| 0.5);
        let layout = RegionLayout::uniform(200, 100, 16).unwrap();
        assert!(matches!(extract_patches(&strip, &layout), Err(Error::Geometry(_))));
    }

    #[test]
    fn layout_toml_round_trip() {
        let layout = RegionLayout::columns(160, &[0, 28, 56, 104, 128], 32).unwrap();
        let text = layout.to_toml();
        let back: RegionLayout = toml::from_str(&text).unwrap();
        assert_eq!(back, layout);
    }

    #[test]
    fn augment_identity_and_flip() {
        let p = img(256, 256, |x, y| ((x * 31 + y * 17) % 256) as f64 / 255.0);
        assert_eq!(augment_with(&p, AugmentDraw { theta: 0.0, vflip: false }), p);
        let f = augment_with(&p, AugmentDraw { theta: 0.0, vflip: true });
        for y in 0..256 {
            for x in 0..256 {
                assert_eq!(f.get(x, y), p.get(x, 255 - y));
            }
        }
    }

    #[test]
    fn augment_draw_statistics() {
        let mut flips = 0;
        for seed in 0..10_000u64 {
            let d = AugmentDraw::sample(&mut ChaCha8Rng::seed_from_u64(seed));
            assert!(d.theta.abs() <= MAX_ROTATION);
            flips += d.vflip as usize;
        }
        let rate = flips as f64 / 10_000.0;
        assert!((rate - 0.5).abs() <= 0.05, "flip rate {rate}");
    }

    #[test]
    fn constant_crop_resizes_to_constant() {
        let strip = img(64, 64, |x, _| if x < 32 { 0.25 } else { 0.75 });
        let p = strip.crop(Rect { x: 0, y: 0, w: 32, h: 20 }).unwrap().resize(256, 256);
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn png_round_trip_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let p = img(9, 7, |x, y| ((x * 13 + y * 29) % 256) as f64 / 255.0);
        p.save_png(&path).unwrap();
        let back = Image::<f64>::load_png(&path).unwrap();
        for (a, b) in p.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn png_16bit_is_scaled() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.png");
        let raw: Vec<u16> = vec![0, 65535, 32768, 1000];
        let buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> = image::ImageBuffer::from_raw(2, 2, raw.clone()).unwrap();
        buf.save(&path).unwrap();
        let back = Image::<f64>::load_png(&path).unwrap();
        for (a, &b) in back.data().iter().zip(&raw) {
            assert!((a - b as f64 / 65535.0).abs() < 1e-12);
        }
    }
}
