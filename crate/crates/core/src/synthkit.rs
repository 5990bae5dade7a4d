//! Procedural vial-strip renderer, defect injector and train/calibration/test
//! kit builder.
//!
//! A strip is a backlit row of five vials. Each vial column is split into the
//! four logical bands (flag, neck/top body, liquid body, bottom). Nominal
//! variation comes from fill level, meniscus curvature, illumination, neck
//! droplets, sensor noise and bubbles that drift between frames. Defects are
//! static overlays confined to one vial × region cell.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{rank_filter, FrameStack, Image, PatchId, Rect, RegionLayout, REGIONS, VIALS};
use crate::scalar::{lit, Scalar};

/// Frames per production acquisition.
pub const FRAMES: usize = 16;
/// Frames kept for calibration and test acquisitions.
pub const TEST_FRAME_INDICES: [usize; 3] = [0, 7, 15];
/// Frame index used in [`PatchId`] for the per-pixel minimum image.
pub const RANK_MIN_INDEX: usize = FRAMES;
/// Frame index used in [`PatchId`] for the per-pixel maximum image.
pub const RANK_MAX_INDEX: usize = FRAMES + 1;

const BACKGROUND: f64 = 0.82;
const PLASTIC: f64 = 0.62;
const LIQUID: f64 = 0.52;
const WALL: f64 = 0.32;
const SURFACE: f64 = 0.36;

/// Distribution parameters of nominal strips. `seed` selects one strip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StripSpec {
    pub width: usize,
    pub height: usize,
    /// `REGIONS + 1` increasing row boundaries of the flag, neck, liquid and
    /// bottom bands.
    pub band_edges: Vec<usize>,
    /// Liquid surface position as a fraction of the liquid band height.
    pub liquid_level: (f64, f64),
    /// Meniscus rise at the wall, in pixels.
    pub meniscus_depth: (f64, f64),
    /// Bubbles per vial are drawn uniformly from `0..=max_bubbles`.
    pub max_bubbles: usize,
    pub bubble_radius: (f64, f64),
    /// Darkening of a bubble rim.
    pub bubble_contrast: f64,
    /// Chance that a vial neck carries a droplet in a given run.
    pub droplet_probability: f64,
    /// Peak relative illumination change across the strip.
    pub illumination_gradient: f64,
    /// Per-frame global gray-level offset (standard deviation).
    pub frame_jitter: f64,
    /// Per-pixel sensor noise (standard deviation).
    pub pixel_noise: f64,
    pub seed: u64,
}

impl Default for StripSpec {
    fn default() -> Self {
        StripSpec {
            width: 160,
            height: 128,
            band_edges: vec![0, 32, 64, 96, 128],
            liquid_level: (0.1, 0.35),
            meniscus_depth: (1.0, 3.0),
            max_bubbles: 2,
            bubble_radius: (1.2, 2.2),
            bubble_contrast: 0.06,
            droplet_probability: 0.3,
            illumination_gradient: 0.08,
            frame_jitter: 0.01,
            pixel_noise: 0.006,
            seed: 0,
        }
    }
}

impl StripSpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        StripSpec { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.band_edges;
        if e.len() != REGIONS + 1 || e.windows(2).any(|w| w[1] <= w[0]) || e[REGIONS] > self.height {
            return Err(Error::Config(format!("band_edges must hold {} increasing rows within the strip", REGIONS + 1)));
        }
        if self.width < VIALS * 8 || self.width % VIALS != 0 {
            return Err(Error::Config(format!("strip width {} must be a multiple of {VIALS} and ≥ {}", self.width, VIALS * 8)));
        }
        let ranges = [("liquid_level", self.liquid_level), ("meniscus_depth", self.meniscus_depth), ("bubble_radius", self.bubble_radius)];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi) {
                return Err(Error::Config(format!("{name} range ({lo}, {hi}) is invalid")));
            }
        }
        if self.liquid_level.1 >= 1.0 {
            return Err(Error::Config("liquid_level must stay inside the liquid band".into()));
        }
        if !(0.0..=1.0).contains(&self.droplet_probability) {
            return Err(Error::Config("droplet_probability outside [0, 1]".into()));
        }
        for (name, v) in [
            ("bubble_contrast", self.bubble_contrast),
            ("illumination_gradient", self.illumination_gradient),
            ("frame_jitter", self.frame_jitter),
            ("pixel_noise", self.pixel_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    /// The 5×4 cell rectangles, with patches cut at the native band size.
    pub fn layout(&self, patch_size: usize) -> Result<RegionLayout> {
        RegionLayout::columns(self.width, &self.band_edges, patch_size)
    }

    fn vial_width(&self) -> f64 {
        (self.width / VIALS) as f64
    }

    fn center(&self, vial: usize) -> f64 {
        (vial as f64 + 0.5) * self.vial_width() - 0.5
    }

    fn band(&self, y: f64) -> usize {
        (1..REGIONS).rev().find(|&r| y >= self.band_edges[r] as f64).unwrap_or(0)
    }

    /// Half-width of the vial outline at row `y` (0 outside the vial).
    fn half_width(&self, y: f64) -> f64 {
        let e: Vec<f64> = self.band_edges.iter().map(|&v| v as f64).collect();
        let full = 0.38 * self.vial_width();
        match self.band(y) {
            0 => {
                if y >= e[0] + 0.08 * (e[1] - e[0]) {
                    0.40 * self.vial_width()
                } else {
                    0.0
                }
            }
            1 => {
                let t = ((y - e[1]) / (e[2] - e[1])).clamp(0.0, 1.0);
                let s = t * t * (3.0 - 2.0 * t);
                0.14 * self.vial_width() + s * (full - 0.14 * self.vial_width())
            }
            2 => full,
            _ => {
                let start = e[3] + 0.45 * (e[4] - e[3]);
                let end = e[4] - 0.06 * (e[4] - e[3]);
                if y < start {
                    full
                } else if y >= end {
                    0.0
                } else {
                    let u = (y - start) / (end - start);
                    full * (1.0 - u * u).sqrt()
                }
            }
        }
    }
}

/// Per-strip draws shared by all runs.
struct StripDraw {
    level: [f64; VIALS],
    meniscus: [f64; VIALS],
    grad: (f64, f64),
}

impl StripDraw {
    fn new(spec: &StripSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5157_0000_0000_0001);
        let (e2, e3) = (spec.band_edges[2] as f64, spec.band_edges[3] as f64);
        let base = uniform(&mut rng, spec.liquid_level);
        let mut level = [0.0; VIALS];
        let mut meniscus = [0.0; VIALS];
        for v in 0..VIALS {
            // vials of one strip share a fill level up to a pixel
            level[v] = e2 + base * (e3 - e2) + rng.gen_range(-0.5..=0.5);
            meniscus[v] = uniform(&mut rng, spec.meniscus_depth);
        }
        let g = spec.illumination_gradient;
        let grad = (rng.gen_range(-g..=g), rng.gen_range(-g..=g));
        StripDraw { level, meniscus, grad }
    }

    fn surface(&self, spec: &StripSpec, vial: usize, x: f64) -> f64 {
        let hw = spec.half_width(self.level[vial]).max(1.0);
        let u = ((x - spec.center(vial)) / hw).clamp(-1.0, 1.0);
        self.level[vial] - self.meniscus[vial] * u * u
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Static structure of one strip: outline, walls, flag embossing, liquid.
fn render_structure(spec: &StripSpec, draw: &StripDraw) -> Vec<f64> {
    let (w, h) = (spec.width, spec.height);
    let vw = spec.vial_width();
    let e1 = spec.band_edges[1] as f64;
    let mut out = vec![BACKGROUND; w * h];
    for y in 0..h {
        let yf = y as f64;
        let hw = spec.half_width(yf);
        if hw <= 0.0 {
            continue;
        }
        let band = spec.band(yf);
        for x in 0..w {
            let vial = (x as f64 / vw) as usize;
            let cx = spec.center(vial);
            let d = (x as f64 - cx).abs();
            if d > hw {
                continue;
            }
            let mut v = PLASTIC;
            if band >= 2 && yf > draw.surface(spec, vial, x as f64) {
                v = LIQUID;
            }
            if band >= 1 && (yf - draw.surface(spec, vial, x as f64)).abs() < 0.7 && band == spec.band(draw.level[vial]) {
                v = SURFACE;
            }
            if band == 0 {
                let t = (yf - spec.band_edges[0] as f64) / (e1 - spec.band_edges[0] as f64);
                let stroke = [0.35, 0.5, 0.65].iter().any(|&s| (t - s).abs() < 0.03);
                if stroke && d < 0.25 * vw {
                    v = 0.45;
                }
                if e1 - yf < 1.0 {
                    v = WALL;
                }
            }
            // dark rim where the wall is seen edge-on
            let rim = ((d - (hw - 1.5)) / 1.5).clamp(0.0, 1.0);
            out[y * w + x] = v + (WALL - v) * rim;
        }
    }
    out
}

struct Bubble {
    vial: usize,
    x0: f64,
    y0: f64,
    amp: f64,
    phase: f64,
    rise: f64,
    r: f64,
}

struct Droplet {
    x: f64,
    y: f64,
    r: f64,
}

struct RunDraw {
    bubbles: Vec<Bubble>,
    droplets: Vec<Droplet>,
    grad: (f64, f64),
}

impl RunDraw {
    fn new(spec: &StripSpec, strip: &StripDraw, run_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
        let e = &spec.band_edges;
        let bottom = e[3] as f64;
        let mut bubbles = Vec::new();
        let mut droplets = Vec::new();
        for vial in 0..VIALS {
            let cx = spec.center(vial);
            for _ in 0..rng.gen_range(0..=spec.max_bubbles) {
                let r = uniform(&mut rng, spec.bubble_radius);
                let span = (0.38 * spec.vial_width() - r - 2.0).max(0.0);
                bubbles.push(Bubble {
                    vial,
                    x0: cx + rng.gen_range(-span..=span),
                    y0: rng.gen_range(strip.level[vial] + r + 1.0..(bottom - r - 1.0).max(strip.level[vial] + r + 2.0)),
                    amp: rng.gen_range(0.5..2.5),
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                    rise: rng.gen_range(0.0..0.6),
                    r,
                });
            }
            if rng.gen_bool(spec.droplet_probability) {
                let y = rng.gen_range(e[1] as f64 + 4.0..e[2] as f64 - 4.0);
                let span = (spec.half_width(y) - 3.0).max(0.0);
                droplets.push(Droplet { x: cx + rng.gen_range(-span..=span), y, r: rng.gen_range(0.8..1.4) });
            } else {
                // keep the stream aligned whether or not a droplet is drawn
                let _: (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
            }
        }
        let g = 0.25 * spec.illumination_gradient;
        let grad = (strip.grad.0 + rng.gen_range(-g..=g), strip.grad.1 + rng.gen_range(-g..=g));
        RunDraw { bubbles, droplets, grad }
    }
}

/// Bubble center in frame `t`: a half swing sideways while rising, held
/// below the meniscus and inside the wall.
fn bubble_center(spec: &StripSpec, strip: &StripDraw, b: &Bubble, t: usize) -> (f64, f64) {
    let tf = t as f64;
    let cx = spec.center(b.vial);
    let lim = (0.38 * spec.vial_width() - b.r - 2.0).max(0.0);
    let x = (b.x0 + b.amp * (std::f64::consts::PI * tf / (FRAMES - 1) as f64 + b.phase).sin()).clamp(cx - lim, cx + lim);
    let y = (b.y0 - b.rise * tf).max(strip.surface(spec, b.vial, x) + b.r + 0.5);
    (x, y)
}

fn splat(buf: &mut [f64], w: usize, h: usize, cx: f64, cy: f64, reach: f64, mut f: impl FnMut(f64) -> f64) {
    let x0 = (cx - reach).floor().max(0.0) as usize;
    let y0 = (cy - reach).floor().max(0.0) as usize;
    let x1 = ((cx + reach).ceil() as usize).min(w.saturating_sub(1));
    let y1 = ((cy + reach).ceil() as usize).min(h.saturating_sub(1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            if d <= reach {
                buf[y * w + x] += f(d);
            }
        }
    }
}

fn frame_seed(run_seed: u64, frame: usize) -> u64 {
    run_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (frame as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

fn finish<T: Scalar>(spec: &StripSpec, buf: Vec<f64>) -> Image<T> {
    let data = buf.into_iter().map(|v| lit(((v.clamp(0.0, 1.0) * 255.0).round()) / 255.0)).collect();
    Image::from_vec(spec.width, spec.height, data).expect("renderer produces valid images")
}

/// Renders the listed frames (indices into the 16-frame series) of one
/// nominal acquisition. Any subset equals the same frames of the full series.
pub fn render_frames<T: Scalar>(spec: &StripSpec, run_seed: u64, frames: &[usize]) -> Result<Vec<Image<T>>> {
    spec.validate()?;
    if let Some(&f) = frames.iter().find(|&&f| f >= FRAMES) {
        return Err(Error::Range(format!("frame {f} outside 0..{FRAMES}")));
    }
    let strip = StripDraw::new(spec);
    let run = RunDraw::new(spec, &strip, run_seed);
    let base = render_structure(spec, &strip);
    let (w, h) = (spec.width, spec.height);
    let mut with_droplets = base;
    for d in &run.droplets {
        splat(&mut with_droplets, w, h, d.x, d.y, d.r + 0.8, |dist| if dist < d.r { 0.10 } else { -0.05 });
    }
    let mut out = Vec::with_capacity(frames.len());
    for &t in frames {
        let mut buf = with_droplets.clone();
        for b in &run.bubbles {
            let (bx, by) = bubble_center(spec, &strip, b, t);
            let c = spec.bubble_contrast;
            splat(&mut buf, w, h, bx, by, b.r + 0.8, |d| {
                let ring = 1.0 - ((d - b.r).abs() / 0.8).min(1.0);
                if d < b.r - 0.8 {
                    0.5 * c
                } else {
                    -c * ring
                }
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(run_seed, t));
        let offset = if spec.frame_jitter > 0.0 { Normal::new(0.0, spec.frame_jitter).unwrap().sample(&mut rng) } else { 0.0 };
        let noise = Normal::new(0.0, spec.pixel_noise.max(f64::MIN_POSITIVE)).unwrap();
        for y in 0..h {
            for x in 0..w {
                let gain = 1.0 + run.grad.0 * (x as f64 / w as f64 - 0.5) + run.grad.1 * (y as f64 / h as f64 - 0.5);
                let n = if spec.pixel_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                let v = &mut buf[y * w + x];
                *v = *v * gain + offset + n;
            }
        }
        out.push(finish(spec, buf));
    }
    Ok(out)
}

/// The 16-frame nominal acquisition for `(spec, run_seed)`.
pub fn gen_nominal_strip<T: Scalar>(spec: &StripSpec, run_seed: u64) -> Result<FrameStack<T>> {
    let frames: Vec<usize> = (0..FRAMES).collect();
    FrameStack::new(render_frames(spec, run_seed, &frames)?, format!("{:016x}/{run_seed:016x}", spec.seed))
}

/// Defect taxonomy of the inspected product.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    StuckParticle,
    BlackSpot,
    Deformation,
    Scratch,
    Foam,
    Burn,
}

impl DefectKind {
    pub const ALL: [DefectKind; 6] = [
        DefectKind::StuckParticle,
        DefectKind::BlackSpot,
        DefectKind::Deformation,
        DefectKind::Scratch,
        DefectKind::Foam,
        DefectKind::Burn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DefectKind::StuckParticle => "stuck_particle",
            DefectKind::BlackSpot => "black_spot",
            DefectKind::Deformation => "deformation",
            DefectKind::Scratch => "scratch",
            DefectKind::Foam => "foam",
            DefectKind::Burn => "burn",
        }
    }

    /// Regions where the kit builder places this kind.
    pub fn typical_regions(self) -> &'static [usize] {
        match self {
            DefectKind::StuckParticle | DefectKind::Scratch => &[0, 1, 2, 3],
            DefectKind::BlackSpot => &[1, 2, 3],
            DefectKind::Deformation => &[1, 3],
            DefectKind::Foam => &[2],
            DefectKind::Burn => &[0, 1],
        }
    }
}

impl FromStr for DefectKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DefectKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown defect kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefectSpec {
    pub kind: DefectKind,
    pub vial: usize,
    pub region: usize,
    /// Severity in `[0, 1]`; 0 leaves the image untouched.
    pub magnitude: f64,
    pub seed: u64,
}

impl DefectSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vial >= VIALS || self.region >= REGIONS {
            return Err(Error::Invalid(format!("defect cell ({}, {}) outside the 5x4 grid", self.vial, self.region)));
        }
        if !(0.0..=1.0).contains(&self.magnitude) {
            return Err(Error::Invalid(format!("defect magnitude {} outside [0, 1]", self.magnitude)));
        }
        Ok(())
    }
}

/// Per-pixel coverage and target intensity of a static defect.
struct Overlay {
    w: usize,
    alpha: Vec<f64>,
    target: Vec<f64>,
}

impl Overlay {
    fn paint(&mut self, cell: Rect, x: usize, y: usize, a: f64, target: f64) {
        if !cell.contains(x, y) || a <= 0.0 {
            return;
        }
        let i = y * self.w + x;
        if a >= self.alpha[i] {
            self.alpha[i] = a.min(1.0);
            self.target[i] = target;
        }
    }

    fn disc(&mut self, cell: Rect, cx: f64, cy: f64, r: f64, a: f64, target: f64) {
        let (x0, x1) = ((cx - r - 1.0).floor().max(0.0) as usize, (cx + r + 1.0).ceil().max(0.0) as usize);
        let (y0, y1) = ((cy - r - 1.0).floor().max(0.0) as usize, (cy + r + 1.0).ceil().max(0.0) as usize);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                // one-pixel soft edge
                self.paint(cell, x, y, a * (r + 0.5 - d).clamp(0.0, 1.0), target);
            }
        }
    }

    fn ring(&mut self, cell: Rect, cx: f64, cy: f64, r: f64, a: f64, target: f64) {
        let reach = r + 1.0;
        let (x0, x1) = ((cx - reach).floor().max(0.0) as usize, (cx + reach).ceil().max(0.0) as usize);
        let (y0, y1) = ((cy - reach).floor().max(0.0) as usize, (cy + reach).ceil().max(0.0) as usize);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                self.paint(cell, x, y, a * (1.0 - (d - r).abs()).clamp(0.0, 1.0), target);
            }
        }
    }
}

fn build_overlay(spec: &StripSpec, defect: &DefectSpec) -> Result<Overlay> {
    let layout = spec.layout(1)?;
    let cell = layout.cell(defect.vial, defect.region).expect("validated cell").rect;
    let strip = StripDraw::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(defect.seed);
    let m = defect.magnitude;
    let cx = spec.center(defect.vial);
    let (top, bottom) = (cell.y as f64, (cell.y + cell.h) as f64 - 1.0);
    let mut ov = Overlay { w: spec.width, alpha: vec![0.0; spec.width * spec.height], target: vec![0.0; spec.width * spec.height] };
    // a row inside the cell where the vial is at least `need` wide
    let pick_point = |rng: &mut ChaCha8Rng, margin: f64| -> (f64, f64) {
        for _ in 0..64 {
            let y = rng.gen_range(top + margin..=(bottom - margin).max(top + margin));
            let span = spec.half_width(y) - margin - 1.5;
            if span > 0.0 {
                return (cx + rng.gen_range(-span..=span), y);
            }
        }
        (cx, 0.5 * (top + bottom))
    };
    match defect.kind {
        DefectKind::StuckParticle => {
            let (x, y) = pick_point(&mut rng, 3.0);
            let r = 1.0 + 1.5 * m + rng.gen_range(0.0..0.5);
            ov.disc(cell, x, y, r, 0.95, 0.08);
        }
        DefectKind::BlackSpot => {
            let (x, y) = pick_point(&mut rng, 5.0);
            let r = 2.0 + 2.0 * m + rng.gen_range(0.0..1.0);
            ov.disc(cell, x, y, r, 0.85, 0.12);
            ov.ring(cell, x, y, r + 1.0, 0.4, 0.3);
        }
        DefectKind::Deformation => {
            let left = rng.gen_bool(0.5);
            let mid = rng.gen_range(top + 6.0..=bottom - 6.0);
            let half_span = rng.gen_range(5.0..8.0);
            let depth = 2.0 + 4.0 * m;
            for y in (top as usize)..=(bottom as usize) {
                let u = (y as f64 - mid) / half_span;
                if u.abs() >= 1.0 {
                    continue;
                }
                let hw = spec.half_width(y as f64);
                if hw < depth + 2.0 {
                    continue;
                }
                let dent = depth * (1.0 - u * u);
                for x in 0..spec.width {
                    let dx = x as f64 - cx;
                    let outward = if left { -dx } else { dx };
                    if outward < 0.0 {
                        continue;
                    }
                    let new_edge = hw - dent;
                    if outward > new_edge + 0.5 && outward <= hw + 0.5 {
                        ov.paint(cell, x, y, 1.0, BACKGROUND);
                    } else if outward > new_edge - 1.5 && outward <= new_edge + 0.5 {
                        ov.paint(cell, x, y, 1.0, WALL * 0.8);
                    }
                }
            }
        }
        DefectKind::Scratch => {
            let (x, y) = pick_point(&mut rng, 4.0);
            let len = 8.0 + 10.0 * m;
            let ang: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let (dx, dy) = (ang.cos(), ang.sin());
            let steps = (len * 3.0) as usize;
            for s in 0..=steps {
                let t = s as f64 / steps as f64 - 0.5;
                let (px, py) = (x + t * len * dx, y + t * len * dy);
                if (px - cx).abs() > spec.half_width(py) - 1.0 {
                    continue;
                }
                ov.disc(cell, px, py, 0.45, 0.85, 0.18);
            }
        }
        DefectKind::Foam => {
            let hw = 0.38 * spec.vial_width();
            let sy = strip.level[defect.vial].clamp(top, bottom);
            let count = 6 + (6.0 * m) as usize + rng.gen_range(0..3);
            for _ in 0..count {
                let x = cx + rng.gen_range(-(hw - 3.0)..=(hw - 3.0));
                let y = (sy + rng.gen_range(0.0..8.0)).min(bottom - 1.0);
                let r = rng.gen_range(1.0..2.0);
                ov.disc(cell, x, y, r - 0.5, 0.5, 0.75);
                ov.ring(cell, x, y, r, 0.9, 0.22);
            }
        }
        DefectKind::Burn => {
            let (x, y) = pick_point(&mut rng, 5.0);
            let (rx, ry) = (3.0 + 3.0 * m, 2.5 + 2.0 * m + rng.gen_range(0.0..1.0));
            let lumps: Vec<(f64, f64, f64)> =
                (0..5).map(|_| (rng.gen_range(-rx..rx), rng.gen_range(-ry..ry), rng.gen_range(0.3..1.0))).collect();
            for py in (y - ry - 2.0).max(0.0) as usize..=(y + ry + 2.0) as usize {
                for px in (x - rx - 2.0).max(0.0) as usize..=(x + rx + 2.0) as usize {
                    let (u, v) = ((px as f64 - x) / rx, (py as f64 - y) / ry);
                    let e = 1.0 - (u * u + v * v);
                    if e <= 0.0 || (px as f64 - cx).abs() > spec.half_width(py as f64) {
                        continue;
                    }
                    let tex: f64 = lumps
                        .iter()
                        .map(|&(lx, ly, s)| s * (-((px as f64 - x - lx).powi(2) + (py as f64 - y - ly).powi(2)) / 4.0).exp())
                        .sum();
                    ov.paint(cell, px, py, (0.5 * e.sqrt() + 0.4 * tex).min(0.9), 0.2);
                }
            }
        }
    }
    Ok(ov)
}

fn apply_overlay<T: Scalar>(frame: &Image<T>, ov: &Overlay, m: f64) -> Image<T> {
    let data = frame
        .data()
        .iter()
        .zip(ov.alpha.iter().zip(&ov.target))
        .map(|(&v, (&a, &t))| {
            if a == 0.0 {
                return v;
            }
            let k = m * a;
            let out = (1.0 - k) * v.to_f64().unwrap() + k * t;
            lit((out.clamp(0.0, 1.0) * 255.0).round() / 255.0)
        })
        .collect();
    Image::from_vec(frame.width(), frame.height(), data).expect("same geometry")
}

/// Renders a static defect into every frame of `stack`. Pixels outside the
/// defect's vial × region cell are never touched.
pub fn inject_defect<T: Scalar>(stack: &FrameStack<T>, spec: &StripSpec, defect: &DefectSpec) -> Result<FrameStack<T>> {
    defect.validate()?;
    spec.validate()?;
    if stack.width() != spec.width || stack.height() != spec.height {
        return Err(Error::Dimension(format!(
            "stack is {}x{}, spec is {}x{}",
            stack.width(),
            stack.height(),
            spec.width,
            spec.height
        )));
    }
    if defect.magnitude == 0.0 {
        return Ok(stack.clone());
    }
    let ov = build_overlay(spec, defect)?;
    let frames = stack.frames().iter().map(|f| apply_overlay(f, &ov, defect.magnitude)).collect();
    FrameStack::new(frames, stack.acquisition_id.clone())
}

/// Image counts per split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KitPlan {
    /// Nominal training strips.
    pub train: usize,
    /// Acquisitions rendered per training strip.
    pub train_runs: usize,
    pub cal_defective: usize,
    pub cal_nominal: usize,
    pub test_defective: usize,
    pub test_nominal: usize,
    pub magnitude: (f64, f64),
    /// Chance that a defective strip carries a second defect.
    pub second_defect: f64,
}

impl Default for KitPlan {
    fn default() -> Self {
        KitPlan {
            train: 100,
            train_runs: 10,
            cal_defective: 40,
            cal_nominal: 40,
            test_defective: 141,
            test_nominal: 120,
            magnitude: (0.6, 1.0),
            second_defect: 0.2,
        }
    }
}

impl KitPlan {
    /// About 50k training patches (70 strips × 2 runs × 18 images × 20).
    /// Strip-level variation (fill level, meniscus, lighting) needs many
    /// distinct strips; extra runs of the same strip add little.
    pub fn desk() -> Self {
        KitPlan { train: 70, train_runs: 2, ..KitPlan::default() }
    }

    /// About 2k training patches and small evaluation splits.
    pub fn smoke() -> Self {
        KitPlan {
            train: 6,
            train_runs: 1,
            cal_defective: 8,
            cal_nominal: 8,
            test_defective: 6,
            test_nominal: 6,
            ..KitPlan::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.magnitude;
        if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
            return Err(Error::Config(format!("magnitude range ({lo}, {hi}) must lie in [0, 1]")));
        }
        if self.train > 0 && self.train_runs == 0 {
            return Err(Error::Config("train_runs must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.second_defect) {
            return Err(Error::Config("second_defect outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn train_patches(&self) -> usize {
        self.train * self.train_runs * (FRAMES + 2) * VIALS * REGIONS
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Cal,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Cal, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Cal => "cal",
            Split::Test => "test",
        }
    }
}

/// One image of an acquisition on disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ImageKind {
    Frame(usize),
    RankMin,
    RankMax,
}

impl ImageKind {
    pub fn file_name(self) -> String {
        match self {
            ImageKind::Frame(i) => format!("frame_{i:02}.png"),
            ImageKind::RankMin => "rank_min.png".into(),
            ImageKind::RankMax => "rank_max.png".into(),
        }
    }

    /// Index used in [`PatchId::frame`].
    pub fn index(self) -> usize {
        match self {
            ImageKind::Frame(i) => i,
            ImageKind::RankMin => RANK_MIN_INDEX,
            ImageKind::RankMax => RANK_MAX_INDEX,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StripEntry {
    pub id: String,
    pub split: Split,
    pub defective: bool,
    pub defects: Vec<DefectSpec>,
    pub strip_seed: u64,
    pub run_seeds: Vec<u64>,
}

impl StripEntry {
    /// `(vial, region)` cells carrying a defect.
    pub fn defect_cells(&self) -> Vec<(usize, usize)> {
        let mut c: Vec<_> = self.defects.iter().map(|d| (d.vial, d.region)).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Images stored per acquisition: the full series plus both ranked
    /// images for training, three frames otherwise.
    pub fn images(&self) -> Vec<ImageKind> {
        match self.split {
            Split::Train => (0..FRAMES).map(ImageKind::Frame).chain([ImageKind::RankMin, ImageKind::RankMax]).collect(),
            _ => TEST_FRAME_INDICES.iter().map(|&i| ImageKind::Frame(i)).collect(),
        }
    }
}

/// Ground truth and seeds for every strip of a kit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KitManifest {
    pub seed: u64,
    pub plan: KitPlan,
    pub spec: StripSpec,
    pub strips: Vec<StripEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Draws the manifest of a kit. Strip ids carry the split name, so splits
/// are disjoint by construction; training strips are always nominal.
pub fn build_kit(plan: &KitPlan, spec: &StripSpec, seed: u64) -> Result<KitManifest> {
    plan.validate()?;
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut strips = Vec::new();
    let groups = [
        (Split::Train, 0, plan.train, plan.train_runs),
        (Split::Cal, plan.cal_defective, plan.cal_nominal, 10),
        (Split::Test, plan.test_defective, plan.test_nominal, 10),
    ];
    for (split, defective, nominal, runs) in groups {
        for i in 0..defective + nominal {
            let is_defective = i < defective;
            let strip_seed = rng.gen();
            let run_seeds = (0..runs).map(|_| rng.gen()).collect();
            let mut defects = Vec::new();
            if is_defective {
                let n = if rng.gen_bool(plan.second_defect) { 2 } else { 1 };
                for k in 0..n {
                    // round-robin over regions so calibration sees every band
                    let region = if k == 0 { i % REGIONS } else { rng.gen_range(0..REGIONS) };
                    let kinds: Vec<DefectKind> =
                        DefectKind::ALL.into_iter().filter(|d| d.typical_regions().contains(&region)).collect();
                    defects.push(DefectSpec {
                        kind: kinds[rng.gen_range(0..kinds.len())],
                        vial: rng.gen_range(0..VIALS),
                        region,
                        magnitude: uniform(&mut rng, plan.magnitude),
                        seed: rng.gen(),
                    });
                }
            }
            strips.push(StripEntry {
                id: format!("{}-{i:04}", split.name()),
                split,
                defective: is_defective,
                defects,
                strip_seed,
                run_seeds,
            });
        }
    }
    Ok(KitManifest { seed, plan: plan.clone(), spec: spec.clone(), strips })
}

impl KitManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &StripEntry> {
        self.strips.iter().filter(move |s| s.split == split)
    }

    pub fn strip(&self, id: &str) -> Option<&StripEntry> {
        self.strips.iter().find(|s| s.id == id)
    }

    /// Renders the stored images of one acquisition, defects included.
    pub fn render<T: Scalar>(&self, entry: &StripEntry, run: usize) -> Result<Vec<(ImageKind, Image<T>)>> {
        let seed = *entry
            .run_seeds
            .get(run)
            .ok_or_else(|| Error::Range(format!("strip {} has no run {run}", entry.id)))?;
        let spec = self.spec.with_seed(entry.strip_seed);
        let kinds = entry.images();
        let frames: Vec<usize> = kinds.iter().filter_map(|k| if let ImageKind::Frame(i) = k { Some(*i) } else { None }).collect();
        let mut stack = FrameStack::new(render_frames(&spec, seed, &frames)?, format!("{}/{run}", entry.id))?;
        for d in &entry.defects {
            stack = inject_defect(&stack, &spec, d)?;
        }
        let mut out: Vec<(ImageKind, Image<T>)> = frames.iter().map(|&i| ImageKind::Frame(i)).zip(stack.frames().iter().cloned()).collect();
        if entry.split == Split::Train {
            out.push((ImageKind::RankMin, rank_filter(&stack, 1)?));
            out.push((ImageKind::RankMax, rank_filter(&stack, stack.len())?));
        }
        Ok(out)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Invalid(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse { path, reason: e.to_string() })
    }
}

pub fn strip_dir(root: &Path, entry: &StripEntry) -> PathBuf {
    root.join(entry.split.name()).join(&entry.id)
}

pub fn image_path(root: &Path, entry: &StripEntry, run: usize, kind: ImageKind) -> PathBuf {
    strip_dir(root, entry).join(run.to_string()).join(kind.file_name())
}

/// Writes one strip (all runs) into a scratch directory, then renames it into
/// place, so a strip directory is either complete or absent.
pub fn write_strip(manifest: &KitManifest, root: &Path, entry: &StripEntry) -> Result<()> {
    let dest = strip_dir(root, entry);
    let parent = dest.parent().expect("strip dir has a parent");
    let tmp = parent.join(format!(".{}.partial", entry.id));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    for run in 0..entry.run_seeds.len() {
        let dir = tmp.join(run.to_string());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (kind, img) in manifest.render::<f32>(entry, run)? {
            img.save_png(&dir.join(kind.file_name()))?;
        }
    }
    if dest.exists() {
        fs::remove_dir_all(&dest).map_err(|e| Error::io(&dest, e))?;
    }
    fs::rename(&tmp, &dest).map_err(|e| Error::io(&dest, e))
}

/// Manifest plus every image of the kit under `root`.
pub fn write_kit(manifest: &KitManifest, root: &Path) -> Result<()> {
    manifest.save(root)?;
    for entry in &manifest.strips {
        write_strip(manifest, root, entry)?;
    }
    Ok(())
}

/// Loads the stored images of one acquisition.
pub fn load_acquisition<T: Scalar>(root: &Path, entry: &StripEntry, run: usize) -> Result<Vec<(ImageKind, Image<T>)>> {
    entry.images().into_iter().map(|k| Ok((k, Image::load_png(&image_path(root, entry, run, k))?))).collect()
}

/// Cuts every image of an acquisition into its 20 cell patches.
pub fn acquisition_patches<T: Scalar>(
    entry: &StripEntry,
    run: usize,
    images: &[(ImageKind, Image<T>)],
    layout: &RegionLayout,
) -> Result<Vec<(PatchId, Image<T>)>> {
    let mut out = Vec::with_capacity(images.len() * VIALS * REGIONS);
    for (kind, img) in images {
        let grid = crate::imagecore::extract_patches(img, layout)?;
        for ((vial, region), p) in grid.patches {
            out.push((PatchId::new(entry.id.clone(), run, kind.index(), vial, region)?, p));
        }
    }
    Ok(out)
}

/// All training patches of the kit, rendered in memory.
pub fn training_patches<T: Scalar>(manifest: &KitManifest, layout: &RegionLayout) -> Result<Vec<Image<T>>> {
    let mut out = Vec::with_capacity(manifest.plan.train_patches());
    for entry in manifest.split(Split::Train) {
        for run in 0..entry.run_seeds.len() {
            let images = manifest.render::<T>(entry, run)?;
            out.extend(acquisition_patches(entry, run, &images, layout)?.into_iter().map(|(_, p)| p));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> StripSpec {
        StripSpec::default().with_seed(42)
    }

    fn band_rows(s: &StripSpec, r: usize) -> std::ops::Range<usize> {
        s.band_edges[r]..s.band_edges[r + 1]
    }

    #[test]
    fn nominal_strips_are_deterministic_and_bounded() {
        let a = gen_nominal_strip::<f32>(&spec(), 7).unwrap();
        let b = gen_nominal_strip::<f32>(&spec(), 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), FRAMES);
        assert!(a.frames().iter().all(|f| f.data().iter().all(|v| (0.0..=1.0).contains(v))));
        assert_ne!(a, gen_nominal_strip::<f32>(&spec(), 8).unwrap());
        let subset = render_frames::<f32>(&spec(), 7, &TEST_FRAME_INDICES).unwrap();
        for (i, &f) in TEST_FRAME_INDICES.iter().enumerate() {
            assert_eq!(subset[i], a.frames()[f]);
        }
    }

    #[test]
    fn without_bubbles_frames_differ_only_by_noise() {
        let s = StripSpec { max_bubbles: 0, pixel_noise: 0.0, frame_jitter: 0.0, ..spec() };
        let st = gen_nominal_strip::<f64>(&s, 3).unwrap();
        assert!(st.frames().iter().all(|f| f == &st.frames()[0]));
        let s = StripSpec { max_bubbles: 0, ..spec() };
        let st = gen_nominal_strip::<f64>(&s, 3).unwrap();
        let d: f64 = st.frames()[0].data().iter().zip(st.frames()[5].data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d < 0.1, "max frame difference {d}");
    }

    #[test]
    fn ranked_residual_concentrates_in_liquid_band() {
        let s = StripSpec { pixel_noise: 0.0, frame_jitter: 0.0, droplet_probability: 0.0, max_bubbles: 4, ..spec() };
        let st = gen_nominal_strip::<f64>(&s, 11).unwrap();
        let lo = rank_filter(&st, 1).unwrap();
        let hi = rank_filter(&st, FRAMES).unwrap();
        let mut mass = [0.0; REGIONS];
        for (r, m) in mass.iter_mut().enumerate() {
            for y in band_rows(&s, r) {
                for x in 0..s.width {
                    *m += hi.get(x, y) - lo.get(x, y);
                }
            }
        }
        let total: f64 = mass.iter().sum();
        assert!(total > 0.0);
        assert_eq!(mass[2], total, "{mass:?}");
    }

    #[test]
    fn liquid_varies_more_than_flag_over_frames() {
        let st = gen_nominal_strip::<f64>(&StripSpec { max_bubbles: 3, ..spec() }, 5).unwrap();
        let var_in = |r: usize| {
            let mut acc = 0.0;
            let mut n = 0.0;
            for y in band_rows(&spec(), r) {
                for x in 0..spec().width {
                    let v: Vec<f64> = st.frames().iter().map(|f| f.get(x, y)).collect();
                    let m = v.iter().sum::<f64>() / v.len() as f64;
                    acc += v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64;
                    n += 1.0;
                }
            }
            acc / n
        };
        assert!(var_in(2) > var_in(0));
    }

    fn defect(kind: DefectKind, region: usize, magnitude: f64) -> DefectSpec {
        DefectSpec { kind, vial: 2, region, magnitude, seed: 99 }
    }

    #[test]
    fn zero_magnitude_is_a_no_op() {
        let st = gen_nominal_strip::<f32>(&spec(), 1).unwrap();
        for kind in DefectKind::ALL {
            assert_eq!(inject_defect(&st, &spec(), &defect(kind, 1, 0.0)).unwrap(), st);
        }
        assert!("dust".parse::<DefectKind>().is_err());
        assert!(inject_defect(&st, &spec(), &defect(DefectKind::Scratch, 4, 0.5)).is_err());
        assert!(inject_defect(&st, &spec(), &defect(DefectKind::Scratch, 1, 1.5)).is_err());
    }

    #[test]
    fn defects_are_static_and_confined_to_their_cell() {
        let s = spec();
        let st = gen_nominal_strip::<f64>(&s, 2).unwrap();
        let layout = s.layout(32).unwrap();
        for kind in DefectKind::ALL {
            for &region in kind.typical_regions() {
                let d = defect(kind, region, 1.0);
                let out = inject_defect(&st, &s, &d).unwrap();
                let cell = layout.cell(d.vial, d.region).unwrap().rect;
                let footprint = build_overlay(&s, &d).unwrap();
                for (i, &a) in footprint.alpha.iter().enumerate() {
                    assert!(a == 0.0 || cell.contains(i % s.width, i / s.width), "{kind:?} paints outside its cell");
                }
                for (f, (a, b)) in st.frames().iter().zip(out.frames()).enumerate() {
                    let mut mass = 0.0;
                    for (i, (u, v)) in a.data().iter().zip(b.data()).enumerate() {
                        if u != v {
                            assert!(footprint.alpha[i] > 0.0, "{kind:?} changed a pixel outside its footprint");
                            mass += (u - v).abs();
                        }
                    }
                    assert!(mass > 1.0, "{kind:?} in region {region} frame {f}: mass {mass}");
                }
                let half = inject_defect(&st, &s, &DefectSpec { magnitude: 0.5, ..d.clone() }).unwrap();
                let mass = |o: &FrameStack<f64>| -> f64 {
                    o.frames()[0].data().iter().zip(st.frames()[0].data()).map(|(a, b)| (a - b).abs()).sum()
                };
                assert!(mass(&half) < mass(&out), "{kind:?}: severity should grow with magnitude");
            }
        }
    }

    #[test]
    fn stuck_particle_is_identical_across_frames() {
        let s = StripSpec { max_bubbles: 0, ..spec() };
        let st = gen_nominal_strip::<f64>(&s, 4).unwrap();
        let out = inject_defect(&st, &s, &defect(DefectKind::StuckParticle, 0, 1.0)).unwrap();
        let dark = |f: &Image<f64>, g: &Image<f64>| -> Vec<usize> {
            (0..f.data().len()).filter(|&i| g.data()[i] < 0.2 && f.data()[i] > 0.3).collect()
        };
        let first = dark(&st.frames()[0], &out.frames()[0]);
        assert!(!first.is_empty());
        for f in 1..FRAMES {
            assert_eq!(dark(&st.frames()[f], &out.frames()[f]), first);
        }
    }

    #[test]
    fn kit_manifest_structure() {
        let m = build_kit(&KitPlan::default(), &StripSpec::default(), 5).unwrap();
        let count = |split, d| m.split(split).filter(|s| s.defective == d).count();
        assert_eq!((count(Split::Test, true), count(Split::Test, false)), (141, 120));
        assert_eq!(count(Split::Train, true), 0);
        assert!(m.split(Split::Train).all(|s| s.defects.is_empty() && s.run_seeds.len() == 10));
        let ids: std::collections::BTreeSet<&str> = m.strips.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids.len(), m.strips.len());
        for split in [Split::Cal, Split::Test] {
            for r in 0..REGIONS {
                assert!(m.split(split).any(|s| s.defect_cells().iter().any(|c| c.1 == r)));
            }
        }
        assert!(m.strips.iter().filter(|s| s.defective).all(|s| !s.defects.is_empty()));
        assert_eq!(m, build_kit(&KitPlan::default(), &StripSpec::default(), 5).unwrap());
        assert_eq!(KitPlan::desk().train_patches(), 50_400);
        assert_eq!(KitPlan::smoke().train_patches(), 2_160);
    }

    #[test]
    fn written_kit_replays_bit_identically() {
        let plan = KitPlan { train: 1, train_runs: 1, cal_defective: 1, cal_nominal: 0, test_defective: 0, test_nominal: 1, ..KitPlan::smoke() };
        let m = build_kit(&plan, &StripSpec::default(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_kit(&m, dir.path()).unwrap();
        let back = KitManifest::load(dir.path()).unwrap();
        assert_eq!(back, m);
        for e in &m.strips {
            for run in 0..e.run_seeds.len().min(2) {
                let disk = load_acquisition::<f32>(dir.path(), e, run).unwrap();
                let mem = back.render::<f32>(e, run).unwrap();
                assert_eq!(disk, mem, "{} run {run}", e.id);
            }
        }
        let train = m.split(Split::Train).next().unwrap();
        assert_eq!(load_acquisition::<f32>(dir.path(), train, 0).unwrap().len(), 18);
        let layout = m.spec.layout(32).unwrap();
        assert_eq!(training_patches::<f32>(&m, &layout).unwrap().len(), 360);
        assert!(!dir.path().join("train").join(".train-0000.partial").exists());
    }
}
