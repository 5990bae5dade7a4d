//! Operator-facing images: colored heatmap and the four-panel view
//! (input, reconstruction, absolute difference, heatmap over input).

use std::path::Path;

use anyhow::{Context, Result};
use drae_core::Image;
use image::{Rgb, RgbImage};

/// Black → red → yellow → white.
pub fn hot(v: f32) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0) * 3.0;
    let c = |x: f32| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    [c(v), c(v - 1.0), c(v - 2.0)]
}

fn zoom_for(size: usize) -> usize {
    (128 / size.max(1)).max(1)
}

fn tile(out: &mut RgbImage, x0: u32, zoom: u32, w: usize, h: usize, px: impl Fn(usize, usize) -> [u8; 3]) {
    for y in 0..h {
        for x in 0..w {
            let c = Rgb(px(x, y));
            for dy in 0..zoom {
                for dx in 0..zoom {
                    out.put_pixel(x0 + x as u32 * zoom + dx, y as u32 * zoom + dy, c);
                }
            }
        }
    }
}

fn gray(v: f32) -> [u8; 3] {
    let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    [g, g, g]
}

/// Heatmap alone, colored.
pub fn save_heatmap(path: &Path, heat: &Image) -> Result<()> {
    let (w, h) = (heat.width(), heat.height());
    let z = zoom_for(w.max(h)) as u32;
    let mut out = RgbImage::new(w as u32 * z, h as u32 * z);
    tile(&mut out, 0, z, w, h, |x, y| hot(heat.get(x, y)));
    out.save(path).with_context(|| format!("writing {}", path.display()))
}

/// Side-by-side input, reconstruction, difference and overlay.
pub fn save_panel(path: &Path, x: &Image, x_hat: &Image, heat: &Image) -> Result<()> {
    let (w, h) = (x.width(), x.height());
    let z = zoom_for(w.max(h)) as u32;
    let gap = 4u32;
    let tw = w as u32 * z;
    let mut out = RgbImage::from_pixel(4 * tw + 3 * gap, h as u32 * z, Rgb([255, 255, 255]));
    tile(&mut out, 0, z, w, h, |i, j| gray(x.get(i, j)));
    tile(&mut out, tw + gap, z, w, h, |i, j| gray(x_hat.get(i, j)));
    tile(&mut out, 2 * (tw + gap), z, w, h, |i, j| gray((x.get(i, j) - x_hat.get(i, j)).abs()));
    tile(&mut out, 3 * (tw + gap), z, w, h, |i, j| {
        let a = 0.6 * heat.get(i, j);
        let (g, c) = (gray(x.get(i, j)), hot(heat.get(i, j)));
        std::array::from_fn(|k| ((1.0 - a) * g[k] as f32 + a * c[k] as f32).round() as u8)
    });
    out.save(path).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_endpoints() {
        assert_eq!(hot(0.0), [0, 0, 0]);
        assert_eq!(hot(1.0), [255, 255, 255]);
        assert_eq!(hot(1.0 / 3.0), [255, 0, 0]);
        assert_eq!(hot(2.0), [255, 255, 255]);
    }
}
