//! Mask overlay rendering to binary PPM (P6).
//!
//! The grayscale input (channel mean) is blended with a class-colored
//! mask. Class colors come from golden-angle hue rotation, so the palette
//! is a deterministic function of the class index alone.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Storage, Tensor};

pub const GOLDEN_ANGLE_DEG: f64 = 137.50776405003785;
pub const MASK_ALPHA: f64 = 0.55;

/// Deterministic palette: class k (k >= 1) -> RGB.
pub fn class_color(k: usize) -> [u8; 3] {
    let hue = (k as f64 * GOLDEN_ANGLE_DEG) % 360.0;
    hsv_to_rgb(hue, 0.8, 1.0)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [((r + m) * 255.0) as u8, ((g + m) * 255.0) as u8, ((b + m) * 255.0) as u8]
}

/// Alpha-blend a label map over the grayscale rendering of `image`
/// (f32 [C,H,W] in [0,1]); background (label 0) stays pure grayscale.
pub fn render_overlay(image: &Tensor, labels: &Tensor) -> Result<(Vec<u8>, usize, usize)> {
    let is_ = image.shape();
    let ls = labels.shape();
    if is_.len() != 3 {
        return Err(Error::Data(format!("overlay image must be [C,H,W], got {is_:?}")));
    }
    let (c, h, w) = (is_[0], is_[1], is_[2]);
    if ls != [h, w] {
        return Err(Error::Data(format!("label extents {ls:?} do not match image {h}x{w}")));
    }
    let img = image.to_f64_vec();
    let lab = match &*labels.data() {
        Storage::U8(v) => v.clone(),
        _ => return Err(Error::Data("labels must be u8".into())),
    };
    let mut rgb = vec![0u8; h * w * 3];
    for p in 0..h * w {
        let mut gray = 0.0f64;
        for ch in 0..c {
            gray += img[ch * h * w + p];
        }
        gray = (gray / c as f64).clamp(0.0, 1.0) * 255.0;
        let px = &mut rgb[p * 3..p * 3 + 3];
        if lab[p] == 0 {
            px.fill(gray as u8);
        } else {
            let color = class_color(lab[p] as usize);
            for i in 0..3 {
                px[i] = (MASK_ALPHA * color[i] as f64 + (1.0 - MASK_ALPHA) * gray) as u8;
            }
        }
    }
    Ok((rgb, w, h))
}

pub fn write_ppm(path: &Path, rgb: &[u8], w: usize, h: usize) -> Result<()> {
    if rgb.len() != w * h * 3 {
        return Err(Error::Data("rgb payload does not match extents".into()));
    }
    let mut f = std::fs::File::create(path)?;
    write!(f, "P6\n{w} {h}\n255\n")?;
    f.write_all(rgb)?;
    Ok(())
}
