//! Random edit masks for training: free-form strokes, side extensions and
//! outpainting frames.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::raster::BinaryGrid;
use crate::scene::EditMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MaskKind {
    FreeForm,
    Extension,
    Outpainting,
}

/// Fraction bounds shared by the band and frame generators.
pub const MIN_REGION_RATIO: f64 = 0.25;
pub const MAX_REGION_RATIO: f64 = 0.5;

const REFERENCE_SIZE: f64 = 256.0;

pub fn generate_training_mask(kind: MaskKind, height: usize, width: usize, seed: u64) -> EditMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_mask(kind, height, width, &mut rng)
}

pub fn sample_mask(kind: MaskKind, height: usize, width: usize, rng: &mut impl Rng) -> EditMask {
    match kind {
        MaskKind::FreeForm => free_form_mask(height, width, rng),
        MaskKind::Extension => {
            let side = rng.gen_range(0..4);
            let ratio = rng.gen_range(MIN_REGION_RATIO..=MAX_REGION_RATIO);
            extension_mask(height, width, side, ratio).expect("ratio drawn within bounds")
        }
        MaskKind::Outpainting => {
            let ratio = rng.gen_range(MIN_REGION_RATIO..=MAX_REGION_RATIO);
            outpainting_mask(height, width, ratio).expect("ratio drawn within bounds")
        }
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(MIN_REGION_RATIO..=MAX_REGION_RATIO).contains(&ratio) {
        return Err(invalid!(
            "region ratio {ratio} outside [{MIN_REGION_RATIO}, {MAX_REGION_RATIO}]"
        ));
    }
    Ok(())
}

/// Full-width or full-height band covering `ratio` of the image on one side
/// (0 = top, 1 = bottom, 2 = left, 3 = right).
pub fn extension_mask(height: usize, width: usize, side: u8, ratio: f64) -> Result<EditMask> {
    check_ratio(ratio)?;
    let mut g = BinaryGrid::new(height, width);
    let rows = ((height as f64 * ratio).round() as usize).max(1);
    let cols = ((width as f64 * ratio).round() as usize).max(1);
    for y in 0..height {
        for x in 0..width {
            let inside = match side {
                0 => y < rows,
                1 => y >= height - rows,
                2 => x < cols,
                3 => x >= width - cols,
                _ => return Err(invalid!("extension side {side} not in 0..4")),
            };
            g.set(y, x, inside as u8);
        }
    }
    Ok(EditMask(g))
}

/// Everything except a centered rectangle holding `ratio` of the area.
pub fn outpainting_mask(height: usize, width: usize, ratio: f64) -> Result<EditMask> {
    check_ratio(ratio)?;
    let scale = ratio.sqrt();
    let kh = ((height as f64 * scale).round() as usize).clamp(1, height);
    let kw = ((width as f64 * scale).round() as usize).clamp(1, width);
    let (top, left) = ((height - kh) / 2, (width - kw) / 2);
    let mut g = BinaryGrid::filled(height, width, 1);
    for y in top..top + kh {
        for x in left..left + kw {
            g.set(y, x, 0);
        }
    }
    Ok(EditMask(g))
}

/// Union of 1-6 thick random polylines.
fn free_form_mask(height: usize, width: usize, rng: &mut impl Rng) -> EditMask {
    let scale = height.min(width) as f64 / REFERENCE_SIZE;
    let mut g = BinaryGrid::new(height, width);
    let strokes = rng.gen_range(1..=6);
    for _ in 0..strokes {
        let brush = rng.gen_range(12.0..=40.0) * scale;
        let vertices = rng.gen_range(4..=10);
        let mut y = rng.gen_range(0.0..height as f64);
        let mut x = rng.gen_range(0.0..width as f64);
        let mut angle = rng.gen_range(0.0..std::f64::consts::TAU);
        for _ in 0..vertices {
            angle += rng.gen_range(-1.2..1.2);
            let len = rng.gen_range(10.0..=48.0) * scale;
            let ny = (y + len * angle.sin()).clamp(0.0, height as f64 - 1.0);
            let nx = (x + len * angle.cos()).clamp(0.0, width as f64 - 1.0);
            stamp_segment(&mut g, (y, x), (ny, nx), brush / 2.0);
            (y, x) = (ny, nx);
        }
    }
    EditMask(g)
}

/// Marks every pixel center within `radius` of the segment.
fn stamp_segment(g: &mut BinaryGrid, a: (f64, f64), b: (f64, f64), radius: f64) {
    let y0 = (a.0.min(b.0) - radius).floor().max(0.0) as usize;
    let y1 = ((a.0.max(b.0) + radius).ceil() as usize).min(g.height - 1);
    let x0 = (a.1.min(b.1) - radius).floor().max(0.0) as usize;
    let x1 = ((a.1.max(b.1) + radius).ceil() as usize).min(g.width - 1);
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let t = if len2 > 0.0 {
                (((py - a.0) * dy + (px - a.1) * dx) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (cy, cx) = (a.0 + t * dy, a.1 + t * dx);
            if (py - cy).powi(2) + (px - cx).powi(2) <= radius * radius {
                g.set(y, x, 1);
            }
        }
    }
}

/// Relative frequencies of the mask kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskMix {
    pub free_form: f64,
    pub extension: f64,
    pub outpainting: f64,
}

impl Default for MaskMix {
    fn default() -> Self {
        Self {
            free_form: 0.5,
            extension: 0.25,
            outpainting: 0.25,
        }
    }
}

impl MaskMix {
    pub fn validate(&self) -> Result<()> {
        let all = [self.free_form, self.extension, self.outpainting];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || all.iter().sum::<f64>() <= 0.0 {
            return Err(invalid!("mask mix weights must be >= 0 with a positive sum: {self:?}"));
        }
        Ok(())
    }

    pub fn sample(&self, height: usize, width: usize, rng: &mut impl Rng) -> EditMask {
        let kind = self.pick(rng);
        sample_mask(kind, height, width, rng)
    }

    pub fn pick(&self, rng: &mut impl Rng) -> MaskKind {
        let total = self.free_form + self.extension + self.outpainting;
        let u = rng.gen_range(0.0..total.max(f64::MIN_POSITIVE));
        if u < self.free_form {
            MaskKind::FreeForm
        } else if u < self.free_form + self.extension {
            MaskKind::Extension
        } else {
            MaskKind::Outpainting
        }
    }
}
