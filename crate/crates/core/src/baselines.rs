//! Naive two-stage pipelines: fill the holes and upscale, in either order.

use crate::error::{ensure, DearError, Result};
use crate::evaluation::Restorer;
use crate::imaging::{apply_mask, continuous_index, make_coord_grid, Image, MaskedImage};
use crate::model::output_size;

/// Bilinear resampling to `⌊sH⌋×⌊sW⌋` on the center-aligned lattice, with
/// border samples clamped.
pub fn bilinear_upscale(img: &Image, scale: f64) -> Result<Image> {
    let (oh, ow) = output_size(img.height(), img.width(), scale)?;
    bilinear_resize(img, oh, ow)
}

pub fn bilinear_resize(img: &Image, oh: usize, ow: usize) -> Result<Image> {
    let (h, w, c) = img.shape();
    let grid = make_coord_grid(oh, ow)?;
    let axis = |coord: f64, n: usize| {
        let f = continuous_index(coord, n).clamp(0.0, (n - 1) as f64);
        let i0 = f.floor() as usize;
        (i0, (i0 + 1).min(n - 1), f - i0 as f64)
    };
    let mut data = Vec::with_capacity(oh * ow * c);
    for &[y, x] in &grid.coords {
        let (y0, y1, ty) = axis(y, h);
        let (x0, x1, tx) = axis(x, w);
        for ch in 0..c {
            let v = (1.0 - ty) * ((1.0 - tx) * img.get(y0, x0, ch) as f64 + tx * img.get(y0, x1, ch) as f64)
                + ty * ((1.0 - tx) * img.get(y1, x0, ch) as f64 + tx * img.get(y1, x1, ch) as f64);
            data.push(v as f32);
        }
    }
    Image::from_clamped(oh, ow, c, data)
}

/// Onion-peel fill: every pass gives each missing pixel with at least one
/// known 8-neighbor the mean of its known neighbors, until none are missing.
pub fn naive_inpaint(input: &MaskedImage) -> Result<Image> {
    naive_inpaint_counted(input).map(|(img, _)| img)
}

/// [`naive_inpaint`] together with the number of passes it took.
pub fn naive_inpaint_counted(input: &MaskedImage) -> Result<(Image, usize)> {
    let (h, w, c) = input.raster().shape();
    let mut known: Vec<bool> = input.mask().data().iter().map(|&m| m == 0).collect();
    if !known.iter().any(|&k| k) {
        return Err(DearError::invalid("cannot inpaint a fully masked image"));
    }
    let mut data = input.raster().data().to_vec();
    let mut remaining = known.iter().filter(|&&k| !k).count();
    let mut passes = 0;
    while remaining > 0 {
        passes += 1;
        let mut updates = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if known[y * w + x] {
                    continue;
                }
                let mut acc = vec![0.0f64; c];
                let mut n = 0;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (ny, nx) = (y as isize + dy, x as isize + dx);
                        if (dy, dx) == (0, 0) || ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        let q = ny as usize * w + nx as usize;
                        if known[q] {
                            n += 1;
                            for (a, &v) in acc.iter_mut().zip(&data[q * c..(q + 1) * c]) {
                                *a += v as f64;
                            }
                        }
                    }
                }
                if n > 0 {
                    updates.push((y * w + x, acc.into_iter().map(|a| (a / n as f64) as f32).collect::<Vec<_>>()));
                }
            }
        }
        ensure!(!updates.is_empty(), "inpainting made no progress");
        for (p, vals) in updates {
            data[p * c..(p + 1) * c].copy_from_slice(&vals);
            known[p] = true;
            remaining -= 1;
        }
    }
    Ok((Image::from_clamped(h, w, c, data)?, passes))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StackOrder {
    /// Fill in LR, then upscale.
    InpaintFirst,
    /// Upscale the zero-filled image and the mask (nearest), then fill.
    SrFirst,
}

impl StackOrder {
    pub fn label(self) -> &'static str {
        match self {
            StackOrder::InpaintFirst => "inpaint_then_bi",
            StackOrder::SrFirst => "bi_then_inpaint",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "inpaint_then_bi" | "inpaint_first" => Ok(StackOrder::InpaintFirst),
            "bi_then_inpaint" | "sr_first" => Ok(StackOrder::SrFirst),
            other => Err(DearError::invalid(format!(
                "unknown baseline {other:?}; expected inpaint_then_bi or bi_then_inpaint"
            ))),
        }
    }
}

/// A stacked inpainting / super-resolution pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stack {
    pub order: StackOrder,
}

impl Stack {
    pub fn run(&self, input: &MaskedImage, scale: f64) -> Result<Image> {
        match self.order {
            StackOrder::InpaintFirst => bilinear_upscale(&naive_inpaint(input)?, scale),
            StackOrder::SrFirst => {
                let up = bilinear_upscale(input.raster(), scale)?;
                let mask = input.mask().resize_nearest(up.height(), up.width());
                naive_inpaint(&apply_mask(&up, &mask)?)
            }
        }
    }
}

impl Restorer for Stack {
    fn name(&self) -> String {
        self.order.label().to_string()
    }

    fn restore(&self, input: &MaskedImage, scale: f64) -> Result<Image> {
        self.run(input, scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Mask;

    #[test]
    fn bilinear_two_by_two_hand_case() {
        let img = Image::new(2, 2, 1, vec![0.0, 0.4, 0.8, 1.0]).unwrap();
        let up = bilinear_upscale(&img, 2.0).unwrap();
        // Output pixel (1,1) sits at continuous index (0.25, 0.25).
        let expect = 0.75 * (0.75 * 0.0 + 0.25 * 0.4) + 0.25 * (0.75 * 0.8 + 0.25 * 1.0);
        assert!((up.get(1, 1, 0) as f64 - expect).abs() < 1e-6);
        // Corner pixel clamps onto the corner sample.
        assert_eq!(up.get(0, 0, 0), 0.0);
    }

    #[test]
    fn unit_scale_is_identity() {
        let img = Image::from_fn(5, 3, 3, |y, x, c| ((y * 3 + x + c) % 7) as f32 / 7.0).unwrap();
        assert_eq!(bilinear_upscale(&img, 1.0).unwrap(), img);
    }

    #[test]
    fn cross_fill_sequence() {
        // 3×3 image, values 0.1·(index) on known pixels; the plus-shaped
        // centre cross is missing.
        let img = Image::from_fn(3, 3, 1, |y, x, _| 0.1 * (y * 3 + x) as f32).unwrap();
        let mut m = Mask::zeros(3, 3);
        for (y, x) in [(0, 1), (1, 0), (1, 1), (1, 2), (2, 1)] {
            m.set(y, x, true);
        }
        let out = naive_inpaint(&apply_mask(&img, &m).unwrap()).unwrap();
        // Pass 1: (0,1) ← mean(0.0, 0.2) = 0.1; (1,0) ← mean(0.0, 0.6) = 0.3;
        // (1,1) ← mean of four corners = 0.4; (1,2) ← mean(0.2, 0.8) = 0.5;
        // (2,1) ← mean(0.6, 0.8) = 0.7.
        for (y, x, v) in [(0, 1, 0.1), (1, 0, 0.3), (1, 1, 0.4), (1, 2, 0.5), (2, 1, 0.7)] {
            assert!((out.get(y, x, 0) - v).abs() < 1e-6, "({y},{x}) = {}", out.get(y, x, 0));
        }
    }

    #[test]
    fn fully_masked_is_an_error() {
        let img = Image::filled(3, 3, 3, 0.5).unwrap();
        assert!(naive_inpaint(&apply_mask(&img, &Mask::ones(3, 3)).unwrap()).is_err());
    }
}
