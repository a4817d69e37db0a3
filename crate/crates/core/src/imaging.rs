//! Rasters, masks, and the normalized coordinate lattice shared by every
//! other module.
//!
//! Images are stored interleaved (`H×W×C`) as `f32` in `[0, 1]`; conversion
//! to 8-bit happens only at the PNG boundary. Masks use `1` for a missing
//! pixel and `0` for a valid one.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use crate::autodiff::{Real, Tensor};
use crate::error::{ensure, DearError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(height >= 1 && width >= 1, "image must be at least 1x1, got {height}x{width}");
        ensure!(channels >= 1, "image needs at least one channel");
        ensure!(
            data.len() == height * width * channels,
            "image data has {} values, expected {}",
            data.len(),
            height * width * channels
        );
        ensure!(
            data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)),
            "image values must be finite and within [0, 1]"
        );
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image, clamping every value into `[0, 1]` (NaN becomes 0).
    pub fn from_clamped(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        let data = data
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Self::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        f: impl Fn(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::from_clamped(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Channel-major `C×H×W` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let (h, w, c) = self.shape();
        Tensor::from_fn(&[c, h, w], |i| {
            let ch = i / (h * w);
            let p = i % (h * w);
            T::lit(self.data[p * c + ch] as f64)
        })
    }

    /// Inverse of [`Image::to_tensor`], clamping into `[0, 1]`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        let src = t.data();
        let mut data = vec![0.0f32; c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                data[p * c + ch] = src[ch * h * w + p].as_f64() as f32;
            }
        }
        Self::from_clamped(h, w, c, data)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        ensure!(height >= 1 && width >= 1, "mask must be at least 1x1");
        ensure!(data.len() == height * width, "mask data length mismatch");
        ensure!(data.iter().all(|&v| v <= 1), "mask values must be 0 or 1");
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn is_missing(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, missing: bool) {
        self.data[y * self.width + x] = missing as u8;
    }

    /// Fraction of missing pixels.
    pub fn coverage(&self) -> f64 {
        self.data.iter().map(|&v| v as usize).sum::<usize>() as f64 / self.data.len() as f64
    }

    pub fn missing_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// `1×H×W` tensor holding the mask values.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[1, self.height, self.width], |i| T::lit(self.data[i] as f64))
    }

    /// Nearest-neighbor resampling onto a `height×width` grid using the same
    /// center-aligned convention as the coordinate lattice.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Mask {
        let mut out = Mask::zeros(height, width);
        for y in 0..height {
            let sy = nearest_index(pixel_center(y, height), self.height);
            for x in 0..width {
                let sx = nearest_index(pixel_center(x, width), self.width);
                out.data[y * width + x] = self.data[sy * self.width + sx];
            }
        }
        out
    }
}

/// A zero-filled raster together with the mask that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedImage {
    raster: Image,
    mask: Mask,
}

impl MaskedImage {
    pub fn raster(&self) -> &Image {
        &self.raster
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn height(&self) -> usize {
        self.raster.height
    }

    pub fn width(&self) -> usize {
        self.raster.width
    }
}

/// Zeroes every missing pixel of `img`.
pub fn apply_mask(img: &Image, mask: &Mask) -> Result<MaskedImage> {
    ensure!(
        img.height == mask.height && img.width == mask.width,
        "mask {}x{} does not match image {}x{}",
        mask.height,
        mask.width,
        img.height,
        img.width
    );
    let mut data = img.data.clone();
    for (p, &m) in mask.data.iter().enumerate() {
        if m == 1 {
            data[p * img.channels..(p + 1) * img.channels].fill(0.0);
        }
    }
    Ok(MaskedImage {
        raster: Image {
            data,
            ..img.clone()
        },
        mask: mask.clone(),
    })
}

/// Center of pixel `i` on an `n`-pixel axis in normalized `[-1, 1]`
/// coordinates.
pub fn pixel_center(i: usize, n: usize) -> f64 {
    -1.0 + (2 * i + 1) as f64 / n as f64
}

/// Continuous pixel index of a normalized coordinate: pixel centers map to
/// integers.
pub fn continuous_index(coord: f64, n: usize) -> f64 {
    ((coord + 1.0) * n as f64 - 1.0) / 2.0
}

/// Index of the pixel whose cell contains `coord`, clamped to the axis.
pub fn nearest_index(coord: f64, n: usize) -> usize {
    let idx = ((coord + 1.0) * n as f64 / 2.0).floor();
    (idx.max(0.0) as usize).min(n - 1)
}

/// Continuous query coordinates; each entry is `(row, column)` in `[-1, 1]²`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordGrid {
    pub coords: Vec<[f64; 2]>,
    pub source_shape: (usize, usize),
}

/// Row-major pixel-center coordinates of a `height×width` lattice.
pub fn make_coord_grid(height: usize, width: usize) -> Result<CoordGrid> {
    ensure!(height >= 1 && width >= 1, "coordinate grid must be at least 1x1, got {height}x{width}");
    let rows: Vec<f64> = (0..height).map(|i| pixel_center(i, height)).collect();
    let cols: Vec<f64> = (0..width).map(|j| pixel_center(j, width)).collect();
    let mut coords = Vec::with_capacity(height * width);
    for &r in &rows {
        for &c in &cols {
            coords.push([r, c]);
        }
    }
    Ok(CoordGrid {
        coords,
        source_shape: (height, width),
    })
}

/// Catmull-Rom cubic (a = -0.5).
fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x < 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * A
    } else {
        0.0
    }
}

/// Per-output-sample `(first_source_index, weights)` for resampling an axis
/// of `n_in` samples to `n_out`. Downscaling widens the kernel by the scale
/// factor (antialiasing); taps falling outside the axis are dropped and the
/// rest renormalized.
fn axis_weights(n_in: usize, n_out: usize) -> Vec<(usize, Vec<f64>)> {
    let scale = n_in as f64 / n_out as f64;
    let support_scale = scale.max(1.0);
    let support = 2.0 * support_scale;
    (0..n_out)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale - 0.5;
            let lo = ((center - support).ceil() as isize).max(0) as usize;
            let hi = ((center + support).floor() as isize).min(n_in as isize - 1).max(0) as usize;
            let mut w: Vec<f64> = (lo..=hi)
                .map(|i| cubic((i as f64 - center) / support_scale))
                .collect();
            let total: f64 = w.iter().sum();
            for v in &mut w {
                *v /= total;
            }
            (lo, w)
        })
        .collect()
}

/// Separable bicubic resampling to an arbitrary size, clamped to `[0, 1]`.
pub fn resize_bicubic(img: &Image, out_height: usize, out_width: usize) -> Result<Image> {
    ensure!(out_height >= 1 && out_width >= 1, "target size must be at least 1x1");
    let (h, w, c) = img.shape();
    let wx = axis_weights(w, out_width);
    let wy = axis_weights(h, out_height);

    let mut horiz = vec![0.0f64; h * out_width * c];
    for y in 0..h {
        for (ox, (lo, weights)) in wx.iter().enumerate() {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, &wt) in weights.iter().enumerate() {
                    acc += wt * img.get(y, lo + t, ch) as f64;
                }
                horiz[(y * out_width + ox) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; out_height * out_width * c];
    for (oy, (lo, weights)) in wy.iter().enumerate() {
        for ox in 0..out_width {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, &wt) in weights.iter().enumerate() {
                    acc += wt * horiz[((lo + t) * out_width + ox) * c + ch];
                }
                out[(oy * out_width + ox) * c + ch] = acc as f32;
            }
        }
    }
    Image::from_clamped(out_height, out_width, c, out)
}

/// Integer-factor bicubic reduction.
pub fn downsample(img: &Image, factor: usize) -> Result<Image> {
    ensure!(factor >= 1, "downsampling factor must be positive");
    ensure!(
        img.height % factor == 0 && img.width % factor == 0,
        "{}x{} is not divisible by {}",
        img.height,
        img.width,
        factor
    );
    if factor == 1 {
        return Ok(img.clone());
    }
    resize_bicubic(img, img.height / factor, img.width / factor)
}

fn image_error(path: &Path, e: impl std::fmt::Display) -> DearError {
    DearError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads an 8-bit PNG (grayscale → 1 channel, color → 3 channels; alpha is
/// dropped).
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let dynimg = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => DearError::io(path, io),
        other => image_error(path, other),
    })?;
    let to_f = |v: u8| v as f32 / 255.0;
    match dynimg {
        DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            Image::new(h as usize, w as usize, 1, g.into_raw().into_iter().map(to_f).collect())
        }
        DynamicImage::ImageLumaA8(_) => {
            let g = dynimg.to_luma8();
            let (w, h) = g.dimensions();
            Image::new(h as usize, w as usize, 1, g.into_raw().into_iter().map(to_f).collect())
        }
        DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) => {
            let rgb = dynimg.to_rgb8();
            let (w, h) = rgb.dimensions();
            Image::new(h as usize, w as usize, 3, rgb.into_raw().into_iter().map(to_f).collect())
        }
        other => Err(image_error(
            path,
            format!("unsupported pixel format {:?} (only 8-bit PNG is supported)", other.color()),
        )),
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w, c) = img.shape();
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    let result = match c {
        1 => GrayImage::from_raw(w as u32, h as u32, bytes).map(|g| g.save(path)),
        3 => RgbImage::from_raw(w as u32, h as u32, bytes).map(|g| g.save(path)),
        _ => return Err(DearError::invalid(format!("cannot write a {c}-channel image"))),
    };
    match result {
        Some(Ok(())) => Ok(()),
        Some(Err(image::ImageError::IoError(io))) => Err(DearError::io(path, io)),
        Some(Err(e)) => Err(image_error(path, e)),
        None => Err(image_error(path, "buffer size mismatch")),
    }
}

/// Reads a binary mask PNG; any pixel brighter than mid-gray counts as
/// missing.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let img = read_image(path)?;
    let (h, w, c) = img.shape();
    let data = (0..h * w)
        .map(|p| {
            let mean: f32 = img.data[p * c..(p + 1) * c].iter().sum::<f32>() / c as f32;
            (mean > 0.5) as u8
        })
        .collect();
    Mask::new(h, w, data)
}

pub fn write_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let img = Image::new(
        mask.height,
        mask.width,
        1,
        mask.data.iter().map(|&v| v as f32).collect(),
    )?;
    write_image(&img, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coord_grid_examples() {
        assert_eq!(make_coord_grid(1, 1).unwrap().coords, vec![[0.0, 0.0]]);
        let g = make_coord_grid(2, 2).unwrap();
        assert_eq!(g.coords, vec![[-0.5, -0.5], [-0.5, 0.5], [0.5, -0.5], [0.5, 0.5]]);
        let g = make_coord_grid(3, 4).unwrap();
        // -1 + 1/3 and -1 + 1/4
        assert!((g.coords[0][0] - (-2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(g.coords[0][1], -0.75);
        assert!(make_coord_grid(0, 3).is_err());
    }

    #[test]
    fn coord_round_trip_recovers_pixel() {
        for &(h, w) in &[(1, 1), (3, 4), (17, 9), (64, 64)] {
            let g = make_coord_grid(h, w).unwrap();
            for (k, c) in g.coords.iter().enumerate() {
                assert_eq!(nearest_index(c[0], h), k / w);
                assert_eq!(nearest_index(c[1], w), k % w);
                assert!(c[0] > -1.0 && c[0] < 1.0 && c[1] > -1.0 && c[1] < 1.0);
                assert!((continuous_index(c[0], h) - (k / w) as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn downsample_shapes_and_constants() {
        let img = Image::filled(256, 256, 3, 0.5).unwrap();
        let small = downsample(&img, 4).unwrap();
        assert_eq!(small.shape(), (64, 64, 3));
        assert!(small.data().iter().all(|&v| (v - 0.5).abs() < 1e-6));
        assert!(downsample(&Image::filled(10, 12, 1, 0.1).unwrap(), 4).is_err());
    }

    #[test]
    fn mask_application() {
        let img = Image::from_fn(3, 3, 3, |y, x, c| (y * 9 + x * 3 + c) as f32 / 30.0 + 0.01).unwrap();
        assert_eq!(apply_mask(&img, &Mask::zeros(3, 3)).unwrap().raster(), &img);
        assert!(apply_mask(&img, &Mask::ones(3, 3))
            .unwrap()
            .raster()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let mut m = Mask::zeros(3, 3);
        m.set(0, 0, true);
        let masked = apply_mask(&img, &m).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                let zeroed = masked.raster().pixel(y, x).iter().all(|&v| v == 0.0);
                assert_eq!(zeroed, (y, x) == (0, 0));
            }
        }
        let twice = apply_mask(masked.raster(), &m).unwrap();
        assert_eq!(twice, masked);
        assert!(apply_mask(&img, &Mask::zeros(2, 3)).is_err());
    }

    #[test]
    fn image_rejects_out_of_range() {
        assert!(Image::new(1, 1, 1, vec![1.5]).is_err());
        assert!(Image::new(1, 1, 1, vec![f32::NAN]).is_err());
        assert!(Mask::new(1, 2, vec![0, 2]).is_err());
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(5, 7, 3, |y, x, c| ((y * 7 + x) as f32 * 0.37 + c as f32).sin().abs()).unwrap();
        let p = dir.path().join("a.png");
        write_image(&img, &p).unwrap();
        let back = read_image(&p).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-7);
        }
        let gray = Image::from_fn(4, 4, 1, |y, x, _| (y + x) as f32 / 6.0).unwrap();
        write_image(&gray, &p).unwrap();
        assert_eq!(read_image(&p).unwrap().channels(), 1);
        assert!(read_image(dir.path().join("missing.png")).is_err());
    }

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Mask::zeros(4, 5);
        m.set(1, 2, true);
        m.set(3, 4, true);
        let p = dir.path().join("m.png");
        write_mask(&m, &p).unwrap();
        assert_eq!(read_mask(&p).unwrap(), m);
    }

    #[test]
    fn tensor_round_trip() {
        let img = Image::from_fn(3, 2, 3, |y, x, c| (y + 2 * x + 3 * c) as f32 / 12.0).unwrap();
        let t: Tensor<f64> = img.to_tensor();
        assert_eq!(t.shape(), &[3, 3, 2]);
        assert_eq!(Image::from_tensor(&t).unwrap(), img);
    }
}
