//! Dataset construction (clean LR, masked LR, mask per HR image) and
//! seeded serving of coordinate–color training samples.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, DearError, Result};
use crate::imaging::{
    apply_mask, downsample, make_coord_grid, read_image, read_mask, write_image, write_mask, Image, Mask, MaskedImage,
};

/// Largest accepted upper coverage bound.
pub const MAX_COVERAGE: f64 = 0.9;
const MAX_SHAPES: usize = 2000;

/// Free-form mask from thick random-walk strokes and ellipses.
///
/// A target coverage `t ~ U(lo, hi)` is drawn and shapes are added until it is
/// reached; a shape that would push coverage above `hi` is discarded.
pub fn generate_irregular_mask(height: usize, width: usize, seed: u64, coverage: (f64, f64)) -> Result<Mask> {
    let (lo, hi) = coverage;
    ensure!(height >= 1 && width >= 1, "mask must be at least 1x1");
    if lo == 0.0 && hi == 0.0 {
        return Ok(Mask::zeros(height, width));
    }
    ensure!(
        (0.0..hi).contains(&lo) && hi <= MAX_COVERAGE,
        "coverage range must satisfy 0 <= lo < hi <= {MAX_COVERAGE}, got ({lo}, {hi})"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = rng.random_range(lo..=hi);
    let total = (height * width) as f64;
    let mut mask = Mask::zeros(height, width);
    let mut count = 0usize;
    for _ in 0..MAX_SHAPES {
        if count as f64 / total >= target {
            return Ok(mask);
        }
        let mut trial = mask.clone();
        if rng.random_bool(0.7) {
            draw_stroke(&mut trial, &mut rng);
        } else {
            draw_ellipse(&mut trial, &mut rng);
        }
        let n = trial.missing_count();
        if n as f64 / total <= hi {
            mask = trial;
            count = n;
        }
    }
    if (lo..=hi).contains(&(count as f64 / total)) {
        return Ok(mask);
    }
    Err(DearError::GenerationFailure(format!(
        "could not reach coverage in [{lo}, {hi}] on a {height}x{width} mask (got {:.3})",
        count as f64 / total
    )))
}

fn stamp_disc(mask: &mut Mask, cy: f64, cx: f64, r: f64) {
    let (h, w) = (mask.height() as isize, mask.width() as isize);
    let ri = r.ceil() as isize;
    let (iy, ix) = (cy.round() as isize, cx.round() as isize);
    for y in (iy - ri).max(0)..(iy + ri + 1).min(h) {
        for x in (ix - ri).max(0)..(ix + ri + 1).min(w) {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            if dy * dy + dx * dx <= r * r {
                mask.set(y as usize, x as usize, true);
            }
        }
    }
}

fn draw_stroke(mask: &mut Mask, rng: &mut ChaCha8Rng) {
    let (h, w) = (mask.height() as f64, mask.width() as f64);
    let side = h.min(w);
    let radius = rng.random_range(0.5..=(side / 24.0).max(1.0));
    let vertices = rng.random_range(1..=5);
    let (mut y, mut x) = (rng.random_range(0.0..h), rng.random_range(0.0..w));
    let mut angle = rng.random_range(0.0..std::f64::consts::TAU);
    stamp_disc(mask, y, x, radius);
    for _ in 0..vertices {
        angle += rng.random_range(-1.2..1.2);
        let len = rng.random_range(side / 16.0..=side / 5.0);
        let steps = (len / 0.5).ceil() as usize;
        for _ in 0..steps {
            y = (y + 0.5 * angle.sin()).clamp(0.0, h - 1.0);
            x = (x + 0.5 * angle.cos()).clamp(0.0, w - 1.0);
            stamp_disc(mask, y, x, radius);
        }
    }
}

fn draw_ellipse(mask: &mut Mask, rng: &mut ChaCha8Rng) {
    let (h, w) = (mask.height(), mask.width());
    let side = h.min(w) as f64;
    let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
    let ay = rng.random_range(1.0..=(side / 8.0).max(1.0));
    let ax = rng.random_range(1.0..=(side / 8.0).max(1.0));
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (s, c) = theta.sin_cos();
    let reach = ay.max(ax).ceil() as isize;
    for y in (cy as isize - reach).max(0)..(cy as isize + reach + 1).min(h as isize) {
        for x in (cx as isize - reach).max(0)..(cx as isize + reach + 1).min(w as isize) {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let u = c * dy + s * dx;
            let v = -s * dy + c * dx;
            if (u / ay).powi(2) + (v / ax).powi(2) <= 1.0 {
                mask.set(y as usize, x as usize, true);
            }
        }
    }
}

/// Smooth synthetic RGB test image: a few low-frequency plane waves plus a
/// soft disc, evaluated analytically so any resolution can be produced.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    waves: Vec<([f64; 3], f64, f64, f64)>,
    base: [f64; 3],
    disc: (f64, f64, f64, [f64; 3]),
}

impl SyntheticScene {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves = (0..3)
            .map(|_| {
                let amp = [0.0; 3].map(|_: f64| rng.random_range(-0.12..0.12));
                let fy = rng.random_range(-1.5..1.5);
                let fx = rng.random_range(-1.5..1.5);
                (amp, fy, fx, rng.random_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        let base = [0.0; 3].map(|_: f64| rng.random_range(0.3..0.7));
        let disc = (
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(0.25..0.5),
            [0.0; 3].map(|_: f64| rng.random_range(-0.2..0.2)),
        );
        Self { waves, base, disc }
    }

    /// Color at normalized `(row, column)` in `[-1,1]²`.
    pub fn color(&self, y: f64, x: f64) -> [f64; 3] {
        let mut c = self.base;
        for (amp, fy, fx, phase) in &self.waves {
            let s = (std::f64::consts::PI * (fy * y + fx * x) + phase).sin();
            for (ch, a) in c.iter_mut().zip(amp) {
                *ch += a * s;
            }
        }
        let (dy, dx, r, tint) = self.disc;
        let d = ((y - dy).powi(2) + (x - dx).powi(2)).sqrt();
        // Smooth step of width 0.15 around the rim.
        let t = ((r - d) / 0.15 + 0.5).clamp(0.0, 1.0);
        let t = t * t * (3.0 - 2.0 * t);
        for (ch, a) in c.iter_mut().zip(tint) {
            *ch += a * t;
        }
        c.map(|v| v.clamp(0.02, 0.98))
    }

    /// Samples the scene at the pixel centers of a `size×size` raster.
    pub fn render(&self, size: usize) -> Result<Image> {
        let grid = make_coord_grid(size, size)?;
        let data = grid
            .coords
            .iter()
            .flat_map(|&[y, x]| self.color(y, x).map(|v| v as f32))
            .collect();
        Image::from_clamped(size, size, 3, data)
    }
}

/// Writes `count` synthetic HR images `hr_XXXX.png` of `size×size` pixels.
pub fn write_synthetic_hr(dir: impl AsRef<Path>, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| DearError::io(dir, e))?;
    (0..count)
        .map(|i| {
            let path = dir.join(format!("hr_{i:04}.png"));
            write_image(&SyntheticScene::new(derive_seed(seed, i as u64)).render(size)?, &path)?;
            Ok(path)
        })
        .collect()
}

/// Independent per-item seed from a run seed.
pub fn derive_seed(seed: u64, item: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(item);
    rng.next_u64()
}

/// Where the masks of a dataset come from.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskSource {
    Generator { coverage: (f64, f64) },
    /// Binary PNGs assigned to images in sorted order (cycling), resized by
    /// nearest neighbor when their size differs from the LR size.
    Directory(PathBuf),
}

/// One line of `manifest.jsonl`. Relative paths resolve against the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub hr_path: PathBuf,
    pub lr_clean_path: PathBuf,
    pub lr_masked_path: PathBuf,
    pub mask_path: PathBuf,
    pub scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| DearError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| DearError::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Builds `out/{lr_clean,lr_masked,mask}/<id>.png` and `out/manifest.jsonl`.
pub fn build_dataset(hr_dir: impl AsRef<Path>, out_dir: impl AsRef<Path>, scale: usize, masks: &MaskSource, seed: u64) -> Result<Manifest> {
    let (hr_dir, out_dir) = (hr_dir.as_ref(), out_dir.as_ref());
    ensure!(scale >= 1, "scale must be a positive integer");
    let hr_files = png_files(hr_dir)?;
    ensure!(!hr_files.is_empty(), "no PNG images in {}", hr_dir.display());
    let mask_files = match masks {
        MaskSource::Directory(dir) => {
            let files = png_files(dir)?;
            ensure!(!files.is_empty(), "no PNG masks in {}", dir.display());
            files
        }
        MaskSource::Generator { .. } => Vec::new(),
    };
    for sub in ["lr_clean", "lr_masked", "mask"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| DearError::io(&d, e))?;
    }
    let first = read_image(&hr_files[0])?;
    let (h0, w0) = (first.height(), first.width());
    ensure!(
        h0 % scale == 0 && w0 % scale == 0,
        "HR size {h0}x{w0} is not divisible by scale {scale}"
    );

    let entries = hr_files
        .par_iter()
        .enumerate()
        .map(|(i, hr_path)| -> Result<ManifestEntry> {
            let hr = read_image(hr_path)?;
            ensure!(
                (hr.height(), hr.width()) == (h0, w0),
                "{} is {}x{}, expected {h0}x{w0}",
                hr_path.display(),
                hr.height(),
                hr.width()
            );
            ensure!(hr.channels() == 3, "{} is not an RGB image", hr_path.display());
            let lr = downsample(&hr, scale)?;
            let (lh, lw) = (lr.height(), lr.width());
            let mask_seed = derive_seed(seed, i as u64);
            let mask = match masks {
                MaskSource::Generator { coverage } => generate_irregular_mask(lh, lw, mask_seed, *coverage)?,
                MaskSource::Directory(_) => {
                    let m = read_mask(&mask_files[i % mask_files.len()])?;
                    if (m.height(), m.width()) == (lh, lw) {
                        m
                    } else {
                        m.resize_nearest(lh, lw)
                    }
                }
            };
            let id = hr_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("{i:05}"));
            let rel = |sub: &str| PathBuf::from(sub).join(format!("{id}.png"));
            // Quantize once so lr_masked is exactly lr_clean with holes.
            write_image(&lr, out_dir.join(rel("lr_clean")))?;
            let lr_q = read_image(out_dir.join(rel("lr_clean")))?;
            write_image(apply_mask(&lr_q, &mask)?.raster(), out_dir.join(rel("lr_masked")))?;
            write_mask(&mask, out_dir.join(rel("mask")))?;
            let hr_abs = fs::canonicalize(hr_path).map_err(|e| DearError::io(hr_path, e))?;
            let (lr_clean_path, lr_masked_path, mask_path) = (rel("lr_clean"), rel("lr_masked"), rel("mask"));
            let generated = matches!(masks, MaskSource::Generator { .. });
            Ok(ManifestEntry {
                id,
                hr_path: hr_abs,
                lr_clean_path,
                lr_masked_path,
                mask_path,
                scale: scale as f64,
                seed: generated.then_some(mask_seed),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let path = out_dir.join(MANIFEST_NAME);
    let mut text = String::new();
    for e in &entries {
        text.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
        text.push('\n');
    }
    fs::write(&path, text).map_err(|e| DearError::io(&path, e))?;
    Ok(Manifest {
        root: out_dir.to_path_buf(),
        entries,
    })
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| DearError::io(path, e))?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| DearError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry =
                serde_json::from_str(&line).map_err(|e| DearError::format(path, format!("line {}: {e}", n + 1)))?;
            entries.push(entry);
        }
        ensure!(!entries.is_empty(), "manifest {} is empty", path.display());
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, entries })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn load_record(&self, i: usize) -> Result<SampleRecord> {
        let e = &self.entries[i];
        let hr = read_image(self.resolve(&e.hr_path))?;
        let lr_clean = read_image(self.resolve(&e.lr_clean_path))?;
        let mask = read_mask(self.resolve(&e.mask_path))?;
        let stored = read_image(self.resolve(&e.lr_masked_path))?;
        SampleRecord::new(e.id.clone(), hr, lr_clean, mask, e.scale, Some(&stored))
    }

    pub fn load_all(&self) -> Result<Vec<SampleRecord>> {
        (0..self.entries.len())
            .into_par_iter()
            .map(|i| self.load_record(i))
            .collect()
    }
}

/// Paired HR / clean LR / masked LR sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub hr: Image,
    pub lr_clean: Image,
    pub lr_masked: MaskedImage,
    pub scale: f64,
}

impl SampleRecord {
    /// Validates shapes and, if given, that a stored masked raster equals the
    /// clean LR with holes (to 8-bit precision).
    pub fn new(id: String, hr: Image, lr_clean: Image, mask: Mask, scale: f64, stored_masked: Option<&Image>) -> Result<Self> {
        ensure!(scale >= 1.0, "scale must be at least 1");
        ensure!(
            (mask.height(), mask.width()) == (lr_clean.height(), lr_clean.width()),
            "mask and LR image of {id} differ in size"
        );
        ensure!(
            (hr.height(), hr.width())
                == (
                    (lr_clean.height() as f64 * scale).round() as usize,
                    (lr_clean.width() as f64 * scale).round() as usize
                ),
            "HR size of {id} does not match LR size times {scale}"
        );
        let lr_masked = apply_mask(&lr_clean, &mask)?;
        if let Some(stored) = stored_masked {
            ensure!(stored.shape() == lr_masked.raster().shape(), "stored masked image of {id} has the wrong shape");
            let worst = stored
                .data()
                .iter()
                .zip(lr_masked.raster().data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            ensure!(worst <= 0.5 / 255.0, "stored masked image of {id} is not the clean LR with holes");
        }
        Ok(Self {
            id,
            hr,
            lr_clean,
            lr_masked,
            scale,
        })
    }

    pub fn mask(&self) -> &Mask {
        self.lr_masked.mask()
    }
}

/// HR pixel centers and colors of `n` pixels drawn without replacement.
pub fn sample_queries(hr: &Image, n: usize, rng: &mut impl Rng) -> Result<(Vec<[f64; 2]>, Vec<[f32; 3]>)> {
    let (h, w) = (hr.height(), hr.width());
    ensure!(n <= h * w, "cannot sample {n} queries from {h}x{w} pixels");
    ensure!(hr.channels() == 3, "query targets must be RGB");
    let mut picks = index::sample(rng, h * w, n).into_vec();
    // Order does not matter for the loss; sorting keeps gathers cache-friendly.
    picks.sort_unstable();
    let coords = picks
        .iter()
        .map(|&p| {
            [
                crate::imaging::pixel_center(p / w, h),
                crate::imaging::pixel_center(p % w, w),
            ]
        })
        .collect();
    let colors = picks
        .iter()
        .map(|&p| {
            let px = hr.pixel(p / w, p % w);
            [px[0], px[1], px[2]]
        })
        .collect();
    Ok((coords, colors))
}

/// One training example inside a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    /// Index into the record list.
    pub record: usize,
    pub coords: Vec<[f64; 2]>,
    pub colors: Vec<[f32; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub items: Vec<BatchItem>,
}

/// Seeded epoch/batch schedule. The stream depends only on the epoch seed and
/// item position, never on how many workers produce it.
pub struct BatchServer<'a> {
    records: &'a [SampleRecord],
    targets: Option<&'a [Image]>,
    batch_size: usize,
    queries: usize,
}

impl<'a> BatchServer<'a> {
    pub fn new(records: &'a [SampleRecord], batch_size: usize, queries: usize) -> Result<Self> {
        ensure!(!records.is_empty(), "no training records");
        ensure!(batch_size >= 1, "batch size must be positive");
        Ok(Self {
            records,
            targets: None,
            batch_size,
            queries,
        })
    }

    /// Samples queries from `targets[i]` instead of each record's HR image.
    pub fn with_targets(mut self, targets: &'a [Image]) -> Self {
        self.targets = Some(targets);
        self
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.records.len().div_ceil(self.batch_size)
    }

    /// All batches of one epoch.
    pub fn epoch(&self, epoch_seed: u64) -> Result<Vec<TrainBatch>> {
        let mut order: Vec<usize> = (0..self.records.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let items = order
            .par_iter()
            .enumerate()
            .map(|(pos, &r)| {
                let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
                rng.set_stream(pos as u64 + 1);
                let hr = self.targets.map_or(&self.records[r].hr, |t| &t[r]);
                let n = self.queries.min(hr.height() * hr.width());
                let (coords, colors) = sample_queries(hr, n, &mut rng)?;
                Ok(BatchItem {
                    record: r,
                    coords,
                    colors,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut batches = Vec::with_capacity(self.batches_per_epoch());
        let mut it = items.into_iter().peekable();
        while it.peek().is_some() {
            batches.push(TrainBatch {
                items: it.by_ref().take(self.batch_size).collect(),
            });
        }
        Ok(batches)
    }
}

/// In-memory synthetic training set: HR at `4×` and `8×` the LR size, the LR
/// image as the `4×` bicubic reduction and one generated mask per image.
#[derive(Clone, Debug)]
pub struct SyntheticSet {
    pub records: Vec<SampleRecord>,
    /// Ground truth at twice the record HR size.
    pub hr_double: Vec<Image>,
}

impl SyntheticSet {
    pub fn new(count: usize, lr_size: usize, coverage: (f64, f64), seed: u64) -> Result<Self> {
        let items = (0..count)
            .into_par_iter()
            .map(|i| {
                let s = derive_seed(seed, i as u64);
                let hr_double = SyntheticScene::new(s).render(lr_size * 8)?;
                let hr = downsample(&hr_double, 2)?;
                let lr = downsample(&hr, 4)?;
                let mask = generate_irregular_mask(lr_size, lr_size, derive_seed(s, 1), coverage)?;
                let rec = SampleRecord::new(format!("synth_{i:04}"), hr, lr, mask, 4.0, None)?;
                Ok((rec, hr_double))
            })
            .collect::<Result<Vec<_>>>()?;
        let (records, hr_double) = items.into_iter().unzip();
        Ok(Self { records, hr_double })
    }
}
