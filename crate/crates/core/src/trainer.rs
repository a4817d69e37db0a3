//! End-to-end optimization: `L = L1_hr + λ·L1_lr` with Adam and a step-halving
//! learning rate, per-epoch metrics and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::checkpoint::{Checkpoint, RngState};
use crate::config::ModelConfig;
use crate::dataset::{BatchItem, BatchServer, SampleRecord, TrainBatch};
use crate::error::{ensure, DearError, Result};
use crate::implicit::build_queries;
use crate::model::{DearModel, DearNet, ModelInput};
use crate::nn::{Bound, ParamStore};

/// Training hyper-parameters and model switches; read from a flat TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub lr_halve_every: usize,
    pub batch_size: usize,
    /// Weight of the LR reconstruction term.
    pub l2_weight: f64,
    /// HR queries sampled per image and step.
    pub queries: usize,
    pub seed: u64,
    pub workers: usize,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    /// Experimental: train on targets resized to a random scale in `[1, scale]`.
    pub multi_scale: bool,
    pub checkpoint_every: usize,
    pub keep_checkpoints: usize,
    #[serde(flatten)]
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 200,
            lr_halve_every: 100,
            batch_size: 16,
            l2_weight: 0.01,
            queries: 2048,
            seed: 0,
            workers: 1,
            grad_clip: 0.0,
            multi_scale: false,
            checkpoint_every: 1,
            keep_checkpoints: 2,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        ensure!(self.lr > 0.0 && self.lr.is_finite(), "lr must be positive");
        ensure!((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2), "betas must lie in [0, 1)");
        ensure!(self.eps > 0.0, "eps must be positive");
        ensure!(self.lr_halve_every >= 1, "lr_halve_every must be positive");
        ensure!(self.batch_size >= 1, "batch_size must be positive");
        ensure!(self.l2_weight >= 0.0, "l2_weight must be nonnegative");
        ensure!(self.queries >= 1, "queries must be positive");
        ensure!(self.grad_clip >= 0.0, "grad_clip must be nonnegative");
        ensure!(self.checkpoint_every >= 1, "checkpoint_every must be positive");
        ensure!(self.keep_checkpoints >= 1, "keep_checkpoints must be positive");
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| DearError::invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| DearError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            DearError::InvalidArgument(m) => DearError::format(path, m),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("training config serializes")
    }

    /// `lr · 0.5^⌊epoch / lr_halve_every⌋`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * 0.5f64.powi((epoch / self.lr_halve_every) as i32)
    }
}

/// Scalar loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub l1_hr: f64,
    pub l1_lr: f64,
}

impl LossValues {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.l1_hr.is_finite() && self.l1_lr.is_finite()
    }
}

/// Loss nodes of one image.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub l1_hr: Var,
    pub l1_lr: Option<Var>,
}

/// Builds the loss of one image on `g`: mean absolute color error over the
/// queries plus `l2_weight` times the mean absolute error of the LR
/// reconstruction against the clean LR image (zero without the importance
/// branch).
#[allow(clippy::too_many_arguments)]
pub fn loss_graph<T: Real>(
    g: &mut Graph<T>,
    net: &DearNet,
    p: &Bound,
    input: &ModelInput<T>,
    lr_clean: &Tensor<T>,
    coords: &[[f64; 2]],
    colors: &[[f32; 3]],
    l2_weight: f64,
) -> Result<LossVars> {
    ensure!(coords.len() == colors.len() && !coords.is_empty(), "queries and colors must be nonempty and paired");
    let emb = net.embed(g, p, input)?;
    let q = build_queries((input.height, input.width), coords, net.config.ensemble)?;
    let (_, pred) = net.decode_queries(g, p, &emb, &q)?;
    let target = Tensor::from_parts(&[colors.len(), 3], colors.iter().flatten().map(|&v| T::lit(v as f64)).collect());
    let l1_hr = g.mean_abs_error(pred, &target)?;
    match emb.recon {
        Some(recon) => {
            let l1_lr = g.mean_abs_error(recon, lr_clean)?;
            let total = g.weighted_sum(l1_hr, T::one(), l1_lr, T::lit(l2_weight))?;
            Ok(LossVars {
                total,
                l1_hr,
                l1_lr: Some(l1_lr),
            })
        }
        None => Ok(LossVars {
            total: l1_hr,
            l1_hr,
            l1_lr: None,
        }),
    }
}

fn read_losses<T: Real>(g: &Graph<T>, v: &LossVars) -> LossValues {
    LossValues {
        total: g.value(v.total).item().as_f64(),
        l1_hr: g.value(v.l1_hr).item().as_f64(),
        l1_lr: v.l1_lr.map_or(0.0, |l| g.value(l).item().as_f64()),
    }
}

/// Loss of a batch (mean over items) without gradients.
pub fn compute_loss(model: &DearModel, records: &[SampleRecord], batch: &TrainBatch, l2_weight: f64) -> Result<LossValues> {
    let per_item: Vec<LossValues> = batch
        .items
        .iter()
        .map(|item| {
            let (g, _, vars) = item_graph(model, &records[item.record], item, l2_weight, false)?;
            Ok(read_losses(&g, &vars))
        })
        .collect::<Result<_>>()?;
    Ok(mean_losses(&per_item))
}

fn mean_losses(v: &[LossValues]) -> LossValues {
    let n = v.len().max(1) as f64;
    LossValues {
        total: v.iter().map(|l| l.total).sum::<f64>() / n,
        l1_hr: v.iter().map(|l| l.l1_hr).sum::<f64>() / n,
        l1_lr: v.iter().map(|l| l.l1_lr).sum::<f64>() / n,
    }
}

fn item_graph(
    model: &DearModel,
    record: &SampleRecord,
    item: &BatchItem,
    l2_weight: f64,
    trainable: bool,
) -> Result<(Graph<f32>, Bound, LossVars)> {
    let input = ModelInput::new(&record.lr_masked, model.config())?;
    let lr_clean = record.lr_clean.to_tensor::<f32>();
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, trainable);
    let vars = loss_graph(&mut g, &model.net, &p, &input, &lr_clean, &item.coords, &item.colors, l2_weight)?;
    Ok((g, p, vars))
}

/// Loss and parameter gradients of one image.
fn item_gradients(model: &DearModel, record: &SampleRecord, item: &BatchItem, l2_weight: f64) -> Result<(LossValues, Vec<Tensor<f32>>)> {
    let (g, p, vars) = item_graph(model, record, item, l2_weight, true)?;
    let losses = read_losses(&g, &vars);
    let mut grads = g.backward(vars.total);
    let tensors = model
        .params
        .tensors()
        .iter()
        .zip(p.vars())
        .map(|(t, v)| {
            v.and_then(|v| grads.take(v))
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();
    Ok((losses, tensors))
}

/// Adam moments and step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected Adam update.
    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &[Tensor<f32>], lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (cfg.eps * c2.sqrt()) as f32;
        let (b1, b2) = (b1 as f32, b2 as f32);
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / (v.sqrt() + eps);
            }
        }
    }
}

/// Per-epoch metrics row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub losses: LossValues,
    pub lr: f64,
    pub wall_s: f64,
}

pub const METRICS_HEADER: &str = "epoch,total,l1_hr,l1_lr,lr,wall_s";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3}",
            self.epoch, self.losses.total, self.losses.l1_hr, self.losses.l1_lr, self.lr, self.wall_s
        )
    }
}

/// Optional per-step observer (e.g. progress logging).
pub type StepHook<'a> = dyn FnMut(usize, &LossValues) + 'a;

/// Training state: model, optimizer, schedule position and RNG.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: DearModel,
    pub adam: AdamState,
    /// Number of completed epochs.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochMetrics>,
    pool: rayon::ThreadPool,
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| DearError::invalid(format!("cannot start worker pool: {e}")))
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = DearModel::new(&config.model, config.seed)?;
        let adam = AdamState::new(&model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            pool: thread_pool(config.workers)?,
            config,
            model,
            adam,
            epoch: 0,
            rng,
            history: Vec::new(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        let model = DearModel::with_params(&ckpt.config.model, ckpt.params)?;
        ensure!(
            ckpt.adam_m.len() == model.params.len() && ckpt.adam_v.len() == model.params.len(),
            "optimizer state does not match the parameters"
        );
        Ok(Self {
            pool: thread_pool(ckpt.config.workers)?,
            config: ckpt.config,
            model,
            adam: AdamState {
                step: ckpt.adam_step,
                m: ckpt.adam_m,
                v: ckpt.adam_v,
            },
            epoch: ckpt.epoch,
            rng: ckpt.rng.restore(),
            history: ckpt.history,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            epoch: self.epoch,
            rng: RngState::capture(&self.rng),
            history: self.history.clone(),
            params: self.model.params.clone(),
            adam_step: self.adam.step,
            adam_m: self.adam.m.clone(),
            adam_v: self.adam.v.clone(),
        }
    }

    /// Mean loss and gradient over a batch; per-image gradients are summed
    /// in item order so the result is independent of the worker count.
    pub fn batch_gradients(&self, records: &[SampleRecord], batch: &TrainBatch) -> Result<(LossValues, Vec<Tensor<f32>>)> {
        let parts: Vec<Result<(LossValues, Vec<Tensor<f32>>)>> = self.pool.install(|| {
            batch
                .items
                .par_iter()
                .map(|item| item_gradients(&self.model, &records[item.record], item, self.config.l2_weight))
                .collect()
        });
        let mut losses = Vec::with_capacity(parts.len());
        let mut sum: Option<Vec<Tensor<f32>>> = None;
        for part in parts {
            let (l, g) = part?;
            losses.push(l);
            match &mut sum {
                None => sum = Some(g),
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
            }
        }
        let mut grads = sum.unwrap_or_default();
        let inv = 1.0 / batch.items.len() as f32;
        grads.iter_mut().for_each(|t| t.scale_assign(inv));
        Ok((mean_losses(&losses), grads))
    }

    fn clip(&self, grads: &mut [Tensor<f32>]) {
        if self.config.grad_clip <= 0.0 {
            return;
        }
        let norm = grads
            .iter()
            .flat_map(|t| t.data())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if norm > self.config.grad_clip {
            let s = (self.config.grad_clip / norm) as f32;
            grads.iter_mut().for_each(|t| t.scale_assign(s));
        }
    }

    /// HR targets for multi-scale training: each record's HR resized to a
    /// random scale in `[1, record scale]`.
    fn epoch_targets(&self, records: &[SampleRecord], epoch_seed: u64) -> Result<Option<Vec<crate::imaging::Image>>> {
        use rand::Rng;
        if !self.config.multi_scale {
            return Ok(None);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
        rng.set_stream(u64::MAX);
        let s: f64 = rng.random_range(1.0..=records[0].scale);
        records
            .iter()
            .map(|r| {
                let h = (r.lr_clean.height() as f64 * s).round() as usize;
                let w = (r.lr_clean.width() as f64 * s).round() as usize;
                crate::imaging::resize_bicubic(&r.hr, h, w)
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Runs one epoch and returns its metrics.
    pub fn run_epoch(&mut self, records: &[SampleRecord], hook: Option<&mut StepHook<'_>>) -> Result<EpochMetrics> {
        let start = Instant::now();
        let epoch_seed = self.rng.next_u64();
        let targets = self.epoch_targets(records, epoch_seed)?;
        let mut server = BatchServer::new(records, self.config.batch_size, self.config.queries)?;
        if let Some(t) = &targets {
            server = server.with_targets(t);
        }
        let batches = self.pool.install(|| server.epoch(epoch_seed))?;
        let lr = self.config.lr_at(self.epoch);
        let mut losses = Vec::with_capacity(batches.len());
        let mut hook = hook;
        for (bi, batch) in batches.iter().enumerate() {
            let (l, mut grads) = self.batch_gradients(records, batch)?;
            let finite = l.is_finite() && grads.iter().all(Tensor::all_finite);
            if !finite {
                return Err(self.divergence(bi, &l));
            }
            self.clip(&mut grads);
            self.adam.update(&mut self.model.params, &grads, lr, &self.config);
            if let Some(h) = hook.as_deref_mut() {
                h(self.adam.step as usize, &l);
            }
            losses.push(l);
        }
        if !self.model.params.tensors().iter().all(Tensor::all_finite) {
            return Err(self.divergence(batches.len(), &mean_losses(&losses)));
        }
        let m = EpochMetrics {
            epoch: self.epoch,
            losses: mean_losses(&losses),
            lr,
            wall_s: start.elapsed().as_secs_f64(),
        };
        self.epoch += 1;
        self.history.push(m);
        Ok(m)
    }

    fn divergence(&self, batch: usize, l: &LossValues) -> DearError {
        let norms: Vec<String> = self
            .model
            .params
            .names()
            .iter()
            .zip(self.model.params.tensors())
            .filter(|(_, t)| !t.all_finite())
            .map(|(n, _)| n.clone())
            .collect();
        DearError::Divergence(format!(
            "non-finite loss or gradient at epoch {} batch {batch} (step {}): total={} l1_hr={} l1_lr={}; \
             lr={}; non-finite parameters: {}",
            self.epoch,
            self.adam.step,
            l.total,
            l.l1_hr,
            l.l1_lr,
            self.config.lr_at(self.epoch),
            if norms.is_empty() { "none".to_string() } else { norms.join(", ") }
        ))
    }

    /// Trains until `config.epochs` epochs are complete, writing metrics and
    /// checkpoints under `out_dir` if given.
    pub fn train(&mut self, records: &[SampleRecord], out_dir: Option<&Path>, mut hook: Option<&mut StepHook<'_>>) -> Result<()> {
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir.join(CHECKPOINT_DIR)).map_err(|e| DearError::io(dir, e))?;
            self.write_metrics(dir)?;
        }
        while self.epoch < self.config.epochs {
            let m = match self.run_epoch(records, hook.as_deref_mut()) {
                Ok(m) => m,
                Err(e @ DearError::Divergence(_)) => {
                    if let Some(dir) = out_dir {
                        let dump = dir.join("divergence.txt");
                        let _ = fs::write(&dump, format!("{e}\n"));
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            log::info!(
                "epoch {} total {:.6} l1_hr {:.6} l1_lr {:.6} lr {:.3e}",
                m.epoch,
                m.losses.total,
                m.losses.l1_hr,
                m.losses.l1_lr,
                m.lr
            );
            if let Some(dir) = out_dir {
                self.write_metrics(dir)?;
                if self.epoch % self.config.checkpoint_every == 0 || self.epoch == self.config.epochs {
                    self.save_rotating(dir)?;
                }
            }
        }
        Ok(())
    }

    pub fn write_metrics(&self, dir: &Path) -> Result<()> {
        let mut text = String::from(METRICS_HEADER);
        text.push('\n');
        for m in &self.history {
            text.push_str(&m.csv_row());
            text.push('\n');
        }
        let path = dir.join(METRICS_FILE);
        fs::write(&path, text).map_err(|e| DearError::io(&path, e))
    }

    /// Writes `checkpoints/epoch_NNNNNN.ckpt`, keeping only the newest few.
    pub fn save_rotating(&self, dir: &Path) -> Result<PathBuf> {
        let ckdir = dir.join(CHECKPOINT_DIR);
        let path = ckdir.join(format!("epoch_{:06}.ckpt", self.epoch));
        self.checkpoint().save(&path)?;
        let mut existing = list_checkpoints(&ckdir)?;
        while existing.len() > self.config.keep_checkpoints {
            let old = existing.remove(0);
            fs::remove_file(&old).map_err(|e| DearError::io(&old, e))?;
        }
        Ok(path)
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Checkpoint files of a directory, oldest first.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| DearError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ckpt"))
        .collect();
    files.sort();
    Ok(files)
}
