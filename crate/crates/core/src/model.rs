//! Model assembly: feature extraction, unmask attention, importance branch
//! and the implicit decoder, plus whole-image rendering at arbitrary scale.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention::AttentionConfig;
use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::config::ModelConfig;
use crate::error::{ensure, Result};
use crate::features::{prepare_input, FeatureExtractor, FeatureMap, FeatureVars, LatentMap, PixelKernelField};
use crate::imaging::{make_coord_grid, Image, Mask, MaskedImage};
use crate::implicit::{build_queries, Mlp, QueryBatch};
use crate::importance::{ImportanceBranch, ImportanceMap, ReconKernelField};
use crate::nn::{Bound, Initializer, ParamStore};

/// Default number of queries evaluated per rendering chunk.
pub const DEFAULT_CHUNK: usize = 4096;

/// Layer layout; parameter values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct DearNet {
    pub config: ModelConfig,
    features: FeatureExtractor,
    importance: Option<ImportanceBranch>,
    mlp: Mlp,
}

/// A masked LR image prepared for the network.
#[derive(Clone, Debug)]
pub struct ModelInput<T> {
    /// Zero-padded encoder input (RGB plus optional mask channel).
    pub encoder_input: Tensor<T>,
    /// Unpadded `3×H×W` masked raster.
    pub raster: Tensor<T>,
    pub mask: Mask,
    pub height: usize,
    pub width: usize,
}

impl<T: Real> ModelInput<T> {
    pub fn new(masked: &MaskedImage, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            encoder_input: prepare_input(masked, cfg.mask_channel)?,
            raster: masked.raster().to_tensor(),
            mask: masked.mask().clone(),
            height: masked.height(),
            width: masked.width(),
        })
    }
}

/// Per-pixel quantities the decoder reads.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingVars {
    pub features: FeatureVars,
    /// `E`, or `F` itself with attention disabled.
    pub attention: Var,
    /// `1×H×W`; all ones with the importance branch disabled.
    pub importance: Var,
    pub recon_kernels: Option<Var>,
    /// Reconstructed LR image `Î` (`3×H×W`).
    pub recon: Option<Var>,
}

impl DearNet {
    /// Builds the layout and freshly initialized parameters.
    pub fn new<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Initializer {
            store: &mut store,
            rng: &mut rng,
        };
        let features = FeatureExtractor::new(&mut init, cfg);
        let importance = cfg.pim.then(|| ImportanceBranch::new(&mut init, cfg));
        let mlp = Mlp::new(&mut init, cfg);
        Ok((
            Self {
                config: cfg.clone(),
                features,
                importance,
                mlp,
            },
            store,
        ))
    }

    pub fn attention_config(&self) -> AttentionConfig {
        AttentionConfig {
            budget: self.config.attention_budget,
            key_stride: self.config.attention_key_stride,
        }
    }

    /// Everything up to the per-pixel decoder inputs.
    pub fn embed<T: Real>(&self, g: &mut Graph<T>, p: &Bound, input: &ModelInput<T>) -> Result<EmbeddingVars> {
        let (h, w) = (input.height, input.width);
        let x = g.constant(input.encoder_input.clone());
        let features = self.features.forward(g, p, x, h, w)?;
        let attention = if self.config.use_attention {
            g.unmask_attend(features.features, &input.mask, self.attention_config())?
        } else {
            features.features
        };
        let (importance, recon_kernels, recon) = match (&self.importance, features.branch_latent) {
            (Some(branch), Some(latent)) => {
                let kernels = branch.predict_kernels(g, p, latent, h, w)?;
                let raster = g.constant(input.raster.clone());
                let recon = g.reconstruct_lr(raster, kernels, branch.kernel_size())?;
                let imp = branch.importance(g, p, kernels)?;
                (imp, Some(kernels), Some(recon))
            }
            _ => (g.constant(Tensor::full(&[1, h, w], T::one())), None, None),
        };
        Ok(EmbeddingVars {
            features,
            attention,
            importance,
            recon_kernels,
            recon,
        })
    }

    /// Per-neighbor colors (`4N×3`) and blended colors (`N×3`).
    pub fn decode_queries<T: Real>(&self, g: &mut Graph<T>, p: &Bound, emb: &EmbeddingVars, q: &QueryBatch) -> Result<(Var, Var)> {
        self.mlp
            .predict(g, p, emb.features.features, emb.attention, emb.importance, q)
    }

    pub fn importance_branch(&self) -> Option<&ImportanceBranch> {
        self.importance.as_ref()
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    /// True for parameters the decoder MLP reads.
    pub fn is_decoder_param(name: &str) -> bool {
        name.starts_with("mlp.")
    }
}

/// Materialized per-pixel decoder inputs of one image.
#[derive(Clone, Debug)]
pub struct Embedding<T> {
    pub features: FeatureMap<T>,
    pub attention: FeatureMap<T>,
    pub importance: ImportanceMap<T>,
}

/// A network layout together with its parameters.
#[derive(Clone, Debug)]
pub struct DearModel {
    pub net: DearNet,
    pub params: ParamStore<f32>,
}

impl DearModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let (net, params) = DearNet::new(cfg, seed)?;
        Ok(Self { net, params })
    }

    /// Rebuilds the layout for `cfg` and installs `params`.
    pub fn with_params(cfg: &ModelConfig, params: ParamStore<f32>) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        model.params.load_from(&params)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    /// Scalar parameter counts per top-level component.
    pub fn parameter_report(&self) -> BTreeMap<String, usize> {
        let mut report = BTreeMap::new();
        for (name, t) in self.params.names().iter().zip(self.params.tensors()) {
            let group = name.split('.').next().unwrap_or(name).to_string();
            *report.entry(group).or_insert(0) += t.numel();
        }
        report
    }

    fn with_graph<R>(&self, masked: &MaskedImage, f: impl FnOnce(&mut Graph<f32>, &Bound, &ModelInput<f32>) -> Result<R>) -> Result<R> {
        let input = ModelInput::new(masked, self.config())?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        f(&mut g, &p, &input)
    }

    /// Latent `Z` of the main encoder.
    pub fn encode(&self, masked: &MaskedImage) -> Result<LatentMap<f32>> {
        self.with_graph(masked, |g, p, input| {
            let x = g.constant(input.encoder_input.clone());
            let z = self.net.features.encode(g, p, x)?;
            Ok(LatentMap(g.value(z).clone()))
        })
    }

    /// Low-pass and high-pass kernel fields, if the model filters its latent.
    pub fn predict_filter_kernels(
        &self,
        masked: &MaskedImage,
    ) -> Result<Option<(PixelKernelField<f32>, PixelKernelField<f32>)>> {
        let k = self.config().filter_kernel;
        self.with_graph(masked, |g, p, input| {
            let fv = self.net.embed(g, p, input)?.features;
            match (fv.lowpass, fv.highpass) {
                (Some(lo), Some(hi)) => Ok(Some((
                    PixelKernelField::new(g.value(lo).clone(), k)?,
                    PixelKernelField::new(g.value(hi).clone(), k)?,
                ))),
                _ => Ok(None),
            }
        })
    }

    pub fn predict_highpass(&self, masked: &MaskedImage) -> Result<Option<PixelKernelField<f32>>> {
        Ok(self.predict_filter_kernels(masked)?.map(|(_, hi)| hi))
    }

    /// Decodes a latent to a `height×width` feature map.
    pub fn decode(&self, latent: &LatentMap<f32>, height: usize, width: usize) -> Result<FeatureMap<f32>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let z = g.constant(latent.0.clone());
        let f = self.net.features.decode(&mut g, &p, z, height, width)?;
        Ok(FeatureMap(g.value(f).clone()))
    }

    pub fn extract_features(&self, masked: &MaskedImage) -> Result<FeatureMap<f32>> {
        Ok(self.embedding(masked)?.features)
    }

    /// Reconstruction kernels, if the model has the importance branch.
    pub fn predict_recon_kernels(&self, masked: &MaskedImage) -> Result<Option<ReconKernelField<f32>>> {
        self.with_graph(masked, |g, p, input| {
            let emb = self.net.embed(g, p, input)?;
            Ok(emb.recon_kernels.map(|k| ReconKernelField {
                weights: g.value(k).clone(),
                kernel_size: self.config().recon_kernel,
            }))
        })
    }

    pub fn embedding(&self, masked: &MaskedImage) -> Result<Embedding<f32>> {
        self.with_graph(masked, |g, p, input| {
            let emb = self.net.embed(g, p, input)?;
            Ok(Embedding {
                features: FeatureMap(g.value(emb.features.features).clone()),
                attention: FeatureMap(g.value(emb.attention).clone()),
                importance: ImportanceMap(g.value(emb.importance).clone()),
            })
        })
    }

    /// Colors at arbitrary coordinates, evaluated in chunks of `chunk`.
    pub fn query(&self, emb: &Embedding<f32>, coords: &[[f64; 2]], chunk: usize) -> Result<Vec<[f32; 3]>> {
        ensure!(chunk >= 1, "chunk size must be positive");
        let (_, h, w) = emb.features.0.dims3()?;
        let parts: Vec<Result<Vec<[f32; 3]>>> = coords
            .par_chunks(chunk)
            .map(|cs| {
                let q = build_queries((h, w), cs, self.config().ensemble)?;
                let mut g = Graph::new();
                let p = self.params.bind_where(&mut g, false, DearNet::is_decoder_param);
                let f = g.constant(emb.features.0.clone());
                let e = g.constant(emb.attention.0.clone());
                let wv = g.constant(emb.importance.0.clone());
                let (_, colors) = self.net.mlp.predict(&mut g, &p, f, e, wv, &q)?;
                Ok(g.value(colors).data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
            })
            .collect();
        let mut out = Vec::with_capacity(coords.len());
        for part in parts {
            out.extend(part?);
        }
        Ok(out)
    }

    /// Completed image of size `⌊sH⌋×⌊sW⌋`, clamped to `[0,1]`.
    pub fn render(&self, masked: &MaskedImage, scale: f64, chunk: usize) -> Result<Image> {
        let (oh, ow) = output_size(masked.height(), masked.width(), scale)?;
        let emb = self.embedding(masked)?;
        self.render_embedding(&emb, oh, ow, chunk)
    }

    pub fn render_embedding(&self, emb: &Embedding<f32>, height: usize, width: usize, chunk: usize) -> Result<Image> {
        let grid = make_coord_grid(height, width)?;
        let colors = self.query(emb, &grid.coords, chunk)?;
        Image::from_clamped(height, width, 3, colors.into_iter().flatten().collect())
    }
}

/// `⌊sH⌋×⌊sW⌋`, tolerant to representation error in `s`.
pub fn output_size(height: usize, width: usize, scale: f64) -> Result<(usize, usize)> {
    ensure!(scale.is_finite() && scale >= 1.0, "scale must be at least 1, got {scale}");
    let side = |n: usize| (n as f64 * scale + 1e-9).floor() as usize;
    Ok((side(height), side(width)))
}
