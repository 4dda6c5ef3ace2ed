//! Segmentation-plus-grading model.
//!
//! A stage-wise CNN encoder feeds a feature-pyramid decoder that emits `M`
//! per-pixel probability maps (channel 0 is background).  Image-level label
//! probabilities come from a max-pooling head over the foreground maps with
//! squared (hence non-negative) weights, so every label can only be *pushed
//! up* by lesion evidence.  An auxiliary head grades the image from the
//! encoder alone; running it on the occlusion `image * background_map` is what
//! forces real lesions out of the background channel during training.

pub(crate) mod checkpoint;
mod forward;

pub use forward::ForwardOutputs;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

/// Negative-side slope of the rectifier used throughout encoder and decoder.
pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Number of probability maps, background included (`M >= 2`).
    pub maps: usize,
    /// Number of image-level labels.
    pub labels: usize,
    /// Nominal input size `(height, width)`; inference accepts any size
    /// divisible by `2^depth`.
    pub input: (usize, usize),
    pub in_channels: usize,
    /// Channel width per encoder stage; each stage halves the resolution.
    pub encoder_widths: Vec<usize>,
    /// Channel width of the decoder's lateral/top-down pathway.
    pub decoder_width: usize,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            maps: 6,
            labels: 4,
            input: (64, 64),
            in_channels: 1,
            encoder_widths: vec![16, 32, 64, 128],
            decoder_width: 16,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn depth(&self) -> usize {
        self.encoder_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.maps < 2 {
            return Err(Error::Config(format!(
                "need at least one background and one foreground map, got maps={}",
                self.maps
            )));
        }
        if self.labels == 0 {
            return Err(Error::Config("labels must be positive".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return Err(Error::Config(format!(
                "encoder_widths must be non-empty and positive, got {:?}",
                self.encoder_widths
            )));
        }
        if self.decoder_width == 0 {
            return Err(Error::Config("decoder_width must be positive".into()));
        }
        let div = 1usize << self.depth();
        let (h, w) = self.input;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!(
                "input {}x{} must be divisible by 2^depth = {}",
                h, w, div
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ConvParams<S: Scalar> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

/// All trainable parameters plus the configuration they were built for.
#[derive(Debug, Clone)]
pub struct ModelParams<S: Scalar> {
    cfg: ModelConfig,
    /// One 3x3 stride-2 convolution per encoder stage.
    pub encoder: Vec<ConvParams<S>>,
    /// 1x1 lateral convolutions onto the decoder width.
    pub lateral: Vec<ConvParams<S>>,
    /// Per-level 3x3 heads mapping decoder features to `M` channels.
    pub level_head: Vec<ConvParams<S>>,
    /// Final 3x3 convolution over the concatenated upsampled level maps.
    pub fuse: ConvParams<S>,
    /// Raw classification head weights `[labels, maps-1]`; squared before use.
    pub head_w_raw: Tensor<S>,
    pub head_b: Tensor<S>,
    /// Auxiliary grading head over pooled encoder features.
    pub aux_w: Tensor<S>,
    pub aux_b: Tensor<S>,
    /// Per-label decision cutoffs chosen on validation data, once trained.
    pub cutoffs: Option<Vec<f64>>,
}

impl<S: Scalar> ModelParams<S> {
    /// Fresh parameters: fan-in-scaled uniform convolutions, a small random
    /// fuse layer (maps start close to uniform, but no two map channels are
    /// identical), small positive raw head weights jittered around 0.1 (zero
    /// would be a stationary point of the squared parametrization) and biases
    /// at -2 so initial predictions sit near 0.12.
    ///
    /// The fuse layer and the raw head weights must not be channel-symmetric:
    /// every loss term treats the foreground channels interchangeably, so if
    /// they start identical they receive identical gradients and stay
    /// identical forever — the maps could then never specialize to distinct
    /// pattern kinds.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let depth = cfg.depth();
        let mut encoder = Vec::with_capacity(depth);
        let mut prev = cfg.in_channels;
        for &width in &cfg.encoder_widths {
            encoder.push(conv_init(&mut rng, width, prev, 3)?);
            prev = width;
        }
        let mut lateral = Vec::with_capacity(depth);
        let mut level_head = Vec::with_capacity(depth);
        for &width in &cfg.encoder_widths {
            lateral.push(conv_init(&mut rng, cfg.decoder_width, width, 1)?);
            level_head.push(conv_init(&mut rng, cfg.maps, cfg.decoder_width, 3)?);
        }
        // Quarter-strength relative to the other convolutions keeps the
        // initial maps within a few percent of uniform.
        let mut fuse = conv_init(&mut rng, cfg.maps, depth * cfg.maps, 3)?;
        fuse.w = fuse.w.affine(c::<S>(0.25), S::zero());
        let fg = cfg.maps - 1;
        let head_w_raw = Tensor::leaf(
            &[cfg.labels, fg],
            (0..cfg.labels * fg)
                .map(|_| c::<S>(rng.gen_range(0.07..0.13)))
                .collect::<Vec<S>>(),
        )?;
        let head_b = Tensor::full(&[cfg.labels], c::<S>(-2.0));
        let top = *cfg.encoder_widths.last().unwrap();
        let aux_w = Tensor::zeros(&[cfg.labels, top]);
        let aux_b = Tensor::full(&[cfg.labels], c::<S>(-2.0));
        Ok(ModelParams {
            cfg: cfg.clone(),
            encoder,
            lateral,
            level_head,
            fuse,
            head_w_raw,
            head_b,
            aux_w,
            aux_b,
            cutoffs: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Trainable leaves in a fixed, stable order; the same order is used by
    /// the optimizer and the checkpoint writer.
    pub fn leaves(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        for (i, p) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), p.w.clone()));
            out.push((format!("encoder.{i}.bias"), p.b.clone()));
        }
        for (i, p) in self.lateral.iter().enumerate() {
            out.push((format!("lateral.{i}.weight"), p.w.clone()));
            out.push((format!("lateral.{i}.bias"), p.b.clone()));
        }
        for (i, p) in self.level_head.iter().enumerate() {
            out.push((format!("level_head.{i}.weight"), p.w.clone()));
            out.push((format!("level_head.{i}.bias"), p.b.clone()));
        }
        out.push(("fuse.weight".into(), self.fuse.w.clone()));
        out.push(("fuse.bias".into(), self.fuse.b.clone()));
        out.push(("head.weight_raw".into(), self.head_w_raw.clone()));
        out.push(("head.bias".into(), self.head_b.clone()));
        out.push(("aux.weight".into(), self.aux_w.clone()));
        out.push(("aux.bias".into(), self.aux_b.clone()));
        out
    }

    /// Replace every leaf with new values, in `leaves()` order.
    pub fn set_leaves(&mut self, values: Vec<Tensor<S>>) -> Result<()> {
        let expected = self.leaves();
        if values.len() != expected.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                values.len()
            )));
        }
        for ((name, old), new) in expected.iter().zip(&values) {
            if old.shape() != new.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name}: shape {:?} cannot replace {:?}",
                    new.shape(),
                    old.shape()
                )));
            }
        }
        let mut it = values.into_iter();
        for p in self
            .encoder
            .iter_mut()
            .chain(self.lateral.iter_mut())
            .chain(self.level_head.iter_mut())
        {
            p.w = it.next().unwrap();
            p.b = it.next().unwrap();
        }
        self.fuse.w = it.next().unwrap();
        self.fuse.b = it.next().unwrap();
        self.head_w_raw = it.next().unwrap();
        self.head_b = it.next().unwrap();
        self.aux_w = it.next().unwrap();
        self.aux_b = it.next().unwrap();
        Ok(())
    }
}

fn conv_init<S: Scalar>(
    rng: &mut ChaCha8Rng,
    cout: usize,
    cin: usize,
    k: usize,
) -> Result<ConvParams<S>> {
    let fan_in = (cin * k * k) as f64;
    let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
    let bound = gain * (3.0 / fan_in).sqrt();
    let data: Vec<S> = (0..cout * cin * k * k)
        .map(|_| c::<S>(rng.gen_range(-bound..bound)))
        .collect();
    Ok(ConvParams {
        w: Tensor::leaf(&[cout, cin, k, k], data)?,
        b: Tensor::zeros(&[cout]),
    })
}
