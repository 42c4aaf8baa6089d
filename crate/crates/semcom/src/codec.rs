//! The learned image codec: a four-layer semantic encoder/decoder pair
//! bracketing single-layer channel coders, trained end-to-end through an
//! additive-noise channel.
//!
//! The encoder maps an image to transmitted features `(h, w, c)` with
//! `h = H/4`, `w = W/4` (two stride-2 stages), which are reshaped into
//! complex symbols and power-normalized to unit mean symbol power. The
//! decoder mirrors the encoder with transposed convolutions and a sigmoid
//! output so reconstructions land in `[0, 1]`.
//!
//! Training minimizes the sum-squared reconstruction error plus a total
//! variation smoothness penalty, batch-averaged, with noise at the
//! configured training SNR injected between encoder and decoder.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::ckpt;
use crate::metrics;
use crate::nn::{Activation, Adam, Conv2d, ConvTranspose2d, Layer, Stack, StackTrace};
use crate::seed::derive_seed;
use crate::types::{FeatureTensor, ImageTensor, SemanticTensor, ShapeError, SymbolFrame};

/// Hidden channel width of the convolutional trunk.
const HIDDEN: usize = 16;

const SEED_LAYER: u64 = 0x10;
const SEED_SHUFFLE: u64 = 0x11;
const SEED_NOISE: u64 = 0x12;
const SEED_VAL: u64 = 0x13;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("invalid codec config: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("batch lengths differ: {0} vs {1}")]
    BatchLengthMismatch(usize, usize),
    #[error("image shape {got:?} does not match codec image shape {expected:?}")]
    ImageShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("symbol frame origin {got:?} does not match codec feature shape {expected:?}")]
    FrameShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("non-finite training loss {value} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f64 },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

/// Hyperparameters of one codec instance.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecConfig {
    /// `(H, W, C)` of the images this codec transmits.
    pub image_shape: (usize, usize, usize),
    /// Convolutional depth of the semantic encoder (and decoder). Fixed at 4.
    pub semantic_layers: usize,
    /// Convolutional depth of the channel encoder (and decoder). Fixed at 1.
    pub channel_layers: usize,
    /// `(h, w, c)` of the transmitted features; `h = H/4`, `w = W/4`.
    pub feature_shape: (usize, usize, usize),
    /// Channel SNR in dB used during training.
    pub train_snr_db: f64,
    /// Weight of the total variation term in the training loss.
    pub lambda: f64,
    /// Total variation exponent.
    pub beta: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
}

impl CodecConfig {
    /// Standard configuration for a given image shape: feature grid at a
    /// quarter of the spatial size with 8 channels, so the symbol count is
    /// one sixth of the pixel count for RGB inputs.
    pub fn new(image_shape: (usize, usize, usize), train_snr_db: f64) -> Result<Self, CodecError> {
        let (h, w, _) = image_shape;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(CodecError::InvalidConfig(format!(
                "image height/width must be divisible by 4, got {h}x{w}"
            )));
        }
        let cfg = Self {
            image_shape,
            semantic_layers: 4,
            channel_layers: 1,
            feature_shape: (h / 4, w / 4, 8),
            train_snr_db,
            lambda: 1.0,
            beta: 1.0,
            batch_size: 128,
            learning_rate: 1e-3,
            epochs: 30,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        let (ih, iw, ic) = self.image_shape;
        let (fh, fw, fc) = self.feature_shape;
        if ih == 0 || iw == 0 || ic == 0 {
            return Err(CodecError::InvalidConfig("empty image shape".into()));
        }
        if self.semantic_layers != 4 || self.channel_layers != 1 {
            return Err(CodecError::InvalidConfig(
                "this codec family is fixed at 4 semantic + 1 channel layer".into(),
            ));
        }
        if fh != ih / 4 || fw != iw / 4 || ih % 4 != 0 || iw % 4 != 0 {
            return Err(CodecError::InvalidConfig(format!(
                "feature grid {fh}x{fw} must be a quarter of the {ih}x{iw} image"
            )));
        }
        if fc == 0 || (fh * fw * fc) % 2 != 0 {
            return Err(CodecError::InvalidConfig(
                "feature element count must be even and non-zero".into(),
            ));
        }
        if self.lambda < 0.0 {
            return Err(CodecError::InvalidConfig("lambda must be >= 0".into()));
        }
        if self.beta <= 0.0 {
            return Err(CodecError::InvalidConfig("beta must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(CodecError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(CodecError::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.epochs == 0 {
            return Err(CodecError::InvalidConfig("epochs must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of complex symbols per transmitted frame.
    pub fn num_symbols(&self) -> usize {
        let (h, w, c) = self.feature_shape;
        h * w * c / 2
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone)]
pub struct TrainingReport {
    /// Sample-weighted mean of the batch losses, one entry per epoch.
    pub epoch_losses: Vec<f64>,
    pub wall_seconds: f64,
    /// Reconstruction quality through the training-SNR channel on the
    /// held-back validation slice after the final epoch.
    pub val_psnr_db: metrics::Psnr,
    pub val_ssim: f64,
    pub val_count: usize,
}

/// Total variation of an image: per channel, the sum over pixels of
/// `(dv^2 + dh^2)^(beta/2)` where `dv`/`dh` are the down/right neighbour
/// differences and terms with a missing neighbour contribute zero.
pub fn total_variation(x: &ImageTensor, beta: f64) -> f64 {
    tv_hwc(&x.pixels().view(), beta)
}

/// Gradient of [`total_variation`] with respect to every pixel.
pub fn total_variation_gradient(x: &ImageTensor, beta: f64) -> Array3<f64> {
    tv_grad_hwc(&x.pixels().view(), beta)
}

fn tv_hwc(x: &ndarray::ArrayView3<f64>, beta: f64) -> f64 {
    let (h, w, c) = x.dim();
    let mut total = 0.0;
    for k in 0..c {
        for i in 0..h {
            for j in 0..w {
                let v = x[(i, j, k)];
                let dv = if i + 1 < h { x[(i + 1, j, k)] - v } else { 0.0 };
                let dh = if j + 1 < w { x[(i, j + 1, k)] - v } else { 0.0 };
                let m2 = dv * dv + dh * dh;
                if m2 > 0.0 {
                    total += m2.powf(beta / 2.0);
                }
            }
        }
    }
    total
}

fn tv_grad_hwc(x: &ndarray::ArrayView3<f64>, beta: f64) -> Array3<f64> {
    let (h, w, c) = x.dim();
    let mut g = Array3::<f64>::zeros((h, w, c));
    for k in 0..c {
        for i in 0..h {
            for j in 0..w {
                let v = x[(i, j, k)];
                let dv = if i + 1 < h { x[(i + 1, j, k)] - v } else { 0.0 };
                let dh = if j + 1 < w { x[(i, j + 1, k)] - v } else { 0.0 };
                let m2 = dv * dv + dh * dh;
                if m2 > 0.0 {
                    let coef = beta * m2.powf(beta / 2.0 - 1.0);
                    if i + 1 < h {
                        g[(i + 1, j, k)] += coef * dv;
                        g[(i, j, k)] -= coef * dv;
                    }
                    if j + 1 < w {
                        g[(i, j + 1, k)] += coef * dh;
                        g[(i, j, k)] -= coef * dh;
                    }
                }
            }
        }
    }
    g
}

/// Same total variation over a `(C, H, W)` network-layout array.
pub(crate) fn tv_chw(x: &ndarray::ArrayView3<f64>, beta: f64) -> f64 {
    let (c, h, w) = x.dim();
    let mut total = 0.0;
    for k in 0..c {
        for i in 0..h {
            for j in 0..w {
                let v = x[(k, i, j)];
                let dv = if i + 1 < h { x[(k, i + 1, j)] - v } else { 0.0 };
                let dh = if j + 1 < w { x[(k, i, j + 1)] - v } else { 0.0 };
                let m2 = dv * dv + dh * dh;
                if m2 > 0.0 {
                    total += m2.powf(beta / 2.0);
                }
            }
        }
    }
    total
}

pub(crate) fn tv_grad_chw_accumulate(
    x: &ndarray::ArrayView3<f64>,
    beta: f64,
    weight: f64,
    g: &mut ndarray::ArrayViewMut3<f64>,
) {
    let (c, h, w) = x.dim();
    for k in 0..c {
        for i in 0..h {
            for j in 0..w {
                let v = x[(k, i, j)];
                let dv = if i + 1 < h { x[(k, i + 1, j)] - v } else { 0.0 };
                let dh = if j + 1 < w { x[(k, i, j + 1)] - v } else { 0.0 };
                let m2 = dv * dv + dh * dh;
                if m2 > 0.0 {
                    let coef = weight * beta * m2.powf(beta / 2.0 - 1.0);
                    if i + 1 < h {
                        g[(k, i + 1, j)] += coef * dv;
                        g[(k, i, j)] -= coef * dv;
                    }
                    if j + 1 < w {
                        g[(k, i, j + 1)] += coef * dh;
                        g[(k, i, j)] -= coef * dh;
                    }
                }
            }
        }
    }
}

/// Training loss: batch-mean sum-squared pixel error plus `lambda` times the
/// batch-mean total variation of the reconstructions.
pub fn reconstruction_loss(
    x_batch: &[ImageTensor],
    xhat_batch: &[ImageTensor],
    lambda: f64,
    beta: f64,
) -> Result<f64, CodecError> {
    if x_batch.is_empty() {
        return Err(CodecError::EmptyDataset);
    }
    if x_batch.len() != xhat_batch.len() {
        return Err(CodecError::BatchLengthMismatch(x_batch.len(), xhat_batch.len()));
    }
    let nb = x_batch.len() as f64;
    let mut mse_sum = 0.0;
    let mut tv_sum = 0.0;
    for (x, xhat) in x_batch.iter().zip(xhat_batch) {
        mse_sum += x.squared_error(xhat)?;
        tv_sum += total_variation(xhat, beta);
    }
    Ok(mse_sum / nb + lambda * tv_sum / nb)
}

/// Reshapes features `(h, w, c)` into `N = h*w*c/2` complex symbols and
/// normalizes to unit mean complex power.
///
/// The flatten order is row-major over `(h, w, c)`; the first half of the
/// flattened vector becomes the real parts, the second half the imaginary
/// parts. All-zero frames are passed through unscaled, and tensors already
/// within 1e-12 of unit power are not rescaled, which makes normalization
/// idempotent and the reshape round trip bit-exact.
pub fn features_to_symbols(y_f: &FeatureTensor) -> Result<SymbolFrame, CodecError> {
    let shape = y_f.shape();
    let elems = y_f.len();
    if elems % 2 != 0 {
        return Err(CodecError::Shape(ShapeError::OddElementCount(elems)));
    }
    let n = elems / 2;
    let flat: Vec<f64> = y_f.values().iter().copied().collect();
    let power: f64 = flat.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let scale = if power > 0.0 && (power - 1.0).abs() > 1e-12 {
        power.sqrt()
    } else {
        1.0
    };
    let mut symbols = Array2::<f64>::zeros((n, 2));
    for k in 0..n {
        symbols[(k, 0)] = flat[k] / scale;
        symbols[(k, 1)] = flat[k + n] / scale;
    }
    Ok(SymbolFrame::new(symbols, shape)?)
}

/// Exact inverse of the reshape in [`features_to_symbols`]; the power
/// normalization scale is not undone (decoders are trained on the
/// normalized scale).
pub fn symbols_to_features(y: &SymbolFrame) -> Result<FeatureTensor, CodecError> {
    let shape = y.origin_shape();
    let n = y.num_symbols();
    let mut flat = vec![0.0f64; 2 * n];
    for k in 0..n {
        flat[k] = y.symbols()[(k, 0)];
        flat[k + n] = y.symbols()[(k, 1)];
    }
    let arr = Array3::from_shape_vec(shape, flat)
        .map_err(|_| CodecError::Shape(ShapeError::OddElementCount(2 * n)))?;
    Ok(FeatureTensor::new(arr))
}

/// Reshape-only conversion used where the frame's power is already
/// established (e.g. retransmitting protected features); no rescaling.
pub fn features_to_symbols_unscaled(y_f: &FeatureTensor) -> Result<SymbolFrame, CodecError> {
    let shape = y_f.shape();
    let elems = y_f.len();
    if elems % 2 != 0 {
        return Err(CodecError::Shape(ShapeError::OddElementCount(elems)));
    }
    let n = elems / 2;
    let flat: Vec<f64> = y_f.values().iter().copied().collect();
    let mut symbols = Array2::<f64>::zeros((n, 2));
    for k in 0..n {
        symbols[(k, 0)] = flat[k];
        symbols[(k, 1)] = flat[k + n];
    }
    Ok(SymbolFrame::new(symbols, shape)?)
}

/// The trained encoder/decoder parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedCodec {
    semantic_encoder: Stack,
    channel_encoder: Stack,
    channel_decoder: Stack,
    semantic_decoder: Stack,
    config: CodecConfig,
    seed: u64,
}

impl TrainedCodec {
    /// Builds a codec with freshly initialized (untrained) parameters.
    pub fn init(config: CodecConfig, seed: u64) -> Result<Self, CodecError> {
        config.validate()?;
        let (_, _, c_img) = config.image_shape;
        let (_, _, c_feat) = config.feature_shape;
        let ls = |i: u64| derive_seed(seed, &[SEED_LAYER, i]);
        let semantic_encoder = Stack {
            layers: vec![
                Layer::Conv(Conv2d::init(c_img, HIDDEN, 2, ls(0)), Activation::LeakyRelu(0.2)),
                Layer::Conv(Conv2d::init(HIDDEN, HIDDEN, 2, ls(1)), Activation::LeakyRelu(0.2)),
                Layer::Conv(Conv2d::init(HIDDEN, HIDDEN, 1, ls(2)), Activation::LeakyRelu(0.2)),
                Layer::Conv(Conv2d::init(HIDDEN, HIDDEN, 1, ls(3)), Activation::LeakyRelu(0.2)),
            ],
        };
        let channel_encoder = Stack {
            layers: vec![Layer::Conv(
                Conv2d::init(HIDDEN, c_feat, 1, ls(4)),
                Activation::Linear,
            )],
        };
        let channel_decoder = Stack {
            layers: vec![Layer::Conv(
                Conv2d::init(c_feat, HIDDEN, 1, ls(5)),
                Activation::LeakyRelu(0.2),
            )],
        };
        let semantic_decoder = Stack {
            layers: vec![
                Layer::Conv(Conv2d::init(HIDDEN, HIDDEN, 1, ls(6)), Activation::LeakyRelu(0.2)),
                Layer::ConvT(ConvTranspose2d::init(HIDDEN, HIDDEN, ls(7)), Activation::LeakyRelu(0.2)),
                Layer::ConvT(ConvTranspose2d::init(HIDDEN, HIDDEN, ls(8)), Activation::LeakyRelu(0.2)),
                Layer::Conv(Conv2d::init(HIDDEN, c_img, 1, ls(9)), Activation::Sigmoid),
            ],
        };
        Ok(Self {
            semantic_encoder,
            channel_encoder,
            channel_decoder,
            semantic_decoder,
            config,
            seed,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn train_snr_db(&self) -> f64 {
        self.config.train_snr_db
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn check_image(&self, x: &ImageTensor) -> Result<(), CodecError> {
        if x.shape() != self.config.image_shape {
            return Err(CodecError::ImageShapeMismatch {
                expected: self.config.image_shape,
                got: x.shape(),
            });
        }
        Ok(())
    }

    /// Semantic features `z` for one image.
    pub fn semantic_encode(&self, x: &ImageTensor) -> Result<SemanticTensor, CodecError> {
        self.check_image(x)?;
        let x4 = images_to_batch(std::slice::from_ref(x));
        let trace = self.semantic_encoder.forward(x4);
        let out = trace.output().index_axis(Axis(0), 0).to_owned();
        Ok(SemanticTensor::new(out))
    }

    /// Raw (pre-normalization) transmitted features for a batch, in network
    /// layout `(B, c, h, w)`.
    pub(crate) fn encode_features_batch(&self, xs: &[ImageTensor]) -> Result<Array4<f64>, CodecError> {
        for x in xs {
            self.check_image(x)?;
        }
        let x4 = images_to_batch(xs);
        let z = self.semantic_encoder.forward(x4);
        let f = self.channel_encoder.forward(z.acts.into_iter().last().expect("output"));
        Ok(f.acts.into_iter().last().expect("output"))
    }

    /// Raw transmitted features for one image as an `(h, w, c)` tensor,
    /// before power normalization.
    pub fn encode_features(&self, x: &ImageTensor) -> Result<FeatureTensor, CodecError> {
        let f = self.encode_features_batch(std::slice::from_ref(x))?;
        Ok(chw_to_feature(&f.index_axis(Axis(0), 0).to_owned()))
    }

    /// Encodes an image into power-normalized channel symbols.
    pub fn encode(&self, x: &ImageTensor) -> Result<SymbolFrame, CodecError> {
        Ok(self.encode_batch(std::slice::from_ref(x))?.pop().expect("one frame"))
    }

    /// Batched [`TrainedCodec::encode`].
    pub fn encode_batch(&self, xs: &[ImageTensor]) -> Result<Vec<SymbolFrame>, CodecError> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let f = self.encode_features_batch(xs)?;
        let mut frames = Vec::with_capacity(xs.len());
        for b in 0..xs.len() {
            let feat = chw_to_feature(&f.index_axis(Axis(0), b).to_owned());
            frames.push(features_to_symbols(&feat)?);
        }
        Ok(frames)
    }

    fn check_frame(&self, y: &SymbolFrame) -> Result<(), CodecError> {
        if y.origin_shape() != self.config.feature_shape {
            return Err(CodecError::FrameShapeMismatch {
                expected: self.config.feature_shape,
                got: y.origin_shape(),
            });
        }
        Ok(())
    }

    /// Decodes received symbols back to an image, clamped to `[0, 1]`.
    pub fn decode(&self, y: &SymbolFrame) -> Result<ImageTensor, CodecError> {
        Ok(self.decode_batch(std::slice::from_ref(y))?.pop().expect("one image"))
    }

    /// Batched [`TrainedCodec::decode`].
    pub fn decode_batch(&self, ys: &[SymbolFrame]) -> Result<Vec<ImageTensor>, CodecError> {
        if ys.is_empty() {
            return Ok(Vec::new());
        }
        let mut feats = Vec::with_capacity(ys.len());
        for y in ys {
            self.check_frame(y)?;
            feats.push(symbols_to_features(y)?);
        }
        self.decode_features_batch(&feats)
    }

    /// Decodes received features directly (the receiver path once the
    /// defense has recovered the original feature order).
    pub fn decode_features(&self, y_f: &FeatureTensor) -> Result<ImageTensor, CodecError> {
        Ok(self
            .decode_features_batch(std::slice::from_ref(y_f))?
            .pop()
            .expect("one image"))
    }

    /// Batched [`TrainedCodec::decode_features`].
    pub fn decode_features_batch(&self, feats: &[FeatureTensor]) -> Result<Vec<ImageTensor>, CodecError> {
        if feats.is_empty() {
            return Ok(Vec::new());
        }
        let (fh, fw, fc) = self.config.feature_shape;
        let mut batch = Array4::<f64>::zeros((feats.len(), fc, fh, fw));
        for (b, f) in feats.iter().enumerate() {
            if f.shape() != self.config.feature_shape {
                return Err(CodecError::FrameShapeMismatch {
                    expected: self.config.feature_shape,
                    got: f.shape(),
                });
            }
            let v = f.values();
            for i in 0..fh {
                for j in 0..fw {
                    for k in 0..fc {
                        batch[(b, k, i, j)] = v[(i, j, k)];
                    }
                }
            }
        }
        let t1 = self.channel_decoder.forward(batch);
        let t2 = self
            .semantic_decoder
            .forward(t1.acts.into_iter().last().expect("output"));
        let out = t2.acts.into_iter().last().expect("output");
        let mut images = Vec::with_capacity(feats.len());
        for b in 0..feats.len() {
            let chw = out.index_axis(Axis(0), b).to_owned();
            images.push(ImageTensor::from_unclamped(chw_to_hwc(&chw))?);
        }
        Ok(images)
    }

    /// Encoder forward pass with cached activations, for gradient-based
    /// inversion. Returns the traces and per-sample normalized flat symbol
    /// vectors with their normalization state.
    pub(crate) fn encoder_forward_traces(
        &self,
        x4: Array4<f64>,
    ) -> (StackTrace, StackTrace, Vec<NormState>) {
        let t_sem = self.semantic_encoder.forward(x4);
        let t_ch = self.channel_encoder.forward(t_sem.output().clone());
        let feats = t_ch.output();
        let batch = feats.dim().0;
        let mut norms = Vec::with_capacity(batch);
        for b in 0..batch {
            let chw = feats.index_axis(Axis(0), b);
            let feat_hwc = chw_to_feature_view(&chw.to_owned());
            norms.push(NormState::forward(&feat_hwc));
        }
        (t_sem, t_ch, norms)
    }

    pub(crate) fn semantic_encoder_stack(&self) -> &Stack {
        &self.semantic_encoder
    }

    pub(crate) fn channel_encoder_stack(&self) -> &Stack {
        &self.channel_encoder
    }

    fn stacks(&self) -> [&Stack; 4] {
        [
            &self.semantic_encoder,
            &self.channel_encoder,
            &self.channel_decoder,
            &self.semantic_decoder,
        ]
    }

    fn stacks_mut(&mut self) -> [&mut Stack; 4] {
        [
            &mut self.semantic_encoder,
            &mut self.channel_encoder,
            &mut self.channel_decoder,
            &mut self.semantic_decoder,
        ]
    }

    /// Writes a versioned checkpoint; the parameter round trip is bit-exact.
    pub fn save(&self, path: &Path) -> Result<(), CodecError> {
        let mut w = BufWriter::new(File::create(path)?);
        ckpt::write_header(&mut w, ckpt::KIND_CODEC)?;
        self.write_config(&mut w)?;
        ckpt::write_u64(&mut w, self.seed)?;
        for stack in self.stacks() {
            for p in stack.params() {
                ckpt::write_slice(&mut w, p)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    fn write_config<W: Write>(&self, w: &mut W) -> Result<(), CodecError> {
        let c = &self.config;
        ckpt::write_shape3(w, c.image_shape)?;
        ckpt::write_shape3(w, c.feature_shape)?;
        ckpt::write_u32(w, c.semantic_layers as u32)?;
        ckpt::write_u32(w, c.channel_layers as u32)?;
        ckpt::write_f64(w, c.train_snr_db)?;
        ckpt::write_f64(w, c.lambda)?;
        ckpt::write_f64(w, c.beta)?;
        ckpt::write_u32(w, c.batch_size as u32)?;
        ckpt::write_f64(w, c.learning_rate)?;
        ckpt::write_u32(w, c.epochs as u32)?;
        Ok(())
    }

    fn read_config<R: Read>(r: &mut R) -> Result<CodecConfig, CodecError> {
        let image_shape = ckpt::read_shape3(r)?;
        let feature_shape = ckpt::read_shape3(r)?;
        let semantic_layers = ckpt::read_u32(r)? as usize;
        let channel_layers = ckpt::read_u32(r)? as usize;
        let train_snr_db = ckpt::read_f64(r)?;
        let lambda = ckpt::read_f64(r)?;
        let beta = ckpt::read_f64(r)?;
        let batch_size = ckpt::read_u32(r)? as usize;
        let learning_rate = ckpt::read_f64(r)?;
        let epochs = ckpt::read_u32(r)? as usize;
        Ok(CodecConfig {
            image_shape,
            semantic_layers,
            channel_layers,
            feature_shape,
            train_snr_db,
            lambda,
            beta,
            batch_size,
            learning_rate,
            epochs,
        })
    }

    /// Loads a checkpoint written by [`TrainedCodec::save`].
    pub fn load(path: &Path) -> Result<Self, CodecError> {
        let mut r = BufReader::new(File::open(path)?);
        let kind = ckpt::read_header(&mut r)?;
        if kind != ckpt::KIND_CODEC {
            return Err(CodecError::Io(ckpt::bad("checkpoint is not a codec")));
        }
        let config = Self::read_config(&mut r)?;
        let seed = ckpt::read_u64(&mut r)?;
        let mut codec = Self::init(config, seed)?;
        for stack in codec.stacks_mut() {
            for p in stack.params_mut() {
                ckpt::read_into_slice(&mut r, p)?;
            }
        }
        Ok(codec)
    }
}

/// Power-normalization state for one frame's flattened features, kept so the
/// gradient can be propagated through the normalization.
pub(crate) struct NormState {
    /// Normalized flat vector (length `2N`): the transmitted symbol reals.
    pub y: Vec<f64>,
    pub scale: f64,
}

impl NormState {
    pub fn forward(feat_hwc: &Array3<f64>) -> Self {
        let flat: Vec<f64> = feat_hwc.iter().copied().collect();
        let n = flat.len() / 2;
        let power: f64 = flat.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let scale = if power > 0.0 { power.sqrt() } else { 1.0 };
        let y: Vec<f64> = flat.iter().map(|v| v / scale).collect();
        Self { y, scale }
    }

    /// Maps a gradient w.r.t. the normalized output back to the raw features:
    /// `g_f = (g - y * <g, y> / N) / scale`.
    pub fn backward(&self, g: &[f64]) -> Vec<f64> {
        let n = (self.y.len() / 2) as f64;
        let dot: f64 = g.iter().zip(&self.y).map(|(a, b)| a * b).sum();
        g.iter()
            .zip(&self.y)
            .map(|(gi, yi)| (gi - yi * dot / n) / self.scale)
            .collect()
    }
}

/// Stacks images into a `(B, C, H, W)` batch.
pub(crate) fn images_to_batch(xs: &[ImageTensor]) -> Array4<f64> {
    let (h, w, c) = xs[0].shape();
    let mut out = Array4::<f64>::zeros((xs.len(), c, h, w));
    for (b, x) in xs.iter().enumerate() {
        let p = x.pixels();
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    out[(b, k, i, j)] = p[(i, j, k)];
                }
            }
        }
    }
    out
}

/// `(C, H, W)` to `(H, W, C)`.
pub(crate) fn chw_to_hwc(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut out = Array3::<f64>::zeros((h, w, c));
    for k in 0..c {
        for i in 0..h {
            for j in 0..w {
                out[(i, j, k)] = x[(k, i, j)];
            }
        }
    }
    out
}

/// `(H, W, C)` to `(C, H, W)`.
pub(crate) fn hwc_to_chw(x: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = x.dim();
    let mut out = Array3::<f64>::zeros((c, h, w));
    for i in 0..h {
        for j in 0..w {
            for k in 0..c {
                out[(k, i, j)] = x[(i, j, k)];
            }
        }
    }
    out
}

fn chw_to_feature(x: &Array3<f64>) -> FeatureTensor {
    FeatureTensor::new(chw_to_hwc(x))
}

fn chw_to_feature_view(x: &Array3<f64>) -> Array3<f64> {
    chw_to_hwc(x)
}

/// Jointly trains all four codec components end-to-end through the noisy
/// channel at `config.train_snr_db`.
pub fn train_codec(
    dataset: &[ImageTensor],
    config: &CodecConfig,
    rng_seed: u64,
) -> Result<(TrainedCodec, TrainingReport), CodecError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(CodecError::EmptyDataset);
    }
    for x in dataset {
        if x.shape() != config.image_shape {
            return Err(CodecError::ImageShapeMismatch {
                expected: config.image_shape,
                got: x.shape(),
            });
        }
    }
    let start = Instant::now();
    // Hold back a small validation slice when the corpus is large enough.
    let n_val = if dataset.len() >= 40 {
        (dataset.len() / 10).min(32)
    } else {
        0
    };
    let train = &dataset[..dataset.len() - n_val];
    let val = &dataset[dataset.len() - n_val..];

    let mut codec = TrainedCodec::init(config.clone(), rng_seed)?;
    let sizes: Vec<usize> = codec
        .stacks()
        .iter()
        .flat_map(|s| s.params().iter().map(|p| p.len()).collect::<Vec<_>>())
        .collect();
    let mut opt = Adam::new(config.learning_rate, &sizes);
    let sigma = crate::channel::snr_to_noise_std(config.train_snr_db);

    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle(&mut order, derive_seed(rng_seed, &[SEED_SHUFFLE, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut sample_count = 0usize;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let xs: Vec<ImageTensor> = chunk.iter().map(|&i| train[i].clone()).collect();
            let noise_seed = derive_seed(rng_seed, &[SEED_NOISE, epoch as u64, batch_idx as u64]);
            let loss = train_step(&mut codec, &xs, config, sigma, noise_seed, &mut opt)?;
            if !loss.is_finite() {
                return Err(CodecError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    value: loss,
                });
            }
            loss_sum += loss * xs.len() as f64;
            sample_count += xs.len();
        }
        epoch_losses.push(loss_sum / sample_count as f64);
    }

    // Validation quality through the training-SNR channel.
    let (val_psnr_db, val_ssim, val_count) = if val.is_empty() {
        (metrics::Psnr::Infinite, 1.0, 0)
    } else {
        let frames = codec.encode_batch(val)?;
        let spec = crate::channel::ChannelSpec::awgn(
            config.train_snr_db,
            derive_seed(rng_seed, &[SEED_VAL]),
        );
        let mut received = Vec::with_capacity(frames.len());
        for (i, f) in frames.iter().enumerate() {
            received.push(
                crate::channel::apply_channel(f, &spec.reseeded(derive_seed(spec.seed(), &[i as u64])))
                    .map_err(|e| CodecError::InvalidConfig(e.to_string()))?,
            );
        }
        let decoded = codec.decode_batch(&received)?;
        let mut records = Vec::with_capacity(decoded.len());
        for (x, xhat) in val.iter().zip(&decoded) {
            records.push(
                metrics::quality(x, xhat).map_err(|e| CodecError::InvalidConfig(e.to_string()))?,
            );
        }
        let agg = metrics::aggregate(&records).map_err(|e| CodecError::InvalidConfig(e.to_string()))?;
        (agg.mean_psnr_db, agg.mean_ssim, val.len())
    };

    let report = TrainingReport {
        epoch_losses,
        wall_seconds: start.elapsed().as_secs_f64(),
        val_psnr_db,
        val_ssim,
        val_count,
    };
    Ok((codec, report))
}

/// One optimizer step over a batch; returns the batch loss.
fn train_step(
    codec: &mut TrainedCodec,
    xs: &[ImageTensor],
    config: &CodecConfig,
    sigma: f64,
    noise_seed: u64,
    opt: &mut Adam,
) -> Result<f64, CodecError> {
    let batch = xs.len();
    let nb = batch as f64;
    let (fh, fw, fc) = config.feature_shape;
    let x4 = images_to_batch(xs);

    // forward: encoder stacks
    let t_sem = codec.semantic_encoder.forward(x4.clone());
    let t_ch = codec.channel_encoder.forward(t_sem.output().clone());
    let feats = t_ch.output();

    // per-sample normalization + channel noise
    let mut rng = ChaCha20Rng::seed_from_u64(noise_seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut norms = Vec::with_capacity(batch);
    let mut noisy = Array4::<f64>::zeros((batch, fc, fh, fw));
    for b in 0..batch {
        let chw = feats.index_axis(Axis(0), b).to_owned();
        let hwc = chw_to_hwc(&chw);
        let norm = NormState::forward(&hwc);
        // reshape normalized flat (h,w,c order) back to (c,h,w) with noise
        let mut idx = 0;
        let mut noised = vec![0.0f64; norm.y.len()];
        for v in &norm.y {
            noised[idx] = v + sigma * normal.sample(&mut rng);
            idx += 1;
        }
        let hwc_noisy = Array3::from_shape_vec((fh, fw, fc), noised).expect("shape");
        for i in 0..fh {
            for j in 0..fw {
                for k in 0..fc {
                    noisy[(b, k, i, j)] = hwc_noisy[(i, j, k)];
                }
            }
        }
        norms.push(norm);
    }

    // forward: decoder stacks
    let t_chd = codec.channel_decoder.forward(noisy);
    let t_semd = codec.semantic_decoder.forward(t_chd.output().clone());
    let xhat = t_semd.output();

    // loss and gradient at xhat (network layout)
    let mut loss = 0.0;
    let mut g_xhat = Array4::<f64>::zeros(xhat.raw_dim());
    for b in 0..batch {
        let xb = x4.index_axis(Axis(0), b);
        let xh = xhat.index_axis(Axis(0), b);
        let mut sse = 0.0;
        for (a, r) in xb.iter().zip(xh.iter()) {
            sse += (r - a) * (r - a);
        }
        loss += sse / nb;
        {
            let mut gb = g_xhat.index_axis_mut(Axis(0), b);
            for ((g, a), r) in gb.iter_mut().zip(xb.iter()).zip(xh.iter()) {
                *g = 2.0 * (r - a) / nb;
            }
        }
        let xh3 = xhat.index_axis(Axis(0), b);
        loss += config.lambda * tv_chw(&xh3, config.beta) / nb;
        let mut gb = g_xhat.index_axis_mut(Axis(0), b);
        tv_grad_chw_accumulate(&xh3, config.beta, config.lambda / nb, &mut gb);
    }

    // backward: decoder stacks
    let crate::nn::StackGrads {
        grads: gr_semd,
        input_grad: g_chd_out,
    } = codec.semantic_decoder.backward(&t_semd, g_xhat);
    let crate::nn::StackGrads {
        grads: gr_chd,
        input_grad: g_noisy,
    } = codec.channel_decoder.backward(&t_chd, g_chd_out);

    // backward through noise (identity) and normalization, per sample
    let mut g_feats = Array4::<f64>::zeros((batch, fc, fh, fw));
    for b in 0..batch {
        // gather gradient in (h,w,c) flat order
        let mut g_flat = vec![0.0f64; fh * fw * fc];
        let gb = g_noisy.index_axis(Axis(0), b);
        let mut idx = 0;
        for i in 0..fh {
            for j in 0..fw {
                for k in 0..fc {
                    g_flat[idx] = gb[(k, i, j)];
                    idx += 1;
                }
            }
        }
        let g_raw = norms[b].backward(&g_flat);
        let mut idx = 0;
        for i in 0..fh {
            for j in 0..fw {
                for k in 0..fc {
                    g_feats[(b, k, i, j)] = g_raw[idx];
                    idx += 1;
                }
            }
        }
    }

    // backward: encoder stacks
    let crate::nn::StackGrads {
        grads: gr_che,
        input_grad: g_sem_out,
    } = codec.channel_encoder.backward(&t_ch, g_feats);
    let crate::nn::StackGrads {
        grads: gr_seme, ..
    } = codec.semantic_encoder.backward(&t_sem, g_sem_out);

    // optimizer step over all parameters, in stack order
    let grads_all: Vec<&[f64]> = crate::nn::grad_slices(&gr_seme)
        .into_iter()
        .chain(crate::nn::grad_slices(&gr_che))
        .chain(crate::nn::grad_slices(&gr_chd))
        .chain(crate::nn::grad_slices(&gr_semd))
        .collect();
    let [se, ce, cd, sd] = codec.stacks_mut();
    let mut params_all: Vec<&mut [f64]> = Vec::new();
    params_all.extend(se.params_mut());
    params_all.extend(ce.params_mut());
    params_all.extend(cd.params_mut());
    params_all.extend(sd.params_mut());
    opt.step(&mut params_all, &grads_all);

    Ok(loss)
}

/// Fisher-Yates shuffle driven by a derived seed.
pub(crate) fn shuffle(order: &mut [usize], seed: u64) {
    use rand::Rng;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr3;
    use rand::Rng;

    fn random_image(shape: (usize, usize, usize), seed: u64) -> ImageTensor {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        ImageTensor::new(Array3::from_shape_fn(shape, |_| rng.gen::<f64>())).unwrap()
    }

    #[test]
    fn tv_constant_image_is_zero() {
        for beta in [0.5, 1.0, 2.0] {
            let x = ImageTensor::constant((5, 7, 3), 0.42).unwrap();
            assert_eq!(total_variation(&x, beta), 0.0);
        }
    }

    #[test]
    fn tv_two_by_two_hand_computed() {
        // [[0,1],[0,1]]: per pixel, sqrt(dv^2+dh^2): (0,0): dv=0, dh=1 -> 1;
        // (0,1): dv=0 -> 0; (1,0): dh=1 -> 1; (1,1): 0. Total 2.
        let x = ImageTensor::new(arr3(&[[[0.0], [1.0]], [[0.0], [1.0]]])).unwrap();
        assert!((total_variation(&x, 1.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn tv_gradient_matches_finite_differences() {
        let beta = 1.0;
        for trial in 0..20u64 {
            let x = random_image((8, 8, 1), 100 + trial);
            let g = total_variation_gradient(&x, beta);
            let mut rng = ChaCha20Rng::seed_from_u64(trial);
            for _ in 0..6 {
                let i = rng.gen_range(0..8);
                let j = rng.gen_range(0..8);
                let h = 1e-6;
                let mut xp = x.pixels().clone();
                xp[(i, j, 0)] += h;
                let mut xm = x.pixels().clone();
                xm[(i, j, 0)] -= h;
                let fd = (tv_hwc(&xp.view(), beta) - tv_hwc(&xm.view(), beta)) / (2.0 * h);
                let an = g[(i, j, 0)];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    (fd - an).abs() / denom < 1e-4,
                    "trial {trial} at ({i},{j}): fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn reconstruction_loss_examples() {
        let x = ImageTensor::constant((4, 4, 1), 0.5).unwrap();
        assert_eq!(
            reconstruction_loss(&[x.clone()], &[x.clone()], 1.0, 1.0).unwrap(),
            0.0
        );

        let a = ImageTensor::constant((2, 2, 1), 0.0).unwrap();
        let b = ImageTensor::constant((2, 2, 1), 0.1).unwrap();
        let loss = reconstruction_loss(&[a], &[b], 0.0, 1.0).unwrap();
        assert!((loss - 0.04).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_loss_on_identical_batch_is_lambda_times_tv() {
        let x = random_image((6, 6, 2), 9);
        let lambda = 0.7;
        let loss = reconstruction_loss(&[x.clone()], &[x.clone()], lambda, 1.0).unwrap();
        assert!((loss - lambda * total_variation(&x, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_loss_shape_mismatch_errors() {
        let a = ImageTensor::constant((2, 2, 1), 0.0).unwrap();
        let b = ImageTensor::constant((2, 3, 1), 0.0).unwrap();
        assert!(reconstruction_loss(&[a.clone()], &[b], 1.0, 1.0).is_err());
        assert!(reconstruction_loss(&[a], &[], 1.0, 1.0).is_err());
    }

    #[test]
    fn symbols_reshape_round_trip_and_power() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..50 {
            let raw = FeatureTensor::new(Array3::from_shape_fn((4, 3, 2), |_| {
                rng.gen::<f64>() * 2.0 - 1.0
            }));
            let sym = features_to_symbols(&raw).unwrap();
            assert_eq!(sym.num_symbols(), 12);
            assert!((sym.mean_complex_power() - 1.0).abs() < 1e-9);
            // symbols_to_features . features_to_symbols is the identity on
            // unit-power tensors, bit-exactly
            let unit = symbols_to_features(&sym).unwrap();
            let again = features_to_symbols(&unit).unwrap();
            let back = symbols_to_features(&again).unwrap();
            assert_eq!(sym.symbols(), again.symbols());
            assert_eq!(unit.values(), back.values());
            // recovery up to the single global scale
            let scale = raw.values()[(0, 0, 0)] / unit.values()[(0, 0, 0)];
            for (r, u) in raw.values().iter().zip(unit.values().iter()) {
                assert!((r - u * scale).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn constant_features_normalize_to_unit_power() {
        let f = FeatureTensor::new(Array3::from_elem((2, 2, 2), 2.0));
        let sym = features_to_symbols(&f).unwrap();
        assert_eq!(sym.num_symbols(), 4);
        for k in 0..4 {
            let p = sym.symbols()[(k, 0)].powi(2) + sym.symbols()[(k, 1)].powi(2);
            assert!((p - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn odd_element_count_rejected() {
        let f = FeatureTensor::new(Array3::zeros((3, 1, 1)));
        assert!(matches!(
            features_to_symbols(&f),
            Err(CodecError::Shape(ShapeError::OddElementCount(3)))
        ));
    }

    #[test]
    fn zero_frame_round_trips_to_zero_features() {
        let f = FeatureTensor::zeros((2, 2, 2));
        let sym = features_to_symbols(&f).unwrap();
        let back = symbols_to_features(&sym).unwrap();
        assert_eq!(back.values(), f.values());
    }

    #[test]
    fn encode_is_deterministic_and_unit_power() {
        let cfg = CodecConfig::new((16, 16, 3), 10.0).unwrap();
        let codec = TrainedCodec::init(cfg, 77).unwrap();
        let x = random_image((16, 16, 3), 3);
        let y1 = codec.encode(&x).unwrap();
        let y2 = codec.encode(&x).unwrap();
        assert_eq!(y1.symbols(), y2.symbols());
        assert!((y1.mean_complex_power() - 1.0).abs() < 1e-6);
        assert_eq!(y1.num_symbols(), codec.config().num_symbols());
    }

    #[test]
    fn decode_outputs_clamped_and_deterministic() {
        let cfg = CodecConfig::new((16, 16, 3), 10.0).unwrap();
        let codec = TrainedCodec::init(cfg, 78).unwrap();
        let x = random_image((16, 16, 3), 4);
        let y = codec.encode(&x).unwrap();
        let a = codec.decode(&y).unwrap();
        let b = codec.decode(&y).unwrap();
        assert_eq!(a.pixels(), b.pixels());
        assert!(a.pixels().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn encode_shape_mismatch_errors() {
        let cfg = CodecConfig::new((16, 16, 3), 0.0).unwrap();
        let codec = TrainedCodec::init(cfg, 1).unwrap();
        let x = random_image((8, 8, 3), 2);
        assert!(matches!(
            codec.encode(&x),
            Err(CodecError::ImageShapeMismatch { .. })
        ));
    }

    #[test]
    fn decode_frame_mismatch_errors() {
        let cfg = CodecConfig::new((16, 16, 3), 0.0).unwrap();
        let codec = TrainedCodec::init(cfg, 1).unwrap();
        let frame = SymbolFrame::new(Array2::zeros((8, 2)), (2, 2, 4)).unwrap();
        assert!(matches!(
            codec.decode(&frame),
            Err(CodecError::FrameShapeMismatch { .. })
        ));
    }

    #[test]
    fn train_codec_rejects_empty_dataset() {
        let cfg = CodecConfig::new((16, 16, 3), 10.0).unwrap();
        assert!(matches!(
            train_codec(&[], &cfg, 0),
            Err(CodecError::EmptyDataset)
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = CodecConfig::new((16, 16, 3), 20.0).unwrap();
        let codec = TrainedCodec::init(cfg, 99).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codec.ckpt");
        codec.save(&path).unwrap();
        let loaded = TrainedCodec::load(&path).unwrap();
        assert_eq!(codec, loaded);
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut cfg = CodecConfig::new((16, 16, 3), 0.0).unwrap();
        cfg.lambda = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = CodecConfig::new((16, 16, 3), 0.0).unwrap();
        cfg.beta = 0.0;
        assert!(cfg.validate().is_err());
        assert!(CodecConfig::new((15, 16, 3), 0.0).is_err());
    }
}
