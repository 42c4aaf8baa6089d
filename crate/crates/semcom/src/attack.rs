//! The eavesdropper's two reconstruction attacks.
//!
//! White box: Eve knows the encoder parameters and recovers the image by
//! gradient descent on the input of `||y_e - f(x)||^2 + lambda * T(x)`,
//! starting from an all-zero image.
//!
//! Black box: Eve trains an inverse network (upsampling plus two
//! convolutions) on (image, eavesdropped-symbol) pairs she captured, then
//! reconstructs any new frame with a single forward pass.

use std::path::Path;

use ndarray::{Array3, Array4, Axis};
use thiserror::Error;

use crate::channel::{apply_channel, ChannelError, ChannelSpec};
use crate::ckpt;
use crate::codec::{
    self, hwc_to_chw, images_to_batch, symbols_to_features, tv_chw, tv_grad_chw_accumulate,
    CodecError, TrainedCodec,
};
use crate::nn::{Activation, Adam, Conv2d, Layer, Stack, Upsample};
use crate::seed::derive_seed;
use crate::types::{FeatureTensor, ImageTensor, ShapeError, SymbolFrame};

const SEED_SHUFFLE: u64 = 0x20;
const SEED_CAPTURE: u64 = 0x21;
const SEED_NET: u64 = 0x22;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error("attack dataset is empty")]
    EmptyDataset,
    #[error("dataset has {images} images but {eavesdrops} eavesdropped frames")]
    MisalignedDataset { images: usize, eavesdrops: usize },
    #[error("dataset of {m} samples is smaller than batch size {batch}")]
    DatasetSmallerThanBatch { m: usize, batch: usize },
    #[error("non-finite objective {value} at iteration {iteration}")]
    NonFiniteObjective { iteration: usize, value: f64 },
    #[error("frame shape {got:?} does not match expected {expected:?}")]
    FrameShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

/// Initialization of the white-box optimization variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InversionInit {
    #[default]
    AllZero,
}

/// Settings for the white-box gradient inversion.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub beta: f64,
    pub init: InversionInit,
    /// Stop early when the objective improves by less than
    /// `early_stop_rel_tol` (relatively) over this many iterations.
    pub early_stop_window: usize,
    pub early_stop_rel_tol: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            learning_rate: 1e-3,
            lambda: 1.0,
            beta: 1.0,
            init: InversionInit::AllZero,
            early_stop_window: 100,
            early_stop_rel_tol: 1e-6,
        }
    }
}

impl InversionConfig {
    fn validate(&self) -> Result<(), AttackError> {
        if self.learning_rate <= 0.0 {
            return Err(AttackError::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.lambda < 0.0 || self.beta <= 0.0 {
            return Err(AttackError::InvalidConfig("need lambda >= 0 and beta > 0".into()));
        }
        Ok(())
    }
}

/// Result of one white-box inversion.
#[derive(Debug, Clone)]
pub struct InversionOutcome {
    pub image: ImageTensor,
    /// Final value of `||y_e - f(x)||^2 + lambda T(x)` for this frame.
    pub objective: f64,
    pub iterations_run: usize,
}

/// Result of a batched white-box inversion run.
#[derive(Debug, Clone)]
pub struct BatchInversionOutcome {
    pub outcomes: Vec<InversionOutcome>,
    /// Total objective (sum over the batch) per iteration, starting with the
    /// value at the initialization.
    pub objective_trace: Vec<f64>,
}

/// Objective of the white-box attack at an arbitrary (unclamped) image
/// candidate `x`, given the eavesdropped frame.
pub fn inversion_objective(
    codec: &TrainedCodec,
    y_e: &SymbolFrame,
    x_hwc: &Array3<f64>,
    lambda: f64,
    beta: f64,
) -> Result<f64, AttackError> {
    let (obj, _) = objective_batch(codec, &[target_flat(codec, y_e)?], &one_batch(x_hwc), lambda, beta, false)?;
    Ok(obj[0])
}

/// Gradient of [`inversion_objective`] with respect to every pixel of `x`.
pub fn inversion_gradient(
    codec: &TrainedCodec,
    y_e: &SymbolFrame,
    x_hwc: &Array3<f64>,
    lambda: f64,
    beta: f64,
) -> Result<Array3<f64>, AttackError> {
    let (_, grad) = objective_batch(codec, &[target_flat(codec, y_e)?], &one_batch(x_hwc), lambda, beta, true)?;
    let g = grad.expect("gradient requested");
    Ok(codec::chw_to_hwc(&g.index_axis(Axis(0), 0).to_owned()))
}

fn one_batch(x_hwc: &Array3<f64>) -> Array4<f64> {
    let chw = hwc_to_chw(x_hwc);
    let (c, h, w) = chw.dim();
    let mut out = Array4::<f64>::zeros((1, c, h, w));
    out.index_axis_mut(Axis(0), 0).assign(&chw);
    out
}

/// Eavesdropped symbols as a flat vector in feature (h, w, c) order, checked
/// against the codec's feature shape.
fn target_flat(codec: &TrainedCodec, y_e: &SymbolFrame) -> Result<Vec<f64>, AttackError> {
    if y_e.origin_shape() != codec.config().feature_shape {
        return Err(AttackError::FrameShapeMismatch {
            expected: codec.config().feature_shape,
            got: y_e.origin_shape(),
        });
    }
    Ok(symbols_to_features(y_e)?.values().iter().copied().collect())
}

/// Forward objective (and optionally its input gradient) for a batch of
/// candidates against per-sample target symbol vectors.
fn objective_batch(
    codec: &TrainedCodec,
    targets: &[Vec<f64>],
    x4: &Array4<f64>,
    lambda: f64,
    beta: f64,
    with_grad: bool,
) -> Result<(Vec<f64>, Option<Array4<f64>>), AttackError> {
    let batch = x4.dim().0;
    assert_eq!(targets.len(), batch);
    let (fh, fw, fc) = codec.config().feature_shape;

    let (t_sem, t_ch, norms) = codec.encoder_forward_traces(x4.clone());
    let mut objectives = vec![0.0f64; batch];
    // residual gradient w.r.t. normalized flat outputs, per sample
    let mut g_feats = with_grad.then(|| Array4::<f64>::zeros((batch, fc, fh, fw)));

    for b in 0..batch {
        let y = &norms[b].y;
        let t = &targets[b];
        let mut res = 0.0;
        for (yi, ti) in y.iter().zip(t.iter()) {
            res += (yi - ti) * (yi - ti);
        }
        objectives[b] = res;
        if let Some(gf) = g_feats.as_mut() {
            let g_flat: Vec<f64> = y.iter().zip(t.iter()).map(|(yi, ti)| 2.0 * (yi - ti)).collect();
            let g_raw = norms[b].backward(&g_flat);
            let mut idx = 0;
            for i in 0..fh {
                for j in 0..fw {
                    for k in 0..fc {
                        gf[(b, k, i, j)] = g_raw[idx];
                        idx += 1;
                    }
                }
            }
        }
    }

    // total variation term on the candidates themselves
    for b in 0..batch {
        let xb = x4.index_axis(Axis(0), b);
        objectives[b] += lambda * tv_chw(&xb, beta);
    }

    let grad = if let Some(gf) = g_feats {
        let g_ch = codec.channel_encoder_stack().backward_input(&t_ch, gf);
        let mut g_x = codec.semantic_encoder_stack().backward_input(&t_sem, g_ch);
        for b in 0..batch {
            let xb = x4.index_axis(Axis(0), b);
            let mut gb = g_x.index_axis_mut(Axis(0), b);
            tv_grad_chw_accumulate(&xb, beta, lambda, &mut gb);
        }
        Some(g_x)
    } else {
        None
    };
    Ok((objectives, grad))
}

/// White-box inversion of a single eavesdropped frame.
pub fn white_box_invert(
    codec: &TrainedCodec,
    y_e: &SymbolFrame,
    cfg: &InversionConfig,
    rng_seed: u64,
) -> Result<InversionOutcome, AttackError> {
    Ok(white_box_invert_batch(codec, std::slice::from_ref(y_e), cfg, rng_seed)?
        .outcomes
        .pop()
        .expect("one outcome"))
}

/// Batched white-box inversion. The objective separates per frame and Adam
/// updates are elementwise, so this produces exactly the trajectories of
/// independent single-frame runs while sharing the forward passes.
pub fn white_box_invert_batch(
    codec: &TrainedCodec,
    frames: &[SymbolFrame],
    cfg: &InversionConfig,
    _rng_seed: u64,
) -> Result<BatchInversionOutcome, AttackError> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(AttackError::EmptyDataset);
    }
    let targets: Vec<Vec<f64>> = frames
        .iter()
        .map(|f| target_flat(codec, f))
        .collect::<Result<_, _>>()?;
    let (ih, iw, ic) = codec.config().image_shape;
    let batch = frames.len();
    // all-zero initialization
    let mut x4 = Array4::<f64>::zeros((batch, ic, ih, iw));
    let mut opt = Adam::new(cfg.learning_rate, &[batch * ic * ih * iw]);

    // trace[k] is the total objective after k optimizer steps
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    let mut iterations_run = 0usize;
    for it in 0..cfg.iterations {
        let (objs, grad) = objective_batch(codec, &targets, &x4, cfg.lambda, cfg.beta, true)?;
        let total: f64 = objs.iter().sum();
        if !total.is_finite() {
            return Err(AttackError::NonFiniteObjective {
                iteration: it,
                value: total,
            });
        }
        trace.push(total);
        // early stop on relative improvement over the window
        let w = cfg.early_stop_window;
        if w > 0 && trace.len() > w {
            let before = trace[trace.len() - 1 - w];
            let now = trace[trace.len() - 1];
            if before - now < cfg.early_stop_rel_tol * before.abs().max(1e-12) {
                break;
            }
        }
        let g = grad.expect("gradient requested");
        {
            let mut xs = x4.as_slice_mut().expect("standard layout");
            let gs = g.as_slice().expect("standard layout");
            opt.step(&mut [&mut xs], &[gs]);
        }
        iterations_run = it + 1;
    }

    // final per-sample objectives on the converged candidates
    let (final_objs, _) = objective_batch(codec, &targets, &x4, cfg.lambda, cfg.beta, false)?;
    trace.push(final_objs.iter().sum());
    let mut outcomes = Vec::with_capacity(batch);
    for b in 0..batch {
        let chw = x4.index_axis(Axis(0), b).to_owned();
        let image = ImageTensor::from_unclamped(codec::chw_to_hwc(&chw))?;
        outcomes.push(InversionOutcome {
            image,
            objective: final_objs[b],
            iterations_run,
        });
    }
    Ok(BatchInversionOutcome {
        outcomes,
        objective_trace: trace,
    })
}

/// Aligned (image, eavesdropped symbols) training pairs for the black-box
/// attack.
#[derive(Debug, Clone)]
pub struct AttackDataset {
    images: Vec<ImageTensor>,
    eavesdrops: Vec<SymbolFrame>,
}

impl AttackDataset {
    pub fn new(images: Vec<ImageTensor>, eavesdrops: Vec<SymbolFrame>) -> Result<Self, AttackError> {
        if images.is_empty() {
            return Err(AttackError::EmptyDataset);
        }
        if images.len() != eavesdrops.len() {
            return Err(AttackError::MisalignedDataset {
                images: images.len(),
                eavesdrops: eavesdrops.len(),
            });
        }
        Ok(Self { images, eavesdrops })
    }

    pub fn m(&self) -> usize {
        self.images.len()
    }

    pub fn images(&self) -> &[ImageTensor] {
        &self.images
    }

    pub fn eavesdrops(&self) -> &[SymbolFrame] {
        &self.eavesdrops
    }
}

/// Feeds `images` through the victim encoder and captures the symbols seen
/// through the eavesdropper channel. Per-sample noise seeds derive from
/// `eavesdropper_spec.seed()`.
pub fn collect_attack_dataset(
    codec: &TrainedCodec,
    images: &[ImageTensor],
    eavesdropper_spec: &ChannelSpec,
) -> Result<AttackDataset, AttackError> {
    if images.is_empty() {
        return Err(AttackError::EmptyDataset);
    }
    let frames = codec.encode_batch(images)?;
    let mut eavesdrops = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let spec = eavesdropper_spec
            .reseeded(derive_seed(eavesdropper_spec.seed(), &[SEED_CAPTURE, i as u64]));
        eavesdrops.push(apply_channel(f, &spec)?);
    }
    AttackDataset::new(images.to_vec(), eavesdrops)
}

/// Architecture and training settings of the inverse network.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseNetConfig {
    /// Nearest-neighbour upsampling factor from the feature grid to the
    /// image grid.
    pub upsample: usize,
    /// Channels of the first (hidden) convolution; the second convolution
    /// maps to the image channels.
    pub hidden_width: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl InverseNetConfig {
    /// Default architecture for a codec: upsample to the image grid, two
    /// 3x3 convolutions with hidden width 32.
    pub fn for_codec(codec: &TrainedCodec) -> Self {
        let (ih, _, _) = codec.config().image_shape;
        let (fh, _, _) = codec.config().feature_shape;
        Self {
            upsample: ih / fh,
            hidden_width: 32,
            learning_rate: 1e-3,
            epochs: 25,
            batch_size: 16,
        }
    }
}

/// Eve's trained approximate inverse of the victim encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseNet {
    stack: Stack,
    feature_shape: (usize, usize, usize),
    image_shape: (usize, usize, usize),
    config: InverseNetConfig,
    seed: u64,
}

/// Per-epoch training losses of the inverse network.
#[derive(Debug, Clone)]
pub struct InverseTrainingReport {
    /// Mean of `||g(y_i) - x_i||^2` over the training set after each epoch's
    /// updates (computed from the running batch losses).
    pub epoch_losses: Vec<f64>,
}

impl InverseNet {
    /// Freshly initialized inverse network for the given shapes.
    pub fn init(
        feature_shape: (usize, usize, usize),
        image_shape: (usize, usize, usize),
        config: InverseNetConfig,
        seed: u64,
    ) -> Result<Self, AttackError> {
        let (fh, fw, fc) = feature_shape;
        let (ih, iw, ic) = image_shape;
        if config.upsample == 0 || fh * config.upsample != ih || fw * config.upsample != iw {
            return Err(AttackError::InvalidConfig(format!(
                "upsample {} does not map feature grid {fh}x{fw} to image {ih}x{iw}",
                config.upsample
            )));
        }
        if config.hidden_width == 0 {
            return Err(AttackError::InvalidConfig("hidden width must be >= 1".into()));
        }
        if config.batch_size == 0 || config.learning_rate <= 0.0 {
            return Err(AttackError::InvalidConfig(
                "need batch_size >= 1 and learning_rate > 0".into(),
            ));
        }
        let stack = Stack {
            layers: vec![
                Layer::Upsample(Upsample { factor: config.upsample }),
                Layer::Conv(
                    Conv2d::init(fc, config.hidden_width, 1, derive_seed(seed, &[SEED_NET, 0])),
                    Activation::LeakyRelu(0.2),
                ),
                Layer::Conv(
                    Conv2d::init(config.hidden_width, ic, 1, derive_seed(seed, &[SEED_NET, 1])),
                    Activation::Sigmoid,
                ),
            ],
        };
        Ok(Self {
            stack,
            feature_shape,
            image_shape,
            config,
            seed,
        })
    }

    pub fn config(&self) -> &InverseNetConfig {
        &self.config
    }

    pub fn feature_shape(&self) -> (usize, usize, usize) {
        self.feature_shape
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.image_shape
    }

    fn frames_to_batch(&self, frames: &[SymbolFrame]) -> Result<Array4<f64>, AttackError> {
        let (fh, fw, fc) = self.feature_shape;
        let mut batch = Array4::<f64>::zeros((frames.len(), fc, fh, fw));
        for (b, f) in frames.iter().enumerate() {
            if f.origin_shape() != self.feature_shape {
                return Err(AttackError::FrameShapeMismatch {
                    expected: self.feature_shape,
                    got: f.origin_shape(),
                });
            }
            let feat = symbols_to_features(f)?;
            let v = feat.values();
            for i in 0..fh {
                for j in 0..fw {
                    for k in 0..fc {
                        batch[(b, k, i, j)] = v[(i, j, k)];
                    }
                }
            }
        }
        Ok(batch)
    }

    /// Single forward pass reconstructing one eavesdropped frame.
    pub fn invert(&self, y_e: &SymbolFrame) -> Result<ImageTensor, AttackError> {
        Ok(self.invert_batch(std::slice::from_ref(y_e))?.pop().expect("one image"))
    }

    /// Batched [`InverseNet::invert`].
    pub fn invert_batch(&self, frames: &[SymbolFrame]) -> Result<Vec<ImageTensor>, AttackError> {
        if frames.is_empty() {
            return Ok(Vec::new());
        }
        let batch = self.frames_to_batch(frames)?;
        let trace = self.stack.forward(batch);
        let out = trace.output();
        let mut images = Vec::with_capacity(frames.len());
        for b in 0..frames.len() {
            let chw = out.index_axis(Axis(0), b).to_owned();
            images.push(ImageTensor::from_unclamped(codec::chw_to_hwc(&chw))?);
        }
        Ok(images)
    }

    /// Mean `||g(y_i) - x_i||^2` over a dataset (sum-squared error per
    /// sample, averaged over samples).
    pub fn dataset_loss(&self, data: &AttackDataset) -> Result<f64, AttackError> {
        let batch = self.frames_to_batch(data.eavesdrops())?;
        let trace = self.stack.forward(batch);
        let out = trace.output();
        let x4 = images_to_batch(data.images());
        let mut total = 0.0;
        for (o, x) in out.iter().zip(x4.iter()) {
            total += (o - x) * (o - x);
        }
        Ok(total / data.m() as f64)
    }

    /// Writes a checkpoint in the shared versioned format.
    pub fn save(&self, path: &Path) -> Result<(), AttackError> {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        ckpt::write_header(&mut w, ckpt::KIND_INVERSE)?;
        ckpt::write_shape3(&mut w, self.feature_shape)?;
        ckpt::write_shape3(&mut w, self.image_shape)?;
        ckpt::write_u32(&mut w, self.config.upsample as u32)?;
        ckpt::write_u32(&mut w, self.config.hidden_width as u32)?;
        ckpt::write_f64(&mut w, self.config.learning_rate)?;
        ckpt::write_u32(&mut w, self.config.epochs as u32)?;
        ckpt::write_u32(&mut w, self.config.batch_size as u32)?;
        ckpt::write_u64(&mut w, self.seed)?;
        for p in self.stack.params() {
            ckpt::write_slice(&mut w, p)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a checkpoint written by [`InverseNet::save`].
    pub fn load(path: &Path) -> Result<Self, AttackError> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let kind = ckpt::read_header(&mut r)?;
        if kind != ckpt::KIND_INVERSE {
            return Err(AttackError::Io(ckpt::bad("checkpoint is not an inverse net")));
        }
        let feature_shape = ckpt::read_shape3(&mut r)?;
        let image_shape = ckpt::read_shape3(&mut r)?;
        let config = InverseNetConfig {
            upsample: ckpt::read_u32(&mut r)? as usize,
            hidden_width: ckpt::read_u32(&mut r)? as usize,
            learning_rate: ckpt::read_f64(&mut r)?,
            epochs: ckpt::read_u32(&mut r)? as usize,
            batch_size: ckpt::read_u32(&mut r)? as usize,
        };
        let seed = ckpt::read_u64(&mut r)?;
        let mut net = Self::init(feature_shape, image_shape, config, seed)?;
        for p in net.stack.params_mut() {
            ckpt::read_into_slice(&mut r, p)?;
        }
        Ok(net)
    }
}

/// Trains the inverse network by minibatch gradient descent on the captured
/// pairs, minimizing the mean sum-squared reconstruction error.
pub fn train_inverse_network(
    data: &AttackDataset,
    image_shape: (usize, usize, usize),
    cfg: &InverseNetConfig,
    rng_seed: u64,
) -> Result<(InverseNet, InverseTrainingReport), AttackError> {
    if data.m() < cfg.batch_size {
        return Err(AttackError::DatasetSmallerThanBatch {
            m: data.m(),
            batch: cfg.batch_size,
        });
    }
    let feature_shape = data.eavesdrops()[0].origin_shape();
    let mut net = InverseNet::init(feature_shape, image_shape, cfg.clone(), rng_seed)?;
    let mut opt = Adam::for_stack(cfg.learning_rate, &net.stack);

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.m()).collect();
        codec::shuffle(&mut order, derive_seed(rng_seed, &[SEED_SHUFFLE, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let frames: Vec<SymbolFrame> =
                chunk.iter().map(|&i| data.eavesdrops()[i].clone()).collect();
            let images: Vec<ImageTensor> = chunk.iter().map(|&i| data.images()[i].clone()).collect();
            let input = net.frames_to_batch(&frames)?;
            let x4 = images_to_batch(&images);
            let trace = net.stack.forward(input);
            let out = trace.output();
            let nb = chunk.len() as f64;
            let mut loss = 0.0;
            let mut g = Array4::<f64>::zeros(out.raw_dim());
            for ((gv, ov), xv) in g.iter_mut().zip(out.iter()).zip(x4.iter()) {
                loss += (ov - xv) * (ov - xv);
                *gv = 2.0 * (ov - xv) / nb;
            }
            loss /= nb;
            if !loss.is_finite() {
                return Err(AttackError::NonFiniteObjective {
                    iteration: epoch,
                    value: loss,
                });
            }
            let grads = net.stack.backward(&trace, g);
            let gslices = crate::nn::grad_slices(&grads.grads);
            let mut params = net.stack.params_mut();
            opt.step(&mut params, &gslices);
            loss_sum += loss * nb;
            count += chunk.len();
        }
        epoch_losses.push(loss_sum / count as f64);
    }
    Ok((net, InverseTrainingReport { epoch_losses }))
}

/// Single forward pass of the trained inverse network (the spec-level name
/// for [`InverseNet::invert`]).
pub fn black_box_invert(net: &InverseNet, y_e: &SymbolFrame) -> Result<ImageTensor, AttackError> {
    net.invert(y_e)
}
