//! Mini 2D encoder–decoder segmentation network (a scaled-down U-Net)
//! plus the pooled bottleneck embedding and a small plain-convolution
//! encoder baseline.
//!
//! A slice stack of shape [S, 1, h, w] is processed as one batch; the
//! decoder mirrors the encoder with nearest-neighbor upsampling and skip
//! concatenation, and a 1×1 convolution head produces per-pixel class
//! probabilities via softmax.  The bottleneck feature maps are average-
//! pooled per slice, max-reduced across the stack and linearly projected
//! to the image embedding z_I.

use crate::error::{Error, Result};
use crate::nn::{BatchNormLayer, Conv, Linear, LEAKY_SLOPE};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tape, TensorId};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SegNetConfig {
    pub base_filters: usize,
    pub depth: usize,
    pub n_classes: usize,
    pub input_size: (usize, usize),
    /// Dimension of the image embedding z_I (F_I).
    pub embed_dim: usize,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self {
            base_filters: 8,
            depth: 3,
            n_classes: 4,
            input_size: (32, 32),
            embed_dim: 32,
        }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        let div = 1usize << self.depth;
        let (h, w) = self.input_size;
        if h % div != 0 || w % div != 0 {
            return Err(Error::Config {
                path: "segnet.input_size".into(),
                reason: format!("spatial extents {h}×{w} must be divisible by 2^depth = {div}"),
            });
        }
        if self.base_filters == 0 || self.depth == 0 || self.n_classes < 2 || self.embed_dim == 0 {
            return Err(Error::Config {
                path: "segnet".into(),
                reason: "base_filters, depth, embed_dim must be positive and n_classes >= 2".into(),
            });
        }
        Ok(())
    }

    /// Channels of the bottleneck feature maps.
    pub fn bottleneck_channels(&self) -> usize {
        self.base_filters << self.depth
    }
}

/// (conv3×3 → leaky-ReLU → batchnorm) × 2.
#[derive(Debug, Clone)]
struct DoubleConv {
    conv1: Conv,
    bn1: BatchNormLayer,
    conv2: Conv,
    bn2: BatchNormLayer,
}

impl DoubleConv {
    fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            conv1: Conv::register(store, &format!("{name}.conv1"), cin, cout, 3, rng)?,
            bn1: BatchNormLayer::register(store, &format!("{name}.bn1"), cout)?,
            conv2: Conv::register(store, &format!("{name}.conv2"), cout, cout, 3, rng)?,
            bn2: BatchNormLayer::register(store, &format!("{name}.bn2"), cout)?,
        })
    }

    fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        x: TensorId,
        training: bool,
    ) -> Result<TensorId> {
        let slope = T::from_f64(LEAKY_SLOPE);
        let y = self.conv1.forward(tape, store, x)?;
        let y = tape.leaky_relu(y, slope);
        let y = self.bn1.forward(tape, store, y, training)?;
        let y = self.conv2.forward(tape, store, y)?;
        let y = tape.leaky_relu(y, slope);
        self.bn2.forward(tape, store, y, training)
    }
}

/// Output handles of one segmentation forward pass.
pub struct SegNetOutput {
    /// Per-pixel class probabilities, shape [S, n_classes, h, w].
    pub probs: TensorId,
    /// Bottleneck feature maps, shape [S, c_b, h/2^d, w/2^d].
    pub bottleneck: TensorId,
}

#[derive(Debug, Clone)]
pub struct SegNet {
    pub cfg: SegNetConfig,
    downs: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    ups: Vec<DoubleConv>,
    head: Conv,
    embed: Linear,
}

impl SegNet {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &SegNetConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut downs = Vec::with_capacity(cfg.depth);
        let mut cin = 1;
        for d in 0..cfg.depth {
            let cout = cfg.base_filters << d;
            downs.push(DoubleConv::register(store, &format!("{prefix}.down{d}"), cin, cout, rng)?);
            cin = cout;
        }
        let cb = cfg.bottleneck_channels();
        let bottleneck = DoubleConv::register(store, &format!("{prefix}.bottleneck"), cin, cb, rng)?;
        let mut ups = Vec::with_capacity(cfg.depth);
        let mut cprev = cb;
        for d in (0..cfg.depth).rev() {
            let cskip = cfg.base_filters << d;
            ups.push(DoubleConv::register(
                store,
                &format!("{prefix}.up{d}"),
                cprev + cskip,
                cskip,
                rng,
            )?);
            cprev = cskip;
        }
        let head = Conv::register(store, &format!("{prefix}.head"), cprev, cfg.n_classes, 1, rng)?;
        let embed = Linear::register(store, &format!("{prefix}.embed"), cb, cfg.embed_dim, true, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            downs,
            bottleneck,
            ups,
            head,
            embed,
        })
    }

    /// Forward a stack [S, 1, h, w] to per-pixel probabilities and the
    /// bottleneck maps.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        x: TensorId,
        training: bool,
    ) -> Result<SegNetOutput> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::InvalidShape {
                op: "segnet forward",
                shape,
                reason: "expected [S, 1, h, w] input".into(),
            });
        }
        let div = 1usize << self.cfg.depth;
        if shape[2] % div != 0 || shape[3] % div != 0 {
            return Err(Error::InvalidShape {
                op: "segnet forward",
                shape,
                reason: format!("spatial extents must be divisible by {div}"),
            });
        }
        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut y = x;
        for down in &self.downs {
            y = down.forward(tape, store, y, training)?;
            skips.push(y);
            y = tape.maxpool2d(y)?;
        }
        let bottleneck = self.bottleneck.forward(tape, store, y, training)?;
        y = bottleneck;
        for up in &self.ups {
            y = tape.upsample2x(y)?;
            let skip = skips.pop().expect("skip per level");
            y = tape.concat(&[y, skip], 1)?;
            y = up.forward(tape, store, y, training)?;
        }
        let logits = self.head.forward(tape, store, y)?;
        let probs = tape.softmax(logits, 1)?;
        Ok(SegNetOutput { probs, bottleneck })
    }

    /// Pool bottleneck maps of `patients × slices_per_patient` slices into
    /// one embedding per patient: global average pool per slice, element-
    /// wise max across each patient's slices, linear projection, leaky-ReLU.
    pub fn embed<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        bottleneck: TensorId,
        patients: usize,
        slices_per_patient: usize,
    ) -> Result<TensorId> {
        let shape = tape.shape(bottleneck).to_vec();
        if shape.len() != 4 || shape[0] != patients * slices_per_patient {
            return Err(Error::InvalidShape {
                op: "segnet embed",
                shape,
                reason: format!("expected [{} slices, c, h, w]", patients * slices_per_patient),
            });
        }
        let c = shape[1];
        let pooled = tape.global_avg_pool(bottleneck)?; // [P·S, c]
        let grouped = tape.reshape(pooled, &[patients, slices_per_patient, c])?;
        let maxed = tape.reduce_max(grouped, 1)?; // [P, c]
        let projected = self.embed.forward(tape, store, maxed)?;
        Ok(tape.leaky_relu(projected, T::from_f64(LEAKY_SLOPE)))
    }
}

/// Plain convolutional encoder baseline: per-stage conv → leaky-ReLU →
/// batchnorm → maxpool, then the same pooled-max embedding head.  No
/// segmentation output.
#[derive(Debug, Clone)]
pub struct ConvEncoder {
    pub cfg: SegNetConfig,
    stages: Vec<(Conv, BatchNormLayer)>,
    top: (Conv, BatchNormLayer),
    embed: Linear,
}

impl ConvEncoder {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &SegNetConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(cfg.depth);
        let mut cin = 1;
        for d in 0..cfg.depth {
            let cout = cfg.base_filters << d;
            stages.push((
                Conv::register(store, &format!("{prefix}.stage{d}.conv"), cin, cout, 3, rng)?,
                BatchNormLayer::register(store, &format!("{prefix}.stage{d}.bn"), cout)?,
            ));
            cin = cout;
        }
        let cb = cfg.bottleneck_channels();
        let top = (
            Conv::register(store, &format!("{prefix}.top.conv"), cin, cb, 3, rng)?,
            BatchNormLayer::register(store, &format!("{prefix}.top.bn"), cb)?,
        );
        let embed = Linear::register(store, &format!("{prefix}.embed"), cb, cfg.embed_dim, true, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            stages,
            top,
            embed,
        })
    }

    /// Embed a stack [P·S, 1, h, w] directly to z_I, shape [P, embed_dim].
    pub fn embed<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        x: TensorId,
        patients: usize,
        slices_per_patient: usize,
        training: bool,
    ) -> Result<TensorId> {
        let slope = T::from_f64(LEAKY_SLOPE);
        let mut y = x;
        for (conv, bn) in &self.stages {
            y = conv.forward(tape, store, y)?;
            y = tape.leaky_relu(y, slope);
            y = bn.forward(tape, store, y, training)?;
            y = tape.maxpool2d(y)?;
        }
        let (conv, bn) = &self.top;
        y = conv.forward(tape, store, y)?;
        y = tape.leaky_relu(y, slope);
        y = bn.forward(tape, store, y, training)?;
        let c = self.cfg.bottleneck_channels();
        let pooled = tape.global_avg_pool(y)?;
        let grouped = tape.reshape(pooled, &[patients, slices_per_patient, c])?;
        let maxed = tape.reduce_max(grouped, 1)?;
        let projected = self.embed.forward(tape, store, maxed)?;
        Ok(tape.leaky_relu(projected, slope))
    }
}
