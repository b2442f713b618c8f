//! Reusable network building blocks on top of the tape: linear and
//! convolution layers, batch normalization with running statistics, and
//! parameter initialization.
//!
//! Layers register their parameters in a [`ParamStore`] once at model
//! construction and replay them onto a fresh [`Tape`] every forward pass.
//! Initialization draws from the RNG stream handed to the constructor, so
//! a model is fully determined by (architecture, seed).

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::params::{ParamId, ParamStore};
use crate::tensor::{Tape, TensorId};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Leaky-ReLU slope used by the convolutional and embedding paths.
pub const LEAKY_SLOPE: f64 = 0.01;
/// Batch-normalization epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Momentum of the running-statistics update: `running = (1-m)·running + m·batch`.
pub const BN_MOMENTUM: f64 = 0.1;

/// Uniform init in ±1/√fan_in (the standard dense/conv default).
pub fn uniform_init<T: Scalar>(n: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    let bound = (1.0 / fan_in as f64).sqrt();
    (0..n)
        .map(|_| T::from_f64(rng.random_range(-bound..bound)))
        .collect()
}

/// Fully connected layer `y = x·W (+ b)` with W of shape [in, out].
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = store.register(
            format!("{name}.weight"),
            &[in_features, out_features],
            uniform_init(in_features * out_features, in_features, rng),
            true,
        )?;
        let b = if bias {
            Some(store.register(
                format!("{name}.bias"),
                &[out_features],
                uniform_init(out_features, in_features, rng),
                true,
            )?)
        } else {
            None
        };
        Ok(Self {
            w,
            b,
            in_features,
            out_features,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: TensorId,
    ) -> Result<TensorId> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row_broadcast(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Same-padded square convolution (kernel size 1 or 3, stride 1).
#[derive(Debug, Clone)]
pub struct Conv {
    pub k: ParamId,
    pub b: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let k = store.register(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            uniform_init(out_channels * fan_in, fan_in, rng),
            true,
        )?;
        let b = store.register(
            format!("{name}.bias"),
            &[out_channels],
            uniform_init(out_channels, fan_in, rng),
            true,
        )?;
        Ok(Self {
            k,
            b,
            in_channels,
            out_channels,
            kernel,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: TensorId,
    ) -> Result<TensorId> {
        let k = tape.param(store, self.k);
        let b = tape.param(store, self.b);
        tape.conv2d(x, k, Some(b))
    }
}

/// Batch normalization over the channel axis with learned scale/shift and
/// non-trainable running statistics kept in the store.
#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNormLayer {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        let gamma = store.register(format!("{name}.gamma"), &[channels], vec![T::one(); channels], true)?;
        let beta = store.register(format!("{name}.beta"), &[channels], vec![T::zero(); channels], true)?;
        let running_mean =
            store.register(format!("{name}.running_mean"), &[channels], vec![T::zero(); channels], false)?;
        let running_var =
            store.register(format!("{name}.running_var"), &[channels], vec![T::one(); channels], false)?;
        Ok(Self {
            gamma,
            beta,
            running_mean,
            running_var,
            channels,
        })
    }

    /// Training mode normalizes with batch statistics and updates the
    /// running buffers (unbiased variance); evaluation mode applies the
    /// frozen running statistics.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        x: TensorId,
        training: bool,
    ) -> Result<TensorId> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        if training {
            let shape = tape.shape(x).to_vec();
            let m = if shape.len() == 2 {
                shape[0]
            } else {
                shape[0] * shape[2] * shape[3]
            };
            let (y, mean, var) = tape.batchnorm_train(x, gamma, beta, T::from_f64(BN_EPS))?;
            let unbias = if m > 1 {
                T::from_usize(m) / T::from_usize(m - 1)
            } else {
                T::one()
            };
            let mom = T::from_f64(BN_MOMENTUM);
            let keep = T::one() - mom;
            {
                let rm = store.data_mut(self.running_mean);
                for (r, &b) in rm.iter_mut().zip(&mean) {
                    *r = keep * *r + mom * b;
                }
            }
            {
                let rv = store.data_mut(self.running_var);
                for (r, &b) in rv.iter_mut().zip(&var) {
                    *r = keep * *r + mom * b * unbias;
                }
            }
            Ok(y)
        } else {
            let mean = store.data(self.running_mean).to_vec();
            let var = store.data(self.running_var).to_vec();
            tape.batchnorm_eval(x, gamma, beta, &mean, &var, T::from_f64(BN_EPS))
        }
    }
}

/// Dropout that is the identity at evaluation time.
pub fn dropout_if_training<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorId,
    rate: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<TensorId> {
    if training && rate > 0.0 {
        tape.dropout(x, rate, rng)
    } else {
        Ok(x)
    }
}
