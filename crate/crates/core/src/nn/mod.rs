//! Minimal feed-forward network used by every model in the crate.
//!
//! Layers are dense with rectified-linear activations between them and a
//! linear output layer. Weights are stored as `(out_dim, in_dim)` matrices so
//! a batch of inputs laid out as rows maps through `x · Wᵀ + b`.
//!
//! Gradients are obtained from [`tape::Tape`], a reverse-mode recorder over a
//! closed set of primitives.

pub mod adam;
pub mod gradcheck;
pub mod tape;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::{Error, Result};

pub use adam::{adam_update, AdamState};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use tape::{loss_gradients, Tape, Term, Var};

/// Shape and regularization of a fully-connected network.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_layers: usize,
    pub nodes_per_layer: usize,
    pub output_dim: usize,
    pub dropout_rate: f64,
}

impl MlpConfig {
    pub fn new(
        input_dim: usize,
        hidden_layers: usize,
        nodes_per_layer: usize,
        output_dim: usize,
        dropout_rate: f64,
    ) -> Result<Self> {
        let cfg = Self {
            input_dim,
            hidden_layers,
            nodes_per_layer,
            output_dim,
            dropout_rate,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.nodes_per_layer == 0 {
            return Err(Error::InvalidConfig(
                "network dimensions must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout rate {} must lie in [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// `(in_dim, out_dim)` of each dense layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers + 1);
        let mut fan_in = self.input_dim;
        for _ in 0..self.hidden_layers {
            dims.push((fan_in, self.nodes_per_layer));
            fan_in = self.nodes_per_layer;
        }
        dims.push((fan_in, self.output_dim));
        dims
    }
}

/// One dense layer: weights `(out, in)` and bias `(out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weights: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }
}

macro_rules! layer_stack {
    ($name:ident) => {
        impl $name {
            pub fn zeros(cfg: &MlpConfig) -> Self {
                Self {
                    layers: cfg
                        .layer_dims()
                        .into_iter()
                        .map(|(i, o)| Dense::zeros(i, o))
                        .collect(),
                }
            }

            /// Total number of scalar entries.
            pub fn len(&self) -> usize {
                self.layers
                    .iter()
                    .map(|l| l.weights.len() + l.bias.len())
                    .sum()
            }

            pub fn is_empty(&self) -> bool {
                self.len() == 0
            }

            /// Entries in a fixed order: per layer, weights row-major then bias.
            pub fn iter(&self) -> impl Iterator<Item = &f64> {
                self.layers
                    .iter()
                    .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
            }

            pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
                self.layers
                    .iter_mut()
                    .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
            }

            pub fn is_finite(&self) -> bool {
                self.iter().all(|v| v.is_finite())
            }

            pub fn shapes(&self) -> Vec<(usize, usize)> {
                self.layers
                    .iter()
                    .map(|l| (l.in_dim(), l.out_dim()))
                    .collect()
            }
        }
    };
}

/// Network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub layers: Vec<Dense>,
}

/// One partial derivative per entry of a [`ParameterSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

layer_stack!(ParameterSet);
layer_stack!(Gradients);

impl ParameterSet {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(cfg: &MlpConfig, rng: &mut R) -> Self {
        let layers = cfg
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights =
                    Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-limit..limit));
                Dense {
                    weights,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Self { layers }
    }

    /// Checks that the layer shapes are the ones `cfg` describes.
    pub fn check_shapes(&self, cfg: &MlpConfig) -> Result<()> {
        let expected = cfg.layer_dims();
        if self.layers.len() != expected.len() {
            return Err(Error::DimensionMismatch {
                what: "layer count",
                expected: expected.len(),
                found: self.layers.len(),
            });
        }
        for (layer, &(i, o)) in self.layers.iter().zip(&expected) {
            if layer.in_dim() != i {
                return Err(Error::DimensionMismatch {
                    what: "layer input width",
                    expected: i,
                    found: layer.in_dim(),
                });
            }
            if layer.out_dim() != o || layer.bias.len() != o {
                return Err(Error::DimensionMismatch {
                    what: "layer output width",
                    expected: o,
                    found: layer.out_dim(),
                });
            }
        }
        Ok(())
    }
}

impl Gradients {
    pub fn zeros_like(params: &ParameterSet) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Dense::zeros(l.in_dim(), l.out_dim()))
                .collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.iter_mut().for_each(|g| *g *= factor);
    }
}

/// Inference pass over a batch of rows (no dropout).
pub fn forward_batch(
    params: &ParameterSet,
    cfg: &MlpConfig,
    inputs: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    if inputs.ncols() != cfg.input_dim {
        return Err(Error::DimensionMismatch {
            what: "network input",
            expected: cfg.input_dim,
            found: inputs.ncols(),
        });
    }
    let last = params.layers.len() - 1;
    let mut act = inputs.to_owned();
    for (idx, layer) in params.layers.iter().enumerate() {
        let mut z = act.dot(&layer.weights.t());
        z += &layer.bias.view().insert_axis(Axis(0));
        if idx < last {
            z.mapv_inplace(|v| v.max(0.0));
        }
        act = z;
    }
    Ok(act)
}

/// Inverted-dropout mask: kept units are scaled by `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rate: f64,
    rng: &mut R,
) -> Array2<f64> {
    let keep = 1.0 / (1.0 - rate);
    Array2::from_shape_fn((rows, cols), |_| {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            keep
        }
    })
}

/// Forward pass for a single input vector.
///
/// With `training` set, dropout masks are drawn from `mask_source` after
/// every hidden activation; otherwise the pass is deterministic.
pub fn mlp_forward<R: Rng + ?Sized>(
    params: &ParameterSet,
    cfg: &MlpConfig,
    input: &[f64],
    training: bool,
    mask_source: &mut R,
) -> Result<Vec<f64>> {
    if input.len() != cfg.input_dim {
        return Err(Error::DimensionMismatch {
            what: "network input",
            expected: cfg.input_dim,
            found: input.len(),
        });
    }
    let last = params.layers.len() - 1;
    let mut act = Array2::from_shape_vec((1, input.len()), input.to_vec())
        .expect("row vector shape");
    for (idx, layer) in params.layers.iter().enumerate() {
        let mut z = act.dot(&layer.weights.t());
        z += &layer.bias.view().insert_axis(Axis(0));
        if idx < last {
            z.mapv_inplace(|v| v.max(0.0));
            if training && cfg.dropout_rate > 0.0 {
                z *= &dropout_mask(1, z.ncols(), cfg.dropout_rate, mask_source);
            }
        }
        act = z;
    }
    Ok(act.into_raw_vec_and_offset().0)
}
