//! Reverse-mode differentiation over a closed set of matrix primitives.
//!
//! Every node holds a dense `(rows, cols)` value computed eagerly when the
//! node is recorded. [`Tape::gradients`] walks the nodes backwards once and
//! accumulates into a [`Gradients`] shaped like the bound [`ParameterSet`].
//!
//! Supported primitives: constants, parameter leaves, affine maps through a
//! network layer, rectified-linear, constant masks (dropout), `exp`, `log`,
//! `softplus`, `square`, addition, scaling, sum, mean, grouped log-sum-exp and
//! weighted selection of entries.

use ndarray::{Array2, Axis};
use rand::Rng;

use super::{dropout_mask, Gradients, MlpConfig, ParameterSet};
use crate::{Error, Result};

/// Handle to a recorded node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Reference to one matrix entry with an attached constant.
///
/// In [`Tape::log_sum_exp`] the constant is an additive offset inside the
/// exponent; in [`Tape::select`] it is a multiplicative coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Term {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

impl Term {
    pub fn new(row: usize, col: usize, value: f64) -> Self {
        Self { row, col, value }
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Weight(usize),
    Bias(usize),
    Affine { input: usize, layer: usize },
    Relu(usize),
    Mask { input: usize, mask: Array2<f64> },
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Square(usize),
    Add(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Mean(usize),
    LogSumExp {
        input: usize,
        scale: f64,
        groups: Vec<Vec<Term>>,
    },
    Select { input: usize, terms: Vec<Term> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Array2<f64>,
}

/// Recorder for one differentiable computation over a parameter set.
pub struct Tape<'p> {
    params: &'p ParameterSet,
    nodes: Vec<Node>,
}

fn check_finite(value: &Array2<f64>, primitive: &'static str) -> Result<()> {
    if value.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { primitive })
    }
}

fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParameterSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, value: Array2<f64>, primitive: &'static str) -> Result<Var> {
        check_finite(&value, primitive)?;
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, var: Var) -> &Array2<f64> {
        &self.nodes[var.0].value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Result<Var> {
        self.push(Op::Constant, value, "constant")
    }

    /// Weight matrix of `layer` as a differentiable value.
    pub fn weight(&mut self, layer: usize) -> Result<Var> {
        let value = self.params.layers[layer].weights.clone();
        self.push(Op::Weight(layer), value, "weight")
    }

    /// Bias of `layer` as a `1 × out` differentiable value.
    pub fn bias(&mut self, layer: usize) -> Result<Var> {
        let value = self.params.layers[layer]
            .bias
            .clone()
            .insert_axis(Axis(0));
        self.push(Op::Bias(layer), value, "bias")
    }

    /// `x · Wᵀ + b` through `layer`.
    pub fn affine(&mut self, input: Var, layer: usize) -> Result<Var> {
        let dense = &self.params.layers[layer];
        let x = &self.nodes[input.0].value;
        if x.ncols() != dense.in_dim() {
            return Err(Error::DimensionMismatch {
                what: "affine input",
                expected: dense.in_dim(),
                found: x.ncols(),
            });
        }
        let mut z = x.dot(&dense.weights.t());
        z += &dense.bias.view().insert_axis(Axis(0));
        self.push(
            Op::Affine {
                input: input.0,
                layer,
            },
            z,
            "affine",
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let v = self.nodes[input.0].value.mapv(|v| v.max(0.0));
        self.push(Op::Relu(input.0), v, "relu")
    }

    /// Element-wise product with a constant mask of the same shape.
    pub fn mask(&mut self, input: Var, mask: Array2<f64>) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        if x.dim() != mask.dim() {
            return Err(Error::DimensionMismatch {
                what: "mask",
                expected: x.len(),
                found: mask.len(),
            });
        }
        let v = x * &mask;
        self.push(
            Op::Mask {
                input: input.0,
                mask,
            },
            v,
            "mask",
        )
    }

    pub fn exp(&mut self, input: Var) -> Result<Var> {
        let v = self.nodes[input.0].value.mapv(f64::exp);
        self.push(Op::Exp(input.0), v, "exp")
    }

    pub fn log(&mut self, input: Var) -> Result<Var> {
        let v = self.nodes[input.0].value.mapv(f64::ln);
        self.push(Op::Log(input.0), v, "log")
    }

    pub fn softplus(&mut self, input: Var) -> Result<Var> {
        let v = self.nodes[input.0].value.mapv(softplus);
        self.push(Op::Softplus(input.0), v, "softplus")
    }

    pub fn square(&mut self, input: Var) -> Result<Var> {
        let v = self.nodes[input.0].value.mapv(|v| v * v);
        self.push(Op::Square(input.0), v, "square")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.dim() != vb.dim() {
            return Err(Error::DimensionMismatch {
                what: "add operands",
                expected: va.len(),
                found: vb.len(),
            });
        }
        let v = va + vb;
        self.push(Op::Add(a.0, b.0), v, "add")
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let v = &self.nodes[input.0].value * factor;
        self.push(Op::Scale(input.0, factor), v, "scale")
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.nodes[input.0].value.sum();
        self.push(Op::Sum(input.0), Array2::from_elem((1, 1), s), "sum")
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let m = x.sum() / x.len() as f64;
        self.push(Op::Mean(input.0), Array2::from_elem((1, 1), m), "mean")
    }

    /// One output row per group: `log Σ exp(scale · x[row, col] + offset)`.
    ///
    /// Max-shifted, so large magnitudes do not overflow.
    pub fn log_sum_exp(&mut self, input: Var, scale: f64, groups: Vec<Vec<Term>>) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let mut out = Array2::zeros((groups.len(), 1));
        for (g, terms) in groups.iter().enumerate() {
            if terms.is_empty() {
                return Err(Error::InvalidInput("empty log-sum-exp group".into()));
            }
            let args = terms.iter().map(|t| scale * x[[t.row, t.col]] + t.value);
            let max = args.clone().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = args.map(|a| (a - max).exp()).sum();
            out[[g, 0]] = max + s.ln();
        }
        self.push(
            Op::LogSumExp {
                input: input.0,
                scale,
                groups,
            },
            out,
            "log_sum_exp",
        )
    }

    /// `Σ coeff · x[row, col]` as a `1 × 1` value.
    pub fn select(&mut self, input: Var, terms: Vec<Term>) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let s: f64 = terms.iter().map(|t| t.value * x[[t.row, t.col]]).sum();
        self.push(
            Op::Select {
                input: input.0,
                terms,
            },
            Array2::from_elem((1, 1), s),
            "select",
        )
    }

    /// Records the full network on `input` rows.
    ///
    /// When `dropout` is given, a fresh inverted-dropout mask follows every
    /// hidden activation.
    pub fn mlp<R: Rng + ?Sized>(
        &mut self,
        cfg: &MlpConfig,
        input: Var,
        dropout: Option<&mut R>,
    ) -> Result<Var> {
        let n_layers = self.params.layers.len();
        let mut dropout = dropout;
        let mut act = input;
        for layer in 0..n_layers {
            act = self.affine(act, layer)?;
            if layer + 1 < n_layers {
                act = self.relu(act)?;
                if let Some(rng) = dropout.as_deref_mut() {
                    if cfg.dropout_rate > 0.0 {
                        let (r, c) = self.value(act).dim();
                        let mask = dropout_mask(r, c, cfg.dropout_rate, rng);
                        act = self.mask(act, mask)?;
                    }
                }
            }
        }
        Ok(act)
    }

    /// Value and gradient of a scalar output with respect to the parameters.
    pub fn gradients(&self, output: Var) -> Result<(f64, Gradients)> {
        let out = &self.nodes[output.0].value;
        if out.dim() != (1, 1) {
            return Err(Error::DimensionMismatch {
                what: "loss output",
                expected: 1,
                found: out.len(),
            });
        }
        let mut grads = Gradients::zeros_like(self.params);
        let mut adj: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output.0] = Some(Array2::ones((1, 1)));

        fn accumulate(adj: &mut [Option<Array2<f64>>], idx: usize, delta: Array2<f64>) {
            match &mut adj[idx] {
                Some(a) => *a += &delta,
                slot @ None => *slot = Some(delta),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Weight(layer) => grads.layers[*layer].weights += &g,
                Op::Bias(layer) => grads.layers[*layer].bias += &g.row(0),
                Op::Affine { input, layer } => {
                    let dense = &self.params.layers[*layer];
                    let x = &self.nodes[*input].value;
                    let gl = &mut grads.layers[*layer];
                    gl.weights += &g.t().dot(x);
                    gl.bias += &g.sum_axis(Axis(0));
                    accumulate(&mut adj, *input, g.dot(&dense.weights));
                }
                Op::Relu(input) => {
                    let x = &self.nodes[*input].value;
                    let mut d = g;
                    d.zip_mut_with(x, |d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                    accumulate(&mut adj, *input, d);
                }
                Op::Mask { input, mask } => accumulate(&mut adj, *input, g * mask),
                Op::Exp(input) => accumulate(&mut adj, *input, g * &node.value),
                Op::Log(input) => {
                    let x = &self.nodes[*input].value;
                    accumulate(&mut adj, *input, g / x);
                }
                Op::Softplus(input) => {
                    let x = &self.nodes[*input].value;
                    accumulate(&mut adj, *input, g * &x.mapv(sigmoid));
                }
                Op::Square(input) => {
                    let x = &self.nodes[*input].value;
                    accumulate(&mut adj, *input, g * &(x * 2.0));
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Scale(input, factor) => accumulate(&mut adj, *input, g * *factor),
                Op::Sum(input) => {
                    let dim = self.nodes[*input].value.dim();
                    accumulate(&mut adj, *input, Array2::from_elem(dim, g[[0, 0]]));
                }
                Op::Mean(input) => {
                    let x = &self.nodes[*input].value;
                    let d = g[[0, 0]] / x.len() as f64;
                    accumulate(&mut adj, *input, Array2::from_elem(x.dim(), d));
                }
                Op::LogSumExp {
                    input,
                    scale,
                    groups,
                } => {
                    let x = &self.nodes[*input].value;
                    let mut d = Array2::zeros(x.dim());
                    for (gi, terms) in groups.iter().enumerate() {
                        let upstream = g[[gi, 0]];
                        if upstream == 0.0 {
                            continue;
                        }
                        let lse = node.value[[gi, 0]];
                        for t in terms {
                            let w = (scale * x[[t.row, t.col]] + t.value - lse).exp();
                            d[[t.row, t.col]] += upstream * scale * w;
                        }
                    }
                    accumulate(&mut adj, *input, d);
                }
                Op::Select { input, terms } => {
                    let dim = self.nodes[*input].value.dim();
                    let mut d = Array2::zeros(dim);
                    let upstream = g[[0, 0]];
                    for t in terms {
                        d[[t.row, t.col]] += upstream * t.value;
                    }
                    accumulate(&mut adj, *input, d);
                }
            }
        }
        Ok((out[[0, 0]], grads))
    }
}

/// Records `loss` on a fresh tape and differentiates it.
pub fn loss_gradients<F>(params: &ParameterSet, loss: F) -> Result<(f64, Gradients)>
where
    F: FnOnce(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::new(params);
    let out = loss(&mut tape)?;
    tape.gradients(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradient_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sum_of_squares(tape: &mut Tape<'_>) -> Result<Var> {
        let mut total = None;
        for layer in 0..tape.params.layers.len() {
            for leaf in [tape.weight(layer)?, tape.bias(layer)?] {
                let sq = tape.square(leaf)?;
                let s = tape.sum(sq)?;
                total = Some(match total {
                    None => s,
                    Some(t) => tape.add(t, s)?,
                });
            }
        }
        Ok(total.unwrap())
    }

    #[test]
    fn quadratic_loss_value_and_gradient() {
        // 1x1 weight + bias, then 1x1 weight + bias: four parameters.
        let cfg = MlpConfig::new(1, 1, 1, 1, 0.0).unwrap();
        let mut params = ParameterSet::zeros(&cfg);
        params.iter_mut().for_each(|p| *p = 0.5);
        assert_eq!(params.len(), 4);
        let (loss, grads) = loss_gradients(&params, sum_of_squares).unwrap();
        assert_eq!(loss, 1.0);
        assert!(grads.iter().all(|&g| g == 1.0));
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let cfg = MlpConfig::new(2, 2, 3, 1, 0.0).unwrap();
        let params = ParameterSet::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let (loss, grads) = loss_gradients(&params, |tape| {
            let c = tape.constant(Array2::from_elem((2, 2), 1.5))?;
            tape.sum(c)
        })
        .unwrap();
        assert_eq!(loss, 6.0);
        assert!(grads.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn log_of_nonpositive_is_reported_by_name() {
        let cfg = MlpConfig::new(1, 1, 1, 1, 0.0).unwrap();
        let params = ParameterSet::zeros(&cfg);
        let err = loss_gradients(&params, |tape| {
            let c = tape.constant(Array2::zeros((1, 1)))?;
            tape.log(c)
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { primitive: "log" }));
    }

    #[test]
    fn log_sum_exp_is_stable_for_large_arguments() {
        let cfg = MlpConfig::new(1, 1, 1, 1, 0.0).unwrap();
        let params = ParameterSet::zeros(&cfg);
        let mut tape = Tape::new(&params);
        let c = tape
            .constant(Array2::from_shape_vec((2, 1), vec![1000.0, 1000.0]).unwrap())
            .unwrap();
        let l = tape
            .log_sum_exp(c, 1.0, vec![vec![Term::new(0, 0, 0.0), Term::new(1, 0, 0.0)]])
            .unwrap();
        assert!((tape.scalar(l) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let cfg = MlpConfig::new(3, 2, 5, 2, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut params = ParameterSet::init(&cfg, &mut rng);
        for b in params.layers.iter_mut().flat_map(|l| l.bias.iter_mut()) {
            *b = rng.random_range(0.05..0.3);
        }
        let inputs = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let mask = dropout_mask(4, 5, 0.3, &mut rng);
        let build = |p: &ParameterSet| {
            loss_gradients(p, |tape| {
                let x = tape.constant(inputs.clone())?;
                let h = tape.affine(x, 0)?;
                let h = tape.relu(h)?;
                let h = tape.mask(h, mask.clone())?;
                let h = tape.affine(h, 1)?;
                let h = tape.relu(h)?;
                let out = tape.affine(h, 2)?;
                let sp = tape.softplus(out)?;
                let lg = tape.log(sp)?;
                let ex = tape.exp(out)?;
                let sq = tape.square(ex)?;
                let sc = tape.scale(sq, 0.3)?;
                let mixed = tape.add(lg, sc)?;
                let lse = tape.log_sum_exp(
                    mixed,
                    -1.0,
                    vec![
                        vec![Term::new(0, 0, 0.1), Term::new(1, 1, -0.4), Term::new(2, 0, 0.0)],
                        vec![Term::new(3, 1, 0.2), Term::new(0, 1, 0.0)],
                    ],
                )?;
                let sel = tape.select(
                    mixed,
                    vec![Term::new(1, 0, 2.0), Term::new(3, 1, -0.5), Term::new(1, 0, 0.25)],
                )?;
                let m = tape.mean(lse)?;
                let s = tape.sum(sel)?;
                tape.add(m, s)
            })
        };
        let report = gradient_check(&params, build, 1e-4).unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }
}
