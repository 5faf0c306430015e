//! Feedforward networks, sign-split auxiliary networks and interval
//! propagation through them.
//!
//! For a network built from layers `eta_l = act(W_l eta_{l-1} + b_l)` with
//! monotone activations, splitting every weight matrix into its negative
//! part `W_lo` and nonnegative part `W_hi` yields two coupled recursions
//!
//! ```text
//! lower_l = act(W_lo upper_{l-1} + W_hi lower_{l-1} + b_l)
//! upper_l = act(W_lo lower_{l-1} + W_hi upper_{l-1} + b_l)
//! ```
//!
//! whose outputs bracket the network output for every input inside the
//! starting box. All types here are immutable after construction and every
//! operation is a pure function.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{context}: expected dimension {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("network must have at least one layer")]
    Empty,
    #[error("interval is inverted at component {index}: lower {lower} > upper {upper}")]
    IntervalOrder { index: usize, lower: f64, upper: f64 },
    #[error("unknown activation `{0}`; expected relu, tanh, sigmoid or purelin")]
    UnknownActivation(String),
}

/// Scalar activation applied elementwise across a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActivationKind {
    Relu,
    Tanh,
    Sigmoid,
    Purelin,
}

impl ActivationKind {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            ActivationKind::Purelin => x,
        }
    }

    /// Global Lipschitz constant of the scalar activation. Every kind here
    /// is monotonically non-decreasing.
    pub fn lipschitz_alpha(self) -> f64 {
        match self {
            ActivationKind::Relu | ActivationKind::Tanh | ActivationKind::Purelin => 1.0,
            ActivationKind::Sigmoid => 0.25,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Purelin => "purelin",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, NnError> {
        match name {
            "relu" => Ok(ActivationKind::Relu),
            "tanh" => Ok(ActivationKind::Tanh),
            "sigmoid" => Ok(ActivationKind::Sigmoid),
            "purelin" => Ok(ActivationKind::Purelin),
            other => Err(NnError::UnknownActivation(other.to_string())),
        }
    }
}

/// One affine layer followed by an elementwise activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: ActivationKind,
}

impl Layer {
    pub fn new(
        weight: DMatrix<f64>,
        bias: DVector<f64>,
        activation: ActivationKind,
    ) -> Result<Self, NnError> {
        if weight.nrows() != bias.len() {
            return Err(NnError::Dimension {
                context: "layer bias length vs weight rows",
                expected: weight.nrows(),
                actual: bias.len(),
            });
        }
        if weight.nrows() == 0 || weight.ncols() == 0 {
            return Err(NnError::Empty);
        }
        Ok(Layer {
            weight,
            bias,
            activation,
        })
    }
}

/// A feedforward network: an ordered stack of layers with chained widths.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralNetwork {
    layers: Vec<Layer>,
}

impl NeuralNetwork {
    pub fn new(layers: Vec<Layer>) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::Empty);
        }
        for pair in layers.windows(2) {
            if pair[1].weight.ncols() != pair[0].weight.nrows() {
                return Err(NnError::Dimension {
                    context: "consecutive layer widths",
                    expected: pair[0].weight.nrows(),
                    actual: pair[1].weight.ncols(),
                });
            }
        }
        Ok(NeuralNetwork { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.nrows()
    }

    /// Evaluates the layer recursion on `input`.
    pub fn forward(&self, input: &DVector<f64>) -> Result<DVector<f64>, NnError> {
        if input.len() != self.input_dim() {
            return Err(NnError::Dimension {
                context: "network input",
                expected: self.input_dim(),
                actual: input.len(),
            });
        }
        let mut value = input.clone();
        for layer in &self.layers {
            let mut pre = layer.bias.clone();
            for i in 0..layer.weight.nrows() {
                let mut acc = pre[i];
                for j in 0..layer.weight.ncols() {
                    acc += layer.weight[(i, j)] * value[j];
                }
                pre[i] = layer.activation.apply(acc);
            }
            value = pre;
        }
        Ok(value)
    }
}

/// Largest activation Lipschitz constant across the network's layers.
pub fn lipschitz_bound(nn: &NeuralNetwork) -> f64 {
    nn.layers()
        .iter()
        .map(|l| l.activation.lipschitz_alpha())
        .fold(0.0, f64::max)
}

/// Splits `w` into its strictly negative part and its nonnegative part.
/// The two parts sum back to `w` bit-exactly; zeros land in the upper part.
pub fn split_weights(w: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let lower = w.map(|v| if v < 0.0 { v } else { 0.0 });
    let upper = w.map(|v| if v < 0.0 { 0.0 } else { v });
    (lower, upper)
}

/// A layer of the two auxiliary networks: the sign-split weights with the
/// original bias and activation.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitLayer {
    pub w_lower: DMatrix<f64>,
    pub w_upper: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: ActivationKind,
}

/// The pair of auxiliary bracketing networks, stored as per-layer splits.
/// Both recursions share these weights and differ only in how the lower and
/// upper inputs are cross-fed.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliaryPair {
    layers: Vec<SplitLayer>,
}

impl AuxiliaryPair {
    pub fn layers(&self) -> &[SplitLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w_lower.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].w_lower.nrows()
    }
}

/// Builds the auxiliary pair by sign-splitting every layer of `nn`.
/// Biases and activations are copied unchanged.
pub fn make_auxiliary_pair(nn: &NeuralNetwork) -> AuxiliaryPair {
    let layers = nn
        .layers()
        .iter()
        .map(|layer| {
            let (w_lower, w_upper) = split_weights(&layer.weight);
            SplitLayer {
                w_lower,
                w_upper,
                bias: layer.bias.clone(),
                activation: layer.activation,
            }
        })
        .collect();
    AuxiliaryPair { layers }
}

/// A box `[lower, upper]` with `lower <= upper` elementwise.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalVector {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl IntervalVector {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self, NnError> {
        if lower.len() != upper.len() {
            return Err(NnError::Dimension {
                context: "interval bounds",
                expected: lower.len(),
                actual: upper.len(),
            });
        }
        for i in 0..lower.len() {
            if lower[i] > upper[i] {
                return Err(NnError::IntervalOrder {
                    index: i,
                    lower: lower[i],
                    upper: upper[i],
                });
            }
        }
        Ok(IntervalVector { lower, upper })
    }

    /// Degenerate box `[v, v]`.
    pub fn point(v: DVector<f64>) -> Self {
        IntervalVector {
            lower: v.clone(),
            upper: v,
        }
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.len() == 0
    }

    pub fn contains(&self, v: &DVector<f64>, tol: f64) -> bool {
        v.len() == self.len()
            && (0..v.len()).all(|i| v[i] >= self.lower[i] - tol && v[i] <= self.upper[i] + tol)
    }
}

/// Runs both auxiliary recursions on raw lower/upper vectors.
///
/// The bounds are not required to be ordered: the estimator integrates
/// through transient states and an inverted pair is a detectable runtime
/// fault there, not a reason to halt. When `lower <= upper` holds the
/// output is ordered as well.
///
/// Each preactivation entry is accumulated in one pass over the columns so
/// that on a degenerate box the arithmetic is identical, term for term, to
/// [`NeuralNetwork::forward`].
pub fn aux_forward(
    pair: &AuxiliaryPair,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), NnError> {
    if lower.len() != pair.input_dim() {
        return Err(NnError::Dimension {
            context: "auxiliary network input",
            expected: pair.input_dim(),
            actual: lower.len(),
        });
    }
    if upper.len() != lower.len() {
        return Err(NnError::Dimension {
            context: "auxiliary network input bounds",
            expected: lower.len(),
            actual: upper.len(),
        });
    }
    let mut lo = lower.clone();
    let mut hi = upper.clone();
    for layer in &pair.layers {
        let rows = layer.w_lower.nrows();
        let cols = layer.w_lower.ncols();
        let mut next_lo = DVector::zeros(rows);
        let mut next_hi = DVector::zeros(rows);
        for i in 0..rows {
            let mut acc_lo = layer.bias[i];
            let mut acc_hi = layer.bias[i];
            for j in 0..cols {
                let wl = layer.w_lower[(i, j)];
                let wh = layer.w_upper[(i, j)];
                acc_lo += wl * hi[j];
                acc_lo += wh * lo[j];
                acc_hi += wl * lo[j];
                acc_hi += wh * hi[j];
            }
            next_lo[i] = layer.activation.apply(acc_lo);
            next_hi[i] = layer.activation.apply(acc_hi);
        }
        lo = next_lo;
        hi = next_hi;
    }
    Ok((lo, hi))
}

/// Propagates a box through the auxiliary pair, returning the bracketing
/// output box.
pub fn interval_forward(
    pair: &AuxiliaryPair,
    input: &IntervalVector,
) -> Result<IntervalVector, NnError> {
    let (lo, hi) = aux_forward(pair, input.lower(), input.upper())?;
    IntervalVector::new(lo, hi)
}
