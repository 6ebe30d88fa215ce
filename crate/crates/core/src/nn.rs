//! Residual MLP backbone shared by scalar (plain/dual) and tape evaluation.
//!
//! Both evaluation paths accumulate every affine output in the same order,
//! so plain `T`, the primal part of a [`Dual`], and the tape agree bit for
//! bit.
//!
//! [`Dual`]: crate::autodiff::Dual

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, ParamStore, Tape, TensorSpec};
use crate::error::{Error, Result};
use crate::scalar::{Real, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Silu,
    /// Identity; used to hand-build exactly linear maps.
    Linear,
}

impl Activation {
    #[inline]
    pub fn eval<T: Real>(self, x: T) -> T {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Silu => x / (T::one() + (-x).exp()),
            Activation::Linear => x,
        }
    }

    #[inline]
    pub fn deriv<T: Real>(self, x: T) -> T {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            Activation::Silu => {
                let s = T::one() / (T::one() + (-x).exp());
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Linear => T::one(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Silu => "silu",
            Activation::Linear => "linear",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "silu" | "swish" => Ok(Activation::Silu),
            "linear" | "identity" => Ok(Activation::Linear),
            other => Err(Error::UnsupportedPrimitive { op: other.into() }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    name: String,
    inputs: usize,
    outputs: usize,
    weight: Range<usize>,
    bias: Range<usize>,
}

/// `h₀ = act(W_in z + b_in)`, `hₖ = hₖ₋₁ + act(Wₖ hₖ₋₁ + bₖ)`, `y = W_out h + b_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualMlp {
    inputs: usize,
    width: usize,
    depth: usize,
    outputs: usize,
    activation: Activation,
    layers: Vec<Layer>,
}

impl ResidualMlp {
    pub fn new(inputs: usize, width: usize, depth: usize, outputs: usize, activation: Activation) -> Self {
        assert!(inputs > 0 && width > 0 && depth > 0 && outputs > 0, "positive MLP sizes");
        let mut layers = Vec::with_capacity(depth + 1);
        let mut at = 0;
        let mut push = |name: String, i: usize, o: usize| {
            let weight = at..at + i * o;
            let bias = weight.end..weight.end + o;
            at = bias.end;
            layers.push(Layer {
                name,
                inputs: i,
                outputs: o,
                weight,
                bias,
            });
        };
        push("input".into(), inputs, width);
        for k in 1..depth {
            push(format!("hidden{k}"), width, width);
        }
        push("output".into(), width, outputs);
        Self {
            inputs,
            width,
            depth,
            outputs,
            activation,
            layers,
        }
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layout(&self) -> Vec<TensorSpec> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    TensorSpec::new(format!("{}.weight", l.name), &[l.outputs, l.inputs]),
                    TensorSpec::new(format!("{}.bias", l.name), &[l.outputs]),
                ]
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.last().map_or(0, |l| l.bias.end)
    }

    /// Uniform `±1/√fan_in` init; the output layer is zeroed when
    /// `zero_output` is set.
    pub fn init<T: Real, R: Rng + ?Sized>(&self, rng: &mut R, zero_output: bool) -> ParamStore<T> {
        let mut values = vec![T::zero(); self.num_params()];
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            if zero_output && i == last {
                continue;
            }
            let bound = 1.0 / (l.inputs as f64).sqrt();
            for v in &mut values[l.weight.start..l.bias.end] {
                *v = T::of(rng.gen_range(-bound..bound));
            }
        }
        ParamStore::from_values(self.layout(), values).expect("layout matches")
    }

    fn check(&self, params: &[impl Sized]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                context: "mlp parameters",
                expected: self.num_params(),
                got: params.len(),
            });
        }
        Ok(())
    }

    fn affine<T: Real, S: Scalar<T>>(l: &Layer, params: &[T], z: &[S]) -> Vec<S> {
        let w = &params[l.weight.clone()];
        let b = &params[l.bias.clone()];
        (0..l.outputs)
            .map(|o| {
                let row = &w[o * l.inputs..(o + 1) * l.inputs];
                let mut acc = S::lift(T::zero());
                for (&wk, &zk) in row.iter().zip(z) {
                    acc = acc.mul_add_const(wk, zk);
                }
                acc + S::lift(b[o])
            })
            .collect()
    }

    /// Single-input evaluation on any [`Scalar`].
    pub fn forward<T: Real, S: Scalar<T>>(&self, params: &[T], z: &[S]) -> Result<Vec<S>> {
        self.check(params)?;
        if z.len() != self.inputs {
            return Err(Error::DimensionMismatch {
                context: "mlp input",
                expected: self.inputs,
                got: z.len(),
            });
        }
        let act = self.activation;
        let mut h: Vec<S> = Self::affine(&self.layers[0], params, z)
            .into_iter()
            .map(|v| v.activate(act))
            .collect();
        for l in &self.layers[1..self.layers.len() - 1] {
            let a = Self::affine(l, params, &h);
            for (hi, ai) in h.iter_mut().zip(a) {
                *hi = *hi + ai.activate(act);
            }
        }
        Ok(Self::affine(self.layers.last().expect("output layer"), params, &h))
    }

    /// Batched evaluation on a tape; `z` is `rows × inputs`.
    pub fn forward_tape<T: Real>(&self, tape: &mut Tape<'_, T>, z: NodeId) -> Result<NodeId> {
        self.check(tape.params().values())?;
        let mut weights = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let w = tape.param(&format!("{}.weight", l.name))?;
            let b = tape.param(&format!("{}.bias", l.name))?;
            weights.push((w, b));
        }
        let (w, b) = weights[0];
        let pre = tape.affine(z, w, b);
        let mut h = tape.activation(pre, self.activation);
        for &(w, b) in &weights[1..weights.len() - 1] {
            let pre = tape.affine(h, w, b);
            let a = tape.activation(pre, self.activation);
            h = tape.add(h, a);
        }
        let (w, b) = weights[weights.len() - 1];
        Ok(tape.affine(h, w, b))
    }

    /// Weight block of a layer as a mutable slice: `(weight, bias)`.
    pub fn layer_mut<'a, T>(&self, params: &'a mut [T], layer: usize) -> (&'a mut [T], &'a mut [T]) {
        let l = &self.layers[layer];
        let (head, tail) = params.split_at_mut(l.bias.start);
        (&mut head[l.weight.clone()], &mut tail[..l.outputs])
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}
