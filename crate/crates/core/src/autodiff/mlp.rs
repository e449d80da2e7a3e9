use serde::{Deserialize, Serialize};

use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::numkit::{Mat, RngStream};

/// Negative-side slope of the leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Relu,
    Tanh,
    Linear,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }

    fn on_tape(self, tape: &mut Tape, v: Var) -> Var {
        match self {
            Activation::LeakyRelu => tape.leaky_relu(v, LEAKY_SLOPE),
            Activation::Relu => tape.relu(v),
            Activation::Tanh => tape.tanh(v),
            Activation::Linear => v,
        }
    }
}

/// Layer widths including input and output, plus activations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, hidden: Activation, output: Activation) -> Result<Self> {
        let spec = Self {
            widths,
            hidden,
            output,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::InvalidArgument("an MLP needs at least one layer".into()));
        }
        if self.widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("zero width in {:?}", self.widths)));
        }
        if !matches!(self.output, Activation::Linear | Activation::Tanh) {
            return Err(Error::InvalidArgument(format!("unsupported output activation {:?}", self.output)));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// A multilayer perceptron whose weights live in a [`ParamStore`].
///
/// Each layer stores `W` (`in × out`, row-major) followed by `b` (`out`), so
/// a batch `X` maps to `X W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    offset: usize,
}

impl Mlp {
    /// Allocates a segment named `name` and fills it with
    /// `U(−1/√fan_in, 1/√fan_in)` draws.
    pub fn new(store: &mut ParamStore, name: &str, spec: MlpSpec, rng: &mut RngStream) -> Result<Self> {
        spec.validate()?;
        let offset = store.alloc(name, spec.n_params())?;
        let flat = store.flat_mut();
        let mut pos = offset;
        for w in spec.widths.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for p in &mut flat[pos..pos + w[0] * w[1] + w[1]] {
                *p = rng.uniform(-bound, bound);
            }
            pos += w[0] * w[1] + w[1];
        }
        Ok(Self { spec, offset })
    }

    /// Binds a spec to parameters already present at `offset`.
    pub fn attach(store: &ParamStore, spec: MlpSpec, offset: usize) -> Result<Self> {
        spec.validate()?;
        if offset + spec.n_params() > store.len() {
            return Err(Error::Dimension(format!(
                "network of {} parameters at offset {offset} exceeds store of length {}",
                spec.n_params(),
                store.len()
            )));
        }
        Ok(Self { spec, offset })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        let mut pos = self.offset;
        let n_layers = self.spec.widths.len() - 1;
        for (l, w) in self.spec.widths.windows(2).enumerate() {
            let weight = tape.param(store, pos, w[0], w[1])?;
            let bias = tape.param(store, pos + w[0] * w[1], 1, w[1])?;
            pos += w[0] * w[1] + w[1];
            let lin = tape.matmul(h, weight)?;
            h = tape.add_row(lin, bias)?;
            let act = if l + 1 == n_layers {
                self.spec.output
            } else {
                self.spec.hidden
            };
            h = act.on_tape(tape, h);
        }
        Ok(h)
    }

    /// Forward pass for a single input without recording a tape.
    pub fn eval(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.spec.input_dim(), "mlp input dimension");
        let flat = store.flat();
        let mut h = x.to_vec();
        let mut pos = self.offset;
        let n_layers = self.spec.widths.len() - 1;
        for (l, w) in self.spec.widths.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weight = &flat[pos..pos + n_in * n_out];
            let bias = &flat[pos + n_in * n_out..pos + n_in * n_out + n_out];
            pos += n_in * n_out + n_out;
            let mut out = bias.to_vec();
            for (i, &hi) in h.iter().enumerate() {
                for (o, &wij) in out.iter_mut().zip(&weight[i * n_out..(i + 1) * n_out]) {
                    *o += hi * wij;
                }
            }
            let act = if l + 1 == n_layers {
                self.spec.output
            } else {
                self.spec.hidden
            };
            h = out.into_iter().map(|v| act.apply(v)).collect();
        }
        h
    }

    pub fn eval_batch(&self, store: &ParamStore, x: &Mat) -> Mat {
        let mut out = Mat::zeros(x.rows(), self.spec.output_dim());
        for i in 0..x.rows() {
            out.row_mut(i).copy_from_slice(&self.eval(store, x.row(i)));
        }
        out
    }
}
