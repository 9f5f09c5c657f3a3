use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::params::{BlockId, ParamStore};
use crate::error::{Error, Result};

/// Number of sinusoidal time features (8 geometric frequencies, sin and cos).
pub const TIME_FEATURES: usize = 16;

/// Sinusoidal embedding of timestep `t` out of `steps`.
///
/// Frequencies are spaced geometrically from 1 to 64 radians over the
/// normalized range `t / steps` in `[0, 1]`, which stays below the Nyquist
/// rate for any `steps >= 21`.
pub fn time_features(t: usize, steps: usize) -> [f64; TIME_FEATURES] {
    let s = t as f64 / steps.max(1) as f64;
    let mut out = [0.0; TIME_FEATURES];
    for i in 0..TIME_FEATURES / 2 {
        let omega = 64f64.powf(i as f64 / 7.0);
        out[2 * i] = (omega * s).sin();
        out[2 * i + 1] = (omega * s).cos();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// Layer widths of a tanh MLP, input first. Hidden layers use tanh and the
/// output layer is linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub widths: Vec<usize>,
}

impl NetworkSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        let spec = Self { widths };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 3 {
            return Err(Error::config(
                "network needs an input, at least one hidden layer and an output",
            ));
        }
        if self.widths.contains(&0) {
            return Err(Error::config("network layer widths must be positive"));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

/// Fully connected layer `y = W x + b` with `W` stored row-major as
/// `[fan_out, fan_in]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: BlockId,
    pub bias: BlockId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    /// Weights drawn from `N(0, gain^2 / fan_in)`, zero biases.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let std = gain / (fan_in as f64).sqrt();
        let weight = store.add_block(format!("{name}.weight"), &[fan_out, fan_in], || {
            std * rng.sample::<f64, _>(StandardNormal)
        })?;
        let bias = store.add_block(format!("{name}.bias"), &[fan_out], || 0.0)?;
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    /// Binds to existing blocks named `{name}.weight` / `{name}.bias`.
    pub fn from_store(store: &ParamStore, name: &str) -> Result<Self> {
        let lookup = |suffix: &str| {
            store
                .find(&format!("{name}.{suffix}"))
                .ok_or_else(|| Error::config(format!("missing parameter block `{name}.{suffix}`")))
        };
        let weight = lookup("weight")?;
        let bias = lookup("bias")?;
        let shape = &store.block(weight).shape;
        if shape.len() != 2 || store.block(bias).shape != [shape[0]] {
            return Err(Error::config(format!(
                "block `{name}` has inconsistent shapes"
            )));
        }
        Ok(Self {
            weight,
            bias,
            fan_in: shape[1],
            fan_out: shape[0],
        })
    }

    pub fn forward(&self, values: &[f64], store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let w = &values[store.block(self.weight).range()];
        let b = &values[store.block(self.bias).range()];
        (0..self.fan_out)
            .map(|i| {
                let row = &w[i * self.fan_in..(i + 1) * self.fan_in];
                b[i] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
            })
            .collect()
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub fn backward(
        &self,
        values: &[f64],
        store: &ParamStore,
        x: &[f64],
        d_out: &[f64],
        grads: &mut [f64],
    ) -> Vec<f64> {
        let w_range = store.block(self.weight).range();
        let b_range = store.block(self.bias).range();
        let w = &values[w_range.clone()];
        let mut d_x = vec![0.0; self.fan_in];
        {
            let gw = &mut grads[w_range];
            for i in 0..self.fan_out {
                let d = d_out[i];
                if d == 0.0 {
                    continue;
                }
                let row = &w[i * self.fan_in..(i + 1) * self.fan_in];
                let grow = &mut gw[i * self.fan_in..(i + 1) * self.fan_in];
                for j in 0..self.fan_in {
                    grow[j] += d * x[j];
                    d_x[j] += d * row[j];
                }
            }
        }
        for (g, d) in grads[b_range].iter_mut().zip(d_out) {
            *g += d;
        }
        d_x
    }
}

/// Activations recorded by [`Mlp::forward`]; `layers[0]` is the input and
/// `layers[i]` the post-activation output of layer `i`.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    widths: Vec<usize>,
    layers: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.layers.last().unwrap()
    }

    pub fn input(&self) -> &[f64] {
        &self.layers[0]
    }

    pub fn into_output(mut self) -> Vec<f64> {
        self.layers.pop().unwrap()
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    spec: NetworkSpec,
    layers: Vec<Dense>,
}

impl Mlp {
    /// Allocates and initializes layers `{prefix}.{i}` in `store`.
    pub fn new<R: Rng + ?Sized>(
        spec: NetworkSpec,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let n = spec.widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                Dense::new(
                    store,
                    &format!("{prefix}.{i}"),
                    spec.widths[i],
                    spec.widths[i + 1],
                    1.0,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, layers })
    }

    pub fn from_store(spec: NetworkSpec, store: &ParamStore, prefix: &str) -> Result<Self> {
        spec.validate()?;
        let layers = (0..spec.widths.len() - 1)
            .map(|i| Dense::from_store(store, &format!("{prefix}.{i}")))
            .collect::<Result<Vec<_>>>()?;
        for (i, layer) in layers.iter().enumerate() {
            if layer.fan_in != spec.widths[i] || layer.fan_out != spec.widths[i + 1] {
                return Err(Error::config(format!(
                    "layer {prefix}.{i} shape does not match network widths"
                )));
            }
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            Activation::Identity
        } else {
            Activation::Tanh
        }
    }

    pub fn forward(&self, store: &ParamStore, input: &[f64]) -> Result<MlpTrace> {
        if input.len() != self.spec.input_width() {
            return Err(Error::config(format!(
                "network input has width {}, expected {}",
                input.len(),
                self.spec.input_width()
            )));
        }
        let values = store.values();
        let mut layers = Vec::with_capacity(self.layers.len() + 1);
        layers.push(input.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let act = self.activation(i);
            let mut y = layer.forward(values, store, layers.last().unwrap());
            y.iter_mut().for_each(|v| *v = act.apply(*v));
            layers.push(y);
        }
        Ok(MlpTrace {
            widths: self.spec.widths.clone(),
            layers,
        })
    }

    /// Evaluates the network without keeping intermediate activations.
    pub fn predict(&self, store: &ParamStore, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(store, input)?.into_output())
    }

    /// Reverse pass for the trace of a previous forward call.
    ///
    /// Gradients are added into `grads`, which must have the layout of
    /// `store`. Returns the cotangent with respect to the network input.
    pub fn backward(
        &self,
        store: &ParamStore,
        trace: &MlpTrace,
        cotangent: &[f64],
        grads: &mut [f64],
    ) -> Result<Vec<f64>> {
        if trace.widths != self.spec.widths {
            return Err(Error::usage(
                "backward called with a trace recorded by a different network",
            ));
        }
        if cotangent.len() != self.spec.output_width() {
            return Err(Error::config(format!(
                "cotangent has width {}, expected {}",
                cotangent.len(),
                self.spec.output_width()
            )));
        }
        if grads.len() != store.len() {
            return Err(Error::config(
                "gradient buffer does not match parameter store",
            ));
        }
        let values = store.values();
        let mut d = cotangent.to_vec();
        for i in (0..self.layers.len()).rev() {
            let act = self.activation(i);
            let out = &trace.layers[i + 1];
            for (dj, yj) in d.iter_mut().zip(out) {
                *dj *= act.derivative_from_output(*yj);
            }
            d = self.layers[i].backward(values, store, &trace.layers[i], &d, grads);
        }
        Ok(d)
    }
}
