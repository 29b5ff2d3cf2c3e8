use rand::Rng;

use super::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{Graph, Real, Result, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Layer {
    Conv { w: ParamId, b: ParamId, stride: usize, padding: usize },
    ConvTranspose { w: ParamId, b: ParamId, stride: usize, padding: usize },
    Linear { w: ParamId, b: ParamId },
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    MaxPool { window: usize, stride: usize },
    GlobalAvgPool,
    Flatten,
}

/// Ordered layer stack over parameters held in a [`ParamStore`].
#[derive(Clone, Debug, Default, PartialEq)]
pub(crate) struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, params: &[Var], mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = match *layer {
                Layer::Conv { w, b, stride, padding } => g.conv2d(x, params[w.0], params[b.0], stride, padding)?,
                Layer::ConvTranspose { w, b, stride, padding } => {
                    g.conv_transpose2d(x, params[w.0], params[b.0], stride, padding)?
                }
                Layer::Linear { w, b } => g.linear(x, params[w.0], params[b.0])?,
                Layer::Relu => g.relu(x),
                Layer::LeakyRelu(s) => g.leaky_relu(x, s),
                Layer::Sigmoid => g.sigmoid(x),
                Layer::MaxPool { window, stride } => g.maxpool2d(x, window, stride)?,
                Layer::GlobalAvgPool => g.global_avg_pool(x)?,
                Layer::Flatten => {
                    let s = g.shape(x).to_vec();
                    let rest: usize = s[1..].iter().product();
                    g.reshape(x, &[s[0], rest])?
                }
            };
        }
        Ok(x)
    }
}

/// Builds layers while registering their parameters with fan-in scaled
/// uniform initialisation, `U(−√(6/fan_in), √(6/fan_in))`, and zero biases.
pub(crate) struct Builder<'a, T, R> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    pub group: ParamGroup,
    pub seq: Sequential,
}

impl<'a, T: Real, R: Rng> Builder<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R, group: ParamGroup) -> Self {
        Builder {
            store,
            rng,
            group,
            seq: Sequential::default(),
        }
    }

    fn weights(&mut self, shape: &[usize], fan_in: f64) -> Tensor<T> {
        let bound = (6.0 / fan_in).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(self.rng.gen_range(-bound..bound))).collect();
        Tensor::from_vec(shape, data).expect("positive extents")
    }

    fn register(&mut self, kind: &str, w: Tensor<T>, bias_len: usize) -> (ParamId, ParamId) {
        let idx = self.seq.layers.len();
        let w = self.store.push(format!("{}.{idx}.{kind}.weight", self.group), self.group, w);
        let b = self
            .store
            .push(format!("{}.{idx}.{kind}.bias", self.group), self.group, Tensor::zeros(&[bias_len]));
        (w, b)
    }

    pub fn conv(&mut self, c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize) -> &mut Self {
        let w = self.weights(&[c_out, c_in, kernel, kernel], (c_in * kernel * kernel) as f64);
        let (w, b) = self.register("conv", w, c_out);
        self.seq.layers.push(Layer::Conv { w, b, stride, padding });
        self
    }

    pub fn conv_transpose(&mut self, c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize) -> &mut Self {
        let taps = (kernel * kernel) as f64 / (stride * stride) as f64;
        let w = self.weights(&[c_in, c_out, kernel, kernel], c_in as f64 * taps.max(1.0));
        let (w, b) = self.register("deconv", w, c_out);
        self.seq.layers.push(Layer::ConvTranspose { w, b, stride, padding });
        self
    }

    pub fn linear(&mut self, f_in: usize, f_out: usize) -> &mut Self {
        let w = self.weights(&[f_in, f_out], f_in as f64);
        let (w, b) = self.register("linear", w, f_out);
        self.seq.layers.push(Layer::Linear { w, b });
        self
    }

    /// Overwrite the bias of the most recent parameterised layer.
    pub fn fill_last_bias(&mut self, value: T) -> &mut Self {
        let b = self.seq.layers.iter().rev().find_map(|l| match *l {
            Layer::Conv { b, .. } | Layer::ConvTranspose { b, .. } | Layer::Linear { b, .. } => Some(b),
            _ => None,
        });
        let b = b.expect("a parameterised layer precedes fill_last_bias");
        self.store.entries[b.0].value.data_mut().iter_mut().for_each(|v| *v = value);
        self
    }

    pub fn push(&mut self, layer: Layer) -> &mut Self {
        self.seq.layers.push(layer);
        self
    }

    pub fn finish(self) -> Sequential {
        self.seq
    }
}
