//! Small parameterised layers on top of the gradient tape.

use rand::Rng;

use crate::numeric::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add_xavier(format!("{name}.weight"), group, &[d_in, d_out], d_in, d_out, rng);
        let b = store.add(format!("{name}.bias"), group, Tensor::zeros(&[d_out]));
        Self { w, b, d_in, d_out }
    }

    /// A layer whose weight and bias start at zero.
    pub fn zeroed(store: &mut ParamStore, name: &str, group: ParamGroup, d_in: usize, d_out: usize) -> Self {
        let w = store.add(format!("{name}.weight"), group, Tensor::zeros(&[d_in, d_out]));
        let b = store.add(format!("{name}.bias"), group, Tensor::zeros(&[d_out]));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// Perceptron with ReLU between layers and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dims: &[usize],
        rng: &mut R,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), group, w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("mlp has layers")
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h);
            if i + 1 < n {
                h = g.relu(h);
            }
        }
        h
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, d: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), group, Tensor::full(&[d], 1.0));
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[d]));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Zeroes a parameter in place.
pub(crate) fn zero_param(store: &mut ParamStore, id: ParamId) {
    store.value_mut(id).data_mut().fill(0.0);
}
