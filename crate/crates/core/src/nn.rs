//! Parameter storage and the handful of layer types the model is built from.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named, ordered collection of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Replaces all tensor values, checking names and shapes match.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        ensure!(self.names == other.names, "parameter names differ");
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            ensure!(a.shape() == b.shape(), "parameter shapes differ");
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }

    pub fn zero_all(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().fill(T::zero());
        }
    }

    /// Places every parameter on `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        self.bind_where(g, trainable, |_| true)
    }

    /// Places only the parameters whose name satisfies `keep`.
    pub fn bind_where(&self, g: &mut Graph<T>, trainable: bool, keep: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| {
                keep(name).then(|| {
                    if trainable {
                        g.leaf(t.clone())
                    } else {
                        g.constant(t.clone())
                    }
                })
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters of a [`ParamStore`] placed on a graph.
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    /// Wraps externally created nodes, one per parameter in store order.
    pub fn from_vars(vars: &[Var]) -> Self {
        Self {
            vars: vars.iter().copied().map(Some).collect(),
        }
    }

    /// Panics if the parameter was not bound.
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0].expect("parameter not bound to this graph")
    }

    /// Bound node per parameter, in store order.
    pub fn vars(&self) -> &[Option<Var>] {
        &self.vars
    }
}

/// Builds freshly initialized parameters into a store.
pub struct Initializer<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<T: Real> Initializer<'_, T> {
    /// Uniform `±gain·sqrt(6 / fan_in)` (He-uniform for `gain = 1`).
    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize, gain: f64) -> ParamId {
        let bound = gain * (6.0 / fan_in.max(1) as f64).sqrt();
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..=bound)));
        self.store.add(name, t)
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        init: &mut Initializer<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        gain: f64,
    ) -> Self {
        let weight = init.uniform(format!("{name}.weight"), &[cout, cin, kernel, kernel], cin * kernel * kernel, gain);
        let bias = init.zeros(format!("{name}.bias"), &[cout]);
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        init: &mut Initializer<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        gain: f64,
    ) -> Self {
        // Each output pixel sees about cin·(k/stride)² inputs.
        let taps = (kernel / stride.max(1)).max(1);
        let weight = init.uniform(format!("{name}.weight"), &[cin, cout, kernel, kernel], cin * taps * taps, gain);
        let bias = init.zeros(format!("{name}.bias"), &[cout]);
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv_transpose2d(x, p.var(self.weight), Some(p.var(self.bias)), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real>(init: &mut Initializer<'_, T>, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> Self {
        let weight = init.uniform(format!("{name}.weight"), &[fan_in, fan_out], fan_in, gain);
        let bias = init.zeros(format!("{name}.bias"), &[fan_out]);
        Self { weight, bias }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.weight), p.var(self.bias))
    }
}

/// Pre-activation residual block: `x + conv(relu(conv(relu(x))))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResBlock {
    pub fn new<T: Real>(init: &mut Initializer<'_, T>, name: &str, channels: usize) -> Self {
        let conv1 = Conv2d::new(init, &format!("{name}.conv1"), channels, channels, 3, 1, 1, 1.0);
        // Residual branch starts near zero.
        let conv2 = Conv2d::new(init, &format!("{name}.conv2"), channels, channels, 3, 1, 1, 0.1);
        Self { conv1, conv2 }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = g.relu(x);
        let h = self.conv1.forward(g, p, h)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, p, h)?;
        g.add(x, h)
    }
}
