use rand::Rng;

use crate::autodiff::{AutodiffError, BufferId, ParamStore, Tensor, Var};

fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..=bound)).collect()).expect("shape")
}

/// Index of a parameter in store (and bound-variable) order.
pub(crate) type Slot = usize;

fn add(store: &mut ParamStore, name: &str, t: Tensor) -> Result<Slot, AutodiffError> {
    Ok(store.add(name, t)?.0)
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub w: Slot,
    pub b: Slot,
}

impl Linear {
    /// Weights uniform in ±1/√fan_in, zero bias; `zero` zeroes the weights too.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
        zero: bool,
    ) -> Result<Self, AutodiffError> {
        let w = if zero { Tensor::zeros(&[fan_in, fan_out]) } else { uniform(rng, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt()) };
        Ok(Self { w: add(store, &format!("{name}.w"), w)?, b: add(store, &format!("{name}.b"), Tensor::zeros(&[fan_out]))? })
    }

    pub fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        x.matmul(p[self.w])?.add_bias(p[self.b])
    }
}

/// Two linear layers with GELU in between.
#[derive(Clone, Debug)]
pub(crate) struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp2 {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: [usize; 3],
        rng: &mut R,
        zero_last: bool,
    ) -> Result<Self, AutodiffError> {
        Ok(Self {
            l1: Linear::new(store, &format!("{name}.0"), dims[0], dims[1], rng, false)?,
            l2: Linear::new(store, &format!("{name}.1"), dims[1], dims[2], rng, zero_last)?,
        })
    }

    pub fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.l2.forward(p, self.l1.forward(p, x)?.gelu())
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerNorm {
    pub gamma: Slot,
    pub beta: Slot,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self, AutodiffError> {
        Ok(Self {
            gamma: add(store, &format!("{name}.gamma"), Tensor::filled(&[dim], 1.0))?,
            beta: add(store, &format!("{name}.beta"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        x.layer_norm(p[self.gamma], p[self.beta])
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BatchNorm {
    pub gamma: Slot,
    pub beta: Slot,
    pub buffer: BufferId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self, AutodiffError> {
        Ok(Self {
            gamma: add(store, &format!("{name}.gamma"), Tensor::filled(&[dim], 1.0))?,
            beta: add(store, &format!("{name}.beta"), Tensor::zeros(&[dim]))?,
            buffer: store.add_buffer(name, dim)?,
        })
    }

    pub fn forward<'t>(&self, p: &[Var<'t>], store: &ParamStore, x: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let rs = store.buffer(self.buffer);
        x.batch_norm(p[self.gamma], p[self.beta], self.buffer, &rs.mean, &rs.var)
    }
}

/// Linear → BN → GELU → Linear → BN → GELU, the shared edge perceptron.
#[derive(Clone, Debug)]
pub(crate) struct EdgeMlp {
    pub l1: Linear,
    pub n1: BatchNorm,
    pub l2: Linear,
    pub n2: BatchNorm,
}

impl EdgeMlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dims: [usize; 3], rng: &mut R) -> Result<Self, AutodiffError> {
        Ok(Self {
            l1: Linear::new(store, &format!("{name}.0"), dims[0], dims[1], rng, false)?,
            n1: BatchNorm::new(store, &format!("{name}.bn0"), dims[1])?,
            l2: Linear::new(store, &format!("{name}.1"), dims[1], dims[2], rng, false)?,
            n2: BatchNorm::new(store, &format!("{name}.bn1"), dims[2])?,
        })
    }

    pub fn forward<'t>(&self, p: &[Var<'t>], store: &ParamStore, x: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let h = self.n1.forward(p, store, self.l1.forward(p, x)?)?.gelu();
        Ok(self.n2.forward(p, store, self.l2.forward(p, h)?)?.gelu())
    }
}
