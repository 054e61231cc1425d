//! Parameter containers: named traversal, initialization and gradient buffers.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{affine, affine_backward, Tensor};

/// A structure of trainable tensors that can be walked in a fixed order.
///
/// The traversal order defines checkpoint layout and optimizer state layout,
/// so implementations must never reorder fields.
pub trait ParamSet {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor));

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t)));
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |n, t| out.push((n, t)));
        out
    }

    fn num_scalars(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Same structure, every tensor zeroed.
    fn zeroed(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, t| t.fill(0.0));
        z
    }

    fn accumulate(&mut self, other: &Self) {
        let src = other.named_tensors();
        for ((_, dst), (_, s)) in self.named_tensors_mut().into_iter().zip(src) {
            dst.add_assign(s);
        }
    }

    fn scale_all(&mut self, factor: f64) {
        self.visit_mut("", &mut |_, t| t.scale(factor));
    }

    /// All scalars in traversal order.
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for (_, t) in self.named_tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrites all scalars from a flat slice in traversal order.
    fn assign_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.visit_mut("", &mut |_, t| {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        });
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_init<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..=bound);
    }
    t
}

/// Dense layer `x W + b` with `W: [d_in, d_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d_in: usize, d_out: usize) -> Self {
        Linear {
            w: uniform_init(rng, &[d_in, d_out], d_in),
            b: uniform_init(rng, &[d_out], d_in),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear {
            w: Tensor::zeros(&[d_in, d_out]),
            b: Tensor::zeros(&[d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.rows()
    }

    pub fn d_out(&self) -> usize {
        self.w.cols()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        affine(x, &self.w, &self.b)
    }

    /// Accumulates weight gradients into `grads` and returns the input gradient.
    pub fn backward(&self, x: &Tensor, d_out: &Tensor, grads: &mut Linear) -> Tensor {
        let g = affine_backward(x, &self.w, d_out);
        grads.w.add_assign(&g.dw);
        grads.b.add_assign(&g.db);
        g.dx
    }
}

impl ParamSet for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "w"), &self.w);
        f(join(prefix, "b"), &self.b);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(join(prefix, "w"), &mut self.w);
        f(join(prefix, "b"), &mut self.b);
    }
}
