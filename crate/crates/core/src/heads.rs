//! Task branches: two-block classifiers for emotion, gender and speaker, and
//! the recurrent CTC head for speech recognition.
//!
//! Each classifier is `affine -> layer norm -> relu -> dropout` (the first
//! block, whose output is exposed as `hidden1` for co-attention) followed by a
//! final affine layer producing logits.

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::numerics::{
    layer_norm_backward, layer_norm_forward, relu, relu_backward, sigmoid_scalar, LayerNormCache,
    Tensor, LAYER_NORM_EPS,
};
use crate::params::{join, uniform_init, Linear, ParamSet};

pub const DEFAULT_DROPOUT: f64 = 0.1;

/// Forward-pass mode. Dropout masks are drawn from the supplied generator
/// only in `Train`.
pub enum Phase<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Phase<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Phase::Train(_))
    }

    /// Reborrows so the phase can be threaded through several sub-calls.
    pub fn reborrow(&mut self) -> Phase<'_> {
        match self {
            Phase::Eval => Phase::Eval,
            Phase::Train(rng) => Phase::Train(&mut **rng),
        }
    }
}

/// Inverted-dropout scale factors, `0` or `1 / (1 - p)` per element.
pub fn dropout_mask(rng: &mut dyn RngCore, len: usize, rate: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadActivations {
    /// Output of the first block, `[n, d_h]` (`n = 1` for pooled inputs).
    pub hidden1: Tensor,
    pub logits: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHeadParams {
    pub layer1: Linear,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
    pub layer2: Linear,
    pub dropout: f64,
    pub ln_eps: f64,
}

impl ParamSet for ClassifierHeadParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.layer1.visit(&join(prefix, "layer1"), f);
        f(join(prefix, "ln_gain"), &self.ln_gain);
        f(join(prefix, "ln_bias"), &self.ln_bias);
        self.layer2.visit(&join(prefix, "layer2"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.layer1.visit_mut(&join(prefix, "layer1"), f);
        f(join(prefix, "ln_gain"), &mut self.ln_gain);
        f(join(prefix, "ln_bias"), &mut self.ln_bias);
        self.layer2.visit_mut(&join(prefix, "layer2"), f);
    }
}

/// Saved state from the first block.
#[derive(Debug, Clone)]
pub struct FirstBlockCache {
    input: Tensor,
    ln: LayerNormCache,
    normed: Tensor,
    mask: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ClassifierCache {
    pub first: FirstBlockCache,
    /// Input actually fed to the second layer.
    pub second_input: Tensor,
}

impl ClassifierHeadParams {
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        d_in: usize,
        d_hidden: usize,
        n_classes: usize,
        dropout: f64,
    ) -> Self {
        ClassifierHeadParams {
            layer1: Linear::init(rng, d_in, d_hidden),
            ln_gain: Tensor::vector(vec![1.0; d_hidden]),
            ln_bias: Tensor::zeros(&[d_hidden]),
            layer2: Linear::init(rng, d_hidden, n_classes),
            dropout,
            ln_eps: LAYER_NORM_EPS,
        }
    }

    pub fn d_in(&self) -> usize {
        self.layer1.d_in()
    }

    pub fn d_hidden(&self) -> usize {
        self.layer1.d_out()
    }

    pub fn n_outputs(&self) -> usize {
        self.layer2.d_out()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", format!("{} is outside [0, 1)", self.dropout)));
        }
        if self.layer2.d_in() != self.d_hidden() {
            return Err(Error::dim("classifier", self.d_hidden(), self.layer2.d_in()));
        }
        Ok(())
    }

    /// `dropout(relu(layer_norm(x W1 + b1)))` for `x: [n, d_in]`.
    pub fn first_block(&self, x: &Tensor, phase: &mut Phase<'_>) -> Result<(Tensor, FirstBlockCache)> {
        let z = self.layer1.forward(x)?;
        let (normed, ln) = layer_norm_forward(&z, &self.ln_gain, &self.ln_bias, self.ln_eps)?;
        let mut h = relu(&normed);
        let mask = match phase {
            Phase::Train(rng) if self.dropout > 0.0 => {
                let m = dropout_mask(&mut **rng, h.len(), self.dropout);
                for (v, s) in h.data_mut().iter_mut().zip(&m) {
                    *v *= s;
                }
                Some(m)
            }
            _ => None,
        };
        Ok((
            h,
            FirstBlockCache {
                input: x.clone(),
                ln,
                normed,
                mask,
            },
        ))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn first_block_backward(
        &self,
        cache: &FirstBlockCache,
        d_hidden1: &Tensor,
        grads: &mut ClassifierHeadParams,
    ) -> Tensor {
        let mut d = d_hidden1.clone();
        if let Some(m) = &cache.mask {
            for (g, s) in d.data_mut().iter_mut().zip(m) {
                *g *= s;
            }
        }
        let d = relu_backward(&cache.normed, &d);
        let (dz, dgain, dbias) = layer_norm_backward(&cache.ln, &self.ln_gain, &d);
        grads.ln_gain.add_assign(&dgain);
        grads.ln_bias.add_assign(&dbias);
        self.layer1.backward(&cache.input, &dz, &mut grads.layer1)
    }

    pub fn second_block(&self, h: &Tensor) -> Result<Tensor> {
        self.layer2.forward(h)
    }

    pub fn second_block_backward(
        &self,
        input: &Tensor,
        d_logits: &Tensor,
        grads: &mut ClassifierHeadParams,
    ) -> Tensor {
        self.layer2.backward(input, d_logits, &mut grads.layer2)
    }

    /// Full two-block forward on a single input vector or a `[n, d_in]` batch.
    pub fn forward(&self, x: &Tensor, phase: &mut Phase<'_>) -> Result<(HeadActivations, ClassifierCache)> {
        let x = as_matrix(x);
        if x.cols() != self.d_in() {
            return Err(Error::dim("classifier_forward", self.d_in(), x.cols()));
        }
        let (hidden1, first) = self.first_block(&x, phase)?;
        let logits = self.second_block(&hidden1)?;
        Ok((
            HeadActivations {
                hidden1: hidden1.clone(),
                logits,
            },
            ClassifierCache {
                first,
                second_input: hidden1,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &ClassifierCache,
        d_logits: &Tensor,
        grads: &mut ClassifierHeadParams,
    ) -> Tensor {
        let d_h = self.second_block_backward(&cache.second_input, d_logits, grads);
        self.first_block_backward(&cache.first, &d_h, grads)
    }
}

pub fn classifier_forward(
    x: &Tensor,
    params: &ClassifierHeadParams,
    training: Option<&mut dyn RngCore>,
) -> Result<HeadActivations> {
    let mut phase = match training {
        Some(rng) => Phase::Train(rng),
        None => Phase::Eval,
    };
    params.forward(x, &mut phase).map(|(a, _)| a)
}

fn as_matrix(x: &Tensor) -> Tensor {
    if x.rank() == 1 {
        Tensor::matrix(1, x.len(), x.data().to_vec()).expect("vector as row")
    } else {
        x.clone()
    }
}

/// Single-layer LSTM; gate order along the `4H` axis is input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// `[D, 4H]`
    pub w_x: Tensor,
    /// `[H, 4H]`
    pub w_h: Tensor,
    pub b: Tensor,
}

impl ParamSet for LstmParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "w_x"), &self.w_x);
        f(join(prefix, "w_h"), &self.w_h);
        f(join(prefix, "b"), &self.b);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(join(prefix, "w_x"), &mut self.w_x);
        f(join(prefix, "w_h"), &mut self.w_h);
        f(join(prefix, "b"), &mut self.b);
    }
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    input: Tensor,
    /// Post-activation gates per step, `[T, 4H]`.
    gates: Tensor,
    cells: Tensor,
    tanh_cells: Tensor,
    hidden: Tensor,
}

impl LstmParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d_in: usize, hidden: usize) -> Self {
        let mut b = Tensor::zeros(&[4 * hidden]);
        b.data_mut()[hidden..2 * hidden].fill(1.0);
        LstmParams {
            w_x: uniform_init(rng, &[d_in, 4 * hidden], d_in),
            w_h: uniform_init(rng, &[hidden, 4 * hidden], hidden),
            b,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_h.rows()
    }

    /// Runs the recurrence from zero state; returns hidden states `[T, H]`.
    pub fn forward(&self, seq: &Tensor) -> Result<(Tensor, LstmCache)> {
        let h_dim = self.hidden_dim();
        if seq.rank() != 2 || seq.cols() != self.w_x.rows() {
            return Err(Error::dim("lstm", format!("[T, {}]", self.w_x.rows()), format!("{:?}", seq.shape())));
        }
        let t_len = seq.rows();
        if t_len == 0 {
            return Err(Error::Empty { op: "lstm", what: "frame sequence" });
        }
        let g4 = 4 * h_dim;
        let mut gates = Tensor::zeros(&[t_len, g4]);
        let mut cells = Tensor::zeros(&[t_len, h_dim]);
        let mut tanh_cells = Tensor::zeros(&[t_len, h_dim]);
        let mut hidden = Tensor::zeros(&[t_len, h_dim]);
        let mut h_prev = vec![0.0; h_dim];
        let mut c_prev = vec![0.0; h_dim];
        let mut a = vec![0.0; g4];
        for t in 0..t_len {
            a.copy_from_slice(self.b.data());
            for (k, &xv) in seq.row(t).iter().enumerate() {
                crate::numerics::axpy(&mut a, xv, self.w_x.row(k));
            }
            for (k, &hv) in h_prev.iter().enumerate() {
                crate::numerics::axpy(&mut a, hv, self.w_h.row(k));
            }
            let grow = gates.row_mut(t);
            for j in 0..h_dim {
                grow[j] = sigmoid_scalar(a[j]);
                grow[h_dim + j] = sigmoid_scalar(a[h_dim + j]);
                grow[2 * h_dim + j] = a[2 * h_dim + j].tanh();
                grow[3 * h_dim + j] = sigmoid_scalar(a[3 * h_dim + j]);
            }
            let grow = gates.row(t).to_vec();
            for j in 0..h_dim {
                let c = grow[h_dim + j] * c_prev[j] + grow[j] * grow[2 * h_dim + j];
                let tc = c.tanh();
                cells.row_mut(t)[j] = c;
                tanh_cells.row_mut(t)[j] = tc;
                hidden.row_mut(t)[j] = grow[3 * h_dim + j] * tc;
            }
            h_prev.copy_from_slice(hidden.row(t));
            c_prev.copy_from_slice(cells.row(t));
        }
        Ok((
            hidden.clone(),
            LstmCache {
                input: seq.clone(),
                gates,
                cells,
                tanh_cells,
                hidden,
            },
        ))
    }

    /// Backpropagation through time. Returns the input-sequence gradient.
    pub fn backward(&self, cache: &LstmCache, d_hidden: &Tensor, grads: &mut LstmParams) -> Tensor {
        let h_dim = self.hidden_dim();
        let t_len = cache.input.rows();
        let d_in = cache.input.cols();
        let mut d_seq = Tensor::zeros(&[t_len, d_in]);
        let mut dh_next = vec![0.0; h_dim];
        let mut dc_next = vec![0.0; h_dim];
        let mut da = vec![0.0; 4 * h_dim];
        for t in (0..t_len).rev() {
            let g = cache.gates.row(t);
            let tc = cache.tanh_cells.row(t);
            for j in 0..h_dim {
                let (i, f, gg, o) = (g[j], g[h_dim + j], g[2 * h_dim + j], g[3 * h_dim + j]);
                let c_prev = if t > 0 { cache.cells.row(t - 1)[j] } else { 0.0 };
                let dh = d_hidden.row(t)[j] + dh_next[j];
                let dc = dc_next[j] + dh * o * (1.0 - tc[j] * tc[j]);
                da[j] = dc * gg * i * (1.0 - i);
                da[h_dim + j] = dc * c_prev * f * (1.0 - f);
                da[2 * h_dim + j] = dc * i * (1.0 - gg * gg);
                da[3 * h_dim + j] = dh * tc[j] * o * (1.0 - o);
                dc_next[j] = dc * f;
            }
            crate::numerics::axpy(grads.b.data_mut(), 1.0, &da);
            for (k, &xv) in cache.input.row(t).iter().enumerate() {
                if xv != 0.0 {
                    crate::numerics::axpy(grads.w_x.row_mut(k), xv, &da);
                }
                d_seq.row_mut(t)[k] = crate::numerics::dot(self.w_x.row(k), &da);
            }
            if t > 0 {
                let h_prev = cache.hidden.row(t - 1);
                for (k, &hv) in h_prev.iter().enumerate() {
                    crate::numerics::axpy(grads.w_h.row_mut(k), hv, &da);
                }
            }
            for k in 0..h_dim {
                dh_next[k] = crate::numerics::dot(self.w_h.row(k), &da);
            }
        }
        d_seq
    }
}

/// Recurrent speech-recognition head: LSTM, then a two-block classifier
/// applied per frame, producing logits over `vocab + 1` symbols (blank = 0).
#[derive(Debug, Clone, PartialEq)]
pub struct AsrHeadParams {
    pub lstm: LstmParams,
    pub head: ClassifierHeadParams,
}

impl ParamSet for AsrHeadParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.lstm.visit(&join(prefix, "lstm"), f);
        self.head.visit(prefix, f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.lstm.visit_mut(&join(prefix, "lstm"), f);
        self.head.visit_mut(prefix, f);
    }
}

#[derive(Debug, Clone)]
pub struct AsrCache {
    pub lstm: LstmCache,
    pub head: ClassifierCache,
}

impl AsrHeadParams {
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        d_in: usize,
        lstm_hidden: usize,
        d_hidden: usize,
        vocab_size: usize,
        dropout: f64,
    ) -> Self {
        AsrHeadParams {
            lstm: LstmParams::init(rng, d_in, lstm_hidden),
            head: ClassifierHeadParams::init(rng, lstm_hidden, d_hidden, vocab_size + 1, dropout),
        }
    }

    /// Vocabulary size excluding the blank.
    pub fn vocab_size(&self) -> usize {
        self.head.n_outputs() - 1
    }

    pub fn forward(&self, seq: &Tensor, phase: &mut Phase<'_>) -> Result<(HeadActivations, AsrCache)> {
        let (hs, lstm) = self.lstm.forward(seq)?;
        let (act, head) = self.head.forward(&hs, phase)?;
        Ok((act, AsrCache { lstm, head }))
    }

    /// Backward from frame logits and an extra gradient on `hidden1`
    /// (from co-attention). Returns the input-sequence gradient.
    pub fn backward(
        &self,
        cache: &AsrCache,
        d_logits: &Tensor,
        d_hidden1_extra: Option<&Tensor>,
        grads: &mut AsrHeadParams,
    ) -> Tensor {
        let mut d_h = self
            .head
            .second_block_backward(&cache.head.second_input, d_logits, &mut grads.head);
        if let Some(extra) = d_hidden1_extra {
            d_h.add_assign(extra);
        }
        let d_hs = self.head.first_block_backward(&cache.head.first, &d_h, &mut grads.head);
        self.lstm.backward(&cache.lstm, &d_hs, &mut grads.lstm)
    }
}

pub fn asr_forward(
    seq: &Tensor,
    params: &AsrHeadParams,
    training: Option<&mut dyn RngCore>,
) -> Result<HeadActivations> {
    let mut phase = match training {
        Some(rng) => Phase::Train(rng),
        None => Phase::Eval,
    };
    params.forward(seq, &mut phase).map(|(a, _)| a)
}
