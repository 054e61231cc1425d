//! Attentive statistics pooling: attention-weighted mean and standard
//! deviation over frames, concatenated into one utterance vector.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{affine, affine_backward, axpy, softmax_backward_slice, softmax_slice, Tensor};
use crate::params::{join, uniform_init, ParamSet};

pub const POOLING_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct PoolingParams {
    /// `[D, d_a]`
    pub w_att: Tensor,
    pub b_att: Tensor,
    pub v_att: Tensor,
    pub eps: f64,
}

/// Default attention bottleneck width for `feature_dim` inputs.
pub fn default_attention_dim(feature_dim: usize) -> usize {
    feature_dim.div_ceil(2)
}

impl PoolingParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, feature_dim: usize, attn_dim: usize) -> Self {
        PoolingParams {
            w_att: uniform_init(rng, &[feature_dim, attn_dim], feature_dim),
            b_att: uniform_init(rng, &[attn_dim], feature_dim),
            v_att: uniform_init(rng, &[attn_dim], attn_dim),
            eps: POOLING_EPS,
        }
    }

    /// All-zero attention, i.e. uniform weights over frames.
    pub fn uniform(feature_dim: usize, attn_dim: usize, eps: f64) -> Self {
        PoolingParams {
            w_att: Tensor::zeros(&[feature_dim, attn_dim]),
            b_att: Tensor::zeros(&[attn_dim]),
            v_att: Tensor::zeros(&[attn_dim]),
            eps,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.w_att.rows()
    }
}

impl ParamSet for PoolingParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "w_att"), &self.w_att);
        f(join(prefix, "b_att"), &self.b_att);
        f(join(prefix, "v_att"), &self.v_att);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(join(prefix, "w_att"), &mut self.w_att);
        f(join(prefix, "b_att"), &mut self.b_att);
        f(join(prefix, "v_att"), &mut self.v_att);
    }
}

#[derive(Debug, Clone)]
pub struct PoolingCache {
    /// tanh bottleneck activations `[T, d_a]`
    hidden: Tensor,
    pub alpha: Vec<f64>,
    mean: Vec<f64>,
    std: Vec<f64>,
    /// Whether the variance was strictly positive before the floor.
    var_active: Vec<bool>,
}

pub fn attentive_stats_pool(seq: &Tensor, params: &PoolingParams) -> Result<Tensor> {
    attentive_stats_pool_forward(seq, params).map(|(o, _)| o)
}

pub fn attentive_stats_pool_forward(
    seq: &Tensor,
    params: &PoolingParams,
) -> Result<(Tensor, PoolingCache)> {
    if seq.rank() != 2 {
        return Err(Error::dim("attentive_stats_pool", "[T, D]", format!("{:?}", seq.shape())));
    }
    if seq.rows() == 0 {
        return Err(Error::Empty {
            op: "attentive_stats_pool",
            what: "frame sequence",
        });
    }
    if !(params.eps > 0.0) {
        return Err(Error::config("pooling.eps", "must be positive"));
    }
    let pre = affine(seq, &params.w_att, &params.b_att)?;
    if params.v_att.len() != pre.cols() {
        return Err(Error::dim("attentive_stats_pool", pre.cols(), params.v_att.len()));
    }
    let hidden = pre.map(f64::tanh);
    let scores: Vec<f64> = (0..seq.rows())
        .map(|t| crate::numerics::dot(hidden.row(t), params.v_att.data()))
        .collect();
    let (out, mut cache) = stats_from_scores(seq, &scores, params.eps);
    cache.hidden = hidden;
    Ok((out, cache))
}

/// Pooling with externally supplied attention scores (one per frame).
pub fn attentive_stats_from_scores(seq: &Tensor, scores: &[f64], eps: f64) -> Result<Tensor> {
    if seq.rows() == 0 {
        return Err(Error::Empty {
            op: "attentive_stats_pool",
            what: "frame sequence",
        });
    }
    if scores.len() != seq.rows() {
        return Err(Error::dim("attentive_stats_pool", seq.rows(), scores.len()));
    }
    Ok(stats_from_scores(seq, scores, eps).0)
}

fn stats_from_scores(seq: &Tensor, scores: &[f64], eps: f64) -> (Tensor, PoolingCache) {
    let d = seq.cols();
    let alpha = softmax_slice(scores);
    let mut mean = vec![0.0; d];
    let mut second = vec![0.0; d];
    for (t, &a) in alpha.iter().enumerate() {
        let h = seq.row(t);
        for k in 0..d {
            mean[k] += a * h[k];
            second[k] += a * h[k] * h[k];
        }
    }
    let mut var_active = Vec::with_capacity(d);
    let std: Vec<f64> = (0..d)
        .map(|k| {
            let var = second[k] - mean[k] * mean[k];
            var_active.push(var > 0.0);
            (var.max(0.0) + eps).sqrt()
        })
        .collect();
    let mut out = mean.clone();
    out.extend_from_slice(&std);
    (
        Tensor::vector(out),
        PoolingCache {
            hidden: Tensor::zeros(&[0]),
            alpha,
            mean,
            std,
            var_active,
        },
    )
}

pub struct PoolingGrads {
    pub params: PoolingParams,
    pub seq: Tensor,
}

/// Backward of [`attentive_stats_pool`]; `d_out` has length `2D`.
pub fn attentive_stats_pool_backward(
    seq: &Tensor,
    params: &PoolingParams,
    cache: &PoolingCache,
    d_out: &[f64],
) -> PoolingGrads {
    let (t_len, d) = (seq.rows(), seq.cols());
    let (d_mean_in, d_std) = d_out.split_at(d);
    // var = E[h^2] - mean^2, std = sqrt(var + eps)
    let d_var: Vec<f64> = (0..d)
        .map(|k| {
            if cache.var_active[k] {
                d_std[k] / (2.0 * cache.std[k])
            } else {
                0.0
            }
        })
        .collect();
    let d_mean: Vec<f64> = (0..d).map(|k| d_mean_in[k] - 2.0 * cache.mean[k] * d_var[k]).collect();

    let mut d_seq = Tensor::zeros(&[t_len, d]);
    let mut d_alpha = vec![0.0; t_len];
    for t in 0..t_len {
        let h = seq.row(t);
        let a = cache.alpha[t];
        let row = d_seq.row_mut(t);
        let mut da = 0.0;
        for k in 0..d {
            row[k] = a * (d_mean[k] + 2.0 * h[k] * d_var[k]);
            da += d_mean[k] * h[k] + d_var[k] * h[k] * h[k];
        }
        d_alpha[t] = da;
    }
    let d_scores = softmax_backward_slice(&cache.alpha, &d_alpha);

    let d_a = params.v_att.len();
    let mut d_v = vec![0.0; d_a];
    let mut d_pre = Tensor::zeros(&[t_len, d_a]);
    for t in 0..t_len {
        let u = cache.hidden.row(t);
        axpy(&mut d_v, d_scores[t], u);
        let row = d_pre.row_mut(t);
        for j in 0..d_a {
            row[j] = d_scores[t] * params.v_att.data()[j] * (1.0 - u[j] * u[j]);
        }
    }
    let g = affine_backward(seq, &params.w_att, &d_pre);
    d_seq.add_assign(&g.dx);
    PoolingGrads {
        params: PoolingParams {
            w_att: g.dw,
            b_att: g.db,
            v_att: Tensor::vector(d_v),
            eps: params.eps,
        },
        seq: d_seq,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_attention_gives_mean_and_population_std() {
        let eps = 1e-6;
        let seq = Tensor::from_rows(&[[1.0, 1.0], [3.0, 3.0]]).unwrap();
        let out = attentive_stats_pool(&seq, &PoolingParams::uniform(2, 1, eps)).unwrap();
        let s = (1.0 + eps).sqrt();
        assert_eq!(out.data(), &[2.0, 2.0, s, s]);
    }

    #[test]
    fn constant_sequence_hits_variance_floor() {
        let eps: f64 = 1e-6;
        let seq = Tensor::from_rows(&[[5.0, 5.0], [5.0, 5.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = attentive_stats_pool(&seq, &PoolingParams::init(&mut rng, 2, 1)).unwrap();
        let s = eps.sqrt();
        for (a, b) in out.data().iter().zip([5.0, 5.0, s, s]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_moments_from_explicit_scores() {
        let eps = 1e-6;
        let seq = Tensor::from_rows(&[[1.0], [2.0], [4.0]]).unwrap();
        let out = attentive_stats_from_scores(&seq, &[0.0, 0.0, 2f64.ln()], eps).unwrap();
        // alpha = (1/4, 1/4, 1/2): mean = 2.75, E[h^2] = 0.25 + 1 + 8
        assert!((out.data()[0] - 2.75).abs() < 1e-12);
        assert!((out.data()[1] - (1.6875 + eps).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn empty_sequence_is_an_error() {
        let p = PoolingParams::uniform(2, 1, 1e-6);
        let err = attentive_stats_pool(&Tensor::zeros(&[0, 2]), &p).unwrap_err();
        assert!(matches!(err, Error::Empty { .. }));
    }

    fn random_seq(vals: &[f64], d: usize) -> Tensor {
        Tensor::matrix(vals.len() / d, d, vals.to_vec()).unwrap()
    }

    proptest! {
        #[test]
        fn mean_in_hull_std_above_floor_and_permutation_invariant(
            vals in prop::collection::vec(-4.0f64..4.0, 3..8).prop_flat_map(|v| {
                let n = v.len() * 3;
                prop::collection::vec(-4.0f64..4.0, n)
            }),
            seed in 0u64..1000,
        ) {
            let d = 3;
            let seq = random_seq(&vals, d);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = PoolingParams::init(&mut rng, d, 2);
            let out = attentive_stats_pool(&seq, &p).unwrap();
            for k in 0..d {
                let col: Vec<f64> = (0..seq.rows()).map(|t| seq.row(t)[k]).collect();
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(out.data()[k] >= lo - 1e-12 && out.data()[k] <= hi + 1e-12);
                prop_assert!(out.data()[d + k] >= p.eps.sqrt());
            }
            let mut rows: Vec<Vec<f64>> = (0..seq.rows()).map(|t| seq.row(t).to_vec()).collect();
            rows.reverse();
            rows.rotate_left(1);
            let permuted = attentive_stats_pool(&Tensor::from_rows(&rows).unwrap(), &p).unwrap();
            for (a, b) in out.data().iter().zip(permuted.data()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
