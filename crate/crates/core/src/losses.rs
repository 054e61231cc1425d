//! Training objectives: cross-entropy, CTC, the sample-weighted focal
//! contrastive (SWFC) loss, and the weighted multi-task combination.
//!
//! Every loss returns its value together with the gradient of that value
//! with respect to its differentiable input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, log_softmax_slice, log_sum_exp, softmax_backward_slice, softmax_slice, Tensor};

/// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    cross_entropy_with_grad(logits, labels).map(|(l, _)| l)
}

pub fn cross_entropy_with_grad(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let logits = if logits.rank() == 1 {
        Tensor::matrix(1, logits.len(), logits.data().to_vec())?
    } else {
        logits.clone()
    };
    let (n, c) = (logits.rows(), logits.cols());
    if labels.len() != n {
        return Err(Error::dim("cross_entropy", format!("{n} labels"), labels.len()));
    }
    if n == 0 {
        return Err(Error::Empty {
            op: "cross_entropy",
            what: "batch",
        });
    }
    let mut grad = Tensor::zeros(&[n, c]);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::LabelOutOfRange {
                what: "cross_entropy",
                value: y as i64,
                limit: c,
            });
        }
        let lp = log_softmax_slice(logits.row(i));
        total -= lp[y];
        let g = grad.row_mut(i);
        for k in 0..c {
            g[k] = lp[k].exp() / n as f64;
        }
        g[y] -= 1.0 / n as f64;
    }
    Ok((total / n as f64, grad))
}

pub const BLANK: usize = 0;

/// Minimum frames needed to emit `target`: one per symbol plus a blank
/// between each pair of equal neighbours.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn ctc_validate(logits: &Tensor, target: &[usize]) -> Result<(usize, usize)> {
    if logits.rank() != 2 {
        return Err(Error::dim("ctc_loss", "[T, V+1]", format!("{:?}", logits.shape())));
    }
    let (t_len, v) = (logits.rows(), logits.cols());
    if t_len == 0 {
        return Err(Error::Empty { op: "ctc_loss", what: "frames" });
    }
    for &s in target {
        if s == BLANK || s >= v {
            return Err(Error::LabelOutOfRange {
                what: "ctc target",
                value: s as i64,
                limit: v,
            });
        }
    }
    let required = ctc_min_frames(target);
    if t_len < required {
        return Err(Error::InfeasibleTarget {
            target_len: target.len(),
            required,
            frames: t_len,
        });
    }
    Ok((t_len, v))
}

/// Blank-interleaved target `[-, l1, -, l2, ..., -]`.
fn extend_with_blanks(target: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &s in target {
        ext.push(s);
        ext.push(BLANK);
    }
    ext
}

fn skip_allowed(ext: &[usize], s: usize) -> bool {
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}

/// `-log p(target | logits)` summed over all CTC alignments. Blank is index 0.
pub fn ctc_loss(logits: &Tensor, target: &[usize]) -> Result<f64> {
    let (t_len, _) = ctc_validate(logits, target)?;
    let lp: Vec<Vec<f64>> = (0..t_len).map(|t| log_softmax_slice(logits.row(t))).collect();
    let ext = extend_with_blanks(target);
    let alpha = ctc_alpha(&lp, &ext);
    Ok(-ctc_log_likelihood(&alpha[t_len - 1]))
}

fn ctc_alpha(lp: &[Vec<f64>], ext: &[usize]) -> Vec<Vec<f64>> {
    let s_len = ext.len();
    let mut alpha = vec![vec![f64::NEG_INFINITY; s_len]; lp.len()];
    alpha[0][0] = lp[0][ext[0]];
    if s_len > 1 {
        alpha[0][1] = lp[0][ext[1]];
    }
    for t in 1..lp.len() {
        for s in 0..s_len {
            let prev = &alpha[t - 1];
            let mut terms = [prev[s], f64::NEG_INFINITY, f64::NEG_INFINITY];
            if s >= 1 {
                terms[1] = prev[s - 1];
            }
            if skip_allowed(ext, s) {
                terms[2] = prev[s - 2];
            }
            alpha[t][s] = log_sum_exp(&terms) + lp[t][ext[s]];
        }
    }
    alpha
}

fn ctc_log_likelihood(last_alpha: &[f64]) -> f64 {
    let s_len = last_alpha.len();
    if s_len == 1 {
        last_alpha[0]
    } else {
        log_sum_exp(&[last_alpha[s_len - 1], last_alpha[s_len - 2]])
    }
}

/// CTC loss and its gradient with respect to the logits, via the
/// forward-backward recursions in log space.
pub fn ctc_loss_with_grad(logits: &Tensor, target: &[usize]) -> Result<(f64, Tensor)> {
    let (t_len, v) = ctc_validate(logits, target)?;
    let lp: Vec<Vec<f64>> = (0..t_len).map(|t| log_softmax_slice(logits.row(t))).collect();
    let ext = extend_with_blanks(target);
    let s_len = ext.len();
    let alpha = ctc_alpha(&lp, &ext);
    let log_p = ctc_log_likelihood(&alpha[t_len - 1]);
    if !log_p.is_finite() {
        return Err(Error::NonFinite {
            context: "ctc_loss likelihood".into(),
        });
    }

    // beta[t][s]: log-probability of completing the path from state s at
    // time t, excluding the emission at t.
    let mut beta = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
    beta[t_len - 1][s_len - 1] = 0.0;
    if s_len > 1 {
        beta[t_len - 1][s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &beta[t + 1];
            let mut terms = [f64::NEG_INFINITY; 3];
            terms[0] = next[s] + lp[t + 1][ext[s]];
            if s + 1 < s_len {
                terms[1] = next[s + 1] + lp[t + 1][ext[s + 1]];
            }
            if s + 2 < s_len && skip_allowed(&ext, s + 2) {
                terms[2] = next[s + 2] + lp[t + 1][ext[s + 2]];
            }
            beta[t][s] = log_sum_exp(&terms);
        }
    }

    let mut grad = Tensor::zeros(&[t_len, v]);
    for t in 0..t_len {
        let g = grad.row_mut(t);
        for k in 0..v {
            g[k] = lp[t][k].exp();
        }
        for s in 0..s_len {
            let occ = alpha[t][s] + beta[t][s] - log_p;
            if occ > f64::NEG_INFINITY {
                g[ext[s]] -= occ.exp();
            }
        }
    }
    Ok((-log_p, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwfcVariant {
    /// `-(1/N) sum_i w_i sum_{j != i} p_ij (1 - p_ij)^gamma`, as printed.
    Eq2Literal,
    /// Focal supervised-contrastive form restricted to same-label positives.
    FocalSupcon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Uniform,
    InverseFrequency,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwfcConfig {
    pub tau: f64,
    pub gamma: f64,
    pub variant: SwfcVariant,
    pub weight_mode: WeightMode,
}

impl Default for SwfcConfig {
    fn default() -> Self {
        SwfcConfig {
            tau: 0.07,
            gamma: 2.0,
            variant: SwfcVariant::Eq2Literal,
            weight_mode: WeightMode::InverseFrequency,
        }
    }
}

impl SwfcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::config("swfc.tau", format!("must be > 0, got {}", self.tau)));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::config("swfc.gamma", format!("must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Per-sample category weights, renormalized to mean 1 over the batch.
pub fn sample_weights(labels: &[usize], mode: WeightMode, class_counts: &[usize]) -> Result<Vec<f64>> {
    match mode {
        WeightMode::Uniform => Ok(vec![1.0; labels.len()]),
        WeightMode::InverseFrequency => {
            let n_total: usize = class_counts.iter().sum();
            let c = class_counts.len() as f64;
            let mut w = Vec::with_capacity(labels.len());
            for &y in labels {
                let count = class_counts.get(y).copied().unwrap_or(0);
                if count == 0 {
                    return Err(Error::LabelOutOfRange {
                        what: "swfc class count for",
                        value: y as i64,
                        limit: class_counts.len(),
                    });
                }
                w.push(n_total as f64 / (c * count as f64));
            }
            let mean = w.iter().sum::<f64>() / w.len().max(1) as f64;
            Ok(w.into_iter().map(|v| v / mean).collect())
        }
    }
}

pub fn swfc_loss(embeddings: &Tensor, labels: &[usize], cfg: &SwfcConfig, class_counts: &[usize]) -> Result<f64> {
    swfc_loss_with_grad(embeddings, labels, cfg, class_counts).map(|(l, _)| l)
}

/// SWFC loss over a batch of embeddings `[N, E]` and its gradient.
///
/// Similarities are dot products of L2-normalized embeddings; for anchor `i`
/// the pair probabilities are `p_ij = softmax_{j != i}(s_ij / tau)`.
pub fn swfc_loss_with_grad(
    embeddings: &Tensor,
    labels: &[usize],
    cfg: &SwfcConfig,
    class_counts: &[usize],
) -> Result<(f64, Tensor)> {
    cfg.validate()?;
    if embeddings.rank() != 2 {
        return Err(Error::dim("swfc_loss", "[N, E]", format!("{:?}", embeddings.shape())));
    }
    let (n, e) = (embeddings.rows(), embeddings.cols());
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    if labels.len() != n {
        return Err(Error::dim("swfc_loss", format!("{n} labels"), labels.len()));
    }
    let weights = sample_weights(labels, cfg.weight_mode, class_counts)?;

    let norms: Vec<f64> = (0..n).map(|i| dot(embeddings.row(i), embeddings.row(i)).sqrt()).collect();
    if norms.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::NonFinite {
            context: "swfc_loss: zero-norm embedding".into(),
        });
    }
    let unit: Vec<Vec<f64>> = (0..n)
        .map(|i| embeddings.row(i).iter().map(|v| v / norms[i]).collect())
        .collect();

    let (tau, gamma) = (cfg.tau, cfg.gamma);
    let nf = n as f64;
    let mut weighted_sum = 0.0;
    // d loss / d s_ij, accumulated from anchor rows
    let mut d_sim = vec![vec![0.0; n]; n];
    for i in 0..n {
        let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let logits: Vec<f64> = others.iter().map(|&j| dot(&unit[i], &unit[j]) / tau).collect();
        let p = softmax_slice(&logits);
        // d term_i / d p_j
        let mut d_p = vec![0.0; p.len()];
        let term = match cfg.variant {
            SwfcVariant::Eq2Literal => {
                // sum_k p_k q_k^gamma as (sum_k e_k q_k^gamma) / (sum_k e_k),
                // so gamma = 0 yields exactly 1
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let mut num = 0.0;
                let mut den = 0.0;
                for (k, &pk) in p.iter().enumerate() {
                    let q = 1.0 - pk;
                    num += e[k] * q.powf(gamma);
                    den += e[k];
                    d_p[k] = q.powf(gamma) - focal_power_derivative(pk, gamma);
                }
                num / den
            }
            SwfcVariant::FocalSupcon => {
                let pos: Vec<usize> = (0..others.len()).filter(|&k| labels[others[k]] == labels[i]).collect();
                if pos.is_empty() {
                    continue;
                }
                let inv = 1.0 / pos.len() as f64;
                let mut t = 0.0;
                for &k in &pos {
                    let pk = p[k];
                    let q = 1.0 - pk;
                    let lg = pk.ln();
                    t += inv * q.powf(gamma) * lg;
                    d_p[k] = inv * (q.powf(gamma) / pk - focal_power_derivative_log(pk, gamma) * lg);
                }
                t
            }
        };
        weighted_sum += weights[i] * term;
        let scale = -weights[i] / nf;
        let d_logits = softmax_backward_slice(&p, &d_p);
        for (k, &j) in others.iter().enumerate() {
            d_sim[i][j] += scale * d_logits[k] / tau;
        }
    }

    let mut grad = Tensor::zeros(&[n, e]);
    let mut d_unit = vec![vec![0.0; e]; n];
    for i in 0..n {
        for j in 0..n {
            let g = d_sim[i][j];
            if g != 0.0 {
                for k in 0..e {
                    d_unit[i][k] += g * unit[j][k];
                    d_unit[j][k] += g * unit[i][k];
                }
            }
        }
    }
    for i in 0..n {
        let proj = dot(&d_unit[i], &unit[i]);
        let row = grad.row_mut(i);
        for k in 0..e {
            row[k] = (d_unit[i][k] - unit[i][k] * proj) / norms[i];
        }
    }
    Ok((-weighted_sum / nf, grad))
}

/// `d/dp [(1-p)^gamma] * p` restated as `gamma p (1-p)^(gamma-1)`; zero when gamma is zero.
fn focal_power_derivative(p: f64, gamma: f64) -> f64 {
    if gamma == 0.0 || p >= 1.0 {
        0.0
    } else {
        gamma * p * (1.0 - p).powf(gamma - 1.0)
    }
}

/// `gamma (1-p)^(gamma-1)`; zero when gamma is zero.
fn focal_power_derivative_log(p: f64, gamma: f64) -> f64 {
    if gamma == 0.0 || p >= 1.0 {
        0.0
    } else {
        gamma * (1.0 - p).powf(gamma - 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    /// Weight of each auxiliary task.
    pub alpha: f64,
    /// Weight of the SWFC term.
    pub beta: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig { alpha: 0.05, beta: 0.1 }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0 / 3.0).contains(&self.alpha) {
            return Err(Error::config(
                "objective.alpha",
                format!(
                    "{} violates 0 <= alpha < 1/3 (the emotion weight 1 - 3*alpha must stay positive)",
                    self.alpha
                ),
            ));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::config("objective.beta", format!("must be >= 0, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Which auxiliary tasks contribute to the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskMask {
    pub asr: bool,
    pub gender: bool,
    pub speaker: bool,
}

impl TaskMask {
    pub const ALL: TaskMask = TaskMask {
        asr: true,
        gender: true,
        speaker: true,
    };
    pub const NONE: TaskMask = TaskMask {
        asr: false,
        gender: false,
        speaker: false,
    };

    pub fn count(&self) -> usize {
        self.asr as usize + self.gender as usize + self.speaker as usize
    }

    pub fn any(&self) -> bool {
        self.count() > 0
    }
}

impl Default for TaskMask {
    fn default() -> Self {
        TaskMask::ALL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskLosses {
    pub emotion: f64,
    pub gender: f64,
    pub speaker: f64,
    pub asr: f64,
    pub swfc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub emotion: f64,
    pub gender: f64,
    pub speaker: f64,
    pub asr: f64,
    pub swfc: f64,
}

impl LossWeights {
    /// Emotion keeps `1 - k*alpha` for `k` enabled auxiliaries; each enabled
    /// auxiliary gets `alpha`. With all three enabled this is the standard
    /// `(1 - 3a, a, a, a, b)` weighting.
    pub fn new(cfg: &ObjectiveConfig, tasks: TaskMask, use_swfc: bool) -> Self {
        let a = cfg.alpha;
        let on = |b: bool| if b { a } else { 0.0 };
        LossWeights {
            emotion: 1.0 - tasks.count() as f64 * a,
            gender: on(tasks.gender),
            speaker: on(tasks.speaker),
            asr: on(tasks.asr),
            swfc: if use_swfc { cfg.beta } else { 0.0 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_emotion: f64,
    pub l_gender: f64,
    pub l_speaker: f64,
    pub l_asr: f64,
    pub l_swfc: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn from_parts(parts: TaskLosses, weights: LossWeights) -> Self {
        let mut b = LossBreakdown {
            l_emotion: parts.emotion,
            l_gender: parts.gender,
            l_speaker: parts.speaker,
            l_asr: parts.asr,
            l_swfc: parts.swfc,
            total: 0.0,
            weights,
        };
        b.total = b.recombine();
        b
    }

    /// Weighted sum of the parts, recomputed from the stored values.
    pub fn recombine(&self) -> f64 {
        let w = &self.weights;
        w.emotion * self.l_emotion
            + w.gender * self.l_gender
            + w.speaker * self.l_speaker
            + w.asr * self.l_asr
            + w.swfc * self.l_swfc
    }

    pub fn parts(&self) -> TaskLosses {
        TaskLosses {
            emotion: self.l_emotion,
            gender: self.l_gender,
            speaker: self.l_speaker,
            asr: self.l_asr,
            swfc: self.l_swfc,
        }
    }
}

/// `(1 - 3a) L_emo + a L_gen + a L_spk + a L_asr + b L_swfc`.
pub fn combined_objective(parts: TaskLosses, cfg: &ObjectiveConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    Ok(LossBreakdown::from_parts(parts, LossWeights::new(cfg, TaskMask::ALL, true)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use proptest::prelude::*;

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::matrix(1, 8, vec![0.3; 8]).unwrap();
        assert!((cross_entropy(&uniform, &[5]).unwrap() - 8f64.ln()).abs() < 1e-12);
        let confident = Tensor::from_rows(&[[40.0, 0.0, 0.0]]).unwrap();
        assert!(cross_entropy(&confident, &[0]).unwrap() < 1e-16);
        let l = cross_entropy(&Tensor::from_rows(&[[0.3, -0.2, 0.9]]).unwrap(), &[2]).unwrap();
        let e = [0.3f64.exp(), (-0.2f64).exp(), 0.9f64.exp()];
        assert!((l + (e[2] / (e[0] + e[1] + e[2])).ln()).abs() < 1e-14);
        // printed four-digit value is rounded from 0.63219
        assert!((l - 0.6323).abs() < 2e-4);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let x = Tensor::from_rows(&[[0.0, 0.0]]).unwrap();
        assert!(matches!(cross_entropy(&x, &[2]), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn ctc_single_frame_uniform() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!((ctc_loss(&logits, &[1]).unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ctc_two_frames_uniform() {
        // (a,a), (a,-), (-,a) out of 9 paths
        let logits = Tensor::zeros(&[2, 3]);
        let l = ctc_loss(&logits, &[1]).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ctc_empty_target_with_certain_blanks() {
        let logits = Tensor::from_rows(&[[800.0, 0.0, 0.0], [800.0, 0.0, 0.0]]).unwrap();
        assert!(ctc_loss(&logits, &[]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn ctc_infeasible_target() {
        let logits = Tensor::zeros(&[2, 3]);
        assert!(matches!(ctc_loss(&logits, &[1, 1]), Err(Error::InfeasibleTarget { required: 3, .. })));
        assert!(ctc_loss(&Tensor::zeros(&[3, 3]), &[1, 1]).is_ok());
        assert!(matches!(ctc_loss(&logits, &[0]), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn ctc_gradient_matches_finite_differences() {
        let data: Vec<f64> = (0..20).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.21).collect();
        let logits = Tensor::matrix(5, 4, data).unwrap();
        for target in [vec![], vec![2], vec![1, 1], vec![3, 1, 2]] {
            let (_, g) = ctc_loss_with_grad(&logits, &target).unwrap();
            let rep = finite_diff_check("ctc", logits.data(), g.data(), 1e-5, |x| {
                ctc_loss(&Tensor::matrix(5, 4, x.to_vec()).unwrap(), &target).unwrap()
            })
            .unwrap();
            assert!(rep.passed, "{target:?}: {rep}");
        }
    }

    fn emb(rows: &[[f64; 3]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn literal(gamma: f64) -> SwfcConfig {
        SwfcConfig {
            tau: 0.5,
            gamma,
            variant: SwfcVariant::Eq2Literal,
            weight_mode: WeightMode::Uniform,
        }
    }

    #[test]
    fn swfc_literal_pair_is_zero() {
        let e = emb(&[[1.0, 2.0, 0.5], [-0.3, 0.1, 0.9]]);
        let (l, g) = swfc_loss_with_grad(&e, &[0, 1], &literal(2.0), &[1, 1]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn swfc_literal_equal_similarities() {
        // three mutually orthogonal unit vectors: all s_ij = 0, p_ij = 1/2
        let e = emb(&[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]]);
        let l = swfc_loss(&e, &[0, 1, 1], &literal(2.0), &[1, 2]).unwrap();
        assert!((l + 0.25).abs() <= 1e-12, "{l}");
    }

    #[test]
    fn swfc_literal_gamma_zero_is_minus_one() {
        let e = emb(&[[0.2, 1.0, -0.4], [0.7, 0.1, 0.3], [-1.0, 0.5, 0.5], [0.3, 0.3, 0.9]]);
        let l = swfc_loss(&e, &[0, 1, 0, 2], &literal(0.0), &[2, 1, 1]).unwrap();
        assert_eq!(l, -1.0);
    }

    /// Term-by-term evaluation of the focal supervised-contrastive formula.
    fn focal_supcon_oracle(e: &Tensor, labels: &[usize], tau: f64, gamma: f64, w: &[f64]) -> f64 {
        let n = e.rows();
        let unit: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let r = e.row(i);
                let nr = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter().map(|v| v / nr).collect()
            })
            .collect();
        let sim = |i: usize, j: usize| unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum::<f64>();
        let mut total = 0.0;
        for i in 0..n {
            let mut denom = 0.0;
            for k in 0..n {
                if k != i {
                    denom += (sim(i, k) / tau).exp();
                }
            }
            let pos: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
            if pos.is_empty() {
                continue;
            }
            let mut s = 0.0;
            for &j in &pos {
                let p = (sim(i, j) / tau).exp() / denom;
                s += (1.0 - p).powf(gamma) * p.ln();
            }
            total += w[i] * s / pos.len() as f64;
        }
        -total / n as f64
    }

    #[test]
    fn focal_supcon_matches_scalar_oracle() {
        let e = emb(&[[0.3, -1.1, 0.4], [0.9, 0.2, -0.5], [-0.6, 0.8, 1.3]]);
        let cfg = SwfcConfig {
            tau: 1.0,
            gamma: 2.0,
            variant: SwfcVariant::FocalSupcon,
            weight_mode: WeightMode::Uniform,
        };
        let l = swfc_loss(&e, &[0, 0, 1], &cfg, &[2, 1]).unwrap();
        let o = focal_supcon_oracle(&e, &[0, 0, 1], 1.0, 2.0, &[1.0; 3]);
        assert!((l - o).abs() < 1e-14, "{l} vs {o}");
        assert!(l >= 0.0);
    }

    #[test]
    fn focal_supcon_gamma_zero_is_supcon() {
        let e = emb(&[[0.3, -1.1, 0.4], [0.9, 0.2, -0.5], [-0.6, 0.8, 1.3], [0.1, 0.1, 0.1], [1.0, -0.2, 0.0]]);
        let labels = [0, 0, 1, 1, 0];
        let cfg = SwfcConfig {
            tau: 0.2,
            gamma: 0.0,
            variant: SwfcVariant::FocalSupcon,
            weight_mode: WeightMode::Uniform,
        };
        // -(1/N) sum_i (1/|P|) sum_p [ s_ip / tau - log sum_{a != i} exp(s_ia / tau) ]
        let n = 5;
        let unit: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let r = e.row(i);
                let nr = dot(r, r).sqrt();
                r.iter().map(|v| v / nr).collect()
            })
            .collect();
        let mut oracle = 0.0;
        for i in 0..n {
            let lse = log_sum_exp(
                &(0..n).filter(|&a| a != i).map(|a| dot(&unit[i], &unit[a]) / 0.2).collect::<Vec<_>>(),
            );
            let pos: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
            let s: f64 = pos.iter().map(|&p| dot(&unit[i], &unit[p]) / 0.2 - lse).sum();
            oracle -= s / pos.len() as f64;
        }
        oracle /= n as f64;
        let l = swfc_loss(&e, &labels, &cfg, &[3, 2]).unwrap();
        assert!((l - oracle).abs() < 1e-13, "{l} vs {oracle}");
    }

    #[test]
    fn swfc_errors() {
        let one = emb(&[[1.0, 0.0, 0.0]]);
        assert!(matches!(swfc_loss(&one, &[0], &literal(2.0), &[1]), Err(Error::BatchTooSmall(1))));
        let two = emb(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let mut cfg = literal(2.0);
        cfg.tau = 0.0;
        assert!(matches!(swfc_loss(&two, &[0, 0], &cfg, &[2]), Err(Error::Config { .. })));
    }

    #[test]
    fn inverse_frequency_weights_have_unit_mean() {
        let w = sample_weights(&[0, 0, 0, 1], WeightMode::InverseFrequency, &[90, 10]).unwrap();
        assert!((w.iter().sum::<f64>() / 4.0 - 1.0).abs() < 1e-15);
        assert!((w[3] / w[0] - 9.0).abs() < 1e-12);
        assert!(sample_weights(&[2], WeightMode::InverseFrequency, &[1, 1]).is_err());
    }

    #[test]
    fn swfc_gradients_match_finite_differences() {
        let data: Vec<f64> = (0..15).map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.37 + 0.05).collect();
        let labels = [0, 1, 0, 2, 1];
        for variant in [SwfcVariant::Eq2Literal, SwfcVariant::FocalSupcon] {
            let cfg = SwfcConfig {
                tau: 0.3,
                gamma: 2.0,
                variant,
                weight_mode: WeightMode::InverseFrequency,
            };
            let e = Tensor::matrix(5, 3, data.clone()).unwrap();
            let (_, g) = swfc_loss_with_grad(&e, &labels, &cfg, &[5, 3, 1]).unwrap();
            let rep = finite_diff_check("swfc", e.data(), g.data(), 1e-5, |x| {
                swfc_loss(&Tensor::matrix(5, 3, x.to_vec()).unwrap(), &labels, &cfg, &[5, 3, 1]).unwrap()
            })
            .unwrap();
            assert!(rep.passed, "{variant:?}: {rep}");
        }
    }

    #[test]
    fn combined_objective_examples() {
        let parts = TaskLosses {
            emotion: 1.0,
            gender: 2.0,
            speaker: 3.0,
            asr: 4.0,
            swfc: 5.0,
        };
        let zero = combined_objective(parts, &ObjectiveConfig { alpha: 0.0, beta: 0.0 }).unwrap();
        assert_eq!(zero.total, 1.0);
        let b = combined_objective(parts, &ObjectiveConfig { alpha: 0.1, beta: 0.5 }).unwrap();
        assert!((b.total - 4.1).abs() < 1e-12);
        let b2 = combined_objective(parts, &ObjectiveConfig { alpha: 0.1, beta: 1.0 }).unwrap();
        let non_swfc = b.total - 0.5 * 5.0;
        assert!(((b2.total - non_swfc) - 2.0 * (b.total - non_swfc)).abs() < 1e-12);
        let err = combined_objective(parts, &ObjectiveConfig { alpha: 0.34, beta: 0.0 }).unwrap_err();
        assert!(err.to_string().contains("1/3"));
    }

    #[test]
    fn masked_weights_redistribute_alpha() {
        let cfg = ObjectiveConfig { alpha: 0.1, beta: 0.2 };
        let w = LossWeights::new(&cfg, TaskMask { asr: true, gender: false, speaker: false }, false);
        assert!((w.emotion - 0.9).abs() < 1e-15);
        assert_eq!((w.asr, w.gender, w.speaker, w.swfc), (0.1, 0.0, 0.0, 0.0));
    }

    proptest! {
        #[test]
        fn breakdown_recombines(parts in prop::array::uniform5(0.0f64..10.0), alpha in 0.0f64..0.33, beta in 0.0f64..2.0) {
            let p = TaskLosses { emotion: parts[0], gender: parts[1], speaker: parts[2], asr: parts[3], swfc: parts[4] };
            let b = combined_objective(p, &ObjectiveConfig { alpha, beta }).unwrap();
            let direct = (1.0 - 3.0 * alpha) * parts[0] + alpha * (parts[1] + parts[2] + parts[3]) + beta * parts[4];
            prop_assert!((b.total - direct).abs() <= 1e-12);
            prop_assert_eq!(b.total, b.recombine());
        }

        #[test]
        fn literal_swfc_is_rotation_invariant(vals in prop::collection::vec(-2.0f64..2.0, 8), angle in 0.0f64..std::f64::consts::TAU) {
            prop_assume!(vals.chunks(2).all(|c| c[0].abs() + c[1].abs() > 0.1));
            let e = Tensor::matrix(4, 2, vals.clone()).unwrap();
            let (s, c) = angle.sin_cos();
            let rot: Vec<f64> = vals.chunks(2).flat_map(|v| [c * v[0] - s * v[1], s * v[0] + c * v[1]]).collect();
            let r = Tensor::matrix(4, 2, rot).unwrap();
            let cfg = literal(2.0);
            let a = swfc_loss(&e, &[0, 1, 0, 1], &cfg, &[2, 2]).unwrap();
            let b = swfc_loss(&r, &[0, 1, 0, 1], &cfg, &[2, 2]).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn losses_are_non_negative(vals in prop::collection::vec(-3.0f64..3.0, 12)) {
            let m = Tensor::matrix(4, 3, vals.clone()).unwrap();
            prop_assert!(cross_entropy(&m, &[0, 1, 2, 0]).unwrap() >= 0.0);
            prop_assert!(ctc_loss(&m, &[1, 2]).unwrap() >= 0.0);
            prop_assume!((0..4).all(|i| m.row(i).iter().any(|v| v.abs() > 1e-3)));
            let cfg = SwfcConfig { variant: SwfcVariant::FocalSupcon, ..SwfcConfig::default() };
            prop_assert!(swfc_loss(&m, &[0, 1, 0, 1], &cfg, &[2, 2]).unwrap() >= 0.0);
        }
    }
}
