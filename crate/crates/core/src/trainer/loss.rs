//! Edge and label losses, and the tape node that runs inference and both
//! losses for one sentence.
//!
//! Every log-probability term of a reported loss is clamped below at
//! [`LOG_FLOOR`]. Gradients follow the unclamped term: the normalizer's
//! adjoint multiplies `1 / p` by `p`, so they stay bounded and a badly
//! wrong gold edge keeps receiving signal.

use ndarray::{Array2, Array3, ArrayD, IxDyn};

use crate::decoder::{self, Formulation, Posterior};
use crate::scorer::label_distribution;
use crate::scores::{edge_valid, ScoreTensors};
use crate::tape::{CustomOp, Tensor};

pub const LOG_FLOOR: f64 = -30.0;

/// `max(ln p, LOG_FLOOR)` and the derivative of `ln p`, finite even at
/// `p = 0`.
fn floored_ln(p: f64) -> (f64, f64) {
    (p.ln().max(LOG_FLOOR), 1.0 / p.max(f64::MIN_POSITIVE))
}

/// Negative log posterior of each gold head, summed over dependents.
/// `q` is head-major; `gold[j - 1]` heads `w_j`.
pub fn edge_loss_local(q: &Array2<f64>, gold: &[usize]) -> f64 {
    gold.iter()
        .enumerate()
        .map(|(idx, &h)| -floored_ln(q[[h, idx + 1]]).0)
        .sum()
}

/// Binary cross-entropy over every candidate edge.
pub fn edge_loss_single(q: &Array2<f64>, gold: &[usize]) -> f64 {
    let m = q.nrows();
    let mut loss = 0.0;
    for i in 0..m {
        for j in 1..m {
            if !edge_valid(i, j) {
                continue;
            }
            let p = if gold[j - 1] == i { q[[i, j]] } else { 1.0 - q[[i, j]] };
            loss -= floored_ln(p).0;
        }
    }
    loss
}

pub fn edge_loss(q: &Array2<f64>, gold: &[usize], formulation: Formulation) -> f64 {
    match formulation {
        Formulation::Local => edge_loss_local(q, gold),
        Formulation::Single => edge_loss_single(q, gold),
    }
}

/// `d edge_loss / d q`.
pub fn edge_loss_grad(q: &Array2<f64>, gold: &[usize], formulation: Formulation) -> Array2<f64> {
    let m = q.nrows();
    let mut g = Array2::zeros((m, m));
    match formulation {
        Formulation::Local => {
            for (idx, &h) in gold.iter().enumerate() {
                g[[h, idx + 1]] = -floored_ln(q[[h, idx + 1]]).1;
            }
        }
        Formulation::Single => {
            for i in 0..m {
                for j in 1..m {
                    if !edge_valid(i, j) {
                        continue;
                    }
                    g[[i, j]] = if gold[j - 1] == i {
                        -floored_ln(q[[i, j]]).1
                    } else {
                        floored_ln(1.0 - q[[i, j]]).1
                    };
                }
            }
        }
    }
    g
}

/// Cross-entropy of the gold label on each gold edge. `p_label[[i, j, l]]`
/// is the label distribution of `w_i -> w_j`.
pub fn label_loss(p_label: &Array3<f64>, gold_heads: &[usize], gold_labels: &[usize]) -> f64 {
    gold_heads
        .iter()
        .zip(gold_labels)
        .enumerate()
        .map(|(idx, (&h, &l))| -floored_ln(p_label[[h, idx + 1, l]]).0)
        .sum()
}

/// `d label_loss / d label_scores` through the label softmax.
pub fn label_loss_grad(p_label: &Array3<f64>, gold_heads: &[usize], gold_labels: &[usize]) -> Array3<f64> {
    let mut g = Array3::zeros(p_label.raw_dim());
    let labels = p_label.dim().2;
    for (idx, (&h, &gold)) in gold_heads.iter().zip(gold_labels).enumerate() {
        let j = idx + 1;
        for l in 0..labels {
            let onehot = if l == gold { 1.0 } else { 0.0 };
            g[[h, j, l]] = p_label[[h, j, l]] - onehot;
        }
    }
    g
}

/// `lambda * label + (1 - lambda) * edge`.
pub fn total_loss(edge: f64, label: f64, lambda: f64) -> f64 {
    lambda * label + (1.0 - lambda) * edge
}

/// Gold annotation of one sentence in id space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GoldTree {
    pub heads: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Loss value and intermediate state for one sentence.
#[derive(Clone, Debug)]
pub struct SentenceLoss {
    pub total: f64,
    pub edge: f64,
    pub label: f64,
    pub posterior: Posterior,
    pub p_label: Array3<f64>,
}

pub fn sentence_loss(
    scores: &ScoreTensors,
    gold: &GoldTree,
    formulation: Formulation,
    iterations: usize,
    lambda: f64,
) -> SentenceLoss {
    let posterior = decoder::mfvi(scores, formulation, iterations);
    let p_label = label_distribution(&scores.label);
    let edge = edge_loss(posterior.final_q(), &gold.heads, formulation);
    let label = label_loss(&p_label, &gold.heads, &gold.labels);
    SentenceLoss {
        total: total_loss(edge, label, lambda),
        edge,
        label,
        posterior,
        p_label,
    }
}

/// Tape node: inputs `[edge, label]` or `[edge, label, sib, gp]`, scalar
/// output equal to the interpolated loss.
pub struct InferenceLoss {
    scores: ScoreTensors,
    gold: GoldTree,
    lambda: f64,
    with_binary: bool,
    state: SentenceLoss,
}

impl InferenceLoss {
    pub fn new(
        scores: ScoreTensors,
        gold: GoldTree,
        formulation: Formulation,
        iterations: usize,
        lambda: f64,
        with_binary: bool,
    ) -> Self {
        let state = sentence_loss(&scores, &gold, formulation, iterations, lambda);
        InferenceLoss {
            scores,
            gold,
            lambda,
            with_binary,
            state,
        }
    }

    pub fn state(&self) -> &SentenceLoss {
        &self.state
    }

    pub fn output(&self) -> Tensor {
        ArrayD::from_elem(IxDyn(&[]), self.state.total)
    }
}

impl CustomOp for InferenceLoss {
    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let g = grad.iter().next().copied().unwrap_or(0.0);
        let f = self.state.posterior.formulation;
        let dq = edge_loss_grad(self.state.posterior.final_q(), &self.gold.heads, f) * ((1.0 - self.lambda) * g);
        let parts = decoder::backward(&self.scores, &self.state.posterior, &dq);
        let dl = label_loss_grad(&self.state.p_label, &self.gold.heads, &self.gold.labels) * (self.lambda * g);
        let mut out = vec![parts.edge.into_dyn(), dl.into_dyn()];
        if self.with_binary {
            out.push(parts.sib.into_dyn());
            out.push(parts.gp.into_dyn());
        }
        out
    }
}
