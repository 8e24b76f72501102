//! Mean-field variational inference over the second-order CRF, unrolled for
//! a fixed number of iterations.
//!
//! Both formulations store posteriors head-major: `q[[i, j]]` is the
//! probability that `w_i` heads `w_j`. Column `0` and the diagonal are always
//! zero. For [`Formulation::Local`] every column `j >= 1` is a distribution
//! over heads; for [`Formulation::Single`] every entry is an independent
//! Bernoulli mean.
//!
//! In this layout both formulations share one message:
//!
//! ```text
//! m[i, j] = sum_{k != i, j} q[i, k] sib[i, j, k]      (sibling  i -> k)
//!                         + q[j, k] gp[i, j, k]       (child    j -> k)
//!                         + q[k, i] gp[k, i, j]       (parent   k -> i)
//! ```
//!
//! and differ only in how `edge + m` is normalized (softmax over heads per
//! dependent, or an elementwise logistic). Updates are synchronous over all
//! variables.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::scores::{edge_valid, ScoreTensors};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Formulation {
    /// Head selection: one categorical head variable per word.
    Local,
    /// One Boolean variable per candidate edge.
    Single,
}

impl Formulation {
    pub fn name(self) -> &'static str {
        match self {
            Formulation::Local => "local",
            Formulation::Single => "single",
        }
    }
}

/// Decoder variants: formulation plus first-order (`T = 0`) or
/// second-order (`T = 3` by default) inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Local1O,
    Single1O,
    Local2O,
    Single2O,
}

pub const DEFAULT_ITERATIONS: usize = 3;
pub const MAX_ITERATIONS: usize = 10;

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Local1O,
        Variant::Single1O,
        Variant::Local2O,
        Variant::Single2O,
    ];

    pub fn formulation(self) -> Formulation {
        match self {
            Variant::Local1O | Variant::Local2O => Formulation::Local,
            Variant::Single1O | Variant::Single2O => Formulation::Single,
        }
    }

    pub fn default_iterations(self) -> usize {
        match self {
            Variant::Local1O | Variant::Single1O => 0,
            Variant::Local2O | Variant::Single2O => DEFAULT_ITERATIONS,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Local1O => "local1o",
            Variant::Single1O => "single1o",
            Variant::Local2O => "local2o",
            Variant::Single2O => "single2o",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Local1O => "Local1O",
            Variant::Single1O => "Single1O",
            Variant::Local2O => "Local2O",
            Variant::Single2O => "Single2O",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Invalid(format!("unknown variant {:?}", s)))
    }
}

/// Counts multiply-adds performed while computing messages.
pub trait OpCounter {
    fn add(&mut self, macs: u64);
}

/// Counter that compiles away.
pub struct NoCount;

impl OpCounter for NoCount {
    #[inline(always)]
    fn add(&mut self, _macs: u64) {}
}

#[derive(Debug, Default)]
pub struct MacCounter(pub u64);

impl OpCounter for MacCounter {
    #[inline]
    fn add(&mut self, macs: u64) {
        self.0 += macs;
    }
}

/// Multiply-adds in one message computation for a sentence of `n` words:
/// `3 n (n - 1)^2`.
pub fn message_macs(n: usize) -> u64 {
    let n = n as u64;
    3 * n * n.saturating_sub(1).pow(2)
}

#[derive(Clone, Debug)]
pub struct Posterior {
    pub formulation: Formulation,
    /// `q[t]` for `t = 0..=T`.
    pub q: Vec<Array2<f64>>,
    /// `messages[t - 1]` is the message used to compute `q[t]`.
    pub messages: Vec<Array2<f64>>,
}

impl Posterior {
    pub fn iterations(&self) -> usize {
        self.messages.len()
    }

    pub fn n(&self) -> usize {
        self.q[0].nrows() - 1
    }

    pub fn final_q(&self) -> &Array2<f64> {
        self.q.last().expect("posterior has at least one iterate")
    }

    /// Dependent-major view of iterate `t`: row `j - 1`, column `i` holds the
    /// posterior of head `i` for word `j` (an `n x (n + 1)` matrix).
    pub fn dependent_major(&self, t: usize) -> Array2<f64> {
        let q = &self.q[t];
        let n = self.n();
        Array2::from_shape_fn((n, n + 1), |(j, i)| q[[i, j + 1]])
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Normalizes logits `z` (head-major) into posteriors.
pub fn normalize(z: &Array2<f64>, formulation: Formulation) -> Array2<f64> {
    let m = z.nrows();
    let mut q = Array2::zeros((m, m));
    match formulation {
        Formulation::Local => {
            for j in 1..m {
                let max = (0..m)
                    .filter(|&i| i != j)
                    .map(|i| z[[i, j]])
                    .fold(f64::NEG_INFINITY, f64::max);
                let lse = max
                    + (0..m)
                        .filter(|&i| i != j)
                        .map(|i| (z[[i, j]] - max).exp())
                        .sum::<f64>()
                        .ln();
                for i in (0..m).filter(|&i| i != j) {
                    q[[i, j]] = (z[[i, j]] - lse).exp();
                }
            }
        }
        Formulation::Single => {
            for ((i, j), x) in q.indexed_iter_mut() {
                if edge_valid(i, j) {
                    *x = logistic(z[[i, j]]);
                }
            }
        }
    }
    q
}

fn normalize_backward(q: &Array2<f64>, grad: &Array2<f64>, formulation: Formulation) -> Array2<f64> {
    let m = q.nrows();
    let mut gz = Array2::zeros((m, m));
    match formulation {
        Formulation::Local => {
            for j in 1..m {
                let inner: f64 = (0..m)
                    .filter(|&i| i != j)
                    .map(|i| q[[i, j]] * grad[[i, j]])
                    .sum();
                for i in (0..m).filter(|&i| i != j) {
                    gz[[i, j]] = q[[i, j]] * (grad[[i, j]] - inner);
                }
            }
        }
        Formulation::Single => {
            for ((i, j), g) in gz.indexed_iter_mut() {
                if edge_valid(i, j) {
                    let p = q[[i, j]];
                    *g = grad[[i, j]] * p * (1.0 - p);
                }
            }
        }
    }
    gz
}

/// Computes `m[i, j]` for all candidate edges from the previous posterior.
pub fn messages<C: OpCounter>(q: &Array2<f64>, scores: &ScoreTensors, counter: &mut C) -> Array2<f64> {
    let m = q.nrows();
    let sib = &scores.sib;
    let gp = &scores.gp;
    let mut out = Array2::zeros((m, m));
    for i in 0..m {
        for j in 1..m {
            if i == j {
                continue;
            }
            let mut acc = 0.0;
            let mut macs = 0u64;
            for k in 1..m {
                if k == i || k == j {
                    continue;
                }
                acc += q[[i, k]] * sib[[i, j, k]];
                acc += q[[j, k]] * gp[[i, j, k]];
                macs += 2;
            }
            if i != 0 {
                for k in 0..m {
                    if k == i || k == j {
                        continue;
                    }
                    acc += q[[k, i]] * gp[[k, i, j]];
                    macs += 1;
                }
            }
            counter.add(macs);
            out[[i, j]] = acc;
        }
    }
    out
}

fn messages_backward(
    q: &Array2<f64>,
    scores: &ScoreTensors,
    gz: &Array2<f64>,
    g_sib: &mut Array3<f64>,
    g_gp: &mut Array3<f64>,
) -> Array2<f64> {
    let m = q.nrows();
    let sib = &scores.sib;
    let gp = &scores.gp;
    let mut gq = Array2::zeros((m, m));
    for i in 0..m {
        for j in 1..m {
            if i == j {
                continue;
            }
            let c = gz[[i, j]];
            if c == 0.0 {
                continue;
            }
            for k in 1..m {
                if k == i || k == j {
                    continue;
                }
                g_sib[[i, j, k]] += c * q[[i, k]];
                gq[[i, k]] += c * sib[[i, j, k]];
                g_gp[[i, j, k]] += c * q[[j, k]];
                gq[[j, k]] += c * gp[[i, j, k]];
            }
            if i != 0 {
                for k in 0..m {
                    if k == i || k == j {
                        continue;
                    }
                    g_gp[[k, i, j]] += c * q[[k, i]];
                    gq[[k, i]] += c * gp[[k, i, j]];
                }
            }
        }
    }
    gq
}

/// Runs `iterations` synchronous updates, counting message multiply-adds.
pub fn mfvi_counted<C: OpCounter>(
    scores: &ScoreTensors,
    formulation: Formulation,
    iterations: usize,
    counter: &mut C,
) -> Posterior {
    let mut q = Vec::with_capacity(iterations + 1);
    let mut msgs = Vec::with_capacity(iterations);
    q.push(normalize(&scores.edge, formulation));
    for _ in 0..iterations {
        let msg = messages(q.last().expect("initial iterate"), scores, counter);
        let z = &scores.edge + &msg;
        q.push(normalize(&z, formulation));
        msgs.push(msg);
    }
    Posterior {
        formulation,
        q,
        messages: msgs,
    }
}

pub fn mfvi(scores: &ScoreTensors, formulation: Formulation, iterations: usize) -> Posterior {
    mfvi_counted(scores, formulation, iterations, &mut NoCount)
}

pub fn mfvi_local(scores: &ScoreTensors, iterations: usize) -> Posterior {
    mfvi(scores, Formulation::Local, iterations)
}

pub fn mfvi_single(scores: &ScoreTensors, iterations: usize) -> Posterior {
    mfvi(scores, Formulation::Single, iterations)
}

/// Adjoints of the first- and second-order score tensors.
#[derive(Clone, Debug)]
pub struct ScoreGrads {
    pub edge: Array2<f64>,
    pub sib: Array3<f64>,
    pub gp: Array3<f64>,
}

/// Backpropagates `d loss / d q[T]` through every unrolled iteration.
pub fn backward(scores: &ScoreTensors, posterior: &Posterior, grad_final: &Array2<f64>) -> ScoreGrads {
    let m = scores.n() + 1;
    let f = posterior.formulation;
    let mut g_edge = Array2::zeros((m, m));
    let mut g_sib = Array3::zeros((m, m, m));
    let mut g_gp = Array3::zeros((m, m, m));
    let mut gq = grad_final.clone();
    for t in (1..=posterior.iterations()).rev() {
        let gz = normalize_backward(&posterior.q[t], &gq, f);
        g_edge += &gz;
        gq = messages_backward(&posterior.q[t - 1], scores, &gz, &mut g_sib, &mut g_gp);
    }
    g_edge += &normalize_backward(&posterior.q[0], &gq, f);
    ScoreGrads {
        edge: g_edge,
        sib: g_sib,
        gp: g_gp,
    }
}

/// Result of comparing decoding before and after per-dependent shifts of
/// the edge scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftReport {
    /// Largest absolute difference between final Local posteriors.
    pub max_abs_diff: f64,
    /// Fraction of dependents whose argmax head is unchanged.
    pub argmax_agreement: f64,
}

/// Adds `shifts[j - 1]` to every candidate edge entering `w_j` and compares
/// the Local posteriors. Softmax shift invariance makes the posteriors equal.
pub fn posterior_shift_check(scores: &ScoreTensors, shifts: &[f64], iterations: usize) -> Result<ShiftReport> {
    let n = scores.n();
    if shifts.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: shifts.len(),
        });
    }
    let mut shifted = scores.clone();
    for ((i, j), x) in shifted.edge.indexed_iter_mut() {
        if edge_valid(i, j) {
            *x += shifts[j - 1];
        }
    }
    let a = mfvi_local(scores, iterations);
    let b = mfvi_local(&shifted, iterations);
    let max_abs_diff = a
        .final_q()
        .iter()
        .zip(b.final_q().iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let ha = crate::tree::argmax_heads(a.final_q());
    let hb = crate::tree::argmax_heads(b.final_q());
    let agree = ha.iter().zip(&hb).filter(|(x, y)| x == y).count();
    Ok(ShiftReport {
        max_abs_diff,
        argmax_agreement: agree as f64 / n as f64,
    })
}

/// Shifts every dependent's incoming edge scores by the same constant `c`.
pub fn posterior_scale_check(scores: &ScoreTensors, c: f64, iterations: usize) -> Result<ShiftReport> {
    if c.is_nan() || c <= 0.0 {
        return Err(Error::Invalid(format!("shift constant must be positive, got {}", c)));
    }
    posterior_shift_check(scores, &vec![c; scores.n()], iterations)
}
