//! Dense first- and second-order part scores for one sentence.
//!
//! Index `0` is the dummy root. `edge[[i, j]]` scores `w_i -> w_j`,
//! `sib[[i, j, k]]` scores the sibling pair `{w_i -> w_j, w_i -> w_k}`,
//! `gp[[i, j, k]]` scores the chain `{w_i -> w_j, w_j -> w_k}` and
//! `label[[i, j, l]]` scores label `l` on `w_i -> w_j`.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// `w_i -> w_j` is a candidate edge.
#[inline]
pub fn edge_valid(i: usize, j: usize) -> bool {
    j != 0 && i != j
}

/// Both edges of a sibling part `(i, j, k)` or a grandparent part `(i, j, k)`
/// are candidates and the part involves three distinct words.
#[inline]
pub fn triple_valid(i: usize, j: usize, k: usize) -> bool {
    j != 0 && k != 0 && i != j && i != k && j != k
}

pub fn edge_mask(n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n + 1, n + 1), |(i, j)| f64::from(u8::from(edge_valid(i, j))))
}

pub fn triple_mask(n: usize) -> Array3<f64> {
    Array3::from_shape_fn((n + 1, n + 1, n + 1), |(i, j, k)| {
        f64::from(u8::from(triple_valid(i, j, k)))
    })
}

pub fn label_mask(n: usize, labels: usize) -> Array3<f64> {
    Array3::from_shape_fn((n + 1, n + 1, labels), |(i, j, _)| {
        f64::from(u8::from(edge_valid(i, j)))
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTensors {
    pub edge: Array2<f64>,
    pub sib: Array3<f64>,
    pub gp: Array3<f64>,
    pub label: Array3<f64>,
}

impl ScoreTensors {
    pub fn zeros(n: usize, labels: usize) -> Self {
        ScoreTensors {
            edge: Array2::zeros((n + 1, n + 1)),
            sib: Array3::zeros((n + 1, n + 1, n + 1)),
            gp: Array3::zeros((n + 1, n + 1, n + 1)),
            label: Array3::zeros((n + 1, n + 1, labels)),
        }
    }

    /// Random scores: unary entries from `N(0, unary_std^2)`, binary entries
    /// from `N(0, binary_std^2)`, masks applied.
    pub fn random<R: Rng + ?Sized>(
        n: usize,
        labels: usize,
        unary_std: f64,
        binary_std: f64,
        rng: &mut R,
    ) -> Self {
        let unary = Normal::new(0.0, unary_std).expect("unary stddev");
        let binary = Normal::new(0.0, binary_std).expect("binary stddev");
        let mut s = ScoreTensors::zeros(n, labels);
        s.edge.iter_mut().for_each(|x| *x = unary.sample(rng));
        s.sib.iter_mut().for_each(|x| *x = binary.sample(rng));
        s.gp.iter_mut().for_each(|x| *x = binary.sample(rng));
        s.label.iter_mut().for_each(|x| *x = unary.sample(rng));
        s.apply_masks();
        s
    }

    /// Sentence length `n` (excluding the root).
    pub fn n(&self) -> usize {
        self.edge.nrows() - 1
    }

    pub fn num_labels(&self) -> usize {
        self.label.dim().2
    }

    pub fn apply_masks(&mut self) {
        let n = self.n();
        for ((i, j), x) in self.edge.indexed_iter_mut() {
            if !edge_valid(i, j) {
                *x = 0.0;
            }
        }
        for t in [&mut self.sib, &mut self.gp] {
            for ((i, j, k), x) in t.indexed_iter_mut() {
                if !triple_valid(i, j, k) {
                    *x = 0.0;
                }
            }
        }
        for ((i, j, _), x) in self.label.indexed_iter_mut() {
            if !edge_valid(i, j) {
                *x = 0.0;
            }
        }
        debug_assert_eq!(self.sib.dim(), (n + 1, n + 1, n + 1));
    }

    /// Copy with both binary tensors multiplied by `factor`.
    pub fn with_binary_scaled(&self, factor: f64) -> Self {
        let mut s = self.clone();
        s.sib.mapv_inplace(|x| x * factor);
        s.gp.mapv_inplace(|x| x * factor);
        s
    }

    /// Serializes as `n, L, T` (little-endian `u64`) followed by the edge,
    /// sibling, grandparent and label tensors as little-endian `f64` in
    /// row-major order.
    pub fn to_blob(&self, iterations: usize) -> Vec<u8> {
        let n = self.n();
        let l = self.num_labels();
        let floats = (n + 1).pow(2) * (1 + l) + 2 * (n + 1).pow(3);
        let mut out = Vec::with_capacity(24 + 8 * floats);
        for h in [n as u64, l as u64, iterations as u64] {
            out.extend_from_slice(&h.to_le_bytes());
        }
        for x in self
            .edge
            .iter()
            .chain(self.sib.iter())
            .chain(self.gp.iter())
            .chain(self.label.iter())
        {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    /// Inverse of [`ScoreTensors::to_blob`]; returns the scores and `T`.
    pub fn from_blob(bytes: &[u8]) -> Result<(Self, usize)> {
        let header = |idx: usize| -> Result<usize> {
            let raw = bytes
                .get(8 * idx..8 * idx + 8)
                .ok_or_else(|| Error::Format("truncated score header".into()))?;
            Ok(u64::from_le_bytes(raw.try_into().expect("8 bytes")) as usize)
        };
        let n = header(0)?;
        let l = header(1)?;
        let t = header(2)?;
        if n == 0 || n > 4096 {
            return Err(Error::Format(format!("implausible sentence length {}", n)));
        }
        let m = n + 1;
        let expected = 24 + 8 * (m * m * (1 + l) + 2 * m * m * m);
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "score blob has {} bytes, expected {}",
                bytes.len(),
                expected
            )));
        }
        let mut floats = bytes[24..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut take = |len: usize| -> Vec<f64> { floats.by_ref().take(len).collect() };
        let edge = Array2::from_shape_vec((m, m), take(m * m)).expect("edge shape");
        let sib = Array3::from_shape_vec((m, m, m), take(m * m * m)).expect("sib shape");
        let gp = Array3::from_shape_vec((m, m, m), take(m * m * m)).expect("gp shape");
        let label = Array3::from_shape_vec((m, m, l), take(m * m * l)).expect("label shape");
        let scores = ScoreTensors {
            edge,
            sib,
            gp,
            label,
        };
        if scores
            .edge
            .iter()
            .chain(scores.sib.iter())
            .chain(scores.gp.iter())
            .chain(scores.label.iter())
            .any(|x| !x.is_finite())
        {
            return Err(Error::Format("score blob contains non-finite values".into()));
        }
        Ok((scores, t))
    }
}
