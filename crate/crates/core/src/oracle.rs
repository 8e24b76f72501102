//! Exact reference computations by exhaustive enumeration.
//!
//! These are slow on purpose and guarded by hard size limits. They back the
//! test suites and the `oracle-check` command.
//!
//! The joint distributions enumerated here are the ones the mean-field
//! updates approximate. A pair of words whose heads coincide contributes the
//! sibling score averaged over both orderings, `(sib[h, j, l] + sib[h, l, j]) / 2`,
//! which equals `sib[h, j, l]` whenever the sibling tensor is symmetric in
//! its last two indices. A chain `i -> j -> l` contributes `gp[i, j, l]`.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scores::{edge_valid, ScoreTensors};
use crate::tree::is_tree;

pub const MAX_LOCAL_WORDS: usize = 6;
pub const MAX_SINGLE_EDGES: usize = 14;
pub const MAX_BRUTEFORCE_WORDS: usize = 5;

fn sibling(scores: &ScoreTensors, h: usize, a: usize, b: usize) -> f64 {
    0.5 * (scores.sib[[h, a, b]] + scores.sib[[h, b, a]])
}

/// Log-potential of a complete head assignment (`heads[j - 1]` heads `w_j`).
pub fn local_log_potential(scores: &ScoreTensors, heads: &[usize]) -> f64 {
    let n = heads.len();
    let mut total = 0.0;
    for j in 1..=n {
        let hj = heads[j - 1];
        total += scores.edge[[hj, j]];
        for l in j + 1..=n {
            let hl = heads[l - 1];
            if hj == hl {
                total += sibling(scores, hj, j, l);
            }
            if hl == j {
                total += scores.gp[[hj, j, l]];
            }
            if hj == l {
                total += scores.gp[[hl, l, j]];
            }
        }
    }
    total
}

/// Calls `visit` for every head assignment; the last word varies fastest.
/// Word `j` takes digit `d` in `0..n` and maps it to head `d` below `j`,
/// `d + 1` otherwise.
fn for_each_assignment<F: FnMut(&[usize])>(n: usize, mut visit: F) {
    let total = n.pow(n as u32);
    let mut heads = vec![0usize; n];
    for code in 0..total {
        let mut c = code;
        for j in (1..=n).rev() {
            let d = c % n;
            c /= n;
            heads[j - 1] = if d < j { d } else { d + 1 };
        }
        visit(&heads);
    }
}

fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Exact head-selection marginals, head-major like the decoder's posteriors.
pub fn exact_marginals_local(scores: &ScoreTensors) -> Result<Array2<f64>> {
    let n = scores.n();
    if n > MAX_LOCAL_WORDS {
        return Err(Error::TooLarge(format!(
            "{} words exceeds the local enumeration limit of {}",
            n, MAX_LOCAL_WORDS
        )));
    }
    let mut assignments = Vec::new();
    let mut logw = Vec::new();
    for_each_assignment(n, |h| {
        assignments.push(h.to_vec());
        logw.push(local_log_potential(scores, h));
    });
    let log_z = logsumexp(&logw);
    let mut marg = Array2::zeros((n + 1, n + 1));
    for (h, lw) in assignments.iter().zip(&logw) {
        let p = (lw - log_z).exp();
        for (idx, &head) in h.iter().enumerate() {
            marg[[head, idx + 1]] += p;
        }
    }
    Ok(marg)
}

/// Highest-scoring head assignment (not necessarily a tree); ties go to the
/// assignment enumerated first.
pub fn map_assignment_local(scores: &ScoreTensors) -> Result<Vec<usize>> {
    let n = scores.n();
    if n > MAX_LOCAL_WORDS {
        return Err(Error::TooLarge(format!("{} words", n)));
    }
    let mut best = None;
    let mut best_w = f64::NEG_INFINITY;
    for_each_assignment(n, |h| {
        let w = local_log_potential(scores, h);
        if best.is_none() || w > best_w {
            best_w = w;
            best = Some(h.to_vec());
        }
    });
    Ok(best.expect("at least one assignment"))
}

/// Candidate edges `(head, dependent)` in row-major order.
pub fn candidate_edges(n: usize) -> Vec<(usize, usize)> {
    (0..=n)
        .flat_map(|i| (1..=n).map(move |j| (i, j)))
        .filter(|&(i, j)| edge_valid(i, j))
        .collect()
}

/// Log-potential of an edge subset given as presence indicators over
/// [`candidate_edges`].
pub fn single_log_potential(scores: &ScoreTensors, edges: &[(usize, usize)], present: &[bool]) -> f64 {
    let mut total = 0.0;
    let on: Vec<(usize, usize)> = edges
        .iter()
        .zip(present)
        .filter(|(_, &p)| p)
        .map(|(&e, _)| e)
        .collect();
    for (a, &(i, j)) in on.iter().enumerate() {
        total += scores.edge[[i, j]];
        for &(i2, k) in &on[a + 1..] {
            if i2 == i {
                total += sibling(scores, i, j, k);
            }
        }
        for &(h, k) in &on {
            if h == j {
                total += scores.gp[[i, j, k]];
            }
        }
    }
    total
}

/// Exact edge marginals of the Boolean-edge model, head-major.
pub fn exact_marginals_single(scores: &ScoreTensors) -> Result<Array2<f64>> {
    let n = scores.n();
    let edges = candidate_edges(n);
    if edges.len() > MAX_SINGLE_EDGES {
        return Err(Error::TooLarge(format!(
            "{} candidate edges exceeds the subset enumeration limit of {}",
            edges.len(),
            MAX_SINGLE_EDGES
        )));
    }
    let count = 1usize << edges.len();
    let mut logw = Vec::with_capacity(count);
    let mut present = vec![false; edges.len()];
    for mask in 0..count {
        for (b, p) in present.iter_mut().enumerate() {
            *p = mask >> b & 1 == 1;
        }
        logw.push(single_log_potential(scores, &edges, &present));
    }
    let log_z = logsumexp(&logw);
    let mut marg = Array2::zeros((n + 1, n + 1));
    for (mask, lw) in logw.iter().enumerate() {
        let p = (lw - log_z).exp();
        for (b, &(i, j)) in edges.iter().enumerate() {
            if mask >> b & 1 == 1 {
                marg[[i, j]] += p;
            }
        }
    }
    Ok(marg)
}

/// Best arborescence by enumerating every head array. Among equal totals the
/// lexicographically smallest head array wins.
pub fn best_arborescence_bruteforce(weights: &Array2<f64>, single_root: bool) -> Result<Vec<usize>> {
    let n = weights.nrows().saturating_sub(1);
    if n == 0 {
        return Err(Error::Invalid("no words".into()));
    }
    if n > MAX_BRUTEFORCE_WORDS {
        return Err(Error::TooLarge(format!("{} words", n)));
    }
    let mut best: Option<Vec<usize>> = None;
    let mut best_w = f64::NEG_INFINITY;
    let mut heads = vec![0usize; n];
    let total = (n + 1).pow(n as u32);
    for code in 0..total {
        let mut c = code;
        for h in heads.iter_mut().rev() {
            *h = c % (n + 1);
            c /= n + 1;
        }
        if heads.iter().enumerate().any(|(j, &h)| h == j + 1) || !is_tree(&heads) {
            continue;
        }
        if single_root && heads.iter().filter(|&&h| h == 0).count() != 1 {
            continue;
        }
        let w: f64 = heads.iter().enumerate().map(|(j, &h)| weights[[h, j + 1]]).sum();
        if w == f64::NEG_INFINITY {
            continue;
        }
        if best.is_none() || w > best_w {
            best_w = w;
            best = Some(heads.clone());
        }
    }
    best.ok_or_else(|| Error::Invalid("no feasible arborescence".into()))
}

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
pub fn finite_diff_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, params: &[f64], eps: f64) -> Vec<f64> {
    assert!(eps > 0.0, "step must be positive");
    let mut x = params.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + eps;
            let plus = f(&x);
            x[i] = orig - eps;
            let minus = f(&x);
            x[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::normalize;
    use crate::decoder::Formulation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn assignment_enumeration_counts() {
        for n in 1..=5 {
            let mut count = 0;
            let mut seen = std::collections::HashSet::new();
            for_each_assignment(n, |h| {
                assert!(h.iter().enumerate().all(|(j, &x)| x != j + 1 && x <= n));
                seen.insert(h.to_vec());
                count += 1;
            });
            assert_eq!(count, n.pow(n as u32));
            assert_eq!(seen.len(), count);
        }
    }

    #[test]
    fn one_word() {
        let s = ScoreTensors::zeros(1, 1);
        let m = exact_marginals_local(&s).unwrap();
        assert_eq!(m[[0, 1]], 1.0);
    }

    #[test]
    fn factorized_when_binaries_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = ScoreTensors::random(3, 1, 1.0, 0.25, &mut rng).with_binary_scaled(0.0);
        let local = exact_marginals_local(&s).unwrap();
        let soft = normalize(&s.edge, Formulation::Local);
        let single = exact_marginals_single(&s).unwrap();
        let sig = normalize(&s.edge, Formulation::Single);
        for (a, b) in local.iter().zip(soft.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in single.iter().zip(sig.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_candidate_edge() {
        let s = ScoreTensors::zeros(1, 1);
        let m = exact_marginals_single(&s).unwrap();
        assert_eq!(m[[0, 1]], 0.5);
    }

    #[test]
    fn size_guards() {
        assert!(matches!(
            exact_marginals_local(&ScoreTensors::zeros(7, 1)),
            Err(Error::TooLarge(_))
        ));
        assert!(matches!(
            exact_marginals_single(&ScoreTensors::zeros(4, 1)),
            Err(Error::TooLarge(_))
        ));
        assert!(best_arborescence_bruteforce(&Array2::zeros((7, 7)), false).is_err());
    }

    #[test]
    fn finite_differences() {
        let g = finite_diff_gradient(|x| 3.0 * x[0] - 2.0 * x[1] + 0.5, &[1.0, 4.0], 1e-5);
        assert!((g[0] - 3.0).abs() < 1e-10 && (g[1] + 2.0).abs() < 1e-10);
        let g = finite_diff_gradient(|x| x[0] * x[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn bruteforce_examples() {
        let neg = f64::NEG_INFINITY;
        let mut w = Array2::from_elem((3, 3), neg);
        w[[0, 1]] = 5.0;
        w[[0, 2]] = 1.0;
        w[[1, 2]] = 4.0;
        w[[2, 1]] = 3.0;
        assert_eq!(best_arborescence_bruteforce(&w, true).unwrap(), vec![0, 1]);
        let mut w = Array2::from_elem((3, 3), neg);
        w[[0, 1]] = 2.0;
        w[[0, 2]] = 1.0;
        w[[1, 2]] = 10.0;
        w[[2, 1]] = 10.0;
        assert_eq!(best_arborescence_bruteforce(&w, false).unwrap(), vec![0, 1]);
        let w = Array2::from_elem((2, 2), 0.0);
        assert_eq!(best_arborescence_bruteforce(&w, true).unwrap(), vec![0]);
    }
}
