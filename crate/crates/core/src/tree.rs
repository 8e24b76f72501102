//! Turning posteriors into dependency trees.
//!
//! The per-word argmax is used directly when it already forms a tree;
//! otherwise a maximum spanning arborescence over `ln q` is computed with
//! Chu-Liu/Edmonds. Ties go to the smallest index: per word for the argmax,
//! and to the lexicographically smallest head array among optimal trees.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::scores::edge_valid;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DependencyTree {
    /// `heads[j - 1]` is the head of `w_j`.
    pub heads: Vec<usize>,
    /// Label ids, aligned with `heads`.
    pub labels: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeConfig {
    /// Require exactly one dependent of the root.
    pub single_root: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { single_root: true }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DecodeStats {
    pub decoded: usize,
    pub mst_invocations: usize,
}

/// Highest-posterior head for every word of a head-major posterior.
pub fn argmax_heads(q: &Array2<f64>) -> Vec<usize> {
    let m = q.nrows();
    (1..m)
        .map(|j| {
            let mut best = usize::MAX;
            let mut best_val = f64::NEG_INFINITY;
            for i in (0..m).filter(|&i| i != j) {
                if best == usize::MAX || q[[i, j]] > best_val {
                    best = i;
                    best_val = q[[i, j]];
                }
            }
            best
        })
        .collect()
}

/// Whether `heads` describes an arborescence rooted at `0`.
pub fn is_tree(heads: &[usize]) -> bool {
    let n = heads.len();
    // 0 = unvisited, 1 = on the current path, 2 = reaches the root
    let mut state = vec![0u8; n + 1];
    state[0] = 2;
    let mut path = Vec::new();
    for start in 1..=n {
        let mut v = start;
        while state[v] == 0 {
            state[v] = 1;
            path.push(v);
            let h = heads[v - 1];
            if h > n || h == v {
                return false;
            }
            v = h;
        }
        if state[v] == 1 {
            return false;
        }
        for u in path.drain(..) {
            state[u] = 2;
        }
    }
    true
}

fn root_children(heads: &[usize]) -> usize {
    heads.iter().filter(|&&h| h == 0).count()
}

/// Sum of `weights[[heads[j - 1], j]]`.
pub fn tree_weight(weights: &Array2<f64>, heads: &[usize]) -> f64 {
    heads
        .iter()
        .enumerate()
        .map(|(j, &h)| weights[[h, j + 1]])
        .sum()
}

/// Maximum spanning arborescence rooted at `0`.
///
/// `weights[[i, j]]` is the weight of `w_i -> w_j`; `-inf` marks a missing
/// edge. Column `0` and the diagonal are ignored. Equal-weight optima resolve
/// to the lexicographically smallest head array.
pub fn chu_liu_edmonds(weights: &Array2<f64>, single_root: bool) -> Result<Vec<usize>> {
    let m = weights.nrows();
    if m < 2 || weights.ncols() != m {
        return Err(Error::Invalid("weight matrix must be (n+1)x(n+1) with n >= 1".into()));
    }
    let mut w = weights.clone();
    for v in 0..m {
        w[[v, v]] = f64::NEG_INFINITY;
        w[[v, 0]] = f64::NEG_INFINITY;
    }
    if w.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::Invalid("weights must be finite or -inf".into()));
    }
    for v in 1..m {
        if w.column(v).iter().all(|&x| x == f64::NEG_INFINITY) {
            return Err(Error::NoFeasibleHead(v));
        }
    }

    let (heads, tied) = solve(&w, single_root)?;
    if !tied {
        return Ok(heads);
    }
    canonical(&w, single_root, heads)
}

/// Among optimal arborescences, the lexicographically smallest head array.
/// Called only when some selection saw an exact tie: each word in turn is
/// pinned to the smallest head that still allows an optimal tree.
fn canonical(w: &Array2<f64>, single_root: bool, mut heads: Vec<usize>) -> Result<Vec<usize>> {
    let m = w.nrows();
    let optimum = tree_weight(w, &heads);
    let slack = 1e-12 * optimum.abs().max(1.0);
    let mut pinned = w.clone();
    let pin = |mat: &mut Array2<f64>, h: usize, j: usize| {
        for u in 0..m {
            if u != h {
                mat[[u, j]] = f64::NEG_INFINITY;
            }
        }
    };
    for j in 1..m {
        for h in 0..heads[j - 1] {
            if pinned[[h, j]] == f64::NEG_INFINITY {
                continue;
            }
            let mut trial = pinned.clone();
            pin(&mut trial, h, j);
            if let Ok((cand, _)) = solve(&trial, single_root) {
                if tree_weight(w, &cand) >= optimum - slack {
                    heads = cand;
                    break;
                }
            }
        }
        pin(&mut pinned, heads[j - 1], j);
    }
    Ok(heads)
}

/// One optimal arborescence plus whether any selection met an exact tie.
fn solve(w: &Array2<f64>, single_root: bool) -> Result<(Vec<usize>, bool)> {
    let m = w.nrows();
    let mut tied = false;
    let parents = contract(w, &mut tied)?;
    let heads: Vec<usize> = parents[1..].to_vec();
    if !single_root || root_children(&heads) == 1 {
        return Ok((heads, tied));
    }

    let mut best: Option<(f64, Vec<usize>)> = None;
    for r in 1..m {
        if w[[0, r]] == f64::NEG_INFINITY {
            continue;
        }
        let mut wr = w.clone();
        for v in 1..m {
            if v != r {
                wr[[0, v]] = f64::NEG_INFINITY;
            }
        }
        let Ok(p) = contract(&wr, &mut tied) else {
            continue;
        };
        let h = p[1..].to_vec();
        let total = tree_weight(w, &h);
        match &best {
            Some((b, _)) if total < *b => {}
            Some((b, _)) if total == *b => tied = true,
            _ => best = Some((total, h)),
        }
    }
    best.map(|(_, h)| (h, tied))
        .ok_or_else(|| Error::Invalid("no single-root arborescence exists".into()))
}

fn best_parent(w: &Array2<f64>, v: usize, tied: &mut bool) -> Option<usize> {
    let mut best = None;
    let mut best_val = f64::NEG_INFINITY;
    for u in 0..w.nrows() {
        if u == v {
            continue;
        }
        if w[[u, v]] > best_val {
            best = Some(u);
            best_val = w[[u, v]];
        } else if w[[u, v]] == best_val && best.is_some() {
            *tied = true;
        }
    }
    best
}

fn find_cycle(parent: &[usize]) -> Option<Vec<usize>> {
    let m = parent.len();
    let mut color = vec![0u8; m];
    color[0] = 2;
    for start in 1..m {
        let mut path = Vec::new();
        let mut v = start;
        while color[v] == 0 {
            color[v] = 1;
            path.push(v);
            v = parent[v];
        }
        if color[v] == 1 {
            let pos = path.iter().position(|&u| u == v).expect("cycle start on path");
            let mut cycle = path[pos..].to_vec();
            cycle.sort_unstable();
            return Some(cycle);
        }
        for u in path {
            color[u] = 2;
        }
    }
    None
}

/// Recursive contraction on a dense matrix with `-inf` for absent edges.
/// Returns a parent per node (`parent[0]` is meaningless).
fn contract(w: &Array2<f64>, tied: &mut bool) -> Result<Vec<usize>> {
    let m = w.nrows();
    let mut parent = vec![0usize; m];
    for (v, p) in parent.iter_mut().enumerate().skip(1) {
        *p = best_parent(w, v, tied).ok_or(Error::NoFeasibleHead(v))?;
    }
    let Some(cycle) = find_cycle(&parent) else {
        return Ok(parent);
    };

    let mut in_cycle = vec![false; m];
    for &c in &cycle {
        in_cycle[c] = true;
    }
    // Contracted graph: non-cycle nodes keep their relative order, the cycle
    // becomes the last node.
    let outside: Vec<usize> = (0..m).filter(|&v| !in_cycle[v]).collect();
    let c = outside.len();
    let mut wc = Array2::from_elem((c + 1, c + 1), f64::NEG_INFINITY);
    let mut enter = vec![usize::MAX; c + 1];
    let mut leave = vec![usize::MAX; c + 1];

    for (a, &u) in outside.iter().enumerate() {
        for (b, &v) in outside.iter().enumerate() {
            if a != b {
                wc[[a, b]] = w[[u, v]];
            }
        }
        let mut best_in = f64::NEG_INFINITY;
        for &v in &cycle {
            let gain = w[[u, v]] - w[[parent[v], v]];
            if gain > best_in {
                best_in = gain;
                enter[a] = v;
            } else if gain == best_in && gain > f64::NEG_INFINITY {
                *tied = true;
            }
        }
        wc[[a, c]] = best_in;
        if u != 0 {
            let mut best_out = f64::NEG_INFINITY;
            for &x in &cycle {
                if w[[x, u]] > best_out {
                    best_out = w[[x, u]];
                    leave[a] = x;
                } else if w[[x, u]] == best_out && best_out > f64::NEG_INFINITY {
                    *tied = true;
                }
            }
            wc[[c, a]] = best_out;
        }
    }

    let sub = contract(&wc, tied)?;
    let mut result = parent.clone();
    for (b, &v) in outside.iter().enumerate().skip(1) {
        let p = sub[b];
        result[v] = if p == c { leave[b] } else { outside[p] };
    }
    let entry_from = sub[c];
    let entry_to = enter[entry_from];
    result[entry_to] = outside[entry_from];
    Ok(result)
}

/// Highest-probability label for each chosen edge.
pub fn assign_labels(p_label: &Array3<f64>, heads: &[usize]) -> Vec<usize> {
    let l = p_label.dim().2;
    heads
        .iter()
        .enumerate()
        .map(|(idx, &h)| {
            let j = idx + 1;
            let mut best = 0;
            for lab in 1..l {
                if p_label[[h, j, lab]] > p_label[[h, j, best]] {
                    best = lab;
                }
            }
            best
        })
        .collect()
}

/// MST weights: natural log of the posterior, `-inf` on masked cells.
pub fn log_weights(q: &Array2<f64>) -> Array2<f64> {
    Array2::from_shape_fn(q.dim(), |(i, j)| {
        if edge_valid(i, j) {
            q[[i, j]].max(f64::MIN_POSITIVE).ln()
        } else {
            f64::NEG_INFINITY
        }
    })
}

pub fn decode_with_stats(
    q: &Array2<f64>,
    p_label: &Array3<f64>,
    config: DecodeConfig,
    stats: &mut DecodeStats,
) -> Result<DependencyTree> {
    if q.nrows() < 2 {
        return Err(Error::Invalid("cannot decode an empty sentence".into()));
    }
    stats.decoded += 1;
    let mut heads = argmax_heads(q);
    let acceptable = is_tree(&heads) && (!config.single_root || root_children(&heads) == 1);
    if !acceptable {
        stats.mst_invocations += 1;
        heads = chu_liu_edmonds(&log_weights(q), config.single_root)?;
    }
    let labels = assign_labels(p_label, &heads);
    Ok(DependencyTree { heads, labels })
}

pub fn decode(q: &Array2<f64>, p_label: &Array3<f64>, config: DecodeConfig) -> Result<DependencyTree> {
    decode_with_stats(q, p_label, config, &mut DecodeStats::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    const NEG: f64 = f64::NEG_INFINITY;

    fn weights(n: usize, edges: &[(usize, usize, f64)]) -> Array2<f64> {
        let mut w = Array2::from_elem((n + 1, n + 1), NEG);
        for &(i, j, x) in edges {
            w[[i, j]] = x;
        }
        w
    }

    #[test]
    fn argmax_and_ties() {
        let mut q = Array2::zeros((3, 3));
        q[[0, 1]] = 0.7;
        q[[2, 1]] = 0.3;
        q[[0, 2]] = 0.5;
        q[[1, 2]] = 0.5;
        assert_eq!(argmax_heads(&q), vec![0, 0]);
    }

    #[test]
    fn tree_checks() {
        assert!(is_tree(&[0]));
        assert!(!is_tree(&[2, 1]));
        assert!(is_tree(&[0, 0]));
        assert!(is_tree(&[0, 1]));
        assert!(is_tree(&[2, 0]));
        assert!(!is_tree(&[1]));
        assert!(!is_tree(&[0, 3]));
        assert!(!is_tree(&[0, 3, 4, 2]));
    }

    #[test]
    fn single_root_instance() {
        let w = weights(2, &[(0, 1, 5.0), (0, 2, 1.0), (1, 2, 4.0), (2, 1, 3.0)]);
        let h = chu_liu_edmonds(&w, true).unwrap();
        assert_eq!(h, vec![0, 1]);
        assert_eq!(tree_weight(&w, &h), 9.0);
    }

    #[test]
    fn contraction_instance() {
        let w = weights(2, &[(0, 1, 2.0), (0, 2, 1.0), (1, 2, 10.0), (2, 1, 10.0)]);
        let h = chu_liu_edmonds(&w, false).unwrap();
        assert_eq!(h, vec![0, 1]);
        assert_eq!(tree_weight(&w, &h), 12.0);
    }

    #[test]
    fn forced_and_errors() {
        let w = weights(1, &[(0, 1, -3.0)]);
        assert_eq!(chu_liu_edmonds(&w, true).unwrap(), vec![0]);
        assert!(chu_liu_edmonds(&Array2::zeros((1, 1)), true).is_err());
        let w = weights(2, &[(0, 1, 1.0)]);
        assert!(matches!(chu_liu_edmonds(&w, false), Err(Error::NoFeasibleHead(2))));
    }

    #[test]
    fn labels_argmax() {
        let mut p = Array3::zeros((3, 3, 3));
        p[[0, 1, 2]] = 1.0;
        p[[1, 2, 1]] = 0.5;
        p[[1, 2, 0]] = 0.5;
        assert_eq!(assign_labels(&p, &[0, 1]), vec![2, 0]);
        let single = Array3::from_elem((3, 3, 1), 1.0);
        assert_eq!(assign_labels(&single, &[0, 1]), vec![0, 0]);
    }

    #[test]
    fn decode_skips_mst_on_trees() {
        let mut q = Array2::zeros((3, 3));
        q[[0, 1]] = 0.99;
        q[[2, 1]] = 0.01;
        q[[1, 2]] = 0.98;
        q[[0, 2]] = 0.02;
        let p = Array3::from_elem((3, 3, 1), 1.0);
        let mut stats = DecodeStats::default();
        let t = decode_with_stats(&q, &p, DecodeConfig::default(), &mut stats).unwrap();
        assert_eq!(t.heads, vec![0, 1]);
        assert_eq!(stats.mst_invocations, 0);
    }

    #[test]
    fn decode_repairs_cycle() {
        let mut q = Array2::zeros((3, 3));
        q[[2, 1]] = 0.9;
        q[[0, 1]] = 0.1;
        q[[1, 2]] = 0.8;
        q[[0, 2]] = 0.2;
        let p = Array3::from_elem((3, 3, 1), 1.0);
        let mut stats = DecodeStats::default();
        let t = decode_with_stats(&q, &p, DecodeConfig::default(), &mut stats).unwrap();
        assert_eq!(stats.mst_invocations, 1);
        assert!(is_tree(&t.heads));
        assert_eq!(t.heads, vec![2, 0]);
    }

    #[test]
    fn decode_enforces_single_root() {
        let mut q = Array2::zeros((3, 3));
        q[[0, 1]] = 0.9;
        q[[2, 1]] = 0.1;
        q[[0, 2]] = 0.6;
        q[[1, 2]] = 0.4;
        let p = Array3::from_elem((3, 3, 1), 1.0);
        let t = decode(&q, &p, DecodeConfig { single_root: true }).unwrap();
        assert_eq!(t.heads, vec![0, 1]);
        let t = decode(&q, &p, DecodeConfig { single_root: false }).unwrap();
        assert_eq!(t.heads, vec![0, 0]);
    }
}
