//! Naive reference implementations used as test oracles. Shared with the
//! CLI crate's acceptance suite through a `#[path]` include.
#![allow(dead_code)]

use std::collections::{BTreeMap, VecDeque};

/// Exhaustive one-to-one matching: the maximum number of admissible pairs,
/// and the best total score among matchings of that size.
pub fn brute_matching(
    n_pred: usize,
    n_gt: usize,
    score: &dyn Fn(usize, usize) -> f64,
    admissible: &dyn Fn(usize, usize) -> bool,
) -> (usize, f64) {
    fn go(
        p: usize,
        n_pred: usize,
        n_gt: usize,
        used: &mut Vec<bool>,
        score: &dyn Fn(usize, usize) -> f64,
        admissible: &dyn Fn(usize, usize) -> bool,
    ) -> (usize, f64) {
        if p == n_pred {
            return (0, 0.0);
        }
        // leave pred p unmatched
        let mut best = go(p + 1, n_pred, n_gt, used, score, admissible);
        for g in 0..n_gt {
            if !used[g] && admissible(p, g) {
                used[g] = true;
                let (c, s) = go(p + 1, n_pred, n_gt, used, score, admissible);
                used[g] = false;
                let cand = (c + 1, s + score(p, g));
                if cand.0 > best.0 || (cand.0 == best.0 && cand.1 > best.1 + 1e-12) {
                    best = cand;
                }
            }
        }
        best
    }
    go(0, n_pred, n_gt, &mut vec![false; n_gt], score, admissible)
}

pub fn pixel_iou(a: &[bool], b: &[bool]) -> f64 {
    let mut inter = 0u32;
    let mut union = 0u32;
    for (x, y) in a.iter().zip(b) {
        if *x && *y {
            inter += 1;
        }
        if *x || *y {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        f64::from(inter) / f64::from(union)
    }
}

/// Connected components by breadth-first search; each node is labeled with
/// the smallest node index in its component.
pub fn min_component_labels(n: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut label = vec![usize::MAX; n];
    for start in 0..n {
        if label[start] != usize::MAX {
            continue;
        }
        let mut q = VecDeque::from([start]);
        label[start] = start;
        while let Some(x) = q.pop_front() {
            for &y in &adj[x] {
                if label[y] == usize::MAX {
                    label[y] = start;
                    q.push_back(y);
                }
            }
        }
    }
    label
}

/// Cosine of raw token-count vectors (lowercase, alphanumeric runs). Equals
/// the hashed stub whenever no two distinct tokens share a bucket.
pub fn token_cosine(a: &str, b: &str) -> f64 {
    let counts = |s: &str| {
        let mut m = BTreeMap::new();
        for t in s
            .to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            *m.entry(t.to_string()).or_insert(0f64) += 1.0;
        }
        m
    };
    let (x, y) = (counts(a), counts(b));
    let dot: f64 = x
        .iter()
        .map(|(k, v)| v * y.get(k).copied().unwrap_or(0.0))
        .sum();
    let nx: f64 = x.values().map(|v| v * v).sum::<f64>().sqrt();
    let ny: f64 = y.values().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        0.0
    } else {
        dot / (nx * ny)
    }
}
