//! Greedy construction of uniform covering arrays CA(N; t, k, v).
//!
//! Rows are added one at a time. Each row is the best of a fixed number of
//! randomised candidates, where a candidate visits the factors in a random
//! order and gives each one the level that completes the most still
//! uncovered t-tuples consistent with the levels already chosen.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PromptError, Result};

/// Candidate rows tried per added row.
pub const CANDIDATES_PER_ROW: usize = 50;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoveringArray {
    pub k: usize,
    pub v: usize,
    pub t: usize,
    pub rows: Vec<Vec<usize>>,
}

impl CoveringArray {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Exhaustive coverage count, independent of the builder.
    pub fn coverage(&self) -> Coverage {
        verify_coverage(&self.rows, self.k, self.v, self.t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Coverage {
    pub covered: usize,
    pub total: usize,
}

impl Coverage {
    pub fn complete(&self) -> bool {
        self.covered == self.total
    }
}

fn check_params(k: usize, v: usize, t: usize) -> Result<()> {
    if t < 2 || k < t || v < 2 {
        return Err(PromptError::CoveringParams { k, v, t });
    }
    Ok(())
}

/// All `t`-subsets of `0..k` in lexicographic order.
pub fn subsets(k: usize, t: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, k: usize, t: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == t {
            out.push(cur.clone());
            return;
        }
        for i in start..k {
            cur.push(i);
            rec(i + 1, k, t, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, k, t, &mut Vec::with_capacity(t), &mut out);
    out
}

/// Counts the distinct t-tuples present in `rows` by enumerating every
/// factor subset of every row. Rows with the wrong arity or an out-of-range
/// level contribute nothing.
pub fn verify_coverage(rows: &[Vec<usize>], k: usize, v: usize, t: usize) -> Coverage {
    let subs = subsets(k, t);
    let total = subs.len() * v.pow(t as u32);
    let mut seen: HashSet<(usize, Vec<usize>)> = HashSet::new();
    for row in rows {
        if row.len() != k || row.iter().any(|&l| l >= v) {
            continue;
        }
        for (si, s) in subs.iter().enumerate() {
            seen.insert((si, s.iter().map(|&f| row[f]).collect()));
        }
    }
    Coverage {
        covered: seen.len(),
        total,
    }
}

struct Tracker {
    subs: Vec<Vec<usize>>,
    /// `covered[s][code]` with `code` the base-`v` number of the levels.
    covered: Vec<Vec<bool>>,
    remaining: usize,
    v: usize,
}

impl Tracker {
    fn new(k: usize, v: usize, t: usize) -> Self {
        let subs = subsets(k, t);
        let width = v.pow(t as u32);
        let remaining = subs.len() * width;
        Self {
            covered: vec![vec![false; width]; subs.len()],
            subs,
            remaining,
            v,
        }
    }

    fn code(&self, s: usize, row: &[usize]) -> usize {
        self.subs[s].iter().fold(0, |acc, &f| acc * self.v + row[f])
    }

    /// Uncovered tuples of subset `s` that agree with the assigned entries
    /// of `partial`; unassigned factors range over all levels.
    fn consistent_uncovered(&self, s: usize, partial: &[Option<usize>]) -> usize {
        let sub = &self.subs[s];
        let free: Vec<usize> = (0..sub.len())
            .filter(|&i| partial[sub[i]].is_none())
            .collect();
        let mut levels: Vec<usize> = sub.iter().map(|&f| partial[f].unwrap_or(0)).collect();
        let combos = self.v.pow(free.len() as u32);
        let mut n = 0;
        for mut c in 0..combos {
            for &i in &free {
                levels[i] = c % self.v;
                c /= self.v;
            }
            let code = levels.iter().fold(0, |acc, &l| acc * self.v + l);
            if !self.covered[s][code] {
                n += 1;
            }
        }
        n
    }

    fn gain(&self, row: &[usize]) -> usize {
        (0..self.subs.len())
            .filter(|&s| !self.covered[s][self.code(s, row)])
            .count()
    }

    fn mark(&mut self, row: &[usize]) {
        for s in 0..self.subs.len() {
            let c = self.code(s, row);
            if !self.covered[s][c] {
                self.covered[s][c] = true;
                self.remaining -= 1;
            }
        }
    }
}

fn candidate(tr: &Tracker, k: usize, v: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(rng);
    let mut partial: Vec<Option<usize>> = vec![None; k];
    for &f in &order {
        let touching: Vec<usize> = (0..tr.subs.len())
            .filter(|&s| tr.subs[s].contains(&f))
            .collect();
        let mut best = Vec::new();
        let mut best_score = 0;
        for level in 0..v {
            partial[f] = Some(level);
            let score: usize = touching
                .iter()
                .map(|&s| tr.consistent_uncovered(s, &partial))
                .sum();
            if score > best_score || best.is_empty() {
                if score > best_score {
                    best.clear();
                }
                best_score = score;
                best.push(level);
            } else if score == best_score {
                best.push(level);
            }
        }
        partial[f] = Some(best[rng.random_range(0..best.len())]);
    }
    partial
        .into_iter()
        .map(|l| l.expect("all assigned"))
        .collect()
}

/// Builds a strength-`t` covering array for `k` factors of `v` levels.
/// The same seed always gives the same rows.
pub fn build_covering_array(k: usize, v: usize, t: usize, seed: u64) -> Result<CoveringArray> {
    check_params(k, v, t)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tr = Tracker::new(k, v, t);
    let mut rows = Vec::new();
    while tr.remaining > 0 {
        let mut best: Vec<Vec<usize>> = Vec::new();
        let mut best_gain = 0;
        for _ in 0..CANDIDATES_PER_ROW {
            let row = candidate(&tr, k, v, &mut rng);
            let g = tr.gain(&row);
            if g > best_gain {
                best_gain = g;
                best.clear();
                best.push(row);
            } else if g == best_gain && g > 0 {
                best.push(row);
            }
        }
        let row = best.swap_remove(rng.random_range(0..best.len()));
        tr.mark(&row);
        rows.push(row);
    }
    Ok(CoveringArray { k, v, t, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_witness_covers_all_pairs() {
        let w: Vec<Vec<usize>> = ["0000", "0111", "1011", "1101", "1110"]
            .iter()
            .map(|s| s.bytes().map(|b| (b - b'0') as usize).collect())
            .collect();
        let c = verify_coverage(&w, 4, 2, 2);
        assert_eq!(c.total, 24);
        assert!(c.complete());
        assert!(!verify_coverage(&w[..4], 4, 2, 2).complete());
    }

    #[test]
    fn small_binary_array() {
        let a = build_covering_array(4, 2, 2, 0).unwrap();
        assert!(a.coverage().complete());
        assert!(a.len() <= 7, "{}", a.len());
    }

    #[test]
    fn strength_three() {
        let a = build_covering_array(5, 3, 3, 9).unwrap();
        let c = a.coverage();
        assert_eq!(c.total, 10 * 27);
        assert!(c.complete());
        assert!(a.len() >= 27);
    }

    #[test]
    fn invalid_parameters() {
        assert!(build_covering_array(1, 3, 2, 0).is_err());
        assert!(build_covering_array(4, 1, 2, 0).is_err());
        assert!(build_covering_array(4, 3, 1, 0).is_err());
        assert!(build_covering_array(2, 3, 3, 0).is_err());
    }

    #[test]
    fn malformed_rows_cover_nothing() {
        let c = verify_coverage(&[vec![0, 1, 2], vec![0, 5, 0, 0]], 4, 3, 2);
        assert_eq!(c.covered, 0);
    }
}
