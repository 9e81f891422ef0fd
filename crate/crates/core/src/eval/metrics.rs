//! Retrieval metrics over cosine similarities.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use super::{EvalError, Result};

/// Gallery indices by descending similarity; ties keep gallery order.
pub fn ranking(sims: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..sims.len()).collect();
    idx.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap_or(Ordering::Equal));
    idx
}

fn check_identities(query: &[u32], gallery: &[u32]) -> Result<()> {
    if query.is_empty() || gallery.is_empty() {
        return Err(EvalError::Protocol("query and gallery must be non-empty".into()));
    }
    let g: BTreeSet<u32> = gallery.iter().copied().collect();
    let missing: BTreeSet<u32> = query.iter().filter(|l| !g.contains(l)).copied().collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(EvalError::MissingIdentities(missing.into_iter().collect()))
    }
}

/// Fraction of queries with a same-identity gallery entry among the top `k`.
/// `sims[q][g]` is the similarity of query `q` and gallery entry `g`.
pub fn rank_k(sims: &[Vec<f64>], query: &[u32], gallery: &[u32], k: usize) -> Result<f64> {
    check_identities(query, gallery)?;
    let hits = sims
        .iter()
        .zip(query)
        .filter(|(row, &label)| ranking(row).iter().take(k).any(|&g| gallery[g] == label))
        .count();
    Ok(hits as f64 / query.len() as f64)
}

/// Mean over queries of average precision.
pub fn mean_average_precision(sims: &[Vec<f64>], query: &[u32], gallery: &[u32]) -> Result<f64> {
    check_identities(query, gallery)?;
    let total: f64 = sims
        .iter()
        .zip(query)
        .map(|(row, &label)| {
            let mut found = 0usize;
            let mut sum = 0.0;
            for (r, &g) in ranking(row).iter().enumerate() {
                if gallery[g] == label {
                    found += 1;
                    sum += found as f64 / (r + 1) as f64;
                }
            }
            sum / found as f64
        })
        .sum();
    Ok(total / query.len() as f64)
}

/// Genuine and impostor similarity lists.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchScores {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl MatchScores {
    pub fn from_sims(sims: &[Vec<f64>], query: &[u32], gallery: &[u32]) -> Self {
        let mut s = Self::default();
        for (row, &ql) in sims.iter().zip(query) {
            for (&v, &gl) in row.iter().zip(gallery) {
                if ql == gl {
                    s.genuine.push(v);
                } else {
                    s.impostor.push(v);
                }
            }
        }
        s
    }
}

/// Largest impostor count allowed above the threshold: max `a` with `a/n ≤ far`.
fn allowed_false_accepts(n: usize, far: f64) -> usize {
    let mut a = (far * n as f64).floor().max(0.0) as usize;
    while a < n && (a + 1) as f64 / n as f64 <= far {
        a += 1;
    }
    while a > 0 && a as f64 / n as f64 > far {
        a -= 1;
    }
    a.min(n)
}

/// TAR at the smallest threshold whose impostor acceptance rate is at most
/// `far`. Scores are accepted when `≥ threshold`.
pub fn tar_at_far(scores: &MatchScores, far: f64) -> Result<f64> {
    if scores.genuine.is_empty() || scores.impostor.is_empty() {
        return Err(EvalError::Protocol("TAR needs genuine and impostor scores".into()));
    }
    if !(far > 0.0 && far <= 1.0) {
        return Err(EvalError::Param(format!("FAR target {far} outside (0, 1]")));
    }
    let n = scores.impostor.len();
    let a = allowed_false_accepts(n, far);
    if a >= n {
        return Ok(1.0);
    }
    let mut imp = scores.impostor.clone();
    imp.sort_by(|x, y| y.total_cmp(x));
    // Any threshold above the (a+1)-th largest impostor admits at most `a`.
    let bar = imp[a];
    let accepted = scores.genuine.iter().filter(|&&g| g > bar).count();
    Ok(accepted as f64 / scores.genuine.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    /// O(n²) rank-k: a gallery entry outranks `g` if it is more similar, or
    /// equally similar and earlier.
    fn brute_rank_k(sims: &[Vec<f64>], q: &[u32], g: &[u32], k: usize) -> f64 {
        let mut hits = 0;
        for (row, &ql) in sims.iter().zip(q) {
            let hit = (0..g.len()).any(|j| {
                let ahead = (0..g.len()).filter(|&i| row[i] > row[j] || (row[i] == row[j] && i < j)).count();
                g[j] == ql && ahead < k
            });
            hits += hit as usize;
        }
        hits as f64 / q.len() as f64
    }

    fn brute_map(sims: &[Vec<f64>], q: &[u32], g: &[u32]) -> f64 {
        let mut total = 0.0;
        for (row, &ql) in sims.iter().zip(q) {
            let pos = |j: usize| 1 + (0..g.len()).filter(|&i| row[i] > row[j] || (row[i] == row[j] && i < j)).count();
            let rel: Vec<usize> = (0..g.len()).filter(|&j| g[j] == ql).collect();
            let mut ap = 0.0;
            for &j in &rel {
                let pj = pos(j);
                let above = rel.iter().filter(|&&i| pos(i) <= pj).count();
                ap += above as f64 / pj as f64;
            }
            total += ap / rel.len() as f64;
        }
        total / q.len() as f64
    }

    fn brute_tar(s: &MatchScores, far: f64) -> f64 {
        let mut cands: Vec<f64> = vec![f64::NEG_INFINITY];
        for &v in s.genuine.iter().chain(&s.impostor) {
            cands.push(v);
            cands.push(v.next_up());
        }
        cands.sort_by(f64::total_cmp);
        let n = s.impostor.len() as f64;
        let t = cands
            .into_iter()
            .find(|&t| s.impostor.iter().filter(|&&x| x >= t).count() as f64 / n <= far)
            .expect("+inf side always satisfies");
        s.genuine.iter().filter(|&&x| x >= t).count() as f64 / s.genuine.len() as f64
    }

    fn instance(seed: u64) -> (Vec<Vec<f64>>, Vec<u32>, Vec<u32>) {
        let mut r = rng::stream(&[0x3e7, seed]);
        let ids = r.gen_range(1..6u32);
        let ng = r.gen_range(1..=50usize);
        let mut g: Vec<u32> = (0..ng).map(|_| r.gen_range(0..ids)).collect();
        g[0] = 0;
        let present: Vec<u32> = g.clone();
        let nq = r.gen_range(1..=50usize);
        let q: Vec<u32> = (0..nq).map(|_| present[r.gen_range(0..present.len())]).collect();
        // Coarse values produce many ties.
        let sims = (0..nq).map(|_| (0..ng).map(|_| r.gen_range(-4..=4) as f64 / 4.0).collect()).collect();
        (sims, q, g)
    }

    #[test]
    fn agrees_with_brute_force() {
        let mut r = rng::stream(&[77]);
        for seed in 0..200 {
            let (s, q, g) = instance(seed);
            let k = r.gen_range(1..=g.len());
            assert!((rank_k(&s, &q, &g, k).unwrap() - brute_rank_k(&s, &q, &g, k)).abs() <= 1e-12);
            assert!((mean_average_precision(&s, &q, &g).unwrap() - brute_map(&s, &q, &g)).abs() <= 1e-12);
            let ms = MatchScores::from_sims(&s, &q, &g);
            if !ms.genuine.is_empty() && !ms.impostor.is_empty() {
                let far = r.gen_range(0.001..=1.0);
                assert!((tar_at_far(&ms, far).unwrap() - brute_tar(&ms, far)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn examples() {
        let s = vec![vec![0.9, 0.1, 0.2]];
        assert_eq!(rank_k(&s, &[1], &[1, 2, 3], 1).unwrap(), 1.0);
        let s = vec![vec![0.1, 0.9, 0.2]];
        assert_eq!(rank_k(&s, &[1], &[1, 2, 3], 1).unwrap(), 0.0);
        assert_eq!(rank_k(&s, &[1], &[1, 2, 3], 3).unwrap(), 1.0);

        assert_eq!(mean_average_precision(&[vec![0.9, 0.1]], &[1], &[1, 2]).unwrap(), 1.0);
        let ap = mean_average_precision(&[vec![0.9, 0.8, 0.7]], &[1], &[1, 2, 1]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);

        let ms = MatchScores { genuine: vec![0.9], impostor: vec![0.1, 0.2] };
        assert_eq!(tar_at_far(&ms, 0.01).unwrap(), 1.0);
        assert_eq!(tar_at_far(&ms, 1.0).unwrap(), 1.0);
        let rev = MatchScores { genuine: vec![0.0, 0.1], impostor: vec![0.5, 0.6, 0.7] };
        assert_eq!(tar_at_far(&rev, 0.01).unwrap(), 0.0);
        assert!(tar_at_far(&MatchScores::default(), 0.1).is_err());
    }

    #[test]
    fn missing_identity_is_listed() {
        match rank_k(&[vec![0.1], vec![0.2]], &[4, 7], &[4], 1) {
            Err(EvalError::MissingIdentities(v)) => assert_eq!(v, vec![7]),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn rank_monotone_and_exhaustive(seed in 0u64..10_000) {
            let (s, q, g) = instance(seed);
            let mut prev = 0.0;
            for k in 1..=g.len() {
                let v = rank_k(&s, &q, &g, k).unwrap();
                prop_assert!(v >= prev);
                prev = v;
            }
            prop_assert_eq!(prev, 1.0);
        }

        #[test]
        fn invariant_under_monotone_transform(seed in 0u64..10_000, a in 0.1f64..5.0, b in -2.0f64..2.0) {
            let (s, q, g) = instance(seed);
            let t: Vec<Vec<f64>> = s.iter().map(|r| r.iter().map(|&x| (a * x + b).exp()).collect()).collect();
            prop_assert_eq!(rank_k(&s, &q, &g, 1).unwrap(), rank_k(&t, &q, &g, 1).unwrap());
            prop_assert_eq!(mean_average_precision(&s, &q, &g).unwrap(), mean_average_precision(&t, &q, &g).unwrap());
        }

        #[test]
        fn tar_monotone_in_far(seed in 0u64..10_000) {
            let (s, q, g) = instance(seed);
            let ms = MatchScores::from_sims(&s, &q, &g);
            prop_assume!(!ms.genuine.is_empty() && !ms.impostor.is_empty());
            let mut prev = 0.0;
            for i in 1..=20 {
                let v = tar_at_far(&ms, i as f64 / 20.0).unwrap();
                prop_assert!(v >= prev);
                prev = v;
            }
        }
    }
}
