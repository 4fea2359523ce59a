//! Temporal signatures, dynamic time warping and k-medoids clustering with
//! reverse weighting of cluster shares.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::raster::{Grid, GridKind};
use crate::{Error, Result};

/// Statistic summarising one year-to-year interval of a patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SignatureStat {
    /// Mean signed change in imperviousness percent points.
    #[default]
    MeanChange,
    /// Percent of valid pixels whose imperviousness increased.
    PercentIncreased,
}

/// Per-interval imperviousness change of one patch across a year series.
pub fn signature(series: &[Grid], stat: SignatureStat) -> Result<Vec<f64>> {
    if series.len() < 2 {
        return Err(Error::Insufficient(format!(
            "signature needs at least 2 timestamps, got {}",
            series.len()
        )));
    }
    for g in series {
        g.expect_kind(GridKind::Continuous)?;
        series[0].expect_same_shape(g)?;
    }
    series
        .windows(2)
        .map(|w| {
            let (a, b) = (&w[0], &w[1]);
            let (mut acc, mut n) = (0.0, 0usize);
            for i in 0..a.len() {
                if a.is_valid(i) && b.is_valid(i) {
                    let d = b.values()[i] - a.values()[i];
                    acc += match stat {
                        SignatureStat::MeanChange => d,
                        SignatureStat::PercentIncreased => f64::from(u8::from(d > 0.0)),
                    };
                    n += 1;
                }
            }
            match (n, stat) {
                (0, _) => Ok(0.0),
                (_, SignatureStat::MeanChange) => Ok(acc / n as f64),
                (_, SignatureStat::PercentIncreased) => Ok(100.0 * acc / n as f64),
            }
        })
        .collect()
}

/// Classic DTW with absolute-difference local cost.
pub fn dtw(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Insufficient("dtw of an empty sequence".into()));
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for &x in a {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let best = prev[j - 1].min(prev[j]).min(cur[j - 1]);
            cur[j] = (x - b[j - 1]).abs() + best;
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// Symmetric pairwise DTW distances, row-major.
pub fn distance_matrix(signatures: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = signatures.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = dtw(&signatures[i], &signatures[j])?;
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    Ok(d)
}

/// Result of k-medoids clustering. Clusters are relabelled so that label 0
/// (cluster "A") has the largest mean |signature| and label k-1 the
/// smallest.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    /// Signature index of each cluster's medoid.
    pub medoids: Vec<usize>,
    pub medoid_signatures: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// DTW distance of each signature to its medoid.
    pub distances: Vec<f64>,
    pub ratios: Vec<f64>,
    pub sampling_weights: Vec<f64>,
    /// Total cost after initialisation and after every accepted swap.
    pub cost_history: Vec<f64>,
}

impl ClusterModel {
    /// Letter label for cluster `c` ("A", "B", ...).
    pub fn label(c: usize) -> char {
        (b'A' + (c % 26) as u8) as char
    }

    /// Cluster with the smallest mean |signature|, eligible for a
    /// persistence shortcut.
    pub fn persistence_cluster(&self) -> usize {
        self.k - 1
    }

    /// Per-patch sampling weights: each cluster's weight split evenly over
    /// its members. Sums to 1.
    pub fn patch_weights(&self) -> Vec<f64> {
        let mut sizes = vec![0usize; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        self.assignments.iter().map(|&a| self.sampling_weights[a] / sizes[a] as f64).collect()
    }
}

fn assign(d: &[f64], n: usize, medoids: &[usize]) -> (Vec<usize>, Vec<f64>, f64) {
    let mut labels = vec![0; n];
    let mut dist = vec![0.0; n];
    let mut total = 0.0;
    for p in 0..n {
        let mut best = (0, f64::INFINITY);
        for (c, &m) in medoids.iter().enumerate() {
            let v = d[p * n + m];
            if v < best.1 {
                best = (c, v);
            }
        }
        labels[p] = best.0;
        dist[p] = best.1;
        total += best.1;
    }
    (labels, dist, total)
}

/// PAM-style k-medoids under DTW distance.
///
/// Initial medoids are drawn from a ChaCha stream seeded with `seed`; the
/// swap phase repeatedly applies the single best cost-reducing
/// (medoid, non-medoid) exchange until none remains.
pub fn cluster(signatures: &[Vec<f64>], k: usize, seed: u64) -> Result<ClusterModel> {
    let n = signatures.len();
    if k == 0 || n < k {
        return Err(Error::Insufficient(format!("{n} signatures cannot form {k} clusters")));
    }
    let d = distance_matrix(signatures)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut medoids: Vec<usize> = sample(&mut rng, n, k).into_vec();
    medoids.sort_unstable();

    let (_, _, mut cost) = assign(&d, n, &medoids);
    let mut history = vec![cost];
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for slot in 0..k {
            for cand in 0..n {
                if medoids.contains(&cand) {
                    continue;
                }
                let mut trial = medoids.clone();
                trial[slot] = cand;
                let (_, _, c) = assign(&d, n, &trial);
                if c < best.map_or(cost, |b| b.2) - 1e-12 {
                    best = Some((slot, cand, c));
                }
            }
        }
        match best {
            Some((slot, cand, c)) => {
                medoids[slot] = cand;
                cost = c;
                history.push(c);
            }
            None => break,
        }
    }

    // Relabel by decreasing medoid activity, ties by medoid index.
    let activity = |m: usize| signatures[m].iter().map(|v| v.abs()).sum::<f64>() / signatures[m].len() as f64;
    medoids.sort_by(|&a, &b| activity(b).total_cmp(&activity(a)).then(a.cmp(&b)));
    let (assignments, distances, _) = assign(&d, n, &medoids);
    let mut counts = vec![0usize; k];
    for &a in &assignments {
        counts[a] += 1;
    }
    let ratios: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    // A cluster can only be empty when duplicate signatures tie with its medoid.
    let sampling_weights = if ratios.iter().all(|&r| r > 0.0) {
        sampling_weights(&ratios)?
    } else {
        let pos: Vec<f64> = ratios.iter().map(|&r| if r > 0.0 { 1.0 / r } else { 0.0 }).collect();
        let s: f64 = pos.iter().sum();
        pos.iter().map(|w| w / s).collect()
    };
    Ok(ClusterModel {
        k,
        medoid_signatures: medoids.iter().map(|&m| signatures[m].clone()).collect(),
        medoids,
        assignments,
        distances,
        ratios,
        sampling_weights,
        cost_history: history,
    })
}

/// Reverse weighting of cluster shares: `w_i ∝ 1 / ratio_i`, normalised.
pub fn sampling_weights(ratios: &[f64]) -> Result<Vec<f64>> {
    if ratios.is_empty() {
        return Err(Error::Insufficient("no cluster ratios".into()));
    }
    if let Some(r) = ratios.iter().find(|&&r| !(r > 0.0 && r.is_finite())) {
        return Err(Error::param(format!("cluster ratio {r} must be positive")));
    }
    let inv: Vec<f64> = ratios.iter().map(|r| 1.0 / r).collect();
    let s: f64 = inv.iter().sum();
    Ok(inv.into_iter().map(|w| w / s).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signature_cases() {
        let g = |v: f64| Grid::continuous(1, 1, vec![v]).unwrap();
        assert_eq!(signature(&[g(10.0), g(30.0), g(30.0)], SignatureStat::MeanChange).unwrap(), vec![20.0, 0.0]);
        assert_eq!(signature(&[g(5.0), g(5.0)], SignatureStat::MeanChange).unwrap(), vec![0.0]);
        assert_eq!(signature(&[g(5.0), g(6.0)], SignatureStat::PercentIncreased).unwrap(), vec![100.0]);
        assert!(signature(&[g(1.0)], SignatureStat::MeanChange).is_err());
    }

    #[test]
    fn dtw_basics() {
        assert_eq!(dtw(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(dtw(&[0.0], &[3.0]).unwrap(), 3.0);
        // warping absorbs the repeated sample
        assert_eq!(dtw(&[0.0, 1.0, 1.0, 2.0], &[0.0, 1.0, 2.0]).unwrap(), 0.0);
        assert!(dtw(&[], &[1.0]).is_err());
    }

    #[test]
    fn k_equals_n_is_zero_cost() {
        let sigs: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let m = cluster(&sigs, 4, 1).unwrap();
        assert_eq!(*m.cost_history.last().unwrap(), 0.0);
        let mut a = m.assignments.clone();
        a.sort_unstable();
        assert_eq!(a, vec![0, 1, 2, 3]);
    }

    #[test]
    fn too_few_signatures() {
        assert!(cluster(&[vec![1.0]], 2, 0).is_err());
    }

    #[test]
    fn weights() {
        assert_eq!(sampling_weights(&[0.5, 0.5]).unwrap(), vec![0.5, 0.5]);
        let w = sampling_weights(&[0.9, 0.1]).unwrap();
        assert!((w[0] - 0.1).abs() < 1e-12 && (w[1] - 0.9).abs() < 1e-12);
        assert!(sampling_weights(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn dominant_cluster_gets_smallest_weight() {
        // composition in the style of the national clusters: E holds over 87%
        let ratios = [0.01, 0.015, 0.02, 0.085, 0.87];
        let w = sampling_weights(&ratios).unwrap();
        let min = w.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(w[4], min);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
