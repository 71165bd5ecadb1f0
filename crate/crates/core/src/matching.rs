//! Descriptor assignment by entropic optimal transport with a dustbin.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Descriptor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchParams {
    pub dustbin_score: f64,
    pub temperature: f64,
    pub match_thresh: f64,
    pub eps: f64,
    pub iters: usize,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            dustbin_score: 0.8,
            temperature: 0.03,
            match_thresh: 0.2,
            eps: 1e-6,
            iters: 100,
        }
    }
}

/// Row-major `rows x cols` similarity scores plus the dustbin score.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub scores: Vec<f64>,
    pub dustbin_score: f64,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, scores: Vec<f64>, dustbin_score: f64) -> Result<Self> {
        if scores.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!("{} scores for a {rows}x{cols} matrix", scores.len())));
        }
        if !dustbin_score.is_finite() || scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("scores must be finite".into()));
        }
        Ok(Self {
            rows,
            cols,
            scores,
            dustbin_score,
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.scores[i * self.cols + j]
    }
}

/// `(rows + 1) x (cols + 1)` plan; the last row and column are the dustbins.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub max_violation: f64,
}

impl TransportPlan {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * (self.cols + 1) + j]
    }

    pub fn total_mass(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        (0..=self.cols).map(|j| self.get(i, j)).sum()
    }

    pub fn col_sum(&self, j: usize) -> f64 {
        (0..=self.rows).map(|i| self.get(i, j)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub i: usize,
    pub j: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub pairs: Vec<Match>,
    pub unmatched_left: Vec<usize>,
    pub unmatched_right: Vec<usize>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn from_pairs(pairs: Vec<Match>, rows: usize, cols: usize) -> Self {
        let mut left = vec![false; rows];
        let mut right = vec![false; cols];
        for m in &pairs {
            left[m.i] = true;
            right[m.j] = true;
        }
        Self {
            pairs,
            unmatched_left: (0..rows).filter(|&i| !left[i]).collect(),
            unmatched_right: (0..cols).filter(|&j| !right[j]).collect(),
        }
    }
}

pub fn similarity_scores(dl: &[Descriptor], dr: &[Descriptor], temperature: f64) -> Result<CostMatrix> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    let mut scores = Vec::with_capacity(dl.len() * dr.len());
    for a in dl {
        for b in dr {
            let dot: f64 = a.0.iter().zip(b.0.iter()).map(|(x, y)| *x as f64 * *y as f64).sum();
            scores.push(dot / temperature);
        }
    }
    Ok(CostMatrix {
        rows: dl.len(),
        cols: dr.len(),
        scores,
        dustbin_score: 0.0,
    })
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn on the dustbin-augmented scores. Real rows and
/// columns carry unit mass; the dustbin row carries `cols` and the dustbin
/// column `rows`.
pub fn sinkhorn_assign(cost: &CostMatrix, iters: usize, eps: f64) -> Result<TransportPlan> {
    if iters == 0 {
        return Err(Error::InvalidArgument("iters must be at least 1".into()));
    }
    let (m, n) = (cost.rows, cost.cols);
    let (r, c) = (m + 1, n + 1);
    if m == 0 || n == 0 {
        // Everything goes to the dustbin.
        let mut data = vec![0.0; r * c];
        for i in 0..m {
            data[i * c + n] = 1.0;
        }
        for j in 0..n {
            data[m * c + j] = 1.0;
        }
        return Ok(TransportPlan {
            rows: m,
            cols: n,
            data,
            converged: true,
            iterations: 0,
            max_violation: 0.0,
        });
    }
    let mut z = vec![cost.dustbin_score; r * c];
    for i in 0..m {
        z[i * c..i * c + n].copy_from_slice(&cost.scores[i * n..(i + 1) * n]);
    }
    let log_mu: Vec<f64> = (0..r).map(|i| if i < m { 0.0 } else { (n as f64).ln() }).collect();
    let log_nu: Vec<f64> = (0..c).map(|j| if j < n { 0.0 } else { (m as f64).ln() }).collect();
    let mut u = vec![0.0; r];
    let mut v = vec![0.0; c];
    let mut converged = false;
    let mut violation = f64::INFINITY;
    let mut done = 0;
    for it in 0..iters {
        for i in 0..r {
            u[i] = log_mu[i] - log_sum_exp((0..c).map(|j| z[i * c + j] + v[j]));
        }
        for j in 0..c {
            v[j] = log_nu[j] - log_sum_exp((0..r).map(|i| z[i * c + j] + u[i]));
        }
        // Columns are exact after the v update; rows carry the residual.
        violation = (0..r)
            .map(|i| {
                let s: f64 = (0..c).map(|j| (z[i * c + j] + u[i] + v[j]).exp()).sum();
                (s - log_mu[i].exp()).abs()
            })
            .fold(0.0, f64::max);
        done = it + 1;
        if violation < eps {
            converged = true;
            break;
        }
    }
    let data = (0..r * c).map(|k| (z[k] + u[k / c] + v[k % c]).exp()).collect();
    Ok(TransportPlan {
        rows: m,
        cols: n,
        data,
        converged,
        iterations: done,
        max_violation: violation,
    })
}

/// Mutual argmax over the real block, thresholded.
pub fn extract_matches(plan: &TransportPlan, match_thresh: f64) -> MatchSet {
    let (m, n) = (plan.rows, plan.cols);
    let argmax = |it: &mut dyn Iterator<Item = (usize, f64)>| {
        it.fold((usize::MAX, f64::NEG_INFINITY), |best, (k, v)| if v > best.1 { (k, v) } else { best })
    };
    let row_best: Vec<usize> = (0..m).map(|i| argmax(&mut (0..n).map(|j| (j, plan.get(i, j)))).0).collect();
    let col_best: Vec<usize> = (0..n).map(|j| argmax(&mut (0..m).map(|i| (i, plan.get(i, j)))).0).collect();
    let pairs = (0..m)
        .filter_map(|i| {
            let j = row_best[i];
            (j != usize::MAX && col_best[j] == i && plan.get(i, j) >= match_thresh).then(|| Match {
                i,
                j,
                confidence: plan.get(i, j).min(1.0),
            })
        })
        .collect();
    MatchSet::from_pairs(pairs, m, n)
}

/// Scores, Sinkhorn and extraction with one parameter set.
pub fn match_descriptors(dl: &[Descriptor], dr: &[Descriptor], params: &MatchParams) -> Result<(MatchSet, TransportPlan)> {
    let mut cost = similarity_scores(dl, dr, params.temperature)?;
    cost.dustbin_score = params.dustbin_score / params.temperature;
    let plan = sinkhorn_assign(&cost, params.iters, params.eps)?;
    Ok((extract_matches(&plan, params.match_thresh), plan))
}

/// Mutual nearest neighbours that also pass the distance-ratio test.
pub fn ratio_test_matches(dl: &[Descriptor], dr: &[Descriptor], ratio: f64) -> MatchSet {
    let dist = |a: &Descriptor, b: &Descriptor| (2.0 - 2.0 * a.dot(b) as f64).max(0.0).sqrt();
    let nearest = |q: &Descriptor, set: &[Descriptor]| {
        let (mut b1, mut d1, mut d2) = (usize::MAX, f64::INFINITY, f64::INFINITY);
        for (k, d) in set.iter().enumerate() {
            let dd = dist(q, d);
            if dd < d1 {
                d2 = d1;
                d1 = dd;
                b1 = k;
            } else if dd < d2 {
                d2 = dd;
            }
        }
        (b1, d1, d2)
    };
    let pairs = dl
        .iter()
        .enumerate()
        .filter_map(|(i, a)| {
            let (j, d1, d2) = nearest(a, dr);
            if j == usize::MAX || !(d1 < ratio * d2) {
                return None;
            }
            (nearest(&dr[j], dl).0 == i).then(|| Match {
                i,
                j,
                confidence: (1.0 - d1 * d1 / 2.0).clamp(0.0, 1.0),
            })
        })
        .collect();
    MatchSet::from_pairs(pairs, dl.len(), dr.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::DESCRIPTOR_LEN;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_descriptors(n: usize, seed: u64) -> Vec<Descriptor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut d = [0.0f32; DESCRIPTOR_LEN];
                d.iter_mut().for_each(|v| *v = rng.random::<f32>().powi(4));
                let norm = d.iter().map(|v| v * v).sum::<f32>().sqrt();
                d.iter_mut().for_each(|v| *v /= norm);
                Descriptor(d)
            })
            .collect()
    }

    fn random_cost(m: usize, n: usize, seed: u64) -> CostMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores = (0..m * n).map(|_| rng.random_range(-2.0..2.0)).collect();
        CostMatrix::new(m, n, scores, 0.5).unwrap()
    }

    // Plain-domain alternating scaling on exp(Z).
    fn reference_sinkhorn(cost: &CostMatrix, iters: usize) -> Vec<Vec<f64>> {
        let (m, n) = (cost.rows, cost.cols);
        let mut k = vec![vec![cost.dustbin_score.exp(); n + 1]; m + 1];
        for i in 0..m {
            for j in 0..n {
                k[i][j] = cost.get(i, j).exp();
            }
        }
        let mu: Vec<f64> = (0..=m).map(|i| if i < m { 1.0 } else { n as f64 }).collect();
        let nu: Vec<f64> = (0..=n).map(|j| if j < n { 1.0 } else { m as f64 }).collect();
        let mut a = vec![1.0; m + 1];
        let mut b = vec![1.0; n + 1];
        for _ in 0..iters {
            for i in 0..=m {
                let mut s = 0.0;
                for j in 0..=n {
                    s += k[i][j] * b[j];
                }
                a[i] = mu[i] / s;
            }
            for j in 0..=n {
                let mut s = 0.0;
                for i in 0..=m {
                    s += k[i][j] * a[i];
                }
                b[j] = nu[j] / s;
            }
        }
        (0..=m).map(|i| (0..=n).map(|j| a[i] * k[i][j] * b[j]).collect()).collect()
    }

    fn plan_from(rows: &[Vec<f64>]) -> TransportPlan {
        TransportPlan {
            rows: rows.len() - 1,
            cols: rows[0].len() - 1,
            data: rows.concat(),
            converged: true,
            iterations: 0,
            max_violation: 0.0,
        }
    }

    #[test]
    fn self_and_orthogonal_scores() {
        let mut e0 = [0.0f32; DESCRIPTOR_LEN];
        e0[0] = 1.0;
        let mut e1 = [0.0f32; DESCRIPTOR_LEN];
        e1[5] = 1.0;
        let c = similarity_scores(&[Descriptor(e0)], &[Descriptor(e0), Descriptor(e1)], 1.0).unwrap();
        assert_eq!(c.get(0, 0), 1.0);
        assert_eq!(c.get(0, 1), 0.0);
        assert!(similarity_scores(&[], &[], 0.0).is_err());
    }

    #[test]
    fn scores_match_naive_loop() {
        let (dl, dr) = (random_descriptors(5, 1), random_descriptors(7, 2));
        let c = similarity_scores(&dl, &dr, 0.1).unwrap();
        for i in 0..5 {
            for j in 0..7 {
                let mut s = 0.0f64;
                for k in 0..DESCRIPTOR_LEN {
                    s += dl[i].0[k] as f64 * dr[j].0[k] as f64;
                }
                assert!((c.get(i, j) - s / 0.1).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn forced_single_assignment() {
        let c = CostMatrix::new(1, 1, vec![10.0], 0.0).unwrap();
        let p = sinkhorn_assign(&c, 100, 1e-9).unwrap();
        assert!(p.get(0, 0) > 0.99);
    }

    #[test]
    fn symmetric_scores_give_symmetric_plan() {
        let c = CostMatrix::new(2, 2, vec![1.0; 4], 0.0).unwrap();
        let p = sinkhorn_assign(&c, 100, 1e-9).unwrap();
        for (a, b) in [((0, 0), (1, 1)), ((0, 1), (1, 0)), ((0, 0), (0, 1))] {
            assert!((p.get(a.0, a.1) - p.get(b.0, b.1)).abs() < 1e-12);
        }
    }

    #[test]
    fn random_plan_matches_reference_and_marginals() {
        let c = random_cost(4, 6, 3);
        let p = sinkhorn_assign(&c, 200, 1e-12).unwrap();
        for i in 0..4 {
            assert!((p.row_sum(i) - 1.0).abs() < 1e-6);
        }
        for j in 0..6 {
            assert!((p.col_sum(j) - 1.0).abs() < 1e-6);
        }
        assert!((p.row_sum(4) - 6.0).abs() < 1e-6);
        assert!((p.col_sum(6) - 4.0).abs() < 1e-6);
        let reference = reference_sinkhorn(&c, 5000);
        for i in 0..5 {
            for j in 0..7 {
                assert!((p.get(i, j) - reference[i][j]).abs() < 1e-6, "({i},{j})");
            }
        }
    }

    #[test]
    fn non_convergence_is_flagged() {
        let c = random_cost(8, 9, 4);
        let p = sinkhorn_assign(&c, 1, 1e-15).unwrap();
        assert!(!p.converged);
        assert_eq!(p.iterations, 1);
        assert!(sinkhorn_assign(&c, 0, 1e-6).is_err());
    }

    #[test]
    fn empty_side_goes_to_dustbin() {
        let c = CostMatrix::new(3, 0, vec![], 0.0).unwrap();
        let p = sinkhorn_assign(&c, 10, 1e-6).unwrap();
        assert_eq!(p.total_mass(), 3.0);
        assert!(extract_matches(&p, 0.2).is_empty());
    }

    #[test]
    fn identity_dominant_plan() {
        let mut rows = vec![vec![0.05; 4]; 4];
        for (i, r) in rows.iter_mut().enumerate().take(3) {
            r[i] = 0.9;
        }
        let ms = extract_matches(&plan_from(&rows), 0.2);
        assert_eq!(ms.pairs.iter().map(|m| (m.i, m.j)).collect::<Vec<_>>(), vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn weak_row_is_unmatched() {
        let rows = vec![vec![0.9, 0.0, 0.1], vec![0.1, 0.15, 0.75], vec![0.0, 0.85, 0.0]];
        let ms = extract_matches(&plan_from(&rows), 0.2);
        assert_eq!(ms.unmatched_left, vec![1]);
        assert_eq!(ms.len(), 1);
        assert_eq!(ms.unmatched_right, vec![1]);
    }

    fn brute_mutual(plan: &TransportPlan, thresh: f64) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..plan.rows {
            for j in 0..plan.cols {
                let v = plan.get(i, j);
                let row_max = (0..plan.cols).all(|k| plan.get(i, k) <= v);
                let col_max = (0..plan.rows).all(|k| plan.get(k, j) <= v);
                if row_max && col_max && v >= thresh {
                    out.push((i, j));
                }
            }
        }
        out
    }

    proptest! {
        #[test]
        fn extraction_equals_brute_force(vals in proptest::collection::vec(0.0f64..1.0, 36), t in 0.0f64..0.8) {
            let rows: Vec<Vec<f64>> = vals.chunks(6).map(|c| c.to_vec()).collect();
            let plan = plan_from(&rows);
            let ms = extract_matches(&plan, t);
            let got: Vec<_> = ms.pairs.iter().map(|m| (m.i, m.j)).collect();
            prop_assert_eq!(got, brute_mutual(&plan, t));
        }

        #[test]
        fn plan_mass_and_injectivity(m in 1usize..7, n in 1usize..7, seed in 0u64..1000) {
            let c = random_cost(m, n, seed);
            let p = sinkhorn_assign(&c, 500, 1e-10).unwrap();
            prop_assert!(p.data.iter().all(|v| *v >= 0.0));
            prop_assert!((p.total_mass() - (m + n) as f64).abs() < 1e-6);
            let ms = extract_matches(&p, 0.0);
            let mut is: Vec<_> = ms.pairs.iter().map(|x| x.i).collect();
            let mut js: Vec<_> = ms.pairs.iter().map(|x| x.j).collect();
            is.dedup();
            js.sort();
            js.dedup();
            prop_assert_eq!(is.len(), ms.len());
            prop_assert_eq!(js.len(), ms.len());
        }

        #[test]
        fn shift_invariance(seed in 0u64..1000, shift in -5.0f64..5.0) {
            let c = random_cost(4, 5, seed);
            let shifted = CostMatrix::new(4, 5, c.scores.iter().map(|s| s + shift).collect(), c.dustbin_score + shift).unwrap();
            let a = sinkhorn_assign(&c, 500, 1e-12).unwrap();
            let b = sinkhorn_assign(&shifted, 500, 1e-12).unwrap();
            for (x, y) in a.data.iter().zip(&b.data) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn permuted_descriptors_are_recovered() {
        let dl = random_descriptors(30, 5);
        let perm: Vec<usize> = (0..30).map(|k| (k * 7) % 30).collect();
        let dr: Vec<Descriptor> = perm.iter().map(|&k| dl[k].clone()).collect();
        let (ms, plan) = match_descriptors(&dl, &dr, &MatchParams::default()).unwrap();
        assert!(plan.converged || plan.max_violation < 1e-3);
        assert_eq!(ms.len(), 30);
        for m in &ms.pairs {
            assert_eq!(perm[m.j], m.i);
        }
        let rt = ratio_test_matches(&dl, &dr, 0.8);
        assert!(rt.pairs.iter().all(|m| perm[m.j] == m.i));
    }
}
