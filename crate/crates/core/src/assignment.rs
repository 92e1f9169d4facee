//! Output-to-reference assignment and the permutation invariant loss.

use std::fmt;

use ndarray::{Array3, Axis};

use crate::error::{Error, Result};
use crate::masking::StreamMagnitudes;

/// Largest stream count accepted by [`best_perm_bruteforce`].
pub const MAX_BRUTEFORCE_STREAMS: usize = 8;

/// Stream counts up to this size are solved exhaustively by [`best_permutation`].
const EXHAUSTIVE_LIMIT: usize = 6;

/// `c[i][j]` is the summed squared error between estimate `i` and reference `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    n: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(Error::NonSquare {
                rows: n,
                cols: bad.len(),
            });
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cost matrix entry".into()));
        }
        Ok(Self { n, data })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Total cost of `perm`, summed over outputs in ascending order.
    pub fn total(&self, perm: &Permutation) -> f64 {
        perm.0
            .iter()
            .enumerate()
            .fold(0.0, |acc, (i, &j)| acc + self.get(i, j))
    }
}

/// Bijection from output index to reference index.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; mapping.len()];
        for &j in &mapping {
            if j >= mapping.len() || std::mem::replace(&mut seen[j], true) {
                return Err(Error::InvalidConfig(format!(
                    "{mapping:?} is not a permutation"
                )));
            }
        }
        Ok(Self(mapping))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &j)| i == j)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// Reference index assigned to output `i`.
    pub fn target(&self, i: usize) -> usize {
        self.0[i]
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (i, &j) in self.0.iter().enumerate() {
            inv[j] = i;
        }
        Self(inv)
    }

    /// Advances to the next permutation in lexicographic order; false after the last one.
    fn advance(&mut self) -> bool {
        let p = &mut self.0;
        let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
            return false;
        };
        let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).unwrap();
        p.swap(i - 1, j);
        p[i..].reverse();
        true
    }

    /// All permutations of `n` elements in lexicographic order.
    pub fn all(n: usize) -> impl Iterator<Item = Permutation> {
        let mut next = Some(Self::identity(n));
        std::iter::from_fn(move || {
            let current = next.take()?;
            let mut succ = current.clone();
            if succ.advance() {
                next = Some(succ);
            }
            Some(current)
        })
    }
}

impl fmt::Display for Permutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|j| j.to_string()).collect();
        write!(f, "{}", parts.join(" "))
    }
}

/// Pairwise summed squared errors between every estimated and reference stream.
pub fn pairwise_cost(est: &StreamMagnitudes, refs: &StreamMagnitudes) -> Result<CostMatrix> {
    if est.dim() != refs.dim() {
        return Err(Error::shape(
            format!("{:?}", refs.dim()),
            format!("{:?}", est.dim()),
        ));
    }
    let n = est.streams();
    let mut data = Vec::with_capacity(n * n);
    for e in est.values().outer_iter() {
        for r in refs.values().outer_iter() {
            let sum = e
                .iter()
                .zip(r.iter())
                .fold(0.0, |acc, (a, b)| acc + (a - b) * (a - b));
            data.push(sum);
        }
    }
    Ok(CostMatrix { n, data })
}

/// Exhaustive search; ties go to the lexicographically smallest permutation.
pub fn best_perm_bruteforce(c: &CostMatrix) -> Result<(Permutation, f64)> {
    if c.n > MAX_BRUTEFORCE_STREAMS {
        return Err(Error::TooManyStreams(c.n));
    }
    let mut best = Permutation::identity(c.n);
    let mut best_cost = c.total(&best);
    for perm in Permutation::all(c.n).skip(1) {
        let cost = c.total(&perm);
        if cost < best_cost {
            best_cost = cost;
            best = perm;
        }
    }
    Ok((best, best_cost))
}

/// Minimum-cost assignment via the O(n^3) shortest augmenting path method with potentials.
pub fn best_perm_hungarian(c: &CostMatrix) -> Result<(Permutation, f64)> {
    let n = c.n;
    if n == 0 {
        return Ok((Permutation::identity(0), 0.0));
    }
    // 1-based arrays; column 0 is a virtual start node.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        row_of[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r = row_of[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let reduced = c.get(r - 1, col - 1) - u[r] - v[col];
                if reduced < minv[col] {
                    minv[col] = reduced;
                    way[col] = col0;
                }
                if minv[col] < delta {
                    delta = minv[col];
                    col1 = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[row_of[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = col1;
            if row_of[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            row_of[col0] = row_of[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut mapping = vec![0; n];
    for col in 1..=n {
        mapping[row_of[col] - 1] = col - 1;
    }
    let perm = Permutation(mapping);
    let cost = c.total(&perm);
    Ok((perm, cost))
}

/// Exhaustive search for small stream counts, Hungarian beyond.
pub fn best_permutation(c: &CostMatrix) -> (Permutation, f64) {
    if c.n <= EXHAUSTIVE_LIMIT {
        best_perm_bruteforce(c).expect("stream count within brute-force limit")
    } else {
        best_perm_hungarian(c).expect("square matrix")
    }
}

/// Magnitude MSE under the best assignment, normalized by streams * frames * bins.
pub fn pit_loss(est: &StreamMagnitudes, refs: &StreamMagnitudes) -> Result<(f64, Permutation)> {
    let c = pairwise_cost(est, refs)?;
    let (perm, total) = best_permutation(&c);
    Ok((total / est.values().len().max(1) as f64, perm))
}

/// Gradient of [`pit_loss`] with respect to `est`, following the winning assignment.
pub fn pit_grad(est: &StreamMagnitudes, refs: &StreamMagnitudes) -> Result<Array3<f64>> {
    let (_, perm) = pit_loss(est, refs)?;
    Ok(assigned_grad(est, refs, &perm))
}

/// Gradient `2 (est_s - ref_perm(s)) / (S M F)` for a fixed assignment.
pub fn assigned_grad(
    est: &StreamMagnitudes,
    refs: &StreamMagnitudes,
    perm: &Permutation,
) -> Array3<f64> {
    let scale = 2.0 / est.values().len().max(1) as f64;
    let mut grad = est.values().clone();
    for (i, mut g) in grad.outer_iter_mut().enumerate() {
        let r = refs.values().index_axis(Axis(0), perm.target(i));
        g.zip_mut_with(&r, |e, &r| *e = (*e - r) * scale);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::loss_jx;
    use ndarray::arr3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mags(v: Array3<f64>) -> StreamMagnitudes {
        StreamMagnitudes::new(v).unwrap()
    }

    fn random_mags(dim: (usize, usize, usize), rng: &mut ChaCha8Rng) -> StreamMagnitudes {
        mags(Array3::from_shape_fn(dim, |_| rng.gen_range(0.0..1.0)))
    }

    fn random_cost(n: usize, rng: &mut ChaCha8Rng) -> CostMatrix {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.gen_range(0.0..10.0)).collect())
            .collect();
        CostMatrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn permutations_enumerate_in_lexicographic_order() {
        let all: Vec<_> = Permutation::all(3).map(|p| p.0).collect();
        assert_eq!(
            all,
            vec![
                vec![0, 1, 2],
                vec![0, 2, 1],
                vec![1, 0, 2],
                vec![1, 2, 0],
                vec![2, 0, 1],
                vec![2, 1, 0]
            ]
        );
        assert_eq!(Permutation::all(5).count(), 120);
        assert_eq!(Permutation::all(1).count(), 1);
        assert!(Permutation::new(vec![0, 0]).is_err());
        let p = Permutation::new(vec![2, 0, 1]).unwrap();
        assert_eq!(p.inverse().inverse(), p);
    }

    #[test]
    fn pairwise_cost_of_identical_streams() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let est = random_mags((3, 2, 4), &mut rng);
        let c = pairwise_cost(&est, &est).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    assert_eq!(c.get(i, j), 0.0);
                } else {
                    assert!(c.get(i, j) > 0.0);
                }
            }
        }
    }

    #[test]
    fn pairwise_cost_scalar_case() {
        let est = mags(arr3(&[[[1.0]], [[0.0]]]));
        let refs = mags(arr3(&[[[0.0]], [[1.0]]]));
        let c = pairwise_cost(&est, &refs).unwrap();
        assert_eq!(
            c,
            CostMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()
        );
        let (perm, cost) = best_perm_bruteforce(&c).unwrap();
        assert_eq!(perm.as_slice(), &[1, 0]);
        assert_eq!(cost, 0.0);
        assert_eq!(c.total(&Permutation::identity(2)), 2.0);
    }

    #[test]
    fn pairwise_cost_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let est = random_mags((3, 4, 5), &mut rng);
        let refs = random_mags((3, 4, 5), &mut rng);
        let c = pairwise_cost(&est, &refs).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut naive = 0.0;
                for t in 0..4 {
                    for f in 0..5 {
                        let d = est.values()[[i, t, f]] - refs.values()[[j, t, f]];
                        naive += d * d;
                    }
                }
                assert!((naive - c.get(i, j)).abs() < 1e-12);
            }
        }
        let other = random_mags((3, 4, 6), &mut rng);
        assert!(pairwise_cost(&est, &other).is_err());
    }

    #[test]
    fn bruteforce_small_cases_and_guard() {
        let c = CostMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(
            best_perm_bruteforce(&c).unwrap(),
            (Permutation::identity(2), 0.0)
        );
        let c = CostMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(best_perm_bruteforce(&c).unwrap().0.as_slice(), &[1, 0]);
        // full tie resolves to identity
        let c = CostMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(best_perm_bruteforce(&c).unwrap().0.is_identity());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(
            best_perm_bruteforce(&random_cost(9, &mut rng)),
            Err(Error::TooManyStreams(9))
        ));
    }

    #[test]
    fn hungarian_small_cases() {
        let c = CostMatrix::from_rows(&[vec![0.0, 9.0], vec![9.0, 0.0]]).unwrap();
        assert_eq!(
            best_perm_hungarian(&c).unwrap(),
            (Permutation::identity(2), 0.0)
        );
        let c = CostMatrix::from_rows(&[vec![4.5]]).unwrap();
        assert_eq!(
            best_perm_hungarian(&c).unwrap(),
            (Permutation::identity(1), 4.5)
        );
        assert!(matches!(
            CostMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0]]),
            Err(Error::NonSquare { .. })
        ));
    }

    #[test]
    fn hungarian_matches_bruteforce_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let n = rng.gen_range(2..=7);
            let c = random_cost(n, &mut rng);
            let (_, brute) = best_perm_bruteforce(&c).unwrap();
            let (_, hung) = best_perm_hungarian(&c).unwrap();
            assert_eq!(brute, hung);
        }
    }

    #[test]
    fn hungarian_handles_larger_problems() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = random_cost(40, &mut rng);
        let (perm, cost) = best_perm_hungarian(&c).unwrap();
        assert_eq!(perm.len(), 40);
        assert!(cost <= c.total(&Permutation::identity(40)));
    }

    #[test]
    fn pit_loss_ignores_reference_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let est = random_mags((2, 3, 4), &mut rng);
        let refs = random_mags((2, 3, 4), &mut rng);
        let (a, _) = pit_loss(&est, &refs).unwrap();
        let (b, _) = pit_loss(&est, &refs.reordered(&[1, 0])).unwrap();
        assert_eq!(a, b);
        let (zero, perm) = pit_loss(&refs.reordered(&[1, 0]), &refs).unwrap();
        assert_eq!(zero, 0.0);
        assert_eq!(perm.as_slice(), &[1, 0]);
    }

    #[test]
    fn pit_loss_is_minimum_of_all_orderings() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let est = random_mags((3, 2, 5), &mut rng);
        let refs = random_mags((3, 2, 5), &mut rng);
        let (loss, _) = pit_loss(&est, &refs).unwrap();
        let min = Permutation::all(3)
            .map(|p| loss_jx(&est, &refs.reordered(p.as_slice())).unwrap().0)
            .fold(f64::INFINITY, f64::min);
        assert!((loss - min).abs() <= 1e-15 * min.max(1.0));
    }

    #[test]
    fn pit_grad_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let refs = random_mags((2, 3, 4), &mut rng);
        let g = pit_grad(&refs.reordered(&[1, 0]), &refs).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));

        let g = pit_grad(&mags(arr3(&[[[0.8]]])), &mags(arr3(&[[[0.3]]]))).unwrap();
        assert!((g[[0, 0, 0]] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pit_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dim = (3, 2, 3);
        let est = random_mags(dim, &mut rng);
        let refs = random_mags(dim, &mut rng);
        let grad = pit_grad(&est, &refs).unwrap();
        let h = 1e-6;
        for idx in ndarray::indices(dim) {
            let mut p = est.values().clone();
            p[idx] += h;
            let mut m = est.values().clone();
            m[idx] -= h;
            let numeric = (pit_loss(&mags(p), &refs).unwrap().0
                - pit_loss(&mags(m), &refs).unwrap().0)
                / (2.0 * h);
            assert!((numeric - grad[idx]).abs() <= 1e-5 * grad[idx].abs().max(1e-3));
        }
    }
}
