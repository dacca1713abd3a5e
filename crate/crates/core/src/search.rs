//! Randomized alternating search for the signed cut norm
//! `max <s, A t>` over sign vectors, and its tensor version.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{self, signed_dot_words};
use crate::signs::SignVector;
use crate::tensor::DenseTensor;

/// Default seed used everywhere a seed is not supplied.
pub const DEFAULT_SEED: u64 = 0x5eed_c075_2024_0001;

/// Cached products are recomputed from scratch every this many sweeps.
pub const CACHE_REFRESH_SWEEPS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SearchConfig {
    pub seed: u64,
    pub restarts: usize,
    pub max_sweeps: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            restarts: 1,
            max_sweeps: 100,
        }
    }
}

impl SearchConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(Error::Config("restarts must be at least 1".into()));
        }
        if self.max_sweeps == 0 {
            return Err(Error::Config("max_sweeps must be at least 1".into()));
        }
        Ok(())
    }

    /// Generator for one search run.
    ///
    /// Every run draws from ChaCha8 seeded with `seed`, on stream
    /// `(term << 32) | run`. `term` is the index of the decomposition term
    /// being searched (0 for a standalone search) and `run` numbers the
    /// restarts, so runs never share a stream.
    pub fn rng(&self, term: usize, run: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((term as u64) << 32) | (run as u64 & 0xffff_ffff));
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CutResult {
    /// `<s_1 ⊗ ... ⊗ s_k, a>` for the returned signs.
    pub value: f64,
    /// One sign vector per axis.
    pub signs: Vec<SignVector>,
    /// Sweeps performed by the winning run.
    pub iterations: usize,
    /// Cut value after each sweep of the winning run.
    pub history: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepTrace {
    pub value: f64,
    /// Largest deviation of the cached products from fresh ones, relative to
    /// the largest fresh entry.
    pub cache_drift: f64,
}

/// A tensor-like object the search can contract against sign vectors.
pub(crate) trait CutOperator: Sync {
    fn shape(&self) -> &[usize];

    /// `a ×_axis signs`, where `signs` has one entry per axis and
    /// `signs[axis]` is ignored.
    fn contract(&self, axis: usize, signs: &[SignVector]) -> Vec<f64>;

    /// Order-2 only. `acc` holds the contraction along `axis` with the other
    /// axis set to `old`; update it in place for `new`.
    fn contract_delta(&self, axis: usize, acc: &mut [f64], new: &SignVector, old: &SignVector);
}

impl CutOperator for DenseTensor {
    fn shape(&self) -> &[usize] {
        DenseTensor::shape(self)
    }

    fn contract(&self, axis: usize, signs: &[SignVector]) -> Vec<f64> {
        let pre = SignVector::kron_all(&signs[..axis]);
        let post = SignVector::kron_all(&signs[axis + 1..]);
        kernels::contract_split(self.data(), self.shape(), axis, &pre, &post)
    }

    fn contract_delta(&self, axis: usize, acc: &mut [f64], new: &SignVector, old: &SignVector) {
        let n = self.shape()[1];
        if axis == 0 {
            kernels::delta_matvec_in_place(self.data(), n, acc, new, old);
        } else {
            kernels::delta_matvec_transpose_in_place(self.data(), n, acc, new, old);
        }
    }
}

/// Alternating maximization of `<s, A t>` for a matrix, with cached and
/// delta-updated products `A t` and `A^T s`.
pub fn greedy_signed_cut(a: &DenseTensor, cfg: &SearchConfig) -> Result<CutResult> {
    a.dims2()?;
    cfg.validate()?;
    Ok(matrix_cut(a, cfg, 0))
}

/// Same as [`greedy_signed_cut`] with `restarts` forced to 1, also reporting
/// how far the delta-updated caches drifted from fresh products at each sweep.
pub fn greedy_signed_cut_traced(
    a: &DenseTensor,
    cfg: &SearchConfig,
) -> Result<(CutResult, Vec<SweepTrace>)> {
    a.dims2()?;
    cfg.validate()?;
    let mut trace = Vec::new();
    let res = matrix_run(a, cfg.max_sweeps, &mut cfg.rng(0, 0), Some(&mut trace));
    Ok((res, trace))
}

/// Gauss-Seidel sweeps over the axes of an arbitrary-order tensor.
pub fn axial_greedy_cut(a: &DenseTensor, cfg: &SearchConfig) -> Result<CutResult> {
    cfg.validate()?;
    Ok(axial_cut(a, cfg, 0))
}

pub(crate) fn matrix_cut<O: CutOperator>(op: &O, cfg: &SearchConfig, term: usize) -> CutResult {
    matrix_cut_runs(op, cfg, term, 0)
}

/// Matrix search drawing its restarts from runs `first_run..first_run + restarts`.
pub(crate) fn matrix_cut_runs<O: CutOperator>(
    op: &O,
    cfg: &SearchConfig,
    term: usize,
    first_run: usize,
) -> CutResult {
    best_of(cfg, |run| {
        matrix_run(op, cfg.max_sweeps, &mut cfg.rng(term, first_run + run), None)
    })
}

pub(crate) fn axial_cut<O: CutOperator>(op: &O, cfg: &SearchConfig, term: usize) -> CutResult {
    best_of(cfg, |run| axial_run(op, cfg.max_sweeps, &mut cfg.rng(term, run)))
}

/// Dispatches order-2 operators to the cached matrix search.
pub(crate) fn cut<O: CutOperator>(op: &O, cfg: &SearchConfig, term: usize) -> CutResult {
    if op.shape().len() == 2 {
        matrix_cut(op, cfg, term)
    } else {
        axial_cut(op, cfg, term)
    }
}

fn best_of(cfg: &SearchConfig, run: impl Fn(usize) -> CutResult + Sync) -> CutResult {
    let results: Vec<CutResult> = if cfg.restarts == 1 {
        vec![run(0)]
    } else {
        (0..cfg.restarts).into_par_iter().map(&run).collect()
    };
    // strict comparison keeps the lowest run index on ties
    results
        .into_iter()
        .reduce(|best, r| if r.value > best.value { r } else { best })
        .unwrap()
}

fn random_signs(shape: &[usize], rng: &mut ChaCha8Rng) -> Vec<SignVector> {
    shape.iter().map(|&n| SignVector::random(n, rng)).collect()
}

fn matrix_run<O: CutOperator>(
    op: &O,
    max_sweeps: usize,
    rng: &mut ChaCha8Rng,
    mut trace: Option<&mut Vec<SweepTrace>>,
) -> CutResult {
    let mut signs = random_signs(op.shape(), rng);
    // at_t = A t, ats = A^T s
    let mut at_t = op.contract(0, &signs);
    let mut ats = op.contract(1, &signs);
    let mut prev = f64::NEG_INFINITY;
    let mut history = Vec::new();

    for sweep in 1..=max_sweeps {
        if sweep > 1 && (sweep - 1) % CACHE_REFRESH_SWEEPS == 0 {
            at_t = op.contract(0, &signs);
            ats = op.contract(1, &signs);
        }
        let s_new = SignVector::sgn_unchecked(&at_t);
        op.contract_delta(1, &mut ats, &s_new, &signs[0]);
        signs[0] = s_new;
        let t_new = SignVector::sgn_unchecked(&ats);
        op.contract_delta(0, &mut at_t, &t_new, &signs[1]);
        signs[1] = t_new;

        let value = signed_dot_words(signs[1].words(), &ats);
        history.push(value);
        if let Some(trace) = trace.as_deref_mut() {
            let fresh_t = op.contract(0, &signs);
            let fresh_s = op.contract(1, &signs);
            trace.push(SweepTrace {
                value,
                cache_drift: drift(&at_t, &fresh_t).max(drift(&ats, &fresh_s)),
            });
        }
        if value <= prev || sweep == max_sweeps {
            return CutResult {
                value,
                signs,
                iterations: sweep,
                history,
            };
        }
        prev = value;
    }
    unreachable!("max_sweeps is at least 1")
}

fn drift(cached: &[f64], fresh: &[f64]) -> f64 {
    let scale = fresh.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = cached
        .iter()
        .zip(fresh)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn axial_run<O: CutOperator>(op: &O, max_sweeps: usize, rng: &mut ChaCha8Rng) -> CutResult {
    let order = op.shape().len();
    let mut signs = random_signs(op.shape(), rng);
    let mut prev = f64::NEG_INFINITY;
    let mut history = Vec::new();

    for sweep in 1..=max_sweeps {
        let mut last = Vec::new();
        for axis in 0..order {
            last = op.contract(axis, &signs);
            signs[axis] = SignVector::sgn_unchecked(&last);
        }
        let value = signed_dot_words(signs[order - 1].words(), &last);
        history.push(value);
        if value <= prev || sweep == max_sweeps {
            return CutResult {
                value,
                signs,
                iterations: sweep,
                history,
            };
        }
        prev = value;
    }
    unreachable!("max_sweeps is at least 1")
}

/// Largest total `n_1 + ... + n_k` accepted by [`brute_force_cut`].
pub const BRUTE_FORCE_MAX_BITS: usize = 24;

/// Exact signed cut norm by enumeration.
///
/// The signs of the last axis are chosen optimally as `sgn` of the
/// contraction, and the first entry of the first axis is pinned to `+1`
/// (flipping two axes together leaves the value unchanged).
pub fn brute_force_cut(a: &DenseTensor) -> Result<CutResult> {
    let shape = a.shape();
    let total: usize = shape.iter().sum();
    if total > BRUTE_FORCE_MAX_BITS {
        return Err(Error::TooLarge(format!(
            "brute force needs sum of dimensions <= {BRUTE_FORCE_MAX_BITS}, got {total}"
        )));
    }
    let order = shape.len();
    let last = order - 1;
    let free: Vec<usize> = shape[..last].to_vec();
    let free_bits: usize = free.iter().sum();
    let count = if free_bits == 0 { 1u64 } else { 1u64 << (free_bits - 1) };

    let mut signs: Vec<SignVector> = shape.iter().map(|&n| SignVector::positive(n)).collect();
    let mut best: Option<CutResult> = None;
    for code in 0..count {
        // bit 0 of the first axis stays +1
        let mut bits = code << 1;
        for (axis, &n) in free.iter().enumerate() {
            signs[axis] = SignVector::from_fn(n, |i| (bits >> i) & 1 == 1);
            bits >>= n;
        }
        let v = a.contract(last, &signs);
        let t = SignVector::sgn_unchecked(&v);
        let value = signed_dot_words(t.words(), &v);
        if best.as_ref().is_none_or(|b| value > b.value) {
            let mut s = signs.clone();
            s[last] = t;
            best = Some(CutResult {
                value,
                signs: s,
                iterations: 0,
                history: Vec::new(),
            });
        }
    }
    Ok(best.unwrap())
}

/// `<s_1 ⊗ ... ⊗ s_k, a>` recomputed from scratch.
pub fn cut_value(a: &DenseTensor, signs: &[SignVector]) -> Result<f64> {
    if signs.len() != a.order() {
        return Err(Error::LengthMismatch {
            expected: a.order(),
            actual: signs.len(),
        });
    }
    for (s, &n) in signs.iter().zip(a.shape()) {
        if s.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: s.len(),
            });
        }
    }
    let v = a.contract(0, signs);
    kernels::signed_dot(&signs[0], &v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> DenseTensor {
        DenseTensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    /// Enumerates every sign assignment on every axis, no symmetry tricks.
    fn exhaustive(a: &DenseTensor) -> f64 {
        let shape = a.shape();
        let total: usize = shape.iter().sum();
        let mut best = f64::NEG_INFINITY;
        for code in 0u64..(1 << total) {
            let mut value = 0.0;
            let mut idx = vec![0usize; shape.len()];
            for &x in a.data() {
                let mut sign = 1.0;
                let mut offset = 0;
                for (ax, &i) in idx.iter().enumerate() {
                    if (code >> (offset + i)) & 1 == 1 {
                        sign = -sign;
                    }
                    offset += shape[ax];
                }
                value += sign * x;
                for ax in (0..shape.len()).rev() {
                    idx[ax] += 1;
                    if idx[ax] < shape[ax] {
                        break;
                    }
                    idx[ax] = 0;
                }
            }
            best = best.max(value);
        }
        best
    }

    #[test]
    fn rank_one_sign_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = SignVector::random(5, &mut rng);
        let t = SignVector::random(7, &mut rng);
        let a = DenseTensor::from_fn(vec![5, 7], |k| s.get(k / 7) * t.get(k % 7)).unwrap();
        let res = greedy_signed_cut(&a, &SearchConfig::default()).unwrap();
        assert_eq!(res.value, 35.0);
        let same = res.signs[0] == s && res.signs[1] == t;
        let flipped = res.signs[0] == s.negated() && res.signs[1] == t.negated();
        assert!(same || flipped);
    }

    #[test]
    fn small_examples() {
        let a = DenseTensor::matrix(2, 2, vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        assert_eq!(exhaustive(&a), 4.0);
        let res = greedy_signed_cut(&a, &SearchConfig::default()).unwrap();
        assert_eq!(res.value, 4.0);
        let u = SignVector::pack(&[1.0, -1.0]).unwrap();
        assert!(res.signs[0] == u || res.signs[0] == u.negated());
        assert!(res.signs[1] == u || res.signs[1] == u.negated());
        assert_eq!(brute_force_cut(&a).unwrap().value, 4.0);

        let ones = DenseTensor::matrix(3, 3, vec![1.0; 9]).unwrap();
        assert_eq!(greedy_signed_cut(&ones, &SearchConfig::default()).unwrap().value, 9.0);

        let x = DenseTensor::new(vec![1], vec![-2.5]).unwrap();
        assert_eq!(brute_force_cut(&x).unwrap().value, 2.5);
        let x = DenseTensor::new(vec![1, 1], vec![-2.5]).unwrap();
        assert_eq!(brute_force_cut(&x).unwrap().value, 2.5);
    }

    #[test]
    fn tensor_examples() {
        let ones = DenseTensor::new(vec![2, 2, 2], vec![1.0; 8]).unwrap();
        let res = axial_greedy_cut(&ones, &SearchConfig::default()).unwrap();
        assert_eq!(res.value, 8.0);
        // global flips of pairs of axes are also optimal
        assert_eq!(cut_value(&ones, &res.signs).unwrap(), 8.0);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let signs: Vec<SignVector> = [3, 4, 5].iter().map(|&n| SignVector::random(n, &mut rng)).collect();
        let a = DenseTensor::from_fn(vec![3, 4, 5], |f| {
            signs[0].get(f / 20) * signs[1].get((f / 5) % 4) * signs[2].get(f % 5)
        })
        .unwrap();
        assert_eq!(axial_greedy_cut(&a, &SearchConfig::default()).unwrap().value, 60.0);
    }

    #[test]
    fn brute_force_matches_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for shape in [vec![3, 4], vec![2, 2, 2], vec![1, 5], vec![4], vec![2, 3, 1, 2]] {
            let a = random_tensor(shape, &mut rng);
            let bf = brute_force_cut(&a).unwrap();
            assert!((bf.value - exhaustive(&a)).abs() < 1e-12);
            assert!((cut_value(&a, &bf.signs).unwrap() - bf.value).abs() < 1e-12);
        }
    }

    #[test]
    fn brute_force_guard() {
        let a = DenseTensor::zeros(vec![20, 5]).unwrap();
        assert!(matches!(brute_force_cut(&a), Err(Error::TooLarge(_))));
    }

    #[test]
    fn brute_force_bounded_by_l1() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..50 {
            let shape = if trial % 2 == 0 { vec![3, 3] } else { vec![2, 2, 2] };
            let signs: Vec<SignVector> = shape.iter().map(|&n| SignVector::random(n, &mut rng)).collect();
            let pattern = SignVector::kron_all(&signs);
            // same magnitudes, once with a rank-one sign pattern and once scrambled
            let mags: Vec<f64> = (0..pattern.len()).map(|_| rng.random_range(0.1..2.0)).collect();
            let aligned =
                DenseTensor::new(shape.clone(), mags.iter().enumerate().map(|(i, m)| m * pattern.get(i)).collect())
                    .unwrap();
            let l1: f64 = mags.iter().sum();
            assert!((brute_force_cut(&aligned).unwrap().value - l1).abs() < 1e-12);

            let random = random_tensor(shape.clone(), &mut rng);
            let l1: f64 = random.data().iter().map(|x| x.abs()).sum();
            let value = brute_force_cut(&random).unwrap().value;
            assert!(value <= l1 + 1e-12);
            let pattern = SignVector::sgn(random.data()).unwrap();
            let total: usize = shape.iter().sum();
            let is_rank_one = (0u64..(1 << total)).any(|code| {
                let mut offset = 0;
                let axes: Vec<SignVector> = shape
                    .iter()
                    .map(|&n| {
                        let v = SignVector::from_fn(n, |i| (code >> (offset + i)) & 1 == 1);
                        offset += n;
                        v
                    })
                    .collect();
                SignVector::kron_all(&axes) == pattern
            });
            assert_eq!(is_rank_one, value >= l1 - 1e-12);
        }
    }

    #[test]
    fn greedy_is_lower_bound_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..40 {
            let a = random_tensor(vec![4, 5], &mut rng);
            let cfg = SearchConfig::with_seed(trial);
            let res = greedy_signed_cut(&a, &cfg).unwrap();
            let exact = brute_force_cut(&a).unwrap().value;
            assert!(res.value <= exact + 1e-12);
            let slack = 1e-9 * a.norm();
            for w in res.history.windows(2).take(res.history.len().saturating_sub(2)) {
                assert!(w[1] >= w[0] - slack);
            }
            assert!((cut_value(&a, &res.signs).unwrap() - res.value).abs() <= 1e-10 * res.value.abs().max(1.0));
        }
    }

    #[test]
    fn fixed_point_after_return() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_tensor(vec![12, 9], &mut rng);
        let res = greedy_signed_cut(&a, &SearchConfig::default()).unwrap();
        let s = SignVector::sgn(&a.contract(0, &res.signs)).unwrap();
        let t = SignVector::sgn(&a.contract(1, &[s.clone(), res.signs[1].clone()])).unwrap();
        let again = cut_value(&a, &[s, t]).unwrap();
        assert!((again - res.value).abs() <= 1e-10 * res.value);
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_tensor(vec![30, 20], &mut rng);
        let cfg = SearchConfig::with_seed(99).restarts(8);
        let r1 = greedy_signed_cut(&a, &cfg).unwrap();
        let r2 = greedy_signed_cut(&a, &cfg).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.value.to_bits(), r2.value.to_bits());
    }

    #[test]
    fn cache_stays_coherent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for seed in 0..5 {
            let a = random_tensor(vec![64, 48], &mut rng);
            let (res, trace) = greedy_signed_cut_traced(&a, &SearchConfig::with_seed(seed)).unwrap();
            assert_eq!(trace.len(), res.iterations);
            for t in trace {
                assert!(t.cache_drift <= 1e-10, "drift {}", t.cache_drift);
            }
        }
    }

    #[test]
    fn axial_matches_matrix_search_on_order_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..10 {
            let a = random_tensor(vec![10, 13], &mut rng);
            let cfg = SearchConfig::with_seed(seed);
            let m = greedy_signed_cut(&a, &cfg).unwrap();
            let t = axial_greedy_cut(&a, &cfg).unwrap();
            assert_eq!(m.signs, t.signs);
            assert!((m.value - t.value).abs() <= 1e-12 * m.value);
        }
    }

    #[test]
    fn rejects_bad_config() {
        let a = DenseTensor::matrix(1, 1, vec![1.0]).unwrap();
        let cfg = SearchConfig {
            restarts: 0,
            ..SearchConfig::default()
        };
        assert!(matches!(greedy_signed_cut(&a, &cfg), Err(Error::Config(_))));
        let v = DenseTensor::new(vec![3], vec![1.0; 3]).unwrap();
        assert!(greedy_signed_cut(&v, &SearchConfig::default()).is_err());
    }
}
