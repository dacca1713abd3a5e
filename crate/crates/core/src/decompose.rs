//! Width-`w` signed cut decompositions.
//!
//! A decomposition stores, for each term `j`, one sign vector per signed axis
//! and the multiplier `alpha_j` applied to their outer product, so that
//! `expand(d) = sum_j alpha_j * (s_j1 ⊗ ... ⊗ s_jk)`. The greedy multiplier is
//! the cut value divided by the number of entries. In the channel variant the
//! channel axis carries no signs and each term has one multiplier per channel.

use nalgebra::{Cholesky, DMatrix};

use crate::error::{Error, Result};
use crate::kernels;
use crate::residual::ImplicitResidual;
use crate::search::{self, CutOperator, SearchConfig};
use crate::signs::{SignMatrix, SignVector};
use crate::tensor::{check_shape, DenseTensor};

/// Longest channel axis accepted by [`rgb_scalars_decompose`].
pub const MAX_CHANNELS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Method {
    #[default]
    Greedy,
    LeastSquares,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecomposeConfig {
    pub width: usize,
    /// Terms buffered before they are applied to the explicit residual.
    pub flush_width: usize,
    pub method: Method,
    pub search: SearchConfig,
    pub record_curve: bool,
    /// Stop once a cut value falls below this fraction of the first one.
    /// Zero never stops early.
    pub min_value_fraction: f64,
    /// Upper bound on the bytes needed to hold the factors and coefficients.
    pub memory_budget: usize,
}

impl Default for DecomposeConfig {
    fn default() -> Self {
        Self {
            width: 0,
            flush_width: 32,
            method: Method::Greedy,
            search: SearchConfig::default(),
            record_curve: true,
            min_value_fraction: 0.0,
            memory_budget: 8 << 30,
        }
    }
}

impl DecomposeConfig {
    pub fn with_width(width: usize) -> Self {
        Self {
            width,
            ..Self::default()
        }
    }

    pub fn method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.search.seed = seed;
        self
    }

    pub fn flush_width(mut self, flush_width: usize) -> Self {
        self.flush_width = flush_width;
        self
    }

    fn validate(&self, shape: &[usize], channel_axis: Option<usize>) -> Result<()> {
        self.search.validate()?;
        if self.flush_width == 0 {
            return Err(Error::Config("flush_width must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.min_value_fraction) {
            return Err(Error::Config("min_value_fraction must lie in [0, 1]".into()));
        }
        let per_term: usize = shape
            .iter()
            .enumerate()
            .map(|(i, &n)| if Some(i) == channel_axis { 8 * n } else { n.div_ceil(8) })
            .sum::<usize>()
            + if channel_axis.is_none() { 8 } else { 0 };
        match per_term.checked_mul(self.width) {
            Some(bytes) if bytes <= self.memory_budget => Ok(()),
            _ => Err(Error::TooLarge(format!(
                "width {} needs more than the {} byte budget",
                self.width, self.memory_budget
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CutDecomposition {
    shape: Vec<usize>,
    channel_axis: Option<usize>,
    factors: Vec<SignMatrix>,
    coefficients: Vec<f64>,
}

impl CutDecomposition {
    /// Width-0 decomposition with signs on every axis except `channel_axis`.
    pub fn new(shape: Vec<usize>, channel_axis: Option<usize>) -> Result<Self> {
        check_shape(&shape)?;
        if let Some(c) = channel_axis {
            if c >= shape.len() {
                return Err(Error::AxisOutOfRange {
                    axis: c,
                    order: shape.len(),
                });
            }
            if shape.len() < 2 {
                return Err(Error::Config("channel variant needs a sign axis".into()));
            }
        }
        let factors = shape
            .iter()
            .enumerate()
            .filter(|&(i, _)| Some(i) != channel_axis)
            .map(|(_, &n)| SignMatrix::new(n))
            .collect();
        Ok(Self {
            shape,
            channel_axis,
            factors,
            coefficients: Vec::new(),
        })
    }

    pub fn from_parts(
        shape: Vec<usize>,
        channel_axis: Option<usize>,
        factors: Vec<SignMatrix>,
        coefficients: Vec<f64>,
    ) -> Result<Self> {
        let empty = Self::new(shape, channel_axis)?;
        if factors.len() != empty.factors.len() {
            return Err(Error::LengthMismatch {
                expected: empty.factors.len(),
                actual: factors.len(),
            });
        }
        let width = factors[0].width();
        for (f, e) in factors.iter().zip(&empty.factors) {
            if f.rows() != e.rows() || f.width() != width {
                return Err(Error::Format("inconsistent sign factors".into()));
            }
        }
        if coefficients.len() != width * empty.channels() {
            return Err(Error::LengthMismatch {
                expected: width * empty.channels(),
                actual: coefficients.len(),
            });
        }
        Ok(Self {
            factors,
            coefficients,
            ..empty
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn channel_axis(&self) -> Option<usize> {
        self.channel_axis
    }

    /// Coefficients per term: the channel axis length, or 1.
    pub fn channels(&self) -> usize {
        self.channel_axis.map_or(1, |c| self.shape[c])
    }

    pub fn width(&self) -> usize {
        self.factors[0].width()
    }

    /// One sign matrix per signed axis, in axis order.
    pub fn factors(&self) -> &[SignMatrix] {
        &self.factors
    }

    /// Term-major: entries `j * channels() .. (j + 1) * channels()` belong to term `j`.
    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn term_coefficients(&self, j: usize) -> &[f64] {
        let q = self.channels();
        &self.coefficients[j * q..(j + 1) * q]
    }

    pub fn term_signs(&self, j: usize) -> Vec<SignVector> {
        self.factors.iter().map(|f| f.column(j).clone()).collect()
    }

    pub fn push_term(&mut self, signs: Vec<SignVector>, coefs: &[f64]) -> Result<()> {
        if signs.len() != self.factors.len() {
            return Err(Error::LengthMismatch {
                expected: self.factors.len(),
                actual: signs.len(),
            });
        }
        if coefs.len() != self.channels() {
            return Err(Error::LengthMismatch {
                expected: self.channels(),
                actual: coefs.len(),
            });
        }
        for (f, s) in self.factors.iter().zip(&signs) {
            if f.rows() != s.len() {
                return Err(Error::LengthMismatch {
                    expected: f.rows(),
                    actual: s.len(),
                });
            }
        }
        for (f, s) in self.factors.iter_mut().zip(signs) {
            f.push(s)?;
        }
        self.coefficients.extend_from_slice(coefs);
        Ok(())
    }

    pub fn set_coefficients(&mut self, coefficients: Vec<f64>) -> Result<()> {
        if coefficients.len() != self.coefficients.len() {
            return Err(Error::LengthMismatch {
                expected: self.coefficients.len(),
                actual: coefficients.len(),
            });
        }
        self.coefficients = coefficients;
        Ok(())
    }

    /// The first `width` terms (all of them if `width` is larger).
    pub fn truncated(&self, width: usize) -> Self {
        let width = width.min(self.width());
        let mut out = self.clone();
        for f in &mut out.factors {
            f.truncate(width);
        }
        out.coefficients.truncate(width * self.channels());
        out
    }

    /// Adds `scale` times term `j` to `out`.
    fn add_term(&self, out: &mut DenseTensor, j: usize, scale: f64) {
        let signs = self.term_signs(j);
        match self.channel_axis {
            None => {
                let post = SignVector::kron_all(&signs[1..]);
                kernels::add_sign_outer(
                    out.data_mut(),
                    &signs[0],
                    &post,
                    scale * self.coefficients[j],
                );
            }
            Some(c) => {
                let pre = SignVector::kron_all(&signs[..c]);
                let post = SignVector::kron_all(&signs[c..]);
                let coefs: Vec<f64> = self.term_coefficients(j).iter().map(|x| scale * x).collect();
                kernels::add_channel_outer(out.data_mut(), &pre, &post, &coefs);
            }
        }
    }

    /// `a - expand(self)`.
    pub fn residual(&self, a: &DenseTensor) -> Result<DenseTensor> {
        if a.shape() != self.shape.as_slice() {
            return Err(Error::ShapeMismatch(a.shape().to_vec(), self.shape.clone()));
        }
        let mut r = a.clone();
        for j in 0..self.width() {
            self.add_term(&mut r, j, -1.0);
        }
        Ok(r)
    }

    /// `<term_j, a>` for each channel.
    fn term_inner_products(&self, a: &DenseTensor, j: usize) -> Vec<f64> {
        inner_products(a, self.channel_axis, &self.term_signs(j))
    }
}

fn inner_products(a: &DenseTensor, channel_axis: Option<usize>, signs: &[SignVector]) -> Vec<f64> {
    match channel_axis {
        None => {
            let v = a.contract(0, signs);
            vec![kernels::signed_dot_words(signs[0].words(), &v)]
        }
        Some(c) => {
            let pre = SignVector::kron_all(&signs[..c]);
            let post = SignVector::kron_all(&signs[c..]);
            kernels::contract_split(a.data(), a.shape(), c, &pre, &post)
        }
    }
}

/// `sum_j alpha_j * (s_j1 ⊗ ... ⊗ s_jk)`, accumulated in `f64`.
pub fn expand(d: &CutDecomposition) -> DenseTensor {
    let mut out = DenseTensor::zeros(d.shape.clone()).expect("shape validated on construction");
    for j in 0..d.width() {
        d.add_term(&mut out, j, 1.0);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// Width after this step.
    pub k: usize,
    /// Cut value found at this step on the current residual.
    pub cut_value: f64,
    /// `‖R_k‖_F`.
    pub residual_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CutReport {
    pub shape: Vec<usize>,
    pub initial_norm: f64,
    pub steps: Vec<StepRecord>,
    /// Recomputed from the final decomposition.
    pub final_residual_norm: f64,
}

impl CutReport {
    fn new(a: &DenseTensor) -> Self {
        Self {
            shape: a.shape().to_vec(),
            initial_norm: a.norm(),
            steps: Vec::new(),
            final_residual_norm: a.norm(),
        }
    }

    pub fn final_relative_error(&self) -> f64 {
        if self.initial_norm == 0.0 {
            0.0
        } else {
            self.final_residual_norm / self.initial_norm
        }
    }
}

/// Normal equations `G c = b` for the coefficients of fixed sign terms, with
/// `G_ij = prod_axes <s_i, s_j>` and `b_j = <term_j, A>` (one column per channel).
#[derive(Clone, Debug)]
pub struct GramSystem {
    channels: usize,
    terms: Vec<Vec<SignVector>>,
    gram: Vec<Vec<f64>>,
    rhs: Vec<f64>,
}

impl GramSystem {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            terms: Vec::new(),
            gram: Vec::new(),
            rhs: Vec::new(),
        }
    }

    pub fn from_decomposition(a: &DenseTensor, d: &CutDecomposition) -> Result<Self> {
        if a.shape() != d.shape() {
            return Err(Error::ShapeMismatch(a.shape().to_vec(), d.shape().to_vec()));
        }
        let mut g = Self::new(d.channels());
        for j in 0..d.width() {
            let b = d.term_inner_products(a, j);
            g.push(d.term_signs(j), &b);
        }
        Ok(g)
    }

    pub fn width(&self) -> usize {
        self.terms.len()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Appends a term, computing its Gram row from packed sign dot products.
    pub fn push(&mut self, signs: Vec<SignVector>, rhs: &[f64]) {
        assert_eq!(rhs.len(), self.channels);
        let row: Vec<f64> = self
            .terms
            .iter()
            .map(|t| t.iter().zip(&signs).map(|(a, b)| a.dot(b)).product::<i64>() as f64)
            .collect();
        let diag = signs.iter().map(|s| s.len() as i64).product::<i64>() as f64;
        for (g, &v) in self.gram.iter_mut().zip(&row) {
            g.push(v);
        }
        let mut row = row;
        row.push(diag);
        self.gram.push(row);
        self.terms.push(signs);
        self.rhs.extend_from_slice(rhs);
    }

    pub fn gram(&self, i: usize, j: usize) -> f64 {
        self.gram[i][j]
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    /// `‖A - X c‖²` summed over channels, given `‖A‖²`.
    pub fn residual_norm_sq(&self, norm_sq: f64, coefs: &[f64]) -> f64 {
        let q = self.channels;
        let w = self.width();
        let mut total = norm_sq;
        for c in 0..q {
            for i in 0..w {
                let ci = coefs[i * q + c];
                total -= 2.0 * ci * self.rhs[i * q + c];
                for j in 0..w {
                    total += ci * self.gram[i][j] * coefs[j * q + c];
                }
            }
        }
        total.max(0.0)
    }

    /// Solves for all coefficients (term-major, `channels` per term).
    ///
    /// Uses a Cholesky factorization. If it fails or a pivot is negligible, a
    /// ridge `1e-10 * G_00` is added to the diagonal and doubled up to three
    /// times; past that the SVD least-squares solution is used.
    pub fn solve(&self) -> Vec<f64> {
        let w = self.width();
        let q = self.channels;
        if w == 0 {
            return Vec::new();
        }
        let g = DMatrix::from_fn(w, w, |i, j| self.gram[i][j]);
        let b = DMatrix::from_fn(w, q, |i, c| self.rhs[i * q + c]);
        let scale = self.gram[0][0];
        let lambda0 = 1e-10 * scale;
        let ridges = [0.0, lambda0, 2.0 * lambda0, 4.0 * lambda0, 8.0 * lambda0];
        for lambda in ridges {
            let mut m = g.clone();
            for i in 0..w {
                m[(i, i)] += lambda;
            }
            if let Some(ch) = Cholesky::new(m) {
                let l = ch.l_dirty();
                let ok = (0..w).all(|i| l[(i, i)] * l[(i, i)] >= 1e-12 * scale);
                if ok {
                    return to_term_major(&ch.solve(&b));
                }
            }
        }
        let svd = g.svd(true, true);
        let x = svd
            .solve(&b, 1e-12 * scale)
            .unwrap_or_else(|_| DMatrix::zeros(w, q));
        to_term_major(&x)
    }
}

fn to_term_major(x: &DMatrix<f64>) -> Vec<f64> {
    let (w, q) = x.shape();
    (0..w).flat_map(|i| (0..q).map(move |c| x[(i, c)])).collect()
}

fn stop_early(cfg: &DecomposeConfig, first: Option<f64>, value: f64) -> bool {
    matches!(first, Some(f) if cfg.min_value_fraction > 0.0 && value < cfg.min_value_fraction * f)
}

/// Dispatches on `cfg.method`.
pub fn decompose(a: &DenseTensor, cfg: &DecomposeConfig) -> Result<(CutDecomposition, CutReport)> {
    match cfg.method {
        Method::Greedy => greedy_decompose(a, cfg),
        Method::LeastSquares => lstsq_decompose(a, cfg),
    }
}

/// Greedy residual descent: each step cuts the current residual and removes
/// its projection onto the found sign term.
pub fn greedy_decompose(a: &DenseTensor, cfg: &DecomposeConfig) -> Result<(CutDecomposition, CutReport)> {
    cfg.validate(a.shape(), None)?;
    let total = a.len() as f64;
    let mut d = CutDecomposition::new(a.shape().to_vec(), None)?;
    let mut report = CutReport::new(a);
    let mut residual = ImplicitResidual::new(a.clone());
    let mut norm_sq = a.norm_sq();
    let mut first = None;

    for k in 0..cfg.width {
        let cut = search::cut(&residual, &cfg.search, k);
        if stop_early(cfg, first, cut.value) {
            break;
        }
        first.get_or_insert(cut.value);
        let alpha = cut.value / total;
        residual.push(alpha, cut.signs.clone());
        d.push_term(cut.signs, &[alpha])?;
        norm_sq = (norm_sq - cut.value * cut.value / total).max(0.0);
        if residual.buffered() >= cfg.flush_width {
            residual.flush();
            norm_sq = residual.base().norm_sq();
        }
        if cfg.record_curve {
            report.steps.push(StepRecord {
                k: k + 1,
                cut_value: cut.value,
                residual_norm: norm_sq.sqrt(),
            });
        }
    }
    residual.flush();
    report.final_residual_norm = residual.base().norm();
    Ok((d, report))
}

/// Each step cuts `A - expand(current)` and then refits every coefficient by
/// least squares with the signs held fixed.
pub fn lstsq_decompose(a: &DenseTensor, cfg: &DecomposeConfig) -> Result<(CutDecomposition, CutReport)> {
    cfg.validate(a.shape(), None)?;
    let norm_sq = a.norm_sq();
    let mut d = CutDecomposition::new(a.shape().to_vec(), None)?;
    let mut report = CutReport::new(a);
    let mut gram = GramSystem::new(1);
    // base stays `a`; every kept term is carried implicitly with its current coefficient
    let mut residual = ImplicitResidual::new(a.clone());
    let mut first = None;

    for k in 0..cfg.width {
        let cut = search::cut(&residual, &cfg.search, k);
        if stop_early(cfg, first, cut.value) {
            break;
        }
        first.get_or_insert(cut.value);
        let b = inner_products(a, None, &cut.signs);
        gram.push(cut.signs.clone(), &b);
        residual.push(0.0, cut.signs.clone());
        d.push_term(cut.signs, &[0.0])?;
        let coefs = gram.solve();
        residual.set_coefficients(coefs.iter().copied());
        if cfg.record_curve {
            report.steps.push(StepRecord {
                k: k + 1,
                cut_value: cut.value,
                residual_norm: gram.residual_norm_sq(norm_sq, &coefs).sqrt(),
            });
        }
        d.set_coefficients(coefs)?;
    }
    report.final_residual_norm = d.residual(a)?.norm();
    Ok((d, report))
}

/// Replaces the coefficients of `d` by the least-squares optimum for its
/// fixed signs. The error `‖A - expand‖_F` never increases.
pub fn correct_coefficients(a: &DenseTensor, d: &CutDecomposition) -> Result<CutDecomposition> {
    let gram = GramSystem::from_decomposition(a, d)?;
    let coefs = gram.solve();
    let norm_sq = a.norm_sq();
    let mut out = d.clone();
    if gram.residual_norm_sq(norm_sq, &coefs) <= gram.residual_norm_sq(norm_sq, d.coefficients()) {
        out.set_coefficients(coefs)?;
    }
    Ok(out)
}

/// Channel sign patterns with the first channel pinned to `+1`.
fn channel_patterns(q: usize) -> Vec<Vec<bool>> {
    (0..1usize << (q - 1))
        .map(|p| (0..q).map(|c| c > 0 && (p >> (c - 1)) & 1 == 1).collect())
        .collect()
}

/// Decomposition of an `m × n × q` tensor (e.g. an RGB image) whose terms are
/// `s_j ⊗ t_j ⊗ c_j` with sign vectors `s_j`, `t_j` shared by every channel and
/// a real coefficient vector `c_j`.
///
/// Each step runs the matrix search on every channel combination
/// `sum_c ±R_c` (first sign fixed), keeps the candidate whose per-channel
/// projections remove the most energy, then sets coefficients: per channel
/// projections for [`Method::Greedy`], or one shared Gram matrix with `q`
/// right-hand sides for [`Method::LeastSquares`].
pub fn rgb_scalars_decompose(a: &DenseTensor, cfg: &DecomposeConfig) -> Result<(CutDecomposition, CutReport)> {
    let (m, n, q) = match a.shape()[..] {
        [m, n, q] => (m, n, q),
        _ => {
            return Err(Error::Config(format!(
                "expected an m x n x q tensor, got shape {:?}",
                a.shape()
            )))
        }
    };
    if q > MAX_CHANNELS {
        return Err(Error::Config(format!(
            "channel axis has length {q}, at most {MAX_CHANNELS} supported"
        )));
    }
    cfg.validate(a.shape(), Some(2))?;
    let spatial = (m * n) as f64;
    let planes: Vec<Vec<f64>> = (0..q)
        .map(|c| a.data().iter().skip(c).step_by(q).copied().collect())
        .collect();
    let patterns = channel_patterns(q);
    let mut d = CutDecomposition::new(a.shape().to_vec(), Some(2))?;
    let mut report = CutReport::new(a);
    let mut gram = GramSystem::new(q);
    let norm_sq = a.norm_sq();
    let mut err_sq = norm_sq;
    let mut first = None;

    for k in 0..cfg.width {
        let mut best: Option<(f64, f64, Vec<SignVector>, Vec<f64>)> = None;
        for (p, pattern) in patterns.iter().enumerate() {
            let mut combined = vec![0.0; m * n];
            for (plane, &neg) in planes.iter().zip(pattern) {
                for (x, &v) in combined.iter_mut().zip(plane) {
                    *x += kernels::flip(v, neg);
                }
            }
            let mut op = ImplicitResidual::new(DenseTensor::matrix(m, n, combined)?);
            for j in 0..d.width() {
                let alpha = d
                    .term_coefficients(j)
                    .iter()
                    .zip(pattern)
                    .map(|(&c, &neg)| kernels::flip(c, neg))
                    .sum();
                op.push(alpha, d.term_signs(j));
            }
            let cut = search::matrix_cut_runs(&op, &cfg.search, k, p * cfg.search.restarts);
            let b = inner_products(a, Some(2), &cut.signs);
            // projections of the current residual, per channel
            let proj: Vec<f64> = (0..q)
                .map(|c| {
                    b[c] - (0..d.width())
                        .map(|j| {
                            let dots: i64 = d
                                .term_signs(j)
                                .iter()
                                .zip(&cut.signs)
                                .map(|(x, y)| x.dot(y))
                                .product();
                            d.term_coefficients(j)[c] * dots as f64
                        })
                        .sum::<f64>()
                })
                .collect();
            let gain: f64 = proj.iter().map(|x| x * x).sum();
            if best.as_ref().is_none_or(|(g, ..)| gain > *g) {
                best = Some((gain, cut.value, cut.signs, b.iter().copied().chain(proj).collect()));
            }
        }
        let (gain, value, signs, both) = best.unwrap();
        if stop_early(cfg, first, value) {
            break;
        }
        first.get_or_insert(value);
        let (b, proj) = both.split_at(q);
        gram.push(signs.clone(), b);
        match cfg.method {
            Method::Greedy => {
                let coefs: Vec<f64> = proj.iter().map(|x| x / spatial).collect();
                d.push_term(signs, &coefs)?;
                err_sq = (err_sq - gain / spatial).max(0.0);
            }
            Method::LeastSquares => {
                d.push_term(signs, &vec![0.0; q])?;
                let coefs = gram.solve();
                err_sq = gram.residual_norm_sq(norm_sq, &coefs);
                d.set_coefficients(coefs)?;
            }
        }
        if cfg.record_curve {
            report.steps.push(StepRecord {
                k: k + 1,
                cut_value: value,
                residual_norm: err_sq.sqrt(),
            });
        }
    }
    report.final_residual_norm = d.residual(a)?.norm();
    Ok((d, report))
}
