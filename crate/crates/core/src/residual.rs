//! Residual held as an explicit tensor minus a list of not yet applied
//! sign terms, `R = base - sum_j coef_j * (s_j1 ⊗ ... ⊗ s_jk)`.

use crate::kernels::{self, flip};
use crate::search::CutOperator;
use crate::signs::SignVector;
use crate::tensor::DenseTensor;

#[derive(Clone, Debug)]
pub(crate) struct Term {
    pub coef: f64,
    pub signs: Vec<SignVector>,
}

#[derive(Clone, Debug)]
pub(crate) struct ImplicitResidual {
    base: DenseTensor,
    terms: Vec<Term>,
}

impl ImplicitResidual {
    pub fn new(base: DenseTensor) -> Self {
        Self {
            base,
            terms: Vec::new(),
        }
    }

    pub fn push(&mut self, coef: f64, signs: Vec<SignVector>) {
        debug_assert_eq!(signs.len(), self.base.order());
        self.terms.push(Term { coef, signs });
    }

    pub fn buffered(&self) -> usize {
        self.terms.len()
    }

    pub fn set_coefficients(&mut self, coefs: impl IntoIterator<Item = f64>) {
        for (term, c) in self.terms.iter_mut().zip(coefs) {
            term.coef = c;
        }
    }

    /// Applies every buffered term to the explicit tensor.
    pub fn flush(&mut self) {
        for term in self.terms.drain(..) {
            subtract_term(&mut self.base, term.coef, &term.signs);
        }
    }

    pub fn base(&self) -> &DenseTensor {
        &self.base
    }
}

/// `a <- a - coef * (s_1 ⊗ ... ⊗ s_k)`.
pub(crate) fn subtract_term(a: &mut DenseTensor, coef: f64, signs: &[SignVector]) {
    let post = SignVector::kron_all(&signs[1..]);
    kernels::add_sign_outer(a.data_mut(), &signs[0], &post, -coef);
}

fn product_of_dots(term: &Term, signs: &[SignVector], skip: usize) -> i64 {
    term.signs
        .iter()
        .zip(signs)
        .enumerate()
        .filter(|&(i, _)| i != skip)
        .map(|(_, (a, b))| a.dot(b))
        .product()
}

impl CutOperator for ImplicitResidual {
    fn shape(&self) -> &[usize] {
        self.base.shape()
    }

    fn contract(&self, axis: usize, signs: &[SignVector]) -> Vec<f64> {
        let mut out = self.base.contract(axis, signs);
        for term in &self.terms {
            let d = product_of_dots(term, signs, axis);
            if d == 0 {
                continue;
            }
            let f = -(term.coef * d as f64);
            let own = &term.signs[axis];
            for (p, o) in out.iter_mut().enumerate() {
                *o += flip(f, own.is_negative(p));
            }
        }
        out
    }

    fn contract_delta(&self, axis: usize, acc: &mut [f64], new: &SignVector, old: &SignVector) {
        self.base.contract_delta(axis, acc, new, old);
        let other = 1 - axis;
        for term in &self.terms {
            let d = term.signs[other].dot(new) - term.signs[other].dot(old);
            if d == 0 {
                continue;
            }
            let f = -(term.coef * d as f64);
            let own = &term.signs[axis];
            for (p, o) in acc.iter_mut().enumerate() {
                *o += flip(f, own.is_negative(p));
            }
        }
    }
}
