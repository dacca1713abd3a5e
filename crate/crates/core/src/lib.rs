//! Signed cut decompositions: approximations of matrices and tensors by sums
//! of scaled outer products of `{-1, +1}` vectors, stored as bitsets.

pub mod decompose;
pub mod error;
pub mod io;
pub mod kernels;
pub mod metrics;
mod residual;
pub mod search;
pub mod signs;
pub mod tensor;

pub use decompose::{
    correct_coefficients, expand, greedy_decompose, lstsq_decompose, rgb_scalars_decompose,
    decompose, CutDecomposition, CutReport, DecomposeConfig, GramSystem, Method, StepRecord,
};
pub use error::{Error, Result};
pub use kernels::{
    axial_contract, delta_matvec, delta_matvec_transpose, matvec_signed, matvec_signed_transpose,
    rank1_update, signed_dot, signed_dot_reference,
};
pub use search::{
    axial_greedy_cut, brute_force_cut, cut_value, greedy_signed_cut, CutResult, SearchConfig,
};
pub use signs::{SignMatrix, SignVector};
pub use tensor::DenseTensor;
