//! Multiply-free kernels over bit-packed signs.
//!
//! Every inner reduction flips the IEEE sign bit of an `f64` according to a
//! sign bit and adds. The blocked kernels keep eight accumulator lanes
//! (`lane = index % 8`) and combine them pairwise, so results are
//! reproducible run to run.

use crate::error::{Error, Result};
use crate::signs::{SignVector, WORD_BITS};
use crate::tensor::{split_shape, DenseTensor};

const LANES: usize = 8;
const SIGN_BIT: u64 = 1 << 63;

#[inline(always)]
pub(crate) fn flip(x: f64, negative: bool) -> f64 {
    f64::from_bits(x.to_bits() ^ ((negative as u64) << 63))
}

#[inline(always)]
fn flip_by_word(x: f64, word: u64, bit: usize) -> f64 {
    f64::from_bits(x.to_bits() ^ ((word << (63 - bit)) & SIGN_BIT))
}

#[inline]
fn combine(lanes: &[f64; LANES]) -> f64 {
    ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))
}

/// `sum_i s_i x_i` without bounds checks on the lengths.
#[inline]
pub(crate) fn signed_dot_words(words: &[u64], x: &[f64]) -> f64 {
    let mut acc = [0.0f64; LANES];
    let mut chunks = x.chunks_exact(WORD_BITS);
    for (chunk, &w) in (&mut chunks).zip(words) {
        for (block, lanes) in chunk.chunks_exact(LANES).enumerate() {
            for (l, &v) in lanes.iter().enumerate() {
                acc[l] += flip_by_word(v, w, block * LANES + l);
            }
        }
    }
    let rem = chunks.remainder();
    if !rem.is_empty() {
        let w = words[x.len() / WORD_BITS];
        for (b, &v) in rem.iter().enumerate() {
            acc[b % LANES] += flip_by_word(v, w, b);
        }
    }
    combine(&acc)
}

/// `<s, x>` computed by sign flips and additions.
pub fn signed_dot(s: &SignVector, x: &[f64]) -> Result<f64> {
    check_len(s.len(), x.len())?;
    Ok(signed_dot_words(s.words(), x))
}

/// Scalar reference for [`signed_dot`]: one accumulator, index order.
pub fn signed_dot_reference(s: &SignVector, x: &[f64]) -> Result<f64> {
    check_len(s.len(), x.len())?;
    Ok(x
        .iter()
        .enumerate()
        .fold(0.0, |acc, (i, &v)| acc + flip(v, s.is_negative(i))))
}

/// `A t` for a matrix `A`.
pub fn matvec_signed(a: &DenseTensor, t: &SignVector) -> Result<Vec<f64>> {
    let (m, n) = a.dims2()?;
    check_len(n, t.len())?;
    Ok(matvec_rows(a.data(), m, n, t))
}

/// `A^T s` for a matrix `A`.
pub fn matvec_signed_transpose(a: &DenseTensor, s: &SignVector) -> Result<Vec<f64>> {
    let (m, n) = a.dims2()?;
    check_len(m, s.len())?;
    let mut out = vec![0.0; n];
    accumulate_rows(&mut out, a.data(), n, s);
    Ok(out)
}

pub(crate) fn matvec_rows(data: &[f64], m: usize, n: usize, t: &SignVector) -> Vec<f64> {
    (0..m)
        .map(|i| signed_dot_words(t.words(), &data[i * n..(i + 1) * n]))
        .collect()
}

/// `out += sum_i s_i * row_i`, rows of length `out.len()`, taken in order.
pub(crate) fn accumulate_rows(out: &mut [f64], data: &[f64], n: usize, s: &SignVector) {
    for (i, row) in data.chunks_exact(n).enumerate() {
        let neg = s.is_negative(i);
        for (o, &v) in out.iter_mut().zip(row) {
            *o += flip(v, neg);
        }
    }
}

/// Given `y_prev = A t_old`, returns `A t_new` by touching only flipped columns.
pub fn delta_matvec(
    a: &DenseTensor,
    y_prev: &[f64],
    t_new: &SignVector,
    t_old: &SignVector,
) -> Result<Vec<f64>> {
    let (m, n) = a.dims2()?;
    check_len(n, t_new.len())?;
    check_len(n, t_old.len())?;
    check_len(m, y_prev.len())?;
    let mut y = y_prev.to_vec();
    delta_matvec_in_place(a.data(), n, &mut y, t_new, t_old);
    Ok(y)
}

/// Given `z_prev = A^T s_old`, returns `A^T s_new` by touching only flipped rows.
pub fn delta_matvec_transpose(
    a: &DenseTensor,
    z_prev: &[f64],
    s_new: &SignVector,
    s_old: &SignVector,
) -> Result<Vec<f64>> {
    let (m, n) = a.dims2()?;
    check_len(m, s_new.len())?;
    check_len(m, s_old.len())?;
    check_len(n, z_prev.len())?;
    let mut z = z_prev.to_vec();
    delta_matvec_transpose_in_place(a.data(), n, &mut z, s_new, s_old);
    Ok(z)
}

pub(crate) fn delta_matvec_in_place(
    data: &[f64],
    n: usize,
    y: &mut [f64],
    t_new: &SignVector,
    t_old: &SignVector,
) {
    let (to_neg, to_pos) = t_new.flips_from(t_old);
    if to_neg.is_empty() && to_pos.is_empty() {
        return;
    }
    for (yi, row) in y.iter_mut().zip(data.chunks_exact(n)) {
        let mut d = 0.0;
        for &j in &to_pos {
            d += row[j] + row[j];
        }
        for &j in &to_neg {
            d -= row[j] + row[j];
        }
        *yi += d;
    }
}

pub(crate) fn delta_matvec_transpose_in_place(
    data: &[f64],
    n: usize,
    z: &mut [f64],
    s_new: &SignVector,
    s_old: &SignVector,
) {
    let (to_neg, to_pos) = s_new.flips_from(s_old);
    for (rows, neg) in [(to_pos, false), (to_neg, true)] {
        for i in rows {
            let row = &data[i * n..(i + 1) * n];
            for (zj, &v) in z.iter_mut().zip(row) {
                *zj += flip(v + v, neg);
            }
        }
    }
}

/// `R <- R - alpha * s t^T`.
pub fn rank1_update(r: &mut DenseTensor, alpha: f64, s: &SignVector, t: &SignVector) -> Result<()> {
    let (m, n) = r.dims2()?;
    check_len(m, s.len())?;
    check_len(n, t.len())?;
    add_sign_outer(r.data_mut(), s, t, -alpha);
    Ok(())
}

/// `data[a * post + b] += coef * pre[a] * post[b]` over a row-major block.
pub(crate) fn add_sign_outer(data: &mut [f64], pre: &SignVector, post: &SignVector, coef: f64) {
    let n = post.len();
    let plus = flip(coef, false);
    for (a, row) in data.chunks_exact_mut(n).enumerate() {
        let c = flip(plus, pre.is_negative(a));
        for (chunk, &w) in row.chunks_mut(WORD_BITS).zip(post.words()) {
            for (b, v) in chunk.iter_mut().enumerate() {
                *v += flip_by_word(c, w, b);
            }
        }
    }
}

/// Adds `coefs[c] * pre[a] * post[b]` to entry `(a, c, b)` of a row-major
/// `(pre.len(), coefs.len(), post.len())` block.
pub(crate) fn add_channel_outer(data: &mut [f64], pre: &SignVector, post: &SignVector, coefs: &[f64]) {
    let n = post.len();
    let q = coefs.len();
    for (a, block) in data.chunks_exact_mut(q * n).enumerate() {
        let neg = pre.is_negative(a);
        for (row, &coef) in block.chunks_exact_mut(n).zip(coefs) {
            let c = flip(coef, neg);
            for (chunk, &w) in row.chunks_mut(WORD_BITS).zip(post.words()) {
                for (b, v) in chunk.iter_mut().enumerate() {
                    *v += flip_by_word(c, w, b);
                }
            }
        }
    }
}

/// `a ×_axis s`: contracts every axis except `axis` against its sign vector.
///
/// `others` holds one sign vector per remaining axis, in axis order.
pub fn axial_contract(a: &DenseTensor, axis: usize, others: &[SignVector]) -> Result<Vec<f64>> {
    let order = a.order();
    if axis >= order {
        return Err(Error::AxisOutOfRange { axis, order });
    }
    check_len(order - 1, others.len())?;
    let lens = a.shape().iter().enumerate().filter(|&(i, _)| i != axis);
    for ((_, &n), s) in lens.zip(others) {
        check_len(n, s.len())?;
    }
    let pre = SignVector::kron_all(&others[..axis]);
    let post = SignVector::kron_all(&others[axis..]);
    Ok(contract_split(a.data(), a.shape(), axis, &pre, &post))
}

/// Contraction with the sign tensors of the leading and trailing axes
/// already flattened into `pre` and `post`.
pub(crate) fn contract_split(
    data: &[f64],
    shape: &[usize],
    axis: usize,
    pre: &SignVector,
    post: &SignVector,
) -> Vec<f64> {
    let (npre, len, npost) = split_shape(shape, axis);
    debug_assert_eq!(pre.len(), npre);
    debug_assert_eq!(post.len(), npost);
    let mut out = vec![0.0; len];
    if npost == 1 {
        accumulate_rows(&mut out, data, len, pre);
        return out;
    }
    for (a, block) in data.chunks_exact(len * npost).enumerate() {
        let neg = pre.is_negative(a);
        for (o, row) in out.iter_mut().zip(block.chunks_exact(npost)) {
            *o += flip(signed_dot_words(post.words(), row), neg);
        }
    }
    out
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::LengthMismatch { expected, actual });
    }
    Ok(())
}
