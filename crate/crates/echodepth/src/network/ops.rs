//! Convolution compute cores shared by forward and backward passes.
//!
//! Everything reduces to three routines over one index map
//! (`src = out·stride + k − pad`):
//!
//! * `gather_conv` — convolution as im2col + GEMM,
//! * `scatter_conv` — its exact adjoint (transposed convolution / input
//!   gradient), scatter-adding through the same map,
//! * `weight_grad` — the weight gradient for either direction.
//!
//! Because `scatter_conv` transposes `gather_conv`'s index map entry for
//! entry, the adjoint identity ⟨gather(a), b⟩ = ⟨a, scatter(b)⟩ holds to
//! rounding error by construction.

use ndarray::{Array2, ArrayView2};

/// Output length of a strided window along one axis.
pub(crate) fn conv_out_len(n: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    (n + 2 * p).checked_sub(k).map(|d| d / s + 1)
}

/// Unfold `x` of shape [c, h, w] into a [c·kh·kw, oh·ow] patch matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let mut cols = Array2::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..oh {
                    let si = oi * sh + ki;
                    if si < ph || si - ph >= h {
                        continue;
                    }
                    let src_row = (ci * h + (si - ph)) * w;
                    for oj in 0..ow {
                        let sj = oj * sw + kj;
                        if sj < pw || sj - pw >= w {
                            continue;
                        }
                        cols[[row, oi * ow + oj]] = x[src_row + (sj - pw)];
                    }
                }
            }
        }
    }
    cols
}

/// Fold a [c·kh·kw, oh·ow] patch matrix back onto [c, h, w], accumulating
/// overlaps. Exact adjoint of `im2col`.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..oh {
                    let si = oi * sh + ki;
                    if si < ph || si - ph >= h {
                        continue;
                    }
                    let dst_row = (ci * h + (si - ph)) * w;
                    for oj in 0..ow {
                        let sj = oj * sw + kj;
                        if sj < pw || sj - pw >= w {
                            continue;
                        }
                        out[dst_row + (sj - pw)] += cols[[row, oi * ow + oj]];
                    }
                }
            }
        }
    }
    out
}

/// Convolution (cross-correlation): x [ci, h, w] with weights
/// [co, ci, kh, kw] → [co, oh, ow]. Caller guarantees the shape arithmetic.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gather_conv(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    weights: &[f64],
    co: usize,
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let cols = im2col(x, c, h, w, kh, kw, sh, sw, ph, pw, oh, ow);
    let wmat = ArrayView2::from_shape((co, c * kh * kw), weights).expect("weight layout");
    let y = wmat.dot(&cols);
    y.into_raw_vec_and_offset().0
}

/// Adjoint of `gather_conv`: y [co, oh, ow] scattered back through the same
/// weights onto a [ci, h, w] grid.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scatter_conv(
    y: &[f64],
    (co, oh, ow): (usize, usize, usize),
    weights: &[f64],
    ci: usize,
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
    (h, w): (usize, usize),
) -> Vec<f64> {
    let wmat = ArrayView2::from_shape((co, ci * kh * kw), weights).expect("weight layout");
    let ymat = ArrayView2::from_shape((co, oh * ow), y).expect("output layout");
    let cols = wmat.t().dot(&ymat);
    col2im(&cols, ci, h, w, kh, kw, sh, sw, ph, pw, oh, ow)
}

/// Weight gradient for the gather direction: dy [co, oh, ow] against
/// x [ci, h, w] → [co, ci, kh, kw].
#[allow(clippy::too_many_arguments)]
pub(crate) fn weight_grad(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    dy: &[f64],
    (co, oh, ow): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
) -> Vec<f64> {
    let cols = im2col(x, c, h, w, kh, kw, sh, sw, ph, pw, oh, ow);
    let dymat = ArrayView2::from_shape((co, oh * ow), dy).expect("grad layout");
    let dw = dymat.dot(&cols.t());
    dw.into_raw_vec_and_offset().0
}
