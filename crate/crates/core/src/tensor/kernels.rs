//! Numeric kernels behind the primitives. All functions work on raw
//! row-major slices; shape validation happens in the tape.

/// `c = a · b + beta · c` for row-major operands given by (row, column) strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the callers pass slices covering every index reached through the
    // given strides; `c` is a dense m×n row-major block.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of one image in a strided, zero-padded correlation.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one `[C,H,W]` image into a `[C·kh·kw, oh·ow]` patch matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ncol = g.cols();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a patch matrix back onto an image, accumulating.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let ncol = g.cols();
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` when viewed inside the broadcast shape `out` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - shape.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every index of `out`, yielding the linear offsets into the two operands.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    let total: usize = out.iter().product();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut lin = 0;
    while lin < total {
        for j in 0..inner {
            f(lin + j, oa + j * ia, ob + j * ib);
        }
        lin += inner;
        // carry into the outer axes
        let mut axis = rank - 1;
        while axis > 0 {
            axis -= 1;
            idx[axis] += 1;
            oa += sa[axis];
            ob += sb[axis];
            if idx[axis] < out[axis] {
                break;
            }
            oa -= sa[axis] * out[axis];
            ob -= sb[axis] * out[axis];
            idx[axis] = 0;
        }
    }
}

pub(crate) fn broadcast_binary(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    op: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| op(x, y)).collect();
    }
    let total: usize = out_shape.iter().product();
    let mut out = vec![0.0; total];
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| out[o] = op(a[ia], b[ib]));
    out
}

/// Sums `grad` (shaped `out_shape`) down to `target` by reducing broadcast axes.
pub(crate) fn reduce_to_shape(grad: &[f64], out_shape: &[usize], target: &[usize]) -> Vec<f64> {
    if out_shape == target {
        return grad.to_vec();
    }
    let n: usize = target.iter().product();
    let mut acc = vec![0.0; n];
    let st = broadcast_strides(target, out_shape);
    let zeros = vec![0; out_shape.len()];
    for_each_broadcast(out_shape, &st, &zeros, |o, it, _| acc[it] += grad[o]);
    acc
}

/// Expands `src` (shaped `src_shape`, broadcast-compatible) to `out_shape`.
pub(crate) fn expand_to_shape(src: &[f64], src_shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    let total: usize = out_shape.iter().product();
    let mut out = vec![0.0; total];
    let ss = broadcast_strides(src_shape, out_shape);
    let zeros = vec![0; out_shape.len()];
    for_each_broadcast(out_shape, &ss, &zeros, |o, is, _| out[o] = src[is]);
    out
}

/// `(outer, classes, inner)` view for reductions over the class axis:
/// axis 0 for rank-1 tensors, axis 1 otherwise.
pub(crate) fn class_axis_layout(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        0 => (1, 1, 1),
        1 => (1, shape[0], 1),
        _ => (shape[0], shape[1], shape[2..].iter().product()),
    }
}

pub(crate) fn softmax(x: &[f64], shape: &[usize]) -> Vec<f64> {
    let (outer, classes, inner) = class_axis_layout(shape);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        let base = o * classes * inner;
        for i in 0..inner {
            let mut max = f64::NEG_INFINITY;
            for c in 0..classes {
                max = max.max(x[base + c * inner + i]);
            }
            let mut sum = 0.0;
            for c in 0..classes {
                let e = (x[base + c * inner + i] - max).exp();
                out[base + c * inner + i] = e;
                sum += e;
            }
            for c in 0..classes {
                out[base + c * inner + i] /= sum;
            }
        }
    }
    out
}

pub(crate) fn log_softmax(x: &[f64], shape: &[usize]) -> Vec<f64> {
    let (outer, classes, inner) = class_axis_layout(shape);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        let base = o * classes * inner;
        for i in 0..inner {
            let mut max = f64::NEG_INFINITY;
            for c in 0..classes {
                max = max.max(x[base + c * inner + i]);
            }
            let mut sum = 0.0;
            for c in 0..classes {
                sum += (x[base + c * inner + i] - max).exp();
            }
            let lse = max + sum.ln();
            for c in 0..classes {
                out[base + c * inner + i] = x[base + c * inner + i] - lse;
            }
        }
    }
    out
}
