//! Raw numeric kernels over row-major `f64` buffers. Shapes are validated by
//! the callers in `tensor.rs`; these functions assume consistent input.

use crate::array::numel;

/// Right-aligned broadcast of two shapes, or `None` when incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// True when `small` broadcasts to exactly `big`.
pub fn broadcasts_to(small: &[usize], big: &[usize]) -> bool {
    broadcast_shape(small, big).as_deref() == Some(big)
}

/// Element strides of `shape` viewed inside `out`, with 0 on broadcast axes.
fn strides_in(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - shape.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 && out[i + offset] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Merges adjacent axes that every operand traverses contiguously, so the
/// innermost run is as long as possible.
fn coalesce<const K: usize>(out: &[usize], strides: [&[usize]; K]) -> (Vec<usize>, [Vec<usize>; K]) {
    let mut dims = vec![out[0]];
    let mut st: [Vec<usize>; K] = std::array::from_fn(|k| vec![strides[k][0]]);
    for d in 1..out.len() {
        let last = dims.len() - 1;
        let mergeable = (0..K).all(|k| st[k][last] == strides[k][d] * out[d]);
        if mergeable {
            dims[last] *= out[d];
            for k in 0..K {
                st[k][last] = strides[k][d];
            }
        } else {
            dims.push(out[d]);
            for k in 0..K {
                st[k].push(strides[k][d]);
            }
        }
    }
    (dims, st)
}

/// Walks every position of `out` in row-major order, calling `f` with the
/// linear output index and the matching offsets into each operand.
fn walk<const K: usize>(out: &[usize], strides: [&[usize]; K], mut f: impl FnMut(usize, [usize; K])) {
    let total = numel(out);
    if total == 0 {
        return;
    }
    if out.is_empty() {
        f(0, [0; K]);
        return;
    }
    let (out, strides) = coalesce(out, strides);
    let rank = out.len();
    let inner = out[rank - 1];
    let inner_strides: [usize; K] = std::array::from_fn(|k| strides[k][rank - 1]);
    let mut idx = vec![0usize; rank];
    let mut base = [0usize; K];
    let mut linear = 0;
    for _ in 0..total / inner {
        for j in 0..inner {
            let offs = std::array::from_fn(|k| base[k] + j * inner_strides[k]);
            f(linear, offs);
            linear += 1;
        }
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            for k in 0..K {
                base[k] += strides[k][d];
            }
            if idx[d] < out[d] {
                break;
            }
            for k in 0..K {
                base[k] -= strides[k][d] * out[d];
            }
            idx[d] = 0;
        }
    }
}

pub fn zip_broadcast(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    if b.len() == 1 && a_shape == out_shape {
        let y = b[0];
        return a.iter().map(|&x| f(x, y)).collect();
    }
    if a.len() == 1 && b_shape == out_shape {
        let x = a[0];
        return b.iter().map(|&y| f(x, y)).collect();
    }
    let sa = strides_in(a_shape, out_shape);
    let sb = strides_in(b_shape, out_shape);
    let mut out = vec![0.0; numel(out_shape)];
    walk(out_shape, [&sa, &sb], |i, [oa, ob]| out[i] = f(a[oa], b[ob]));
    out
}

pub fn expand(x: &[f64], shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    if shape == out_shape {
        return x.to_vec();
    }
    let s = strides_in(shape, out_shape);
    let mut out = vec![0.0; numel(out_shape)];
    walk(out_shape, [&s], |i, [o]| out[i] = x[o]);
    out
}

/// Sums `x` (of `shape`) down to `target`, which must broadcast to `shape`.
pub fn reduce_to(x: &[f64], shape: &[usize], target: &[usize]) -> Vec<f64> {
    if shape == target {
        return x.to_vec();
    }
    let s = strides_in(target, shape);
    let mut out = vec![0.0; numel(target)];
    walk(shape, [&s], |i, [o]| out[o] += x[i]);
    out
}

/// `c = a (m×k) · b (k×n)` with explicit element strides on the operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every operand slice covers the full strided extent described by
    // (m, k, n) and its strides; `c` is a dense m×n row-major block.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, k as isize, 1, b, n as isize, 1, 0.0, &mut c);
    c
}

pub fn transpose2(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Geometry of a stride-1 square-kernel convolution over NCHW input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.height + 2 * self.pad + 1 - self.kernel
    }

    pub fn out_w(&self) -> usize {
        self.width + 2 * self.pad + 1 - self.kernel
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn in_size(&self) -> usize {
        self.in_ch * self.height * self.width
    }

    fn out_size(&self) -> usize {
        self.out_ch * self.col_cols()
    }

    /// Unfolds one image into a (C·k·k) × (H_out·W_out) column matrix.
    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let (oh, ow, k, p) = (self.out_h(), self.out_w(), self.kernel, self.pad as isize);
        let (h, w) = (self.height as isize, self.width as isize);
        for c in 0..self.in_ch {
            let plane = &x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = oy as isize + ky as isize - p;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = ox as isize + kx as isize - p;
                            *v = if ix < 0 || ix >= w { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], x: &mut [f64]) {
        let (oh, ow, k, p) = (self.out_h(), self.out_w(), self.kernel, self.pad as isize);
        let (h, w) = (self.height as isize, self.width as isize);
        for c in 0..self.in_ch {
            let plane = &mut x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &col[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = oy as isize + ky as isize - p;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for ox in 0..ow {
                            let ix = ox as isize + kx as isize - p;
                            if ix >= 0 && ix < w {
                                dst[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// y[b] = W · im2col(x[b])
pub fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut col = vec![0.0; rows * cols];
    let mut y = vec![0.0; g.batch * g.out_size()];
    for b in 0..g.batch {
        g.im2col(&x[b * g.in_size()..(b + 1) * g.in_size()], &mut col);
        let out = &mut y[b * g.out_size()..(b + 1) * g.out_size()];
        gemm(g.out_ch, rows, cols, w, rows as isize, 1, &col, cols as isize, 1, 0.0, out);
    }
    y
}

/// dx[b] = col2im(Wᵀ · gy[b])
pub fn conv_input_grad(g: &ConvGeom, gy: &[f64], w: &[f64]) -> Vec<f64> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut col = vec![0.0; rows * cols];
    let mut dx = vec![0.0; g.batch * g.in_size()];
    for b in 0..g.batch {
        let gyb = &gy[b * g.out_size()..(b + 1) * g.out_size()];
        gemm(rows, g.out_ch, cols, w, 1, rows as isize, gyb, cols as isize, 1, 0.0, &mut col);
        g.col2im(&col, &mut dx[b * g.in_size()..(b + 1) * g.in_size()]);
    }
    dx
}

/// dW = Σ_b gy[b] · im2col(x[b])ᵀ
pub fn conv_weight_grad(g: &ConvGeom, x: &[f64], gy: &[f64]) -> Vec<f64> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut col = vec![0.0; rows * cols];
    let mut dw = vec![0.0; g.out_ch * rows];
    for b in 0..g.batch {
        g.im2col(&x[b * g.in_size()..(b + 1) * g.in_size()], &mut col);
        let gyb = &gy[b * g.out_size()..(b + 1) * g.out_size()];
        gemm(g.out_ch, cols, rows, gyb, cols as isize, 1, &col, 1, cols as isize, 1.0, &mut dw);
    }
    dw
}

pub fn gather(x: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| x[i]).collect()
}

pub fn scatter_add(g: &[f64], idx: &[usize], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (&i, &v) in idx.iter().zip(g) {
        out[i] += v;
    }
    out
}
