//! Raw forward/backward kernels on flat buffers. Shapes are validated by the
//! tape before any of these run.

use super::Real;

/// `c = a · b + beta · c` for row/column-strided operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rsa: isize,
    csa: isize,
    b: &[T],
    rsb: isize,
    csb: isize,
    beta: T,
    c: &mut [T],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(max_offset(m, k, rsa, csa) < a.len().max(1));
    debug_assert!(max_offset(k, n, rsb, csb) < b.len().max(1));
    debug_assert!(max_offset(m, n, rsc, csc) < c.len());
    // SAFETY: the debug assertions above spell out the contract; every caller
    // derives strides from the same dimensions it sized the buffers with.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn max_offset(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize
}

pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    pub fn hw(&self) -> usize {
        self.h * self.w
    }
    pub fn k(&self) -> usize {
        self.c_in * 9
    }
}

/// Unfolds 3×3 zero-padded neighbourhoods into a `[C_in·9, N·H·W]` matrix.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (h, w, hw) = (g.h, g.w, g.hw());
    let cols_n = g.n * hw;
    let mut cols = vec![T::zero(); g.k() * cols_n];
    for ci in 0..g.c_in {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * cols_n;
                for n in 0..g.n {
                    let src = &x[(n * g.c_in + ci) * hw..][..hw];
                    let dst = &mut cols[row + n * hw..][..hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let srow = &src[sy as usize * w..][..w];
                        let drow = &mut dst[y * w..][..w];
                        let x0 = if kx == 0 { 1 } else { 0 };
                        let x1 = if kx == 2 { w - 1 } else { w };
                        for xx in x0..x1 {
                            drow[xx] = srow[xx + kx - 1];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let (h, w, hw) = (g.h, g.w, g.hw());
    let cols_n = g.n * hw;
    let mut dx = vec![T::zero(); g.n * g.c_in * hw];
    for ci in 0..g.c_in {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * cols_n;
                for n in 0..g.n {
                    let dst = &mut dx[(n * g.c_in + ci) * hw..][..hw];
                    let src = &cols[row + n * hw..][..hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let drow = &mut dst[sy as usize * w..][..w];
                        let srow = &src[y * w..][..w];
                        let x0 = if kx == 0 { 1 } else { 0 };
                        let x1 = if kx == 2 { w - 1 } else { w };
                        for xx in x0..x1 {
                            drow[xx + kx - 1] = drow[xx + kx - 1] + srow[xx];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Returns the output `[N, C_out, H, W]` and the unfolded input for reuse in
/// the backward pass.
pub(crate) fn conv2d_forward<T: Real>(
    x: &[T],
    kernels: &[T],
    bias: &[T],
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>) {
    let cols = im2col(x, g);
    let (hw, k) = (g.hw(), g.k());
    let cols_n = g.n * hw;
    // One GEMM over the whole batch: tmp[Co, N·HW] = K[Co, K] · cols[K, N·HW]
    let mut tmp = vec![T::zero(); g.c_out * cols_n];
    gemm(
        g.c_out,
        k,
        cols_n,
        kernels,
        k as isize,
        1,
        &cols,
        cols_n as isize,
        1,
        T::zero(),
        &mut tmp,
        cols_n as isize,
        1,
    );
    let mut y = vec![T::zero(); g.n * g.c_out * hw];
    for n in 0..g.n {
        for co in 0..g.c_out {
            let src = &tmp[co * cols_n + n * hw..][..hw];
            let dst = &mut y[(n * g.c_out + co) * hw..][..hw];
            let b = bias[co];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
    (y, cols)
}

/// Accumulates kernel and bias gradients; returns the input gradient.
pub(crate) fn conv2d_backward<T: Real>(
    dy: &[T],
    kernels: &[T],
    cols: &[T],
    g: &ConvGeom,
    dkernels: &mut [T],
    dbias: &mut [T],
) -> Vec<T> {
    let (hw, k) = (g.hw(), g.k());
    let cols_n = g.n * hw;
    // dY rearranged to [Co, N·HW]
    let mut dyt = vec![T::zero(); g.c_out * cols_n];
    for n in 0..g.n {
        for co in 0..g.c_out {
            let src = &dy[(n * g.c_out + co) * hw..][..hw];
            dyt[co * cols_n + n * hw..][..hw].copy_from_slice(src);
        }
    }
    for (co, row) in dyt.chunks(cols_n).enumerate() {
        dbias[co] = dbias[co] + row.iter().copied().sum::<T>();
    }
    // dK[Co,K] += dYt[Co,N·HW] · colsᵀ[N·HW,K]
    gemm(
        g.c_out,
        cols_n,
        k,
        &dyt,
        cols_n as isize,
        1,
        cols,
        1,
        cols_n as isize,
        T::one(),
        dkernels,
        k as isize,
        1,
    );
    // dcols[K,N·HW] = Kᵀ[K,Co] · dYt[Co,N·HW]
    let mut dcols = vec![T::zero(); k * cols_n];
    gemm(
        k,
        g.c_out,
        cols_n,
        kernels,
        1,
        k as isize,
        &dyt,
        cols_n as isize,
        1,
        T::zero(),
        &mut dcols,
        cols_n as isize,
        1,
    );
    col2im(&dcols, g)
}

/// 2×2 max pooling. Returns the pooled values and, for each output, the
/// flat input index of the winning element (first maximum in row-major order).
pub(crate) fn maxpool_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + 2 * oy * w + 2 * ox;
                let mut best = x[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                y.push(best);
                arg.push(best_idx as u32);
            }
        }
    }
    (y, arg)
}

pub(crate) fn upsample_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut y[p * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[oy * ow + ox] = src[(oy / 2) * w + ox / 2];
            }
        }
    }
    y
}

pub(crate) fn upsample_backward<T: Real>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dy[p * oh * ow..][..oh * ow];
        let dst = &mut dx[p * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let d = &mut dst[(oy / 2) * w + ox / 2];
                *d = *d + src[oy * ow + ox];
            }
        }
    }
    dx
}

/// ‖a − b‖_F, accumulated in double precision.
pub fn frobenius_distance<T: Real>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len(), "frobenius_distance: length mismatch");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}
