//! Raw slice kernels shared by the graph operations.

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers.
///
/// `op(a)` is `[m, k]`; with `trans_a` the buffer `a` holds `[k, m]`.
/// Likewise `op(b)` is `[k, n]`, stored as `[n, k]` when `trans_b`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assertion above bounds every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Columns of the unfolded input: one per output position of every sample.
    pub fn cols(&self) -> usize {
        self.batch * self.out_plane()
    }
}

/// Unfolds `[N, C, H, W]` into `[C*kh*kw, N*out_h*out_w]`.
pub fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncols = g.cols();
    let mut cols = vec![0.0; g.patch_len() * ncols];
    let plane = g.out_plane();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let src = &input[(n * g.c_in + c) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut dst_row[n * plane..(n + 1) * plane];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..][..g.w];
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[oy * g.out_w + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into `[N, C, H, W]`.
pub fn col2im_add(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let ncols = g.cols();
    let plane = g.out_plane();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let dst = &mut out[(n * g.c_in + c) * g.h * g.w..][..g.h * g.w];
                    let src = &src_row[n * plane..(n + 1) * plane];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[iy as usize * g.w + ix as usize] += src[oy * g.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[A, B, P]` -> `[B, A, P]` for contiguous planes of length `P`.
pub fn swap_outer(src: &[f64], a: usize, b: usize, plane: usize) -> Vec<f64> {
    let mut dst = vec![0.0; src.len()];
    for i in 0..a {
        for j in 0..b {
            dst[(j * a + i) * plane..][..plane].copy_from_slice(&src[(i * b + j) * plane..][..plane]);
        }
    }
    dst
}

/// Transposes each `[m, n]` matrix of a stack of `batch` matrices.
pub fn transpose_stack(src: &[f64], batch: usize, m: usize, n: usize) -> Vec<f64> {
    let mut dst = vec![0.0; src.len()];
    for b in 0..batch {
        let s = &src[b * m * n..][..m * n];
        let d = &mut dst[b * m * n..][..m * n];
        for i in 0..m {
            for j in 0..n {
                d[j * m + i] = s[i * n + j];
            }
        }
    }
    dst
}
