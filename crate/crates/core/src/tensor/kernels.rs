//! Raw numeric kernels shared by the graph ops: GEMM, im2col/col2im.

/// `c = a * b + beta * c` for strided row/column-major views.
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
    c_strides: (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= span(m, k, a_strides), "gemm: lhs too short");
    assert!(b.len() >= span(k, n, b_strides), "gemm: rhs too short");
    assert!(c.len() >= span(m, n, c_strides), "gemm: output too short");
    // SAFETY: the asserts above guarantee every strided index the kernel
    // touches lies inside the three slices, and `c` does not alias `a`/`b`
    // because it is borrowed mutably.
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
            c_strides.0 as isize,
            c_strides.1 as isize,
        );
    }
}

/// Geometry of one convolution call. Input is `[batch, in_ch, height, width]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub ksize: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Rows of the unfolded matrix: one per (ky, kx, in_ch) triple.
    pub fn patch_len(&self) -> usize {
        self.ksize * self.ksize * self.in_ch
    }

    /// Columns of the unfolded matrix: one per (batch, oy, ox) output site.
    pub fn sites(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

pub(crate) fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let sites = g.sites();
    let plane = g.out_h * g.out_w;
    let mut cols = vec![0.0; g.patch_len() * sites];
    for b in 0..g.batch {
        for ky in 0..g.ksize {
            for kx in 0..g.ksize {
                for ci in 0..g.in_ch {
                    let row = (ky * g.ksize + kx) * g.in_ch + ci;
                    let src = &input[(b * g.in_ch + ci) * g.height * g.width..];
                    let dst = &mut cols[row * sites + b * plane..row * sites + (b + 1) * plane];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.width as isize {
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

pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let sites = g.sites();
    let plane = g.out_h * g.out_w;
    let mut out = vec![0.0; g.batch * g.in_ch * g.height * g.width];
    for b in 0..g.batch {
        for ky in 0..g.ksize {
            for kx in 0..g.ksize {
                for ci in 0..g.in_ch {
                    let row = (ky * g.ksize + kx) * g.in_ch + ci;
                    let src = &cols[row * sites + b * plane..row * sites + (b + 1) * plane];
                    let base = (b * g.in_ch + ci) * g.height * g.width;
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let dst_row = base + iy as usize * g.width;
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.width as isize {
                                out[dst_row + ix as usize] += src[oy * g.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Numerically stable `ln(1 + e^x)`.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
