//! Per-image convolution kernels on NCHW planes.
//!
//! All three share one index relation between the large ("input") side and
//! the small ("output") side of a convolution: `i = o * stride + k - pad`.
//! Transposed convolution reuses them with the roles of the sides swapped.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_c * self.out_h * self.out_w
    }

    pub fn weight_len(&self) -> usize {
        self.out_c * self.in_c * self.kh * self.kw
    }
}

/// Output positions `o` in `[lo, hi)` with `0 <= o*stride + k - pad < in_len`.
#[inline]
fn axis_range(out_len: usize, in_len: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // Largest o with o*stride + k - pad <= in_len - 1.
    let top = in_len + pad;
    let hi = if top > k {
        ((top - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

impl ConvGeom {
    /// Rows of the unfolded input: one per (input channel, kernel tap).
    fn col_rows(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// A 1x1 stride-1 unpadded convolution needs no unfolding.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `inp` into a `(in_c*kh*kw) x (out_h*out_w)` matrix.
fn im2col(g: &ConvGeom, inp: &[f32], col: &mut [f32]) {
    let (ip, op) = (g.in_h * g.in_w, g.out_plane());
    col.fill(0.0);
    for ic in 0..g.in_c {
        let plane = &inp[ic * ip..(ic + 1) * ip];
        for ky in 0..g.kh {
            let (oy0, oy1) = axis_range(g.out_h, g.in_h, g.stride, ky, g.pad);
            for kx in 0..g.kw {
                let (ox0, ox1) = axis_range(g.out_w, g.in_w, g.stride, kx, g.pad);
                if ox0 >= ox1 {
                    continue;
                }
                let row = &mut col[((ic * g.kh + ky) * g.kw + kx) * op..][..op];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let irow = &plane[iy * g.in_w..(iy + 1) * g.in_w];
                    let ix0 = ox0 * g.stride + kx - g.pad;
                    let dst = &mut row[oy * g.out_w + ox0..oy * g.out_w + ox1];
                    for (d, s) in dst.iter_mut().zip(irow[ix0..].iter().step_by(g.stride)) {
                        *d = *s;
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds `col` back onto `din`.
fn col2im(g: &ConvGeom, col: &[f32], din: &mut [f32]) {
    let (ip, op) = (g.in_h * g.in_w, g.out_plane());
    for ic in 0..g.in_c {
        let plane = &mut din[ic * ip..(ic + 1) * ip];
        for ky in 0..g.kh {
            let (oy0, oy1) = axis_range(g.out_h, g.in_h, g.stride, ky, g.pad);
            for kx in 0..g.kw {
                let (ox0, ox1) = axis_range(g.out_w, g.in_w, g.stride, kx, g.pad);
                if ox0 >= ox1 {
                    continue;
                }
                let row = &col[((ic * g.kh + ky) * g.kw + kx) * op..][..op];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let irow = &mut plane[iy * g.in_w..(iy + 1) * g.in_w];
                    let ix0 = ox0 * g.stride + kx - g.pad;
                    let src = &row[oy * g.out_w + ox0..oy * g.out_w + ox1];
                    for (d, s) in irow[ix0..].iter_mut().step_by(g.stride).zip(src) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// `c = alpha * a * b + beta * c` on row-major slices with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_rs: usize,
    a_cs: usize,
    b: &[f32],
    b_rs: usize,
    b_cs: usize,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe matrices that lie inside the given
    // slices (checked by the callers' geometry) and `c` does not alias.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs as isize,
            a_cs as isize,
            b.as_ptr(),
            b_rs as isize,
            b_cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out[oc] += sum_ic w[oc, ic] * in[ic]` (correlation). `out` must be
/// pre-initialized (zero or bias).
pub fn conv_forward(g: &ConvGeom, inp: &[f32], w: &[f32], out: &mut [f32]) {
    let (kr, op) = (g.col_rows(), g.out_plane());
    assert!(inp.len() >= g.in_len() && w.len() >= g.weight_len() && out.len() >= g.out_len());
    let owned;
    let col: &[f32] = if g.is_pointwise() {
        inp
    } else {
        let mut c = vec![0.0; kr * op];
        im2col(g, inp, &mut c);
        owned = c;
        &owned
    };
    gemm(g.out_c, kr, op, w, kr, 1, col, op, 1, 1.0, out);
}

/// Adjoint of [`conv_forward`] with respect to its input:
/// `din[ic] += sum_oc w[oc, ic] * dout[oc]` scattered back through the window.
pub fn conv_backward_data(g: &ConvGeom, dout: &[f32], w: &[f32], din: &mut [f32]) {
    let (kr, op) = (g.col_rows(), g.out_plane());
    assert!(dout.len() >= g.out_len() && w.len() >= g.weight_len() && din.len() >= g.in_len());
    if g.is_pointwise() {
        gemm(kr, g.out_c, op, w, 1, kr, dout, op, 1, 1.0, din);
        return;
    }
    let mut dcol = vec![0.0; kr * op];
    gemm(kr, g.out_c, op, w, 1, kr, dout, op, 1, 0.0, &mut dcol);
    col2im(g, &dcol, din);
}

/// Weight gradient of [`conv_forward`]: `dw[oc, ic, ky, kx] += sum dout * in`.
/// Accumulates into f64.
pub fn conv_backward_weight(g: &ConvGeom, inp: &[f32], dout: &[f32], dw: &mut [f64]) {
    let (kr, op) = (g.col_rows(), g.out_plane());
    assert!(inp.len() >= g.in_len() && dout.len() >= g.out_len() && dw.len() >= g.weight_len());
    let owned;
    let col: &[f32] = if g.is_pointwise() {
        inp
    } else {
        let mut c = vec![0.0; kr * op];
        im2col(g, inp, &mut c);
        owned = c;
        &owned
    };
    let mut tmp = vec![0.0f32; g.out_c * kr];
    gemm(g.out_c, op, kr, dout, op, 1, col, 1, op, 0.0, &mut tmp);
    for (d, t) in dw.iter_mut().zip(&tmp) {
        *d += *t as f64;
    }
}
