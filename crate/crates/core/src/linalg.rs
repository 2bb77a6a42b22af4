//! Thin GEMM wrapper and the im2col/col2im pair used by the convolution op.

/// `c = a' · b' + beta · c` for row-major operands, where `a'` is `a` or its
/// transpose (`a_t`), likewise for `b`. Logical shapes: `a'` is m×k, `b'` is
/// k×n, `c` is m×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the strided extents described above,
    // and `c` does not alias `a` or `b`.
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

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source offset for output cell (oy, ox) under kernel tap (ki, kj), or
    /// `None` when the tap lands in the zero padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ki: usize, kj: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ki).checked_sub(self.padding)?;
        let x = (ox * self.stride + kj).checked_sub(self.padding)?;
        (y < self.height && x < self.width).then_some((y, x))
    }
}

/// Unfolds `input` (C×H×W) into a (C·kh·kw) × (H'·W') matrix.
pub(crate) fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let out_len = g.out_len();
    let mut cols = vec![0.0; g.patch_len() * out_len];
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * out_len..(row + 1) * out_len];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        if let Some((y, x)) = g.source(oy, ox, ki, kj) {
                            dst[oy * g.out_w + ox] = plane[y * g.width + x];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeometry, input_grad: &mut [f64]) {
    let out_len = g.out_len();
    for c in 0..g.channels {
        let plane = &mut input_grad[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * out_len..(row + 1) * out_len];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        if let Some((y, x)) = g.source(oy, ox, ki, kj) {
                            plane[y * g.width + x] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}
