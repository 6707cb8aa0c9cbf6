//! Dense kernels shared by the forward and backward passes.

/// Row-major view description for one gemm operand.
#[derive(Clone, Copy)]
pub(crate) struct Operand<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    /// Read the stored `rows x cols` matrix as its transpose.
    pub transposed: bool,
}

impl<'a> Operand<'a> {
    pub fn plain(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: true,
        }
    }

    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `a · b` for row-major operands (optionally read transposed).
pub(crate) fn gemm(a: Operand<'_>, b: Operand<'_>) -> Vec<f64> {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "gemm inner dimensions");
    assert_eq!(a.data.len(), a.rows * a.cols);
    assert_eq!(b.data.len(), b.rows * b.cols);
    let mut out = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the asserts above pin every operand buffer to exactly the extent
    // implied by its dimensions and strides, and `out` holds m*n elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

pub(crate) const GELU_COEFF: f64 = 0.044_715;

pub(crate) fn gelu_scale() -> f64 {
    (2.0 / std::f64::consts::PI).sqrt()
}

pub(crate) fn gelu_tanh(x: f64) -> f64 {
    let u = gelu_scale() * (x + GELU_COEFF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_tanh_grad(x: f64) -> f64 {
    let c = gelu_scale();
    let u = c * (x + GELU_COEFF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEFF * x * x)
}
