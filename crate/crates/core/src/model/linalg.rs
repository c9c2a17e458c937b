//! Strided matrix views over flat buffers and the handful of kernels the
//! transformer needs.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of a model: `f32` for training, `f64` for
/// gradient checks.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// `c <- alpha * a * b + beta * c` on raw strided buffers.
    ///
    /// # Safety
    /// Every index reachable through the shapes and strides must lie inside
    /// the corresponding allocation, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

#[derive(Clone, Copy)]
pub struct MatRef<'a, F> {
    data: &'a [F],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

pub struct MatMut<'a, F> {
    data: &'a mut [F],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

fn extent(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

impl<'a, F: Scalar> MatRef<'a, F> {
    /// Row-major `rows x cols` view of the start of `data`.
    pub fn new(data: &'a [F], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a [F], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        assert!(extent(rows, cols, rs, cs) <= data.len(), "matrix view out of bounds");
        MatRef { data, rows, cols, rs, cs }
    }

    pub fn t(self) -> Self {
        MatRef {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    /// Columns `start..start + len`.
    pub fn cols(self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.cols);
        let offset = if len == 0 { 0 } else { start * self.cs };
        Self::strided(&self.data[offset..], self.rows, len, self.rs, self.cs)
    }

    pub fn rows(self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.rows);
        let offset = if len == 0 { 0 } else { start * self.rs };
        Self::strided(&self.data[offset..], len, self.cols, self.rs, self.cs)
    }
}

impl<'a, F: Scalar> MatMut<'a, F> {
    pub fn new(data: &'a mut [F], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a mut [F], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        assert!(extent(rows, cols, rs, cs) <= data.len(), "matrix view out of bounds");
        MatMut { data, rows, cols, rs, cs }
    }

    pub fn cols(self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.cols);
        let offset = if len == 0 { 0 } else { start * self.cs };
        let MatMut { data, rows, rs, cs, .. } = self;
        Self::strided(&mut data[offset..], rows, len, rs, cs)
    }
}

/// `c <- alpha * a * b + beta * c`.
pub fn gemm<F: Scalar>(c: MatMut<'_, F>, a: MatRef<'_, F>, b: MatRef<'_, F>, alpha: F, beta: F) {
    assert_eq!(a.cols, b.rows, "inner dimensions");
    assert_eq!((c.rows, c.cols), (a.rows, b.cols), "output shape");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // SAFETY: every view was bounds-checked at construction and `c` is an
    // exclusive borrow, so it cannot alias `a` or `b`.
    unsafe {
        F::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        )
    }
}

/// `out = x * w + b` for row-major `x: n x din`, `w: din x dout`.
pub fn linear<F: Scalar>(out: &mut [F], x: &[F], w: &[F], b: Option<&[F]>, n: usize, din: usize, dout: usize) {
    let beta = match b {
        Some(b) => {
            for row in out[..n * dout].chunks_exact_mut(dout) {
                row.copy_from_slice(b);
            }
            F::one()
        }
        None => F::zero(),
    };
    gemm(
        MatMut::new(out, n, dout),
        MatRef::new(x, n, din),
        MatRef::new(w, din, dout),
        F::one(),
        beta,
    );
}

/// Backward of [`linear`]: accumulates `dw += x^T dy`, `db += sum dy` when
/// requested, and writes or accumulates `dx = dy w^T`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<F: Scalar>(
    dy: &[F],
    x: &[F],
    w: &[F],
    n: usize,
    din: usize,
    dout: usize,
    dw: Option<&mut [F]>,
    db: Option<&mut [F]>,
    dx: Option<(&mut [F], bool)>,
) {
    if let Some(dw) = dw {
        gemm(
            MatMut::new(dw, din, dout),
            MatRef::new(x, n, din).t(),
            MatRef::new(dy, n, dout),
            F::one(),
            F::one(),
        );
    }
    if let Some(db) = db {
        for row in dy[..n * dout].chunks_exact(dout) {
            for (a, &g) in db.iter_mut().zip(row) {
                *a += g;
            }
        }
    }
    if let Some((dx, accumulate)) = dx {
        let beta = if accumulate { F::one() } else { F::zero() };
        gemm(
            MatMut::new(dx, n, din),
            MatRef::new(dy, n, dout),
            MatRef::new(w, din, dout).t(),
            F::one(),
            beta,
        );
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm; stores per-row mean and reciprocal std.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm<F: Scalar>(
    out: &mut [F],
    mean: &mut [F],
    rstd: &mut [F],
    x: &[F],
    gain: &[F],
    bias: &[F],
    n: usize,
    d: usize,
) {
    let eps = F::of(LN_EPS);
    let inv_d = F::one() / F::of(d as f64);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let m = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - m) * (v - m)).sum::<F>() * inv_d;
        let r = F::one() / (var + eps).sqrt();
        mean[i] = m;
        rstd[i] = r;
        for (j, o) in out[i * d..(i + 1) * d].iter_mut().enumerate() {
            *o = (row[j] - m) * r * gain[j] + bias[j];
        }
    }
}

/// Accumulates into `dx` (and `dgain`/`dbias` when given).
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<F: Scalar>(
    dx: &mut [F],
    mut dparams: Option<(&mut [F], &mut [F])>,
    dy: &[F],
    x: &[F],
    mean: &[F],
    rstd: &[F],
    gain: &[F],
    n: usize,
    d: usize,
) {
    let inv_d = F::one() / F::of(d as f64);
    for i in 0..n {
        let (m, r) = (mean[i], rstd[i]);
        let xr = &x[i * d..(i + 1) * d];
        let g = &dy[i * d..(i + 1) * d];
        let mut sum_dn = F::zero();
        let mut sum_dn_xhat = F::zero();
        for j in 0..d {
            let xhat = (xr[j] - m) * r;
            let dn = g[j] * gain[j];
            sum_dn += dn;
            sum_dn_xhat += dn * xhat;
        }
        let (mean_dn, mean_dn_xhat) = (sum_dn * inv_d, sum_dn_xhat * inv_d);
        for j in 0..d {
            let xhat = (xr[j] - m) * r;
            if let Some((dg, db)) = dparams.as_mut() {
                dg[j] += g[j] * xhat;
                db[j] += g[j];
            }
            dx[i * d + j] += (g[j] * gain[j] - mean_dn - xhat * mean_dn_xhat) * r;
        }
    }
}

const GELU_SCALE: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh approximation of GELU.
pub fn gelu<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_SCALE);
    let k = F::of(0.044715);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_SCALE);
    let k = F::of(0.044715);
    let half = F::of(0.5);
    let inner = c * (x + k * x * x * x);
    let th = inner.tanh();
    let sech2 = F::one() - th * th;
    half * (F::one() + th) + half * x * sech2 * c * (F::one() + F::of(3.0) * k * x * x)
}

/// Additive sinusoidal encoding of a (possibly fractional) position.
pub fn sinusoid_into<F: Scalar>(out: &mut [F], pos: f64) {
    let d = out.len();
    for i in 0..d / 2 {
        let freq = 10_000f64.powf(-(2.0 * i as f64) / d as f64);
        out[2 * i] += F::of((pos * freq).sin());
        out[2 * i + 1] += F::of((pos * freq).cos());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_with_transposes_and_column_slices() {
        // a: 2x3, b: 3x2
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0f64; 4];
        gemm(MatMut::new(&mut c, 2, 2), MatRef::new(&a, 2, 3), MatRef::new(&b, 3, 2), 1.0, 0.0);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
        // a^T a : 3x3, take middle column block
        let mut d = [0.0f64; 3];
        gemm(
            MatMut::new(&mut d, 3, 1),
            MatRef::new(&a, 2, 3).t(),
            MatRef::new(&a, 2, 3).cols(1, 1),
            1.0,
            0.0,
        );
        assert_eq!(d, [1.0 * 2.0 + 4.0 * 5.0, 2.0 * 2.0 + 5.0 * 5.0, 3.0 * 2.0 + 6.0 * 5.0]);
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "{x}");
        }
    }

    #[test]
    fn layer_norm_backward_matches_differences() {
        let (n, d) = (2, 5);
        let x: Vec<f64> = (0..n * d).map(|i| ((i * 7 % 11) as f64 - 4.0) * 0.3).collect();
        let gain: Vec<f64> = (0..d).map(|i| 1.0 + 0.1 * i as f64).collect();
        let bias = vec![0.05; d];
        let dy: Vec<f64> = (0..n * d).map(|i| ((i * 3 % 7) as f64 - 3.0) * 0.2).collect();
        let objective = |x: &[f64]| {
            let (mut o, mut m, mut r) = (vec![0.0; n * d], vec![0.0; n], vec![0.0; n]);
            layer_norm(&mut o, &mut m, &mut r, x, &gain, &bias, n, d);
            o.iter().zip(&dy).map(|(a, b)| a * b).sum::<f64>()
        };
        let (mut o, mut m, mut r) = (vec![0.0; n * d], vec![0.0; n], vec![0.0; n]);
        layer_norm(&mut o, &mut m, &mut r, &x, &gain, &bias, n, d);
        let mut dx = vec![0.0; n * d];
        layer_norm_backward(&mut dx, None, &dy, &x, &m, &r, &gain, n, d);
        for i in 0..n * d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += 1e-6;
            xm[i] -= 1e-6;
            let fd = (objective(&xp) - objective(&xm)) / 2e-6;
            assert!((fd - dx[i]).abs() < 1e-7, "{i}: {fd} vs {}", dx[i]);
        }
    }
}
