//! Scalar abstraction so the numeric core can run in f32 (training) or
//! f64 (finite-difference checks) without duplicated code.

use nalgebra::RealField;

/// Floating-point scalar usable throughout the engine.
pub trait Real: RealField + Copy + Default + 'static {
    fn of(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// C(m,n) = alpha * A(m,k) * B(k,n) + beta * C with explicit row/col
    /// strides for A and B; C is row-major contiguous.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(c.len() >= m * n, "gemm output too small");
                unsafe {
                    $gemm(
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
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// sigmoid(x) = 1 / (1 + e^-x), stable for large |x|.
#[inline]
pub fn sigmoid<S: Real>(x: S) -> S {
    let one = S::one();
    if x >= S::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}
