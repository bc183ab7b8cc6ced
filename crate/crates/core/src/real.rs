//! Element-precision abstraction.
//!
//! Kernels are generic over [`Real`], implemented for `f32` (single) and
//! `f64` (double). The trait adds to `num_traits::Float` only what the
//! kernels need: conversions, a name, and a row-major GEMM binding.

use std::fmt::{Debug, Display};

/// Floating-point element type for all kernels.
pub trait Real:
    num_traits::Float + num_traits::FloatConst + Debug + Display + Send + Sync + 'static
{
    /// Human-readable precision name ("single" / "double").
    const PRECISION_NAME: &'static str;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Row-major GEMM: `c = alpha * a @ b + beta * c` where `a` is `m x k`,
    /// `b` is `k x n`, `c` is `m x n`, all contiguous row-major.
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);
}

impl Real for f32 {
    const PRECISION_NAME: &'static str = "single";

    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        assert_eq!(a.len(), m * k);
        assert_eq!(b.len(), k * n);
        assert_eq!(c.len(), m * n);
        if m == 0 || n == 0 {
            return;
        }
        if k == 0 {
            for x in c.iter_mut() {
                *x = beta * *x;
            }
            return;
        }
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Real for f64 {
    const PRECISION_NAME: &'static str = "double";

    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        assert_eq!(a.len(), m * k);
        assert_eq!(b.len(), k * n);
        assert_eq!(c.len(), m * n);
        if m == 0 || n == 0 {
            return;
        }
        if k == 0 {
            for x in c.iter_mut() {
                *x = beta * *x;
            }
            return;
        }
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// Runtime precision selector used by configs and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::Single => "single",
            Precision::Double => "double",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "single" | "f32" => Some(Precision::Single),
            "double" | "f64" => Some(Precision::Double),
            _ => None,
        }
    }
}

impl serde::Serialize for Precision {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> serde::Deserialize<'de> for Precision {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        Precision::parse(&name).ok_or_else(|| {
            serde::de::Error::custom(format!(
                "unknown precision {name:?}; expected single or double"
            ))
        })
    }
}

impl Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_triple_loop_f32() {
        let a: Vec<f32> = (0..6).map(|i| i as f32 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f32> = (0..12).map(|i| (i as f32).sin()).collect(); // 3x4
        let mut c = vec![0.0f32; 8];
        f32::gemm(2, 3, 4, 1.0, &a, &b, 0.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let mut acc = 0.0f32;
                for p in 0..3 {
                    acc += a[i * 3 + p] * b[p * 4 + j];
                }
                assert!((acc - c[i * 4 + j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gemm_empty_inner_dim_scales_by_beta() {
        let mut c = vec![2.0f64; 4];
        f64::gemm(2, 0, 2, 1.0, &[], &[], 0.5, &mut c);
        assert_eq!(c, vec![1.0; 4]);
    }

    #[test]
    fn precision_names_round_trip() {
        assert_eq!(Precision::parse("single"), Some(Precision::Single));
        assert_eq!(Precision::parse("double"), Some(Precision::Double));
        assert_eq!(Precision::parse("half"), None);
        assert_eq!(f32::PRECISION_NAME, "single");
        assert_eq!(f64::PRECISION_NAME, "double");
    }
}
