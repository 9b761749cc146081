//! Test functions paired against densities.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Phi {
    /// `(π ε²)^{-1/2} exp(-(x-a)²/ε²)`.
    Gauss {
        a: f64,
        eps: f64,
    },
    /// `(1 - u²)^3` on `|u| < 1`, `u = (x-a)/w`; twice continuously differentiable.
    Bump {
        a: f64,
        w: f64,
    },
    Const {
        c: f64,
    },
}

impl Phi {
    pub fn gauss(a: f64, eps: f64) -> Self {
        Phi::Gauss { a, eps }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Phi::Gauss { a, eps } => {
                let u = (x - a) / eps;
                (-u * u).exp() / (std::f64::consts::PI.sqrt() * eps)
            }
            Phi::Bump { a, w } => {
                let u = (x - a) / w;
                if u.abs() < 1.0 {
                    (1.0 - u * u).powi(3)
                } else {
                    0.0
                }
            }
            Phi::Const { c } => c,
        }
    }

    /// Interval outside which `|φ|` is below `tol` (unbounded for constants).
    pub fn support(&self, tol: f64) -> (f64, f64) {
        match *self {
            Phi::Gauss { a, eps } => {
                let peak = 1.0 / (std::f64::consts::PI.sqrt() * eps);
                let r = eps * (peak / tol).ln().max(0.0).sqrt();
                (a - r, a + r)
            }
            Phi::Bump { a, w } => (a - w, a + w),
            Phi::Const { .. } => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    pub fn square(&self) -> PhiProduct {
        PhiProduct(*self, *self)
    }
}

/// Pointwise product of two test functions.
#[derive(Debug, Clone, Copy)]
pub struct PhiProduct(pub Phi, pub Phi);

impl PhiProduct {
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        self.0.eval(x) * self.1.eval(x)
    }
}

impl fmt::Display for Phi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phi::Gauss { a, eps } => write!(f, "gauss:{a},{eps}"),
            Phi::Bump { a, w } => write!(f, "bump:{a},{w}"),
            Phi::Const { c } => write!(f, "const:{c}"),
        }
    }
}

impl FromStr for Phi {
    type Err = Error;

    /// Parses `gauss:a,eps`, `bump:a,w` or `const:c`.
    fn from_str(s: &str) -> Result<Self, Error> {
        let bad = || Error::InvalidArgument(format!("cannot parse test function `{s}`"));
        let (kind, args) = s.split_once(':').ok_or_else(bad)?;
        let nums: Vec<f64> = args.split(',').map(|v| v.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad())?;
        match (kind, nums.as_slice()) {
            ("gauss", &[a, eps]) if eps > 0.0 => Ok(Phi::Gauss { a, eps }),
            ("bump", &[a, w]) if w > 0.0 => Ok(Phi::Bump { a, w }),
            ("const", &[c]) => Ok(Phi::Const { c }),
            _ => Err(bad()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::composite_legendre;

    #[test]
    fn gauss_has_unit_mass() {
        let g = Phi::gauss(0.3, 0.5);
        let m = composite_legendre(|x| g.eval(x), -8.0, 8.0, 64, 16);
        assert!((m - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bump_is_compact() {
        let b = Phi::Bump { a: 1.0, w: 0.5 };
        assert_eq!(b.eval(1.0), 1.0);
        assert_eq!(b.eval(1.5), 0.0);
        assert_eq!(b.eval(0.4), 0.0);
    }

    #[test]
    fn parse_round_trip() {
        for s in ["gauss:0,0.5", "bump:1.5,2", "const:1"] {
            let p: Phi = s.parse().unwrap();
            assert_eq!(p.to_string().parse::<Phi>().unwrap(), p);
        }
        assert!("gauss:0".parse::<Phi>().is_err());
        assert!("gauss:0,-1".parse::<Phi>().is_err());
        assert!("wave:1,2".parse::<Phi>().is_err());
    }

    #[test]
    fn support_bounds_tail() {
        let g = Phi::gauss(0.0, 0.5);
        let (lo, hi) = g.support(1e-300);
        assert!(g.eval(lo - 0.01) < 1e-300 && g.eval(hi + 0.01) < 1e-300);
    }
}
