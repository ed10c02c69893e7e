//! Phase-space contraction of the collision map relative to the smooth
//! measure `dμ0 ∝ cos φ dr dφ`, the entropy production `s = −log J` and the
//! rescaled field `H = (J − 1)/ε`.
//!
//! The map factors as a flight followed by a twist, so `log J` is the sum of
//! the flight integral `∫ p ∂κ/∂θ dt` and the twist term
//! `log(g'(φ) cos g(φ) / cos φ)`. A central finite-difference Jacobian of the
//! whole map serves as an independent check of both.

use std::f64::consts::FRAC_PI_2;

use crate::dynamics::{billiard_map, CollisionCoord, CollisionRecord, System, TwistModel};
use crate::error::{Error, Result};

/// Default bound on `|H|` above which a violation is reported.
pub const DEFAULT_H_BOUND: f64 = 50.0;

/// Default finite-difference step in `(r, φ)`.
pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// Largest disagreement between the stencils at `h` and `2h` that still
/// counts as a converged derivative.
pub const FD_CONSISTENCY: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LogJacobianBreakdown {
    pub flow: f64,
    pub twist: f64,
    pub total: f64,
    pub s: f64,
    pub h: f64,
}

impl LogJacobianBreakdown {
    pub fn new(flow: f64, twist: f64, epsilon: f64) -> Self {
        let total = flow + twist;
        let mut b = Self {
            flow,
            twist,
            total,
            s: 0.0,
            h: 0.0,
        };
        b.s = entropy_production(&b);
        b.h = h_field(&b, epsilon);
        b
    }
}

/// `log J` of the flight: the accumulated curvature-derivative integral.
#[inline]
pub fn log_jac_flow(curv_integral: f64) -> f64 {
    curv_integral
}

/// `log J` of the twist at the pre-twist outgoing angle `phi`.
pub fn log_jac_twist(phi: f64, tw: &TwistModel) -> Result<f64> {
    if tw.is_identity() {
        return Ok(0.0);
    }
    if phi.abs() >= FRAC_PI_2 {
        return Err(Error::Grazing {
            scatterer: usize::MAX,
            phi: phi.abs(),
        });
    }
    let g = tw.apply(phi);
    Ok((tw.derivative(phi) * g.cos() / phi.cos()).ln())
}

#[inline]
pub fn entropy_production(b: &LogJacobianBreakdown) -> f64 {
    -b.total
}

/// `(e^{log J} − 1)/ε`, zero when `ε = 0`.
pub fn h_field(b: &LogJacobianBreakdown, epsilon: f64) -> f64 {
    if epsilon == 0.0 {
        0.0
    } else {
        b.total.exp_m1() / epsilon
    }
}

/// Applies the map `n` times, failing on any error.
fn iterate(
    sys: &System,
    c: &CollisionCoord,
    n: usize,
) -> Result<(CollisionCoord, Vec<CollisionRecord>)> {
    let mut cur = *c;
    let mut recs = Vec::with_capacity(n);
    for _ in 0..n {
        let (next, rec) = billiard_map(sys, &cur)?;
        recs.push(rec);
        cur = next;
    }
    Ok((cur, recs))
}

/// Finite-difference `log J` of `T^n` at `c`.
///
/// Central differences of step `h` in `r` and `φ`; the perturbed orbits
/// must visit the same scatterers through the same lattice images as the
/// reference orbit, and the estimates at steps `h` and `2h` must agree to
/// [`FD_CONSISTENCY`]; otherwise the point is near a singularity and
/// [`Error::NearSingularity`] is returned.
pub fn log_jac_fd_iterate(sys: &System, c: &CollisionCoord, h: f64, n: usize) -> Result<f64> {
    let (end, reference) = iterate(sys, c, n)?;
    let per = sys.table().scatterers[end.scatterer].perimeter();
    let perturbed = |dr: f64, dphi: f64| -> Result<CollisionCoord> {
        let p = CollisionCoord::new(c.scatterer, c.r + dr, c.phi + dphi);
        let (e, recs) = iterate(sys, &p, n).map_err(|_| Error::NearSingularity)?;
        for (a, b) in recs.iter().zip(&reference) {
            if a.to.scatterer != b.to.scatterer || (a.dq - b.dq).norm() > 0.05 {
                return Err(Error::NearSingularity);
            }
        }
        Ok(e)
    };
    let dr = |a: &CollisionCoord, b: &CollisionCoord| {
        let d = (a.r - b.r).rem_euclid(per);
        if d > 0.5 * per {
            d - per
        } else {
            d
        }
    };
    // five-point stencil: truncation error O(h⁴), which matters for the
    // strongly expanding iterates
    let log_det = |h: f64| -> Result<f64> {
        let diff = |dir: (f64, f64)| -> Result<(f64, f64)> {
            let at = |k: f64| perturbed(k * h * dir.0, k * h * dir.1);
            let (p1, m1, p2, m2) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
            let d_r = (8.0 * dr(&p1, &m1) - dr(&p2, &m2)) / (12.0 * h);
            let d_phi = (8.0 * (p1.phi - m1.phi) - (p2.phi - m2.phi)) / (12.0 * h);
            Ok((d_r, d_phi))
        };
        let (a11, a21) = diff((1.0, 0.0))?;
        let (a12, a22) = diff((0.0, 1.0))?;
        let det = a11 * a22 - a12 * a21;
        if !(det.is_finite() && det != 0.0) {
            return Err(Error::NearSingularity);
        }
        Ok(det.abs().ln())
    };
    let fine = log_det(h)?;
    // Within a few steps of a singularity curve the derivatives blow up and
    // the stencil stops converging; treat that like an itinerary change.
    if (fine - log_det(2.0 * h)?).abs() > FD_CONSISTENCY {
        return Err(Error::NearSingularity);
    }
    Ok(fine + end.phi.cos().ln() - c.phi.cos().ln())
}

/// Finite-difference `log J` of one application of the map.
pub fn log_jac_fd(sys: &System, c: &CollisionCoord, h: f64) -> Result<f64> {
    log_jac_fd_iterate(sys, c, h, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ForceModel;
    use crate::geometry::TableConfig;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    #[test]
    fn twist_jacobian_examples() {
        assert_eq!(log_jac_twist(0.3, &TwistModel::Identity).unwrap(), 0.0);
        let beta = 0.1;
        let tw = TwistModel::AngleTwist { beta };
        assert_abs_diff_eq!(
            log_jac_twist(0.0, &tw).unwrap(),
            (beta * PI * PI / 4.0).cos().ln(),
            epsilon = 1e-15
        );
        assert!(log_jac_twist(FRAC_PI_2, &tw).is_err());
    }

    #[test]
    fn twist_jacobian_matches_finite_differences() {
        let tw = TwistModel::AngleTwist { beta: 0.07 };
        for k in 0..21 {
            let phi = -1.4 + 0.14 * k as f64;
            let h = 1e-6;
            let dg = (tw.apply(phi + h) - tw.apply(phi - h)) / (2.0 * h);
            // the r-row of the 2x2 derivative is (1, 0)
            let fd = (dg * tw.apply(phi).cos() / phi.cos()).ln();
            assert_abs_diff_eq!(fd, log_jac_twist(phi, &tw).unwrap(), epsilon = 1e-8);
        }
    }

    #[test]
    fn h_field_conventions() {
        let b = LogJacobianBreakdown::new(0.0, 0.0, 0.0);
        assert_eq!((b.total, b.s, b.h), (0.0, 0.0, 0.0));
        let b = LogJacobianBreakdown::new(-0.01, 0.002, 0.05);
        assert_eq!(b.total, -0.01 + 0.002);
        assert_eq!(b.s, -b.total);
        assert_abs_diff_eq!(b.h, (b.total.exp() - 1.0) / 0.05, epsilon = 1e-15);
    }

    #[test]
    fn fd_jacobian_unforced_is_zero() {
        let sys = System::new(
            TableConfig::default(),
            ForceModel::None,
            TwistModel::Identity,
        )
        .unwrap();
        for c in [
            CollisionCoord::new(0, 0.3, 0.2),
            CollisionCoord::new(1, 0.9, -0.7),
            CollisionCoord::new(0, 2.0, 1.1),
        ] {
            let lj = log_jac_fd(&sys, &c, DEFAULT_FD_STEP).unwrap();
            assert!(lj.abs() < 1e-6, "{lj}");
        }
    }

    #[test]
    fn fd_jacobian_matches_flow_quadrature() {
        let sys = System::new(
            TableConfig::default(),
            ForceModel::constant(0.05, 0.0),
            TwistModel::Identity,
        )
        .unwrap();
        let mut c = CollisionCoord::new(0, 0.3, 0.2);
        for _ in 0..20 {
            let (next, rec) = billiard_map(&sys, &c).unwrap();
            match log_jac_fd(&sys, &c, DEFAULT_FD_STEP) {
                Ok(fd) => assert!(
                    (fd - rec.jacobian.flow).abs() < 1e-5,
                    "{fd} {}",
                    rec.jacobian.flow
                ),
                Err(Error::NearSingularity) => {}
                Err(e) => panic!("{e}"),
            }
            c = next;
        }
    }
}
