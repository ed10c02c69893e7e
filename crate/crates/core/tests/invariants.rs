use std::f64::consts::{FRAC_PI_2, PI};
use std::sync::Arc;

use lorentz_core::dynamics::coord_distance;
use lorentz_core::entropy::{log_jac_fd, log_jac_fd_iterate, DEFAULT_FD_STEP};
use lorentz_core::geometry::{boundary_point, torus_displacement, torus_wrap};
use lorentz_core::statistics::{birkhoff_orbit, sample_mu0, sample_srb};
use lorentz_core::*;
use proptest::prelude::*;
use rand::Rng;

fn system(force: ForceModel, twist: TwistModel) -> System {
    System::new(TableConfig::default(), force, twist).unwrap()
}

fn mu0_points(sys: &System, n: usize, seed: u64) -> Vec<CollisionCoord> {
    let mut rng = substream(seed, Stream::Verify, 0);
    (0..n).map(|_| sample_mu0(sys.table(), &mut rng)).collect()
}

fn coord() -> impl Strategy<Value = CollisionCoord> {
    (0usize..2, 0.0..1.0f64, -1.4..1.4f64).prop_map(|(i, u, phi)| {
        let per = TableConfig::default().scatterers[i].perimeter();
        CollisionCoord::new(i, u * per, phi)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn boundary_is_periodic_and_on_the_circle(cx in 0.0..1.0f64, cy in 0.0..1.0f64, rad in 0.01..0.49f64, r in -10.0..10.0f64) {
        let s = Scatterer::new(cx, cy, rad);
        let f = boundary_point(&s, r);
        let g = boundary_point(&s, r + s.perimeter());
        prop_assert!(((f.position - s.center).norm() - rad).abs() < 1e-14);
        prop_assert!((f.position - g.position).norm() < 1e-12);
        prop_assert!(f.normal.dot(f.tangent).abs() < 1e-15);
    }

    #[test]
    fn torus_arithmetic(x in -50.0..50.0f64, y in -50.0..50.0f64, u in -50.0..50.0f64, v in -50.0..50.0f64) {
        let w = torus_wrap(Vec2::new(x, y));
        prop_assert!((0.0..1.0).contains(&w.x) && (0.0..1.0).contains(&w.y));
        let d = torus_displacement(Vec2::new(x, y), Vec2::new(u, v));
        prop_assert!((-0.5..0.5).contains(&d.x) && (-0.5..0.5).contains(&d.y));
        prop_assert_eq!(torus_displacement(Vec2::new(x, y), Vec2::new(x, y)), Vec2::ZERO);
    }

    #[test]
    fn validation_ignores_scatterer_order(cx in 0.0..1.0f64, cy in 0.0..1.0f64, rad in 0.01..0.3f64) {
        let mut list = TableConfig::default().scatterers;
        list.push(Scatterer::new(cx, cy, rad));
        let fwd = TableConfig::new(list.clone()).validate().is_empty();
        list.reverse();
        prop_assert_eq!(fwd, TableConfig::new(list).validate().is_empty());
    }

    #[test]
    fn involution_is_an_involution(c in coord()) {
        prop_assert_eq!(involution(&involution(&c)), c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn forced_map_is_reversible(c in coord()) {
        let sys = system(ForceModel::constant(0.05, 0.0), TwistModel::Identity);
        if let Ok((next, rec)) = billiard_map(&sys, &c) {
            let (back, inv) = billiard_map_inverse(&sys, &next).unwrap();
            prop_assert!(coord_distance(&sys, &back, &c) < 1e-8);
            prop_assert!((inv.s() + rec.s()).abs() < 1e-8);
            prop_assert!((rec.s() - 0.05 * rec.dq.x).abs() < 1e-8);
        }
    }
}

#[test]
fn general_field_jacobian_matches_finite_differences() {
    let field = SinusoidalField {
        amplitude: Vec2::new(0.008, 0.005),
    };
    let sys = system(
        ForceModel::GeneralField(Arc::new(field)),
        TwistModel::Identity,
    );
    let mut checked = 0;
    for c in mu0_points(&sys, 200, 1) {
        let Ok((_, rec)) = billiard_map(&sys, &c) else {
            continue;
        };
        match log_jac_fd(&sys, &c, DEFAULT_FD_STEP) {
            Ok(fd) => {
                assert!(
                    (fd - rec.jacobian.flow).abs() < 1e-5,
                    "{c:?}: {fd} vs {}",
                    rec.jacobian.flow
                );
                checked += 1;
            }
            Err(Error::NearSingularity) => {}
            Err(e) => panic!("{e}"),
        }
    }
    assert!(checked > 150, "{checked}");
}

#[test]
fn twisted_map_jacobian_factorizes() {
    let sys = system(
        ForceModel::constant(0.05, 0.0),
        TwistModel::AngleTwist { beta: 0.05 },
    );
    let mut checked = 0;
    for c in mu0_points(&sys, 200, 2) {
        let Ok((_, rec)) = billiard_map(&sys, &c) else {
            continue;
        };
        if let Ok(fd) = log_jac_fd(&sys, &c, DEFAULT_FD_STEP) {
            let j = rec.jacobian;
            assert_eq!(j.total, j.flow + j.twist);
            assert!((fd - j.total).abs() < 1e-5, "{c:?}: {fd} vs {}", j.total);
            checked += 1;
        }
    }
    assert!(checked > 150, "{checked}");
}

#[test]
fn jacobian_is_a_cocycle() {
    let sys = system(ForceModel::constant(0.05, 0.0), TwistModel::Identity);
    let mut checked = 0;
    for c in mu0_points(&sys, 200, 3) {
        let Ok(orbit) = birkhoff_orbit(&sys, &c, 2) else {
            continue;
        };
        if orbit.discarded {
            continue;
        }
        if let Ok(fd) = log_jac_fd_iterate(&sys, &c, DEFAULT_FD_STEP, 2) {
            assert!((fd + orbit.sum()).abs() < 1e-4, "{fd} vs {}", -orbit.sum());
            checked += 1;
        }
    }
    assert!(checked > 100, "{checked}");
}

#[test]
fn h_stays_bounded_as_the_field_shrinks() {
    let mut maxima = Vec::new();
    for eps in [0.1, 0.05, 0.025] {
        let sys = system(ForceModel::constant(eps, 0.0), TwistModel::Identity);
        let mut max_h = 0.0f64;
        for c in mu0_points(&sys, 3000, 4) {
            if let Ok((_, rec)) = billiard_map(&sys, &c) {
                let h = rec.jacobian.h;
                max_h = max_h.max(h.abs());
                // H = (e^{−εΔx} − 1)/ε = −Δx + O(ε)
                assert!(
                    (h + rec.dq.x).abs() <= eps * rec.dq.x.powi(2),
                    "{h} {}",
                    rec.dq.x
                );
            }
        }
        maxima.push(max_h);
    }
    assert!(maxima.iter().all(|&m| m < 50.0));
    for w in maxima.windows(2) {
        let ratio = w[1] / w[0];
        assert!((0.8..1.25).contains(&ratio), "{maxima:?}");
    }
}

#[test]
fn mu0_sampler_moments() {
    let table = TableConfig::default();
    let mut rng = substream(5, Stream::Mu0Samples, 0);
    let n = 1_000_000;
    let mut sum = 0.0;
    let mut on_a = 0usize;
    for _ in 0..n {
        let c = sample_mu0(&table, &mut rng);
        assert!(c.phi.abs() <= FRAC_PI_2);
        sum += c.phi.sin();
        on_a += (c.scatterer == 0) as usize;
    }
    let mean = sum / n as f64;
    assert!(mean.abs() < 3.0 / (n as f64 / 3.0).sqrt(), "{mean}");
    // boundary length share of the larger disk is 2/3
    let share = on_a as f64 / n as f64;
    assert!(
        (share - 2.0 / 3.0).abs() < 3.0 * (2.0 / 9.0 / n as f64).sqrt(),
        "{share}"
    );
}

#[test]
fn srb_without_burn_in_is_mu0() {
    let sys = system(ForceModel::constant(0.05, 0.0), TwistModel::Identity);
    let mut a = substream(9, Stream::Chain, 0);
    let mut b = a.clone();
    for _ in 0..100 {
        let (x, resamples) = sample_srb(&sys, &mut a, 0, 10).unwrap();
        assert_eq!(resamples, 0);
        assert_eq!(x, sample_mu0(sys.table(), &mut b));
    }
}

#[test]
fn birkhoff_sums_are_additive() {
    let sys = system(ForceModel::constant(0.05, 0.0), TwistModel::Identity);
    let mut rng = substream(11, Stream::Verify, 1);
    for _ in 0..20 {
        let c = sample_mu0(sys.table(), &mut rng);
        let whole = birkhoff_orbit(&sys, &c, 12).unwrap();
        if whole.discarded {
            continue;
        }
        let head = birkhoff_orbit(&sys, &c, 5).unwrap();
        let tail = birkhoff_orbit(&sys, &head.end, 7).unwrap();
        let joined: Vec<f64> = head
            .s_values
            .iter()
            .chain(&tail.s_values)
            .copied()
            .collect();
        assert_eq!(joined, whole.s_values);
    }
    let zero = birkhoff_orbit(&sys, &CollisionCoord::new(0, 0.1, 0.1), 0).unwrap();
    assert_eq!(zero.sum(), 0.0);
}

#[test]
fn twist_is_an_increasing_bijection() {
    let tw = TwistModel::AngleTwist { beta: 0.3 };
    assert_eq!(tw.apply(FRAC_PI_2), FRAC_PI_2);
    assert_eq!(tw.apply(-FRAC_PI_2), -FRAC_PI_2);
    let mut rng = substream(1, Stream::Verify, 2);
    for _ in 0..1000 {
        let phi = rng.gen_range(-FRAC_PI_2..FRAC_PI_2);
        assert!(tw.derivative(phi) > 0.0);
    }
    assert!(TwistModel::AngleTwist { beta: 1.0 / PI }
        .validate()
        .is_err());
}
