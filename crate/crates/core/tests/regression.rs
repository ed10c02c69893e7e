// Frozen reference values. The map and flight constants come from an
// independent high-accuracy ODE integration (adaptive 8th-order Runge-Kutta
// with event location, relative tolerance 3e-14); the horizon supremum from a
// dense exact ray-casting search. The Monte Carlo constants pin the seeded
// output of this crate.

use std::f64::consts::FRAC_PI_4;

use lorentz_core::dynamics::{free_flight, reflect_incidence};
use lorentz_core::geometry::horizon_scan;
use lorentz_core::statistics::simulate_series;
use lorentz_core::ulam::{leading_eig, sample_transitions, EigSettings};
use lorentz_core::*;

fn forced(eps: f64) -> System {
    let f = if eps == 0.0 {
        ForceModel::None
    } else {
        ForceModel::constant(eps, 0.0)
    };
    System::new(TableConfig::default(), f, TwistModel::Identity).unwrap()
}

struct MapRef {
    from: (usize, f64, f64),
    eps: f64,
    to: (usize, f64, f64),
    tau: f64,
    dq: (f64, f64),
    curv: f64,
}

const MAP_REFS: [MapRef; 4] = [
    MapRef {
        from: (0, 0.3, 0.2),
        eps: 0.05,
        to: (1, 0.7819606778757823, -0.1773705353425336),
        tau: 0.10881866301205495,
        dq: (0.06349343452415124, -0.0883745773669638),
        curv: -0.00317467172620756,
    },
    MapRef {
        from: (0, 0.3, 0.2),
        eps: 0.0,
        to: (1, 0.7817160732245858, -0.18301228746686388),
        tau: 0.10886267770431003,
        dq: (0.06332357869435373, -0.08855058993757403),
        curv: 0.0,
    },
    MapRef {
        from: (1, 0.1, -0.4),
        eps: 0.05,
        to: (0, 1.7685577535450792, 1.1808482949966033),
        tau: 0.21076337543348106,
        dq: (0.209721427806578, -0.020931294473957696),
        curv: -0.010486071390328908,
    },
    MapRef {
        from: (0, 0.0, 0.0),
        eps: 0.0,
        to: (0, 1.2566370614359172, 0.0),
        tau: 0.2,
        dq: (0.2, 0.0),
        curv: 0.0,
    },
];

#[test]
fn collision_map_matches_reference_integration() {
    for m in &MAP_REFS {
        let sys = forced(m.eps);
        let (c, rec) =
            billiard_map(&sys, &CollisionCoord::new(m.from.0, m.from.1, m.from.2)).unwrap();
        assert_eq!(c.scatterer, m.to.0);
        for (got, want) in [
            (c.r, m.to.1),
            (c.phi, m.to.2),
            (rec.tau, m.tau),
            (rec.dq.x, m.dq.0),
            (rec.dq.y, m.dq.1),
            (rec.curv_integral, m.curv),
        ] {
            assert!((got - want).abs() < 1e-9, "{:?}: {got} vs {want}", m.from);
        }
    }
}

#[test]
fn oblique_flight_matches_reference_and_refined_steps() {
    let sys = forced(0.05);
    let start = FlowState::new(0.4, 0.0, FRAC_PI_4);
    let fine = sys.with_params(sys.params().refined(10.0));
    let mut results = Vec::new();
    for s in [&sys, &fine] {
        let f = free_flight(s, &start, Some(0)).unwrap();
        let (c, _, _) = reflect_incidence(s, &f.hit, &f.end).unwrap();
        results.push((c, f.tau, f.dq, f.curv_integral));
    }
    let (c, tau, dq, curv) = results[0];
    assert_eq!(c.scatterer, 0);
    assert!((c.r - 0.6094688794749682).abs() < 1e-9);
    assert!((c.phi + 0.8625444942301987).abs() < 1e-9);
    assert!((tau - 0.8622964501446686).abs() < 1e-9);
    assert!((dq.x - 0.6188426754994895).abs() < 1e-9);
    assert!((dq.y - 0.6004440545054787).abs() < 1e-9);
    assert!((curv + 0.03094213377497448).abs() < 1e-9);
    assert!((curv + 0.05 * dq.x).abs() < 1e-12);

    let (cf, tauf, _, _) = results[1];
    assert!(
        (c.r - cf.r).abs() < 1e-9 && (c.phi - cf.phi).abs() < 1e-9 && (tau - tauf).abs() < 1e-9
    );
}

#[test]
fn map_is_stable_under_step_refinement() {
    let sys = forced(0.05);
    let fine = sys.with_params(sys.params().refined(10.0));
    let c = CollisionCoord::new(0, 0.3, 0.2);
    let (a, ra) = billiard_map(&sys, &c).unwrap();
    let (b, rb) = billiard_map(&fine, &c).unwrap();
    assert!((a.r - b.r).abs() < 1e-9);
    assert!((a.phi - b.phi).abs() < 1e-9);
    assert!((ra.tau - rb.tau).abs() < 1e-9);
}

#[test]
fn horizon_scan_of_default_table() {
    // supremum of the free path, attained at a tangency
    const SUP: f64 = 1.5071796691899804;
    let h = horizon_scan(&TableConfig::default(), 1_000_000, 10.0, 1).unwrap();
    assert!(!h.infinite_horizon);
    assert!(
        (h.max_free_path - 1.504047878176857).abs() < 1e-12,
        "{}",
        h.max_free_path
    );
    assert!(h.max_free_path <= SUP + 1e-12);
    assert!(h.max_free_path > 0.99 * SUP);
    assert!((forced(0.0).tau_min() - (0.5f64.sqrt() - 0.6)).abs() < 1e-15);
}

#[test]
fn steady_state_current_follows_the_field() {
    let sys = forced(0.05);
    let ser = simulate_series(&sys, 64, 20_000, 1000, 1000, 42).unwrap();
    assert_eq!(ser.discarded, 0);
    let means: Vec<f64> = ser
        .dx
        .iter()
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    let k = means.len() as f64;
    let m = means.iter().sum::<f64>() / k;
    let se = (means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt();
    assert!(m > 3.0 * se, "{m} ± {se}");
    assert!((m - 1.3552888658984576e-3).abs() < 1e-12, "{m:e}");
}

#[test]
fn unforced_ulam_gap() {
    let sys = forced(0.0);
    let grid = UlamGrid::new(sys.table(), 64, 64).unwrap();
    let samples = sample_transitions(&sys, &grid, 400, 7).unwrap();
    let m = UlamMatrix::from_samples(&samples, 0.0);
    let r = leading_eig(&m, &EigSettings::default()).unwrap();
    assert!((r.lambda - 1.0).abs() < 1e-10);
    assert!(r.gap > 0.0);
    assert!(
        (r.second_modulus - 0.6542157668720434).abs() < 1e-8,
        "{}",
        r.second_modulus
    );
}
