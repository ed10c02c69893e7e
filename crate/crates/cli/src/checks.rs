//! Invariant checks shared by the `verify` command and the acceptance suite.
//!
//! Each check samples its points from its own RNG substream, evaluates them in
//! parallel and reduces in index order, so results do not depend on the
//! worker count.

use lorentz_core::dynamics::coord_distance;
use lorentz_core::entropy::log_jac_fd;
use lorentz_core::statistics::{
    ks_uniform, sample_mu0, transient_ft_residual, Estimator, MgfConfig, MgfGrid,
};
use lorentz_core::ulam::{sample_transitions, spectral_mgf, EigSettings, SpectralPoint};
use lorentz_core::{
    billiard_map, involution, substream, Error, ForceModel, Stream, System, TableConfig,
    TwistModel, UlamGrid, Vec2,
};
use rayon::prelude::*;
use serde::Serialize;

/// One pass/fail line.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    /// Passes when `value ≤ threshold`.
    pub fn at_most(name: &str, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            pass: value <= threshold,
            detail: detail.into(),
        }
    }

    pub fn at_least(name: &str, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            pass: value >= threshold,
            detail: detail.into(),
        }
    }

    pub fn flag(name: &str, pass: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            value: pass as u8 as f64,
            threshold: 1.0,
            pass,
            detail: detail.into(),
        }
    }
}

/// `i∘T∘i∘T` round trips and `s(c) + s(i(Tc))` over μ0 points.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Reversibility {
    pub max_distance: f64,
    pub max_antisymmetry: f64,
    /// Largest `|H|` and `|s|` seen on the forward steps.
    pub max_abs_h: f64,
    pub max_abs_s: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

pub fn reversibility(sys: &System, n: usize, seed: u64) -> anyhow::Result<Reversibility> {
    let per_point: Vec<Result<Option<[f64; 4]>, Error>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let mut rng = substream(seed, Stream::Verify, k as u64);
            let c = sample_mu0(sys.table(), &mut rng);
            let step = billiard_map(sys, &c).and_then(|(next, rec)| {
                let (back, rev) = billiard_map(sys, &involution(&next))?;
                Ok([
                    coord_distance(sys, &involution(&back), &c),
                    (rec.s() + rev.s()).abs(),
                    rec.jacobian.h.abs(),
                    rec.s().abs(),
                ])
            });
            match step {
                Ok(v) => Ok(Some(v)),
                Err(e) if e.is_orbit_local() => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut out = Reversibility {
        max_distance: 0.0,
        max_antisymmetry: 0.0,
        max_abs_h: 0.0,
        max_abs_s: 0.0,
        evaluated: 0,
        skipped: 0,
    };
    for p in per_point {
        match p? {
            Some([d, a, h, s]) => {
                out.max_distance = out.max_distance.max(d);
                out.max_antisymmetry = out.max_antisymmetry.max(a);
                out.max_abs_h = out.max_abs_h.max(h);
                out.max_abs_s = out.max_abs_s.max(s);
                out.evaluated += 1;
            }
            None => out.skipped += 1,
        }
    }
    Ok(out)
}

/// Quadrature vs finite differences, and the current identity for a constant
/// field.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct JacobianAgreement {
    pub max_fd_difference: f64,
    /// `max |curv_integral + E·Δq|`; NaN without a constant field.
    pub max_current_defect: f64,
    pub evaluated: usize,
    pub near_singular: usize,
}

/// Evaluates points in index order until `n` of them are not near a
/// singularity.
pub fn jacobian_agreement(
    sys: &System,
    n: usize,
    h: f64,
    field: Option<Vec2>,
    seed: u64,
) -> anyhow::Result<JacobianAgreement> {
    let mut out = JacobianAgreement {
        max_fd_difference: 0.0,
        max_current_defect: if field.is_some() { 0.0 } else { f64::NAN },
        evaluated: 0,
        near_singular: 0,
    };
    let mut next = 0u64;
    while out.evaluated < n {
        let want = n - out.evaluated;
        let chunk = (want + want / 4 + 8) as u64;
        let results: Vec<Result<Option<(f64, f64)>, Error>> = (next..next + chunk)
            .into_par_iter()
            .map(|k| {
                let mut rng = substream(seed, Stream::Verify, k);
                let c = sample_mu0(sys.table(), &mut rng);
                let step = billiard_map(sys, &c).and_then(|(_, rec)| {
                    let fd = log_jac_fd(sys, &c, h)?;
                    let cur = field.map_or(f64::NAN, |e| (rec.curv_integral + e.dot(rec.dq)).abs());
                    Ok(((fd - rec.jacobian.total).abs(), cur))
                });
                match step {
                    Ok(v) => Ok(Some(v)),
                    Err(e) if e.is_orbit_local() => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect();
        next += chunk;
        for r in results {
            if out.evaluated == n {
                break;
            }
            match r? {
                Some((d, cur)) => {
                    out.max_fd_difference = out.max_fd_difference.max(d);
                    if field.is_some() {
                        out.max_current_defect = out.max_current_defect.max(cur);
                    }
                    out.evaluated += 1;
                }
                None => out.near_singular += 1,
            }
        }
        if next > 100 * n as u64 + 1000 {
            anyhow::bail!("too many near-singular points in the Jacobian check");
        }
    }
    Ok(out)
}

/// The unforced map pushed over μ0: KS distance of the `sin φ` marginal.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Invariance {
    pub ks: f64,
    pub critical: f64,
    pub max_abs_s: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

pub fn mu0_invariance(table: &TableConfig, n: usize, seed: u64) -> anyhow::Result<Invariance> {
    let sys = System::new(table.clone(), ForceModel::None, TwistModel::Identity)?;
    let mapped: Vec<Result<Option<(f64, f64)>, Error>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let mut rng = substream(seed, Stream::Mu0Samples, k as u64);
            let c = sample_mu0(sys.table(), &mut rng);
            match billiard_map(&sys, &c) {
                Ok((next, rec)) => Ok(Some((next.phi.sin(), rec.s()))),
                Err(e) if e.is_orbit_local() => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut u = Vec::with_capacity(n);
    let mut max_abs_s = 0.0f64;
    let mut skipped = 0;
    for m in mapped {
        match m? {
            Some((x, s)) => {
                u.push(x);
                max_abs_s = max_abs_s.max(s.abs());
            }
            None => skipped += 1,
        }
    }
    let (ks, critical) = ks_uniform(&u, -1.0, 1.0);
    Ok(Invariance {
        ks,
        critical,
        max_abs_s,
        evaluated: u.len(),
        skipped,
    })
}

/// Transient fluctuation residual; `None` when no `(a, 1−a)` pair exists.
pub fn transient_ft(
    sys: &System,
    cfg: &MgfConfig,
    seed: u64,
) -> anyhow::Result<(Option<f64>, MgfGrid)> {
    let grid = lorentz_core::statistics::estimate_mgf(sys, cfg, seed)?;
    Ok((transient_ft_residual(&grid), grid))
}

/// Leading eigenvectors are nonnegative and the gap is positive at every `a`.
#[derive(Debug, Clone, Serialize)]
pub struct Positivity {
    pub worst_min_ratio: f64,
    pub smallest_gap: f64,
    pub points: Vec<(f64, f64, f64)>,
}

pub fn positivity(
    sys: &System,
    grid: usize,
    per_box: usize,
    a_grid: &[f64],
    seed: u64,
) -> anyhow::Result<Positivity> {
    let g = UlamGrid::new(sys.table(), grid, grid)?;
    let samples = sample_transitions(sys, &g, per_box, seed)?;
    let settings = EigSettings {
        seed,
        ..EigSettings::default()
    };
    let pts: Vec<SpectralPoint> = spectral_mgf(&samples, a_grid, &settings)?;
    Ok(Positivity {
        worst_min_ratio: pts
            .iter()
            .map(|p| p.result.min_ratio)
            .fold(f64::INFINITY, f64::min),
        smallest_gap: pts
            .iter()
            .map(|p| p.result.gap)
            .fold(f64::INFINITY, f64::min),
        points: pts
            .iter()
            .map(|p| (p.a, p.result.min_ratio, p.result.gap))
            .collect(),
    })
}

/// `|ê(a) − ê(1−a)|` rows of a grid at one `n` index, with paired errors.
pub fn symmetry_rows(grid: &MgfGrid, est: Estimator, n: usize) -> Vec<(f64, f64, f64)> {
    (0..grid.a_grid.len())
        .filter_map(|i| {
            let j = grid.partner(i)?;
            (i < j).then(|| {
                let d = grid.value(est, i, n) - grid.value(est, j, n);
                (grid.a_grid[i], d, grid.paired_stderr(est, n, i, j))
            })
        })
        .collect()
}
