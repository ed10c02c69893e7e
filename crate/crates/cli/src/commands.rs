use anyhow::Context;
use lorentz_core::geometry::horizon_scan;
use lorentz_core::statistics::{
    gc_ratio, green_kubo, legendre, mean_entropy_rate, mu0_h_stratified, rate_symmetry,
    sample_lebesgue, sample_mu0, sample_srb, simulate_ensemble, simulate_series, symmetry_residual,
    EnsembleConfig, Estimator, Init, MgfConfig, MgfGrid,
};
use lorentz_core::ulam::{
    bracket_check, leading_eig, sample_transitions, spectral_mgf, EigSettings, UlamSamples,
};
use lorentz_core::{
    billiard_map, substream, CollisionRecord, Stream, System, UlamGrid, UlamMatrix,
};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::checks::{self, Check};
use crate::config::RunConfig;
use crate::output::{num, read_csv, Outputs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    TableCheck,
    Simulate,
    Mgf,
    Ulam,
    Gk,
    Gc,
    Verify,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::TableCheck => "table-check",
            Command::Simulate => "simulate",
            Command::Mgf => "mgf",
            Command::Ulam => "ulam",
            Command::Gk => "gk",
            Command::Gc => "gc",
            Command::Verify => "verify",
        }
    }
}

/// What a command reports back to the dispatcher.
#[derive(Debug, Default)]
pub struct Outcome {
    pub checks: Vec<Check>,
    pub warnings: Vec<String>,
    pub results: Value,
    pub discarded: Value,
    /// MGF estimates with their batch linearizations, when the command made
    /// them.
    pub grid: Option<MgfGrid>,
}

pub fn execute(
    cmd: Command,
    cfg: &RunConfig,
    sys: Option<&System>,
    out: &mut Outputs,
) -> anyhow::Result<Outcome> {
    if cmd == Command::TableCheck {
        return table_check(cfg, sys, out);
    }
    let sys = sys.context("system construction failed")?;
    match cmd {
        Command::TableCheck => unreachable!(),
        Command::Simulate => simulate(cfg, sys, out),
        Command::Mgf => mgf(cfg, sys, out),
        Command::Ulam => ulam(cfg, sys, out),
        Command::Gk => gk(cfg, sys, out),
        Command::Gc => gc(cfg, sys, out),
        Command::Verify => verify(cfg, sys, out),
    }
}

fn table_check(
    cfg: &RunConfig,
    sys: Option<&System>,
    out: &mut Outputs,
) -> anyhow::Result<Outcome> {
    let table = cfg.table.build();
    let violations: Vec<String> = table.validate().iter().map(ToString::to_string).collect();
    let rows: Vec<Vec<String>> = table
        .scatterers
        .iter()
        .enumerate()
        .map(|(i, s)| {
            vec![
                i.to_string(),
                num(s.center.x),
                num(s.center.y),
                num(s.radius),
                num(s.perimeter()),
            ]
        })
        .collect();
    out.csv(
        "table.csv",
        &["index", "center_x", "center_y", "radius", "perimeter"],
        &rows,
    )?;
    let mut o = Outcome::default();
    o.checks.push(Check::flag(
        "table valid",
        violations.is_empty(),
        violations.join("; "),
    ));
    if violations.is_empty() {
        let scan = horizon_scan(&table, cfg.horizon.n_rays, cfg.horizon.max_len, cfg.seed)?;
        o.checks.push(Check::flag(
            "finite horizon",
            !scan.infinite_horizon,
            format!("{} rays, max_len {}", scan.n_rays, scan.max_len),
        ));
        o.results = json!({
            "violations": violations,
            "tau_min": table.min_gap(),
            "tau_max_scan": scan.max_free_path,
            "infinite_horizon": scan.infinite_horizon,
            "n_rays": scan.n_rays,
            "max_len": scan.max_len,
            "total_boundary_length": table.total_boundary_length(),
            "integrator": sys.map(|s| *s.params()),
        });
    } else {
        o.results = json!({ "violations": violations });
    }
    Ok(o)
}

/// Initial point for orbit `k` drawn from `init`.
fn initial_point(
    sys: &System,
    init: Init,
    burn_in: usize,
    max_resamples: usize,
    rng: &mut lorentz_core::SimRng,
) -> lorentz_core::Result<(lorentz_core::CollisionCoord, usize)> {
    match init {
        Init::Mu0 => Ok((sample_mu0(sys.table(), rng), 0)),
        Init::Srb => sample_srb(sys, rng, burn_in, max_resamples),
        Init::Lebesgue => {
            let mut tries = 0;
            loop {
                match sample_lebesgue(sys, rng) {
                    Ok(c) => return Ok((c, tries)),
                    Err(e) if e.is_orbit_local() && tries < max_resamples => tries += 1,
                    Err(e) => return Err(e),
                }
            }
        }
    }
}

fn simulate(cfg: &RunConfig, sys: &System, out: &mut Outputs) -> anyhow::Result<Outcome> {
    let sp = &cfg.simulate;
    let orbits: Vec<lorentz_core::Result<(Vec<CollisionRecord>, bool, usize)>> = (0..sp.orbits)
        .into_par_iter()
        .map(|k| {
            let mut rng = substream(cfg.seed, Stream::Orbit, k as u64);
            let (mut c, resamples) =
                initial_point(sys, sp.init, sp.burn_in, sp.max_resamples, &mut rng)?;
            let mut recs = Vec::with_capacity(sp.length);
            for _ in 0..sp.length {
                match billiard_map(sys, &c) {
                    Ok((next, rec)) => {
                        recs.push(rec);
                        c = next;
                    }
                    Err(e) if e.is_orbit_local() => return Ok((recs, true, resamples)),
                    Err(e) => return Err(e),
                }
            }
            Ok((recs, false, resamples))
        })
        .collect();
    let mut rows = Vec::new();
    let (mut discarded, mut resamples, mut total) = (0usize, 0usize, 0usize);
    let (mut sum_s, mut max_h) = (0.0, 0.0f64);
    let (mut tau_lo, mut tau_hi) = (f64::INFINITY, 0.0f64);
    for (k, o) in orbits.into_iter().enumerate() {
        let (recs, cut, rs) = o?;
        discarded += cut as usize;
        resamples += rs;
        for (step, r) in recs.iter().enumerate() {
            let j = &r.jacobian;
            rows.push(vec![
                k.to_string(),
                step.to_string(),
                r.from.scatterer.to_string(),
                num(r.from.r),
                num(r.from.phi),
                num(r.tau),
                num(r.dq.x),
                num(r.dq.y),
                num(j.flow),
                num(j.twist),
                num(j.s),
                num(j.h),
            ]);
            sum_s += j.s;
            max_h = max_h.max(j.h.abs());
            tau_lo = tau_lo.min(r.tau);
            tau_hi = tau_hi.max(r.tau);
            total += 1;
        }
    }
    out.csv(
        "orbits.csv",
        &[
            "orbit",
            "step",
            "scatterer",
            "r",
            "phi",
            "tau",
            "dx",
            "dy",
            "log_jac_flow",
            "log_jac_twist",
            "s",
            "h",
        ],
        &rows,
    )?;
    let eps = sys.epsilon();
    // straight-ray scan plus the bending allowance 2 ε L²
    let tau_bound = sys.tau_max_scan() + 2.0 * eps * cfg.horizon.max_len.powi(2);
    let mut o = Outcome::default();
    o.checks.push(Check::at_most(
        "max |H|",
        max_h,
        sp.h_bound,
        "over all simulated collisions",
    ));
    if total > 0 {
        o.checks.push(Check::at_most(
            "max free time",
            tau_hi,
            tau_bound,
            "scan bound plus bending margin",
        ));
    }
    if discarded > 0 {
        o.warnings
            .push(format!("{discarded} orbits stopped at a grazing collision"));
    }
    o.results = json!({
        "collisions": total,
        "mean_s": if total > 0 { sum_s / total as f64 } else { 0.0 },
        "max_abs_h": max_h,
        "tau_min_observed": if total > 0 { tau_lo } else { f64::NAN },
        "tau_max_observed": tau_hi,
        "tau_min_exact": sys.tau_min(),
        "tau_max_scan": sys.tau_max_scan(),
    });
    o.discarded = json!({ "orbits_cut": discarded, "initial_resamples": resamples });
    Ok(o)
}

fn mgf_rows(grid: &MgfGrid) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for (i, &a) in grid.a_grid.iter().enumerate() {
        for (j, &n) in grid.n_list.iter().enumerate() {
            rows.push(vec![
                num(a),
                n.to_string(),
                num(grid.e_hat[i][j]),
                num(grid.stderr[i][j]),
                num(grid.slope[i][j]),
                num(grid.slope_stderr[i][j]),
                num(grid.ess[i][j]),
                grid.stable[i][j].to_string(),
            ]);
        }
    }
    rows
}

const MGF_HEADER: [&str; 8] = [
    "a",
    "n",
    "e_hat",
    "stderr",
    "slope",
    "slope_stderr",
    "ess",
    "stable",
];

fn mgf(cfg: &RunConfig, sys: &System, out: &mut Outputs) -> anyhow::Result<Outcome> {
    let mcfg: MgfConfig = cfg.mgf.build();
    let grid = lorentz_core::statistics::estimate_mgf(sys, &mcfg, cfg.seed)?;
    out.csv("mgf.csv", &MGF_HEADER, &mgf_rows(&grid))?;
    let mut o = Outcome {
        discarded: json!({ "windows": grid.discarded }),
        ..Outcome::default()
    };
    if grid.discarded as f64 > lorentz_core::statistics::MAX_DISCARD_FRACTION * grid.windows as f64
    {
        o.warnings.push(format!(
            "discarded fraction {} exceeds 1e-4",
            grid.discarded as f64 / grid.windows as f64
        ));
    }
    let Some(nl) = grid.largest_stable_n() else {
        o.warnings
            .push("no n is stable for every a; rate function and symmetry checks skipped".into());
        o.checks.push(Check::flag(
            "stable MGF entries",
            false,
            "effective sample size below threshold",
        ));
        o.results = json!({ "largest_stable_n": null });
        o.grid = Some(grid);
        return Ok(o);
    };
    let slice: Vec<f64> = (0..grid.a_grid.len()).map(|i| grid.slope[i][nl]).collect();
    let e_rows: Vec<Vec<f64>> = (0..grid.a_grid.len())
        .map(|i| {
            vec![
                grid.a_grid[i],
                grid.e_hat[i][nl],
                grid.slope[i][nl],
                grid.slope_stderr[i][nl],
            ]
        })
        .collect();
    out.dat("e_a.dat", &["a", "e_hat", "slope", "slope_stderr"], &e_rows)?;

    let mut results = json!({
        "largest_stable_n": grid.n_list[nl],
        "windows": grid.windows,
        "init": grid.init.name(),
    });
    if grid.has_all_partners() {
        if grid.init == Init::Mu0 {
            if let Some(r) = lorentz_core::statistics::transient_ft_residual(&grid) {
                o.checks.push(Check::at_most(
                    "transient fluctuation residual",
                    r,
                    3.0,
                    "max |e_n(a) - e_n(1-a)| / paired stderr over all (a, n)",
                ));
            }
        }
        if let Some(r) = symmetry_residual(&grid, Estimator::Slope, &[nl]) {
            o.checks.push(Check::at_most(
                "steady-state symmetry residual",
                r,
                3.0,
                format!("slope estimator at n = {}", grid.n_list[nl]),
            ));
        }
        let rows: Vec<Vec<String>> = checks::symmetry_rows(&grid, Estimator::Slope, nl)
            .into_iter()
            .map(|(a, d, se)| vec![num(a), num(1.0 - a), num(d), num(se)])
            .collect();
        out.csv(
            "mgf_symmetry.csv",
            &["a", "partner", "difference", "paired_stderr"],
            &rows,
        )?;
    } else {
        o.warnings
            .push("symmetry check skipped: a_grid lacks some 1-a partners".into());
    }

    match legendre(&grid.a_grid, &slice, cfg.mgf.rate_points) {
        Ok(rate) => {
            o.warnings.extend(rate.warnings.iter().cloned());
            let rows: Vec<Vec<String>> = rate
                .z_grid
                .iter()
                .zip(&rate.i_values)
                .map(|(&z, &i)| vec![num(z), num(i)])
                .collect();
            out.csv("rate.csv", &["z", "I"], &rows)?;
            let pts: Vec<Vec<f64>> = rate
                .z_grid
                .iter()
                .zip(&rate.i_values)
                .map(|(&z, &i)| vec![z, i])
                .collect();
            out.dat("rate.dat", &["z", "I"], &pts)?;
            if !rate.degenerate && grid.has_all_partners() {
                let sym = rate_symmetry(&rate, &grid, Estimator::Slope, nl);
                let worst = sym
                    .iter()
                    .map(|r| {
                        if r.defect.abs() <= 1e-14 {
                            0.0
                        } else {
                            r.defect.abs() / r.stderr
                        }
                    })
                    .fold(0.0f64, f64::max);
                let rows: Vec<Vec<String>> = sym
                    .iter()
                    .map(|r| {
                        vec![
                            num(r.z),
                            num(r.i_pos),
                            num(r.i_neg),
                            num(r.defect),
                            num(r.stderr),
                        ]
                    })
                    .collect();
                out.csv(
                    "rate_symmetry.csv",
                    &["z", "I_z", "I_minus_z", "defect", "stderr"],
                    &rows,
                )?;
                o.checks.push(Check::at_most(
                    "rate-function symmetry",
                    worst,
                    3.0,
                    "max |I(z) - I(-z) + z| / propagated stderr",
                ));
            }
            results["rate_degenerate"] = json!(rate.degenerate);
        }
        Err(e) => o.warnings.push(format!("rate function skipped: {e}")),
    }

    // cross-route table when a spectral run with the same config is present
    let spectral = out.dir().join("spectral.csv");
    if spectral.exists() {
        let (digest, header, rows) = read_csv(&spectral)?;
        if digest != out.digest() {
            o.warnings.push(
                "spectral.csv comes from a different config; consistency table skipped".into(),
            );
        } else {
            let col = |name: &str| {
                header
                    .iter()
                    .position(|h| h == name)
                    .context("spectral.csv column")
            };
            let (ca, cl, cp, cr) = (
                col("a")?,
                col("log_lambda")?,
                col("proxy")?,
                col("residual")?,
            );
            let mut table = Vec::new();
            let mut all = true;
            for r in &rows {
                let a: f64 = r[ca].parse()?;
                let Some(i) = grid.a_index(a) else { continue };
                let ll: f64 = r[cl].parse()?;
                let proxy: f64 = r[cp].parse().unwrap_or(f64::NAN);
                let proxy = if proxy.is_finite() { proxy } else { 0.0 };
                let e = grid.slope[i][nl];
                let residual: f64 = r[cr].parse()?;
                let tol = proxy + 3.0 * grid.slope_stderr[i][nl] + residual.max(1e-12);
                let diff = (ll - e).abs();
                let pass = diff <= tol;
                all &= pass;
                table.push(vec![
                    num(a),
                    num(ll),
                    num(e),
                    num(diff),
                    num(tol),
                    pass.to_string(),
                ]);
            }
            out.csv(
                "consistency.csv",
                &[
                    "a",
                    "log_lambda",
                    "e_hat",
                    "abs_difference",
                    "tolerance",
                    "pass",
                ],
                &table,
            )?;
            o.checks.push(Check::flag(
                "spectral vs Monte Carlo",
                all,
                "|log lambda_a - e(a)| <= proxy + 3 stderr + eigen residual",
            ));
        }
    }
    o.results = results;
    o.grid = Some(grid);
    Ok(o)
}

/// Spectral curve and diagnostics from one sample set.
pub struct SpectralRun {
    pub points: Vec<lorentz_core::ulam::SpectralPoint>,
    pub forward: Vec<f64>,
    pub samples: UlamSamples,
}

pub fn spectral_run(
    sys: &System,
    grid_n: usize,
    per_box: usize,
    a_grid: &[f64],
    settings: &EigSettings,
    seed: u64,
) -> anyhow::Result<SpectralRun> {
    let grid = UlamGrid::new(sys.table(), grid_n, grid_n)?;
    let samples = sample_transitions(sys, &grid, per_box, seed)?;
    let points = spectral_mgf(&samples, a_grid, settings)?;
    let forward = if samples.reversible {
        a_grid
            .iter()
            .map(|&a| {
                Ok(
                    leading_eig(&UlamMatrix::from_samples_forward(&samples, a), settings)?
                        .lambda
                        .ln(),
                )
            })
            .collect::<anyhow::Result<Vec<f64>>>()?
    } else {
        points.iter().map(|p| p.log_lambda).collect()
    };
    Ok(SpectralRun {
        points,
        forward,
        samples,
    })
}

/// Seed offset of the refinement grid, so its sampling noise is independent.
pub const REFINE_SEED_OFFSET: u64 = 0x5851_f42d_4c95_7f2d;

fn ulam(cfg: &RunConfig, sys: &System, out: &mut Outputs) -> anyhow::Result<Outcome> {
    let u = &cfg.ulam;
    let settings = EigSettings {
        tol: u.tol,
        max_iters: u.max_iters,
        seed: cfg.seed,
        ..EigSettings::default()
    };
    let run = spectral_run(
        sys,
        u.grid,
        u.samples_per_box,
        &u.a_grid,
        &settings,
        cfg.seed,
    )?;
    let refined = if u.refine_grid > 0 {
        Some(spectral_run(
            sys,
            u.refine_grid,
            u.refine_samples_per_box,
            &u.a_grid,
            &settings,
            cfg.seed ^ REFINE_SEED_OFFSET,
        )?)
    } else {
        None
    };
    let eps = sys.epsilon();
    let c_h = run.samples.max_abs_h;
    let mut o = Outcome::default();
    let mut rows = Vec::new();
    let mut dat = Vec::new();
    let mut proxies = Vec::new();
    for (k, p) in run.points.iter().enumerate() {
        let r = &p.result;
        let fine = refined.as_ref().map(|f| f.points[k].log_lambda);
        let proxy = fine.map_or(f64::NAN, |f| (f - p.log_lambda).abs());
        proxies.push(proxy);
        let b = bracket_check(r.lambda, c_h, eps, p.a, u.tol.max(r.residual));
        rows.push(vec![
            num(p.a),
            num(r.lambda),
            num(p.log_lambda),
            num(r.residual),
            r.iterations.to_string(),
            num(r.second_modulus),
            num(r.gap),
            num(r.min_ratio),
            num(b.lo),
            num(b.hi),
            b.pass.to_string(),
            num(fine.unwrap_or(f64::NAN)),
            num(proxy),
            num(run.forward[k]),
        ]);
        dat.push(vec![p.a, p.log_lambda, proxy]);
        o.checks.push(Check {
            name: format!("bracket a={}", p.a),
            value: r.lambda,
            threshold: if r.lambda < b.lo { b.lo } else { b.hi },
            pass: b.pass,
            detail: format!("[{}, {}] with C_H = {c_h}", b.lo, b.hi),
        });
    }
    out.csv(
        "spectral.csv",
        &[
            "a",
            "lambda",
            "log_lambda",
            "residual",
            "iterations",
            "second_modulus",
            "gap",
            "min_ratio",
            "bracket_lo",
            "bracket_hi",
            "bracket_pass",
            "log_lambda_refined",
            "proxy",
            "log_lambda_forward",
        ],
        &rows,
    )?;
    out.dat("spectral.dat", &["a", "log_lambda", "proxy"], &dat)?;

    let mut eig_rows = Vec::new();
    for b in 0..run.samples.grid.len() {
        let mut row = vec![b.to_string()];
        row.extend(run.points.iter().map(|p| num(p.result.h[b])));
        eig_rows.push(row);
    }
    let names: Vec<String> = run.points.iter().map(|p| format!("h_a={}", p.a)).collect();
    let mut header = vec!["box"];
    header.extend(names.iter().map(String::as_str));
    out.csv("eigenvectors.csv", &header, &eig_rows)?;

    if u.export_matrix {
        for p in &run.points {
            let m = UlamMatrix::from_samples(&run.samples, p.a);
            let mut buf = Vec::new();
            m.write_triplets(&mut buf)?;
            out.raw_with_digest(&format!("matrix_a{}.csv", p.a), &buf)?;
        }
    }

    let tol = u.tol;
    for p in &run.points {
        o.checks.push(Check::at_most(
            &format!("residual a={}", p.a),
            p.result.residual,
            tol,
            "",
        ));
    }
    if let Some(k) = run.points.iter().position(|p| p.a == 0.0) {
        o.checks.push(Check::at_most(
            "lambda_0 = 1",
            (run.points[k].result.lambda - 1.0).abs(),
            1e-10,
            "",
        ));
    }
    let worst_ratio = run
        .points
        .iter()
        .map(|p| p.result.min_ratio)
        .fold(f64::INFINITY, f64::min);
    o.checks.push(Check::at_least(
        "eigenvector positivity",
        worst_ratio,
        -1e-12,
        "min h / max h over all a",
    ));
    let min_gap = run
        .points
        .iter()
        .map(|p| p.result.gap)
        .fold(f64::INFINITY, f64::min);
    o.checks.push(Check {
        name: "spectral gap".into(),
        value: min_gap,
        threshold: 0.0,
        pass: min_gap > 0.0,
        detail: "smallest lambda - |second eigenvalue| over all a".into(),
    });
    let mut sym_worst = 0.0f64;
    let mut fwd_worst = 0.0f64;
    let mut sym_ok = true;
    for (k, p) in run.points.iter().enumerate() {
        let Some(j) = run
            .points
            .iter()
            .position(|q| (q.a - (1.0 - p.a)).abs() < 1e-9)
        else {
            continue;
        };
        let d = (p.log_lambda - run.points[j].log_lambda).abs();
        let budget = tol
            + if proxies[k].is_finite() {
                proxies[k] + proxies[j]
            } else {
                0.0
            };
        sym_ok &= d <= budget;
        sym_worst = sym_worst.max(d);
        fwd_worst = fwd_worst.max((run.forward[k] - run.forward[j]).abs());
    }
    o.checks.push(Check::flag(
        "spectral symmetry",
        sym_ok,
        format!("max |log lambda_a - log lambda_(1-a)| = {sym_worst:e}"),
    ));
    if run.samples.reversible {
        o.warnings.push(format!(
            "reversible estimator makes lambda_a = lambda_(1-a) by construction; forward-only defect {fwd_worst:e}"
        ));
    }
    if let (Some(k), true) = (
        run.points.iter().position(|p| p.a == 1.0),
        refined.is_some(),
    ) {
        let d = run.points[k].log_lambda.abs();
        o.checks.push(Check::at_most(
            "lambda_1 = 1",
            d,
            proxies[k].max(tol),
            "within the refinement proxy",
        ));
    }
    let flagged = run.samples.flagged_columns();
    if !flagged.is_empty() {
        o.warnings.push(format!(
            "{} columns lost more than 1% of their samples",
            flagged.len()
        ));
    }
    o.discarded =
        json!({ "samples": run.samples.total_discarded(), "flagged_columns": flagged.len() });
    o.results = json!({
        "grid": u.grid,
        "boxes": run.samples.grid.len(),
        "samples_per_box": u.samples_per_box,
        "c_h": c_h,
        "reversible_estimator": run.samples.reversible,
        "symmetry_defect": sym_worst,
        "forward_symmetry_defect": fwd_worst,
        "refine_grid": u.refine_grid,
    });
    Ok(o)
}

fn gk(cfg: &RunConfig, sys: &System, out: &mut Outputs) -> anyhow::Result<Outcome> {
    let g = &cfg.gk;
    let series = simulate_series(
        sys,
        g.chains,
        g.length,
        g.burn_in,
        g.max_resamples,
        cfg.seed,
    )?;
    let est = green_kubo(&series.s, g.j_max, g.block, g.groups)?;
    let grid = UlamGrid::new(sys.table(), g.mu0_grid, g.mu0_grid)?;
    let mu0h = mu0_h_stratified(sys, &grid, g.mu0_per_box, cfg.seed)?;
    let eps = sys.epsilon();
    let rate = mean_entropy_rate(&series.s, g.groups, &mu0h, eps);

    let rows: Vec<Vec<String>> = est
        .autocov
        .iter()
        .enumerate()
        .map(|(j, &c)| vec![j.to_string(), num(c)])
        .collect();
    out.csv("autocov.csv", &["lag", "autocovariance"], &rows)?;
    let c0 = est.autocov.first().copied().unwrap_or(0.0);
    let pts: Vec<Vec<f64>> = est
        .autocov
        .iter()
        .enumerate()
        .map(|(j, &c)| vec![j as f64, if c0 > 0.0 { c / c0 } else { 0.0 }])
        .collect();
    out.dat("autocorrelation.dat", &["lag", "autocorrelation"], &pts)?;
    out.csv(
        "gk.csv",
        &[
            "mean_s",
            "mean_s_stderr",
            "eps_mu0_h",
            "eps_mu0_h_stderr",
            "sigma2",
            "sigma2_stderr",
            "sigma2_bm",
            "sigma2_bm_stderr",
        ],
        &[vec![
            num(rate.mean_s),
            num(rate.mean_s_stderr),
            num(rate.eps_mu0_h),
            num(rate.eps_mu0_h_stderr),
            num(est.sigma2),
            num(est.sigma2_stderr),
            num(est.sigma2_bm),
            num(est.sigma2_bm_stderr),
        ]],
    )?;

    let mut o = Outcome::default();
    o.warnings.extend(est.warnings.iter().cloned());
    let combined = est.sigma2_stderr.hypot(est.sigma2_bm_stderr);
    o.checks.push(Check::at_most(
        "Green-Kubo vs batch means",
        (est.sigma2 - est.sigma2_bm).abs(),
        3.0 * combined,
        "within 3 combined stderr",
    ));
    if eps > 0.0 {
        o.checks.push(Check::at_least(
            "diffusion coefficient positive",
            est.sigma2,
            0.0,
            "",
        ));
        o.checks.push(Check::at_least(
            "entropy production positive",
            rate.mean_s,
            3.0 * rate.mean_s_stderr,
            "mean s at least 3 stderr above zero",
        ));
    }
    o.discarded = json!({ "chains_redrawn": series.discarded, "mu0_points_skipped": mu0h.skipped });
    o.results = json!({
        "green_kubo": est,
        "entropy_rate": rate,
        "expansion_defect": rate.expansion_defect(),
        "mu0_h": mu0h,
    });
    Ok(o)
}

fn gc(cfg: &RunConfig, sys: &System, out: &mut Outputs) -> anyhow::Result<Outcome> {
    let g = &cfg.gc;
    let ens = simulate_ensemble(
        sys,
        &EnsembleConfig {
            windows: g.orbits,
            length: g.n,
            checkpoints: vec![g.n],
            init: Init::Srb,
            burn_in: g.burn_in,
            windows_per_chain: g.windows_per_chain,
            max_resamples: g.max_resamples,
        },
        cfg.seed,
    )?;
    let z: Vec<f64> = ens.column(0).iter().map(|s| s / g.n as f64).collect();
    let table = gc_ratio(&z, g.n, g.bins, g.min_count);
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| {
            vec![
                num(r.z),
                num(r.log_ratio),
                r.count_pos.to_string(),
                r.count_neg.to_string(),
                num(r.stderr),
            ]
        })
        .collect();
    out.csv(
        "gc.csv",
        &["z", "log_ratio", "count_pos", "count_neg", "stderr"],
        &rows,
    )?;
    let pts: Vec<Vec<f64>> = table
        .rows
        .iter()
        .map(|r| vec![r.z, r.log_ratio, r.stderr])
        .collect();
    out.dat("gc.dat", &["z", "log_ratio", "stderr"], &pts)?;
    let mut o = Outcome::default();
    if let Some(note) = &table.note {
        o.warnings.push(note.clone());
    }
    if table.slope.is_finite() {
        o.checks.push(Check::at_most(
            "fluctuation ratio slope",
            (table.slope - 1.0).abs(),
            g.slope_tolerance,
            format!("slope {} ± {}", table.slope, table.slope_stderr),
        ));
    }
    o.discarded = json!({ "windows": ens.discarded });
    o.results = json!({
        "slope": table.slope,
        "slope_stderr": table.slope_stderr,
        "bin_width": table.bin_width,
        "populated_pairs": table.rows.len(),
        "windows": ens.windows,
    });
    Ok(o)
}

fn verify(cfg: &RunConfig, sys: &System, out: &mut Outputs) -> anyhow::Result<Outcome> {
    let v = &cfg.verify;
    let t = &v.tolerances;
    let mut o = Outcome::default();

    let rev = checks::reversibility(sys, v.samples, cfg.seed)?;
    let reversible = rev.max_distance <= t.reversibility && rev.max_antisymmetry <= t.antisymmetry;
    if sys.twist().is_identity() || reversible {
        o.checks.push(Check::at_most(
            "reversibility",
            rev.max_distance,
            t.reversibility,
            "max dist(iTiT c, c)",
        ));
        o.checks.push(Check::at_most(
            "entropy antisymmetry",
            rev.max_antisymmetry,
            t.antisymmetry,
            "max |s(c) + s(iTc)|",
        ));
    } else {
        o.warnings.push(format!(
            "map is not reversible under this twist (round trip {:e}); symmetry checks skipped",
            rev.max_distance
        ));
    }
    o.checks
        .push(Check::at_most("max |H|", rev.max_abs_h, t.h_bound, ""));
    if sys.epsilon() == 0.0 {
        o.checks.push(Check::at_most(
            "entropy production vanishes",
            rev.max_abs_s,
            0.0,
            "max |s| at zero forcing",
        ));
    }

    let jac = checks::jacobian_agreement(
        sys,
        v.fd_points,
        v.fd_step,
        cfg.force.constant_field(),
        cfg.seed,
    )?;
    o.checks.push(Check::at_most(
        "Jacobian quadrature vs finite differences",
        jac.max_fd_difference,
        t.jacobian_fd,
        format!(
            "{} points, {} near-singular skipped",
            jac.evaluated, jac.near_singular
        ),
    ));
    if jac.max_current_defect.is_finite() {
        o.checks.push(Check::at_most(
            "current identity",
            jac.max_current_defect,
            t.current,
            "max |log J_flow + E.dq|",
        ));
    }

    let inv = checks::mu0_invariance(sys.table(), v.ks_samples, cfg.seed)?;
    o.checks.push(Check::at_most(
        "unforced invariance (KS)",
        inv.ks,
        inv.critical,
        "sin(phi) after one step",
    ));
    o.checks.push(Check::at_most(
        "unforced entropy production",
        inv.max_abs_s,
        0.0,
        "",
    ));

    if sys.twist().is_identity() || reversible {
        let mcfg = MgfConfig {
            a_grid: v.ft_a_grid.clone(),
            n_list: v.ft_n_list.clone(),
            n_orbits: v.ft_orbits,
            init: Init::Mu0,
            ..cfg.mgf.build()
        };
        mcfg.validate()?;
        let (res, grid) = checks::transient_ft(sys, &mcfg, cfg.seed)?;
        out.csv("verify_mgf.csv", &MGF_HEADER, &mgf_rows(&grid))?;
        match res {
            Some(r) => o.checks.push(Check::at_most(
                "transient fluctuation residual",
                r,
                t.ft_residual,
                "",
            )),
            None => o
                .warnings
                .push("symmetry check skipped: a grid lacks 1-a partners".into()),
        }
    }

    let pos = checks::positivity(
        sys,
        v.ulam_grid,
        v.ulam_samples_per_box,
        &cfg.ulam.a_grid,
        cfg.seed,
    )?;
    o.checks.push(Check::at_least(
        "eigenvector positivity",
        pos.worst_min_ratio,
        -t.positivity,
        "",
    ));
    o.checks.push(Check {
        name: "spectral gap".into(),
        value: pos.smallest_gap,
        threshold: 0.0,
        pass: pos.smallest_gap > 0.0,
        detail: format!("{}x{} grid", v.ulam_grid, v.ulam_grid),
    });

    let rows: Vec<Vec<String>> = o
        .checks
        .iter()
        .map(|c| {
            vec![
                c.name.clone(),
                num(c.value),
                num(c.threshold),
                c.pass.to_string(),
            ]
        })
        .collect();
    out.csv(
        "checks.csv",
        &["check", "value", "threshold", "pass"],
        &rows,
    )?;
    o.discarded = json!({
        "reversibility_points": rev.skipped,
        "jacobian_points": jac.near_singular,
        "invariance_points": inv.skipped,
    });
    o.results = json!({
        "reversibility": rev,
        "jacobian": jac,
        "invariance": inv,
        "positivity": pos,
    });
    Ok(o)
}
