//! Monte Carlo layer: initial-distribution samplers, Birkhoff sums of the
//! entropy production, the logarithmic moment generating function, its
//! Legendre transform, the fluctuation-ratio histogram and Green–Kubo
//! diffusion estimates.
//!
//! Parallel work is split into chains, each with its own RNG substream. The
//! results of the chains are collected in chain order and every reduction
//! runs sequentially over that order, so outputs do not depend on the number
//! of worker threads.
//!
//! Sign convention for the rate function: `S_n/n` has rate function
//! `I(z) = sup_a {−a z − e(a)}` where `e(a) = lim (1/n) log E[e^{−a S_n}]`.
//! It vanishes at the mean `z* = −e'(0)`, and the symmetry `e(a) = e(1 − a)`
//! becomes `I(z) − I(−z) = −z`.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    billiard_map, free_flight, reflect_incidence, CollisionCoord, FlowState, System,
};
use crate::error::{Error, Result};
use crate::geometry::{TableConfig, Vec2};
use crate::rng::{substream, SimRng, Stream};
use crate::ulam::UlamGrid;

/// Draws from `dμ0 ∝ cos φ dr dφ`.
pub fn sample_mu0<R: Rng + ?Sized>(table: &TableConfig, rng: &mut R) -> CollisionCoord {
    let total = table.total_boundary_length();
    let mut pick = rng.gen::<f64>() * total;
    let mut id = table.len() - 1;
    for (i, s) in table.scatterers.iter().enumerate() {
        let l = s.perimeter();
        if pick < l {
            id = i;
            break;
        }
        pick -= l;
    }
    let per = table.scatterers[id].perimeter();
    let r = rng.gen::<f64>() * per;
    let u: f64 = rng.gen();
    CollisionCoord::new(id, r, phi_from_uniform(u))
}

/// Inverse CDF of the cosine density on `[−π/2, π/2]`.
#[inline]
pub fn phi_from_uniform(u: f64) -> f64 {
    (2.0 * u - 1.0).clamp(-1.0, 1.0).asin()
}

/// First collision of a flow state drawn uniformly from the table with a
/// uniform direction.
pub fn sample_lebesgue(sys: &System, rng: &mut SimRng) -> Result<CollisionCoord> {
    let table = sys.table();
    let q = loop {
        let q = Vec2::new(rng.gen(), rng.gen());
        let free = table
            .scatterers
            .iter()
            .all(|s| crate::geometry::torus_displacement(s.center, q).norm() > s.radius);
        if free {
            break q;
        }
    };
    let theta = rng.gen::<f64>() * 2.0 * PI;
    let start = FlowState::new(q.x, q.y, theta);
    let flight = free_flight(sys, &start, None)?;
    let (c, _, _) = reflect_incidence(sys, &flight.hit, &flight.end)?;
    Ok(c)
}

/// Initial distribution for ensembles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    Mu0,
    Srb,
    Lebesgue,
}

impl Init {
    pub fn name(&self) -> &'static str {
        match self {
            Init::Mu0 => "mu0",
            Init::Srb => "srb",
            Init::Lebesgue => "lebesgue",
        }
    }
}

/// A point approximately distributed by the steady state: a μ0 draw pushed
/// forward `burn_in` times. Orbits that hit the grazing cut are redrawn.
///
/// Returns the point and the number of redraws.
pub fn sample_srb(
    sys: &System,
    rng: &mut SimRng,
    burn_in: usize,
    max_resamples: usize,
) -> Result<(CollisionCoord, usize)> {
    let mut resamples = 0;
    'draw: loop {
        let mut c = sample_mu0(sys.table(), rng);
        for _ in 0..burn_in {
            match billiard_map(sys, &c) {
                Ok((next, _)) => c = next,
                Err(e) if e.is_orbit_local() => {
                    resamples += 1;
                    if resamples > max_resamples {
                        return Err(Error::ResampleLimit {
                            attempts: resamples,
                        });
                    }
                    continue 'draw;
                }
                Err(e) => return Err(e),
            }
        }
        return Ok((c, resamples));
    }
}

fn draw_initial(
    sys: &System,
    rng: &mut SimRng,
    init: Init,
    burn_in: usize,
    max_resamples: usize,
) -> Result<(CollisionCoord, usize)> {
    match init {
        Init::Mu0 => Ok((sample_mu0(sys.table(), rng), 0)),
        Init::Srb => sample_srb(sys, rng, burn_in, max_resamples),
        Init::Lebesgue => {
            let mut redraws = 0;
            loop {
                match sample_lebesgue(sys, rng) {
                    Ok(c) => return Ok((c, redraws)),
                    Err(e) if e.is_orbit_local() && redraws < max_resamples => redraws += 1,
                    Err(e) => return Err(e),
                }
            }
        }
    }
}

/// Orbit segment with per-step entropy production and displacement.
#[derive(Debug, Clone, PartialEq)]
pub struct OrbitSample {
    pub x0: CollisionCoord,
    pub s_values: Vec<f64>,
    pub dq_values: Vec<Vec2>,
    /// Last point reached.
    pub end: CollisionCoord,
    pub discarded: bool,
}

impl OrbitSample {
    pub fn sum(&self) -> f64 {
        self.s_values.iter().sum()
    }
}

/// Iterates the map `n` times from `x0`; a grazing abort truncates the orbit
/// and sets `discarded`.
pub fn birkhoff_orbit(sys: &System, x0: &CollisionCoord, n: usize) -> Result<OrbitSample> {
    let mut out = OrbitSample {
        x0: *x0,
        s_values: Vec::with_capacity(n),
        dq_values: Vec::with_capacity(n),
        end: *x0,
        discarded: false,
    };
    let mut c = *x0;
    for _ in 0..n {
        match billiard_map(sys, &c) {
            Ok((next, rec)) => {
                out.s_values.push(rec.s());
                out.dq_values.push(rec.dq);
                c = next;
            }
            Err(e) if e.is_orbit_local() => {
                out.discarded = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    out.end = c;
    Ok(out)
}

/// Ensemble of orbit windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub windows: usize,
    pub length: usize,
    /// Window lengths at which partial sums are recorded.
    pub checkpoints: Vec<usize>,
    pub init: Init,
    pub burn_in: usize,
    /// Consecutive windows cut from one steady-state chain after burn-in.
    /// Ignored for non-steady-state initializations.
    pub windows_per_chain: usize,
    pub max_resamples: usize,
}

/// Partial sums `S_n` per window at each checkpoint, stored window-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub checkpoints: Vec<usize>,
    pub sums: Vec<f64>,
    pub windows: usize,
    pub discarded: usize,
    pub collisions: u64,
}

/// Discarded fraction above which a run is flagged.
pub const MAX_DISCARD_FRACTION: f64 = 1e-4;

impl Ensemble {
    #[inline]
    pub fn sum(&self, window: usize, checkpoint: usize) -> f64 {
        self.sums[window * self.checkpoints.len() + checkpoint]
    }

    pub fn checkpoint_index(&self, n: usize) -> Option<usize> {
        self.checkpoints.iter().position(|&c| c == n)
    }

    /// All `S_n` values for one checkpoint.
    pub fn column(&self, checkpoint: usize) -> Vec<f64> {
        (0..self.windows).map(|w| self.sum(w, checkpoint)).collect()
    }

    pub fn discard_fraction(&self) -> f64 {
        self.discarded as f64 / (self.windows + self.discarded).max(1) as f64
    }

    pub fn flagged(&self) -> bool {
        self.discard_fraction() > MAX_DISCARD_FRACTION
    }
}

struct ChainOutput {
    sums: Vec<f64>,
    discarded: usize,
    collisions: u64,
}

/// Simulates the windows of an ensemble in parallel over chains.
pub fn simulate_ensemble(sys: &System, cfg: &EnsembleConfig, seed: u64) -> Result<Ensemble> {
    let mut checkpoints = cfg.checkpoints.clone();
    checkpoints.sort_unstable();
    checkpoints.dedup();
    if checkpoints.iter().any(|&c| c > cfg.length) {
        return Err(Error::InvalidParameter(
            "checkpoint beyond window length".into(),
        ));
    }
    let per_chain = if cfg.init == Init::Srb {
        cfg.windows_per_chain.max(1)
    } else {
        1
    };
    let chains = cfg.windows.div_ceil(per_chain);
    let outputs: Vec<Result<ChainOutput>> = (0..chains)
        .into_par_iter()
        .map(|chain| {
            let count = per_chain.min(cfg.windows - chain * per_chain);
            run_chain(
                sys,
                cfg,
                &checkpoints,
                count,
                substream(seed, Stream::Chain, chain as u64),
            )
        })
        .collect();
    let mut ens = Ensemble {
        sums: Vec::with_capacity(cfg.windows * checkpoints.len()),
        checkpoints,
        windows: cfg.windows,
        discarded: 0,
        collisions: 0,
    };
    for out in outputs {
        let out = out?;
        ens.sums.extend_from_slice(&out.sums);
        ens.discarded += out.discarded;
        ens.collisions += out.collisions;
    }
    Ok(ens)
}

fn run_chain(
    sys: &System,
    cfg: &EnsembleConfig,
    checkpoints: &[usize],
    count: usize,
    mut rng: SimRng,
) -> Result<ChainOutput> {
    let mut out = ChainOutput {
        sums: Vec::with_capacity(count * checkpoints.len()),
        discarded: 0,
        collisions: 0,
    };
    let mut need_draw = true;
    let mut c = CollisionCoord::new(0, 0.0, 0.0);
    let mut row = vec![0.0; checkpoints.len()];
    let mut done = 0;
    while done < count {
        if need_draw || cfg.init != Init::Srb {
            let (x0, redraws) =
                draw_initial(sys, &mut rng, cfg.init, cfg.burn_in, cfg.max_resamples)?;
            out.discarded += redraws;
            if cfg.init == Init::Srb {
                out.collisions += cfg.burn_in as u64;
            }
            c = x0;
            need_draw = false;
        }
        let mut sum = 0.0;
        let mut next_cp = 0;
        if checkpoints.first() == Some(&0) {
            row[0] = 0.0;
            next_cp = 1;
        }
        let mut ok = true;
        for step in 1..=cfg.length {
            match billiard_map(sys, &c) {
                Ok((next, rec)) => {
                    sum += rec.s();
                    c = next;
                }
                Err(e) if e.is_orbit_local() => {
                    ok = false;
                    break;
                }
                Err(e) => return Err(e),
            }
            if next_cp < checkpoints.len() && checkpoints[next_cp] == step {
                row[next_cp] = sum;
                next_cp += 1;
            }
        }
        out.collisions += cfg.length as u64;
        if !ok {
            out.discarded += 1;
            if out.discarded > cfg.max_resamples {
                return Err(Error::ResampleLimit {
                    attempts: out.discarded,
                });
            }
            need_draw = true;
            continue;
        }
        out.sums.extend_from_slice(&row);
        done += 1;
    }
    Ok(out)
}

/// Long steady-state orbits: per-step `s` and `Δx` for each chain.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesSet {
    pub s: Vec<Vec<f64>>,
    pub dx: Vec<Vec<f64>>,
    pub discarded: usize,
}

impl SeriesSet {
    pub fn total_len(&self) -> usize {
        self.s.iter().map(Vec::len).sum()
    }
}

/// Runs `chains` burned-in orbits of `length` collisions each. A chain that
/// hits the grazing cut restarts from a fresh draw.
pub fn simulate_series(
    sys: &System,
    chains: usize,
    length: usize,
    burn_in: usize,
    max_resamples: usize,
    seed: u64,
) -> Result<SeriesSet> {
    let runs: Vec<Result<(Vec<f64>, Vec<f64>, usize)>> = (0..chains)
        .into_par_iter()
        .map(|k| {
            let mut rng = substream(seed, Stream::Orbit, k as u64);
            let mut discarded = 0;
            loop {
                let (x0, redraws) = sample_srb(sys, &mut rng, burn_in, max_resamples)?;
                discarded += redraws;
                let orbit = birkhoff_orbit(sys, &x0, length)?;
                if orbit.discarded {
                    discarded += 1;
                    if discarded > max_resamples {
                        return Err(Error::ResampleLimit {
                            attempts: discarded,
                        });
                    }
                    continue;
                }
                let dx = orbit.dq_values.iter().map(|d| d.x).collect();
                return Ok((orbit.s_values, dx, discarded));
            }
        })
        .collect();
    let mut set = SeriesSet {
        s: Vec::with_capacity(chains),
        dx: Vec::with_capacity(chains),
        discarded: 0,
    };
    for r in runs {
        let (s, dx, d) = r?;
        set.s.push(s);
        set.dx.push(dx);
        set.discarded += d;
    }
    Ok(set)
}

/// Contiguous batch boundaries splitting `n` items into `b` groups.
fn batch_bounds(n: usize, b: usize) -> Vec<(usize, usize)> {
    (0..b).map(|k| (k * n / b, (k + 1) * n / b)).collect()
}

/// Standard error of a mean of per-batch linearized contributions.
fn batch_stderr(lin: &[f64]) -> f64 {
    let b = lin.len() as f64;
    if lin.len() < 2 {
        return f64::NAN;
    }
    let mean = lin.iter().sum::<f64>() / b;
    let ss: f64 = lin.iter().map(|x| (x - mean) * (x - mean)).sum();
    (ss / (b * (b - 1.0))).sqrt()
}

/// Settings for [`estimate_mgf`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MgfConfig {
    pub a_grid: Vec<f64>,
    pub n_list: Vec<usize>,
    pub n_orbits: usize,
    pub init: Init,
    pub burn_in: usize,
    pub windows_per_chain: usize,
    pub batches: usize,
    pub ess_threshold: f64,
    pub a0: f64,
    pub max_resamples: usize,
}

impl Default for MgfConfig {
    fn default() -> Self {
        Self {
            a_grid: default_a_grid(0.25, 0.05),
            n_list: vec![5, 10, 20, 30, 50],
            n_orbits: 100_000,
            init: Init::Srb,
            burn_in: 1000,
            windows_per_chain: 100,
            batches: 50,
            ess_threshold: 1000.0,
            a0: 0.25,
            max_resamples: 10_000,
        }
    }
}

/// `{−a0, −a0 + step, ..., 1 + a0}`, symmetric about 1/2.
pub fn default_a_grid(a0: f64, step: f64) -> Vec<f64> {
    let k = ((1.0 + 2.0 * a0) / step).round() as i64;
    (0..=k).map(|i| round_grid(-a0 + i as f64 * step)).collect()
}

fn round_grid(a: f64) -> f64 {
    (a * 1e12).round() / 1e12
}

impl MgfConfig {
    pub fn validate(&self) -> Result<()> {
        for &a in &self.a_grid {
            if !(a >= -self.a0 - 1e-12 && a <= 1.0 + self.a0 + 1e-12) {
                return Err(Error::InvalidParameter(format!(
                    "a outside [-a0, 1+a0]: a = {a}, a0 = {}",
                    self.a0
                )));
            }
        }
        if self.n_list.is_empty() || self.n_list.contains(&0) {
            return Err(Error::InvalidParameter(
                "n_list must hold positive lengths".into(),
            ));
        }
        if self.batches < 30 {
            return Err(Error::InvalidParameter(
                "at least 30 batches are required".into(),
            ));
        }
        if self.n_orbits < self.batches {
            return Err(Error::InvalidParameter("fewer orbits than batches".into()));
        }
        Ok(())
    }

    pub fn ensemble(&self) -> EnsembleConfig {
        let length = *self.n_list.iter().max().unwrap_or(&1);
        let mut checkpoints: Vec<usize> = self.n_list.iter().flat_map(|&n| [n - 1, n]).collect();
        checkpoints.sort_unstable();
        checkpoints.dedup();
        EnsembleConfig {
            windows: self.n_orbits,
            length,
            checkpoints,
            init: self.init,
            burn_in: self.burn_in,
            windows_per_chain: self.windows_per_chain,
            max_resamples: self.max_resamples,
        }
    }
}

/// MGF estimates on an `(a, n)` grid, indexed `[a][n]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MgfGrid {
    pub a_grid: Vec<f64>,
    pub n_list: Vec<usize>,
    pub init: Init,
    /// `(1/n) log mean e^{−a S_n}`; NaN where unstable.
    pub e_hat: Vec<Vec<f64>>,
    pub stderr: Vec<Vec<f64>>,
    /// `log M_n − log M_{n−1}`; NaN where unstable.
    pub slope: Vec<Vec<f64>>,
    pub slope_stderr: Vec<Vec<f64>>,
    pub ess: Vec<Vec<f64>>,
    pub stable: Vec<Vec<bool>>,
    pub windows: usize,
    pub discarded: usize,
    /// Per-batch linearized contributions, for paired standard errors.
    #[serde(skip)]
    pub lin_e: Vec<Vec<Vec<f64>>>,
    #[serde(skip)]
    pub lin_slope: Vec<Vec<Vec<f64>>>,
}

/// Which estimator of `e(a)` to read from a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    Average,
    Slope,
}

impl MgfGrid {
    pub fn value(&self, est: Estimator, a: usize, n: usize) -> f64 {
        match est {
            Estimator::Average => self.e_hat[a][n],
            Estimator::Slope => self.slope[a][n],
        }
    }

    pub fn value_stderr(&self, est: Estimator, a: usize, n: usize) -> f64 {
        match est {
            Estimator::Average => self.stderr[a][n],
            Estimator::Slope => self.slope_stderr[a][n],
        }
    }

    fn lin(&self, est: Estimator, a: usize, n: usize) -> &[f64] {
        match est {
            Estimator::Average => &self.lin_e[a][n],
            Estimator::Slope => &self.lin_slope[a][n],
        }
    }

    /// Standard error of `Σ c_k · value(a_k, n)` under common random numbers.
    pub fn combined_stderr(&self, est: Estimator, n: usize, terms: &[(usize, f64)]) -> f64 {
        let b = self.lin(est, 0, n).len();
        let lin: Vec<f64> = (0..b)
            .map(|k| terms.iter().map(|&(a, c)| c * self.lin(est, a, n)[k]).sum())
            .collect();
        batch_stderr(&lin)
    }

    /// Standard error of `value(a) − value(b)` under common random numbers.
    pub fn paired_stderr(&self, est: Estimator, n: usize, a: usize, b: usize) -> f64 {
        self.combined_stderr(est, n, &[(a, 1.0), (b, -1.0)])
    }

    /// Grid index of `1 − a_grid[i]`, if present.
    pub fn partner(&self, i: usize) -> Option<usize> {
        let target = 1.0 - self.a_grid[i];
        self.a_grid.iter().position(|&a| (a - target).abs() < 1e-9)
    }

    pub fn a_index(&self, a: f64) -> Option<usize> {
        self.a_grid.iter().position(|&x| (x - a).abs() < 1e-9)
    }

    /// Largest `n` index at which every `a` is stable.
    pub fn largest_stable_n(&self) -> Option<usize> {
        (0..self.n_list.len())
            .rev()
            .find(|&n| (0..self.a_grid.len()).all(|a| self.stable[a][n]))
    }

    /// Whether every grid point has its `1 − a` partner.
    pub fn has_all_partners(&self) -> bool {
        (0..self.a_grid.len()).all(|i| self.partner(i).is_some())
    }
}

/// Simulates the ensemble and estimates the MGF on the configured grid.
pub fn estimate_mgf(sys: &System, cfg: &MgfConfig, seed: u64) -> Result<MgfGrid> {
    cfg.validate()?;
    let ens = simulate_ensemble(sys, &cfg.ensemble(), seed)?;
    Ok(mgf_from_ensemble(&ens, cfg))
}

/// MGF estimates from recorded partial sums.
pub fn mgf_from_ensemble(ens: &Ensemble, cfg: &MgfConfig) -> MgfGrid {
    let bounds = batch_bounds(ens.windows, cfg.batches);
    let na = cfg.a_grid.len();
    let nn = cfg.n_list.len();
    let mut g = MgfGrid {
        a_grid: cfg.a_grid.clone(),
        n_list: cfg.n_list.clone(),
        init: cfg.init,
        e_hat: vec![vec![0.0; nn]; na],
        stderr: vec![vec![0.0; nn]; na],
        slope: vec![vec![0.0; nn]; na],
        slope_stderr: vec![vec![0.0; nn]; na],
        ess: vec![vec![0.0; nn]; na],
        stable: vec![vec![true; nn]; na],
        windows: ens.windows,
        discarded: ens.discarded,
        lin_e: vec![vec![Vec::new(); nn]; na],
        lin_slope: vec![vec![Vec::new(); nn]; na],
    };
    for (ai, &a) in cfg.a_grid.iter().enumerate() {
        for (ni, &n) in cfg.n_list.iter().enumerate() {
            let cur = log_mean_exp(
                ens,
                ens.checkpoint_index(n).expect("checkpoint"),
                a,
                &bounds,
            );
            let prev = if n == 1 {
                LogMean::one(bounds.len())
            } else {
                log_mean_exp(
                    ens,
                    ens.checkpoint_index(n - 1).expect("checkpoint"),
                    a,
                    &bounds,
                )
            };
            let nf = n as f64;
            let lin_e: Vec<f64> = cur.lin.iter().map(|l| l / nf).collect();
            let lin_s: Vec<f64> = cur.lin.iter().zip(&prev.lin).map(|(x, y)| x - y).collect();
            let stable = cur.ess >= cfg.ess_threshold && prev.ess >= cfg.ess_threshold;
            g.stable[ai][ni] = stable;
            g.ess[ai][ni] = cur.ess;
            g.stderr[ai][ni] = batch_stderr(&lin_e);
            g.slope_stderr[ai][ni] = batch_stderr(&lin_s);
            if stable {
                g.e_hat[ai][ni] = cur.log_mean / nf;
                g.slope[ai][ni] = cur.log_mean - prev.log_mean;
            } else {
                g.e_hat[ai][ni] = f64::NAN;
                g.slope[ai][ni] = f64::NAN;
            }
            g.lin_e[ai][ni] = lin_e;
            g.lin_slope[ai][ni] = lin_s;
        }
    }
    g
}

struct LogMean {
    log_mean: f64,
    /// Per-batch `(M_b − M)/M`.
    lin: Vec<f64>,
    ess: f64,
}

impl LogMean {
    fn one(batches: usize) -> Self {
        Self {
            log_mean: 0.0,
            lin: vec![0.0; batches],
            ess: f64::INFINITY,
        }
    }
}

fn log_mean_exp(ens: &Ensemble, cp: usize, a: f64, bounds: &[(usize, usize)]) -> LogMean {
    let shift = (0..ens.windows)
        .map(|w| -a * ens.sum(w, cp))
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    let mut total_sq = 0.0;
    let mut batch_means = Vec::with_capacity(bounds.len());
    for &(lo, hi) in bounds {
        let mut acc = 0.0;
        for w in lo..hi {
            let x = (-a * ens.sum(w, cp) - shift).exp();
            acc += x;
            total_sq += x * x;
        }
        total += acc;
        batch_means.push(acc / (hi - lo) as f64);
    }
    let mean = total / ens.windows as f64;
    LogMean {
        log_mean: mean.ln() + shift,
        lin: batch_means.iter().map(|m| (m - mean) / mean).collect(),
        ess: total * total / total_sq,
    }
}

/// Largest normalized asymmetry `|ê(a) − ê(1−a)| / se` over the paired grid
/// points and the given `n` indices; `None` when no pair exists.
pub fn symmetry_residual(grid: &MgfGrid, est: Estimator, n_indices: &[usize]) -> Option<f64> {
    let mut worst: Option<f64> = None;
    for i in 0..grid.a_grid.len() {
        let Some(j) = grid.partner(i) else { continue };
        for &n in n_indices {
            let d = (grid.value(est, i, n) - grid.value(est, j, n)).abs();
            let r = if i == j || d == 0.0 {
                0.0
            } else {
                d / grid.paired_stderr(est, n, i, j)
            };
            let r = if r.is_nan() { f64::INFINITY } else { r };
            worst = Some(worst.map_or(r, |w: f64| w.max(r)));
        }
    }
    worst
}

/// Transient fluctuation residual over all `(a, n)` of a μ0-initialized grid.
pub fn transient_ft_residual(grid: &MgfGrid) -> Option<f64> {
    let all: Vec<usize> = (0..grid.n_list.len()).collect();
    symmetry_residual(grid, Estimator::Average, &all)
}

/// Discrete Legendre transform of an MGF slice.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateFunction {
    pub z_grid: Vec<f64>,
    pub i_values: Vec<f64>,
    /// Index of the maximizing `a` for each `z`.
    pub argmax: Vec<usize>,
    /// `e ≡ 0`: `I(0) = 0` and `I = +∞` everywhere else.
    pub degenerate: bool,
    pub warnings: Vec<String>,
}

impl RateFunction {
    /// Value at `z`, `+∞` off the grid of a degenerate transform.
    pub fn value_at(&self, k: usize) -> f64 {
        self.i_values[k]
    }

    pub fn index_of(&self, z: f64) -> Option<usize> {
        let tol = 1e-9
            * self
                .z_grid
                .iter()
                .fold(0.0f64, |m, x| m.max(x.abs()))
                .max(1e-300);
        self.z_grid.iter().position(|&x| (x - z).abs() <= tol)
    }

    pub fn eval(&self, z: f64) -> f64 {
        if self.degenerate {
            return if z == 0.0 { 0.0 } else { f64::INFINITY };
        }
        match self.index_of(z) {
            Some(k) => self.i_values[k],
            None => f64::NAN,
        }
    }
}

/// `I(z) = max_k {−a_k z − e_k}` on a lattice `z = k·dz` spanning
/// `[−max e', −min e']` with about `points` nodes.
pub fn legendre(a_grid: &[f64], e: &[f64], points: usize) -> Result<RateFunction> {
    if a_grid.len() != e.len() || a_grid.len() < 2 {
        return Err(Error::InvalidParameter(
            "legendre needs at least two grid points".into(),
        ));
    }
    if e.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParameter(
            "e slice has non-finite entries".into(),
        ));
    }
    let mut warnings = Vec::new();
    let scale = e.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return Ok(RateFunction {
            z_grid: vec![0.0],
            i_values: vec![0.0],
            argmax: vec![a_grid.iter().position(|&a| a == 0.0).unwrap_or(0)],
            degenerate: true,
            warnings,
        });
    }
    let slopes: Vec<f64> = (0..a_grid.len() - 1)
        .map(|k| (e[k + 1] - e[k]) / (a_grid[k + 1] - a_grid[k]))
        .collect();
    for k in 1..a_grid.len() - 1 {
        if slopes[k] < slopes[k - 1] - 1e-9 * scale {
            warnings.push(format!("e is not convex near a = {}", a_grid[k]));
        }
    }
    let zmin = -slopes.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let zmax = -slopes.iter().cloned().fold(f64::INFINITY, f64::min);
    let dz = ((zmax - zmin) / (points.max(2) - 1) as f64).max(f64::MIN_POSITIVE);
    let kmin = (zmin / dz).ceil() as i64;
    let kmax = (zmax / dz).floor() as i64;
    let mut rf = RateFunction {
        z_grid: Vec::new(),
        i_values: Vec::new(),
        argmax: Vec::new(),
        degenerate: false,
        warnings,
    };
    for k in kmin..=kmax {
        let z = k as f64 * dz;
        let (best, arg) = a_grid
            .iter()
            .zip(e)
            .enumerate()
            .map(|(i, (&a, &ea))| (-a * z - ea, i))
            .fold(
                (f64::NEG_INFINITY, 0),
                |acc, x| if x.0 > acc.0 { x } else { acc },
            );
        rf.z_grid.push(z);
        rf.i_values.push(best);
        rf.argmax.push(arg);
    }
    Ok(rf)
}

/// One `(z, −z)` comparison of the rate-function symmetry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateSymmetryRow {
    pub z: f64,
    pub i_pos: f64,
    pub i_neg: f64,
    /// `I(z) − I(−z) + z`.
    pub defect: f64,
    pub stderr: f64,
}

/// Checks `I(z) − I(−z) = −z` on the symmetric part of the lattice, with the
/// error propagated through the maximizing grid points.
pub fn rate_symmetry(
    rate: &RateFunction,
    grid: &MgfGrid,
    est: Estimator,
    n: usize,
) -> Vec<RateSymmetryRow> {
    let mut rows = Vec::new();
    for (k, &z) in rate.z_grid.iter().enumerate() {
        if z <= 0.0 {
            continue;
        }
        let Some(m) = rate.index_of(-z) else { continue };
        let (i, j) = (rate.argmax[k], rate.argmax[m]);
        // Testing I(z) with 1 − a_j and I(−z) with 1 − a_i brackets the
        // defect: e(a_j) − e(1−a_j) ≤ defect ≤ e(1−a_i) − e(a_i).
        let pair = |x: usize| match grid.partner(x) {
            Some(y) if y != x => grid.paired_stderr(est, n, x, y),
            Some(_) => 0.0,
            None => f64::NAN,
        };
        let stderr = if grid.has_all_partners() {
            pair(i).max(pair(j))
        } else {
            grid.paired_stderr(est, n, j, i)
        };
        rows.push(RateSymmetryRow {
            z,
            i_pos: rate.i_values[k],
            i_neg: rate.i_values[m],
            defect: rate.i_values[k] - rate.i_values[m] + z,
            stderr,
        });
    }
    rows
}

/// One populated bin pair of the fluctuation-ratio histogram.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GcRow {
    pub z: f64,
    pub log_ratio: f64,
    pub count_pos: u64,
    pub count_neg: u64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GcTable {
    pub n: usize,
    pub bin_width: f64,
    pub rows: Vec<GcRow>,
    /// Weighted least-squares slope through the origin; NaN without rows.
    pub slope: f64,
    pub slope_stderr: f64,
    pub note: Option<String>,
}

/// `(1/n) log(P̂[z]/P̂[−z])` from samples of `S_n/n`.
///
/// Bins are centered at `k·w`, `|k| ≤ bins`, with `w` chosen so the outer bins
/// just cover the largest `|z|`. Pairs with fewer than `min_count` samples on
/// either side are dropped.
pub fn gc_ratio(z_values: &[f64], n: usize, bins: usize, min_count: u64) -> GcTable {
    let zmax = z_values.iter().fold(0.0f64, |m, z| m.max(z.abs()));
    let mut table = GcTable {
        n,
        bin_width: 0.0,
        rows: Vec::new(),
        slope: f64::NAN,
        slope_stderr: f64::NAN,
        note: None,
    };
    if zmax == 0.0 || bins == 0 {
        table.note = Some("all samples at z = 0; no symmetric pairs".into());
        return table;
    }
    let w = zmax / (bins as f64 + 0.5);
    table.bin_width = w;
    let mut counts = vec![0u64; 2 * bins + 1];
    for &z in z_values {
        let k = ((z / w).round() as i64).clamp(-(bins as i64), bins as i64);
        counts[(k + bins as i64) as usize] += 1;
    }
    let nf = n as f64;
    for k in 0..=bins {
        let cp = counts[bins + k];
        let cn = counts[bins - k];
        if cp < min_count || cn < min_count {
            continue;
        }
        table.rows.push(GcRow {
            z: k as f64 * w,
            log_ratio: (cp as f64 / cn as f64).ln() / nf,
            count_pos: cp,
            count_neg: cn,
            stderr: if k == 0 {
                0.0
            } else {
                (1.0 / cp as f64 + 1.0 / cn as f64).sqrt() / nf
            },
        });
    }
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for r in table.rows.iter().filter(|r| r.z > 0.0) {
        let wt = 1.0 / (r.stderr * r.stderr);
        sxy += wt * r.z * r.log_ratio;
        sxx += wt * r.z * r.z;
    }
    if sxx > 0.0 {
        table.slope = sxy / sxx;
        table.slope_stderr = 1.0 / sxx.sqrt();
    } else {
        table.note = Some("no populated symmetric bin pairs".into());
    }
    table
}

/// Green–Kubo and batch-means estimates of the diffusion coefficient of `s`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GreenKubo {
    pub mean: f64,
    /// `C(0) + 2 Σ_{j ≤ j_max} C(j)`.
    pub sigma2: f64,
    pub sigma2_stderr: f64,
    /// `L · Var(block means)`.
    pub sigma2_bm: f64,
    pub sigma2_bm_stderr: f64,
    pub autocov: Vec<f64>,
    pub decayed: bool,
    pub warnings: Vec<String>,
}

fn autocov(series: &[Vec<f64>], mean: f64, j_max: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sums = vec![0.0; j_max + 1];
    let mut counts = vec![0.0; j_max + 1];
    for s in series {
        for j in 0..=j_max.min(s.len().saturating_sub(1)) {
            let mut acc = 0.0;
            for t in 0..s.len() - j {
                acc += (s[t] - mean) * (s[t + j] - mean);
            }
            sums[j] += acc;
            counts[j] += (s.len() - j) as f64;
        }
    }
    let c = sums
        .iter()
        .zip(&counts)
        .map(|(s, n)| if *n > 0.0 { s / n } else { 0.0 })
        .collect();
    (c, counts)
}

fn gk_sum(c: &[f64]) -> f64 {
    c[0] + 2.0 * c[1..].iter().sum::<f64>()
}

fn block_variance(series: &[Vec<f64>], mean: f64, block: usize) -> (f64, usize) {
    let mut ss = 0.0;
    let mut blocks = 0usize;
    for s in series {
        for chunk in s.chunks_exact(block) {
            let m = chunk.iter().sum::<f64>() / block as f64;
            ss += (m - mean) * (m - mean);
            blocks += 1;
        }
    }
    (ss * block as f64 / (blocks.max(2) - 1) as f64, blocks)
}

/// Green–Kubo `σ²` of pooled series, with standard errors from `groups`
/// contiguous groups of series.
pub fn green_kubo(
    series: &[Vec<f64>],
    j_max: usize,
    block: usize,
    groups: usize,
) -> Result<GreenKubo> {
    let total: usize = series.iter().map(Vec::len).sum();
    if total == 0 || block == 0 {
        return Err(Error::InvalidParameter(
            "green_kubo needs data and a positive block length".into(),
        ));
    }
    let mean = series.iter().flat_map(|s| s.iter()).sum::<f64>() / total as f64;
    let (c, _) = autocov(series, mean, j_max);
    let sigma2 = gk_sum(&c);
    let (sigma2_bm, _) = block_variance(series, mean, block);

    let groups = groups.min(series.len()).max(1);
    let mut gk_parts = Vec::with_capacity(groups);
    let mut bm_parts = Vec::with_capacity(groups);
    for (lo, hi) in batch_bounds(series.len(), groups) {
        let part = &series[lo..hi];
        gk_parts.push(gk_sum(&autocov(part, mean, j_max).0));
        bm_parts.push(block_variance(part, mean, block).0);
    }
    let spread = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let lin: Vec<f64> = v.iter().map(|x| x - m).collect();
        batch_stderr(&lin)
    };
    let noise = (2.0 / total as f64).sqrt() * c[0].abs() * 3.0;
    let tail = c[c.len().saturating_sub(5)..]
        .iter()
        .fold(0.0f64, |m, x| m.max(x.abs()));
    let decayed = tail <= noise.max(1e-3 * c[0].abs());
    let mut warnings = Vec::new();
    if !decayed {
        warnings.push(format!("autocovariance not decayed by lag {j_max}"));
    }
    Ok(GreenKubo {
        mean,
        sigma2,
        sigma2_stderr: spread(&gk_parts),
        sigma2_bm,
        sigma2_bm_stderr: spread(&bm_parts),
        autocov: c,
        decayed,
        warnings,
    })
}

/// Shuffles each series; a surrogate with the same marginals and no memory.
pub fn shuffled(series: &[Vec<f64>], seed: u64) -> Vec<Vec<f64>> {
    series
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let mut v = s.clone();
            v.shuffle(&mut substream(seed, Stream::Shuffle, k as u64));
            v
        })
        .collect()
}

/// Steady-state mean of `s` and the first-order prediction `−ε μ0(H)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntropyRate {
    pub mean_s: f64,
    pub mean_s_stderr: f64,
    pub eps_mu0_h: f64,
    pub eps_mu0_h_stderr: f64,
}

impl EntropyRate {
    /// `|μ̂_E(s) + ε μ̂0(H)|`.
    pub fn expansion_defect(&self) -> f64 {
        (self.mean_s + self.eps_mu0_h).abs()
    }
}

/// Mean of `H` under μ0 estimated by stratified sampling over an equal-mass
/// partition, `per_box ≥ 2` jittered samples per box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StratifiedMean {
    pub mean: f64,
    pub stderr: f64,
    pub max_abs: f64,
    pub skipped: usize,
}

pub fn mu0_h_stratified(
    sys: &System,
    grid: &UlamGrid,
    per_box: usize,
    seed: u64,
) -> Result<StratifiedMean> {
    if per_box < 2 {
        return Err(Error::InvalidParameter(
            "stratified estimate needs two samples per box".into(),
        ));
    }
    let eps = sys.epsilon();
    let boxes: Vec<Result<(f64, f64, f64, usize)>> = (0..grid.len())
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(seed, Stream::Mu0Samples, b as u64);
            let (mut sum, mut sq, mut max_abs, mut skipped, mut n) = (0.0, 0.0, 0.0f64, 0, 0);
            for c in grid.jittered_samples(b, per_box, &mut rng) {
                match billiard_map(sys, &c) {
                    Ok((_, rec)) => {
                        let h = if eps == 0.0 { 0.0 } else { rec.jacobian.h };
                        sum += h;
                        sq += h * h;
                        max_abs = max_abs.max(h.abs());
                        n += 1;
                    }
                    Err(e) if e.is_orbit_local() => skipped += 1,
                    Err(e) => return Err(e),
                }
            }
            let m = sum / n.max(1) as f64;
            let var = if n > 1 {
                (sq - n as f64 * m * m).max(0.0) / (n - 1) as f64 / n as f64
            } else {
                0.0
            };
            Ok((m, var, max_abs, skipped))
        })
        .collect();
    let k = grid.len() as f64;
    let mut out = StratifiedMean {
        mean: 0.0,
        stderr: 0.0,
        max_abs: 0.0,
        skipped: 0,
    };
    let mut var = 0.0;
    for b in boxes {
        let (m, v, mx, sk) = b?;
        out.mean += m / k;
        var += v / (k * k);
        out.max_abs = out.max_abs.max(mx);
        out.skipped += sk;
    }
    out.stderr = var.sqrt();
    Ok(out)
}

/// Combines steady-state series with a μ0 estimate of `H`.
pub fn mean_entropy_rate(
    series: &[Vec<f64>],
    groups: usize,
    mu0_h: &StratifiedMean,
    eps: f64,
) -> EntropyRate {
    let total: usize = series.iter().map(Vec::len).sum();
    let mean = series.iter().flat_map(|s| s.iter()).sum::<f64>() / total.max(1) as f64;
    let groups = groups.min(series.len()).max(1);
    let lin: Vec<f64> = batch_bounds(series.len(), groups)
        .into_iter()
        .map(|(lo, hi)| {
            let part = &series[lo..hi];
            let n: usize = part.iter().map(Vec::len).sum();
            let m = part.iter().flat_map(|s| s.iter()).sum::<f64>() / n.max(1) as f64;
            m - mean
        })
        .collect();
    EntropyRate {
        mean_s: mean,
        mean_s_stderr: batch_stderr(&lin),
        eps_mu0_h: eps * mu0_h.mean,
        eps_mu0_h_stderr: eps * mu0_h.stderr,
    }
}

/// One-sample Kolmogorov–Smirnov statistic against uniform `[lo, hi]`, with
/// the asymptotic 1% critical value.
pub fn ks_uniform(samples: &[f64], lo: f64, hi: f64) -> (f64, f64) {
    let mut v: Vec<f64> = samples.iter().map(|x| (x - lo) / (hi - lo)).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let d = v
        .iter()
        .enumerate()
        .map(|(i, &x)| ((i as f64 + 1.0) / n - x).max(x - i as f64 / n))
        .fold(0.0f64, f64::max);
    (d, 1.628 / n.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{ForceModel, TwistModel};
    use approx::assert_abs_diff_eq;

    fn system(e: f64) -> System {
        System::new(
            TableConfig::default(),
            ForceModel::constant(e, 0.0),
            TwistModel::Identity,
        )
        .unwrap()
    }

    #[test]
    fn mu0_inverse_cdf() {
        assert_eq!(phi_from_uniform(0.5), 0.0);
        assert_abs_diff_eq!(phi_from_uniform(1.0), PI / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(phi_from_uniform(1.0 - 1e-12), PI / 2.0, epsilon = 2e-6);
    }

    #[test]
    fn mu0_sin_phi_moments() {
        let table = TableConfig::default();
        let mut rng = substream(1, Stream::Mu0Samples, 0);
        let n = 1_000_000;
        let mut sum = 0.0;
        let mut on_a = 0usize;
        for _ in 0..n {
            let c = sample_mu0(&table, &mut rng);
            sum += c.phi.sin();
            on_a += (c.scatterer == 0) as usize;
        }
        let bound = 3.0 / (n as f64 / 3.0).sqrt();
        assert!((sum / n as f64).abs() < bound);
        // boundary-length weights 2/3 and 1/3
        assert!(
            (on_a as f64 / n as f64 - 2.0 / 3.0).abs() < 3.0 * (2.0f64 / 9.0 / n as f64).sqrt()
        );
    }

    #[test]
    fn srb_without_burn_in_is_mu0() {
        let sys = system(0.05);
        let mut a = substream(9, Stream::Chain, 0);
        let mut b = substream(9, Stream::Chain, 0);
        for _ in 0..100 {
            let (x, _) = sample_srb(&sys, &mut a, 0, 10).unwrap();
            assert_eq!(x, sample_mu0(sys.table(), &mut b));
        }
    }

    #[test]
    fn birkhoff_examples() {
        let sys = system(0.05);
        let x0 = CollisionCoord::new(0, 0.3, 0.2);
        assert_eq!(birkhoff_orbit(&sys, &x0, 0).unwrap().sum(), 0.0);
        let two = birkhoff_orbit(&sys, &x0, 2).unwrap();
        let (x1, r0) = billiard_map(&sys, &x0).unwrap();
        let (_, r1) = billiard_map(&sys, &x1).unwrap();
        assert_eq!(two.sum().to_bits(), (r0.s() + r1.s()).to_bits());
        // additivity
        let long = birkhoff_orbit(&sys, &x0, 30).unwrap();
        let head = birkhoff_orbit(&sys, &x0, 12).unwrap();
        let tail = birkhoff_orbit(&sys, &head.end, 18).unwrap();
        let joined: Vec<f64> = head
            .s_values
            .iter()
            .chain(&tail.s_values)
            .copied()
            .collect();
        assert_eq!(joined, long.s_values);
        let free = birkhoff_orbit(&system(0.0), &x0, 50).unwrap();
        assert!(free.s_values.iter().all(|&s| s == 0.0));
    }

    fn small_cfg(init: Init) -> MgfConfig {
        MgfConfig {
            a_grid: vec![-0.25, 0.0, 0.25, 0.5, 0.75, 1.0, 1.25],
            n_list: vec![1, 5, 10],
            n_orbits: 3000,
            init,
            burn_in: 50,
            windows_per_chain: 30,
            batches: 30,
            ess_threshold: 100.0,
            a0: 0.25,
            max_resamples: 100,
        }
    }

    #[test]
    fn mgf_trivial_rows() {
        let g = estimate_mgf(&system(0.05), &small_cfg(Init::Mu0), 3).unwrap();
        let zero = g.a_index(0.0).unwrap();
        for n in 0..g.n_list.len() {
            assert_eq!(g.e_hat[zero][n], 0.0);
            assert_eq!(g.slope[zero][n], 0.0);
        }
        let g0 = estimate_mgf(&system(0.0), &small_cfg(Init::Srb), 3).unwrap();
        assert!(g0.e_hat.iter().flatten().all(|&e| e == 0.0));
        assert_eq!(transient_ft_residual(&g0), Some(0.0));
    }

    #[test]
    fn transient_symmetry_small_sample() {
        let g = estimate_mgf(&system(0.05), &small_cfg(Init::Mu0), 11).unwrap();
        let r = transient_ft_residual(&g).unwrap();
        assert!(r <= 3.0, "residual {r}");
        // a = 0.5 is its own partner
        let half = g.a_index(0.5).unwrap();
        assert_eq!(g.partner(half), Some(half));
    }

    #[test]
    fn mgf_is_worker_count_independent() {
        let sys = system(0.05);
        let cfg = small_cfg(Init::Srb);
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let three = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap();
        let a = one.install(|| estimate_mgf(&sys, &cfg, 5).unwrap());
        let b = three.install(|| estimate_mgf(&sys, &cfg, 5).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn a_grid_validation() {
        let mut cfg = small_cfg(Init::Mu0);
        cfg.a_grid.push(1.6);
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("a outside [-a0, 1+a0]"), "{err}");
        let g = default_a_grid(0.25, 0.05);
        assert_eq!(g.len(), 31);
        assert_eq!(g[0], -0.25);
        assert_eq!(*g.last().unwrap(), 1.25);
        assert!(g.contains(&0.5));
    }

    #[test]
    fn legendre_degenerate() {
        let a = [-0.25, 0.0, 0.5, 1.0, 1.25];
        let rf = legendre(&a, &[0.0; 5], 11).unwrap();
        assert!(rf.degenerate);
        assert_eq!(rf.eval(0.0), 0.0);
        assert_eq!(rf.eval(0.1), f64::INFINITY);
    }

    #[test]
    fn legendre_of_symmetric_quadratic() {
        let c = 0.3;
        let a = default_a_grid(0.25, 0.05);
        let e: Vec<f64> = a.iter().map(|&a| c * a * (a - 1.0)).collect();
        let rf = legendre(&a, &e, 41).unwrap();
        assert!(rf.warnings.is_empty());
        let mut pairs = 0;
        for (k, &z) in rf.z_grid.iter().enumerate() {
            if let Some(m) = rf.index_of(-z) {
                assert!((rf.i_values[k] - rf.i_values[m] + z).abs() < 1e-10);
                pairs += 1;
            }
            assert!(rf.i_values[k] >= -1e-15);
        }
        assert!(pairs > 10);
        // minimum at z* = −e'(0) = c
        let zstar = rf.index_of(c).unwrap_or_else(|| {
            rf.z_grid
                .iter()
                .enumerate()
                .min_by(|x, y| (x.1 - c).abs().total_cmp(&(y.1 - c).abs()))
                .unwrap()
                .0
        });
        let kmin = rf
            .i_values
            .iter()
            .enumerate()
            .min_by(|x, y| x.1.total_cmp(y.1))
            .unwrap()
            .0;
        assert!((rf.z_grid[kmin] - rf.z_grid[zstar]).abs() <= 1.5 * (rf.z_grid[1] - rf.z_grid[0]));
        assert!(rf.i_values[kmin].abs() < 1e-3 * c);
    }

    #[test]
    fn legendre_flags_nonconvex() {
        let a = [0.0, 0.5, 1.0];
        let rf = legendre(&a, &[0.0, 0.1, 0.0], 5).unwrap();
        assert!(!rf.warnings.is_empty());
    }

    #[test]
    fn gc_ratio_examples() {
        let t = gc_ratio(&vec![0.0; 100], 10, 10, 50);
        assert!(t.rows.is_empty() && t.note.is_some());
        // exact exponential tilt of a symmetric sample set reproduces slope 1
        let n = 10;
        let mut z = Vec::new();
        for k in -20i64..=20 {
            let x = k as f64 * 0.01;
            let count = (1e5 * (-x * x / 0.02).exp() * (n as f64 * x / 2.0).exp()).round() as usize;
            z.extend(std::iter::repeat(x).take(count));
        }
        // pin the bin width to the 0.01 lattice
        z.extend([0.205, -0.205]);
        let t = gc_ratio(&z, n, 20, 50);
        assert_eq!(t.rows[0].z, 0.0);
        assert_eq!(t.rows[0].log_ratio, 0.0);
        assert!((t.slope - 1.0).abs() < 0.01, "{}", t.slope);
    }

    #[test]
    fn green_kubo_examples() {
        let zero = vec![vec![0.0; 1000]; 10];
        let gk = green_kubo(&zero, 50, 100, 10).unwrap();
        assert_eq!(gk.sigma2, 0.0);
        assert_eq!(gk.sigma2_bm, 0.0);

        // AR(1): x_t = ρ x_{t−1} + ξ, σ² = 1/(1−ρ)²
        let rho = 0.5;
        let mut rng = substream(2, Stream::Verify, 0);
        let series: Vec<Vec<f64>> = (0..40)
            .map(|_| {
                let mut x = 0.0;
                (0..20_000)
                    .map(|_| {
                        let xi: f64 = rng.gen::<f64>() * 12f64.sqrt() - 3f64.sqrt();
                        x = rho * x + xi;
                        x
                    })
                    .collect()
            })
            .collect();
        let gk = green_kubo(&series, 50, 1000, 40).unwrap();
        let exact = 1.0 / ((1.0 - rho) * (1.0 - rho));
        assert!(
            (gk.sigma2 - exact).abs() < 3.0 * gk.sigma2_stderr + 0.01,
            "{gk:?}"
        );
        assert!((gk.sigma2_bm - exact).abs() < 3.0 * gk.sigma2_bm_stderr + 0.01);
        assert!(gk.decayed);

        let white = shuffled(&series, 4);
        let gk = green_kubo(&white, 50, 1000, 40).unwrap();
        let var = 1.0 / (1.0 - rho * rho);
        assert!((gk.sigma2 - var).abs() < 3.0 * gk.sigma2_stderr, "{gk:?}");
    }

    #[test]
    fn ks_detects_nonuniform() {
        let u: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        let (d, crit) = ks_uniform(&u, 0.0, 1.0);
        assert!(d < crit);
        let sq: Vec<f64> = u.iter().map(|x| x * x).collect();
        let (d, crit) = ks_uniform(&sq, 0.0, 1.0);
        assert!(d > crit);
    }
}
