//! Ulam discretization of the weighted transfer operator.
//!
//! Collision space is cut into boxes uniform in `(r, u = sin φ)`. Because
//! `dμ0 ∝ cos φ dr dφ = dr du`, boxes of equal size in `(r, u)` carry equal
//! μ0 mass, and the per-scatterer box counts are chosen proportional to the
//! radius so the mass is the same across scatterers too.
//!
//! The matrix entry for a transition from box `i` to box `j` is
//!
//! ```text
//! M_a[j, i] = E_{x ~ μ0 | B_i} [ J(x)^a · 1{T x ∈ B_j} ],    J^a = e^{−a s}
//! ```
//!
//! Substituting `y = T x` in `∫_{B_j} L_{T,a} h dμ0`, the operator weight
//! `J^{a−1}∘T^{−1}` combines with the change of variables `dμ0(y) = J(x)
//! dμ0(x)` into `J(x)^a`. At `a = 0` the columns sum to one (minus discarded
//! samples), so the leading eigenvalue is 1; at `a = 1` the rows sum to one
//! in expectation.
//!
//! One set of `(box_from, box_to, s)` samples is reused for every `a`. For
//! reversible systems each sample is used a second time as a sample of the
//! inverse map (see [`UlamMatrix::from_samples_reversible`]), which pins both
//! `λ_0` and `λ_1` to one and makes `a ↦ λ_a` symmetric about 1/2.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{billiard_map, CollisionCoord, System};
use crate::error::{Error, Result};
use crate::geometry::TableConfig;
use crate::rng::{substream, SimRng, Stream};

/// Equal-mass partition of collision space.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UlamGrid {
    pub n_r: Vec<usize>,
    pub n_u: usize,
    perimeters: Vec<f64>,
    offsets: Vec<usize>,
}

impl UlamGrid {
    /// `n_r` boxes in `r` on the largest scatterer (scaled by radius on the
    /// others) and `n_u` boxes in `u`.
    pub fn new(table: &TableConfig, n_r: usize, n_u: usize) -> Result<Self> {
        if table.is_empty() || n_r == 0 || n_u == 0 {
            return Err(Error::InvalidParameter(
                "Ulam grid needs scatterers and positive box counts".into(),
            ));
        }
        let rmax = table.max_radius();
        let counts: Vec<usize> = table
            .scatterers
            .iter()
            .map(|s| ((n_r as f64 * s.radius / rmax).round() as usize).max(1))
            .collect();
        let mut offsets = Vec::with_capacity(counts.len() + 1);
        let mut acc = 0;
        for c in &counts {
            offsets.push(acc);
            acc += c * n_u;
        }
        offsets.push(acc);
        Ok(Self {
            n_r: counts,
            n_u,
            perimeters: table.scatterers.iter().map(|s| s.perimeter()).collect(),
            offsets,
        })
    }

    pub fn len(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Whether all boxes carry exactly the same μ0 mass.
    pub fn equal_mass(&self) -> bool {
        let w: Vec<f64> = self
            .perimeters
            .iter()
            .zip(&self.n_r)
            .map(|(p, n)| p / *n as f64)
            .collect();
        w.iter().all(|x| (x / w[0] - 1.0).abs() < 1e-12)
    }

    pub fn box_of(&self, c: &CollisionCoord) -> usize {
        let nr = self.n_r[c.scatterer];
        let per = self.perimeters[c.scatterer];
        let jr = ((c.r.rem_euclid(per) / per * nr as f64) as usize).min(nr - 1);
        let ju = (((c.phi.sin() + 1.0) * 0.5 * self.n_u as f64) as usize).min(self.n_u - 1);
        self.offsets[c.scatterer] + jr * self.n_u + ju
    }

    /// `(scatterer, r_lo, r_hi, u_lo, u_hi)` of a box.
    pub fn bounds(&self, b: usize) -> (usize, f64, f64, f64, f64) {
        let id = self.offsets.partition_point(|&o| o <= b) - 1;
        let local = b - self.offsets[id];
        let (jr, ju) = (local / self.n_u, local % self.n_u);
        let dr = self.perimeters[id] / self.n_r[id] as f64;
        let du = 2.0 / self.n_u as f64;
        (
            id,
            jr as f64 * dr,
            (jr + 1) as f64 * dr,
            -1.0 + ju as f64 * du,
            -1.0 + (ju + 1) as f64 * du,
        )
    }

    /// μ0 mass of box `b` relative to the whole collision space.
    pub fn mass(&self, b: usize) -> f64 {
        let id = self.offsets.partition_point(|&o| o <= b) - 1;
        let total: f64 = self.perimeters.iter().sum();
        self.perimeters[id] / (self.n_r[id] * self.n_u) as f64 / total
    }

    /// Box holding the velocity reversal `(r, −φ)` of box `b`.
    pub fn reversed(&self, b: usize) -> usize {
        let id = self.offsets.partition_point(|&o| o <= b) - 1;
        let local = b - self.offsets[id];
        let (jr, ju) = (local / self.n_u, local % self.n_u);
        self.offsets[id] + jr * self.n_u + (self.n_u - 1 - ju)
    }

    /// `m` μ0-distributed points in box `b`, one per cell of a `k × k`
    /// sub-grid (`k = ⌊√m⌋`) plus any remainder drawn uniformly.
    pub fn jittered_samples(&self, b: usize, m: usize, rng: &mut SimRng) -> Vec<CollisionCoord> {
        let (id, r0, r1, u0, u1) = self.bounds(b);
        let k = (m as f64).sqrt().floor() as usize;
        let mut out = Vec::with_capacity(m);
        let point = |fr: f64, fu: f64| {
            let u = (u0 + fu * (u1 - u0)).clamp(-1.0, 1.0);
            CollisionCoord::new(id, r0 + fr * (r1 - r0), u.asin())
        };
        for i in 0..k {
            for j in 0..k {
                let fr = (i as f64 + rng.gen::<f64>()) / k as f64;
                let fu = (j as f64 + rng.gen::<f64>()) / k as f64;
                out.push(point(fr, fu));
            }
        }
        for _ in k * k..m {
            out.push(point(rng.gen(), rng.gen()));
        }
        out
    }
}

/// Transitions sampled from every box, shared by all weights `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct UlamSamples {
    pub grid: UlamGrid,
    pub per_box: usize,
    /// `(to, s)` per sample, grouped by source box.
    pub transitions: Vec<Vec<(u32, f64)>>,
    pub discarded: Vec<usize>,
    /// Largest `|H|` over the samples.
    pub max_abs_h: f64,
    /// The sampled map is forced and time-reversible, enabling the backward
    /// estimator. Unforced samples carry unit weights and need no help.
    pub reversible: bool,
}

/// Fraction of discarded samples above which a column is flagged.
pub const COLUMN_DISCARD_LIMIT: f64 = 0.01;

impl UlamSamples {
    pub fn total_discarded(&self) -> usize {
        self.discarded.iter().sum()
    }

    pub fn flagged_columns(&self) -> Vec<usize> {
        (0..self.discarded.len())
            .filter(|&i| self.discarded[i] as f64 > COLUMN_DISCARD_LIMIT * self.per_box as f64)
            .collect()
    }
}

/// Pushes `per_box` stratified samples from each box through the map.
pub fn sample_transitions(
    sys: &System,
    grid: &UlamGrid,
    per_box: usize,
    seed: u64,
) -> Result<UlamSamples> {
    if per_box == 0 {
        return Err(Error::InvalidParameter(
            "samples_per_box must be positive".into(),
        ));
    }
    let eps = sys.epsilon();
    let cols: Vec<Result<(Vec<(u32, f64)>, usize, f64)>> = (0..grid.len())
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(seed, Stream::Ulam, b as u64);
            let mut col = Vec::with_capacity(per_box);
            let mut discarded = 0;
            let mut hmax = 0.0f64;
            for c in grid.jittered_samples(b, per_box, &mut rng) {
                match billiard_map(sys, &c) {
                    Ok((to, rec)) => {
                        col.push((grid.box_of(&to) as u32, rec.s()));
                        if eps > 0.0 {
                            hmax = hmax.max(rec.jacobian.h.abs());
                        }
                    }
                    Err(e) if e.is_orbit_local() => discarded += 1,
                    Err(e) => return Err(e),
                }
            }
            Ok((col, discarded, hmax))
        })
        .collect();
    let mut out = UlamSamples {
        grid: grid.clone(),
        per_box,
        transitions: Vec::with_capacity(grid.len()),
        discarded: Vec::with_capacity(grid.len()),
        max_abs_h: 0.0,
        reversible: sys.twist().is_identity() && eps > 0.0,
    };
    for c in cols {
        let (col, d, h) = c?;
        out.transitions.push(col);
        out.discarded.push(d);
        out.max_abs_h = out.max_abs_h.max(h);
    }
    Ok(out)
}

/// Sparse column-compressed Ulam matrix for one weight `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct UlamMatrix {
    pub a: f64,
    pub n: usize,
    col_ptr: Vec<usize>,
    rows: Vec<u32>,
    values: Vec<f64>,
    pub samples_per_box: usize,
    pub discarded: usize,
}

impl UlamMatrix {
    /// Matrix for weight `a`; uses the time-reversal estimator when the
    /// samples come from a reversible system.
    pub fn from_samples(samples: &UlamSamples, a: f64) -> Self {
        if samples.reversible {
            Self::from_samples_reversible(samples, a)
        } else {
            Self::from_samples_forward(samples, a)
        }
    }

    /// Plain estimator: each sample `x ∈ B_k`, `T x ∈ B_l` adds
    /// `e^{−a s(x)}/m` to entry `(l, k)`.
    pub fn from_samples_forward(samples: &UlamSamples, a: f64) -> Self {
        let inv = 1.0 / samples.per_box as f64;
        let cols = samples
            .transitions
            .iter()
            .map(|col| {
                col.iter()
                    .map(|&(to, s)| (to, (-a * s).exp() * inv))
                    .collect()
            })
            .collect();
        Self::assemble(samples, a, cols)
    }

    /// Blend of the forward estimator with the backward one obtained from
    /// the same samples through the reversal `T⁻¹ = i T i`.
    ///
    /// A sample `x ∈ B_k → B_l` is also a backward sample from `B_rev(k)`
    /// into `B_rev(l)`, whose inverse-map Jacobian is `e^{s(x)}`; it estimates
    /// entry `(rev k, rev l)` with weight `e^{(a−1) s(x)}`. Mixing forward and
    /// backward parts with weights `1 − w, w` where `w = clamp(a, 0, 1)`
    /// keeps entries nonnegative and unbiased, makes `a = 0` exactly column
    /// stochastic and `a = 1` exactly row stochastic, and gives
    /// `M_{1−a} = P M_aᵀ P` for the reversal permutation `P`.
    pub fn from_samples_reversible(samples: &UlamSamples, a: f64) -> Self {
        let g = &samples.grid;
        let inv = 1.0 / samples.per_box as f64;
        let w = a.clamp(0.0, 1.0);
        let mut cols: Vec<Vec<(u32, f64)>> = vec![Vec::new(); g.len()];
        for (k, col) in samples.transitions.iter().enumerate() {
            let rk = g.reversed(k);
            for &(to, s) in col {
                if w < 1.0 {
                    cols[k].push((to, (1.0 - w) * (-a * s).exp() * inv));
                }
                if w > 0.0 {
                    let rl = g.reversed(to as usize);
                    let ratio = g.mass(rk) / g.mass(rl);
                    cols[rl].push((rk as u32, w * ((a - 1.0) * s).exp() * inv * ratio));
                }
            }
        }
        Self::assemble(samples, a, cols)
    }

    fn assemble(samples: &UlamSamples, a: f64, mut cols: Vec<Vec<(u32, f64)>>) -> Self {
        let n = samples.grid.len();
        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut rows = Vec::new();
        let mut values = Vec::new();
        col_ptr.push(0);
        for col in cols.iter_mut() {
            col.sort_by_key(|e| e.0);
            let mut k = 0;
            while k < col.len() {
                let row = col[k].0;
                let mut v = 0.0;
                while k < col.len() && col[k].0 == row {
                    v += col[k].1;
                    k += 1;
                }
                rows.push(row);
                values.push(v);
            }
            col_ptr.push(rows.len());
        }
        Self {
            a,
            n,
            col_ptr,
            rows,
            values,
            samples_per_box: samples.per_box,
            discarded: samples.total_discarded(),
        }
    }

    /// Dense input in column-major order; zeros are skipped.
    pub fn from_dense(n: usize, a: f64, col_major: &[f64]) -> Self {
        let mut col_ptr = vec![0];
        let mut rows = Vec::new();
        let mut values = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let v = col_major[i * n + j];
                if v != 0.0 {
                    rows.push(j as u32);
                    values.push(v);
                }
            }
            col_ptr.push(rows.len());
        }
        Self {
            a,
            n,
            col_ptr,
            rows,
            values,
            samples_per_box: 0,
            discarded: 0,
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                self.values[self.col_ptr[i]..self.col_ptr[i + 1]]
                    .iter()
                    .sum()
            })
            .collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (r, v) in self.rows.iter().zip(&self.values) {
            out[*r as usize] += v;
        }
        out
    }

    /// `y = M x`.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.n {
            let xi = x[i];
            if xi == 0.0 {
                continue;
            }
            for k in self.col_ptr[i]..self.col_ptr[i + 1] {
                y[self.rows[k] as usize] += self.values[k] * xi;
            }
        }
    }

    /// `y = Mᵀ x`.
    pub fn apply_transpose(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.n {
            let mut acc = 0.0;
            for k in self.col_ptr[i]..self.col_ptr[i + 1] {
                acc += self.values[k] * x[self.rows[k] as usize];
            }
            y[i] = acc;
        }
    }

    /// Sparse triplets `column, row, value` with 17 significant digits.
    pub fn write_triplets<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "column,row,value")?;
        for i in 0..self.n {
            for k in self.col_ptr[i]..self.col_ptr[i + 1] {
                writeln!(w, "{},{},{:.16e}", i, self.rows[k], self.values[k])?;
            }
        }
        Ok(())
    }
}

/// Samples transitions and assembles the matrix for a single `a`.
pub fn build_ulam(
    sys: &System,
    grid: &UlamGrid,
    a: f64,
    samples_per_box: usize,
    seed: u64,
) -> Result<UlamMatrix> {
    let s = sample_transitions(sys, grid, samples_per_box, seed)?;
    Ok(UlamMatrix::from_samples(&s, a))
}

/// Leading eigenpair and a second-eigenvalue estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralResult {
    pub a: f64,
    pub lambda: f64,
    /// Right eigenvector, normalized to unit L1 norm.
    #[serde(skip)]
    pub h: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub second_modulus: f64,
    pub gap: f64,
    /// `min h / max h`.
    pub min_ratio: f64,
}

/// Power-iteration settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EigSettings {
    pub tol: f64,
    pub max_iters: usize,
    pub deflation_iters: usize,
    pub seed: u64,
}

impl Default for EigSettings {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 100_000,
            deflation_iters: 1500,
            seed: 0,
        }
    }
}

fn l1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// Power iteration from the uniform vector with L1 normalization.
fn power(
    n: usize,
    tol: f64,
    max_iters: usize,
    mut op: impl FnMut(&[f64], &mut [f64]),
) -> Result<(f64, Vec<f64>, f64, usize)> {
    let mut x = vec![1.0 / n as f64; n];
    let mut y = vec![0.0; n];
    let mut history = Vec::new();
    for it in 1..=max_iters {
        op(&x, &mut y);
        let lambda = l1(&y);
        if lambda == 0.0 || !lambda.is_finite() {
            return Err(Error::NoConvergence {
                iterations: it,
                last_residual: f64::NAN,
                residual_history: history,
            });
        }
        let res = x
            .iter()
            .zip(&y)
            .map(|(a, b)| (b - lambda * a).abs())
            .sum::<f64>()
            / lambda;
        for (xi, yi) in x.iter_mut().zip(&y) {
            *xi = yi / lambda;
        }
        if it % 100 == 0 {
            history.push(res);
        }
        if res <= tol {
            return Ok((lambda, x, res, it));
        }
    }
    let last = *history.last().unwrap_or(&f64::NAN);
    Err(Error::NoConvergence {
        iterations: max_iters,
        last_residual: last,
        residual_history: history,
    })
}

/// Leading eigenvalue by power iteration; the second modulus comes from
/// iterating on the complement of the leading eigenvector, projected with the
/// left eigenvector, and measuring the mean growth rate.
pub fn leading_eig(m: &UlamMatrix, settings: &EigSettings) -> Result<SpectralResult> {
    let n = m.n;
    let (lambda, h, residual, iterations) =
        power(n, settings.tol, settings.max_iters, |x, y| m.apply(x, y))?;
    let (_, left, _, _) = power(n, settings.tol, settings.max_iters, |x, y| {
        m.apply_transpose(x, y)
    })?;
    let lh: f64 = left.iter().zip(&h).map(|(a, b)| a * b).sum();
    let project = |v: &mut [f64]| {
        let c: f64 = left.iter().zip(v.iter()).map(|(a, b)| a * b).sum::<f64>() / lh;
        for (vi, hi) in v.iter_mut().zip(&h) {
            *vi -= c * hi;
        }
    };
    let mut rng = substream(settings.seed, Stream::Deflation, 0);
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
    project(&mut v);
    let norm = l1(&v);
    v.iter_mut().for_each(|x| *x /= norm);
    let mut w = vec![0.0; n];
    let burn = settings.deflation_iters / 2;
    let mut log_growth = 0.0;
    let mut counted = 0;
    for it in 0..settings.deflation_iters {
        m.apply(&v, &mut w);
        project(&mut w);
        let g = l1(&w);
        if g == 0.0 {
            log_growth = f64::NEG_INFINITY;
            counted = 1;
            break;
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / g;
        }
        if it >= burn {
            log_growth += g.ln();
            counted += 1;
        }
    }
    let second = if counted > 0 {
        (log_growth / counted as f64).exp()
    } else {
        0.0
    };
    let hmax = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let hmin = h.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(SpectralResult {
        a: m.a,
        lambda,
        h,
        residual,
        iterations,
        second_modulus: second,
        gap: lambda - second,
        min_ratio: hmin / hmax,
    })
}

/// One point of the spectral MGF curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralPoint {
    pub a: f64,
    pub log_lambda: f64,
    pub result: SpectralResult,
    /// `min h ≥ −1e−12 max h`.
    pub positive: bool,
}

/// `a ↦ log λ_a` from one shared sample set.
pub fn spectral_mgf(
    samples: &UlamSamples,
    a_grid: &[f64],
    settings: &EigSettings,
) -> Result<Vec<SpectralPoint>> {
    a_grid
        .iter()
        .map(|&a| {
            let m = UlamMatrix::from_samples(samples, a);
            let r = leading_eig(&m, settings)?;
            Ok(SpectralPoint {
                a,
                log_lambda: r.lambda.ln(),
                positive: r.min_ratio >= -1e-12,
                result: r,
            })
        })
        .collect()
}

/// Outcome of the spectral-radius bracket test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BracketCheck {
    pub a: f64,
    pub lambda: f64,
    pub lo: f64,
    pub hi: f64,
    pub pass: bool,
}

/// `λ_a ∈ [(1 − sgn(a−1) C ε)^{a−1}, (1 + sgn(a−1) C ε)^{a−1}]` widened by
/// `tol` on both sides.
pub fn bracket_check(lambda: f64, c_h: f64, eps: f64, a: f64, tol: f64) -> BracketCheck {
    let e = a - 1.0;
    let sg = if e > 0.0 {
        1.0
    } else if e < 0.0 {
        -1.0
    } else {
        0.0
    };
    let pow = |base: f64| {
        if e == 0.0 {
            1.0
        } else if base <= 0.0 {
            // the bound degenerates; a negative exponent sends it to infinity
            if e < 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        } else {
            base.powf(e)
        }
    };
    let b1 = pow(1.0 - sg * c_h * eps);
    let b2 = pow(1.0 + sg * c_h * eps);
    let (lo, hi) = (b1.min(b2) - tol, b1.max(b2) + tol);
    BracketCheck {
        a,
        lambda,
        lo,
        hi,
        pass: lambda >= lo && lambda <= hi,
    }
}
