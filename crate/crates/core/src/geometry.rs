//! Billiard table on the unit torus: circular scatterers, arclength
//! parameterization of their boundaries, torus arithmetic and table checks.
//!
//! Arclength `r` runs clockwise around each scatterer and `r = 0` sits on the
//! `+x` axis of its center, so the boundary point at `r` is
//! `center + R (cos(-r/R), sin(-r/R))`.

use std::f64::consts::PI;
use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;

/// Plain 2-vector used for positions, velocities and normals.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    #[inline]
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Unit vector at angle `theta` from the `+x` axis.
    #[inline]
    pub fn from_angle(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self { x: c, y: s }
    }

    #[inline]
    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the 3D cross product.
    #[inline]
    pub fn cross(self, other: Vec2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    #[inline]
    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    #[inline]
    pub fn normalized(self) -> Self {
        let n = self.norm();
        Self::new(self.x / n, self.y / n)
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    #[inline]
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    #[inline]
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    #[inline]
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    #[inline]
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

impl Mul<Vec2> for f64 {
    type Output = Vec2;
    #[inline]
    fn mul(self, v: Vec2) -> Vec2 {
        Vec2::new(self * v.x, self * v.y)
    }
}

/// Wraps a point into the fundamental cell `[0,1)²`.
pub fn torus_wrap(p: Vec2) -> Vec2 {
    Vec2::new(wrap_unit(p.x), wrap_unit(p.y))
}

#[inline]
fn wrap_unit(v: f64) -> f64 {
    let w = v - v.floor();
    // v.floor() can round so that w == 1.0 for tiny negative v
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

/// Minimal-image displacement from `p` to `q`, components in `[-0.5, 0.5)`.
pub fn torus_displacement(p: Vec2, q: Vec2) -> Vec2 {
    Vec2::new(minimal_image(q.x - p.x), minimal_image(q.y - p.y))
}

#[inline]
fn minimal_image(d: f64) -> f64 {
    let m = d - (d + 0.5).floor();
    if m >= 0.5 {
        m - 1.0
    } else {
        m
    }
}

/// A disk on the torus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scatterer {
    pub center: Vec2,
    pub radius: f64,
}

impl Scatterer {
    pub fn new(cx: f64, cy: f64, radius: f64) -> Self {
        Self {
            center: Vec2::new(cx, cy),
            radius,
        }
    }

    /// Length of the arclength interval `I_i`.
    pub fn perimeter(&self) -> f64 {
        2.0 * PI * self.radius
    }

    /// Reduces an arclength into `[0, 2πR)`.
    pub fn wrap_arclength(&self, r: f64) -> f64 {
        let p = self.perimeter();
        let w = r.rem_euclid(p);
        if w >= p {
            0.0
        } else {
            w
        }
    }

    /// Arclength of the boundary point in direction `normal` from the center.
    pub fn arclength_of_normal(&self, normal: Vec2) -> f64 {
        self.wrap_arclength(-normal.angle() * self.radius)
    }
}

/// Position, outward normal and clockwise tangent at a boundary point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryFrame {
    pub position: Vec2,
    pub normal: Vec2,
    pub tangent: Vec2,
}

/// Boundary frame of `s` at arclength `r` (taken modulo the perimeter).
///
/// The returned position is not wrapped onto the torus; it lies on the circle
/// around `s.center` itself.
pub fn boundary_point(s: &Scatterer, r: f64) -> BoundaryFrame {
    let r = s.wrap_arclength(r);
    let (sin_a, cos_a) = (-r / s.radius).sin_cos();
    let normal = Vec2::new(cos_a, sin_a);
    BoundaryFrame {
        position: s.center + s.radius * normal,
        normal,
        tangent: Vec2::new(sin_a, -cos_a),
    }
}

/// Scatterer layout on the unit torus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableConfig {
    pub scatterers: Vec<Scatterer>,
}

impl Default for TableConfig {
    /// Disks at `(0,0)` with `R = 0.4` and `(0.5,0.5)` with `R = 0.2`.
    fn default() -> Self {
        Self {
            scatterers: vec![Scatterer::new(0.0, 0.0, 0.4), Scatterer::new(0.5, 0.5, 0.2)],
        }
    }
}

/// One violated table constraint.
#[derive(Debug, Clone, PartialEq)]
pub enum TableViolation {
    NonpositiveRadius {
        index: usize,
        radius: f64,
    },
    RadiusTooLarge {
        index: usize,
        radius: f64,
    },
    Overlap {
        first: usize,
        second: usize,
        distance: f64,
        min_distance: f64,
    },
    NonFinite {
        index: usize,
    },
}

impl fmt::Display for TableViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TableViolation::NonpositiveRadius { index, radius } => {
                write!(f, "scatterer {index}: nonpositive radius {radius}")
            }
            TableViolation::RadiusTooLarge { index, radius } => {
                write!(f, "scatterer {index}: radius {radius} >= 0.5")
            }
            TableViolation::Overlap {
                first,
                second,
                distance,
                min_distance,
            } => write!(
                f,
                "scatterer overlap between {first} and {second}: center distance {distance} <= {min_distance}"
            ),
            TableViolation::NonFinite { index } => {
                write!(f, "scatterer {index}: non-finite center or radius")
            }
        }
    }
}

impl TableConfig {
    pub fn new(scatterers: Vec<Scatterer>) -> Self {
        Self { scatterers }
    }

    pub fn len(&self) -> usize {
        self.scatterers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scatterers.is_empty()
    }

    /// Total boundary length `L = Σ 2πR_i`.
    pub fn total_boundary_length(&self) -> f64 {
        self.scatterers.iter().map(Scatterer::perimeter).sum()
    }

    pub fn max_radius(&self) -> f64 {
        self.scatterers.iter().map(|s| s.radius).fold(0.0, f64::max)
    }

    /// Lists every violated constraint; empty means the table is valid.
    pub fn validate(&self) -> Vec<TableViolation> {
        validate_table(self)
    }

    /// Smallest gap between two distinct scatterer images, i.e. the exact
    /// lower bound on straight free paths. `None` for an empty table.
    pub fn min_gap(&self) -> Option<f64> {
        let n = self.scatterers.len();
        let mut best: Option<f64> = None;
        for i in 0..n {
            for j in i..n {
                let (a, b) = (&self.scatterers[i], &self.scatterers[j]);
                let gap = if i == j {
                    // nearest self-image sits one period away
                    1.0 - 2.0 * a.radius
                } else {
                    torus_displacement(a.center, b.center).norm() - a.radius - b.radius
                };
                best = Some(best.map_or(gap, |g: f64| g.min(gap)));
            }
        }
        best
    }
}

/// Checks radii and pairwise disjointness including torus images.
pub fn validate_table(t: &TableConfig) -> Vec<TableViolation> {
    let mut out = Vec::new();
    for (i, s) in t.scatterers.iter().enumerate() {
        if !(s.center.x.is_finite() && s.center.y.is_finite() && s.radius.is_finite()) {
            out.push(TableViolation::NonFinite { index: i });
            continue;
        }
        if s.radius <= 0.0 {
            out.push(TableViolation::NonpositiveRadius {
                index: i,
                radius: s.radius,
            });
        } else if s.radius >= 0.5 {
            out.push(TableViolation::RadiusTooLarge {
                index: i,
                radius: s.radius,
            });
        }
    }
    let n = t.scatterers.len();
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (&t.scatterers[i], &t.scatterers[j]);
            let distance = torus_displacement(a.center, b.center).norm();
            let min_distance = a.radius + b.radius;
            if !(distance > min_distance) {
                out.push(TableViolation::Overlap {
                    first: i,
                    second: j,
                    distance,
                    min_distance,
                });
            }
        }
    }
    out
}

/// Result of a straight-ray horizon scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonReport {
    /// Longest free path among rays that hit something within `max_len`.
    pub max_free_path: f64,
    /// Some ray travelled `max_len` without hitting a scatterer.
    pub infinite_horizon: bool,
    pub n_rays: usize,
    pub max_len: f64,
}

/// Distance along the ray `origin + t·dir` (unit `dir`) to the first scatterer
/// image hit with `t > t_min`, searching up to `max_len`.
pub fn ray_free_path(
    table: &TableConfig,
    origin: Vec2,
    dir: Vec2,
    t_min: f64,
    max_len: f64,
) -> Option<f64> {
    if table.is_empty() {
        return None;
    }
    const STRIDE: f64 = 0.5;
    let mut best = f64::INFINITY;
    let mut probe = 0.0;
    loop {
        let q = origin + probe * dir;
        let cell = (q.x.floor(), q.y.floor());
        for s in &table.scatterers {
            let home = torus_wrap(s.center);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    let c = Vec2::new(home.x + cell.0 + dx as f64, home.y + cell.1 + dy as f64);
                    if let Some(t) = ray_circle_entry(origin, dir, c, s.radius, t_min) {
                        best = best.min(t);
                    }
                }
            }
        }
        // everything within the probe's 3x3 block has been searched
        if best <= probe + STRIDE || probe > max_len {
            break;
        }
        probe += STRIDE;
    }
    (best <= max_len).then_some(best)
}

/// Entry distance of a ray into a circle, if the ray enters it past `t_min`.
fn ray_circle_entry(origin: Vec2, dir: Vec2, center: Vec2, radius: f64, t_min: f64) -> Option<f64> {
    let oc = origin - center;
    let b = oc.dot(dir);
    let c = oc.norm_sq() - radius * radius;
    let disc = b * b - c;
    if disc <= 0.0 {
        return None;
    }
    let t = -b - disc.sqrt();
    (t > t_min).then_some(t)
}

/// Casts `n_rays` straight rays from boundary points drawn from the smooth
/// collision measure and reports the longest free path observed.
///
/// An empty table always reports an infinite horizon.
pub fn horizon_scan(
    t: &TableConfig,
    n_rays: usize,
    max_len: f64,
    seed: u64,
) -> Result<HorizonReport> {
    let violations = validate_table(t);
    if !violations.is_empty() {
        return Err(Error::InvalidTable(violations));
    }
    if n_rays == 0 {
        return Err(Error::InvalidParameter(
            "horizon scan needs n_rays >= 1".into(),
        ));
    }
    let mut report = HorizonReport {
        max_free_path: 0.0,
        infinite_horizon: t.is_empty(),
        n_rays,
        max_len,
    };
    if t.is_empty() {
        return Ok(report);
    }
    let mut rng = substream(seed, crate::rng::Stream::Horizon, 0);
    let total = t.total_boundary_length();
    for _ in 0..n_rays {
        let mut pick = rng.gen::<f64>() * total;
        let mut id = 0;
        for (i, s) in t.scatterers.iter().enumerate() {
            id = i;
            if pick < s.perimeter() {
                break;
            }
            pick -= s.perimeter();
        }
        let s = &t.scatterers[id];
        let frame = boundary_point(s, rng.gen::<f64>() * s.perimeter());
        let phi = (2.0 * rng.gen::<f64>() - 1.0).asin();
        let (sp, cp) = phi.sin_cos();
        let dir = cp * frame.normal + sp * frame.tangent;
        match ray_free_path(t, frame.position, dir, 1e-12, max_len) {
            Some(len) => report.max_free_path = report.max_free_path.max(len),
            None => {
                report.infinite_horizon = true;
                report.max_free_path = report.max_free_path.max(max_len);
            }
        }
    }
    // an axis-aligned open corridor is measure zero for random rays; probe it
    // explicitly along the lattice directions
    if !report.infinite_horizon && has_rational_corridor(t, max_len) {
        report.infinite_horizon = true;
    }
    Ok(report)
}

/// Looks for open corridors along low-order rational directions by casting
/// rays on a fine set of parallel offsets.
fn has_rational_corridor(t: &TableConfig, max_len: f64) -> bool {
    const DIRS: [(f64, f64); 4] = [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, -1.0)];
    const OFFSETS: usize = 512;
    for (dx, dy) in DIRS {
        let dir = Vec2::new(dx, dy).normalized();
        let perp = Vec2::new(-dir.y, dir.x);
        for k in 0..OFFSETS {
            let origin = ((k as f64 + 0.5) / OFFSETS as f64) * perp;
            if !inside_any(t, origin) && ray_free_path(t, origin, dir, 0.0, max_len).is_none() {
                return true;
            }
        }
    }
    false
}

fn inside_any(t: &TableConfig, p: Vec2) -> bool {
    t.scatterers
        .iter()
        .any(|s| torus_displacement(s.center, p).norm() < s.radius)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn disk_a() -> Scatterer {
        Scatterer::new(0.0, 0.0, 0.4)
    }

    #[test]
    fn boundary_point_conventions() {
        let s = disk_a();
        let f = boundary_point(&s, 0.0);
        assert_abs_diff_eq!(f.position.x, 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(f.position.y, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(f.normal.x, 1.0, epsilon = 1e-15);

        let q = boundary_point(&s, PI * 0.4 / 2.0);
        assert_abs_diff_eq!(q.position.x, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(q.position.y, -0.4, epsilon = 1e-15);

        let w = boundary_point(&s, 2.0 * PI * 0.4);
        assert_abs_diff_eq!(w.position.x, f.position.x, epsilon = 1e-15);
        assert_abs_diff_eq!(w.position.y, f.position.y, epsilon = 1e-15);
    }

    #[test]
    fn tangent_follows_increasing_arclength() {
        let s = Scatterer::new(0.3, 0.7, 0.2);
        for k in 0..16 {
            let r = k as f64 * 0.07;
            let h = 1e-6;
            let f = boundary_point(&s, r);
            let ahead = boundary_point(&s, r + h).position;
            let behind = boundary_point(&s, r - h).position;
            let fd = (1.0 / (2.0 * h)) * (ahead - behind);
            assert_abs_diff_eq!(fd.x, f.tangent.x, epsilon = 1e-8);
            assert_abs_diff_eq!(fd.y, f.tangent.y, epsilon = 1e-8);
            assert_abs_diff_eq!(f.normal.dot(f.tangent), 0.0, epsilon = 1e-15);
            // clockwise: tangent is the normal rotated by -90 degrees
            assert_abs_diff_eq!(f.normal.cross(f.tangent), -1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn arclength_inverts_boundary_point() {
        let s = Scatterer::new(0.5, 0.5, 0.2);
        for k in 0..50 {
            let r = k as f64 / 50.0 * s.perimeter();
            let f = boundary_point(&s, r);
            let back = s.arclength_of_normal(f.normal);
            let diff = (back - r).abs().min(s.perimeter() - (back - r).abs());
            assert!(diff < 1e-13, "r={r} back={back}");
        }
    }

    #[test]
    fn torus_helpers() {
        let w = torus_wrap(Vec2::new(1.3, -0.2));
        assert_abs_diff_eq!(w.x, 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(w.y, 0.8, epsilon = 1e-15);
        let d = torus_displacement(Vec2::new(0.9, 0.0), Vec2::new(0.1, 0.0));
        assert_abs_diff_eq!(d.x, 0.2, epsilon = 1e-15);
        assert_eq!(d.y, 0.0);
        let p = Vec2::new(0.25, 0.75);
        assert_eq!(torus_displacement(p, p), Vec2::ZERO);
        assert_eq!(minimal_image(0.5), -0.5);
        assert_eq!(wrap_unit(-1e-20), 0.0);
    }

    #[test]
    fn default_table_is_valid() {
        let t = TableConfig::default();
        assert!(t.validate().is_empty());
        assert_abs_diff_eq!(t.min_gap().unwrap(), 0.5f64.sqrt() - 0.6, epsilon = 1e-15);
    }

    #[test]
    fn overlap_and_radius_violations() {
        let t = TableConfig::new(vec![
            Scatterer::new(0.0, 0.0, 0.4),
            Scatterer::new(0.5, 0.0, 0.2),
        ]);
        let v = t.validate();
        assert!(matches!(v.as_slice(), [TableViolation::Overlap { .. }]));
        assert!(v[0].to_string().contains("scatterer overlap"));

        let t = TableConfig::new(vec![Scatterer::new(0.5, 0.5, 0.0)]);
        assert!(matches!(
            t.validate().as_slice(),
            [TableViolation::NonpositiveRadius { .. }]
        ));
        let t = TableConfig::new(vec![Scatterer::new(0.5, 0.5, 0.5)]);
        assert!(matches!(
            t.validate().as_slice(),
            [TableViolation::RadiusTooLarge { .. }]
        ));
    }

    #[test]
    fn overlap_through_torus_images() {
        // 0.05 and 0.95 are 0.1 apart across the boundary
        let t = TableConfig::new(vec![
            Scatterer::new(0.05, 0.5, 0.1),
            Scatterer::new(0.95, 0.5, 0.1),
        ]);
        assert_eq!(t.validate().len(), 1);
    }

    #[test]
    fn corridors_are_detected() {
        let single = TableConfig::new(vec![Scatterer::new(0.5, 0.5, 0.2)]);
        let r = horizon_scan(&single, 2000, 10.0, 3).unwrap();
        assert!(r.infinite_horizon);

        let empty = TableConfig::new(vec![]);
        assert!(horizon_scan(&empty, 10, 10.0, 3).unwrap().infinite_horizon);
    }

    #[test]
    fn default_table_has_finite_horizon() {
        let r = horizon_scan(&TableConfig::default(), 20_000, 10.0, 11).unwrap();
        assert!(!r.infinite_horizon);
        assert!(r.max_free_path > 0.5 && r.max_free_path < 1.5, "{r:?}");
    }

    #[test]
    fn invalid_table_is_rejected_by_scan() {
        let t = TableConfig::new(vec![Scatterer::new(0.5, 0.5, -1.0)]);
        assert!(horizon_scan(&t, 10, 10.0, 0).is_err());
    }

    #[test]
    fn ray_hits_neighbor_image() {
        let t = TableConfig::new(vec![disk_a()]);
        let len = ray_free_path(&t, Vec2::new(0.4, 0.0), Vec2::new(1.0, 0.0), 1e-12, 10.0).unwrap();
        assert_abs_diff_eq!(len, 0.2, epsilon = 1e-14);
    }
}
