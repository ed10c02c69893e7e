//! Forced billiard dynamics: the thermostatted flow between collisions, event
//! location on scatterer boundaries, (twisted) reflections and the resulting
//! collision map with its time-reversed inverse.
//!
//! The speed is held at `p ≡ 1` by construction, so between collisions the
//! state `(x, y, θ)` obeys
//!
//! ```text
//! ẋ = cos θ,   ẏ = sin θ,   θ̇ = κ(x, y, θ) = -F₁ sin θ + F₂ cos θ
//! ```
//!
//! where only the component of the force normal to the velocity survives the
//! isokinetic constraint. A fourth component `Λ̇ = ∂κ/∂θ` is integrated along
//! with the orbit; `Λ(τ)` is the log of the flow's phase-space Jacobian and
//! becomes the flight part of the entropy production.
//!
//! Flights are integrated with classical RK4. The step is bounded by the
//! distance to the closest scatterer image (unit speed means nothing closer
//! can be reached within the step), clamped to `[h_min, h_max]`, and the
//! collision time is located by a bracketed Newton iteration on the signed
//! distance down to rounding level.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::entropy::{self, LogJacobianBreakdown};
use crate::error::{Error, Result};
use crate::geometry::{
    boundary_point, horizon_scan, torus_displacement, torus_wrap, TableConfig, Vec2,
};

/// Position-dependent isokinetic forcing supplied by the caller.
///
/// `kappa` is the curvature of the projected trajectory at unit speed,
/// `-F₁ sin θ + F₂ cos θ`, and `dkappa_dtheta` its analytic θ-derivative.
pub trait CurvatureField: Send + Sync + fmt::Debug {
    fn kappa(&self, pos: Vec2, theta: f64) -> f64;
    fn dkappa_dtheta(&self, pos: Vec2, theta: f64) -> f64;
    /// Bound on the C¹ norm of the force; plays the role of ε.
    fn magnitude(&self) -> f64;
}

/// `F(x, y) = (A₁ cos 2πy, A₂ cos 2πx)`, a smooth periodic field that is not
/// a gradient of anything constant. Used to exercise the general-field path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinusoidalField {
    pub amplitude: Vec2,
}

impl SinusoidalField {
    fn force(&self, pos: Vec2) -> Vec2 {
        Vec2::new(
            self.amplitude.x * (2.0 * PI * pos.y).cos(),
            self.amplitude.y * (2.0 * PI * pos.x).cos(),
        )
    }
}

impl CurvatureField for SinusoidalField {
    fn kappa(&self, pos: Vec2, theta: f64) -> f64 {
        let f = self.force(pos);
        let (s, c) = theta.sin_cos();
        -f.x * s + f.y * c
    }

    fn dkappa_dtheta(&self, pos: Vec2, theta: f64) -> f64 {
        let f = self.force(pos);
        let (s, c) = theta.sin_cos();
        -f.x * c - f.y * s
    }

    fn magnitude(&self) -> f64 {
        // sup |F| + sup |∇F|
        let a = self.amplitude.x.abs().max(self.amplitude.y.abs());
        a * (1.0 + 2.0 * PI)
    }
}

/// External force acting during flights.
#[derive(Debug, Clone, Default)]
pub enum ForceModel {
    #[default]
    None,
    /// Constant field `E` with a Gaussian (isokinetic) thermostat.
    ThermostattedConstantField(Vec2),
    GeneralField(Arc<dyn CurvatureField>),
}

impl ForceModel {
    pub fn constant(e1: f64, e2: f64) -> Self {
        ForceModel::ThermostattedConstantField(Vec2::new(e1, e2))
    }

    /// Force magnitude ε; `|E|` for the constant field.
    pub fn epsilon(&self) -> f64 {
        match self {
            ForceModel::None => 0.0,
            ForceModel::ThermostattedConstantField(e) => e.norm(),
            ForceModel::GeneralField(f) => f.magnitude(),
        }
    }

    pub fn is_none(&self) -> bool {
        self.epsilon() == 0.0
    }

    /// `(κ, ∂κ/∂θ)` at unit speed.
    #[inline]
    fn curvature(&self, pos: Vec2, theta: f64, sin_t: f64, cos_t: f64) -> (f64, f64) {
        match self {
            ForceModel::None => (0.0, 0.0),
            ForceModel::ThermostattedConstantField(e) => {
                (-e.x * sin_t + e.y * cos_t, -e.x * cos_t - e.y * sin_t)
            }
            ForceModel::GeneralField(f) => (f.kappa(pos, theta), f.dkappa_dtheta(pos, theta)),
        }
    }
}

/// Velocity twist applied after the specular reflection.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum TwistModel {
    #[default]
    Identity,
    /// `φ ↦ φ + β(π²/4 − φ²)`, which fixes `φ = ±π/2`.
    AngleTwist { beta: f64 },
}

impl TwistModel {
    pub fn apply(&self, phi: f64) -> f64 {
        match *self {
            TwistModel::Identity => phi,
            TwistModel::AngleTwist { beta } => phi + beta * (PI * PI / 4.0 - phi * phi),
        }
    }

    pub fn derivative(&self, phi: f64) -> f64 {
        match *self {
            TwistModel::Identity => 1.0,
            TwistModel::AngleTwist { beta } => 1.0 - 2.0 * beta * phi,
        }
    }

    /// `sup |g'(φ) − 1| = π|β|` over `[−π/2, π/2]`.
    pub fn epsilon(&self) -> f64 {
        match *self {
            TwistModel::Identity => 0.0,
            TwistModel::AngleTwist { beta } => PI * beta.abs(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.epsilon() == 0.0
    }

    /// `|β| < 1/π` keeps the twist a strictly increasing bijection.
    pub fn validate(&self) -> Result<()> {
        match *self {
            TwistModel::AngleTwist { beta } if !(beta.abs() < 1.0 / PI) => Err(
                Error::InvalidParameter(format!("twist |beta| = {} must be < 1/pi", beta.abs())),
            ),
            _ => Ok(()),
        }
    }
}

/// Flow state on the energy shell: torus position, direction and the winding
/// numbers that recover the unwrapped position `(x + wx, y + wy)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub wx: i64,
    pub wy: i64,
    pub p: f64,
}

impl FlowState {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        let w = torus_wrap(Vec2::new(x, y));
        Self {
            x: w.x,
            y: w.y,
            theta: theta.rem_euclid(2.0 * PI),
            wx: (x - w.x).round() as i64,
            wy: (y - w.y).round() as i64,
            p: 1.0,
        }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn unwrapped(&self) -> Vec2 {
        Vec2::new(self.x + self.wx as f64, self.y + self.wy as f64)
    }

    fn from_unwrapped(q: Vec2, theta: f64) -> Self {
        let fx = q.x.floor();
        let fy = q.y.floor();
        let w = torus_wrap(q);
        Self {
            x: w.x,
            y: w.y,
            theta: theta.rem_euclid(2.0 * PI),
            wx: fx as i64,
            wy: fy as i64,
            p: 1.0,
        }
    }
}

/// A point of the collision space: scatterer, clockwise arclength and the
/// outgoing angle measured from the outward normal toward the clockwise
/// tangent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionCoord {
    pub scatterer: usize,
    pub r: f64,
    pub phi: f64,
}

impl CollisionCoord {
    pub fn new(scatterer: usize, r: f64, phi: f64) -> Self {
        Self { scatterer, r, phi }
    }
}

/// One application of the collision map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollisionRecord {
    pub from: CollisionCoord,
    pub to: CollisionCoord,
    pub tau: f64,
    /// Unwrapped displacement of the flight.
    pub dq: Vec2,
    /// `∫₀^τ p ∂κ/∂θ dt`.
    pub curv_integral: f64,
    pub jacobian: LogJacobianBreakdown,
}

impl CollisionRecord {
    /// Entropy production `s = −log J`.
    #[inline]
    pub fn s(&self) -> f64 {
        self.jacobian.s
    }
}

/// `(ẋ, ẏ, θ̇)` at the given state.
pub fn flow_derivative(st: &FlowState, f: &ForceModel) -> (f64, f64, f64) {
    let (s, c) = st.theta.sin_cos();
    let (kappa, _) = f.curvature(st.unwrapped(), st.theta, s, c);
    (st.p * c, st.p * s, kappa / st.p)
}

/// Step-size and tolerance settings of the flight integrator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorParams {
    pub h_max: f64,
    pub h_min: f64,
    pub max_flight_time: f64,
    pub grazing_cut: f64,
}

impl IntegratorParams {
    /// Defaults derived from the exact minimal gap and the scanned horizon.
    pub fn for_table(tau_min: f64, tau_max: f64) -> Self {
        let h_max = (tau_min / 2.0).min(0.05);
        Self {
            h_max,
            h_min: h_max / 10.0,
            max_flight_time: 10.0 * tau_max,
            grazing_cut: 1e-9,
        }
    }

    /// Same settings with both step bounds divided by `factor`.
    pub fn refined(&self, factor: f64) -> Self {
        Self {
            h_max: self.h_max / factor,
            h_min: self.h_min / factor,
            ..*self
        }
    }
}

/// Construction options for [`System`].
#[derive(Debug, Clone)]
pub struct SystemOptions {
    pub epsilon_max: f64,
    pub horizon_rays: usize,
    pub horizon_max_len: f64,
    pub horizon_seed: u64,
    pub integrator: Option<IntegratorParams>,
}

impl Default for SystemOptions {
    fn default() -> Self {
        Self {
            epsilon_max: 0.2,
            horizon_rays: 20_000,
            horizon_max_len: 10.0,
            horizon_seed: 0x5eed,
            integrator: None,
        }
    }
}

/// A validated forced billiard: table, forces and integrator settings.
#[derive(Debug, Clone)]
pub struct System {
    table: TableConfig,
    force: ForceModel,
    twist: TwistModel,
    params: IntegratorParams,
    tau_min: f64,
    tau_max_scan: f64,
}

impl System {
    pub fn new(table: TableConfig, force: ForceModel, twist: TwistModel) -> Result<Self> {
        Self::with_options(table, force, twist, SystemOptions::default())
    }

    pub fn with_options(
        table: TableConfig,
        force: ForceModel,
        twist: TwistModel,
        opts: SystemOptions,
    ) -> Result<Self> {
        let violations = table.validate();
        if !violations.is_empty() {
            return Err(Error::InvalidTable(violations));
        }
        twist.validate()?;
        let eps = force.epsilon().max(twist.epsilon());
        if !(eps <= opts.epsilon_max) {
            return Err(Error::InvalidParameter(format!(
                "epsilon {eps} exceeds epsilon_max {}",
                opts.epsilon_max
            )));
        }
        // A path whose curvature stays below every scatterer's curvature cannot
        // fall back onto the scatterer it just left.
        let curvature_bound = 1.0 / table.max_radius();
        if !(force.epsilon() < curvature_bound) {
            return Err(Error::InvalidParameter(format!(
                "force magnitude {} must stay below the smallest scatterer curvature {curvature_bound}",
                force.epsilon()
            )));
        }
        let scan = horizon_scan(
            &table,
            opts.horizon_rays,
            opts.horizon_max_len,
            opts.horizon_seed,
        )?;
        if scan.infinite_horizon {
            return Err(Error::InfiniteHorizon {
                max_len: opts.horizon_max_len,
            });
        }
        let tau_min = table.min_gap().expect("finite horizon implies scatterers");
        let params = opts
            .integrator
            .unwrap_or_else(|| IntegratorParams::for_table(tau_min, scan.max_free_path));
        Ok(Self {
            table,
            force,
            twist,
            params,
            tau_min,
            tau_max_scan: scan.max_free_path,
        })
    }

    pub fn table(&self) -> &TableConfig {
        &self.table
    }

    pub fn force(&self) -> &ForceModel {
        &self.force
    }

    pub fn twist(&self) -> TwistModel {
        self.twist
    }

    pub fn params(&self) -> &IntegratorParams {
        &self.params
    }

    /// Exact minimal straight free path.
    pub fn tau_min(&self) -> f64 {
        self.tau_min
    }

    /// Longest straight free path seen by the startup horizon scan.
    pub fn tau_max_scan(&self) -> f64 {
        self.tau_max_scan
    }

    /// Combined perturbation size `max(ε_F, ε_G)`.
    pub fn epsilon(&self) -> f64 {
        self.force.epsilon().max(self.twist.epsilon())
    }

    pub fn with_params(&self, params: IntegratorParams) -> Self {
        Self {
            params,
            ..self.clone()
        }
    }

    /// Same table and integrator with different forces; skips the horizon scan.
    pub fn with_forces(&self, force: ForceModel, twist: TwistModel) -> Result<Self> {
        twist.validate()?;
        if !(force.epsilon() < 1.0 / self.table.max_radius()) {
            return Err(Error::InvalidParameter("force magnitude too large".into()));
        }
        Ok(Self {
            force,
            twist,
            ..self.clone()
        })
    }

    /// Lifts a collision coordinate to its outgoing flow state.
    pub fn lift(&self, c: &CollisionCoord) -> FlowState {
        let s = &self.table.scatterers[c.scatterer];
        let frame = boundary_point(s, c.r);
        let (sp, cp) = c.phi.sin_cos();
        let v = cp * frame.normal + sp * frame.tangent;
        FlowState::new(frame.position.x, frame.position.y, v.angle())
    }
}

/// Scatterer image identified by scatterer index and lattice offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Image {
    scatterer: usize,
    mx: i64,
    my: i64,
}

/// Where a flight ended, just before the reflection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Incidence {
    pub scatterer: usize,
    /// Hit point and image center in the flight's unwrapped frame.
    pub position: Vec2,
    pub image_center: Vec2,
    pub theta: f64,
}

/// Outcome of [`free_flight`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Flight {
    pub hit: Incidence,
    /// Pre-reflection state at the hit point.
    pub end: FlowState,
    pub tau: f64,
    pub dq: Vec2,
    pub curv_integral: f64,
    pub steps: usize,
}

type State = [f64; 4];

impl System {
    #[inline]
    fn rhs(&self, s: &State) -> State {
        let (sin_t, cos_t) = s[2].sin_cos();
        let (k, dk) = self
            .force
            .curvature(Vec2::new(s[0], s[1]), s[2], sin_t, cos_t);
        [cos_t, sin_t, k, dk]
    }

    #[inline]
    fn rk4(&self, s: &State, h: f64) -> State {
        let k1 = self.rhs(s);
        let k2 = self.rhs(&axpy(s, 0.5 * h, &k1));
        let k3 = self.rhs(&axpy(s, 0.5 * h, &k2));
        let k4 = self.rhs(&axpy(s, h, &k3));
        let mut out = *s;
        for i in 0..4 {
            out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        out
    }

    #[inline]
    fn image_center(&self, img: Image) -> Vec2 {
        let c = self.table.scatterers[img.scatterer].center;
        Vec2::new(c.x + img.mx as f64, c.y + img.my as f64)
    }

    #[inline]
    fn signed_distance(&self, q: Vec2, img: Image) -> f64 {
        (q - self.image_center(img)).norm() - self.table.scatterers[img.scatterer].radius
    }

    /// Closest scatterer image to `q`, skipping `exclude`.
    fn nearest_image(&self, q: Vec2, exclude: Option<Image>) -> (f64, Image) {
        let mut best = (
            f64::INFINITY,
            Image {
                scatterer: 0,
                mx: 0,
                my: 0,
            },
        );
        for (i, s) in self.table.scatterers.iter().enumerate() {
            let mx = (q.x - s.center.x).round() as i64;
            let my = (q.y - s.center.y).round() as i64;
            let img = Image {
                scatterer: i,
                mx,
                my,
            };
            if Some(img) != exclude {
                let d = self.signed_distance(q, img);
                if d < best.0 {
                    best = (d, img);
                }
            } else {
                for dx in -1..=1 {
                    for dy in -1..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let img = Image {
                            scatterer: i,
                            mx: mx + dx,
                            my: my + dy,
                        };
                        let d = self.signed_distance(q, img);
                        if d < best.0 {
                            best = (d, img);
                        }
                    }
                }
            }
        }
        best
    }

    /// Locates `δ ∈ (0, hi]` with `dist(rk4(s, δ)) = 0`, given `dist > 0` at 0
    /// and `≤ 0` at `hi`.
    fn locate_root(
        &self,
        s: &State,
        img: Image,
        f_lo: f64,
        hi: f64,
        f_hi: f64,
        st_hi: State,
    ) -> (f64, State) {
        let center = self.image_center(img);
        let radius = self.table.scatterers[img.scatterer].radius;
        let eval = |delta: f64| -> (f64, f64, State) {
            let st = self.rk4(s, delta);
            let rel = Vec2::new(st[0], st[1]) - center;
            let norm = rel.norm();
            let (sin_t, cos_t) = st[2].sin_cos();
            let slope = (rel.x * cos_t + rel.y * sin_t) / norm;
            (norm - radius, slope, st)
        };
        let (mut lo, mut hi) = (0.0, hi);
        if f_hi == 0.0 {
            return (hi, st_hi);
        }
        // secant start
        let mut delta = hi * f_lo / (f_lo - f_hi);
        if !(delta > lo && delta < hi) {
            delta = 0.5 * (lo + hi);
        }
        let mut best = (hi, st_hi, f_hi.abs());
        for _ in 0..200 {
            let (f, slope, st) = eval(delta);
            if f.abs() <= best.2 {
                best = (delta, st, f.abs());
            }
            if f == 0.0 {
                break;
            }
            if f > 0.0 {
                lo = delta;
            } else {
                hi = delta;
            }
            let mut next = delta - f / slope;
            if !(next > lo && next < hi) || !next.is_finite() {
                next = 0.5 * (lo + hi);
            }
            let step = (next - delta).abs();
            delta = next;
            if step <= 1e-17 + 1e-16 * delta || hi - lo <= 1e-17 {
                let (f, _, st) = eval(delta);
                if f.abs() < best.2 {
                    best = (delta, st, f.abs());
                }
                break;
            }
        }
        (best.0, best.1)
    }
}

#[inline]
fn axpy(s: &State, a: f64, k: &State) -> State {
    [
        s[0] + a * k[0],
        s[1] + a * k[1],
        s[2] + a * k[2],
        s[3] + a * k[3],
    ]
}

/// Integrates the flight from `start` to the next collision.
///
/// `leaving` names the scatterer the orbit is departing from; its image at the
/// start point is excluded from collision detection. Returns the incidence
/// data together with the flight's `τ`, unwrapped `Δq` and the accumulated
/// `∫ p ∂κ/∂θ dt`.
pub fn free_flight(sys: &System, start: &FlowState, leaving: Option<usize>) -> Result<Flight> {
    let p = sys.params();
    let q0 = Vec2::new(start.x, start.y);
    let exclude = leaving.map(|i| {
        let c = sys.table.scatterers[i].center;
        Image {
            scatterer: i,
            mx: (q0.x - c.x).round() as i64,
            my: (q0.y - c.y).round() as i64,
        }
    });
    let mut state: State = [q0.x, q0.y, start.theta, 0.0];
    let mut t = 0.0;
    let mut steps = 0usize;
    let (mut d, _) = sys.nearest_image(q0, exclude);
    if d < 0.0 {
        let (_, img) = sys.nearest_image(q0, exclude);
        return Err(Error::Penetration {
            scatterer: img.scatterer,
            distance: d,
        });
    }
    loop {
        if t > p.max_flight_time {
            return Err(Error::HorizonViolation {
                max_time: p.max_flight_time,
            });
        }
        let h = d.clamp(p.h_min, p.h_max);
        let next = sys.rk4(&state, h);
        steps += 1;
        let q_next = Vec2::new(next[0], next[1]);
        let (d_next, img) = sys.nearest_image(q_next, exclude);
        let hit = if d_next <= 0.0 {
            Some((img, h, d_next, next))
        } else if h > d {
            // the step may have clipped a scatterer and left it again
            chord_crossing(sys, &state, h, exclude)
        } else {
            None
        };
        if let Some((img, hi, f_hi, st_hi)) = hit {
            let (delta, end) =
                sys.locate_root(&state, img, d.max(f64::MIN_POSITIVE), hi, f_hi, st_hi);
            let position = Vec2::new(end[0], end[1]);
            let tau = t + delta;
            let dq = position - q0;
            let unwrapped = start.unwrapped() + dq;
            let mut end_state = FlowState::from_unwrapped(unwrapped, end[2]);
            end_state.p = start.p;
            return Ok(Flight {
                hit: Incidence {
                    scatterer: img.scatterer,
                    position,
                    image_center: sys.image_center(img),
                    theta: end[2],
                },
                end: end_state,
                tau,
                dq,
                curv_integral: end[3],
                steps,
            });
        }
        state = next;
        t += h;
        d = d_next;
    }
}

/// Checks whether a step of length `h` taken with `d < h` dips into the image
/// nearest to its start, returning a bracketing end point if it does.
fn chord_crossing(
    sys: &System,
    s: &State,
    h: f64,
    exclude: Option<Image>,
) -> Option<(Image, f64, f64, State)> {
    let q = Vec2::new(s[0], s[1]);
    let (_, img) = sys.nearest_image(q, exclude);
    let c = sys.image_center(img);
    let dir = Vec2::from_angle(s[2]);
    let along = (c - q).dot(dir).clamp(0.0, h);
    if along <= 0.0 {
        return None;
    }
    let st = sys.rk4(s, along);
    let f = sys.signed_distance(Vec2::new(st[0], st[1]), img);
    (f <= 0.0).then_some((img, along, f, st))
}

/// Specular reflection at the end of a flight followed by the twist.
///
/// Returns the outgoing collision coordinate, the outgoing flow state and the
/// pre-twist outgoing angle.
pub fn reflect_incidence(
    sys: &System,
    hit: &Incidence,
    end: &FlowState,
) -> Result<(CollisionCoord, FlowState, f64)> {
    let s = &sys.table.scatterers[hit.scatterer];
    let normal = (hit.position - hit.image_center).normalized();
    reflect_at(
        sys,
        hit.scatterer,
        s.arclength_of_normal(normal),
        normal,
        hit.theta,
        end,
    )
}

fn reflect_at(
    sys: &System,
    scatterer: usize,
    r: f64,
    normal: Vec2,
    theta_in: f64,
    end: &FlowState,
) -> Result<(CollisionCoord, FlowState, f64)> {
    let tangent = Vec2::new(normal.y, -normal.x);
    let v_in = Vec2::from_angle(theta_in);
    let vn = v_in.dot(normal);
    let v_out = v_in - (2.0 * vn) * normal;
    let phi_reflected = v_out.dot(tangent).atan2(v_out.dot(normal));
    let cut = FRAC_PI_2 - sys.params.grazing_cut;
    if vn >= 0.0 || phi_reflected.abs() > cut {
        return Err(Error::Grazing {
            scatterer,
            phi: phi_reflected.abs(),
        });
    }
    let phi = sys.twist.apply(phi_reflected);
    let (sp, cp) = phi.sin_cos();
    let v = cp * normal + sp * tangent;
    let mut st = *end;
    st.theta = v.angle().rem_euclid(2.0 * PI);
    Ok((CollisionCoord::new(scatterer, r, phi), st, phi_reflected))
}

/// Reflects an incoming state lying on a scatterer boundary.
///
/// The scatterer is the one whose boundary is closest to the state's
/// position. Errors with [`Error::Grazing`] when the velocity does not point
/// into the scatterer or the outgoing angle is within the grazing cut.
pub fn reflect(sys: &System, incoming: &FlowState) -> Result<(CollisionCoord, FlowState)> {
    let q = incoming.position();
    let (id, s) = sys
        .table
        .scatterers
        .iter()
        .enumerate()
        .min_by(|a, b| {
            let da = torus_displacement(a.1.center, q).norm() - a.1.radius;
            let db = torus_displacement(b.1.center, q).norm() - b.1.radius;
            da.total_cmp(&db)
        })
        .ok_or_else(|| Error::InvalidParameter("table has no scatterers".into()))?;
    let normal = torus_displacement(s.center, q).normalized();
    let (c, st, _) = reflect_at(
        sys,
        id,
        s.arclength_of_normal(normal),
        normal,
        incoming.theta,
        incoming,
    )?;
    Ok((c, st))
}

fn check_not_grazing(sys: &System, c: &CollisionCoord) -> Result<()> {
    if !(c.phi.abs() < FRAC_PI_2 - sys.params.grazing_cut) {
        return Err(Error::Grazing {
            scatterer: c.scatterer,
            phi: c.phi.abs(),
        });
    }
    Ok(())
}

/// The forced collision map `T_E`.
pub fn billiard_map(sys: &System, c: &CollisionCoord) -> Result<(CollisionCoord, CollisionRecord)> {
    check_not_grazing(sys, c)?;
    let start = sys.lift(c);
    let flight = free_flight(sys, &start, Some(c.scatterer))?;
    let (to, _, phi_pre) = reflect_incidence(sys, &flight.hit, &flight.end)?;
    let flow = entropy::log_jac_flow(flight.curv_integral);
    let twist = entropy::log_jac_twist(phi_pre, &sys.twist)?;
    let jacobian = LogJacobianBreakdown::new(flow, twist, sys.epsilon());
    Ok((
        to,
        CollisionRecord {
            from: *c,
            to,
            tau: flight.tau,
            dq: flight.dq,
            curv_integral: flight.curv_integral,
            jacobian,
        },
    ))
}

/// Velocity reversal in collision coordinates: `(r, φ) ↦ (r, −φ)`.
pub fn involution(c: &CollisionCoord) -> CollisionCoord {
    CollisionCoord::new(c.scatterer, c.r, -c.phi)
}

/// `T⁻¹ = i ∘ T ∘ i`.
///
/// The returned record describes the backward step from `c`: its end point,
/// reversed displacement, and the log-Jacobian of `T⁻¹` at `c`, which equals
/// the forward log-Jacobian of `T` at `i(c)`.
pub fn billiard_map_inverse(
    sys: &System,
    c: &CollisionCoord,
) -> Result<(CollisionCoord, CollisionRecord)> {
    let (fwd_to, fwd) = billiard_map(sys, &involution(c))?;
    let to = involution(&fwd_to);
    Ok((
        to,
        CollisionRecord {
            from: *c,
            to,
            tau: fwd.tau,
            dq: -fwd.dq,
            curv_integral: fwd.curv_integral,
            jacobian: fwd.jacobian,
        },
    ))
}

/// Distance on collision space: arclength difference taken around the
/// perimeter, plus the angle difference; infinite across scatterers.
pub fn coord_distance(sys: &System, a: &CollisionCoord, b: &CollisionCoord) -> f64 {
    if a.scatterer != b.scatterer {
        return f64::INFINITY;
    }
    let per = sys.table.scatterers[a.scatterer].perimeter();
    let dr = (a.r - b.r).rem_euclid(per);
    dr.min(per - dr).max((a.phi - b.phi).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Scatterer;
    use approx::assert_abs_diff_eq;

    fn unforced() -> System {
        System::new(
            TableConfig::default(),
            ForceModel::None,
            TwistModel::Identity,
        )
        .unwrap()
    }

    fn forced(e: f64) -> System {
        System::new(
            TableConfig::default(),
            ForceModel::constant(e, 0.0),
            TwistModel::Identity,
        )
        .unwrap()
    }

    #[test]
    fn flow_derivative_examples() {
        let st = FlowState::new(0.1, 0.2, 0.7);
        let (x, y, th) = flow_derivative(&st, &ForceModel::None);
        assert_abs_diff_eq!(x, 0.7f64.cos(), epsilon = 1e-15);
        assert_abs_diff_eq!(y, 0.7f64.sin(), epsilon = 1e-15);
        assert_eq!(th, 0.0);

        let eps = 0.05;
        let f = ForceModel::constant(eps, 0.0);
        let (_, _, th) = flow_derivative(&FlowState::new(0.1, 0.2, FRAC_PI_2), &f);
        assert_abs_diff_eq!(th, -eps, epsilon = 1e-15);
        let (_, _, th) = flow_derivative(&FlowState::new(0.1, 0.2, 0.0), &f);
        assert_eq!(th, 0.0);
    }

    #[test]
    fn diametral_chord() {
        let sys = unforced();
        let start = FlowState::new(0.4, 0.0, 0.0);
        let fl = free_flight(&sys, &start, Some(0)).unwrap();
        assert_abs_diff_eq!(fl.tau, 0.2, epsilon = 1e-14);
        assert_abs_diff_eq!(fl.dq.x, 0.2, epsilon = 1e-14);
        assert_abs_diff_eq!(fl.dq.y, 0.0, epsilon = 1e-14);
        assert_eq!(fl.curv_integral, 0.0);
        assert_eq!(fl.hit.scatterer, 0);
        assert_abs_diff_eq!(fl.hit.image_center.x, 1.0, epsilon = 0.0);
    }

    #[test]
    fn period_two_orbit() {
        let sys = unforced();
        let c = CollisionCoord::new(0, 0.0, 0.0);
        let (next, rec) = billiard_map(&sys, &c).unwrap();
        assert_eq!(next.scatterer, 0);
        assert_abs_diff_eq!(next.r, PI * 0.4, epsilon = 1e-13);
        assert_abs_diff_eq!(next.phi, 0.0, epsilon = 1e-13);
        assert_eq!(rec.s(), 0.0);
        let (back, _) = billiard_map(&sys, &next).unwrap();
        assert_eq!(back.scatterer, 0);
        assert!(coord_distance(&sys, &back, &c) < 1e-12);

        let (inv, _) = billiard_map_inverse(&sys, &next).unwrap();
        assert!(coord_distance(&sys, &inv, &c) < 1e-12);
        let (inv2, _) = billiard_map_inverse(&sys, &c).unwrap();
        assert!(coord_distance(&sys, &inv2, &next) < 1e-12);
    }

    #[test]
    fn normal_incidence_reverses_direction() {
        let sys = unforced();
        // arrive at (0.4, 0) on disk A heading in -x
        let incoming = FlowState::new(0.4, 0.0, PI);
        let (c, out) = reflect(&sys, &incoming).unwrap();
        assert_eq!(c.scatterer, 0);
        assert_abs_diff_eq!(c.phi, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(out.theta.cos(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn specular_law() {
        let sys = unforced();
        for k in 1..20 {
            let psi = -1.4 + 0.14 * k as f64;
            // incoming velocity at angle psi from the inward normal at (0.4, 0)
            let v_in = Vec2::new(-psi.cos(), psi.sin());
            let incoming = FlowState::new(0.4, 0.0, v_in.angle());
            let (c, out) = reflect(&sys, &incoming).unwrap();
            // mirror image of the incoming direction across the tangent
            let v_out = Vec2::from_angle(out.theta);
            assert_abs_diff_eq!(v_out.x, -v_in.x, epsilon = 1e-14);
            assert_abs_diff_eq!(v_out.y, v_in.y, epsilon = 1e-14);
            // at r = 0 the clockwise tangent is (0,-1)
            assert_abs_diff_eq!(c.phi, -psi, epsilon = 1e-14);
        }
    }

    #[test]
    fn grazing_is_rejected() {
        let sys = unforced();
        let incoming = FlowState::new(0.4, 0.0, FRAC_PI_2);
        assert!(matches!(
            reflect(&sys, &incoming),
            Err(Error::Grazing { .. })
        ));
        let c = CollisionCoord::new(0, 0.0, FRAC_PI_2);
        assert!(matches!(billiard_map(&sys, &c), Err(Error::Grazing { .. })));
    }

    #[test]
    fn twist_fixes_tangential_angles() {
        let tw = TwistModel::AngleTwist { beta: 0.2 };
        assert_abs_diff_eq!(tw.apply(FRAC_PI_2), FRAC_PI_2, epsilon = 1e-15);
        assert_abs_diff_eq!(tw.apply(-FRAC_PI_2), -FRAC_PI_2, epsilon = 1e-15);
        assert!(TwistModel::AngleTwist { beta: 0.32 }.validate().is_err());
        assert!(TwistModel::AngleTwist { beta: -0.31 }.validate().is_ok());
    }

    #[test]
    fn involution_is_an_involution() {
        let c = CollisionCoord::new(1, 0.3, 0.2);
        assert_eq!(involution(&involution(&c)), c);
        let z = CollisionCoord::new(0, 0.7, 0.0);
        assert_eq!(involution(&z).phi, 0.0);
    }

    #[test]
    fn penetration_and_horizon_errors() {
        let sys = unforced();
        let inside = FlowState::new(0.1, 0.0, 0.0);
        assert!(matches!(
            free_flight(&sys, &inside, None),
            Err(Error::Penetration { .. })
        ));

        let mut p = *sys.params();
        p.max_flight_time = 0.01;
        let short = sys.with_params(p);
        let start = FlowState::new(0.4, 0.0, 0.3);
        assert!(matches!(
            free_flight(&short, &start, Some(0)),
            Err(Error::HorizonViolation { .. })
        ));
    }

    #[test]
    fn constant_field_current_identity() {
        let sys = forced(0.1);
        let mut c = CollisionCoord::new(0, 0.3, 0.2);
        for _ in 0..200 {
            let (next, rec) = billiard_map(&sys, &c).unwrap();
            assert!((rec.curv_integral + 0.1 * rec.dq.x).abs() < 1e-12);
            c = next;
        }
    }

    #[test]
    fn reversibility_along_an_orbit() {
        let sys = forced(0.05);
        let mut c = CollisionCoord::new(1, 0.1, -0.4);
        for _ in 0..100 {
            let (next, rec) = billiard_map(&sys, &c).unwrap();
            let (back, inv) = billiard_map_inverse(&sys, &next).unwrap();
            assert!(coord_distance(&sys, &back, &c) < 1e-9);
            assert!((inv.s() + rec.s()).abs() < 1e-10);
            c = next;
        }
    }

    #[test]
    fn rejects_bad_systems() {
        let big = ForceModel::constant(0.3, 0.0);
        assert!(System::new(TableConfig::default(), big, TwistModel::Identity).is_err());
        let open = TableConfig::new(vec![Scatterer::new(0.5, 0.5, 0.2)]);
        assert!(matches!(
            System::new(open, ForceModel::None, TwistModel::Identity),
            Err(Error::InfiniteHorizon { .. })
        ));
    }

    #[test]
    fn general_field_matches_constant_limit() {
        // A1 cos(2πy) with y pinned near 0 is not constant, but the general
        // path must at least reproduce the zero-amplitude map exactly.
        let f = ForceModel::GeneralField(Arc::new(SinusoidalField {
            amplitude: Vec2::ZERO,
        }));
        let sys = System::new(TableConfig::default(), f, TwistModel::Identity).unwrap();
        let c = CollisionCoord::new(0, 0.3, 0.2);
        let (a, _) = billiard_map(&sys, &c).unwrap();
        let (b, _) = billiard_map(&unforced(), &c).unwrap();
        assert!(coord_distance(&sys, &a, &b) < 1e-13);
    }
}
