//! Run configuration: JSON schema, defaults, validation and the digest that
//! stamps every output file.

use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context};
use lorentz_core::statistics::{Init, MgfConfig};
use lorentz_core::{
    ForceModel, IntegratorParams, Scatterer, SinusoidalField, System, SystemOptions, TableConfig,
    TwistModel, Vec2,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 lets the pool pick one per core.
    pub workers: usize,
    pub table: TableSpec,
    pub force: ForceSpec,
    pub twist: TwistSpec,
    pub epsilon_max: f64,
    /// `None` derives the step sizes from the table.
    pub integrator: Option<IntegratorParams>,
    pub horizon: HorizonSpec,
    pub simulate: SimulateSpec,
    pub mgf: MgfSpec,
    pub ulam: UlamSpec,
    pub gk: GkSpec,
    pub gc: GcSpec,
    pub verify: VerifySpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 0,
            table: TableSpec::default(),
            force: ForceSpec::Constant { e: [0.05, 0.0] },
            twist: TwistSpec::Identity,
            epsilon_max: 0.2,
            integrator: None,
            horizon: HorizonSpec::default(),
            simulate: SimulateSpec::default(),
            mgf: MgfSpec::default(),
            ulam: UlamSpec::default(),
            gk: GkSpec::default(),
            gc: GcSpec::default(),
            verify: VerifySpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScattererSpec {
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableSpec {
    pub scatterers: Vec<ScattererSpec>,
}

impl Default for TableSpec {
    fn default() -> Self {
        Self {
            scatterers: TableConfig::default()
                .scatterers
                .iter()
                .map(|s| ScattererSpec {
                    center: [s.center.x, s.center.y],
                    radius: s.radius,
                })
                .collect(),
        }
    }
}

impl TableSpec {
    pub fn build(&self) -> TableConfig {
        TableConfig::new(
            self.scatterers
                .iter()
                .map(|s| Scatterer::new(s.center[0], s.center[1], s.radius))
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ForceSpec {
    None,
    /// Thermostatted constant field `E`.
    Constant {
        e: [f64; 2],
    },
    /// `F = (A₁ cos 2πy, A₂ cos 2πx)`.
    Sinusoidal {
        amplitude: [f64; 2],
    },
}

impl ForceSpec {
    pub fn build(&self) -> ForceModel {
        match *self {
            ForceSpec::None => ForceModel::None,
            ForceSpec::Constant { e } => ForceModel::constant(e[0], e[1]),
            ForceSpec::Sinusoidal { amplitude } => {
                ForceModel::GeneralField(Arc::new(SinusoidalField {
                    amplitude: Vec2::new(amplitude[0], amplitude[1]),
                }))
            }
        }
    }

    /// The constant field vector, if any.
    pub fn constant_field(&self) -> Option<Vec2> {
        match *self {
            ForceSpec::Constant { e } => Some(Vec2::new(e[0], e[1])),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TwistSpec {
    Identity,
    Angle { beta: f64 },
}

impl TwistSpec {
    pub fn build(&self) -> TwistModel {
        match *self {
            TwistSpec::Identity => TwistModel::Identity,
            TwistSpec::Angle { beta } => TwistModel::AngleTwist { beta },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HorizonSpec {
    pub n_rays: usize,
    pub max_len: f64,
}

impl Default for HorizonSpec {
    fn default() -> Self {
        Self {
            n_rays: 1_000_000,
            max_len: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSpec {
    pub orbits: usize,
    pub length: usize,
    pub init: Init,
    pub burn_in: usize,
    pub max_resamples: usize,
    /// Reported violation threshold for `|H|`.
    pub h_bound: f64,
}

impl Default for SimulateSpec {
    fn default() -> Self {
        Self {
            orbits: 16,
            length: 1000,
            init: Init::Srb,
            burn_in: 1000,
            max_resamples: 10_000,
            h_bound: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MgfSpec {
    pub a0: f64,
    pub a_grid: Vec<f64>,
    pub n_list: Vec<usize>,
    pub n_orbits: usize,
    pub init: Init,
    pub burn_in: usize,
    pub windows_per_chain: usize,
    pub batches: usize,
    pub ess_threshold: f64,
    pub max_resamples: usize,
    /// Nodes of the rate-function lattice.
    pub rate_points: usize,
}

impl Default for MgfSpec {
    fn default() -> Self {
        let d = MgfConfig::default();
        Self {
            a0: d.a0,
            a_grid: d.a_grid,
            n_list: d.n_list,
            n_orbits: d.n_orbits,
            init: d.init,
            burn_in: d.burn_in,
            windows_per_chain: d.windows_per_chain,
            batches: d.batches,
            ess_threshold: d.ess_threshold,
            max_resamples: d.max_resamples,
            rate_points: 201,
        }
    }
}

impl MgfSpec {
    pub fn build(&self) -> MgfConfig {
        MgfConfig {
            a_grid: self.a_grid.clone(),
            n_list: self.n_list.clone(),
            n_orbits: self.n_orbits,
            init: self.init,
            burn_in: self.burn_in,
            windows_per_chain: self.windows_per_chain,
            batches: self.batches,
            ess_threshold: self.ess_threshold,
            a0: self.a0,
            max_resamples: self.max_resamples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UlamSpec {
    /// Boxes per scatterer in `r` (for the largest disk) and in `sin φ`.
    pub grid: usize,
    pub samples_per_box: usize,
    pub a_grid: Vec<f64>,
    /// Finer grid for the discretization-error proxy; 0 disables it.
    pub refine_grid: usize,
    pub refine_samples_per_box: usize,
    pub tol: f64,
    pub max_iters: usize,
    /// Write the sparse matrix at each `a` as triplets.
    pub export_matrix: bool,
}

impl Default for UlamSpec {
    fn default() -> Self {
        Self {
            grid: 64,
            samples_per_box: 400,
            a_grid: vec![-0.25, 0.0, 0.25, 0.5, 0.75, 1.0, 1.25],
            refine_grid: 128,
            refine_samples_per_box: 100,
            tol: 1e-10,
            max_iters: 100_000,
            export_matrix: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GkSpec {
    pub chains: usize,
    pub length: usize,
    pub burn_in: usize,
    pub j_max: usize,
    /// Block length of the batch-means estimate.
    pub block: usize,
    /// Chain groups used for standard errors.
    pub groups: usize,
    /// Stratification grid and samples per box for `μ0(H)`.
    pub mu0_grid: usize,
    pub mu0_per_box: usize,
    pub max_resamples: usize,
}

impl Default for GkSpec {
    fn default() -> Self {
        Self {
            chains: 100,
            length: 20_000,
            burn_in: 1000,
            j_max: 50,
            block: 1000,
            groups: 50,
            mu0_grid: 512,
            mu0_per_box: 4,
            max_resamples: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GcSpec {
    pub n: usize,
    pub orbits: usize,
    pub bins: usize,
    pub min_count: u64,
    pub burn_in: usize,
    pub windows_per_chain: usize,
    pub max_resamples: usize,
    /// Allowed relative deviation of the fitted slope from 1.
    pub slope_tolerance: f64,
}

impl Default for GcSpec {
    fn default() -> Self {
        Self {
            n: 30,
            orbits: 1_000_000,
            bins: 20,
            min_count: 50,
            burn_in: 1000,
            windows_per_chain: 1000,
            max_resamples: 10_000,
            slope_tolerance: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySpec {
    /// μ0 points for the reversibility and antisymmetry checks.
    pub samples: usize,
    pub fd_points: usize,
    pub fd_step: f64,
    pub ks_samples: usize,
    pub ft_orbits: usize,
    pub ft_n_list: Vec<usize>,
    pub ft_a_grid: Vec<f64>,
    pub ulam_grid: usize,
    pub ulam_samples_per_box: usize,
    pub tolerances: Tolerances,
}

impl Default for VerifySpec {
    fn default() -> Self {
        Self {
            samples: 10_000,
            fd_points: 1000,
            fd_step: 1e-6,
            ks_samples: 100_000,
            ft_orbits: 100_000,
            ft_n_list: vec![5, 10, 20],
            ft_a_grid: vec![-0.25, 0.25, 0.5, 0.75, 1.25],
            ulam_grid: 32,
            ulam_samples_per_box: 100,
            tolerances: Tolerances::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub reversibility: f64,
    pub antisymmetry: f64,
    pub jacobian_fd: f64,
    pub current: f64,
    /// Normalized transient fluctuation residual.
    pub ft_residual: f64,
    pub positivity: f64,
    pub h_bound: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            reversibility: 1e-8,
            antisymmetry: 1e-8,
            jacobian_fd: 1e-5,
            current: 1e-8,
            ft_residual: 3.0,
            positivity: 1e-12,
            h_bound: 50.0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| anyhow::anyhow!("config: {e}"))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text)
    }

    /// Constraints that serde cannot express.
    pub fn check(&self) -> anyhow::Result<()> {
        let table = self.table.build();
        let violations = table.validate();
        if !violations.is_empty() {
            let v: Vec<String> = violations.iter().map(ToString::to_string).collect();
            bail!("invalid table: {}", v.join("; "));
        }
        let tw = self.twist.build();
        tw.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
        let eps = self.force.build().epsilon().max(tw.epsilon());
        if !(eps <= self.epsilon_max) {
            bail!("epsilon {eps} exceeds epsilon_max {}", self.epsilon_max);
        }
        self.mgf
            .build()
            .validate()
            .map_err(|e| anyhow::anyhow!("mgf: {e}"))?;
        for &a in &self.ulam.a_grid {
            if !(a >= -self.mgf.a0 - 1e-12 && a <= 1.0 + self.mgf.a0 + 1e-12) {
                bail!("ulam: a outside [-a0, 1+a0]: a = {a}, a0 = {}", self.mgf.a0);
            }
        }
        if self.ulam.grid == 0 || self.ulam.samples_per_box == 0 {
            bail!("ulam: grid and samples_per_box must be positive");
        }
        Ok(())
    }

    /// Builds the validated system; fills in the derived integrator settings.
    pub fn system(&mut self) -> anyhow::Result<System> {
        let opts = SystemOptions {
            epsilon_max: self.epsilon_max,
            horizon_rays: self.horizon.n_rays,
            horizon_max_len: self.horizon.max_len,
            horizon_seed: self.seed,
            integrator: self.integrator,
        };
        let sys = System::with_options(
            self.table.build(),
            self.force.build(),
            self.twist.build(),
            opts,
        )?;
        self.integrator = Some(*sys.params());
        Ok(sys)
    }

    /// SHA-256 of the resolved config with `workers` removed.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("workers");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}
