//! Experiment configuration as read from JSON.

use std::path::PathBuf;

use nczw_core::dyadic_model::{DyadicGrid, MAX_DEPTH};
use nczw_core::kernels_operators::KernelSpec;
use nczw_core::weights::WeightSpec;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VerifyError};

/// Heights at which the stopping construction is run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaGrid {
    /// `auto` log-spaced heights between the smallest admissible height and
    /// `4‖f‖_∞`, recomputed for every field.
    Auto { auto: usize },
    Explicit(Vec<f64>),
}

impl Default for LambdaGrid {
    fn default() -> Self {
        Self::Auto { auto: 16 }
    }
}

impl LambdaGrid {
    pub fn len(&self) -> usize {
        match self {
            Self::Auto { auto } => *auto,
            Self::Explicit(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The heights for a field with `‖f‖_{L_1^w} = norm`, `‖E_0 f‖_∞ = floor`
    /// and `‖f‖_∞ = sup`. Explicit heights below `floor` are dropped, since the
    /// stopping recursion starts from `q_0 = 1`.
    pub fn heights(&self, norm: f64, floor: f64, sup: f64) -> Vec<f64> {
        match self {
            Self::Explicit(v) => v.iter().copied().filter(|&l| l >= floor).collect(),
            Self::Auto { auto } => {
                let lo = norm.max(floor);
                let hi = 4.0 * sup;
                if *auto == 1 || !(hi > lo) {
                    return vec![lo];
                }
                let (a, b) = (lo.ln(), hi.ln());
                (0..*auto)
                    .map(|k| (a + (b - a) * k as f64 / (*auto - 1) as f64).exp())
                    .collect()
            }
        }
    }
}

/// How the Rademacher expectation is taken.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignConfig {
    Exhaustive,
    MonteCarlo { samples: usize },
}

impl Default for SignConfig {
    fn default() -> Self {
        Self::Exhaustive
    }
}

/// Tolerances; every field can be overridden from the config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    pub exact: f64,
    pub stopping: f64,
    pub regularized: f64,
    pub khintchine: f64,
    pub lemma_slack: f64,
    pub orthogonality: f64,
    pub kernel: f64,
    /// Allowed `max_J / min_J` of a stable suite.
    pub stability_factor: f64,
    /// Allowed `|ρ|` of a stable suite.
    pub trend: f64,
    /// Relative movement of the per-depth maxima below which no trend is read.
    pub trend_resolution: f64,
    /// Allowed two-sided factor between the certificate and the scalar oracle.
    pub oracle_factor: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            exact: 1e-9,
            stopping: 1e-10,
            regularized: 1e-8,
            khintchine: 1e-12,
            lemma_slack: 1e-8,
            orthogonality: 1e-10,
            kernel: 1e-8,
            stability_factor: 2.0,
            trend: 0.5,
            trend_resolution: 0.05,
            oracle_factor: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub d: usize,
    /// The `J`-grid.
    #[serde(rename = "J")]
    pub depths: Vec<usize>,
    pub m: Vec<usize>,
    pub weights: Vec<String>,
    /// Scalar kernels for the maximal certificate.
    pub kernels: Vec<String>,
    /// Vector kernel for the square-function experiments.
    #[serde(default = "default_vector_kernel")]
    pub vector_kernel: String,
    #[serde(default)]
    pub lambda_grid: LambdaGrid,
    pub seeds: Vec<u64>,
    /// How many leading seeds the expensive suites use; all of them when absent.
    #[serde(default)]
    pub heavy_seeds: Option<usize>,
    /// Depth at which random test fields are drawn before refinement.
    #[serde(default = "default_base_depth")]
    pub base_depth: usize,
    #[serde(default = "default_atoms")]
    pub atoms: usize,
    #[serde(default)]
    pub signs: SignConfig,
    /// Samples for the analytic lemma suites.
    #[serde(default = "default_lemma_samples")]
    pub lemma_samples: usize,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_vector_kernel() -> String {
    "dyadic-poisson:4".into()
}

fn default_base_depth() -> usize {
    4
}

fn default_atoms() -> usize {
    500
}

fn default_lemma_samples() -> usize {
    1000
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| VerifyError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| VerifyError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Rejects configurations the library cannot run.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(VerifyError::Config(msg));
        if !(1..=2).contains(&self.d) {
            return bad(format!("d = {} is not supported (use 1 or 2)", self.d));
        }
        if self.depths.is_empty() {
            return bad("the J-grid is empty".into());
        }
        let max_depth = MAX_DEPTH / self.d;
        for &j in &self.depths {
            if j < 2 || j > max_depth {
                return bad(format!("J = {j} outside 2..={max_depth} for d = {}", self.d));
            }
            if j < self.base_depth {
                return bad(format!("J = {j} is below the base depth {}", self.base_depth));
            }
        }
        if self.base_depth < 2 {
            return bad("base depth must be at least 2".into());
        }
        if self.m.is_empty() {
            return bad("no matrix sizes given".into());
        }
        for &m in &self.m {
            if ![1, 2, 4, 8].contains(&m) {
                return bad(format!("m = {m} is not one of 1, 2, 4, 8"));
            }
        }
        if self.lambda_grid.is_empty() {
            return bad("the λ-grid is empty".into());
        }
        if let LambdaGrid::Explicit(v) = &self.lambda_grid {
            if v.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
                return bad("λ-grid entries must be positive and finite".into());
            }
        }
        if self.seeds.is_empty() {
            return bad("the seed list is empty".into());
        }
        if self.weights.is_empty() {
            return bad("no weights given".into());
        }
        let probe = DyadicGrid::new(self.d, self.base_depth)
            .map_err(|e| VerifyError::Config(e.to_string()))?;
        for w in self.weight_specs()? {
            w.build(probe).map_err(|e| VerifyError::Config(format!("weight {w}: {e}")))?;
        }
        for k in self.kernel_specs()? {
            k.build(self.d).map_err(|e| VerifyError::Config(format!("kernel {k}: {e}")))?;
        }
        let v = self.vector_kernel_spec()?;
        v.build(self.d).map_err(|e| VerifyError::Config(format!("kernel {v}: {e}")))?;
        if let SignConfig::MonteCarlo { samples: 0 } = self.signs {
            return bad("Monte Carlo sign sampling needs at least one sample".into());
        }
        Ok(())
    }

    /// Seeds for suites whose cost is dominated by dense operators.
    pub fn heavy(&self) -> &[u64] {
        let n = self.heavy_seeds.unwrap_or(self.seeds.len()).clamp(1, self.seeds.len());
        &self.seeds[..n]
    }

    pub fn weight_specs(&self) -> Result<Vec<WeightSpec>> {
        self.weights
            .iter()
            .map(|s| s.parse().map_err(|e| VerifyError::Config(format!("weight `{s}`: {e}"))))
            .collect()
    }

    pub fn kernel_specs(&self) -> Result<Vec<KernelSpec>> {
        self.kernels
            .iter()
            .map(|s| s.parse().map_err(|e| VerifyError::Config(format!("kernel `{s}`: {e}"))))
            .collect()
    }

    pub fn vector_kernel_spec(&self) -> Result<KernelSpec> {
        self.vector_kernel
            .parse()
            .map_err(|e| VerifyError::Config(format!("kernel `{}`: {e}", self.vector_kernel)))
    }
}
