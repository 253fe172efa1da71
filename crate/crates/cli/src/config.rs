use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tonelli_torus::model::ModelSpec;
use tonelli_torus::search::{MinimaxOptions, SearchMode};

/// Everything a run depends on. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub k: Option<f64>,
    /// Points per loop for constructed seeds; `None` picks a default.
    pub h: Option<usize>,
    pub out: Option<PathBuf>,
    pub model: ModelSpec,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub orbit: OrbitSection,
    #[serde(default)]
    pub minimax: MinimaxSection,
    #[serde(default)]
    pub mane: ManeSection,
    #[serde(default)]
    pub spectrum: SpectrumSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub tol_crit: f64,
    /// Relative rank threshold for index and nullity.
    pub tol_rank: f64,
    pub max_iterations: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            tol_crit: 1e-8,
            tol_rank: 1e-6,
            max_iterations: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedKind {
    /// Perturbed samples of the two closed-form orbits (counterexample model only).
    Reference,
    /// Multi-start search for negative-action local minimizers.
    Search,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OrbitSection {
    pub seeds: SeedKind,
    pub mode: SearchMode,
    /// Size of the uniform random displacement applied to reference seeds.
    pub perturbation: f64,
    pub n_seeds: usize,
}

impl Default for OrbitSection {
    fn default() -> Self {
        Self {
            seeds: SeedKind::Search,
            mode: SearchMode::Critical,
            perturbation: 1e-3,
            n_seeds: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MinimaxSection {
    pub n_max: usize,
    pub n_seeds: usize,
    pub nodes: usize,
    pub max_sweeps: usize,
    pub step: f64,
    pub tolerance: f64,
    pub window: usize,
    pub climbing: bool,
}

impl Default for MinimaxSection {
    fn default() -> Self {
        let d = MinimaxOptions::default();
        Self {
            n_max: 3,
            n_seeds: 4,
            nodes: d.nodes,
            max_sweeps: d.max_sweeps,
            step: d.step,
            tolerance: d.tolerance,
            window: d.window,
            climbing: d.climbing,
        }
    }
}

impl MinimaxSection {
    pub fn options(&self) -> MinimaxOptions {
        MinimaxOptions {
            nodes: self.nodes,
            max_sweeps: self.max_sweeps,
            step: self.step,
            tolerance: self.tolerance,
            window: self.window,
            climbing: self.climbing,
            refine: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManeSection {
    pub family_size: usize,
    /// Energies tried for the lower bound; empty means `e₀ + 0.05·i·(1 + |e₀|)`, `i = 1..=40`.
    pub k_grid: Vec<f64>,
}

impl Default for ManeSection {
    fn default() -> Self {
        Self {
            family_size: 2,
            k_grid: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrumSection {
    pub m_max: usize,
}

impl Default for SpectrumSection {
    fn default() -> Self {
        Self { m_max: 8 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(cfg)
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> anyhow::Result<()> {
        let t = &self.tolerances;
        if !(t.tol_crit > 0.0 && t.tol_rank > 0.0 && t.max_iterations > 0) {
            bail!("tolerances must be positive");
        }
        if let Some(k) = self.k {
            if !k.is_finite() {
                bail!("k must be finite");
            }
        }
        if matches!(self.h, Some(h) if h < 2) {
            bail!("h must be at least 2");
        }
        if self.minimax.n_max == 0 {
            bail!("n_max must be at least 1");
        }
        if self.minimax.nodes < 3 || self.minimax.window == 0 || !(self.minimax.step > 0.0) {
            bail!("minimax needs nodes ≥ 3, window ≥ 1 and a positive step");
        }
        if self.spectrum.m_max == 0 {
            bail!("m_max must be at least 1");
        }
        if !(self.orbit.perturbation >= 0.0) {
            bail!("perturbation must be nonnegative");
        }
        Ok(())
    }

    pub fn energy(&self) -> anyhow::Result<f64> {
        self.k
            .context("this command needs an energy: set `k` or pass --k")
    }

    /// SHA-256 of the canonical TOML serialization, without the output directory.
    pub fn hash(&self) -> String {
        let canonical = Self {
            out: None,
            ..self.clone()
        };
        let text = toml::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}
