//! Run configuration, read from a TOML file.

use std::path::{Path, PathBuf};

use hyst_core::fem::P1Model;
use hyst_core::material::{HysteresisCell, MaterialStack};
use hyst_core::mesh::{build_tjoint, load_mesh, TJointParams, TriMesh};
use hyst_core::sim::{default_probes, LoadProgram, ProbePoint};
use hyst_core::solvers::{SolverConfig, Strategy};
use hyst_core::verify::VerifyConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_levels")]
    pub refinement_levels: Vec<usize>,
    #[serde(default)]
    pub mesh: MeshConfig,
    #[serde(default)]
    pub materials: MaterialsConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default = "default_program")]
    pub program: LoadProgram,
    /// Probe points; the six default points when absent.
    #[serde(default)]
    pub probes: Option<Vec<ProbePoint>>,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub compare: CompareSection,
}

fn default_seed() -> u64 {
    42
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("output")
}

fn default_levels() -> Vec<usize> {
    vec![0]
}

fn default_program() -> LoadProgram {
    LoadProgram::SingleStep { phi1: -0.5, phi2: 1.0 }
}

/// Built-in T-joint, or a mesh file in the text format of `hyst_core::mesh`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshConfig {
    /// Relative paths are resolved against the config file's directory.
    pub file: Option<PathBuf>,
    pub limb_width: f64,
    pub yoke_halflength: f64,
    pub limb_length: f64,
    pub target_h: f64,
}

impl Default for MeshConfig {
    fn default() -> Self {
        let p = TJointParams::default();
        Self {
            file: None,
            limb_width: p.limb_width,
            yoke_halflength: p.yoke_halflength,
            limb_length: p.limb_length,
            target_h: p.target_h,
        }
    }
}

/// A preset or an explicit cell list; the `lavet5` preset when both are absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaterialsConfig {
    /// `lavet5` or `vacuum`.
    pub preset: Option<String>,
    pub cells: Option<Vec<HysteresisCell>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub samples: usize,
    pub semismooth_samples: usize,
    pub h_max: f64,
    /// Fault hook: scales every generalized Jacobian handed to the checks.
    pub jacobian_scale: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        let d = VerifyConfig::default();
        Self {
            samples: d.samples,
            semismooth_samples: d.semismooth_samples,
            h_max: d.h_max,
            jacobian_scale: d.jacobian_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    pub strategies: Vec<Strategy>,
    /// Largest admitted relative distance between final potentials.
    pub agreement_tol: f64,
    /// Merit tolerance of the separate agreement runs; `None` compares the
    /// counting runs directly.
    pub agreement_term_rel_tol: Option<f64>,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            strategies: Strategy::ALL.to_vec(),
            agreement_tol: 1e-6,
            agreement_term_rel_tol: Some(1e-15),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads and validates `path`; relative mesh paths become relative to its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(file) = &cfg.mesh.file {
            if file.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.mesh.file = Some(base.join(file));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.refinement_levels.is_empty() {
            return Err(CliError::Config("refinement_levels must list at least one level".into()));
        }
        if let Some(&l) = self.refinement_levels.iter().find(|&&l| l > 6) {
            return Err(CliError::Config(format!("refinement level {l} is too large (at most 6)")));
        }
        self.solver.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.program.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.material_stack()?;
        if !(self.compare.agreement_tol > 0.0) {
            return Err(CliError::Config("compare.agreement_tol must be positive".into()));
        }
        if !(self.verify.jacobian_scale.is_finite() && self.verify.h_max > 0.0) {
            return Err(CliError::Config("verify section holds invalid numbers".into()));
        }
        Ok(())
    }

    pub fn material_stack(&self) -> Result<MaterialStack, CliError> {
        match (&self.materials.preset, &self.materials.cells) {
            (Some(_), Some(_)) => Err(CliError::Config(
                "materials: give either a preset or a cell list, not both".into(),
            )),
            (None, None) => Ok(MaterialStack::lavet5()),
            (Some(p), None) => match p.to_ascii_lowercase().as_str() {
                "lavet5" => Ok(MaterialStack::lavet5()),
                "vacuum" => Ok(MaterialStack::vacuum()),
                other => Err(CliError::Config(format!(
                    "unknown material preset '{other}' (expected lavet5 or vacuum)"
                ))),
            },
            (None, Some(cells)) => {
                MaterialStack::new(cells.clone()).map_err(|e| CliError::Config(format!("materials: {e}")))
            }
        }
    }

    pub fn probes(&self) -> Vec<ProbePoint> {
        self.probes.clone().unwrap_or_else(default_probes)
    }

    pub fn verify_config(&self) -> VerifyConfig {
        VerifyConfig {
            samples: self.verify.samples,
            semismooth_samples: self.verify.semismooth_samples,
            seed: self.seed,
            h_max: self.verify.h_max,
            jacobian_scale: self.verify.jacobian_scale,
        }
    }

    pub fn base_mesh(&self) -> Result<TriMesh, CliError> {
        match &self.mesh.file {
            Some(f) => load_mesh(f).map_err(|e| CliError::Config(format!("mesh {}: {e}", f.display()))),
            None => build_tjoint(&TJointParams {
                limb_width: self.mesh.limb_width,
                yoke_halflength: self.mesh.yoke_halflength,
                limb_length: self.mesh.limb_length,
                target_h: self.mesh.target_h,
            })
            .map_err(|e| CliError::Config(format!("mesh: {e}"))),
        }
    }

    /// One model per refinement level, in the listed order.
    pub fn models(&self) -> Result<Vec<(usize, P1Model)>, CliError> {
        let base = self.base_mesh()?;
        let stack = self.material_stack()?;
        self.refinement_levels
            .iter()
            .map(|&l| {
                P1Model::gated(base.refine_times(l), stack.clone())
                    .map(|m| (l, m))
                    .map_err(|e| CliError::Config(format!("level {l}: {e}")))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_from_empty_file() {
        let c = RunConfig::from_toml("").unwrap();
        c.validate().unwrap();
        assert_eq!(c.seed, 42);
        assert_eq!(c.refinement_levels, vec![0]);
        assert_eq!(c.solver, SolverConfig::default());
        assert_eq!(c.probes().len(), 6);
        assert_eq!(c.material_stack().unwrap(), MaterialStack::lavet5());
    }

    #[test]
    fn full_file() {
        let c = RunConfig::from_toml(
            r#"
seed = 7
output_dir = "out"
refinement_levels = [0, 1]

[mesh]
target_h = 0.25

[materials]
cells = [{ a_strength = 65.0, j_sat = 0.3, chi = 0.0 }]

[solver]
strategy = "GCM"
gcm_mu_r = 500.0

[program]
kind = "cycle"
steps_per_unit = 10
t_end = 1.0

[[probes]]
name = "P"
x = 0.0
y = 0.5

[compare]
strategies = ["ssn", "gcm"]
"#,
        )
        .unwrap();
        c.validate().unwrap();
        assert_eq!(c.solver.strategy, Strategy::Gcm);
        assert_eq!(c.material_stack().unwrap().cells[0].energy_prefactor, 2.0);
        assert_eq!(c.probes()[0].name, "P");
        assert_eq!(c.verify_config().seed, 7);
        assert_eq!(
            c.program,
            LoadProgram::Cycle {
                steps_per_unit: 10,
                t_end: 1.0,
                ramp: true
            }
        );
        assert_eq!(c.models().unwrap().len(), 2);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "refinement_levels = []",
            "unknown_key = 1",
            "[materials]\npreset = \"steel\"",
            "[materials]\ncells = [{ a_strength = -1.0, j_sat = 0.3, chi = 0.0 }]",
            "[solver]\narmijo_sigma = 0.9",
            "[solver]\nstrategy = \"newton\"",
            "[program]\nkind = \"cycle\"\nsteps_per_unit = 0\nt_end = 1.0",
        ] {
            let r = RunConfig::from_toml(text).and_then(|c| c.validate());
            assert!(matches!(r, Err(CliError::Config(_))), "{text}");
        }
    }
}
