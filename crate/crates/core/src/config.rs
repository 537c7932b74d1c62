//! Run configuration. Every key has a default; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clock::Micros;
use crate::coherence::CoherenceConfig;
use crate::error::{invalid, Error, Result};
use crate::layout::ZoneLayout;
use crate::prep::{PrepConfig, TrapModel};
use crate::rearrange::RearrangeConfig;
use crate::reservoir::{LoadingModel, ReservoirParams, TweezerGeometry};
use crate::storage::{ContinuousConfig, ReloadCycleConfig};
use crate::transport::StageTimings;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FluxConfig {
    /// Measurement window, opened at the first reservoir arrival.
    pub duration: f64,
    /// Targets per row when measuring rearranged qubit flux (12 rows).
    pub rearranged_targets_per_row: usize,
}

impl Default for FluxConfig {
    fn default() -> Self {
        Self {
            duration: 1.0,
            rearranged_targets_per_row: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DepletionConfig {
    pub trials: usize,
    pub extractions: usize,
}

impl Default for DepletionConfig {
    fn default() -> Self {
        Self {
            trials: 10,
            extractions: 120,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaintainConfig {
    /// Continuous run after assembly (s).
    pub duration: f64,
    pub min_population: usize,
    /// Length of the no-replenishment decay run used for the lifetime fit (s).
    pub decay_duration: f64,
    /// Samples within this long after assembly are excluded from the steady-state mean (s).
    pub settle: f64,
    /// Horizon for the cumulative-atoms extrapolation (h).
    pub extrapolate_hours: f64,
    pub assembly_trials: usize,
}

impl Default for MaintainConfig {
    fn default() -> Self {
        Self {
            duration: 600.0,
            min_population: 3000,
            decay_duration: 60.0,
            settle: 1.0,
            extrapolate_hours: 2.3,
            assembly_trials: 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanConfig {
    pub atoms: usize,
    pub trials: usize,
    /// π-pulse spacing for the T2 scans.
    pub t2_pulse_spacing: Micros,
    /// Scan length in units of the expected decay time.
    pub span: f64,
    pub points: usize,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            atoms: 3240,
            trials: 10,
            t2_pulse_spacing: Micros(1_600),
            span: 1.5,
            points: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub trials: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { trials: 2000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CapacityConfig {
    pub n_physical: f64,
    /// Seconds per logical layer.
    pub layer_time: f64,
    pub loss_per_layer: f64,
}

impl Default for CapacityConfig {
    fn default() -> Self {
        Self {
            n_physical: 10_000.0,
            layer_time: 1e-3,
            loss_per_layer: 0.0015,
        }
    }
}

/// A target value with a relative tolerance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Target {
    pub value: f64,
    pub rel: f64,
}

impl Target {
    pub fn check(&self, x: f64) -> bool {
        (x - self.value).abs() <= self.rel * self.value.abs()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcceptanceConfig {
    pub atom_flux: Target,
    pub qubit_flux_plain: Target,
    pub qubit_flux_rearranged: Target,
    pub depletion_window: [usize; 2],
    pub first30_fill_min: f64,
    pub parity_sigma: f64,
    pub rearranged_fill: f64,
    /// Absolute tolerance on the rearranged fill.
    pub rearranged_fill_tol: f64,
    pub zero_defect_band: [f64; 2],
    pub assembly_fill: f64,
    pub assembly_fill_tol: f64,
    pub lifetime: Target,
    pub steady_state_rel: f64,
    pub coherence_rel: f64,
    pub duty_band: [f64; 2],
    pub sawtooth_rel: f64,
    pub cumulative_atoms_min: f64,
}

impl Default for AcceptanceConfig {
    fn default() -> Self {
        Self {
            atom_flux: Target {
                value: 300_000.0,
                rel: 0.15,
            },
            qubit_flux_plain: Target {
                value: 30_000.0,
                rel: 0.15,
            },
            qubit_flux_rearranged: Target {
                value: 15_000.0,
                rel: 0.15,
            },
            depletion_window: [50, 90],
            first30_fill_min: 0.5,
            parity_sigma: 3.0,
            rearranged_fill: 0.996,
            rearranged_fill_tol: 0.003,
            zero_defect_band: [0.08, 0.20],
            assembly_fill: 0.985,
            assembly_fill_tol: 0.007,
            lifetime: Target {
                value: 60.0,
                rel: 0.05,
            },
            steady_state_rel: 0.005,
            coherence_rel: 0.05,
            duty_band: [0.85, 0.92],
            sawtooth_rel: 0.05,
            cumulative_atoms_min: 5e7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Overrides the trial count of every experiment when nonzero.
    pub trials: usize,
    /// Write the JSON-lines event log.
    pub event_log: bool,
    pub layout: ZoneLayout,
    pub reservoir: ReservoirParams,
    pub tweezers: TweezerGeometry,
    pub loading: LoadingModel,
    pub timings: StageTimings,
    pub prep: PrepConfig,
    pub trap: TrapModel,
    pub rearrange: RearrangeConfig,
    pub storage: ReloadCycleConfig,
    pub continuous: ContinuousConfig,
    pub coherence: CoherenceConfig,
    pub scan: ScanConfig,
    pub flux: FluxConfig,
    pub depletion: DepletionConfig,
    pub maintain: MaintainConfig,
    pub bench: BenchConfig,
    pub capacity: CapacityConfig,
    pub acceptance: AcceptanceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            trials: 0,
            event_log: true,
            layout: ZoneLayout::default(),
            reservoir: ReservoirParams::default(),
            tweezers: TweezerGeometry::default(),
            loading: LoadingModel::default(),
            timings: StageTimings::default(),
            prep: PrepConfig::default(),
            trap: TrapModel::default(),
            rearrange: RearrangeConfig::default(),
            storage: ReloadCycleConfig::default(),
            continuous: ContinuousConfig::default(),
            coherence: CoherenceConfig::default(),
            scan: ScanConfig::default(),
            flux: FluxConfig::default(),
            depletion: DepletionConfig::default(),
            maintain: MaintainConfig::default(),
            bench: BenchConfig::default(),
            capacity: CapacityConfig::default(),
            acceptance: AcceptanceConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(invalid("seed", "must fit in a signed 64-bit integer"));
        }
        self.layout.validate()?;
        self.layout.validate_storage()?;
        self.loading.validate()?;
        self.timings.validate()?;
        self.prep.validate()?;
        self.trap.validate()?;
        self.rearrange.validate()?;
        self.storage.validate()?;
        self.continuous.dd.validate()?;
        self.coherence.validate()?;
        if self.tweezers.count != self.layout.prep_sites() {
            return Err(invalid(
                "tweezers.count",
                "must equal the number of preparation sites",
            ));
        }
        if self.scan.points < 4 || self.scan.atoms == 0 || self.scan.trials == 0 {
            return Err(invalid(
                "scan",
                "needs at least 4 points, 1 atom and 1 trial",
            ));
        }
        if !(self.flux.duration > 0.0) {
            return Err(invalid("flux.duration", "must be > 0"));
        }
        if !(self.maintain.duration >= 0.0 && self.maintain.decay_duration > 0.0) {
            return Err(invalid(
                "maintain.duration",
                "must be ≥ 0 (decay_duration > 0)",
            ));
        }
        Ok(())
    }

    pub fn trials_or(&self, per_experiment: usize) -> usize {
        if self.trials > 0 {
            self.trials
        } else {
            per_experiment
        }
    }

    /// Layout used for rearranged qubit-flux batches.
    pub fn flux_layout(&self) -> ZoneLayout {
        ZoneLayout {
            targets_per_row: self.flux.rearranged_targets_per_row,
            ..self.layout.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn round_trip_is_a_fixed_point() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = RunConfig::from_toml("seed = 9\n[prep]\nimaging_survival = 0.99\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.prep.imaging_survival, 0.99);
        assert_eq!(cfg.prep.spam_fidelity, 0.981);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sed = 3\n").is_err());
        let err = RunConfig::from_toml("[prep]\nimaging_survivl = 0.9\n").unwrap_err();
        assert!(err.to_string().contains("imaging_survivl"), "{err}");
    }

    #[test]
    fn out_of_range_probability_is_rejected() {
        assert!(matches!(
            RunConfig::from_toml("[prep]\nimaging_survival = 1.2\n"),
            Err(Error::Probability { .. })
        ));
    }
}
