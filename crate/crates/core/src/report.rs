//! Threshold checks and the file set written for each subcommand.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{AcceptanceConfig, RunConfig, Target};
use crate::error::Result;
use crate::experiments::{
    plan_grid, run_capacity, run_coherence, run_depletion, run_flux, run_maintenance,
    run_rearrange_bench, BenchSummary, CoherenceSummary, DepletionSummary, FluxSummary,
    MaintenanceSummary, QubitFlux, ScanKind,
};
use crate::output::OutDir;
use crate::rearrange::OccupancyGrid;
use crate::storage::Mode;
use crate::transport::write_timeline_csv;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub expected: String,
    pub pass: bool,
}

impl Check {
    fn target(name: &str, value: f64, t: &Target) -> Self {
        Self {
            name: name.into(),
            value,
            expected: format!("{} ± {}%", t.value, t.rel * 100.0),
            pass: t.check(value),
        }
    }

    fn band(name: &str, value: f64, lo: f64, hi: f64) -> Self {
        Self {
            name: name.into(),
            value,
            expected: format!("[{lo}, {hi}]"),
            pass: (lo..=hi).contains(&value),
        }
    }

    fn at_least(name: &str, value: f64, min: f64) -> Self {
        Self {
            name: name.into(),
            value,
            expected: format!("≥ {min}"),
            pass: value >= min,
        }
    }

    fn above(name: &str, value: f64, min: f64) -> Self {
        Self {
            name: name.into(),
            value,
            expected: format!("> {min}"),
            pass: value > min,
        }
    }

    fn rel(name: &str, value: f64, reference: f64, rel: f64) -> Self {
        Self {
            name: name.into(),
            value,
            expected: format!("{reference} ± {}%", rel * 100.0),
            pass: (value - reference).abs() <= rel * reference.abs(),
        }
    }

    fn fitted(name: &str, fitted: Option<f64>, reference: f64, rel: f64) -> Self {
        match fitted {
            Some(v) => Self::rel(name, v, reference, rel),
            None => Self {
                name: name.into(),
                value: f64::NAN,
                expected: format!("{reference} ± {}% (fit failed)", rel * 100.0),
                pass: false,
            },
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: {} (expected {})",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.expected
        )
    }
}

pub fn flux_checks(s: &FluxSummary, a: &AcceptanceConfig) -> Vec<Check> {
    vec![
        Check::target("atom flux (atoms/s)", s.atoms_per_s, &a.atom_flux),
        Check::target(
            "qubit flux, no rearrangement (qubits/s)",
            s.plain.qubits_per_s,
            &a.qubit_flux_plain,
        ),
        Check::target(
            "qubit flux, rearranged (qubits/s)",
            s.rearranged.qubits_per_s,
            &a.qubit_flux_rearranged,
        ),
    ]
}

pub fn depletion_checks(s: &DepletionSummary, a: &AcceptanceConfig) -> Vec<Check> {
    let [lo, hi] = a.depletion_window;
    vec![
        Check::band(
            "half-fill extraction index",
            s.half_index.map_or(f64::NAN, |i| i as f64),
            lo as f64,
            hi as f64,
        ),
        Check::above(
            "first-30 mean fill",
            s.first30_mean_fill,
            a.first30_fill_min,
        ),
    ]
}

pub fn bench_checks(s: &BenchSummary, a: &AcceptanceConfig) -> Vec<Check> {
    let [lo, hi] = a.zero_defect_band;
    vec![
        Check::band(
            "mean target fill",
            s.mean_fill,
            a.rearranged_fill - a.rearranged_fill_tol,
            a.rearranged_fill + a.rearranged_fill_tol,
        ),
        Check::band("zero-defect fraction", s.zero_defect_fraction, lo, hi),
    ]
}

pub fn maintenance_checks(s: &MaintenanceSummary, cfg: &RunConfig) -> Vec<Check> {
    let a = &cfg.acceptance;
    let mut v = vec![
        Check::at_least(
            "minimum population",
            s.min_population as f64,
            cfg.maintain.min_population as f64,
        ),
        Check::fitted(
            "lifetime without replenishment (s)",
            s.lifetime.fitted_s,
            a.lifetime.value,
            a.lifetime.rel,
        ),
        Check::rel(
            "steady-state mean population",
            s.steady_state_mean,
            s.steady_state_oracle,
            a.steady_state_rel,
        ),
        Check::above(
            "extrapolated cycled atoms",
            s.extrapolated_cycled,
            a.cumulative_atoms_min,
        ),
    ];
    if let Some(asm) = &s.assembly {
        v.push(Check::band(
            "assembly fill",
            asm.mean_fill,
            a.assembly_fill - a.assembly_fill_tol,
            a.assembly_fill + a.assembly_fill_tol,
        ));
    }
    if let Some(st) = &s.sawtooth {
        v.push(Check::band(
            "superposition duty",
            st.duty,
            a.duty_band[0],
            a.duty_band[1],
        ));
        v.push(Check::band(
            "reset at own refill (fraction)",
            st.reset_fraction,
            1.0,
            1.0,
        ));
        v.push(Check::band(
            "decays with age",
            st.decays_with_age as u8 as f64,
            1.0,
            1.0,
        ));
        v.push(Check::fitted(
            "sawtooth decay time (s)",
            st.fitted_t_eff_s,
            st.closed_form_t_eff_s,
            a.sawtooth_rel,
        ));
    }
    v
}

/// The scans with a stated target value.
pub const COHERENCE_TARGETS: [(&str, ScanKind); 5] = [
    ("reference", ScanKind::T2),
    ("mot", ScanKind::T2),
    ("shielded", ScanKind::T2),
    ("reference", ScanKind::T1),
    ("shielded", ScanKind::T1),
];

pub fn coherence_checks(s: &CoherenceSummary, a: &AcceptanceConfig) -> Vec<Check> {
    COHERENCE_TARGETS
        .iter()
        .filter_map(|&(cond, kind)| {
            s.scans
                .iter()
                .find(|r| r.condition == cond && r.kind == kind)
        })
        .map(|r| {
            Check::fitted(
                &format!("{} {} (s)", r.condition, r.kind.name().to_uppercase()),
                r.fitted_s,
                r.configured_s,
                a.coherence_rel,
            )
        })
        .collect()
}

#[derive(Serialize)]
struct Report<'a, T> {
    summary: &'a T,
    checks: &'a [Check],
}

fn write_report<T: Serialize>(out: &OutDir, summary: &T, checks: &[Check]) -> Result<()> {
    out.json("summary.json", &Report { summary, checks })?;
    Ok(())
}

fn curve_rows(curve: &[crate::experiments::CurvePoint]) -> Vec<[u64; 2]> {
    curve.iter().map(|p| [p.t_us.0, p.cumulative]).collect()
}

fn qubit_csv(out: &OutDir, file: &str, q: &QubitFlux) -> Result<()> {
    out.csv(
        file,
        "qubit-flux",
        &["t_us", "cumulative_qubits"],
        curve_rows(&q.curve),
    )?;
    Ok(())
}

pub fn emit_flux(out: &OutDir, s: &FluxSummary, checks: &[Check]) -> Result<()> {
    out.csv(
        "atom_flux.csv",
        "atom-flux",
        &["t_us", "cumulative_atoms"],
        curve_rows(&s.atom_curve),
    )?;
    qubit_csv(out, "qubit_flux_plain.csv", &s.plain)?;
    qubit_csv(out, "qubit_flux_rearranged.csv", &s.rearranged)?;
    let path = out.path("timeline.csv");
    let io = |source| crate::Error::Io {
        path: path.clone(),
        source,
    };
    let f = std::fs::File::create(&path).map_err(io)?;
    let mut w = std::io::BufWriter::new(f);
    write_timeline_csv(&s.timeline, &mut w).map_err(io)?;
    std::io::Write::flush(&mut w).map_err(io)?;
    write_report(out, s, checks)
}

pub fn emit_depletion(out: &OutDir, s: &DepletionSummary, checks: &[Check]) -> Result<()> {
    let rows: Vec<[String; 3]> = s
        .fill
        .iter()
        .zip(&s.cumulative)
        .enumerate()
        .map(|(k, (f, c))| [k.to_string(), f.to_string(), c.to_string()])
        .collect();
    out.csv(
        "depletion.csv",
        "depletion",
        &["extraction", "mean_fill", "mean_cumulative_atoms"],
        rows,
    )?;
    write_report(out, s, checks)
}

pub fn emit_bench(out: &OutDir, s: &BenchSummary, checks: &[Check]) -> Result<()> {
    let rows: Vec<[usize; 2]> = s.filled.iter().enumerate().map(|(i, &f)| [i, f]).collect();
    out.csv("bench.csv", "rearrange-bench", &["trial", "filled"], rows)?;
    write_report(out, s, checks)
}

const SERIES_HEADER: [&str; 4] = ["t_us", "population", "mean_polarization", "mean_contrast"];

fn series_rows(samples: &[crate::storage::Sample]) -> Vec<[String; 4]> {
    samples
        .iter()
        .map(|s| {
            [
                s.t.0.to_string(),
                s.population.to_string(),
                s.mean_polarization.to_string(),
                s.mean_contrast.to_string(),
            ]
        })
        .collect()
}

pub fn emit_maintenance(out: &OutDir, s: &MaintenanceSummary, checks: &[Check]) -> Result<()> {
    out.csv(
        "series.csv",
        "storage-series",
        &SERIES_HEADER,
        series_rows(&s.run.samples),
    )?;
    let refills: Vec<[String; 5]> = s
        .run
        .refills
        .iter()
        .map(|r| {
            [
                r.t.0.to_string(),
                r.cycle.to_string(),
                r.subarray.to_string(),
                r.transferred.to_string(),
                r.fill.to_string(),
            ]
        })
        .collect();
    out.csv(
        "refills.csv",
        "refills",
        &["t_us", "cycle", "subarray", "transferred", "fill"],
        refills,
    )?;
    let mut readouts = Vec::new();
    for r in &s.run.readouts {
        for (sub, (p, age)) in r.readout.iter().zip(&r.age_cycles).enumerate() {
            readouts.push([
                r.t.0.to_string(),
                r.cycle.to_string(),
                sub.to_string(),
                age.to_string(),
                p.to_string(),
            ]);
        }
    }
    out.csv(
        "readouts.csv",
        "readouts",
        &[
            "t_us",
            "cycle",
            "subarray",
            "age_cycles",
            "readout_probability",
        ],
        readouts,
    )?;
    write_report(out, s, checks)
}

pub fn emit_coherence(out: &OutDir, s: &CoherenceSummary, checks: &[Check]) -> Result<()> {
    for scan in &s.scans {
        let rows: Vec<[f64; 6]> = scan
            .points
            .iter()
            .map(|p| {
                [
                    p.t_s,
                    p.contrast,
                    p.counts.p0,
                    p.counts.p1,
                    p.counts.pa,
                    p.counts.pmf,
                ]
            })
            .collect();
        out.csv(
            &format!("scan_{}_{}.csv", scan.condition, scan.kind.name()),
            "coherence-scan",
            &["t_s", "contrast", "p0", "p1", "pa", "pmf"],
            rows,
        )?;
    }
    write_report(out, s, checks)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Command {
    Flux,
    Deplete,
    Maintain { mode: Mode },
    Coherence,
    RearrangeBench { grid: Option<PathBuf> },
    Capacity,
}

/// Runs a subcommand, writes its files under `out_dir` and returns its checks.
pub fn execute(cmd: &Command, cfg: &RunConfig, out_dir: &Path) -> Result<Vec<Check>> {
    cfg.validate()?;
    let out = OutDir::create(out_dir)?;
    let mut log = out.event_log(cfg.event_log)?;
    let a = &cfg.acceptance;
    let checks = match cmd {
        Command::Flux => {
            let s = run_flux(cfg, &mut log)?;
            let c = flux_checks(&s, a);
            emit_flux(&out, &s, &c)?;
            c
        }
        Command::Deplete => {
            let s = run_depletion(cfg, &mut log)?;
            let c = depletion_checks(&s, a);
            emit_depletion(&out, &s, &c)?;
            c
        }
        Command::Maintain { mode } => {
            let trials = cfg.trials_or(cfg.maintain.assembly_trials);
            let s = run_maintenance(cfg, *mode, trials, &mut log)?;
            let c = maintenance_checks(&s, cfg);
            emit_maintenance(&out, &s, &c)?;
            c
        }
        Command::Coherence => {
            let s = run_coherence(cfg, &mut log)?;
            let c = coherence_checks(&s, a);
            emit_coherence(&out, &s, &c)?;
            c
        }
        Command::RearrangeBench { grid: Some(path) } => {
            let grid = OccupancyGrid::read_csv_path(path)?;
            let plan = plan_grid(&grid, cfg)?;
            out.json("plan.json", &plan)?;
            Vec::new()
        }
        Command::RearrangeBench { grid: None } => {
            let s = run_rearrange_bench(cfg, &mut log)?;
            let c = bench_checks(&s, a);
            emit_bench(&out, &s, &c)?;
            c
        }
        Command::Capacity => {
            let s = run_capacity(cfg)?;
            write_report(&out, &s, &[])?;
            Vec::new()
        }
    };
    log.finish()?;
    Ok(checks)
}
