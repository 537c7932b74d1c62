//! Experiment drivers behind the CLI subcommands. Each driver returns a
//! serializable summary plus the series it was computed from, and writes the
//! events it consumed to the log so the summary can be recomputed from it.

use std::f64::consts::{FRAC_PI_2, PI};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use crate::atom::{AtomRecord, Site, Zone};
use crate::clock::Micros;
use crate::coherence::{
    active_rates, apply_rotation, contrast, dd_pulses, decay, fit_1e_time, readout_sample,
    DDSequence, EnvFlags, ReadoutCounts,
};
use crate::config::RunConfig;
use crate::error::{invalid, Result};
use crate::log::{Event, EventLog};
use crate::pipeline::ReservoirController;
use crate::prep::{initialize_qubits, parity_project, prep_cycle, PrepPipeline};
use crate::rearrange::{plan_array, ArrayPlan, OccupancyGrid, RearrangeConfig, SegmentTable};
use crate::rng::{Module, SeededRng};
use crate::storage::{
    run_continuous, steady_state_population, ContinuousRun, Mode, StorageSim, Streams,
};
use crate::transport::TimelineEntry;

/// Runs `f(0..n)` on a scoped worker pool; results come back in index order.
pub fn par_map<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let workers = std::thread::available_parallelism()
        .map_or(1, |w| w.get())
        .min(n.max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every index is visited"))
        .collect()
}

fn replacing_controller(cfg: &RunConfig) -> Result<ReservoirController> {
    ReservoirController::new(
        cfg.reservoir.clone(),
        cfg.tweezers.clone(),
        cfg.loading.clone(),
        cfg.timings.clone(),
        true,
    )
}

fn single_controller(cfg: &RunConfig) -> Result<ReservoirController> {
    ReservoirController::single(
        cfg.reservoir.clone(),
        cfg.tweezers.clone(),
        cfg.loading.clone(),
        Micros::ZERO,
    )
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs
        .into_iter()
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub t_us: Micros,
    pub cumulative: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QubitFlux {
    pub rearranged: bool,
    pub batches: u64,
    pub qubits: u64,
    pub qubits_per_s: f64,
    pub batch_cycle_us: Micros,
    pub mean_batch: f64,
    /// Mean target fill; rearranged runs only.
    pub mean_target_fill: Option<f64>,
    #[serde(skip)]
    pub curve: Vec<CurvePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FluxSummary {
    pub window_start_us: Micros,
    pub duration_s: f64,
    pub extractions: u64,
    pub reservoirs: usize,
    pub atoms: u64,
    pub atoms_per_s: f64,
    pub mean_fill: f64,
    pub plain: QubitFlux,
    pub rearranged: QubitFlux,
    #[serde(skip)]
    pub atom_curve: Vec<CurvePoint>,
    #[serde(skip)]
    pub timeline: Vec<TimelineEntry>,
}

/// Extraction flux (run 0 of the log), then qubit flux without (run 1) and
/// with (run 2) rearrangement. Each window opens at the first arrival.
pub fn run_flux(cfg: &RunConfig, log: &mut EventLog) -> Result<FluxSummary> {
    cfg.validate()?;
    let duration = Micros::from_secs_f64(cfg.flux.duration);
    let sites = cfg.layout.prep_sites() as f64;

    let mut ctl = replacing_controller(cfg)?;
    let mut res_rng = SeededRng::for_module(cfg.seed, 0, Module::Reservoir);
    let mut prep_rng = SeededRng::for_module(cfg.seed, 0, Module::Prep);
    let t0 = ctl
        .available_at(Micros::ZERO)
        .expect("a cloud is on its way");
    let end = t0 + duration;
    let (mut t, mut atoms, mut extractions) = (t0, 0u64, 0u64);
    let mut atom_curve = vec![CurvePoint {
        t_us: t0,
        cumulative: 0,
    }];
    loop {
        let start = ctl.available_at(t).expect("controller keeps replacing");
        if start >= end {
            break;
        }
        let ex = ctl.extract(start, log, &mut res_rng)?;
        let occ = parity_project(&ex.counts, &cfg.prep, &mut prep_rng);
        let n = occ.iter().filter(|&&o| o > 0).count();
        log.record(start, Event::FluxCount { atoms: n })?;
        atoms += n as u64;
        extractions += 1;
        atom_curve.push(CurvePoint {
            t_us: start + cfg.prep.extraction_duration,
            cumulative: atoms,
        });
        t = start + cfg.prep.extraction_duration;
    }
    let timeline = ctl.timeline().to_vec();

    log.begin_run(1)?;
    let plain_pipe =
        PrepPipeline::new(cfg.prep.clone(), cfg.rearrange.clone(), cfg.layout.clone())?;
    let plain = qubit_flux(cfg, &plain_pipe, false, 1, log)?;
    log.begin_run(2)?;
    let flux_pipe = PrepPipeline::new(cfg.prep.clone(), cfg.rearrange.clone(), cfg.flux_layout())?;
    let rearranged = qubit_flux(cfg, &flux_pipe, true, 2, log)?;

    Ok(FluxSummary {
        window_start_us: t0,
        duration_s: duration.as_secs_f64(),
        extractions,
        reservoirs: timeline.iter().filter(|e| e.arrival < end).count(),
        atoms,
        atoms_per_s: atoms as f64 / duration.as_secs_f64(),
        mean_fill: if extractions == 0 {
            0.0
        } else {
            atoms as f64 / extractions as f64 / sites
        },
        plain,
        rearranged,
        atom_curve,
        timeline,
    })
}

fn qubit_flux(
    cfg: &RunConfig,
    pipe: &PrepPipeline,
    rearranged: bool,
    trial: u64,
    log: &mut EventLog,
) -> Result<QubitFlux> {
    let duration = Micros::from_secs_f64(cfg.flux.duration);
    let mut ctl = replacing_controller(cfg)?;
    let mut streams = Streams::new(cfg.seed, trial);
    let t0 = ctl
        .available_at(Micros::ZERO)
        .expect("a cloud is on its way");
    let end = t0 + duration;
    let (mut t, mut next_id, mut qubits, mut batches) = (t0, 0u64, 0u64, 0u64);
    let mut fills = Vec::new();
    let mut curve = vec![CurvePoint {
        t_us: t0,
        cumulative: 0,
    }];
    loop {
        let start = ctl.available_at(t).expect("controller keeps replacing");
        if start >= end {
            break;
        }
        let ex = ctl.extract(start, log, &mut streams.reservoir)?;
        let batch = prep_cycle(
            &ex.counts,
            rearranged,
            pipe,
            start,
            &mut next_id,
            &mut streams.prep,
        )?;
        if let Some(tgt) = &batch.targets {
            fills.push(tgt.fill());
        }
        let q = batch.qubits();
        log.record(
            start,
            Event::BatchReady {
                batch: batches,
                started_us: start,
                loaded: batch.loaded,
                detected: batch.detected,
                qubits: q,
            },
        )?;
        batches += 1;
        qubits += q as u64;
        curve.push(CurvePoint {
            t_us: start + batch.elapsed,
            cumulative: qubits,
        });
        t = start + batch.elapsed;
    }
    Ok(QubitFlux {
        rearranged,
        batches,
        qubits,
        qubits_per_s: qubits as f64 / duration.as_secs_f64(),
        batch_cycle_us: pipe.cycle_time(rearranged),
        mean_batch: if batches == 0 {
            0.0
        } else {
            qubits as f64 / batches as f64
        },
        mean_target_fill: rearranged.then(|| mean(fills.iter().copied())),
        curve,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DepletionSummary {
    pub trials: usize,
    pub extractions: usize,
    pub kappa: f64,
    pub initial_fill: f64,
    /// Fill that marks the 50% array-filling reference line.
    pub reference_fill: f64,
    /// First extraction (0-based) whose mean fill is below half the initial fill.
    pub half_index: Option<usize>,
    pub first30_mean_fill: f64,
    #[serde(skip)]
    pub fill: Vec<f64>,
    #[serde(skip)]
    pub cumulative: Vec<f64>,
}

/// Back-to-back extractions from one reservoir that is never replaced.
/// Trial `k` is run `k` of the log.
pub fn run_depletion(cfg: &RunConfig, log: &mut EventLog) -> Result<DepletionSummary> {
    cfg.validate()?;
    let trials = cfg.trials_or(cfg.depletion.trials);
    let n = cfg.depletion.extractions;
    if trials == 0 || n == 0 {
        return Err(invalid(
            "depletion",
            "needs at least one trial and one extraction",
        ));
    }
    let sites = cfg.layout.prep_sites() as f64;
    let mut fill = vec![0.0; n];
    let mut cumulative = vec![0.0; n];
    for trial in 0..trials {
        log.begin_run(trial as u64)?;
        let mut ctl = single_controller(cfg)?;
        let mut res_rng = SeededRng::for_module(cfg.seed, trial as u64, Module::Reservoir);
        let mut prep_rng = SeededRng::for_module(cfg.seed, trial as u64, Module::Prep);
        let mut total = 0u64;
        for k in 0..n {
            let t = Micros(k as u64 * cfg.prep.extraction_duration.0);
            let ex = ctl.extract(t, log, &mut res_rng)?;
            let occ = parity_project(&ex.counts, &cfg.prep, &mut prep_rng);
            let atoms = occ.iter().filter(|&&o| o > 0).count();
            log.record(t, Event::FluxCount { atoms })?;
            total += atoms as u64;
            fill[k] += atoms as f64 / sites;
            cumulative[k] += total as f64;
        }
    }
    for k in 0..n {
        fill[k] /= trials as f64;
        cumulative[k] /= trials as f64;
    }
    let initial_fill = fill[0];
    Ok(DepletionSummary {
        trials,
        extractions: n,
        kappa: cfg.loading.kappa,
        initial_fill,
        reference_fill: 0.5,
        half_index: fill.iter().position(|&f| f < 0.5 * initial_fill),
        first30_mean_fill: mean(fill.iter().take(30).copied()),
        fill,
        cumulative,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchSummary {
    pub trials: usize,
    pub targets: usize,
    pub mean_fill: f64,
    pub zero_defect_fraction: f64,
    pub mean_defects: f64,
    /// Fraction of trials with fewer than 530 filled targets.
    pub below_530_fraction: f64,
    pub mean_loaded: f64,
    pub plan_time_us: Micros,
    pub longest_move_us: Micros,
    #[serde(skip)]
    pub filled: Vec<usize>,
}

/// Repeated single-extraction prep cycles with rearrangement, each from a
/// fresh reservoir. Trial `k` is run `k` of the log.
pub fn run_rearrange_bench(cfg: &RunConfig, log: &mut EventLog) -> Result<BenchSummary> {
    cfg.validate()?;
    let trials = cfg.trials_or(cfg.bench.trials);
    let pipe = PrepPipeline::new(cfg.prep.clone(), cfg.rearrange.clone(), cfg.layout.clone())?;
    let targets = cfg.layout.prep_rows * cfg.layout.targets_per_row;
    let per_trial = par_map(trials, |i| {
        let mut ctl = single_controller(cfg)?;
        let mut streams = Streams::new(cfg.seed, i as u64);
        let ex = ctl.extract(
            Micros::ZERO,
            &mut EventLog::disabled(),
            &mut streams.reservoir,
        )?;
        let mut next_id = 0;
        let b = prep_cycle(
            &ex.counts,
            true,
            &pipe,
            Micros::ZERO,
            &mut next_id,
            &mut streams.prep,
        )?;
        let tgt = b.targets.expect("rearranged batch has targets");
        Ok((
            b.loaded,
            tgt.filled.iter().filter(|&&f| f).count(),
            b.elapsed,
        ))
    })?;
    for (i, &(_, filled, elapsed)) in per_trial.iter().enumerate() {
        log.begin_run(i as u64)?;
        log.record(elapsed, Event::Rearranged { targets, filled })?;
    }
    let filled: Vec<usize> = per_trial.iter().map(|p| p.1).collect();
    let n = trials.max(1) as f64;
    Ok(BenchSummary {
        trials,
        targets,
        mean_fill: mean(filled.iter().map(|&f| f as f64 / targets as f64)),
        zero_defect_fraction: filled.iter().filter(|&&f| f == targets).count() as f64 / n,
        mean_defects: mean(filled.iter().map(|&f| (targets - f) as f64)),
        below_530_fraction: filled.iter().filter(|&&f| f < 530).count() as f64 / n,
        mean_loaded: mean(per_trial.iter().map(|p| p.0 as f64)),
        plan_time_us: pipe.rearrange_time(),
        longest_move_us: pipe.table.longest(),
        filled,
    })
}

/// Plans a user-supplied occupancy grid.
pub fn plan_grid(grid: &OccupancyGrid, cfg: &RunConfig) -> Result<ArrayPlan> {
    cfg.validate()?;
    let layout = &cfg.layout;
    if grid.rows != layout.prep_rows || grid.cols != layout.prep_cols {
        return Err(invalid(
            "grid",
            format!(
                "{}×{} grid for a {}×{} preparation zone",
                grid.rows, grid.cols, layout.prep_rows, layout.prep_cols
            ),
        ));
    }
    let RearrangeConfig {
        timing,
        storage_roi,
        ..
    } = &cfg.rearrange;
    let table = SegmentTable::build(layout, timing)?;
    plan_array(grid, layout, timing, &table, *storage_roi)
}

fn storage_pipe(cfg: &RunConfig) -> Result<PrepPipeline> {
    let rearrange = RearrangeConfig {
        storage_roi: true,
        ..cfg.rearrange.clone()
    };
    PrepPipeline::new(cfg.prep.clone(), rearrange, cfg.layout.clone())
}

fn continuous(
    cfg: &RunConfig,
    pipe: &PrepPipeline,
    replenish: bool,
    duration: f64,
    mode: Mode,
    trial: u64,
    log: &mut EventLog,
) -> Result<ContinuousRun> {
    let reload = crate::storage::ReloadCycleConfig {
        replenish,
        ..cfg.storage.clone()
    };
    let sim = StorageSim {
        pipe,
        reload: &reload,
        coherence: &cfg.coherence,
        run: &cfg.continuous,
    };
    log.begin_run(trial)?;
    let mut streams = Streams::new(cfg.seed, trial);
    run_continuous(
        &sim,
        replacing_controller(cfg)?,
        Micros::from_secs_f64(duration),
        mode,
        log,
        &mut streams,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AssemblySummary {
    pub trials: usize,
    pub mean_population: f64,
    pub mean_fill: f64,
    pub min_population: usize,
    pub max_population: usize,
    pub mean_elapsed_s: f64,
}

/// Storage-array assembly only. Trials are runs `first_run..` of the log.
pub fn run_assembly(
    cfg: &RunConfig,
    trials: usize,
    first_run: u64,
    log: &mut EventLog,
) -> Result<AssemblySummary> {
    let pipe = storage_pipe(cfg)?;
    let runs = par_map(trials, |i| {
        let mut buf = EventLog::buffer();
        let run = continuous(
            cfg,
            &pipe,
            true,
            0.0,
            Mode::Atoms,
            first_run + i as u64,
            &mut buf,
        )?;
        Ok((run.assembly_population, run.assembly_elapsed, buf))
    })?;
    let mut pops = Vec::with_capacity(trials);
    let mut elapsed = Vec::with_capacity(trials);
    for (p, e, buf) in runs {
        log.absorb(buf)?;
        pops.push(p);
        elapsed.push(e.as_secs_f64());
    }
    let mean_population = mean(pops.iter().map(|&p| p as f64));
    Ok(AssemblySummary {
        trials,
        mean_population,
        mean_fill: mean_population / cfg.layout.storage_sites() as f64,
        min_population: pops.iter().copied().min().unwrap_or(0),
        max_population: pops.iter().copied().max().unwrap_or(0),
        mean_elapsed_s: mean(elapsed),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LifetimeSummary {
    pub duration_s: f64,
    pub configured_s: f64,
    pub fitted_s: Option<f64>,
    pub fit_error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SawtoothSummary {
    pub readouts: usize,
    pub duty: f64,
    pub configured_t2_s: f64,
    /// Per-cycle decay of the readout offset, predicted from the configured rates.
    pub closed_form_t_eff_s: f64,
    pub fitted_t_eff_s: Option<f64>,
    pub fit_error: Option<String>,
    /// Mean |readout − 0.5| by subarray age in cycles.
    pub by_age: Vec<f64>,
    /// Fraction of readouts in which the just-refilled subarray is the least decayed.
    pub reset_fraction: f64,
    pub decays_with_age: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct MaintenanceSummary {
    pub mode: Mode,
    pub duration_s: f64,
    pub assembly_elapsed_s: f64,
    pub assembly_population: usize,
    pub samples: usize,
    pub min_population: usize,
    pub threshold: usize,
    pub holds_threshold: bool,
    pub mean_population: f64,
    pub steady_state_mean: f64,
    pub mean_refill_fill: f64,
    pub steady_state_oracle: f64,
    pub steady_state_rel_error: f64,
    pub stalls: u64,
    pub cycled: u64,
    pub cycled_per_s: f64,
    pub extrapolate_hours: f64,
    pub extrapolated_cycled: f64,
    pub lifetime: LifetimeSummary,
    pub assembly: Option<AssemblySummary>,
    pub sawtooth: Option<SawtoothSummary>,
    #[serde(skip)]
    pub run: ContinuousRun,
}

/// Continuous operation (run 0), the no-replenishment decay run (run 1) and,
/// when `assembly_trials > 0`, repeated assemblies (runs 2..).
pub fn run_maintenance(
    cfg: &RunConfig,
    mode: Mode,
    assembly_trials: usize,
    log: &mut EventLog,
) -> Result<MaintenanceSummary> {
    cfg.validate()?;
    let m = &cfg.maintain;
    let pipe = storage_pipe(cfg)?;
    let run = continuous(cfg, &pipe, true, m.duration, mode, 0, log)?;

    let min_population = run.samples.iter().map(|s| s.population).min().unwrap_or(0);
    let settle = Micros::from_secs_f64(m.settle);
    let steady: Vec<f64> = run
        .samples
        .iter()
        .filter(|s| s.t >= settle)
        .map(|s| s.population as f64)
        .collect();
    let asm_end = run.assembly_start + run.assembly_elapsed;
    let after: Vec<f64> = run
        .refills
        .iter()
        .filter(|r| r.t > asm_end)
        .map(|r| r.fill)
        .collect();
    let mean_refill_fill = if after.is_empty() {
        mean(run.refills.iter().map(|r| r.fill))
    } else {
        mean(after)
    };
    let oracle = steady_state_population(
        &cfg.layout,
        mean_refill_fill,
        cfg.storage.cycle_period,
        cfg.storage.lifetime,
    );
    let steady_state_mean = mean(steady.iter().copied());
    let cycled_per_s = if m.duration > 0.0 {
        run.refills
            .iter()
            .filter(|r| r.t > asm_end)
            .map(|r| r.transferred as f64)
            .sum::<f64>()
            / m.duration
    } else {
        0.0
    };

    let decay_run = continuous(cfg, &pipe, false, m.decay_duration, Mode::Atoms, 1, log)?;
    let series: Vec<(f64, f64)> = decay_run
        .samples
        .iter()
        .filter(|s| s.population > 0)
        .map(|s| (s.t.as_secs_f64(), s.population as f64))
        .collect();
    let fit = fit_1e_time(&series);
    let lifetime = LifetimeSummary {
        duration_s: m.decay_duration,
        configured_s: cfg.storage.lifetime,
        fitted_s: fit.as_ref().ok().copied(),
        fit_error: fit.err().map(|e| e.to_string()),
    };

    let assembly = if assembly_trials > 0 {
        Some(run_assembly(cfg, assembly_trials, 2, log)?)
    } else {
        None
    };
    let sawtooth = (mode == Mode::X)
        .then(|| analyze_sawtooth(&run, cfg))
        .transpose()?;

    Ok(MaintenanceSummary {
        mode,
        duration_s: m.duration,
        assembly_elapsed_s: run.assembly_elapsed.as_secs_f64(),
        assembly_population: run.assembly_population,
        samples: run.samples.len(),
        min_population,
        threshold: m.min_population,
        holds_threshold: min_population >= m.min_population,
        mean_population: mean(run.samples.iter().map(|s| s.population as f64)),
        steady_state_mean,
        mean_refill_fill,
        steady_state_oracle: oracle,
        steady_state_rel_error: (steady_state_mean - oracle).abs() / oracle,
        stalls: run.stalls,
        cycled: run.cycled,
        cycled_per_s,
        extrapolate_hours: m.extrapolate_hours,
        extrapolated_cycled: cycled_per_s * m.extrapolate_hours * 3600.0,
        lifetime,
        assembly,
        sawtooth,
        run,
    })
}

/// Effective 1/e time of the per-cycle readout decay in x mode: T2 while
/// decoupled, Q0 relaxation for the rest of the cycle, and the two π/2 pulses.
pub fn sawtooth_t_eff(cfg: &RunConfig) -> Result<f64> {
    let rates = active_rates(cfg.continuous.env, &cfg.coherence)?;
    let seq = &cfg.continuous.dd;
    let period = cfg.storage.cycle_period.as_secs_f64();
    let dd = seq.duration().as_secs_f64();
    let per_cycle =
        dd * rates.gamma2 + (period - dd) * rates.gamma1_q0 - 2.0 * seq.per_pulse_fidelity.ln();
    Ok(period / per_cycle)
}

pub fn analyze_sawtooth(run: &ContinuousRun, cfg: &RunConfig) -> Result<SawtoothSummary> {
    let n_sub = cfg.layout.n_subarrays;
    let mut sums = vec![(0.0, 0usize); n_sub];
    let (mut resets, mut counted) = (0usize, 0usize);
    // skip readouts taken before every subarray has been refilled once after assembly
    for rec in run.readouts.iter().skip(n_sub) {
        let dev: Vec<f64> = rec.readout.iter().map(|r| (r - 0.5).abs()).collect();
        if dev.iter().any(|d| !d.is_finite()) {
            continue;
        }
        for (d, &age) in dev.iter().zip(&rec.age_cycles) {
            if let Some(slot) = sums.get_mut(age as usize) {
                slot.0 += d;
                slot.1 += 1;
            }
        }
        counted += 1;
        let fresh = dev[rec.refilled];
        if dev
            .iter()
            .enumerate()
            .all(|(i, &d)| i == rec.refilled || d < fresh)
        {
            resets += 1;
        }
    }
    let by_age: Vec<f64> = sums
        .iter()
        .map(|&(s, n)| if n == 0 { f64::NAN } else { s / n as f64 })
        .collect();
    let period = cfg.storage.cycle_period.as_secs_f64();
    let series: Vec<(f64, f64)> = by_age
        .iter()
        .enumerate()
        .filter(|(_, d)| d.is_finite())
        .map(|(k, &d)| (k as f64 * period, d))
        .collect();
    let fit = fit_1e_time(&series);
    Ok(SawtoothSummary {
        readouts: counted,
        duty: cfg.continuous.dd.duty(cfg.storage.cycle_period),
        configured_t2_s: active_rates(cfg.continuous.env, &cfg.coherence)?.t2(),
        closed_form_t_eff_s: sawtooth_t_eff(cfg)?,
        fitted_t_eff_s: fit.as_ref().ok().copied(),
        fit_error: fit.err().map(|e| e.to_string()),
        decays_with_age: by_age.windows(2).all(|w| w[1] < w[0]),
        by_age,
        reset_fraction: if counted == 0 {
            0.0
        } else {
            resets as f64 / counted as f64
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanKind {
    T1,
    T2,
}

impl ScanKind {
    pub fn name(self) -> &'static str {
        match self {
            ScanKind::T1 => "t1",
            ScanKind::T2 => "t2",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScanPoint {
    pub t_s: f64,
    /// (P0 − P1)/(Pa − Pmf); negative in T1 scans, which start in |1⟩.
    pub contrast: f64,
    pub counts: ReadoutCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScanResult {
    pub condition: String,
    pub kind: ScanKind,
    pub configured_s: f64,
    pub fitted_s: Option<f64>,
    pub rel_error: Option<f64>,
    pub fit_error: Option<String>,
    #[serde(skip)]
    pub points: Vec<ScanPoint>,
}

fn fresh_qubits(n: usize, cfg: &RunConfig, rng: &mut SeededRng) -> Vec<AtomRecord> {
    let mut atoms: Vec<AtomRecord> = (0..n)
        .map(|i| {
            let site = Site {
                zone: Zone::Storage,
                row: (i / cfg.layout.storage_cols) as u16,
                col: (i % cfg.layout.storage_cols) as u16,
            };
            AtomRecord::new(i as u64, Micros::ZERO, site)
        })
        .collect();
    initialize_qubits(&mut atoms, &cfg.prep, rng);
    atoms
}

/// Monte-Carlo T1 or T2 scan in a fixed environment. T2 scans run XY16 at
/// the scan pulse spacing and read out after an X(−π/2) at multiples of four
/// pulses; T1 scans start in |1⟩ with no decoupling.
pub fn run_scan(
    cfg: &RunConfig,
    condition: &str,
    env: EnvFlags,
    kind: ScanKind,
    salt: u64,
) -> Result<ScanResult> {
    let sc = &cfg.scan;
    let rates = active_rates(env, &cfg.coherence)?;
    let seq = DDSequence {
        pulse_spacing: sc.t2_pulse_spacing,
        ..cfg.continuous.dd.clone()
    };
    seq.validate()?;
    let configured = match kind {
        ScanKind::T1 => rates.t1_q1(),
        ScanKind::T2 => rates.t2(),
    };
    let span = sc.span * configured;
    let spacing = seq.pulse_spacing.as_secs_f64();
    let block = 4 * ((span / (sc.points - 1) as f64 / (4.0 * spacing)).round() as usize).max(1);
    let step = match kind {
        ScanKind::T1 => span / (sc.points - 1) as f64,
        ScanKind::T2 => block as f64 * spacing,
    };
    let fid = seq.per_pulse_fidelity;
    let jitter = seq.amplitude_jitter;
    let trials = cfg.trials_or(sc.trials);

    let per_trial = par_map(trials, |trial| {
        let mut rng = SeededRng::for_module(cfg.seed, trial as u64, Module::Coherence).fork(salt);
        let mut atoms = fresh_qubits(sc.atoms, cfg, &mut rng);
        let first = match kind {
            ScanKind::T1 => PI,
            ScanKind::T2 => FRAC_PI_2,
        };
        for a in atoms.iter_mut() {
            apply_rotation(a, first, 0.0, fid, jitter, &mut rng);
        }
        let mut out = Vec::with_capacity(sc.points);
        for i in 0..sc.points {
            if i > 0 {
                match kind {
                    ScanKind::T1 => atoms.iter_mut().for_each(|a| decay(a, step, &rates)),
                    ScanKind::T2 => {
                        dd_pulses(&mut atoms, &seq, &rates, (i - 1) * block, block, &mut rng)?
                    }
                }
            }
            let counts = match kind {
                ScanKind::T1 => readout_sample(&atoms, &mut rng),
                ScanKind::T2 => {
                    let mut probe = atoms.clone();
                    for a in probe.iter_mut() {
                        apply_rotation(a, -FRAC_PI_2, 0.0, fid, jitter, &mut rng);
                    }
                    readout_sample(&probe, &mut rng)
                }
            };
            out.push(counts);
        }
        Ok(out)
    })?;

    let mut points = Vec::with_capacity(sc.points);
    for i in 0..sc.points {
        let n = per_trial.len() as f64;
        let mut c = ReadoutCounts::default();
        for t in &per_trial {
            c.p0 += t[i].p0 / n;
            c.p1 += t[i].p1 / n;
            c.pa += t[i].pa / n;
            c.pmf += t[i].pmf / n;
        }
        points.push(ScanPoint {
            t_s: i as f64 * step,
            contrast: contrast(&c)?,
            counts: c,
        });
    }
    let series: Vec<(f64, f64)> = points
        .iter()
        .map(|p| (p.t_s, p.contrast.abs()))
        .filter(|&(_, c)| c > 0.0)
        .collect();
    let fit = fit_1e_time(&series);
    let fitted = fit.as_ref().ok().copied();
    Ok(ScanResult {
        condition: condition.to_string(),
        kind,
        configured_s: configured,
        fitted_s: fitted,
        rel_error: fitted.map(|f| (f - configured).abs() / configured),
        fit_error: fit.err().map(|e| e.to_string()),
        points,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoherenceSummary {
    pub atoms: usize,
    pub trials: usize,
    pub scans: Vec<ScanResult>,
}

/// T2 and T1 scans for every named environment; scan `k` is run `k` of the log.
pub fn run_coherence(cfg: &RunConfig, log: &mut EventLog) -> Result<CoherenceSummary> {
    cfg.validate()?;
    let mut scans = Vec::new();
    for (i, (name, env)) in EnvFlags::named().into_iter().enumerate() {
        for kind in [ScanKind::T2, ScanKind::T1] {
            let salt = 2 * i as u64 + (kind == ScanKind::T1) as u64;
            let scan = run_scan(cfg, name, env, kind, salt)?;
            log.begin_run(salt)?;
            for p in &scan.points {
                log.record(
                    Micros::from_secs_f64(p.t_s),
                    Event::ScanPoint {
                        condition: name.to_string(),
                        kind: kind.name().to_string(),
                        t_s: p.t_s,
                        p0: p.counts.p0,
                        p1: p.counts.p1,
                        pa: p.counts.pa,
                        pmf: p.counts.pmf,
                    },
                )?;
            }
            scans.push(scan);
        }
    }
    Ok(CoherenceSummary {
        atoms: cfg.scan.atoms,
        trials: cfg.trials_or(cfg.scan.trials),
        scans,
    })
}

/// Qubits per second needed to replace losses in a processor of `n_physical`
/// qubits that loses `loss_per_layer` of them every `layer_time` seconds.
pub fn replenishment_requirement(
    n_physical: f64,
    layer_time: f64,
    loss_per_layer: f64,
) -> Result<f64> {
    if !(n_physical > 0.0) {
        return Err(invalid("capacity.n_physical", "must be > 0"));
    }
    if !(layer_time > 0.0) {
        return Err(invalid("capacity.layer_time", "must be > 0"));
    }
    crate::error::check_probability("capacity.loss_per_layer", loss_per_layer)?;
    Ok(n_physical * loss_per_layer / layer_time)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CapacitySummary {
    pub n_physical: f64,
    pub layer_time_s: f64,
    pub loss_per_layer: f64,
    pub required_qubits_per_s: f64,
}

pub fn run_capacity(cfg: &RunConfig) -> Result<CapacitySummary> {
    let c = &cfg.capacity;
    Ok(CapacitySummary {
        n_physical: c.n_physical,
        layer_time_s: c.layer_time,
        loss_per_layer: c.loss_per_layer,
        required_qubits_per_s: replenishment_requirement(
            c.n_physical,
            c.layer_time,
            c.loss_per_layer,
        )?,
    })
}
