//! Preparation-zone channels: parity projection, imaging, optical pumping,
//! the drop-recapture thermometer and the full prep cycle.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::atom::{AtomRecord, InternalState, Site, Zone};
use crate::clock::Micros;
use crate::error::{check_probability, invalid, Error, Result};
use crate::layout::ZoneLayout;
use crate::rearrange::{
    execute_plan, plan_array, OccupancyGrid, RearrangeConfig, SegmentTable, TargetOccupancy,
};
use crate::rng::{Module, SeededRng};
use crate::units::{G, KB, M_RB87};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepConfig {
    /// Extraction and transfer of the loaded tweezers into the prep zone.
    pub extraction_duration: Micros,
    pub parity_duration: Micros,
    /// Fraction of even, multiply loaded sites that keep a pair.
    pub double_residual: f64,
    pub pushout_duration: Micros,
    pub pushout_enabled: bool,
    /// Extra imaging loss when the pushout is skipped.
    pub pushout_penalty: f64,
    pub lattice_parking: bool,
    /// Extra imaging loss when the lattice is not parked.
    pub parking_penalty: f64,
    pub image_duration: Micros,
    pub discriminant_fidelity_site: f64,
    pub discriminant_fidelity_avg: f64,
    pub imaging_survival: f64,
    /// Chance that an atom lost during imaging still shows up in the image.
    pub lost_atom_detection: f64,
    /// Outcome temperature of in-zone cooling (K).
    pub eit_temperature: f64,
    pub pump_duration: Micros,
    pub pump_time_constant: Micros,
    pub spam_fidelity: f64,
    /// Quantisation field (G).
    pub b_field: f64,
    /// Qubits handed on per cycle without rearrangement.
    pub batch_size: usize,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            extraction_duration: Micros(2_150),
            parity_duration: Micros(7_770),
            double_residual: 0.01,
            pushout_duration: Micros(30),
            pushout_enabled: true,
            pushout_penalty: 0.0,
            lattice_parking: true,
            parking_penalty: 0.05,
            image_duration: Micros::from_ms(10),
            discriminant_fidelity_site: 0.9999,
            discriminant_fidelity_avg: 0.9993,
            imaging_survival: 0.995,
            lost_atom_detection: 0.5,
            eit_temperature: 12e-6,
            pump_duration: Micros(50),
            pump_time_constant: Micros(5),
            spam_fidelity: 0.981,
            b_field: 4.2,
            batch_size: 600,
        }
    }
}

impl PrepConfig {
    pub fn validate(&self) -> Result<()> {
        check_probability("prep.double_residual", self.double_residual)?;
        check_probability("prep.pushout_penalty", self.pushout_penalty)?;
        check_probability("prep.parking_penalty", self.parking_penalty)?;
        check_probability(
            "prep.discriminant_fidelity_site",
            self.discriminant_fidelity_site,
        )?;
        check_probability(
            "prep.discriminant_fidelity_avg",
            self.discriminant_fidelity_avg,
        )?;
        check_probability("prep.imaging_survival", self.imaging_survival)?;
        check_probability("prep.lost_atom_detection", self.lost_atom_detection)?;
        check_probability("prep.spam_fidelity", self.spam_fidelity)?;
        if !(self.eit_temperature > 0.0) {
            return Err(invalid("prep.eit_temperature", "must be > 0"));
        }
        if self.pump_time_constant == Micros::ZERO {
            return Err(invalid("prep.pump_time_constant", "must be > 0"));
        }
        Ok(())
    }

    /// Imaging survival after the mitigation penalties.
    pub fn effective_imaging_survival(&self) -> f64 {
        let mut s = self.imaging_survival;
        if !self.pushout_enabled {
            s *= 1.0 - self.pushout_penalty;
        }
        if !self.lattice_parking {
            s *= 1.0 - self.parking_penalty;
        }
        s
    }

    /// Probability that pumping ends in |0>.
    pub fn pump_success(&self) -> f64 {
        let t = self.pump_duration.0 as f64 / self.pump_time_constant.0 as f64;
        (1.0 - (-t).exp()).min(self.spam_fidelity)
    }

    /// Stage durations of one prep cycle, in order.
    pub fn stages(&self, rearrangement: Option<Micros>) -> Vec<(&'static str, Micros)> {
        let mut v = vec![
            ("extraction", self.extraction_duration),
            ("parity", self.parity_duration),
            ("pushout", self.pushout_duration),
            ("image", self.image_duration),
        ];
        if let Some(r) = rearrangement {
            v.push(("rearrange", r));
        }
        v.push(("pump", self.pump_duration));
        v
    }
}

/// Sets each site to 1 for odd counts and 0 for even counts. An even count of
/// two or more keeps a pair with probability `double_residual`.
pub fn parity_project<R: Rng + ?Sized>(counts: &[u32], cfg: &PrepConfig, rng: &mut R) -> Vec<u8> {
    counts
        .iter()
        .map(|&n| {
            if n % 2 == 1 {
                1
            } else if n >= 2 && cfg.double_residual > 0.0 && rng.random_bool(cfg.double_residual) {
                2
            } else {
                0
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageResult {
    pub detections: Vec<bool>,
    pub occupancy: Vec<u8>,
}

/// Fluorescence image of the prep zone. Loss happens during exposure, so a
/// lost atom may still be detected.
pub fn image<R: Rng + ?Sized>(
    occupancy: &[u8],
    cfg: &PrepConfig,
    rng: &mut R,
) -> Result<ImageResult> {
    let fid = check_probability(
        "prep.discriminant_fidelity_site",
        cfg.discriminant_fidelity_site,
    )?;
    let survive = cfg.effective_imaging_survival();
    let mut detections = Vec::with_capacity(occupancy.len());
    let mut after = Vec::with_capacity(occupancy.len());
    for &occ in occupancy {
        if occ == 0 {
            detections.push(fid < 1.0 && !rng.random_bool(fid));
            after.push(0);
        } else {
            let kept = survive >= 1.0 || rng.random_bool(survive);
            let p_detect = if kept {
                fid
            } else {
                fid * cfg.lost_atom_detection
            };
            detections.push(p_detect > 0.0 && rng.random_bool(p_detect));
            after.push(if kept { occ } else { 0 });
        }
    }
    Ok(ImageResult {
        detections,
        occupancy: after,
    })
}

/// Optical pumping into |0>; failures are left unpolarized with zero Bloch vector.
pub fn initialize_qubits<R: Rng + ?Sized>(atoms: &mut [AtomRecord], cfg: &PrepConfig, rng: &mut R) {
    let p = cfg.pump_success();
    for atom in atoms.iter_mut().filter(|a| !a.is_lost()) {
        if p > 0.0 && rng.random_bool(p) {
            atom.internal = InternalState::Q0;
            atom.bloch = [0.0, 0.0, 1.0];
        } else {
            atom.internal = InternalState::Unpolarized;
            atom.bloch = [0.0; 3];
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GravityAxis {
    Axial,
    Radial,
}

/// Gaussian tweezer potential used by the drop-recapture thermometer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrapModel {
    /// Depth in µK.
    pub depth: f64,
    pub waist: f64,
    pub wavelength: f64,
    pub gravity: GravityAxis,
}

impl Default for TrapModel {
    fn default() -> Self {
        Self {
            depth: 370.0,
            waist: 800e-9,
            wavelength: 852e-9,
            gravity: GravityAxis::Axial,
        }
    }
}

impl TrapModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.depth > 0.0) {
            return Err(invalid("trap.depth", "must be > 0"));
        }
        if !(self.waist > 0.0 && self.wavelength > 0.0) {
            return Err(invalid("trap.waist", "waist and wavelength must be > 0"));
        }
        Ok(())
    }

    pub fn depth_joules(&self) -> f64 {
        self.depth * 1e-6 * KB
    }

    pub fn rayleigh_range(&self) -> f64 {
        std::f64::consts::PI * self.waist * self.waist / self.wavelength
    }

    pub fn omega_radial(&self) -> f64 {
        (4.0 * self.depth_joules() / (M_RB87 * self.waist * self.waist)).sqrt()
    }

    pub fn omega_axial(&self) -> f64 {
        let zr = self.rayleigh_range();
        (2.0 * self.depth_joules() / (M_RB87 * zr * zr)).sqrt()
    }

    /// Potential energy (J), zero at infinity; z is the beam axis.
    pub fn potential(&self, p: [f64; 3]) -> f64 {
        let zr = self.rayleigh_range();
        let s = 1.0 + (p[2] / zr).powi(2);
        let r2 = p[0] * p[0] + p[1] * p[1];
        -self.depth_joules() / s * (-2.0 * r2 / (self.waist * self.waist * s)).exp()
    }

    fn gravity_vector(&self) -> [f64; 3] {
        match self.gravity {
            GravityAxis::Axial => [0.0, 0.0, -G],
            GravityAxis::Radial => [-G, 0.0, 0.0],
        }
    }
}

/// Recapture fraction after each release time (µs).
pub fn drop_recapture<R: Rng + ?Sized>(
    temperature: f64,
    trap: &TrapModel,
    release_times: &[f64],
    samples: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(invalid(
            "temperature",
            format!("must be > 0, got {temperature}"),
        ));
    }
    if samples == 0 {
        return Err(invalid("samples", "must be ≥ 1"));
    }
    trap.validate()?;
    if release_times.iter().any(|t| !(*t >= 0.0)) {
        return Err(invalid("release_times", "must be ≥ 0"));
    }
    let kt = KB * temperature;
    let sx = (kt / M_RB87).sqrt() / trap.omega_radial();
    let sz = (kt / M_RB87).sqrt() / trap.omega_axial();
    let sv = (kt / M_RB87).sqrt();
    let pos = [
        Normal::new(0.0, sx).unwrap(),
        Normal::new(0.0, sx).unwrap(),
        Normal::new(0.0, sz).unwrap(),
    ];
    let vel = Normal::new(0.0, sv).unwrap();
    let g = trap.gravity_vector();
    let energy = |x: [f64; 3], v: [f64; 3]| {
        0.5 * M_RB87 * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]) + trap.potential(x)
    };

    let mut kept = vec![0usize; release_times.len()];
    let mut drawn = 0;
    let mut attempts = 0usize;
    while drawn < samples {
        attempts += 1;
        if attempts > samples * 1000 {
            return Err(invalid(
                "temperature",
                "too hot for the trap: no bound samples",
            ));
        }
        let x = [pos[0].sample(rng), pos[1].sample(rng), pos[2].sample(rng)];
        let v = [vel.sample(rng), vel.sample(rng), vel.sample(rng)];
        if energy(x, v) >= 0.0 {
            continue;
        }
        drawn += 1;
        for (k, &t_us) in release_times.iter().enumerate() {
            let t = t_us * 1e-6;
            let mut xt = [0.0; 3];
            let mut vt = [0.0; 3];
            for i in 0..3 {
                xt[i] = x[i] + v[i] * t + 0.5 * g[i] * t * t;
                vt[i] = v[i] + g[i] * t;
            }
            if energy(xt, vt) < 0.0 {
                kept[k] += 1;
            }
        }
    }
    Ok(kept
        .into_iter()
        .map(|k| k as f64 / samples as f64)
        .collect())
}

/// Least-squares temperature fit of a recapture curve. Every trial
/// temperature reuses the same random stream, so the objective is smooth
/// enough for a golden-section search in log T.
pub fn fit_temperature(
    release_times: &[f64],
    measured: &[f64],
    trap: &TrapModel,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if release_times.len() != measured.len() || measured.is_empty() {
        return Err(invalid(
            "measured",
            "needs one survival value per release time",
        ));
    }
    let sse = |log_t: f64| -> Result<f64> {
        let mut rng = SeededRng::for_module(seed, 0, Module::DropRecapture);
        let curve = drop_recapture(log_t.exp(), trap, release_times, samples, &mut rng)?;
        Ok(curve
            .iter()
            .zip(measured)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    };
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = ((0.5e-6f64).ln(), (150e-6f64).ln());
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (sse(c)?, sse(d)?);
    for _ in 0..40 {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = sse(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = sse(d)?;
        }
    }
    Ok((0.5 * (a + b)).exp())
}

pub const DROP_RECAPTURE_FORMAT: &str = "# reloadsim drop-recapture v1";

pub fn write_drop_recapture_csv(
    path: &Path,
    release_times: &[f64],
    survival: &[f64],
) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "{DROP_RECAPTURE_FORMAT}").map_err(io)?;
    writeln!(f, "release_us,survival").map_err(io)?;
    for (t, s) in release_times.iter().zip(survival) {
        writeln!(f, "{t},{s}").map_err(io)?;
    }
    f.flush().map_err(io)
}

/// Everything one prep cycle hands on.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    pub atoms: Vec<AtomRecord>,
    /// Sites holding at least one atom after parity projection.
    pub loaded: usize,
    pub detected: usize,
    pub survived_imaging: usize,
    pub targets: Option<TargetOccupancy>,
    pub elapsed: Micros,
}

impl PreparedBatch {
    pub fn qubits(&self) -> usize {
        self.atoms.len()
    }
}

/// Static inputs shared by every prep cycle.
#[derive(Clone, Debug)]
pub struct PrepPipeline {
    pub prep: PrepConfig,
    pub rearrange: RearrangeConfig,
    pub layout: ZoneLayout,
    pub table: SegmentTable,
}

impl PrepPipeline {
    pub fn new(prep: PrepConfig, rearrange: RearrangeConfig, layout: ZoneLayout) -> Result<Self> {
        prep.validate()?;
        rearrange.validate()?;
        layout.validate()?;
        let table = SegmentTable::build(&layout, &rearrange.timing)?;
        Ok(Self {
            prep,
            rearrange,
            layout,
            table,
        })
    }

    pub fn rearrange_time(&self) -> Micros {
        self.rearrange
            .timing
            .total(self.layout.prep_rows, self.rearrange.storage_roi)
    }

    pub fn cycle_time(&self, with_rearrangement: bool) -> Micros {
        let r = with_rearrangement.then(|| self.rearrange_time());
        self.prep
            .stages(r)
            .iter()
            .map(|s| s.1)
            .fold(Micros::ZERO, |a, b| a + b)
    }
}

/// Runs one batch through parity projection, imaging, optional rearrangement
/// and pumping. `counts` are the raw per-tweezer numbers from the extraction;
/// `start` is when the extraction began.
pub fn prep_cycle<R: Rng + ?Sized>(
    counts: &[u32],
    with_rearrangement: bool,
    pipe: &PrepPipeline,
    start: Micros,
    next_id: &mut u64,
    rng: &mut R,
) -> Result<PreparedBatch> {
    let layout = &pipe.layout;
    if counts.len() != layout.prep_sites() {
        return Err(invalid(
            "counts",
            format!(
                "{} tweezers for {} prep sites",
                counts.len(),
                layout.prep_sites()
            ),
        ));
    }
    let cfg = &pipe.prep;
    let elapsed = pipe.cycle_time(with_rearrangement);
    let birth = start + elapsed;
    let occ = parity_project(counts, cfg, rng);
    let loaded = occ.iter().filter(|&&o| o > 0).count();
    let img = image(&occ, cfg, rng)?;
    let detected = img.detections.iter().filter(|&&d| d).count();
    let survived_imaging = img.occupancy.iter().filter(|&&o| o > 0).count();

    let mut new_atom = |row: usize, col: usize| {
        let id = *next_id;
        *next_id += 1;
        AtomRecord::new(
            id,
            birth,
            Site {
                zone: Zone::Prep,
                row: row as u16,
                col: col as u16,
            },
        )
    };

    let mut atoms = Vec::new();
    let targets = if with_rearrangement {
        let grid =
            OccupancyGrid::from_cells(layout.prep_rows, layout.prep_cols, img.detections.clone())?;
        let present = OccupancyGrid::from_cells(
            layout.prep_rows,
            layout.prep_cols,
            img.occupancy.iter().map(|&o| o > 0).collect(),
        )?;
        let plan = plan_array(
            &grid,
            layout,
            &pipe.rearrange.timing,
            &pipe.table,
            pipe.rearrange.storage_roi,
        )?;
        let out = execute_plan(&plan, &present, pipe.rearrange.move_survival, rng)?;
        let per_row = plan.targets_per_row;
        for (i, &f) in out.filled.iter().enumerate() {
            if f {
                atoms.push(new_atom(i / per_row, plan.target_columns[i % per_row]));
            }
        }
        Some(out)
    } else {
        for (i, &o) in img.occupancy.iter().enumerate() {
            if o > 0 && atoms.len() < cfg.batch_size {
                atoms.push(new_atom(i / layout.prep_cols, i % layout.prep_cols));
            }
        }
        None
    };
    initialize_qubits(&mut atoms, cfg, rng);
    Ok(PreparedBatch {
        atoms,
        loaded,
        detected,
        survived_imaging,
        targets,
        elapsed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::Poisson;

    fn rng(stream: u64) -> SeededRng {
        SeededRng::new(2024, stream)
    }

    fn pure() -> PrepConfig {
        PrepConfig {
            double_residual: 0.0,
            ..PrepConfig::default()
        }
    }

    #[test]
    fn parity_trivial_counts() {
        let mut r = rng(0);
        assert_eq!(
            parity_project(&[0, 1, 2, 3, 4], &pure(), &mut r),
            vec![0, 1, 0, 1, 0]
        );
    }

    #[test]
    fn parity_matches_odd_poisson_sum() {
        for (k, &mu) in [0.5f64, 1.0, 2.0, 5.0].iter().enumerate() {
            let mut r = rng(k as u64);
            let n = 200_000;
            let pois = Poisson::new(mu).unwrap();
            let counts: Vec<u32> = (0..n).map(|_| pois.sample(&mut r) as u32).collect();
            let occ = parity_project(&counts, &pure(), &mut r);
            let frac = occ.iter().filter(|&&o| o == 1).count() as f64 / n as f64;
            // Σ_k e^{-μ} μ^{2k+1}/(2k+1)! summed term by term
            let mut term = (-mu).exp() * mu;
            let mut oracle = 0.0;
            for j in 0..200 {
                oracle += term;
                let m = 2 * j + 1;
                term *= mu * mu / ((m + 1) * (m + 2)) as f64;
            }
            let sd = (oracle * (1.0 - oracle) / n as f64).sqrt();
            assert!(
                (frac - oracle).abs() < 3.0 * sd,
                "mu={mu}: {frac} vs {oracle}"
            );
        }
    }

    #[test]
    fn residual_doubles_only_from_even_counts() {
        let cfg = PrepConfig {
            double_residual: 0.3,
            ..PrepConfig::default()
        };
        let mut r = rng(9);
        let counts: Vec<u32> = (0..50_000).map(|i| (i % 6) as u32).collect();
        let occ = parity_project(&counts, &cfg, &mut r);
        for (c, o) in counts.iter().zip(&occ) {
            match c {
                0 => assert_eq!(*o, 0),
                c if c % 2 == 1 => assert_eq!(*o, 1),
                _ => assert!(*o == 0 || *o == 2),
            }
        }
        let evens = counts.iter().filter(|&&c| c >= 2 && c % 2 == 0).count() as f64;
        let doubles = occ.iter().filter(|&&o| o == 2).count() as f64;
        let sd = (0.3 * 0.7 / evens).sqrt();
        assert!((doubles / evens - 0.3).abs() < 4.0 * sd);
    }

    #[test]
    fn imaging_false_positives() {
        let mut r = rng(1);
        let n = 2_000_000;
        let out = image(&vec![0u8; n], &PrepConfig::default(), &mut r).unwrap();
        let fp = out.detections.iter().filter(|&&d| d).count() as f64;
        let mean = n as f64 * 1e-4;
        assert!((fp - mean).abs() < 4.0 * mean.sqrt(), "{fp}");
        assert!(out.occupancy.iter().all(|&o| o == 0));
    }

    #[test]
    fn imaging_survival_mean() {
        let mut r = rng(2);
        let trials = 400;
        let mut survivors = 0;
        for _ in 0..trials {
            let out = image(&vec![1u8; 1000], &PrepConfig::default(), &mut r).unwrap();
            survivors += out.occupancy.iter().filter(|&&o| o == 1).count();
        }
        let mean = survivors as f64 / trials as f64;
        let sd = (1000.0 * 0.995 * 0.005 / trials as f64).sqrt();
        assert!((mean - 995.0).abs() < 4.0 * sd, "{mean}");
    }

    #[test]
    fn perfect_imaging_is_identity() {
        let cfg = PrepConfig {
            discriminant_fidelity_site: 1.0,
            imaging_survival: 1.0,
            ..PrepConfig::default()
        };
        let mut r = rng(3);
        let occ: Vec<u8> = (0..1000).map(|i| (i % 3 == 0) as u8).collect();
        let out = image(&occ, &cfg, &mut r).unwrap();
        assert_eq!(out.occupancy, occ);
        assert!(out.detections.iter().zip(&occ).all(|(d, o)| *d == (*o > 0)));
    }

    #[test]
    fn parking_penalty_applies_when_off() {
        let cfg = PrepConfig {
            lattice_parking: false,
            ..PrepConfig::default()
        };
        assert!((cfg.effective_imaging_survival() - 0.995 * 0.95).abs() < 1e-12);
        assert_eq!(PrepConfig::default().effective_imaging_survival(), 0.995);
    }

    #[test]
    fn pump_success_cases() {
        assert_eq!(PrepConfig::default().pump_success(), 0.981);
        let zero = PrepConfig {
            pump_duration: Micros::ZERO,
            ..PrepConfig::default()
        };
        assert_eq!(zero.pump_success(), 0.0);
        let short = PrepConfig {
            pump_duration: Micros(5),
            spam_fidelity: 1.0,
            ..PrepConfig::default()
        };
        assert!((short.pump_success() - (1.0 - (-1f64).exp())).abs() < 1e-12);

        let site = Site {
            zone: Zone::Prep,
            row: 0,
            col: 0,
        };
        let mut atoms: Vec<AtomRecord> = (0..100)
            .map(|i| AtomRecord::new(i, Micros::ZERO, site))
            .collect();
        initialize_qubits(&mut atoms, &zero, &mut rng(4));
        assert!(atoms
            .iter()
            .all(|a| a.internal == InternalState::Unpolarized));
    }

    #[test]
    fn trap_frequencies() {
        let t = TrapModel::default();
        let fr = t.omega_radial() / (2.0 * std::f64::consts::PI);
        let fz = t.omega_axial() / (2.0 * std::f64::consts::PI);
        assert!((fr / 74.9e3 - 1.0).abs() < 0.01, "{fr}");
        assert!((fz / 17.9e3 - 1.0).abs() < 0.01, "{fz}");
        assert!((t.potential([0.0; 3]) + t.depth_joules()).abs() < 1e-40);
    }

    #[test]
    fn drop_recapture_basics() {
        let times: Vec<f64> = (0..=10).map(|k| 5.0 * k as f64).collect();
        let curve =
            drop_recapture(12e-6, &TrapModel::default(), &times, 20_000, &mut rng(5)).unwrap();
        assert_eq!(curve[0], 1.0);
        for w in curve.windows(2) {
            assert!(w[1] <= w[0], "{curve:?}");
        }
        assert!(curve[10] < 0.5);
        assert!(drop_recapture(0.0, &TrapModel::default(), &times, 10, &mut rng(5)).is_err());
    }

    #[test]
    fn temperature_round_trip() {
        let trap = TrapModel::default();
        let times: Vec<f64> = (0..=12).map(|k| 4.0 * k as f64).collect();
        let mut r = SeededRng::for_module(99, 0, Module::DropRecapture);
        let measured = drop_recapture(12e-6, &trap, &times, 20_000, &mut r).unwrap();
        let t = fit_temperature(&times, &measured, &trap, 20_000, 7).unwrap();
        assert!((t / 12e-6 - 1.0).abs() < 0.15, "{t}");
    }

    #[test]
    fn prep_cycle_timing() {
        let pipe = PrepPipeline::new(
            PrepConfig::default(),
            RearrangeConfig::default(),
            ZoneLayout::default(),
        )
        .unwrap();
        assert_eq!(pipe.cycle_time(false), Micros(20_000));
        assert_eq!(pipe.cycle_time(true), Micros(40_000));
        let sum: u64 = pipe.prep.stages(None).iter().map(|s| s.1 .0).sum();
        assert_eq!(sum, 20_000);
    }

    #[test]
    fn empty_load_gives_empty_batch() {
        let pipe = PrepPipeline::new(
            PrepConfig::default(),
            RearrangeConfig::default(),
            ZoneLayout::default(),
        )
        .unwrap();
        let mut id = 0;
        let b = prep_cycle(
            &vec![0; 1440],
            false,
            &pipe,
            Micros::ZERO,
            &mut id,
            &mut rng(6),
        )
        .unwrap();
        assert_eq!(b.loaded, 0);
        assert_eq!(b.elapsed, Micros(20_000));
        let b = prep_cycle(
            &vec![0; 1440],
            true,
            &pipe,
            Micros::ZERO,
            &mut id,
            &mut rng(6),
        )
        .unwrap();
        assert_eq!(b.qubits(), 0);
        assert_eq!(b.elapsed, Micros(40_000));
    }

    #[test]
    fn batch_is_capped() {
        let pipe = PrepPipeline::new(
            PrepConfig::default(),
            RearrangeConfig::default(),
            ZoneLayout::default(),
        )
        .unwrap();
        let mut id = 0;
        let b = prep_cycle(
            &vec![1; 1440],
            false,
            &pipe,
            Micros::ZERO,
            &mut id,
            &mut rng(7),
        )
        .unwrap();
        assert_eq!(b.qubits(), 600);
        assert_eq!(id, 600);
        assert!(b.atoms.iter().all(|a| a.birth_time == Micros(20_000)));
    }

    proptest::proptest! {
        #[test]
        fn imaging_never_creates_atoms(seed in 0u64..500, p in 0.0f64..1.0) {
            let mut r = SeededRng::new(seed, 1);
            let occ: Vec<u8> = (0..500).map(|_| r.random_bool(p) as u8).collect();
            let out = image(&occ, &PrepConfig::default(), &mut r).unwrap();
            for (a, b) in occ.iter().zip(&out.occupancy) {
                proptest::prop_assert!(b <= a);
            }
        }
    }
}
