//! Qubit coherence: environment-dependent T1/T2, pulses, XY16 decoupling,
//! mF leakage and the contrast / readout-probability estimators.
//!
//! Bloch convention: +z is |0⟩, −z is |1⟩. T1 relaxes z toward 0 at a rate
//! chosen by the sign of z, T2 shrinks the transverse components.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::atom::{AtomRecord, InternalState};
use crate::clock::Micros;
use crate::error::{check_probability, invalid, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvFlags {
    pub mot_on: bool,
    pub prep_imaging_on: bool,
    pub lattice_present: bool,
    pub shielding_on: bool,
    pub raman_drive_on: bool,
}

impl EnvFlags {
    pub const REFERENCE: EnvFlags = EnvFlags {
        mot_on: false,
        prep_imaging_on: false,
        lattice_present: false,
        shielding_on: false,
        raman_drive_on: false,
    };
    pub const MOT: EnvFlags = EnvFlags {
        mot_on: true,
        ..Self::REFERENCE
    };
    pub const LATTICE: EnvFlags = EnvFlags {
        lattice_present: true,
        ..Self::REFERENCE
    };
    pub const UNSHIELDED: EnvFlags = EnvFlags {
        prep_imaging_on: true,
        lattice_present: true,
        ..Self::REFERENCE
    };
    /// Storage conditions during continuous operation.
    pub const SHIELDED: EnvFlags = EnvFlags {
        prep_imaging_on: true,
        lattice_present: true,
        shielding_on: true,
        ..Self::REFERENCE
    };

    pub fn all() -> impl Iterator<Item = EnvFlags> {
        (0u8..32).map(|b| EnvFlags {
            mot_on: b & 1 != 0,
            prep_imaging_on: b & 2 != 0,
            lattice_present: b & 4 != 0,
            shielding_on: b & 8 != 0,
            raman_drive_on: b & 16 != 0,
        })
    }

    /// Named conditions used by the coherence scans.
    pub fn named() -> [(&'static str, EnvFlags); 5] {
        [
            ("reference", Self::REFERENCE),
            ("mot", Self::MOT),
            ("lattice", Self::LATTICE),
            ("unshielded", Self::UNSHIELDED),
            ("shielded", Self::SHIELDED),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShieldingConfig {
    /// Autler-Townes splitting (Hz, angular factor dropped).
    pub delta_at: f64,
    /// Detuning of the offending cooling/imaging light (Hz).
    pub delta_cool: f64,
}

impl Default for ShieldingConfig {
    fn default() -> Self {
        Self {
            delta_at: 10e9,
            delta_cool: 60e6,
        }
    }
}

impl ShieldingConfig {
    pub fn suppression(&self) -> f64 {
        (self.delta_at / self.delta_cool).powi(2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DDSequence {
    pub n_pi_pulses: usize,
    /// π-pulse spacing 2τ.
    pub pulse_spacing: Micros,
    pub pi_pulse_duration: f64,
    pub per_pulse_fidelity: f64,
    /// Relative Gaussian rotation-angle error (standard deviation).
    pub amplitude_jitter: f64,
}

impl Default for DDSequence {
    fn default() -> Self {
        Self {
            n_pi_pulses: 64,
            pulse_spacing: Micros(1_100),
            pi_pulse_duration: 0.5e-6,
            per_pulse_fidelity: 0.99995,
            amplitude_jitter: 0.0,
        }
    }
}

impl DDSequence {
    pub fn validate(&self) -> Result<()> {
        if !self.n_pi_pulses.is_multiple_of(16) {
            return Err(invalid("dd.n_pi_pulses", "must be a multiple of 16"));
        }
        if self.pulse_spacing == Micros::ZERO {
            return Err(invalid("dd.pulse_spacing", "must be > 0"));
        }
        check_probability("dd.per_pulse_fidelity", self.per_pulse_fidelity)?;
        if !(self.amplitude_jitter >= 0.0) {
            return Err(invalid("dd.amplitude_jitter", "must be ≥ 0"));
        }
        Ok(())
    }

    pub fn duration(&self) -> Micros {
        Micros(self.pulse_spacing.0 * self.n_pi_pulses as u64)
    }

    /// Fraction of a reload cycle spent in superposition.
    pub fn duty(&self, cycle_period: Micros) -> f64 {
        self.duration().0 as f64 / cycle_period.0 as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoherenceConfig {
    pub t2_reference: f64,
    pub t2_mot: f64,
    pub t2_shielded_prep: f64,
    pub t2_unshielded_prep: f64,
    pub t1_ref_q1: f64,
    pub t1_shielded_q1: f64,
    /// T1 with only the lattice on.
    pub t1_lattice_q1: f64,
    /// Q0 T1 times are this multiple of the Q1 times.
    pub q0_t1_factor: f64,
    /// T1 from Raman scattering while the qubit drive is on.
    pub raman_scatter_t1: f64,
    pub mf_leak_rate: f64,
    pub shielding: ShieldingConfig,
}

impl Default for CoherenceConfig {
    fn default() -> Self {
        Self {
            t2_reference: 1.34,
            t2_mot: 1.15,
            t2_shielded_prep: 1.09,
            t2_unshielded_prep: 0.02,
            t1_ref_q1: 12.6,
            t1_shielded_q1: 3.43,
            t1_lattice_q1: 3.45,
            q0_t1_factor: 2.0,
            raman_scatter_t1: 0.01,
            mf_leak_rate: 0.075,
            shielding: ShieldingConfig::default(),
        }
    }
}

/// Decay rates (1/s) of one source, T1 given for Q1.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SourceRate {
    pub gamma1: f64,
    pub gamma2: f64,
}

/// Per-source decay rates derived from the configured totals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SourceTable {
    pub baseline: SourceRate,
    pub mot: SourceRate,
    /// Unshielded prep imaging.
    pub prep: SourceRate,
    pub lattice: SourceRate,
    pub raman: SourceRate,
    pub suppression: f64,
}

impl CoherenceConfig {
    pub fn validate(&self) -> Result<()> {
        let times = [
            ("coherence.t2_reference", self.t2_reference),
            ("coherence.t2_mot", self.t2_mot),
            ("coherence.t2_shielded_prep", self.t2_shielded_prep),
            ("coherence.t2_unshielded_prep", self.t2_unshielded_prep),
            ("coherence.t1_ref_q1", self.t1_ref_q1),
            ("coherence.t1_shielded_q1", self.t1_shielded_q1),
            ("coherence.t1_lattice_q1", self.t1_lattice_q1),
            ("coherence.q0_t1_factor", self.q0_t1_factor),
            ("coherence.raman_scatter_t1", self.raman_scatter_t1),
        ];
        for (name, t) in times {
            if !(t > 0.0) {
                return Err(invalid(name, format!("must be > 0, got {t}")));
            }
        }
        check_probability("coherence.mf_leak_rate", self.mf_leak_rate)?;
        if !(self.shielding.suppression() > 1.0) {
            return Err(invalid("coherence.shielding", "suppression must exceed 1"));
        }
        self.sources().map(|_| ())
    }

    /// Splits the configured totals into additive sources. The lattice and
    /// prep-imaging terms are solved so the shielded and unshielded totals are
    /// reproduced exactly; a negative residual means inconsistent inputs.
    pub fn sources(&self) -> Result<SourceTable> {
        let s = self.shielding.suppression();
        let base2 = 1.0 / self.t2_reference;
        let mot2 = 1.0 / self.t2_mot - base2;
        let prep2 = (1.0 / self.t2_unshielded_prep - 1.0 / self.t2_shielded_prep) / (1.0 - 1.0 / s);
        let lat2 = 1.0 / self.t2_shielded_prep - base2 - prep2 / s;
        let base1 = 1.0 / self.t1_ref_q1;
        let lat1 = 1.0 / self.t1_lattice_q1 - base1;
        let prep1 = (1.0 / self.t1_shielded_q1 - 1.0 / self.t1_lattice_q1) * s;
        for (name, v) in [
            ("coherence.t2_mot", mot2),
            ("coherence.t2_unshielded_prep", prep2),
            ("coherence.t2_shielded_prep", lat2),
            ("coherence.t1_lattice_q1", lat1),
            ("coherence.t1_shielded_q1", prep1),
        ] {
            if v < 0.0 {
                return Err(invalid(
                    name,
                    format!("implies a negative decay rate ({v:.4e}/s)"),
                ));
            }
        }
        let raman = 1.0 / self.raman_scatter_t1;
        Ok(SourceTable {
            baseline: SourceRate {
                gamma1: base1,
                gamma2: base2,
            },
            mot: SourceRate {
                gamma1: 0.0,
                gamma2: mot2,
            },
            prep: SourceRate {
                gamma1: prep1,
                gamma2: prep2,
            },
            lattice: SourceRate {
                gamma1: lat1,
                gamma2: lat2,
            },
            raman: SourceRate {
                gamma1: raman,
                gamma2: 0.5 * raman,
            },
            suppression: s,
        })
    }
}

/// Effective decay rates (1/s) in one environment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub gamma1_q0: f64,
    pub gamma1_q1: f64,
    pub gamma2: f64,
}

impl Rates {
    pub fn t1_q0(&self) -> f64 {
        1.0 / self.gamma1_q0
    }

    pub fn t1_q1(&self) -> f64 {
        1.0 / self.gamma1_q1
    }

    pub fn t2(&self) -> f64 {
        1.0 / self.gamma2
    }

    pub fn noiseless() -> Self {
        Self {
            gamma1_q0: 0.0,
            gamma1_q1: 0.0,
            gamma2: 0.0,
        }
    }
}

pub fn active_rates(env: EnvFlags, cfg: &CoherenceConfig) -> Result<Rates> {
    let t = cfg.sources()?;
    let mut g = t.baseline;
    let mut add = |r: SourceRate, scale: f64| {
        g.gamma1 += r.gamma1 * scale;
        g.gamma2 += r.gamma2 * scale;
    };
    if env.mot_on {
        add(t.mot, 1.0);
    }
    if env.prep_imaging_on {
        add(
            t.prep,
            if env.shielding_on {
                1.0 / t.suppression
            } else {
                1.0
            },
        );
    }
    if env.lattice_present {
        add(t.lattice, 1.0);
    }
    if env.raman_drive_on {
        add(t.raman, 1.0);
    }
    Ok(Rates {
        gamma1_q0: g.gamma1 / cfg.q0_t1_factor,
        gamma1_q1: g.gamma1,
        gamma2: g.gamma2,
    })
}

/// Free evolution for `dt` seconds. Atoms outside the qubit subspace are untouched.
pub fn decay(atom: &mut AtomRecord, dt: f64, rates: &Rates) {
    if !atom.in_qubit_subspace() || dt == 0.0 {
        return;
    }
    let f2 = (-dt * rates.gamma2).exp();
    let g1 = if atom.bloch[2] >= 0.0 {
        rates.gamma1_q0
    } else {
        rates.gamma1_q1
    };
    atom.bloch[0] *= f2;
    atom.bloch[1] *= f2;
    atom.bloch[2] *= (-dt * g1).exp();
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PulseKind {
    Pi,
    HalfPi,
}

impl PulseKind {
    pub fn angle(self) -> f64 {
        match self {
            PulseKind::Pi => std::f64::consts::PI,
            PulseKind::HalfPi => std::f64::consts::FRAC_PI_2,
        }
    }
}

fn rotate(v: [f64; 3], phase: f64, angle: f64) -> [f64; 3] {
    rotate_trig(v, phase.sin_cos(), angle.sin_cos())
}

/// Rodrigues rotation about n = (cos φ, sin φ, 0), given (sin φ, cos φ) and (sin θ, cos θ).
fn rotate_trig(v: [f64; 3], (ny, nx): (f64, f64), (s, c): (f64, f64)) -> [f64; 3] {
    let dot = nx * v[0] + ny * v[1];
    // n × v
    let cross = [ny * v[2], -nx * v[2], nx * v[1] - ny * v[0]];
    [
        v[0] * c + cross[0] * s + nx * dot * (1.0 - c),
        v[1] * c + cross[1] * s + ny * dot * (1.0 - c),
        v[2] * c + cross[2] * s,
    ]
}

/// Rotation by `angle` (signed) about the in-plane axis at `phase`, followed
/// by full depolarization with probability `1 − fidelity`.
pub fn apply_rotation<R: Rng + ?Sized>(
    atom: &mut AtomRecord,
    angle: f64,
    phase: f64,
    fidelity: f64,
    jitter: f64,
    rng: &mut R,
) {
    if !atom.in_qubit_subspace() {
        return;
    }
    let angle = if jitter > 0.0 {
        angle * (1.0 + Normal::new(0.0, jitter).unwrap().sample(rng))
    } else {
        angle
    };
    atom.bloch = if fidelity < 1.0 && !rng.random_bool(fidelity) {
        [0.0; 3]
    } else {
        rotate(atom.bloch, phase, angle)
    };
    atom.relabel();
}

pub fn apply_pulse<R: Rng + ?Sized>(
    atom: &mut AtomRecord,
    kind: PulseKind,
    phase: f64,
    fidelity: f64,
    rng: &mut R,
) {
    apply_rotation(atom, kind.angle(), phase, fidelity, 0.0, rng);
}

/// Phases of one XY16 block.
pub const XY16: [f64; 16] = {
    use std::f64::consts::{FRAC_PI_2 as Y, PI as MX};
    const X: f64 = 0.0;
    const MY: f64 = 3.0 * Y;
    [X, Y, X, Y, Y, X, Y, X, MX, MY, MX, MY, MY, MX, MY, MX]
};

static XY16_TRIG: std::sync::LazyLock<[(f64, f64); 16]> =
    std::sync::LazyLock::new(|| XY16.map(f64::sin_cos));

/// Transverse decay rate to use between pulses so that the net 1/e time of a
/// decoupled qubit, pulse errors included, equals `1/gamma2`.
pub fn inter_pulse_gamma2(rates: &Rates, seq: &DDSequence) -> Result<f64> {
    let per_pulse = -seq.per_pulse_fidelity.ln() / (seq.pulse_spacing.0 as f64 * 1e-6);
    let g = rates.gamma2 - per_pulse;
    if g < 0.0 {
        return Err(invalid(
            "dd.per_pulse_fidelity",
            "pulse errors alone decohere faster than the configured T2",
        ));
    }
    Ok(g)
}

/// Runs `pulses` π-pulses of the XY16 pattern starting at pattern index
/// `offset`, with τ of free evolution either side of each pulse.
pub fn dd_pulses<R: Rng + ?Sized>(
    atoms: &mut [AtomRecord],
    seq: &DDSequence,
    rates: &Rates,
    offset: usize,
    pulses: usize,
    rng: &mut R,
) -> Result<()> {
    let tau = 0.5 * seq.pulse_spacing.0 as f64 * 1e-6;
    let f2 = (-tau * inter_pulse_gamma2(rates, seq)?).exp();
    let f1 = [
        (-tau * rates.gamma1_q0).exp(),
        (-tau * rates.gamma1_q1).exp(),
    ];
    let free = |v: &mut [f64; 3]| {
        v[0] *= f2;
        v[1] *= f2;
        v[2] *= if v[2] >= 0.0 { f1[0] } else { f1[1] };
    };
    let fid = seq.per_pulse_fidelity;
    let jitter =
        (seq.amplitude_jitter > 0.0).then(|| Normal::new(0.0, seq.amplitude_jitter).unwrap());
    let (s_pi, c_pi) = std::f64::consts::PI.sin_cos();
    for atom in atoms.iter_mut().filter(|a| a.in_qubit_subspace()) {
        let mut v = atom.bloch;
        for p in offset..offset + pulses {
            free(&mut v);
            if fid < 1.0 && !rng.random_bool(fid) {
                v = [0.0; 3];
            } else {
                let trig = match &jitter {
                    Some(n) => (std::f64::consts::PI * (1.0 + n.sample(rng))).sin_cos(),
                    None => (s_pi, c_pi),
                };
                v = rotate_trig(v, XY16_TRIG[p % 16], trig);
            }
            free(&mut v);
        }
        atom.bloch = v;
        atom.relabel();
    }
    Ok(())
}

/// X(π/2), the full XY16 train, then X(final_phase): −π/2 maps back to |0⟩,
/// +π/2 to |1⟩. Returns the time spent in superposition.
pub fn dd_reload_cycle<R: Rng + ?Sized>(
    atoms: &mut [AtomRecord],
    seq: &DDSequence,
    rates: &Rates,
    final_angle: f64,
    rng: &mut R,
) -> Result<Micros> {
    seq.validate()?;
    let f = seq.per_pulse_fidelity;
    for atom in atoms.iter_mut() {
        apply_rotation(
            atom,
            std::f64::consts::FRAC_PI_2,
            0.0,
            f,
            seq.amplitude_jitter,
            rng,
        );
    }
    dd_pulses(atoms, seq, rates, 0, seq.n_pi_pulses, rng)?;
    for atom in atoms.iter_mut() {
        apply_rotation(atom, final_angle, 0.0, f, seq.amplitude_jitter, rng);
    }
    Ok(seq.duration())
}

/// AOD transport leakage: each Q0 atom goes to mF = ±1 with probability `rate`.
pub fn mf_leak<R: Rng + ?Sized>(atoms: &mut [AtomRecord], rate: f64, rng: &mut R) -> Result<usize> {
    let p = check_probability("mf_leak_rate", rate)?;
    let mut n = 0;
    if p == 0.0 {
        return Ok(0);
    }
    for atom in atoms.iter_mut().filter(|a| a.internal == InternalState::Q0) {
        if rng.random_bool(p) {
            atom.internal = InternalState::MfLeaked;
            atom.bloch = [0.0; 3];
            n += 1;
        }
    }
    Ok(n)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReadoutCounts {
    pub p0: f64,
    pub p1: f64,
    pub pa: f64,
    pub pmf: f64,
}

impl ReadoutCounts {
    pub fn validate(&self) -> Result<()> {
        check_probability("p0", self.p0)?;
        check_probability("p1", self.p1)?;
        check_probability("pa", self.pa)?;
        check_probability("pmf", self.pmf)?;
        if !(self.pa > self.pmf) {
            return Err(Error::Degenerate {
                pa: self.pa,
                pmf: self.pmf,
            });
        }
        Ok(())
    }
}

/// (P0 − P1) / (Pa − Pmf)
pub fn contrast(c: &ReadoutCounts) -> Result<f64> {
    c.validate()?;
    Ok((c.p0 - c.p1) / (c.pa - c.pmf))
}

/// (P0 − Pmf) / (Pa − Pmf)
pub fn readout_probability(c: &ReadoutCounts) -> Result<f64> {
    c.validate()?;
    Ok((c.p0 - c.pmf) / (c.pa - c.pmf))
}

/// Probabilities of being found bright in the |0⟩ and |1⟩ readouts.
/// Leaked atoms stay in F=1 and are bright in both; unpolarized atoms are
/// bright half the time in each.
fn bright_probabilities(a: &AtomRecord) -> (f64, f64) {
    match a.internal {
        InternalState::Q0 | InternalState::Q1 => {
            (0.5 * (1.0 + a.bloch[2]), 0.5 * (1.0 - a.bloch[2]))
        }
        InternalState::MfLeaked => (1.0, 1.0),
        InternalState::Unpolarized => (0.5, 0.5),
        InternalState::Lost => (0.0, 0.0),
    }
}

/// Ensemble expectation, normalised to the number of records (lost included).
pub fn readout_expectation(atoms: &[AtomRecord]) -> ReadoutCounts {
    let n = atoms.len().max(1) as f64;
    let mut c = ReadoutCounts::default();
    for a in atoms {
        let (b0, b1) = bright_probabilities(a);
        c.p0 += b0;
        c.p1 += b1;
        c.pa += (!a.is_lost()) as u8 as f64;
        c.pmf += (a.internal == InternalState::MfLeaked) as u8 as f64;
    }
    c.p0 /= n;
    c.p1 /= n;
    c.pa /= n;
    c.pmf /= n;
    c
}

/// Shot-sampled readout: independent |0⟩ and |1⟩ shots per atom.
pub fn readout_sample<R: Rng + ?Sized>(atoms: &[AtomRecord], rng: &mut R) -> ReadoutCounts {
    let n = atoms.len().max(1) as f64;
    let mut c = ReadoutCounts::default();
    for a in atoms {
        let (b0, b1) = bright_probabilities(a);
        c.p0 += rng.random_bool(b0.clamp(0.0, 1.0)) as u8 as f64;
        c.p1 += rng.random_bool(b1.clamp(0.0, 1.0)) as u8 as f64;
        c.pa += (!a.is_lost()) as u8 as f64;
        c.pmf += (a.internal == InternalState::MfLeaked) as u8 as f64;
    }
    c.p0 /= n;
    c.p1 /= n;
    c.pa /= n;
    c.pmf /= n;
    c
}

/// Least-squares fit of `A·exp(−t/T)`; returns T in the units of `t`.
/// Starts from a log-linear fit, then runs damped Gauss-Newton.
pub fn fit_1e_time(series: &[(f64, f64)]) -> Result<f64> {
    fit_exponential(series).map(|(_, t)| t)
}

/// Like [`fit_1e_time`] but also returns the amplitude.
pub fn fit_exponential(series: &[(f64, f64)]) -> Result<(f64, f64)> {
    if series.len() < 4 {
        return Err(invalid("series", "needs at least 4 points"));
    }
    if series.iter().any(|&(t, y)| !(y > 0.0) || !t.is_finite()) {
        return Err(invalid("series", "values must be positive and finite"));
    }
    // log-linear start
    let n = series.len() as f64;
    let (st, sl) = series
        .iter()
        .fold((0.0, 0.0), |(a, b), &(t, y)| (a + t, b + y.ln()));
    let (mt, ml) = (st / n, sl / n);
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for &(t, y) in series {
        sxy += (t - mt) * (y.ln() - ml);
        sxx += (t - mt) * (t - mt);
    }
    if sxx == 0.0 {
        return Err(Error::NonConvergence("all sample times are equal".into()));
    }
    let mut k = -sxy / sxx;
    let mut a = (ml + k * mt).exp();
    let sse = |a: f64, k: f64| {
        series
            .iter()
            .map(|&(t, y)| (y - a * (-k * t).exp()).powi(2))
            .sum::<f64>()
    };
    let mut cost = sse(a, k);
    let mut lambda = 1e-3;
    for _ in 0..500 {
        // J^T J and J^T r for the parameters (a, k)
        let (mut jaa, mut jak, mut jkk, mut ga, mut gk) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(t, y) in series {
            let e = (-k * t).exp();
            let r = y - a * e;
            let da = e;
            let dk = -a * t * e;
            jaa += da * da;
            jak += da * dk;
            jkk += dk * dk;
            ga += da * r;
            gk += dk * r;
        }
        let mut improved = false;
        for _ in 0..30 {
            let (m11, m22) = (jaa * (1.0 + lambda), jkk * (1.0 + lambda));
            let det = m11 * m22 - jak * jak;
            if det == 0.0 || !det.is_finite() {
                lambda *= 10.0;
                continue;
            }
            let step_a = (m22 * ga - jak * gk) / det;
            let step_k = (m11 * gk - jak * ga) / det;
            let (na, nk) = (a + step_a, k + step_k);
            let nc = sse(na, nk);
            if nc.is_finite() && nc <= cost {
                let done = (step_k.abs() <= 1e-13 * nk.abs().max(1e-300))
                    && (step_a.abs() <= 1e-13 * na.abs());
                a = na;
                k = nk;
                let small = cost - nc <= 1e-15 * cost.max(1e-300);
                cost = nc;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                if done || small {
                    return finish(a, k);
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            return finish(a, k);
        }
    }
    Err(Error::NonConvergence("iteration limit reached".into()))
}

fn finish(a: f64, k: f64) -> Result<(f64, f64)> {
    if !(k > 0.0) || !k.is_finite() || !a.is_finite() {
        return Err(Error::NonConvergence(format!(
            "decay rate {k} is not positive"
        )));
    }
    Ok((a, 1.0 / k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atom::{Site, Zone};
    use crate::rng::SeededRng;

    fn atom() -> AtomRecord {
        AtomRecord::new(
            0,
            Micros::ZERO,
            Site {
                zone: Zone::Storage,
                row: 0,
                col: 0,
            },
        )
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1e-300)
    }

    #[test]
    fn named_environments() {
        let cfg = CoherenceConfig::default();
        let r = active_rates(EnvFlags::REFERENCE, &cfg).unwrap();
        assert!(close(r.t2(), 1.34, 1e-12) && close(r.t1_q1(), 12.6, 1e-12));
        assert!(close(
            active_rates(EnvFlags::MOT, &cfg).unwrap().t2(),
            1.15,
            1e-12
        ));
        let s = active_rates(EnvFlags::SHIELDED, &cfg).unwrap();
        assert!(close(s.t2(), 1.09, 1e-12) && close(s.t1_q1(), 3.43, 1e-12));
        let u = active_rates(EnvFlags::UNSHIELDED, &cfg).unwrap();
        assert!(close(u.t2(), 0.02, 1e-12));
        assert!(close(
            active_rates(EnvFlags::LATTICE, &cfg).unwrap().t1_q1(),
            3.45,
            1e-12
        ));
        assert!(close(r.t1_q0(), 25.2, 1e-12));
    }

    #[test]
    fn suppression_exceeds_ten_thousand() {
        let s = ShieldingConfig::default().suppression();
        assert!(s > 10_000.0);
        assert!(close(s, (10e9f64 / 60e6).powi(2), 1e-12));
    }

    #[test]
    fn rates_are_additive_over_every_flag_set() {
        let cfg = CoherenceConfig::default();
        let base = active_rates(EnvFlags::REFERENCE, &cfg).unwrap();
        let single = |f: fn(&mut EnvFlags)| {
            let mut e = EnvFlags::REFERENCE;
            f(&mut e);
            let r = active_rates(e, &cfg).unwrap();
            (r.gamma1_q1 - base.gamma1_q1, r.gamma2 - base.gamma2)
        };
        let mot = single(|e| e.mot_on = true);
        let prep = single(|e| e.prep_imaging_on = true);
        let lat = single(|e| e.lattice_present = true);
        let ram = single(|e| e.raman_drive_on = true);
        let supp = cfg.shielding.suppression();
        for env in EnvFlags::all() {
            let r = active_rates(env, &cfg).unwrap();
            let mut g1 = base.gamma1_q1;
            let mut g2 = base.gamma2;
            for (on, d, scale) in [
                (env.mot_on, mot, 1.0),
                (
                    env.prep_imaging_on,
                    prep,
                    if env.shielding_on { 1.0 / supp } else { 1.0 },
                ),
                (env.lattice_present, lat, 1.0),
                (env.raman_drive_on, ram, 1.0),
            ] {
                if on {
                    g1 += d.0 * scale;
                    g2 += d.1 * scale;
                }
            }
            assert!(
                close(r.gamma1_q1, g1, 1e-12) && close(r.gamma2, g2, 1e-12),
                "{env:?}"
            );
            assert!(close(r.gamma1_q0 * cfg.q0_t1_factor, r.gamma1_q1, 1e-12));
        }
    }

    #[test]
    fn shielding_never_hurts() {
        let cfg = CoherenceConfig::default();
        for env in EnvFlags::all().filter(|e| e.prep_imaging_on) {
            let on = active_rates(
                EnvFlags {
                    shielding_on: true,
                    ..env
                },
                &cfg,
            )
            .unwrap();
            let off = active_rates(
                EnvFlags {
                    shielding_on: false,
                    ..env
                },
                &cfg,
            )
            .unwrap();
            assert!(on.t2() >= off.t2() && on.t1_q1() >= off.t1_q1());
        }
    }

    #[test]
    fn inconsistent_totals_are_rejected() {
        let cfg = CoherenceConfig {
            t1_lattice_q1: 3.0,
            ..CoherenceConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = CoherenceConfig {
            t2_mot: 2.0,
            ..CoherenceConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn decay_definitions() {
        let r = active_rates(EnvFlags::SHIELDED, &CoherenceConfig::default()).unwrap();
        let mut a = atom();
        decay(&mut a, 0.0, &r);
        assert_eq!(a.bloch, [0.0, 0.0, 1.0]);
        a.bloch = [1.0, 0.0, 0.0];
        decay(&mut a, r.t2(), &r);
        assert!(close(a.bloch_xy(), (-1f64).exp(), 1e-12));
    }

    #[test]
    fn decay_composes() {
        let r = active_rates(EnvFlags::UNSHIELDED, &CoherenceConfig::default()).unwrap();
        let mut rng = SeededRng::new(1, 0);
        for _ in 0..1000 {
            let v = [
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
            ];
            let (d1, d2) = (rng.random::<f64>(), rng.random::<f64>());
            let mut a = atom();
            a.bloch = v;
            let mut b = a;
            decay(&mut a, d1, &r);
            decay(&mut a, d2, &r);
            decay(&mut b, d1 + d2, &r);
            for i in 0..3 {
                assert!((a.bloch[i] - b.bloch[i]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn pulse_algebra() {
        let mut rng = SeededRng::new(2, 0);
        let mut a = atom();
        apply_pulse(&mut a, PulseKind::Pi, 0.0, 1.0, &mut rng);
        assert!(close(a.bloch_z(), -1.0, 1e-12));
        assert_eq!(a.internal, InternalState::Q1);
        for phase in [0.0, 0.7, 2.0] {
            let mut one = atom();
            one.bloch = [0.3, -0.4, 0.5];
            let mut two = one;
            apply_pulse(&mut one, PulseKind::Pi, phase, 1.0, &mut rng);
            apply_pulse(&mut two, PulseKind::HalfPi, phase, 1.0, &mut rng);
            apply_pulse(&mut two, PulseKind::HalfPi, phase, 1.0, &mut rng);
            for i in 0..3 {
                assert!((one.bloch[i] - two.bloch[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn half_pi_convention() {
        let mut rng = SeededRng::new(2, 0);
        let mut a = atom();
        apply_pulse(&mut a, PulseKind::HalfPi, 0.0, 1.0, &mut rng);
        assert!((a.bloch[1] + 1.0).abs() < 1e-12);
        let mut b = a;
        apply_rotation(
            &mut a,
            -std::f64::consts::FRAC_PI_2,
            0.0,
            1.0,
            0.0,
            &mut rng,
        );
        apply_rotation(&mut b, std::f64::consts::FRAC_PI_2, 0.0, 1.0, 0.0, &mut rng);
        assert!((a.bloch_z() - 1.0).abs() < 1e-12);
        assert!((b.bloch_z() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pulse_error_power_law() {
        let mut rng = SeededRng::new(3, 0);
        let n = 100_000;
        let f: f64 = 0.99995;
        let mut atoms: Vec<AtomRecord> = (0..n).map(|_| atom()).collect();
        for a in atoms.iter_mut() {
            a.bloch = [0.0, -1.0, 0.0];
        }
        for p in 0..64 {
            for a in atoms.iter_mut() {
                apply_rotation(a, std::f64::consts::PI, XY16[p % 16], f, 0.0, &mut rng);
            }
        }
        let mean = atoms.iter().map(|a| -a.bloch[1]).sum::<f64>() / n as f64;
        let expect = f.powi(64);
        assert!(close(expect, 0.9968, 1e-4));
        let sd = (expect * (1.0 - expect) / n as f64).sqrt();
        assert!((mean - expect).abs() < 4.0 * sd, "{mean}");
    }

    #[test]
    fn noiseless_dd_is_identity() {
        let mut rng = SeededRng::new(4, 0);
        let seq = DDSequence {
            per_pulse_fidelity: 1.0,
            ..DDSequence::default()
        };
        let mut atoms: Vec<AtomRecord> = (0..10).map(|_| atom()).collect();
        let dwell = dd_reload_cycle(
            &mut atoms,
            &seq,
            &Rates::noiseless(),
            -std::f64::consts::FRAC_PI_2,
            &mut rng,
        )
        .unwrap();
        assert_eq!(dwell, Micros(70_400));
        for a in &atoms {
            assert!((a.bloch_z() - 1.0).abs() < 1e-12);
            assert_eq!(a.internal, InternalState::Q0);
        }
        dd_reload_cycle(
            &mut atoms,
            &seq,
            &Rates::noiseless(),
            std::f64::consts::FRAC_PI_2,
            &mut rng,
        )
        .unwrap();
        assert!(atoms.iter().all(|a| a.internal == InternalState::Q1));
        assert!(close(seq.duty(Micros::from_ms(80)), 0.88, 1e-12));
    }

    #[test]
    fn dd_applies_configured_t2() {
        let mut rng = SeededRng::new(5, 0);
        let seq = DDSequence::default();
        let rates = active_rates(EnvFlags::SHIELDED, &CoherenceConfig::default()).unwrap();
        let mut atoms: Vec<AtomRecord> = (0..20_000).map(|_| atom()).collect();
        dd_reload_cycle(
            &mut atoms,
            &seq,
            &rates,
            -std::f64::consts::FRAC_PI_2,
            &mut rng,
        )
        .unwrap();
        let mean = atoms.iter().map(|a| a.bloch_z()).sum::<f64>() / atoms.len() as f64;
        let expect = (-0.0704 / 1.09f64).exp() * 0.99995f64.powi(2);
        assert!((mean - expect).abs() < 2e-3, "{mean} vs {expect}");
    }

    #[test]
    fn leak_fraction() {
        let mut rng = SeededRng::new(6, 0);
        let mut atoms: Vec<AtomRecord> = (0..100_000).map(|_| atom()).collect();
        assert_eq!(mf_leak(&mut atoms, 0.0, &mut rng).unwrap(), 0);
        let n = mf_leak(&mut atoms, 0.075, &mut rng).unwrap();
        assert!((n as f64 / 1e5 - 0.075).abs() < 0.003);
        assert!(mf_leak(&mut atoms, 1.5, &mut rng).is_err());
    }

    #[test]
    fn leaked_atoms_cancel_in_contrast() {
        let mut atoms: Vec<AtomRecord> = (0..100).map(|_| atom()).collect();
        for a in atoms.iter_mut().take(10) {
            a.internal = InternalState::MfLeaked;
            a.bloch = [0.0; 3];
        }
        let c = readout_expectation(&atoms);
        assert!(close(c.pmf, 0.1, 1e-12) && close(c.p0, 1.0, 1e-12) && close(c.p1, 0.1, 1e-12));
        assert!(close(contrast(&c).unwrap(), 1.0, 1e-12));
        assert!(close(readout_probability(&c).unwrap(), 1.0, 1e-12));
    }

    #[test]
    fn estimator_spot_checks() {
        let c = ReadoutCounts {
            p0: 0.90,
            p1: 0.10,
            pa: 0.95,
            pmf: 0.075,
        };
        assert_eq!(contrast(&c).unwrap(), 0.8 / 0.875);
        let r = ReadoutCounts { p0: 0.5, ..c };
        assert!((readout_probability(&r).unwrap() - 0.4857).abs() < 1e-4);
        let d = ReadoutCounts { pa: 0.075, ..c };
        assert!(matches!(contrast(&d), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn noiseless_fit_round_trip() {
        let s: Vec<(f64, f64)> = (0..30)
            .map(|i| (0.1 * i as f64, 0.97 * (-0.1 * i as f64 / 1.34).exp()))
            .collect();
        let t = fit_1e_time(&s).unwrap();
        assert!((t - 1.34).abs() < 1e-6, "{t}");
    }

    #[test]
    fn constant_series_does_not_converge() {
        let s: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 0.5)).collect();
        assert!(matches!(fit_1e_time(&s), Err(Error::NonConvergence(_))));
        assert!(fit_1e_time(&s[..3]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn bloch_norm_bounded(seed in 0u64..2000, steps in 1usize..40) {
            let mut rng = SeededRng::new(seed, 0);
            let r = active_rates(EnvFlags::UNSHIELDED, &CoherenceConfig::default()).unwrap();
            let mut a = atom();
            for _ in 0..steps {
                if rng.random_bool(0.5) {
                    decay(&mut a, rng.random::<f64>() * 0.01, &r);
                } else {
                    let angle = rng.random::<f64>() * 6.3;
                    let phase = rng.random::<f64>() * 6.3;
                    apply_rotation(&mut a, angle, phase, 0.999, 0.01, &mut rng);
                }
                proptest::prop_assert!(a.bloch_norm() <= 1.0 + 1e-12);
            }
        }

        #[test]
        fn estimator_algebra(p0 in 0.0f64..1.0, p1 in 0.0f64..1.0, pmf in 0.0f64..0.5, extra in 0.01f64..0.5) {
            let c = ReadoutCounts { p0, p1, pa: (pmf + extra).min(1.0), pmf };
            proptest::prop_assume!(c.pa > c.pmf);
            let r0 = readout_probability(&c).unwrap();
            let r1 = readout_probability(&ReadoutCounts { p0: p1, ..c }).unwrap();
            let k = contrast(&c).unwrap();
            proptest::prop_assert!((k - (r0 - r1)).abs() < 1e-12);
        }
    }
}
