//! Per-atom state and the exponential loss channel.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clock::Micros;
use crate::error::{check_probability, invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InternalState {
    /// Clock state |F=1, m_F=0>.
    Q0,
    /// Clock state |F=2, m_F=0>.
    Q1,
    /// Leaked into |F=1, m_F=±1> during AOD transport.
    MfLeaked,
    /// Optical pumping failed; population spread over Zeeman levels.
    Unpolarized,
    Lost,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Zone {
    Prep,
    Storage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Site {
    pub zone: Zone,
    pub row: u16,
    pub col: u16,
}

/// One trapped atom. The Bloch vector is stored in full (x, y, z) so pulse
/// phases compose correctly; `bloch_xy` is its transverse length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomRecord {
    pub id: u64,
    pub internal: InternalState,
    pub bloch: [f64; 3],
    pub birth_time: Micros,
    pub site: Site,
}

impl AtomRecord {
    /// A fresh atom pumped into |0>, i.e. Bloch vector +z.
    pub fn new(id: u64, birth_time: Micros, site: Site) -> Self {
        Self {
            id,
            internal: InternalState::Q0,
            bloch: [0.0, 0.0, 1.0],
            birth_time,
            site,
        }
    }

    pub fn bloch_z(&self) -> f64 {
        self.bloch[2]
    }

    pub fn bloch_xy(&self) -> f64 {
        self.bloch[0].hypot(self.bloch[1])
    }

    pub fn is_lost(&self) -> bool {
        self.internal == InternalState::Lost
    }

    /// True for atoms whose state is described by the Bloch vector.
    pub fn in_qubit_subspace(&self) -> bool {
        matches!(self.internal, InternalState::Q0 | InternalState::Q1)
    }

    pub(crate) fn relabel(&mut self) {
        if self.in_qubit_subspace() {
            self.internal = if self.bloch[2] >= 0.0 {
                InternalState::Q0
            } else {
                InternalState::Q1
            };
        }
    }

    pub fn bloch_norm(&self) -> f64 {
        let [x, y, z] = self.bloch;
        (x * x + y * y + z * z).sqrt()
    }
}

/// Tracks creation and loss so `created == present + lost` can be checked at any time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomLedger {
    pub created: u64,
    pub lost: u64,
}

impl AtomLedger {
    pub fn present(&self) -> u64 {
        self.created - self.lost
    }
}

/// Retention probability after `dt` for a 1/e lifetime in seconds.
pub fn survival_probability(dt: Micros, lifetime_s: f64) -> Result<f64> {
    if !(lifetime_s > 0.0) {
        return Err(invalid(
            "lifetime",
            format!("must be > 0, got {lifetime_s}"),
        ));
    }
    check_probability("survival", (-dt.as_secs_f64() / lifetime_s).exp())
}

/// Marks each present atom LOST with probability `1 - exp(-dt/lifetime)`.
/// Returns the number of atoms lost in this step.
pub fn survive_exponential<R: Rng + ?Sized>(
    atoms: &mut [AtomRecord],
    dt: Micros,
    lifetime_s: f64,
    rng: &mut R,
) -> Result<usize> {
    let keep = survival_probability(dt, lifetime_s)?;
    if keep == 1.0 {
        return Ok(0);
    }
    let mut lost = 0;
    for atom in atoms.iter_mut().filter(|a| !a.is_lost()) {
        if !rng.random_bool(keep) {
            atom.internal = InternalState::Lost;
            lost += 1;
        }
    }
    Ok(lost)
}
