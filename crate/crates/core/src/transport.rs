//! Conveyor-belt kinematics and the reservoir replacement timeline.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::clock::Micros;
use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConveyorProfile {
    /// Lattice wavelength (m).
    pub lambda: f64,
    /// m/s²
    pub a_max: f64,
    /// m/s
    pub v_max: f64,
    /// m
    pub distance: f64,
}

impl ConveyorProfile {
    pub fn lattice1() -> Self {
        Self {
            lambda: 795.6e-9,
            a_max: 4000.0,
            v_max: 9.0,
            distance: 0.39,
        }
    }

    pub fn lattice2() -> Self {
        Self {
            distance: 0.17,
            ..Self::lattice1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a_max > 0.0 && self.v_max > 0.0 && self.distance >= 0.0) {
            return Err(invalid(
                "conveyor",
                "a_max and v_max must be > 0, distance >= 0",
            ));
        }
        Ok(())
    }
}

/// Lattice velocity λΔν/2 for a detuning Δν (Hz) between the two beams.
pub fn velocity(profile: &ConveyorProfile, delta_nu: f64) -> f64 {
    profile.lambda * delta_nu / 2.0
}

/// Shortest accelerate-cruise-decelerate time (s) over the profile's distance.
pub fn min_transport_time(profile: &ConveyorProfile) -> f64 {
    let (a, v, d) = (profile.a_max, profile.v_max, profile.distance);
    if d <= 0.0 {
        return 0.0;
    }
    if d <= v * v / a {
        2.0 * (d / a).sqrt()
    } else {
        2.0 * v / a + (d - v * v / a) / v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageTimings {
    pub mot_load: Micros,
    pub compression: Micros,
    pub lgm: Micros,
    pub l1_transport: Micros,
    pub handover: Micros,
    pub l2_transport: Micros,
    pub replacement_period: Micros,
    /// Time to shuttle the reservoir 1 cm out of (or back into) the field of view.
    pub shuttle: Micros,
}

impl Default for StageTimings {
    fn default() -> Self {
        Self {
            mot_load: Micros::from_ms(80),
            compression: Micros::from_ms(7),
            lgm: Micros::from_ms(11),
            l1_transport: Micros::from_ms(50),
            handover: Micros::from_ms(1),
            l2_transport: Micros::from_ms(21),
            replacement_period: Micros::from_ms(150),
            shuttle: Micros::from_ms(2),
        }
    }
}

impl StageTimings {
    pub fn validate(&self) -> Result<()> {
        if self.replacement_period < self.l2_transport + self.handover {
            return Err(invalid(
                "timings.replacement_period",
                "must cover the handover and second transport stage",
            ));
        }
        Ok(())
    }

    /// MOT start to cloud waiting at the handover point.
    pub fn staging(&self) -> Micros {
        self.mot_load + self.compression + self.lgm + self.l1_transport
    }

    /// Shortest spacing between arrivals: the next MOT starts after the previous handover.
    pub fn mot_cycle(&self) -> Micros {
        self.staging() + self.handover
    }

    pub fn first_arrival(&self) -> Micros {
        self.staging() + self.handover + self.l2_transport
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub reservoir_id: u64,
    pub mot_start: Micros,
    pub handover_start: Micros,
    /// Start of the no-reservoir gap (equal to `arrival` for the first cloud).
    pub gap_start: Micros,
    pub arrival: Micros,
    /// End of this cloud's presence window: the next gap start, or `None` for the last cloud.
    pub depart: Option<Micros>,
}

/// Nominal replacement schedule for `n` clouds. Arrivals are `replacement_period`
/// apart unless the MOT cycle is longer, in which case the MOT sets the pace.
pub fn pipeline_timeline(t: &StageTimings, n_reservoirs: usize) -> Vec<TimelineEntry> {
    let period = t.replacement_period.max(t.mot_cycle());
    let mut out: Vec<TimelineEntry> = Vec::with_capacity(n_reservoirs);
    for k in 0..n_reservoirs as u64 {
        let arrival = t.first_arrival() + Micros(period.0 * k);
        let gap_start = arrival - t.l2_transport;
        let handover_start = gap_start - t.handover;
        let mot_start = handover_start - t.staging();
        let gap_start = if k == 0 { arrival } else { gap_start };
        if let Some(prev) = out.last_mut() {
            prev.depart = Some(gap_start);
        }
        out.push(TimelineEntry {
            reservoir_id: k,
            mot_start,
            handover_start,
            gap_start,
            arrival,
            depart: None,
        });
    }
    out
}

pub const TIMELINE_FORMAT: &str = "# reloadsim timeline v1";

/// Writes `reservoir_id,arrival_us,gap_start_us,gap_end_us`.
pub fn write_timeline_csv<W: Write>(timeline: &[TimelineEntry], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{TIMELINE_FORMAT}")?;
    writeln!(out, "reservoir_id,arrival_us,gap_start_us,gap_end_us")?;
    for e in timeline {
        writeln!(
            out,
            "{},{},{},{}",
            e.reservoir_id, e.arrival, e.gap_start, e.arrival
        )?;
    }
    Ok(())
}
