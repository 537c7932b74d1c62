//! Reservoir supply: which cloud sits in the tweezer plane and when the next
//! one can be swapped in.
//!
//! A cloud is staged `staging()` after its MOT starts. The swap is triggered
//! at the end of the first extraction dwell after the next cloud is staged:
//! handover, then the second-stage transport gap. The following MOT starts
//! once the handover is done.

use rand::Rng;

use crate::clock::Micros;
use crate::error::Result;
use crate::log::{Event, EventLog};
use crate::reservoir::{
    sample_extraction, Extraction, LoadingModel, ReservoirParams, ReservoirState, TweezerGeometry,
};
use crate::transport::{StageTimings, TimelineEntry};

#[derive(Clone, Debug)]
pub struct ReservoirController {
    params: ReservoirParams,
    geom: TweezerGeometry,
    model: LoadingModel,
    timings: StageTimings,
    /// Swap reservoirs when the next one is staged.
    replace: bool,
    current: Option<ReservoirState>,
    incoming: Option<(u64, Micros)>,
    next_id: u64,
    /// MOT start of the cloud after `incoming`/`current`.
    next_mot_start: Micros,
    timeline: Vec<TimelineEntry>,
}

impl ReservoirController {
    /// Starts the first MOT at t = 0.
    pub fn new(
        params: ReservoirParams,
        geom: TweezerGeometry,
        model: LoadingModel,
        timings: StageTimings,
        replace: bool,
    ) -> Result<Self> {
        model.validate()?;
        timings.validate()?;
        let staged = timings.staging();
        let first = TimelineEntry {
            reservoir_id: 0,
            mot_start: Micros::ZERO,
            handover_start: staged,
            gap_start: staged + timings.handover,
            arrival: timings.first_arrival(),
            depart: None,
        };
        Ok(Self {
            params,
            geom,
            model,
            replace,
            current: None,
            incoming: Some((0, first.arrival)),
            next_id: 1,
            next_mot_start: staged + timings.handover,
            timeline: vec![first],
            timings,
        })
    }

    /// A controller whose single cloud is already in place at `at`.
    pub fn single(
        params: ReservoirParams,
        geom: TweezerGeometry,
        model: LoadingModel,
        at: Micros,
    ) -> Result<Self> {
        model.validate()?;
        let res = ReservoirState::fresh(0, &params, &geom, at)?;
        Ok(Self {
            params,
            geom,
            model,
            timings: StageTimings::default(),
            replace: false,
            current: Some(res),
            incoming: None,
            next_id: 1,
            next_mot_start: Micros(u64::MAX / 2),
            timeline: vec![TimelineEntry {
                reservoir_id: 0,
                mot_start: at,
                handover_start: at,
                gap_start: at,
                arrival: at,
                depart: None,
            }],
        })
    }

    pub fn current(&self) -> Option<&ReservoirState> {
        self.current.as_ref()
    }

    pub fn timeline(&self) -> &[TimelineEntry] {
        &self.timeline
    }

    pub fn geometry(&self) -> &TweezerGeometry {
        &self.geom
    }

    /// Earliest time ≥ `t` at which a cloud is in the plane.
    pub fn available_at(&self, t: Micros) -> Option<Micros> {
        if self.current.is_some() {
            Some(t)
        } else {
            self.incoming.map(|(_, arrival)| arrival.max(t))
        }
    }

    /// Extracts at `t`; a cloud must be in the plane (see [`Self::available_at`]).
    /// Events are logged at `t`, with effective times in their payloads.
    pub fn extract<R: Rng + ?Sized>(
        &mut self,
        t: Micros,
        log: &mut EventLog,
        rng: &mut R,
    ) -> Result<Extraction> {
        if self.available_at(t) != Some(t) {
            return Err(crate::Error::NoReservoir(t));
        }
        if self.current.is_none() {
            let (id, arrival) = self.incoming.take().expect("available_at checked incoming");
            self.current = Some(ReservoirState::fresh(
                id,
                &self.params,
                &self.geom,
                arrival,
            )?);
            log.record(
                t,
                Event::ReservoirArrival {
                    reservoir: id,
                    arrival_us: arrival,
                },
            )?;
        }
        let res = self.current.as_ref().expect("reservoir installed above");
        let ex = sample_extraction(res, &self.geom, &self.model, t, rng)?;
        log.record(
            t,
            Event::Extraction {
                reservoir: res.id,
                index: res.extractions,
                mu: ex.mu,
                occupied_raw: ex.occupied,
            },
        )?;
        self.current = Some(ex.reservoir.clone());
        let dwell_end = t + Micros::from_secs_f64(self.model.dwell * 1e-3);
        if self.replace
            && self.incoming.is_none()
            && self.next_mot_start + self.timings.staging() <= dwell_end
        {
            self.swap(t, dwell_end, log)?;
        }
        Ok(ex)
    }

    fn swap(&mut self, now: Micros, at: Micros, log: &mut EventLog) -> Result<()> {
        let old = self.current.take().expect("swap needs a present cloud");
        log.record(
            now,
            Event::ReservoirDepart {
                reservoir: old.id,
                handover_us: at,
            },
        )?;
        let id = self.next_id;
        self.next_id += 1;
        let gap_start = at + self.timings.handover;
        let arrival = gap_start + self.timings.l2_transport;
        if let Some(last) = self.timeline.last_mut() {
            last.depart = Some(at);
        }
        self.timeline.push(TimelineEntry {
            reservoir_id: id,
            mot_start: self.next_mot_start,
            handover_start: at,
            gap_start,
            arrival,
            depart: None,
        });
        self.incoming = Some((id, arrival));
        self.next_mot_start = gap_start;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn controller() -> ReservoirController {
        ReservoirController::new(
            ReservoirParams::default(),
            TweezerGeometry::default(),
            LoadingModel::default(),
            StageTimings::default(),
            true,
        )
        .unwrap()
    }

    #[test]
    fn first_extraction_waits_for_first_arrival() {
        let mut c = controller();
        let mut rng = SeededRng::new(1, 0);
        assert!(c
            .extract(Micros::ZERO, &mut EventLog::disabled(), &mut rng)
            .is_err());
        let start = c.available_at(Micros::ZERO).unwrap();
        assert_eq!(start, Micros::from_ms(170));
        let ex = c
            .extract(start, &mut EventLog::disabled(), &mut rng)
            .unwrap();
        assert!(ex.mu > 4.5);
    }

    #[test]
    fn back_to_back_extractions_swap_reservoirs() {
        let mut c = controller();
        let mut rng = SeededRng::new(2, 0);
        let mut log = EventLog::disabled();
        let mut t = Micros::ZERO;
        let mut per_cloud = std::collections::BTreeMap::new();
        while t < Micros::from_secs(2) {
            let start = c.available_at(t).unwrap();
            let ex = c.extract(start, &mut log, &mut rng).unwrap();
            *per_cloud.entry(ex.reservoir.id).or_insert(0) += 1;
            t = start + Micros(2_150);
        }
        let tl = c.timeline();
        assert!(tl.len() >= 12);
        for w in tl.windows(2) {
            // next cloud only arrives after the handover and gap
            assert_eq!(w[1].arrival, w[0].depart.unwrap() + Micros::from_ms(22));
            assert!(w[1].mot_start >= w[0].handover_start);
            assert!(w[1].arrival >= w[1].mot_start + Micros::from_ms(170));
        }
        let counts: Vec<_> = per_cloud.values().copied().collect();
        for &n in &counts[1..counts.len() - 1] {
            assert!((57..=62).contains(&n), "{counts:?}");
        }
    }

    #[test]
    fn single_reservoir_never_swaps() {
        let mut c = ReservoirController::single(
            ReservoirParams::default(),
            TweezerGeometry::default(),
            LoadingModel::default(),
            Micros::ZERO,
        )
        .unwrap();
        let mut rng = SeededRng::new(3, 0);
        let mut t = Micros::ZERO;
        for _ in 0..200 {
            let ex = c.extract(t, &mut EventLog::disabled(), &mut rng).unwrap();
            assert_eq!(ex.reservoir.id, 0);
            t += Micros(2_150);
        }
        assert_eq!(c.current().unwrap().extractions, 200);
    }
}
