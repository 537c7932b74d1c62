//! Streaming JSON-lines event log.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::clock::Micros;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    ReservoirArrival {
        reservoir: u64,
        arrival_us: Micros,
    },
    ReservoirDepart {
        reservoir: u64,
        handover_us: Micros,
    },
    Extraction {
        reservoir: u64,
        index: u32,
        mu: f64,
        /// Tweezers with at least one atom before parity projection.
        occupied_raw: usize,
    },
    /// Atoms counted toward the extraction flux (post parity projection).
    FluxCount {
        atoms: usize,
    },
    BatchReady {
        batch: u64,
        started_us: Micros,
        loaded: usize,
        detected: usize,
        qubits: usize,
    },
    BatchNotReady {
        cycle: u64,
    },
    Reload {
        cycle: u64,
        subarray: usize,
        ejected: usize,
        transferred: usize,
        leaked: usize,
    },
    Readout {
        cycle: u64,
        subarray: usize,
        readout_probability: f64,
    },
    Sample {
        population: usize,
    },
    Rearranged {
        targets: usize,
        filled: usize,
    },
    /// One averaged point of a coherence scan; `t_s` is the evolution time.
    ScanPoint {
        condition: String,
        kind: String,
        t_s: f64,
        p0: f64,
        p1: f64,
        pa: f64,
        pmf: f64,
    },
}

impl Event {
    pub fn module(&self) -> &'static str {
        match self {
            Event::ReservoirArrival { .. } | Event::ReservoirDepart { .. } => "transport",
            Event::Extraction { .. } | Event::FluxCount { .. } => "reservoir",
            Event::BatchReady { .. } => "prep",
            Event::BatchNotReady { .. } | Event::Reload { .. } | Event::Sample { .. } => "storage",
            Event::Rearranged { .. } => "rearrangement",
            Event::Readout { .. } | Event::ScanPoint { .. } => "coherence",
        }
    }
}

#[derive(Serialize)]
struct Record<'a> {
    run: u64,
    t_us: Micros,
    module: &'static str,
    #[serde(flatten)]
    event: &'a Event,
}

/// Writes one JSON object per line through a fixed-size buffer. A disabled
/// log drops records. Records are time-ordered within a run (a trial or an
/// independent scan); runs are numbered in increasing order.
#[derive(Debug)]
enum Sink {
    Disabled,
    File(PathBuf, BufWriter<File>),
    Memory(Vec<u8>),
}

#[derive(Debug)]
pub struct EventLog {
    sink: Sink,
    count: u64,
    last: Micros,
    run: u64,
}

impl EventLog {
    pub fn disabled() -> Self {
        Self::with_sink(Sink::Disabled)
    }

    /// Collects records in memory, to be appended to another log with [`Self::absorb`].
    pub fn buffer() -> Self {
        Self::with_sink(Sink::Memory(Vec::new()))
    }

    fn with_sink(sink: Sink) -> Self {
        Self {
            sink,
            count: 0,
            last: Micros::ZERO,
            run: 0,
        }
    }

    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::with_sink(Sink::File(
            path.to_path_buf(),
            BufWriter::with_capacity(64 * 1024, file),
        )))
    }

    pub fn is_enabled(&self) -> bool {
        !matches!(self.sink, Sink::Disabled)
    }

    /// Appends the records of a buffered log whose runs all follow ours.
    pub fn absorb(&mut self, other: EventLog) -> Result<()> {
        if other.count > 0 {
            if self.count > 0 && other.run <= self.run {
                return Err(crate::error::invalid(
                    "run",
                    format!("run {} after run {}", other.run, self.run),
                ));
            }
            self.begin_run(other.run)?;
            self.last = other.last;
        }
        self.count += other.count;
        if let (Sink::File(path, w), Sink::Memory(bytes)) = (&mut self.sink, &other.sink) {
            w.write_all(bytes).map_err(|source| Error::Io {
                path: path.clone(),
                source,
            })?;
        } else if let (Sink::Memory(mine), Sink::Memory(bytes)) = (&mut self.sink, &other.sink) {
            mine.extend_from_slice(bytes);
        }
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Starts run `run`; the clock restarts at zero.
    pub fn begin_run(&mut self, run: u64) -> Result<()> {
        if run < self.run {
            return Err(crate::error::invalid(
                "run",
                format!("run {run} after run {}", self.run),
            ));
        }
        self.run = run;
        self.last = Micros::ZERO;
        Ok(())
    }

    /// Records must arrive in non-decreasing time order.
    pub fn record(&mut self, t: Micros, event: Event) -> Result<()> {
        if t < self.last {
            return Err(Error::Causality {
                at: t,
                now: self.last,
            });
        }
        self.last = t;
        self.count += 1;
        let rec = Record {
            run: self.run,
            t_us: t,
            module: event.module(),
            event: &event,
        };
        match &mut self.sink {
            Sink::Disabled => {}
            Sink::File(path, w) => {
                serde_json::to_writer(&mut *w, &rec)?;
                w.write_all(b"\n").map_err(|source| Error::Io {
                    path: path.clone(),
                    source,
                })?;
            }
            Sink::Memory(buf) => {
                serde_json::to_writer(&mut *buf, &rec)?;
                buf.push(b'\n');
            }
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<u64> {
        if let Sink::File(path, mut w) = std::mem::replace(&mut self.sink, Sink::Disabled) {
            w.flush().map_err(|source| Error::Io { path, source })?;
        }
        Ok(self.count)
    }
}
