//! Row-by-row, order-preserving rearrangement planning.
//!
//! AOD tones cannot cross, so every row is solved as a monotone matching
//! between sorted occupied columns and sorted target columns. Among matchings
//! of maximal coverage we minimise total column displacement with a suffix
//! DP, breaking ties toward the leftmost source.

use std::io::Read;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clock::Micros;
use crate::error::{check_probability, invalid, Error, Result};
use crate::layout::ZoneLayout;

/// Row-major boolean occupancy of the preparation array.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccupancyGrid {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<bool>,
}

impl OccupancyGrid {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            cells: vec![false; rows * cols],
        }
    }

    pub fn from_cells(rows: usize, cols: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != rows * cols {
            return Err(invalid(
                "occupancy",
                format!("{} cells for a {rows}x{cols} grid", cells.len()),
            ));
        }
        Ok(Self { rows, cols, cells })
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.cells[row * self.cols + col] = v;
    }

    pub fn row_columns(&self, row: usize) -> Vec<usize> {
        (0..self.cols).filter(|&c| self.get(row, c)).collect()
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Parses a CSV of 0/1 values, one grid row per line. `#` lines are skipped.
    pub fn read_csv<R: Read>(reader: R) -> std::result::Result<Self, String> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut cells = Vec::new();
        let mut cols = None;
        let mut rows = 0;
        for rec in rdr.records() {
            let rec = rec.map_err(|e| e.to_string())?;
            if cols.is_some_and(|c| c != rec.len()) {
                return Err(format!(
                    "row {} has {} columns, expected {}",
                    rows + 1,
                    rec.len(),
                    cols.unwrap()
                ));
            }
            cols = Some(rec.len());
            for field in rec.iter() {
                match field {
                    "0" => cells.push(false),
                    "1" => cells.push(true),
                    other => {
                        return Err(format!("row {}: expected 0 or 1, got {other:?}", rows + 1))
                    }
                }
            }
            rows += 1;
        }
        Ok(Self {
            rows,
            cols: cols.unwrap_or(0),
            cells,
        })
    }

    pub fn read_csv_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::read_csv(file).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowInstance {
    pub row_id: usize,
    pub loaded: Vec<usize>,
    pub targets: Vec<usize>,
}

impl RowInstance {
    pub fn new(
        row_id: usize,
        loaded: Vec<usize>,
        targets: Vec<usize>,
        cols: usize,
    ) -> Result<Self> {
        for (name, v) in [("row.loaded", &loaded), ("row.targets", &targets)] {
            if v.windows(2).any(|w| w[0] >= w[1]) {
                return Err(invalid(name, "columns must be strictly increasing"));
            }
            if v.last().is_some_and(|&c| c >= cols) {
                return Err(invalid(name, format!("column out of range (< {cols})")));
            }
        }
        Ok(Self {
            row_id,
            loaded,
            targets,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Move {
    pub src: usize,
    pub dst: usize,
}

impl Move {
    pub fn distance(&self) -> usize {
        self.src.abs_diff(self.dst)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowPlan {
    pub row_id: usize,
    pub assignment: Vec<Move>,
    /// Targets left empty because the row ran out of atoms.
    pub defects: usize,
    /// Total |src − dst| in columns.
    pub displacement: usize,
    /// Allocated row time.
    pub duration: Micros,
    /// Time the parallel move actually needs, from the segment table.
    pub move_time: Micros,
}

impl RowPlan {
    /// Turns a partial plan into `InsufficientAtoms`.
    pub fn check(&self) -> Result<()> {
        if self.defects > 0 {
            Err(Error::InsufficientAtoms {
                defects: self.defects,
            })
        } else {
            Ok(())
        }
    }
}

/// Optimal order-preserving assignment for one row. Untimed: `duration` and
/// `move_time` are zero until [`plan_array`] fills them in.
pub fn plan_row(inst: &RowInstance) -> RowPlan {
    let a = &inst.loaded;
    let b = &inst.targets;
    let (na, nb) = (a.len(), b.len());
    const INF: u64 = u64::MAX / 4;
    let w = nb + 1;
    let idx = |i: usize, j: usize| i * w + j;
    let cost = |i: usize, j: usize| a[i].abs_diff(b[j]) as u64;
    let mut f = vec![INF; (na + 1) * w];
    let mut assignment = Vec::with_capacity(na.min(nb));

    if na >= nb {
        // Cover every target; atoms may be skipped.
        for i in (0..=na).rev() {
            for j in (0..=nb).rev() {
                f[idx(i, j)] = if j == nb {
                    0
                } else if na - i < nb - j {
                    INF
                } else {
                    let take = cost(i, j) + f[idx(i + 1, j + 1)];
                    let skip = f[idx(i + 1, j)];
                    take.min(skip)
                };
            }
        }
        let (mut i, mut j) = (0, 0);
        while j < nb {
            if cost(i, j) + f[idx(i + 1, j + 1)] == f[idx(i, j)] {
                assignment.push(Move {
                    src: a[i],
                    dst: b[j],
                });
                j += 1;
            }
            i += 1;
        }
    } else {
        // Use every atom; targets may be skipped.
        for i in (0..=na).rev() {
            for j in (0..=nb).rev() {
                f[idx(i, j)] = if i == na {
                    0
                } else if nb - j < na - i {
                    INF
                } else {
                    let take = cost(i, j) + f[idx(i + 1, j + 1)];
                    let skip = f[idx(i, j + 1)];
                    take.min(skip)
                };
            }
        }
        let (mut i, mut j) = (0, 0);
        while i < na {
            if cost(i, j) + f[idx(i + 1, j + 1)] == f[idx(i, j)] {
                assignment.push(Move {
                    src: a[i],
                    dst: b[j],
                });
                i += 1;
            }
            j += 1;
        }
    }

    let displacement = assignment.iter().map(Move::distance).sum();
    RowPlan {
        row_id: inst.row_id,
        defects: nb - assignment.len(),
        assignment,
        displacement,
        duration: Micros::ZERO,
        move_time: Micros::ZERO,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanTiming {
    /// Image transfer and analysis latency before the first row can move.
    pub image_latency: Micros,
    /// Extra latency when the camera ROI includes the storage zone.
    pub storage_roi_latency: Micros,
    pub per_row: Micros,
    pub buffer: Micros,
    /// Lateral AOD speed (µm/µs, i.e. m/s).
    pub move_speed: f64,
    /// Pickup or drop intensity ramp.
    pub ramp: Micros,
}

impl Default for PlanTiming {
    fn default() -> Self {
        Self {
            image_latency: Micros::from_ms(10),
            storage_roi_latency: Micros::from_ms(15),
            per_row: Micros(700),
            buffer: Micros(1_600),
            move_speed: 1.0,
            ramp: Micros(40),
        }
    }
}

impl PlanTiming {
    pub fn total(&self, rows: usize, storage_roi: bool) -> Micros {
        let roi = if storage_roi {
            self.storage_roi_latency
        } else {
            Micros::ZERO
        };
        self.image_latency + roi + Micros(self.per_row.0 * rows as u64) + self.buffer
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RearrangeConfig {
    /// Probability that a picked atom reaches its target.
    pub move_survival: f64,
    /// Image the storage zone together with the preparation zone.
    pub storage_roi: bool,
    pub timing: PlanTiming,
}

impl Default for RearrangeConfig {
    fn default() -> Self {
        Self {
            move_survival: 0.9988,
            storage_roi: false,
            timing: PlanTiming::default(),
        }
    }
}

impl RearrangeConfig {
    pub fn validate(&self) -> Result<()> {
        check_probability("rearrange.move_survival", self.move_survival)?;
        if !(self.timing.move_speed > 0.0) {
            return Err(invalid("rearrange.timing.move_speed", "must be > 0"));
        }
        Ok(())
    }
}

/// Precomputed move durations for every (source, destination) column pair.
/// A move is pickup → half-pitch shift into the inter-row gap → lateral
/// travel → shift back → drop.
#[derive(Clone, Debug)]
pub struct SegmentTable {
    cols: usize,
    durations: Vec<Micros>,
}

impl SegmentTable {
    pub fn build(layout: &ZoneLayout, timing: &PlanTiming) -> Result<Self> {
        if !(timing.move_speed > 0.0) {
            return Err(invalid("rearrange.move_speed", "must be > 0"));
        }
        let cols = layout.prep_cols;
        let gap_shift = 0.5 * layout.prep_spacing;
        let mut durations = Vec::with_capacity(cols * cols);
        for src in 0..cols {
            for dst in 0..cols {
                let us = if src == dst {
                    0.0
                } else {
                    let lateral = src.abs_diff(dst) as f64 * layout.prep_spacing;
                    2.0 * timing.ramp.0 as f64 + (2.0 * gap_shift + lateral) / timing.move_speed
                };
                durations.push(Micros(us.ceil() as u64));
            }
        }
        Ok(Self { cols, durations })
    }

    pub fn lookup(&self, src: usize, dst: usize) -> Micros {
        self.durations[src * self.cols + dst]
    }

    pub fn longest(&self) -> Micros {
        self.durations.iter().copied().max().unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayPlan {
    pub rows: Vec<RowPlan>,
    pub targets_per_row: usize,
    pub target_columns: Vec<usize>,
    pub total_time: Micros,
    pub moving_time: Micros,
    pub defects: usize,
    pub predicted_fill: f64,
}

impl ArrayPlan {
    pub fn check(&self) -> Result<()> {
        if self.defects > 0 {
            Err(Error::InsufficientAtoms {
                defects: self.defects,
            })
        } else {
            Ok(())
        }
    }

    pub fn pickups(&self) -> usize {
        self.rows.iter().map(|r| r.assignment.len()).sum()
    }
}

pub fn plan_array(
    detections: &OccupancyGrid,
    layout: &ZoneLayout,
    timing: &PlanTiming,
    table: &SegmentTable,
    storage_roi: bool,
) -> Result<ArrayPlan> {
    if detections.rows != layout.prep_rows || detections.cols != layout.prep_cols {
        return Err(invalid(
            "detections",
            format!(
                "{}x{} grid does not match the {}x{} preparation zone",
                detections.rows, detections.cols, layout.prep_rows, layout.prep_cols
            ),
        ));
    }
    let targets = layout.target_columns();
    let mut rows = Vec::with_capacity(layout.prep_rows);
    for r in 0..layout.prep_rows {
        let inst = RowInstance {
            row_id: r,
            loaded: detections.row_columns(r),
            targets: targets.clone(),
        };
        let mut plan = plan_row(&inst);
        plan.move_time = plan
            .assignment
            .iter()
            .map(|m| table.lookup(m.src, m.dst))
            .max()
            .unwrap_or_default();
        plan.duration = timing.per_row;
        rows.push(plan);
    }
    let defects: usize = rows.iter().map(|r| r.defects).sum();
    let n_targets = layout.target_sites();
    Ok(ArrayPlan {
        targets_per_row: targets.len(),
        target_columns: targets,
        total_time: timing.total(layout.prep_rows, storage_roi),
        moving_time: Micros(timing.per_row.0 * layout.prep_rows as u64),
        predicted_fill: if n_targets == 0 {
            1.0
        } else {
            (n_targets - defects) as f64 / n_targets as f64
        },
        defects,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetOccupancy {
    /// Row-major, `targets_per_row` entries per prep row.
    pub filled: Vec<bool>,
    pub pickups: usize,
    pub arrivals: usize,
}

impl TargetOccupancy {
    pub fn fill(&self) -> f64 {
        if self.filled.is_empty() {
            return 1.0;
        }
        self.arrivals as f64 / self.filled.len() as f64
    }

    pub fn defects(&self) -> usize {
        self.filled.len() - self.arrivals
    }
}

/// Runs a plan against the atoms actually present; each picked atom arrives
/// with probability `move_survival`.
pub fn execute_plan<R: Rng + ?Sized>(
    plan: &ArrayPlan,
    present: &OccupancyGrid,
    move_survival: f64,
    rng: &mut R,
) -> Result<TargetOccupancy> {
    let p = check_probability("move_survival", move_survival)?;
    let per_row = plan.targets_per_row;
    let mut filled = vec![false; plan.rows.len() * per_row];
    let mut pickups = 0;
    let mut arrivals = 0;
    for row in &plan.rows {
        for m in &row.assignment {
            let k = plan.target_columns.binary_search(&m.dst).map_err(|_| {
                invalid(
                    "plan",
                    format!("destination {} is not a target column", m.dst),
                )
            })?;
            if !present.get(row.row_id, m.src) {
                continue;
            }
            pickups += 1;
            if rng.random_bool(p) {
                filled[row.row_id * per_row + k] = true;
                arrivals += 1;
            }
        }
    }
    Ok(TargetOccupancy {
        filled,
        pickups,
        arrivals,
    })
}
