//! Geometry of the preparation and storage tweezer arrays.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZoneLayout {
    pub prep_rows: usize,
    pub prep_cols: usize,
    /// µm
    pub prep_spacing: f64,
    pub storage_rows: usize,
    pub storage_cols: usize,
    /// Narrow and wide horizontal gaps, alternating (µm).
    pub storage_h_spacing: [f64; 2],
    /// µm
    pub storage_v_spacing: f64,
    pub n_subarrays: usize,
    /// Rearrangement targets per prep row (every other column).
    pub targets_per_row: usize,
}

impl Default for ZoneLayout {
    fn default() -> Self {
        Self {
            prep_rows: 12,
            prep_cols: 120,
            prep_spacing: 4.5,
            storage_rows: 36,
            storage_cols: 90,
            storage_h_spacing: [3.0, 6.0],
            storage_v_spacing: 9.0,
            n_subarrays: 6,
            targets_per_row: 45,
        }
    }
}

impl ZoneLayout {
    pub fn prep_sites(&self) -> usize {
        self.prep_rows * self.prep_cols
    }

    pub fn storage_sites(&self) -> usize {
        self.storage_rows * self.storage_cols
    }

    pub fn target_sites(&self) -> usize {
        self.prep_rows * self.targets_per_row
    }

    pub fn subarray_rows(&self) -> usize {
        self.prep_rows
    }

    pub fn subarray_cols(&self) -> usize {
        self.storage_cols / 2
    }

    pub fn subarray_sites(&self) -> usize {
        self.subarray_rows() * self.subarray_cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.prep_rows == 0 || self.prep_cols == 0 {
            return Err(invalid("layout", "empty preparation zone"));
        }
        if 2 * self.targets_per_row > self.prep_cols + 1 {
            return Err(invalid(
                "layout.targets_per_row",
                "sparse targets do not fit a prep row",
            ));
        }
        if !self.storage_cols.is_multiple_of(2) {
            return Err(invalid(
                "layout.storage_cols",
                "must be even (two interleaved column sets)",
            ));
        }
        let blocks = self.n_subarrays / 2;
        if !self.n_subarrays.is_multiple_of(2) || blocks * self.prep_rows != self.storage_rows {
            return Err(invalid(
                "layout.n_subarrays",
                "subarrays must tile the storage rows in blocks of prep_rows, two column sets each",
            ));
        }
        Ok(())
    }

    /// Extra check for storage runs: a rearranged batch must fill exactly one subarray.
    pub fn validate_storage(&self) -> Result<()> {
        self.validate()?;
        if self.subarray_cols() != self.targets_per_row {
            return Err(invalid(
                "layout.targets_per_row",
                "a rearranged batch must map one-to-one onto a subarray",
            ));
        }
        Ok(())
    }

    /// Sparse target columns: every other prep column, centred in the row.
    pub fn target_columns(&self) -> Vec<usize> {
        let span = 2 * self.targets_per_row - 1;
        let start = (self.prep_cols - span) / 2;
        (0..self.targets_per_row).map(|k| start + 2 * k).collect()
    }

    /// Storage site of the k-th target in prep row `row`, for subarray `sub`.
    pub fn storage_site(&self, sub: usize, row: usize, k: usize) -> (usize, usize) {
        let block = sub / 2;
        let parity = sub % 2;
        (block * self.prep_rows + row, 2 * k + parity)
    }

    pub fn storage_index(&self, row: usize, col: usize) -> usize {
        row * self.storage_cols + col
    }

    /// Which subarray owns a storage site.
    pub fn subarray_of(&self, row: usize, col: usize) -> usize {
        (row / self.prep_rows) * 2 + col % 2
    }

    /// Storage site position in µm.
    pub fn storage_position(&self, row: usize, col: usize) -> (f64, f64) {
        let pitch = self.storage_h_spacing[0] + self.storage_h_spacing[1];
        let x = (col / 2) as f64 * pitch + (col % 2) as f64 * self.storage_h_spacing[0];
        (x, row as f64 * self.storage_v_spacing)
    }

    /// Flat storage indices belonging to one subarray, row-major.
    pub fn subarray_indices(&self, sub: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.subarray_sites());
        for row in 0..self.prep_rows {
            for k in 0..self.targets_per_row {
                let (r, c) = self.storage_site(sub, row, k);
                out.push(self.storage_index(r, c));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn default_counts() {
        let l = ZoneLayout::default();
        l.validate_storage().unwrap();
        assert_eq!(l.prep_sites(), 1440);
        assert_eq!(l.storage_sites(), 3240);
        assert_eq!(l.subarray_sites(), 540);
        assert_eq!(l.n_subarrays * l.subarray_sites(), l.storage_sites());
        assert_eq!(l.target_sites(), 540);
    }

    #[test]
    fn subarrays_partition_storage() {
        let l = ZoneLayout::default();
        let mut seen = HashSet::new();
        for s in 0..l.n_subarrays {
            for idx in l.subarray_indices(s) {
                assert!(seen.insert(idx), "site {idx} in two subarrays");
                let (r, c) = (idx / l.storage_cols, idx % l.storage_cols);
                assert_eq!(l.subarray_of(r, c), s);
            }
        }
        assert_eq!(seen.len(), l.storage_sites());
    }

    #[test]
    fn subarray_pitch_is_nine_microns() {
        let l = ZoneLayout::default();
        let idx = l.subarray_indices(1);
        let (a, b) = (idx[0], idx[1]);
        let pa = l.storage_position(a / 90, a % 90);
        let pb = l.storage_position(b / 90, b % 90);
        assert!((pb.0 - pa.0 - 9.0).abs() < 1e-12);
    }

    #[test]
    fn sparse_targets_are_centred() {
        let l = ZoneLayout::default();
        let cols = l.target_columns();
        assert_eq!(cols.len(), 45);
        assert_eq!(cols[0], 15);
        assert_eq!(*cols.last().unwrap(), 103);
        let wide = ZoneLayout {
            targets_per_row: 50,
            ..l
        };
        assert_eq!(wide.target_columns()[0], 10);
    }
}
