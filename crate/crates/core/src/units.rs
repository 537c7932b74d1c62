//! Physical constants (SI).

pub const KB: f64 = 1.380_649e-23;
pub const AMU: f64 = 1.660_539_066_60e-27;
/// Mass of ⁸⁷Rb.
pub const M_RB87: f64 = 86.909_180_527 * AMU;
pub const G: f64 = 9.806_65;
