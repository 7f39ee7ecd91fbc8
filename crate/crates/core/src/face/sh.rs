//! Real spherical harmonics up to order 2.
//!
//! Ordering follows `(l, m)` with `m` ascending: index 0 is `Y_00`, 1..=3 are
//! `Y_1,-1 ~ y`, `Y_10 ~ z`, `Y_11 ~ x`, and 4..=8 are `xy`, `yz`,
//! `3z^2 - 1`, `xz`, `x^2 - y^2`. Constants are the orthonormal ones, e.g.
//! `Y_00 = 1 / (2 sqrt(pi))`.

use super::geom::Vec3;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2_XY: f64 = 1.092_548_430_592_079_2;
pub const SH_C2_ZZ: f64 = 0.315_391_565_252_520_05;
pub const SH_C2_XX_YY: f64 = 0.546_274_215_296_039_6;

pub fn sh_basis(n: Vec3) -> [f64; 9] {
    let [x, y, z] = n;
    [
        SH_C0,
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2_XY * x * y,
        SH_C2_XY * y * z,
        SH_C2_ZZ * (3.0 * z * z - 1.0),
        SH_C2_XY * x * z,
        SH_C2_XX_YY * (x * x - y * y),
    ]
}

/// Irradiance `sum_k light_k * Y_k(n)`. Not clamped; shading clamps.
pub fn sh_irradiance(light: &[f64; 9], normal: Vec3) -> f64 {
    sh_basis(normal).iter().zip(light).map(|(y, l)| y * l).sum()
}
