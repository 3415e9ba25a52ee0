//! Real spherical harmonics of degree 0..=2 and the SH-to-RGB color transfer.
//!
//! Basis ordering: `Y_0^0, Y_1^{-1}, Y_1^0, Y_1^1, Y_2^{-2}, Y_2^{-1}, Y_2^0,
//! Y_2^1, Y_2^2`, i.e. the degree-1 block is proportional to `(y, z, x)`.

use nalgebra::Vector3;

use crate::{Error, Result, SH_COEFFS};

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2_0: f64 = 1.092_548_430_592_079_2;
pub const SH_C2_1: f64 = 0.315_391_565_252_520_05;
pub const SH_C2_2: f64 = 0.546_274_215_296_039_6;

/// Offset added to the SH sum so that all-zero coefficients render mid-gray.
pub const COLOR_OFFSET: f64 = 0.5;

const UNIT_TOLERANCE: f64 = 1e-9;

pub type ShBasis = [f64; SH_COEFFS];
/// Per-channel coefficients, `[channel][basis]`.
pub type ShCoeffs = [[f64; SH_COEFFS]; 3];

/// Evaluates the nine basis functions, rejecting directions that are not unit length.
pub fn sh_eval(direction: &Vector3<f64>) -> Result<ShBasis> {
    let norm = direction.norm();
    if (norm - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::NonUnitDirection(norm));
    }
    Ok(sh_basis(direction))
}

/// Basis evaluation without the unit-length check. Callers guarantee `|d| = 1`.
#[inline]
pub fn sh_basis(d: &Vector3<f64>) -> ShBasis {
    let (x, y, z) = (d.x, d.y, d.z);
    [
        SH_C0,
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2_0 * x * y,
        SH_C2_0 * y * z,
        SH_C2_1 * (3.0 * z * z - 1.0),
        SH_C2_0 * x * z,
        SH_C2_2 * (x * x - y * y),
    ]
}

/// `∂Y_m/∂d` of the basis polynomials, one row per basis function.
pub fn sh_basis_jacobian(d: &Vector3<f64>) -> [[f64; 3]; SH_COEFFS] {
    let (x, y, z) = (d.x, d.y, d.z);
    [
        [0.0, 0.0, 0.0],
        [0.0, SH_C1, 0.0],
        [0.0, 0.0, SH_C1],
        [SH_C1, 0.0, 0.0],
        [SH_C2_0 * y, SH_C2_0 * x, 0.0],
        [0.0, SH_C2_0 * z, SH_C2_0 * y],
        [0.0, 0.0, 6.0 * SH_C2_1 * z],
        [SH_C2_0 * z, 0.0, SH_C2_0 * x],
        [2.0 * SH_C2_2 * x, -2.0 * SH_C2_2 * y, 0.0],
    ]
}

/// Color of one channel before clamping.
#[inline]
pub fn channel_raw(coeffs: &[f64; SH_COEFFS], basis: &ShBasis) -> f64 {
    coeffs.iter().zip(basis).map(|(k, b)| k * b).sum::<f64>() + COLOR_OFFSET
}

/// Clamped RGB together with a per-channel flag telling whether the channel
/// is inside the linear range (and therefore passes gradient).
#[inline]
pub fn color_from_basis(sh: &ShCoeffs, basis: &ShBasis) -> ([f64; 3], [bool; 3]) {
    let mut rgb = [0.0; 3];
    let mut live = [false; 3];
    for ch in 0..3 {
        let raw = channel_raw(&sh[ch], basis);
        rgb[ch] = raw.clamp(0.0, 1.0);
        live[ch] = raw > 0.0 && raw < 1.0;
    }
    (rgb, live)
}

/// `clamp(Σ_m sh[c][m]·Y_m(d) + 0.5, 0, 1)` per channel.
pub fn sh_color(sh: &ShCoeffs, direction: &Vector3<f64>) -> Result<[f64; 3]> {
    let basis = sh_eval(direction)?;
    Ok(color_from_basis(sh, &basis).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
        // Archimedes: z uniform in [-1, 1], azimuth uniform.
        let z: f64 = rng.random_range(-1.0..1.0);
        let phi: f64 = rng.random_range(0.0..2.0 * PI);
        let r = (1.0 - z * z).sqrt();
        Vector3::new(r * phi.cos(), r * phi.sin(), z)
    }

    #[test]
    fn degree_zero_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let b = sh_eval(&random_unit(&mut rng)).unwrap();
            assert_eq!(b[0], 0.28209479177387814);
        }
        assert!((SH_C0 - 1.0 / (2.0 * PI.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn degree_one_on_z_axis() {
        let b = sh_eval(&Vector3::z()).unwrap();
        assert_eq!(b[1], 0.0);
        assert!((b[2] - 0.48860251190).abs() < 1e-11);
        assert_eq!(b[3], 0.0);
    }

    #[test]
    fn non_unit_direction_rejected() {
        assert!(matches!(
            sh_eval(&Vector3::new(0.0, 0.0, 1.1)),
            Err(Error::NonUnitDirection(_))
        ));
    }

    #[test]
    fn monte_carlo_orthonormality() {
        // E[Y_j Y_k] over the uniform sphere is δ_jk / (4π).
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mut gram = [[0.0f64; 9]; 9];
        for _ in 0..n {
            let b = sh_eval(&random_unit(&mut rng)).unwrap();
            for j in 0..9 {
                for k in 0..9 {
                    gram[j][k] += b[j] * b[k];
                }
            }
        }
        for (j, row) in gram.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                let integral = v / n as f64 * 4.0 * PI;
                let expected = if j == k { 1.0 } else { 0.0 };
                assert!(
                    (integral - expected).abs() < 1e-2,
                    "gram[{j}][{k}] = {integral}"
                );
            }
        }
    }

    #[test]
    fn basis_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let d = random_unit(&mut rng);
            let jac = sh_basis_jacobian(&d);
            for a in 0..3 {
                let mut e = Vector3::zeros();
                e[a] = 1e-6;
                let (p, m) = (sh_basis(&(d + e)), sh_basis(&(d - e)));
                for k in 0..9 {
                    let fd = (p[k] - m[k]) / 2e-6;
                    assert!((fd - jac[k][a]).abs() < 1e-8, "basis {k} axis {a}");
                }
            }
        }
    }

    #[test]
    fn zero_coefficients_are_mid_gray() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let rgb = sh_color(&[[0.0; 9]; 3], &random_unit(&mut rng)).unwrap();
            assert_eq!(rgb, [0.5, 0.5, 0.5]);
        }
    }

    #[test]
    fn saturated_channel_clamps() {
        let mut sh = [[0.0; 9]; 3];
        sh[0][0] = 1.0 / SH_C0; // raw = 1.5
        let rgb = sh_color(&sh, &Vector3::x()).unwrap();
        assert_eq!(rgb[0], 1.0);
        let (_, live) = color_from_basis(&sh, &sh_basis(&Vector3::x()));
        assert_eq!(live, [false, true, true]);
    }

    #[test]
    fn matches_direct_dot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let d = random_unit(&mut rng);
            let mut sh = [[0.0; 9]; 3];
            for ch in sh.iter_mut() {
                for k in ch.iter_mut() {
                    *k = rng.random_range(-0.4..0.4);
                }
            }
            let rgb = sh_color(&sh, &d).unwrap();
            let (x, y, z) = (d.x, d.y, d.z);
            let basis = [
                0.5 / PI.sqrt(),
                (3.0 / (4.0 * PI)).sqrt() * y,
                (3.0 / (4.0 * PI)).sqrt() * z,
                (3.0 / (4.0 * PI)).sqrt() * x,
                0.5 * (15.0 / PI).sqrt() * x * y,
                0.5 * (15.0 / PI).sqrt() * y * z,
                0.25 * (5.0 / PI).sqrt() * (3.0 * z * z - 1.0),
                0.5 * (15.0 / PI).sqrt() * x * z,
                0.25 * (15.0 / PI).sqrt() * (x * x - y * y),
            ];
            for ch in 0..3 {
                let mut acc = 0.5;
                for m in 0..9 {
                    acc += sh[ch][m] * basis[m];
                }
                assert!((rgb[ch] - acc.clamp(0.0, 1.0)).abs() < 1e-12);
            }
        }
    }
}
