use nalgebra::{DMatrix, Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::statmath::jacobi_eigen;

/// Rigid transform `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl AlignmentTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().sum::<Vector3<f64>>() / points.len() as f64
}

fn check_spread(points: &[Vector3<f64>], c: &Vector3<f64>, name: &str) -> Result<()> {
    let scatter: Matrix3<f64> = points.iter().map(|p| (p - c) * (p - c).transpose()).sum();
    let mut ev: Vec<f64> = scatter.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::DegenerateAlignment(format!(
            "{name} points are coincident or collinear"
        )));
    }
    Ok(())
}

/// Least-squares rigid transform with `R·gt + t ≈ est`, from the dominant
/// eigenvector of Horn's 4×4 quaternion matrix.
pub fn horn_align(gt: &[Vector3<f64>], est: &[Vector3<f64>]) -> Result<AlignmentTransform> {
    if gt.len() != est.len() {
        return Err(Error::invalid("point sequences differ in length"));
    }
    if gt.len() < 3 {
        return Err(Error::DegenerateAlignment(format!(
            "{} points, need at least 3",
            gt.len()
        )));
    }
    if gt
        .iter()
        .chain(est)
        .any(|p| p.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::invalid("alignment points have non-finite entries"));
    }
    let (cg, ce) = (centroid(gt), centroid(est));
    check_spread(gt, &cg, "ground-truth")?;
    check_spread(est, &ce, "estimated")?;

    let s: Matrix3<f64> = gt
        .iter()
        .zip(est)
        .map(|(g, e)| (g - cg) * (e - ce).transpose())
        .sum();
    let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
    let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
    let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
    #[rustfmt::skip]
    let n = DMatrix::from_row_slice(4, 4, &[
        sxx + syy + szz, syz - szy, szx - sxz, sxy - syx,
        syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,
        szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy,
        sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz,
    ]);
    let eig = jacobi_eigen(&n)?;
    let scale = eig.eigenvalues.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if eig.eigenvalues[0] - eig.eigenvalues[1] <= 1e-12 * scale {
        return Err(Error::DegenerateAlignment("rotation is not unique".into()));
    }
    let q = eig.eigenvectors.column(0);
    let rotation =
        *UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]))
            .to_rotation_matrix()
            .matrix();
    Ok(AlignmentTransform {
        rotation,
        translation: ce - rotation * cg,
    })
}

/// `vₖ = (pₖ − pₖ₋₁)/dt`, with `v₀ = v₁` so lengths match.
pub fn backdifference_velocity(positions: &[Vector3<f64>], dt: f64) -> Result<Vec<Vector3<f64>>> {
    if positions.len() < 2 {
        return Err(Error::InsufficientData(
            "backdifferencing needs at least 2 positions".into(),
        ));
    }
    if !(dt > 0.0) {
        return Err(Error::invalid("time step must be positive"));
    }
    let mut v: Vec<_> = positions.windows(2).map(|w| (w[1] - w[0]) / dt).collect();
    v.insert(0, v[0]);
    Ok(v)
}

/// Rotation-vector error `log(R_true R_estᵀ)` between two rotation vectors.
pub fn rotation_difference(truth: &Vector3<f64>, estimate: &Vector3<f64>) -> Vector3<f64> {
    // quaternion log stays finite where the matrix trace rounds past 3
    let qt = UnitQuaternion::from_scaled_axis(*truth);
    let qe = UnitQuaternion::from_scaled_axis(*estimate);
    (qt * qe.inverse()).scaled_axis()
}

fn bracket(times: &[f64], t: f64) -> Result<(usize, f64)> {
    if times.len() < 2 {
        return Err(Error::InsufficientData(
            "interpolation needs at least 2 samples".into(),
        ));
    }
    if !(t >= times[0] && t <= times[times.len() - 1]) {
        return Err(Error::invalid(format!(
            "time {t} outside [{}, {}]",
            times[0],
            times[times.len() - 1]
        )));
    }
    let i = times.partition_point(|&s| s <= t).clamp(1, times.len() - 1) - 1;
    let span = times[i + 1] - times[i];
    if !(span > 0.0) {
        return Err(Error::invalid("sample times must be strictly increasing"));
    }
    Ok((i, (t - times[i]) / span))
}

/// Linear interpolation of positions to the query times.
pub fn interpolate_positions(
    times: &[f64],
    positions: &[Vector3<f64>],
    query: &[f64],
) -> Result<Vec<Vector3<f64>>> {
    if times.len() != positions.len() {
        return Err(Error::invalid("one position is required per timestamp"));
    }
    query
        .iter()
        .map(|&t| {
            let (i, a) = bracket(times, t)?;
            Ok(positions[i].lerp(&positions[i + 1], a))
        })
        .collect()
}

/// Spherical interpolation of rotation vectors to the query times.
pub fn interpolate_rotations(
    times: &[f64],
    rotations: &[Vector3<f64>],
    query: &[f64],
) -> Result<Vec<Vector3<f64>>> {
    if times.len() != rotations.len() {
        return Err(Error::invalid("one rotation is required per timestamp"));
    }
    query
        .iter()
        .map(|&t| {
            let (i, a) = bracket(times, t)?;
            let q0 = UnitQuaternion::from_scaled_axis(rotations[i]);
            let q1 = UnitQuaternion::from_scaled_axis(rotations[i + 1]);
            // antipodal endpoints have no unique path; fall back to the nearer one
            Ok(q0
                .try_slerp(&q1, a, 1e-12)
                .unwrap_or(if a < 0.5 { q0 } else { q1 })
                .scaled_axis())
        })
        .collect()
}
