//! Algebraic (Kåsa) circle fit and anti-clockwise marker ordering.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::PixelPoint;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircleFit {
    pub center: PixelPoint,
    pub radius: f64,
    /// RMS of geometric point-to-circle distances.
    pub rms_residual: f64,
}

/// Solves a 3×3 system with partial pivoting. `None` when singular.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let tail: f64 = (row + 1..3).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    Some(x)
}

/// Least-squares fit minimizing `sum (u² + v² + D u + E v + F)²`.
///
/// Points are centered and scaled before solving; the fitted circle is
/// mapped back to pixel coordinates.
pub fn fit_circle(points: &[PixelPoint], min_points: usize) -> Result<CircleFit> {
    let need = min_points.max(3);
    if points.len() < need {
        return Err(Error::DegenerateFit(format!(
            "{} points given, at least {need} required",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mu = points.iter().map(|p| p.u).sum::<f64>() / n;
    let mv = points.iter().map(|p| p.v).sum::<f64>() / n;
    let scale = (points
        .iter()
        .map(|p| (p.u - mu).powi(2) + (p.v - mv).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::DegenerateFit("all points coincide".into()));
    }

    let mut ata = [[0.0; 3]; 3];
    let mut atb = [0.0; 3];
    for p in points {
        let x = (p.u - mu) / scale;
        let y = (p.v - mv) / scale;
        let row = [x, y, 1.0];
        let rhs = -(x * x + y * y);
        for i in 0..3 {
            for j in 0..3 {
                ata[i][j] += row[i] * row[j];
            }
            atb[i] += row[i] * rhs;
        }
    }
    // Normalized data has unit second moment, so this determinant is scale
    // free; it vanishes for collinear inputs.
    let det = ata[0][0] * (ata[1][1] * ata[2][2] - ata[1][2] * ata[2][1])
        - ata[0][1] * (ata[1][0] * ata[2][2] - ata[1][2] * ata[2][0])
        + ata[0][2] * (ata[1][0] * ata[2][1] - ata[1][1] * ata[2][0]);
    if det.abs() < 1e-10 * n * n * n {
        return Err(Error::DegenerateFit("points are collinear".into()));
    }
    let [d, e, f] = solve3(ata, atb).ok_or_else(|| Error::DegenerateFit("singular normal equations".into()))?;
    let r2 = d * d / 4.0 + e * e / 4.0 - f;
    if !(r2 > 0.0) {
        return Err(Error::DegenerateFit("non-positive squared radius".into()));
    }
    let center = PixelPoint::new(mu - d / 2.0 * scale, mv - e / 2.0 * scale);
    let radius = r2.sqrt() * scale;
    let rms_residual = (points
        .iter()
        .map(|p| (p.distance(&center) - radius).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(CircleFit {
        center,
        radius,
        rms_residual,
    })
}

/// Angle of `p` about the fit center, anti-clockwise on screen (the `v`
/// axis points down, so it is flipped).
pub fn screen_angle(p: &PixelPoint, fit: &CircleFit) -> f64 {
    (-(p.v - fit.center.v)).atan2(p.u - fit.center.u)
}

/// Index of the centroid that follows `current` anti-clockwise around the
/// fitted circle. Centroids at the same angle resolve to the smaller index.
pub fn next_marker_anticlockwise(centroids: &[PixelPoint], current: usize, fit: &CircleFit) -> Result<usize> {
    if centroids.len() < 2 {
        return Err(Error::Markers(format!("{} centroids, at least 2 required", centroids.len())));
    }
    if current >= centroids.len() {
        return Err(Error::Markers(format!("current index {current} out of range")));
    }
    let base = screen_angle(&centroids[current], fit);
    let mut best: Option<(f64, usize)> = None;
    for (i, c) in centroids.iter().enumerate() {
        if i == current {
            continue;
        }
        let mut off = (screen_angle(c, fit) - base).rem_euclid(TAU);
        if off == 0.0 {
            off = TAU;
        }
        if best.is_none_or(|(b, _)| off < b) {
            best = Some((off, i));
        }
    }
    Ok(best.expect("at least two other centroids").1)
}
