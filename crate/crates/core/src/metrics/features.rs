use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::sequence::{dist, MotionSequence};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Kinetic,
    Geometric,
}

/// `N × Fm` matrix of per-sample feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub kind: FeatureKind,
    rows: Tensor,
}

impl FeatureSet {
    pub fn new(kind: FeatureKind, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Metric("feature set needs at least one row".into()));
        }
        let t = Tensor::from_rows(&rows)?;
        if !t.all_finite() {
            return Err(Error::Metric("feature rows must be finite".into()));
        }
        Ok(FeatureSet { kind, rows: t })
    }

    pub fn kinetic(motions: &[MotionSequence]) -> Result<Self> {
        let rows = motions.iter().map(kinetic_features).collect::<Result<Vec<_>>>()?;
        FeatureSet::new(FeatureKind::Kinetic, rows)
    }

    pub fn geometric(motions: &[MotionSequence]) -> Result<Self> {
        FeatureSet::new(FeatureKind::Geometric, motions.iter().map(geometric_features).collect())
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> usize {
        self.rows.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i)
    }

    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let (n, f) = (self.len(), self.dims());
        let x = DMatrix::from_row_slice(n, f, self.rows.data());
        let mean = x.row_mean().transpose();
        let mut centered = x;
        for mut r in centered.row_iter_mut() {
            r -= mean.transpose();
        }
        let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
        let cov = centered.transpose() * &centered / denom;
        (mean, cov)
    }
}

fn velocities(m: &MotionSequence) -> Vec<Vec<[f64; 3]>> {
    let fps = m.fps();
    (0..m.frames() - 1)
        .map(|t| {
            (0..m.joints())
                .map(|j| {
                    let (a, b) = (m.joint(t, j), m.joint(t + 1, j));
                    [(b[0] - a[0]) * fps, (b[1] - a[1]) * fps, (b[2] - a[2]) * fps]
                })
                .collect()
        })
        .collect()
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Per joint: mean speed, speed standard deviation, mean acceleration magnitude
/// (each block of `J` entries, in that order). Units are per second.
pub fn kinetic_features(m: &MotionSequence) -> Result<Vec<f64>> {
    if m.frames() < 3 {
        return Err(Error::Metric(format!(
            "kinetic features need at least 3 frames, got {}",
            m.frames()
        )));
    }
    let j_count = m.joints();
    let vel = velocities(m);
    let fps = m.fps();
    let mut out = vec![0.0; 3 * j_count];
    for j in 0..j_count {
        let speeds: Vec<f64> = vel.iter().map(|v| norm3(v[j])).collect();
        let mean = speeds.iter().sum::<f64>() / speeds.len() as f64;
        let var = speeds.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / speeds.len() as f64;
        let acc: f64 = vel
            .windows(2)
            .map(|w| {
                let (a, b) = (w[0][j], w[1][j]);
                norm3([(b[0] - a[0]) * fps, (b[1] - a[1]) * fps, (b[2] - a[2]) * fps])
            })
            .sum::<f64>()
            / (vel.len() - 1) as f64;
        out[j] = mean;
        out[j_count + j] = var.sqrt();
        out[2 * j_count + j] = acc;
    }
    Ok(out)
}

/// Time-averaged distance for every joint pair `(a < b)`, then mean per-frame
/// bounding-box extents (x, y, z), then root height mean and standard deviation.
pub fn geometric_features(m: &MotionSequence) -> Vec<f64> {
    let (t_count, j_count) = (m.frames(), m.joints());
    let pairs = j_count * (j_count - 1) / 2;
    let mut out = vec![0.0; pairs + 5];
    for t in 0..t_count {
        let mut k = 0;
        for a in 0..j_count {
            for b in a + 1..j_count {
                out[k] += dist(m.joint(t, a), m.joint(t, b));
                k += 1;
            }
        }
        for axis in 0..3 {
            let vals = (0..j_count).map(|j| m.joint(t, j)[axis]);
            let (lo, hi) = vals.fold((f64::MAX, f64::MIN), |(lo, hi), v| (lo.min(v), hi.max(v)));
            out[pairs + axis] += hi - lo;
        }
    }
    for v in &mut out[..pairs + 3] {
        *v /= t_count as f64;
    }
    let heights: Vec<f64> = (0..t_count).map(|t| m.joint(t, 0)[1]).collect();
    let mean = heights.iter().sum::<f64>() / t_count as f64;
    let var = heights.iter().map(|h| (h - mean).powi(2)).sum::<f64>() / t_count as f64;
    out[pairs + 3] = mean;
    out[pairs + 4] = var.sqrt();
    out
}

/// Square roots of PSD eigenvalues. Values below the round-off level of the
/// largest one are zeroed; otherwise `sqrt` turns 1e-12 noise into 1e-6 errors.
fn sqrt_eigenvalues(values: &DVector<f64>) -> DVector<f64> {
    let max = values.iter().cloned().fold(0.0, f64::max);
    let tol = max * values.len() as f64 * f64::EPSILON;
    values.map(|v| if v > tol { v.sqrt() } else { 0.0 })
}

fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&sqrt_eigenvalues(&eig.eigenvalues));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians given their moments.
pub fn frechet_distance(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> Result<f64> {
    let f = mu_a.len();
    if mu_b.len() != f || cov_a.shape() != (f, f) || cov_b.shape() != (f, f) {
        return Err(Error::dim(format!(
            "moment shapes disagree: {} / {:?} vs {} / {:?}",
            f,
            cov_a.shape(),
            mu_b.len(),
            cov_b.shape()
        )));
    }
    let sym = |m: &DMatrix<f64>| (m + m.transpose()) * 0.5;
    let (a, b) = (sym(cov_a), sym(cov_b));
    let ra = sqrtm_psd(&a);
    let inner = sym(&(&ra * &b * &ra));
    let tr_sqrt: f64 = sqrt_eigenvalues(&SymmetricEigen::new(inner).eigenvalues).sum();
    let diff = mu_a - mu_b;
    // rounding can leave a tiny negative residue for identical distributions
    Ok((diff.dot(&diff) + a.trace() + b.trace() - 2.0 * tr_sqrt).max(0.0))
}

pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.kind != b.kind {
        return Err(Error::Metric("cannot compare kinetic with geometric features".into()));
    }
    if a.dims() != b.dims() {
        return Err(Error::dim(format!("feature widths {} and {}", a.dims(), b.dims())));
    }
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Metric("FID needs at least two samples per set".into()));
    }
    let (ma, ca) = a.moments();
    let (mb, cb) = b.moments();
    frechet_distance(&ma, &ca, &mb, &cb)
}

/// Mean Euclidean distance over all unordered row pairs.
pub fn diversity(a: &FeatureSet) -> Result<f64> {
    let n = a.len();
    if n < 2 {
        return Err(Error::Metric("diversity needs at least two samples".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += a
                .row(i)
                .iter()
                .zip(a.row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn translating(v: [f64; 3], fps: f64, frames: usize) -> MotionSequence {
        let mut data = Vec::new();
        for t in 0..frames {
            let s = t as f64 / fps;
            for j in 0..2 {
                data.extend_from_slice(&[v[0] * s + j as f64, v[1] * s, v[2] * s]);
            }
        }
        MotionSequence::new(fps, 2, data).unwrap()
    }

    #[test]
    fn static_pose_has_zero_kinetics() {
        let m = MotionSequence::new(20.0, 2, vec![0.3; 2 * 3 * 10]).unwrap();
        assert!(kinetic_features(&m).unwrap().iter().all(|&v| v == 0.0));
        let short = MotionSequence::new(20.0, 2, vec![0.3; 12]).unwrap();
        assert!(kinetic_features(&short).is_err());
    }

    #[test]
    fn uniform_translation_speed_is_exact_and_fps_independent() {
        let v = [0.6, 0.0, 0.8];
        for fps in [20.0, 40.0] {
            let k = kinetic_features(&translating(v, fps, 12)).unwrap();
            for j in 0..2 {
                assert!((k[j] - 1.0).abs() < 1e-12);
                assert!(k[2 + j].abs() < 1e-12);
                assert!(k[4 + j].abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pairwise_entries_scale_with_the_body() {
        let m = translating([0.1, 0.2, 0.0], 20.0, 5);
        let mut big = m.clone();
        big.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        let (a, b) = (geometric_features(&m), geometric_features(&big));
        assert!((b[0] - 2.0 * a[0]).abs() < 1e-12);
    }

    #[test]
    fn diversity_examples() {
        let s = |rows: Vec<Vec<f64>>| FeatureSet::new(FeatureKind::Kinetic, rows).unwrap();
        assert_eq!(diversity(&s(vec![vec![0.0], vec![2.0]])).unwrap(), 2.0);
        let d = diversity(&s(vec![vec![0.0], vec![1.0], vec![2.0]])).unwrap();
        assert!((d - 4.0 / 3.0).abs() < 1e-12);
        assert_eq!(diversity(&s(vec![vec![1.0, 2.0]; 4])).unwrap(), 0.0);
    }

    #[test]
    fn fid_of_a_set_with_itself_vanishes() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![(i as f64).sin(), (i as f64 * 0.3).cos(), i as f64 * 0.1]).collect();
        let a = FeatureSet::new(FeatureKind::Geometric, rows).unwrap();
        assert!(fid(&a, &a).unwrap().abs() < 1e-9);
    }
}
