use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::sequence::{dist, MotionSequence};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconAccuracy {
    pub ape: f64,
    pub ave: f64,
    pub ape_root: f64,
    pub ave_root: f64,
}

/// Temporal variance of each joint's position, summed over x, y, z.
fn joint_variances(m: &MotionSequence) -> Vec<f64> {
    let t_count = m.frames() as f64;
    (0..m.joints())
        .map(|j| {
            let mut mean = [0.0; 3];
            for t in 0..m.frames() {
                let p = m.joint(t, j);
                for k in 0..3 {
                    mean[k] += p[k] / t_count;
                }
            }
            (0..m.frames())
                .map(|t| {
                    let p = m.joint(t, j);
                    (0..3).map(|k| (p[k] - mean[k]).powi(2)).sum::<f64>()
                })
                .sum::<f64>()
                / t_count
        })
        .collect()
}

pub fn recon_accuracy(gen: &MotionSequence, gt: &MotionSequence) -> Result<ReconAccuracy> {
    if gen.frames() != gt.frames() || gen.joints() != gt.joints() {
        return Err(Error::dim(format!(
            "generated {}×{} vs reference {}×{}",
            gen.frames(),
            gen.joints(),
            gt.frames(),
            gt.joints()
        )));
    }
    let (t_count, j_count) = (gen.frames(), gen.joints());
    let mut ape = 0.0;
    let mut ape_root = 0.0;
    for t in 0..t_count {
        for j in 0..j_count {
            let d = dist(gen.joint(t, j), gt.joint(t, j));
            ape += d;
            if j == 0 {
                ape_root += d;
            }
        }
    }
    let (vg, vt) = (joint_variances(gen), joint_variances(gt));
    let ave = vg.iter().zip(&vt).map(|(a, b)| (a - b).abs()).sum::<f64>() / j_count as f64;
    Ok(ReconAccuracy {
        ape: ape / (t_count * j_count) as f64,
        ave,
        ape_root: ape_root / t_count as f64,
        ave_root: (vg[0] - vt[0]).abs(),
    })
}
