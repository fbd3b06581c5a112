use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Joint hierarchy with rest-pose bone offsets in meters.
///
/// Joint 0 is the root. Joints 1 and 2 are the left and right hip, as in the
/// SMPL ordering; heading normalization relies on that convention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    names: Vec<String>,
    parents: Vec<Option<usize>>,
    offsets: Vec<[f64; 3]>,
}

pub const LEFT_HIP: usize = 1;
pub const RIGHT_HIP: usize = 2;

impl Skeleton {
    pub fn new(names: Vec<String>, parents: Vec<Option<usize>>, offsets: Vec<[f64; 3]>) -> Result<Self> {
        let j = names.len();
        if j == 0 || parents.len() != j || offsets.len() != j {
            return Err(Error::Config(format!(
                "skeleton needs matching names/parents/offsets, got {}/{}/{}",
                j,
                parents.len(),
                offsets.len()
            )));
        }
        if parents[0].is_some() {
            return Err(Error::Config("joint 0 must be the root".into()));
        }
        for (i, p) in parents.iter().enumerate().skip(1) {
            match p {
                None => return Err(Error::Config(format!("joint {i} has no parent; only joint 0 may be a root"))),
                Some(p) if *p >= j => return Err(Error::Config(format!("joint {i} has parent {p} out of range"))),
                _ => {}
            }
        }
        // every chain must reach the root within J steps
        for start in 0..j {
            let mut cur = start;
            let mut steps = 0;
            while let Some(p) = parents[cur] {
                cur = p;
                steps += 1;
                if steps > j {
                    return Err(Error::Config(format!("joint {start} is part of a cycle")));
                }
            }
        }
        if offsets.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite rest offset".into()));
        }
        Ok(Skeleton {
            names,
            parents,
            offsets,
        })
    }

    /// Eight-joint desk-scale skeleton used by the synthetic dataset.
    /// Rest pose faces +X with +Y up and +Z to the character's right.
    pub fn desk_default() -> Self {
        let names = [
            "pelvis", "l_hip", "r_hip", "l_foot", "r_foot", "neck", "l_wrist", "r_wrist",
        ];
        let parents = vec![None, Some(0), Some(0), Some(1), Some(2), Some(0), Some(5), Some(5)];
        let offsets = vec![
            [0.0, 0.0, 0.0],
            [0.0, 0.0, -0.1],
            [0.0, 0.0, 0.1],
            [0.0, -0.85, 0.0],
            [0.0, -0.85, 0.0],
            [0.0, 0.55, 0.0],
            [0.0, -0.5, -0.2],
            [0.0, -0.5, 0.2],
        ];
        Skeleton::new(names.iter().map(|s| s.to_string()).collect(), parents, offsets).expect("valid")
    }

    /// SMPL 24-joint layout. Offsets are approximate adult proportions.
    pub fn smpl24() -> Self {
        let table: [(&str, Option<usize>, [f64; 3]); 24] = [
            ("pelvis", None, [0.0, 0.0, 0.0]),
            ("left_hip", Some(0), [0.0, -0.08, -0.06]),
            ("right_hip", Some(0), [0.0, -0.08, 0.06]),
            ("spine1", Some(0), [0.0, 0.11, 0.0]),
            ("left_knee", Some(1), [0.0, -0.38, 0.0]),
            ("right_knee", Some(2), [0.0, -0.38, 0.0]),
            ("spine2", Some(3), [0.0, 0.13, 0.0]),
            ("left_ankle", Some(4), [0.0, -0.40, 0.0]),
            ("right_ankle", Some(5), [0.0, -0.40, 0.0]),
            ("spine3", Some(6), [0.0, 0.05, 0.0]),
            ("left_foot", Some(7), [0.12, -0.05, 0.0]),
            ("right_foot", Some(8), [0.12, -0.05, 0.0]),
            ("neck", Some(9), [0.0, 0.21, 0.0]),
            ("left_collar", Some(9), [0.0, 0.12, -0.07]),
            ("right_collar", Some(9), [0.0, 0.12, 0.07]),
            ("head", Some(12), [0.0, 0.09, 0.0]),
            ("left_shoulder", Some(13), [0.0, 0.03, -0.1]),
            ("right_shoulder", Some(14), [0.0, 0.03, 0.1]),
            ("left_elbow", Some(16), [0.0, 0.0, -0.26]),
            ("right_elbow", Some(17), [0.0, 0.0, 0.26]),
            ("left_wrist", Some(18), [0.0, 0.0, -0.25]),
            ("right_wrist", Some(19), [0.0, 0.0, 0.25]),
            ("left_hand", Some(20), [0.0, 0.0, -0.08]),
            ("right_hand", Some(21), [0.0, 0.0, 0.08]),
        ];
        Skeleton::new(
            table.iter().map(|t| t.0.to_string()).collect(),
            table.iter().map(|t| t.1).collect(),
            table.iter().map(|t| t.2).collect(),
        )
        .expect("valid")
    }

    /// The 22-joint subset (SMPL without hands) used by text-motion corpora.
    pub fn smpl22() -> Self {
        let full = Self::smpl24();
        Skeleton::new(
            full.names[..22].to_vec(),
            full.parents[..22].to_vec(),
            full.offsets[..22].to_vec(),
        )
        .expect("valid")
    }

    pub fn joint_count(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.parents[j]
    }

    pub fn offset(&self, j: usize) -> [f64; 3] {
        self.offsets[j]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Rest length of the bone ending at each joint (0 for the root).
    pub fn bone_lengths(&self) -> Vec<f64> {
        self.offsets
            .iter()
            .map(|o| (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt())
            .collect()
    }
}
