use serde::{Deserialize, Serialize};

use super::sequence::MotionSequence;
use super::skeleton::{Skeleton, LEFT_HIP, RIGHT_HIP};
use crate::error::{Error, Result};

/// Rotates every frame about the vertical (Y) axis so that frame 0 faces +X,
/// then moves the frame-0 root onto the origin of the ground plane.
///
/// Facing is `up × (right_hip − left_hip)` projected onto XZ.
pub fn normalize_heading(m: &MotionSequence) -> Result<MotionSequence> {
    if m.joints() <= RIGHT_HIP {
        return Err(Error::Preprocess(format!(
            "heading needs hip joints {LEFT_HIP} and {RIGHT_HIP}, motion has {} joints",
            m.joints()
        )));
    }
    let l = m.joint(0, LEFT_HIP);
    let r = m.joint(0, RIGHT_HIP);
    let (fx, fz) = (r[2] - l[2], -(r[0] - l[0]));
    let norm = fx.hypot(fz);
    if norm < 1e-9 {
        return Err(Error::Preprocess(
            "first-frame hip axis is vertical; heading is undefined".into(),
        ));
    }
    let (c, s) = (fx / norm, fz / norm);
    let root = m.joint(0, 0);
    let (ox, oz) = (c * root[0] + s * root[2], -s * root[0] + c * root[2]);

    let mut out = m.clone();
    for v in out.data_mut().chunks_exact_mut(3) {
        let (x, z) = (v[0], v[2]);
        v[0] = c * x + s * z - ox;
        v[2] = -s * x + c * z - oz;
    }
    Ok(out)
}

/// How one destination joint is obtained from the source skeleton.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum JointRule {
    Copy(usize),
    /// Convex combination of source joints; weights are non-negative and sum to 1.
    Blend(Vec<(usize, f64)>),
}

/// One rule per destination joint; `None` entries are unmapped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointMapping {
    pub rules: Vec<Option<JointRule>>,
}

impl JointMapping {
    pub fn identity(joints: usize) -> Self {
        JointMapping {
            rules: (0..joints).map(|j| Some(JointRule::Copy(j))).collect(),
        }
    }

    /// Copies joints whose names match, then applies `extra` rules keyed by destination name.
    /// Rules in `extra` name source joints.
    pub fn by_names(src: &Skeleton, dst: &Skeleton, extra: &[(&str, Vec<(&str, f64)>)]) -> Result<Self> {
        let mut rules: Vec<Option<JointRule>> = dst
            .names()
            .iter()
            .map(|n| src.index_of(n).map(JointRule::Copy))
            .collect();
        for (name, parts) in extra {
            let d = dst
                .index_of(name)
                .ok_or_else(|| Error::Mapping(format!("no destination joint named {name}")))?;
            let mut blend = Vec::with_capacity(parts.len());
            for (sname, w) in parts {
                let s = src
                    .index_of(sname)
                    .ok_or_else(|| Error::Mapping(format!("no source joint named {sname}")))?;
                blend.push((s, *w));
            }
            rules[d] = Some(JointRule::Blend(blend));
        }
        Ok(JointMapping { rules })
    }
}

/// Re-expresses `m` on `dst` using `mapping`.
pub fn unify_joints(m: &MotionSequence, src: &Skeleton, dst: &Skeleton, mapping: &JointMapping) -> Result<MotionSequence> {
    if m.joints() != src.joint_count() {
        return Err(Error::Mapping(format!(
            "motion has {} joints, source skeleton {}",
            m.joints(),
            src.joint_count()
        )));
    }
    if mapping.rules.len() != dst.joint_count() {
        return Err(Error::Mapping(format!(
            "mapping has {} rules for {} destination joints",
            mapping.rules.len(),
            dst.joint_count()
        )));
    }
    let j_src = src.joint_count();
    let mut resolved: Vec<Vec<(usize, f64)>> = Vec::with_capacity(mapping.rules.len());
    for (d, rule) in mapping.rules.iter().enumerate() {
        let parts = match rule {
            None => {
                return Err(Error::Mapping(format!(
                    "destination joint {d} ({}) is unmapped",
                    dst.names()[d]
                )))
            }
            Some(JointRule::Copy(s)) => vec![(*s, 1.0)],
            Some(JointRule::Blend(parts)) => {
                let total: f64 = parts.iter().map(|p| p.1).sum();
                if parts.is_empty() || parts.iter().any(|p| !(p.1 >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                    return Err(Error::Mapping(format!(
                        "joint {d}: blend weights must be non-negative and sum to 1"
                    )));
                }
                parts.clone()
            }
        };
        if let Some((s, _)) = parts.iter().find(|p| p.0 >= j_src) {
            return Err(Error::Mapping(format!("joint {d} refers to source joint {s} out of range")));
        }
        resolved.push(parts);
    }

    let frames = m.frames();
    let mut data = Vec::with_capacity(frames * dst.joint_count() * 3);
    for t in 0..frames {
        for parts in &resolved {
            let mut p = [0.0; 3];
            for &(s, w) in parts {
                let q = m.joint(t, s);
                for k in 0..3 {
                    p[k] += w * q[k];
                }
            }
            data.extend_from_slice(&p);
        }
    }
    MotionSequence::new(m.fps(), dst.joint_count(), data)
}
