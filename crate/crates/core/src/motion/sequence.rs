use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Joint positions over time, `T × (J·3)`, root joint first, Y up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSequence {
    fps: f64,
    joints: usize,
    data: Vec<f64>,
}

impl MotionSequence {
    pub fn new(fps: f64, joints: usize, data: Vec<f64>) -> Result<Self> {
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::Contract(format!("fps must be positive, got {fps}")));
        }
        if joints == 0 {
            return Err(Error::Contract("motion needs at least one joint".into()));
        }
        let width = joints * 3;
        if data.is_empty() || data.len() % width != 0 {
            return Err(Error::dim(format!(
                "{} values do not form whole frames of {width}",
                data.len()
            )));
        }
        Ok(MotionSequence { fps, joints, data })
    }

    /// From a `T × (J·3)` tensor.
    pub fn from_tensor(fps: f64, t: &Tensor) -> Result<Self> {
        let width = t.cols();
        if width % 3 != 0 {
            return Err(Error::dim(format!("frame width {width} is not a multiple of 3")));
        }
        MotionSequence::new(fps, width / 3, t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.frames(), self.width()], self.data.clone()).expect("shape")
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    /// Values per frame, `J·3`.
    pub fn width(&self) -> usize {
        self.joints * 3
    }

    pub fn frames(&self) -> usize {
        self.data.len() / self.width()
    }

    pub fn duration(&self) -> f64 {
        self.frames() as f64 / self.fps
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let w = self.width();
        &self.data[t * w..(t + 1) * w]
    }

    pub fn joint(&self, t: usize, j: usize) -> [f64; 3] {
        let base = t * self.width() + j * 3;
        [self.data[base], self.data[base + 1], self.data[base + 2]]
    }

    pub fn set_joint(&mut self, t: usize, j: usize, p: [f64; 3]) {
        let base = t * self.width() + j * 3;
        self.data[base..base + 3].copy_from_slice(&p);
    }

    /// Frames `start..end` as a new sequence.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.frames() {
            return Err(Error::dim(format!(
                "frame range {start}..{end} of {}",
                self.frames()
            )));
        }
        let w = self.width();
        MotionSequence::new(self.fps, self.joints, self.data[start * w..end * w].to_vec())
    }

    /// Concatenates frames of sequences with equal fps and joint count.
    pub fn concat(parts: &[MotionSequence]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Contract("nothing to concatenate".into()))?;
        let mut data = Vec::new();
        for p in parts {
            if p.joints != first.joints || p.fps != first.fps {
                return Err(Error::dim("concatenated motions differ in fps or joints"));
            }
            data.extend_from_slice(&p.data);
        }
        MotionSequence::new(first.fps, first.joints, data)
    }
}

pub(crate) fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Audio features aligned one row per motion frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioFeatureSequence {
    pub frame_rate: f64,
    features: Tensor,
    pub beat_times: Option<Vec<f64>>,
}

impl AudioFeatureSequence {
    pub fn new(frame_rate: f64, features: Tensor, beat_times: Option<Vec<f64>>) -> Result<Self> {
        if !(frame_rate > 0.0 && frame_rate.is_finite()) {
            return Err(Error::Contract(format!("feature rate must be positive, got {frame_rate}")));
        }
        if features.shape().len() != 2 || features.cols() == 0 {
            return Err(Error::dim(format!(
                "features must be a T×F matrix with F ≥ 1, got {:?}",
                features.shape()
            )));
        }
        Ok(AudioFeatureSequence {
            frame_rate,
            features,
            beat_times,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn dims(&self) -> usize {
        self.features.cols()
    }

    /// Rows `start..end`, with beats shifted into the new time origin.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.frames() {
            return Err(Error::dim(format!("feature range {start}..{end} of {}", self.frames())));
        }
        let t0 = start as f64 / self.frame_rate;
        let t1 = end as f64 / self.frame_rate;
        let beats = self.beat_times.as_ref().map(|b| {
            b.iter()
                .filter(|&&t| t >= t0 && t < t1)
                .map(|t| t - t0)
                .collect()
        });
        AudioFeatureSequence::new(self.frame_rate, self.features.slice_rows(start, end), beats)
    }
}
