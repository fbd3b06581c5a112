use crate::error::{Error, Result};
use crate::motion::MotionSequence;

pub const BEAT_SMOOTHING_WINDOW: usize = 5;
/// Default kernel width of [`beat_align`], in frame periods.
pub const DEFAULT_SIGMA_FRAMES: f64 = 3.0;

/// Total joint speed per frame (central differences, one-sided at the ends).
pub fn speed_envelope(m: &MotionSequence) -> Vec<f64> {
    let (t_count, fps) = (m.frames(), m.fps());
    (0..t_count)
        .map(|t| {
            let (a, b) = (t.saturating_sub(1), (t + 1).min(t_count - 1));
            if a == b {
                return 0.0;
            }
            let scale = fps / (b - a) as f64;
            (0..m.joints())
                .map(|j| {
                    let (p, q) = (m.joint(a, j), m.joint(b, j));
                    ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2) + (q[2] - p[2]).powi(2)).sqrt() * scale
                })
                .sum()
        })
        .collect()
}

/// Centered moving average, truncated at the ends.
pub fn smooth(x: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..x.len())
        .map(|t| {
            let (a, b) = (t.saturating_sub(half), (t + half + 1).min(x.len()));
            x[a..b].iter().sum::<f64>() / (b - a) as f64
        })
        .collect()
}

/// Times (s) of the interior local minima of the smoothed speed envelope.
pub fn detect_motion_beats(m: &MotionSequence) -> Result<Vec<f64>> {
    if m.frames() < 5 {
        return Err(Error::Metric(format!(
            "beat detection needs at least 5 frames, got {}",
            m.frames()
        )));
    }
    let s = smooth(&speed_envelope(m), BEAT_SMOOTHING_WINDOW);
    // round-off in a flat envelope must not read as a minimum
    let tol = 1e-9 * (1.0 + s.iter().cloned().fold(0.0, f64::max));
    Ok((1..s.len() - 1)
        .filter(|&t| s[t - 1] - s[t] > tol && s[t + 1] - s[t] >= -tol)
        .map(|t| t as f64 / m.fps())
        .collect())
}

/// Mean over audio beats of `exp(−d² / 2σ²)`, `d` the distance to the nearest motion beat.
pub fn beat_align(motion_beats: &[f64], audio_beats: &[f64], sigma: f64) -> Result<f64> {
    if audio_beats.is_empty() {
        return Err(Error::Metric("beat alignment needs at least one audio beat".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::Metric(format!("sigma must be positive, got {sigma}")));
    }
    if motion_beats.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = audio_beats
        .iter()
        .map(|ta| {
            let d = motion_beats.iter().map(|tm| (tm - ta).abs()).fold(f64::INFINITY, f64::min);
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .sum();
    Ok(total / audio_beats.len() as f64)
}
