use proptest::prelude::*;
use ude_core::metrics::detect_motion_beats;
use ude_core::motion::io::{load_dataset, load_motion, save_motion};
use ude_core::motion::synth::{dance_clip, synth_dataset, BEAT_PERIODS, DANCE_GENRES};
use ude_core::motion::{normalize_heading, MotionSequence, Split, SynthConfig};
use ude_core::rng::derive;

fn rigid(seed: u64) -> MotionSequence {
    let cfg = SynthConfig::default();
    let genre = DANCE_GENRES[(seed % 5) as usize];
    dance_clip(genre, 10, &cfg, &mut derive(seed, 0)).unwrap().motion
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[test]
fn detected_beats_recover_constructed_beats() {
    let cfg = SynthConfig::default();
    let (mut hit, mut total) = (0, 0);
    for (i, genre) in DANCE_GENRES.iter().enumerate() {
        for (k, &period) in BEAT_PERIODS.iter().enumerate() {
            for rep in 0..3 {
                let d = dance_clip(genre, period, &cfg, &mut derive(99, (i * 100 + k * 10 + rep) as u64)).unwrap();
                let found = detect_motion_beats(&d.motion).unwrap();
                for &b in &d.beat_frames {
                    total += 1;
                    let t = b as f64 / cfg.fps;
                    if found.iter().any(|f| (f - t).abs() <= 2.0 / cfg.fps + 1e-9) {
                        hit += 1;
                    }
                }
            }
        }
    }
    assert!(hit as f64 >= 0.9 * total as f64, "{hit}/{total}");
}

#[test]
fn dataset_loads_back_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig::with_counts(16, 8, 10, 5);
    let manifest = synth_dataset(&cfg, 4, dir.path()).unwrap();
    assert_eq!(manifest.entries.len(), 39);
    let samples = load_dataset(&dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(samples.iter().filter(|s| s.split == Split::Test).count(), 13);
    let m = load_motion(&dir.path().join(&manifest.entries[0].motion)).unwrap();
    assert_eq!(m, samples[0].motion);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn heading_normalization_is_idempotent_and_rigid(seed in 0u64..10_000) {
        let m = rigid(seed);
        let once = normalize_heading(&m).unwrap();
        let twice = normalize_heading(&once).unwrap();
        prop_assert!(once.to_tensor().max_abs_diff(&twice.to_tensor()) < 1e-9);
        for t in 0..m.frames() {
            for a in 0..m.joints() {
                for b in 0..m.joints() {
                    let d0 = dist(m.joint(t, a), m.joint(t, b));
                    prop_assert!((d0 - dist(once.joint(t, a), once.joint(t, b))).abs() < 1e-9);
                }
                if t > 0 {
                    let s0 = dist(m.joint(t, a), m.joint(t - 1, a));
                    let s1 = dist(once.joint(t, a), once.joint(t - 1, a));
                    prop_assert!((s0 - s1).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn motion_files_round_trip(seed in 0u64..10_000) {
        let m = rigid(seed);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.motion");
        save_motion(&path, &m).unwrap();
        let back = load_motion(&path).unwrap();
        prop_assert_eq!(back.fps(), m.fps());
        prop_assert!(back.to_tensor().max_abs_diff(&m.to_tensor()) < 1e-9);
    }
}
