use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use topic_turn::dsp::{acoustic_block, frame_energy, pitch_track, voice_quality, AudioView, DspConfig};

const SR: f64 = 16000.0;

fn harmonic(f0: f64, amp: f64, secs: f64) -> Vec<f64> {
    (0..(secs * SR) as usize)
        .map(|i| {
            let ph = 2.0 * PI * f0 * i as f64 / SR;
            amp * (ph.sin() + 0.5 * (2.0 * ph).sin() + 0.25 * (3.0 * ph).sin()) / 1.75
        })
        .collect()
}

/// Sine whose successive periods alternate between T(1 + d) and T(1 - d).
fn alternating(f0: f64, d: f64, amp: f64, secs: f64) -> Vec<f64> {
    let n = (secs * SR) as usize;
    let t = SR / f0;
    let mut out = Vec::with_capacity(n);
    let (mut start, mut k) = (0.0f64, 0usize);
    while out.len() < n {
        let len = t * if k % 2 == 0 { 1.0 + d } else { 1.0 - d };
        while (out.len() as f64) < start + len && out.len() < n {
            let phase = (out.len() as f64 - start) / len;
            out.push(amp * (2.0 * PI * phase).sin());
        }
        start += len;
        k += 1;
    }
    out
}

#[test]
fn harmonic_220_pitch_and_voice_quality() {
    let x = harmonic(220.0, 0.4, 2.0);
    let v = AudioView::new(&x, 0);
    let cfg = DspConfig::default();
    let p = pitch_track(v, 0.0, 2.0, &cfg).unwrap();
    assert_eq!(p.voiced_fraction(), 1.0);
    let f = p.voiced_f0(0.0, 2.0);
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    assert!((mean - 220.0).abs() < 1.0, "{mean}");
    let vq = voice_quality(v, 0.0, 2.0, &cfg).unwrap();
    assert!(vq.jitter.unwrap() < 0.005, "{vq:?}");
    assert!(vq.shimmer.unwrap() < 0.005, "{vq:?}");
    assert!(vq.hnr.unwrap() > 30.0, "{vq:?}");
}

#[test]
fn pure_sine_pitch_is_exact_and_fully_voiced() {
    let x: Vec<f64> = (0..32000).map(|i| 0.3 * (2.0 * PI * 220.0 * i as f64 / SR).sin()).collect();
    let p = pitch_track(AudioView::new(&x, 0), 0.0, 2.0, &DspConfig::default()).unwrap();
    assert!(p.voiced.iter().all(|&b| b));
    assert!(p.voiced_f0(0.0, 2.0).iter().all(|f| (f - 220.0).abs() < 1.0));
}

#[test]
fn alternating_periods_give_expected_jitter() {
    let x = alternating(200.0, 0.02, 0.4, 2.0);
    let vq = voice_quality(AudioView::new(&x, 0), 0.0, 2.0, &DspConfig::default()).unwrap();
    let j = vq.jitter.unwrap();
    assert!((j - 0.04).abs() < 0.005, "{j}");
}

#[test]
fn pitch_error_below_one_hz_over_range() {
    let cfg = DspConfig::default();
    for f0 in (100..=350).step_by(10) {
        let x = harmonic(f0 as f64, 0.3, 0.5);
        let p = pitch_track(AudioView::new(&x, 0), 0.0, 0.5, &cfg).unwrap();
        assert_eq!(p.voiced_fraction(), 1.0, "{f0}");
        for f in p.voiced_f0(0.0, 0.5) {
            assert!((f - f0 as f64).abs() < 1.0, "{f0}: {f}");
        }
    }
}

#[test]
fn white_noise_is_mostly_unvoiced() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x: Vec<f64> = (0..32000).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let p = pitch_track(AudioView::new(&x, 0), 0.0, 2.0, &DspConfig::default()).unwrap();
    assert!(p.voiced_fraction() <= 0.1, "{}", p.voiced_fraction());
}

#[test]
fn linear_ramp_energy_mean() {
    // Envelope rises linearly so that frame RMS goes from 0 to 1 across the pre-window.
    let n = 6 * 16000;
    let x: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / SR;
            let env = ((t - 1.0) / 2.0).clamp(0.0, 1.0);
            if t < 3.0 {
                env * 3f64.sqrt() * if i % 2 == 0 { 1.0 } else { -1.0 } / 3f64.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let b = acoustic_block(AudioView::new(&x, 0), 3.0, &DspConfig::default()).unwrap();
    assert!((b.values[0] - 0.5).abs() < 0.02, "{}", b.values[0]);
}

#[test]
fn tone_only_before_the_end() {
    let mut x = harmonic(220.0, 0.3, 3.0);
    x.extend(std::iter::repeat(0.0).take(3 * 16000));
    let b = acoustic_block(AudioView::new(&x, 0), 3.0, &DspConfig::default()).unwrap();
    assert!(b.defined[11]);
    assert!(b.values[11] < 0.05, "pitch std {}", b.values[11]);
    assert_eq!(b.values[4], 0.0);
}

#[test]
fn appended_silence_does_not_change_statistics() {
    let mut x = vec![0.0; 16000];
    x.extend(harmonic(170.0, 0.2, 2.5));
    x.extend(vec![0.0; 3 * 16000]);
    let cfg = DspConfig::default();
    let a = acoustic_block(AudioView::new(&x, 0), 2.7, &cfg).unwrap();
    let mut longer = vec![0.0; 32000];
    longer.extend(&x);
    longer.extend(vec![0.0; 32000]);
    let b = acoustic_block(AudioView::new(&longer, 0), 4.7, &cfg).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn energy_stats_are_ordered(seed in 0u64..1000, f0 in 90.0f64..380.0, amp in 0.01f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = harmonic(f0, amp, 5.0)
            .into_iter()
            .map(|v| v * rng.gen_range(0.2..1.0))
            .collect();
        let b = acoustic_block(AudioView::new(&x, 0), 2.5, &DspConfig::default()).unwrap();
        for w in [0, 4, 8] {
            if b.defined[w] {
                let (mean, max, min, std) = (b.values[w], b.values[w + 1], b.values[w + 2], b.values[w + 3]);
                prop_assert!(max >= mean - 1e-12 && mean >= min - 1e-12 && std >= 0.0);
            }
        }
        let e = frame_energy(AudioView::new(&x, 0), 0.5, 4.5, &DspConfig::default()).unwrap();
        prop_assert!(e.values.iter().all(|v| v.is_finite() && *v >= 0.0));
        for i in [12, 13] {
            prop_assert!(!b.defined[i] || b.values[i] >= 0.0);
        }
        let p = pitch_track(AudioView::new(&x, 0), 0.5, 4.5, &DspConfig::default()).unwrap();
        prop_assert!(p.voiced_f0(0.5, 4.5).iter().all(|f| (75.0..=400.0).contains(f)));
    }
}
