//! Frame energy, autocorrelation pitch and voice quality.
//!
//! All analysis frames sit on a global grid of `hop` samples counted from the
//! start of the stream, so a window analysed from a ring buffer produces the
//! same frames as the full recording. Only frames lying entirely inside the
//! requested window are used.

use serde::{Deserialize, Serialize};

use crate::dataset::SAMPLE_RATE;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DspConfig {
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub f0_min: f64,
    pub f0_max: f64,
    pub voicing_threshold: f64,
    /// Frames at or below this RMS level are never voiced.
    pub voicing_floor_dbfs: f64,
    /// Candidate peaks within this fraction of the best one are preferred
    /// when they occur at a shorter lag (octave error guard).
    pub first_peak_ratio: f64,
    /// Allowed deviation of a period from the local pitch period.
    pub period_tolerance: f64,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            frame_ms: 40.0,
            hop_ms: 10.0,
            f0_min: 75.0,
            f0_max: 400.0,
            voicing_threshold: 0.45,
            voicing_floor_dbfs: -45.0,
            first_peak_ratio: 0.9,
            period_tolerance: 0.25,
        }
    }
}

impl DspConfig {
    pub fn frame_len(&self) -> usize {
        (self.frame_ms * SAMPLE_RATE as f64 / 1000.0).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.hop_ms * SAMPLE_RATE as f64 / 1000.0).round() as usize
    }

    fn lag_range(&self) -> (usize, usize) {
        let sr = SAMPLE_RATE as f64;
        ((sr / self.f0_max).floor() as usize, (sr / self.f0_min).floor() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.lag_range();
        let ok = self.hop_ms > 0.0
            && self.frame_ms >= self.hop_ms
            && self.f0_min > 0.0
            && self.f0_max > self.f0_min
            && lo >= 2
            && hi + 2 < self.frame_len()
            && (0.0..1.0).contains(&self.voicing_threshold)
            && self.first_peak_ratio > 0.0
            && self.first_peak_ratio <= 1.0
            && self.period_tolerance > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("inconsistent DSP settings {self:?}")))
        }
    }
}

/// A stretch of one audio stream. `start` is the absolute index of
/// `samples[0]` in the stream.
#[derive(Debug, Clone, Copy)]
pub struct AudioView<'a> {
    pub samples: &'a [f64],
    pub start: usize,
}

impl<'a> AudioView<'a> {
    pub fn new(samples: &'a [f64], start: usize) -> Self {
        Self { samples, start }
    }

    pub fn end(&self) -> usize {
        self.start + self.samples.len()
    }

    pub fn t_start(&self) -> f64 {
        self.start as f64 / SAMPLE_RATE as f64
    }

    pub fn t_end(&self) -> f64 {
        self.end() as f64 / SAMPLE_RATE as f64
    }

    fn slice(&self, a: usize, b: usize) -> &'a [f64] {
        &self.samples[a - self.start..b - self.start]
    }

    fn check(&self, ta: f64, tb: f64) -> Result<(usize, usize)> {
        let sr = SAMPLE_RATE as f64;
        let eps = 1e-9;
        if !(tb > ta) || ta < self.t_start() - eps || tb > self.t_end() + eps {
            return Err(Error::Window {
                ta,
                tb,
                len: self.t_end(),
            });
        }
        let a = ((ta * sr - 1e-6).ceil().max(0.0) as usize).max(self.start);
        let b = ((tb * sr + 1e-6).floor() as usize).min(self.end());
        Ok((a, b.max(a)))
    }
}

fn seconds(samples: usize) -> f64 {
    samples as f64 / SAMPLE_RATE as f64
}

/// Start samples of grid frames fully inside `[a, b)`.
fn frame_starts(a: usize, b: usize, frame: usize, hop: usize) -> impl Iterator<Item = usize> {
    let first = a.div_ceil(hop) * hop;
    (0..)
        .map(move |k| first + k * hop)
        .take_while(move |&s| s + frame <= b)
}

pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn dbfs(rms: f64) -> f64 {
    if rms <= 1e-10 {
        -200.0
    } else {
        20.0 * rms.log10()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSeries {
    pub hop: f64,
    /// Start time of the first frame.
    pub t0: f64,
    /// Frame duration.
    pub frame: f64,
    pub values: Vec<f64>,
}

impl FrameSeries {
    fn start_of(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.hop
    }

    /// Values of frames fully inside `[ta, tb]`.
    pub fn within(&self, ta: f64, tb: f64) -> impl Iterator<Item = (usize, f64)> + '_ {
        let eps = 1e-9;
        self.values
            .iter()
            .enumerate()
            .filter(move |(i, _)| {
                let s = self.start_of(*i);
                s >= ta - eps && s + self.frame <= tb + eps
            })
            .map(|(i, &v)| (i, v))
    }
}

/// RMS per frame over the window.
pub fn frame_energy(audio: AudioView<'_>, ta: f64, tb: f64, cfg: &DspConfig) -> Result<FrameSeries> {
    let (a, b) = audio.check(ta, tb)?;
    let (frame, hop) = (cfg.frame_len(), cfg.hop_len());
    let starts: Vec<usize> = frame_starts(a, b, frame, hop).collect();
    Ok(FrameSeries {
        hop: seconds(hop),
        t0: seconds(starts.first().copied().unwrap_or(a)),
        frame: seconds(frame),
        values: starts.iter().map(|&s| rms(audio.slice(s, s + frame))).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitchTrack {
    /// F0 in Hz, 0 for unvoiced frames.
    pub f0: FrameSeries,
    pub voiced: Vec<bool>,
    /// Interpolated normalized autocorrelation at the chosen lag.
    pub strength: Vec<f64>,
}

impl PitchTrack {
    pub fn voiced_f0(&self, ta: f64, tb: f64) -> Vec<f64> {
        self.f0.within(ta, tb).filter(|(i, _)| self.voiced[*i]).map(|(_, v)| v).collect()
    }

    pub fn voiced_fraction(&self) -> f64 {
        if self.voiced.is_empty() {
            return 0.0;
        }
        self.voiced.iter().filter(|&&v| v).count() as f64 / self.voiced.len() as f64
    }
}

struct FramePitch {
    f0: f64,
    strength: f64,
    voiced: bool,
}

fn analyse_frame(x: &[f64], cfg: &DspConfig) -> FramePitch {
    let unvoiced = FramePitch {
        f0: 0.0,
        strength: 0.0,
        voiced: false,
    };
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let x: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let (lo, hi) = cfg.lag_range();
    let n = x.len() - (hi + 2);
    let e0: f64 = x[..n].iter().map(|v| v * v).sum();
    if e0 <= 1e-12 {
        return unvoiced;
    }
    // r[k] is the normalized correlation at lag lo - 1 + k.
    let first = lo - 1;
    let mut r = Vec::with_capacity(hi + 3 - first);
    let mut e_lag: f64 = x[first..first + n].iter().map(|v| v * v).sum();
    for lag in first..=hi + 1 {
        if lag > first {
            e_lag += x[lag + n - 1].powi(2) - x[lag - 1].powi(2);
        }
        let cross: f64 = x[..n].iter().zip(&x[lag..lag + n]).map(|(a, b)| a * b).sum();
        let den = (e0 * e_lag.max(0.0)).sqrt();
        r.push(if den > 1e-12 { cross / den } else { 0.0 });
    }
    let peaks: Vec<usize> = (1..r.len() - 1)
        .filter(|&k| r[k] > r[k - 1] && r[k] >= r[k + 1])
        .collect();
    let Some(best) = peaks.iter().map(|&k| r[k]).reduce(f64::max) else {
        return unvoiced;
    };
    let k = *peaks.iter().find(|&&k| r[k] >= cfg.first_peak_ratio * best).unwrap();
    let (a, b, c) = (r[k - 1], r[k], r[k + 1]);
    let den = a - 2.0 * b + c;
    let (shift, peak) = if den.abs() > 1e-15 {
        let p = (0.5 * (a - c) / den).clamp(-0.5, 0.5);
        (p, b - 0.25 * (a - c) * p)
    } else {
        (0.0, b)
    };
    let f0 = SAMPLE_RATE as f64 / ((first + k) as f64 + shift);
    let voiced = peak >= cfg.voicing_threshold
        && dbfs(rms(&x)) > cfg.voicing_floor_dbfs
        && (cfg.f0_min..=cfg.f0_max).contains(&f0);
    FramePitch {
        f0: if voiced { f0 } else { 0.0 },
        strength: peak.min(1.0),
        voiced,
    }
}

pub fn pitch_track(audio: AudioView<'_>, ta: f64, tb: f64, cfg: &DspConfig) -> Result<PitchTrack> {
    cfg.validate()?;
    let (a, b) = audio.check(ta, tb)?;
    let (frame, hop) = (cfg.frame_len(), cfg.hop_len());
    let starts: Vec<usize> = frame_starts(a, b, frame, hop).collect();
    let frames: Vec<FramePitch> = starts.iter().map(|&s| analyse_frame(audio.slice(s, s + frame), cfg)).collect();
    Ok(PitchTrack {
        f0: FrameSeries {
            hop: seconds(hop),
            t0: seconds(starts.first().copied().unwrap_or(a)),
            frame: seconds(frame),
            values: frames.iter().map(|f| f.f0).collect(),
        },
        voiced: frames.iter().map(|f| f.voiced).collect(),
        strength: frames.iter().map(|f| f.strength).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VoiceQuality {
    pub jitter: Option<f64>,
    pub shimmer: Option<f64>,
    pub hnr: Option<f64>,
}

const HNR_CLAMP: f64 = 1e-9;

/// Voice quality of `[ta, tb]` given a pitch track that covers it.
pub fn voice_quality_from_track(audio: AudioView<'_>, track: &PitchTrack, ta: f64, tb: f64, cfg: &DspConfig) -> VoiceQuality {
    let frames: Vec<usize> = track.f0.within(ta, tb).filter(|(i, _)| track.voiced[*i]).map(|(i, _)| i).collect();
    if frames.is_empty() {
        return VoiceQuality::default();
    }
    let r = frames.iter().map(|&i| track.strength[i]).sum::<f64>() / frames.len() as f64;
    let r = r.clamp(HNR_CLAMP, 1.0 - HNR_CLAMP);
    let hnr = Some(10.0 * (r / (1.0 - r)).log10());

    let sr = SAMPLE_RATE as f64;
    let a = ((ta.max(audio.t_start()) * sr).ceil() as usize).max(audio.start);
    let b = ((tb.min(audio.t_end()) * sr).floor() as usize).min(audio.end());
    if b <= a + 1 {
        return VoiceQuality { hnr, ..Default::default() };
    }
    let x = audio.slice(a, b);
    // Positive-going zero crossings, in fractional samples from `a`.
    let marks: Vec<f64> = (1..x.len())
        .filter(|&i| x[i - 1] < 0.0 && x[i] >= 0.0)
        .map(|i| (i - 1) as f64 + x[i - 1] / (x[i - 1] - x[i]))
        .collect();

    // Local reference period from the nearest voiced frame.
    let local_period = |t: f64| -> Option<f64> {
        let centre = ((a as f64 + t) / sr - track.f0.t0 - track.f0.frame / 2.0) / track.f0.hop;
        let k = centre.round();
        if k < 0.0 || k as usize >= track.voiced.len() {
            return None;
        }
        let k = k as usize;
        (track.voiced[k] && frames.binary_search(&k).is_ok()).then(|| sr / track.f0.values[k])
    };

    // Chains of consecutive accepted periods: (length, peak amplitude).
    let mut chains: Vec<Vec<(f64, f64)>> = Vec::new();
    let mut current: Vec<(f64, f64)> = Vec::new();
    let mut i = 0;
    while i < marks.len() {
        let m = marks[i];
        let mut next = None;
        if let Some(t0) = local_period(m) {
            for (j, &mj) in marks.iter().enumerate().skip(i + 1) {
                let d = mj - m;
                if d > t0 * (1.0 + cfg.period_tolerance) {
                    break;
                }
                if d >= t0 * (1.0 - cfg.period_tolerance) {
                    next = Some(j);
                    break;
                }
            }
        }
        match next {
            Some(j) => {
                let lo = m.ceil() as usize;
                let hi = (marks[j].floor() as usize + 1).min(x.len());
                let amp = x[lo..hi].iter().copied().fold(f64::MIN, f64::max);
                current.push((marks[j] - m, amp));
                i = j;
            }
            None => {
                if !current.is_empty() {
                    chains.push(std::mem::take(&mut current));
                }
                i += 1;
            }
        }
    }
    if !current.is_empty() {
        chains.push(current);
    }
    let periods: Vec<&(f64, f64)> = chains.iter().flatten().collect();
    let pairs: Vec<(&(f64, f64), &(f64, f64))> = chains.iter().flat_map(|c| c.iter().zip(c.iter().skip(1))).collect();
    if periods.len() < 2 || pairs.is_empty() {
        return VoiceQuality { hnr, ..Default::default() };
    }
    let mean_t = periods.iter().map(|p| p.0).sum::<f64>() / periods.len() as f64;
    let mean_a = periods.iter().map(|p| p.1).sum::<f64>() / periods.len() as f64;
    let n = pairs.len() as f64;
    let jitter = pairs.iter().map(|(p, q)| (q.0 - p.0).abs()).sum::<f64>() / n / mean_t;
    let shimmer = if mean_a > 0.0 {
        Some(pairs.iter().map(|(p, q)| (q.1 - p.1).abs()).sum::<f64>() / n / mean_a)
    } else {
        None
    };
    VoiceQuality {
        jitter: Some(jitter),
        shimmer,
        hnr,
    }
}

pub fn voice_quality(audio: AudioView<'_>, ta: f64, tb: f64, cfg: &DspConfig) -> Result<VoiceQuality> {
    let track = pitch_track(audio, ta, tb, cfg)?;
    Ok(voice_quality_from_track(audio, &track, ta, tb, cfg))
}

/// Mean, max, min and population standard deviation; `None` when empty.
pub fn summary(values: &[f64]) -> Option<[f64; 4]> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let max = values.iter().copied().fold(f64::MIN, f64::max);
    let min = values.iter().copied().fold(f64::MAX, f64::min);
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some([mean, max, min, var.sqrt()])
}

pub const ACOUSTIC_LEN: usize = 15;
pub const ACOUSTIC_STEP_LEN: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcousticBlock {
    pub values: [f64; ACOUSTIC_LEN],
    /// False where the statistic had no data; the value is then 0.
    pub defined: [bool; ACOUSTIC_LEN],
    /// Set when either window extends past the available audio.
    pub truncated: bool,
}

/// Energy and pitch tracks around one utterance end, shared by the aggregate
/// block and the per-step sequence values.
#[derive(Debug, Clone)]
pub struct AcousticTracks {
    pub t_end: f64,
    pub energy: FrameSeries,
    pub pitch: PitchTrack,
    pub truncated: bool,
}

fn put(values: &mut [f64], defined: &mut [bool], at: usize, v: Option<f64>) {
    if let Some(v) = v.filter(|v| v.is_finite()) {
        values[at] = v;
        defined[at] = true;
    }
}

impl AcousticTracks {
    /// Tracks over `[t_end - lead, t_end + post]`, clipped to the audio span.
    pub fn compute(audio: AudioView<'_>, t_end: f64, lead: f64, post: f64, cfg: &DspConfig) -> Result<Self> {
        let lo = (t_end - lead).max(audio.t_start());
        let hi = (t_end + post).min(audio.t_end());
        let truncated = t_end - 2.0 < audio.t_start() - 1e-9 || t_end + 2.0 > audio.t_end() + 1e-9;
        let empty = |t: f64| FrameSeries {
            hop: cfg.hop_ms / 1000.0,
            t0: t,
            frame: cfg.frame_ms / 1000.0,
            values: Vec::new(),
        };
        let energy = if hi > lo { frame_energy(audio, lo, hi, cfg)? } else { empty(lo) };
        let pitch_hi = t_end.min(hi);
        let pitch = if pitch_hi > lo {
            pitch_track(audio, lo, pitch_hi, cfg)?
        } else {
            PitchTrack {
                f0: empty(lo),
                voiced: Vec::new(),
                strength: Vec::new(),
            }
        };
        Ok(Self {
            t_end,
            energy,
            pitch,
            truncated,
        })
    }

    fn energy_in(&self, ta: f64, tb: f64) -> Vec<f64> {
        self.energy.within(ta, tb).map(|(_, v)| v).collect()
    }

    /// Energy before and after the end, pitch and voice quality before it.
    pub fn block(&self, audio: AudioView<'_>, cfg: &DspConfig) -> AcousticBlock {
        let t = self.t_end;
        let mut values = [0.0; ACOUSTIC_LEN];
        let mut defined = [false; ACOUSTIC_LEN];
        for (w, (ta, tb)) in [(t - 2.0, t), (t, t + 2.0)].into_iter().enumerate() {
            if let Some(s) = summary(&self.energy_in(ta, tb)) {
                for (k, v) in s.into_iter().enumerate() {
                    put(&mut values, &mut defined, 4 * w + k, Some(v));
                }
            }
        }
        if let Some(s) = summary(&self.pitch.voiced_f0(t - 2.0, t)) {
            for (k, v) in s.into_iter().enumerate() {
                put(&mut values, &mut defined, 8 + k, Some(v));
            }
        }
        let vq = voice_quality_from_track(audio, &self.pitch, t - 2.0, t, cfg);
        put(&mut values, &mut defined, 12, vq.jitter);
        put(&mut values, &mut defined, 13, vq.shimmer);
        put(&mut values, &mut defined, 14, vq.hnr);
        AcousticBlock {
            values,
            defined,
            truncated: self.truncated,
        }
    }

    /// Energy stats, pitch mean/std and voice quality over the trailing
    /// `span` seconds before `tk`; pitch and voice quality stop at the end.
    pub fn step(&self, audio: AudioView<'_>, tk: f64, span: f64, cfg: &DspConfig) -> ([f64; ACOUSTIC_STEP_LEN], [bool; ACOUSTIC_STEP_LEN]) {
        let mut values = [0.0; ACOUSTIC_STEP_LEN];
        let mut defined = [false; ACOUSTIC_STEP_LEN];
        if let Some(s) = summary(&self.energy_in(tk - span, tk)) {
            for (k, v) in s.into_iter().enumerate() {
                put(&mut values, &mut defined, k, Some(v));
            }
        }
        let tb = tk.min(self.t_end);
        if tb > tk - span {
            if let Some(s) = summary(&self.pitch.voiced_f0(tk - span, tb)) {
                put(&mut values, &mut defined, 4, Some(s[0]));
                put(&mut values, &mut defined, 5, Some(s[3]));
            }
            let vq = voice_quality_from_track(audio, &self.pitch, tk - span, tb, cfg);
            put(&mut values, &mut defined, 6, vq.jitter);
            put(&mut values, &mut defined, 7, vq.shimmer);
            put(&mut values, &mut defined, 8, vq.hnr);
        }
        (values, defined)
    }
}

/// The 15 acoustic statistics of one utterance end.
pub fn acoustic_block(audio: AudioView<'_>, t_end: f64, cfg: &DspConfig) -> Result<AcousticBlock> {
    let tracks = AcousticTracks::compute(audio, t_end, 2.0, 2.0, cfg)?;
    Ok(tracks.block(audio, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    const SR: f64 = SAMPLE_RATE as f64;

    fn sine(f: f64, amp: f64, secs: f64) -> Vec<f64> {
        (0..(secs * SR) as usize).map(|i| amp * (2.0 * PI * f * i as f64 / SR).sin()).collect()
    }

    #[test]
    fn silence_energy_is_zero_and_unvoiced() {
        let x = vec![0.0; 16000];
        let v = AudioView::new(&x, 0);
        let e = frame_energy(v, 0.0, 1.0, &DspConfig::default()).unwrap();
        assert!(!e.values.is_empty() && e.values.iter().all(|&r| r == 0.0));
        let p = pitch_track(v, 0.0, 1.0, &DspConfig::default()).unwrap();
        assert!(p.voiced.iter().all(|&b| !b));
        assert_eq!(voice_quality(v, 0.0, 1.0, &DspConfig::default()).unwrap(), VoiceQuality::default());
    }

    #[test]
    fn square_and_sine_rms() {
        let sq: Vec<f64> = (0..16000).map(|i| if (i / 40) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let e = frame_energy(AudioView::new(&sq, 0), 0.0, 1.0, &DspConfig::default()).unwrap();
        assert!(e.values.iter().all(|&r| (r - 1.0).abs() < 1e-12));
        for f in [220.0, 250.0, 333.0] {
            let s = sine(f, 0.5, 1.0);
            let e = frame_energy(AudioView::new(&s, 0), 0.0, 1.0, &DspConfig::default()).unwrap();
            let mean = e.values.iter().sum::<f64>() / e.values.len() as f64;
            assert!((mean - 0.5 / 2f64.sqrt()).abs() < 1e-3, "{f} Hz: {mean}");
        }
    }

    #[test]
    fn window_outside_stream_is_an_error() {
        let x = vec![0.0; 16000];
        let v = AudioView::new(&x, 0);
        assert!(frame_energy(v, 0.5, 1.5, &DspConfig::default()).is_err());
        assert!(frame_energy(v, 0.5, 0.5, &DspConfig::default()).is_err());
    }

    #[test]
    fn offset_view_matches_full_stream() {
        let x = sine(180.0, 0.3, 3.0);
        let cfg = DspConfig::default();
        let full = pitch_track(AudioView::new(&x, 0), 1.0, 2.0, &cfg).unwrap();
        let part = pitch_track(AudioView::new(&x[8000..], 8000), 1.0, 2.0, &cfg).unwrap();
        assert_eq!(full, part);
    }

    #[test]
    fn silence_block_has_zero_energy_and_undefined_pitch() {
        let x = vec![0.0; 6 * 16000];
        let b = acoustic_block(AudioView::new(&x, 0), 3.0, &DspConfig::default()).unwrap();
        assert!(b.values.iter().all(|&v| v == 0.0));
        assert!(b.defined[..8].iter().all(|&d| d));
        assert!(b.defined[8..].iter().all(|&d| !d));
        assert!(!b.truncated);
    }

    #[test]
    fn late_end_is_flagged_truncated() {
        let x = sine(200.0, 0.3, 4.0);
        let b = acoustic_block(AudioView::new(&x, 0), 3.0, &DspConfig::default()).unwrap();
        assert!(b.truncated);
        assert!(b.defined[4]);
    }
}
