//! Energy voice activity detection, utterance fusion and cumulative speech.
//!
//! Frames sit on a fixed grid of `hop` samples. A frame is active when its
//! RMS level exceeds `max(noise_floor + threshold_db, floor_dbfs)`, where the
//! noise floor is a low percentile of the frame levels seen over a rolling
//! window. Runs of at most `hangover` inactive frames inside speech are
//! bridged. Interval edges are then refined to 1 ms blocks so that gap
//! lengths are accurate to the block size rather than the hop.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::dataset::SAMPLE_RATE;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VadConfig {
    pub frame_ms: f64,
    pub hop_ms: f64,
    /// Margin above the adaptive noise floor, dB.
    pub threshold_db: f64,
    /// Absolute activity floor, dBFS.
    pub floor_dbfs: f64,
    pub hangover_ms: f64,
    pub noise_window_s: f64,
    pub noise_percentile: f64,
    pub refine_ms: f64,
    /// Silence separating two utterances of the same speaker.
    pub utterance_gap_ms: f64,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self {
            frame_ms: 25.0,
            hop_ms: 10.0,
            threshold_db: 9.0,
            floor_dbfs: -45.0,
            hangover_ms: 200.0,
            noise_window_s: 30.0,
            noise_percentile: 10.0,
            refine_ms: 1.0,
            utterance_gap_ms: 750.0,
        }
    }
}

impl VadConfig {
    fn samples(ms: f64) -> usize {
        (ms * SAMPLE_RATE as f64 / 1000.0).round() as usize
    }

    pub fn frame_len(&self) -> usize {
        Self::samples(self.frame_ms)
    }

    pub fn hop_len(&self) -> usize {
        Self::samples(self.hop_ms)
    }

    pub fn block_len(&self) -> usize {
        Self::samples(self.refine_ms).max(1)
    }

    pub fn hangover_frames(&self) -> usize {
        (self.hangover_ms / self.hop_ms).round() as usize
    }

    pub fn gap_seconds(&self) -> f64 {
        self.utterance_gap_ms / 1000.0
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.frame_ms > 0.0
            && self.hop_ms > 0.0
            && self.hop_ms <= self.frame_ms
            && self.hangover_ms >= 0.0
            && self.noise_window_s > 0.0
            && (0.0..=100.0).contains(&self.noise_percentile)
            && self.refine_ms > 0.0
            && self.refine_ms <= self.hop_ms
            && self.utterance_gap_ms >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("inconsistent VAD settings {self:?}")))
        }
    }

    /// Samples of look-ahead needed before activity up to a given sample is final.
    pub fn lookahead(&self) -> usize {
        self.frame_len() + self.hop_len()
    }
}

/// Half-open interval of samples `[start, end)` in which a participant speaks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeechInterval {
    pub participant_id: String,
    pub t_start: f64,
    pub t_end: f64,
}

impl SpeechInterval {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub utterance_id: String,
    pub speaker_id: String,
    pub t_start: f64,
    pub t_end: f64,
    pub duration: f64,
}

fn db(mean_square: f64) -> f64 {
    if mean_square <= 1e-12 {
        -120.0
    } else {
        (10.0 * mean_square.log10()).max(-120.0)
    }
}

const BIN_DB: f64 = 0.5;
const N_BINS: usize = 240;

/// Rolling histogram of frame levels for the noise floor percentile.
#[derive(Debug, Clone)]
struct NoiseFloor {
    bins: Vec<u32>,
    history: VecDeque<u16>,
    capacity: usize,
    percentile: f64,
}

impl NoiseFloor {
    fn new(capacity: usize, percentile: f64) -> Self {
        Self {
            bins: vec![0; N_BINS],
            history: VecDeque::with_capacity(capacity + 1),
            capacity,
            percentile,
        }
    }

    fn push(&mut self, level: f64) {
        let bin = (((level + 120.0) / BIN_DB).floor().max(0.0) as usize).min(N_BINS - 1);
        self.bins[bin] += 1;
        self.history.push_back(bin as u16);
        if self.history.len() > self.capacity {
            let old = self.history.pop_front().unwrap();
            self.bins[old as usize] -= 1;
        }
    }

    fn floor(&self) -> f64 {
        let n = self.history.len();
        if n == 0 {
            return -120.0;
        }
        let rank = ((self.percentile / 100.0) * n as f64).ceil().max(1.0) as u32;
        let mut acc = 0;
        for (i, &c) in self.bins.iter().enumerate() {
            acc += c;
            if acc >= rank {
                return -120.0 + i as f64 * BIN_DB;
            }
        }
        0.0
    }
}

/// Streaming VAD over one channel. Offline detection feeds the whole signal
/// through the same engine.
#[derive(Debug, Clone)]
pub struct VadEngine {
    cfg: VadConfig,
    frame: usize,
    hop: usize,
    block: usize,
    hangover: usize,
    /// Recent samples; `buf[0]` is absolute sample `buf_offset`.
    buf: VecDeque<f64>,
    buf_offset: usize,
    total: usize,
    next_frame: usize,
    noise: NoiseFloor,
    /// Current run: refined start, last active frame index and its threshold.
    run: Option<Run>,
    inactive: usize,
    closed: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy)]
struct Run {
    start: usize,
    last_active: usize,
    last_threshold: f64,
}

impl VadEngine {
    pub fn new(cfg: VadConfig) -> Result<Self> {
        cfg.validate()?;
        let hop = cfg.hop_len();
        let capacity = ((cfg.noise_window_s * 1000.0) / cfg.hop_ms).round().max(1.0) as usize;
        Ok(Self {
            cfg,
            frame: cfg.frame_len(),
            hop,
            block: cfg.block_len(),
            hangover: cfg.hangover_frames(),
            buf: VecDeque::new(),
            buf_offset: 0,
            total: 0,
            next_frame: 0,
            noise: NoiseFloor::new(capacity, cfg.noise_percentile),
            run: None,
            inactive: 0,
            closed: Vec::new(),
        })
    }

    pub fn config(&self) -> &VadConfig {
        &self.cfg
    }

    /// Number of samples consumed so far.
    pub fn samples_seen(&self) -> usize {
        self.total
    }

    fn sample(&self, abs: usize) -> f64 {
        self.buf[abs - self.buf_offset]
    }

    fn mean_square(&self, start: usize, len: usize) -> f64 {
        (start..start + len).map(|i| self.sample(i).powi(2)).sum::<f64>() / len as f64
    }

    /// First 1 ms block at or after `from` whose level exceeds `threshold`.
    fn refine_start(&self, from: usize, to: usize, threshold: f64) -> usize {
        let mut b = from - from % self.block;
        while b + self.block <= to {
            if db(self.mean_square(b, self.block)) > threshold {
                return b;
            }
            b += self.block;
        }
        from
    }

    /// End of the last block in `[from, to)` whose level exceeds `threshold`.
    fn refine_end(&self, from: usize, to: usize, threshold: f64) -> usize {
        let mut b = to - to % self.block;
        while b >= from + self.block {
            if db(self.mean_square(b - self.block, self.block)) > threshold {
                return b;
            }
            b -= self.block;
        }
        to
    }

    fn close_run(&mut self) {
        if let Some(run) = self.run.take() {
            let f_start = run.last_active * self.hop;
            let end = self.refine_end(f_start, f_start + self.frame, run.last_threshold);
            if end > run.start {
                self.closed.push((run.start, end));
            }
        }
        self.inactive = 0;
    }

    pub fn push(&mut self, samples: &[f64]) {
        self.buf.extend(samples.iter().copied());
        self.total += samples.len();
        loop {
            let start = self.next_frame * self.hop;
            if start + self.frame > self.total {
                break;
            }
            let level = db(self.mean_square(start, self.frame));
            let threshold = (self.noise.floor() + self.cfg.threshold_db).max(self.cfg.floor_dbfs);
            let active = level > threshold;
            if active {
                match self.run.as_mut() {
                    Some(run) => {
                        run.last_active = self.next_frame;
                        run.last_threshold = threshold;
                    }
                    None => {
                        let from = start.saturating_sub(self.hop).max(self.buf_offset);
                        let refined = self.refine_start(from, start + self.frame, threshold);
                        self.run = Some(Run {
                            start: refined,
                            last_active: self.next_frame,
                            last_threshold: threshold,
                        });
                    }
                }
                self.inactive = 0;
            } else if self.run.is_some() {
                self.inactive += 1;
                if self.inactive > self.hangover {
                    self.close_run();
                }
            }
            self.noise.push(level);
            self.next_frame += 1;
            // Keep one hop of history before the next frame plus any open run's last frame.
            let keep_from = {
                let next = (self.next_frame * self.hop).saturating_sub(self.hop);
                match self.run {
                    Some(run) => next.min(run.last_active * self.hop),
                    None => next,
                }
            };
            while self.buf_offset < keep_from && !self.buf.is_empty() {
                self.buf.pop_front();
                self.buf_offset += 1;
            }
        }
    }

    pub fn push_pcm(&mut self, pcm: &[i16]) {
        let samples: Vec<f64> = pcm.iter().map(|&s| s as f64 / 32768.0).collect();
        self.push(&samples);
    }

    /// Closed intervals since the last call, as `[start, end)` sample indices.
    pub fn drain_closed(&mut self) -> Vec<(usize, usize)> {
        std::mem::take(&mut self.closed)
    }

    /// Start sample of a run that is still open (speech or hangover).
    pub fn open_start(&self) -> Option<usize> {
        self.run.map(|r| r.start)
    }

    /// Earliest sample at which an interval that is not yet closed could
    /// start. Everything before it is settled.
    pub fn settled_until(&self) -> usize {
        match self.run {
            Some(r) => r.start,
            None => (self.next_frame * self.hop).saturating_sub(self.hop),
        }
    }

    /// Closes any open run at end of stream.
    pub fn finish(&mut self) {
        self.close_run();
    }
}

fn to_seconds(s: usize) -> f64 {
    s as f64 / SAMPLE_RATE as f64
}

/// Speech intervals of a complete channel. An empty stream yields no intervals.
pub fn detect_voice_activity(audio: &[i16], participant_id: &str, cfg: &VadConfig) -> Result<Vec<SpeechInterval>> {
    let mut vad = VadEngine::new(*cfg)?;
    for chunk in audio.chunks(1 << 16) {
        vad.push_pcm(chunk);
    }
    vad.finish();
    Ok(vad
        .drain_closed()
        .into_iter()
        .map(|(a, b)| SpeechInterval {
            participant_id: participant_id.to_string(),
            t_start: to_seconds(a),
            t_end: to_seconds(b),
        })
        .collect())
}

/// Fuses each participant's intervals across gaps strictly shorter than
/// `silence_threshold` and returns utterances sorted by end time.
pub fn segment_utterances(
    activity: &BTreeMap<String, Vec<SpeechInterval>>,
    silence_threshold: f64,
) -> Result<Vec<Utterance>> {
    if !(silence_threshold >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "negative silence threshold {silence_threshold}"
        )));
    }
    let mut out = Vec::new();
    for (pid, intervals) in activity {
        let mut fused: Vec<(f64, f64)> = Vec::new();
        for iv in intervals {
            match fused.last_mut() {
                Some(last) if iv.t_start - last.1 < silence_threshold => last.1 = last.1.max(iv.t_end),
                _ => fused.push((iv.t_start, iv.t_end)),
            }
        }
        for (n, (s, e)) in fused.into_iter().enumerate() {
            out.push(Utterance {
                utterance_id: utterance_id(pid, n + 1),
                speaker_id: pid.clone(),
                t_start: s,
                t_end: e,
                duration: e - s,
            });
        }
    }
    out.sort_by(|a, b| {
        a.t_end
            .total_cmp(&b.t_end)
            .then_with(|| a.speaker_id.cmp(&b.speaker_id))
    });
    Ok(out)
}

pub fn utterance_id(pid: &str, n: usize) -> String {
    format!("{pid}-{n:04}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeechAccounting {
    /// Every participant's speech counts; overlap is counted once per speaker.
    #[default]
    PerParticipantSum,
    /// Wall-clock time during which anyone speaks.
    Union,
}

/// Speech time in `[episode.0, t]` over all participants.
pub fn cumulative_speech(
    episode: (f64, f64),
    t: f64,
    activity: &BTreeMap<String, Vec<SpeechInterval>>,
    mode: SpeechAccounting,
) -> Result<f64> {
    if t < episode.0 || t > episode.1 {
        return Err(Error::OutsideEpisode {
            t,
            start: episode.0,
            end: episode.1,
        });
    }
    let clipped = activity.values().flatten().filter_map(|iv| {
        let a = iv.t_start.max(episode.0);
        let b = iv.t_end.min(t);
        (b > a).then_some((a, b))
    });
    Ok(match mode {
        SpeechAccounting::PerParticipantSum => clipped.map(|(a, b)| b - a).sum(),
        SpeechAccounting::Union => {
            let mut spans: Vec<(f64, f64)> = clipped.collect();
            spans.sort_by(|x, y| x.0.total_cmp(&y.0));
            let mut total = 0.0;
            let mut cur: Option<(f64, f64)> = None;
            for (a, b) in spans {
                match cur.as_mut() {
                    Some(c) if a <= c.1 => c.1 = c.1.max(b),
                    _ => {
                        if let Some(c) = cur {
                            total += c.1 - c.0;
                        }
                        cur = Some((a, b));
                    }
                }
            }
            total + cur.map_or(0.0, |c| c.1 - c.0)
        }
    })
}

/// Silence before `t` across all channels, ignoring speech that ends within
/// `slack` seconds after `since` (the triggering utterance's own tail).
pub fn trailing_silence(
    since: f64,
    t: f64,
    activity: &BTreeMap<String, Vec<SpeechInterval>>,
    slack: f64,
) -> f64 {
    let mut last = since;
    for iv in activity.values().flatten() {
        if iv.t_start <= t && iv.t_end > since + slack {
            if iv.t_end >= t {
                return 0.0;
            }
            last = last.max(iv.t_end);
        }
    }
    t - last
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(pid: &str, a: f64, b: f64) -> SpeechInterval {
        SpeechInterval {
            participant_id: pid.into(),
            t_start: a,
            t_end: b,
        }
    }

    fn one(pid: &str, ivs: Vec<SpeechInterval>) -> BTreeMap<String, Vec<SpeechInterval>> {
        BTreeMap::from([(pid.to_string(), ivs)])
    }

    #[test]
    fn gap_boundary_convention() {
        for (gap, expected) in [(0.7, 1), (0.75, 2), (0.8, 2)] {
            let a = one("p1", vec![iv("p1", 1.0, 2.0), iv("p1", 2.0 + gap, 3.0 + gap)]);
            assert_eq!(segment_utterances(&a, 0.75).unwrap().len(), expected, "gap {gap}");
        }
    }

    #[test]
    fn negative_threshold_rejected() {
        assert!(segment_utterances(&BTreeMap::new(), -0.1).is_err());
    }

    #[test]
    fn digital_silence_has_no_activity() {
        let out = detect_voice_activity(&vec![0i16; 64_000], "p1", &VadConfig::default()).unwrap();
        assert!(out.is_empty());
        assert!(detect_voice_activity(&[], "p1", &VadConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn cumulative_speech_conventions() {
        let a = BTreeMap::from([
            ("p1".to_string(), vec![iv("p1", 10.0, 40.0)]),
            ("p2".to_string(), vec![iv("p2", 10.0, 40.0)]),
        ]);
        let ep = (0.0, 100.0);
        assert_eq!(cumulative_speech(ep, 50.0, &BTreeMap::new(), SpeechAccounting::PerParticipantSum).unwrap(), 0.0);
        assert_eq!(cumulative_speech(ep, 50.0, &a, SpeechAccounting::PerParticipantSum).unwrap(), 60.0);
        assert_eq!(cumulative_speech(ep, 50.0, &a, SpeechAccounting::Union).unwrap(), 30.0);
        assert!(cumulative_speech(ep, 150.0, &a, SpeechAccounting::Union).is_err());
    }

    #[test]
    fn trailing_silence_ignores_own_tail() {
        let a = BTreeMap::from([
            ("p1".to_string(), vec![iv("p1", 5.0, 10.02)]),
            ("p2".to_string(), vec![iv("p2", 11.0, 11.5)]),
        ]);
        assert!((trailing_silence(10.0, 12.0, &a, 0.05) - 0.5).abs() < 1e-12);
        assert!((trailing_silence(10.0, 10.9, &a, 0.05) - 0.9).abs() < 1e-12);
        assert_eq!(trailing_silence(10.0, 11.2, &a, 0.05), 0.0);
    }

    fn noise(n: usize, dbfs: f64, seed: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = 10f64.powf(dbfs / 20.0) * 3f64.sqrt();
        (0..n).map(|_| rng.gen_range(-a..a)).collect()
    }

    fn pcm(x: &[f64]) -> Vec<i16> {
        x.iter().map(|&v| crate::dataset::f64_to_pcm(v)).collect()
    }

    #[test]
    fn tone_in_noise_gives_one_interval() {
        let sr = SAMPLE_RATE as usize;
        let mut x = noise(4 * sr, -60.0, 1);
        let amp = 10f64.powf(-6.0 / 20.0) * 2f64.sqrt();
        for i in 2 * sr..3 * sr {
            x[i] += amp * (2.0 * std::f64::consts::PI * 220.0 * i as f64 / sr as f64).sin();
        }
        let out = detect_voice_activity(&pcm(&x), "p1", &VadConfig::default()).unwrap();
        assert_eq!(out.len(), 1, "{out:?}");
        assert!((out[0].t_start - 2.0).abs() <= 0.025, "{:?}", out[0]);
        assert!((out[0].t_end - 3.0).abs() <= 0.025, "{:?}", out[0]);
    }

    #[test]
    fn short_pause_is_bridged_by_fusion() {
        let sr = SAMPLE_RATE as usize;
        let mut x = noise(5 * sr, -60.0, 2);
        for (a, b) in [(1.0, 2.0), (2.5, 3.5)] {
            for i in (a * sr as f64) as usize..(b * sr as f64) as usize {
                x[i] += 0.3 * (2.0 * std::f64::consts::PI * 180.0 * i as f64 / sr as f64).sin();
            }
        }
        let cfg = VadConfig::default();
        let ivs = detect_voice_activity(&pcm(&x), "p1", &cfg).unwrap();
        assert_eq!(ivs.len(), 2);
        let u = segment_utterances(&one("p1", ivs), cfg.gap_seconds()).unwrap();
        assert_eq!(u.len(), 1);
        assert!((u[0].duration - 2.5).abs() < 0.03);
    }

    #[test]
    fn streaming_matches_offline_for_any_chunking() {
        let sr = SAMPLE_RATE as usize;
        let mut x = noise(3 * sr, -55.0, 3);
        for i in sr / 2..sr * 2 {
            x[i] += 0.2 * (i as f64 * 0.07).sin();
        }
        let p = pcm(&x);
        let cfg = VadConfig::default();
        let offline = detect_voice_activity(&p, "p1", &cfg).unwrap();
        for chunk in [1usize, 37, 160, 1000] {
            let mut vad = VadEngine::new(cfg).unwrap();
            for c in p.chunks(chunk) {
                vad.push_pcm(c);
            }
            vad.finish();
            let got: Vec<(f64, f64)> = vad
                .drain_closed()
                .into_iter()
                .map(|(a, b)| (to_seconds(a), to_seconds(b)))
                .collect();
            let want: Vec<(f64, f64)> = offline.iter().map(|i| (i.t_start, i.t_end)).collect();
            assert_eq!(got, want, "chunk {chunk}");
        }
    }
}
