//! Online decision engine: per-channel VAD, utterance-end detection and one
//! decision two seconds after every utterance end.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use topic_learn::metrics::{f1_per_class, macro_f1};

use crate::baselines::{spb_classify, SpbConfig, SpbDecision};
use crate::dataset::{pcm_to_f64, AnnotationRecord, DecisionLabel, RobotPose, Session, SkeletonFrame, SAMPLE_RATE};
use crate::dsp::AudioView;
use crate::error::{Error, Result};
use crate::featurize::{
    extract_at, manifest_hash, participant_key, Context, ExtractorConfig, FeatureSequence, FeatureVector,
    ParticipantStats,
};
use crate::harness::Pipeline;
use crate::segmentation::{cumulative_speech, trailing_silence, utterance_id, SpeechInterval, VadEngine};

const SR: f64 = SAMPLE_RATE as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyAction {
    ChangeTopic,
    FollowUp,
    Wait,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    /// Episode speech from which an "appropriate" label changes the topic.
    pub speech_floor: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { speech_floor: 60.0 }
    }
}

impl PolicyConfig {
    pub fn action(&self, outcome: Outcome, cumulative_speech: f64) -> PolicyAction {
        match outcome {
            Outcome::Label(DecisionLabel::Needed) | Outcome::Spb(SpbDecision::AppropriateOrNeeded) => PolicyAction::ChangeTopic,
            Outcome::Label(DecisionLabel::Appropriate) if cumulative_speech >= self.speech_floor => PolicyAction::ChangeTopic,
            Outcome::Label(DecisionLabel::Appropriate) => PolicyAction::FollowUp,
            Outcome::Label(DecisionLabel::NotAppropriate) | Outcome::Spb(SpbDecision::NotAppropriate) => PolicyAction::Wait,
        }
    }
}

/// Classifier output: a three-class label or the binary rule's verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Outcome {
    Label(DecisionLabel),
    Spb(SpbDecision),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub utterance_id: String,
    pub speaker_id: String,
    pub t_start: f64,
    pub t_end: f64,
    /// Moment the decision refers to: utterance end plus the grace window.
    pub t_decision: f64,
    /// Stream clock when the decision was computed.
    pub emitted_at: f64,
    pub outcome: Outcome,
    pub probabilities: Vec<f64>,
    pub policy_action: PolicyAction,
    pub cumulative_speech: f64,
    pub trailing_silence: f64,
    /// Raw feature vector, kept when the engine is configured to record it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<FeatureVector>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamCounters {
    pub audio_regressions: usize,
    pub audio_gaps: usize,
    pub skeleton_regressions: usize,
    pub utterances: usize,
    pub cancelled: usize,
    pub decisions: usize,
}

pub enum Classifier {
    Model(Box<Pipeline>),
    Spb(SpbConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamConfig {
    pub extractor: ExtractorConfig,
    /// Seconds of audio and skeleton kept per stream.
    pub horizon: f64,
    pub policy: PolicyConfig,
    /// Start a new topic episode after every change-topic action.
    pub auto_episode: bool,
    /// Attach the raw feature vector to every decision.
    pub record_features: bool,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            extractor: ExtractorConfig::default(),
            horizon: 8.0,
            policy: PolicyConfig::default(),
            auto_episode: true,
            record_features: false,
        }
    }
}

struct Channel {
    id: String,
    vad: VadEngine,
    buf: Vec<f64>,
    /// Absolute index of `buf[0]`.
    offset: usize,
    /// Utterance being built from closed intervals.
    current: Option<(f64, f64)>,
    count: usize,
}

impl Channel {
    fn seen(&self) -> usize {
        self.vad.samples_seen()
    }
}

struct Pending {
    utterance_id: String,
    speaker: usize,
    t_start: f64,
    t_end: f64,
    t_decision: f64,
}

/// Live state owner. Pushes and polls must come from one caller.
pub struct StreamEngine {
    cfg: StreamConfig,
    session_id: String,
    channels: Vec<Channel>,
    ids: Vec<String>,
    robot: RobotPose,
    skeleton: Vec<SkeletonFrame>,
    last_skeleton: f64,
    /// Closed intervals newer than the horizon, per participant.
    recent: BTreeMap<String, Vec<SpeechInterval>>,
    /// Episode speech of intervals already dropped from `recent`.
    banked_speech: f64,
    episode_start: f64,
    pending: Vec<Pending>,
    ready: Vec<Decision>,
    classifier: Classifier,
    self_stats: BTreeMap<String, (ParticipantStats, Option<ParticipantStats>)>,
    counters: StreamCounters,
}

impl StreamEngine {
    pub fn new(session_id: &str, participants: &[String], robot: RobotPose, classifier: Classifier, cfg: StreamConfig) -> Result<Self> {
        cfg.extractor.validate()?;
        if participants.len() < 2 {
            return Err(Error::TooFewParticipants(participants.len()));
        }
        let need = cfg.extractor.lead() + cfg.extractor.context + 0.5;
        if cfg.horizon < need {
            return Err(Error::InvalidConfig(format!("horizon {} s is shorter than the {need} s a decision reads", cfg.horizon)));
        }
        if let Classifier::Model(p) = &classifier {
            let expected = manifest_hash(&cfg.extractor);
            if p.manifest_hash != expected {
                return Err(Error::Learn(topic_learn::LearnError::ManifestMismatch {
                    model: p.manifest_hash.clone(),
                    input: expected,
                }));
            }
        }
        let channels = participants
            .iter()
            .map(|id| {
                Ok(Channel {
                    id: id.clone(),
                    vad: VadEngine::new(cfg.extractor.vad)?,
                    buf: Vec::new(),
                    offset: 0,
                    current: None,
                    count: 0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            session_id: session_id.to_string(),
            channels,
            ids: participants.to_vec(),
            robot,
            skeleton: Vec::new(),
            last_skeleton: f64::NEG_INFINITY,
            recent: participants.iter().map(|p| (p.clone(), Vec::new())).collect(),
            banked_speech: 0.0,
            episode_start: 0.0,
            pending: Vec::new(),
            ready: Vec::new(),
            classifier,
            self_stats: BTreeMap::new(),
            counters: StreamCounters::default(),
        })
    }

    pub fn counters(&self) -> &StreamCounters {
        &self.counters
    }

    /// Seconds processed on every channel.
    pub fn clock(&self) -> f64 {
        self.channels.iter().map(Channel::seen).min().unwrap_or(0) as f64 / SR
    }

    /// Longest audio or skeleton span currently held, in seconds.
    pub fn buffered_seconds(&self) -> f64 {
        let audio = self.channels.iter().map(|c| c.buf.len()).max().unwrap_or(0) as f64 / SR;
        let skel = match (self.skeleton.first(), self.skeleton.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        };
        audio.max(skel)
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    /// Marks a robot topic prompt at `t`.
    pub fn begin_episode(&mut self, t: f64) {
        self.episode_start = t;
        self.banked_speech = 0.0;
    }

    fn channel_index(&self, participant: &str) -> Result<usize> {
        self.ids.iter().position(|p| p == participant).ok_or_else(|| Error::UnknownParticipant {
            file: "stream".into(),
            id: participant.to_string(),
        })
    }

    /// Appends PCM samples. `start_sample`, when given, is checked against
    /// the channel position: earlier chunks are dropped, later ones are
    /// preceded by silence.
    pub fn push_audio(&mut self, participant: &str, start_sample: Option<u64>, pcm: &[i16]) -> Result<()> {
        let ci = self.channel_index(participant)?;
        let seen = self.channels[ci].seen() as u64;
        let mut samples = pcm_to_f64(pcm);
        if let Some(s) = start_sample {
            if s < seen {
                self.counters.audio_regressions += 1;
                return Ok(());
            }
            if s > seen {
                self.counters.audio_gaps += 1;
                let mut padded = vec![0.0; (s - seen) as usize];
                padded.append(&mut samples);
                samples = padded;
            }
        }
        let ch = &mut self.channels[ci];
        ch.vad.push(&samples);
        ch.buf.extend_from_slice(&samples);
        self.collect(ci);
        self.trim();
        self.advance()
    }

    pub fn push_skeleton(&mut self, frame: SkeletonFrame) {
        if !(frame.t > self.last_skeleton) {
            self.counters.skeleton_regressions += 1;
            return;
        }
        self.last_skeleton = frame.t;
        self.skeleton.push(frame);
        self.trim();
    }

    /// Decisions computed at or before `now`.
    pub fn poll(&mut self, now: f64) -> Vec<Decision> {
        let (out, keep): (Vec<_>, Vec<_>) = std::mem::take(&mut self.ready).into_iter().partition(|d| d.emitted_at <= now + 1e-9);
        self.ready = keep;
        out
    }

    /// Ends the stream: open runs close and finished utterances get
    /// decisions only if their grace window was fully observed.
    pub fn finish(&mut self) -> Result<Vec<Decision>> {
        for ci in 0..self.channels.len() {
            self.channels[ci].vad.finish();
            self.collect(ci);
        }
        self.advance()?;
        self.pending.clear();
        Ok(std::mem::take(&mut self.ready))
    }

    fn gap(&self) -> f64 {
        self.cfg.extractor.vad.gap_seconds()
    }

    /// Moves closed VAD intervals into utterances and schedules decisions
    /// for utterances followed by a settled gap.
    fn collect(&mut self, ci: usize) {
        let gap = self.gap();
        let closed = self.channels[ci].vad.drain_closed();
        for (a, b) in closed {
            let (a, b) = (a as f64 / SR, b as f64 / SR);
            let pid = self.channels[ci].id.clone();
            self.recent.get_mut(&pid).expect("channel registered").push(SpeechInterval {
                participant_id: pid,
                t_start: a,
                t_end: b,
            });
            match self.channels[ci].current {
                Some((_, e)) if a - e < gap => self.channels[ci].current.as_mut().unwrap().1 = e.max(b),
                Some(_) => {
                    self.close_utterance(ci);
                    self.channels[ci].current = Some((a, b));
                }
                None => self.channels[ci].current = Some((a, b)),
            }
        }
        let settled = self.channels[ci].vad.settled_until() as f64 / SR;
        if let Some((_, e)) = self.channels[ci].current {
            if settled >= e + gap {
                self.close_utterance(ci);
            }
        }
    }

    fn close_utterance(&mut self, ci: usize) {
        let ch = &mut self.channels[ci];
        let Some((s, e)) = ch.current.take() else { return };
        ch.count += 1;
        self.counters.utterances += 1;
        self.pending.push(Pending {
            utterance_id: utterance_id(&ch.id, ch.count),
            speaker: ci,
            t_start: s,
            t_end: e,
            t_decision: e + self.cfg.extractor.context,
        });
    }

    fn trim(&mut self) {
        let horizon = self.cfg.horizon;
        let keep = (horizon * SR) as usize;
        for ch in &mut self.channels {
            if ch.buf.len() > keep {
                let cut = ch.buf.len() - keep;
                ch.buf.drain(..cut);
                ch.offset += cut;
            }
        }
        if let Some(last) = self.skeleton.last().map(|f| f.t) {
            let cut = self.skeleton.partition_point(|f| f.t < last - horizon);
            self.skeleton.drain(..cut);
        }
        let clock = self.clock();
        let limit = clock - horizon;
        let episode = (self.episode_start, f64::INFINITY);
        for list in self.recent.values_mut() {
            let cut = list.partition_point(|iv| iv.t_end < limit);
            for iv in list.drain(..cut) {
                let a = iv.t_start.max(episode.0);
                if iv.t_end > a {
                    self.banked_speech += iv.t_end - a;
                }
            }
        }
    }

    /// Speech of channel `ci` overlapping `(ta, tb]`, open runs included.
    fn speech_in(&self, ta: f64, tb: f64) -> bool {
        let closed = self.recent.values().flatten().any(|iv| iv.t_start <= tb && iv.t_end > ta);
        let open = self.channels.iter().any(|c| c.vad.open_start().is_some_and(|s| (s as f64 / SR) <= tb));
        let building = self.channels.iter().any(|c| c.current.is_some_and(|(s, e)| s <= tb && e > ta));
        closed || open || building
    }

    fn advance(&mut self) -> Result<()> {
        let clock = self.clock();
        let lookahead = self.cfg.extractor.vad.lookahead() as f64 / SR;
        let due: Vec<usize> = (0..self.pending.len()).filter(|&i| self.pending[i].t_decision + lookahead <= clock).collect();
        if due.is_empty() {
            return Ok(());
        }
        let mut taken = Vec::with_capacity(due.len());
        for &i in due.iter().rev() {
            taken.push(self.pending.remove(i));
        }
        taken.sort_by(|a, b| a.t_decision.total_cmp(&b.t_decision).then(a.speaker.cmp(&b.speaker)));
        for p in taken {
            if self.speech_in(p.t_end, clock) {
                self.counters.cancelled += 1;
                continue;
            }
            let d = self.decide(&p, clock)?;
            self.counters.decisions += 1;
            if self.cfg.auto_episode && d.policy_action == PolicyAction::ChangeTopic {
                self.begin_episode(d.t_decision);
            }
            self.ready.push(d);
        }
        Ok(())
    }

    fn episode_state(&self, p: &Pending) -> Result<(f64, f64)> {
        let x = &self.cfg.extractor;
        let episode = (self.episode_start.min(p.t_decision), f64::INFINITY);
        let speech = self.banked_speech + cumulative_speech(episode, p.t_decision, &self.recent, x.speech_accounting)?;
        let silence = trailing_silence(p.t_end, p.t_decision, &self.recent, x.silence_slack);
        Ok((speech, silence))
    }

    fn features(&self, p: &Pending) -> Result<(FeatureVector, FeatureSequence)> {
        let ctx = Context {
            audio: self.channels.iter().map(|c| AudioView::new(&c.buf, c.offset)).collect(),
            skeleton: &self.skeleton,
            participants: &self.ids,
            robot: self.robot,
        };
        let (v, s, _) = extract_at(&ctx, p.speaker, p.t_start, p.t_end, &p.utterance_id, &self.cfg.extractor)?;
        Ok((v, s))
    }

    fn decide(&mut self, p: &Pending, clock: f64) -> Result<Decision> {
        let (speech, silence) = self.episode_state(p)?;
        let mut recorded = None;
        let (outcome, probabilities) = match &self.classifier {
            Classifier::Spb(cfg) => {
                let o = Outcome::Spb(spb_classify(speech, silence, cfg));
                if self.cfg.record_features {
                    recorded = Some(self.features(p)?.0);
                }
                (o, Vec::new())
            }
            Classifier::Model(_) => {
                let (v, s) = self.features(p)?;
                if self.cfg.record_features {
                    recorded = Some(v.clone());
                }
                let key = participant_key(&self.session_id, &self.ids[p.speaker]);
                let Classifier::Model(pipe) = &mut self.classifier else { unreachable!() };
                if !pipe.vector_normalizer.knows(&key) {
                    // Unseen participants are normalised by their own running statistics.
                    let entry = self.self_stats.entry(key.clone()).or_insert_with(|| {
                        (
                            ParticipantStats::new(v.values.len()),
                            pipe.sequence_normalizer.as_ref().map(|n| ParticipantStats::new(n.dim())),
                        )
                    });
                    entry.0.push_row(&v.values, &v.defined);
                    pipe.vector_normalizer.set_unseen(&key, entry.0.clone())?;
                    if let (Some(st), Some(norm)) = (entry.1.as_mut(), pipe.sequence_normalizer.as_mut()) {
                        st.push_sample(s.steps.iter().zip(&s.defined).map(|(r, d)| (&r[..], &d[..])));
                        norm.set_unseen(&key, st.clone())?;
                    }
                }
                let (label, probs) = pipe.predict(&key, &v, Some(&s))?;
                (Outcome::Label(label), probs.to_vec())
            }
        };
        Ok(Decision {
            utterance_id: p.utterance_id.clone(),
            speaker_id: self.ids[p.speaker].clone(),
            t_start: p.t_start,
            t_end: p.t_end,
            t_decision: p.t_decision,
            emitted_at: clock,
            outcome,
            probabilities,
            policy_action: self.cfg.policy.action(outcome, speech),
            cumulative_speech: speech,
            trailing_silence: silence,
            features: recorded,
        })
    }
}

/// One framed message on the stream input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StreamMessage {
    Audio {
        participant: String,
        #[serde(default)]
        start_sample: Option<u64>,
        samples: Vec<i16>,
    },
    Skeleton {
        frame: SkeletonFrame,
    },
    Episode {
        t: f64,
    },
    Poll {
        now: f64,
    },
    End,
}

/// Reads one `u32` little-endian length followed by that many bytes of JSON.
/// Returns `None` at a clean end of input.
pub fn read_message(r: &mut impl Read) -> Result<Option<StreamMessage>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        let n = r.read(&mut len[got..]).map_err(|e| Error::io("<stdin>", e))?;
        if n == 0 {
            return if got == 0 {
                Ok(None)
            } else {
                Err(Error::Protocol("truncated length prefix".into()))
            };
        }
        got += n;
    }
    let n = u32::from_le_bytes(len) as usize;
    let mut body = vec![0u8; n];
    r.read_exact(&mut body)
        .map_err(|_| Error::Protocol(format!("message shorter than its {n}-byte prefix")))?;
    serde_json::from_slice(&body)
        .map(Some)
        .map_err(|e| Error::Protocol(format!("bad message: {e}")))
}

pub fn write_message(w: &mut impl Write, msg: &StreamMessage) -> Result<()> {
    let body = serde_json::to_vec(msg).map_err(|e| Error::Protocol(e.to_string()))?;
    w.write_all(&(body.len() as u32).to_le_bytes())
        .and_then(|_| w.write_all(&body))
        .map_err(|e| Error::io("<stream>", e))
}

fn write_decisions(w: &mut impl Write, ds: &[Decision]) -> Result<()> {
    for d in ds {
        let line = serde_json::to_string(d).map_err(|e| Error::Protocol(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io("<stdout>", e))?;
    }
    w.flush().map_err(|e| Error::io("<stdout>", e))
}

/// Drives an engine from framed input, writing one JSON line per decision.
pub fn serve(engine: &mut StreamEngine, input: &mut impl Read, output: &mut impl Write) -> Result<StreamCounters> {
    loop {
        let Some(msg) = read_message(input)? else { break };
        match msg {
            StreamMessage::Audio {
                participant,
                start_sample,
                samples,
            } => {
                engine.push_audio(&participant, start_sample, &samples)?;
                let now = engine.clock();
                write_decisions(output, &engine.poll(now))?;
            }
            StreamMessage::Skeleton { frame } => engine.push_skeleton(frame),
            StreamMessage::Episode { t } => engine.begin_episode(t),
            StreamMessage::Poll { now } => write_decisions(output, &engine.poll(now))?,
            StreamMessage::End => break,
        }
    }
    let rest = engine.finish()?;
    write_decisions(output, &rest)?;
    Ok(engine.counters().clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplayConfig {
    pub chunk_ms: f64,
    pub poll_hz: f64,
    /// Largest end-time difference at which a decision answers a record.
    pub match_tolerance: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            chunk_ms: 10.0,
            poll_hz: 10.0,
            match_tolerance: 0.25,
        }
    }
}

impl ReplayConfig {
    pub fn tick(&self) -> f64 {
        1.0 / self.poll_hz
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub records: usize,
    pub matched: usize,
    /// Decisions with no annotated utterance end nearby.
    pub unmatched_decisions: usize,
    pub classes: Vec<String>,
    pub per_class_f1: Vec<f64>,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub decisions: Vec<Decision>,
    pub counters: StreamCounters,
    pub agreement: Agreement,
    /// Decisions whose time lies inside offline-detected speech.
    pub safety_violations: usize,
    /// Largest `emitted_at - t_decision`.
    pub max_delay: f64,
    /// Largest buffered span seen during the run.
    pub max_buffered: f64,
}

/// Replays a session through the engine in simulated time.
pub fn run_simulated(
    session: &Session,
    records: &[AnnotationRecord],
    classifier: Classifier,
    cfg: StreamConfig,
    replay: &ReplayConfig,
) -> Result<SimulationResult> {
    let spb = matches!(classifier, Classifier::Spb(_));
    let ids = session.participant_ids();
    let cfg = StreamConfig {
        auto_episode: false,
        ..cfg
    };
    let mut engine = StreamEngine::new(&session.session_id, &ids, session.robot_pose, classifier, cfg)?;
    let chunk = ((replay.chunk_ms / 1000.0) * SR).round().max(1.0) as usize;
    let total = session.audio.iter().map(Vec::len).min().unwrap_or(0);
    let poll_every = ((1.0 / replay.poll_hz) * SR).round().max(1.0) as usize;
    let mut next_poll = poll_every;
    let mut frames = session.skeleton.iter().peekable();
    let mut episodes = session.topic_episodes.iter().map(|e| e.0).peekable();
    let mut decisions = Vec::new();
    let mut max_buffered: f64 = 0.0;
    let mut pos = 0;
    while pos < total {
        let end = (pos + chunk).min(total);
        let t_end = end as f64 / SR;
        while let Some(&s) = episodes.peek() {
            if s > pos as f64 / SR {
                break;
            }
            engine.begin_episode(s);
            episodes.next();
        }
        while let Some(f) = frames.peek() {
            if f.t >= t_end {
                break;
            }
            engine.push_skeleton((*f).clone());
            frames.next();
        }
        for (i, pid) in ids.iter().enumerate() {
            engine.push_audio(pid, Some(pos as u64), &session.audio[i][pos..end])?;
        }
        max_buffered = max_buffered.max(engine.buffered_seconds());
        while end >= next_poll {
            decisions.extend(engine.poll(next_poll as f64 / SR));
            next_poll += poll_every;
        }
        pos = end;
    }
    decisions.extend(engine.poll(f64::INFINITY));
    decisions.extend(engine.finish()?);

    let activity = crate::featurize::SessionFeatures::new(session, &cfg.extractor)?.activity().clone();
    let safety_violations = decisions
        .iter()
        .filter(|d| activity.values().flatten().any(|iv| iv.t_start <= d.t_decision && d.t_decision < iv.t_end))
        .count();
    let max_delay = decisions.iter().map(|d| d.emitted_at - d.t_decision).fold(0.0, f64::max);
    let agreement = agreement(records, &decisions, spb, replay.match_tolerance);
    Ok(SimulationResult {
        decisions,
        counters: engine.counters().clone(),
        agreement,
        safety_violations,
        max_delay,
        max_buffered,
    })
}

/// Per-class agreement between decisions and annotated labels, matching each
/// record to the nearest decision of the same speaker.
pub fn agreement(records: &[AnnotationRecord], decisions: &[Decision], binary: bool, tolerance: f64) -> Agreement {
    let humans: Vec<&AnnotationRecord> = records.iter().filter(|r| !r.is_robot()).collect();
    let mut used = vec![false; decisions.len()];
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for r in &humans {
        let Some(label) = r.label.decision() else { continue };
        let best = decisions
            .iter()
            .enumerate()
            .filter(|(i, d)| !used[*i] && d.speaker_id == r.speaker_id && (d.t_end - r.t_end).abs() <= tolerance)
            .min_by(|a, b| (a.1.t_end - r.t_end).abs().total_cmp(&(b.1.t_end - r.t_end).abs()));
        let Some((i, d)) = best else { continue };
        used[i] = true;
        let (t, p) = match (binary, d.outcome) {
            (true, Outcome::Spb(s)) => (usize::from(label != DecisionLabel::NotAppropriate), s.index()),
            (true, Outcome::Label(l)) => (usize::from(label != DecisionLabel::NotAppropriate), usize::from(l != DecisionLabel::NotAppropriate)),
            (false, Outcome::Label(l)) => (label.index(), l.index()),
            (false, Outcome::Spb(s)) => (label.index(), if s == SpbDecision::NotAppropriate { 0 } else { 1 }),
        };
        truth.push(t);
        pred.push(p);
    }
    let n = if binary { 2 } else { 3 };
    let classes: Vec<String> = if binary {
        vec!["not_appropriate".into(), "appropriate_or_needed".into()]
    } else {
        DecisionLabel::ALL.iter().map(|l| l.name().to_string()).collect()
    };
    let (per_class_f1, macro_score) = if truth.is_empty() {
        (vec![0.0; n], 0.0)
    } else {
        (f1_per_class(&truth, &pred, n), macro_f1(&truth, &pred, n))
    };
    Agreement {
        records: humans.len(),
        matched: truth.len(),
        unmatched_decisions: used.iter().filter(|u| !**u).count(),
        classes,
        per_class_f1,
        macro_f1: macro_score,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn engine(cfg: StreamConfig) -> StreamEngine {
        let ids = vec!["p1".to_string(), "p2".to_string()];
        let robot = RobotPose { x: 0.0, y: 0.0, yaw: 0.0 };
        StreamEngine::new("live", &ids, robot, Classifier::Spb(SpbConfig::default()), cfg).unwrap()
    }

    fn tone(secs: f64, amp: f64) -> Vec<i16> {
        let n = (secs * SR) as usize;
        (0..n)
            .map(|i| (amp * 32767.0 * (2.0 * std::f64::consts::PI * 200.0 * i as f64 / SR).sin()) as i16)
            .collect()
    }

    fn feed(e: &mut StreamEngine, p1: &[i16], p2: &[i16]) -> Vec<Decision> {
        let mut out = Vec::new();
        for (a, b) in p1.chunks(160).zip(p2.chunks(160)) {
            e.push_audio("p1", None, a).unwrap();
            e.push_audio("p2", None, b).unwrap();
            out.extend(e.poll(e.clock()));
        }
        out
    }

    #[test]
    fn silence_changes_nothing_but_the_clock() {
        let mut e = engine(StreamConfig::default());
        let z = vec![0i16; 16_000];
        assert!(feed(&mut e, &z, &z).is_empty());
        assert_eq!(e.counters().utterances, 0);
        assert!((e.clock() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn burst_then_silence_schedules_one_decision() {
        let mut e = engine(StreamConfig::default());
        let mut p1 = vec![0i16; 8000];
        p1.extend(tone(1.0, 0.3));
        p1.extend(vec![0i16; 16_000 * 4]);
        let p2 = vec![0i16; p1.len()];
        let ds = feed(&mut e, &p1, &p2);
        assert_eq!(e.counters().utterances, 1);
        assert_eq!(ds.len(), 1);
        let d = &ds[0];
        assert!((d.t_end - 1.5).abs() < 0.01);
        assert!((d.t_decision - d.t_end - 2.0).abs() < 1e-12);
        assert!(d.emitted_at - d.t_decision < 0.1);
        assert_eq!(d.outcome, Outcome::Spb(SpbDecision::NotAppropriate));
    }

    #[test]
    fn resumed_speech_cancels() {
        let mut e = engine(StreamConfig::default());
        let mut p1 = vec![0i16; 8000];
        p1.extend(tone(1.0, 0.3));
        p1.extend(vec![0i16; 16_000 * 5]);
        let mut p2 = vec![0i16; p1.len()];
        // p2 speaks from t = 2.5 to 3.0, inside p1's grace window.
        for (i, s) in tone(0.5, 0.3).into_iter().enumerate() {
            p2[40_000 + i] = s;
        }
        let ds = feed(&mut e, &p1, &p2);
        assert!(ds.iter().all(|d| d.speaker_id != "p1"));
        assert_eq!(e.counters().cancelled, 1);
    }

    #[test]
    fn regressions_are_counted_and_dropped() {
        let mut e = engine(StreamConfig::default());
        e.push_audio("p1", Some(0), &[0; 160]).unwrap();
        e.push_audio("p1", Some(0), &[0; 160]).unwrap();
        assert_eq!(e.counters().audio_regressions, 1);
        e.push_skeleton(SkeletonFrame { t: 1.0, bodies: BTreeMap::new() });
        e.push_skeleton(SkeletonFrame { t: 0.5, bodies: BTreeMap::new() });
        assert_eq!(e.counters().skeleton_regressions, 1);
        assert!(e.push_audio("p9", None, &[0; 10]).is_err());
    }

    #[test]
    fn buffers_stay_within_horizon() {
        let mut e = engine(StreamConfig::default());
        let p = tone(20.0, 0.01);
        feed(&mut e, &p, &p);
        assert!(e.buffered_seconds() <= 8.0 + 1e-9);
    }

    #[test]
    fn policy_mapping() {
        let p = PolicyConfig::default();
        assert_eq!(p.action(Outcome::Label(DecisionLabel::Needed), 0.0), PolicyAction::ChangeTopic);
        assert_eq!(p.action(Outcome::Label(DecisionLabel::Appropriate), 10.0), PolicyAction::FollowUp);
        assert_eq!(p.action(Outcome::Label(DecisionLabel::Appropriate), 61.0), PolicyAction::ChangeTopic);
        assert_eq!(p.action(Outcome::Label(DecisionLabel::NotAppropriate), 99.0), PolicyAction::Wait);
        assert_eq!(p.action(Outcome::Spb(SpbDecision::AppropriateOrNeeded), 0.0), PolicyAction::ChangeTopic);
    }

    #[test]
    fn framing_round_trip() {
        let msgs = vec![
            StreamMessage::Audio {
                participant: "p1".into(),
                start_sample: Some(3),
                samples: vec![1, -2, 3],
            },
            StreamMessage::Poll { now: 1.5 },
            StreamMessage::End,
        ];
        let mut buf = Vec::new();
        for m in &msgs {
            write_message(&mut buf, m).unwrap();
        }
        let mut r = &buf[..];
        let mut back = Vec::new();
        while let Some(m) = read_message(&mut r).unwrap() {
            back.push(m);
        }
        assert_eq!(back, msgs);
        assert!(read_message(&mut &[1u8, 0][..]).is_err());
    }
}
