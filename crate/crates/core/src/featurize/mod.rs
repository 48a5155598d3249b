//! Fixed-layout feature vectors and 4 Hz sequences around utterance ends.

mod manifest;
mod normalize;
mod table;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use manifest::{
    manifest_hash, Family as FeatureFamily, FeatureManifest, ManifestEntry, RoleTag, WindowTag, SEQUENCE_LEN, VECTOR_LEN,
};
pub use normalize::{FitItem, Normalizer, ParticipantStats, Provenance, StatsSource};
pub use table::{read_sequences, read_table, sidecar_path, write_sequences, write_table, FeatureTable, TableSidecar};

use crate::dataset::{AnnotationRecord, DecisionLabel, RobotPose, Session, SkeletonFrame};
use crate::dsp::{AcousticTracks, AudioView, DspConfig, ACOUSTIC_LEN, ACOUSTIC_STEP_LEN};
use crate::error::{Error, Result};
use crate::kinematics::{BodyTracks, KinematicConfig, KINEMATIC_LEN};
use crate::segmentation::{
    cumulative_speech, detect_voice_activity, trailing_silence, SpeechAccounting, SpeechInterval, VadConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    pub vad: VadConfig,
    pub dsp: DspConfig,
    pub kinematics: KinematicConfig,
    /// Context before and after the utterance end, seconds.
    pub context: f64,
    pub sequence_steps: usize,
    pub sequence_hop: f64,
    /// Trailing sub-window for per-step acoustic values.
    pub sequence_acoustic_span: f64,
    pub sequence_voice_quality: bool,
    pub speech_accounting: SpeechAccounting,
    /// Speech ending this soon after the utterance end counts as its tail.
    pub silence_slack: f64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            vad: VadConfig::default(),
            dsp: DspConfig::default(),
            kinematics: KinematicConfig::default(),
            context: 2.0,
            sequence_steps: 16,
            sequence_hop: 0.25,
            sequence_acoustic_span: 0.5,
            sequence_voice_quality: true,
            speech_accounting: SpeechAccounting::PerParticipantSum,
            silence_slack: 0.05,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        self.vad.validate()?;
        self.dsp.validate()?;
        if self.context != 2.0 || self.sequence_steps != 16 {
            return Err(Error::InvalidConfig(
                "the feature layout requires a 2 s context and 16 sequence steps".into(),
            ));
        }
        if !(self.sequence_hop > 0.0 && self.sequence_acoustic_span > 0.0) {
            return Err(Error::InvalidConfig("sequence timing must be positive".into()));
        }
        Ok(())
    }

    /// Audio and skeleton history needed before an utterance end.
    pub fn lead(&self) -> f64 {
        let first_step = self.context - self.sequence_hop;
        (first_step + self.sequence_acoustic_span).max(self.context) + 0.25
    }

    /// Step times relative to the utterance end.
    pub fn step_offsets(&self) -> Vec<f64> {
        (1..=self.sequence_steps)
            .map(|k| -self.context + self.sequence_hop * k as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub utterance_id: String,
    pub values: Vec<f64>,
    /// False where the value is imputed.
    pub defined: Vec<bool>,
    #[serde(default)]
    pub normalized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    pub utterance_id: String,
    pub steps: Vec<Vec<f64>>,
    pub defined: Vec<Vec<bool>>,
    #[serde(default)]
    pub normalized: bool,
}

/// Everything known about one labelled utterance besides its features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub utterance_id: String,
    pub session_id: String,
    pub speaker_id: String,
    pub group_size: usize,
    pub label: DecisionLabel,
    pub t_start: f64,
    pub t_end: f64,
    /// Episode speech up to the decision time.
    pub cumulative_speech: f64,
    /// Silence across all channels right before the decision time.
    pub trailing_silence: f64,
    #[serde(default)]
    pub truncated: bool,
}

impl ExampleMeta {
    /// Key of the per-participant normalisation statistics.
    pub fn participant_key(&self) -> String {
        participant_key(&self.session_id, &self.speaker_id)
    }

    /// Corpus-wide identifier; utterance ids are only unique per session.
    pub fn key(&self) -> String {
        format!("{}/{}", self.session_id, self.utterance_id)
    }
}

pub fn participant_key(session_id: &str, speaker_id: &str) -> String {
    format!("{session_id}/{speaker_id}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub meta: ExampleMeta,
    pub vector: FeatureVector,
    pub sequence: Option<FeatureSequence>,
}

/// A labelled corpus of examples sharing one manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub manifest_hash: String,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn ids(&self) -> Vec<&str> {
        self.examples.iter().map(|e| e.meta.utterance_id.as_str()).collect()
    }
}

/// Inputs of one extraction: views on every participant's audio and the
/// skeleton frames around the end.
pub struct Context<'a> {
    pub audio: Vec<AudioView<'a>>,
    pub skeleton: &'a [SkeletonFrame],
    pub participants: &'a [String],
    pub robot: RobotPose,
}

fn assemble(ctx: &Context<'_>, speaker: usize, t_start: f64, t_end: f64, utterance_id: &str, cfg: &ExtractorConfig, with_sequence: bool) -> Result<(FeatureVector, Option<FeatureSequence>, bool)> {
    let view = ctx.audio[speaker];
    let tracks = AcousticTracks::compute(view, t_end, cfg.lead(), cfg.context, &cfg.dsp)?;
    let block = tracks.block(view, &cfg.dsp);
    let c = cfg.context;
    let body = BodyTracks::new(ctx.skeleton, ctx.participants, ctx.robot, t_end - cfg.lead(), t_end + c + 1e-9, &cfg.kinematics);

    let mut values = Vec::with_capacity(VECTOR_LEN);
    let mut defined = Vec::with_capacity(VECTOR_LEN);
    values.extend_from_slice(&block.values);
    defined.extend_from_slice(&block.defined);
    let mut truncated = block.truncated;
    for others in [false, true] {
        for (ta, tb) in [(t_end - c, t_end), (t_end, t_end + c)] {
            match body.block(speaker, others, ta, tb) {
                Ok(Some(v)) => {
                    values.extend_from_slice(&v);
                    defined.extend(std::iter::repeat(true).take(KINEMATIC_LEN));
                }
                Ok(None) | Err(Error::NoFrames { .. }) => {
                    truncated |= body.is_empty();
                    values.extend(std::iter::repeat(0.0).take(KINEMATIC_LEN));
                    defined.extend(std::iter::repeat(false).take(KINEMATIC_LEN));
                }
                Err(e) => return Err(e),
            }
        }
    }
    values.push(t_end - t_start);
    defined.push(true);
    debug_assert_eq!(values.len(), VECTOR_LEN);
    let vector = FeatureVector {
        utterance_id: utterance_id.to_string(),
        values,
        defined,
        normalized: false,
    };
    if !with_sequence {
        return Ok((vector, None, truncated));
    }

    let mut steps = Vec::with_capacity(cfg.sequence_steps);
    let mut step_defined = Vec::with_capacity(cfg.sequence_steps);
    let hop = cfg.sequence_hop;
    for off in cfg.step_offsets() {
        let tk = t_end + off;
        let mut row = Vec::with_capacity(SEQUENCE_LEN);
        let mut def = Vec::with_capacity(SEQUENCE_LEN);
        let (a, d) = tracks.step(view, tk, cfg.sequence_acoustic_span, &cfg.dsp);
        row.extend_from_slice(&a);
        def.extend_from_slice(&d);
        if !cfg.sequence_voice_quality {
            for i in 6..ACOUSTIC_STEP_LEN {
                row[i] = 0.0;
                def[i] = false;
            }
        }
        for others in [false, true] {
            match body.step_block(speaker, others, tk - hop, tk) {
                Some(v) => {
                    row.extend_from_slice(&v);
                    def.extend(std::iter::repeat(true).take(KINEMATIC_LEN));
                }
                None => {
                    row.extend(std::iter::repeat(0.0).take(KINEMATIC_LEN));
                    def.extend(std::iter::repeat(false).take(KINEMATIC_LEN));
                }
            }
        }
        debug_assert_eq!(row.len(), SEQUENCE_LEN);
        steps.push(row);
        step_defined.push(def);
    }
    Ok((
        vector,
        Some(FeatureSequence {
            utterance_id: utterance_id.to_string(),
            steps,
            defined: step_defined,
            normalized: false,
        }),
        truncated,
    ))
}

/// Vector and sequence for one utterance end from arbitrary views.
pub fn extract_at(
    ctx: &Context<'_>,
    speaker: usize,
    t_start: f64,
    t_end: f64,
    utterance_id: &str,
    cfg: &ExtractorConfig,
) -> Result<(FeatureVector, FeatureSequence, bool)> {
    let (v, s, t) = assemble(ctx, speaker, t_start, t_end, utterance_id, cfg, true)?;
    Ok((v, s.expect("sequence requested"), t))
}

/// Session-level extraction state: decoded audio and per-channel activity.
pub struct SessionFeatures<'s> {
    session: &'s Session,
    audio: Vec<Vec<f64>>,
    ids: Vec<String>,
    activity: BTreeMap<String, Vec<SpeechInterval>>,
    cfg: ExtractorConfig,
}

impl<'s> SessionFeatures<'s> {
    pub fn new(session: &'s Session, cfg: &ExtractorConfig) -> Result<Self> {
        cfg.validate()?;
        let ids = session.participant_ids();
        let mut activity = BTreeMap::new();
        for (i, pid) in ids.iter().enumerate() {
            activity.insert(pid.clone(), detect_voice_activity(&session.audio[i], pid, &cfg.vad)?);
        }
        Ok(Self {
            session,
            audio: (0..ids.len()).map(|i| session.samples(i)).collect(),
            ids,
            activity,
            cfg: *cfg,
        })
    }

    pub fn activity(&self) -> &BTreeMap<String, Vec<SpeechInterval>> {
        &self.activity
    }

    fn context(&self) -> Context<'_> {
        Context {
            audio: self.audio.iter().map(|a| AudioView::new(a, 0)).collect(),
            skeleton: &self.session.skeleton,
            participants: &self.ids,
            robot: self.session.robot_pose,
        }
    }

    fn speaker_of(&self, record: &AnnotationRecord) -> Result<usize> {
        if record.is_robot() {
            return Err(Error::RobotRecord(record.utterance_id.clone()));
        }
        self.session
            .participant_index(&record.speaker_id)
            .ok_or_else(|| Error::UnknownParticipant {
                file: "annotations".into(),
                id: record.speaker_id.clone(),
            })
    }

    pub fn vector(&self, record: &AnnotationRecord) -> Result<FeatureVector> {
        let sp = self.speaker_of(record)?;
        let cfg = self.cfg;
        Ok(assemble(&self.context(), sp, record.t_start, record.t_end, &record.utterance_id, &cfg, false)?.0)
    }

    pub fn sequence(&self, record: &AnnotationRecord) -> Result<FeatureSequence> {
        let sp = self.speaker_of(record)?;
        let cfg = self.cfg;
        Ok(assemble(&self.context(), sp, record.t_start, record.t_end, &record.utterance_id, &cfg, true)?
            .1
            .expect("sequence requested"))
    }

    /// Speech time and trailing silence at the decision time.
    pub fn episode_state(&self, record: &AnnotationRecord) -> Result<(f64, f64)> {
        let ep = self
            .session
            .episode_of(record.t_start, record.t_end)
            .map(|i| self.session.topic_episodes[i])
            .ok_or_else(|| Error::InvalidAnnotation {
                utterance_id: record.utterance_id.clone(),
                detail: "not inside exactly one topic episode".into(),
            })?;
        let td = (record.t_end + self.cfg.context).min(ep.1);
        let speech = cumulative_speech(ep, td, &self.activity, self.cfg.speech_accounting)?;
        let silence = trailing_silence(record.t_end, td, &self.activity, self.cfg.silence_slack);
        Ok((speech, silence))
    }

    pub fn example(&self, record: &AnnotationRecord, with_sequence: bool) -> Result<Example> {
        let sp = self.speaker_of(record)?;
        let label = record.label.decision().ok_or_else(|| Error::RobotRecord(record.utterance_id.clone()))?;
        let cfg = self.cfg;
        let (vector, sequence, truncated) =
            assemble(&self.context(), sp, record.t_start, record.t_end, &record.utterance_id, &cfg, with_sequence)?;
        let (cumulative_speech, trailing_silence) = self.episode_state(record)?;
        Ok(Example {
            meta: ExampleMeta {
                utterance_id: record.utterance_id.clone(),
                session_id: self.session.session_id.clone(),
                speaker_id: record.speaker_id.clone(),
                group_size: self.session.group_size(),
                label,
                t_start: record.t_start,
                t_end: record.t_end,
                cumulative_speech,
                trailing_silence,
                truncated,
            },
            vector,
            sequence,
        })
    }
}

/// Aggregated vector of one human utterance.
pub fn assemble_vector(session: &Session, record: &AnnotationRecord, cfg: &ExtractorConfig) -> Result<FeatureVector> {
    SessionFeatures::new(session, cfg)?.vector(record)
}

/// 16-step sequence of one human utterance.
pub fn assemble_sequence(session: &Session, record: &AnnotationRecord, cfg: &ExtractorConfig) -> Result<FeatureSequence> {
    SessionFeatures::new(session, cfg)?.sequence(record)
}

/// Examples for every labelled human record of a session.
pub fn extract_session(session: &Session, records: &[AnnotationRecord], cfg: &ExtractorConfig, with_sequence: bool) -> Result<Vec<Example>> {
    let sf = SessionFeatures::new(session, cfg)?;
    records
        .iter()
        .filter(|r| !r.is_robot())
        .map(|r| sf.example(r, with_sequence))
        .collect()
}

const _: () = assert!(VECTOR_LEN == ACOUSTIC_LEN + 4 * KINEMATIC_LEN + 1);
const _: () = assert!(SEQUENCE_LEN == ACOUSTIC_STEP_LEN + 2 * KINEMATIC_LEN);
