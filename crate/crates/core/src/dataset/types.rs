use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const SKELETON_RATE: f64 = 30.0;
/// Speaker id used for robot rows in annotation files.
pub const ROBOT_ID: &str = "robot";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionLabel {
    NotAppropriate,
    Appropriate,
    Needed,
}

impl DecisionLabel {
    pub const ALL: [DecisionLabel; 3] = [
        DecisionLabel::NotAppropriate,
        DecisionLabel::Appropriate,
        DecisionLabel::Needed,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Short code used in annotation files.
    pub fn code(self) -> &'static str {
        match self {
            DecisionLabel::NotAppropriate => "NA",
            DecisionLabel::Appropriate => "A",
            DecisionLabel::Needed => "N",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DecisionLabel::NotAppropriate => "not_appropriate",
            DecisionLabel::Appropriate => "appropriate",
            DecisionLabel::Needed => "needed",
        }
    }
}

impl fmt::Display for DecisionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DecisionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DecisionLabel::ALL
            .into_iter()
            .find(|l| l.code() == s || l.name() == s)
            .ok_or_else(|| Error::Table(format!("unknown label '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnnotationLabel {
    Decision(DecisionLabel),
    Robot,
}

impl AnnotationLabel {
    pub fn code(self) -> &'static str {
        match self {
            AnnotationLabel::Decision(l) => l.code(),
            AnnotationLabel::Robot => "ROBOT",
        }
    }

    pub fn decision(self) -> Option<DecisionLabel> {
        match self {
            AnnotationLabel::Decision(l) => Some(l),
            AnnotationLabel::Robot => None,
        }
    }
}

impl FromStr for AnnotationLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "ROBOT" {
            Ok(AnnotationLabel::Robot)
        } else {
            s.parse().map(AnnotationLabel::Decision)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    pub t_start: f64,
    pub t_end: f64,
    pub label: AnnotationLabel,
}

impl AnnotationRecord {
    pub fn is_robot(&self) -> bool {
        self.speaker_id == ROBOT_ID
    }

    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticipantMeta {
    pub id: String,
    /// WAV file name relative to the session directory.
    pub wav: String,
    pub skeleton_track: String,
}

/// Static robot position in the horizontal camera plane and facing angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotPose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

/// Joints of one tracked body. Camera coordinates: x right, y depth, z up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Joints {
    pub pelvis: [f64; 3],
    pub chest: [f64; 3],
    pub lhand: [f64; 3],
    pub rhand: [f64; 3],
    /// Horizontal head rotation in the x-y plane; absent when the tracker lost
    /// the head.
    #[serde(default)]
    pub head_yaw: Option<f64>,
}

impl Joints {
    fn is_valid(&self) -> bool {
        let finite = [self.pelvis, self.chest, self.lhand, self.rhand]
            .iter()
            .flatten()
            .all(|v| v.is_finite());
        let yaw_ok = self
            .head_yaw
            .map_or(true, |y| y.is_finite() && y.abs() <= std::f64::consts::PI);
        finite && yaw_ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonFrame {
    pub t: f64,
    /// Keyed by participant id; a participant may be missing from a frame.
    pub bodies: BTreeMap<String, Joints>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub session_id: String,
    pub participants: Vec<ParticipantMeta>,
    pub robot_pose: RobotPose,
    pub topic_episodes: Vec<(f64, f64)>,
    /// PCM16 samples per participant, in `participants` order.
    pub audio: Vec<Vec<i16>>,
    pub skeleton: Vec<SkeletonFrame>,
}

impl Session {
    /// Validates the structural invariants and builds the session.
    pub fn new(
        session_id: String,
        participants: Vec<ParticipantMeta>,
        robot_pose: RobotPose,
        topic_episodes: Vec<(f64, f64)>,
        audio: Vec<Vec<i16>>,
        skeleton: Vec<SkeletonFrame>,
    ) -> Result<Self> {
        if participants.len() < 2 {
            return Err(Error::TooFewParticipants(participants.len()));
        }
        let mut ids: Vec<&str> = participants.iter().map(|p| p.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidSession("duplicate participant id".into()));
        }
        if ids.contains(&ROBOT_ID) {
            return Err(Error::InvalidSession(format!("'{ROBOT_ID}' is reserved")));
        }
        if audio.len() != participants.len() {
            return Err(Error::InvalidSession(format!(
                "{} audio streams for {} participants",
                audio.len(),
                participants.len()
            )));
        }
        let frame = (SAMPLE_RATE as f64 / SKELETON_RATE).ceil() as usize;
        let longest = audio.iter().map(Vec::len).max().unwrap_or(0);
        let shortest = audio.iter().map(Vec::len).min().unwrap_or(0);
        if longest - shortest > frame {
            return Err(Error::InvalidSession(format!(
                "audio lengths differ by {} samples",
                longest - shortest
            )));
        }
        for w in skeleton.windows(2) {
            if !(w[1].t > w[0].t) {
                return Err(Error::InvalidSession(format!(
                    "skeleton timestamps not increasing at t = {}",
                    w[1].t
                )));
            }
        }
        for f in &skeleton {
            if !f.t.is_finite() {
                return Err(Error::InvalidSession("non-finite skeleton timestamp".into()));
            }
            for (pid, joints) in &f.bodies {
                if !ids.contains(&pid.as_str()) {
                    return Err(Error::UnknownParticipant {
                        file: "skeleton.jsonl".into(),
                        id: pid.clone(),
                    });
                }
                if !joints.is_valid() {
                    return Err(Error::InvalidSession(format!(
                        "invalid joints for {pid} at t = {}",
                        f.t
                    )));
                }
            }
        }
        for (i, &(s, e)) in topic_episodes.iter().enumerate() {
            if !(s < e) {
                return Err(Error::InvalidSession(format!("episode {i} is empty")));
            }
            if i > 0 && s < topic_episodes[i - 1].1 {
                return Err(Error::InvalidSession(format!(
                    "episode {i} overlaps or precedes episode {}",
                    i - 1
                )));
            }
        }
        if !robot_pose.x.is_finite() || !robot_pose.y.is_finite() || !robot_pose.yaw.is_finite() {
            return Err(Error::InvalidSession("non-finite robot pose".into()));
        }
        Ok(Self {
            session_id,
            participants,
            robot_pose,
            topic_episodes,
            audio,
            skeleton,
        })
    }

    pub fn participant_index(&self, id: &str) -> Option<usize> {
        self.participants.iter().position(|p| p.id == id)
    }

    pub fn participant_ids(&self) -> Vec<String> {
        self.participants.iter().map(|p| p.id.clone()).collect()
    }

    pub fn group_size(&self) -> usize {
        self.participants.len()
    }

    /// Length of the shortest audio stream in seconds.
    pub fn duration(&self) -> f64 {
        self.audio.iter().map(Vec::len).min().unwrap_or(0) as f64 / SAMPLE_RATE as f64
    }

    /// Index of the episode containing `[t_start, t_end]`, if exactly one does.
    pub fn episode_of(&self, t_start: f64, t_end: f64) -> Option<usize> {
        let mut hits = self
            .topic_episodes
            .iter()
            .enumerate()
            .filter(|(_, &(s, e))| s <= t_start && t_end <= e)
            .map(|(i, _)| i);
        let first = hits.next();
        if hits.next().is_some() {
            None
        } else {
            first
        }
    }

    /// Audio of one participant as floats in [-1, 1).
    pub fn samples(&self, index: usize) -> Vec<f64> {
        pcm_to_f64(&self.audio[index])
    }
}

pub fn pcm_to_f64(pcm: &[i16]) -> Vec<f64> {
    pcm.iter().map(|&s| s as f64 / 32768.0).collect()
}

pub fn f64_to_pcm(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub counts: [usize; 3],
    /// Percentages rounded to two decimals.
    pub percentages: [f64; 3],
}

impl ClassDistribution {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Counts and percentages of the three decision labels over human records.
pub fn class_distribution(records: &[AnnotationRecord]) -> Result<ClassDistribution> {
    if records.is_empty() {
        return Err(Error::Empty("annotation records"));
    }
    let mut counts = [0usize; 3];
    for r in records {
        match r.label {
            AnnotationLabel::Decision(l) if !r.is_robot() => counts[l.index()] += 1,
            _ => return Err(Error::RobotRecord(r.utterance_id.clone())),
        }
    }
    let total = records.len() as f64;
    let percentages = counts.map(|c| (c as f64 / total * 10_000.0).round() / 100.0);
    Ok(ClassDistribution {
        counts,
        percentages,
    })
}
