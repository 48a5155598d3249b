//! On-disk session layout:
//!
//! ```text
//! <dir>/session.json      metadata, participants, robot pose, topic episodes
//! <dir>/<participant>.wav PCM16 mono 16 kHz, one per participant
//! <dir>/skeleton.jsonl    one frame per line
//! <dir>/annotations.csv   utterance_id,speaker_id,t_start,t_end,label
//! ```

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::types::{
    AnnotationLabel, AnnotationRecord, ParticipantMeta, RobotPose, Session, SkeletonFrame, SAMPLE_RATE,
};
use crate::error::{Error, Result};

pub const SESSION_FILE: &str = "session.json";
pub const SKELETON_FILE: &str = "skeleton.jsonl";
pub const ANNOTATION_FILE: &str = "annotations.csv";

#[derive(Debug, Serialize, Deserialize)]
struct SessionFile {
    session_id: String,
    participants: Vec<ParticipantMeta>,
    robot_pose: RobotPose,
    topic_episodes: Vec<(f64, f64)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRow {
    utterance_id: String,
    speaker_id: String,
    t_start: f64,
    t_end: f64,
    label: String,
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })
}

fn read_wav(path: &Path) -> Result<Vec<i16>> {
    let reader = hound::WavReader::new(BufReader::new(open(path)?)).map_err(|source| Error::Wav {
        path: path.to_path_buf(),
        source,
    })?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::SampleRate {
            path: path.to_path_buf(),
            got: spec.sample_rate,
        });
    }
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::WavFormat {
            path: path.to_path_buf(),
            detail: format!(
                "expected mono PCM16, got {} channel(s) of {}-bit {:?}",
                spec.channels, spec.bits_per_sample, spec.sample_format
            ),
        });
    }
    reader
        .into_samples::<i16>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|source| Error::Wav {
            path: path.to_path_buf(),
            source,
        })
}

pub fn write_wav(path: &Path, samples: &[i16]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    {
        let mut w = writer.get_i16_writer(samples.len() as u32);
        for &s in samples {
            w.write_sample(s);
        }
        w.flush().map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::Reader::from_reader(open(path)?);
    let mut out = Vec::new();
    for row in reader.deserialize::<AnnotationRow>() {
        let row = row.map_err(csv_err)?;
        let label: AnnotationLabel = row.label.parse().map_err(|_| Error::InvalidAnnotation {
            utterance_id: row.utterance_id.clone(),
            detail: format!("unknown label '{}'", row.label),
        })?;
        out.push(AnnotationRecord {
            utterance_id: row.utterance_id,
            speaker_id: row.speaker_id,
            t_start: row.t_start,
            t_end: row.t_end,
            label,
        });
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::Writer::from_writer(BufWriter::new(file));
    for r in records {
        writer
            .serialize(AnnotationRow {
                utterance_id: r.utterance_id.clone(),
                speaker_id: r.speaker_id.clone(),
                t_start: r.t_start,
                t_end: r.t_end,
                label: r.label.code().to_string(),
            })
            .map_err(csv_err)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn read_skeleton(path: &Path) -> Result<Vec<SkeletonFrame>> {
    let reader = BufReader::new(open(path)?);
    let mut frames = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        frames.push(serde_json::from_str(&line).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?);
    }
    Ok(frames)
}

fn write_skeleton(path: &Path, frames: &[SkeletonFrame]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for f in frames {
        serde_json::to_writer(&mut w, f).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Checks annotation records against a session.
pub fn validate_annotations(session: &Session, records: &[AnnotationRecord]) -> Result<()> {
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.utterance_id.as_str()) {
            return Err(Error::DuplicateUtterance(r.utterance_id.clone()));
        }
        let bad = |detail: String| Error::InvalidAnnotation {
            utterance_id: r.utterance_id.clone(),
            detail,
        };
        if !(r.t_start < r.t_end) || !r.t_start.is_finite() || !r.t_end.is_finite() {
            return Err(bad(format!("invalid interval [{}, {}]", r.t_start, r.t_end)));
        }
        match (r.is_robot(), r.label) {
            (true, AnnotationLabel::Decision(l)) => {
                return Err(bad(format!("robot utterance labelled '{}'", l.code())))
            }
            (false, AnnotationLabel::Robot) => return Err(bad("human utterance labelled ROBOT".into())),
            _ => {}
        }
        if !r.is_robot() {
            if session.participant_index(&r.speaker_id).is_none() {
                return Err(Error::UnknownParticipant {
                    file: ANNOTATION_FILE.into(),
                    id: r.speaker_id.clone(),
                });
            }
            if session.episode_of(r.t_start, r.t_end).is_none() {
                return Err(bad("not inside exactly one topic episode".into()));
            }
        }
    }
    for robot in records.iter().filter(|r| r.is_robot()) {
        for human in records.iter().filter(|r| !r.is_robot()) {
            if human.t_start < robot.t_end && robot.t_start < human.t_end {
                return Err(Error::AnnotationOverlapsRobot {
                    utterance_id: human.utterance_id.clone(),
                    robot_id: robot.utterance_id.clone(),
                });
            }
        }
    }
    Ok(())
}

pub fn load_session(dir: &Path) -> Result<(Session, Vec<AnnotationRecord>)> {
    let meta_path = dir.join(SESSION_FILE);
    let meta: SessionFile = serde_json::from_reader(BufReader::new(open(&meta_path)?))
        .map_err(|source| Error::Json {
            path: meta_path.clone(),
            source,
        })?;
    let audio = meta
        .participants
        .iter()
        .map(|p| read_wav(&dir.join(&p.wav)))
        .collect::<Result<Vec<_>>>()?;
    let skeleton = read_skeleton(&dir.join(SKELETON_FILE))?;
    let records = read_annotations(&dir.join(ANNOTATION_FILE))?;
    let session = Session::new(
        meta.session_id,
        meta.participants,
        meta.robot_pose,
        meta.topic_episodes,
        audio,
        skeleton,
    )?;
    validate_annotations(&session, &records)?;
    Ok((session, records))
}

pub fn write_session(dir: &Path, session: &Session, records: &[AnnotationRecord]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta_path = dir.join(SESSION_FILE);
    let meta = SessionFile {
        session_id: session.session_id.clone(),
        participants: session.participants.clone(),
        robot_pose: session.robot_pose,
        topic_episodes: session.topic_episodes.clone(),
    };
    let file = File::create(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &meta).map_err(|source| Error::Json {
        path: meta_path.clone(),
        source,
    })?;
    for (p, samples) in session.participants.iter().zip(&session.audio) {
        write_wav(&dir.join(&p.wav), samples)?;
    }
    write_skeleton(&dir.join(SKELETON_FILE), &session.skeleton)?;
    write_annotations(&dir.join(ANNOTATION_FILE), records)
}
