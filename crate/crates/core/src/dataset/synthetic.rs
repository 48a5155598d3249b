//! Deterministic synthetic sessions with analytically known signals.
//!
//! Speech is a three-harmonic tone (weights 1, 1/2, 1/4) whose amplitude,
//! pitch contour and the participants' head orientation over the last two
//! seconds of each utterance depend on the drawn label:
//!
//! | label           | end amplitude | pitch glide | gaze                         |
//! |-----------------|---------------|-------------|------------------------------|
//! | not appropriate | 0.45          | flat        | speaker looks at a listener  |
//! | appropriate     | 0.22          | -10 %       | speaker turns to the robot   |
//! | needed          | 0.09          | -25 %       | everyone turns to the robot  |
//!
//! Amplitudes carry a +-15 % random spread. With `separable = false` the end
//! of every utterance looks like "not appropriate" regardless of its label.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::types::{
    f64_to_pcm, AnnotationLabel, AnnotationRecord, DecisionLabel, Joints, ParticipantMeta, RobotPose,
    Session, SkeletonFrame, ROBOT_ID, SAMPLE_RATE, SKELETON_RATE,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub session_id: String,
    pub participants: usize,
    /// Human utterances carrying a decision label.
    pub utterances: usize,
    pub priors: [f64; 3],
    pub separable: bool,
    /// Leading silence before the first robot prompt, seconds.
    pub lead_in: f64,
    pub noise_dbfs: f64,
    pub utterance_duration: (f64, f64),
    /// Silence between consecutive utterances.
    pub gap: (f64, f64),
    /// Utterances per topic episode.
    pub episode_length: (usize, usize),
    /// Probability that an utterance longer than 3 s contains a short pause
    /// below the utterance gap.
    pub pause_probability: f64,
    /// Probability of a short listener backchannel after an utterance.
    pub backchannel_probability: f64,
    /// Probability that a body is missing from a skeleton frame.
    pub skeleton_dropout: f64,
    /// Replace every voice by a pure sine at this frequency.
    pub pure_tone: Option<f64>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            session_id: "synthetic".into(),
            participants: 2,
            utterances: 40,
            priors: [0.74, 0.14, 0.12],
            separable: true,
            lead_in: 1.0,
            noise_dbfs: -70.0,
            utterance_duration: (2.2, 4.0),
            gap: (2.2, 3.2),
            episode_length: (10, 30),
            pause_probability: 0.3,
            backchannel_probability: 0.0,
            skeleton_dropout: 0.0,
            pure_tone: None,
        }
    }
}

const ROBOT_PROMPT: f64 = 2.0;
const TAIL: f64 = 3.0;
const RAMP: f64 = 0.005;
const CROSSFADE: f64 = 0.1;
const GAZE_NOISE: f64 = 3.0 * PI / 180.0;

#[derive(Debug, Clone)]
struct Voiced {
    start: f64,
    end: f64,
}

#[derive(Debug, Clone)]
struct Plan {
    speaker: usize,
    start: f64,
    end: f64,
    segments: Vec<Voiced>,
    label: DecisionLabel,
    /// Signature actually rendered (differs from `label` when not separable).
    shape: DecisionLabel,
    body_amp: f64,
    end_amp: f64,
    base_f0: f64,
    /// Listener the speaker addresses.
    addressee: usize,
    backchannel: bool,
}

fn signature(shape: DecisionLabel) -> (f64, f64) {
    match shape {
        DecisionLabel::NotAppropriate => (0.45, 1.0),
        DecisionLabel::Appropriate => (0.22, 0.9),
        DecisionLabel::Needed => (0.09, 0.75),
    }
}

/// Seat positions on an arc in front of the robot.
pub fn seat_positions(n: usize) -> Vec<[f64; 2]> {
    (0..n)
        .map(|i| {
            let a = if n == 1 {
                PI / 2.0
            } else {
                (30.0 + 120.0 * i as f64 / (n - 1) as f64).to_radians()
            };
            [1.7 * a.cos(), 1.7 * a.sin()]
        })
        .collect()
}

pub fn robot_pose() -> RobotPose {
    RobotPose {
        x: 0.0,
        y: 0.0,
        yaw: PI / 2.0,
    }
}

fn range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

pub fn generate_synthetic_session(spec: &SyntheticSpec, seed: u64) -> Result<(Session, Vec<AnnotationRecord>)> {
    if spec.participants < 2 {
        return Err(Error::TooFewParticipants(spec.participants));
    }
    if spec.priors.iter().any(|p| !(*p >= 0.0)) || spec.priors.iter().sum::<f64>() <= 0.0 {
        return Err(Error::InvalidConfig("class priors must be non-negative and not all zero".into()));
    }
    if spec.gap.0 < 0.8 || spec.utterance_duration.0 < 0.5 || spec.episode_length.0 == 0 {
        return Err(Error::InvalidConfig(
            "gaps must be at least 0.8 s, utterances at least 0.5 s, episodes non-empty".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.participants;
    let classes = WeightedIndex::new(spec.priors).expect("validated priors");

    let mut plans: Vec<Plan> = Vec::new();
    let mut records = Vec::new();
    let mut episode_starts = Vec::new();
    let mut t = spec.lead_in;
    let mut left_in_episode = 0usize;
    let mut last_speaker = rng.gen_range(0..n);
    let mut last_end = vec![f64::NEG_INFINITY; n];
    let mut robot_count = 0;

    for _ in 0..spec.utterances {
        if left_in_episode == 0 {
            robot_count += 1;
            episode_starts.push(t);
            records.push(AnnotationRecord {
                utterance_id: format!("{ROBOT_ID}-{robot_count:04}"),
                speaker_id: ROBOT_ID.into(),
                t_start: t,
                t_end: t + ROBOT_PROMPT,
                label: AnnotationLabel::Robot,
            });
            t += ROBOT_PROMPT + rng.gen_range(0.8..1.2);
            let (lo, hi) = spec.episode_length;
            left_in_episode = rng.gen_range(lo..=hi.max(lo));
        }
        left_in_episode -= 1;

        let speaker = if rng.gen_bool(0.7) {
            (last_speaker + rng.gen_range(1..n)) % n
        } else {
            last_speaker
        };
        let start = t.max(last_end[speaker] + 0.8);
        let duration = range(&mut rng, spec.utterance_duration);
        let end = start + duration;
        let mut segments = vec![Voiced { start, end }];
        if duration > 3.0 && rng.gen_bool(spec.pause_probability) {
            let pause = rng.gen_range(0.2..0.5);
            let at = start + rng.gen_range(0.5..(duration - 2.5 - pause).max(0.51));
            segments = vec![
                Voiced { start, end: at },
                Voiced {
                    start: at + pause,
                    end,
                },
            ];
        }
        let label = DecisionLabel::ALL[classes.sample(&mut rng)];
        let shape = if spec.separable {
            label
        } else {
            DecisionLabel::NotAppropriate
        };
        let (amp, _) = signature(shape);
        let addressee = (speaker + rng.gen_range(1..n)) % n;
        let base_f0 = spec.pure_tone.unwrap_or_else(|| rng.gen_range(110.0..220.0));
        plans.push(Plan {
            speaker,
            start,
            end,
            segments,
            label,
            shape,
            body_amp: rng.gen_range(0.3..0.4),
            end_amp: amp * rng.gen_range(0.85..1.15),
            base_f0,
            addressee,
            backchannel: false,
        });
        last_end[speaker] = end;
        last_speaker = speaker;
        let gap = range(&mut rng, spec.gap);

        if gap >= 2.5 && rng.gen_bool(spec.backchannel_probability) {
            let listener = addressee;
            let bc_start = end + rng.gen_range(0.4..1.0);
            let bc_end = bc_start + rng.gen_range(0.3..0.5);
            if last_end[listener] + 0.8 < bc_start {
                plans.push(Plan {
                    speaker: listener,
                    start: bc_start,
                    end: bc_end,
                    segments: vec![Voiced {
                        start: bc_start,
                        end: bc_end,
                    }],
                    label: DecisionLabel::NotAppropriate,
                    shape: DecisionLabel::NotAppropriate,
                    body_amp: 0.2,
                    end_amp: 0.2,
                    base_f0: spec.pure_tone.unwrap_or_else(|| rng.gen_range(110.0..220.0)),
                    addressee: speaker,
                    backchannel: true,
                });
                last_end[listener] = bc_end;
            }
        }
        t = end + gap;
    }
    let duration = plans.iter().map(|p| p.end).fold(t, f64::max) + TAIL;
    let mut episodes: Vec<(f64, f64)> = episode_starts
        .windows(2)
        .map(|w| (w[0], w[1]))
        .collect();
    if let Some(&last) = episode_starts.last() {
        episodes.push((last, duration));
    }

    let mut counters = vec![0usize; n];
    for p in &plans {
        counters[p.speaker] += 1;
        records.push(AnnotationRecord {
            utterance_id: format!("p{}-{:04}", p.speaker + 1, counters[p.speaker]),
            speaker_id: format!("p{}", p.speaker + 1),
            t_start: p.start,
            t_end: p.end,
            label: AnnotationLabel::Decision(p.label),
        });
    }
    records.sort_by(|a, b| a.t_start.total_cmp(&b.t_start));

    let total = (duration * SAMPLE_RATE as f64).round() as usize;
    let audio = (0..n)
        .map(|i| render_audio(&plans, i, total, spec, &mut rng))
        .collect();
    let skeleton = render_skeleton(&plans, n, duration, spec, &mut rng);

    let participants = (0..n)
        .map(|i| ParticipantMeta {
            id: format!("p{}", i + 1),
            wav: format!("p{}.wav", i + 1),
            skeleton_track: format!("body-{}", i + 1),
        })
        .collect();
    let session = Session::new(
        spec.session_id.clone(),
        participants,
        robot_pose(),
        episodes,
        audio,
        skeleton,
    )?;
    Ok((session, records))
}

fn render_audio(plans: &[Plan], who: usize, total: usize, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<i16> {
    let sr = SAMPLE_RATE as f64;
    let mut out = vec![0.0f64; total];
    let pure = spec.pure_tone.is_some();
    for p in plans.iter().filter(|p| p.speaker == who) {
        let (_, glide) = signature(p.shape);
        let tail_start = p.end - 2.0;
        for seg in &p.segments {
            let a = (seg.start * sr).round() as usize;
            let b = ((seg.end * sr).round() as usize).min(total);
            let mut phase = 0.0f64;
            for (k, slot) in out[a..b].iter_mut().enumerate() {
                let t = (a + k) as f64 / sr;
                let env = ((t - seg.start) / RAMP).min((seg.end - t) / RAMP).clamp(0.0, 1.0);
                let mix = ((t - (tail_start - CROSSFADE / 2.0)) / CROSSFADE).clamp(0.0, 1.0);
                let amp = if pure { p.end_amp } else { p.body_amp + mix * (p.end_amp - p.body_amp) };
                let f0 = if pure || t < tail_start {
                    p.base_f0
                } else {
                    p.base_f0 * (1.0 - (1.0 - glide) * (t - tail_start) / 2.0)
                };
                let (s1, c1) = phase.sin_cos();
                let voice = if pure {
                    s1
                } else {
                    (s1 + s1 * c1 + 0.25 * s1 * (3.0 - 4.0 * s1 * s1)) / 1.75
                };
                *slot += amp * env * voice;
                phase += 2.0 * PI * f0 / sr;
                if phase > 2.0 * PI {
                    phase -= 2.0 * PI;
                }
            }
        }
    }
    let sigma = 10f64.powf(spec.noise_dbfs / 20.0);
    let half_width = sigma * 3f64.sqrt();
    out.iter()
        .map(|&v| f64_to_pcm(v + rng.gen_range(-half_width..half_width)))
        .collect()
}

#[derive(Clone, Copy)]
enum Gaze {
    Robot,
    Participant(usize),
}

fn yaw_towards(from: [f64; 2], to: [f64; 2]) -> f64 {
    (to[1] - from[1]).atan2(to[0] - from[0])
}

fn wrap(a: f64) -> f64 {
    let mut a = a;
    while a > PI {
        a -= 2.0 * PI;
    }
    while a < -PI {
        a += 2.0 * PI;
    }
    a
}

fn render_skeleton(
    plans: &[Plan],
    n: usize,
    duration: f64,
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
) -> Vec<SkeletonFrame> {
    let seats = seat_positions(n);
    let robot = robot_pose();
    let frames = (duration * SKELETON_RATE).floor() as usize;
    // Slowly drifting posture per participant.
    let mut lean: Vec<[f64; 2]> = (0..n)
        .map(|_| [rng.gen_range(-0.03..0.03), rng.gen_range(0.0..0.06)])
        .collect();
    let phase: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let main: Vec<&Plan> = plans.iter().filter(|p| !p.backchannel).collect();
    let mut out = Vec::with_capacity(frames);
    let mut cursor = 0usize;
    for f in 0..frames {
        let t = f as f64 / SKELETON_RATE;
        while cursor + 1 < main.len() && main[cursor + 1].start <= t {
            cursor += 1;
        }
        let current = main.get(cursor).filter(|p| p.start <= t && t < p.end + 2.0);
        let mut bodies = BTreeMap::new();
        for i in 0..n {
            for v in lean[i].iter_mut() {
                *v = (*v + rng.gen_range(-0.0005..0.0005)).clamp(-0.08, 0.1);
            }
            let gaze = match current {
                Some(p) => {
                    let late = t >= p.end - 1.0;
                    if i == p.speaker {
                        match p.shape {
                            DecisionLabel::NotAppropriate => Gaze::Participant(p.addressee),
                            _ if late => Gaze::Robot,
                            _ => Gaze::Participant(p.addressee),
                        }
                    } else if p.shape == DecisionLabel::Needed && late {
                        Gaze::Robot
                    } else {
                        Gaze::Participant(p.speaker)
                    }
                }
                None => Gaze::Robot,
            };
            let seat = seats[i];
            let target = match gaze {
                Gaze::Robot => [robot.x, robot.y],
                Gaze::Participant(j) => seats[j],
            };
            let yaw = wrap(yaw_towards(seat, target) + rng.gen_range(-GAZE_NOISE..GAZE_NOISE));
            // Speaker gestures; gestures continue past the utterance end only
            // when the turn is not finished.
            let gesturing = current.is_some_and(|p| {
                p.speaker == i
                    && match p.shape {
                        DecisionLabel::NotAppropriate => t < p.end + 2.0,
                        DecisionLabel::Appropriate => t < p.end,
                        DecisionLabel::Needed => t < p.end - 1.0,
                    }
            });
            let swing = if gesturing {
                0.06 * (2.0 * PI * 1.5 * t + phase[i]).sin()
            } else {
                0.0
            };
            let pelvis = [seat[0], seat[1], 0.9];
            let chest = [pelvis[0] + lean[i][0], pelvis[1] + lean[i][1], 1.35];
            let lhand = [chest[0] - 0.2, chest[1] + 0.15 + swing, chest[2] - 0.3 + 0.5 * swing];
            let rhand = [chest[0] + 0.2, chest[1] + 0.15 - swing, chest[2] - 0.3 - 0.5 * swing];
            if spec.skeleton_dropout > 0.0 && rng.gen_bool(spec.skeleton_dropout) {
                continue;
            }
            bodies.insert(
                format!("p{}", i + 1),
                Joints {
                    pelvis,
                    chest,
                    lhand,
                    rhand,
                    head_yaw: Some(yaw),
                },
            );
        }
        out.push(SkeletonFrame { t, bodies });
    }
    out
}

/// Splits a multi-session corpus of `total` labelled utterances into sessions
/// alternating between two and three participants.
pub fn corpus_specs(total: usize, sessions: usize, separable: bool) -> Vec<SyntheticSpec> {
    let sessions = sessions.max(1);
    (0..sessions)
        .map(|s| {
            let share = total / sessions + usize::from(s < total % sessions);
            SyntheticSpec {
                session_id: format!("s{:02}", s + 1),
                participants: if s % 2 == 0 { 2 } else { 3 },
                utterances: share,
                separable,
                ..Default::default()
            }
        })
        .collect()
}
