use topic_turn::baselines::SpbConfig;
use topic_turn::dataset::{
    generate_synthetic_session, robot_pose, AnnotationLabel, AnnotationRecord, DecisionLabel, ParticipantMeta, Session,
    SyntheticSpec,
};
use topic_turn::featurize::{ExtractorConfig, SessionFeatures};
use topic_turn::stream::{
    run_simulated, serve, write_message, Classifier, Decision, Outcome, PolicyAction, ReplayConfig, StreamConfig,
    StreamEngine, StreamMessage,
};
use topic_turn::baselines::SpbDecision;

const SR: usize = 16_000;

fn silence(secs: f64) -> Vec<i16> {
    vec![0; (secs * SR as f64) as usize]
}

/// Writes a voiced tone over `[a, b)` seconds.
fn speak(buf: &mut [i16], a: f64, b: f64) {
    let (i0, i1) = ((a * SR as f64) as usize, (b * SR as f64) as usize);
    for i in i0..i1 {
        let t = i as f64 / SR as f64;
        let v = 0.25 * (2.0 * std::f64::consts::PI * 150.0 * t).sin() + 0.08 * (2.0 * std::f64::consts::PI * 450.0 * t).sin();
        buf[i] = (v * 32767.0) as i16;
    }
}

fn engine(cfg: StreamConfig) -> StreamEngine {
    let ids = vec!["p1".to_string(), "p2".to_string()];
    StreamEngine::new("live", &ids, robot_pose(), Classifier::Spb(SpbConfig::default()), cfg).unwrap()
}

fn drive(e: &mut StreamEngine, channels: &[Vec<i16>]) -> Vec<Decision> {
    let mut out = Vec::new();
    let n = channels[0].len();
    let mut pos = 0;
    while pos < n {
        let end = (pos + 160).min(n);
        for (i, c) in channels.iter().enumerate() {
            e.push_audio(&format!("p{}", i + 1), Some(pos as u64), &c[pos..end]).unwrap();
        }
        out.extend(e.poll(e.clock()));
        pos = end;
    }
    out.extend(e.finish().unwrap());
    out
}

#[test]
fn short_burst_then_silence_is_one_utterance_end() {
    let mut p1 = silence(4.0);
    speak(&mut p1, 1.0, 1.6);
    let p2 = silence(4.0);
    let mut e = engine(StreamConfig::default());
    let ds = drive(&mut e, &[p1, p2]);
    assert_eq!(e.counters().utterances, 1);
    assert_eq!(ds.len(), 1);
    assert_eq!(ds[0].utterance_id, "p1-0001");
}

#[test]
fn decision_lands_two_seconds_after_the_end() {
    let mut p1 = silence(15.0);
    speak(&mut p1, 5.0, 10.0);
    let mut e = engine(StreamConfig::default());
    let ds = drive(&mut e, &[p1, silence(15.0)]);
    assert_eq!(ds.len(), 1);
    assert!((ds[0].t_end - 10.0).abs() < 0.05, "{}", ds[0].t_end);
    assert!((ds[0].t_decision - 12.0).abs() <= 0.1);
    assert!((ds[0].emitted_at - 12.0).abs() <= 0.1);
}

#[test]
fn speech_inside_the_grace_window_cancels() {
    let mut p1 = silence(15.0);
    speak(&mut p1, 5.0, 10.0);
    let mut p2 = silence(15.0);
    speak(&mut p2, 11.0, 11.5);
    let mut e = engine(StreamConfig::default());
    let ds = drive(&mut e, &[p1, p2]);
    assert!(ds.iter().all(|d| d.speaker_id != "p1"));
    assert_eq!(e.counters().cancelled, 1);
    // The interrupting utterance still gets its own decision.
    assert_eq!(ds.len(), 1);
    assert_eq!(ds[0].speaker_id, "p2");
}

#[test]
fn long_speech_then_pause_changes_topic_under_the_rule() {
    // 26 phrases of 2.5 s with short breaths: 65 s of speech in one turn.
    let mut p1 = silence(85.0);
    for k in 0..26 {
        let a = 1.0 + 3.0 * k as f64;
        speak(&mut p1, a, a + 2.5);
    }
    let mut e = engine(StreamConfig::default());
    let ds = drive(&mut e, &[p1, silence(85.0)]);
    assert_eq!(ds.len(), 1);
    assert!((ds[0].t_end - 78.5).abs() < 0.05);
    assert!(ds[0].cumulative_speech >= 64.5, "{}", ds[0].cumulative_speech);
    assert_eq!(ds[0].outcome, Outcome::Spb(SpbDecision::AppropriateOrNeeded));
    assert_eq!(ds[0].policy_action, PolicyAction::ChangeTopic);
}

#[test]
fn short_speech_waits_under_the_rule() {
    let mut p1 = silence(20.0);
    speak(&mut p1, 1.0, 11.0);
    let mut e = engine(StreamConfig::default());
    let ds = drive(&mut e, &[p1, silence(20.0)]);
    assert_eq!(ds[0].policy_action, PolicyAction::Wait);
}

fn quiet_session() -> Session {
    let participants = (1..=2)
        .map(|i| ParticipantMeta {
            id: format!("p{i}"),
            wav: format!("p{i}.wav"),
            skeleton_track: format!("body-{i}"),
        })
        .collect();
    Session::new("quiet".into(), participants, robot_pose(), vec![(0.0, 30.0)], vec![silence(30.0), silence(30.0)], vec![]).unwrap()
}

#[test]
fn silent_session_makes_no_decisions() {
    let s = quiet_session();
    let r = run_simulated(&s, &[], Classifier::Spb(SpbConfig::default()), StreamConfig::default(), &ReplayConfig::default()).unwrap();
    assert!(r.decisions.is_empty());
    assert_eq!(r.counters.utterances, 0);
}

fn synthetic(seed: u64, utterances: usize) -> (Session, Vec<AnnotationRecord>) {
    let spec = SyntheticSpec {
        session_id: format!("live{seed}"),
        participants: 3,
        utterances,
        ..Default::default()
    };
    generate_synthetic_session(&spec, seed).unwrap()
}

#[test]
fn replay_is_deterministic_and_safe() {
    let (s, recs) = synthetic(4, 25);
    let run = || run_simulated(&s, &recs, Classifier::Spb(SpbConfig::default()), StreamConfig::default(), &ReplayConfig::default()).unwrap();
    let a = run();
    let b = run();
    assert_eq!(a.decisions, b.decisions);
    assert!(!a.decisions.is_empty());
    assert_eq!(a.safety_violations, 0);
    assert!(a.max_delay <= ReplayConfig::default().tick());
    assert!(a.max_buffered <= StreamConfig::default().horizon + 1e-9);
    assert!(a.agreement.matched > 0);
}

#[test]
fn streamed_features_match_offline_extraction() {
    let (s, recs) = synthetic(9, 20);
    let cfg = StreamConfig {
        record_features: true,
        ..Default::default()
    };
    let r = run_simulated(&s, &recs, Classifier::Spb(SpbConfig::default()), cfg, &ReplayConfig::default()).unwrap();
    assert!(!r.decisions.is_empty());
    let offline = SessionFeatures::new(&s, &ExtractorConfig::default()).unwrap();
    for d in &r.decisions {
        let rec = AnnotationRecord {
            utterance_id: d.utterance_id.clone(),
            speaker_id: d.speaker_id.clone(),
            t_start: d.t_start,
            t_end: d.t_end,
            label: AnnotationLabel::Decision(DecisionLabel::NotAppropriate),
        };
        let want = offline.vector(&rec).unwrap();
        let got = d.features.as_ref().unwrap();
        assert_eq!(got.defined, want.defined, "{}", d.utterance_id);
        for (k, (g, w)) in got.values.iter().zip(&want.values).enumerate() {
            assert!((g - w).abs() <= 1e-9 * (1.0 + w.abs()), "{} dim {k}: {g} vs {w}", d.utterance_id);
        }
    }
}

#[test]
fn memory_stays_bounded_on_a_long_session() {
    let (s, recs) = synthetic(2, 120);
    assert!(s.duration() > 600.0);
    let r = run_simulated(&s, &recs, Classifier::Spb(SpbConfig::default()), StreamConfig::default(), &ReplayConfig::default()).unwrap();
    assert!(r.max_buffered <= StreamConfig::default().horizon + 1e-9);
}

#[test]
fn framed_input_drives_the_engine() {
    let mut p1 = silence(15.0);
    speak(&mut p1, 5.0, 10.0);
    let p2 = silence(15.0);
    let mut input = Vec::new();
    for (k, (a, b)) in p1.chunks(1600).zip(p2.chunks(1600)).enumerate() {
        for (pid, c) in [("p1", a), ("p2", b)] {
            let msg = StreamMessage::Audio {
                participant: pid.into(),
                start_sample: Some((k * 1600) as u64),
                samples: c.to_vec(),
            };
            write_message(&mut input, &msg).unwrap();
        }
    }
    // A stale chunk is counted and ignored.
    write_message(
        &mut input,
        &StreamMessage::Audio {
            participant: "p1".into(),
            start_sample: Some(0),
            samples: vec![0; 160],
        },
    )
    .unwrap();
    write_message(&mut input, &StreamMessage::End).unwrap();
    let mut e = engine(StreamConfig::default());
    let mut out = Vec::new();
    let counters = serve(&mut e, &mut &input[..], &mut out).unwrap();
    assert_eq!(counters.audio_regressions, 1);
    let lines: Vec<Decision> = String::from_utf8(out).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0].utterance_id, "p1-0001");
}
