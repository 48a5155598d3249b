use std::collections::BTreeMap;

use topic_turn::dataset::{
    generate_synthetic_session, AnnotationLabel, AnnotationRecord, DecisionLabel, Joints, ParticipantMeta, RobotPose,
    Session, SkeletonFrame, SyntheticSpec,
};
use topic_turn::featurize::{
    extract_session, manifest_hash, read_sequences, read_table, write_sequences, write_table, Dataset,
    ExtractorConfig, FeatureManifest, Normalizer, SEQUENCE_LEN, VECTOR_LEN,
};

fn synthetic(participants: usize, utterances: usize, seed: u64) -> (Session, Vec<AnnotationRecord>) {
    let spec = SyntheticSpec {
        session_id: format!("s{participants}"),
        participants,
        utterances,
        ..Default::default()
    };
    generate_synthetic_session(&spec, seed).unwrap()
}

#[test]
fn vectors_and_sequences_have_fixed_shapes() {
    let cfg = ExtractorConfig::default();
    let mut names = Vec::new();
    for n in [2, 3] {
        let (s, r) = synthetic(n, 12, n as u64);
        let ex = extract_session(&s, &r, &cfg, true).unwrap();
        assert_eq!(ex.len(), r.iter().filter(|r| !r.is_robot()).count());
        for e in &ex {
            assert_eq!(e.vector.values.len(), VECTOR_LEN);
            assert!(e.vector.values.iter().all(|v| v.is_finite()));
            let seq = e.sequence.as_ref().unwrap();
            assert_eq!(seq.steps.len(), 16);
            assert!(seq.steps.iter().all(|s| s.len() == SEQUENCE_LEN));
            assert_eq!(e.meta.group_size, n);
        }
        names.push(FeatureManifest::vector().names().join(","));
    }
    assert_eq!(names[0], names[1]);
}

#[test]
fn extraction_is_deterministic() {
    let (s, r) = synthetic(3, 8, 9);
    let cfg = ExtractorConfig::default();
    let a = extract_session(&s, &r, &cfg, true).unwrap();
    let b = extract_session(&s, &r, &cfg, true).unwrap();
    assert_eq!(a, b);
}

/// Two motionless participants; the speaker emits a steady tone until `t_end`.
fn constructed(tone_until: f64, total: f64, amp: f64) -> (Session, AnnotationRecord) {
    let sr = 16000.0;
    let n = (total * sr) as usize;
    let p1: Vec<i16> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            if t < tone_until {
                (amp * (2.0 * std::f64::consts::PI * 150.0 * t).sin() * 32767.0) as i16
            } else {
                0
            }
        })
        .collect();
    let joints = |x: f64| Joints {
        pelvis: [x, 1.5, 0.9],
        chest: [x, 1.52, 1.35],
        lhand: [x - 0.2, 1.6, 1.0],
        rhand: [x + 0.2, 1.6, 1.0],
        head_yaw: Some(-std::f64::consts::FRAC_PI_2),
    };
    let skeleton = (0..(total * 30.0) as usize)
        .map(|k| SkeletonFrame {
            t: k as f64 / 30.0,
            bodies: BTreeMap::from([("p1".to_string(), joints(-0.8)), ("p2".to_string(), joints(0.8))]),
        })
        .collect();
    let meta = |id: &str| ParticipantMeta {
        id: id.into(),
        wav: format!("{id}.wav"),
        skeleton_track: id.into(),
    };
    let session = Session::new(
        "c".into(),
        vec![meta("p1"), meta("p2")],
        RobotPose { x: 0.0, y: 0.0, yaw: 1.57 },
        vec![(0.0, total)],
        vec![p1, vec![0; n]],
        skeleton,
    )
    .unwrap();
    let rec = AnnotationRecord {
        utterance_id: "u".into(),
        speaker_id: "p1".into(),
        t_start: 1.0,
        t_end: 5.0,
        label: AnnotationLabel::Decision(DecisionLabel::Needed),
    };
    (session, rec)
}

#[test]
fn constant_signals_give_identical_steps() {
    let (s, r) = constructed(10.0, 10.0, 0.3);
    let ex = extract_session(&s, &[r], &ExtractorConfig::default(), true).unwrap();
    let seq = ex[0].sequence.as_ref().unwrap();
    // Energy and kinematics are constant over all steps; pitch stops at the end.
    for step in &seq.steps {
        for j in (0..4).chain(9..SEQUENCE_LEN) {
            assert!((step[j] - seq.steps[0][j]).abs() < 1e-9, "dim {j}");
        }
    }
    // Motionless listener: velocity and head movement aggregates vanish.
    let v = &ex[0].vector;
    for block in [43, 57] {
        for off in [2, 3, 10, 11, 13] {
            assert_eq!(v.values[block + off], 0.0);
        }
    }
}

#[test]
fn energy_step_at_the_end() {
    let (s, r) = constructed(5.0, 10.0, 0.3);
    let ex = extract_session(&s, &[r], &ExtractorConfig::default(), true).unwrap();
    let seq = ex[0].sequence.as_ref().unwrap();
    let e: Vec<f64> = seq.steps.iter().map(|st| st[0]).collect();
    // Steps 1..=7 end before t_end, step 8 ends at it; steps 10.. lie after.
    for (k, &v) in e.iter().enumerate() {
        let tk = -2.0 + 0.25 * (k + 1) as f64;
        if tk <= 0.0 {
            assert!(v > 0.2, "step {k}: {v}");
        } else if tk >= 0.5 {
            assert!(v < 1e-6, "step {k}: {v}");
        }
    }
    let v = &ex[0].vector;
    assert!(v.values[0] > 0.2 && v.values[4] < 0.01);
}

#[test]
fn tables_round_trip() {
    let (s, r) = synthetic(2, 6, 4);
    let cfg = ExtractorConfig::default();
    let data = Dataset {
        manifest_hash: manifest_hash(&cfg),
        examples: extract_session(&s, &r, &cfg, true).unwrap(),
    };
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("features.csv");
    write_table(&p, &data).unwrap();
    write_sequences(&dir.path().join("seq.jsonl"), &data).unwrap();
    let mut back = read_table(&p).unwrap();
    assert_eq!(read_sequences(&dir.path().join("seq.jsonl"), &mut back).unwrap(), data.examples.len());
    assert_eq!(back, data);
}

#[test]
fn normalization_properties_on_training_data() {
    let cfg = ExtractorConfig::default();
    let mut examples = Vec::new();
    for (i, n) in [2, 3].into_iter().enumerate() {
        let (s, r) = synthetic(n, 16, 20 + i as u64);
        examples.extend(extract_session(&s, &r, &cfg, false).unwrap());
    }
    let keys: Vec<String> = examples.iter().map(|e| e.meta.participant_key()).collect();
    let pairs: Vec<(&str, &_)> = keys.iter().map(String::as_str).zip(examples.iter().map(|e| &e.vector)).collect();
    let norm = Normalizer::fit_vectors(&pairs).unwrap();
    for (k, v) in &pairs {
        let mut v = (*v).clone();
        norm.apply_vector(k, &mut v).unwrap();
        assert!(v.values.iter().all(|x| (-1.0..=1.0).contains(x)));
    }
    for key in keys.iter().collect::<std::collections::BTreeSet<_>>() {
        let zs: Vec<Vec<f64>> = pairs
            .iter()
            .filter(|(k, _)| k == key)
            .map(|(k, v)| norm.zscore(k, &v.values, &v.defined).0)
            .collect();
        if zs.len() < 2 {
            continue;
        }
        for j in 0..VECTOR_LEN {
            let col: Vec<f64> = pairs
                .iter()
                .filter(|(k, _)| k == key)
                .zip(&zs)
                .filter(|((_, v), _)| v.defined[j])
                .map(|(_, z)| z[j])
                .collect();
            if col.len() < 2 || col.iter().all(|&z| z == 0.0) {
                continue;
            }
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let sd = (col.iter().map(|z| (z - m).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
            assert!(m.abs() < 1e-9, "{key} {j}: mean {m}");
            assert!((sd - 1.0).abs() < 1e-9, "{key} {j}: std {sd}");
        }
    }
}
