//! Body features from skeleton frames: lean, hands relative to the chest,
//! their frame-to-frame velocities and a discretised head direction.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::dataset::{Joints, RobotPose, SkeletonFrame};
use crate::error::{Error, Result};

pub const KINEMATIC_LEN: usize = 14;

pub const KINEMATIC_NAMES: [&str; KINEMATIC_LEN] = [
    "lean_x",
    "lean_y",
    "lean_vel_x",
    "lean_vel_y",
    "lhand_x",
    "lhand_y",
    "lhand_z",
    "rhand_x",
    "rhand_y",
    "rhand_z",
    "lhand_vel",
    "rhand_vel",
    "head_dir",
    "head_move",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KinematicConfig {
    /// Half-angle within which a participant counts as looking at a target.
    pub gaze_tolerance_deg: f64,
    /// Longest dropout bridged by linear interpolation; longer ones hold the
    /// last observed pose.
    pub max_interpolation_gap: f64,
}

impl Default for KinematicConfig {
    fn default() -> Self {
        Self {
            gaze_tolerance_deg: 15.0,
            max_interpolation_gap: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Speaker,
    Listener,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BodyFeatureFrame {
    pub lean: [f64; 2],
    pub lhand: [f64; 3],
    pub rhand: [f64; 3],
    /// Absolute per-axis change of the lean vector since the previous frame.
    pub lean_vel: [f64; 2],
    /// Displacement magnitude of each chest-relative hand since the previous frame.
    pub hand_vel: [f64; 2],
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn static_features(j: &Joints) -> BodyFeatureFrame {
    let lean = sub(j.chest, j.pelvis);
    BodyFeatureFrame {
        lean: [lean[0], lean[1]],
        lhand: sub(j.lhand, j.chest),
        rhand: sub(j.rhand, j.chest),
        ..Default::default()
    }
}

/// Per-frame body features; velocities are zero without a previous frame.
pub fn body_frame_features(frame: &Joints, prev: Option<&Joints>) -> BodyFeatureFrame {
    let mut out = static_features(frame);
    if let Some(p) = prev {
        let q = static_features(p);
        out.lean_vel = [(out.lean[0] - q.lean[0]).abs(), (out.lean[1] - q.lean[1]).abs()];
        out.hand_vel = [norm(sub(out.lhand, q.lhand)), norm(sub(out.rhand, q.rhand))];
    }
    out
}

pub fn wrap_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r == -PI {
        PI
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Robot,
    Participant(usize),
}

/// Nearest target within `tolerance` radians of the head direction.
pub fn gaze_target(
    yaw: f64,
    position: [f64; 2],
    robot: [f64; 2],
    others: &[(usize, [f64; 2])],
    tolerance: f64,
) -> Option<Target> {
    let angle_to = |p: [f64; 2]| (p[1] - position[1]).atan2(p[0] - position[0]);
    let mut best: Option<(f64, Target)> = None;
    let candidates = std::iter::once((Target::Robot, robot))
        .chain(others.iter().map(|&(i, p)| (Target::Participant(i), p)));
    for (target, p) in candidates {
        let d = wrap_angle(yaw - angle_to(p)).abs();
        if d < tolerance && best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, target));
        }
    }
    best.map(|(_, t)| t)
}

/// Discrete head direction: 0 looking at the robot, 1 at the speaker (or, for
/// the speaker, at any listener), -1 elsewhere.
pub fn head_direction(target: Option<Target>, role: Role, speaker: usize) -> i8 {
    match (target, role) {
        (Some(Target::Robot), _) => 0,
        (Some(Target::Participant(_)), Role::Speaker) => 1,
        (Some(Target::Participant(j)), Role::Listener) if j == speaker => 1,
        _ => -1,
    }
}

/// Skeleton frames of one time range with dropouts filled per participant.
#[derive(Debug, Clone)]
pub struct BodyTracks {
    times: Vec<f64>,
    /// `poses[p][f]` for participant `p` and frame `f`; `None` only when the
    /// participant is never seen in the range.
    poses: Vec<Vec<Option<Joints>>>,
    robot: [f64; 2],
    tolerance: f64,
}

fn lerp3(a: [f64; 3], b: [f64; 3], w: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * w, a[1] + (b[1] - a[1]) * w, a[2] + (b[2] - a[2]) * w]
}

fn fill(times: &[f64], raw: Vec<Option<Joints>>, max_gap: f64) -> Vec<Option<Joints>> {
    let n = raw.len();
    let present: Vec<usize> = (0..n).filter(|&i| raw[i].is_some()).collect();
    if present.is_empty() {
        return vec![None; n];
    }
    let mut out = raw.clone();
    for i in 0..n {
        if raw[i].is_some() {
            continue;
        }
        let next = present.partition_point(|&p| p < i);
        let prev = next.checked_sub(1).map(|k| present[k]);
        let next = present.get(next).copied();
        out[i] = match (prev, next) {
            (Some(a), Some(b)) if times[b] - times[a] <= max_gap => {
                let (ja, jb) = (raw[a].unwrap(), raw[b].unwrap());
                let w = (times[i] - times[a]) / (times[b] - times[a]);
                Some(Joints {
                    pelvis: lerp3(ja.pelvis, jb.pelvis, w),
                    chest: lerp3(ja.chest, jb.chest, w),
                    lhand: lerp3(ja.lhand, jb.lhand, w),
                    rhand: lerp3(ja.rhand, jb.rhand, w),
                    head_yaw: None,
                })
            }
            (Some(a), _) => Some(Joints {
                head_yaw: None,
                ..raw[a].unwrap()
            }),
            (None, Some(b)) => Some(Joints {
                head_yaw: None,
                ..raw[b].unwrap()
            }),
            (None, None) => unreachable!(),
        };
    }
    // Head yaw carries the last observed value, or the first one at the start.
    let first_yaw = raw.iter().flatten().find_map(|j| j.head_yaw);
    let mut last = first_yaw;
    for j in out.iter_mut().flatten() {
        match j.head_yaw {
            Some(y) => last = Some(y),
            None => j.head_yaw = last,
        }
    }
    out
}

impl BodyTracks {
    /// Frames with `ta <= t < tb`. `participants` fixes the index order.
    pub fn new(
        frames: &[SkeletonFrame],
        participants: &[String],
        robot: RobotPose,
        ta: f64,
        tb: f64,
        cfg: &KinematicConfig,
    ) -> Self {
        let lo = frames.partition_point(|f| f.t < ta);
        let hi = frames.partition_point(|f| f.t < tb);
        let window = &frames[lo..hi];
        let times: Vec<f64> = window.iter().map(|f| f.t).collect();
        let poses = participants
            .iter()
            .map(|pid| {
                let raw = window.iter().map(|f| f.bodies.get(pid).copied()).collect();
                fill(&times, raw, cfg.max_interpolation_gap)
            })
            .collect();
        Self {
            times,
            poses,
            robot: [robot.x, robot.y],
            tolerance: cfg.gaze_tolerance_deg.to_radians(),
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn head_dir(&self, p: usize, f: usize, role: Role, speaker: usize) -> i8 {
        let Some(pose) = self.poses[p][f] else { return -1 };
        let Some(yaw) = pose.head_yaw else { return -1 };
        let own = [pose.pelvis[0], pose.pelvis[1]];
        let others: Vec<(usize, [f64; 2])> = (0..self.poses.len())
            .filter(|&q| q != p)
            .filter_map(|q| self.poses[q][f].map(|o| (q, [o.pelvis[0], o.pelvis[1]])))
            .collect();
        head_direction(gaze_target(yaw, own, self.robot, &others, self.tolerance), role, speaker)
    }

    fn frame_range(&self, ta: f64, tb: f64, closed_right: bool) -> std::ops::Range<usize> {
        let lo = if closed_right {
            self.times.partition_point(|&t| t <= ta)
        } else {
            self.times.partition_point(|&t| t < ta)
        };
        let hi = if closed_right {
            self.times.partition_point(|&t| t <= tb)
        } else {
            self.times.partition_point(|&t| t < tb)
        };
        lo..hi.max(lo)
    }

    /// Time-averaged features of one participant over a frame range.
    /// Velocities and head movement average the `n - 1` in-range differences.
    fn participant_block(&self, p: usize, range: std::ops::Range<usize>, role: Role, speaker: usize) -> Option<[f64; KINEMATIC_LEN]> {
        let poses = &self.poses[p][range.clone()];
        if poses.iter().any(Option::is_none) {
            return None;
        }
        let n = poses.len() as f64;
        let mut out = [0.0; KINEMATIC_LEN];
        let dirs: Vec<i8> = range.clone().map(|f| self.head_dir(p, f, role, speaker)).collect();
        for (k, pose) in poses.iter().enumerate() {
            let j = &pose.unwrap();
            let prev = (k > 0).then(|| poses[k - 1].unwrap());
            let b = body_frame_features(j, prev.as_ref());
            out[0] += b.lean[0];
            out[1] += b.lean[1];
            for a in 0..3 {
                out[4 + a] += b.lhand[a];
                out[7 + a] += b.rhand[a];
            }
            out[12] += dirs[k] as f64;
            if k > 0 {
                out[2] += b.lean_vel[0];
                out[3] += b.lean_vel[1];
                out[10] += b.hand_vel[0];
                out[11] += b.hand_vel[1];
                out[13] += (dirs[k] - dirs[k - 1]).abs() as f64;
            }
        }
        let m = (n - 1.0).max(1.0);
        for (i, v) in out.iter_mut().enumerate() {
            *v /= if matches!(i, 2 | 3 | 10 | 11 | 13) { m } else { n };
        }
        Some(out)
    }

    fn aggregate(&self, speaker: usize, others: bool, range: std::ops::Range<usize>) -> Option<[f64; KINEMATIC_LEN]> {
        if !others {
            return self.participant_block(speaker, range, Role::Speaker, speaker);
        }
        let blocks: Vec<[f64; KINEMATIC_LEN]> = (0..self.poses.len())
            .filter(|&p| p != speaker)
            .filter_map(|p| self.participant_block(p, range.clone(), Role::Listener, speaker))
            .collect();
        if blocks.is_empty() {
            return None;
        }
        let mut out = [0.0; KINEMATIC_LEN];
        for b in &blocks {
            for (o, v) in out.iter_mut().zip(b) {
                *o += v / blocks.len() as f64;
            }
        }
        Some(out)
    }

    /// 14 averaged values over frames in `[ta, tb)` for the speaker or the
    /// mean over all other participants. `Ok(None)` when nobody in the role
    /// set was ever tracked in the range.
    pub fn block(&self, speaker: usize, others: bool, ta: f64, tb: f64) -> Result<Option<[f64; KINEMATIC_LEN]>> {
        let range = self.frame_range(ta, tb, false);
        if range.is_empty() {
            return Err(Error::NoFrames { ta, tb });
        }
        Ok(self.aggregate(speaker, others, range))
    }

    /// Like [`block`](Self::block) over `(ta, tb]`; an empty range is undefined.
    pub fn step_block(&self, speaker: usize, others: bool, ta: f64, tb: f64) -> Option<[f64; KINEMATIC_LEN]> {
        let range = self.frame_range(ta, tb, true);
        if range.is_empty() {
            return None;
        }
        self.aggregate(speaker, others, range)
    }
}

/// Convenience wrapper: one block of a session over `[ta, tb)`.
pub fn kinematic_block(
    frames: &[SkeletonFrame],
    participants: &[String],
    robot: RobotPose,
    speaker: usize,
    others: bool,
    ta: f64,
    tb: f64,
    cfg: &KinematicConfig,
) -> Result<Option<[f64; KINEMATIC_LEN]>> {
    BodyTracks::new(frames, participants, robot, ta, tb, cfg).block(speaker, others, ta, tb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn joints(pelvis: [f64; 3]) -> Joints {
        Joints {
            pelvis,
            chest: [pelvis[0], pelvis[1], pelvis[2] + 0.45],
            lhand: [pelvis[0] - 0.2, pelvis[1] + 0.1, pelvis[2] + 0.2],
            rhand: [pelvis[0] + 0.2, pelvis[1] + 0.1, pelvis[2] + 0.2],
            head_yaw: Some(0.0),
        }
    }

    #[test]
    fn chest_above_pelvis_has_no_lean() {
        let f = body_frame_features(&joints([0.3, 1.0, 0.9]), None);
        assert_eq!(f.lean, [0.0, 0.0]);
        assert_eq!(f.lean_vel, [0.0, 0.0]);
        assert_eq!(f.hand_vel, [0.0, 0.0]);
    }

    #[test]
    fn hand_at_chest_and_hand_velocity() {
        let mut a = joints([0.0, 1.0, 0.9]);
        a.lhand = a.chest;
        assert_eq!(body_frame_features(&a, None).lhand, [0.0, 0.0, 0.0]);
        let mut b = a;
        b.lhand[1] += 0.03;
        let f = body_frame_features(&b, Some(&a));
        assert!((f.hand_vel[0] - 0.03).abs() < 1e-12);
        assert_eq!(f.hand_vel[1], 0.0);
    }

    #[test]
    fn gaze_codes() {
        let robot = [0.0, 0.0];
        let me = [0.0, 2.0];
        let other = (1usize, [2.0, 2.0]);
        let down = -PI / 2.0;
        // Facing the robot within 10 degrees.
        let t = gaze_target(down + 10f64.to_radians(), me, robot, &[other], 15f64.to_radians());
        assert_eq!(head_direction(t, Role::Speaker, 0), 0);
        let t = gaze_target(0.05, me, robot, &[other], 15f64.to_radians());
        assert_eq!(head_direction(t, Role::Listener, 1), 1);
        assert_eq!(head_direction(t, Role::Listener, 2), -1);
        assert_eq!(head_direction(t, Role::Speaker, 0), 1);
        let t = gaze_target(PI / 2.0, me, robot, &[other], 15f64.to_radians());
        assert_eq!(head_direction(t, Role::Speaker, 0), -1);
    }

    #[test]
    fn wrap_stays_in_range() {
        for a in [-7.0, -PI, -1.0, 0.0, PI, 4.0, 12.0] {
            let w = wrap_angle(a);
            assert!(w > -PI - 1e-12 && w <= PI + 1e-12);
            assert!(((a - w) / (2.0 * PI)).fract().abs() < 1e-9 || ((a - w) / (2.0 * PI)).fract().abs() > 1.0 - 1e-9);
        }
    }

    #[test]
    fn dropouts_are_interpolated() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let frames: Vec<SkeletonFrame> = (0..10)
            .map(|k| {
                let mut bodies = BTreeMap::new();
                if k != 4 {
                    bodies.insert("a".to_string(), joints([k as f64 * 0.01, 1.0, 0.9]));
                }
                bodies.insert("b".to_string(), joints([1.0, 1.0, 0.9]));
                SkeletonFrame { t: k as f64 / 30.0, bodies }
            })
            .collect();
        let pose = RobotPose { x: 0.0, y: 0.0, yaw: 0.0 };
        let tracks = BodyTracks::new(&frames, &ids, pose, 0.0, 1.0, &KinematicConfig::default());
        let p = tracks.poses[0][4].unwrap();
        assert!((p.pelvis[0] - 0.04).abs() < 1e-12);
        assert!(p.head_yaw.is_some());
        assert!(tracks.block(0, false, 0.0, 1.0).unwrap().is_some());
        assert!(matches!(tracks.block(0, false, 2.0, 3.0), Err(Error::NoFrames { .. })));
    }
}
