use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

use super::{
    ActionClip, Joint, Pose, ProcessedAction, RawRecord, SampleRecord, Vec3, DIST_WIDTH, FRAME_WIDTH, POSE_WIDTH,
    UP_AXIS,
};
use crate::error::{Error, Result};

/// Keeps every `(capture_fps / target_fps)`-th frame from index 0, then
/// truncates to `max_len`.
pub fn downsample(frames: &[Pose], capture_fps: usize, target_fps: usize, max_len: usize) -> Result<Vec<Pose>> {
    if frames.is_empty() {
        return Err(Error::Contract("cannot downsample an empty sequence".into()));
    }
    if target_fps == 0 || !capture_fps.is_multiple_of(target_fps) {
        return Err(Error::Config(format!(
            "target rate {target_fps} does not divide capture rate {capture_fps}"
        )));
    }
    let stride = capture_fps / target_fps;
    Ok(frames.iter().step_by(stride).take(max_len).copied().collect())
}

fn pose_center(p: &Pose) -> Vec3 {
    let (l, r) = (p.joint(Joint::LThigh), p.joint(Joint::RThigh));
    [(l[0] + r[0]) / 2.0, (l[1] + r[1]) / 2.0, (l[2] + r[2]) / 2.0]
}

/// Subtracts the thigh midpoint from every joint of each pose.
pub fn center_poses(seq: &[Pose]) -> (Vec<Pose>, Vec<Vec3>) {
    seq.iter()
        .map(|p| {
            let c = pose_center(p);
            (p.translated([-c[0], -c[1], -c[2]]), c)
        })
        .unzip()
}

/// `centers_b[i] - centers_a[i]`
pub fn relative_positions(centers_a: &[Vec3], centers_b: &[Vec3]) -> Result<Vec<Vec3>> {
    if centers_a.len() != centers_b.len() {
        return Err(Error::shape(
            "relative_positions",
            &[centers_a.len()],
            &[centers_b.len()],
        ));
    }
    Ok(centers_a
        .iter()
        .zip(centers_b)
        .map(|(a, b)| [b[0] - a[0], b[1] - a[1], b[2] - a[2]])
        .collect())
}

pub fn assemble_frames(pose_a: &[Pose], pose_b: &[Pose], dist: &[Vec3]) -> Result<ProcessedAction> {
    if pose_a.len() != pose_b.len() || pose_a.len() != dist.len() {
        return Err(Error::shape(
            "assemble_frames",
            &[pose_a.len(), pose_b.len()],
            &[dist.len()],
        ));
    }
    let mut data = Vec::with_capacity(pose_a.len() * FRAME_WIDTH);
    for ((a, b), d) in pose_a.iter().zip(pose_b).zip(dist) {
        data.extend_from_slice(&a.flat());
        data.extend_from_slice(&b.flat());
        data.extend_from_slice(d);
    }
    ProcessedAction::from_flat(data)
}

pub fn disassemble_frames(action: &ProcessedAction) -> Result<(Vec<Pose>, Vec<Pose>, Vec<Vec3>)> {
    let mut a = Vec::with_capacity(action.len());
    let mut b = Vec::with_capacity(action.len());
    let mut d = Vec::with_capacity(action.len());
    for f in action.frames() {
        a.push(Pose::from_flat(&f[..POSE_WIDTH])?);
        b.push(Pose::from_flat(&f[POSE_WIDTH..2 * POSE_WIDTH])?);
        d.push([f[2 * POSE_WIDTH], f[2 * POSE_WIDTH + 1], f[2 * POSE_WIDTH + 2]]);
    }
    Ok((a, b, d))
}

/// Centered poses of both actors plus their relative position, before
/// z-scoring.
pub fn clip_to_frames(clip: &ActionClip) -> Result<ProcessedAction> {
    let (a, ca) = center_poses(&clip.person_a);
    let (b, cb) = center_poses(&clip.person_b);
    let d = relative_positions(&ca, &cb)?;
    assemble_frames(&a, &b, &d)
}

fn rotate_vec(v: Vec3, cos: f64, sin: f64) -> Vec3 {
    // rotation about the vertical axis
    debug_assert_eq!(UP_AXIS, 1);
    [v[0] * cos + v[2] * sin, v[1], -v[0] * sin + v[2] * cos]
}

/// Rotates every joint of both actors about the vertical axis through the
/// origin.
pub fn rotate_action(clip: &ActionClip, theta: f64) -> ActionClip {
    let (sin, cos) = theta.sin_cos();
    let rot = |seq: &[Pose]| -> Vec<Pose> {
        seq.iter()
            .map(|p| {
                let mut q = *p;
                for j in &mut q.joints {
                    *j = rotate_vec(*j, cos, sin);
                }
                q
            })
            .collect()
    };
    ActionClip {
        person_a: rot(&clip.person_a),
        person_b: rot(&clip.person_b),
        fps: clip.fps,
    }
}

/// Replaces every clip with one rotated copy per angle.
pub fn rotate_all(dataset: &[RawRecord], angles: impl Fn(usize, usize) -> Vec<f64>) -> Vec<RawRecord> {
    dataset
        .iter()
        .enumerate()
        .map(|(ri, rec)| RawRecord {
            caption: rec.caption.clone(),
            clips: rec
                .clips
                .iter()
                .enumerate()
                .flat_map(|(ci, clip)| angles(ri, ci).into_iter().map(move |theta| rotate_action(clip, theta)))
                .collect(),
        })
        .collect()
}

/// Replaces each caption-action pair with `n_angles` copies rotated by angles
/// drawn uniformly from `[0, 2π)`.
pub fn augment(dataset: &[RawRecord], n_angles: usize, seed: u64) -> Vec<RawRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table: Vec<Vec<Vec<f64>>> = dataset
        .iter()
        .map(|rec| {
            rec.clips
                .iter()
                .map(|_| (0..n_angles).map(|_| rng.random_range(0.0..TAU)).collect())
                .collect()
        })
        .collect();
    rotate_all(dataset, |ri, ci| table[ri][ci].clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per-feature z-score parameters for the two pose streams and the relative
/// position stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationStats {
    pub pose1: FeatureStats,
    pub pose2: FeatureStats,
    pub dist: FeatureStats,
}

const MIN_STD: f64 = 1e-8;
const STREAMS: [(usize, usize); 3] = [(0, POSE_WIDTH), (POSE_WIDTH, POSE_WIDTH), (2 * POSE_WIDTH, DIST_WIDTH)];

impl NormalizationStats {
    /// Fits mean and population standard deviation of every feature over all
    /// frames. Features with std below 1e-8 get std 1; their frame indices
    /// (0..87) are returned.
    pub fn fit<'a>(actions: impl IntoIterator<Item = &'a ProcessedAction>) -> Result<(Self, Vec<usize>)> {
        let mut sum = vec![0.0; FRAME_WIDTH];
        let mut n = 0usize;
        let actions: Vec<&ProcessedAction> = actions.into_iter().collect();
        for a in &actions {
            for f in a.frames() {
                sum.iter_mut().zip(f).for_each(|(s, v)| *s += v);
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Contract("cannot fit normalization on zero frames".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut sq = vec![0.0; FRAME_WIDTH];
        for a in &actions {
            for f in a.frames() {
                for ((s, v), m) in sq.iter_mut().zip(f).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let mut degenerate = Vec::new();
        let std: Vec<f64> = sq
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let sd = (s / n as f64).sqrt();
                if sd < MIN_STD {
                    degenerate.push(k);
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        if !degenerate.is_empty() {
            warn!("degenerate features clamped to unit std: {degenerate:?}");
        }
        let part = |(start, len): (usize, usize)| FeatureStats {
            mean: mean[start..start + len].to_vec(),
            std: std[start..start + len].to_vec(),
        };
        Ok((
            NormalizationStats {
                pose1: part(STREAMS[0]),
                pose2: part(STREAMS[1]),
                dist: part(STREAMS[2]),
            },
            degenerate,
        ))
    }

    fn flat(&self) -> (Vec<f64>, Vec<f64>) {
        let mut mean = Vec::with_capacity(FRAME_WIDTH);
        let mut std = Vec::with_capacity(FRAME_WIDTH);
        for s in [&self.pose1, &self.pose2, &self.dist] {
            mean.extend_from_slice(&s.mean);
            std.extend_from_slice(&s.std);
        }
        (mean, std)
    }

    pub fn validate(&self) -> Result<()> {
        for ((name, s), (_, len)) in [("pose1", &self.pose1), ("pose2", &self.pose2), ("dist", &self.dist)]
            .into_iter()
            .zip(STREAMS)
        {
            if s.mean.len() != len || s.std.len() != len {
                return Err(Error::Config(format!("{name} stats must have {len} entries")));
            }
            if s.std.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::Config(format!("{name} stats have a non-positive std")));
            }
        }
        Ok(())
    }

    pub fn apply(&self, action: &ProcessedAction) -> ProcessedAction {
        let (mean, std) = self.flat();
        let mut out = action.clone();
        for f in out.data_mut().chunks_mut(FRAME_WIDTH) {
            for ((v, m), s) in f.iter_mut().zip(&mean).zip(&std) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    pub fn invert(&self, action: &ProcessedAction) -> ProcessedAction {
        let (mean, std) = self.flat();
        let mut out = action.clone();
        for f in out.data_mut().chunks_mut(FRAME_WIDTH) {
            for ((v, m), s) in f.iter_mut().zip(&mean).zip(&std) {
                *v = *v * s + m;
            }
        }
        out
    }
}

/// Per-frame features of every clip, one record per caption.
pub fn to_samples(raw: &[RawRecord]) -> Result<Vec<SampleRecord>> {
    raw.iter()
        .map(|r| {
            Ok(SampleRecord {
                caption: r.caption.clone(),
                actions: r.clips.iter().map(clip_to_frames).collect::<Result<_>>()?,
            })
        })
        .collect()
}

/// Holds out whole captions: roughly `val_fraction` of the records, chosen
/// by a seeded shuffle, go to the second set.
pub fn split_by_caption(
    records: &[SampleRecord],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!(
            "validation fraction {val_fraction} outside [0, 1)"
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (records.len() as f64 * val_fraction).round() as usize;
    let mut val: Vec<usize> = order[..n_val].to_vec();
    val.sort_unstable();
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (i, r) in records.iter().enumerate() {
        if val.binary_search(&i).is_ok() {
            held.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok((train, held))
}

pub fn normalize_records(stats: &NormalizationStats, records: &[SampleRecord]) -> Vec<SampleRecord> {
    records
        .iter()
        .map(|r| SampleRecord {
            caption: r.caption.clone(),
            actions: r.actions.iter().map(|a| stats.apply(a)).collect(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};
    use std::f64::consts::PI;

    fn pose_from(f: impl Fn(usize, usize) -> f64) -> Pose {
        let mut joints = [[0.0; 3]; 14];
        for (k, j) in joints.iter_mut().enumerate() {
            for (c, v) in j.iter_mut().enumerate() {
                *v = f(k, c);
            }
        }
        Pose::new(joints).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let vals: Vec<f64> = (0..42).map(|_| rng.random_range(-2.0..2.0)).collect();
        Pose::from_flat(&vals).unwrap()
    }

    fn random_clip(rng: &mut ChaCha8Rng, m: usize) -> ActionClip {
        let a = (0..m).map(|_| random_pose(rng)).collect();
        let b = (0..m).map(|_| random_pose(rng)).collect();
        ActionClip::new(a, b, 3).unwrap()
    }

    fn dist(a: Vec3, b: Vec3) -> f64 {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }

    #[test]
    fn downsample_examples() {
        let p = pose_from(|_, _| 0.0);
        assert_eq!(downsample(&vec![p; 240], 120, 3, 26).unwrap().len(), 6);
        assert_eq!(downsample(&vec![p; 1080], 120, 3, 26).unwrap().len(), 26);
        assert_eq!(downsample(&vec![p; 40], 120, 3, 26).unwrap().len(), 1);
        assert!(downsample(&[], 120, 3, 26).is_err());
        assert!(downsample(&[p], 120, 7, 26).is_err());
        let seq: Vec<Pose> = (0..81).map(|i| pose_from(move |_, _| i as f64)).collect();
        let out = downsample(&seq, 120, 3, 26).unwrap();
        assert_eq!(
            out.iter().map(|p| p.joints[0][0]).collect::<Vec<_>>(),
            [0.0, 40.0, 80.0]
        );
    }

    #[test]
    fn center_of_thigh_midpoint() {
        let p = pose_from(|k, c| match (k, c) {
            (5, 0) => 1.0,
            (11, 0) => 3.0,
            _ => 0.0,
        });
        let (centered, centers) = center_poses(&[p]);
        assert_eq!(centers[0], [2.0, 0.0, 0.0]);
        assert_eq!(centered[0].joint(Joint::LThigh), [-1.0, 0.0, 0.0]);

        let (again, c2) = center_poses(&centered);
        assert_eq!(c2[0], [0.0, 0.0, 0.0]);
        assert_eq!(again, centered);
    }

    #[test]
    fn relative_position_examples() {
        let zero = vec![[0.0; 3]; 4];
        assert_eq!(relative_positions(&zero, &zero).unwrap(), zero);
        let b = vec![[0.0, 0.0, 5.0]; 4];
        assert_eq!(relative_positions(&zero, &b).unwrap(), b);
        assert!(relative_positions(&zero, &b[..3]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ca: Vec<Vec3> = (0..5).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let cb: Vec<Vec3> = (0..5).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let d = relative_positions(&ca, &cb).unwrap();
        for i in 0..5 {
            for c in 0..3 {
                assert_eq!(d[i][c], cb[i][c] - ca[i][c]);
            }
        }
    }

    #[test]
    fn assemble_layout_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let clip = random_clip(&mut rng, 1);
        let d = vec![[0.5, -1.5, 2.5]];
        let act = assemble_frames(&clip.person_a, &clip.person_b, &d).unwrap();
        assert_eq!(act.len(), 1);
        assert_eq!(act.frame(0).len(), 87);
        assert_eq!(&act.frame(0)[84..87], &d[0]);

        let clip = random_clip(&mut rng, 5);
        let d: Vec<Vec3> = (0..5).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let act = assemble_frames(&clip.person_a, &clip.person_b, &d).unwrap();
        let (a, b, d2) = disassemble_frames(&act).unwrap();
        assert_eq!((a, b, d2), (clip.person_a.clone(), clip.person_b.clone(), d.clone()));
        assert!(assemble_frames(&clip.person_a, &clip.person_b, &d[..4]).is_err());
    }

    #[test]
    fn rotation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let clip = random_clip(&mut rng, 3);
        assert_eq!(rotate_action(&clip, 0.0), clip);
        let half = rotate_action(&clip, PI);
        for (p, q) in clip.person_a.iter().zip(&half.person_a) {
            for (u, v) in p.joints.iter().zip(&q.joints) {
                assert!((u[0] + v[0]).abs() < 1e-12);
                assert_eq!(u[1], v[1]);
                assert!((u[2] + v[2]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rotation_is_an_isometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let clip = random_clip(&mut rng, 2);
            let theta = rng.random_range(0.0..TAU);
            let rot = rotate_action(&clip, theta);
            for t in 0..clip.len() {
                let orig: Vec<Vec3> = clip.person_a[t]
                    .joints
                    .iter()
                    .chain(&clip.person_b[t].joints)
                    .copied()
                    .collect();
                let new: Vec<Vec3> = rot.person_a[t]
                    .joints
                    .iter()
                    .chain(&rot.person_b[t].joints)
                    .copied()
                    .collect();
                for i in 0..28 {
                    for j in i + 1..28 {
                        assert!((dist(orig[i], orig[j]) - dist(new[i], new[j])).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn augment_counts_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ds = vec![
            RawRecord {
                caption: "A waves at B".into(),
                clips: vec![random_clip(&mut rng, 2), random_clip(&mut rng, 3)],
            },
            RawRecord {
                caption: "B bows to A".into(),
                clips: vec![random_clip(&mut rng, 4)],
            },
        ];
        let aug = augment(&ds, 5, 9);
        assert_eq!(aug.iter().map(|r| r.clips.len()).sum::<usize>(), 15);
        assert_eq!(aug[0].caption, ds[0].caption);
        assert_eq!(aug, augment(&ds, 5, 9));
        assert_ne!(aug, augment(&ds, 5, 10));
        assert_eq!(rotate_all(&ds, |_, _| vec![0.0]), ds);
    }

    #[test]
    fn translation_does_not_change_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let clip = random_clip(&mut rng, 4);
        let v = [3.0, -1.0, 7.5];
        let moved = ActionClip::new(
            clip.person_a.iter().map(|p| p.translated(v)).collect(),
            clip.person_b.iter().map(|p| p.translated(v)).collect(),
            3,
        )
        .unwrap();
        let f1 = clip_to_frames(&clip).unwrap();
        let f2 = clip_to_frames(&moved).unwrap();
        for (x, y) in f1.data().iter().zip(f2.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zscore_fit_apply_invert() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let actions: Vec<ProcessedAction> = (0..6)
            .map(|k| {
                let m = 2 + k;
                let mut data: Vec<f64> = (0..m * FRAME_WIDTH).map(|_| rng.random_range(-3.0..5.0)).collect();
                for f in data.chunks_mut(FRAME_WIDTH) {
                    f[85] = 0.95; // constant vertical offset
                }
                ProcessedAction::from_flat(data).unwrap()
            })
            .collect();
        let (stats, degenerate) = NormalizationStats::fit(&actions).unwrap();
        assert_eq!(degenerate, [85]);
        assert_eq!(stats.dist.std[1], 1.0);
        let normed: Vec<ProcessedAction> = actions.iter().map(|a| stats.apply(a)).collect();
        let n: usize = normed.iter().map(|a| a.len()).sum();
        for k in 0..FRAME_WIDTH {
            let vals: Vec<f64> = normed.iter().flat_map(|a| a.frames().map(move |f| f[k])).collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            assert!(mean.abs() < 1e-6);
            if k == 85 {
                assert!(vals.iter().all(|&v| v.abs() < 1e-12));
            } else {
                assert!((sd - 1.0).abs() < 1e-6);
            }
        }
        for (a, z) in actions.iter().zip(&normed) {
            for (x, y) in a.data().iter().zip(stats.invert(z).data()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn centering_is_translation_invariant(
            coords in proptest::collection::vec(-5.0f64..5.0, 42),
            v in proptest::array::uniform3(-100.0f64..100.0),
        ) {
            let p = Pose::from_flat(&coords).unwrap();
            let (c1, _) = center_poses(&[p]);
            let (c2, _) = center_poses(&[p.translated(v)]);
            for (a, b) in c1[0].flat().iter().zip(c2[0].flat().iter()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
