//! Procedural stand-in corpus: templated two-actor captions, each animated
//! as 14-joint skeletons at the capture rate and then downsampled.

use std::collections::HashSet;
use std::f64::consts::{PI, TAU};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use super::{downsample, ActionClip, Pose, Vec3, CAPTURE_FPS, MAX_ACTION_LEN, NUM_JOINTS, TARGET_FPS};
use crate::error::{Error, Result};
use crate::textproc::{tokenize, Vocab, MAX_VOCAB};

/// A caption with the clips that realize it, before preprocessing.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRecord {
    pub caption: String,
    pub clips: Vec<ActionClip>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Actor {
    A,
    B,
}

impl Actor {
    fn name(self) -> &'static str {
        match self {
            Actor::A => "A",
            Actor::B => "B",
        }
    }

    fn other(self) -> Actor {
        match self {
            Actor::A => Actor::B,
            Actor::B => Actor::A,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Act {
    WalkTowards,
    RunTowards,
    Approach,
    WalkAway,
    RunAway,
    Retreat,
    WaveAt,
    Hug,
    BowTo,
    TurnAround,
}

const ACTS: [Act; 10] = [
    Act::WalkTowards,
    Act::RunTowards,
    Act::Approach,
    Act::WalkAway,
    Act::RunAway,
    Act::Retreat,
    Act::WaveAt,
    Act::Hug,
    Act::BowTo,
    Act::TurnAround,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Clause {
    actor: Actor,
    act: Act,
}

impl Clause {
    fn text(self) -> String {
        let (x, y) = (self.actor.name(), self.actor.other().name());
        match self.act {
            Act::WalkTowards => format!("{x} walks towards {y}"),
            Act::RunTowards => format!("{x} runs towards {y}"),
            Act::Approach => format!("{x} approaches {y}"),
            Act::WalkAway => format!("{x} walks away from {y}"),
            Act::RunAway => format!("{x} runs away from {y}"),
            Act::Retreat => format!("{x} retreats from {y}"),
            Act::WaveAt => format!("{x} waves at {y}"),
            Act::Hug => format!("{x} hugs {y}"),
            Act::BowTo => format!("{x} bows to {y}"),
            Act::TurnAround => format!("{x} turns around"),
        }
    }
}

const CONNECTIVES: [&str; 3] = [" and then ", ", then ", ". "];

#[derive(Clone, Debug)]
struct CaptionSpec {
    text: String,
    clauses: Vec<Clause>,
}

fn catalog_specs() -> Vec<CaptionSpec> {
    let clauses: Vec<Clause> = [Actor::A, Actor::B]
        .into_iter()
        .flat_map(|actor| ACTS.into_iter().map(move |act| Clause { actor, act }))
        .collect();
    let mut out: Vec<CaptionSpec> = clauses
        .iter()
        .map(|&c| CaptionSpec {
            text: format!("{}.", c.text()),
            clauses: vec![c],
        })
        .collect();
    for conn in CONNECTIVES {
        for &c1 in &clauses {
            for &c2 in &clauses {
                if c1 != c2 {
                    out.push(CaptionSpec {
                        text: format!("{}{conn}{}.", c1.text(), c2.text()),
                        clauses: vec![c1, c2],
                    });
                }
            }
        }
    }
    out
}

/// Every caption the grammar can produce, in a fixed order.
pub fn caption_catalog() -> Vec<String> {
    catalog_specs().into_iter().map(|s| s.text).collect()
}

/// Draws `n_captions` distinct captions and animates `variants_per_caption`
/// different performances of each. Deterministic in `seed`.
pub fn synth_dataset(seed: u64, n_captions: usize, variants_per_caption: usize) -> Result<Vec<RawRecord>> {
    if n_captions == 0 || variants_per_caption == 0 {
        return Err(Error::Config("need at least one caption and one variant".into()));
    }
    let mut specs = catalog_specs();
    if n_captions > specs.len() {
        return Err(Error::Config(format!(
            "the caption grammar has {} distinct captions, {n_captions} requested",
            specs.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    specs.shuffle(&mut rng);
    specs
        .iter()
        .take(n_captions)
        .map(|spec| {
            let clips = (0..variants_per_caption)
                .map(|_| animate(spec, &mut rng))
                .collect::<Result<_>>()?;
            Ok(RawRecord {
                caption: spec.text.clone(),
                clips,
            })
        })
        .collect()
}

/// Table-style summary of a corpus.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize)]
pub struct CorpusStats {
    pub unique_captions: usize,
    pub pairs: usize,
    pub pairs_after_rotation: usize,
    pub max_caption_len: usize,
    pub max_action_len: usize,
    pub vocab_size: usize,
}

pub fn corpus_stats(base: &[RawRecord], augmented: &[RawRecord]) -> Result<CorpusStats> {
    let captions: Vec<&str> = base.iter().map(|r| r.caption.as_str()).collect();
    let unique: HashSet<&str> = captions.iter().copied().collect();
    let vocab = Vocab::build(&captions, MAX_VOCAB)?;
    let all = base.iter().chain(augmented);
    Ok(CorpusStats {
        unique_captions: unique.len(),
        pairs: base.iter().map(|r| r.clips.len()).sum(),
        pairs_after_rotation: augmented.iter().map(|r| r.clips.len()).sum(),
        max_caption_len: captions.iter().map(|c| tokenize(c).len()).max().unwrap_or(0),
        max_action_len: all.flat_map(|r| r.clips.iter().map(ActionClip::len)).max().unwrap_or(0),
        vocab_size: vocab.len(),
    })
}

// ---------------------------------------------------------------------------
// Animation

const DT: f64 = 1.0 / CAPTURE_FPS as f64;
const HIP_HEIGHT: f64 = 0.95;
const SHIN_LEN: f64 = 0.43;
const FOOT_LEN: f64 = 0.44;
const UPPER_ARM: f64 = 0.30;
const FOREARM: f64 = 0.27;

#[derive(Clone, Copy, Debug)]
struct Body {
    x: f64,
    z: f64,
    heading: f64,
    phase: f64,
}

impl Body {
    fn heading_to(&self, other: &Body) -> f64 {
        (other.x - self.x).atan2(other.z - self.z)
    }

    fn dist(&self, other: &Body) -> f64 {
        (other.x - self.x).hypot(other.z - self.z)
    }
}

#[derive(Clone, Copy, Debug)]
enum Arms {
    Rest,
    Swing,
    Wave(f64),
    Hug(f64),
}

#[derive(Clone, Copy, Debug)]
struct Look {
    stride: f64,
    bounce: f64,
    arms: Arms,
    bow: f64,
}

impl Look {
    const IDLE: Look = Look {
        stride: 0.0,
        bounce: 0.0,
        arms: Arms::Rest,
        bow: 0.0,
    };

    fn gait(stride: f64, bounce: f64) -> Look {
        Look {
            stride,
            bounce,
            arms: Arms::Swing,
            bow: 0.0,
        }
    }
}

fn limb(from: Vec3, len: f64, pitch: f64, lateral: f64) -> Vec3 {
    // pitch > 0 swings the segment forward (+z) from hanging straight down
    [
        from[0] + lateral,
        from[1] - len * pitch.cos(),
        from[2] + len * pitch.sin(),
    ]
}

/// Joint positions in the body frame: x left, y up, z forward.
fn local_pose(body: &Body, look: &Look) -> [Vec3; NUM_JOINTS] {
    let swing = look.stride * body.phase.sin();
    let lift = look.bounce * body.phase.sin().abs();
    let hip = HIP_HEIGHT + lift;
    let mut j = [[0.0; 3]; NUM_JOINTS];
    j[0] = [0.0, hip + 0.75, 0.02];
    j[1] = [0.0, hip + 0.55, 0.0];
    for (side, sign, leg_swing) in [(0usize, 1.0, swing), (1usize, -1.0, -swing)] {
        let base = if side == 0 { 2 } else { 8 };
        let shoulder = [0.20 * sign, hip + 0.50, 0.0];
        let (elbow, hand) = match look.arms {
            Arms::Rest => {
                let e = limb(shoulder, UPPER_ARM, 0.0, 0.04 * sign);
                (e, limb(e, FOREARM, 0.1, 0.02 * sign))
            }
            Arms::Swing => {
                let a = -0.8 * leg_swing;
                let e = limb(shoulder, UPPER_ARM, a, 0.04 * sign);
                (e, limb(e, FOREARM, a + 0.25, 0.02 * sign))
            }
            Arms::Wave(p) if side == 1 => {
                let e = [shoulder[0] - 0.15, shoulder[1] + 0.10, 0.05];
                (e, [e[0] - 0.05 + 0.12 * p.sin(), e[1] + FOREARM, e[2]])
            }
            Arms::Wave(_) => {
                let e = limb(shoulder, UPPER_ARM, 0.0, 0.04 * sign);
                (e, limb(e, FOREARM, 0.1, 0.02 * sign))
            }
            Arms::Hug(k) => {
                let e = limb(shoulder, UPPER_ARM, k * 1.3, 0.04 * sign);
                (e, limb(e, FOREARM, k * 1.5, -0.18 * k * sign))
            }
        };
        j[base] = shoulder;
        j[base + 1] = elbow;
        j[base + 2] = hand;

        let lbase = if side == 0 { 5 } else { 11 };
        // the pelvis rolls with the gait: the swing-side hip drops
        let thigh = [0.10 * sign, hip + sign * 0.06 * look.stride * body.phase.cos(), 0.0];
        let knee_bend = 0.5 * look.stride * leg_swing.max(0.0) / look.stride.max(1e-9);
        let shin = limb(thigh, SHIN_LEN, leg_swing, 0.01 * sign);
        let foot = limb(shin, FOOT_LEN, leg_swing - knee_bend, 0.0);
        j[lbase] = thigh;
        j[lbase + 1] = shin;
        j[lbase + 2] = [foot[0], foot[1], foot[2] + 0.05];
    }
    if look.bow != 0.0 {
        // pitch the upper body forward about the hip
        let (s, c) = look.bow.sin_cos();
        for k in [0, 1, 2, 3, 4, 8, 9, 10] {
            let (y, z) = (j[k][1] - hip, j[k][2]);
            j[k][1] = hip + y * c - z * s;
            j[k][2] = y * s + z * c;
        }
    }
    j
}

fn world_pose(body: &Body, look: &Look) -> Result<Pose> {
    let (s, c) = body.heading.sin_cos();
    let mut joints = local_pose(body, look);
    for p in &mut joints {
        let (x, z) = (p[0], p[2]);
        p[0] = body.x + x * c + z * s;
        p[2] = body.z - x * s + z * c;
    }
    Pose::new(joints)
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

struct Stage {
    bodies: [Body; 2],
    frames_a: Vec<Pose>,
    frames_b: Vec<Pose>,
}

impl Stage {
    fn idx(actor: Actor) -> (usize, usize) {
        match actor {
            Actor::A => (0, 1),
            Actor::B => (1, 0),
        }
    }

    fn record(&mut self, actor: Actor, look: Look) -> Result<()> {
        let (me, other) = Self::idx(actor);
        let mut looks = [Look::IDLE; 2];
        looks[me] = look;
        let _ = other;
        self.frames_a.push(world_pose(&self.bodies[0], &looks[0])?);
        self.frames_b.push(world_pose(&self.bodies[1], &looks[1])?);
        Ok(())
    }

    fn steps(seconds: f64) -> usize {
        (seconds * CAPTURE_FPS as f64).round().max(1.0) as usize
    }

    /// Moves `actor` straight towards the other until `stop` metres remain.
    /// Lasts between 1 and `max_t` seconds.
    fn close_in(
        &mut self,
        actor: Actor,
        speed: f64,
        stop: f64,
        max_t: f64,
        look: Look,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let (me, other) = Self::idx(actor);
        let travel = (self.bodies[me].dist(&self.bodies[other]) - stop).max(0.0);
        let t = (travel / speed).clamp(1.0, max_t);
        let v = (travel / t).min(speed);
        let cadence = rng.random_range(1.6..2.2) * v.max(0.3) / 1.0;
        for _ in 0..Self::steps(t) {
            let target = self.bodies[other];
            let b = &mut self.bodies[me];
            b.heading = b.heading_to(&target);
            b.x += v * DT * b.heading.sin();
            b.z += v * DT * b.heading.cos();
            b.phase += TAU * cadence * DT;
            self.record(actor, look)?;
        }
        Ok(())
    }

    /// Moves `actor` directly away from the other, facing away or (when
    /// `backwards`) still facing them.
    fn move_away(&mut self, actor: Actor, speed: f64, t: f64, backwards: bool, look: Look) -> Result<()> {
        let (me, other) = Self::idx(actor);
        for _ in 0..Self::steps(t) {
            let target = self.bodies[other];
            let b = &mut self.bodies[me];
            let toward = b.heading_to(&target);
            let away = toward + PI;
            b.heading = if backwards { toward } else { away };
            b.x += speed * DT * away.sin();
            b.z += speed * DT * away.cos();
            b.phase += TAU * 1.8 * speed.max(0.3) * DT * if backwards { -1.0 } else { 1.0 };
            self.record(actor, look)?;
        }
        Ok(())
    }

    fn face_other(&mut self, actor: Actor) {
        let (me, other) = Self::idx(actor);
        let target = self.bodies[other];
        self.bodies[me].heading = self.bodies[me].heading_to(&target);
    }

    fn perform(&mut self, clause: Clause, rng: &mut ChaCha8Rng) -> Result<()> {
        let actor = clause.actor;
        match clause.act {
            Act::WalkTowards => {
                let speed = rng.random_range(0.9..1.4);
                let stop = rng.random_range(0.8..1.2);
                self.close_in(actor, speed, stop, 4.0, Look::gait(0.35, 0.0), rng)
            }
            Act::RunTowards => {
                let speed = rng.random_range(2.2..3.0);
                let stop = rng.random_range(0.8..1.2);
                self.close_in(actor, speed, stop, 3.0, Look::gait(0.7, 0.05), rng)
            }
            Act::Approach => {
                let speed = rng.random_range(0.5..0.8);
                let stop = rng.random_range(0.7..1.0);
                self.close_in(actor, speed, stop, 4.0, Look::gait(0.22, 0.0), rng)
            }
            Act::WalkAway => {
                let speed = rng.random_range(0.9..1.4);
                let t = rng.random_range(1.5..3.0);
                self.move_away(actor, speed, t, false, Look::gait(0.35, 0.0))
            }
            Act::RunAway => {
                let speed = rng.random_range(2.2..3.0);
                let t = rng.random_range(1.2..2.5);
                self.move_away(actor, speed, t, false, Look::gait(0.7, 0.05))
            }
            Act::Retreat => {
                let speed = rng.random_range(0.4..0.8);
                let t = rng.random_range(1.5..3.0);
                self.move_away(actor, speed, t, true, Look::gait(0.2, 0.0))
            }
            Act::WaveAt => {
                self.face_other(actor);
                let freq = rng.random_range(1.2..2.2);
                let t = rng.random_range(1.5..3.0);
                for k in 0..Self::steps(t) {
                    let p = TAU * freq * k as f64 * DT;
                    self.record(
                        actor,
                        Look {
                            arms: Arms::Wave(p),
                            ..Look::IDLE
                        },
                    )?;
                }
                Ok(())
            }
            Act::Hug => {
                let speed = rng.random_range(0.8..1.2);
                self.close_in(actor, speed, 0.45, 3.0, Look::gait(0.3, 0.0), rng)?;
                let t = rng.random_range(1.5..2.5);
                let n = Self::steps(t);
                for k in 0..n {
                    let blend = smoothstep(k as f64 / (0.3 * n as f64));
                    self.record(
                        actor,
                        Look {
                            arms: Arms::Hug(blend),
                            ..Look::IDLE
                        },
                    )?;
                }
                Ok(())
            }
            Act::BowTo => {
                self.face_other(actor);
                let depth = rng.random_range(0.4..0.8);
                let t = rng.random_range(1.5..2.5);
                let n = Self::steps(t);
                for k in 0..n {
                    let bow = depth * (PI * k as f64 / n as f64).sin();
                    self.record(actor, Look { bow, ..Look::IDLE })?;
                }
                Ok(())
            }
            Act::TurnAround => {
                let (me, _) = Self::idx(actor);
                let start = self.bodies[me].heading;
                let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let t = rng.random_range(1.5..2.5);
                let n = Self::steps(t);
                for k in 0..n {
                    let b = &mut self.bodies[me];
                    b.heading = start + dir * PI * smoothstep(k as f64 / n as f64);
                    b.phase += TAU * 1.5 * DT;
                    self.record(actor, Look::gait(0.12, 0.0))?;
                }
                Ok(())
            }
        }
    }
}

fn animate(spec: &CaptionSpec, rng: &mut ChaCha8Rng) -> Result<ActionClip> {
    let ax = rng.random_range(-1.0..1.0);
    let az = rng.random_range(-1.0..1.0);
    let gap = rng.random_range(3.0..6.0);
    let dir = rng.random_range(0.0..TAU);
    let mut a = Body {
        x: ax,
        z: az,
        heading: 0.0,
        phase: rng.random_range(0.0..TAU),
    };
    let mut b = Body {
        x: ax + gap * dir.sin(),
        z: az + gap * dir.cos(),
        heading: 0.0,
        phase: rng.random_range(0.0..TAU),
    };
    a.heading = a.heading_to(&b);
    b.heading = b.heading_to(&a);
    let mut stage = Stage {
        bodies: [a, b],
        frames_a: Vec::new(),
        frames_b: Vec::new(),
    };
    for &clause in &spec.clauses {
        stage.perform(clause, rng)?;
    }
    let pa = jitter(
        downsample(&stage.frames_a, CAPTURE_FPS, TARGET_FPS, MAX_ACTION_LEN)?,
        rng,
    )?;
    let pb = jitter(
        downsample(&stage.frames_b, CAPTURE_FPS, TARGET_FPS, MAX_ACTION_LEN)?,
        rng,
    )?;
    ActionClip::new(pa, pb, TARGET_FPS)
}

/// Marker noise of a capture system, a few millimetres per coordinate.
const JITTER_STD: f64 = 0.005;

fn jitter(poses: Vec<Pose>, rng: &mut ChaCha8Rng) -> Result<Vec<Pose>> {
    let noise = Normal::new(0.0, JITTER_STD).expect("valid std");
    poses
        .into_iter()
        .map(|p| {
            let mut joints = p.joints;
            joints.iter_mut().flatten().for_each(|v| *v += rng.sample(noise));
            Pose::new(joints)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motiondata::{center_poses, Joint};

    fn spec(text: &str) -> CaptionSpec {
        catalog_specs().into_iter().find(|s| s.text == text).unwrap()
    }

    fn center_distance(clip: &ActionClip) -> Vec<f64> {
        let (_, ca) = center_poses(&clip.person_a);
        let (_, cb) = center_poses(&clip.person_b);
        ca.iter()
            .zip(&cb)
            .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt())
            .collect()
    }

    #[test]
    fn same_seed_same_dataset() {
        assert_eq!(synth_dataset(7, 5, 2).unwrap(), synth_dataset(7, 5, 2).unwrap());
        assert_ne!(synth_dataset(7, 5, 2).unwrap(), synth_dataset(8, 5, 2).unwrap());
    }

    #[test]
    fn variants_per_caption() {
        let ds = synth_dataset(3, 4, 3).unwrap();
        assert!(ds.iter().all(|r| r.clips.len() == 3));
        for r in &ds {
            assert_ne!(r.clips[0], r.clips[1]);
        }
    }

    #[test]
    fn walking_towards_closes_distance_every_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let clip = animate(&spec("A walks towards B."), &mut rng).unwrap();
            let d = center_distance(&clip);
            assert!(d.len() >= 2);
            assert!(d.windows(2).all(|w| w[1] < w[0]), "{d:?}");
        }
    }

    #[test]
    fn walking_away_opens_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clip = animate(&spec("B walks away from A."), &mut rng).unwrap();
        let d = center_distance(&clip);
        assert!(d.windows(2).all(|w| w[1] > w[0]), "{d:?}");
    }

    #[test]
    fn waving_moves_one_hand() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let clip = animate(&spec("A waves at B."), &mut rng).unwrap();
        let (centered, _) = center_poses(&clip.person_a);
        let spread = |j: Joint| {
            let xs: Vec<f64> = centered.iter().map(|p| p.joint(j)[0].hypot(p.joint(j)[2])).collect();
            xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min)
        };
        // the resting hand only carries marker noise
        assert!(spread(Joint::LHand) < 10.0 * JITTER_STD);
        assert!(
            spread(Joint::RHand) > 4.0 * spread(Joint::LHand),
            "{} {}",
            spread(Joint::RHand),
            spread(Joint::LHand)
        );
        // the raised hand is above the head
        assert!(centered
            .iter()
            .all(|p| p.joint(Joint::RHand)[1] > p.joint(Joint::Head)[1]));
    }

    #[test]
    fn catalog_is_large_and_distinct() {
        let cat = caption_catalog();
        let set: HashSet<&String> = cat.iter().collect();
        assert_eq!(set.len(), cat.len());
        assert!(cat.len() >= 229);
        let stems: HashSet<String> = cat.iter().flat_map(|c| crate::textproc::stems(c)).collect();
        assert!(stems.len() <= 60, "{}", stems.len());
    }

    #[test]
    fn bounds_hold_over_corpus() {
        let base = synth_dataset(11, 40, 2).unwrap();
        let stats = corpus_stats(&base, &[]).unwrap();
        assert_eq!(stats.pairs, 80);
        assert!(stats.max_action_len <= MAX_ACTION_LEN);
        assert!(stats.max_caption_len <= crate::textproc::MAX_CAPTION_LEN);
        assert!(stats.vocab_size <= MAX_VOCAB);
        for r in &base {
            for c in &r.clips {
                assert!(c.len() >= 2);
                assert!(c
                    .person_a
                    .iter()
                    .chain(&c.person_b)
                    .all(|p| p.joints.iter().flatten().all(|v| v.is_finite())));
            }
        }
    }
}
