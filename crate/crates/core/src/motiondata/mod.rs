//! Two-actor motion data: poses, clips, the synthetic corpus, rotation
//! augmentation, per-frame preprocessing and persistence.

mod io;
mod preprocess;
mod synth;

pub use io::{load_jsonl, save_jsonl};
pub use preprocess::{
    assemble_frames, augment, center_poses, clip_to_frames, disassemble_frames, downsample, normalize_records,
    relative_positions, rotate_action, rotate_all, split_by_caption, to_samples, FeatureStats, NormalizationStats,
};
pub use synth::{caption_catalog, corpus_stats, synth_dataset, CorpusStats, RawRecord};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 14;
pub const POSE_WIDTH: usize = NUM_JOINTS * 3;
pub const DIST_WIDTH: usize = 3;
/// `[pose A (42), pose B (42), relative position (3)]`
pub const FRAME_WIDTH: usize = 2 * POSE_WIDTH + DIST_WIDTH;
pub const MAX_ACTION_LEN: usize = 26;
pub const CAPTURE_FPS: usize = 120;
pub const TARGET_FPS: usize = 3;
/// Index of the vertical coordinate.
pub const UP_AXIS: usize = 1;

pub type Vec3 = [f64; 3];

/// Joint order of every pose. Never permuted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(usize)]
pub enum Joint {
    Head,
    Neck,
    LShoulder,
    LElbow,
    LHand,
    LThigh,
    LShin,
    LFoot,
    RShoulder,
    RElbow,
    RHand,
    RThigh,
    RShin,
    RFoot,
}

impl Joint {
    pub const ALL: [Joint; NUM_JOINTS] = [
        Joint::Head,
        Joint::Neck,
        Joint::LShoulder,
        Joint::LElbow,
        Joint::LHand,
        Joint::LThigh,
        Joint::LShin,
        Joint::LFoot,
        Joint::RShoulder,
        Joint::RElbow,
        Joint::RHand,
        Joint::RThigh,
        Joint::RShin,
        Joint::RFoot,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub joints: [Vec3; NUM_JOINTS],
}

impl Pose {
    pub fn new(joints: [Vec3; NUM_JOINTS]) -> Result<Self> {
        if joints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("pose has non-finite coordinates".into()));
        }
        Ok(Pose { joints })
    }

    pub fn joint(&self, j: Joint) -> Vec3 {
        self.joints[j as usize]
    }

    pub fn flat(&self) -> [f64; POSE_WIDTH] {
        let mut out = [0.0; POSE_WIDTH];
        for (k, v) in self.joints.iter().enumerate() {
            out[3 * k..3 * k + 3].copy_from_slice(v);
        }
        out
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() != POSE_WIDTH {
            return Err(Error::shape("pose", &[POSE_WIDTH], &[flat.len()]));
        }
        let mut joints = [[0.0; 3]; NUM_JOINTS];
        for (k, j) in joints.iter_mut().enumerate() {
            j.copy_from_slice(&flat[3 * k..3 * k + 3]);
        }
        Pose::new(joints)
    }

    pub fn translated(&self, v: Vec3) -> Pose {
        let mut p = *self;
        for j in &mut p.joints {
            for c in 0..3 {
                j[c] += v[c];
            }
        }
        p
    }
}

/// One performance: aligned pose sequences of the two actors.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionClip {
    pub person_a: Vec<Pose>,
    pub person_b: Vec<Pose>,
    pub fps: usize,
}

impl ActionClip {
    pub fn new(person_a: Vec<Pose>, person_b: Vec<Pose>, fps: usize) -> Result<Self> {
        if person_a.len() != person_b.len() {
            return Err(Error::shape("action clip", &[person_a.len()], &[person_b.len()]));
        }
        if person_a.is_empty() {
            return Err(Error::Contract("action clip has no frames".into()));
        }
        Ok(ActionClip {
            person_a,
            person_b,
            fps,
        })
    }

    pub fn len(&self) -> usize {
        self.person_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.person_a.is_empty()
    }
}

/// `m` frames of [`FRAME_WIDTH`] features, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProcessedAction {
    data: Vec<f64>,
}

impl ProcessedAction {
    pub fn from_flat(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() || !data.len().is_multiple_of(FRAME_WIDTH) {
            return Err(Error::shape("processed action", &[FRAME_WIDTH], &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("processed action has non-finite values".into()));
        }
        Ok(ProcessedAction { data })
    }

    pub fn from_frames(frames: &[Vec<f64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(frames.len() * FRAME_WIDTH);
        for f in frames {
            if f.len() != FRAME_WIDTH {
                return Err(Error::shape("processed action", &[FRAME_WIDTH], &[f.len()]));
            }
            data.extend_from_slice(f);
        }
        Self::from_flat(data)
    }

    pub fn len(&self) -> usize {
        self.data.len() / FRAME_WIDTH
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn frame(&self, j: usize) -> &[f64] {
        &self.data[j * FRAME_WIDTH..(j + 1) * FRAME_WIDTH]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(FRAME_WIDTH)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// First `m` frames, repeating the final frame when `m` exceeds the length.
    pub fn padded(&self, m: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(m * FRAME_WIDTH);
        for j in 0..m {
            out.extend_from_slice(self.frame(j.min(self.len() - 1)));
        }
        out
    }
}

/// A caption with every action that realizes it.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub caption: String,
    pub actions: Vec<ProcessedAction>,
}
