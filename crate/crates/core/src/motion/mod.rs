//! Articulated motion representation.
//!
//! A frame is a flat parameter vector laid out as
//! `[body rotations | expression | left-hand rotations | right-hand rotations]`,
//! so that each of the three tokenized parts is a contiguous slice.

pub(crate) mod fk;
mod io;
mod synth;

pub use fk::{rodrigues, rodrigues_with_jacobian, JointSubset, KinematicChain, Mat3, Vec3};
pub use io::{read_motion_file, write_motion_file, MotionRecord};
pub use synth::{synthesize_dataset, Lexicon, SynthConfig, SynthCorpus, WordMotif};

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SokeError};

pub const ROTATION_DIMS: usize = 3;

/// Parameter layout of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartLayout {
    pub body_joints: usize,
    pub hand_joints_per_hand: usize,
    pub expression_dims: usize,
}

impl Default for PartLayout {
    fn default() -> Self {
        Self {
            body_joints: 11,
            hand_joints_per_hand: 15,
            expression_dims: 10,
        }
    }
}

impl PartLayout {
    /// Total parameter count `d` of one frame.
    pub fn dim(&self) -> usize {
        ROTATION_DIMS * (self.body_joints + 2 * self.hand_joints_per_hand) + self.expression_dims
    }

    pub fn body_rotation_dims(&self) -> usize {
        ROTATION_DIMS * self.body_joints
    }

    pub fn hand_dims(&self) -> usize {
        ROTATION_DIMS * self.hand_joints_per_hand
    }

    /// Slice of the frame owned by `part`. Expression rides with the body.
    pub fn part_range(&self, part: Part) -> Range<usize> {
        let body = self.body_rotation_dims() + self.expression_dims;
        let hand = self.hand_dims();
        match part {
            Part::Body => 0..body,
            Part::LeftHand => body..body + hand,
            Part::RightHand => body + hand..body + 2 * hand,
        }
    }

    pub fn part_width(&self, part: Part) -> usize {
        self.part_range(part).len()
    }

    pub fn expression_range(&self) -> Range<usize> {
        let start = self.body_rotation_dims();
        start..start + self.expression_dims
    }

    /// Parameter offset of the rotation of global joint index `joint`
    /// (body joints first, then left hand, then right hand).
    pub fn joint_param_offset(&self, joint: usize) -> usize {
        let b = self.body_joints;
        let h = self.hand_joints_per_hand;
        if joint < b {
            ROTATION_DIMS * joint
        } else if joint < b + h {
            self.part_range(Part::LeftHand).start + ROTATION_DIMS * (joint - b)
        } else {
            self.part_range(Part::RightHand).start + ROTATION_DIMS * (joint - b - h)
        }
    }

    pub fn total_joints(&self) -> usize {
        self.body_joints + 2 * self.hand_joints_per_hand
    }

    pub fn validate(&self) -> Result<()> {
        if self.body_joints == 0 || self.hand_joints_per_hand == 0 {
            return Err(SokeError::Layout("body and hand joint counts must be positive".into()));
        }
        Ok(())
    }
}

/// One of the three independently tokenized body regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Part {
    #[serde(rename = "B")]
    Body,
    #[serde(rename = "LH")]
    LeftHand,
    #[serde(rename = "RH")]
    RightHand,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::Body, Part::LeftHand, Part::RightHand];

    pub fn tag(self) -> &'static str {
        match self {
            Part::Body => "B",
            Part::LeftHand => "LH",
            Part::RightHand => "RH",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Part::Body => 0,
            Part::LeftHand => 1,
            Part::RightHand => 2,
        }
    }
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Target sign language. The three named languages get dedicated control
/// tokens; synthetic corpora may use any other identifier.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Language {
    Asl,
    Csl,
    Dgs,
    Other(String),
}

impl Language {
    pub fn as_str(&self) -> &str {
        match self {
            Language::Asl => "ASL",
            Language::Csl => "CSL",
            Language::Dgs => "DGS",
            Language::Other(s) => s,
        }
    }
}

impl FromStr for Language {
    type Err = SokeError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s.contains(char::is_whitespace) || s.contains(['<', '>']) {
            return Err(SokeError::Vocabulary(format!("invalid language tag {s:?}")));
        }
        Ok(match s.to_ascii_uppercase().as_str() {
            "ASL" => Language::Asl,
            "CSL" => Language::Csl,
            "DGS" => Language::Dgs,
            _ => Language::Other(s.to_string()),
        })
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Language {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Language {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A `T x d` sequence of pose parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    frames: Vec<f32>,
    n_frames: usize,
    pub fps: f32,
    pub layout: PartLayout,
    pub language: Language,
}

impl MotionSequence {
    pub fn new(frames: Vec<f32>, fps: f32, layout: PartLayout, language: Language) -> Result<Self> {
        layout.validate()?;
        let d = layout.dim();
        if frames.is_empty() || frames.len() % d != 0 {
            return Err(SokeError::Layout(format!(
                "{} values do not form a nonempty sequence of {d}-dim frames",
                frames.len()
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(SokeError::Input("motion contains non-finite values".into()));
        }
        let n_frames = frames.len() / d;
        Ok(Self {
            frames,
            n_frames,
            fps,
            layout,
            language,
        })
    }

    pub fn from_rows(rows: &[Vec<f32>], fps: f32, layout: PartLayout, language: Language) -> Result<Self> {
        let d = layout.dim();
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != d) {
            return Err(SokeError::Layout(format!(
                "frame {i} has {} values, layout expects {d}",
                r.len()
            )));
        }
        Self::new(rows.concat(), fps, layout, language)
    }

    pub fn zeros(n_frames: usize, layout: PartLayout) -> Result<Self> {
        Self::new(vec![0.0; n_frames * layout.dim()], 25.0, layout, Language::Asl)
    }

    pub fn len(&self) -> usize {
        self.n_frames
    }

    pub fn is_empty(&self) -> bool {
        self.n_frames == 0
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let d = self.dim();
        &self.frames[t * d..(t + 1) * d]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f32] {
        let d = self.dim();
        &mut self.frames[t * d..(t + 1) * d]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f32]> {
        self.frames.chunks_exact(self.dim())
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.frames
    }
}

/// The slice of a motion belonging to one part.
#[derive(Debug, Clone, PartialEq)]
pub struct PartMotion {
    pub part: Part,
    width: usize,
    frames: Vec<f32>,
}

impl PartMotion {
    pub fn new(part: Part, width: usize, frames: Vec<f32>) -> Result<Self> {
        if width == 0 || frames.len() % width != 0 {
            return Err(SokeError::Layout(format!(
                "{} values do not form {width}-wide frames",
                frames.len()
            )));
        }
        Ok(Self { part, width, frames })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.frames.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.width..(t + 1) * self.width]
    }
}

/// Splits a sequence into its body, left-hand and right-hand motions.
pub fn split_parts(seq: &MotionSequence) -> Result<[PartMotion; 3]> {
    let d = seq.layout.dim();
    if seq.frames.len() != seq.n_frames * d {
        return Err(SokeError::Layout(format!(
            "sequence data does not match its {d}-dim layout"
        )));
    }
    let split = |part: Part| {
        let r = seq.layout.part_range(part);
        let mut out = Vec::with_capacity(seq.n_frames * r.len());
        for f in seq.frames() {
            out.extend_from_slice(&f[r.clone()]);
        }
        PartMotion::new(part, r.len(), out)
    };
    Ok([split(Part::Body)?, split(Part::LeftHand)?, split(Part::RightHand)?])
}

/// Inverse of [`split_parts`].
pub fn merge_parts(
    parts: &[PartMotion; 3],
    fps: f32,
    layout: PartLayout,
    language: Language,
) -> Result<MotionSequence> {
    let t = parts[0].len();
    for (p, expected) in parts.iter().zip(Part::ALL) {
        if p.part != expected {
            return Err(SokeError::Layout(format!("expected part {expected}, got {}", p.part)));
        }
        if p.width != layout.part_width(expected) {
            return Err(SokeError::Layout(format!(
                "part {expected} has width {}, layout expects {}",
                p.width,
                layout.part_width(expected)
            )));
        }
        if p.len() != t {
            return Err(SokeError::Layout("parts differ in frame count".into()));
        }
    }
    let mut frames = Vec::with_capacity(t * layout.dim());
    for i in 0..t {
        for p in parts {
            frames.extend_from_slice(p.frame(i));
        }
    }
    MotionSequence::new(frames, fps, layout, language)
}
