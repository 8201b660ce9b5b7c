//! Generative parameters of a synthetic face scene.
//!
//! Geometric quantities are in face-local pixels: the face ellipse is centred
//! at the origin with y pointing down, before pose scale/roll/offset are
//! applied.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::au::{AuVector, AU_MAX, NUM_AUS};
use crate::error::{Error, Result};

/// Closed bounds of every renderer-safe identity field.
pub mod bounds {
    /// Horizontal semi-axis of the face ellipse.
    pub const FACE_WIDTH: (f64, f64) = (13.0, 17.0);
    /// Vertical semi-axis of the face ellipse.
    pub const FACE_HEIGHT: (f64, f64) = (17.0, 21.0);
    /// Half the distance between the eye centres.
    pub const EYE_SPACING: (f64, f64) = (6.0, 8.0);
    /// Half-width of each eye.
    pub const EYE_SIZE: (f64, f64) = (2.2, 3.2);
    pub const NOSE_LENGTH: (f64, f64) = (4.0, 7.0);
    /// Horizontal face-centre offset from the image centre.
    pub const OFFSET_X: (f64, f64) = (-6.0, 6.0);
    /// Vertical face-centre offset from the image centre.
    pub const OFFSET_Y: (f64, f64) = (-4.0, 4.0);
    pub const ROLL: (f64, f64) = (-0.35, 0.35);
    pub const SCALE: (f64, f64) = (0.8, 1.2);
}

fn check_range(field: &str, v: f64, (lo, hi): (f64, f64)) -> Result<()> {
    if !v.is_finite() || v < lo || v > hi {
        return Err(Error::validation(field, format!("{v} outside [{lo}, {hi}]")));
    }
    Ok(())
}

fn check_color(field: &str, c: &[f64; 3]) -> Result<()> {
    for (i, v) in c.iter().enumerate() {
        check_range(&format!("{field}[{i}]"), *v, (0.0, 1.0))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub face_width: f64,
    pub face_height: f64,
    pub eye_spacing: f64,
    pub eye_size: f64,
    pub nose_length: f64,
    pub skin_tone: [f64; 3],
    pub hair_tone: [f64; 3],
    pub identity_id: u32,
}

impl IdentitySpec {
    pub fn validate(&self) -> Result<()> {
        check_range("identity.face_width", self.face_width, bounds::FACE_WIDTH)?;
        check_range("identity.face_height", self.face_height, bounds::FACE_HEIGHT)?;
        check_range("identity.eye_spacing", self.eye_spacing, bounds::EYE_SPACING)?;
        check_range("identity.eye_size", self.eye_size, bounds::EYE_SIZE)?;
        check_range("identity.nose_length", self.nose_length, bounds::NOSE_LENGTH)?;
        check_color("identity.skin_tone", &self.skin_tone)?;
        check_color("identity.hair_tone", &self.hair_tone)
    }

    pub fn sample<R: Rng>(identity_id: u32, rng: &mut R) -> Self {
        let u = |rng: &mut R, (lo, hi): (f64, f64)| rng.random_range(lo..=hi);
        let skin = [
            rng.random_range(0.55..=0.95),
            rng.random_range(0.40..=0.80),
            rng.random_range(0.30..=0.70),
        ];
        let hair = [
            rng.random_range(0.05..=0.65),
            rng.random_range(0.05..=0.55),
            rng.random_range(0.05..=0.50),
        ];
        Self {
            face_width: u(rng, bounds::FACE_WIDTH),
            face_height: u(rng, bounds::FACE_HEIGHT),
            eye_spacing: u(rng, bounds::EYE_SPACING),
            eye_size: u(rng, bounds::EYE_SIZE),
            nose_length: u(rng, bounds::NOSE_LENGTH),
            skin_tone: skin,
            hair_tone: hair,
            identity_id,
        }
    }

    /// A mid-range identity, handy for tests and demos.
    pub fn reference(identity_id: u32) -> Self {
        Self {
            face_width: 15.0,
            face_height: 19.0,
            eye_spacing: 7.0,
            eye_size: 2.7,
            nose_length: 5.5,
            skin_tone: [0.85, 0.66, 0.52],
            hair_tone: [0.25, 0.15, 0.08],
            identity_id,
        }
    }
}

/// Head pose proxies: planar offsets stand in for yaw/pitch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSpec {
    pub offset_x: f64,
    pub offset_y: f64,
    pub roll: f64,
    pub scale: f64,
}

impl PoseSpec {
    pub fn centered() -> Self {
        Self {
            offset_x: 0.0,
            offset_y: 0.0,
            roll: 0.0,
            scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_range("pose.offset_x", self.offset_x, bounds::OFFSET_X)?;
        check_range("pose.offset_y", self.offset_y, bounds::OFFSET_Y)?;
        check_range("pose.roll", self.roll, bounds::ROLL)?;
        check_range("pose.scale", self.scale, bounds::SCALE)
    }

    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Self {
            offset_x: rng.random_range(bounds::OFFSET_X.0..=bounds::OFFSET_X.1),
            offset_y: rng.random_range(bounds::OFFSET_Y.0..=bounds::OFFSET_Y.1),
            roll: rng.random_range(bounds::ROLL.0..=bounds::ROLL.1),
            scale: rng.random_range(bounds::SCALE.0..=bounds::SCALE.1),
        }
    }

    /// `[offset_x / width, offset_y / width, roll, scale]`, the units used by
    /// the pose metric.
    pub fn normalized(&self, image_width: usize) -> [f64; 4] {
        let w = image_width as f64;
        [self.offset_x / w, self.offset_y / w, self.roll, self.scale]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundKind {
    Solid,
    VerticalGradient,
    TwoBand,
    Checker,
}

impl BackgroundKind {
    pub const ALL: [BackgroundKind; 4] = [
        BackgroundKind::Solid,
        BackgroundKind::VerticalGradient,
        BackgroundKind::TwoBand,
        BackgroundKind::Checker,
    ];
}

/// Background pattern. `phase` in `[0, 1)` shifts the band boundary or the
/// checker grid; solid and gradient backgrounds ignore it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSpec {
    pub kind: BackgroundKind,
    pub colors: [[f64; 3]; 2],
    pub phase: f64,
}

/// Side of a checker cell, in pixels.
pub const CHECKER_CELL: f64 = 16.0;

impl BackgroundSpec {
    pub fn solid(color: [f64; 3]) -> Self {
        Self {
            kind: BackgroundKind::Solid,
            colors: [color, color],
            phase: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_color("background.colors[0]", &self.colors[0])?;
        check_color("background.colors[1]", &self.colors[1])?;
        if !self.phase.is_finite() || !(0.0..1.0).contains(&self.phase) {
            return Err(Error::validation("background.phase", format!("{} outside [0, 1)", self.phase)));
        }
        Ok(())
    }

    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        let kind = BackgroundKind::ALL[rng.random_range(0..BackgroundKind::ALL.len())];
        let mut color = || [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        let colors = [color(), color()];
        let phase = rng.random::<f64>();
        Self { kind, colors, phase }
    }

    /// Colour of the background at continuous image coordinates.
    pub fn color_at(&self, x: f64, y: f64, size: f64) -> [f64; 3] {
        let [c0, c1] = self.colors;
        match self.kind {
            BackgroundKind::Solid => c0,
            BackgroundKind::VerticalGradient => {
                let t = (y / size).clamp(0.0, 1.0);
                [0, 1, 2].map(|k| c0[k] + (c1[k] - c0[k]) * t)
            }
            BackgroundKind::TwoBand => {
                let boundary = size * (0.3 + 0.4 * self.phase);
                if y < boundary {
                    c0
                } else {
                    c1
                }
            }
            BackgroundKind::Checker => {
                let off = self.phase * CHECKER_CELL;
                let cx = ((x + off) / CHECKER_CELL).floor() as i64;
                let cy = ((y + off) / CHECKER_CELL).floor() as i64;
                if (cx + cy).rem_euclid(2) == 0 {
                    c0
                } else {
                    c1
                }
            }
        }
    }
}

/// Sampled intensities live on a dyadic grid so that sums and differences
/// of AU vectors are exact in floating point.
pub const AU_GRID: f64 = 1.0 / 256.0;

/// Per-component AU sampling: zero with probability 0.4, otherwise uniform
/// over `[0, 5]` snapped to [`AU_GRID`].
pub fn sample_aus<R: Rng>(rng: &mut R) -> AuVector {
    let mut v = [0.0; NUM_AUS];
    for x in v.iter_mut() {
        *x = if rng.random::<f64>() < 0.4 {
            0.0
        } else {
            (rng.random_range(0.0..=AU_MAX) / AU_GRID).round() * AU_GRID
        };
    }
    AuVector::new(v).expect("sampled AUs are finite")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub identity: IdentitySpec,
    pub pose: PoseSpec,
    pub background: BackgroundSpec,
    pub aus: AuVector,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.identity.validate()?;
        self.pose.validate()?;
        self.background.validate()
    }

    /// Neutral expression, centred pose, grey backdrop.
    pub fn neutral(identity: IdentitySpec) -> Self {
        Self {
            identity,
            pose: PoseSpec::centered(),
            background: BackgroundSpec::solid([0.5, 0.5, 0.5]),
            aus: AuVector::zeros(),
        }
    }
}
