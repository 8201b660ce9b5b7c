//! Procedural face renderer.
//!
//! Every pseudo-AU drives exactly one geometric deformation, linear in its
//! intensity, with the per-unit constants in [`slopes`]:
//!
//! | AU   | deformation                                                     |
//! |------|-----------------------------------------------------------------|
//! | AU1  | inner brow ends rise                                            |
//! | AU2  | outer brow ends rise                                            |
//! | AU4  | both brow ends lower; inner ends draw toward the midline        |
//! | AU6  | lower eyelid rises (lower opening shrinks)                      |
//! | AU9  | opacity of two nose-bridge wrinkle lines                        |
//! | AU12 | mouth corners move up and outward                               |
//! | AU15 | mouth corners move down                                         |
//! | AU17 | chin crease rises                                               |
//! | AU20 | mouth widens and lips thin                                      |
//! | AU25 | lips part symmetrically                                         |
//! | AU26 | lower lip and chin crease drop                                  |
//! | AU43 | upper eyelid lowers                                             |
//!
//! Images are rendered with 4x4 supersampling so sub-pixel landmark motion
//! shows up in pixel intensities.

use crate::au::idx;
use crate::error::Result;

use super::image::SceneImage;
use super::spec::SceneSpec;

pub const IMAGE_SIZE: usize = 64;
const SUPERSAMPLE: usize = 4;

/// Per-unit-intensity displacement constants, in face-local pixels.
pub mod slopes {
    pub const AU1_INNER_BROW_RAISE: f64 = 0.8;
    pub const AU2_OUTER_BROW_RAISE: f64 = 0.8;
    pub const AU4_BROW_LOWER: f64 = 0.4;
    pub const AU4_BROW_DRAW_IN: f64 = 0.4;
    /// Fraction of the eye half-width removed from the lower opening.
    pub const AU6_LOWER_LID_RAISE: f64 = 0.08;
    /// Wrinkle opacity gained per unit (fully opaque at intensity 5).
    pub const AU9_WRINKLE_OPACITY: f64 = 0.2;
    pub const AU12_CORNER_RAISE: f64 = 0.6;
    pub const AU12_CORNER_OUT: f64 = 0.3;
    pub const AU15_CORNER_LOWER: f64 = 0.6;
    pub const AU17_CHIN_RAISE: f64 = 0.6;
    pub const AU20_MOUTH_WIDEN: f64 = 0.5;
    pub const AU20_LIP_THIN: f64 = 0.12;
    pub const AU25_LIP_PART: f64 = 0.35;
    pub const AU26_JAW_DROP: f64 = 0.6;
    pub const AU26_CHIN_DROP: f64 = 0.5;
    /// Fraction of the eye half-width removed from the upper opening.
    pub const AU43_UPPER_LID_LOWER: f64 = 0.15;
}

/// Neutral layout constants, in face-local pixels.
pub mod layout {
    pub const HAIR_BAND: f64 = 4.5;
    pub const BROW_Y: f64 = -8.0;
    pub const BROW_INNER_INSET: f64 = 2.5;
    pub const BROW_OUTER_OUTSET: f64 = 2.5;
    pub const BROW_RADIUS: f64 = 0.9;
    pub const EYE_Y: f64 = -3.0;
    pub const UPPER_LID_OPEN: f64 = 0.8;
    pub const LOWER_LID_OPEN: f64 = 0.6;
    pub const NOSE_TOP_GAP: f64 = 1.5;
    pub const NOSE_RADIUS: f64 = 0.6;
    pub const WRINKLE_Y: [f64; 2] = [1.0, 2.5];
    pub const WRINKLE_HALF_LEN: f64 = 2.2;
    pub const WRINKLE_RADIUS: f64 = 0.45;
    pub const MOUTH_Y: f64 = 8.0;
    pub const MOUTH_HALF_WIDTH: f64 = 5.0;
    pub const LIP_HALF_THICKNESS: f64 = 0.9;
    pub const CHIN_CREASE_Y: f64 = 13.0;
    pub const CHIN_CREASE_HALF_LEN: f64 = 3.0;
    pub const CHIN_CREASE_RADIUS: f64 = 0.5;
    /// Angular span (degrees, measured from +x toward +y) of the 14 chin
    /// landmarks on the face ellipse.
    pub const CHIN_ARC_DEG: (f64, f64) = (150.0, 30.0);
}

pub const NUM_CHIN_LANDMARKS: usize = 14;

/// Deformed feature geometry of one face, in face-local coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceGeometry {
    pub semi_axes: [f64; 2],
    /// Left then right brow, each as (inner end, outer end).
    pub brows: [[[f64; 2]; 2]; 2],
    pub eye_centers: [[f64; 2]; 2],
    pub eye_half_width: f64,
    pub upper_opening: f64,
    pub lower_opening: f64,
    pub nose: [f64; 2],
    pub wrinkle_opacity: f64,
    pub mouth_half_width: f64,
    pub mouth_corner_y: f64,
    pub upper_lip_y: f64,
    pub lower_lip_y: f64,
    pub lip_half_thickness: f64,
    pub chin_crease_y: f64,
}

impl FaceGeometry {
    pub fn from_spec(spec: &SceneSpec) -> Self {
        use layout::*;
        use slopes::*;
        let id = &spec.identity;
        let a = |i: usize| spec.aus.get(i);

        let inner_x = id.eye_spacing - BROW_INNER_INSET - AU4_BROW_DRAW_IN * a(idx::AU4);
        let outer_x = id.eye_spacing + BROW_OUTER_OUTSET;
        let inner_y = BROW_Y - AU1_INNER_BROW_RAISE * a(idx::AU1) + AU4_BROW_LOWER * a(idx::AU4);
        let outer_y = BROW_Y - AU2_OUTER_BROW_RAISE * a(idx::AU2) + AU4_BROW_LOWER * a(idx::AU4);

        let w = id.eye_size;
        let nose_top = EYE_Y + NOSE_TOP_GAP;
        Self {
            semi_axes: [id.face_width, id.face_height],
            brows: [
                [[-inner_x, inner_y], [-outer_x, outer_y]],
                [[inner_x, inner_y], [outer_x, outer_y]],
            ],
            eye_centers: [[-id.eye_spacing, EYE_Y], [id.eye_spacing, EYE_Y]],
            eye_half_width: w,
            upper_opening: w * (UPPER_LID_OPEN - AU43_UPPER_LID_LOWER * a(idx::AU43)),
            lower_opening: w * (LOWER_LID_OPEN - AU6_LOWER_LID_RAISE * a(idx::AU6)),
            nose: [nose_top, nose_top + id.nose_length],
            wrinkle_opacity: AU9_WRINKLE_OPACITY * a(idx::AU9),
            mouth_half_width: MOUTH_HALF_WIDTH + AU12_CORNER_OUT * a(idx::AU12) + AU20_MOUTH_WIDEN * a(idx::AU20),
            mouth_corner_y: MOUTH_Y - AU12_CORNER_RAISE * a(idx::AU12) + AU15_CORNER_LOWER * a(idx::AU15),
            upper_lip_y: MOUTH_Y - AU25_LIP_PART * a(idx::AU25),
            lower_lip_y: MOUTH_Y + AU25_LIP_PART * a(idx::AU25) + AU26_JAW_DROP * a(idx::AU26),
            lip_half_thickness: LIP_HALF_THICKNESS - AU20_LIP_THIN * a(idx::AU20),
            chin_crease_y: CHIN_CREASE_Y - AU17_CHIN_RAISE * a(idx::AU17) + AU26_CHIN_DROP * a(idx::AU26),
        }
    }

    /// Right mouth corner in local coordinates.
    pub fn mouth_corner(&self) -> [f64; 2] {
        [self.mouth_half_width, self.mouth_corner_y]
    }

    /// Chin contour points in local coordinates, ordered along the contour
    /// from the face's left side to its right side.
    pub fn chin_points(&self) -> [[f64; 2]; NUM_CHIN_LANDMARKS] {
        let (start, end) = layout::CHIN_ARC_DEG;
        let [a, b] = self.semi_axes;
        std::array::from_fn(|i| {
            let deg = start + (end - start) * i as f64 / (NUM_CHIN_LANDMARKS - 1) as f64;
            let th = deg.to_radians();
            [a * th.cos(), b * th.sin()]
        })
    }
}

/// Maps face-local points to continuous image coordinates (pixel `(col, row)`
/// covers `[col, col+1) x [row, row+1)`).
#[derive(Debug, Clone, Copy)]
pub struct PoseTransform {
    center: [f64; 2],
    scale: f64,
    cos: f64,
    sin: f64,
}

impl PoseTransform {
    pub fn new(spec: &SceneSpec, size: usize) -> Self {
        let half = size as f64 / 2.0;
        Self {
            center: [half + spec.pose.offset_x, half + spec.pose.offset_y],
            scale: spec.pose.scale,
            cos: spec.pose.roll.cos(),
            sin: spec.pose.roll.sin(),
        }
    }

    pub fn to_image(&self, p: [f64; 2]) -> [f64; 2] {
        let [x, y] = p;
        [
            self.center[0] + self.scale * (self.cos * x - self.sin * y),
            self.center[1] + self.scale * (self.sin * x + self.cos * y),
        ]
    }

    pub fn to_local(&self, q: [f64; 2]) -> [f64; 2] {
        let dx = (q[0] - self.center[0]) / self.scale;
        let dy = (q[1] - self.center[1]) / self.scale;
        [self.cos * dx + self.sin * dy, -self.sin * dx + self.cos * dy]
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let d = [ap[0] - t * ab[0], ap[1] - t * ab[1]];
    (d[0] * d[0] + d[1] * d[1]).sqrt()
}

fn scale_color(c: [f64; 3], k: f64) -> [f64; 3] {
    c.map(|v| v * k)
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|k| a[k] + (b[k] - a[k]) * t)
}

const EYE_COLOR: [f64; 3] = [0.08, 0.06, 0.05];
const MOUTH_COLOR: [f64; 3] = [0.30, 0.06, 0.08];
const LIP_TINT: [f64; 3] = [0.75, 0.20, 0.25];

pub(crate) fn inside_ellipse(p: [f64; 2], semi_axes: [f64; 2]) -> bool {
    let u = p[0] / semi_axes[0];
    let v = p[1] / semi_axes[1];
    u * u + v * v <= 1.0
}

/// Colour of the face layer at a local point, or `None` outside the face.
fn shade_face(p: [f64; 2], g: &FaceGeometry, skin: [f64; 3], hair: [f64; 3]) -> Option<[f64; 3]> {
    use layout::*;
    if !inside_ellipse(p, g.semi_axes) {
        return None;
    }
    let [x, y] = p;
    let mut c = if y < -g.semi_axes[1] + HAIR_BAND { hair } else { skin };
    let line = scale_color(skin, 0.72);

    if segment_distance(p, [-CHIN_CREASE_HALF_LEN, g.chin_crease_y], [CHIN_CREASE_HALF_LEN, g.chin_crease_y])
        <= CHIN_CREASE_RADIUS
    {
        c = line;
    }
    if segment_distance(p, [0.0, g.nose[0]], [0.0, g.nose[1]]) <= NOSE_RADIUS {
        c = line;
    }
    if g.wrinkle_opacity > 0.0 {
        for wy in WRINKLE_Y {
            let wy = EYE_Y + wy;
            if segment_distance(p, [-WRINKLE_HALF_LEN, wy], [WRINKLE_HALF_LEN, wy]) <= WRINKLE_RADIUS {
                c = mix(c, scale_color(skin, 0.55), g.wrinkle_opacity);
            }
        }
    }
    for e in g.eye_centers {
        let dx = x - e[0];
        if dx.abs() <= g.eye_half_width {
            let f = 1.0 - (dx / g.eye_half_width).powi(2);
            if y >= e[1] - g.upper_opening * f && y <= e[1] + g.lower_opening * f {
                c = EYE_COLOR;
            }
        }
    }
    for brow in g.brows {
        if segment_distance(p, brow[0], brow[1]) <= BROW_RADIUS {
            c = scale_color(hair, 0.6);
        }
    }
    if x.abs() <= g.mouth_half_width {
        let f = 1.0 - (x / g.mouth_half_width).powi(2);
        let yu = g.mouth_corner_y + (g.upper_lip_y - g.mouth_corner_y) * f;
        let yl = g.mouth_corner_y + (g.lower_lip_y - g.mouth_corner_y) * f;
        if y > yu && y < yl {
            c = MOUTH_COLOR;
        }
        if (y - yu).abs() <= g.lip_half_thickness || (y - yl).abs() <= g.lip_half_thickness {
            c = mix(skin, LIP_TINT, 0.5);
        }
    }
    Some(c)
}

/// Renders a scene. Identical specs always produce bit-identical images.
pub fn render_face(spec: &SceneSpec) -> Result<SceneImage> {
    render_face_sized(spec, IMAGE_SIZE)
}

pub fn render_face_sized(spec: &SceneSpec, size: usize) -> Result<SceneImage> {
    spec.validate()?;
    let geom = FaceGeometry::from_spec(spec);
    let xf = PoseTransform::new(spec, size);
    let skin = spec.identity.skin_tone;
    let hair = spec.identity.hair_tone;
    let sz = size as f64;
    let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;

    let mut pixels = vec![0f32; size * size * 3];
    for row in 0..size {
        for col in 0..size {
            let mut acc = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let q = [
                        col as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64,
                        row as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64,
                    ];
                    let p = xf.to_local(q);
                    let c = shade_face(p, &geom, skin, hair)
                        .unwrap_or_else(|| spec.background.color_at(q[0], q[1], sz));
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            let base = (row * size + col) * 3;
            for k in 0..3 {
                pixels[base + k] = (acc[k] * inv).clamp(0.0, 1.0) as f32;
            }
        }
    }

    let mut img = SceneImage::from_pixels(size, pixels)?;
    img.face_mask = Some(face_mask(spec, size));
    img.chin_landmarks = Some(chin_landmarks(spec, size));
    img.provenance = Some(spec.clone());
    Ok(img)
}

/// Analytic face region: pixels whose centre lies inside the posed ellipse.
pub fn face_mask(spec: &SceneSpec, size: usize) -> Vec<bool> {
    let xf = PoseTransform::new(spec, size);
    let axes = [spec.identity.face_width, spec.identity.face_height];
    let mut mask = vec![false; size * size];
    for row in 0..size {
        for col in 0..size {
            let p = xf.to_local([col as f64 + 0.5, row as f64 + 0.5]);
            mask[row * size + col] = inside_ellipse(p, axes);
        }
    }
    mask
}

/// The 14 chin-contour landmarks in image coordinates.
pub fn chin_landmarks(spec: &SceneSpec, size: usize) -> Vec<[f64; 2]> {
    let xf = PoseTransform::new(spec, size);
    FaceGeometry::from_spec(spec)
        .chin_points()
        .iter()
        .map(|&p| xf.to_image(p))
        .collect()
}
