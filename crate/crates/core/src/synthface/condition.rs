//! Condition images: background with the face blanked and the chin contour
//! drawn on top.

use crate::error::{Error, Result};

use super::image::SceneImage;

/// Stroke colour of the chin contour.
pub const CONTOUR_COLOR: [f32; 3] = [1.0, 1.0, 1.0];

/// Integer Bresenham line from `p0` to `p1`, endpoints included.
pub fn bresenham(p0: (i64, i64), p1: (i64, i64)) -> Vec<(i64, i64)> {
    let (mut x, mut y) = p0;
    let dx = (p1.0 - x).abs();
    let dy = -(p1.1 - y).abs();
    let sx = if x < p1.0 { 1 } else { -1 };
    let sy = if y < p1.1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::with_capacity((dx - dy + 1) as usize);
    loop {
        out.push((x, y));
        if x == p1.0 && y == p1.1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    out
}

/// Pixel containing a continuous image coordinate.
pub fn landmark_pixel(p: [f64; 2]) -> (i64, i64) {
    (p[0].floor() as i64, p[1].floor() as i64)
}

/// Pixels of the 1-px polyline through the landmarks, clipped to the image.
pub fn contour_pixels(landmarks: &[[f64; 2]], size: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    let mut seen = vec![false; size * size];
    let mut push = |(x, y): (i64, i64)| {
        if x >= 0 && y >= 0 && (x as usize) < size && (y as usize) < size {
            let k = y as usize * size + x as usize;
            if !seen[k] {
                seen[k] = true;
                out.push((x as usize, y as usize));
            }
        }
    };
    if landmarks.len() == 1 {
        push(landmark_pixel(landmarks[0]));
    }
    for w in landmarks.windows(2) {
        for p in bresenham(landmark_pixel(w[0]), landmark_pixel(w[1])) {
            push(p);
        }
    }
    out
}

/// Zeroes the face region and draws the chin contour in white. Provenance is
/// carried over unchanged.
pub fn build_condition_image(img: &SceneImage) -> Result<SceneImage> {
    let mask = img.face_mask.as_ref().ok_or(Error::MissingCondition("face_mask"))?;
    let landmarks = img
        .chin_landmarks
        .as_ref()
        .ok_or(Error::MissingCondition("chin_landmarks"))?;
    if mask.len() != img.size * img.size {
        return Err(Error::Shape(format!(
            "face mask has {} entries for a {}x{} image",
            mask.len(),
            img.size,
            img.size
        )));
    }
    let mut out = img.clone();
    for (i, &m) in mask.iter().enumerate() {
        if m {
            out.pixels[i * 3..i * 3 + 3].fill(0.0);
        }
    }
    for (x, y) in contour_pixels(landmarks, img.size) {
        out.set_pixel(x, y, CONTOUR_COLOR);
    }
    Ok(out)
}
