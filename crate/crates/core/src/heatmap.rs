//! Gaussian heatmap targets and argmax decoding with quarter-pixel offsets.
//!
//! Heatmaps live at 1/4 crop resolution. Encoding centers an unnormalized
//! Gaussian (peak coefficient 1) at the continuous joint position divided by
//! the stride; decoding takes the argmax cell, shifts a quarter cell toward
//! the larger neighbor on each axis, and scales back up.

use crate::keypoints::{Joint, KeypointSet, Visibility};

pub const HEATMAP_STRIDE: usize = 4;

/// Per-joint heatmaps, row-major `[J, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapSet {
    pub joints: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl HeatmapSet {
    pub fn zeros(joints: usize, height: usize, width: usize) -> Self {
        HeatmapSet {
            joints,
            height,
            width,
            data: vec![0.0; joints * height * width],
        }
    }

    pub fn plane(&self, j: usize) -> &[f64] {
        &self.data[j * self.height * self.width..(j + 1) * self.height * self.width]
    }

    pub fn plane_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.height * self.width..(j + 1) * self.height * self.width]
    }

    /// Merge by elementwise maximum; used to stack several persons into one
    /// multi-person target while keeping peaks at 1.
    pub fn max_with(&mut self, other: &HeatmapSet) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = a.max(*b);
        }
    }
}

/// Encode labeled joints (`v > 0`) as Gaussians of std `sigma` (in heatmap
/// cells) centered at `(x, y) / stride`; unlabeled joints yield zero planes.
/// Joints whose center falls outside the map are skipped.
pub fn encode_heatmaps(
    kps: &KeypointSet,
    crop_w: usize,
    crop_h: usize,
    sigma: f64,
) -> HeatmapSet {
    assert!(sigma > 0.0, "sigma must be positive");
    let hw = crop_w / HEATMAP_STRIDE;
    let hh = crop_h / HEATMAP_STRIDE;
    let mut out = HeatmapSet::zeros(kps.len(), hh, hw);
    let radius = (3.0 * sigma).ceil() as i64;
    for (j, joint) in kps.joints.iter().enumerate() {
        if !joint.v.is_labeled() {
            continue;
        }
        let cx = joint.x / HEATMAP_STRIDE as f64;
        let cy = joint.y / HEATMAP_STRIDE as f64;
        if cx < -0.5 || cy < -0.5 || cx > hw as f64 - 0.5 || cy > hh as f64 - 0.5 {
            continue;
        }
        let plane = out.plane_mut(j);
        let x0 = ((cx.round() as i64) - radius).max(0);
        let x1 = ((cx.round() as i64) + radius).min(hw as i64 - 1);
        let y0 = ((cy.round() as i64) - radius).max(0);
        let y1 = ((cy.round() as i64) + radius).min(hh as i64 - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                let idx = (y as usize) * hw + x as usize;
                plane[idx] = plane[idx].max(v);
            }
        }
    }
    out
}

/// Decode each plane to a joint: argmax cell, quarter-cell shift toward the
/// larger in-bounds neighbor per axis (no shift on ties or at borders), then
/// scale by the stride. All-zero planes decode to an unlabeled joint.
/// Confidence is the peak value.
pub fn decode_heatmaps(hm: &HeatmapSet) -> (KeypointSet, Vec<f64>) {
    let mut joints = Vec::with_capacity(hm.joints);
    let mut confidences = Vec::with_capacity(hm.joints);
    for j in 0..hm.joints {
        let plane = hm.plane(j);
        let (mut best, mut best_v) = (0usize, f64::NEG_INFINITY);
        for (i, v) in plane.iter().enumerate() {
            if *v > best_v {
                best_v = *v;
                best = i;
            }
        }
        if best_v <= 0.0 {
            joints.push(Joint::unlabeled());
            confidences.push(0.0);
            continue;
        }
        let px = best % hm.width;
        let py = best / hm.width;
        let mut x = px as f64;
        let mut y = py as f64;
        if px > 0 && px + 1 < hm.width {
            let diff = plane[py * hm.width + px + 1] - plane[py * hm.width + px - 1];
            if diff > 0.0 {
                x += 0.25;
            } else if diff < 0.0 {
                x -= 0.25;
            }
        }
        if py > 0 && py + 1 < hm.height {
            let diff = plane[(py + 1) * hm.width + px] - plane[(py - 1) * hm.width + px];
            if diff > 0.0 {
                y += 0.25;
            } else if diff < 0.0 {
                y -= 0.25;
            }
        }
        joints.push(Joint {
            x: x * HEATMAP_STRIDE as f64,
            y: y * HEATMAP_STRIDE as f64,
            v: Visibility::Visible,
        });
        confidences.push(best_v);
    }
    (KeypointSet { joints }, confidences)
}
