//! Person crops: extend the target bbox to the fixed 4:3 height:width ratio,
//! resample the region to the crop size, and map keypoints along.

use image::RgbImage;

use crate::keypoints::{BBox, Joint, KeypointSet};
use crate::numerics::Tensor;

/// Affine image-to-crop mapping (uniform scale plus translation).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropTransform {
    pub offset_x: f64,
    pub offset_y: f64,
    pub scale: f64,
}

impl CropTransform {
    pub fn to_crop(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.offset_x) * self.scale, (y - self.offset_y) * self.scale)
    }

    pub fn from_crop(&self, x: f64, y: f64) -> (f64, f64) {
        (x / self.scale + self.offset_x, y / self.scale + self.offset_y)
    }
}

/// Extend `bbox` around its center to exactly the crop's 4:3 aspect ratio
/// (with a small margin) and return the mapping into a `crop_w x crop_h`
/// crop.
pub fn crop_transform(bbox: &BBox, crop_w: usize, crop_h: usize) -> CropTransform {
    let aspect = crop_h as f64 / crop_w as f64;
    let margin = 1.10;
    let mut region_w = bbox.w.max(1.0) * margin;
    let mut region_h = bbox.h.max(1.0) * margin;
    if region_h / region_w > aspect {
        region_w = region_h / aspect;
    } else {
        region_h = region_w * aspect;
    }
    let cx = bbox.x + bbox.w / 2.0;
    let cy = bbox.y + bbox.h / 2.0;
    CropTransform {
        offset_x: cx - region_w / 2.0,
        offset_y: cy - region_h / 2.0,
        scale: crop_w as f64 / region_w,
    }
}

/// Resample the source image into a `[3, crop_h, crop_w]` tensor of values in
/// `[0, 1]`, bilinear with border clamping.
pub fn extract_crop(img: &RgbImage, t: &CropTransform, crop_w: usize, crop_h: usize) -> Tensor {
    let (iw, ih) = (img.width() as i64, img.height() as i64);
    let mut data = vec![0.0; 3 * crop_h * crop_w];
    for y in 0..crop_h {
        for x in 0..crop_w {
            let (sx, sy) = t.from_crop(x as f64, y as f64);
            let sx = sx.clamp(0.0, (iw - 1) as f64);
            let sy = sy.clamp(0.0, (ih - 1) as f64);
            let x0 = sx.floor() as i64;
            let y0 = sy.floor() as i64;
            let x1 = (x0 + 1).min(iw - 1);
            let y1 = (y0 + 1).min(ih - 1);
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            for c in 0..3 {
                let v00 = img.get_pixel(x0 as u32, y0 as u32).0[c] as f64;
                let v10 = img.get_pixel(x1 as u32, y0 as u32).0[c] as f64;
                let v01 = img.get_pixel(x0 as u32, y1 as u32).0[c] as f64;
                let v11 = img.get_pixel(x1 as u32, y1 as u32).0[c] as f64;
                let v = v00 * (1.0 - fx) * (1.0 - fy)
                    + v10 * fx * (1.0 - fy)
                    + v01 * (1.0 - fx) * fy
                    + v11 * fx * fy;
                data[c * crop_h * crop_w + y * crop_w + x] = v / 255.0;
            }
        }
    }
    Tensor::new(vec![3, crop_h, crop_w], data).expect("crop shape")
}

/// Map keypoints into crop coordinates, keeping visibility flags.
pub fn transform_keypoints(kps: &KeypointSet, t: &CropTransform) -> KeypointSet {
    KeypointSet {
        joints: kps
            .joints
            .iter()
            .map(|j| {
                let (x, y) = t.to_crop(j.x, j.y);
                Joint { x, y, v: j.v }
            })
            .collect(),
    }
}

/// True when a crop-space joint lies inside the crop (with half-cell slack).
pub fn in_crop(x: f64, y: f64, crop_w: usize, crop_h: usize) -> bool {
    x > -2.0 && y > -2.0 && x < crop_w as f64 + 2.0 && y < crop_h as f64 + 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keypoints::Visibility;

    #[test]
    fn transform_round_trips() {
        let bbox = BBox { x: 10.0, y: 20.0, w: 30.0, h: 55.0 };
        let t = crop_transform(&bbox, 36, 48);
        let (cx, cy) = t.to_crop(25.0, 47.5);
        let (bx, by) = t.from_crop(cx, cy);
        assert!((bx - 25.0).abs() < 1e-9);
        assert!((by - 47.5).abs() < 1e-9);
        // bbox center maps to the crop center
        let (mx, my) = t.to_crop(25.0, 47.5);
        assert!((mx - 18.0).abs() < 1e-9);
        assert!((my - 24.0).abs() < 1e-9);
    }

    #[test]
    fn region_has_crop_aspect() {
        let bbox = BBox { x: 0.0, y: 0.0, w: 100.0, h: 20.0 };
        let t = crop_transform(&bbox, 36, 48);
        // width of the region = crop_w / scale; height = crop_h / scale
        let rw = 36.0 / t.scale;
        let rh = 48.0 / t.scale;
        assert!((rh / rw - 48.0 / 36.0).abs() < 1e-12);
        assert!(rw >= 100.0); // covers the wide bbox
    }

    #[test]
    fn keypoints_follow_the_transform() {
        let bbox = BBox { x: 0.0, y: 0.0, w: 40.0, h: 40.0 };
        let t = crop_transform(&bbox, 36, 48);
        let kps = KeypointSet {
            joints: vec![Joint { x: 20.0, y: 20.0, v: Visibility::Occluded }],
        };
        let mapped = transform_keypoints(&kps, &t);
        assert!((mapped.joints[0].x - 18.0).abs() < 1e-9);
        assert!((mapped.joints[0].y - 24.0).abs() < 1e-9);
        assert_eq!(mapped.joints[0].v, Visibility::Occluded);
    }

    #[test]
    fn constant_image_extracts_constant_crop() {
        let img = RgbImage::from_pixel(32, 32, image::Rgb([128, 64, 255]));
        let bbox = BBox { x: 4.0, y: 4.0, w: 20.0, h: 24.0 };
        let t = crop_transform(&bbox, 12, 16);
        let crop = extract_crop(&img, &t, 12, 16);
        let d = crop.data();
        let n = 12 * 16;
        for i in 0..n {
            assert!((d[i] - 128.0 / 255.0).abs() < 1e-12);
            assert!((d[n + i] - 64.0 / 255.0).abs() < 1e-12);
            assert!((d[2 * n + i] - 1.0).abs() < 1e-12);
        }
    }
}
