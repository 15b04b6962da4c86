//! Occlusion augmentation: cover labeled joints with random rectangles
//! (object occlusion) and alpha-composite transformed person cutouts into the
//! scene (person occlusion).
//!
//! Ground-truth triples are never modified: the training signal for an
//! artificially covered joint stays in place so the network learns to infer
//! it. Pasted cutouts are distractors only and contribute no annotations.

use std::path::Path;

use image::{Rgb, RgbaImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keypoints::{AnnotatedImage, BBox, KeypointSet};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("instance paste is enabled (paste_prob {0}) but the pool is empty")]
    EmptyPool(f64),
    #[error("pool I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("pool image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("pool sidecar error for `{file}`: {message}")]
    Sidecar { file: String, message: String },
}

/// A segmented person image with straight (non-premultiplied) alpha.
#[derive(Debug, Clone)]
pub struct InstanceCutout {
    pub image: RgbaImage,
    pub keypoints: KeypointSet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub mask_prob: f64,
    pub max_masked_joints: usize,
    /// Rectangle side range as a fraction of the person bbox diagonal.
    pub rect_size_min: f64,
    pub rect_size_max: f64,
    pub paste_prob: f64,
    /// Rotation range in degrees, symmetric around zero.
    pub rotation_range_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Maximum fraction of the target bbox a paste may cover.
    pub max_target_overlap: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            mask_prob: 0.5,
            max_masked_joints: 4,
            rect_size_min: 0.05,
            rect_size_max: 0.20,
            paste_prob: 0.5,
            rotation_range_deg: 30.0,
            scale_min: 0.7,
            scale_max: 1.3,
            max_target_overlap: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [
            ("mask_prob", self.mask_prob),
            ("paste_prob", self.paste_prob),
            ("max_target_overlap", self.max_target_overlap),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if self.rect_size_min > self.rect_size_max || self.rect_size_min < 0.0 {
            return Err(format!(
                "rect size range ({}, {}) is not ordered",
                self.rect_size_min, self.rect_size_max
            ));
        }
        if self.scale_min > self.scale_max || self.scale_min <= 0.0 {
            return Err(format!(
                "scale range ({}, {}) is not ordered",
                self.scale_min, self.scale_max
            ));
        }
        if self.rotation_range_deg < 0.0 {
            return Err("rotation_range_deg must be nonnegative".into());
        }
        Ok(())
    }
}

/// Integer pixel rectangle, `(x, y)` top-left.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub person: usize,
    pub joint: usize,
    pub rect: PixelRect,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PasteRecord {
    pub pool_index: usize,
    pub rotation_deg: f64,
    pub scale: f64,
    /// Scene position of the transformed cutout's top-left corner.
    pub position: (i64, i64),
    /// Scene-space bounding box of the pasted nonzero-alpha pixels.
    pub alpha_bbox: PixelRect,
}

/// What an augmentation pass did, sufficient to re-check pixel locality.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub masks: Vec<MaskRecord>,
    pub paste: Option<PasteRecord>,
}

/// Cover up to `max_masked_joints` labeled joints of randomly selected
/// persons with solid rectangles. Annotations are returned untouched.
pub fn mask_joints(
    img: &AnnotatedImage,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> (AnnotatedImage, AugmentRecord) {
    let mut out = img.clone();
    let mut record = AugmentRecord::default();
    if cfg.mask_prob <= 0.0
        || cfg.max_masked_joints == 0
        || !rng.gen_bool(cfg.mask_prob.min(1.0))
    {
        return (out, record);
    }

    let mut candidates: Vec<(usize, usize)> = Vec::new();
    for (pi, person) in img.persons.iter().enumerate() {
        for (ji, _) in person.keypoints.labeled() {
            candidates.push((pi, ji));
        }
    }
    if candidates.is_empty() {
        return (out, record);
    }
    for i in (1..candidates.len()).rev() {
        let j = rng.gen_range(0..=i);
        candidates.swap(i, j);
    }
    let count = rng.gen_range(1..=cfg.max_masked_joints).min(candidates.len());

    let (iw, ih) = (img.image.width(), img.image.height());
    for &(pi, ji) in candidates.iter().take(count) {
        let person = &img.persons[pi];
        let joint = &person.keypoints.joints[ji];
        let diag = person.bbox.diagonal().max(4.0);
        let w = rng.gen_range(cfg.rect_size_min..=cfg.rect_size_max) * diag;
        let h = rng.gen_range(cfg.rect_size_min..=cfg.rect_size_max) * diag;
        let color = [rng.gen::<u8>(), rng.gen::<u8>(), rng.gen::<u8>()];
        let Some(rect) = clamp_rect(
            joint.x - w / 2.0,
            joint.y - h / 2.0,
            w.max(1.0),
            h.max(1.0),
            iw,
            ih,
        ) else {
            continue;
        };
        for y in rect.y..rect.y + rect.h {
            for x in rect.x..rect.x + rect.w {
                out.image.put_pixel(x, y, Rgb(color));
            }
        }
        record.masks.push(MaskRecord {
            person: pi,
            joint: ji,
            rect,
            color,
        });
    }
    (out, record)
}

fn clamp_rect(x: f64, y: f64, w: f64, h: f64, iw: u32, ih: u32) -> Option<PixelRect> {
    let x0 = x.floor().max(0.0) as u32;
    let y0 = y.floor().max(0.0) as u32;
    let x1 = ((x + w).ceil().min(iw as f64)) as u32;
    let y1 = ((y + h).ceil().min(ih as f64)) as u32;
    if x1 <= x0 || y1 <= y0 {
        return None;
    }
    Some(PixelRect {
        x: x0,
        y: y0,
        w: x1 - x0,
        h: y1 - y0,
    })
}

/// Paste a randomly transformed pool cutout into the scene. Placements whose
/// coverage of the target bbox exceeds `max_target_overlap` are resampled up
/// to 20 times, after which the pass is a no-op. The pasted person's joints
/// are not added to the annotations.
pub fn instance_paste(
    img: &AnnotatedImage,
    pool: &[InstanceCutout],
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(AnnotatedImage, AugmentRecord), AugmentError> {
    let mut out = img.clone();
    let mut record = AugmentRecord::default();
    if cfg.paste_prob > 0.0 && pool.is_empty() {
        return Err(AugmentError::EmptyPool(cfg.paste_prob));
    }
    if cfg.paste_prob <= 0.0 || !rng.gen_bool(cfg.paste_prob.min(1.0)) {
        return Ok((out, record));
    }

    let target_bbox = img.target().bbox;
    let (iw, ih) = (img.image.width() as i64, img.image.height() as i64);

    for _attempt in 0..20 {
        let pool_index = rng.gen_range(0..pool.len());
        let rotation_deg = if cfg.rotation_range_deg > 0.0 {
            rng.gen_range(-cfg.rotation_range_deg..=cfg.rotation_range_deg)
        } else {
            0.0
        };
        let scale = rng.gen_range(cfg.scale_min..=cfg.scale_max);
        let transformed = transform_cutout(&pool[pool_index].image, rotation_deg, scale);
        let Some(alpha) = alpha_bounds(&transformed) else {
            continue;
        };

        // place so the visible content lies fully inside the scene
        let max_x = iw - (alpha.x + alpha.w) as i64;
        let max_y = ih - (alpha.y + alpha.h) as i64;
        let min_x = -(alpha.x as i64);
        let min_y = -(alpha.y as i64);
        if max_x < min_x || max_y < min_y {
            continue; // transformed cutout larger than the scene
        }
        let px = rng.gen_range(min_x..=max_x);
        let py = rng.gen_range(min_y..=max_y);

        let scene_alpha = BBox {
            x: (px + alpha.x as i64) as f64,
            y: (py + alpha.y as i64) as f64,
            w: alpha.w as f64,
            h: alpha.h as f64,
        };
        let overlap = if target_bbox.area() > 0.0 {
            scene_alpha.intersection(&target_bbox) / target_bbox.area()
        } else {
            0.0
        };
        if overlap > cfg.max_target_overlap {
            continue;
        }

        composite_over(&mut out.image, &transformed, px, py);
        record.paste = Some(PasteRecord {
            pool_index,
            rotation_deg,
            scale,
            position: (px, py),
            alpha_bbox: PixelRect {
                x: scene_alpha.x as u32,
                y: scene_alpha.y as u32,
                w: alpha.w,
                h: alpha.h,
            },
        });
        break;
    }
    Ok((out, record))
}

/// Run both augmentations in order (mask, then paste).
pub fn augment_sample(
    img: &AnnotatedImage,
    pool: &[InstanceCutout],
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(AnnotatedImage, AugmentRecord), AugmentError> {
    let (masked, mut record) = mask_joints(img, cfg, rng);
    let (pasted, paste_record) = instance_paste(&masked, pool, cfg, rng)?;
    record.paste = paste_record.paste;
    Ok((pasted, record))
}

/// Rotate (degrees, about the center) and scale a cutout with alpha-aware
/// bilinear resampling; pixels mapping outside the source stay transparent.
pub fn transform_cutout(src: &RgbaImage, rotation_deg: f64, scale: f64) -> RgbaImage {
    let (sw, sh) = (src.width() as f64, src.height() as f64);
    let theta = rotation_deg.to_radians();
    let (sin, cos) = (theta.sin(), theta.cos());

    // forward-map the corners to size the output canvas
    let half = (sw / 2.0, sh / 2.0);
    let corners = [
        (-half.0, -half.1),
        (half.0, -half.1),
        (-half.0, half.1),
        (half.0, half.1),
    ];
    let mut x0 = f64::INFINITY;
    let mut y0 = f64::INFINITY;
    let mut x1 = f64::NEG_INFINITY;
    let mut y1 = f64::NEG_INFINITY;
    for (cx, cy) in corners {
        let tx = scale * (cx * cos - cy * sin);
        let ty = scale * (cx * sin + cy * cos);
        x0 = x0.min(tx);
        y0 = y0.min(ty);
        x1 = x1.max(tx);
        y1 = y1.max(ty);
    }
    let ow = (x1 - x0).ceil().max(1.0) as u32;
    let oh = (y1 - y0).ceil().max(1.0) as u32;
    let ocenter = (ow as f64 / 2.0, oh as f64 / 2.0);

    let mut out = RgbaImage::new(ow, oh);
    let inv_scale = 1.0 / scale;
    for y in 0..oh {
        for x in 0..ow {
            // inverse map: undo translation, rotation, scale
            let dx = (x as f64 + 0.5 - ocenter.0) * inv_scale;
            let dy = (y as f64 + 0.5 - ocenter.1) * inv_scale;
            let sx = dx * cos + dy * sin + half.0 - 0.5;
            let sy = -dx * sin + dy * cos + half.1 - 0.5;
            let px = sample_premultiplied(src, sx, sy);
            out.put_pixel(x, y, image::Rgba(px));
        }
    }
    out
}

/// Bilinear sample with premultiplied alpha; outside the source is fully
/// transparent.
fn sample_premultiplied(src: &RgbaImage, x: f64, y: f64) -> [u8; 4] {
    let (w, h) = (src.width() as i64, src.height() as i64);
    if x <= -1.0 || y <= -1.0 || x >= w as f64 || y >= h as f64 {
        return [0, 0, 0, 0];
    }
    let x0 = x.floor() as i64;
    let y0 = y.floor() as i64;
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let mut acc = [0.0f64; 4];
    for (ix, iy, wgt) in [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1, y0, fx * (1.0 - fy)),
        (x0, y0 + 1, (1.0 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ] {
        if ix < 0 || iy < 0 || ix >= w || iy >= h || wgt == 0.0 {
            continue;
        }
        let p = src.get_pixel(ix as u32, iy as u32).0;
        let a = p[3] as f64 / 255.0;
        acc[0] += wgt * p[0] as f64 * a;
        acc[1] += wgt * p[1] as f64 * a;
        acc[2] += wgt * p[2] as f64 * a;
        acc[3] += wgt * a;
    }
    if acc[3] <= 0.0 {
        return [0, 0, 0, 0];
    }
    [
        (acc[0] / acc[3]).round().clamp(0.0, 255.0) as u8,
        (acc[1] / acc[3]).round().clamp(0.0, 255.0) as u8,
        (acc[2] / acc[3]).round().clamp(0.0, 255.0) as u8,
        (acc[3] * 255.0).round().clamp(0.0, 255.0) as u8,
    ]
}

/// Bounding box of nonzero-alpha pixels, `None` if fully transparent.
pub fn alpha_bounds(img: &RgbaImage) -> Option<PixelRect> {
    let mut x0 = u32::MAX;
    let mut y0 = u32::MAX;
    let mut x1 = 0u32;
    let mut y1 = 0u32;
    for (x, y, p) in img.enumerate_pixels() {
        if p.0[3] > 0 {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
    }
    if x0 == u32::MAX {
        return None;
    }
    Some(PixelRect {
        x: x0,
        y: y0,
        w: x1 - x0 + 1,
        h: y1 - y0 + 1,
    })
}

/// Standard alpha-over compositing of `src` onto `dst` at `(px, py)`.
fn composite_over(dst: &mut image::RgbImage, src: &RgbaImage, px: i64, py: i64) {
    let (dw, dh) = (dst.width() as i64, dst.height() as i64);
    for (x, y, p) in src.enumerate_pixels() {
        let a = p.0[3] as f64 / 255.0;
        if a == 0.0 {
            continue;
        }
        let tx = px + x as i64;
        let ty = py + y as i64;
        if tx < 0 || ty < 0 || tx >= dw || ty >= dh {
            continue;
        }
        let d = dst.get_pixel(tx as u32, ty as u32).0;
        let blend = |s: u8, b: u8| (s as f64 * a + b as f64 * (1.0 - a)).round() as u8;
        dst.put_pixel(
            tx as u32,
            ty as u32,
            Rgb([blend(p.0[0], d[0]), blend(p.0[1], d[1]), blend(p.0[2], d[2])]),
        );
    }
}

/// Load an instance pool directory: `*.png` RGBA cutouts, each with a
/// `*.json` sidecar holding a flat `keypoints` array. Files are read in
/// name order.
pub fn load_pool(dir: &Path) -> Result<Vec<InstanceCutout>, AugmentError> {
    let mut names: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    names.sort();
    let mut pool = Vec::with_capacity(names.len());
    for png in names {
        let image = image::open(&png)?.to_rgba8();
        let sidecar = png.with_extension("json");
        let text = std::fs::read_to_string(&sidecar)?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| AugmentError::Sidecar {
                file: sidecar.display().to_string(),
                message: e.to_string(),
            })?;
        let flat: Vec<f64> = value
            .get("keypoints")
            .and_then(|k| k.as_array())
            .ok_or_else(|| AugmentError::Sidecar {
                file: sidecar.display().to_string(),
                message: "missing `keypoints` array".into(),
            })?
            .iter()
            .filter_map(|v| v.as_f64())
            .collect();
        if flat.len() % 3 != 0 {
            return Err(AugmentError::Sidecar {
                file: sidecar.display().to_string(),
                message: format!("keypoints length {} is not a multiple of 3", flat.len()),
            });
        }
        let joints = flat
            .chunks_exact(3)
            .map(|c| {
                Ok(crate::keypoints::Joint {
                    x: c[0],
                    y: c[1],
                    v: crate::keypoints::Visibility::try_from(c[2] as u8).map_err(|m| {
                        AugmentError::Sidecar {
                            file: sidecar.display().to_string(),
                            message: m,
                        }
                    })?,
                })
            })
            .collect::<Result<Vec<_>, AugmentError>>()?;
        pool.push(InstanceCutout {
            image,
            keypoints: KeypointSet { joints },
        });
    }
    Ok(pool)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keypoints::{Joint, Person, Visibility};
    use rand_chacha::rand_core::SeedableRng;

    fn fixture() -> AnnotatedImage {
        let mut image = image::RgbImage::new(64, 64);
        for (x, y, p) in image.enumerate_pixels_mut() {
            *p = Rgb([(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8]);
        }
        let joints = vec![
            Joint { x: 20.0, y: 20.0, v: Visibility::Visible },
            Joint { x: 40.0, y: 30.0, v: Visibility::Occluded },
            Joint { x: 0.0, y: 0.0, v: Visibility::Unlabeled },
        ];
        AnnotatedImage {
            image,
            persons: vec![Person {
                bbox: BBox { x: 10.0, y: 10.0, w: 40.0, h: 40.0 },
                keypoints: KeypointSet { joints },
            }],
            target_index: 0,
        }
    }

    fn opaque_cutout(w: u32, h: u32) -> InstanceCutout {
        let mut image = RgbaImage::new(w, h);
        for p in image.pixels_mut() {
            *p = image::Rgba([10, 200, 60, 255]);
        }
        InstanceCutout {
            image,
            keypoints: KeypointSet::unlabeled(3),
        }
    }

    #[test]
    fn mask_prob_zero_is_identity() {
        let img = fixture();
        let cfg = AugmentConfig {
            mask_prob: 0.0,
            ..AugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (out, record) = mask_joints(&img, &cfg, &mut rng);
        assert_eq!(out.image, img.image);
        assert!(record.masks.is_empty());
    }

    #[test]
    fn masked_rect_is_filled_and_labels_unchanged() {
        let img = fixture();
        let cfg = AugmentConfig {
            mask_prob: 1.0,
            max_masked_joints: 2,
            ..AugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (out, record) = mask_joints(&img, &cfg, &mut rng);
        assert!(!record.masks.is_empty());
        for m in &record.masks {
            for y in m.rect.y..m.rect.y + m.rect.h {
                for x in m.rect.x..m.rect.x + m.rect.w {
                    assert_eq!(out.image.get_pixel(x, y).0, m.color);
                }
            }
        }
        assert_eq!(out.persons, img.persons);
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let img = fixture();
        let pool = vec![opaque_cutout(12, 16)];
        let cfg = AugmentConfig {
            mask_prob: 0.8,
            paste_prob: 0.8,
            ..AugmentConfig::default()
        };
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            augment_sample(&img, &pool, &cfg, &mut rng).unwrap()
        };
        let (a, ra) = run(42);
        let (b, rb) = run(42);
        assert_eq!(a.image, b.image);
        assert_eq!(ra, rb);
    }

    #[test]
    fn paste_prob_zero_is_identity_and_empty_pool_errors() {
        let img = fixture();
        let cfg = AugmentConfig {
            paste_prob: 0.0,
            ..AugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (out, record) = instance_paste(&img, &[], &cfg, &mut rng).unwrap();
        assert_eq!(out.image, img.image);
        assert!(record.paste.is_none());

        let cfg_on = AugmentConfig {
            paste_prob: 0.5,
            ..AugmentConfig::default()
        };
        assert!(matches!(
            instance_paste(&img, &[], &cfg_on, &mut rng),
            Err(AugmentError::EmptyPool(_))
        ));
    }

    #[test]
    fn opaque_paste_writes_cutout_pixels() {
        let img = fixture();
        let pool = vec![opaque_cutout(10, 10)];
        let cfg = AugmentConfig {
            mask_prob: 0.0,
            paste_prob: 1.0,
            rotation_range_deg: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            max_target_overlap: 1.0,
            ..AugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (out, record) = instance_paste(&img, &pool, &cfg, &mut rng).unwrap();
        let paste = record.paste.expect("paste happened");
        let b = paste.alpha_bbox;
        for y in b.y..b.y + b.h {
            for x in b.x..b.x + b.w {
                assert_eq!(out.image.get_pixel(x, y).0, [10, 200, 60]);
            }
        }
    }

    #[test]
    fn pixels_outside_records_are_untouched() {
        let img = fixture();
        let pool = vec![opaque_cutout(10, 14)];
        let cfg = AugmentConfig {
            mask_prob: 1.0,
            paste_prob: 1.0,
            ..AugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (out, record) = augment_sample(&img, &pool, &cfg, &mut rng).unwrap();
        let inside = |x: u32, y: u32| {
            record.masks.iter().any(|m| {
                x >= m.rect.x && x < m.rect.x + m.rect.w && y >= m.rect.y && y < m.rect.y + m.rect.h
            }) || record.paste.as_ref().is_some_and(|p| {
                x >= p.alpha_bbox.x
                    && x < p.alpha_bbox.x + p.alpha_bbox.w
                    && y >= p.alpha_bbox.y
                    && y < p.alpha_bbox.y + p.alpha_bbox.h
            })
        };
        for (x, y, p) in out.image.enumerate_pixels() {
            if !inside(x, y) {
                assert_eq!(p, img.image.get_pixel(x, y), "pixel ({x},{y}) changed");
            }
        }
    }

    #[test]
    fn zero_overlap_never_touches_target_bbox() {
        let img = fixture();
        let pool = vec![opaque_cutout(8, 8)];
        let cfg = AugmentConfig {
            mask_prob: 0.0,
            paste_prob: 1.0,
            max_target_overlap: 0.0,
            ..AugmentConfig::default()
        };
        let target = img.target().bbox;
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (_, record) = instance_paste(&img, &pool, &cfg, &mut rng).unwrap();
            if let Some(p) = record.paste {
                let pasted = BBox {
                    x: p.alpha_bbox.x as f64,
                    y: p.alpha_bbox.y as f64,
                    w: p.alpha_bbox.w as f64,
                    h: p.alpha_bbox.h as f64,
                };
                assert_eq!(pasted.intersection(&target), 0.0, "seed {seed}");
            }
        }
    }
}
