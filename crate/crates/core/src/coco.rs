//! COCO-keypoint JSON subset: images, person annotations with `bbox` and a
//! flat `3N` keypoint array, and one category describing the skeleton.
//!
//! The visibility flag keeps the extended range `0..=3` (3 = labeled and
//! occluded) through load/save round trips. A non-standard optional
//! `"target": true` field on an annotation marks the target person of its
//! image; absent, the first annotation of the image is the target.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keypoints::{AnnotatedImage, BBox, Joint, KeypointSet, Person, Visibility};

#[derive(Debug, Error)]
pub enum CocoError {
    #[error("annotation I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("annotation JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("schema violation at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("image file error for `{file}`: {message}")]
    Image { file: String, message: String },
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> CocoError {
    CocoError::Schema {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, w, h]`
    pub bbox: Vec<f64>,
    /// Flat `[x1, y1, v1, x2, y2, v2, ...]`
    pub keypoints: Vec<f64>,
    pub num_keypoints: usize,
    /// Marks the target person of the image.
    #[serde(default, skip_serializing_if = "is_false")]
    pub target: bool,
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
    pub keypoints: Vec<String>,
    /// 1-indexed joint pairs, COCO convention.
    pub skeleton: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

impl CocoDataset {
    /// Validate structural invariants, reporting the JSON path of the first
    /// offending field.
    pub fn validate(&self) -> Result<(), CocoError> {
        if self.categories.is_empty() {
            return Err(schema("categories", "at least one category is required"));
        }
        let joints = self.categories[0].keypoints.len();
        for (i, img) in self.images.iter().enumerate() {
            if img.width == 0 || img.height == 0 {
                return Err(schema(
                    format!("images[{i}]"),
                    "width and height must be positive",
                ));
            }
        }
        for (i, ann) in self.annotations.iter().enumerate() {
            if !self.images.iter().any(|im| im.id == ann.image_id) {
                return Err(schema(
                    format!("annotations[{i}].image_id"),
                    format!("no image with id {}", ann.image_id),
                ));
            }
            if ann.bbox.len() != 4 {
                return Err(schema(
                    format!("annotations[{i}].bbox"),
                    format!("expected 4 numbers, got {}", ann.bbox.len()),
                ));
            }
            if ann.keypoints.len() != 3 * joints {
                return Err(schema(
                    format!("annotations[{i}].keypoints"),
                    format!(
                        "length {} is not 3 x {joints} (the category joint count)",
                        ann.keypoints.len()
                    ),
                ));
            }
            for j in 0..joints {
                let v = ann.keypoints[3 * j + 2];
                if v.fract() != 0.0 || !(0.0..=3.0).contains(&v) {
                    return Err(schema(
                        format!("annotations[{i}].keypoints[{}]", 3 * j + 2),
                        format!("visibility {v} is not an integer in 0..=3"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Decode one annotation into a [`Person`], clamping the bbox to its
    /// image bounds.
    pub fn person(&self, ann: &CocoAnnotation) -> Person {
        let img = self
            .images
            .iter()
            .find(|im| im.id == ann.image_id)
            .expect("validated image id");
        let joints = ann
            .keypoints
            .chunks_exact(3)
            .map(|c| Joint {
                x: c[0],
                y: c[1],
                v: Visibility::try_from(c[2] as u8).expect("validated flag"),
            })
            .collect();
        let bbox = BBox {
            x: ann.bbox[0],
            y: ann.bbox[1],
            w: ann.bbox[2],
            h: ann.bbox[3],
        }
        .clamp_to(img.width, img.height);
        Person {
            bbox,
            keypoints: KeypointSet { joints },
        }
    }

    /// Group annotations per image in file order and load the pixel data,
    /// producing one [`AnnotatedImage`] per image entry.
    pub fn load_images(&self, root: &Path) -> Result<Vec<AnnotatedImage>, CocoError> {
        let mut out = Vec::with_capacity(self.images.len());
        for img in &self.images {
            let path = root.join(&img.file_name);
            let pixels = image::open(&path)
                .map_err(|e| CocoError::Image {
                    file: img.file_name.clone(),
                    message: e.to_string(),
                })?
                .to_rgb8();
            let mut persons = Vec::new();
            let mut target_index = 0;
            for ann in self.annotations.iter().filter(|a| a.image_id == img.id) {
                if ann.target {
                    target_index = persons.len();
                }
                persons.push(self.person(ann));
            }
            if persons.is_empty() {
                return Err(schema(
                    "annotations",
                    format!("image id {} has no annotations", img.id),
                ));
            }
            out.push(AnnotatedImage {
                image: pixels,
                persons,
                target_index,
            });
        }
        Ok(out)
    }
}

/// Encode a person back into the flat keypoint layout.
pub fn encode_keypoints(kps: &KeypointSet) -> Vec<f64> {
    let mut flat = Vec::with_capacity(kps.len() * 3);
    for j in &kps.joints {
        flat.push(j.x);
        flat.push(j.y);
        flat.push(u8::from(j.v) as f64);
    }
    flat
}

/// Parse and validate an annotation file.
pub fn load_annotations(path: &Path) -> Result<CocoDataset, CocoError> {
    let text = std::fs::read_to_string(path)?;
    let ds: CocoDataset = serde_json::from_str(&text)?;
    ds.validate()?;
    Ok(ds)
}

/// Write an annotation file. The dataset is validated first so a bad build
/// step cannot produce an unreadable file.
pub fn save_annotations(path: &Path, ds: &CocoDataset) -> Result<(), CocoError> {
    ds.validate()?;
    let text = serde_json::to_string_pretty(ds)?;
    std::fs::write(path, text)?;
    Ok(())
}

/// The standard "person" category for a skeleton definition.
pub fn person_category(joint_names: &[String], edges: &[(usize, usize)]) -> CocoCategory {
    CocoCategory {
        id: 1,
        name: "person".into(),
        keypoints: joint_names.to_vec(),
        skeleton: edges.iter().map(|&(a, b)| (a + 1, b + 1)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{COCO17_EDGES, COCO17_JOINT_NAMES};

    fn names() -> Vec<String> {
        COCO17_JOINT_NAMES.iter().map(|s| s.to_string()).collect()
    }

    fn minimal_dataset() -> CocoDataset {
        let mut keypoints = vec![0.0; 51];
        keypoints[0] = 10.0;
        keypoints[1] = 20.0;
        keypoints[2] = 2.0;
        keypoints[3] = 11.5;
        keypoints[4] = 19.25;
        keypoints[5] = 3.0; // labeled and occluded
        CocoDataset {
            images: vec![CocoImage {
                id: 1,
                file_name: "images/000000.png".into(),
                width: 64,
                height: 64,
            }],
            annotations: vec![CocoAnnotation {
                id: 1,
                image_id: 1,
                category_id: 1,
                bbox: vec![5.0, 5.0, 40.0, 50.0],
                keypoints,
                num_keypoints: 2,
                target: true,
            }],
            categories: vec![person_category(&names(), &COCO17_EDGES)],
        }
    }

    #[test]
    fn minimal_fixture_parses_to_expected_triples() {
        let ds = minimal_dataset();
        ds.validate().unwrap();
        let p = ds.person(&ds.annotations[0]);
        assert_eq!(p.keypoints.joints[0].x, 10.0);
        assert_eq!(p.keypoints.joints[0].y, 20.0);
        assert_eq!(p.keypoints.joints[0].v, Visibility::Visible);
        assert_eq!(p.keypoints.joints[1].v, Visibility::Occluded);
        assert_eq!(p.keypoints.joints[2].v, Visibility::Unlabeled);
    }

    #[test]
    fn round_trip_preserves_values_including_v3() {
        let dir = std::env::temp_dir().join("occlupose-coco-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ann.json");
        let ds = minimal_dataset();
        save_annotations(&path, &ds).unwrap();
        let once = load_annotations(&path).unwrap();
        save_annotations(&path, &once).unwrap();
        let twice = load_annotations(&path).unwrap();
        assert_eq!(ds, once);
        assert_eq!(once, twice);
        assert_eq!(twice.annotations[0].keypoints[5], 3.0);
    }

    #[test]
    fn malformed_keypoint_length_reports_json_path() {
        let mut ds = minimal_dataset();
        ds.annotations[0].keypoints.pop();
        let err = ds.validate().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("annotations[0].keypoints"), "{msg}");
        assert!(msg.contains("50"), "{msg}");
    }

    #[test]
    fn bad_visibility_reports_element_path() {
        let mut ds = minimal_dataset();
        ds.annotations[0].keypoints[2] = 7.0;
        let err = ds.validate().unwrap_err();
        assert!(err.to_string().contains("keypoints[2]"), "{err}");
    }
}
