//! Keypoint annotations: per-person joint lists with COCO visibility
//! semantics, extended with `v = 3` for labeled-and-occluded joints.

use serde::{Deserialize, Serialize};

/// Visibility flag of one joint.
///
/// `Unlabeled` joints carry no usable coordinates; `Hidden` is the classic
/// COCO "labeled but not visible"; `Occluded` is the extended flag for joints
/// whose location is labeled but covered by another person or object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Visibility {
    Unlabeled = 0,
    Hidden = 1,
    Visible = 2,
    Occluded = 3,
}

impl Visibility {
    pub fn is_labeled(self) -> bool {
        self != Visibility::Unlabeled
    }

    /// Joints counted as "occluded" for the evaluation split.
    pub fn is_occluded_split(self) -> bool {
        matches!(self, Visibility::Hidden | Visibility::Occluded)
    }
}

impl TryFrom<u8> for Visibility {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(Visibility::Unlabeled),
            1 => Ok(Visibility::Hidden),
            2 => Ok(Visibility::Visible),
            3 => Ok(Visibility::Occluded),
            other => Err(format!("visibility flag {other} outside 0..=3")),
        }
    }
}

impl From<Visibility> for u8 {
    fn from(v: Visibility) -> u8 {
        v as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub x: f64,
    pub y: f64,
    pub v: Visibility,
}

impl Joint {
    pub fn unlabeled() -> Self {
        Joint {
            x: 0.0,
            y: 0.0,
            v: Visibility::Unlabeled,
        }
    }
}

/// One person's joints, in a fixed skeleton order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub joints: Vec<Joint>,
}

impl KeypointSet {
    pub fn unlabeled(n: usize) -> Self {
        KeypointSet {
            joints: vec![Joint::unlabeled(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn labeled(&self) -> impl Iterator<Item = (usize, &Joint)> {
        self.joints
            .iter()
            .enumerate()
            .filter(|(_, j)| j.v.is_labeled())
    }

    pub fn labeled_count(&self) -> usize {
        self.labeled().count()
    }

    /// Mean position of joints with the given flags; `None` when empty.
    pub fn mean_of(&self, flags: &[Visibility]) -> Option<(f64, f64)> {
        let pts: Vec<(f64, f64)> = self
            .joints
            .iter()
            .filter(|j| flags.contains(&j.v))
            .map(|j| (j.x, j.y))
            .collect();
        if pts.is_empty() {
            return None;
        }
        let n = pts.len() as f64;
        Some((
            pts.iter().map(|p| p.0).sum::<f64>() / n,
            pts.iter().map(|p| p.1).sum::<f64>() / n,
        ))
    }

    /// Tight bounding box over labeled joints, `None` if none are labeled.
    pub fn bounds(&self) -> Option<BBox> {
        let mut it = self.labeled().map(|(_, j)| (j.x, j.y));
        let first = it.next()?;
        let (mut x0, mut y0, mut x1, mut y1) = (first.0, first.1, first.0, first.1);
        for (x, y) in it {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        Some(BBox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        })
    }
}

/// Axis-aligned box in pixel coordinates, `(x, y)` top-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = (self.x + self.w).min(other.x + other.w);
        let y1 = (self.y + self.h).min(other.y + other.h);
        (x1 - x0).max(0.0) * (y1 - y0).max(0.0)
    }

    /// Grow by `margin` on every side.
    pub fn expand(&self, margin: f64) -> BBox {
        BBox {
            x: self.x - margin,
            y: self.y - margin,
            w: self.w + 2.0 * margin,
            h: self.h + 2.0 * margin,
        }
    }

    /// Clamp to an image of the given size.
    pub fn clamp_to(&self, width: u32, height: u32) -> BBox {
        let x0 = self.x.clamp(0.0, width as f64);
        let y0 = self.y.clamp(0.0, height as f64);
        let x1 = (self.x + self.w).clamp(0.0, width as f64);
        let y1 = (self.y + self.h).clamp(0.0, height as f64);
        BBox {
            x: x0,
            y: y0,
            w: (x1 - x0).max(0.0),
            h: (y1 - y0).max(0.0),
        }
    }

    pub fn diagonal(&self) -> f64 {
        (self.w * self.w + self.h * self.h).sqrt()
    }
}

/// One person in an annotated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Person {
    pub bbox: BBox,
    pub keypoints: KeypointSet,
}

/// An image with its person annotations and a designated target person.
#[derive(Debug, Clone)]
pub struct AnnotatedImage {
    pub image: image::RgbImage,
    pub persons: Vec<Person>,
    pub target_index: usize,
}

impl AnnotatedImage {
    pub fn target(&self) -> &Person {
        &self.persons[self.target_index]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn visibility_round_trips_and_rejects_out_of_range() {
        for v in 0u8..=3 {
            let flag = Visibility::try_from(v).unwrap();
            assert_eq!(u8::from(flag), v);
        }
        assert!(Visibility::try_from(4).is_err());
    }

    #[test]
    fn bbox_intersection() {
        let a = BBox { x: 0.0, y: 0.0, w: 10.0, h: 10.0 };
        let b = BBox { x: 5.0, y: 5.0, w: 10.0, h: 10.0 };
        assert_eq!(a.intersection(&b), 25.0);
        let c = BBox { x: 20.0, y: 20.0, w: 5.0, h: 5.0 };
        assert_eq!(a.intersection(&c), 0.0);
    }
}
