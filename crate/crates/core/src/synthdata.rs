//! Procedural occluded-pose scenes: articulated stick figures on smooth noise
//! backgrounds, plus distractor figures with near-identical palettes and flat
//! occluder rectangles. Joint coordinates come from the kinematic spec, never
//! from the rendered pixels, and visibility flags are derived from exact
//! z-order bookkeeping while drawing.

use std::path::Path;

use image::{Rgb, RgbImage, Rgba, RgbaImage};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::coco::{
    encode_keypoints, person_category, save_annotations, CocoAnnotation, CocoDataset, CocoImage,
};
use crate::keypoints::{AnnotatedImage, BBox, Joint, KeypointSet, Person, Visibility};
use crate::skeleton::{COCO17_EDGES, COCO17_JOINT_NAMES};
use crate::util::mix_seed2;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("degenerate scene spec: {0}")]
    Degenerate(String),
    #[error("dataset output error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image encode error: {0}")]
    Image(#[from] image::ImageError),
    #[error("annotation write error: {0}")]
    Coco(#[from] crate::coco::CocoError),
    #[error("dataset size must be positive")]
    EmptyDataset,
}

/// Body-part colors of one figure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Palette {
    pub head: [u8; 3],
    pub torso: [u8; 3],
    pub upper_limbs: [u8; 3],
    pub lower_limbs: [u8; 3],
}

fn bright_color(rng: &mut ChaCha8Rng) -> [u8; 3] {
    [
        rng.gen_range(100..=255),
        rng.gen_range(100..=255),
        rng.gen_range(100..=255),
    ]
}

impl Palette {
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        Palette {
            head: bright_color(rng),
            torso: bright_color(rng),
            upper_limbs: bright_color(rng),
            lower_limbs: bright_color(rng),
        }
    }

    /// Small per-channel shift: distractors keep a high appearance similarity
    /// to the target so the two are easy to confuse.
    pub fn perturb(&self, rng: &mut ChaCha8Rng, amount: i16) -> Self {
        let shift = |c: [u8; 3], rng: &mut ChaCha8Rng| {
            let mut out = c;
            for ch in &mut out {
                let delta = rng.gen_range(-amount..=amount);
                *ch = (*ch as i16 + delta).clamp(60, 255) as u8;
            }
            out
        };
        Palette {
            head: shift(self.head, rng),
            torso: shift(self.torso, rng),
            upper_limbs: shift(self.upper_limbs, rng),
            lower_limbs: shift(self.lower_limbs, rng),
        }
    }
}

/// Segment lengths of a figure, in pixels.
#[derive(Debug, Clone, Copy)]
pub struct LimbLengths {
    pub torso: f64,
    pub neck: f64,
    pub shoulder_half: f64,
    pub hip_half: f64,
    pub upper_arm: f64,
    pub forearm: f64,
    pub thigh: f64,
    pub shin: f64,
    pub head_radius: f64,
    pub eye_dx: f64,
    pub ear_dx: f64,
}

impl LimbLengths {
    pub fn for_height(h: f64) -> Self {
        LimbLengths {
            torso: 0.30 * h,
            neck: 0.11 * h,
            shoulder_half: 0.115 * h,
            hip_half: 0.065 * h,
            upper_arm: 0.15 * h,
            forearm: 0.14 * h,
            thigh: 0.22 * h,
            shin: 0.21 * h,
            head_radius: 0.085 * h,
            eye_dx: 0.030 * h,
            ear_dx: 0.058 * h,
        }
    }
}

/// Kinematic description of one stick figure. All joints are derived from
/// these fields; the renderer never moves them.
#[derive(Debug, Clone)]
pub struct FigureSpec {
    /// Pelvis center.
    pub root: (f64, f64),
    pub height: f64,
    pub lengths: LimbLengths,
    /// Whole-body lean, radians, 0 = upright.
    pub lean: f64,
    /// Shoulder swing and elbow bend per arm, radians from straight down.
    pub arm_angles: [(f64, f64); 2],
    /// Hip swing and knee bend per leg.
    pub leg_angles: [(f64, f64); 2],
    pub limb_thickness: f64,
    pub palette: Palette,
}

const LEAN_RANGE: f64 = 0.20;
const SHOULDER_RANGE: f64 = 1.3;
const ELBOW_RANGE: f64 = 1.8;
const HIP_RANGE: f64 = 0.55;
const KNEE_RANGE: f64 = 1.1;

impl FigureSpec {
    pub fn sample(rng: &mut ChaCha8Rng, height: f64, palette: Palette) -> Self {
        let mut arm = || {
            (
                rng.gen_range(-SHOULDER_RANGE..SHOULDER_RANGE),
                rng.gen_range(0.0..ELBOW_RANGE),
            )
        };
        let arm_angles = [arm(), arm()];
        let mut leg = || {
            (
                rng.gen_range(-HIP_RANGE..HIP_RANGE),
                rng.gen_range(0.0..KNEE_RANGE),
            )
        };
        let leg_angles = [leg(), leg()];
        FigureSpec {
            root: (0.0, 0.0),
            height,
            lengths: LimbLengths::for_height(height),
            lean: rng.gen_range(-LEAN_RANGE..LEAN_RANGE),
            arm_angles,
            leg_angles,
            limb_thickness: (0.045 * height).max(2.0),
            palette,
        }
    }

    /// COCO-17 joint positions implied by the kinematics.
    pub fn joints(&self) -> [(f64, f64); 17] {
        let l = &self.lengths;
        let up = (self.lean.sin(), -self.lean.cos());
        let right = (self.lean.cos(), self.lean.sin());
        let add = |p: (f64, f64), d: (f64, f64), s: f64| (p.0 + d.0 * s, p.1 + d.1 * s);
        let rot = |d: (f64, f64), a: f64| {
            (
                d.0 * a.cos() - d.1 * a.sin(),
                d.0 * a.sin() + d.1 * a.cos(),
            )
        };
        let down = (-up.0, -up.1);

        let root = self.root;
        let lhip = add(root, right, l.hip_half);
        let rhip = add(root, right, -l.hip_half);
        let chest = add(root, up, l.torso);
        let lsho = add(chest, right, l.shoulder_half);
        let rsho = add(chest, right, -l.shoulder_half);
        let nose = add(chest, up, l.neck);
        let leye = add(add(nose, right, l.eye_dx), up, 0.02 * self.height);
        let reye = add(add(nose, right, -l.eye_dx), up, 0.02 * self.height);
        let lear = add(nose, right, l.ear_dx);
        let rear = add(nose, right, -l.ear_dx);

        let (lsa, lea) = self.arm_angles[0];
        let (rsa, rea) = self.arm_angles[1];
        let lua = rot(down, lsa);
        let lelbow = add(lsho, lua, l.upper_arm);
        let lwrist = add(lelbow, rot(lua, lea), l.forearm);
        let rua = rot(down, -rsa);
        let relbow = add(rsho, rua, l.upper_arm);
        let rwrist = add(relbow, rot(rua, -rea), l.forearm);

        let (lha, lka) = self.leg_angles[0];
        let (rha, rka) = self.leg_angles[1];
        let lth = rot(down, lha);
        let lknee = add(lhip, lth, l.thigh);
        let lankle = add(lknee, rot(lth, lka * 0.5), l.shin);
        let rth = rot(down, -rha);
        let rknee = add(rhip, rth, l.thigh);
        let rankle = add(rknee, rot(rth, -rka * 0.5), l.shin);

        [
            nose, leye, reye, lear, rear, lsho, rsho, lelbow, relbow, lwrist, rwrist, lhip, rhip,
            lknee, rknee, lankle, rankle,
        ]
    }

    /// Bounding box of the drawn figure (joints plus stroke margins).
    pub fn bounds(&self) -> BBox {
        let joints = self.joints();
        let margin = self.limb_thickness.max(self.lengths.head_radius) + 1.0;
        let xs: Vec<f64> = joints.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = joints.iter().map(|p| p.1).collect();
        let x0 = xs.iter().cloned().fold(f64::INFINITY, f64::min) - margin;
        let y0 = ys.iter().cloned().fold(f64::INFINITY, f64::min) - margin;
        let x1 = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + margin;
        let y1 = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + margin;
        BBox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    /// Shift the root so the whole figure fits within `[margin, size-margin]`.
    pub fn fit_into(&mut self, size: u32, margin: f64) {
        let b = self.bounds();
        let size = size as f64;
        let mut dx = 0.0;
        let mut dy = 0.0;
        if b.x < margin {
            dx = margin - b.x;
        } else if b.x + b.w > size - margin {
            dx = (size - margin) - (b.x + b.w);
        }
        if b.y < margin {
            dy = margin - b.y;
        } else if b.y + b.h > size - margin {
            dy = (size - margin) - (b.y + b.h);
        }
        self.root.0 += dx;
        self.root.1 += dy;
    }
}

/// Flat occluder rectangle.
#[derive(Debug, Clone, Copy)]
pub struct Occluder {
    pub bbox: BBox,
    pub color: [u8; 3],
}

/// Draw-order reference into a [`SceneSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementRef {
    Target,
    Distractor(usize),
    Occluder(usize),
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub image_size: u32,
    pub background_seed: u64,
    pub target: FigureSpec,
    pub distractors: Vec<FigureSpec>,
    pub occluders: Vec<Occluder>,
    /// Back-to-front draw order over all elements.
    pub draw_order: Vec<ElementRef>,
}

/// Fraction of the target's drawn pixels that must stay topmost.
const MIN_UNOCCLUDED: f64 = 0.30;

// ── rasterization ───────────────────────────────────────────────────

struct Canvas {
    img: RgbImage,
    /// Element id of the topmost drawer per pixel; 0 = background.
    owner: Vec<u16>,
    size: u32,
}

impl Canvas {
    fn new(size: u32, background: RgbImage) -> Self {
        Canvas {
            img: background,
            owner: vec![0; (size * size) as usize],
            size,
        }
    }

    fn put(&mut self, x: i64, y: i64, color: [u8; 3], id: u16) {
        if x < 0 || y < 0 || x >= self.size as i64 || y >= self.size as i64 {
            return;
        }
        self.img.put_pixel(x as u32, y as u32, Rgb(color));
        self.owner[(y as u32 * self.size + x as u32) as usize] = id;
    }

    /// Thick line segment with rounded caps.
    fn capsule(&mut self, a: (f64, f64), b: (f64, f64), radius: f64, color: [u8; 3], id: u16) {
        let x0 = (a.0.min(b.0) - radius).floor() as i64;
        let x1 = (a.0.max(b.0) + radius).ceil() as i64;
        let y0 = (a.1.min(b.1) - radius).floor() as i64;
        let y1 = (a.1.max(b.1) + radius).ceil() as i64;
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = dx * dx + dy * dy;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (px, py) = (x as f64, y as f64);
                let t = if len2 > 0.0 {
                    (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
                let d2 = (px - cx) * (px - cx) + (py - cy) * (py - cy);
                if d2 <= radius * radius {
                    self.put(x, y, color, id);
                }
            }
        }
    }

    fn rect(&mut self, b: &BBox, color: [u8; 3], id: u16) {
        let x0 = b.x.floor() as i64;
        let y0 = b.y.floor() as i64;
        let x1 = (b.x + b.w).ceil() as i64;
        let y1 = (b.y + b.h).ceil() as i64;
        for y in y0..y1 {
            for x in x0..x1 {
                self.put(x, y, color, id);
            }
        }
    }

    fn draw_figure(&mut self, f: &FigureSpec, id: u16) {
        draw_figure_with(f, &mut |a, b, r, c| self.capsule(a, b, r, c, id));
    }
}

/// Shared figure stroke list so the scene canvas and the RGBA cutout renderer
/// draw exactly the same shape.
fn draw_figure_with(f: &FigureSpec, stroke: &mut dyn FnMut((f64, f64), (f64, f64), f64, [u8; 3])) {
    let j = f.joints();
    let t = f.limb_thickness;
    let p = &f.palette;
    let (nose, lsho, rsho, lhip, rhip) = (j[0], j[5], j[6], j[11], j[12]);
    let chest = ((lsho.0 + rsho.0) / 2.0, (lsho.1 + rsho.1) / 2.0);
    let pelvis = ((lhip.0 + rhip.0) / 2.0, (lhip.1 + rhip.1) / 2.0);

    // torso slab plus shoulder and hip bars
    stroke(chest, pelvis, f.lengths.hip_half + t, p.torso);
    stroke(lsho, rsho, t, p.torso);
    stroke(lhip, rhip, t, p.torso);
    // arms
    stroke(lsho, j[7], t, p.upper_limbs);
    stroke(j[7], j[9], t, p.upper_limbs);
    stroke(rsho, j[8], t, p.upper_limbs);
    stroke(j[8], j[10], t, p.upper_limbs);
    // legs
    stroke(lhip, j[13], t, p.lower_limbs);
    stroke(j[13], j[15], t, p.lower_limbs);
    stroke(rhip, j[14], t, p.lower_limbs);
    stroke(j[14], j[16], t, p.lower_limbs);
    // head disc centered a bit above the nose, then eye/ear accents
    let up = (f.lean.sin(), -f.lean.cos());
    let head_c = (
        nose.0 + up.0 * f.lengths.head_radius * 0.4,
        nose.1 + up.1 * f.lengths.head_radius * 0.4,
    );
    stroke(head_c, head_c, f.lengths.head_radius, p.head);
    let dot = (t * 0.5).max(1.0);
    let darker = |c: [u8; 3]| [c[0] / 2, c[1] / 2, c[2] / 2];
    for eye in [j[1], j[2]] {
        stroke(eye, eye, dot, darker(p.head));
    }
    for ear in [j[3], j[4]] {
        stroke(ear, ear, dot, p.upper_limbs);
    }
}

/// Smooth low-frequency background from a coarse color grid.
pub fn render_background(size: u32, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    const GRID: usize = 5;
    let mut grid = [[0u8; 3]; GRID * GRID];
    for cell in grid.iter_mut() {
        *cell = [
            rng.gen_range(25..=115),
            rng.gen_range(25..=115),
            rng.gen_range(25..=115),
        ];
    }
    let mut img = RgbImage::new(size, size);
    let step = size as f64 / (GRID - 1) as f64;
    for y in 0..size {
        for x in 0..size {
            let gx = (x as f64 / step).min((GRID - 1) as f64 - 1e-9);
            let gy = (y as f64 / step).min((GRID - 1) as f64 - 1e-9);
            let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
            let (fx, fy) = (gx - ix as f64, gy - iy as f64);
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v00 = grid[iy * GRID + ix][c] as f64;
                let v10 = grid[iy * GRID + ix + 1][c] as f64;
                let v01 = grid[(iy + 1) * GRID + ix][c] as f64;
                let v11 = grid[(iy + 1) * GRID + ix + 1][c] as f64;
                let v = v00 * (1.0 - fx) * (1.0 - fy)
                    + v10 * fx * (1.0 - fy)
                    + v01 * (1.0 - fx) * fy
                    + v11 * fx * fy;
                px[c] = v.round() as u8;
            }
            img.put_pixel(x, y, Rgb(px));
        }
    }
    img
}

/// A rendered scene: the annotated image plus the per-pixel ownership map
/// used to derive the visibility flags.
pub struct RenderedScene {
    pub annotated: AnnotatedImage,
    pub owner: Vec<u16>,
    /// Fraction of target-drawn pixels that stayed topmost.
    pub target_unoccluded: f64,
}

fn element_id(order: &[ElementRef], e: ElementRef) -> u16 {
    order.iter().position(|&o| o == e).expect("element in order") as u16 + 1
}

/// Render a scene back-to-front and derive every person's visibility flags
/// from the ownership map: a joint is `Visible` when its pixel is still owned
/// by its own figure, `Occluded` when something later covered it.
pub fn render_scene(spec: &SceneSpec) -> Result<RenderedScene, SynthError> {
    if spec.draw_order.len() != 1 + spec.distractors.len() + spec.occluders.len() {
        return Err(SynthError::Degenerate(format!(
            "draw_order has {} entries for {} elements",
            spec.draw_order.len(),
            1 + spec.distractors.len() + spec.occluders.len()
        )));
    }
    if spec.target.height < 8.0 {
        return Err(SynthError::Degenerate("target height below 8px".into()));
    }
    let size = spec.image_size;
    let mut canvas = Canvas::new(size, render_background(size, spec.background_seed));

    for (pos, e) in spec.draw_order.iter().enumerate() {
        let id = pos as u16 + 1;
        match *e {
            ElementRef::Target => canvas.draw_figure(&spec.target, id),
            ElementRef::Distractor(i) => canvas.draw_figure(&spec.distractors[i], id),
            ElementRef::Occluder(i) => {
                let o = &spec.occluders[i];
                canvas.rect(&o.bbox, o.color, id)
            }
        }
    }

    // target unoccluded fraction, for the construction check
    let target_id = element_id(&spec.draw_order, ElementRef::Target);
    let mut probe = Canvas::new(size, RgbImage::new(size, size));
    probe.draw_figure(&spec.target, target_id);
    let mut drawn = 0usize;
    let mut kept = 0usize;
    for (o, p) in canvas.owner.iter().zip(&probe.owner) {
        if *p == target_id {
            drawn += 1;
            if *o == target_id {
                kept += 1;
            }
        }
    }
    let target_unoccluded = if drawn == 0 {
        0.0
    } else {
        kept as f64 / drawn as f64
    };
    if target_unoccluded < MIN_UNOCCLUDED {
        return Err(SynthError::Degenerate(format!(
            "target only {:.0}% unoccluded",
            target_unoccluded * 100.0
        )));
    }

    // persons in draw order, visibility from ownership
    let mut persons = Vec::new();
    let mut target_index = 0;
    for e in &spec.draw_order {
        let (fig, is_target) = match *e {
            ElementRef::Target => (&spec.target, true),
            ElementRef::Distractor(i) => (&spec.distractors[i], false),
            ElementRef::Occluder(_) => continue,
        };
        let id = element_id(&spec.draw_order, *e);
        if is_target {
            target_index = persons.len();
        }
        persons.push(person_from_figure(fig, &canvas.owner, size, id));
    }

    Ok(RenderedScene {
        annotated: AnnotatedImage {
            image: canvas.img,
            persons,
            target_index,
        },
        owner: canvas.owner,
        target_unoccluded,
    })
}

fn person_from_figure(fig: &FigureSpec, owner: &[u16], size: u32, id: u16) -> Person {
    let joints = fig
        .joints()
        .iter()
        .map(|&(x, y)| {
            let px = (x.round() as i64).clamp(0, size as i64 - 1) as u32;
            let py = (y.round() as i64).clamp(0, size as i64 - 1) as u32;
            let v = if owner[(py * size + px) as usize] == id {
                Visibility::Visible
            } else {
                Visibility::Occluded
            };
            Joint { x, y, v }
        })
        .collect();
    Person {
        bbox: fig.bounds().clamp_to(size, size),
        keypoints: KeypointSet { joints },
    }
}

// ── scene sampling ──────────────────────────────────────────────────

/// Sample a scene around a deterministic per-scene seed, retrying the draw
/// until the target passes the unoccluded-fraction construction check.
pub fn sample_scene(seed: u64, image_size: u32) -> Result<(SceneSpec, RenderedScene), SynthError> {
    for attempt in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed2(seed, attempt, 0x5ce9e));
        let spec = draw_scene_spec(&mut rng, image_size);
        match render_scene(&spec) {
            Ok(r) => return Ok((spec, r)),
            Err(SynthError::Degenerate(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(SynthError::Degenerate(
        "no acceptable scene in 50 attempts".into(),
    ))
}

fn draw_scene_spec(rng: &mut ChaCha8Rng, image_size: u32) -> SceneSpec {
    let s = image_size as f64;
    let target_palette = Palette::sample(rng);
    let target_h = rng.gen_range(0.45 * s..0.68 * s);
    let mut target = FigureSpec::sample(rng, target_h, target_palette);
    target.root = (
        rng.gen_range(0.25 * s..0.75 * s),
        rng.gen_range(0.55 * s..0.8 * s),
    );
    target.fit_into(image_size, 2.0);

    let n_distractors = *pick(rng, &[0usize, 1, 1, 2]);
    let mut distractors = Vec::new();
    for _ in 0..n_distractors {
        let h = target_h * rng.gen_range(0.8..1.15);
        let palette = target_palette.perturb(rng, 28);
        let mut d = FigureSpec::sample(rng, h, palette);
        // biased toward the target so figures overlap often
        let off = 0.35 * s;
        d.root = (
            target.root.0 + rng.gen_range(-off..off),
            target.root.1 + rng.gen_range(-0.15 * s..0.15 * s),
        );
        d.fit_into(image_size, 2.0);
        distractors.push(d);
    }

    let n_occluders = *pick(rng, &[0usize, 1, 1, 2, 3]);
    let mut occluders = Vec::new();
    let tj = target.joints();
    for _ in 0..n_occluders {
        // center the rectangle near a random target joint
        let j = tj[rng.gen_range(0..tj.len())];
        let w = rng.gen_range(0.10..0.28) * target_h;
        let h = rng.gen_range(0.10..0.28) * target_h;
        let cx = j.0 + rng.gen_range(-0.1..0.1) * target_h;
        let cy = j.1 + rng.gen_range(-0.1..0.1) * target_h;
        occluders.push(Occluder {
            bbox: BBox {
                x: cx - w / 2.0,
                y: cy - h / 2.0,
                w,
                h,
            },
            color: [
                rng.gen_range(30..=220),
                rng.gen_range(30..=220),
                rng.gen_range(30..=220),
            ],
        });
    }

    // figures in random z order, occluders mostly on top
    let mut figures: Vec<ElementRef> = vec![ElementRef::Target];
    figures.extend((0..distractors.len()).map(ElementRef::Distractor));
    shuffle(rng, &mut figures);
    let mut draw_order = Vec::new();
    let mut top = Vec::new();
    for (i, _) in occluders.iter().enumerate() {
        if rng.gen_bool(0.8) {
            top.push(ElementRef::Occluder(i));
        } else {
            draw_order.push(ElementRef::Occluder(i));
        }
    }
    draw_order.extend(figures);
    draw_order.extend(top);

    SceneSpec {
        image_size,
        background_seed: rng.gen(),
        target,
        distractors,
        occluders,
        draw_order,
    }
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, items: &'a [T]) -> &'a T {
    &items[rng.gen_range(0..items.len())]
}

fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

// ── pool cutouts ────────────────────────────────────────────────────

/// Render a figure alone onto a tight transparent canvas, for the
/// instance-paste pool. Keypoints are in cutout coordinates.
pub fn render_figure_cutout(fig: &FigureSpec) -> (RgbaImage, KeypointSet) {
    let b = fig.bounds();
    let w = b.w.ceil() as u32;
    let h = b.h.ceil() as u32;
    let mut local = fig.clone();
    local.root = (fig.root.0 - b.x, fig.root.1 - b.y);
    let mut img = RgbaImage::new(w.max(1), h.max(1));
    {
        let mut stroke = |a: (f64, f64), bb: (f64, f64), r: f64, c: [u8; 3]| {
            capsule_rgba(&mut img, a, bb, r, c);
        };
        draw_figure_with(&local, &mut stroke);
    }
    let joints = local
        .joints()
        .iter()
        .map(|&(x, y)| Joint {
            x,
            y,
            v: Visibility::Visible,
        })
        .collect();
    (img, KeypointSet { joints })
}

fn capsule_rgba(img: &mut RgbaImage, a: (f64, f64), b: (f64, f64), radius: f64, color: [u8; 3]) {
    let x0 = (a.0.min(b.0) - radius).floor().max(0.0) as i64;
    let x1 = (a.0.max(b.0) + radius).ceil().min(img.width() as f64 - 1.0) as i64;
    let y0 = (a.1.min(b.1) - radius).floor().max(0.0) as i64;
    let y1 = (a.1.max(b.1) + radius).ceil().min(img.height() as f64 - 1.0) as i64;
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (px, py) = (x as f64, y as f64);
            let t = if len2 > 0.0 {
                (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
            let d2 = (px - cx) * (px - cx) + (py - cy) * (py - cy);
            if d2 <= radius * radius {
                img.put_pixel(x as u32, y as u32, Rgba([color[0], color[1], color[2], 255]));
            }
        }
    }
}

// ── dataset emission ────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct DatasetSummary {
    pub images: usize,
    pub pool_cutouts: usize,
    /// Fraction of labeled joints flagged occluded, across all persons.
    pub occluded_fraction: f64,
}

/// Generate `n` scenes under `out_dir`: `images/NNNNNN.png`, one
/// `annotations.json`, and a `pool/` directory of RGBA figure cutouts with
/// keypoint sidecars.
pub fn generate_dataset(n: usize, seed: u64, out_dir: &Path) -> Result<DatasetSummary, SynthError> {
    generate_dataset_sized(n, seed, out_dir, 128)
}

pub fn generate_dataset_sized(
    n: usize,
    seed: u64,
    out_dir: &Path,
    image_size: u32,
) -> Result<DatasetSummary, SynthError> {
    if n == 0 {
        return Err(SynthError::EmptyDataset);
    }
    std::fs::create_dir_all(out_dir.join("images"))?;
    std::fs::create_dir_all(out_dir.join("pool"))?;

    let mut images = Vec::with_capacity(n);
    let mut annotations = Vec::new();
    let mut ann_id = 1u64;
    let mut labeled = 0usize;
    let mut occluded = 0usize;

    for i in 0..n {
        let scene_seed = mix_seed2(seed, i as u64, 0xa11ce);
        let (_, rendered) = sample_scene(scene_seed, image_size)?;
        let file_name = format!("images/{i:06}.png");
        rendered.annotated.image.save(out_dir.join(&file_name))?;
        let image_id = i as u64 + 1;
        images.push(CocoImage {
            id: image_id,
            file_name,
            width: image_size,
            height: image_size,
        });
        for (pi, person) in rendered.annotated.persons.iter().enumerate() {
            for j in &person.keypoints.joints {
                if j.v.is_labeled() {
                    labeled += 1;
                    if j.v == Visibility::Occluded {
                        occluded += 1;
                    }
                }
            }
            annotations.push(CocoAnnotation {
                id: ann_id,
                image_id,
                category_id: 1,
                bbox: vec![
                    person.bbox.x,
                    person.bbox.y,
                    person.bbox.w,
                    person.bbox.h,
                ],
                keypoints: encode_keypoints(&person.keypoints),
                num_keypoints: person.keypoints.labeled_count(),
                target: pi == rendered.annotated.target_index,
            });
            ann_id += 1;
        }
    }

    let dataset = CocoDataset {
        images,
        annotations,
        categories: vec![person_category(
            &COCO17_JOINT_NAMES
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>(),
            &COCO17_EDGES,
        )],
    };
    save_annotations(&out_dir.join("annotations.json"), &dataset)?;

    let pool_n = (n / 20).clamp(8, 64);
    let s = image_size as f64;
    for p in 0..pool_n {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed2(seed, p as u64, 0x9001));
        let palette = Palette::sample(&mut rng);
        let h = rng.gen_range(0.45 * s..0.68 * s);
        let mut fig = FigureSpec::sample(&mut rng, h, palette);
        fig.root = (s / 2.0, s / 2.0);
        let (img, kps) = render_figure_cutout(&fig);
        img.save(out_dir.join(format!("pool/{p:06}.png")))?;
        let sidecar = serde_json::json!({ "keypoints": encode_keypoints(&kps) });
        std::fs::write(
            out_dir.join(format!("pool/{p:06}.json")),
            serde_json::to_string_pretty(&sidecar).expect("sidecar json"),
        )?;
    }

    Ok(DatasetSummary {
        images: n,
        pool_cutouts: pool_n,
        occluded_fraction: if labeled == 0 {
            0.0
        } else {
            occluded as f64 / labeled as f64
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lone_figure_scene(seed: u64) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let palette = Palette::sample(&mut rng);
        let mut target = FigureSpec::sample(&mut rng, 70.0, palette);
        target.root = (64.0, 84.0);
        target.fit_into(128, 2.0);
        SceneSpec {
            image_size: 128,
            background_seed: 9,
            target,
            distractors: Vec::new(),
            occluders: Vec::new(),
            draw_order: vec![ElementRef::Target],
        }
    }

    #[test]
    fn lone_figure_has_all_joints_visible() {
        let scene = lone_figure_scene(3);
        let rendered = render_scene(&scene).unwrap();
        let target = rendered.annotated.target();
        for j in &target.keypoints.joints {
            assert_eq!(j.v, Visibility::Visible);
        }
        assert!(rendered.target_unoccluded > 0.99);
    }

    #[test]
    fn occluder_over_wrist_flags_it() {
        let mut scene = lone_figure_scene(4);
        let joints = scene.target.joints();
        let lwrist = joints[9];
        scene.occluders.push(Occluder {
            bbox: BBox {
                x: lwrist.0 - 5.0,
                y: lwrist.1 - 5.0,
                w: 10.0,
                h: 10.0,
            },
            color: [200, 40, 40],
        });
        scene.draw_order.push(ElementRef::Occluder(0));
        let rendered = render_scene(&scene).unwrap();
        let target = rendered.annotated.target();
        assert_eq!(target.keypoints.joints[9].v, Visibility::Occluded);
    }

    #[test]
    fn joints_are_kinematic_not_pixel_derived() {
        let scene = lone_figure_scene(5);
        let expected = scene.target.joints();
        let rendered = render_scene(&scene).unwrap();
        for (j, e) in rendered
            .annotated
            .target()
            .keypoints
            .joints
            .iter()
            .zip(expected)
        {
            assert_eq!((j.x, j.y), e);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let (a, ra) = sample_scene(77, 96).unwrap();
        let (b, rb) = sample_scene(77, 96).unwrap();
        assert_eq!(a.background_seed, b.background_seed);
        assert_eq!(ra.annotated.image, rb.annotated.image);
        assert_eq!(ra.annotated.persons, rb.annotated.persons);
    }

    #[test]
    fn cutout_alpha_covers_figure() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let palette = Palette::sample(&mut rng);
        let fig = FigureSpec::sample(&mut rng, 60.0, palette);
        let (img, kps) = render_figure_cutout(&fig);
        assert!(img.pixels().any(|p| p.0[3] == 255));
        // every joint pixel is inside the canvas
        for j in &kps.joints {
            assert!(j.x >= -0.5 && j.x < img.width() as f64 + 0.5);
            assert!(j.y >= -0.5 && j.y < img.height() as f64 + 0.5);
        }
    }
}
