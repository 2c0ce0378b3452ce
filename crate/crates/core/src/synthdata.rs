//! Procedural stick-figure people with exact ground truth.
//!
//! A figure is a head disk, a torso quadrilateral and capsule limbs drawn on
//! a tinted 64×32 canvas. Upper garments cover the torso and upper arms,
//! lower garments the legs; forearms, neck and head are skin. Women get
//! long hair and a narrow-shoulder, wide-hip build.
//!
//! Figures are seen from behind: the person's left side is on the image
//! left. Seen this way the shoulder and hip lines run along +x, away from
//! the ±π seam of the pose descriptor's line angles.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::degrade::{self, Artifact, ArtifactPolicy, DegradeError};
use crate::image::Image;
use crate::math;
use crate::pose::{joint, Skeleton, NUM_KEYPOINTS};
use crate::rng::{substream, tag};

pub const CANVAS_H: usize = 64;
pub const CANVAS_W: usize = 32;
pub const FEMALE: u8 = 0;
pub const MALE: u8 = 1;
pub const NUM_POSE_ANGLES: usize = 9;
pub const NUM_POSE_MODES: usize = 15;
pub const DEFAULT_CAMERAS: usize = 4;

/// Per-pixel body-part labels.
pub mod label {
    pub const BACKGROUND: u8 = 0;
    pub const SKIN: u8 = 1;
    pub const UPPER: u8 = 2;
    pub const LOWER: u8 = 3;
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RenderError {
    #[error("joint {joint} lands off the canvas at ({x:.1}, {y:.1})")]
    OffCanvas { joint: usize, x: f64, y: f64 },
    #[error("pose angle {index} = {value} outside its joint limits")]
    JointLimit { index: usize, value: f64 },
    #[error("mask {mask_h}x{mask_w} does not match image {img_h}x{img_w}")]
    MaskMismatch {
        mask_h: usize,
        mask_w: usize,
        img_h: usize,
        img_w: usize,
    },
    #[error("dataset needs at least 4 identities, got {0}")]
    TooFewIds(usize),
    #[error("clothes-changing split needs at least 2 clothes per identity")]
    CcSplitImpossible,
    #[error("need at least {needed} images per clothes for the query split, got {got}")]
    TooFewImages { needed: usize, got: usize },
    #[error(transparent)]
    Degrade(#[from] DegradeError),
}

pub type Result<T> = core::result::Result<T, RenderError>;

/// Identity-level appearance and build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonSpec {
    pub identity: usize,
    pub gender: u8,
    pub skin: [u8; 3],
    pub hair: [u8; 3],
    pub torso_scale: f64,
    pub limb_scale: f64,
    pub shoulder_width: f64,
    pub hip_width: f64,
}

fn jitter_color<R: Rng + ?Sized>(rng: &mut R, base: [u8; 3], spread: i32) -> [u8; 3] {
    base.map(|c| (c as i32 + rng.random_range(-spread..=spread)).clamp(0, 255) as u8)
}

impl PersonSpec {
    pub fn random<R: Rng + ?Sized>(identity: usize, rng: &mut R) -> Self {
        let gender = if rng.random_bool(0.5) { MALE } else { FEMALE };
        const SKIN: [[u8; 3]; 5] = [
            [245, 214, 190],
            [226, 180, 140],
            [190, 140, 100],
            [140, 95, 65],
            [95, 65, 45],
        ];
        const HAIR: [[u8; 3]; 4] = [[30, 22, 18], [70, 45, 25], [15, 15, 15], [90, 60, 30]];
        let skin_base = SKIN[rng.random_range(0..SKIN.len())];
        let skin = jitter_color(rng, skin_base, 10);
        let hair_base = HAIR[rng.random_range(0..HAIR.len())];
        let hair = jitter_color(rng, hair_base, 8);
        let (shoulder_width, hip_width) = if gender == MALE {
            (rng.random_range(10.0..11.5), rng.random_range(6.0..7.0))
        } else {
            (rng.random_range(7.5..8.5), rng.random_range(8.0..9.0))
        };
        Self {
            identity,
            gender,
            skin,
            hair,
            torso_scale: rng.random_range(0.92..1.06),
            limb_scale: rng.random_range(0.92..1.06),
            shoulder_width,
            hip_width,
        }
    }
}

/// Garment colors of one outfit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clothes {
    pub upper: [u8; 3],
    pub lower: [u8; 3],
}

fn random_garment<R: Rng + ?Sized>(rng: &mut R) -> [u8; 3] {
    [(); 3].map(|_| rng.random_range(20..=235))
}

impl Clothes {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            upper: random_garment(rng),
            lower: random_garment(rng),
        }
    }
}

/// Body angles in radians, zero meaning "hanging straight down".
///
/// Order: torso lean, left upper arm, left forearm, right upper arm, right
/// forearm, left thigh, left shin, right thigh, right shin. Limb angles are
/// absolute and positive away from the body's midline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    pub angles: [f64; NUM_POSE_ANGLES],
}

/// `(min, max)` per pose angle.
pub const JOINT_LIMITS: [(f64, f64); NUM_POSE_ANGLES] = [
    (-0.4, 0.4),
    (-1.0, 3.2),
    (-2.8, 3.3),
    (-1.0, 3.2),
    (-2.8, 3.3),
    (-0.7, 1.4),
    (-0.8, 1.4),
    (-0.7, 1.4),
    (-0.8, 1.4),
];

impl PoseParams {
    pub fn check_limits(&self) -> Result<()> {
        for (i, (&v, &(lo, hi))) in self.angles.iter().zip(&JOINT_LIMITS).enumerate() {
            if !(lo..=hi).contains(&v) {
                return Err(RenderError::JointLimit { index: i, value: v });
            }
        }
        Ok(())
    }
}

/// Canonical pose modes plus isotropic Gaussian jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSampler {
    pub modes: Vec<[f64; NUM_POSE_ANGLES]>,
    pub jitter: f64,
}

impl Default for PoseSampler {
    fn default() -> Self {
        Self {
            modes: default_modes(),
            jitter: 0.06,
        }
    }
}

fn default_modes() -> Vec<[f64; NUM_POSE_ANGLES]> {
    vec![
        // standing, arms down
        [0.0, 0.12, 0.05, 0.12, 0.05, 0.05, 0.0, 0.05, 0.0],
        // arms spread low
        [0.0, 0.55, 0.45, 0.55, 0.45, 0.25, 0.2, 0.25, 0.2],
        // left hand raised
        [0.0, 2.4, 3.1, 0.12, 0.05, 0.05, 0.0, 0.05, 0.0],
        // both hands raised
        [0.0, 2.4, 3.1, 2.4, 3.1, 0.15, 0.1, 0.15, 0.1],
        // hands on hips
        [0.0, 0.9, -0.9, 0.9, -0.9, 0.08, 0.0, 0.08, 0.0],
        // walking
        [0.0, -0.35, -0.2, 0.35, 0.5, 0.35, 0.1, -0.3, -0.45],
        // wide stance
        [0.0, 0.25, 0.15, 0.25, 0.15, 0.42, 0.25, 0.42, 0.25],
        // squat
        [0.0, 0.3, 0.7, 0.3, 0.7, 0.6, -0.55, 0.6, -0.55],
        // left kick
        [0.0, 0.3, 0.2, 0.35, 0.45, 0.55, 0.0, -0.05, -0.05],
        // lean right, left arm up
        [0.2, 0.7, 2.4, 0.15, 0.05, 0.15, 0.05, 0.0, 0.0],
        // lean left, right arm up
        [-0.2, 0.15, 0.05, 0.7, 2.4, 0.0, 0.0, 0.15, 0.05],
        // arms crossed
        [0.0, 0.25, -1.2, 0.25, -1.2, 0.05, 0.0, 0.05, 0.0],
        // right hand waving
        [0.0, 0.1, 0.05, 0.9, 3.1, 0.3, 0.2, 0.1, 0.0],
        // running
        [0.0, 0.6, -0.6, -0.5, 0.4, -0.25, -0.6, 0.6, 0.1],
        // hands behind head
        [0.0, 1.9, -2.5, 1.9, -2.5, 0.2, 0.1, 0.2, 0.1],
    ]
}

impl PoseSampler {
    /// A mode index and its jittered angles, clamped to the joint limits.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, PoseParams) {
        let mode = rng.random_range(0..self.modes.len());
        (mode, self.sample_mode(mode, rng))
    }

    pub fn sample_mode<R: Rng + ?Sized>(&self, mode: usize, rng: &mut R) -> PoseParams {
        let normal = Normal::new(0.0, self.jitter.max(1e-12)).expect("finite jitter");
        let mut angles = self.modes[mode];
        for (a, &(lo, hi)) in angles.iter_mut().zip(&JOINT_LIMITS) {
            *a = (*a + normal.sample(rng)).clamp(lo, hi);
        }
        PoseParams { angles }
    }
}

/// Viewpoint: background tint, mirroring and a small translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub id: usize,
    pub tint: [u8; 3],
    pub flip: bool,
    pub dx: f64,
    pub dy: f64,
}

const CAMERA_TINTS: [[u8; 3]; 4] = [
    [200, 205, 210],
    [215, 200, 170],
    [170, 200, 180],
    [190, 180, 215],
];
const CAMERA_FLIP: [f64; 4] = [0.1, 0.3, 0.7, 0.9];

impl Camera {
    pub fn random<R: Rng + ?Sized>(id: usize, rng: &mut R) -> Self {
        let k = id % CAMERA_TINTS.len();
        Self {
            id,
            tint: jitter_color(rng, CAMERA_TINTS[k], 10),
            flip: rng.random_bool(CAMERA_FLIP[k]),
            dx: rng.random_range(-1.5..1.5),
            dy: rng.random_range(-1.0..1.0),
        }
    }

    /// Untinted-jitter, unflipped, centred view.
    pub fn fixed(id: usize) -> Self {
        Self {
            id,
            tint: CAMERA_TINTS[id % CAMERA_TINTS.len()],
            flip: false,
            dx: 0.0,
            dy: 0.0,
        }
    }
}

/// Body-part label per pixel, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl Mask {
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn is_garment(&self, y: usize, x: usize) -> bool {
        matches!(self.get(y, x), label::UPPER | label::LOWER)
    }

    fn flip_horizontal(&self) -> Mask {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.labels[y * self.width + self.width - 1 - x] = self.labels[y * self.width + x];
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub image: Image,
    pub skeleton: Skeleton,
    pub mask: Mask,
}

type P = (f64, f64);

fn add(a: P, b: P) -> P {
    (a.0 + b.0, a.1 + b.1)
}

fn mul(a: P, s: f64) -> P {
    (a.0 * s, a.1 * s)
}

/// Unit direction of a limb angle; `side` is -1 for the figure's left and
/// +1 for its right.
fn limb_dir(theta: f64, side: f64) -> P {
    (side * math::sin(theta), math::cos(theta))
}

fn seg_dist2(p: P, a: P, b: P) -> f64 {
    let ab = (b.0 - a.0, b.1 - a.1);
    let ap = (p.0 - a.0, p.1 - a.1);
    let len2 = ab.0 * ab.0 + ab.1 * ab.1;
    let t = if len2 > 0.0 {
        ((ap.0 * ab.0 + ap.1 * ab.1) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let d = (ap.0 - t * ab.0, ap.1 - t * ab.1);
    d.0 * d.0 + d.1 * d.1
}

struct Canvas {
    rgb: Vec<[u8; 3]>,
    labels: Vec<u8>,
}

impl Canvas {
    fn new(tint: [u8; 3]) -> Self {
        Self {
            rgb: vec![tint; CANVAS_H * CANVAS_W],
            labels: vec![label::BACKGROUND; CANVAS_H * CANVAS_W],
        }
    }

    fn paint(&mut self, inside: impl Fn(P) -> bool, color: [u8; 3], lab: u8) {
        for y in 0..CANVAS_H {
            for x in 0..CANVAS_W {
                if inside((x as f64 + 0.5, y as f64 + 0.5)) {
                    self.rgb[y * CANVAS_W + x] = color;
                    self.labels[y * CANVAS_W + x] = lab;
                }
            }
        }
    }

    fn capsule(&mut self, a: P, b: P, r: f64, color: [u8; 3], lab: u8) {
        self.paint(|p| seg_dist2(p, a, b) <= r * r, color, lab);
    }

    /// Convex polygon with vertices in order.
    fn polygon(&mut self, v: &[P], color: [u8; 3], lab: u8) {
        let inside = |p: P| {
            let mut sign = 0.0;
            for i in 0..v.len() {
                let (a, b) = (v[i], v[(i + 1) % v.len()]);
                let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
                if cross != 0.0 {
                    if sign == 0.0 {
                        sign = cross.signum();
                    } else if cross.signum() != sign {
                        return false;
                    }
                }
            }
            true
        };
        self.paint(inside, color, lab);
    }
}

pub const ARM_RADIUS: f64 = 1.6;
pub const FOREARM_RADIUS: f64 = 1.5;
pub const LEG_RADIUS: f64 = 2.0;
const HEAD_RADIUS: f64 = 3.2;
const NECK: f64 = 1.6;
const TORSO: f64 = 14.5;
const UPPER_ARM: f64 = 7.0;
const FOREARM: f64 = 6.5;
const THIGH: f64 = 11.0;
const SHIN: f64 = 10.5;
const HIP_Y: f64 = 32.0;
const PIXEL_NOISE: i32 = 6;

/// Joint positions of an unflipped figure.
fn layout(spec: &PersonSpec, pose: &PoseParams, camera: &Camera) -> [P; NUM_KEYPOINTS] {
    let a = &pose.angles;
    let hip_c = (CANVAS_W as f64 / 2.0 + camera.dx, HIP_Y + camera.dy);
    let up = (math::sin(a[0]), -math::cos(a[0]));
    let perp = (math::cos(a[0]), math::sin(a[0]));
    let sh_c = add(hip_c, mul(up, TORSO * spec.torso_scale));
    let head = add(sh_c, mul(up, NECK + HEAD_RADIUS));
    let l_sh = add(sh_c, mul(perp, -spec.shoulder_width / 2.0));
    let r_sh = add(sh_c, mul(perp, spec.shoulder_width / 2.0));
    let l_hip = add(hip_c, mul(perp, -spec.hip_width / 2.0));
    let r_hip = add(hip_c, mul(perp, spec.hip_width / 2.0));
    let ls = spec.limb_scale;
    let l_el = add(l_sh, mul(limb_dir(a[1], -1.0), UPPER_ARM * ls));
    let l_wr = add(l_el, mul(limb_dir(a[2], -1.0), FOREARM * ls));
    let r_el = add(r_sh, mul(limb_dir(a[3], 1.0), UPPER_ARM * ls));
    let r_wr = add(r_el, mul(limb_dir(a[4], 1.0), FOREARM * ls));
    let l_kn = add(l_hip, mul(limb_dir(a[5], -1.0), THIGH * ls));
    let l_an = add(l_kn, mul(limb_dir(a[6], -1.0), SHIN * ls));
    let r_kn = add(r_hip, mul(limb_dir(a[7], 1.0), THIGH * ls));
    let r_an = add(r_kn, mul(limb_dir(a[8], 1.0), SHIN * ls));
    let mut k = [(0.0, 0.0); NUM_KEYPOINTS];
    k[joint::NOSE] = add(head, mul(up, -0.6));
    k[joint::LEFT_EYE] = add(add(head, mul(perp, -1.2)), mul(up, 0.6));
    k[joint::RIGHT_EYE] = add(add(head, mul(perp, 1.2)), mul(up, 0.6));
    k[joint::LEFT_EAR] = add(head, mul(perp, -HEAD_RADIUS));
    k[joint::RIGHT_EAR] = add(head, mul(perp, HEAD_RADIUS));
    k[joint::LEFT_SHOULDER] = l_sh;
    k[joint::RIGHT_SHOULDER] = r_sh;
    k[joint::LEFT_ELBOW] = l_el;
    k[joint::RIGHT_ELBOW] = r_el;
    k[joint::LEFT_WRIST] = l_wr;
    k[joint::RIGHT_WRIST] = r_wr;
    k[joint::LEFT_HIP] = l_hip;
    k[joint::RIGHT_HIP] = r_hip;
    k[joint::LEFT_KNEE] = l_kn;
    k[joint::RIGHT_KNEE] = r_kn;
    k[joint::LEFT_ANKLE] = l_an;
    k[joint::RIGHT_ANKLE] = r_an;
    k
}

/// Left/right keypoint pairs, swapped under mirroring.
const MIRROR_PAIRS: [(usize, usize); 8] = [
    (1, 2),
    (3, 4),
    (5, 6),
    (7, 8),
    (9, 10),
    (11, 12),
    (13, 14),
    (15, 16),
];

/// Rasterizes one figure. The skeleton holds exact joint coordinates (pixel
/// `(x, y)` covers `[x, x+1) × [y, y+1)`) at confidence 1.
pub fn render<R: Rng + ?Sized>(
    spec: &PersonSpec,
    clothes: &Clothes,
    pose: &PoseParams,
    camera: &Camera,
    rng: &mut R,
) -> Result<Rendered> {
    pose.check_limits()?;
    let k = layout(spec, pose, camera);
    let margin = 1.0;
    for (j, &(x, y)) in k.iter().enumerate() {
        if x < margin || x > CANVAS_W as f64 - margin || y < margin || y > CANVAS_H as f64 - margin
        {
            return Err(RenderError::OffCanvas { joint: j, x, y });
        }
    }
    let head = add(k[joint::NOSE], (0.0, 0.0));
    let a0 = pose.angles[0];
    let up = (math::sin(a0), -math::cos(a0));
    let head = add(head, mul(up, 0.6));
    let sh_c = mul(add(k[joint::LEFT_SHOULDER], k[joint::RIGHT_SHOULDER]), 0.5);

    let mut c = Canvas::new(camera.tint);
    if spec.gender == FEMALE {
        // long hair hanging behind the head down to the shoulders
        let w = HEAD_RADIUS + 0.9;
        let top = add(head, mul(up, 0.5));
        let bottom = add(sh_c, mul(up, -2.5));
        c.capsule(top, bottom, w, spec.hair, label::SKIN);
    }
    for (hip, knee, ankle) in [
        (joint::LEFT_HIP, joint::LEFT_KNEE, joint::LEFT_ANKLE),
        (joint::RIGHT_HIP, joint::RIGHT_KNEE, joint::RIGHT_ANKLE),
    ] {
        c.capsule(k[hip], k[knee], LEG_RADIUS, clothes.lower, label::LOWER);
        c.capsule(k[knee], k[ankle], LEG_RADIUS, clothes.lower, label::LOWER);
    }
    let perp = (math::cos(a0), math::sin(a0));
    let pad = 1.2;
    c.polygon(
        &[
            add(k[joint::LEFT_SHOULDER], mul(perp, -pad)),
            add(k[joint::LEFT_HIP], mul(perp, -pad)),
            add(k[joint::RIGHT_HIP], mul(perp, pad)),
            add(k[joint::RIGHT_SHOULDER], mul(perp, pad)),
        ],
        clothes.upper,
        label::UPPER,
    );
    c.capsule(sh_c, head, 1.3, spec.skin, label::SKIN);
    c.capsule(head, head, HEAD_RADIUS, spec.skin, label::SKIN);
    // hair cap over the top of the head
    let hair = spec.hair;
    c.paint(
        |p| {
            let d = (p.0 - head.0, p.1 - head.1);
            d.0 * d.0 + d.1 * d.1 <= HEAD_RADIUS * HEAD_RADIUS && d.0 * up.0 + d.1 * up.1 > 1.0
        },
        hair,
        label::SKIN,
    );
    for (sh, el) in [
        (joint::LEFT_SHOULDER, joint::LEFT_ELBOW),
        (joint::RIGHT_SHOULDER, joint::RIGHT_ELBOW),
    ] {
        c.capsule(k[sh], k[el], ARM_RADIUS, clothes.upper, label::UPPER);
    }
    for (el, wr) in [
        (joint::LEFT_ELBOW, joint::LEFT_WRIST),
        (joint::RIGHT_ELBOW, joint::RIGHT_WRIST),
    ] {
        c.capsule(k[el], k[wr], FOREARM_RADIUS, spec.skin, label::SKIN);
    }

    let mut data = Vec::with_capacity(CANVAS_H * CANVAS_W * 3);
    for px in &c.rgb {
        for &v in px {
            let n = rng.random_range(-PIXEL_NOISE..=PIXEL_NOISE);
            data.push((v as i32 + n).clamp(0, 255) as u8);
        }
    }
    let mut image = Image::new(CANVAS_H, CANVAS_W, data).expect("canvas size");
    let mut mask = Mask {
        height: CANVAS_H,
        width: CANVAS_W,
        labels: c.labels,
    };
    let mut keypoints = [[0.0; 3]; NUM_KEYPOINTS];
    for (kp, &(x, y)) in keypoints.iter_mut().zip(&k) {
        *kp = [x, y, 1.0];
    }
    if camera.flip {
        image = image.flip_horizontal();
        mask = mask.flip_horizontal();
        for kp in keypoints.iter_mut() {
            kp[0] = CANVAS_W as f64 - kp[0];
        }
        for (l, r) in MIRROR_PAIRS {
            keypoints.swap(l, r);
        }
    }
    Ok(Rendered {
        image,
        skeleton: Skeleton { keypoints },
        mask,
    })
}

/// Hands out clothes labels that have not been used before.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClothesLabeler {
    next: usize,
}

impl ClothesLabeler {
    /// Starts after the `existing` labels already in use.
    pub fn new(existing: usize) -> Self {
        Self { next: existing }
    }

    pub fn fresh(&mut self) -> usize {
        let id = self.next;
        self.next += 1;
        id
    }
}

/// Recolors upper and lower garment pixels with fresh flat colors and
/// allocates a new clothes label. Skin and background are untouched.
pub fn clothes_augment<R: Rng + ?Sized>(
    img: &Image,
    mask: &Mask,
    rng: &mut R,
    labeler: &mut ClothesLabeler,
) -> Result<(Image, usize)> {
    if mask.height != img.height() || mask.width != img.width() {
        return Err(RenderError::MaskMismatch {
            mask_h: mask.height,
            mask_w: mask.width,
            img_h: img.height(),
            img_w: img.width(),
        });
    }
    // A new color must differ from every pixel it replaces, so the changed
    // pixel set is exactly the garment set.
    let pick = |rng: &mut R, lab: u8| -> [u8; 3] {
        loop {
            let c = random_garment(rng);
            let clash = (0..img.height())
                .any(|y| (0..img.width()).any(|x| mask.get(y, x) == lab && img.pixel(y, x) == c));
            if !clash {
                return c;
            }
        }
    };
    let upper = pick(rng, label::UPPER);
    let lower = pick(rng, label::LOWER);
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            match mask.get(y, x) {
                label::UPPER => out.set_pixel(y, x, upper),
                label::LOWER => out.set_pixel(y, x, lower),
                _ => {}
            }
        }
    }
    Ok((out, labeler.fresh()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Hq,
    Lq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

/// One image of the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub identity: usize,
    pub clothes: usize,
    pub camera: usize,
    pub gender: u8,
    pub pose_mode: usize,
    pub pose: PoseParams,
    pub tier: Tier,
    pub artifact: Artifact,
    pub split: Split,
    /// Index of the HQ original; equals the record's own index for HQ.
    pub source: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub ids: usize,
    pub clothes_per_id: usize,
    pub images_per_clothes: usize,
    pub cameras: usize,
    /// Images per (identity, clothes) of a test identity that become queries.
    pub queries_per_clothes: usize,
    /// Fraction of identities used for training; the rest are test.
    pub train_fraction: f64,
    /// Artifact policy of the LQ tier; its apply probability is forced to 1.
    pub lq_policy: ArtifactPolicy,
    pub pose_sampler: PoseSampler,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            ids: 40,
            clothes_per_id: 3,
            images_per_clothes: 10,
            cameras: DEFAULT_CAMERAS,
            queries_per_clothes: 3,
            train_fraction: 0.5,
            lq_policy: ArtifactPolicy::default(),
            pose_sampler: PoseSampler::default(),
        }
    }
}

impl DatasetConfig {
    pub fn num_train_ids(&self) -> usize {
        math::round(self.ids as f64 * self.train_fraction) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.ids < 4 {
            return Err(RenderError::TooFewIds(self.ids));
        }
        if self.clothes_per_id < 2 {
            return Err(RenderError::CcSplitImpossible);
        }
        if self.num_train_ids() < self.ids && self.images_per_clothes <= self.queries_per_clothes {
            return Err(RenderError::TooFewImages {
                needed: self.queries_per_clothes + 1,
                got: self.images_per_clothes,
            });
        }
        self.lq_policy.validate()?;
        Ok(())
    }
}

/// Records with their pixels and ground truth, index-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<Record>,
    pub images: Vec<Image>,
    pub skeletons: Vec<Skeleton>,
    pub masks: Vec<Mask>,
    pub persons: Vec<PersonSpec>,
}

impl Dataset {
    pub fn indices(&self, split: Split, tier: Tier) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].split == split && self.records[i].tier == tier)
            .collect()
    }

    pub fn num_clothes(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.clothes + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn num_ids(&self) -> usize {
        self.persons.len()
    }
}

const MAX_POSE_TRIES: usize = 64;

/// Renders every HQ image, then an LQ twin of each through the artifact
/// policy. Identities `0..num_train_ids` are training identities; for the
/// others the first `queries_per_clothes` images of each outfit are queries
/// and the rest gallery.
pub fn generate_dataset(config: &DatasetConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let persons: Vec<PersonSpec> = (0..config.ids)
        .map(|id| PersonSpec::random(id, &mut substream(seed, tag::IDENTITY, id as u64)))
        .collect();
    let n_train = config.num_train_ids();
    let mut records = Vec::new();
    let mut images = Vec::new();
    let mut skeletons = Vec::new();
    let mut masks = Vec::new();
    for (id, person) in persons.iter().enumerate() {
        for c in 0..config.clothes_per_id {
            let clothes_id = id * config.clothes_per_id + c;
            let clothes = Clothes::random(&mut substream(seed, tag::CLOTHES, clothes_id as u64));
            for n in 0..config.images_per_clothes {
                let index = records.len();
                let mut rng = substream(seed, tag::SAMPLE, index as u64);
                let camera = Camera::random(rng.random_range(0..config.cameras), &mut rng);
                let mut last_err = None;
                let mut done = None;
                for _ in 0..MAX_POSE_TRIES {
                    let (mode, pose) = config.pose_sampler.sample(&mut rng);
                    match render(person, &clothes, &pose, &camera, &mut rng) {
                        Ok(r) => {
                            done = Some((mode, pose, r));
                            break;
                        }
                        Err(e) => last_err = Some(e),
                    }
                }
                let Some((mode, pose, r)) = done else {
                    return Err(last_err.expect("at least one attempt"));
                };
                let split = if id < n_train {
                    Split::Train
                } else if n < config.queries_per_clothes {
                    Split::Query
                } else {
                    Split::Gallery
                };
                records.push(Record {
                    identity: id,
                    clothes: clothes_id,
                    camera: camera.id,
                    gender: person.gender,
                    pose_mode: mode,
                    pose,
                    tier: Tier::Hq,
                    artifact: Artifact::None,
                    split,
                    source: index,
                });
                images.push(r.image);
                skeletons.push(r.skeleton);
                masks.push(r.mask);
            }
        }
    }
    let policy = config.lq_policy.always();
    let n_hq = records.len();
    for i in 0..n_hq {
        let mut rng = substream(seed ^ policy.rng_seed, tag::DEGRADE, i as u64);
        let (img, artifact) = degrade::apply_policy(&images[i], &policy, &mut rng)?;
        let mut rec = records[i].clone();
        rec.tier = Tier::Lq;
        rec.artifact = artifact;
        records.push(rec);
        images.push(img);
        skeletons.push(skeletons[i].clone());
        masks.push(masks[i].clone());
    }
    Ok(Dataset {
        records,
        images,
        skeletons,
        masks,
        persons,
    })
}
