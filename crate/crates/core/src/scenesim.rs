//! Synthetic driving scenes with exact ground truth.
//!
//! The world is a flat ground plane seen by a forward-looking pinhole camera mounted on the
//! camera car, which sits at the origin of its own frame (`x` forward, `y` left, `z` up).
//! Each frame holds one traffic sign and one patch car carrying a screen on its right-hand
//! side. Rendering is a pure function of the frame specification, so any frame can be
//! re-rendered later with a patch on the screen.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Quad, WarpPlan};
use crate::par::Exec;
use crate::raster::Image;

/// Detector classes. Signs come first; `Car` is the patch car.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Stop,
    GoStraight,
    Turn,
    Pedestrian,
    Car,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 5] = [
        ObjectClass::Stop,
        ObjectClass::GoStraight,
        ObjectClass::Turn,
        ObjectClass::Pedestrian,
        ObjectClass::Car,
    ];

    /// The three non-restrictive signs an attacker tries to turn into a stop sign.
    pub const ATTACKED_SIGNS: [ObjectClass; 3] = [
        ObjectClass::GoStraight,
        ObjectClass::Turn,
        ObjectClass::Pedestrian,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn is_sign(self) -> bool {
        self != ObjectClass::Car
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Stop => "stop",
            ObjectClass::GoStraight => "go_straight",
            ObjectClass::Turn => "turn",
            ObjectClass::Pedestrian => "pedestrian",
            ObjectClass::Car => "car",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            ObjectClass::Stop => "Stop",
            ObjectClass::GoStraight => "Go-straight",
            ObjectClass::Turn => "Turn",
            ObjectClass::Pedestrian => "Pedestrian",
            ObjectClass::Car => "Car",
        }
    }
}

/// Planar pose in the camera-car frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    /// Radians in `[-pi, pi)`.
    pub heading: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, heading: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && heading.is_finite()) {
            return Err(Error::validation("pose must be finite"));
        }
        Ok(Self {
            x,
            y,
            heading: wrap_angle(heading),
        })
    }

    pub fn origin() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            heading: 0.0,
        }
    }

    pub fn distance_to(&self, other: &Pose2D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.heading.is_finite()
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        -PI
    } else {
        w
    }
}

/// Display-to-capture color transform of the screen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhotometricModel {
    pub gain: [f64; 3],
    pub bias: [f64; 3],
    pub gamma: f64,
    /// Box-blur radius in pixels; 0 disables blurring.
    pub blur_radius: usize,
    /// Half-width of the uniform noise added after blurring.
    pub noise_amplitude: f64,
    pub seed: u64,
}

impl Default for PhotometricModel {
    fn default() -> Self {
        Self {
            gain: [0.82, 0.9, 1.12],
            bias: [0.06, 0.02, -0.04],
            gamma: 1.35,
            blur_radius: 1,
            noise_amplitude: 0.01,
            seed: 17,
        }
    }
}

impl PhotometricModel {
    pub fn identity() -> Self {
        Self {
            gain: [1.0; 3],
            bias: [0.0; 3],
            gamma: 1.0,
            blur_radius: 0,
            noise_amplitude: 0.0,
            seed: 0,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self
            .gain
            .iter()
            .chain(&self.bias)
            .chain([&self.gamma, &self.noise_amplitude])
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::validation("photometric parameters must be finite"));
        }
        if self.gain.iter().any(|g| *g <= 0.0) {
            return Err(Error::validation("photometric gains must be positive"));
        }
        if self.gamma <= 0.0 {
            return Err(Error::validation("photometric gamma must be positive"));
        }
        if self.noise_amplitude < 0.0 {
            return Err(Error::validation("noise amplitude must be non-negative"));
        }
        Ok(())
    }
}

/// Applies gain and bias, gamma, box blur, seeded noise and clipping, in that order.
pub fn apply_photometric(model: &PhotometricModel, image: &Image) -> Result<Image> {
    model.validate()?;
    image.validate_unit_range("photometric input")?;
    if image.channels != 3 {
        return Err(Error::shape("3 channels", image.channels));
    }
    let mut out = image.clone();
    for c in 0..3 {
        let (g, b) = (model.gain[c], model.bias[c]);
        for v in out.plane_mut(c) {
            *v = (g * *v + b).max(0.0).powf(model.gamma);
        }
    }
    if model.blur_radius > 0 {
        out = box_blur(&out, model.blur_radius);
    }
    if model.noise_amplitude > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
        let a = model.noise_amplitude;
        for v in &mut out.data {
            *v += rng.random_range(-a..=a);
        }
    }
    out.clamp_unit();
    Ok(out)
}

/// Separable box blur with edge replication.
fn box_blur(img: &Image, r: usize) -> Image {
    let (h, w) = (img.height, img.width);
    let n = (2 * r + 1) as f64;
    let mut tmp = img.clone();
    let mut out = img.clone();
    for c in 0..img.channels {
        let src = img.plane(c);
        let t = tmp.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for d in -(r as isize)..=(r as isize) {
                    let xx = (x as isize + d).clamp(0, w as isize - 1) as usize;
                    s += src[y * w + xx];
                }
                t[y * w + x] = s / n;
            }
        }
        let t = tmp.plane(c);
        let o = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for d in -(r as isize)..=(r as isize) {
                    let yy = (y as isize + d).clamp(0, h as isize - 1) as usize;
                    s += t[yy * w + x];
                }
                o[y * w + x] = s / n;
            }
        }
    }
    out
}

/// Fixed scene geometry and appearance. Lengths are meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    /// Side of the square frame in pixels; equals the detector input size.
    pub image_size: usize,
    pub sign_classes: Vec<ObjectClass>,
    pub car_length: f64,
    pub car_width: f64,
    pub car_height: f64,
    pub car_clearance: f64,
    pub screen_width: f64,
    pub screen_height: f64,
    /// Height of the screen center above ground.
    pub screen_center_height: f64,
    /// Offset of the screen center along the car's heading, from the car center.
    pub screen_forward_offset: f64,
    /// Native pixel grid of the screen (square).
    pub screen_resolution: usize,
    pub sign_size: f64,
    pub sign_center_height: f64,
    pub camera_height: f64,
    /// Focal length as a multiple of the image side.
    pub focal_ratio: f64,
    pub calibration_blue: [f64; 3],
    pub sensor_noise: f64,
    pub pose_noise_std: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            sign_classes: vec![
                ObjectClass::GoStraight,
                ObjectClass::Turn,
                ObjectClass::Pedestrian,
                ObjectClass::Stop,
            ],
            car_length: 0.8,
            car_width: 0.4,
            car_height: 0.45,
            car_clearance: 0.05,
            screen_width: 0.64,
            screen_height: 0.36,
            screen_center_height: 0.26,
            screen_forward_offset: 0.0,
            screen_resolution: 64,
            sign_size: 0.3,
            sign_center_height: 0.45,
            camera_height: 0.2,
            focal_ratio: 1.0,
            calibration_blue: [0.0, 0.0, 1.0],
            sensor_noise: 0.01,
            pose_noise_std: 0.02,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.car_length,
            self.car_width,
            self.car_height,
            self.screen_width,
            self.screen_height,
            self.sign_size,
            self.camera_height,
            self.focal_ratio,
        ];
        if self.image_size < 16 || dims.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::validation("scene dimensions must be positive"));
        }
        if self.screen_resolution == 0 {
            return Err(Error::validation("screen resolution must be positive"));
        }
        if self.sign_classes.iter().any(|c| !c.is_sign()) {
            return Err(Error::validation("sign classes may not include `car`"));
        }
        if !self.sign_classes.iter().any(|c| *c != ObjectClass::Stop) {
            return Err(Error::validation(
                "at least one non-stop sign class must be enabled",
            ));
        }
        if self.pose_noise_std < 0.0 || self.sensor_noise < 0.0 {
            return Err(Error::validation("noise levels must be non-negative"));
        }
        Ok(())
    }

    fn camera(&self) -> PinholeCamera {
        let s = self.image_size as f64;
        PinholeCamera {
            focal: self.focal_ratio * s,
            cx: s / 2.0,
            cy: s / 2.0,
            height: self.camera_height,
        }
    }
}

struct PinholeCamera {
    focal: f64,
    cx: f64,
    cy: f64,
    height: f64,
}

const NEAR_PLANE: f64 = 0.05;

impl PinholeCamera {
    /// Projects a world point `(x, y, z)` seen from `camera`; `None` behind the near plane.
    fn project(&self, camera: &Pose2D, p: [f64; 3]) -> Option<[f64; 2]> {
        let (dx, dy) = (p[0] - camera.x, p[1] - camera.y);
        let (s, c) = camera.heading.sin_cos();
        let fwd = c * dx + s * dy;
        let left = -s * dx + c * dy;
        if fwd <= NEAR_PLANE {
            return None;
        }
        Some([
            self.cx - self.focal * left / fwd,
            self.cy - self.focal * (p[2] - self.height) / fwd,
        ])
    }

    fn depth(&self, camera: &Pose2D, p: [f64; 2]) -> f64 {
        let (s, c) = camera.heading.sin_cos();
        c * (p[0] - camera.x) + s * (p[1] - camera.y)
    }
}

/// World-space screen corners (top-left, top-right, bottom-right, bottom-left as seen
/// from the front), and whether the front face points toward the camera.
fn screen_corners_world(camera: &Pose2D, car: &Pose2D, cfg: &SceneConfig) -> ([[f64; 3]; 4], bool) {
    let (s, c) = car.heading.sin_cos();
    let fwd = [c, s];
    // Right-hand side of the car; the screen faces outward along it.
    let normal = [s, -c];
    let center = [
        car.x + cfg.screen_forward_offset * fwd[0] + 0.5 * cfg.car_width * normal[0],
        car.y + cfg.screen_forward_offset * fwd[1] + 0.5 * cfg.car_width * normal[1],
    ];
    let to_cam = [camera.x - center[0], camera.y - center[1]];
    let facing = normal[0] * to_cam[0] + normal[1] * to_cam[1] > 1e-9;
    // Seen from the front of a right-side screen, the car's forward direction points left.
    let hw = 0.5 * cfg.screen_width;
    let (zt, zb) = (
        cfg.screen_center_height + 0.5 * cfg.screen_height,
        cfg.screen_center_height - 0.5 * cfg.screen_height,
    );
    let left = [center[0] + hw * fwd[0], center[1] + hw * fwd[1]];
    let right = [center[0] - hw * fwd[0], center[1] - hw * fwd[1]];
    (
        [
            [left[0], left[1], zt],
            [right[0], right[1], zt],
            [right[0], right[1], zb],
            [left[0], left[1], zb],
        ],
        facing,
    )
}

/// Image-space quad of the patch car's screen, or `None` when it faces away from the
/// camera or lies outside the view frustum.
pub fn screen_quad(camera: &Pose2D, patch_car: &Pose2D, config: &SceneConfig) -> Option<Quad> {
    if !camera.is_finite() || !patch_car.is_finite() {
        return None;
    }
    let cam = config.camera();
    let (corners, facing) = screen_corners_world(camera, patch_car, config);
    if !facing {
        return None;
    }
    let mut pts = [[0.0; 2]; 4];
    for (p, w) in pts.iter_mut().zip(&corners) {
        *p = cam.project(camera, *w)?;
    }
    let quad = Quad::new(pts).ok()?;
    let s = config.image_size as f64;
    quad.bounds().clip(s, s)?;
    Some(quad)
}

/// Everything needed to render one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameSpec {
    pub seed: u64,
    pub background_seed: u64,
    pub camera: Pose2D,
    pub patch_car: Pose2D,
    pub sign: Pose2D,
    pub sign_class: ObjectClass,
}

/// Poses as a localization stack would report them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasuredPoses {
    pub camera: Pose2D,
    pub patch_car: Pose2D,
    pub sign: Pose2D,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Intersection,
    LaneChange,
}

/// One synchronized observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    #[serde(skip)]
    pub image: Image,
    pub spec: FrameSpec,
    pub measured: MeasuredPoses,
    pub layout: Option<Layout>,
    pub screen_quad: Option<Quad>,
    pub sign_box: Option<BBox>,
    pub car_box: Option<BBox>,
    /// Screen pixels (flat plane indices, ascending) hidden behind a nearer sign.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub screen_occlusion: Vec<usize>,
    pub cluster_id: Option<usize>,
}

impl FrameRecord {
    pub fn sign_visible(&self) -> bool {
        self.sign_box.is_some()
    }

    /// Ground-truth objects as `(class, box)` pairs.
    pub fn objects(&self) -> Vec<(ObjectClass, BBox)> {
        let mut v = Vec::new();
        if let Some(b) = self.sign_box {
            v.push((self.spec.sign_class, b));
        }
        if let Some(b) = self.car_box {
            v.push((ObjectClass::Car, b));
        }
        v
    }
}

/// SplitMix64 finalizer; derives independent sub-seeds from a base seed and a tag.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn render_background(cfg: &SceneConfig, background_seed: u64, frame_seed: u64) -> Image {
    let n = cfg.image_size;
    let cam = cfg.camera();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(background_seed, 1));
    let sky_top = [
        rng.random_range(0.45..0.65),
        rng.random_range(0.6..0.75),
        rng.random_range(0.8..0.95),
    ];
    let sky_low = [
        rng.random_range(0.75..0.9),
        rng.random_range(0.78..0.9),
        rng.random_range(0.8..0.9),
    ];
    let ground = [
        rng.random_range(0.35..0.5),
        rng.random_range(0.4..0.55),
        rng.random_range(0.3..0.42),
    ];
    let road = [
        rng.random_range(0.3..0.4),
        rng.random_range(0.3..0.4),
        rng.random_range(0.32..0.42),
    ];
    // Coarse value-noise lattice for ground texture.
    const G: usize = 12;
    let lattice: Vec<f64> = (0..G * G).map(|_| rng.random_range(-0.07..0.07)).collect();
    let horizon = cam.cy;
    let mut img = Image::zeros(3, n, n);
    for y in 0..n {
        let yc = y as f64 + 0.5;
        for x in 0..n {
            let xc = x as f64 + 0.5;
            let rgb = if yc < horizon {
                let t = (yc / horizon).clamp(0.0, 1.0);
                [0, 1, 2].map(|c| sky_top[c] * (1.0 - t) + sky_low[c] * t)
            } else {
                let gx = xc / n as f64 * (G - 1) as f64;
                let gy = yc / n as f64 * (G - 1) as f64;
                let (ix, iy) = ((gx as usize).min(G - 2), (gy as usize).min(G - 2));
                let (ax, ay) = (gx - ix as f64, gy - iy as f64);
                let l = |i: usize, j: usize| lattice[j * G + i];
                let tex = (1.0 - ax) * (1.0 - ay) * l(ix, iy)
                    + ax * (1.0 - ay) * l(ix + 1, iy)
                    + (1.0 - ax) * ay * l(ix, iy + 1)
                    + ax * ay * l(ix + 1, iy + 1);
                // The camera car's own lane, 0.7 m wide, converging at the horizon.
                let depth = cam.focal * cam.height / (yc - horizon).max(1e-6);
                let half = cam.focal * 0.35 / depth;
                let base = if (xc - cam.cx).abs() < half { road } else { ground };
                base.map(|v| v + tex)
            };
            img.set_pixel(y, x, rgb);
        }
    }
    // Buildings and vegetation standing on the horizon.
    let count = rng.random_range(3..8);
    for _ in 0..count {
        let w = rng.random_range(0.08..0.3) * n as f64;
        let x0 = rng.random_range(-0.1..1.0) * n as f64;
        let h = rng.random_range(0.05..0.3) * n as f64;
        let shade = rng.random_range(0.3..0.65);
        let tint = [
            shade + rng.random_range(-0.05..0.08),
            shade + rng.random_range(-0.05..0.05),
            shade + rng.random_range(-0.08..0.03),
        ];
        let (ya, yb) = ((horizon - h).max(0.0) as usize, horizon as usize);
        for y in ya..yb.min(n) {
            for x in (x0.max(0.0) as usize)..((x0 + w).min(n as f64) as usize) {
                img.set_pixel(y, x, tint);
            }
        }
    }
    if cfg.sensor_noise > 0.0 {
        let mut nrng = ChaCha8Rng::seed_from_u64(derive_seed(frame_seed, 2));
        let a = cfg.sensor_noise;
        for v in &mut img.data {
            *v += nrng.random_range(-a..=a);
        }
    }
    img.clamp_unit();
    img
}

/// Color of the sign plate at offset `(dx, dy)` from its center, for plate radius `r`;
/// `None` outside the plate.
fn glyph_color(class: ObjectClass, dx: f64, dy: f64, r: f64) -> Option<[f64; 3]> {
    const WHITE: [f64; 3] = [0.95, 0.95, 0.95];
    match class {
        ObjectClass::Stop => {
            let a = r * (PI / 8.0).cos();
            let inside = dx.abs() <= a && dy.abs() <= a && dx.abs() + dy.abs() <= a * 2f64.sqrt();
            if !inside {
                return None;
            }
            let bar = dy.abs() < 0.2 * a && dx.abs() < 0.65 * a;
            Some(if bar { WHITE } else { [0.82, 0.08, 0.1] })
        }
        ObjectClass::GoStraight => {
            if dx * dx + dy * dy > r * r {
                return None;
            }
            let shaft = dx.abs() < 0.16 * r && (-0.25 * r..=0.65 * r).contains(&dy);
            let head = (-0.7 * r..-0.25 * r).contains(&dy) && dx.abs() <= (dy + 0.7 * r);
            Some(if shaft || head { WHITE } else { [0.1, 0.3, 0.85] })
        }
        ObjectClass::Turn => {
            let a = 0.88 * r;
            if dx.abs() > a || dy.abs() > a {
                return None;
            }
            let shaft = (-0.45 * r..-0.15 * r).contains(&dx) && (-0.3 * r..0.7 * r).contains(&dy);
            let bar = (-0.45 * r..0.25 * r).contains(&dx) && (-0.45 * r..-0.15 * r).contains(&dy);
            let head = (0.25 * r..0.7 * r).contains(&dx)
                && (dy + 0.3 * r).abs() <= 0.4 * r * (0.7 * r - dx) / (0.45 * r);
            Some(if shaft || bar || head { WHITE } else { [0.0, 0.55, 0.55] })
        }
        ObjectClass::Pedestrian => {
            if dy > 0.75 * r || dx.abs() > 0.95 * r * (dy + r) / (1.75 * r) {
                return None;
            }
            let head = dx * dx + (dy + 0.12 * r).powi(2) < (0.14 * r).powi(2);
            let body = dx.abs() < 0.08 * r && (0.0..0.5 * r).contains(&dy);
            Some(if head || body { [0.1, 0.1, 0.1] } else { [0.95, 0.8, 0.1] })
        }
        ObjectClass::Car => None,
    }
}

/// Draws the sign plate and pole; returns the tight pixel bounds of the plate.
fn draw_sign(
    img: &mut Image,
    cfg: &SceneConfig,
    camera: &Pose2D,
    sign: &Pose2D,
    class: ObjectClass,
    drawn: &mut Vec<usize>,
) -> Option<BBox> {
    let cam = cfg.camera();
    let center = cam.project(camera, [sign.x, sign.y, cfg.sign_center_height])?;
    let depth = cam.depth(camera, [sign.x, sign.y]);
    let r = 0.5 * cam.focal * cfg.sign_size / depth;
    let n = img.width as isize;

    if let Some(foot) = cam.project(camera, [sign.x, sign.y, 0.0]) {
        let half = (0.5 * cam.focal * 0.03 / depth).max(0.5);
        let (x0, x1) = ((center[0] - half).floor() as isize, (center[0] + half).ceil() as isize);
        let (y0, y1) = (center[1] as isize, foot[1].ceil() as isize);
        for y in y0.max(0)..y1.min(n) {
            for x in x0.max(0)..x1.min(n) {
                img.set_pixel(y as usize, x as usize, [0.55, 0.55, 0.55]);
                drawn.push(y as usize * img.width + x as usize);
            }
        }
    }

    let (x0, x1) = ((center[0] - r).floor() as isize, (center[0] + r).ceil() as isize);
    let (y0, y1) = ((center[1] - r).floor() as isize, (center[1] + r).ceil() as isize);
    let mut bounds: Option<[usize; 4]> = None;
    for y in y0.max(0)..(y1 + 1).min(n) {
        for x in x0.max(0)..(x1 + 1).min(n) {
            let dx = x as f64 + 0.5 - center[0];
            let dy = y as f64 + 0.5 - center[1];
            if let Some(rgb) = glyph_color(class, dx, dy, r) {
                let (x, y) = (x as usize, y as usize);
                img.set_pixel(y, x, rgb);
                drawn.push(y * img.width + x);
                bounds = Some(match bounds {
                    None => [x, y, x, y],
                    Some(b) => [b[0].min(x), b[1].min(y), b[2].max(x), b[3].max(y)],
                });
            }
        }
    }
    bounds.map(|b| BBox {
        x_min: b[0] as f64,
        y_min: b[1] as f64,
        x_max: (b[2] + 1) as f64,
        y_max: (b[3] + 1) as f64,
    })
}

fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Projected convex hull of the patch car body and its unclipped pixel bounds.
fn car_outline(cfg: &SceneConfig, camera: &Pose2D, car: &Pose2D) -> Option<(Vec<[f64; 2]>, [f64; 4])> {
    let cam = cfg.camera();
    let (s, c) = car.heading.sin_cos();
    let (hl, hw) = (0.5 * cfg.car_length, 0.5 * cfg.car_width);
    let mut pts = Vec::with_capacity(8);
    for (a, b) in [(hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw)] {
        let wx = car.x + a * c - b * s;
        let wy = car.y + a * s + b * c;
        for z in [cfg.car_clearance, cfg.car_height] {
            pts.push(cam.project(camera, [wx, wy, z])?);
        }
    }
    let hull = convex_hull(pts);
    let bounds = hull.iter().fold(
        [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY],
        |b, p| [b[0].min(p[0]), b[1].min(p[1]), b[2].max(p[0]), b[3].max(p[1])],
    );
    Some((hull, bounds))
}

/// Fills the patch car body; returns its clipped pixel bounds.
fn draw_car(img: &mut Image, cfg: &SceneConfig, camera: &Pose2D, car: &Pose2D) -> Option<BBox> {
    let (hull, bounds) = car_outline(cfg, camera, car)?;
    let n = img.width;
    let clip = BBox {
        x_min: bounds[0],
        y_min: bounds[1],
        x_max: bounds[2],
        y_max: bounds[3],
    }
    .clip(n as f64, n as f64)?;
    let inside = |p: [f64; 2]| {
        (0..hull.len()).all(|i| {
            let a = hull[i];
            let b = hull[(i + 1) % hull.len()];
            (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0
        })
    };
    let mut drawn: Option<[usize; 4]> = None;
    let body = [0.2, 0.21, 0.24];
    let wheel = [0.05, 0.05, 0.05];
    let wheel_line = bounds[3] - 0.12 * (bounds[3] - bounds[1]);
    for y in clip.y_min.floor() as usize..(clip.y_max.ceil() as usize).min(n) {
        for x in clip.x_min.floor() as usize..(clip.x_max.ceil() as usize).min(n) {
            let p = [x as f64 + 0.5, y as f64 + 0.5];
            if inside(p) {
                img.set_pixel(y, x, if p[1] > wheel_line { wheel } else { body });
                drawn = Some(match drawn {
                    None => [x, y, x, y],
                    Some(b) => [b[0].min(x), b[1].min(y), b[2].max(x), b[3].max(y)],
                });
            }
        }
    }
    drawn.map(|b| BBox {
        x_min: b[0] as f64,
        y_min: b[1] as f64,
        x_max: (b[2] + 1) as f64,
        y_max: (b[3] + 1) as f64,
    })
}

/// Renders one frame. With `patch = None` the screen shows the calibration blue; with a
/// patch, the ground-truth photometric model is applied to it (seeded per frame) before it
/// is warped onto the screen quad. Output pixels are quantized to 8-bit levels.
pub fn render_frame(
    config: &SceneConfig,
    photometric: &PhotometricModel,
    spec: &FrameSpec,
    patch: Option<&Image>,
) -> Result<FrameRecord> {
    config.validate()?;
    if !spec.sign_class.is_sign() || !config.sign_classes.contains(&spec.sign_class) {
        return Err(Error::validation(format!(
            "sign class `{}` is not enabled",
            spec.sign_class.name()
        )));
    }
    if !(spec.camera.is_finite() && spec.patch_car.is_finite() && spec.sign.is_finite()) {
        return Err(Error::validation("poses must be finite"));
    }
    if let Some(p) = patch {
        if p.channels != 3 || p.height != config.screen_resolution || p.width != config.screen_resolution {
            return Err(Error::shape(
                format!("3x{0}x{0} patch", config.screen_resolution),
                p.shape_string(),
            ));
        }
        p.validate_unit_range("patch")?;
    }

    let mut img = render_background(config, spec.background_seed, spec.seed);
    let cam = config.camera();
    let sign_depth = cam.depth(&spec.camera, [spec.sign.x, spec.sign.y]);
    let car_depth = cam.depth(&spec.camera, [spec.patch_car.x, spec.patch_car.y]);

    let sign_box;
    let mut car_box = None;
    let mut quad = None;
    let mut draw_car_and_screen = |img: &mut Image| -> Result<()> {
        car_box = draw_car(img, config, &spec.camera, &spec.patch_car);
        if car_box.is_none() {
            return Ok(());
        }
        quad = screen_quad(&spec.camera, &spec.patch_car, config);
        if let Some(q) = &quad {
            let res = config.screen_resolution;
            let content = match patch {
                Some(p) => apply_photometric(&photometric.with_seed(derive_seed(photometric.seed, spec.seed)), p)?,
                None => Image::solid(res, res, config.calibration_blue),
            };
            let plan = WarpPlan::new(q, img.height, img.width, res, res)?;
            plan.composite_into(img, &content);
        }
        Ok(())
    };
    let mut sign_pixels = Vec::new();
    let sign_in_front = sign_depth < car_depth;
    if sign_in_front {
        draw_car_and_screen(&mut img)?;
        sign_box = draw_sign(&mut img, config, &spec.camera, &spec.sign, spec.sign_class, &mut sign_pixels);
    } else {
        sign_box = draw_sign(&mut img, config, &spec.camera, &spec.sign, spec.sign_class, &mut sign_pixels);
        draw_car_and_screen(&mut img)?;
    }
    let mut screen_occlusion = Vec::new();
    if let (true, Some(q)) = (sign_in_front, &quad) {
        let res = config.screen_resolution;
        let plan = WarpPlan::new(q, img.height, img.width, res, res)?;
        sign_pixels.sort_unstable();
        sign_pixels.dedup();
        screen_occlusion = plan.covered().filter(|p| sign_pixels.binary_search(p).is_ok()).collect();
        screen_occlusion.sort_unstable();
    }
    img.clamp_unit();
    img.quantize_8bit();

    Ok(FrameRecord {
        image: img,
        spec: spec.clone(),
        measured: MeasuredPoses {
            camera: spec.camera,
            patch_car: spec.patch_car,
            sign: spec.sign,
        },
        layout: None,
        screen_quad: quad,
        sign_box,
        car_box,
        screen_occlusion,
        cluster_id: None,
    })
}

/// Re-renders a recorded frame with `patch` on its screen.
pub fn rerender_with_patch(
    config: &SceneConfig,
    photometric: &PhotometricModel,
    frame: &FrameRecord,
    patch: &Image,
) -> Result<Image> {
    Ok(render_frame(config, photometric, &frame.spec, Some(patch))?.image)
}

/// How approach trajectories are sampled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectorySpec {
    /// Camera-to-object distances (both patch car and sign) stay within this range.
    pub distance_range: [f64; 2],
    pub layouts: Vec<Layout>,
    pub sign_classes: Vec<ObjectClass>,
    pub background_seeds: Vec<u64>,
    /// Lateral offset of the sign to the right of the camera's lane center.
    pub sign_lateral_range: [f64; 2],
    pub frames_per_episode: usize,
    /// Frames whose screen covers fewer pixels are discarded.
    pub min_screen_area: f64,
    /// Minimum pixel gap between the sign plate and a car standing in front of it.
    pub min_sign_gap: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            distance_range: [1.2, 4.0],
            layouts: vec![Layout::Intersection, Layout::LaneChange],
            sign_classes: ObjectClass::ATTACKED_SIGNS.to_vec(),
            background_seeds: (0..6).collect(),
            sign_lateral_range: [0.3, 0.45],
            frames_per_episode: 12,
            min_screen_area: 80.0,
            min_sign_gap: 1.0,
        }
    }
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.distance_range;
        if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 || lo >= hi {
            return Err(Error::validation(format!(
                "empty distance range [{lo}, {hi}]"
            )));
        }
        if self.layouts.is_empty() || self.sign_classes.is_empty() || self.background_seeds.is_empty() {
            return Err(Error::validation(
                "trajectory needs at least one layout, sign class and background seed",
            ));
        }
        if self.frames_per_episode == 0 {
            return Err(Error::validation("frames_per_episode must be positive"));
        }
        let [a, b] = self.sign_lateral_range;
        if !(a.is_finite() && b.is_finite()) || a > b {
            return Err(Error::validation("invalid sign lateral range"));
        }
        if !(self.min_screen_area.is_finite() && self.min_screen_area >= 0.0)
            || !(self.min_sign_gap.is_finite() && self.min_sign_gap >= 0.0)
        {
            return Err(Error::validation("screen area and sign gap limits must be non-negative"));
        }
        Ok(())
    }
}

/// Whether a candidate frame shows everything the attack needs: the whole screen at a
/// usable size and the sign plate, never hidden behind the car.
fn frame_is_usable(
    cfg: &SceneConfig,
    traj: &TrajectorySpec,
    camera: &Pose2D,
    car: &Pose2D,
    sign: &Pose2D,
) -> bool {
    let cam = cfg.camera();
    let n = cfg.image_size as f64;
    let Some(q) = screen_quad(camera, car, cfg) else {
        return false;
    };
    let b = q.bounds();
    if b.x_min < 0.0 || b.y_min < 0.0 || b.x_max > n || b.y_max > n {
        return false;
    }
    if q.area() < traj.min_screen_area {
        return false;
    }
    let Some(c) = cam.project(camera, [sign.x, sign.y, cfg.sign_center_height]) else {
        return false;
    };
    let r = 0.5 * cam.focal * cfg.sign_size / cam.depth(camera, [sign.x, sign.y]);
    if c[0] - r < 0.0 || c[0] + r > n || c[1] - r < 0.0 || c[1] + r > n {
        return false;
    }
    let Some((_, body)) = car_outline(cfg, camera, car) else {
        return false;
    };
    let sign_box = BBox::from_center(c[0], c[1], 2.0 * r, 2.0 * r);
    let sign_in_front = cam.depth(camera, [sign.x, sign.y]) < cam.depth(camera, [car.x, car.y]);
    if sign_in_front {
        // The sign may hide part of the screen, but enough of it must stay visible.
        let hidden = b.clip(n, n).map_or(0.0, |qb| {
            let w = (qb.x_max.min(sign_box.x_max) - qb.x_min.max(sign_box.x_min)).max(0.0);
            let h = (qb.y_max.min(sign_box.y_max) - qb.y_min.max(sign_box.y_min)).max(0.0);
            w * h
        });
        return q.area() - hidden >= traj.min_screen_area;
    }
    // A car in front of the sign must not hide it.
    let g = traj.min_sign_gap;
    c[0] + r + g <= body[0] || body[2] + g <= c[0] - r || c[1] + r + g <= body[1] || body[3] + g <= c[1] - r
}

/// Samples noisy approach trajectories and renders every frame.
pub fn generate_driving_dataset(
    config: &SceneConfig,
    photometric: &PhotometricModel,
    trajectory: &TrajectorySpec,
    n_frames: usize,
    seed: u64,
) -> Result<Vec<FrameRecord>> {
    generate_driving_dataset_with(config, photometric, trajectory, n_frames, seed, Exec::default())
}

pub fn generate_driving_dataset_with(
    config: &SceneConfig,
    photometric: &PhotometricModel,
    trajectory: &TrajectorySpec,
    n_frames: usize,
    seed: u64,
    exec: Exec,
) -> Result<Vec<FrameRecord>> {
    config.validate()?;
    trajectory.validate()?;
    if trajectory.sign_classes.iter().any(|c| !config.sign_classes.contains(c)) {
        return Err(Error::validation("trajectory uses a sign class the scene does not enable"));
    }
    let samples = sample_trajectories(config, trajectory, n_frames, seed)?;
    let rendered = exec.map(&samples, |(spec, measured, layout)| {
        render_frame(config, photometric, spec, None).map(|mut rec| {
            rec.measured = measured.clone();
            rec.layout = Some(*layout);
            rec
        })
    });
    rendered.into_iter().collect()
}

fn sample_trajectories(
    cfg: &SceneConfig,
    traj: &TrajectorySpec,
    n_frames: usize,
    seed: u64,
) -> Result<Vec<(FrameSpec, MeasuredPoses, Layout)>> {
    let [lo, hi] = traj.distance_range;
    let in_range = |d: f64| (lo..=hi).contains(&d);
    let noise = Normal::new(0.0, cfg.pose_noise_std.max(1e-12)).expect("finite std");
    let camera = Pose2D::origin();
    let mut out = Vec::with_capacity(n_frames);
    let max_episodes = 1000 + 100 * n_frames;
    let mut episode = 0usize;
    while out.len() < n_frames {
        if episode >= max_episodes {
            return Err(Error::validation(format!(
                "could not place {n_frames} usable frames within distance range [{lo}, {hi}]"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, episode as u64));
        let layout = traj.layouts[episode % traj.layouts.len()];
        let class = traj.sign_classes[rng.random_range(0..traj.sign_classes.len())];
        let background_seed = traj.background_seeds[rng.random_range(0..traj.background_seeds.len())];
        let lateral = rng.random_range(traj.sign_lateral_range[0]..=traj.sign_lateral_range[1]);
        let heading_jitter = rng.random_range(-0.15..0.15);
        // The patch car drives past just behind the sign: its lateral offset from the
        // camera-to-sign sight line sweeps from left to right over the episode. At the
        // intersection it crosses the road; in a lane change it cuts in at an angle.
        let (o0, o1) = (rng.random_range(0.3..0.5), rng.random_range(-0.4..-0.2));
        let behind = match layout {
            Layout::Intersection => rng.random_range(0.25..0.6),
            Layout::LaneChange => rng.random_range(0.2..0.9),
        };
        let frames = traj.frames_per_episode;
        for t in 0..frames {
            if out.len() >= n_frames {
                break;
            }
            let progress = (t as f64 + rng.random_range(0.0..1.0)) / frames as f64;
            let d = hi - progress * (hi - lo);
            let sign = Pose2D::new(d, -lateral, PI)?;
            let x = d + behind;
            let along = -lateral * x / d + o0 + progress * (o1 - o0);
            let car = match layout {
                Layout::Intersection => Pose2D::new(x, along, -PI / 2.0 + heading_jitter)?,
                Layout::LaneChange => Pose2D::new(x, along, -0.45 + heading_jitter)?,
            };
            if !in_range(camera.distance_to(&car)) || !in_range(camera.distance_to(&sign)) {
                continue;
            }
            if !frame_is_usable(cfg, traj, &camera, &car, &sign) {
                continue;
            }
            let mut measured = None;
            for _ in 0..32 {
                let mc = Pose2D::new(
                    car.x + noise.sample(&mut rng),
                    car.y + noise.sample(&mut rng),
                    car.heading + noise.sample(&mut rng),
                )?;
                let ms = Pose2D::new(
                    sign.x + noise.sample(&mut rng),
                    sign.y + noise.sample(&mut rng),
                    sign.heading + noise.sample(&mut rng),
                )?;
                if in_range(camera.distance_to(&mc)) && in_range(camera.distance_to(&ms)) {
                    measured = Some(MeasuredPoses {
                        camera,
                        patch_car: mc,
                        sign: ms,
                    });
                    break;
                }
            }
            let Some(measured) = measured else { continue };
            let spec = FrameSpec {
                seed: derive_seed(seed, (1u64 << 40) + out.len() as u64),
                background_seed,
                camera,
                patch_car: car,
                sign,
                sign_class: class,
            };
            out.push((spec, measured, layout));
        }
        episode += 1;
    }
    Ok(out)
}

/// A displayed image and its captured, rectified counterpart.
#[derive(Clone, Debug, PartialEq)]
pub struct ScreenPair {
    pub displayed: Image,
    pub captured: Image,
}

/// Random patch-like image: smooth color fields, hard-edged shapes and, for a third of the
/// images, high-frequency texture. Stretched per channel to cover most of `[0, 1]`.
fn random_display_image(res: usize, rng: &mut ChaCha8Rng) -> Image {
    let mut img = Image::zeros(3, res, res);
    let n = res as f64;
    for c in 0..3 {
        let waves: Vec<[f64; 4]> = (0..3)
            .map(|_| {
                [
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(0.2..1.0),
                ]
            })
            .collect();
        let plane = img.plane_mut(c);
        for y in 0..res {
            for x in 0..res {
                let (u, v) = (x as f64 / n, y as f64 / n);
                plane[y * res + x] = waves
                    .iter()
                    .map(|w| w[3] * (2.0 * PI * (w[0] * u + w[1] * v) + w[2]).sin())
                    .sum();
            }
        }
    }
    for _ in 0..rng.random_range(1..5) {
        let x0 = rng.random_range(0..res);
        let y0 = rng.random_range(0..res);
        let x1 = (x0 + rng.random_range(2..res / 2 + 3)).min(res);
        let y1 = (y0 + rng.random_range(2..res / 2 + 3)).min(res);
        let rgb: [f64; 3] = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        for y in y0..y1 {
            for x in x0..x1 {
                for c in 0..3 {
                    img.set(c, y, x, rgb[c]);
                }
            }
        }
    }
    if rng.random_bool(1.0 / 3.0) {
        let amp = rng.random_range(0.3..1.5);
        for v in &mut img.data {
            *v += rng.random_range(-amp..amp);
        }
    }
    for c in 0..3 {
        let plane = img.plane_mut(c);
        let (mn, mx) = plane
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        let lo = rng.random_range(0.0..0.1);
        let hi = rng.random_range(0.9..1.0);
        let span = (mx - mn).max(1e-9);
        for v in plane.iter_mut() {
            *v = lo + (hi - lo) * (*v - mn) / span;
        }
    }
    img.clamp_unit();
    img.quantize_8bit();
    img
}

/// Display/capture pairs at the screen's native resolution, as if each captured frame had
/// already been cropped and rectified using the known screen corners.
pub fn generate_screen_pairs(
    config: &SceneConfig,
    photometric: &PhotometricModel,
    n_pairs: usize,
    seed: u64,
) -> Result<Vec<ScreenPair>> {
    config.validate()?;
    photometric.validate()?;
    let res = config.screen_resolution;
    let pairs: Result<Vec<_>> = (0..n_pairs)
        .map(|i| {
            let pair_seed = derive_seed(seed, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(pair_seed);
            let displayed = random_display_image(res, &mut rng);
            let mut captured = apply_photometric(&photometric.with_seed(derive_seed(photometric.seed, pair_seed)), &displayed)?;
            captured.quantize_8bit();
            Ok(ScreenPair {
                displayed,
                captured,
            })
        })
        .collect();
    pairs
}

pub const MANIFEST_FORMAT: &str = "dynpatch-frames";
pub const MANIFEST_VERSION: u32 = 1;

/// First line of a frame manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    pub frames: usize,
    pub image_size: usize,
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    /// Relative to the manifest directory.
    image: String,
    #[serde(flatten)]
    record: FrameRecord,
}

/// Writes `dir/manifest.jsonl` and one PNG per frame under `dir/images`.
pub fn write_manifest(dir: &Path, frames: &[FrameRecord]) -> Result<PathBuf> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let header = ManifestHeader {
        format: MANIFEST_FORMAT.to_string(),
        version: MANIFEST_VERSION,
        frames: frames.len(),
        image_size: frames.first().map_or(0, |f| f.image.width),
    };
    let mut text = serde_json::to_string(&header)?;
    text.push('\n');
    for (i, f) in frames.iter().enumerate() {
        let name = format!("images/frame_{i:05}.png");
        f.image.save_png(&dir.join(&name))?;
        let line = ManifestLine {
            image: name,
            record: f.clone(),
        };
        text.push_str(&serde_json::to_string(&line)?);
        text.push('\n');
    }
    let path = dir.join("manifest.jsonl");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads a manifest written by [`write_manifest`], images included.
pub fn read_manifest(dir: &Path) -> Result<Vec<FrameRecord>> {
    let path = dir.join("manifest.jsonl");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let bad = |msg: String| Error::Format {
        path: path.clone(),
        msg,
    };
    let mut lines = text.lines();
    let header: ManifestHeader = serde_json::from_str(lines.next().unwrap_or_default())
        .map_err(|e| bad(format!("bad header: {e}")))?;
    if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
        return Err(bad(format!(
            "unsupported manifest {} v{}",
            header.format, header.version
        )));
    }
    let mut frames = Vec::with_capacity(header.frames);
    for (n, line) in lines.enumerate() {
        let entry: ManifestLine =
            serde_json::from_str(line).map_err(|e| bad(format!("line {}: {e}", n + 2)))?;
        let mut record = entry.record;
        record.image = Image::load_png(&dir.join(&entry.image))?;
        if record.image.width != header.image_size || record.image.height != header.image_size {
            return Err(bad(format!("{} is not {}px square", entry.image, header.image_size)));
        }
        frames.push(record);
    }
    if frames.len() != header.frames {
        return Err(bad(format!(
            "header announces {} frames, found {}",
            header.frames,
            frames.len()
        )));
    }
    Ok(frames)
}
