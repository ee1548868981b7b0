//! Pose-clustered adversarial patches.
//!
//! Frames are grouped by how far the patch car and the sign are from the camera car; one
//! patch is optimized per group through the full display chain (SIT-Net, screen warp,
//! detector), and at run time the patch for the current relative poses is looked up.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{box_param_grad, Detector, RawPrediction, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, iou_with_grad, BBox, WarpPlan};
use crate::nn::Adam;
use crate::par::Exec;
use crate::raster::Image;
use crate::scenesim::{derive_seed, FrameRecord, ObjectClass, Pose2D};
use crate::sitnet::SitNet;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSpace {
    /// `(d_patch, d_target)`: camera-to-patch-car and camera-to-sign distances.
    #[default]
    Distances,
    /// Patch-car and sign positions in the camera-car frame, `(x, y)` each.
    Positions,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterFeatures {
    pub d_patch: f64,
    pub d_target: f64,
}

fn relative(camera: &Pose2D, p: &Pose2D) -> [f64; 2] {
    let (dx, dy) = (p.x - camera.x, p.y - camera.y);
    let (s, c) = camera.heading.sin_cos();
    [c * dx + s * dy, -s * dx + c * dy]
}

pub fn features_from_poses(camera: &Pose2D, patch_car: &Pose2D, target: &Pose2D) -> Result<ClusterFeatures> {
    let finite = |p: &Pose2D| p.x.is_finite() && p.y.is_finite() && p.heading.is_finite();
    if !(finite(camera) && finite(patch_car) && finite(target)) {
        return Err(Error::validation("cluster features need three finite poses"));
    }
    Ok(ClusterFeatures {
        d_patch: camera.distance_to(patch_car),
        d_target: camera.distance_to(target),
    })
}

/// Distances from the frame's measured poses.
pub fn cluster_features(frame: &FrameRecord) -> Result<ClusterFeatures> {
    let m = &frame.measured;
    features_from_poses(&m.camera, &m.patch_car, &m.sign)
}

pub fn feature_vector(
    camera: &Pose2D,
    patch_car: &Pose2D,
    target: &Pose2D,
    space: FeatureSpace,
) -> Result<Vec<f64>> {
    let f = features_from_poses(camera, patch_car, target)?;
    Ok(match space {
        FeatureSpace::Distances => vec![f.d_patch, f.d_target],
        FeatureSpace::Positions => {
            let (a, b) = (relative(camera, patch_car), relative(camera, target));
            vec![a[0], a[1], b[0], b[1]]
        }
    })
}

pub fn frame_feature_vector(frame: &FrameRecord, space: FeatureSpace) -> Result<Vec<f64>> {
    let m = &frame.measured;
    feature_vector(&m.camera, &m.patch_car, &m.sign, space)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    pub seed: u64,
    pub counts: Vec<usize>,
    pub space: FeatureSpace,
    /// Within-cluster sum of squares of the fitted partition.
    pub inertia: f64,
    /// Inertia after each Lloyd iteration of the selected restart.
    pub inertia_history: Vec<f64>,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid; ties go to the lowest id.
pub fn nearest(centroids: &[Vec<f64>], p: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, p);
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

pub fn assign_cluster(model: &ClusterModel, features: &[f64]) -> usize {
    nearest(&model.centroids, features)
}

pub fn inertia(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> f64 {
    points.iter().map(|p| sq_dist(p, &centroids[nearest(centroids, p)])).sum()
}

const KMEANS_RESTARTS: usize = 20;
const KMEANS_MAX_ITER: usize = 300;

/// Lloyd's algorithm from seeded starts, alternating k-means++ and Forgy (k distinct
/// random points); keeps the restart with least inertia.
pub fn kmeans_fit(points: &[Vec<f64>], k: usize, seed: u64) -> Result<ClusterModel> {
    if k == 0 {
        return Err(Error::validation("k must be at least 1"));
    }
    if points.len() < k {
        return Err(Error::validation(format!(
            "k-means needs at least k = {k} points, got {}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
        return Err(Error::validation("points must be finite and of equal dimension"));
    }
    let mut best: Option<(Vec<Vec<f64>>, Vec<f64>, f64)> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, restart as u64));
        let init = if restart % 2 == 0 {
            plus_plus_init(points, k, &mut rng)
        } else {
            forgy_init(points, k, &mut rng)
        };
        let (mut centroids, mut history) = lloyd(points, init);
        if hartigan_refine(points, &mut centroids) {
            history.push(inertia(points, &centroids));
        }
        let value = *history.last().expect("at least one iteration");
        if best.as_ref().is_none_or(|b| value < b.2) {
            best = Some((centroids, history, value));
        }
    }
    let (centroids, inertia_history, inertia) = best.expect("at least one restart");
    let mut counts = vec![0; k];
    for p in points {
        counts[nearest(&centroids, p)] += 1;
    }
    Ok(ClusterModel {
        centroids,
        seed,
        counts,
        space: FeatureSpace::Distances,
        inertia,
        inertia_history,
    })
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    while centroids.len() < k {
        let d: Vec<f64> = points
            .iter()
            .map(|p| centroids.iter().map(|c| sq_dist(c, p)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..points.len())
        } else {
            let mut r = rng.random_range(0.0..total);
            let mut idx = points.len() - 1;
            for (i, di) in d.iter().enumerate() {
                if r < *di {
                    idx = i;
                    break;
                }
                r -= di;
            }
            idx
        };
        centroids.push(points[pick].clone());
    }
    centroids
}

fn forgy_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    rand::seq::index::sample(rng, points.len(), k)
        .into_iter()
        .map(|i| points[i].clone())
        .collect()
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> (Vec<Vec<f64>>, Vec<f64>) {
    let k = centroids.len();
    let dim = points[0].len();
    let mut assign: Vec<usize> = points.iter().map(|p| nearest(&centroids, p)).collect();
    let mut history = vec![inertia(points, &centroids)];
    for _ in 0..KMEANS_MAX_ITER {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        // An emptied cluster takes over the point farthest from its centroid.
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        let da = sq_dist(&points[a], &centroids[nearest(&centroids, &points[a])]);
                        let db = sq_dist(&points[b], &centroids[nearest(&centroids, &points[b])]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("non-empty points");
                centroids[j] = points[far].clone();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(&centroids, p)).collect();
        history.push(inertia(points, &centroids));
        if next == assign {
            break;
        }
        assign = next;
    }
    (centroids, history)
}

/// Single-point transfers between clusters (Hartigan) from a Lloyd fixpoint, until no
/// move lowers the inertia. Returns whether anything moved.
fn hartigan_refine(points: &[Vec<f64>], centroids: &mut [Vec<f64>]) -> bool {
    let k = centroids.len();
    let mut assign: Vec<usize> = points.iter().map(|p| nearest(centroids, p)).collect();
    let mut counts = vec![0usize; k];
    for &a in &assign {
        counts[a] += 1;
    }
    let mut moved_any = false;
    for _ in 0..KMEANS_MAX_ITER {
        let mut moved = false;
        for (i, p) in points.iter().enumerate() {
            let a = assign[i];
            if counts[a] < 2 {
                continue;
            }
            let na = counts[a] as f64;
            let removal = na / (na - 1.0) * sq_dist(p, &centroids[a]);
            let best = (0..k)
                .filter(|&b| b != a)
                .map(|b| {
                    let nb = counts[b] as f64;
                    (b, nb / (nb + 1.0) * sq_dist(p, &centroids[b]))
                })
                .min_by(|x, y| x.1.total_cmp(&y.1));
            let Some((b, gain)) = best else { continue };
            if gain < removal * (1.0 - 1e-12) {
                let nb = counts[b] as f64;
                for (c, v) in centroids[a].iter_mut().zip(p) {
                    *c = (*c * na - v) / (na - 1.0);
                }
                for (c, v) in centroids[b].iter_mut().zip(p) {
                    *c = (*c * nb + v) / (nb + 1.0);
                }
                counts[a] -= 1;
                counts[b] += 1;
                assign[i] = b;
                moved = true;
            }
        }
        if !moved {
            break;
        }
        moved_any = true;
    }
    if moved_any {
        // Recompute means exactly and settle with nearest-centroid assignment.
        let refined = lloyd(points, centroids.to_vec()).0;
        centroids.clone_from_slice(&refined);
    }
    moved_any
}

/// One decoded grid cell considered by the attack objective.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub cell: usize,
    pub bbox: BBox,
    pub objectness: f64,
    pub class_probs: [f64; NUM_CLASSES],
    pub iou: f64,
}

impl Candidate {
    pub fn confidence(&self, target: ObjectClass) -> f64 {
        self.objectness * self.class_probs[target.index()]
    }
}

/// Every cell's decoded box whose IoU with `b_orig` exceeds `tau`.
pub fn filter_overlapping(raw: &RawPrediction, b_orig: &BBox, tau: f64) -> Result<Vec<Candidate>> {
    b_orig.validate()?;
    Ok((0..raw.cells())
        .filter_map(|cell| {
            let bbox = raw.decode_box(cell);
            let iou = iou_unchecked(&bbox, b_orig);
            (iou > tau).then(|| Candidate {
                cell,
                bbox,
                objectness: raw.objectness(cell),
                class_probs: raw.class_probs(cell),
                iou,
            })
        })
        .collect())
}

/// Indices of the `k` candidates with the highest target confidence (ties: lower cell).
fn top_k(m: &[Candidate], target: ObjectClass, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..m.len()).collect();
    order.sort_by(|&a, &b| {
        m[b].confidence(target)
            .total_cmp(&m[a].confidence(target))
            .then(m[a].cell.cmp(&m[b].cell))
    });
    order.truncate(k);
    order
}

/// Mean of `confidence x IoU` over the top-`k` candidates by confidence; 0 when empty.
pub fn attack_objective(m: &[Candidate], target: ObjectClass, k: usize) -> f64 {
    let top = top_k(m, target, k.max(1));
    if top.is_empty() {
        return 0.0;
    }
    top.iter().map(|&i| m[i].confidence(target) * m[i].iou).sum::<f64>() / top.len() as f64
}

/// Adds the gradient of `scale * objectness * p_target * factor` for `cell` to `grad`,
/// plus `scale * conf * d_box` through the box parameters.
fn accumulate_cell_grad(
    raw: &RawPrediction,
    cell: usize,
    target: ObjectClass,
    conf_scale: f64,
    box_corner_grad: Option<[f64; 4]>,
    grad: &mut Image,
) {
    let n = raw.cells();
    let p_obj = raw.objectness(cell);
    let probs = raw.class_probs(cell);
    let t = target.index();
    let p_t = probs[t];
    grad.data[cell] += conf_scale * p_t * p_obj * (1.0 - p_obj);
    for (j, pj) in probs.iter().enumerate() {
        let d = p_t * (if j == t { 1.0 } else { 0.0 } - pj);
        grad.data[(5 + j) * n + cell] += conf_scale * p_obj * d;
    }
    if let Some(d) = box_corner_grad {
        let g = box_param_grad(raw, cell, d);
        for (i, gi) in g.iter().enumerate() {
            grad.data[(1 + i) * n + cell] += gi;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub target: ObjectClass,
    pub top_k: usize,
    pub tau: f64,
}

/// Objective value and its gradient on the raw prediction. When no candidate passes the
/// overlap filter the value is 0 and the gradient is that of the mean target confidence of
/// the top-`k` grid cells overlapping `b_orig`.
pub fn objective_grad(raw: &RawPrediction, b_orig: &BBox, spec: &ObjectiveSpec) -> Result<(f64, Image)> {
    let m = filter_overlapping(raw, b_orig, spec.tau)?;
    let mut grad = Image::zeros(raw.data.channels, raw.grid(), raw.grid());
    if !m.is_empty() {
        let top = top_k(&m, spec.target, spec.top_k.max(1));
        let inv = 1.0 / top.len() as f64;
        let mut value = 0.0;
        for &i in &top {
            let c = &m[i];
            let conf = c.confidence(spec.target);
            value += conf * c.iou * inv;
            let (_, d_iou) = iou_with_grad(&c.bbox, b_orig);
            let d_box = d_iou.map(|d| d * conf * inv);
            accumulate_cell_grad(raw, c.cell, spec.target, c.iou * inv, Some(d_box), &mut grad);
        }
        return Ok((value, grad));
    }
    let s = raw.grid();
    let cs = raw.cell_size;
    let mut cells: Vec<(usize, f64)> = (0..raw.cells())
        .filter(|&cell| {
            let (gy, gx) = ((cell / s) as f64, (cell % s) as f64);
            let r = BBox {
                x_min: gx * cs,
                y_min: gy * cs,
                x_max: (gx + 1.0) * cs,
                y_max: (gy + 1.0) * cs,
            };
            iou_unchecked(&r, b_orig) > 0.0
        })
        .map(|cell| (cell, raw.objectness(cell) * raw.class_probs(cell)[spec.target.index()]))
        .collect();
    cells.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    cells.truncate(spec.top_k.max(1));
    let inv = 1.0 / cells.len().max(1) as f64;
    for (cell, _) in cells {
        accumulate_cell_grad(raw, cell, spec.target, inv, None, &mut grad);
    }
    Ok((0.0, grad))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// `z <- z + lr * grad`.
    Plain,
    /// Adam on the negated objective.
    #[default]
    Adam,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StaticSteps {
    /// The static patch takes as many steps as all dynamic patches together.
    #[default]
    MatchedTotal,
    /// The static patch takes as many steps as one dynamic patch.
    PerCluster,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub iterations: usize,
    pub top_k: usize,
    pub tau: f64,
    pub target_class: ObjectClass,
    pub seed: u64,
    /// Frames per gradient step.
    pub batch_size: usize,
    pub step_rule: StepRule,
    pub static_steps: StaticSteps,
    /// Iterations at which the current patch is recorded.
    pub snapshots: Vec<usize>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.03,
            iterations: 1000,
            top_k: 1,
            tau: 0.05,
            target_class: ObjectClass::Stop,
            seed: 0,
            batch_size: 8,
            step_rule: StepRule::Adam,
            static_steps: StaticSteps::MatchedTotal,
            snapshots: Vec::new(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::validation("learning rate must be non-negative"));
        }
        if self.iterations == 0 || self.top_k == 0 || self.batch_size == 0 {
            return Err(Error::validation("iterations, top_k and batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::validation("tau must lie in [0, 1)"));
        }
        Ok(())
    }

    fn objective(&self) -> ObjectiveSpec {
        ObjectiveSpec {
            target: self.target_class,
            top_k: self.top_k,
            tau: self.tau,
        }
    }

    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(serde_json::to_string(self).expect("serializes").as_bytes()))
    }
}

/// A frame prepared for patch optimization: its screen warp and the sign box.
pub struct AttackFrame<'a> {
    pub image: &'a Image,
    pub plan: WarpPlan,
    pub b_orig: BBox,
}

impl<'a> AttackFrame<'a> {
    pub fn new(frame: &'a FrameRecord, patch_size: usize) -> Result<Self> {
        let quad = frame
            .screen_quad
            .as_ref()
            .ok_or_else(|| Error::validation("frame has no visible screen"))?;
        let b_orig = frame
            .sign_box
            .ok_or_else(|| Error::validation("frame has no visible sign"))?;
        let mut plan = WarpPlan::new(quad, frame.image.height, frame.image.width, patch_size, patch_size)?;
        plan.occlude(&frame.screen_occlusion);
        Ok(Self {
            image: &frame.image,
            plan,
            b_orig,
        })
    }
}

/// Composites the SIT-Net rendition of `patch` onto the frame's screen.
pub fn apply_patch(frame: &FrameRecord, patch: &Image, sitnet: &SitNet) -> Result<Image> {
    if patch.channels != 3 || patch.height != patch.width {
        return Err(Error::shape("square 3-channel patch", patch.shape_string()));
    }
    patch.validate_unit_range("patch")?;
    let af = AttackFrame::new(frame, patch.height)?;
    af.plan.composite(af.image, &sitnet.forward(patch)?)
}

/// Mean objective over `frames` and its gradient with respect to the patch, through the
/// full SIT-Net, warp and detector chain.
pub fn chain_objective_grad(
    frames: &[&AttackFrame],
    patch: &Image,
    detector: &Detector,
    sitnet: &SitNet,
    spec: &ObjectiveSpec,
    exec: Exec,
) -> Result<(f64, Image)> {
    let (shown, sit_trace) = sitnet.forward_trace(patch)?;
    let per_frame = exec.map(frames, |f| -> Result<(f64, Image)> {
        let img = f.plan.composite(f.image, &shown)?;
        let (raw, trace) = detector.forward_trace(&img)?;
        let (value, g_raw) = objective_grad(&raw, &f.b_orig, spec)?;
        let g_img = detector.backward(&trace, &g_raw, None, true).expect("input gradient");
        Ok((value, f.plan.backward(&g_img)))
    });
    let inv = 1.0 / frames.len().max(1) as f64;
    let mut total = 0.0;
    let mut g_shown = Image::zeros(3, patch.height, patch.width);
    for r in per_frame {
        let (v, g) = r?;
        total += v * inv;
        for (a, b) in g_shown.data.iter_mut().zip(&g.data) {
            *a += b * inv;
        }
    }
    let g = sitnet.backward(&sit_trace, &g_shown, None, true).expect("input gradient");
    Ok((total, g))
}

/// Mean objective over `frames` without gradients.
pub fn chain_objective(
    frames: &[&AttackFrame],
    patch: &Image,
    detector: &Detector,
    sitnet: &SitNet,
    spec: &ObjectiveSpec,
    exec: Exec,
) -> Result<f64> {
    let shown = sitnet.forward(patch)?;
    let values = exec.map(frames, |f| -> Result<f64> {
        let img = f.plan.composite(f.image, &shown)?;
        let raw = detector.forward(&img)?;
        let m = filter_overlapping(&raw, &f.b_orig, spec.tau)?;
        Ok(attack_objective(&m, spec.target, spec.top_k))
    });
    let mut total = 0.0;
    for v in values {
        total += v?;
    }
    Ok(total / frames.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeResult {
    #[serde(skip)]
    pub patch: Image,
    #[serde(skip)]
    pub initial: Image,
    /// Batch objective at each iteration, before that iteration's step.
    pub curve: Vec<f64>,
    pub best_iteration: usize,
    pub best_objective: f64,
    #[serde(skip)]
    pub snapshots: Vec<(usize, Image)>,
}

pub fn random_patch(size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Image::zeros(3, size, size);
    p.data.iter_mut().for_each(|v| *v = rng.random_range(0.0..=1.0));
    p
}

/// Gradient ascent on the attack objective from a seeded random patch.
pub fn optimize_patch(
    frames: &[&FrameRecord],
    detector: &Detector,
    sitnet: &SitNet,
    patch_size: usize,
    cfg: &OptimizerConfig,
) -> Result<OptimizeResult> {
    optimize_patch_with(frames, detector, sitnet, patch_size, cfg, Exec::default())
}

pub fn optimize_patch_with(
    frames: &[&FrameRecord],
    detector: &Detector,
    sitnet: &SitNet,
    patch_size: usize,
    cfg: &OptimizerConfig,
    exec: Exec,
) -> Result<OptimizeResult> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(Error::validation("patch optimization needs at least one frame"));
    }
    let prepared: Vec<AttackFrame> = frames
        .iter()
        .map(|f| AttackFrame::new(f, patch_size))
        .collect::<Result<_>>()?;
    let spec = cfg.objective();
    let initial = random_patch(patch_size, cfg.seed);
    let mut z = initial.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let mut adam = Adam::new(cfg.lr, &[z.data.len()]);
    let mut order: Vec<usize> = Vec::new();
    let mut curve = Vec::with_capacity(cfg.iterations);
    let mut best = (0usize, f64::NEG_INFINITY, z.clone());
    let mut snapshots = Vec::new();
    for it in 0..cfg.iterations {
        if cfg.snapshots.contains(&it) {
            snapshots.push((it, z.clone()));
        }
        // Draw batches without replacement, reshuffling once every frame has been used.
        let mut batch = Vec::with_capacity(cfg.batch_size.min(prepared.len()));
        while batch.len() < cfg.batch_size.min(prepared.len()) {
            if order.is_empty() {
                order = (0..prepared.len()).collect();
                for i in (1..order.len()).rev() {
                    order.swap(i, rng.random_range(0..=i));
                }
            }
            batch.push(&prepared[order.pop().expect("refilled")]);
        }
        let (value, grad) = chain_objective_grad(&batch, &z, detector, sitnet, &spec, exec)?;
        curve.push(value);
        if value > best.1 {
            best = (it, value, z.clone());
        }
        match cfg.step_rule {
            StepRule::Plain => {
                for (v, g) in z.data.iter_mut().zip(&grad.data) {
                    *v += cfg.lr * g;
                }
            }
            StepRule::Adam => {
                let neg: Vec<f64> = grad.data.iter().map(|g| -g).collect();
                adam.step(vec![&mut z.data], vec![&neg]);
            }
        }
        z.clamp_unit();
    }
    if cfg.snapshots.contains(&cfg.iterations) {
        snapshots.push((cfg.iterations, z.clone()));
    }
    Ok(OptimizeResult {
        patch: best.2,
        initial,
        curve,
        best_iteration: best.0,
        best_objective: best.1,
        snapshots,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchMeta {
    /// `None` for the static patch.
    pub cluster_id: Option<usize>,
    pub centroid: Option<Vec<f64>>,
    pub config_hash: String,
    pub seed: u64,
    pub final_objective: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    /// Indexed by cluster id.
    pub dynamic: Vec<Image>,
    pub static_patch: Image,
    pub model: ClusterModel,
    pub config_hash: String,
    pub dynamic_meta: Vec<PatchMeta>,
    pub static_meta: PatchMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSetRun {
    pub patchset: PatchSet,
    pub dynamic_runs: Vec<OptimizeResult>,
    pub static_run: OptimizeResult,
}

/// Optimizes one patch per cluster and the static baseline on all frames. Patches are
/// quantized to 8-bit levels, as they would be when shown on the screen.
pub fn build_patchset(
    frames: &[&FrameRecord],
    model: &ClusterModel,
    detector: &Detector,
    sitnet: &SitNet,
    patch_size: usize,
    cfg: &OptimizerConfig,
) -> Result<PatchSetRun> {
    build_patchset_with(frames, model, detector, sitnet, patch_size, cfg, Exec::default())
}

pub fn build_patchset_with(
    frames: &[&FrameRecord],
    model: &ClusterModel,
    detector: &Detector,
    sitnet: &SitNet,
    patch_size: usize,
    cfg: &OptimizerConfig,
    exec: Exec,
) -> Result<PatchSetRun> {
    cfg.validate()?;
    let mut groups: Vec<Vec<&FrameRecord>> = vec![Vec::new(); model.k()];
    for f in frames {
        let id = assign_cluster(model, &frame_feature_vector(f, model.space)?);
        groups[id].push(f);
    }
    if let Some(empty) = groups.iter().position(Vec::is_empty) {
        return Err(Error::validation(format!("cluster {empty} has no frames")));
    }
    let config_hash = cfg.hash();
    let mut dynamic = Vec::new();
    let mut dynamic_meta = Vec::new();
    let mut dynamic_runs = Vec::new();
    for (id, group) in groups.iter().enumerate() {
        let mut run = optimize_patch_with(group, detector, sitnet, patch_size, cfg, exec)?;
        run.patch.quantize_8bit();
        dynamic_meta.push(PatchMeta {
            cluster_id: Some(id),
            centroid: Some(model.centroids[id].clone()),
            config_hash: config_hash.clone(),
            seed: cfg.seed,
            final_objective: run.best_objective,
            iterations: cfg.iterations,
        });
        dynamic.push(run.patch.clone());
        dynamic_runs.push(run);
    }
    let static_cfg = OptimizerConfig {
        iterations: match cfg.static_steps {
            StaticSteps::MatchedTotal => cfg.iterations * model.k(),
            StaticSteps::PerCluster => cfg.iterations,
        },
        ..cfg.clone()
    };
    let mut static_run = optimize_patch_with(frames, detector, sitnet, patch_size, &static_cfg, exec)?;
    static_run.patch.quantize_8bit();
    let static_meta = PatchMeta {
        cluster_id: None,
        centroid: None,
        config_hash: config_hash.clone(),
        seed: cfg.seed,
        final_objective: static_run.best_objective,
        iterations: static_cfg.iterations,
    };
    Ok(PatchSetRun {
        patchset: PatchSet {
            dynamic,
            static_patch: static_run.patch.clone(),
            model: model.clone(),
            config_hash,
            dynamic_meta,
            static_meta,
        },
        dynamic_runs,
        static_run,
    })
}

/// Patch for the current relative poses.
pub fn select_patch<'a>(
    patchset: &'a PatchSet,
    camera: &Pose2D,
    patch_car: &Pose2D,
    target: &Pose2D,
) -> Result<&'a Image> {
    let f = feature_vector(camera, patch_car, target, patchset.model.space)?;
    Ok(&patchset.dynamic[assign_cluster(&patchset.model, &f)])
}

impl PatchSet {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write_json = |name: String, value: &PatchMeta| -> Result<()> {
            let p = dir.join(name);
            std::fs::write(&p, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(&p, e))
        };
        for (id, (patch, meta)) in self.dynamic.iter().zip(&self.dynamic_meta).enumerate() {
            patch.save_png(&dir.join(format!("patch_{id}.png")))?;
            write_json(format!("patch_{id}.json"), meta)?;
        }
        self.static_patch.save_png(&dir.join("static.png"))?;
        write_json("static.json".to_string(), &self.static_meta)?;
        self.model.save(&dir.join("clusters.json"))?;
        let index = dir.join("patchset.json");
        let body = serde_json::json!({
            "clusters": self.dynamic.len(),
            "config_hash": self.config_hash,
        });
        std::fs::write(&index, serde_json::to_string_pretty(&body)?).map_err(|e| Error::io(&index, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index_path = dir.join("patchset.json");
        let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index: serde_json::Value = serde_json::from_str(&text)?;
        let bad = |msg: &str| Error::Format {
            path: index_path.clone(),
            msg: msg.to_string(),
        };
        let n = index["clusters"].as_u64().ok_or_else(|| bad("missing cluster count"))? as usize;
        let config_hash = index["config_hash"]
            .as_str()
            .ok_or_else(|| bad("missing config hash"))?
            .to_string();
        let read_meta = |name: String| -> Result<PatchMeta> {
            let p = dir.join(name);
            let t = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            serde_json::from_str(&t).map_err(|e| Error::Format {
                path: p.clone(),
                msg: e.to_string(),
            })
        };
        let mut dynamic = Vec::with_capacity(n);
        let mut dynamic_meta = Vec::with_capacity(n);
        for id in 0..n {
            dynamic.push(Image::load_png(&dir.join(format!("patch_{id}.png")))?);
            dynamic_meta.push(read_meta(format!("patch_{id}.json"))?);
        }
        let model = ClusterModel::load(&dir.join("clusters.json"))?;
        if model.k() != n {
            return Err(bad("cluster count does not match the cluster model"));
        }
        Ok(Self {
            dynamic,
            static_patch: Image::load_png(&dir.join("static.png"))?,
            model,
            config_hash,
            dynamic_meta,
            static_meta: read_meta("static.json".to_string())?,
        })
    }
}
