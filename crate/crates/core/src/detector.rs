//! Single-stage grid detector with one anchor per cell.
//!
//! A stack of 3x3 convolution blocks (leaky ReLU) downsamples the input to an `S x S` grid.
//! A small global-context branch pools the last feature map (mean and max), passes it through
//! a fully connected layer and broadcasts it back over the grid, so every cell can see the
//! whole frame. A 1x1 head then predicts, per cell, an objectness logit, four box parameters
//! and one logit per class.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, BBox};
use crate::nn::{
    bce_with_logit, leaky_relu_backward, leaky_relu_inplace, sigmoid, softmax, Adam, Conv2d,
    ConvGrad,
};
use crate::par::Exec;
use crate::raster::Image;
use crate::scenesim::{derive_seed, FrameRecord, ObjectClass};
use crate::store;

pub const NUM_CLASSES: usize = 5;
pub const PRED_CHANNELS: usize = 5 + NUM_CLASSES;
const BOX_LOG_LIMIT: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub input_size: usize,
    pub grid_size: usize,
    /// Output channels of each convolution block. The first `log2(input / grid)` blocks
    /// use stride 2, the rest stride 1.
    pub widths: Vec<usize>,
    pub context_width: usize,
    /// Anchor side in pixels; box sizes are predicted as log-scale factors of it.
    pub anchor: f64,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            input_size: 128,
            grid_size: 16,
            widths: vec![12, 16, 24, 32, 32],
            context_width: 32,
            anchor: 16.0,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size == 0 || self.input_size % self.grid_size != 0 {
            return Err(Error::validation("input size must be a multiple of the grid size"));
        }
        let ratio = self.input_size / self.grid_size;
        if !ratio.is_power_of_two() {
            return Err(Error::validation("input/grid ratio must be a power of two"));
        }
        if self.widths.len() < self.downsamples() || self.widths.is_empty() {
            return Err(Error::validation(format!(
                "need at least {} blocks to reach a {}x{} grid",
                self.downsamples().max(1),
                self.grid_size,
                self.grid_size
            )));
        }
        if self.widths.contains(&0) || self.context_width == 0 {
            return Err(Error::validation("layer widths must be positive"));
        }
        if !(self.anchor.is_finite() && self.anchor > 0.0) {
            return Err(Error::validation("anchor must be positive"));
        }
        Ok(())
    }

    fn downsamples(&self) -> usize {
        (self.input_size / self.grid_size.max(1)).trailing_zeros() as usize
    }

    pub fn cell_size(&self) -> f64 {
        (self.input_size / self.grid_size) as f64
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Raw head output: `PRED_CHANNELS x S x S`, channel order objectness, tx, ty, tw, th,
/// then class logits in [`ObjectClass::ALL`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPrediction {
    pub data: Image,
    pub cell_size: f64,
    pub anchor: f64,
}

impl RawPrediction {
    pub fn grid(&self) -> usize {
        self.data.height
    }

    pub fn cells(&self) -> usize {
        self.data.plane_len()
    }

    #[inline]
    pub fn value(&self, channel: usize, cell: usize) -> f64 {
        self.data.data[channel * self.cells() + cell]
    }

    pub fn objectness(&self, cell: usize) -> f64 {
        sigmoid(self.value(0, cell))
    }

    pub fn class_probs(&self, cell: usize) -> [f64; NUM_CLASSES] {
        let logits: Vec<f64> = (0..NUM_CLASSES).map(|k| self.value(5 + k, cell)).collect();
        softmax(&logits).try_into().expect("class count")
    }

    pub fn box_params(&self, cell: usize) -> [f64; 4] {
        [1, 2, 3, 4].map(|c| self.value(c, cell))
    }

    pub fn decode_box(&self, cell: usize) -> BBox {
        let s = self.grid();
        decode_box(self.box_params(cell), cell / s, cell % s, self.cell_size, self.anchor)
    }
}

pub fn decode_box(t: [f64; 4], gy: usize, gx: usize, cell_size: f64, anchor: f64) -> BBox {
    let cx = (gx as f64 + sigmoid(t[0])) * cell_size;
    let cy = (gy as f64 + sigmoid(t[1])) * cell_size;
    let w = anchor * t[2].clamp(-BOX_LOG_LIMIT, BOX_LOG_LIMIT).exp();
    let h = anchor * t[3].clamp(-BOX_LOG_LIMIT, BOX_LOG_LIMIT).exp();
    BBox::from_center(cx, cy, w, h)
}

/// Inverse of [`decode_box`] for a box whose center lies in cell `(gy, gx)`.
pub fn encode_box(b: &BBox, gy: usize, gx: usize, cell_size: f64, anchor: f64) -> [f64; 4] {
    let [cx, cy] = b.center();
    let logit = |p: f64| {
        let p = p.clamp(1e-6, 1.0 - 1e-6);
        (p / (1.0 - p)).ln()
    };
    [
        logit(cx / cell_size - gx as f64),
        logit(cy / cell_size - gy as f64),
        (b.width() / anchor).ln(),
        (b.height() / anchor).ln(),
    ]
}

/// Chain rule from box-corner gradients `[x_min, y_min, x_max, y_max]` to the cell's
/// `[tx, ty, tw, th]`.
pub(crate) fn box_param_grad(raw: &RawPrediction, cell: usize, d: [f64; 4]) -> [f64; 4] {
    let t = raw.box_params(cell);
    let (sx, sy) = (sigmoid(t[0]), sigmoid(t[1]));
    let clamp_grad = |v: f64| if v.abs() < BOX_LOG_LIMIT { 1.0 } else { 0.0 };
    let w = raw.anchor * t[2].clamp(-BOX_LOG_LIMIT, BOX_LOG_LIMIT).exp();
    let h = raw.anchor * t[3].clamp(-BOX_LOG_LIMIT, BOX_LOG_LIMIT).exp();
    let d_cx = d[0] + d[2];
    let d_cy = d[1] + d[3];
    let d_w = 0.5 * (d[2] - d[0]);
    let d_h = 0.5 * (d[3] - d[1]);
    [
        d_cx * raw.cell_size * sx * (1.0 - sx),
        d_cy * raw.cell_size * sy * (1.0 - sy),
        d_w * w * clamp_grad(t[2]),
        d_h * h * clamp_grad(t[3]),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub objectness: f64,
    pub class_probs: [f64; NUM_CLASSES],
    pub class: ObjectClass,
    /// Objectness times the probability of `class`.
    pub confidence: f64,
    pub cell: usize,
}

/// Thresholds `objectness x max class probability`, then runs greedy per-class NMS.
pub fn decode_detections(
    raw: &RawPrediction,
    conf_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    if !(0.0..=1.0).contains(&conf_threshold) || !(0.0..=1.0).contains(&nms_iou) {
        return Err(Error::validation("thresholds must lie in [0, 1]"));
    }
    let mut candidates = Vec::new();
    for cell in 0..raw.cells() {
        let obj = raw.objectness(cell);
        let probs = raw.class_probs(cell);
        let (k, p) = probs
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, p)| if p > acc.1 { (i, p) } else { acc });
        let conf = obj * p;
        if conf < conf_threshold {
            continue;
        }
        candidates.push(Detection {
            bbox: raw.decode_box(cell),
            objectness: obj,
            class_probs: probs,
            class: ObjectClass::from_index(k).expect("class index"),
            confidence: conf,
            cell,
        });
    }
    candidates.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.cell.cmp(&b.cell)));
    let mut kept: Vec<Detection> = Vec::new();
    for d in candidates {
        let suppressed = kept
            .iter()
            .any(|k| k.class == d.class && iou_unchecked(&k.bbox, &d.bbox) > nms_iou);
        if !suppressed {
            kept.push(d);
        }
    }
    Ok(kept)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detector {
    pub config: DetectorConfig,
    pub blocks: Vec<Conv2d>,
    pub context: Conv2d,
    pub head: Conv2d,
}

/// Intermediate values kept from a forward pass for the reverse pass.
pub struct Trace {
    cols: Vec<Vec<f64>>,
    input_hw: Vec<(usize, usize)>,
    /// Post-activation output of every block.
    pub activations: Vec<Image>,
    argmax: Vec<usize>,
    context_col: Vec<f64>,
    context_out: Image,
    head_col: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorGrad {
    pub blocks: Vec<ConvGrad>,
    pub context: ConvGrad,
    pub head: ConvGrad,
}

impl DetectorGrad {
    pub fn zeros_like(d: &Detector) -> Self {
        Self {
            blocks: d.blocks.iter().map(ConvGrad::zeros_like).collect(),
            context: ConvGrad::zeros_like(&d.context),
            head: ConvGrad::zeros_like(&d.head),
        }
    }

    pub fn add(&mut self, other: &DetectorGrad) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.add(b);
        }
        self.context.add(&other.context);
        self.head.add(&other.head);
    }

    pub fn scale(&mut self, s: f64) {
        self.blocks.iter_mut().for_each(|g| g.scale(s));
        self.context.scale(s);
        self.head.scale(s);
    }

    fn buffers(&self) -> Vec<&Vec<f64>> {
        let mut v = Vec::new();
        for g in self.blocks.iter().chain([&self.context, &self.head]) {
            v.push(&g.weight);
            v.push(&g.bias);
        }
        v
    }
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let n_down = config.downsamples();
        let mut blocks = Vec::with_capacity(config.widths.len());
        let mut c_in = 3;
        for (i, &w) in config.widths.iter().enumerate() {
            let stride = if i < n_down { 2 } else { 1 };
            blocks.push(Conv2d::new(c_in, w, 3, stride, &mut rng));
            c_in = w;
        }
        let context = Conv2d::new(2 * c_in, config.context_width, 1, 1, &mut rng);
        let mut head = Conv2d::new(c_in + config.context_width, PRED_CHANNELS, 1, 1, &mut rng);
        head.weight.iter_mut().for_each(|w| *w *= 0.1);
        // Start from a low objectness prior so the many empty cells do not dominate early.
        head.bias[0] = -4.0;
        Ok(Self {
            config,
            blocks,
            context,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.convs().map(Conv2d::param_count).sum()
    }

    fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        self.blocks.iter().chain([&self.context, &self.head])
    }

    fn param_buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v = Vec::new();
        for c in self.blocks.iter_mut().chain([&mut self.context, &mut self.head]) {
            v.push(&mut c.weight);
            v.push(&mut c.bias);
        }
        v
    }

    fn param_sizes(&self) -> Vec<usize> {
        self.convs().flat_map(|c| [c.weight.len(), c.bias.len()]).collect()
    }

    pub fn check_input(&self, image: &Image) -> Result<()> {
        let n = self.config.input_size;
        if image.channels != 3 || image.height != n || image.width != n {
            return Err(Error::shape(format!("3x{n}x{n} image"), image.shape_string()));
        }
        image.validate_unit_range("detector input")
    }

    pub fn forward(&self, image: &Image) -> Result<RawPrediction> {
        Ok(self.forward_trace(image)?.0)
    }

    pub fn forward_trace(&self, image: &Image) -> Result<(RawPrediction, Trace)> {
        self.check_input(image)?;
        let mut cols = Vec::with_capacity(self.blocks.len());
        let mut input_hw = Vec::with_capacity(self.blocks.len());
        let mut activations: Vec<Image> = Vec::with_capacity(self.blocks.len());
        for (i, conv) in self.blocks.iter().enumerate() {
            let x = if i == 0 { image } else { &activations[i - 1] };
            input_hw.push((x.height, x.width));
            let (mut y, col) = conv.forward(x)?;
            leaky_relu_inplace(&mut y);
            cols.push(col);
            activations.push(y);
        }
        let last = activations.last().expect("at least one block");
        let (c, p) = (last.channels, last.plane_len());
        let mut pooled = Image::zeros(2 * c, 1, 1);
        let mut argmax = Vec::with_capacity(c);
        for ch in 0..c {
            let plane = last.plane(ch);
            pooled.data[ch] = plane.iter().sum::<f64>() / p as f64;
            let (i, m) = plane
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
            pooled.data[c + ch] = m;
            argmax.push(i);
        }
        let (mut context_out, context_col) = self.context.forward(&pooled)?;
        leaky_relu_inplace(&mut context_out);

        let k = self.config.context_width;
        let mut joined = Image::zeros(c + k, last.height, last.width);
        joined.data[..c * p].copy_from_slice(&last.data);
        for j in 0..k {
            joined.plane_mut(c + j).fill(context_out.data[j]);
        }
        let (out, head_col) = self.head.forward(&joined)?;
        let raw = RawPrediction {
            data: out,
            cell_size: self.config.cell_size(),
            anchor: self.config.anchor,
        };
        Ok((
            raw,
            Trace {
                cols,
                input_hw,
                activations,
                argmax,
                context_col,
                context_out,
                head_col,
            },
        ))
    }

    /// Reverse pass from a gradient on the raw prediction. Accumulates parameter gradients
    /// into `grads` when given; returns the input-image gradient when `need_input` is set.
    pub fn backward(
        &self,
        trace: &Trace,
        grad_raw: &Image,
        mut grads: Option<&mut DetectorGrad>,
        need_input: bool,
    ) -> Option<Image> {
        let last = trace.activations.last().expect("at least one block");
        let (c, p) = (last.channels, last.plane_len());
        let d_joined = self
            .head
            .backward(
                &trace.head_col,
                (last.height, last.width),
                grad_raw,
                grads.as_deref_mut().map(|g| &mut g.head),
                true,
            )
            .expect("input gradient requested");
        let k = self.config.context_width;
        let mut d_ctx = Image::zeros(k, 1, 1);
        for j in 0..k {
            d_ctx.data[j] = d_joined.plane(c + j).iter().sum();
        }
        leaky_relu_backward(&trace.context_out, &mut d_ctx);
        let d_pooled = self
            .context
            .backward(
                &trace.context_col,
                (1, 1),
                &d_ctx,
                grads.as_deref_mut().map(|g| &mut g.context),
                true,
            )
            .expect("input gradient requested");
        let mut d = Image::from_vec(c, last.height, last.width, d_joined.data[..c * p].to_vec())
            .expect("split shape");
        for ch in 0..c {
            let mean_grad = d_pooled.data[ch] / p as f64;
            let plane = d.plane_mut(ch);
            plane.iter_mut().for_each(|v| *v += mean_grad);
            plane[trace.argmax[ch]] += d_pooled.data[c + ch];
        }

        for i in (0..self.blocks.len()).rev() {
            leaky_relu_backward(&trace.activations[i], &mut d);
            let want_input = i > 0 || need_input;
            let g = grads.as_deref_mut().map(|g| &mut g.blocks[i]);
            match self.blocks[i].backward(&trace.cols[i], trace.input_hw[i], &d, g, want_input) {
                Some(next) => d = next,
                None => return None,
            }
        }
        Some(d)
    }

    pub fn save(&self, path: &std::path::Path, meta: &DetectorMeta) -> Result<()> {
        let mut arrays = Vec::new();
        let names = self.array_names();
        for (name, conv) in names.chunks(2).zip(self.convs()) {
            arrays.push((name[0].clone(), conv.weight.clone()));
            arrays.push((name[1].clone(), conv.bias.clone()));
        }
        store::save(path, &arrays, meta)
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, DetectorMeta)> {
        let (mut arrays, meta): (_, DetectorMeta) = store::load(path)?;
        if meta.format != DETECTOR_FORMAT {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("expected format `{DETECTOR_FORMAT}`, found `{}`", meta.format),
            });
        }
        let mut det = Detector::new(meta.config.clone())?;
        let names = det.array_names();
        for (i, buf) in det.param_buffers_mut().into_iter().enumerate() {
            *buf = store::take_array(&mut arrays, &names[i], buf.len(), path)?;
        }
        Ok((det, meta))
    }

    fn array_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.blocks.len() {
            names.push(format!("block{i}.weight"));
            names.push(format!("block{i}.bias"));
        }
        for n in ["context", "head"] {
            names.push(format!("{n}.weight"));
            names.push(format!("{n}.bias"));
        }
        names
    }

    pub fn meta(&self, training_seed: u64, dataset_hash: &str) -> DetectorMeta {
        DetectorMeta {
            format: DETECTOR_FORMAT.to_string(),
            config: self.config.clone(),
            config_hash: self.config.hash(),
            classes: ObjectClass::ALL.iter().map(|c| c.name().to_string()).collect(),
            training_seed,
            dataset_hash: dataset_hash.to_string(),
        }
    }

    /// Gradient of a scalar objective of the raw prediction with respect to the input.
    pub fn image_gradient<F>(&self, image: &Image, objective: F) -> Result<(f64, Image)>
    where
        F: Fn(&RawPrediction) -> Result<(f64, Image)>,
    {
        let (raw, trace) = self.forward_trace(image)?;
        let (value, grad_raw) = objective(&raw)?;
        raw.data.ensure_same_shape(&grad_raw)?;
        if grad_raw.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("objective gradient is not finite"));
        }
        let g = self.backward(&trace, &grad_raw, None, true).expect("input gradient");
        Ok((value, g))
    }

    /// Eigen-CAM heatmap of block `layer` at the input resolution, normalized to `[0, 1]`.
    pub fn eigencam(&self, image: &Image, layer: usize) -> Result<Image> {
        if layer >= self.blocks.len() {
            return Err(Error::validation(format!(
                "layer {layer} out of range; the detector has {} blocks",
                self.blocks.len()
            )));
        }
        let (_, trace) = self.forward_trace(image)?;
        Ok(eigencam_from_activation(&trace.activations[layer], image.height, image.width))
    }
}

pub const DETECTOR_FORMAT: &str = "dynpatch-detector";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorMeta {
    pub format: String,
    pub config: DetectorConfig,
    pub config_hash: String,
    pub classes: Vec<String>,
    pub training_seed: u64,
    pub dataset_hash: String,
}

/// Projects the activations onto their dominant right singular vector (found by power
/// iteration on the channel Gram matrix), upsamples bilinearly and min-max normalizes.
pub fn eigencam_from_activation(act: &Image, out_h: usize, out_w: usize) -> Image {
    let (c, p) = (act.channels, act.plane_len());
    let mut gram = vec![0.0; c * c];
    crate::nn::gemm(c, p, c, &act.data, false, &act.data, true, &mut gram, 0.0);
    let mut v = vec![1.0 / (c as f64).sqrt(); c];
    for _ in 0..500 {
        let mut next = vec![0.0; c];
        for i in 0..c {
            for j in 0..c {
                next[i] += gram[i * c + j] * v[j];
            }
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-300 {
            break;
        }
        next.iter_mut().for_each(|x| *x /= norm);
        let delta: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        v = next;
        if delta < 1e-13 {
            break;
        }
    }
    let mut proj = vec![0.0; p];
    for (ch, vc) in v.iter().enumerate() {
        for (o, a) in proj.iter_mut().zip(act.plane(ch)) {
            *o += vc * a;
        }
    }
    // The singular vector's sign is arbitrary; orient it along the mean activation.
    if proj.iter().sum::<f64>() < 0.0 {
        proj.iter_mut().for_each(|x| *x = -*x);
    }
    let small = Image::from_vec(1, act.height, act.width, proj).expect("plane shape");
    let mut up = resize_bilinear(&small, out_h, out_w);
    let (mn, mx) = up
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    if mx - mn > 1e-12 {
        up.data.iter_mut().for_each(|x| *x = (*x - mn) / (mx - mn));
    } else {
        up.data.fill(0.0);
    }
    up
}

/// Half-pixel-centered bilinear resize with edge clamping.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Image {
    let mut out = Image::zeros(img.channels, out_h, out_w);
    let sy = img.height as f64 / out_h as f64;
    let sx = img.width as f64 / out_w as f64;
    for c in 0..img.channels {
        for y in 0..out_h {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(img.height - 1);
            let ay = fy - y0 as f64;
            for x in 0..out_w {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(img.width - 1);
                let ax = fx - x0 as f64;
                let v = (1.0 - ay) * ((1.0 - ax) * img.get(c, y0, x0) + ax * img.get(c, y0, x1))
                    + ay * ((1.0 - ax) * img.get(c, y1, x0) + ax * img.get(c, y1, x1));
                out.set(c, y, x, v);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub val_fraction: f64,
    pub noobj_weight: f64,
    pub box_weight: f64,
    /// Mass spread uniformly over all classes in the class target.
    pub label_smoothing: f64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 2e-3,
            seed: 0,
            val_fraction: 0.2,
            noobj_weight: 0.5,
            box_weight: 5.0,
            label_smoothing: 0.1,
        }
    }
}

/// Ground truth for one object assigned to the cell holding its center.
#[derive(Clone, Debug, PartialEq)]
pub struct CellTarget {
    pub cell: usize,
    pub class: ObjectClass,
    /// `[sigmoid(tx), sigmoid(ty), tw, th]` targets.
    pub target: [f64; 4],
}

pub fn assign_targets(objects: &[(ObjectClass, BBox)], config: &DetectorConfig) -> Vec<CellTarget> {
    let s = config.grid_size;
    let cs = config.cell_size();
    let mut out: Vec<CellTarget> = Vec::new();
    for (class, b) in objects {
        let [cx, cy] = b.center();
        let gx = ((cx / cs).floor().max(0.0) as usize).min(s - 1);
        let gy = ((cy / cs).floor().max(0.0) as usize).min(s - 1);
        let cell = gy * s + gx;
        let t = [
            (cx / cs - gx as f64).clamp(0.0, 1.0),
            (cy / cs - gy as f64).clamp(0.0, 1.0),
            (b.width() / config.anchor).ln(),
            (b.height() / config.anchor).ln(),
        ];
        out.retain(|o| o.cell != cell);
        out.push(CellTarget {
            cell,
            class: *class,
            target: t,
        });
    }
    out
}

/// Composite detection loss for one image and its gradient on the raw prediction.
pub fn detection_loss(
    raw: &RawPrediction,
    targets: &[CellTarget],
    cfg: &DetectorTrainConfig,
) -> (f64, Image) {
    let n = raw.cells();
    let mut grad = Image::zeros(PRED_CHANNELS, raw.grid(), raw.grid());
    let mut loss = 0.0;
    let mut positive = vec![None; n];
    for t in targets {
        positive[t.cell] = Some(t);
    }
    for (cell, pos) in positive.iter().enumerate() {
        let o = raw.value(0, cell);
        let (target, w) = match pos {
            Some(_) => (1.0, 1.0),
            None => (0.0, cfg.noobj_weight),
        };
        loss += w * bce_with_logit(o, target);
        grad.data[cell] = w * (sigmoid(o) - target);
        let Some(t) = pos else { continue };

        let probs = raw.class_probs(cell);
        let y = t.class.index();
        let eps = cfg.label_smoothing;
        for (k, p) in probs.iter().enumerate() {
            let q = eps / NUM_CLASSES as f64 + if k == y { 1.0 - eps } else { 0.0 };
            if q > 0.0 {
                loss -= q * p.max(1e-300).ln();
            }
            grad.data[(5 + k) * n + cell] = p - q;
        }
        let b = raw.box_params(cell);
        for j in 0..2 {
            let s = sigmoid(b[j]);
            let r = s - t.target[j];
            loss += cfg.box_weight * r * r;
            grad.data[(1 + j) * n + cell] = cfg.box_weight * 2.0 * r * s * (1.0 - s);
        }
        for j in 2..4 {
            let r = b[j] - t.target[j];
            loss += cfg.box_weight * r * r;
            grad.data[(1 + j) * n + cell] = cfg.box_weight * 2.0 * r;
        }
    }
    (loss, grad)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub map: f64,
    /// Average precision per class with at least one ground-truth instance.
    pub per_class: Vec<(ObjectClass, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub held_out: MapReport,
    pub n_train: usize,
    pub n_val: usize,
    pub seed: u64,
}

/// Splits `n` indices into (train, held-out) with a seeded shuffle.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

pub fn train_detector(
    frames: &[FrameRecord],
    arch: &DetectorConfig,
    cfg: &DetectorTrainConfig,
) -> Result<(Detector, TrainReport)> {
    train_detector_with(frames, arch, cfg, Exec::default())
}

pub fn train_detector_with(
    frames: &[FrameRecord],
    arch: &DetectorConfig,
    cfg: &DetectorTrainConfig,
    exec: Exec,
) -> Result<(Detector, TrainReport)> {
    if frames.is_empty() {
        return Err(Error::validation("detector training needs a non-empty dataset"));
    }
    if cfg.batch_size == 0
        || !(cfg.lr > 0.0)
        || !(0.0..1.0).contains(&cfg.val_fraction)
        || !(0.0..1.0).contains(&cfg.label_smoothing)
    {
        return Err(Error::validation("invalid detector training configuration"));
    }
    let mut present = [false; NUM_CLASSES];
    for f in frames {
        for (c, _) in f.objects() {
            present[c.index()] = true;
        }
    }
    if let Some(missing) = ObjectClass::ALL.iter().find(|c| !present[c.index()]) {
        return Err(Error::validation(format!(
            "dataset has no `{}` instances",
            missing.name()
        )));
    }
    let mut det = Detector::new(DetectorConfig {
        seed: cfg.seed,
        ..arch.clone()
    })?;
    let (train_idx, val_idx) = split_indices(frames.len(), cfg.val_fraction, cfg.seed);
    let train: Vec<(&Image, Vec<CellTarget>)> = train_idx
        .iter()
        .map(|&i| (&frames[i].image, assign_targets(&frames[i].objects(), &det.config)))
        .collect();
    let epoch_loss = fit(&mut det, &train, cfg, exec)?;
    let val: Vec<&FrameRecord> = val_idx.iter().map(|&i| &frames[i]).collect();
    let held_out = if val.is_empty() {
        MapReport {
            map: 0.0,
            per_class: Vec::new(),
        }
    } else {
        mean_average_precision(&det, &val, 0.5, exec)?
    };
    Ok((
        det,
        TrainReport {
            epoch_loss,
            held_out,
            n_train: train_idx.len(),
            n_val: val_idx.len(),
            seed: cfg.seed,
        },
    ))
}

/// Mini-batch Adam over `(image, targets)` pairs; returns the mean loss of each epoch.
pub fn fit(
    det: &mut Detector,
    data: &[(&Image, Vec<CellTarget>)],
    cfg: &DetectorTrainConfig,
    exec: Exec,
) -> Result<Vec<f64>> {
    let mut adam = Adam::new(cfg.lr, &det.param_sizes());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64)));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let det_ref = &*det;
            let results = exec.map(batch, |&i| -> Result<(f64, DetectorGrad)> {
                let (raw, trace) = det_ref.forward_trace(data[i].0)?;
                let (loss, grad_raw) = detection_loss(&raw, &data[i].1, cfg);
                let mut g = DetectorGrad::zeros_like(det_ref);
                det_ref.backward(&trace, &grad_raw, Some(&mut g), false);
                Ok((loss, g))
            });
            let mut sum = DetectorGrad::zeros_like(det);
            for r in results {
                let (loss, g) = r?;
                total += loss;
                sum.add(&g);
            }
            sum.scale(1.0 / batch.len() as f64);
            adam.step(det.param_buffers_mut(), sum.buffers());
        }
        let mean = total / data.len().max(1) as f64;
        if !mean.is_finite() {
            return Err(Error::Estimation(format!("detector loss diverged at epoch {epoch}")));
        }
        curve.push(mean);
    }
    Ok(curve)
}

/// VOC-style all-point interpolated average precision over classes present in `frames`.
pub fn mean_average_precision(
    det: &Detector,
    frames: &[&FrameRecord],
    iou_threshold: f64,
    exec: Exec,
) -> Result<MapReport> {
    let detections = exec.map(frames, |f| {
        det.forward(&f.image)
            .and_then(|raw| decode_detections(&raw, 0.01, 0.5))
    });
    let detections: Vec<Vec<Detection>> = detections.into_iter().collect::<Result<_>>()?;
    let mut per_class = Vec::new();
    for class in ObjectClass::ALL {
        let gts: Vec<Vec<BBox>> = frames
            .iter()
            .map(|f| f.objects().into_iter().filter(|(c, _)| *c == class).map(|(_, b)| b).collect())
            .collect();
        let n_gt: usize = gts.iter().map(Vec::len).sum();
        if n_gt == 0 {
            continue;
        }
        let mut scored: Vec<(f64, usize, BBox)> = detections
            .iter()
            .enumerate()
            .flat_map(|(i, ds)| {
                ds.iter()
                    .filter(|d| d.class == class)
                    .map(move |d| (d.confidence, i, d.bbox))
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = Vec::with_capacity(scored.len());
        for (_, img, b) in &scored {
            let best = gts[*img]
                .iter()
                .enumerate()
                .map(|(j, g)| (j, iou_unchecked(b, g)))
                .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((j, v)),
                });
            match best {
                Some((j, v)) if v >= iou_threshold && !used[*img][j] => {
                    used[*img][j] = true;
                    tp.push(true);
                }
                _ => tp.push(false),
            }
        }
        per_class.push((class, average_precision(&tp, n_gt)));
    }
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|(_, ap)| ap).sum::<f64>() / per_class.len() as f64
    };
    Ok(MapReport { map, per_class })
}

/// All-point interpolated AP from a confidence-ranked true-positive sequence.
pub fn average_precision(tp_ranked: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut recall = vec![0.0];
    let mut precision = vec![1.0];
    let mut hits = 0usize;
    for (i, &t) in tp_ranked.iter().enumerate() {
        if t {
            hits += 1;
        }
        recall.push(hits as f64 / n_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (1..recall.len())
        .map(|i| (recall[i] - recall[i - 1]) * precision[i])
        .fold(0.0, |a, b| a + b)
}
