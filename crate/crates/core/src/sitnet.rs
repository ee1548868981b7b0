//! Screen image transformation network: two convolutions that predict how a displayed
//! image looks once captured by the camera, and the loss used to train them.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{split_indices, Detector};
use crate::error::{Error, Result};
use crate::nn::{leaky_relu_backward, leaky_relu_inplace, sigmoid, Adam, Conv2d, ConvGrad};
use crate::par::Exec;
use crate::raster::Image;
use crate::scenesim::{derive_seed, ScreenPair};
use crate::store;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SitHead {
    /// Logistic squashing into `(0, 1)`.
    Sigmoid,
    /// Hard clamp to `[0, 1]`; mainly useful with identity initialization.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SitNet {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub head: SitHead,
}

pub struct SitTrace {
    col1: Vec<f64>,
    hidden: Image,
    col2: Vec<f64>,
    output: Image,
    pre_head: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SitGrad {
    pub conv1: ConvGrad,
    pub conv2: ConvGrad,
}

impl SitGrad {
    pub fn zeros_like(net: &SitNet) -> Self {
        Self {
            conv1: ConvGrad::zeros_like(&net.conv1),
            conv2: ConvGrad::zeros_like(&net.conv2),
        }
    }

    fn add(&mut self, other: &SitGrad) {
        self.conv1.add(&other.conv1);
        self.conv2.add(&other.conv2);
    }

    fn scale(&mut self, s: f64) {
        self.conv1.scale(s);
        self.conv2.scale(s);
    }

    fn buffers(&self) -> Vec<&Vec<f64>> {
        vec![&self.conv1.weight, &self.conv1.bias, &self.conv2.weight, &self.conv2.bias]
    }
}

impl SitNet {
    pub fn new(hidden: usize, kernel: usize, head: SitHead, seed: u64) -> Result<Self> {
        if hidden == 0 || kernel % 2 == 0 {
            return Err(Error::validation("hidden width must be positive and kernel odd"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            conv1: Conv2d::new(3, hidden, kernel, 1, &mut rng),
            conv2: Conv2d::new(hidden, 3, kernel, 1, &mut rng),
            head,
        })
    }

    /// Center-tap identity kernels: the first three hidden channels copy the input and the
    /// second layer copies them back.
    pub fn identity(hidden: usize, kernel: usize) -> Result<Self> {
        if hidden < 3 || kernel % 2 == 0 {
            return Err(Error::validation("identity needs at least 3 hidden channels and an odd kernel"));
        }
        let mut conv1 = Conv2d::zeros(3, hidden, kernel, 1);
        let mut conv2 = Conv2d::zeros(hidden, 3, kernel, 1);
        let c = kernel / 2;
        for i in 0..3 {
            let a = conv1.weight_index(i, i, c, c);
            conv1.weight[a] = 1.0;
            let b = conv2.weight_index(i, i, c, c);
            conv2.weight[b] = 1.0;
        }
        Ok(Self {
            conv1,
            conv2,
            head: SitHead::Linear,
        })
    }

    fn param_buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        vec![
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
        ]
    }

    fn param_sizes(&self) -> Vec<usize> {
        vec![
            self.conv1.weight.len(),
            self.conv1.bias.len(),
            self.conv2.weight.len(),
            self.conv2.bias.len(),
        ]
    }

    pub fn forward(&self, image: &Image) -> Result<Image> {
        Ok(self.forward_trace(image)?.0)
    }

    pub fn forward_trace(&self, image: &Image) -> Result<(Image, SitTrace)> {
        if image.channels != 3 {
            return Err(Error::shape("3 channels", image.channels));
        }
        image.validate_unit_range("SIT-Net input")?;
        let (mut hidden, col1) = self.conv1.forward(image)?;
        leaky_relu_inplace(&mut hidden);
        let (pre_head, col2) = self.conv2.forward(&hidden)?;
        let mut output = pre_head.clone();
        match self.head {
            SitHead::Sigmoid => output.data.iter_mut().for_each(|v| *v = sigmoid(*v)),
            SitHead::Linear => output.clamp_unit(),
        }
        Ok((
            output.clone(),
            SitTrace {
                col1,
                hidden,
                col2,
                output,
                pre_head,
            },
        ))
    }

    pub fn backward(
        &self,
        trace: &SitTrace,
        grad_out: &Image,
        mut grads: Option<&mut SitGrad>,
        need_input: bool,
    ) -> Option<Image> {
        let mut g = grad_out.clone();
        match self.head {
            SitHead::Sigmoid => {
                for (gv, s) in g.data.iter_mut().zip(&trace.output.data) {
                    *gv *= s * (1.0 - s);
                }
            }
            SitHead::Linear => {
                for (gv, y) in g.data.iter_mut().zip(&trace.pre_head.data) {
                    if !(0.0..=1.0).contains(y) {
                        *gv = 0.0;
                    }
                }
            }
        }
        let (h, w) = (g.height, g.width);
        let mut dh = self
            .conv2
            .backward(&trace.col2, (h, w), &g, grads.as_deref_mut().map(|g| &mut g.conv2), true)
            .expect("input gradient requested");
        leaky_relu_backward(&trace.hidden, &mut dh);
        self.conv1
            .backward(&trace.col1, (h, w), &dh, grads.map(|g| &mut g.conv1), need_input)
    }

    pub fn save(&self, path: &std::path::Path, meta: &SitNetMeta) -> Result<()> {
        let arrays = vec![
            ("conv1.weight".to_string(), self.conv1.weight.clone()),
            ("conv1.bias".to_string(), self.conv1.bias.clone()),
            ("conv2.weight".to_string(), self.conv2.weight.clone()),
            ("conv2.bias".to_string(), self.conv2.bias.clone()),
        ];
        store::save(path, &arrays, meta)
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, SitNetMeta)> {
        let (mut arrays, meta): (_, SitNetMeta) = store::load(path)?;
        if meta.format != SITNET_FORMAT {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("expected format `{SITNET_FORMAT}`, found `{}`", meta.format),
            });
        }
        let mut net = SitNet::new(meta.hidden, meta.kernel, meta.head, 0)?;
        let names = ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias"];
        for (buf, name) in net.param_buffers_mut().into_iter().zip(names) {
            *buf = store::take_array(&mut arrays, name, buf.len(), path)?;
        }
        Ok((net, meta))
    }

    pub fn meta(&self, seed: u64) -> SitNetMeta {
        SitNetMeta {
            format: SITNET_FORMAT.to_string(),
            hidden: self.conv1.out_channels,
            kernel: self.conv1.kernel,
            head: self.head,
            seed,
        }
    }
}

pub const SITNET_FORMAT: &str = "dynpatch-sitnet";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SitNetMeta {
    pub format: String,
    pub hidden: usize,
    pub kernel: usize,
    pub head: SitHead,
    pub seed: u64,
}

/// Frozen early convolution blocks of a detector.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    blocks: Vec<Conv2d>,
}

pub struct FeatureTrace {
    cols: Vec<Vec<f64>>,
    input_hw: Vec<(usize, usize)>,
    activations: Vec<Image>,
}

impl FeatureExtractor {
    /// Blocks `0..cut` of `detector`.
    pub fn from_detector(detector: &Detector, cut: usize) -> Result<Self> {
        if cut == 0 || cut > detector.blocks.len() {
            return Err(Error::validation(format!(
                "feature cut {cut} must be in 1..={}",
                detector.blocks.len()
            )));
        }
        Ok(Self {
            blocks: detector.blocks[..cut].to_vec(),
        })
    }

    pub fn forward(&self, image: &Image) -> Result<(Image, FeatureTrace)> {
        let mut cols = Vec::new();
        let mut input_hw = Vec::new();
        let mut activations: Vec<Image> = Vec::new();
        for (i, conv) in self.blocks.iter().enumerate() {
            let x = if i == 0 { image } else { &activations[i - 1] };
            input_hw.push((x.height, x.width));
            let (mut y, col) = conv.forward(x)?;
            leaky_relu_inplace(&mut y);
            cols.push(col);
            activations.push(y);
        }
        let out = activations.last().expect("non-empty cut").clone();
        Ok((
            out,
            FeatureTrace {
                cols,
                input_hw,
                activations,
            },
        ))
    }

    pub fn backward(&self, trace: &FeatureTrace, grad: &Image) -> Image {
        let mut d = grad.clone();
        for i in (0..self.blocks.len()).rev() {
            leaky_relu_backward(&trace.activations[i], &mut d);
            d = self.blocks[i]
                .backward(&trace.cols[i], trace.input_hw[i], &d, None, true)
                .expect("input gradient requested");
        }
        d
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    /// Divide the total-variation sum by the number of image elements.
    pub tv_per_element: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.02,
            beta: 0.01,
            tv_per_element: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::validation("loss weights must be non-negative"));
        }
        Ok(())
    }
}

pub fn mse_loss(pred: &Image, target: &Image) -> Result<f64> {
    pred.ensure_same_shape(target)?;
    let n = pred.data.len().max(1) as f64;
    Ok(pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

fn mse_grad(pred: &Image, target: &Image) -> Image {
    let n = pred.data.len().max(1) as f64;
    let mut g = pred.clone();
    for (gv, t) in g.data.iter_mut().zip(&target.data) {
        *gv = 2.0 * (*gv - t) / n;
    }
    g
}

pub fn perceptual_loss(extractor: &FeatureExtractor, pred: &Image, target: &Image) -> Result<f64> {
    pred.ensure_same_shape(target)?;
    let (fp, _) = extractor.forward(pred)?;
    let (ft, _) = extractor.forward(target)?;
    mse_loss(&fp, &ft)
}

/// Sum of absolute horizontal and vertical neighbor differences over all channels.
pub fn tv_loss(image: &Image) -> f64 {
    let (h, w) = (image.height, image.width);
    let mut total = 0.0;
    for c in 0..image.channels {
        let p = image.plane(c);
        for y in 0..h {
            for x in 0..w {
                let v = p[y * w + x];
                if x + 1 < w {
                    total += (p[y * w + x + 1] - v).abs();
                }
                if y + 1 < h {
                    total += (p[(y + 1) * w + x] - v).abs();
                }
            }
        }
    }
    total
}

fn tv_grad(image: &Image, scale: f64) -> Image {
    let (h, w) = (image.height, image.width);
    let mut g = Image::zeros(image.channels, h, w);
    for c in 0..image.channels {
        let p = image.plane(c);
        let gp = g.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                for j in [(x + 1 < w).then_some(i + 1), (y + 1 < h).then_some(i + w)]
                    .into_iter()
                    .flatten()
                {
                    let d = p[j] - p[i];
                    let s = if d > 0.0 {
                        scale
                    } else if d < 0.0 {
                        -scale
                    } else {
                        0.0
                    };
                    gp[j] += s;
                    gp[i] -= s;
                }
            }
        }
    }
    g
}

fn tv_term(image: &Image, weights: &LossWeights) -> (f64, f64) {
    let scale = if weights.tv_per_element {
        1.0 / image.data.len().max(1) as f64
    } else {
        1.0
    };
    (tv_loss(image) * scale, scale)
}

/// `mse + alpha * perceptual + beta * tv`.
pub fn combined_loss(
    weights: &LossWeights,
    extractor: &FeatureExtractor,
    pred: &Image,
    target: &Image,
) -> Result<f64> {
    weights.validate()?;
    let mse = mse_loss(pred, target)?;
    let perceptual = if weights.alpha > 0.0 {
        perceptual_loss(extractor, pred, target)?
    } else {
        0.0
    };
    Ok(mse + weights.alpha * perceptual + weights.beta * tv_term(pred, weights).0)
}

/// Combined loss and its gradient with respect to `pred`.
pub fn combined_loss_grad(
    weights: &LossWeights,
    extractor: &FeatureExtractor,
    pred: &Image,
    target: &Image,
) -> Result<(f64, Image)> {
    weights.validate()?;
    let mse = mse_loss(pred, target)?;
    let mut grad = mse_grad(pred, target);
    let mut loss = mse;
    if weights.alpha > 0.0 {
        let (fp, trace) = extractor.forward(pred)?;
        let (ft, _) = extractor.forward(target)?;
        loss += weights.alpha * mse_loss(&fp, &ft)?;
        let mut gf = mse_grad(&fp, &ft);
        gf.data.iter_mut().for_each(|v| *v *= weights.alpha);
        for (a, b) in grad.data.iter_mut().zip(&extractor.backward(&trace, &gf).data) {
            *a += b;
        }
    }
    if weights.beta > 0.0 {
        let (tv, scale) = tv_term(pred, weights);
        loss += weights.beta * tv;
        for (a, b) in grad.data.iter_mut().zip(&tv_grad(pred, weights.beta * scale).data) {
            *a += b;
        }
    }
    Ok((loss, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SitTrainConfig {
    pub hidden: usize,
    pub kernel: usize,
    pub head: SitHead,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub weights: LossWeights,
    /// Number of detector blocks used as the perceptual feature extractor.
    pub feature_cut: usize,
}

impl Default for SitTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            kernel: 3,
            head: SitHead::Sigmoid,
            epochs: 50,
            lr: 1e-3,
            batch_size: 16,
            seed: 0,
            val_fraction: 0.2,
            weights: LossWeights::default(),
            feature_cut: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SitTrainReport {
    /// Mean combined loss over the training split, per epoch.
    pub train_loss: Vec<f64>,
    /// Combined loss on the validation split after each epoch.
    pub val_loss: Vec<f64>,
    pub val_mse: Vec<f64>,
    /// Validation MSE of predicting the displayed image unchanged.
    pub baseline_mse: f64,
    pub n_train: usize,
    pub n_val: usize,
}

pub fn train_sitnet(
    pairs: &[ScreenPair],
    extractor: &FeatureExtractor,
    cfg: &SitTrainConfig,
) -> Result<(SitNet, SitTrainReport)> {
    train_sitnet_with(pairs, extractor, cfg, Exec::default())
}

pub fn train_sitnet_with(
    pairs: &[ScreenPair],
    extractor: &FeatureExtractor,
    cfg: &SitTrainConfig,
    exec: Exec,
) -> Result<(SitNet, SitTrainReport)> {
    if pairs.is_empty() {
        return Err(Error::validation("SIT-Net training needs at least one pair"));
    }
    cfg.weights.validate()?;
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(Error::validation("invalid SIT-Net training configuration"));
    }
    for p in pairs {
        p.displayed.ensure_same_shape(&p.captured)?;
    }
    let mut net = SitNet::new(cfg.hidden, cfg.kernel, cfg.head, cfg.seed)?;
    let (mut train_idx, val_idx) = split_indices(pairs.len(), cfg.val_fraction, cfg.seed);
    let mut adam = Adam::new(cfg.lr, &net.param_sizes());
    let baseline_mse = mean_over(&val_idx, |i| mse_loss(&pairs[i].displayed, &pairs[i].captured))?;
    let mut report = SitTrainReport {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        val_mse: Vec::new(),
        baseline_mse,
        n_train: train_idx.len(),
        n_val: val_idx.len(),
    };
    for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64)));
        let mut total = 0.0;
        for batch in train_idx.chunks(cfg.batch_size) {
            let net_ref = &net;
            let results = exec.map(batch, |&i| -> Result<(f64, SitGrad)> {
                let (pred, trace) = net_ref.forward_trace(&pairs[i].displayed)?;
                let (loss, g) = combined_loss_grad(&cfg.weights, extractor, &pred, &pairs[i].captured)?;
                let mut grads = SitGrad::zeros_like(net_ref);
                net_ref.backward(&trace, &g, Some(&mut grads), false);
                Ok((loss, grads))
            });
            let mut sum = SitGrad::zeros_like(&net);
            for r in results {
                let (loss, g) = r?;
                total += loss;
                sum.add(&g);
            }
            sum.scale(1.0 / batch.len() as f64);
            adam.step(net.param_buffers_mut(), sum.buffers());
        }
        let train_loss = total / train_idx.len().max(1) as f64;
        if !train_loss.is_finite() {
            return Err(Error::Estimation(format!("SIT-Net loss diverged at epoch {epoch}")));
        }
        report.train_loss.push(train_loss);
        let preds: Vec<Result<Image>> = exec.map(&val_idx, |&i| net.forward(&pairs[i].displayed));
        let preds: Vec<Image> = preds.into_iter().collect::<Result<_>>()?;
        let (mut mse, mut combined) = (0.0, 0.0);
        for (pred, &i) in preds.iter().zip(&val_idx) {
            mse += mse_loss(pred, &pairs[i].captured)?;
            combined += combined_loss(&cfg.weights, extractor, pred, &pairs[i].captured)?;
        }
        let n_val = val_idx.len().max(1) as f64;
        report.val_mse.push(mse / n_val);
        report.val_loss.push(combined / n_val);
    }
    Ok((net, report))
}

fn mean_over(idx: &[usize], f: impl Fn(usize) -> Result<f64>) -> Result<f64> {
    if idx.is_empty() {
        return Ok(0.0);
    }
    let mut s = 0.0;
    for &i in idx {
        s += f(i)?;
    }
    Ok(s / idx.len() as f64)
}

/// Whether the means of consecutive non-overlapping windows of `width` never increase.
pub fn windowed_non_increasing(curve: &[f64], width: usize) -> bool {
    let means: Vec<f64> = curve
        .chunks_exact(width.max(1))
        .map(|w| w.iter().sum::<f64>() / w.len() as f64)
        .collect();
    means.windows(2).all(|p| p[1] <= p[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorConfig;
    use rand::Rng;

    fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = Image::zeros(c, h, w);
        img.data.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
        img
    }

    fn extractor() -> FeatureExtractor {
        let det = Detector::new(DetectorConfig::default()).unwrap();
        FeatureExtractor::from_detector(&det, 2).unwrap()
    }

    #[test]
    fn identity_network_reproduces_input() {
        let net = SitNet::identity(16, 3).unwrap();
        let img = random_image(3, 12, 9, 1);
        let out = net.forward(&img).unwrap();
        assert!(out.same_shape(&img));
        assert!(out.data.iter().zip(&img.data).all(|(a, b)| (a - b).abs() < 1e-6));
        let net = SitNet::new(16, 3, SitHead::Sigmoid, 4).unwrap();
        assert_eq!(net.forward(&img).unwrap(), net.forward(&img).unwrap());
        assert!(net.forward(&random_image(1, 4, 4, 1)).is_err());
    }

    #[test]
    fn loss_examples() {
        let a = random_image(3, 5, 6, 2);
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b.data.iter_mut().for_each(|v| *v += 1.0);
        assert!((mse_loss(&b, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(mse_loss(&a, &random_image(3, 5, 5, 2)).is_err());

        let one = Image::from_vec(1, 1, 2, vec![0.0, 1.0]).unwrap();
        assert_eq!(tv_loss(&one), 1.0);
        let checker = Image::from_vec(1, 2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(tv_loss(&checker), 4.0);
        assert_eq!(tv_loss(&Image::filled(3, 4, 4, 0.3)), 0.0);
        assert_eq!(tv_loss(&Image::zeros(3, 1, 1)), 0.0);
    }

    #[test]
    fn combined_loss_composes() {
        let ex = extractor();
        let (p, t) = (random_image(3, 16, 16, 3), random_image(3, 16, 16, 4));
        for per_element in [false, true] {
            let w = LossWeights {
                alpha: 0.02,
                beta: 0.01,
                tv_per_element: per_element,
            };
            let scale = if per_element { 1.0 / p.data.len() as f64 } else { 1.0 };
            let expected = mse_loss(&p, &t).unwrap()
                + 0.02 * perceptual_loss(&ex, &p, &t).unwrap()
                + 0.01 * tv_loss(&p) * scale;
            assert!((combined_loss(&w, &ex, &p, &t).unwrap() - expected).abs() < 1e-12);
            assert!((combined_loss(&w, &ex, &p, &p).unwrap() - 0.01 * tv_loss(&p) * scale).abs() < 1e-12);
        }
        let zero = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            tv_per_element: false,
        };
        assert_eq!(combined_loss(&zero, &ex, &p, &t).unwrap(), mse_loss(&p, &t).unwrap());
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let ex = extractor();
        let mut net = SitNet::new(16, 3, SitHead::Sigmoid, 7).unwrap();
        let (x, t) = (random_image(3, 12, 12, 5), random_image(3, 12, 12, 6));
        let w = LossWeights {
            tv_per_element: false,
            ..LossWeights::default()
        };
        let loss_of = |net: &SitNet| combined_loss(&w, &ex, &net.forward(&x).unwrap(), &t).unwrap();
        let (pred, trace) = net.forward_trace(&x).unwrap();
        let (_, g) = combined_loss_grad(&w, &ex, &pred, &t).unwrap();
        let mut grads = SitGrad::zeros_like(&net);
        net.backward(&trace, &g, Some(&mut grads), false);
        let analytic: Vec<f64> = grads.buffers().into_iter().flatten().copied().collect();
        let eps = 1e-6;
        let mut checked = 0;
        let mut good = 0;
        for k in (0..analytic.len()).step_by(11) {
            let mut offset = k;
            let mut slot = 0;
            let sizes = net.param_sizes();
            while offset >= sizes[slot] {
                offset -= sizes[slot];
                slot += 1;
            }
            let orig = net.param_buffers_mut()[slot][offset];
            net.param_buffers_mut()[slot][offset] = orig + eps;
            let fp = loss_of(&net);
            net.param_buffers_mut()[slot][offset] = orig - eps;
            let fm = loss_of(&net);
            net.param_buffers_mut()[slot][offset] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let rel = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(1e-9);
            checked += 1;
            if rel < 1e-3 {
                good += 1;
            }
        }
        assert!(good as f64 >= 0.95 * checked as f64, "{good}/{checked}");
    }

    #[test]
    fn tv_is_mirror_invariant() {
        let img = random_image(2, 5, 7, 8);
        let mut flipped = img.clone();
        for c in 0..2 {
            for y in 0..5 {
                for x in 0..7 {
                    flipped.set(c, 4 - y, 6 - x, img.get(c, y, x));
                }
            }
        }
        assert!((tv_loss(&img) - tv_loss(&flipped)).abs() < 1e-12);
    }

    #[test]
    fn window_check() {
        assert!(windowed_non_increasing(&[5.0, 4.0, 6.0, 3.0], 2));
        assert!(!windowed_non_increasing(&[1.0, 1.0, 2.0, 2.0], 2));
    }

    #[test]
    fn persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sit.bin");
        let net = SitNet::new(16, 3, SitHead::Sigmoid, 2).unwrap();
        net.save(&path, &net.meta(2)).unwrap();
        assert_eq!(SitNet::load(&path).unwrap().0, net);
    }

    proptest::proptest! {
        #[test]
        fn tv_loss_is_nonnegative_and_shift_invariant(seed in 0u64..10_000, shift in -2.0..2.0f64) {
            let img = random_image(2, 5, 6, seed);
            let tv = tv_loss(&img);
            proptest::prop_assert!(tv >= 0.0);
            let mut moved = img.clone();
            moved.data.iter_mut().for_each(|v| *v += shift);
            proptest::prop_assert!((tv_loss(&moved) - tv).abs() < 1e-9);
            proptest::prop_assert_eq!(tv_loss(&Image::filled(2, 5, 6, shift)), 0.0);
        }
    }
}
