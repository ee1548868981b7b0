//! Attack success, the camera car's stop/proceed rule, and success-rate reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attack::{select_patch, PatchSet};
use crate::detector::{decode_detections, Detection, Detector};
use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, BBox};
use crate::harness::config::EvaluateSection;
use crate::par::Exec;
use crate::raster::Image;
use crate::scenesim::{rerender_with_patch, FrameRecord, ObjectClass, PhotometricModel, SceneConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Dynamic,
    Static,
    /// The screen shows its blank calibration color.
    None,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Dynamic, Method::Static, Method::None];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dynamic => "dynamic",
            Method::Static => "static",
            Method::None => "none",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Similar,
    Unseen,
}

impl Split {
    pub const ALL: [Split; 2] = [Split::Similar, Split::Unseen];

    pub fn name(self) -> &'static str {
        match self {
            Split::Similar => "similar",
            Split::Unseen => "unseen",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum DecisionOutcome {
    Proceed,
    Stop { trigger: Detection },
}

impl DecisionOutcome {
    pub fn is_stop(&self) -> bool {
        matches!(self, DecisionOutcome::Stop { .. })
    }
}

/// Whether one decoded detection counts as a stop sign at the expected place.
pub fn is_stop_at(d: &Detection, region: &BBox, criteria: &EvaluateSection) -> bool {
    d.class == ObjectClass::Stop
        && d.confidence > criteria.success_confidence
        && iou_unchecked(&d.bbox, region) > criteria.min_iou
}

/// Attack success on already decoded detections.
pub fn detections_succeed(detections: &[Detection], sign_box: &BBox, criteria: &EvaluateSection) -> bool {
    detections.iter().any(|d| is_stop_at(d, sign_box, criteria))
}

/// The camera car halts when a confident stop detection sits where map data expects a
/// sign. The most confident qualifying detection is reported as the trigger.
pub fn decision_rule(detections: &[Detection], expected_sign_region: &BBox, criteria: &EvaluateSection) -> DecisionOutcome {
    let mut trigger: Option<&Detection> = None;
    for d in detections {
        if d.class != ObjectClass::Stop || d.confidence <= criteria.success_confidence {
            continue;
        }
        if iou_unchecked(&d.bbox, expected_sign_region) <= criteria.min_iou {
            continue;
        }
        if trigger.is_none_or(|t| d.confidence > t.confidence) {
            trigger = Some(d);
        }
    }
    match trigger {
        Some(t) => DecisionOutcome::Stop { trigger: t.clone() },
        None => DecisionOutcome::Proceed,
    }
}

/// Shared inputs of per-frame evaluation.
pub struct EvalContext<'a> {
    pub scene: &'a SceneConfig,
    pub photometric: &'a PhotometricModel,
    pub detector: &'a Detector,
    pub patchset: &'a PatchSet,
    pub criteria: &'a EvaluateSection,
}

/// One evaluated (frame, method) pair, as written to the per-frame log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameLog {
    pub sign: ObjectClass,
    pub split: Split,
    pub method: Method,
    pub frame: usize,
    /// Cluster whose patch was shown, for the dynamic method.
    pub cluster: Option<usize>,
    pub skipped: Option<String>,
    pub success: bool,
    pub decision_stop: bool,
    /// Highest stop-class confidence among detections overlapping the sign box.
    pub stop_confidence: f64,
}

/// Renders the frame with the method's patch on the screen. Patches go through the
/// ground-truth photometric model, not the learned one.
pub fn render_for_method(frame: &FrameRecord, method: Method, ctx: &EvalContext) -> Result<(Image, Option<usize>)> {
    match method {
        Method::None => Ok((frame.image.clone(), None)),
        Method::Static => Ok((rerender_with_patch(ctx.scene, ctx.photometric, frame, &ctx.patchset.static_patch)?, None)),
        Method::Dynamic => {
            let m = &frame.measured;
            let patch = select_patch(ctx.patchset, &m.camera, &m.patch_car, &m.sign)?;
            let id = ctx.patchset.dynamic.iter().position(|p| std::ptr::eq(p, patch));
            Ok((rerender_with_patch(ctx.scene, ctx.photometric, frame, patch)?, id))
        }
    }
}

/// Applies the method, runs the detector and checks for a position-matched stop sign.
pub fn attack_success(frame: &FrameRecord, method: Method, ctx: &EvalContext) -> Result<bool> {
    let Some(sign_box) = frame.sign_box else {
        return Err(Error::validation("frame has no ground-truth sign box"));
    };
    if frame.screen_quad.is_none() {
        return Err(Error::validation("screen is not visible in this frame"));
    }
    let (image, _) = render_for_method(frame, method, ctx)?;
    let raw = ctx.detector.forward(&image)?;
    let dets = decode_detections(&raw, ctx.criteria.decode_confidence, ctx.criteria.nms_iou)?;
    Ok(detections_succeed(&dets, &sign_box, ctx.criteria))
}

fn evaluate_frame(
    frame: &FrameRecord,
    index: usize,
    split: Split,
    method: Method,
    ctx: &EvalContext,
) -> Result<FrameLog> {
    let mut log = FrameLog {
        sign: frame.spec.sign_class,
        split,
        method,
        frame: index,
        cluster: None,
        skipped: None,
        success: false,
        decision_stop: false,
        stop_confidence: 0.0,
    };
    let Some(sign_box) = frame.sign_box else {
        log.skipped = Some("no ground-truth sign box".to_string());
        return Ok(log);
    };
    if frame.screen_quad.is_none() {
        log.skipped = Some("screen not visible".to_string());
        return Ok(log);
    }
    let (image, cluster) = render_for_method(frame, method, ctx)?;
    log.cluster = cluster;
    let raw = ctx.detector.forward(&image)?;
    let dets = decode_detections(&raw, ctx.criteria.decode_confidence, ctx.criteria.nms_iou)?;
    log.success = detections_succeed(&dets, &sign_box, ctx.criteria);
    log.decision_stop = decision_rule(&dets, &sign_box, ctx.criteria).is_stop();
    log.stop_confidence = dets
        .iter()
        .filter(|d| d.class == ObjectClass::Stop && iou_unchecked(&d.bbox, &sign_box) > ctx.criteria.min_iou)
        .map(|d| d.confidence)
        .fold(0.0, f64::max);
    Ok(log)
}

/// Per-frame logs for every (frame, method) pair of one split.
pub fn evaluate_frames(
    frames: &[FrameRecord],
    split: Split,
    methods: &[Method],
    ctx: &EvalContext,
    exec: Exec,
) -> Result<Vec<FrameLog>> {
    let jobs: Vec<(usize, Method)> = (0..frames.len())
        .flat_map(|i| methods.iter().map(move |&m| (i, m)))
        .collect();
    exec.map(&jobs, |&(i, m)| evaluate_frame(&frames[i], i, split, m, ctx))
        .into_iter()
        .collect()
}

/// One (sign, split, method) cell of the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub sign: ObjectClass,
    pub split: Split,
    pub method: Method,
    pub frames: usize,
    pub skipped: usize,
    pub successes: usize,
    /// `None` when no frame was evaluated.
    pub success_rate: Option<f64>,
    pub mean_stop_confidence: Option<f64>,
    pub flip_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub cells: Vec<ReportCell>,
}

impl AttackReport {
    /// Aggregates per-frame logs. The report is a pure function of the logs.
    pub fn from_logs(logs: &[FrameLog]) -> Self {
        #[derive(Default)]
        struct Acc {
            frames: usize,
            skipped: usize,
            successes: usize,
            flips: usize,
            confidence: f64,
        }
        let mut acc: BTreeMap<(ObjectClass, Split, Method), Acc> = BTreeMap::new();
        for l in logs {
            let a = acc.entry((l.sign, l.split, l.method)).or_default();
            if l.skipped.is_some() {
                a.skipped += 1;
                continue;
            }
            a.frames += 1;
            a.successes += l.success as usize;
            a.flips += l.decision_stop as usize;
            a.confidence += l.stop_confidence;
        }
        let cells = acc
            .into_iter()
            .map(|((sign, split, method), a)| {
                let rate = |n: usize| (a.frames > 0).then(|| n as f64 / a.frames as f64);
                ReportCell {
                    sign,
                    split,
                    method,
                    frames: a.frames,
                    skipped: a.skipped,
                    successes: a.successes,
                    success_rate: rate(a.successes),
                    mean_stop_confidence: (a.frames > 0).then(|| a.confidence / a.frames as f64),
                    flip_rate: rate(a.flips),
                }
            })
            .collect();
        Self { cells }
    }

    pub fn cell(&self, sign: ObjectClass, split: Split, method: Method) -> Option<&ReportCell> {
        self.cells
            .iter()
            .find(|c| c.sign == sign && c.split == split && c.method == method)
    }

    fn signs(&self) -> Vec<ObjectClass> {
        let mut v: Vec<ObjectClass> = self.cells.iter().map(|c| c.sign).collect();
        v.sort();
        v.dedup();
        v
    }

    /// Human-readable table: one row per sign, columns per split and method, and a
    /// total-frames row.
    pub fn render_table(&self) -> String {
        let methods = [Method::Dynamic, Method::Static, Method::None];
        let mut out = String::new();
        let mut header = format!("{:<14}", "Sign");
        let mut sub = format!("{:<14}", "");
        for split in Split::ALL {
            let title = match split {
                Split::Similar => "Similar Env.",
                Split::Unseen => "Unseen Env.",
            };
            header.push_str(&format!("| {:<29}", title));
            for m in methods {
                sub.push_str(&format!("{}{:<9}", if m == Method::Dynamic { "| " } else { " " }, m.name()));
            }
        }
        out.push_str(header.trim_end());
        out.push('\n');
        out.push_str(sub.trim_end());
        out.push('\n');
        out.push_str(&"-".repeat(14 + 2 * 31));
        out.push('\n');
        let fmt_rate = |c: Option<&ReportCell>| match c.and_then(|c| c.success_rate) {
            Some(r) => format!("{:.1}%", 100.0 * r),
            None => "n/a".to_string(),
        };
        for sign in self.signs() {
            let mut row = format!("{:<14}", sign.display_name());
            for split in Split::ALL {
                for m in methods {
                    let lead = if m == Method::Dynamic { "| " } else { " " };
                    row.push_str(&format!("{lead}{:<9}", fmt_rate(self.cell(sign, split, m))));
                }
            }
            out.push_str(row.trim_end());
            out.push('\n');
        }
        let mut total = format!("{:<14}", "Total frames");
        for split in Split::ALL {
            for m in methods {
                let n: usize = self
                    .cells
                    .iter()
                    .filter(|c| c.split == split && c.method == m)
                    .map(|c| c.frames)
                    .sum();
                let lead = if m == Method::Dynamic { "| " } else { " " };
                total.push_str(&format!("{lead}{n:<9}"));
            }
        }
        out.push_str(total.trim_end());
        out.push('\n');
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellDelta {
    pub sign: ObjectClass,
    pub split: Split,
    pub dynamic: f64,
    pub static_rate: f64,
    pub delta: f64,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub cells: Vec<CellDelta>,
    /// Frame-weighted mean of the per-cell deltas, per split.
    pub margin: BTreeMap<Split, f64>,
}

/// Dynamic-minus-static success rates per populated cell.
pub fn compare_dynamic_static(report: &AttackReport) -> Result<Comparison> {
    let has = |m: Method| report.cells.iter().any(|c| c.method == m);
    if !has(Method::Dynamic) || !has(Method::Static) {
        return Err(Error::validation("report needs both dynamic and static results"));
    }
    let mut cells = Vec::new();
    for c in report.cells.iter().filter(|c| c.method == Method::Dynamic) {
        let Some(s) = report.cell(c.sign, c.split, Method::Static) else {
            continue;
        };
        let (Some(d), Some(st)) = (c.success_rate, s.success_rate) else {
            continue;
        };
        cells.push(CellDelta {
            sign: c.sign,
            split: c.split,
            dynamic: d,
            static_rate: st,
            delta: d - st,
            frames: c.frames,
        });
    }
    let mut margin = BTreeMap::new();
    for split in Split::ALL {
        let (num, den) = cells
            .iter()
            .filter(|c| c.split == split)
            .fold((0.0, 0usize), |(n, d), c| (n + c.delta * c.frames as f64, d + c.frames));
        if den > 0 {
            margin.insert(split, num / den as f64);
        }
    }
    Ok(Comparison { cells, margin })
}
