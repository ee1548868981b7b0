//! Stage orchestration with hashed, cached artifacts.
//!
//! Each stage writes into `<out>/<stage>/` and finishes by recording a `stage.json` with
//! the hash of its inputs (config sections plus upstream stage digests) and the SHA-256
//! of every file it wrote. `all` skips a stage whose record has a matching input hash
//! and whose files still hash to the recorded values.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{build_patchset_with, frame_feature_vector, kmeans_fit, ClusterModel, OptimizeResult, PatchSet};
use crate::detector::{train_detector_with, Detector, DetectorTrainConfig};
use crate::error::{Error, Result};
use crate::harness::config::{seed_tag, PipelineConfig};
use crate::harness::eval::{compare_dynamic_static, evaluate_frames, AttackReport, EvalContext, FrameLog, Method, Split};
use crate::harness::plot::{plot_convergence, plot_success_rates};
use crate::par::Exec;
use crate::raster::Image;
use crate::scenesim::{
    generate_driving_dataset_with, generate_screen_pairs, read_manifest, rerender_with_patch, write_manifest,
    FrameRecord, ObjectClass, TrajectorySpec,
};
use crate::sitnet::{train_sitnet_with, FeatureExtractor, SitNet, SitTrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Simulate,
    TrainDetector,
    TrainSitnet,
    Cluster,
    Optimize,
    Evaluate,
    Heatmap,
    All,
}

impl Stage {
    /// Execution order of `all`.
    pub const CHAIN: [Stage; 7] = [
        Stage::Simulate,
        Stage::TrainDetector,
        Stage::TrainSitnet,
        Stage::Cluster,
        Stage::Optimize,
        Stage::Evaluate,
        Stage::Heatmap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::TrainDetector => "train-detector",
            Stage::TrainSitnet => "train-sitnet",
            Stage::Cluster => "cluster",
            Stage::Optimize => "optimize",
            Stage::Evaluate => "evaluate",
            Stage::Heatmap => "heatmap",
            Stage::All => "all",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::CHAIN.into_iter().chain([Stage::All]).find(|s| s.name() == name)
    }

    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Simulate | Stage::All => &[],
            Stage::TrainDetector => &[Stage::Simulate],
            Stage::TrainSitnet => &[Stage::TrainDetector],
            Stage::Cluster => &[Stage::Simulate],
            Stage::Optimize => &[Stage::Cluster, Stage::TrainDetector, Stage::TrainSitnet],
            Stage::Evaluate | Stage::Heatmap => &[Stage::Optimize, Stage::TrainDetector, Stage::Simulate],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub input_hash: String,
    /// Path relative to the stage directory -> SHA-256 of the file.
    pub outputs: BTreeMap<String, String>,
    /// Wall-clock time of the run that produced the outputs.
    #[serde(default)]
    pub elapsed_secs: f64,
}

impl StageRecord {
    /// Hash over the recorded output hashes; what downstream stages key their inputs on.
    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(&self.outputs).expect("map serializes").as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: PipelineConfig,
    pub seed: u64,
    pub stages: BTreeMap<String, StageRecord>,
    /// Key artifacts: `dataset`, `detector`, `sitnet`, `patchset`, when present.
    pub artifacts: BTreeMap<String, String>,
    /// Stages executed in this invocation, as opposed to reused from the cache.
    pub executed: Vec<Stage>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn list_files(dir: &Path, prefix: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let rel = prefix.join(e.file_name());
        let path = e.path();
        if path.is_dir() {
            list_files(&path, &rel, out)?;
        } else {
            out.push(rel);
        }
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

const RECORD_FILE: &str = "stage.json";

/// Optimization curves of one scenario, persisted next to its patch set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeLog {
    pub sign: ObjectClass,
    pub cluster_frames: Vec<usize>,
    pub dynamic: Vec<OptimizeResult>,
    pub static_run: OptimizeResult,
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub out: PathBuf,
    pub exec: Exec,
    pub verbose: bool,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let out = config.run.out.clone();
        Ok(Self {
            config,
            out,
            exec: Exec::default(),
            verbose: false,
        })
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.out.join(stage.name())
    }

    fn note(&self, msg: &str) {
        if self.verbose {
            eprintln!("[dynpatch] {msg}");
        }
    }

    /// The record of a finished upstream stage, or a dependency error naming it.
    pub fn record(&self, stage: Stage) -> Result<StageRecord> {
        let path = self.stage_dir(stage).join(RECORD_FILE);
        if !path.exists() {
            return Err(Error::Dependency {
                stage: stage.name(),
                artifact: path,
            });
        }
        read_json(&path)
    }

    fn input_hash(&self, stage: Stage) -> Result<String> {
        let c = &self.config;
        let section = match stage {
            Stage::Simulate => serde_json::json!([c.run.seed, c.scene, c.photometric, c.dataset, c.attack.scenarios]),
            Stage::TrainDetector => serde_json::json!([c.run.seed, c.detector]),
            Stage::TrainSitnet => serde_json::json!([c.run.seed, c.scene, c.photometric, c.sitnet]),
            Stage::Cluster => serde_json::json!([
                c.run.seed,
                c.attack.scenarios,
                c.attack.clusters,
                c.attack.feature_space,
                c.attack.kmeans_seed
            ]),
            Stage::Optimize => serde_json::json!([c.run.seed, c.attack]),
            Stage::Evaluate => serde_json::json!([c.scene, c.photometric, c.evaluate]),
            Stage::Heatmap => serde_json::json!([c.scene, c.photometric, c.heatmap]),
            Stage::All => return Err(Error::validation("`all` has no inputs of its own")),
        };
        let mut h = Sha256::new();
        h.update(stage.name().as_bytes());
        h.update(serde_json::to_string(&section)?.as_bytes());
        for up in stage.upstream() {
            h.update(self.record(*up)?.digest().as_bytes());
        }
        Ok(hex::encode(h.finalize()))
    }

    fn cached(&self, stage: Stage, input_hash: &str) -> Result<Option<StageRecord>> {
        let Ok(rec) = self.record(stage) else {
            return Ok(None);
        };
        if rec.input_hash != input_hash {
            return Ok(None);
        }
        let dir = self.stage_dir(stage);
        for (rel, hash) in &rec.outputs {
            let p = dir.join(rel);
            if !p.exists() || hash_file(&p)? != *hash {
                return Ok(None);
            }
        }
        Ok(Some(rec))
    }

    /// Runs one stage (or the whole chain) and writes the run manifest.
    pub fn run(&self, stage: Stage) -> Result<RunManifest> {
        let started = unix_now();
        let mut executed = Vec::new();
        if stage == Stage::All {
            for s in Stage::CHAIN {
                let hash = self.input_hash(s)?;
                if self.cached(s, &hash)?.is_some() {
                    self.note(&format!("{}: cached", s.name()));
                    continue;
                }
                self.execute(s, hash)?;
                executed.push(s);
            }
        } else {
            let hash = self.input_hash(stage)?;
            self.execute(stage, hash)?;
            executed.push(stage);
        }
        let manifest = self.manifest(executed, started)?;
        write_json(&self.out.join("run_manifest.json"), &manifest)?;
        Ok(manifest)
    }

    fn manifest(&self, executed: Vec<Stage>, started: u64) -> Result<RunManifest> {
        let mut stages = BTreeMap::new();
        for s in Stage::CHAIN {
            if let Ok(rec) = self.record(s) {
                stages.insert(s.name().to_string(), rec);
            }
        }
        let mut artifacts = BTreeMap::new();
        let mut key = |name: &str, stage: Stage, file: Option<&str>| {
            if let Some(rec) = stages.get(stage.name()) {
                let value = match file {
                    Some(f) => rec.outputs.get(f).cloned(),
                    None => Some(rec.digest()),
                };
                if let Some(v) = value {
                    artifacts.insert(name.to_string(), v);
                }
            }
        };
        key("dataset", Stage::Simulate, None);
        key("detector", Stage::TrainDetector, Some("detector.bin"));
        key("sitnet", Stage::TrainSitnet, Some("sitnet.bin"));
        key("patchset", Stage::Optimize, None);
        Ok(RunManifest {
            config: self.config.clone(),
            seed: self.config.run.seed,
            stages,
            artifacts,
            executed,
            started_unix: started,
            finished_unix: unix_now(),
        })
    }

    fn execute(&self, stage: Stage, input_hash: String) -> Result<StageRecord> {
        let dir = self.stage_dir(stage);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        self.note(&format!("{}: running", stage.name()));
        let started = std::time::Instant::now();
        match stage {
            Stage::Simulate => self.simulate(&dir)?,
            Stage::TrainDetector => self.train_detector(&dir)?,
            Stage::TrainSitnet => self.train_sitnet(&dir)?,
            Stage::Cluster => self.cluster(&dir)?,
            Stage::Optimize => self.optimize(&dir)?,
            Stage::Evaluate => self.evaluate(&dir)?,
            Stage::Heatmap => self.heatmap(&dir)?,
            Stage::All => unreachable!("expanded by run"),
        }
        let mut files = Vec::new();
        list_files(&dir, Path::new(""), &mut files)?;
        let mut outputs = BTreeMap::new();
        for rel in files {
            let key = rel.to_string_lossy().replace('\\', "/");
            outputs.insert(key, hash_file(&dir.join(&rel))?);
        }
        let record = StageRecord {
            stage,
            input_hash,
            outputs,
            elapsed_secs: started.elapsed().as_secs_f64(),
        };
        write_json(&dir.join(RECORD_FILE), &record)?;
        self.note(&format!("{}: done", stage.name()));
        Ok(record)
    }

    fn dataset_dir(&self, name: &str) -> PathBuf {
        self.stage_dir(Stage::Simulate).join(name)
    }

    pub fn split_dir(&self, split: Split, sign: ObjectClass) -> PathBuf {
        self.dataset_dir(&format!("{}_{}", split.name(), sign.name()))
    }

    pub fn attack_dir(&self, sign: ObjectClass) -> PathBuf {
        self.dataset_dir(&format!("attack_{}", sign.name()))
    }

    fn simulate(&self, dir: &Path) -> Result<()> {
        let c = &self.config;
        let d = &c.dataset;
        let detector_traj = TrajectorySpec {
            sign_classes: c.scene.sign_classes.clone(),
            ..d.trajectory.clone()
        };
        let frames = generate_driving_dataset_with(
            &c.scene,
            &c.photometric,
            &detector_traj,
            d.detector_frames,
            c.seed(seed_tag::DETECTOR_DATA, 0),
            self.exec,
        )?;
        write_manifest(&dir.join("detector"), &frames)?;
        for &sign in &c.attack.scenarios {
            let tag = sign.index() as u64;
            let similar = TrajectorySpec {
                sign_classes: vec![sign],
                ..d.trajectory.clone()
            };
            let unseen = TrajectorySpec {
                sign_classes: vec![sign],
                ..d.unseen_trajectory()
            };
            for (traj, n, seed_base, target) in [
                (&similar, d.attack_frames, seed_tag::ATTACK_DATA, self.attack_dir(sign)),
                (&similar, d.similar_frames, seed_tag::SIMILAR_DATA, self.split_dir(Split::Similar, sign)),
                (&unseen, d.unseen_frames, seed_tag::UNSEEN_DATA, self.split_dir(Split::Unseen, sign)),
            ] {
                let frames =
                    generate_driving_dataset_with(&c.scene, &c.photometric, traj, n, c.seed(seed_base + tag, 0), self.exec)?;
                write_manifest(&target, &frames)?;
            }
        }
        Ok(())
    }

    fn load_detector(&self) -> Result<Detector> {
        let path = self.stage_dir(Stage::TrainDetector).join("detector.bin");
        if !path.exists() {
            return Err(Error::Dependency {
                stage: Stage::TrainDetector.name(),
                artifact: path,
            });
        }
        Ok(Detector::load(&path)?.0)
    }

    fn load_sitnet(&self) -> Result<SitNet> {
        let path = self.stage_dir(Stage::TrainSitnet).join("sitnet.bin");
        if !path.exists() {
            return Err(Error::Dependency {
                stage: Stage::TrainSitnet.name(),
                artifact: path,
            });
        }
        Ok(SitNet::load(&path)?.0)
    }

    fn load_frames(&self, dir: &Path) -> Result<Vec<FrameRecord>> {
        if !dir.join("manifest.jsonl").exists() {
            return Err(Error::Dependency {
                stage: Stage::Simulate.name(),
                artifact: dir.join("manifest.jsonl"),
            });
        }
        read_manifest(dir)
    }

    fn train_detector(&self, dir: &Path) -> Result<()> {
        let c = &self.config;
        let frames = self.load_frames(&self.dataset_dir("detector"))?;
        let train = DetectorTrainConfig {
            seed: c.seed(seed_tag::DETECTOR_TRAIN, c.detector.train.seed),
            ..c.detector.train.clone()
        };
        let (det, report) = train_detector_with(&frames, &c.detector.arch, &train, self.exec)?;
        let dataset_hash = self.record(Stage::Simulate)?.digest();
        det.save(&dir.join("detector.bin"), &det.meta(train.seed, &dataset_hash))?;
        write_json(&dir.join("train_report.json"), &report)
    }

    fn train_sitnet(&self, dir: &Path) -> Result<()> {
        let c = &self.config;
        let det = self.load_detector()?;
        let extractor = FeatureExtractor::from_detector(&det, c.sitnet.train.feature_cut)?;
        let pairs = generate_screen_pairs(&c.scene, &c.photometric, c.sitnet.pairs, c.seed(seed_tag::SCREEN_PAIRS, 0))?;
        let train = SitTrainConfig {
            seed: c.seed(seed_tag::SITNET, c.sitnet.train.seed),
            ..c.sitnet.train.clone()
        };
        let (net, report) = train_sitnet_with(&pairs, &extractor, &train, self.exec)?;
        net.save(&dir.join("sitnet.bin"), &net.meta(train.seed))?;
        write_json(&dir.join("train_report.json"), &report)
    }

    fn cluster(&self, dir: &Path) -> Result<()> {
        let c = &self.config;
        for &sign in &c.attack.scenarios {
            let frames = self.load_frames(&self.attack_dir(sign))?;
            let points: Vec<Vec<f64>> = frames
                .iter()
                .map(|f| frame_feature_vector(f, c.attack.feature_space))
                .collect::<Result<_>>()?;
            let mut model = kmeans_fit(&points, c.attack.clusters, c.seed(seed_tag::KMEANS, c.attack.kmeans_seed))?;
            model.space = c.attack.feature_space;
            model.save(&dir.join(format!("{}.json", sign.name())))?;
            let mut lines = String::new();
            for (i, p) in points.iter().enumerate() {
                let id = crate::attack::assign_cluster(&model, p);
                lines.push_str(&serde_json::to_string(&serde_json::json!({"frame": i, "cluster": id, "features": p}))?);
                lines.push('\n');
            }
            let path = dir.join(format!("{}_assignments.jsonl", sign.name()));
            std::fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn cluster_model(&self, sign: ObjectClass) -> Result<ClusterModel> {
        let path = self.stage_dir(Stage::Cluster).join(format!("{}.json", sign.name()));
        if !path.exists() {
            return Err(Error::Dependency {
                stage: Stage::Cluster.name(),
                artifact: path,
            });
        }
        ClusterModel::load(&path)
    }

    pub fn patchset(&self, sign: ObjectClass) -> Result<PatchSet> {
        let path = self.stage_dir(Stage::Optimize).join(sign.name());
        if !path.join("patchset.json").exists() {
            return Err(Error::Dependency {
                stage: Stage::Optimize.name(),
                artifact: path.join("patchset.json"),
            });
        }
        PatchSet::load(&path)
    }

    fn optimize(&self, dir: &Path) -> Result<()> {
        let c = &self.config;
        let det = self.load_detector()?;
        let sit = self.load_sitnet()?;
        let opt = crate::attack::OptimizerConfig {
            seed: c.seed(seed_tag::OPTIMIZER, c.attack.optimizer.seed),
            ..c.attack.optimizer.clone()
        };
        for &sign in &c.attack.scenarios {
            let model = self.cluster_model(sign)?;
            let mut frames = self.load_frames(&self.attack_dir(sign))?;
            for f in frames.iter_mut() {
                f.cluster_id = Some(crate::attack::assign_cluster(&model, &frame_feature_vector(f, model.space)?));
            }
            let refs: Vec<&FrameRecord> = frames.iter().collect();
            self.note(&format!("optimize: {} ({} frames)", sign.name(), refs.len()));
            let run = build_patchset_with(&refs, &model, &det, &sit, c.attack.patch_size, &opt, self.exec)?;
            run.patchset.save(&dir.join(sign.name()))?;
            let log = OptimizeLog {
                sign,
                cluster_frames: (0..model.k())
                    .map(|k| frames.iter().filter(|f| f.cluster_id == Some(k)).count())
                    .collect(),
                dynamic: run.dynamic_runs.clone(),
                static_run: run.static_run.clone(),
            };
            write_json(&dir.join(format!("{}_curves.json", sign.name())), &log)?;
            let curves: Vec<Vec<f64>> = run.dynamic_runs.iter().map(|r| r.curve.clone()).collect();
            plot_convergence(
                &dir.join(format!("{}_convergence.svg", sign.name())),
                &format!("{}: per-cluster vs. all-frames patch", sign.display_name()),
                &curves,
                &run.static_run.curve,
            )?;
        }
        Ok(())
    }

    fn evaluate(&self, dir: &Path) -> Result<()> {
        let c = &self.config;
        let det = self.load_detector()?;
        let mut logs: Vec<FrameLog> = Vec::new();
        for &sign in &c.attack.scenarios {
            let patchset = self.patchset(sign)?;
            let ctx = EvalContext {
                scene: &c.scene,
                photometric: &c.photometric,
                detector: &det,
                patchset: &patchset,
                criteria: &c.evaluate,
            };
            for split in Split::ALL {
                let frames = self.load_frames(&self.split_dir(split, sign))?;
                logs.extend(evaluate_frames(&frames, split, &Method::ALL, &ctx, self.exec)?);
            }
        }
        let mut lines = String::new();
        for l in &logs {
            lines.push_str(&serde_json::to_string(l)?);
            lines.push('\n');
        }
        let path = dir.join("frames.jsonl");
        std::fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
        let report = AttackReport::from_logs(&logs);
        write_json(&dir.join("report.json"), &report)?;
        let table = dir.join("report.txt");
        std::fs::write(&table, report.render_table()).map_err(|e| Error::io(&table, e))?;
        write_json(&dir.join("comparison.json"), &compare_dynamic_static(&report)?)?;
        plot_success_rates(&dir.join("success_rates.svg"), &report)
    }

    /// Per-frame logs written by `evaluate`.
    pub fn frame_logs(&self) -> Result<Vec<FrameLog>> {
        let path = self.stage_dir(Stage::Evaluate).join("frames.jsonl");
        if !path.exists() {
            return Err(Error::Dependency {
                stage: Stage::Evaluate.name(),
                artifact: path,
            });
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        text.lines()
            .map(|l| {
                serde_json::from_str(l).map_err(|e| Error::Format {
                    path: path.clone(),
                    msg: e.to_string(),
                })
            })
            .collect()
    }

    pub fn report(&self) -> Result<AttackReport> {
        read_json(&self.stage_dir(Stage::Evaluate).join("report.json"))
    }

    fn heatmap(&self, dir: &Path) -> Result<()> {
        let c = &self.config;
        let det = self.load_detector()?;
        for &sign in &c.attack.scenarios {
            let patchset = self.patchset(sign)?;
            let frames = self.load_frames(&self.split_dir(Split::Similar, sign))?;
            for (i, f) in frames.iter().take(c.heatmap.frames).enumerate() {
                let m = &f.measured;
                let patch = crate::attack::select_patch(&patchset, &m.camera, &m.patch_car, &m.sign)?;
                let attacked = rerender_with_patch(&c.scene, &c.photometric, f, patch)?;
                let mut tiles = Vec::with_capacity(4);
                for img in [&f.image, &attacked] {
                    let cam = det.eigencam(img, c.heatmap.layer)?;
                    tiles.push(img.clone());
                    tiles.push(overlay_heat(img, &cam));
                }
                hstack(&tiles).save_png(&dir.join(format!("{}_{i:02}.png", sign.name())))?;
            }
        }
        Ok(())
    }
}

/// Blends a `[0, 1]` heat map over the image, hot regions red and cold ones blue.
pub fn overlay_heat(image: &Image, heat: &Image) -> Image {
    let mut out = image.clone();
    let p = image.plane_len();
    for i in 0..p {
        let h = heat.data[i];
        let tint = [h, 0.2 * (1.0 - (2.0 * h - 1.0).abs()), 1.0 - h];
        for (ch, t) in tint.iter().enumerate() {
            let v = &mut out.data[ch * p + i];
            *v = 0.45 * *v + 0.55 * t;
        }
    }
    out.quantize_8bit();
    out
}

fn hstack(tiles: &[Image]) -> Image {
    let h = tiles[0].height;
    let w: usize = tiles.iter().map(|t| t.width).sum();
    let mut out = Image::zeros(3, h, w);
    let mut x0 = 0;
    for t in tiles {
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..t.width {
                    out.set(ch, y, x0 + x, t.get(ch, y, x));
                }
            }
        }
        x0 += t.width;
    }
    out
}
