//! Declarative run configs and the resumable stage runner.
//!
//! A run goes through six stages, each writing only under
//! `<output_dir>/<stage>/`:
//!
//! | stage      | reads                          | writes                                   |
//! |------------|--------------------------------|------------------------------------------|
//! | `synth`    | scenes or GBUF directories     | `synth/{source,target}/view_NNN.gbuf`    |
//! | `features` | synth                          | `features/{source,target}/view_NNN.feat` |
//! | `match`    | synth, features                | correspondence, samples, edge references |
//! | `train`    | synth, match                   | `train/field.nfld`, `train/loss.csv`     |
//! | `render`   | synth, train                   | test-view and trajectory PNGs            |
//! | `eval`     | synth, train                   | `eval/metrics.csv`, `eval/summary.txt`   |
//!
//! `manifest.json` records, per stage, a key (hash of the stage's config
//! slice and input file hashes) plus input and output file hashes. A stage
//! whose key matches the previous manifest and whose outputs are still on
//! disk unchanged is skipped. Wall times go to `timings.json`, so the
//! manifest itself only depends on content.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::correspondence::{
    assemble_training_set, build_mapping, prealign, sample_points, score_histogram_image, transferred_image,
    PrealignConfig, RigidTransform, DEFAULT_K, DEFAULT_PER_VIEW, DEFAULT_VIEWS,
};
use crate::eval::{bootstrap_metrics, direct_metrics, make_split, with_alpha, Protocol, Split, SplitSpec};
use crate::features::{builtin_descriptor, Bounds, DescriptorConfig, FeatureMap};
use crate::field::load_checkpoint;
use crate::io;
use crate::raster::Image;
use crate::scene::{
    circular_trajectory, presets, render_gbuffer, sample_camera_sphere, GBufferView, Intrinsics, SceneDescription,
};
use crate::training::{geometry_reference, render_field, train, EdgeReference, EdgeView, TrainConfig};

pub const STAGES: [&str; 6] = ["synth", "features", "match", "train", "render", "eval"];
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMINGS_FILE: &str = "timings.json";

/// Bundled smoke-test run config and its scene.
pub const SMOKE_CONFIG: &str = include_str!("../configs/smoke.toml");
pub const SMOKE_SCENE: &str = include_str!("../configs/smoke_scene.toml");
/// Shipped default config (full-size settings).
pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl PipelineError {
    /// Process exit status for this error: 2 for config, 3 for stage failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            _ => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

/// Scene presets addressable by name from config files.
pub fn preset_by_name(name: &str) -> Option<SceneDescription> {
    match name {
        "checker_pair" => Some(presets::checker_pair()),
        "two_spheres" => Some(presets::two_spheres()),
        "torus_cone" => Some(presets::torus_cone()),
        "smoke" => Some(SceneDescription::from_toml_str(SMOKE_SCENE).expect("bundled scene parses")),
        _ => None,
    }
}

pub const PRESET_NAMES: [&str; 4] = ["checker_pair", "two_spheres", "torus_cone", "smoke"];

/// Where a view set comes from: exactly one of `preset`, `scene` or `gbuf_dir`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewSetConfig {
    pub preset: Option<String>,
    pub scene: Option<PathBuf>,
    pub gbuf_dir: Option<PathBuf>,
    /// FEAT files, one per view in name order (external feature backend).
    pub features_dir: Option<PathBuf>,
    pub camera_seed: Option<u64>,
    /// Replace every texture with a constant albedo before rendering.
    pub untextured: bool,
}

pub const UNTEXTURED_ALBEDO: [f64; 3] = [0.7, 0.7, 0.7];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub radius: f64,
    pub width: u32,
    pub height: u32,
    pub fov_deg: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self { radius: 3.5, width: 64, height: 64, fov_deg: 40.0 }
    }
}

impl CameraConfig {
    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics { fov_y: self.fov_deg.to_radians(), width: self.width, height: self.height }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureBackend {
    #[default]
    Builtin,
    External,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureStageConfig {
    pub backend: FeatureBackend,
    pub descriptor: DescriptorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    /// Train views per object used for the clouds.
    pub views: usize,
    pub per_view: usize,
    pub k: usize,
    pub prealign: bool,
    pub search: PrealignConfig,
    /// Target train views that get a dense transferred image for the edge loss.
    pub edge_views: usize,
    pub histogram_bins: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            views: DEFAULT_VIEWS,
            per_view: DEFAULT_PER_VIEW,
            k: DEFAULT_K,
            prealign: false,
            search: PrealignConfig::default(),
            edge_views: 16,
            histogram_bins: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub trajectory_views: usize,
    pub elevation_deg: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { trajectory_views: 80, elevation_deg: 30.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub protocol: Protocol,
    pub split: SplitSpec,
    /// Training settings for the bootstrap refit; the main `train` table
    /// is used when absent.
    pub refit: Option<TrainConfig>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { protocol: Protocol::Bootstrapped, split: SplitSpec::default(), refit: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub source: ViewSetConfig,
    pub target: ViewSetConfig,
    #[serde(default)]
    pub cameras: CameraConfig,
    #[serde(default)]
    pub features: FeatureStageConfig,
    #[serde(default)]
    pub correspondence: MatchConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub render: RenderConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn mix_seed(global: u64, tag: u64) -> u64 {
    global.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(tag)
}

impl RunConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| PipelineError::Config(vec![e.to_string()]))?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, &base)
    }

    /// The bundled smoke config, writing into `output_dir`.
    pub fn smoke(output_dir: &Path) -> Self {
        let mut cfg = Self::from_toml_str(SMOKE_CONFIG, Path::new(".")).expect("bundled config parses");
        cfg.output_dir = output_dir.to_path_buf();
        cfg
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn refit_config(&self) -> TrainConfig {
        self.eval.refit.clone().unwrap_or_else(|| self.train.clone())
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec { seed: mix_seed(self.seed, self.eval.split.seed), ..self.eval.split }
    }

    fn view_set_problems(&self, name: &str, set: &ViewSetConfig, out: &mut Vec<String>) {
        let sources = [set.preset.is_some(), set.scene.is_some(), set.gbuf_dir.is_some()];
        if sources.iter().filter(|b| **b).count() != 1 {
            out.push(format!("{name}: set exactly one of preset, scene, gbuf_dir"));
        }
        if let Some(p) = &set.preset {
            if preset_by_name(p).is_none() {
                out.push(format!("{name}.preset: unknown preset `{p}` (known: {})", PRESET_NAMES.join(", ")));
            }
        }
        if let Some(s) = &set.scene {
            let path = self.resolve(s);
            match SceneDescription::load(&path) {
                Ok(_) => {}
                Err(crate::scene::SceneError::Io(e)) => out.push(format!("{name}.scene: {}: {e}", path.display())),
                Err(e) => out.push(format!("{name}.scene: {e}")),
            }
        }
        if let Some(d) = &set.gbuf_dir {
            let dir = self.resolve(d);
            match list_files(&dir, "gbuf") {
                Ok(files) if files.len() != self.eval.split.total => out.push(format!(
                    "{name}.gbuf_dir: {} holds {} GBUF files but eval.split.total is {}",
                    dir.display(),
                    files.len(),
                    self.eval.split.total
                )),
                Ok(_) => {}
                Err(e) => out.push(format!("{name}.gbuf_dir: {e}")),
            }
        }
        match (self.features.backend, &set.features_dir) {
            (FeatureBackend::External, None) => {
                out.push(format!("{name}.features_dir: required by features.backend = \"external\""))
            }
            (_, Some(d)) => {
                let dir = self.resolve(d);
                match list_files(&dir, "feat") {
                    Ok(files) if files.len() != self.eval.split.total => out.push(format!(
                        "{name}.features_dir: {} holds {} FEAT files but eval.split.total is {}",
                        dir.display(),
                        files.len(),
                        self.eval.split.total
                    )),
                    Ok(_) => {}
                    Err(e) => out.push(format!("{name}.features_dir: {e}")),
                }
            }
            _ => {}
        }
    }

    /// Every invariant violation, prefixed with its field path.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.view_set_problems("source", &self.source, &mut out);
        self.view_set_problems("target", &self.target, &mut out);
        let c = &self.cameras;
        if !(c.radius > 0.0) {
            out.push("cameras.radius: must be > 0".into());
        }
        if !(c.fov_deg > 0.0 && c.fov_deg < 180.0) {
            out.push("cameras.fov_deg: must be in (0, 180)".into());
        }
        if c.width < 8 || c.height < 8 {
            out.push("cameras.width, cameras.height: must be >= 8 (SSIM window)".into());
        }
        if let Err(e) = self.features.descriptor.validate() {
            out.push(format!("features.descriptor: {e}"));
        }
        let m = &self.correspondence;
        for (field, v) in [("views", m.views), ("per_view", m.per_view), ("k", m.k), ("histogram_bins", m.histogram_bins)] {
            if v == 0 {
                out.push(format!("correspondence.{field}: must be >= 1"));
            }
        }
        if m.prealign && m.search.yaw_steps == 0 {
            out.push("correspondence.search.yaw_steps: must be >= 1".into());
        }
        out.extend(self.train.problems("train"));
        if let Some(r) = &self.eval.refit {
            out.extend(r.problems("eval.refit"));
        }
        if let Err(e) = self.eval.split.validate() {
            out.push(format!("eval.split: {e}"));
        }
        if self.eval.split.train == 0 || self.eval.split.test == 0 {
            out.push("eval.split: train and test parts must be non-empty".into());
        }
        if self.render.trajectory_views > 0 && !(self.render.elevation_deg.abs() < 90.0) {
            out.push("render.elevation_deg: must be in (-90, 90)".into());
        }
        out
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(PipelineError::Config(p))
        }
    }

    fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        serde_json::to_string(&c).expect("config serializes")
    }
}

/// Loads and checks a config file without touching anything on disk.
pub fn validate_config(path: &Path) -> Result<RunConfig, PipelineError> {
    let cfg = RunConfig::load(path)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Files with extension `ext` in `dir`, sorted by name.
pub fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, PipelineError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == ext))
        .collect();
    files.sort();
    Ok(files)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_file(path: &Path) -> Result<String, PipelineError> {
    Ok(sha256_hex(&std::fs::read(path).map_err(io_err(path))?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub key: String,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub config_sha256: String,
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.stage == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub status: StageStatus,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub manifest: Manifest,
    pub timings: Vec<StageTiming>,
}

impl RunSummary {
    pub fn all_skipped(&self) -> bool {
        self.timings.iter().all(|t| t.status == StageStatus::Skipped)
    }
}

/// Renders one G-buffer per camera.
pub fn synth_views(scene: &SceneDescription, cameras: &[crate::scene::CameraPose]) -> Result<Vec<GBufferView>, String> {
    cameras.iter().map(|c| render_gbuffer(scene, c).map_err(|e| e.to_string())).collect()
}

pub fn alignment_json(t: &RigidTransform) -> String {
    serde_json::to_string_pretty(t).expect("transform serializes") + "\n"
}

pub fn view_file_name(i: usize, ext: &str) -> String {
    format!("view_{i:03}.{ext}")
}

pub fn read_views(dir: &Path) -> Result<Vec<GBufferView>, String> {
    list_files(dir, "gbuf")
        .map_err(|e| e.to_string())?
        .iter()
        .map(|p| io::read_gbuf(p).map_err(|e| format!("{}: {e}", p.display())))
        .collect()
}

pub fn read_feats(dir: &Path) -> Result<Vec<FeatureMap>, String> {
    list_files(dir, "feat")
        .map_err(|e| e.to_string())?
        .iter()
        .map(|p| io::read_feat(p).map_err(|e| format!("{}: {e}", p.display())))
        .collect()
}

/// Built-in descriptors for a view set, positions normalized by the set's joint bounds.
pub fn builtin_features(views: &[GBufferView], cfg: &DescriptorConfig) -> Result<Vec<FeatureMap>, String> {
    let mut cfg = cfg.clone();
    cfg.position_bounds = Bounds::of_views(views.iter());
    views.iter().map(|v| builtin_descriptor(v, &cfg).map_err(|e| e.to_string())).collect()
}

struct Runner<'a> {
    cfg: &'a RunConfig,
    out: PathBuf,
}

type StageResult = Result<Vec<PathBuf>, String>;

impl Runner<'_> {
    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.out).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }

    fn write(&self, rel: impl AsRef<Path>, bytes: &[u8], written: &mut Vec<PathBuf>) -> Result<(), String> {
        let path = self.out.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| format!("{}: {e}", parent.display()))?;
        }
        io::write_atomic(&path, bytes).map_err(|e| format!("{}: {e}", path.display()))?;
        written.push(path);
        Ok(())
    }

    fn set(&self, name: &str) -> &ViewSetConfig {
        if name == "source" {
            &self.cfg.source
        } else {
            &self.cfg.target
        }
    }

    fn scene_of(&self, set: &ViewSetConfig) -> Result<Option<SceneDescription>, String> {
        let scene = if let Some(p) = &set.preset {
            preset_by_name(p).ok_or_else(|| format!("unknown preset {p}"))?
        } else if let Some(s) = &set.scene {
            SceneDescription::load(&self.cfg.resolve(s)).map_err(|e| e.to_string())?
        } else {
            return Ok(None);
        };
        Ok(Some(if set.untextured { scene.untextured(UNTEXTURED_ALBEDO) } else { scene }))
    }

    fn views(&self, name: &str) -> Result<Vec<GBufferView>, String> {
        read_views(&self.out.join("synth").join(name))
    }

    fn feats(&self, name: &str) -> Result<Vec<FeatureMap>, String> {
        read_feats(&self.out.join("features").join(name))
    }

    fn split(&self) -> Result<Split, String> {
        let spec = self.cfg.split_spec();
        make_split(&spec, &vec![(); spec.total]).map_err(|e| e.to_string())
    }

    /// External files a stage reads, as (manifest label, path).
    fn external_inputs(&self, stage: &str) -> Result<Vec<(String, PathBuf)>, String> {
        let mut v = Vec::new();
        for name in ["source", "target"] {
            let set = self.set(name);
            match stage {
                "synth" => {
                    if let Some(s) = &set.scene {
                        v.push((s.to_string_lossy().into_owned(), self.cfg.resolve(s)));
                    }
                    if let Some(d) = &set.gbuf_dir {
                        for f in list_files(&self.cfg.resolve(d), "gbuf").map_err(|e| e.to_string())? {
                            let label = d.join(f.file_name().unwrap()).to_string_lossy().into_owned();
                            v.push((label, f));
                        }
                    }
                }
                "features" if self.cfg.features.backend == FeatureBackend::External => {
                    if let Some(d) = &set.features_dir {
                        for f in list_files(&self.cfg.resolve(d), "feat").map_err(|e| e.to_string())? {
                            let label = d.join(f.file_name().unwrap()).to_string_lossy().into_owned();
                            v.push((label, f));
                        }
                    }
                }
                "render" if name == "target" => {
                    if let Some(s) = &set.scene {
                        v.push((s.to_string_lossy().into_owned(), self.cfg.resolve(s)));
                    }
                }
                _ => {}
            }
        }
        Ok(v)
    }

    fn config_slice(&self, stage: &str) -> String {
        let c = self.cfg;
        let v = match stage {
            "synth" => serde_json::json!({
                "seed": c.seed, "source": c.source, "target": c.target,
                "cameras": c.cameras, "views": c.eval.split.total,
            }),
            "features" => serde_json::json!({ "features": c.features }),
            "match" => serde_json::json!({
                "seed": c.seed, "correspondence": c.correspondence, "split": c.split_spec(),
                "edge": c.train.lambda_max > 0.0 && c.train.edge_reference == EdgeReference::Transfer,
            }),
            "train" => serde_json::json!({
                "seed": c.seed, "train": c.train, "split": c.split_spec(), "edge_views": c.correspondence.edge_views,
            }),
            "render" => serde_json::json!({
                "render": c.render, "split": c.split_spec(), "cameras": c.cameras,
                "target": { "preset": c.target.preset, "untextured": c.target.untextured },
            }),
            "eval" => serde_json::json!({ "seed": c.seed, "eval": c.eval, "refit": c.refit_config(), "split": c.split_spec() }),
            _ => unreachable!(),
        };
        v.to_string()
    }

    fn stage_synth(&self) -> StageResult {
        let mut written = Vec::new();
        let intr = self.cfg.cameras.intrinsics();
        for (tag, name) in [(0u64, "source"), (1, "target")] {
            let set = self.set(name);
            let views = match self.scene_of(set)? {
                Some(scene) => {
                    let seed = set.camera_seed.unwrap_or_else(|| mix_seed(self.cfg.seed, 100 + tag));
                    let cams = sample_camera_sphere(self.cfg.eval.split.total, self.cfg.cameras.radius, seed, intr);
                    synth_views(&scene, &cams)?
                }
                None => read_views(&self.cfg.resolve(set.gbuf_dir.as_ref().expect("validated")))?,
            };
            for (i, v) in views.iter().enumerate() {
                self.write(Path::new("synth").join(name).join(view_file_name(i, "gbuf")), &io::encode_gbuf(v), &mut written)?;
            }
        }
        Ok(written)
    }

    fn stage_features(&self) -> StageResult {
        let mut written = Vec::new();
        for name in ["source", "target"] {
            let views = self.views(name)?;
            let maps = match self.cfg.features.backend {
                FeatureBackend::Builtin => builtin_features(&views, &self.cfg.features.descriptor)?,
                FeatureBackend::External => {
                    let dir = self.set(name).features_dir.as_ref().expect("validated");
                    read_feats(&self.cfg.resolve(dir))?
                }
            };
            if maps.len() != views.len() {
                return Err(format!("{name}: {} feature maps for {} views", maps.len(), views.len()));
            }
            for (i, m) in maps.iter().enumerate() {
                self.write(Path::new("features").join(name).join(view_file_name(i, "feat")), &io::encode_feat(m), &mut written)?;
            }
        }
        Ok(written)
    }

    fn train_pairs(&self, name: &str, split: &Split) -> Result<Vec<(GBufferView, FeatureMap)>, String> {
        let views = self.views(name)?;
        let feats = self.feats(name)?;
        Ok(split
            .train
            .iter()
            .take(self.cfg.correspondence.views)
            .map(|&i| (views[i].clone(), feats[i].clone()))
            .collect())
    }

    fn edge_indices(&self, split: &Split) -> Vec<usize> {
        split.train.iter().take(self.cfg.correspondence.edge_views).copied().collect()
    }

    fn stage_match(&self) -> StageResult {
        let m = &self.cfg.correspondence;
        let split = self.split()?;
        let target = sample_points(&self.train_pairs("target", &split)?, m.per_view, mix_seed(self.cfg.seed, 201))
            .map_err(|e| e.to_string())?;
        let source = sample_points(&self.train_pairs("source", &split)?, m.per_view, mix_seed(self.cfg.seed, 202))
            .map_err(|e| e.to_string())?;
        let alignment = if m.prealign { Some(prealign(&target, &source, &m.search).map_err(|e| e.to_string())?) } else { None };
        let map = build_mapping(&target, &source, m.k, alignment.as_ref()).map_err(|e| e.to_string())?;
        let samples = assemble_training_set(&map, &target, &source);
        let mut written = Vec::new();
        self.write("match/correspondence.corr", &io::encode_corr(&map), &mut written)?;
        self.write("match/samples.tsmp", &io::encode_samples(&samples), &mut written)?;
        let transform = alignment.clone().unwrap_or_else(RigidTransform::identity);
        self.write("match/alignment.json", alignment_json(&transform).as_bytes(), &mut written)?;
        let hist = score_histogram_image(&map, m.histogram_bins, 64);
        self.write("match/score_hist.png", &png_bytes(&hist)?, &mut written)?;
        if self.cfg.train.lambda_max > 0.0 && self.cfg.train.edge_reference == EdgeReference::Transfer {
            let views = self.views("target")?;
            let feats = self.feats("target")?;
            for i in self.edge_indices(&split) {
                let img = transferred_image(&views[i], &feats[i], &source, m.k, alignment.as_ref()).map_err(|e| e.to_string())?;
                self.write(format!("match/transfer/{}", view_file_name(i, "imgf")), &io::encode_imgf(&img), &mut written)?;
            }
        }
        Ok(written)
    }

    fn stage_train(&self) -> StageResult {
        let split = self.split()?;
        let path = self.out.join("match/samples.tsmp");
        let samples = io::decode_samples(&std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?)
            .map_err(|e| e.to_string())?;
        let mut edge_views = Vec::new();
        if self.cfg.train.lambda_max > 0.0 {
            let views = self.views("target")?;
            for i in self.edge_indices(&split) {
                let reference = match self.cfg.train.edge_reference {
                    EdgeReference::Transfer => {
                        let p = self.out.join("match/transfer").join(view_file_name(i, "imgf"));
                        io::decode_imgf(&std::fs::read(&p).map_err(|e| format!("{}: {e}", p.display()))?)
                            .map_err(|e| e.to_string())?
                    }
                    EdgeReference::Geometry => geometry_reference(&views[i]),
                };
                edge_views.push(EdgeView { view: views[i].clone(), reference });
            }
        }
        let mut cfg = self.cfg.train.clone();
        cfg.seed = mix_seed(self.cfg.seed, cfg.seed);
        cfg.init_seed = mix_seed(self.cfg.seed, cfg.init_seed);
        cfg.diagnostic_checkpoint = Some(self.out.join("train/diagnostic.nfld"));
        std::fs::create_dir_all(self.out.join("train")).map_err(|e| e.to_string())?;
        let outcome = train(&samples, &edge_views, &cfg).map_err(|e| e.to_string())?;
        let mut written = Vec::new();
        self.write("train/field.nfld", &crate::field::encode_checkpoint(&outcome.params), &mut written)?;
        self.write("train/loss.csv", outcome.loss_csv().as_bytes(), &mut written)?;
        Ok(written)
    }

    fn field(&self) -> Result<crate::field::FieldParameters<f32>, String> {
        load_checkpoint(&self.out.join("train/field.nfld")).map_err(|e| e.to_string())
    }

    fn stage_render(&self) -> StageResult {
        let field = self.field()?;
        let split = self.split()?;
        let views = self.views("target")?;
        let mut written = Vec::new();
        for &i in &split.test {
            let img = render_field(&field, &views[i]).map_err(|e| e.to_string())?;
            let rgba = with_alpha(&img, &views[i].alpha).map_err(|e| e.to_string())?;
            self.write(format!("render/test/{}", view_file_name(i, "png")), &png_bytes(&rgba)?, &mut written)?;
        }
        let r = &self.cfg.render;
        if r.trajectory_views > 0 {
            if let Some(scene) = self.scene_of(&self.cfg.target)? {
                let cams = circular_trajectory(
                    r.trajectory_views,
                    self.cfg.cameras.radius,
                    r.elevation_deg.to_radians(),
                    self.cfg.cameras.intrinsics(),
                );
                for (k, view) in synth_views(&scene, &cams)?.iter().enumerate() {
                    let img = render_field(&field, view).map_err(|e| e.to_string())?;
                    let rgba = with_alpha(&img, &view.alpha).map_err(|e| e.to_string())?;
                    self.write(format!("render/trajectory/frame_{k:03}.png"), &png_bytes(&rgba)?, &mut written)?;
                }
            }
        }
        Ok(written)
    }

    fn stage_eval(&self) -> StageResult {
        let field = self.field()?;
        let split = self.split()?;
        let views = self.views("target")?;
        let report = match self.cfg.eval.protocol {
            Protocol::Bootstrapped => {
                let mut refit = self.cfg.refit_config();
                refit.seed = mix_seed(self.cfg.seed, refit.seed.wrapping_add(301));
                refit.init_seed = mix_seed(self.cfg.seed, refit.init_seed.wrapping_add(302));
                bootstrap_metrics(&field, &views, &split, &refit).map_err(|e| e.to_string())?.report
            }
            Protocol::Direct => {
                let refs: Vec<Image> = split.test.iter().map(|&i| views[i].rgb_image()).collect();
                let items: Vec<(usize, &GBufferView, &Image)> =
                    split.test.iter().zip(&refs).map(|(&i, r)| (i, &views[i], r)).collect();
                direct_metrics(&field, &items).map_err(|e| e.to_string())?
            }
        };
        let mut written = Vec::new();
        self.write("eval/metrics.csv", report.to_csv().as_bytes(), &mut written)?;
        self.write("eval/summary.txt", format!("{}\n", report.summary()).as_bytes(), &mut written)?;
        Ok(written)
    }

    fn run_stage(&self, stage: &str) -> StageResult {
        match stage {
            "synth" => self.stage_synth(),
            "features" => self.stage_features(),
            "match" => self.stage_match(),
            "train" => self.stage_train(),
            "render" => self.stage_render(),
            "eval" => self.stage_eval(),
            _ => unreachable!(),
        }
    }
}

fn png_bytes(img: &Image) -> Result<Vec<u8>, String> {
    io::encode_png(img).map_err(|e| e.to_string())
}

fn dependencies(stage: &str) -> &'static [&'static str] {
    match stage {
        "synth" => &[],
        "features" => &["synth"],
        "match" => &["synth", "features"],
        "train" => &["synth", "match"],
        "render" => &["synth", "train"],
        "eval" => &["synth", "train"],
        _ => unreachable!(),
    }
}

fn previous_manifest(out: &Path) -> Option<Manifest> {
    let text = std::fs::read_to_string(out.join(MANIFEST_FILE)).ok()?;
    serde_json::from_str(&text).ok()
}

fn outputs_intact(out: &Path, rec: &StageRecord) -> bool {
    rec.outputs.iter().all(|f| hash_file(&out.join(&f.path)).is_ok_and(|h| h == f.sha256))
}

fn write_manifest(out: &Path, manifest: &Manifest, timings: &[StageTiming]) -> Result<(), PipelineError> {
    let p = out.join(MANIFEST_FILE);
    io::write_atomic(&p, manifest.to_json().as_bytes()).map_err(|e| PipelineError::Io {
        path: p.clone(),
        source: std::io::Error::other(e.to_string()),
    })?;
    let t = out.join(TIMINGS_FILE);
    let json = serde_json::to_string_pretty(timings).expect("timings serialize") + "\n";
    io::write_atomic(&t, json.as_bytes())
        .map_err(|e| PipelineError::Io { path: t.clone(), source: std::io::Error::other(e.to_string()) })
}

/// Validates the config, then runs (or skips) every stage in order. The
/// manifest is rewritten after each stage, so a failure leaves the records
/// of all completed stages behind.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunSummary, PipelineError> {
    cfg.validate()?;
    let out = cfg.output();
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;
    let runner = Runner { cfg, out: out.clone() };
    let previous = previous_manifest(&out);
    let mut manifest =
        Manifest { format: 1, config_sha256: sha256_hex(cfg.fingerprint().as_bytes()), stages: Vec::new() };
    let mut timings = Vec::new();
    for stage in STAGES {
        let started = Instant::now();
        let fail = |message: String| PipelineError::Stage { stage, message };
        let mut inputs = Vec::new();
        for dep in dependencies(stage) {
            inputs.extend(manifest.stage(dep).expect("dependency ran").outputs.iter().cloned());
        }
        for (label, path) in runner.external_inputs(stage).map_err(fail)? {
            inputs.push(FileHash { path: label, sha256: hash_file(&path)? });
        }
        let mut hasher = Sha256::new();
        hasher.update(stage.as_bytes());
        hasher.update(runner.config_slice(stage).as_bytes());
        for f in &inputs {
            hasher.update(f.path.as_bytes());
            hasher.update(f.sha256.as_bytes());
        }
        let key = hex::encode(hasher.finalize());
        let reusable = previous
            .as_ref()
            .and_then(|m| m.stage(stage))
            .filter(|r| r.key == key && outputs_intact(&out, r))
            .cloned();
        let (record, status) = match reusable {
            Some(rec) => (rec, StageStatus::Skipped),
            None => {
                let dir = out.join(stage);
                if dir.exists() {
                    std::fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
                }
                log::info!("stage {stage}: running");
                let result = runner.run_stage(stage);
                let written = match result {
                    Ok(w) => w,
                    Err(message) => {
                        write_manifest(&out, &manifest, &timings)?;
                        return Err(PipelineError::Stage { stage, message });
                    }
                };
                let mut outputs = written
                    .iter()
                    .map(|p| Ok(FileHash { path: runner.rel(p), sha256: hash_file(p)? }))
                    .collect::<Result<Vec<_>, PipelineError>>()?;
                outputs.sort_by(|a, b| a.path.cmp(&b.path));
                let unique: BTreeSet<&str> = outputs.iter().map(|f| f.path.as_str()).collect();
                debug_assert_eq!(unique.len(), outputs.len());
                (StageRecord { stage: stage.to_string(), key, inputs, outputs }, StageStatus::Ran)
            }
        };
        log::info!("stage {stage}: {status:?}");
        manifest.stages.push(record);
        timings.push(StageTiming { stage: stage.to_string(), status, seconds: started.elapsed().as_secs_f64() });
        write_manifest(&out, &manifest, &timings)?;
    }
    Ok(RunSummary { manifest, timings })
}
