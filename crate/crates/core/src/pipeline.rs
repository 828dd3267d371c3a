//! End-to-end routed detection: configuration, stage orchestration and the
//! built-in scene fixtures.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::amdb::{image_branch, lidar_branch_with_workers, make_proposals, ProposalRegion};
use crate::dispatcher::{Dispatcher, ExpertKind, RouteDecision, RouteThresholds};
use crate::error::{Error, Result};
use crate::experts::{bev_project, lpe_detect, region_detect, Detection};
use crate::formats::read_pixel_grid;
use crate::fusion::{
    fuse, multiscale_pool_with, pick_scale, project_pixels, CameraModel, PixelFeatureGrid, PoolMode,
};
use crate::models::{load_backbone, load_conv2d, load_detector, load_lpe, ModelDims, Models};
use crate::spconv::FmaCount;
use crate::voxel::{voxelize, MeanIntensityRecipe, Point, VoxelGridSpec};

/// How image features are reduced before projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolingConfig {
    /// Fixed block size; wins over `budget_bytes` when both are set.
    #[serde(default)]
    pub scale: Option<usize>,
    /// Memory cap for the pooled f32 feature map.
    #[serde(default)]
    pub budget_bytes: Option<usize>,
    #[serde(default)]
    pub mode: PoolMode,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        PoolingConfig {
            scale: Some(1),
            budget_bytes: None,
            mode: PoolMode::Mean,
        }
    }
}

impl PoolingConfig {
    pub fn resolve_scale(&self, image: &PixelFeatureGrid) -> Result<usize> {
        match (self.scale, self.budget_bytes) {
            (Some(s), _) => Ok(s),
            (None, Some(b)) => pick_scale(image.width(), image.height(), image.channels(), b),
            (None, None) => Ok(1),
        }
    }
}

/// Optional model description files; missing entries use built-in weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelPaths {
    pub backbone: Option<PathBuf>,
    pub image_branch: Option<PathBuf>,
    pub lpe: Option<PathBuf>,
    pub vee: Option<PathBuf>,
    pub ape: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_base_rate")]
    pub base_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_beta")]
    pub smooth_l1_beta: f64,
}

fn default_base_rate() -> f64 {
    1e-3
}

fn default_beta() -> f64 {
    crate::training::DEFAULT_BETA
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_rate: default_base_rate(),
            seed: 0,
            smooth_l1_beta: default_beta(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputPaths {
    pub detections: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub grid: VoxelGridSpec,
    #[serde(default)]
    pub dispatch: RouteThresholds,
    /// Minimum voxel score for proposal membership.
    #[serde(default = "default_proposal_threshold")]
    pub proposal_threshold: f64,
    #[serde(default)]
    pub pooling: PoolingConfig,
    pub camera: CameraModel,
    #[serde(default)]
    pub models: ModelPaths,
    /// Use seeded random weights instead of the hand-set ones for any model
    /// without a file.
    #[serde(default)]
    pub model_seed: Option<u64>,
    #[serde(default = "default_image_channels")]
    pub image_channels: usize,
    #[serde(default = "default_class_names")]
    pub class_names: Vec<String>,
    #[serde(default)]
    pub outputs: OutputPaths,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_proposal_threshold() -> f64 {
    0.3
}

fn default_image_channels() -> usize {
    3
}

fn default_class_names() -> Vec<String> {
    ["Car", "Pedestrian", "Cyclist"].map(String::from).to_vec()
}

impl PipelineConfig {
    /// Grid of 0.5 m voxels covering x in [0, 50), y in [-20, 20),
    /// z in [-3, 3), with a 640x480 pinhole camera looking down +x.
    pub fn reference() -> Self {
        let mut camera = CameraModel::new(500.0, 500.0, 320.0, 240.0);
        // camera z (optical axis) along LiDAR x, camera x along -y, camera y along -z
        camera.rotation = [[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]];
        PipelineConfig {
            grid: VoxelGridSpec::new([0.0, -20.0, -3.0], [0.5; 3], [100, 80, 12])
                .expect("valid reference grid"),
            dispatch: RouteThresholds::default(),
            proposal_threshold: default_proposal_threshold(),
            pooling: PoolingConfig::default(),
            camera,
            models: ModelPaths::default(),
            model_seed: None,
            image_channels: default_image_channels(),
            class_names: default_class_names(),
            outputs: OutputPaths::default(),
            train: TrainConfig::default(),
        }
    }

    /// Parse and validate. Relative paths are resolved against the config
    /// file's directory and must exist.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.models.backbone,
            &mut cfg.models.image_branch,
            &mut cfg.models.lpe,
            &mut cfg.models.vee,
            &mut cfg.models.ape,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
            if !p.exists() {
                return Err(Error::io(
                    p.clone(),
                    std::io::Error::new(std::io::ErrorKind::NotFound, "model file not found"),
                ));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.dispatch.validate()?;
        self.camera.validate()?;
        if !(0.0..=1.0).contains(&self.proposal_threshold) {
            return Err(Error::Thresholds(format!(
                "proposal threshold {} outside [0, 1]",
                self.proposal_threshold
            )));
        }
        if self.pooling.scale == Some(0) {
            return Err(Error::InvalidScale(0));
        }
        if self.image_channels == 0 || self.class_names.is_empty() {
            return Err(Error::Shape("need image channels and class names".into()));
        }
        if !(self.train.base_rate > 0.0 && self.train.smooth_l1_beta > 0.0) {
            return Err(Error::InvalidBatch("train rates must be positive".into()));
        }
        Ok(())
    }

    /// Built-in weights overlaid with any model files named in the config.
    pub fn load_models(&self) -> Result<Models> {
        let dims = ModelDims {
            image_channels: self.image_channels,
            classes: self.class_names.len(),
        };
        let mut m = match self.model_seed {
            Some(seed) => Models::seeded(seed, dims)?,
            None => Models::reference(dims)?,
        };
        if let Some(p) = &self.models.backbone {
            m.backbone = load_backbone(p)?;
        }
        if let Some(p) = &self.models.image_branch {
            m.image_branch = load_conv2d(p)?;
        }
        if let Some(p) = &self.models.lpe {
            m.lpe = load_lpe(p)?;
        }
        if let Some(p) = &self.models.vee {
            m.vee = load_detector(p)?;
        }
        if let Some(p) = &self.models.ape {
            m.ape = load_detector(p)?;
        }
        Ok(m)
    }
}

/// Where APE gets its image features. Only touched on the APE route.
#[derive(Debug, Clone)]
pub enum ImageSource {
    None,
    File(PathBuf),
    Grid(PixelFeatureGrid),
}

impl ImageSource {
    fn load(self) -> Result<PixelFeatureGrid> {
        match self {
            ImageSource::None => Err(Error::MissingModality),
            ImageSource::File(p) => read_pixel_grid(p),
            ImageSource::Grid(g) => Ok(g),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTiming {
    pub stage: &'static str,
    pub millis: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    pub decision: RouteDecision,
    pub proposals: Vec<ProposalRegion>,
    pub detections: Vec<Detection>,
    /// Wall-clock per stage in execution order; informational only.
    pub timings: Vec<StageTiming>,
    /// Sparse convolution multiply-adds in the LiDAR backbone.
    pub backbone_fmas: FmaCount,
    pub voxels: usize,
    pub dropped_points: usize,
    /// Image-stage details, present only on the APE route.
    pub image_scale: Option<usize>,
    pub projected_pixels: Option<usize>,
}

impl PipelineReport {
    pub fn ran_stage(&self, stage: &str) -> bool {
        self.timings.iter().any(|t| t.stage == stage)
    }
}

struct Clock(Vec<StageTiming>);

impl Clock {
    fn time<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let out = f()?;
        self.0.push(StageTiming {
            stage,
            millis: t0.elapsed().as_secs_f64() * 1e3,
        });
        Ok(out)
    }
}

/// Voxelize, score, propose, route, then run the chosen expert. The image
/// source is read only if the route is APE.
pub fn run_pipeline(
    points: &[Point],
    image: ImageSource,
    cfg: &PipelineConfig,
    models: &Models,
    dispatcher: &Dispatcher,
    workers: usize,
) -> Result<PipelineReport> {
    cfg.validate()?;
    let workers = workers.max(1);
    let mut clock = Clock(Vec::new());

    let vox = clock.time("voxelize", || {
        voxelize(points, &cfg.grid, &MeanIntensityRecipe)
    })?;
    let lidar = clock.time("lidar_branch", || {
        lidar_branch_with_workers(&vox.tensor, &models.backbone, workers)
    })?;
    let proposals = clock.time("proposals", || {
        make_proposals(&lidar.features, &lidar.scores, cfg.proposal_threshold)
    })?;
    let decision = clock.time("dispatch", || Ok(dispatcher.classify(&proposals)))?;

    let mut image_scale = None;
    let mut projected_pixels = None;
    let detections = match decision.expert {
        ExpertKind::Lpe => clock.time("expert", || {
            let bev = bev_project(&vox.tensor, &proposals);
            lpe_detect(&bev, &models.lpe, &vox.tensor)
        })?,
        ExpertKind::Vee => clock.time("expert", || {
            region_detect(
                &lidar.features,
                &proposals,
                &models.vee,
                ExpertKind::Vee,
                workers,
            )
        })?,
        ExpertKind::Ape => {
            let img = clock.time("image_load", || image.load())?;
            let feats = clock.time("image_branch", || image_branch(&img, &models.image_branch))?;
            let scale = cfg.pooling.resolve_scale(&feats)?;
            let pooled = clock.time("pool", || {
                multiscale_pool_with(&feats, scale, cfg.pooling.mode)
            })?;
            let cam = cfg.camera.scaled(scale);
            let projected = clock.time("project", || project_pixels(&pooled, &cam, &cfg.grid))?;
            let fused = clock.time("fuse", || fuse(&lidar.features, &projected, &proposals))?;
            image_scale = Some(scale);
            projected_pixels = Some(projected.entries.len());
            clock.time("expert", || {
                region_detect(&fused, &proposals, &models.ape, ExpertKind::Ape, workers)
            })?
        }
        // no emergency expert exists; the route is reported with no boxes
        ExpertKind::Emergency => Vec::new(),
    };

    Ok(PipelineReport {
        decision,
        proposals,
        detections,
        timings: clock.0,
        backbone_fmas: lidar.fmas,
        voxels: vox.tensor.len(),
        dropped_points: vox.dropped,
        image_scale,
        projected_pixels,
    })
}

/// Seeded synthetic scenes matched to [`PipelineConfig::reference`] and the
/// built-in weights.
pub mod fixtures {
    use super::*;

    fn jitter(rng: &mut ChaCha8Rng, base: [f64; 3], intensity: f64) -> Point {
        let j = |r: &mut ChaCha8Rng| r.gen_range(-0.05..0.05);
        Point::new(
            base[0] + j(rng),
            base[1] + j(rng),
            base[2] + j(rng),
            intensity,
        )
        .expect("finite fixture point")
    }

    /// Two bright returns stacked in one voxel column about 10 m ahead:
    /// one confident near proposal, routed to LPE, one BEV detection.
    pub fn near_cluster(seed: u64) -> Vec<Point> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        vec![
            jitter(&mut rng, [10.2, 0.2, -0.8], 0.9),
            jitter(&mut rng, [10.2, 0.2, -0.3], 0.9),
        ]
    }

    /// One dim return about 30 m ahead: a far proposal below the default
    /// confidence threshold, routed to APE.
    pub fn far_low_confidence(seed: u64) -> Vec<Point> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        vec![jitter(&mut rng, [30.2, 0.2, -0.8], 0.5)]
    }

    /// A uniform-depth image, e.g. 640x480 for the reference camera.
    pub fn flat_image(w: usize, h: usize, channels: usize, depth: f64) -> PixelFeatureGrid {
        let feats = (0..w * h * channels)
            .map(|i| (i % 7) as f64 * 0.1)
            .collect();
        PixelFeatureGrid::with_uniform_depth(w, h, channels, feats, depth)
            .expect("valid fixture image")
    }
}
