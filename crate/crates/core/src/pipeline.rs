//! Three-stage restoration: hand detections in, conditioning signals built
//! from an aligned template, masked region repainted by a backend at several
//! mask scales, best candidate kept.
//!
//! Hands of one image are restored one after another in ascending `hand_id`
//! order, each on top of the previous result. Separate images are
//! independent and may run in parallel.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    estimate_alignment_with, landmark, AlignmentComponents, GeometryError, KeypointSet,
    SimilarityTransform,
};
use crate::metrics::{
    masked_psnr, masked_ssim, ClassifierRecord, HandPoseRecord, MetricsError, MetricsReport,
};
use crate::protocol::{
    validate_detection_file, validate_pose_file, write_json, Backend, BackendError,
    CandidateScores, DetectionResult, PoseEstimate, ProtocolError, RestorationRequest,
};
use crate::raster::{
    bbox_to_mask, filled_bbox, iou, load_rgb_png, save_rgb_png, scale_mask, silhouette,
    warp_depth, BinaryMask, DepthImage, RasterError, RgbImage, MAX_MASK_SCALE, MIN_MASK_SCALE,
};
use crate::selection::{random_select, silhouette_consistent_select, SelectionError, SelectionResult};
use crate::templates::{HandTemplate, TemplateLibrary};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("both the detection mask and the template mask are disabled")]
    NoMaskEnabled,
    #[error("control mask for hand {0} is empty")]
    EmptyControlMask(String),
    #[error("hand {0} is missing from the pose estimate or detections")]
    UnknownHand(String),
    #[error("pose image {pose} does not match detection image {detections}")]
    ImageMismatch { pose: String, detections: String },
    #[error("silhouette selection needs a target silhouette")]
    MissingSilhouette,
    #[error("template {0} not in library")]
    UnknownTemplate(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("scale {scale}: backend failure: {reason}")]
    BackendFailure { scale: f64, reason: String },
    #[error("every mask scale failed for hand {hand_id}: {reasons:?}")]
    AllScalesFailed { hand_id: String, reasons: Vec<String> },
    #[error("no eligible hands in the batch")]
    EmptyDataset,
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    pub fn is_degenerate_geometry(&self) -> bool {
        matches!(
            self,
            PipelineError::Geometry(GeometryError::DegenerateKeypoints(_))
                | PipelineError::Selection(SelectionError::NoViableTemplate)
        )
    }

    pub fn is_backend_failure(&self) -> bool {
        matches!(
            self,
            PipelineError::AllScalesFailed { .. } | PipelineError::BackendFailure { .. }
        )
    }
}

fn io_err(path: &Path, source: std::io::Error) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SelectionMode {
    SilhouetteConsistent,
    Random { seed: u64 },
}

/// Which parts of the method are active; everything on by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub use_bbox_mask: bool,
    pub use_template_mask: bool,
    pub use_scale: bool,
    pub use_translation: bool,
    pub use_rotation: bool,
    pub use_handedness: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            use_bbox_mask: true,
            use_template_mask: true,
            use_scale: true,
            use_translation: true,
            use_rotation: true,
            use_handedness: true,
        }
    }
}

impl AblationConfig {
    /// The seven rows of the ablation table: each component removed once,
    /// in column order, then the full method.
    pub fn table_rows() -> Vec<AblationConfig> {
        let all = Self::default();
        vec![
            Self { use_bbox_mask: false, ..all },
            Self { use_template_mask: false, ..all },
            Self { use_scale: false, ..all },
            Self { use_translation: false, ..all },
            Self { use_rotation: false, ..all },
            Self { use_handedness: false, ..all },
            all,
        ]
    }

    pub fn alignment_components(&self) -> AlignmentComponents {
        AlignmentComponents {
            scale: self.use_scale,
            translation: self.use_translation,
            rotation: self.use_rotation,
            handedness: self.use_handedness,
            flip: false,
        }
    }

    /// Flags in column order M_d, M_t, S, T, R, H.
    pub fn flags(&self) -> [bool; 6] {
        [
            self.use_bbox_mask,
            self.use_template_mask,
            self.use_scale,
            self.use_translation,
            self.use_rotation,
            self.use_handedness,
        ]
    }

    /// Parses `no-<part>` names as used on the command line.
    pub fn disable(&mut self, name: &str) -> Result<(), PipelineError> {
        match name.trim() {
            "no-bbox-mask" => self.use_bbox_mask = false,
            "no-template-mask" => self.use_template_mask = false,
            "no-scale" => self.use_scale = false,
            "no-translation" => self.use_translation = false,
            "no-rotation" => self.use_rotation = false,
            "no-handedness" => self.use_handedness = false,
            other => {
                return Err(PipelineError::InvalidConfig(format!(
                    "unknown ablation {other:?}"
                )))
            }
        }
        Ok(())
    }
}

pub const DEFAULT_SCALES: [f64; 3] = [1.0, 1.1, 1.2];
pub const DEFAULT_MALFORMED_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub selection_mode: SelectionMode,
    pub scale_factors: Vec<f64>,
    pub malformed_threshold: f64,
    pub ablation: AblationConfig,
    /// Restore every detected hand regardless of the malformed flag.
    pub force_all: bool,
    /// Base seed for backend requests.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            selection_mode: SelectionMode::Random { seed: 0 },
            scale_factors: DEFAULT_SCALES.to_vec(),
            malformed_threshold: DEFAULT_MALFORMED_THRESHOLD,
            ablation: AblationConfig::default(),
            force_all: false,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.scale_factors.is_empty() {
            return Err(PipelineError::InvalidConfig("scale_factors is empty".into()));
        }
        if let Some(s) = self
            .scale_factors
            .iter()
            .find(|s| !(MIN_MASK_SCALE..=MAX_MASK_SCALE).contains(*s))
        {
            return Err(PipelineError::InvalidConfig(format!(
                "scale factor {s} outside [{MIN_MASK_SCALE}, {MAX_MASK_SCALE}]"
            )));
        }
        if !(0.0..=1.0).contains(&self.malformed_threshold) {
            return Err(PipelineError::InvalidConfig(format!(
                "malformed threshold {} outside [0, 1]",
                self.malformed_threshold
            )));
        }
        Ok(())
    }

    /// Seed of the request for one hand and mask scale.
    pub fn request_seed(&self, hand_index: usize, scale_index: usize) -> u64 {
        self.seed
            .wrapping_add(1000 * hand_index as u64)
            .wrapping_add(scale_index as u64)
    }
}

/// Everything needed to restore the hands of one image.
#[derive(Debug, Clone)]
pub struct RestorationJob {
    pub image: RgbImage,
    pub image_path: PathBuf,
    pub pose: PoseEstimate,
    pub detections: DetectionResult,
    pub target_silhouette: Option<BinaryMask>,
    pub config: PipelineConfig,
}

impl RestorationJob {
    pub fn new(
        image: RgbImage,
        image_path: PathBuf,
        pose: PoseEstimate,
        detections: DetectionResult,
        target_silhouette: Option<BinaryMask>,
        config: PipelineConfig,
    ) -> Result<Self, PipelineError> {
        let job = Self {
            image,
            image_path,
            pose,
            detections,
            target_silhouette,
            config,
        };
        job.validate()?;
        Ok(job)
    }

    /// Reads the image, pose, detections and optional silhouette from disk.
    pub fn load(
        image_path: &Path,
        pose_path: &Path,
        detections_path: &Path,
        silhouette_path: Option<&Path>,
        config: PipelineConfig,
    ) -> Result<Self, PipelineError> {
        if !image_path.is_file() {
            return Err(ProtocolError::FileMissing(image_path.display().to_string()).into());
        }
        let image = load_rgb_png(image_path)?;
        let pose = validate_pose_file(pose_path)?;
        let detections = validate_detection_file(detections_path)?;
        let target_silhouette = match silhouette_path {
            Some(p) => {
                if !p.is_file() {
                    return Err(ProtocolError::FileMissing(p.display().to_string()).into());
                }
                Some(BinaryMask::load_png(p)?)
            }
            None => None,
        };
        Self::new(
            image,
            image_path.to_path_buf(),
            pose,
            detections,
            target_silhouette,
            config,
        )
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.pose.image_id != self.detections.image_id {
            return Err(PipelineError::ImageMismatch {
                pose: self.pose.image_id.clone(),
                detections: self.detections.image_id.clone(),
            });
        }
        if let Some(s) = &self.target_silhouette {
            if s.dimensions() != self.image.dimensions() {
                let (a, b) = (s.dimensions(), self.image.dimensions());
                return Err(RasterError::DimensionMismatch(a.0, a.1, b.0, b.1).into());
            }
        }
        self.config.validate()
    }

    pub fn image_id(&self) -> &str {
        &self.pose.image_id
    }

    pub fn dimensions(&self) -> (u32, u32) {
        self.image.dimensions()
    }

    /// Hands to restore, ascending by id: flagged malformed with classifier
    /// confidence at least the threshold, or every detection with
    /// `force_all`.
    pub fn eligible_hands(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .detections
            .detections
            .iter()
            .filter(|d| {
                self.config.force_all
                    || (d.malformed && d.classifier_confidence >= self.config.malformed_threshold)
            })
            .map(|d| d.hand_id.clone())
            .collect();
        ids.sort();
        ids
    }

    /// The target silhouette restricted to the hand's detection box, so
    /// other hands in the image do not count against it.
    pub fn hand_target(&self, hand_id: &str) -> Result<Option<BinaryMask>, PipelineError> {
        let Some(target) = &self.target_silhouette else {
            return Ok(None);
        };
        let detection = self
            .detections
            .detection(hand_id)
            .ok_or_else(|| PipelineError::UnknownHand(hand_id.to_string()))?;
        let (w, h) = self.dimensions();
        Ok(Some(target.intersection(&bbox_to_mask(&detection.bbox, w, h)?)?))
    }

    fn hand_keypoints(&self, hand_id: &str) -> Result<&KeypointSet<f64>, PipelineError> {
        self.pose
            .hand(hand_id)
            .map(|h| &h.keypoints)
            .ok_or_else(|| PipelineError::UnknownHand(hand_id.to_string()))
    }
}

/// Conditioning signals for one hand.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlBundle {
    pub hand_id: String,
    /// Aligned template depth in image coordinates.
    pub control_image: DepthImage,
    /// Union of the enabled detection and template masks.
    pub control_mask: BinaryMask,
    pub detection_mask: Option<BinaryMask>,
    pub template_mask: Option<BinaryMask>,
    pub prompt: String,
    pub transform: SimilarityTransform<f64>,
    pub template_id: String,
}

impl ControlBundle {
    pub fn template_silhouette(&self) -> BinaryMask {
        silhouette(&self.control_image)
    }
}

/// Aligns `template` to the hand and derives the control image and mask.
///
/// Disabled alignment parts fall back to identity; the template mask is the
/// filled bounding box of the warped silhouette.
pub fn build_control_bundle(
    job: &RestorationJob,
    hand_id: &str,
    template: &HandTemplate,
) -> Result<ControlBundle, PipelineError> {
    let ablation = &job.config.ablation;
    if !ablation.use_bbox_mask && !ablation.use_template_mask {
        return Err(PipelineError::NoMaskEnabled);
    }
    let keypoints = job.hand_keypoints(hand_id)?;
    let detection = job
        .detections
        .detection(hand_id)
        .ok_or_else(|| PipelineError::UnknownHand(hand_id.to_string()))?;
    let (w, h) = job.dimensions();

    let transform = estimate_alignment_with(
        &template.keypoints,
        keypoints,
        landmark::DEFAULT_ANCHORS,
        ablation.alignment_components(),
    )?;
    let control_image = warp_depth(&template.depth, &transform, w, h);
    let sil = silhouette(&control_image);

    let detection_mask = if ablation.use_bbox_mask {
        Some(bbox_to_mask(&detection.bbox, w, h)?)
    } else {
        None
    };
    let template_mask = if ablation.use_template_mask {
        Some(if sil.is_empty() {
            BinaryMask::empty(w, h)
        } else {
            filled_bbox(&sil)?
        })
    } else {
        None
    };
    let control_mask = match (&detection_mask, &template_mask) {
        (Some(d), Some(t)) => d.union(t)?,
        (Some(m), None) | (None, Some(m)) => m.clone(),
        (None, None) => unreachable!("checked above"),
    };
    if control_mask.is_empty() {
        return Err(PipelineError::EmptyControlMask(hand_id.to_string()));
    }
    Ok(ControlBundle {
        hand_id: hand_id.to_string(),
        control_image,
        control_mask,
        detection_mask,
        template_mask,
        prompt: template.prompt.clone(),
        transform,
        template_id: template.id.clone(),
    })
}

/// Scores of one mask scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleScore {
    pub scale: f64,
    pub classifier_confidence: f64,
    pub pose_confidence: f64,
}

/// Index of the most realistic candidate: highest classifier confidence,
/// then highest pose confidence, then smallest scale.
pub fn best_scale(scores: &[ScaleScore]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) => {
                let b = &scores[b];
                s.classifier_confidence > b.classifier_confidence
                    || (s.classifier_confidence == b.classifier_confidence
                        && (s.pose_confidence > b.pose_confidence
                            || (s.pose_confidence == b.pose_confidence && s.scale < b.scale)))
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct RestorationOutcome {
    pub hand_id: String,
    pub selection: SelectionResult,
    pub bundle: ControlBundle,
    pub restored: RgbImage,
    pub restored_path: PathBuf,
    pub chosen_scale: f64,
    /// Mask actually repainted at the chosen scale.
    pub chosen_mask: BinaryMask,
    pub chosen_scores: CandidateScores,
    pub per_scale_scores: Vec<ScaleScore>,
    pub failed_scales: Vec<(f64, String)>,
    /// IoU of the warped template silhouette with the job's target.
    pub template_iou: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HandOutcomeSummary {
    pub hand_id: String,
    pub template_id: String,
    pub mirrored: bool,
    pub selection_score: Option<f64>,
    pub prompt: String,
    pub transform: SimilarityTransform<f64>,
    pub chosen_scale: f64,
    pub per_scale_scores: Vec<ScaleScore>,
    pub failed_scales: Vec<FailedScale>,
    pub template_iou: Option<f64>,
    pub restored_image_path: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailedScale {
    pub scale: f64,
    pub reason: String,
}

impl RestorationOutcome {
    pub fn summary(&self) -> HandOutcomeSummary {
        HandOutcomeSummary {
            hand_id: self.hand_id.clone(),
            template_id: self.bundle.template_id.clone(),
            mirrored: self.selection.mirrored,
            selection_score: self.selection.score,
            prompt: self.bundle.prompt.clone(),
            transform: self.bundle.transform,
            chosen_scale: self.chosen_scale,
            per_scale_scores: self.per_scale_scores.clone(),
            failed_scales: self
                .failed_scales
                .iter()
                .map(|(scale, reason)| FailedScale {
                    scale: *scale,
                    reason: reason.clone(),
                })
                .collect(),
            template_iou: self.template_iou,
            restored_image_path: self.restored_path.clone(),
        }
    }

    fn pose_record(&self) -> HandPoseRecord {
        let keypoint_confidences = self
            .chosen_scores
            .keypoint_confidences
            .clone()
            .unwrap_or_else(|| [(landmark::WRIST, self.chosen_scores.pose_confidence)].into());
        HandPoseRecord {
            hand_id: self.hand_id.clone(),
            keypoint_confidences,
        }
    }

    fn classifier_record(&self) -> ClassifierRecord {
        ClassifierRecord {
            hand_id: self.hand_id.clone(),
            confidence: self.chosen_scores.classifier_confidence,
        }
    }
}

/// All restored hands of one image.
#[derive(Debug, Clone)]
pub struct ImageOutcome {
    pub image_id: String,
    pub hands: Vec<RestorationOutcome>,
    pub restored: RgbImage,
    pub restored_path: Option<PathBuf>,
    /// Union of the repainted masks.
    pub final_mask: BinaryMask,
    pub masked_psnr_db: Option<f64>,
    pub masked_ssim: Option<f64>,
    /// Why a fidelity metric is missing, e.g. the mask leaves no SSIM window.
    pub metric_notes: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageOutcomeSummary {
    pub image_id: String,
    pub restored_image_path: Option<PathBuf>,
    pub mask_path: Option<PathBuf>,
    #[serde(with = "crate::metrics::optional_psnr_serde")]
    pub masked_psnr_db: Option<f64>,
    pub masked_ssim: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub metric_notes: Vec<String>,
    pub hands: Vec<HandOutcomeSummary>,
}

impl ImageOutcome {
    pub fn summary(&self, mask_path: Option<PathBuf>) -> ImageOutcomeSummary {
        ImageOutcomeSummary {
            image_id: self.image_id.clone(),
            restored_image_path: self.restored_path.clone(),
            mask_path,
            masked_psnr_db: self.masked_psnr_db,
            masked_ssim: self.masked_ssim,
            metric_notes: self.metric_notes.clone(),
            hands: self.hands.iter().map(RestorationOutcome::summary).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobFailure {
    pub index: usize,
    pub image_id: String,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct BatchResult {
    pub report: MetricsReport,
    pub images: Vec<ImageOutcome>,
    pub failures: Vec<JobFailure>,
    /// Mean template-to-target silhouette IoU over hands with a target.
    pub mean_template_iou: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub config: AblationConfig,
    pub report: MetricsReport,
    pub mean_template_iou: Option<f64>,
    pub failures: usize,
}

pub const ABLATION_HEADER: &str = "M_d\tM_t\tS\tT\tR\tH\tc_pose\tc_classifier\ttemplate_iou";

/// Tab-separated grid: one row per configuration, flags as 1/0.
pub fn ablation_tsv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for r in rows {
        let flags: Vec<&str> = r
            .config
            .flags()
            .iter()
            .map(|&f| if f { "1" } else { "0" })
            .collect();
        let iou = r
            .mean_template_iou
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "NA".into());
        out.push_str(&format!(
            "{}\t{:.4}\t{:.4}\t{}\n",
            flags.join("\t"),
            r.report.mean_pose_confidence,
            r.report.mean_classifier_confidence,
            iou
        ));
    }
    out
}

/// File-system safe rendering of an id.
pub fn path_component(id: &str) -> String {
    let s: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect();
    if s.is_empty() || s.chars().all(|c| c == '.') {
        "_".into()
    } else {
        s
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Runs jobs against one template library and backend, writing every
/// intermediate file under `work_dir`.
pub struct Pipeline<'a> {
    pub library: &'a TemplateLibrary,
    pub backend: &'a dyn Backend,
    pub work_dir: PathBuf,
    /// Worker threads across images; 1 runs sequentially.
    pub parallelism: usize,
}

impl<'a> Pipeline<'a> {
    pub fn new(library: &'a TemplateLibrary, backend: &'a dyn Backend, work_dir: impl Into<PathBuf>) -> Self {
        Self {
            library,
            backend,
            work_dir: work_dir.into(),
            parallelism: 1,
        }
    }

    pub fn with_parallelism(mut self, n: usize) -> Self {
        self.parallelism = n.max(1);
        self
    }

    /// Picks the template for a hand according to the job's selection mode.
    ///
    /// Random mode draws with `seed + hand_index`.
    pub fn select_template(
        &self,
        job: &RestorationJob,
        hand_id: &str,
        hand_index: usize,
    ) -> Result<(SelectionResult, &'a HandTemplate), PipelineError> {
        let selection = match &job.config.selection_mode {
            SelectionMode::SilhouetteConsistent => {
                let target = job
                    .hand_target(hand_id)?
                    .ok_or(PipelineError::MissingSilhouette)?;
                silhouette_consistent_select(self.library, job.hand_keypoints(hand_id)?, &target)?
            }
            SelectionMode::Random { seed } => {
                random_select(self.library, seed.wrapping_add(hand_index as u64))
            }
        };
        let template = self
            .library
            .get(&selection.template_id)
            .ok_or_else(|| PipelineError::UnknownTemplate(selection.template_id.clone()))?;
        Ok((selection, template))
    }

    fn job_dir(&self, index: usize, job: &RestorationJob) -> PathBuf {
        self.work_dir
            .join(format!("{index:04}-{}", path_component(job.image_id())))
    }

    /// Restores one hand of `image` (the current state of the job image),
    /// trying every mask scale and keeping the most realistic result.
    pub fn restore_hand(
        &self,
        job: &RestorationJob,
        image: &RgbImage,
        hand_id: &str,
        hand_index: usize,
        dir: &Path,
    ) -> Result<RestorationOutcome, PipelineError> {
        let (selection, template) = self.select_template(job, hand_id, hand_index)?;
        let bundle = build_control_bundle(job, hand_id, template)?;
        let template_iou = match job.hand_target(hand_id)? {
            Some(t) => iou(&bundle.template_silhouette(), &t).ok(),
            None => None,
        };

        let hand_dir = dir.join(path_component(hand_id));
        fs::create_dir_all(&hand_dir).map_err(|e| io_err(&hand_dir, e))?;
        let input_path = hand_dir.join("input.png");
        save_rgb_png(image, &input_path)?;
        let control_path = hand_dir.join("control.png");
        bundle.control_image.save_png(&control_path)?;

        let mut scored = Vec::new();
        let mut failed = Vec::new();
        for (i, &scale) in job.config.scale_factors.iter().enumerate() {
            match self.try_scale(job, &bundle, &input_path, &control_path, &hand_dir, hand_index, i, scale) {
                Ok(candidate) => scored.push(candidate),
                Err(e) => failed.push((scale, e.to_string())),
            }
        }
        let per_scale_scores: Vec<ScaleScore> = scored.iter().map(|c| c.score.clone()).collect();
        let Some(best) = best_scale(&per_scale_scores) else {
            return Err(PipelineError::AllScalesFailed {
                hand_id: hand_id.to_string(),
                reasons: failed.into_iter().map(|(s, r)| format!("{s}: {r}")).collect(),
            });
        };
        let chosen = scored.swap_remove(best);
        Ok(RestorationOutcome {
            hand_id: hand_id.to_string(),
            selection,
            bundle,
            restored: chosen.image,
            restored_path: chosen.path,
            chosen_scale: chosen.score.scale,
            chosen_mask: chosen.mask,
            chosen_scores: chosen.scores,
            per_scale_scores,
            failed_scales: failed,
            template_iou,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn try_scale(
        &self,
        job: &RestorationJob,
        bundle: &ControlBundle,
        input_path: &Path,
        control_path: &Path,
        hand_dir: &Path,
        hand_index: usize,
        scale_index: usize,
        scale: f64,
    ) -> Result<Candidate, PipelineError> {
        let fail = |reason: String| PipelineError::BackendFailure { scale, reason };
        let mask = scale_mask(&bundle.control_mask, scale)?;
        let stem = format!("scale-{scale_index}");
        let mask_path = hand_dir.join(format!("{stem}.mask.png"));
        mask.save_png(&mask_path)?;
        let request = RestorationRequest {
            image_path: input_path.to_path_buf(),
            control_image_path: control_path.to_path_buf(),
            mask_path,
            prompt: bundle.prompt.clone(),
            seed: job.config.request_seed(hand_index, scale_index),
            output_path: Some(hand_dir.join(format!("{stem}.restored.png"))),
        };
        let request_path = hand_dir.join(format!("{stem}.request.json"));
        write_json(&request_path, &request)?;
        let response = self
            .backend
            .restore(&request, &request_path)
            .map_err(|e: BackendError| fail(e.to_string()))?;
        if response.seed != request.seed {
            return Err(fail(format!(
                "response seed {} does not echo request seed {}",
                response.seed, request.seed
            )));
        }
        let scores = response
            .scores
            .ok_or_else(|| fail("response carries no realism scores".into()))?;
        scores.validate().map_err(|e| fail(e.to_string()))?;
        let image = load_rgb_png(&response.restored_image_path).map_err(|e| fail(e.to_string()))?;
        if image.dimensions() != job.dimensions() {
            return Err(fail(format!(
                "restored image is {:?}, expected {:?}",
                image.dimensions(),
                job.dimensions()
            )));
        }
        Ok(Candidate {
            score: ScaleScore {
                scale,
                classifier_confidence: scores.classifier_confidence,
                pose_confidence: scores.pose_confidence,
            },
            scores,
            image,
            path: response.restored_image_path,
            mask,
        })
    }

    /// Restores every eligible hand of one job in ascending id order and
    /// scores the untouched region.
    pub fn restore_image(&self, job: &RestorationJob, index: usize) -> Result<ImageOutcome, PipelineError> {
        job.validate()?;
        let dir = self.job_dir(index, job);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let (w, h) = job.dimensions();
        let mut image = job.image.clone();
        let mut final_mask = BinaryMask::empty(w, h);
        let mut hands = Vec::new();
        for (hand_index, hand_id) in job.eligible_hands().iter().enumerate() {
            let outcome = self.restore_hand(job, &image, hand_id, hand_index, &dir)?;
            final_mask = final_mask.union(&outcome.chosen_mask)?;
            image = outcome.restored.clone();
            hands.push(outcome);
        }
        let mut notes = Vec::new();
        let (restored_path, psnr, ssim) = if hands.is_empty() {
            (None, None, None)
        } else {
            let path = dir.join("restored.png");
            save_rgb_png(&image, &path)?;
            (
                Some(path),
                fidelity(masked_psnr(&job.image, &image, &final_mask), &mut notes)?,
                fidelity(masked_ssim(&job.image, &image, &final_mask), &mut notes)?,
            )
        };
        Ok(ImageOutcome {
            image_id: job.image_id().to_string(),
            hands,
            restored: image,
            restored_path,
            final_mask,
            masked_psnr_db: psnr,
            masked_ssim: ssim,
            metric_notes: notes,
        })
    }

    /// Restores all jobs and aggregates the metrics. Failed jobs are
    /// reported and skipped.
    pub fn run_batch(&self, jobs: &[RestorationJob]) -> Result<BatchResult, PipelineError> {
        let run = |(i, job): (usize, &RestorationJob)| (i, self.restore_image(job, i));
        let results: Vec<(usize, Result<ImageOutcome, PipelineError>)> = if self.parallelism > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.parallelism)
                .build()
                .map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
            pool.install(|| jobs.par_iter().enumerate().map(run).collect())
        } else {
            jobs.iter().enumerate().map(run).collect()
        };

        let mut images = Vec::new();
        let mut failures = Vec::new();
        for (i, r) in results {
            match r {
                Ok(o) => images.push(o),
                Err(e) => failures.push(JobFailure {
                    index: i,
                    image_id: jobs[i].image_id().to_string(),
                    error: e.to_string(),
                }),
            }
        }

        let hands: Vec<&RestorationOutcome> = images.iter().flat_map(|o| &o.hands).collect();
        if hands.is_empty() {
            return Err(PipelineError::EmptyDataset);
        }
        let pose: Vec<HandPoseRecord> = hands.iter().map(|h| h.pose_record()).collect();
        let classifier: Vec<ClassifierRecord> = hands.iter().map(|h| h.classifier_record()).collect();
        let psnr: Vec<f64> = images.iter().filter_map(|o| o.masked_psnr_db).collect();
        let ssim: Vec<f64> = images.iter().filter_map(|o| o.masked_ssim).collect();
        let report = MetricsReport::aggregate(&pose, &classifier, &psnr, &ssim)?;
        let ious: Vec<f64> = hands.iter().filter_map(|h| h.template_iou).collect();
        Ok(BatchResult {
            report,
            images,
            failures,
            mean_template_iou: mean(&ious),
        })
    }

    /// One batch per ablation configuration, each in its own work
    /// subdirectory.
    pub fn run_ablation(
        &self,
        jobs: &[RestorationJob],
        configs: &[AblationConfig],
    ) -> Result<Vec<AblationRow>, PipelineError> {
        if configs.is_empty() {
            return Err(PipelineError::InvalidConfig("no ablation configurations".into()));
        }
        let mut rows = Vec::with_capacity(configs.len());
        for (i, config) in configs.iter().enumerate() {
            let ablated: Vec<RestorationJob> = jobs
                .iter()
                .map(|j| {
                    let mut j = j.clone();
                    j.config.ablation = *config;
                    j
                })
                .collect();
            let sub = Pipeline {
                library: self.library,
                backend: self.backend,
                work_dir: self.work_dir.join(format!("ablation-{i}")),
                parallelism: self.parallelism,
            };
            let batch = sub.run_batch(&ablated)?;
            rows.push(AblationRow {
                config: *config,
                report: batch.report,
                mean_template_iou: batch.mean_template_iou,
                failures: batch.failures.len(),
            });
        }
        Ok(rows)
    }
}

/// A metric the mask leaves nothing to measure on is recorded as missing
/// rather than failing the restoration.
fn fidelity(
    value: Result<f64, MetricsError>,
    notes: &mut Vec<String>,
) -> Result<Option<f64>, PipelineError> {
    match value {
        Ok(v) => Ok(Some(v)),
        Err(e @ (MetricsError::MaskCoversImage | MetricsError::NoValidWindows)) => {
            notes.push(e.to_string());
            Ok(None)
        }
        Err(e) => Err(e.into()),
    }
}

struct Candidate {
    score: ScaleScore,
    scores: CandidateScores,
    image: RgbImage,
    path: PathBuf,
    mask: BinaryMask,
}

/// One perturbation of an otherwise correct alignment and the resulting
/// silhouette agreement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisalignmentRow {
    pub label: String,
    pub rotation_offset_deg: f64,
    pub flipped: bool,
    pub iou: f64,
}

/// Silhouette IoU against `target` for the correct alignment, for extra
/// rotations about the detected wrist, and for a wrongly mirrored template.
pub fn misalignment_study(
    template: &HandTemplate,
    detected: &KeypointSet<f64>,
    target: &BinaryMask,
    rotation_offsets_deg: &[f64],
) -> Result<Vec<MisalignmentRow>, PipelineError> {
    let (w, h) = target.dimensions();
    let score = |t: &SimilarityTransform<f64>| -> Result<f64, PipelineError> {
        Ok(iou(&silhouette(&warp_depth(&template.depth, t, w, h)), target)?)
    };
    let aligned = estimate_alignment_with(
        &template.keypoints,
        detected,
        landmark::DEFAULT_ANCHORS,
        AlignmentComponents::default(),
    )?;
    let wrist = detected
        .point(landmark::WRIST)
        .ok_or_else(|| GeometryError::DegenerateKeypoints("landmark 0 missing".into()))?;
    let mut rows = Vec::new();
    for &deg in rotation_offsets_deg {
        let t = aligned.then(&SimilarityTransform::rotation_about(wrist, deg.to_radians()));
        rows.push(MisalignmentRow {
            label: format!("rotation {deg}"),
            rotation_offset_deg: deg,
            flipped: false,
            iou: score(&t)?,
        });
    }
    let flipped = estimate_alignment_with(
        &template.keypoints,
        detected,
        landmark::DEFAULT_ANCHORS,
        AlignmentComponents {
            flip: true,
            ..Default::default()
        },
    )?;
    rows.push(MisalignmentRow {
        label: "flipped".into(),
        rotation_offset_deg: 0.0,
        flipped: true,
        iou: score(&flipped)?,
    });
    Ok(rows)
}
