//! JSON documents exchanged with external models, and the backends that
//! repaint the masked region.
//!
//! A backend is any executable that takes the path of a
//! [`RestorationRequest`] JSON file as its only argument, writes the restored
//! PNG, and prints a [`RestorationResponse`] JSON document on stdout.
//! [`StubBackend`] is a deterministic in-process stand-in that pastes the
//! control image into the masked region.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{landmark, Handedness, Keypoint, KeypointSet, Point2};
use crate::raster::{
    load_rgb_png, paste_depth, save_rgb_png, BinaryMask, BoundingBox, DepthImage, RasterError,
};

/// Version of the JSON documents below.
pub const PROTOCOL_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("{path}: parse error: {reason}")]
    Parse { path: String, reason: String },
    #[error("invariant violated at {field}: {reason}")]
    InvariantViolation { field: String, reason: String },
    #[error("file missing: {0}")]
    FileMissing(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn violation(field: impl Into<String>, reason: impl Into<String>) -> ProtocolError {
    ProtocolError::InvariantViolation {
        field: field.into(),
        reason: reason.into(),
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, ProtocolError> {
    let text = fs::read_to_string(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            ProtocolError::FileMissing(path.display().to_string())
        } else {
            ProtocolError::Io {
                path: path.display().to_string(),
                source,
            }
        }
    })?;
    serde_json::from_str(&text).map_err(|e| ProtocolError::Parse {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ProtocolError> {
    let text = serde_json::to_string_pretty(value).expect("protocol types serialize") + "\n";
    fs::write(path, text).map_err(|source| ProtocolError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandPose {
    pub hand_id: String,
    pub keypoints: KeypointSet<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub handedness_guess: Option<Handedness>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyLandmark {
    pub label: String,
    #[serde(flatten)]
    pub point: Point2<f64>,
}

/// Body pose with per-hand landmarks for one image.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoseEstimate {
    pub image_id: String,
    pub hands: Vec<HandPose>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body_landmarks: Option<Vec<BodyLandmark>>,
}

impl PoseEstimate {
    pub fn hand(&self, hand_id: &str) -> Option<&HandPose> {
        self.hands.iter().find(|h| h.hand_id == hand_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub hand_id: String,
    pub bbox: BoundingBox,
    pub classifier_confidence: f64,
    pub malformed: bool,
}

/// Hand detector output for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub image_id: String,
    pub detections: Vec<Detection>,
}

impl DetectionResult {
    pub fn detection(&self, hand_id: &str) -> Option<&Detection> {
        self.detections.iter().find(|d| d.hand_id == hand_id)
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        let mut seen = HashSet::new();
        for (i, d) in self.detections.iter().enumerate() {
            if !seen.insert(d.hand_id.as_str()) {
                return Err(violation(
                    format!("detections[{i}].hand_id"),
                    format!("duplicate hand id {}", d.hand_id),
                ));
            }
            if d.bbox.width == 0 || d.bbox.height == 0 {
                return Err(violation(
                    format!("detections[{i}].bbox"),
                    "width and height must be at least 1",
                ));
            }
            if !(0.0..=1.0).contains(&d.classifier_confidence) {
                return Err(violation(
                    format!("detections[{i}].classifier_confidence"),
                    format!("{} outside [0, 1]", d.classifier_confidence),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct RawHandPose {
    hand_id: String,
    keypoints: Vec<Keypoint<f64>>,
    #[serde(default)]
    handedness_guess: Option<Handedness>,
}

#[derive(Deserialize)]
struct RawPoseEstimate {
    image_id: String,
    hands: Vec<RawHandPose>,
    #[serde(default)]
    body_landmarks: Option<Vec<BodyLandmark>>,
}

impl RawPoseEstimate {
    fn validate(self) -> Result<PoseEstimate, ProtocolError> {
        let mut seen = HashSet::new();
        let mut hands = Vec::with_capacity(self.hands.len());
        for (i, h) in self.hands.into_iter().enumerate() {
            if !seen.insert(h.hand_id.clone()) {
                return Err(violation(
                    format!("hands[{i}].hand_id"),
                    format!("duplicate hand id {}", h.hand_id),
                ));
            }
            let keypoints = KeypointSet::new(h.keypoints)
                .map_err(|e| violation(format!("hands[{i}].keypoints"), e.to_string()))?;
            hands.push(HandPose {
                hand_id: h.hand_id,
                keypoints,
                handedness_guess: h.handedness_guess,
            });
        }
        Ok(PoseEstimate {
            image_id: self.image_id,
            hands,
            body_landmarks: self.body_landmarks,
        })
    }
}

impl<'de> Deserialize<'de> for PoseEstimate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        RawPoseEstimate::deserialize(d)?
            .validate()
            .map_err(serde::de::Error::custom)
    }
}

pub fn parse_pose(text: &str, origin: &str) -> Result<PoseEstimate, ProtocolError> {
    let raw: RawPoseEstimate = serde_json::from_str(text).map_err(|e| ProtocolError::Parse {
        path: origin.to_string(),
        reason: e.to_string(),
    })?;
    raw.validate()
}

pub fn validate_pose_file(path: &Path) -> Result<PoseEstimate, ProtocolError> {
    let raw: RawPoseEstimate = read_json(path)?;
    raw.validate()
}

pub fn parse_detections(text: &str, origin: &str) -> Result<DetectionResult, ProtocolError> {
    let d: DetectionResult = serde_json::from_str(text).map_err(|e| ProtocolError::Parse {
        path: origin.to_string(),
        reason: e.to_string(),
    })?;
    d.validate()?;
    Ok(d)
}

pub fn validate_detection_file(path: &Path) -> Result<DetectionResult, ProtocolError> {
    let d: DetectionResult = read_json(path)?;
    d.validate()?;
    Ok(d)
}

/// Input for one inpainting call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestorationRequest {
    pub image_path: PathBuf,
    /// 16-bit depth control image.
    pub control_image_path: PathBuf,
    /// 8-bit mask; nonzero pixels may be repainted.
    pub mask_path: PathBuf,
    pub prompt: String,
    pub seed: u64,
    /// Where the restored PNG goes; defaults to
    /// `<control image stem>.restored.png` beside the control image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_path: Option<PathBuf>,
}

impl RestorationRequest {
    pub fn resolved_output_path(&self) -> PathBuf {
        self.output_path.clone().unwrap_or_else(|| {
            let stem = self
                .control_image_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "control".into());
            self.control_image_path
                .with_file_name(format!("{stem}.restored.png"))
        })
    }
}

/// Realism scores of a restored candidate, from a detector and pose pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScores {
    pub classifier_confidence: f64,
    pub pose_confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoint_confidences: Option<BTreeMap<u8, f64>>,
}

impl CandidateScores {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.classifier_confidence) {
            return Err(violation("scores.classifier_confidence", "outside [0, 1]"));
        }
        if !unit(self.pose_confidence) {
            return Err(violation("scores.pose_confidence", "outside [0, 1]"));
        }
        if let Some(k) = &self.keypoint_confidences {
            if k.is_empty() || !k.values().all(|&v| unit(v)) {
                return Err(violation(
                    "scores.keypoint_confidences",
                    "must be nonempty with values in [0, 1]",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestorationResponse {
    pub restored_image_path: PathBuf,
    pub backend_name: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<CandidateScores>,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("backend {program} failed: {reason}")]
    Failed { program: String, reason: String },
}

/// Something that repaints the masked region of an image.
pub trait Backend: Sync {
    fn name(&self) -> &str;

    /// Runs one request already written to `request_path`.
    fn restore(
        &self,
        request: &RestorationRequest,
        request_path: &Path,
    ) -> Result<RestorationResponse, BackendError>;
}

pub const STUB_BACKEND_NAME: &str = "stub";

/// Deterministic scores derived from the request seed.
///
/// A SplitMix64 stream seeded with `seed` yields, in order, the classifier
/// confidence and then the 21 keypoint confidences, each as the top 53 bits
/// of one output divided by 2^53. The pose confidence is the keypoint mean.
pub fn stub_scores(seed: u64) -> CandidateScores {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut unit = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    let classifier_confidence = unit();
    let keypoints: BTreeMap<u8, f64> = (0..landmark::COUNT as u8).map(|id| (id, unit())).collect();
    let pose_confidence = keypoints.values().sum::<f64>() / keypoints.len() as f64;
    CandidateScores {
        classifier_confidence,
        pose_confidence,
        keypoint_confidences: Some(keypoints),
    }
}

fn require_file(path: &Path) -> Result<(), ProtocolError> {
    if !path.is_file() {
        return Err(ProtocolError::FileMissing(path.display().to_string()));
    }
    Ok(())
}

/// Pastes the gray depth rendering into the masked region; everything
/// outside the mask is copied from the input unchanged.
pub fn stub_restore(req: &RestorationRequest) -> Result<RestorationResponse, ProtocolError> {
    for p in [&req.image_path, &req.control_image_path, &req.mask_path] {
        require_file(p)?;
    }
    let image = load_rgb_png(&req.image_path)?;
    let control = DepthImage::load_png(&req.control_image_path)?;
    let mask = BinaryMask::load_png(&req.mask_path)?;
    let dims = image.dimensions();
    if control.dimensions() != dims || mask.dimensions() != dims {
        return Err(ProtocolError::DimensionMismatch(format!(
            "image {:?}, control {:?}, mask {:?}",
            dims,
            control.dimensions(),
            mask.dimensions()
        )));
    }
    let restored = paste_depth(&image, &control, &mask)?;
    let out = req.resolved_output_path();
    save_rgb_png(&restored, &out)?;
    Ok(RestorationResponse {
        restored_image_path: out,
        backend_name: STUB_BACKEND_NAME.to_string(),
        seed: req.seed,
        scores: Some(stub_scores(req.seed)),
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StubBackend;

impl Backend for StubBackend {
    fn name(&self) -> &str {
        STUB_BACKEND_NAME
    }

    fn restore(&self, request: &RestorationRequest, _: &Path) -> Result<RestorationResponse, BackendError> {
        Ok(stub_restore(request)?)
    }
}

/// An external executable following the request-path / stdout contract.
#[derive(Debug, Clone)]
pub struct SubprocessBackend {
    program: PathBuf,
    name: String,
}

impl SubprocessBackend {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        let program = program.into();
        let name = program
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| program.display().to_string());
        Self { program, name }
    }
}

impl Backend for SubprocessBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn restore(&self, _: &RestorationRequest, request_path: &Path) -> Result<RestorationResponse, BackendError> {
        let failed = |reason: String| BackendError::Failed {
            program: self.program.display().to_string(),
            reason,
        };
        let output = Command::new(&self.program)
            .arg(request_path)
            .output()
            .map_err(|e| failed(e.to_string()))?;
        if !output.status.success() {
            return Err(failed(format!(
                "exit status {}: {}",
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        serde_json::from_slice(&output.stdout)
            .map_err(|e| failed(format!("unreadable response: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{depth_to_gray, RgbImage};
    use image::Rgb;

    const POSE: &str = r#"{
        "image_id": "img-1",
        "hands": [
            {"hand_id": "h0", "handedness_guess": "right",
             "keypoints": [{"id": 0, "x": 10.0, "y": 20.0, "confidence": 0.9},
                           {"id": 9, "x": 12.0, "y": 5.0, "confidence": 0.8}]}
        ],
        "body_landmarks": [{"label": "left_elbow", "x": 3.0, "y": 4.0}]
    }"#;

    const DETECTIONS: &str = r#"{
        "image_id": "img-1",
        "detections": [
            {"hand_id": "h0", "bbox": {"x": 2, "y": 3, "width": 20, "height": 25},
             "classifier_confidence": 0.7, "malformed": true}
        ]
    }"#;

    #[test]
    fn pose_fixture_parses_and_round_trips() {
        let p = parse_pose(POSE, "inline").unwrap();
        assert_eq!(p.hands.len(), 1);
        assert_eq!(p.hands[0].keypoints.len(), 2);
        assert_eq!(p.hand("h0").unwrap().handedness_guess, Some(Handedness::Right));
        let back: PoseEstimate = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn pose_invariants() {
        let bad_conf = POSE.replace("0.9", "1.3");
        assert!(matches!(
            parse_pose(&bad_conf, "x"),
            Err(ProtocolError::InvariantViolation { .. })
        ));
        let dup = r#"{"image_id": "i", "hands": [
            {"hand_id": "a", "keypoints": []}, {"hand_id": "a", "keypoints": []}]}"#;
        assert!(matches!(
            parse_pose(dup, "x"),
            Err(ProtocolError::InvariantViolation { field, .. }) if field == "hands[1].hand_id"
        ));
        assert!(matches!(parse_pose("{", "x"), Err(ProtocolError::Parse { .. })));
    }

    #[test]
    fn detection_fixture_and_invariants() {
        let d = parse_detections(DETECTIONS, "inline").unwrap();
        assert_eq!(d.detections[0].bbox.width, 20);
        let zero = DETECTIONS.replace("\"width\": 20", "\"width\": 0");
        assert!(matches!(
            parse_detections(&zero, "x"),
            Err(ProtocolError::InvariantViolation { .. })
        ));
        let neg = DETECTIONS.replace("0.7", "-0.1");
        assert!(matches!(
            parse_detections(&neg, "x"),
            Err(ProtocolError::InvariantViolation { .. })
        ));
    }

    #[test]
    fn files_are_validated() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pose.json");
        fs::write(&p, POSE).unwrap();
        assert!(validate_pose_file(&p).is_ok());
        assert!(matches!(
            validate_pose_file(&dir.path().join("nope.json")),
            Err(ProtocolError::FileMissing(_))
        ));
        let d = dir.path().join("det.json");
        fs::write(&d, DETECTIONS).unwrap();
        assert!(validate_detection_file(&d).is_ok());
    }

    fn write_inputs(dir: &Path, mask: &BinaryMask, depth: u16) -> RestorationRequest {
        let (w, h) = mask.dimensions();
        let img = RgbImage::from_fn(w, h, |x, y| Rgb([(x * 9) as u8, (y * 13) as u8, 200]));
        save_rgb_png(&img, &dir.join("in.png")).unwrap();
        DepthImage::from_fn(w, h, |_, _| depth)
            .save_png(&dir.join("control.png"))
            .unwrap();
        mask.save_png(&dir.join("mask.png")).unwrap();
        RestorationRequest {
            image_path: dir.join("in.png"),
            control_image_path: dir.join("control.png"),
            mask_path: dir.join("mask.png"),
            prompt: "a hand".into(),
            seed: 7,
            output_path: Some(dir.join("out.png")),
        }
    }

    #[test]
    fn stub_empty_mask_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let req = write_inputs(dir.path(), &BinaryMask::empty(16, 12), 30000);
        let resp = stub_restore(&req).unwrap();
        assert_eq!(resp.seed, 7);
        assert_eq!(resp.backend_name, "stub");
        assert_eq!(
            load_rgb_png(&resp.restored_image_path).unwrap(),
            load_rgb_png(&req.image_path).unwrap()
        );
    }

    #[test]
    fn stub_full_and_half_masks() {
        let dir = tempfile::tempdir().unwrap();
        let req = write_inputs(dir.path(), &BinaryMask::full(16, 12), 30000);
        let out = load_rgb_png(&stub_restore(&req).unwrap().restored_image_path).unwrap();
        let g = depth_to_gray(30000);
        assert!(out.pixels().all(|p| p.0 == [g, g, g]));

        let half = BinaryMask::from_fn(16, 12, |x, _| x >= 8);
        let req = write_inputs(dir.path(), &half, 12345);
        let input = load_rgb_png(&req.image_path).unwrap();
        let first = fs::read(stub_restore(&req).unwrap().restored_image_path).unwrap();
        let out = load_rgb_png(&req.resolved_output_path()).unwrap();
        for (x, y, p) in out.enumerate_pixels() {
            if x < 8 {
                assert_eq!(p, input.get_pixel(x, y));
            } else {
                let g = depth_to_gray(12345);
                assert_eq!(p.0, [g, g, g]);
            }
        }
        let second = fs::read(stub_restore(&req).unwrap().restored_image_path).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn stub_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut req = write_inputs(dir.path(), &BinaryMask::empty(16, 12), 1);
        BinaryMask::empty(5, 5).save_png(&req.mask_path).unwrap();
        assert!(matches!(stub_restore(&req), Err(ProtocolError::DimensionMismatch(_))));
        req.mask_path = dir.path().join("missing.png");
        assert!(matches!(stub_restore(&req), Err(ProtocolError::FileMissing(_))));
    }

    #[test]
    fn stub_scores_are_seeded() {
        assert_eq!(stub_scores(3), stub_scores(3));
        assert_ne!(stub_scores(3), stub_scores(4));
        let s = stub_scores(3);
        s.validate().unwrap();
        let mean = s.keypoint_confidences.as_ref().unwrap().values().sum::<f64>() / 21.0;
        assert_eq!(s.pose_confidence, mean);
    }

    #[test]
    fn default_output_path_sits_beside_control_image() {
        let req = RestorationRequest {
            image_path: "a/in.png".into(),
            control_image_path: "work/h0.control.png".into(),
            mask_path: "work/h0.mask.png".into(),
            prompt: String::new(),
            seed: 0,
            output_path: None,
        };
        assert_eq!(req.resolved_output_path(), PathBuf::from("work/h0.control.restored.png"));
    }
}
