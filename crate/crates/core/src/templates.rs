//! Library of anatomically correct hand templates: a depth map, annotated
//! landmarks, handedness and a prompt fragment per gesture.
//!
//! Manifests are JSON:
//!
//! ```json
//! {"templates": [{"id": "spread-palm", "depth_path": "spread-palm.png",
//!   "handedness": "right", "prompt": "...", "gesture": "spread palm",
//!   "keypoints": [{"id": 0, "x": 64.0, "y": 115.0}, ...]}]}
//! ```
//!
//! `depth_path` is resolved relative to the manifest's directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{infer_chirality, landmark, Handedness, Keypoint, KeypointSet, Point2};
use crate::raster::{silhouette, DepthImage, RasterError};

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("manifest {path}: {reason}")]
    ManifestParse { path: String, reason: String },
    #[error("template {id} invalid: {reason}")]
    TemplateInvalid { id: String, reason: String },
    #[error("duplicate template id {0}")]
    DuplicateId(String),
    #[error("template library is empty")]
    EmptyLibrary,
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandTemplate {
    pub id: String,
    pub depth: DepthImage,
    /// Landmarks in template pixel coordinates.
    pub keypoints: KeypointSet<f64>,
    pub handedness: Handedness,
    pub prompt: String,
    pub gesture: String,
}

impl HandTemplate {
    pub fn validate(&self) -> Result<(), TemplateError> {
        let invalid = |reason: String| TemplateError::TemplateInvalid {
            id: self.id.clone(),
            reason,
        };
        let (w, h) = (self.depth.width() as f64, self.depth.height() as f64);
        for kp in self.keypoints.iter() {
            let p = kp.point;
            if !(p.x >= 0.0 && p.y >= 0.0 && p.x <= w - 1.0 && p.y <= h - 1.0) {
                return Err(invalid(format!(
                    "landmark {} at ({}, {}) outside the {}x{} depth map",
                    kp.id, p.x, p.y, w, h
                )));
            }
        }
        for id in [landmark::WRIST, landmark::MIDDLE_MCP] {
            if self.keypoints.get(id).is_none() {
                return Err(invalid(format!("landmark {id} missing")));
            }
        }
        if silhouette(&self.depth).is_empty() {
            return Err(invalid("depth map has an empty silhouette".into()));
        }
        let inferred = infer_chirality(&self.keypoints).map_err(|e| invalid(e.to_string()))?;
        if inferred != self.handedness {
            return Err(invalid(format!(
                "declared {:?} but keypoints describe a {:?} hand",
                self.handedness, inferred
            )));
        }
        Ok(())
    }
}

/// Horizontal flip of a template: depth, keypoints and handedness.
pub fn mirror_template(t: &HandTemplate) -> HandTemplate {
    let last = t.depth.width() as f64 - 1.0;
    HandTemplate {
        id: format!("{}+mirror", t.id),
        depth: t.depth.flipped_horizontally(),
        keypoints: t.keypoints.map_points(|p| Point2::new(last - p.x, p.y)),
        handedness: t.handedness.flipped(),
        prompt: t.prompt.clone(),
        gesture: t.gesture.clone(),
    }
}

#[derive(Debug, Clone)]
pub struct TemplateLibrary {
    templates: Vec<HandTemplate>,
    manifest_path: Option<PathBuf>,
}

impl TemplateLibrary {
    /// Validates every template and rejects duplicate ids.
    pub fn new(templates: Vec<HandTemplate>) -> Result<Self, TemplateError> {
        if templates.is_empty() {
            return Err(TemplateError::EmptyLibrary);
        }
        let mut seen = HashSet::new();
        for t in &templates {
            if !seen.insert(t.id.as_str()) {
                return Err(TemplateError::DuplicateId(t.id.clone()));
            }
            t.validate()?;
        }
        Ok(Self {
            templates,
            manifest_path: None,
        })
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &HandTemplate> {
        self.templates.iter()
    }

    pub fn get(&self, id: &str) -> Option<&HandTemplate> {
        self.templates.iter().find(|t| t.id == id)
    }

    /// Templates ordered by id, independent of manifest order.
    pub fn sorted(&self) -> Vec<&HandTemplate> {
        let mut v: Vec<_> = self.templates.iter().collect();
        v.sort_by(|a, b| a.id.cmp(&b.id));
        v
    }

    pub fn manifest_path(&self) -> Option<&Path> {
        self.manifest_path.as_deref()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    templates: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    depth_path: PathBuf,
    handedness: Handedness,
    prompt: String,
    gesture: String,
    keypoints: Vec<ManifestKeypoint>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestKeypoint {
    id: u8,
    x: f64,
    y: f64,
}

pub fn load_library(manifest: &Path) -> Result<TemplateLibrary, TemplateError> {
    let parse_err = |reason: String| TemplateError::ManifestParse {
        path: manifest.display().to_string(),
        reason,
    };
    let text = fs::read_to_string(manifest).map_err(|e| parse_err(e.to_string()))?;
    let parsed: Manifest = serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));

    let mut seen = HashSet::new();
    let mut templates = Vec::with_capacity(parsed.templates.len());
    for entry in parsed.templates {
        if !seen.insert(entry.id.clone()) {
            return Err(TemplateError::DuplicateId(entry.id));
        }
        let invalid = |reason: String| TemplateError::TemplateInvalid {
            id: entry.id.clone(),
            reason,
        };
        let depth = DepthImage::load_png(&base.join(&entry.depth_path))
            .map_err(|e| invalid(e.to_string()))?;
        let keypoints = KeypointSet::new(
            entry
                .keypoints
                .iter()
                .map(|k| Keypoint::annotated(k.id, k.x, k.y))
                .collect(),
        )
        .map_err(|e| invalid(e.to_string()))?;
        let template = HandTemplate {
            id: entry.id.clone(),
            depth,
            keypoints,
            handedness: entry.handedness,
            prompt: entry.prompt,
            gesture: entry.gesture,
        };
        template.validate()?;
        templates.push(template);
    }
    let mut lib = TemplateLibrary::new(templates)?;
    lib.manifest_path = Some(manifest.to_path_buf());
    Ok(lib)
}

/// Writes `<id>.png` depth files and `manifest.json` into `dir`; returns the
/// manifest path.
pub fn write_library(dir: &Path, templates: &[HandTemplate]) -> Result<PathBuf, TemplateError> {
    let io_err = |path: &Path, source| TemplateError::Io {
        path: path.display().to_string(),
        source,
    };
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut entries = Vec::with_capacity(templates.len());
    for t in templates {
        let file = PathBuf::from(format!("{}.png", t.id));
        t.depth.save_png(&dir.join(&file))?;
        entries.push(ManifestEntry {
            id: t.id.clone(),
            depth_path: file,
            handedness: t.handedness,
            prompt: t.prompt.clone(),
            gesture: t.gesture.clone(),
            keypoints: t
                .keypoints
                .iter()
                .map(|k| ManifestKeypoint {
                    id: k.id,
                    x: k.point.x,
                    y: k.point.y,
                })
                .collect(),
        });
    }
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&Manifest { templates: entries })
        .expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| io_err(&path, e))?;
    Ok(path)
}

/// Procedurally rendered templates shipped with the crate.
pub mod bundled {
    use super::*;

    pub const CANVAS: u32 = 128;
    const WRIST: (f64, f64) = (64.0, 115.0);

    struct Finger {
        base: (f64, f64),
        /// Degrees from straight up, positive toward +x.
        direction: f64,
        lengths: [f64; 3],
        /// Extra turn at each joint, degrees.
        bends: [f64; 3],
        radius: f64,
    }

    struct Gesture {
        id: &'static str,
        gesture: &'static str,
        prompt: &'static str,
        fingers: [Finger; 5],
    }

    fn finger(base: (f64, f64), direction: f64, lengths: [f64; 3], bends: [f64; 3], radius: f64) -> Finger {
        Finger {
            base,
            direction,
            lengths,
            bends,
            radius,
        }
    }

    // Right hand, palm toward the viewer, fingers up: thumb on the image left.
    const THUMB_CMC: (f64, f64) = (50.0, 104.0);
    const INDEX: (f64, f64) = (48.0, 70.0);
    const MIDDLE: (f64, f64) = (60.0, 66.0);
    const RING: (f64, f64) = (72.0, 68.0);
    const PINKY: (f64, f64) = (83.0, 74.0);

    fn gestures() -> Vec<Gesture> {
        vec![
            Gesture {
                id: "spread-palm",
                gesture: "spread palm",
                prompt: "an open hand with all five fingers spread wide, palm facing forward",
                fingers: [
                    finger(THUMB_CMC, -62.0, [15.0, 13.0, 11.0], [0.0, 8.0, 6.0], 6.0),
                    finger(INDEX, -16.0, [19.0, 12.0, 10.0], [0.0, 0.0, 0.0], 5.0),
                    finger(MIDDLE, -3.0, [21.0, 14.0, 11.0], [0.0, 0.0, 0.0], 5.2),
                    finger(RING, 11.0, [19.0, 13.0, 10.0], [0.0, 0.0, 0.0], 5.0),
                    finger(PINKY, 26.0, [15.0, 10.0, 9.0], [0.0, 0.0, 0.0], 4.4),
                ],
            },
            Gesture {
                id: "curved",
                gesture: "curved hand",
                prompt: "a hand curved into a relaxed C shape, fingers together and gently bent",
                fingers: [
                    finger(THUMB_CMC, -80.0, [15.0, 12.0, 10.0], [25.0, 30.0, 20.0], 6.0),
                    finger(INDEX, -12.0, [17.0, 10.0, 8.0], [-28.0, -32.0, -24.0], 5.0),
                    finger(MIDDLE, -4.0, [19.0, 11.0, 8.0], [-28.0, -32.0, -24.0], 5.2),
                    finger(RING, 4.0, [17.0, 10.0, 8.0], [-28.0, -32.0, -24.0], 5.0),
                    finger(PINKY, 12.0, [13.0, 8.0, 7.0], [-28.0, -30.0, -24.0], 4.4),
                ],
            },
            Gesture {
                id: "relaxed",
                gesture: "relaxed hand",
                prompt: "a relaxed natural hand with fingers slightly apart and softly bent",
                fingers: [
                    finger(THUMB_CMC, -48.0, [15.0, 12.0, 10.0], [6.0, 10.0, 8.0], 6.0),
                    finger(INDEX, -7.0, [18.0, 11.0, 9.0], [4.0, 8.0, 6.0], 5.0),
                    finger(MIDDLE, 0.0, [19.0, 12.0, 9.0], [5.0, 9.0, 6.0], 5.2),
                    finger(RING, 7.0, [17.0, 11.0, 8.0], [7.0, 10.0, 7.0], 5.0),
                    finger(PINKY, 15.0, [13.0, 9.0, 7.0], [8.0, 10.0, 8.0], 4.4),
                ],
            },
            Gesture {
                id: "pointing",
                gesture: "pointing index finger",
                prompt: "a hand pointing with the index finger extended and the other fingers folded",
                fingers: [
                    finger(THUMB_CMC, -35.0, [14.0, 10.0, 8.0], [40.0, 35.0, 20.0], 6.0),
                    finger(INDEX, -4.0, [20.0, 13.0, 10.0], [0.0, 0.0, 0.0], 5.0),
                    finger(MIDDLE, 170.0, [7.0, 5.0, 4.0], [20.0, 20.0, 10.0], 5.2),
                    finger(RING, 168.0, [7.0, 5.0, 4.0], [20.0, 20.0, 10.0], 5.0),
                    finger(PINKY, 165.0, [6.0, 4.0, 3.0], [20.0, 20.0, 10.0], 4.4),
                ],
            },
        ]
    }

    fn joints(f: &Finger) -> [(f64, f64); 4] {
        let mut pts = [f.base; 4];
        let mut dir = f.direction;
        for i in 0..3 {
            dir += f.bends[i];
            let rad = dir.to_radians();
            let (px, py) = pts[i];
            pts[i + 1] = (px + f.lengths[i] * rad.sin(), py - f.lengths[i] * rad.cos());
        }
        pts
    }

    fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
        let (abx, aby) = (b.0 - a.0, b.1 - a.1);
        let (apx, apy) = (p.0 - a.0, p.1 - a.1);
        let len2 = abx * abx + aby * aby;
        let t = if len2 == 0.0 {
            0.0
        } else {
            ((apx * abx + apy * aby) / len2).clamp(0.0, 1.0)
        };
        let (dx, dy) = (apx - t * abx, apy - t * aby);
        (dx * dx + dy * dy).sqrt()
    }

    fn inside_convex(p: (f64, f64), poly: &[(f64, f64)]) -> bool {
        let n = poly.len();
        let mut sign = 0.0f64;
        for i in 0..n {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            let c = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
            if c != 0.0 {
                if sign != 0.0 && c.signum() != sign {
                    return false;
                }
                sign = c.signum();
            }
        }
        true
    }

    // Dyadic coordinates keep mirroring and JSON round trips exact.
    fn snap(v: f64) -> f64 {
        (v * 256.0).round() / 256.0
    }

    fn render(g: &Gesture) -> HandTemplate {
        let chains: Vec<[(f64, f64); 4]> = g.fingers.iter().map(joints).collect();
        let palm = [
            (WRIST.0 - 13.0, WRIST.1 + 3.0),
            THUMB_CMC,
            (INDEX.0 - 3.0, INDEX.1),
            MIDDLE,
            RING,
            (PINKY.0 + 3.0, PINKY.1),
            (WRIST.0 + 14.0, WRIST.1 + 1.0),
        ];
        let depth = DepthImage::from_fn(CANVAS, CANVAS, |x, y| {
            let p = (x as f64, y as f64);
            let mut best = 0.0f64;
            if inside_convex(p, &palm) {
                let d = ((p.0 - 66.0).powi(2) + (p.1 - 90.0).powi(2)).sqrt();
                best = 24000.0 + 6000.0 * (1.0 - d / 40.0).max(0.0);
            }
            for (f, chain) in g.fingers.iter().zip(&chains) {
                let mut start = chain[0];
                for (si, &end) in chain[1..].iter().enumerate() {
                    let d = segment_distance(p, start, end);
                    if d <= f.radius {
                        let curl: f64 = f.bends[..=si].iter().map(|b| b.abs()).sum();
                        let v = 26000.0 + 150.0 * curl + 8000.0 * (1.0 - d / f.radius);
                        best = best.max(v);
                    }
                    start = end;
                }
            }
            best.round().min(u16::MAX as f64) as u16
        });

        let mut kps = vec![Keypoint::annotated(landmark::WRIST, WRIST.0, WRIST.1)];
        for (fi, chain) in chains.iter().enumerate() {
            for (ji, &(x, y)) in chain.iter().enumerate() {
                kps.push(Keypoint::annotated((1 + fi * 4 + ji) as u8, snap(x), snap(y)));
            }
        }
        HandTemplate {
            id: g.id.to_string(),
            depth,
            keypoints: KeypointSet::new(kps).expect("bundled keypoints are well formed"),
            handedness: Handedness::Right,
            prompt: g.prompt.to_string(),
            gesture: g.gesture.to_string(),
        }
    }

    /// The bundled right-hand templates: spread palm, curved, relaxed and
    /// pointing gestures on a 128x128 canvas.
    pub fn templates() -> Vec<HandTemplate> {
        gestures().iter().map(render).collect()
    }

    pub fn library() -> TemplateLibrary {
        TemplateLibrary::new(templates()).expect("bundled templates are valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_templates_are_valid() {
        let lib = bundled::library();
        assert_eq!(lib.len(), 4);
        for t in lib.iter() {
            t.validate().unwrap();
            assert_eq!(t.keypoints.len(), landmark::COUNT);
        }
    }

    #[test]
    fn bundled_silhouettes_differ() {
        let lib = bundled::library();
        let sils: Vec<_> = lib.iter().map(|t| silhouette(&t.depth)).collect();
        for i in 0..sils.len() {
            for j in i + 1..sils.len() {
                let v = crate::raster::iou(&sils[i], &sils[j]).unwrap();
                assert!(v < 0.9, "templates {i} and {j} overlap with IoU {v}");
            }
        }
    }

    #[test]
    fn mirror_examples() {
        let t = &bundled::templates()[0];
        let m = mirror_template(t);
        assert_eq!(m.handedness, Handedness::Left);
        assert_eq!(m.id, "spread-palm+mirror");
        m.validate().unwrap();
        let mm = mirror_template(&m);
        assert_eq!(mm.depth, t.depth);
        assert_eq!(mm.keypoints, t.keypoints);
        assert_eq!(mm.handedness, t.handedness);

        let narrow = HandTemplate {
            depth: DepthImage::from_fn(100, 128, |x, y| t.depth.get(x, y)),
            keypoints: KeypointSet::new(vec![Keypoint::annotated(landmark::WRIST, 10.0, 40.0)])
                .unwrap(),
            ..t.clone()
        };
        let m = mirror_template(&narrow);
        assert_eq!(m.keypoints.point(landmark::WRIST).unwrap().x, 89.0);
    }

    #[test]
    fn library_round_trips_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let templates = bundled::templates();
        let path = write_library(dir.path(), &templates[..3]).unwrap();
        let lib = load_library(&path).unwrap();
        assert_eq!(lib.len(), 3);
        assert_eq!(lib.get("curved").unwrap(), &templates[1]);
        assert_eq!(lib.manifest_path(), Some(path.as_path()));
    }

    #[test]
    fn empty_silhouette_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = bundled::templates().remove(0);
        t.depth = DepthImage::new(128, 128);
        let path = write_library(dir.path(), &[t]).unwrap();
        assert!(matches!(
            load_library(&path),
            Err(TemplateError::TemplateInvalid { .. })
        ));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let t = bundled::templates().remove(0);
        let path = write_library(dir.path(), &[t.clone(), t]).unwrap();
        assert!(matches!(
            load_library(&path),
            Err(TemplateError::DuplicateId(id)) if id == "spread-palm"
        ));
    }

    #[test]
    fn handedness_mismatch_is_rejected() {
        let mut t = bundled::templates().remove(2);
        t.handedness = Handedness::Left;
        assert!(matches!(t.validate(), Err(TemplateError::TemplateInvalid { .. })));
    }

    #[test]
    fn malformed_manifest_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        fs::write(&path, "{\"templates\": [").unwrap();
        assert!(matches!(
            load_library(&path),
            Err(TemplateError::ManifestParse { .. })
        ));
    }
}
