//! Seeded synthetic scenes: a textured background with hands whose true
//! template and pose are known. Used by tests, benchmarks and the
//! `make-fixtures` command.

use std::fs;
use std::path::{Path, PathBuf};

use image::Rgb;
use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::geometry::{Keypoint, KeypointSet, Point2, SimilarityTransform};
use crate::pipeline::{PipelineConfig, PipelineError, RestorationJob};
use crate::protocol::{write_json, Detection, DetectionResult, HandPose, PoseEstimate};
use crate::raster::{
    mask_bbox, save_rgb_png, silhouette, warp_depth, BinaryMask, BoundingBox, RgbImage,
};
use crate::templates::TemplateLibrary;

struct Rng(SplitMix64);

impl Rng {
    fn new(seed: u64) -> Self {
        Self(SplitMix64::seed_from_u64(seed))
    }

    fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    fn index(&mut self, n: usize) -> usize {
        ((self.0.next_u64() as u128 * n as u128) >> 64) as usize
    }

    fn coin(&mut self) -> bool {
        self.0.next_u64() >> 63 == 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    /// Each hand gets its own square-ish cell of this width.
    pub cell_width: u32,
    pub height: u32,
    pub hands: usize,
    pub scale_range: (f64, f64),
    /// Rotation drawn from `[-max_angle, max_angle]` radians.
    pub max_angle: f64,
    pub allow_mirror: bool,
    /// Uniform jitter added to the detected keypoints, in pixels.
    pub keypoint_noise: f64,
    /// Padding of the detection box around the true silhouette.
    pub bbox_padding: u32,
    pub malformed: bool,
    pub classifier_confidence: f64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            cell_width: 256,
            height: 256,
            hands: 1,
            scale_range: (1.25, 1.6),
            max_angle: 0.5,
            allow_mirror: true,
            keypoint_noise: 0.0,
            bbox_padding: 4,
            malformed: true,
            classifier_confidence: 0.9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticHand {
    pub hand_id: String,
    pub template_id: String,
    /// Template-to-image transform used to place the hand.
    pub truth: SimilarityTransform<f64>,
    pub silhouette: BinaryMask,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone)]
pub struct SyntheticCase {
    pub seed: u64,
    pub job: RestorationJob,
    pub hands: Vec<SyntheticHand>,
}

/// Smooth, photo-like RGB content: low-frequency waves, a gradient, soft
/// blobs and a little fine texture.
pub fn natural_image(width: u32, height: u32, seed: u64) -> RgbImage {
    let mut rng = Rng::new(seed ^ 0x5eed_1a9e);
    let waves: Vec<[f64; 5]> = (0..4)
        .map(|_| {
            [
                rng.range(0.005, 0.05),
                rng.range(0.005, 0.05),
                rng.range(0.0, std::f64::consts::TAU),
                rng.range(10.0, 40.0),
                rng.index(3) as f64,
            ]
        })
        .collect();
    let blobs: Vec<[f64; 6]> = (0..6)
        .map(|_| {
            [
                rng.range(0.0, width as f64),
                rng.range(0.0, height as f64),
                rng.range(8.0, 40.0),
                rng.range(-60.0, 60.0),
                rng.range(-60.0, 60.0),
                rng.range(-60.0, 60.0),
            ]
        })
        .collect();
    let base = [rng.range(60.0, 180.0), rng.range(60.0, 180.0), rng.range(60.0, 180.0)];
    let grad = (rng.range(-0.3, 0.3), rng.range(-0.3, 0.3));
    let texture = rng.0.next_u64();

    RgbImage::from_fn(width, height, |x, y| {
        let (xf, yf) = (x as f64, y as f64);
        let mut c = base.map(|b| b + grad.0 * xf + grad.1 * yf);
        for w in &waves {
            c[w[4] as usize] += w[3] * (w[0] * xf + w[1] * yf + w[2]).sin();
        }
        for b in &blobs {
            let d2 = (xf - b[0]).powi(2) + (yf - b[1]).powi(2);
            let k = (-d2 / (2.0 * b[2] * b[2])).exp();
            for ch in 0..3 {
                c[ch] += k * b[3 + ch];
            }
        }
        let mut h = texture ^ ((x as u64) << 32 | y as u64);
        h = h.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        h ^= h >> 29;
        let grain = (h >> 56) as f64 / 255.0 * 8.0 - 4.0;
        Rgb(c.map(|v| (v + grain).round().clamp(0.0, 255.0) as u8))
    })
}

fn place(
    rng: &mut Rng,
    spec: &FixtureSpec,
    template_bbox: &BoundingBox,
    cell: u32,
) -> SimilarityTransform<f64> {
    let margin = 6.0;
    let s = rng.range(spec.scale_range.0, spec.scale_range.1);
    let angle = rng.range(-spec.max_angle, spec.max_angle);
    let mirror = spec.allow_mirror && rng.coin();
    let linear = SimilarityTransform::new(s, angle, Point2::origin(), mirror);
    let (x0, y0) = (template_bbox.x as f64 - 0.5, template_bbox.y as f64 - 0.5);
    let (x1, y1) = (
        template_bbox.right() as f64 + 0.5,
        template_bbox.bottom() as f64 + 0.5,
    );
    let corners = [(x0, y0), (x1, y0), (x0, y1), (x1, y1)]
        .map(|(x, y)| linear.apply(Point2::new(x, y)));
    let min_x = corners.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
    let max_x = corners.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
    let min_y = corners.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let max_y = corners.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);

    let cell_lo = (cell * spec.cell_width) as f64 + margin;
    let cell_hi = ((cell + 1) * spec.cell_width) as f64 - 1.0 - margin;
    let pick = |rng: &mut Rng, lo: f64, hi: f64, min: f64, max: f64| {
        let (a, b) = (lo - min, hi - max);
        if a <= b {
            rng.range(a, b)
        } else {
            (a + b) / 2.0
        }
    };
    let tx = pick(rng, cell_lo, cell_hi, min_x, max_x);
    let ty = pick(rng, margin, spec.height as f64 - 1.0 - margin, min_y, max_y);
    SimilarityTransform::new(s, angle, Point2::new(tx, ty), mirror)
}

fn skin(depth: u16, stripe: bool) -> Rgb<u8> {
    let t = depth as f64 / u16::MAX as f64;
    let k = 0.75 + 0.5 * t;
    let base = if stripe { [205.0, 150.0, 125.0] } else { [224.0, 172.0, 140.0] };
    Rgb(base.map(|v: f64| (v * k).round().clamp(0.0, 255.0) as u8))
}

/// A scene with `spec.hands` hands drawn from `lib`, seeded.
///
/// The detected keypoints are the true template keypoints under the true
/// transform (plus optional jitter) and the target silhouette is the union
/// of the placed template silhouettes, so alignment and selection can be
/// checked against ground truth.
pub fn synthetic_case(
    lib: &TemplateLibrary,
    spec: &FixtureSpec,
    seed: u64,
    config: PipelineConfig,
) -> Result<SyntheticCase, PipelineError> {
    let mut rng = Rng::new(seed);
    let width = spec.cell_width * spec.hands as u32;
    let height = spec.height;
    let mut image = natural_image(width, height, seed);
    let sorted = lib.sorted();
    let mut target = BinaryMask::empty(width, height);
    let mut hands = Vec::new();
    let mut poses = Vec::new();
    let mut detections = Vec::new();

    for cell in 0..spec.hands {
        let template = sorted[rng.index(sorted.len())];
        let tbox = mask_bbox(&silhouette(&template.depth))?;
        let truth = place(&mut rng, spec, &tbox, cell as u32);
        let depth = warp_depth(&template.depth, &truth, width, height);
        let sil = silhouette(&depth);
        target = target.union(&sil)?;

        // a visibly wrong rendering of the hand: banded skin
        for (x, y) in sil.iter_set() {
            image.put_pixel(x, y, skin(depth.get(x, y), (x + 2 * y) / 5 % 2 == 0));
        }

        let kps: Vec<Keypoint<f64>> = template
            .keypoints
            .iter()
            .map(|k| {
                let p = truth.apply(k.point);
                let n = spec.keypoint_noise;
                let jitter = if n > 0.0 {
                    Point2::new(rng.range(-n, n), rng.range(-n, n))
                } else {
                    Point2::origin()
                };
                Keypoint::new(k.id, p + jitter, rng.range(0.6, 1.0))
            })
            .collect();
        let keypoints = KeypointSet::new(kps)?;

        let b = mask_bbox(&sil)?;
        let pad = spec.bbox_padding as i64;
        let bbox = BoundingBox::new(
            b.x - pad,
            b.y - pad,
            b.width + 2 * spec.bbox_padding,
            b.height + 2 * spec.bbox_padding,
        )?
        .clamp_to(width, height)
        .expect("silhouette lies inside the frame");

        let hand_id = format!("h{cell}");
        poses.push(HandPose {
            hand_id: hand_id.clone(),
            keypoints,
            handedness_guess: None,
        });
        detections.push(Detection {
            hand_id: hand_id.clone(),
            bbox,
            classifier_confidence: spec.classifier_confidence,
            malformed: spec.malformed,
        });
        hands.push(SyntheticHand {
            hand_id,
            template_id: template.id.clone(),
            truth,
            silhouette: sil,
            bbox,
        });
    }

    let image_id = format!("synthetic-{seed}");
    let job = RestorationJob::new(
        image,
        PathBuf::from(format!("{image_id}.png")),
        PoseEstimate {
            image_id: image_id.clone(),
            hands: poses,
            body_landmarks: None,
        },
        DetectionResult {
            image_id,
            detections,
        },
        Some(target),
        config,
    )?;
    Ok(SyntheticCase { seed, job, hands })
}

/// Paths of a case written to disk.
#[derive(Debug, Clone)]
pub struct CaseFiles {
    pub image: PathBuf,
    pub pose: PathBuf,
    pub detections: PathBuf,
    pub silhouette: PathBuf,
}

/// Writes `image.png`, `pose.json`, `detections.json` and
/// `silhouette.png` into `dir`.
pub fn write_case(case: &SyntheticCase, dir: &Path) -> Result<CaseFiles, PipelineError> {
    fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let files = CaseFiles {
        image: dir.join("image.png"),
        pose: dir.join("pose.json"),
        detections: dir.join("detections.json"),
        silhouette: dir.join("silhouette.png"),
    };
    save_rgb_png(&case.job.image, &files.image)?;
    write_json(&files.pose, &case.job.pose)?;
    write_json(&files.detections, &case.job.detections)?;
    if let Some(s) = &case.job.target_silhouette {
        s.save_png(&files.silhouette)?;
    }
    Ok(files)
}
