//! Evaluation metrics: mean hand pose confidence, mean hand classifier
//! confidence, masked PSNR / SSIM over the untouched part of an image, and
//! Pearson correlation for validating the confidences against ratings.
//!
//! Aggregates are summed sequentially in record order so results are
//! reproducible bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::raster::{BinaryMask, RgbImage};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("hand {0} has no keypoint confidences")]
    EmptyRecord(String),
    #[error("hand {0}: confidence outside [0, 1]")]
    InvalidConfidence(String),
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("restoration mask covers the whole image")]
    MaskCoversImage,
    #[error("no SSIM window lies entirely outside the restoration mask")]
    NoValidWindows,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("at least two samples are required")]
    TooFewSamples,
    #[error("sequence has zero variance")]
    ZeroVariance,
    #[error("{path}:{line}: {reason}")]
    RecordParse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Per-keypoint confidences of one hand over its detected landmarks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandPoseRecord<T = f64> {
    pub hand_id: String,
    pub keypoint_confidences: BTreeMap<u8, T>,
}

/// Hand classifier confidence of one hand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierRecord<T = f64> {
    pub hand_id: String,
    pub confidence: T,
}

fn in_unit<T: Scalar>(v: T) -> bool {
    v >= T::zero() && v <= T::one()
}

/// Mean over hands of the per-hand mean keypoint confidence.
///
/// Every hand weighs the same regardless of how many keypoints it has.
pub fn mean_pose_confidence<T: Scalar>(records: &[HandPoseRecord<T>]) -> Result<T, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let mut total = T::zero();
    for r in records {
        if r.keypoint_confidences.is_empty() {
            return Err(MetricsError::EmptyRecord(r.hand_id.clone()));
        }
        let mut hand = T::zero();
        for &c in r.keypoint_confidences.values() {
            if !in_unit(c) {
                return Err(MetricsError::InvalidConfidence(r.hand_id.clone()));
            }
            hand = hand + c;
        }
        total = total + hand / T::lit(r.keypoint_confidences.len() as f64);
    }
    Ok(total / T::lit(records.len() as f64))
}

/// Mean classifier confidence over hands.
pub fn mean_classifier_confidence<T: Scalar>(records: &[ClassifierRecord<T>]) -> Result<T, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let mut total = T::zero();
    for r in records {
        if !in_unit(r.confidence) {
            return Err(MetricsError::InvalidConfidence(r.hand_id.clone()));
        }
        total = total + r.confidence;
    }
    Ok(total / T::lit(records.len() as f64))
}

fn check_dims(a: (u32, u32), b: (u32, u32)) -> Result<(), MetricsError> {
    if a != b {
        return Err(MetricsError::DimensionMismatch(a.0, a.1, b.0, b.1));
    }
    Ok(())
}

/// PSNR in dB over the pixels outside `restored`, with one MSE pooled over
/// the three channels. Identical outside regions give `f64::INFINITY`.
pub fn masked_psnr(a: &RgbImage, b: &RgbImage, restored: &BinaryMask) -> Result<f64, MetricsError> {
    check_dims(a.dimensions(), b.dimensions())?;
    check_dims(a.dimensions(), restored.dimensions())?;
    let mut sse = 0.0f64;
    let mut n = 0usize;
    for (x, y, pa) in a.enumerate_pixels() {
        if restored.get(x, y) {
            continue;
        }
        let pb = b.get_pixel(x, y);
        for c in 0..3 {
            let d = pa[c] as f64 - pb[c] as f64;
            sse += d * d;
        }
        n += 3;
    }
    if n == 0 {
        return Err(MetricsError::MaskCoversImage);
    }
    let mse = sse / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

/// SSIM parameters: Gaussian window and stabilizing constants.
pub mod ssim {
    pub const WINDOW: usize = 11;
    pub const SIGMA: f64 = 1.5;
    pub const K1: f64 = 0.01;
    pub const K2: f64 = 0.03;
    pub const DYNAMIC_RANGE: f64 = 255.0;

    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn kernel() -> [f64; WINDOW] {
        let r = (WINDOW / 2) as f64;
        let mut k = [0.0; WINDOW];
        for (i, v) in k.iter_mut().enumerate() {
            let d = i as f64 - r;
            *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
        }
        let s: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= s);
        k
    }
}

/// BT.601 luma, unrounded.
pub fn luma(img: &RgbImage) -> Vec<f64> {
    img.pixels()
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

/// Valid-mode separable filtering of a `w x h` plane with `k` in both axes.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * src[x + i];
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * rows[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean SSIM on luma over the windows that lie entirely outside `restored`.
///
/// Windows are 11x11 Gaussian (sigma 1.5) placed fully inside the image.
pub fn masked_ssim(a: &RgbImage, b: &RgbImage, restored: &BinaryMask) -> Result<f64, MetricsError> {
    use ssim::*;
    check_dims(a.dimensions(), b.dimensions())?;
    check_dims(a.dimensions(), restored.dimensions())?;
    let (w, h) = (a.width() as usize, a.height() as usize);
    if w < WINDOW || h < WINDOW {
        return Err(MetricsError::NoValidWindows);
    }

    // summed-area table of the mask for window exclusion
    let mut sat = vec![0u32; (w + 1) * (h + 1)];
    for y in 0..h {
        for x in 0..w {
            sat[(y + 1) * (w + 1) + x + 1] = restored.get(x as u32, y as u32) as u32
                + sat[y * (w + 1) + x + 1]
                + sat[(y + 1) * (w + 1) + x]
                - sat[y * (w + 1) + x];
        }
    }
    let masked_in = |x: usize, y: usize| {
        let (x1, y1) = (x + WINDOW, y + WINDOW);
        sat[y1 * (w + 1) + x1] + sat[y * (w + 1) + x] - sat[y * (w + 1) + x1] - sat[y1 * (w + 1) + x]
    };

    let la = luma(a);
    let lb = luma(b);
    let k = kernel();
    let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mu_a = filter_valid(&la, w, h, &k);
    let mu_b = filter_valid(&lb, w, h, &k);
    let e_aa = filter_valid(&sq(&la, &la), w, h, &k);
    let e_bb = filter_valid(&sq(&lb, &lb), w, h, &k);
    let e_ab = filter_valid(&sq(&la, &lb), w, h, &k);

    let c1 = (K1 * DYNAMIC_RANGE).powi(2);
    let c2 = (K2 * DYNAMIC_RANGE).powi(2);
    let ow = w + 1 - WINDOW;
    let oh = h + 1 - WINDOW;
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..oh {
        for x in 0..ow {
            if masked_in(x, y) > 0 {
                continue;
            }
            let i = y * ow + x;
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            total += num / den;
            count += 1;
        }
    }
    if count == 0 {
        return Err(MetricsError::NoValidWindows);
    }
    Ok(total / count as f64)
}

/// Sample Pearson correlation coefficient.
pub fn pearson<T: Scalar>(xs: &[T], ys: &[T]) -> Result<T, MetricsError> {
    if xs.len() != ys.len() {
        return Err(MetricsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(MetricsError::TooFewSamples);
    }
    let n = T::lit(xs.len() as f64);
    let mean = |v: &[T]| v.iter().fold(T::zero(), |a, &b| a + b) / n;
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy = sxy + dx * dy;
        sxx = sxx + dx * dx;
        syy = syy + dy * dy;
    }
    if sxx == T::zero() || syy == T::zero() {
        return Err(MetricsError::ZeroVariance);
    }
    let r = sxy / (sxx.sqrt() * syy.sqrt());
    Ok(r.max(-T::one()).min(T::one()))
}

/// Dataset-level summary in the column order of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mean_pose_confidence: f64,
    pub mean_classifier_confidence: f64,
    /// Mean over images; `+inf` when any image is untouched outside its mask.
    #[serde(with = "psnr_serde")]
    pub masked_psnr_db: f64,
    pub masked_ssim: f64,
    pub n_hands: usize,
}

/// `+inf` is written as the string `"+inf"` since JSON has no infinity.
mod psnr_serde {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("+inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "+inf" || t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("invalid PSNR value {t:?}"))),
        }
    }
}

pub(crate) mod optional_psnr_serde {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(v) => psnr_serde::serialize(v, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        #[derive(Deserialize)]
        struct Wrap(#[serde(with = "psnr_serde")] f64);
        Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
    }
}

fn mean(values: &[f64]) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

impl MetricsReport {
    /// Aggregates per-hand records and per-image fidelity scores.
    pub fn aggregate(
        pose: &[HandPoseRecord],
        classifier: &[ClassifierRecord],
        psnr_db: &[f64],
        ssim: &[f64],
    ) -> Result<Self, MetricsError> {
        if pose.len() != classifier.len() {
            return Err(MetricsError::LengthMismatch(pose.len(), classifier.len()));
        }
        Ok(Self {
            mean_pose_confidence: mean_pose_confidence(pose)?,
            mean_classifier_confidence: mean_classifier_confidence(classifier)?,
            masked_psnr_db: mean(psnr_db)?,
            masked_ssim: mean(ssim)?,
            n_hands: pose.len(),
        })
    }

    pub fn psnr_cell(&self) -> String {
        if self.masked_psnr_db.is_infinite() && self.masked_psnr_db > 0.0 {
            "+inf".to_string()
        } else {
            format!("{:.2}", self.masked_psnr_db)
        }
    }

    /// Aligned text table: Method, c_pose, c_classifier, PSNR, SSIM.
    pub fn to_table(&self, method: &str) -> String {
        let header = ["Method", "c_pose", "c_classifier", "PSNR", "SSIM"];
        let row = [
            method.to_string(),
            format!("{:.4}", self.mean_pose_confidence),
            format!("{:.4}", self.mean_classifier_confidence),
            self.psnr_cell(),
            format!("{:.4}", self.masked_ssim),
        ];
        let widths: Vec<usize> = header
            .iter()
            .zip(&row)
            .map(|(h, r)| h.len().max(r.len()))
            .collect();
        let mut out = String::new();
        for line in [header.map(String::from).to_vec(), row.to_vec()] {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{c:<w$}"))
                .collect();
            writeln!(out, "{}", cells.join("  ").trim_end()).unwrap();
        }
        out
    }
}

/// Reads a JSON-lines file; blank lines are skipped.
pub fn read_jsonl<R: DeserializeOwned>(path: &Path) -> Result<Vec<R>, MetricsError> {
    let text = fs::read_to_string(path).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| MetricsError::RecordParse {
                path: path.display().to_string(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

pub fn write_jsonl<R: Serialize>(path: &Path, records: &[R]) -> Result<(), MetricsError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn pose(id: &str, cs: &[f64]) -> HandPoseRecord {
        HandPoseRecord {
            hand_id: id.into(),
            keypoint_confidences: cs.iter().enumerate().map(|(i, &c)| (i as u8, c)).collect(),
        }
    }

    fn cls(id: &str, c: f64) -> ClassifierRecord {
        ClassifierRecord {
            hand_id: id.into(),
            confidence: c,
        }
    }

    fn textured(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            Rgb([
                ((x * 7 + y * 3) % 200) as u8 + 20,
                ((x * x + y * 5) % 180) as u8 + 30,
                ((x ^ y) % 220) as u8 + 10,
            ])
        })
    }

    #[test]
    fn pose_confidence_examples() {
        assert_eq!(mean_pose_confidence(&[pose("a", &[1.0; 21])]).unwrap(), 1.0);
        let v = mean_pose_confidence(&[pose("a", &[0.2, 0.4]), pose("b", &[1.0])]).unwrap();
        assert!((v - 0.65).abs() < 1e-15);
        assert_eq!(mean_pose_confidence(&[pose("a", &[0.37])]).unwrap(), 0.37);
        assert!(matches!(
            mean_pose_confidence::<f64>(&[]),
            Err(MetricsError::EmptyDataset)
        ));
        assert!(matches!(
            mean_pose_confidence(&[pose("z", &[])]),
            Err(MetricsError::EmptyRecord(id)) if id == "z"
        ));
    }

    #[test]
    fn classifier_confidence_examples() {
        assert_eq!(mean_classifier_confidence(&[cls("a", 0.0), cls("b", 0.0)]).unwrap(), 0.0);
        let v = mean_classifier_confidence(&[cls("a", 0.2), cls("b", 0.3)]).unwrap();
        assert!((v - 0.25).abs() < 1e-15);
        assert_eq!(mean_classifier_confidence(&[cls("a", 0.25)]).unwrap(), 0.25);
        assert!(mean_classifier_confidence(&[cls("a", -0.1)]).is_err());
    }

    #[test]
    fn psnr_examples() {
        let a = textured(32, 24);
        let none = BinaryMask::empty(32, 24);
        assert_eq!(masked_psnr(&a, &a, &none).unwrap(), f64::INFINITY);

        let mut b = a.clone();
        b.pixels_mut().for_each(|p| p[1] = p[1].wrapping_add(16));
        let expected = 10.0 * (255.0f64 * 255.0 / (256.0 / 3.0)).log10();
        assert!((masked_psnr(&a, &b, &none).unwrap() - expected).abs() < 1e-6);

        let inside = BinaryMask::from_fn(32, 24, |x, y| x > 4 && x < 20 && y > 3 && y < 15);
        let mut c = a.clone();
        for (x, y) in inside.iter_set() {
            c.put_pixel(x, y, Rgb([0, 0, 0]));
        }
        assert_eq!(masked_psnr(&a, &c, &inside).unwrap(), f64::INFINITY);
        assert!(matches!(
            masked_psnr(&a, &c, &BinaryMask::full(32, 24)),
            Err(MetricsError::MaskCoversImage)
        ));
        assert!(masked_psnr(&a, &textured(31, 24), &none).is_err());
    }

    #[test]
    fn ssim_examples() {
        let a = textured(48, 40);
        let none = BinaryMask::empty(48, 40);
        assert_eq!(masked_ssim(&a, &a, &none).unwrap(), 1.0);

        let inside = BinaryMask::from_fn(48, 40, |x, y| (20..28).contains(&x) && (18..24).contains(&y));
        let margin = BinaryMask::from_fn(48, 40, |x, y| (15..33).contains(&x) && (13..29).contains(&y));
        let mut b = a.clone();
        for (x, y) in inside.iter_set() {
            b.put_pixel(x, y, Rgb([255, 0, 255]));
        }
        assert_eq!(masked_ssim(&a, &b, &margin).unwrap(), 1.0);
        assert!(masked_ssim(&a, &b, &none).unwrap() < 1.0);
        assert!(matches!(
            masked_ssim(&a, &a, &BinaryMask::full(48, 40)),
            Err(MetricsError::NoValidWindows)
        ));
        assert!(matches!(
            masked_ssim(&textured(10, 10), &textured(10, 10), &BinaryMask::empty(10, 10)),
            Err(MetricsError::NoValidWindows)
        ));
    }

    #[test]
    fn pearson_examples() {
        let xs = [1.0, 2.0, 5.0, 7.5];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        assert!((pearson(&xs, &ys).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0f64, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(pearson(&[1.0, 2.0], &[1.0]), Err(MetricsError::LengthMismatch(2, 1))));
        assert!(matches!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(MetricsError::ZeroVariance)));
        assert!((pearson(&[1.0f32, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn report_serializes_infinite_psnr() {
        let r = MetricsReport {
            mean_pose_confidence: 0.79,
            mean_classifier_confidence: 0.25,
            masked_psnr_db: f64::INFINITY,
            masked_ssim: 1.0,
            n_hands: 3,
        };
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"masked_psnr_db\":\"+inf\""));
        assert_eq!(serde_json::from_str::<MetricsReport>(&json).unwrap(), r);
        let table = r.to_table("HandCraft");
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("Method"));
        assert!(lines[1].contains("+inf") && lines[1].contains("1.0000"));
        assert!(table.ends_with('\n'));
    }

    #[test]
    fn records_round_trip_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pose.jsonl");
        let recs = vec![pose("a", &[0.5, 0.25]), pose("b", &[1.0])];
        write_jsonl(&p, &recs).unwrap();
        assert_eq!(read_jsonl::<HandPoseRecord>(&p).unwrap(), recs);
        fs::write(&p, "{\"hand_id\": 3}\n").unwrap();
        assert!(matches!(
            read_jsonl::<HandPoseRecord>(&p),
            Err(MetricsError::RecordParse { line: 1, .. })
        ));
    }
}
