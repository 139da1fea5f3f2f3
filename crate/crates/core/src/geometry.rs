//! Points, hand keypoints and the similarity transform that places a hand
//! template onto a detected hand.
//!
//! Transforms act on pixel coordinates with a top-left origin and the y axis
//! pointing down. A [`SimilarityTransform`] applies its parts in a fixed
//! order: mirror (negate x), then scale, then rotate, then translate.
//!
//! Alignment follows four steps:
//!
//! 1. corresponding keypoints are looked up in the template and detected sets,
//! 2. the template is scaled by the ratio of the anchor-pair distances,
//! 3. the template wrist is moved onto the detected wrist,
//! 4. the template is rotated by the signed angle between the anchor vectors,
//!    with a mirror inserted first when the two hands have opposite chirality.

use std::collections::BTreeSet;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Landmark indices of the 21-point hand topology.
pub mod landmark {
    pub const WRIST: u8 = 0;
    pub const THUMB_CMC: u8 = 1;
    pub const THUMB_MCP: u8 = 2;
    pub const THUMB_IP: u8 = 3;
    pub const THUMB_TIP: u8 = 4;
    pub const INDEX_MCP: u8 = 5;
    pub const INDEX_PIP: u8 = 6;
    pub const INDEX_DIP: u8 = 7;
    pub const INDEX_TIP: u8 = 8;
    pub const MIDDLE_MCP: u8 = 9;
    pub const MIDDLE_PIP: u8 = 10;
    pub const MIDDLE_DIP: u8 = 11;
    pub const MIDDLE_TIP: u8 = 12;
    pub const RING_MCP: u8 = 13;
    pub const RING_PIP: u8 = 14;
    pub const RING_DIP: u8 = 15;
    pub const RING_TIP: u8 = 16;
    pub const PINKY_MCP: u8 = 17;
    pub const PINKY_PIP: u8 = 18;
    pub const PINKY_DIP: u8 = 19;
    pub const PINKY_TIP: u8 = 20;

    pub const COUNT: usize = 21;

    /// Anchor pair used for scale and rotation: wrist and middle-finger base.
    pub const DEFAULT_ANCHORS: (u8, u8) = (WRIST, MIDDLE_MCP);
}

/// Separation below which two anchor points count as coincident.
pub const ANCHOR_EPSILON: f64 = 1e-6;
/// Cross-product magnitude below which the chirality triangle is collinear.
pub const CHIRALITY_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("degenerate keypoints: {0}")]
    DegenerateKeypoints(String),
    #[error("invalid keypoint set: {0}")]
    InvalidKeypoints(String),
}

/// A 2-D point or offset in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2<T> {
    pub x: T,
    pub y: T,
}

impl<T: Scalar> Point2<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    pub fn origin() -> Self {
        Self::new(T::zero(), T::zero())
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn dot(self, other: Self) -> T {
        self.x * other.x + self.y * other.y
    }

    /// z component of the 3-D cross product.
    pub fn cross(self, other: Self) -> T {
        self.x * other.y - self.y * other.x
    }

    pub fn norm(self) -> T {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Self) -> T {
        (self - other).norm()
    }

    pub fn cast<U: Scalar>(self) -> Point2<U> {
        Point2::new(U::lit(self.x.as_f64()), U::lit(self.y.as_f64()))
    }
}

impl<T: Scalar> Add for Point2<T> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl<T: Scalar> Sub for Point2<T> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl<T: Scalar> Neg for Point2<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y)
    }
}

impl<T: Scalar> Mul<T> for Point2<T> {
    type Output = Self;
    fn mul(self, rhs: T) -> Self {
        Self::new(self.x * rhs, self.y * rhs)
    }
}

fn default_confidence<T: num_traits::One>() -> T {
    T::one()
}

/// One landmark of a hand with its detector confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: num_traits::One + Deserialize<'de>"))]
pub struct Keypoint<T> {
    pub id: u8,
    #[serde(flatten)]
    pub point: Point2<T>,
    #[serde(default = "default_confidence")]
    pub confidence: T,
}

impl<T: Scalar> Keypoint<T> {
    pub fn new(id: u8, point: Point2<T>, confidence: T) -> Self {
        Self {
            id,
            point,
            confidence,
        }
    }

    /// Keypoint with full confidence, as annotated on templates.
    pub fn annotated(id: u8, x: T, y: T) -> Self {
        Self::new(id, Point2::new(x, y), T::one())
    }
}

/// The landmarks detected on one hand, ordered by landmark id.
///
/// Missing landmarks are simply absent; [`KeypointSet::detected_ids`] is the
/// index set of the landmarks that are present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "Vec<Keypoint<T>>",
    into = "Vec<Keypoint<T>>",
    bound(
        serialize = "T: Scalar + Serialize",
        deserialize = "T: Scalar + Deserialize<'de>"
    )
)]
pub struct KeypointSet<T> {
    keypoints: Vec<Keypoint<T>>,
}

impl<T: Scalar> KeypointSet<T> {
    pub fn new(mut keypoints: Vec<Keypoint<T>>) -> Result<Self, GeometryError> {
        keypoints.sort_by_key(|k| k.id);
        for pair in keypoints.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(GeometryError::InvalidKeypoints(format!(
                    "duplicate landmark id {}",
                    pair[0].id
                )));
            }
        }
        for kp in &keypoints {
            if kp.id as usize >= landmark::COUNT {
                return Err(GeometryError::InvalidKeypoints(format!(
                    "landmark id {} out of range",
                    kp.id
                )));
            }
            if !kp.point.is_finite() {
                return Err(GeometryError::InvalidKeypoints(format!(
                    "landmark {} has non-finite coordinates",
                    kp.id
                )));
            }
            if !(kp.confidence >= T::zero() && kp.confidence <= T::one()) {
                return Err(GeometryError::InvalidKeypoints(format!(
                    "landmark {} confidence {} outside [0, 1]",
                    kp.id, kp.confidence
                )));
            }
        }
        Ok(Self { keypoints })
    }

    pub fn from_points(points: impl IntoIterator<Item = (u8, Point2<T>)>) -> Result<Self, GeometryError> {
        Self::new(
            points
                .into_iter()
                .map(|(id, p)| Keypoint::new(id, p, T::one()))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Keypoint<T>> {
        self.keypoints.iter()
    }

    pub fn detected_ids(&self) -> BTreeSet<u8> {
        self.keypoints.iter().map(|k| k.id).collect()
    }

    pub fn get(&self, id: u8) -> Option<&Keypoint<T>> {
        self.keypoints
            .binary_search_by_key(&id, |k| k.id)
            .ok()
            .map(|i| &self.keypoints[i])
    }

    pub fn point(&self, id: u8) -> Option<Point2<T>> {
        self.get(id).map(|k| k.point)
    }

    fn require(&self, id: u8) -> Result<Point2<T>, GeometryError> {
        self.point(id).ok_or_else(|| {
            GeometryError::DegenerateKeypoints(format!("landmark {id} missing"))
        })
    }

    /// Applies `f` to every point, keeping ids and confidences.
    pub fn map_points(&self, mut f: impl FnMut(Point2<T>) -> Point2<T>) -> Self {
        Self {
            keypoints: self
                .keypoints
                .iter()
                .map(|k| Keypoint::new(k.id, f(k.point), k.confidence))
                .collect(),
        }
    }

    pub fn transformed(&self, t: &SimilarityTransform<T>) -> Self {
        self.map_points(|p| t.apply(p))
    }
}

impl<T: Scalar> TryFrom<Vec<Keypoint<T>>> for KeypointSet<T> {
    type Error = GeometryError;
    fn try_from(v: Vec<Keypoint<T>>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl<T> From<KeypointSet<T>> for Vec<Keypoint<T>> {
    fn from(s: KeypointSet<T>) -> Self {
        s.keypoints
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Handedness {
    Left,
    Right,
}

impl Handedness {
    pub fn flipped(self) -> Self {
        match self {
            Handedness::Left => Handedness::Right,
            Handedness::Right => Handedness::Left,
        }
    }
}

/// Handedness from the orientation of the wrist / index-base / pinky-base
/// triangle.
///
/// In y-down image coordinates a positive cross product
/// `(index - wrist) x (pinky - wrist)` is reported as [`Handedness::Right`]
/// (a right palm facing the viewer); mirroring the points flips the sign.
pub fn infer_chirality<T: Scalar>(kps: &KeypointSet<T>) -> Result<Handedness, GeometryError> {
    let wrist = kps.require(landmark::WRIST)?;
    let index = kps.require(landmark::INDEX_MCP)?;
    let pinky = kps.require(landmark::PINKY_MCP)?;
    let cross = (index - wrist).cross(pinky - wrist);
    if cross.abs() < T::lit(CHIRALITY_EPSILON) {
        return Err(GeometryError::DegenerateKeypoints(
            "wrist, index base and pinky base are collinear".into(),
        ));
    }
    Ok(if cross > T::zero() {
        Handedness::Right
    } else {
        Handedness::Left
    })
}

/// Scale, rotation, translation and optional mirror about the y axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform<T> {
    pub scale: T,
    /// Radians in `(-pi, pi]`.
    pub angle: T,
    pub translation: Point2<T>,
    pub mirror: bool,
}

impl<T: Scalar> Default for SimilarityTransform<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Scalar> SimilarityTransform<T> {
    pub fn new(scale: T, angle: T, translation: Point2<T>, mirror: bool) -> Self {
        debug_assert!(scale > T::zero(), "similarity scale must be positive");
        Self {
            scale,
            angle: angle.wrap_angle(),
            translation,
            mirror,
        }
    }

    pub fn identity() -> Self {
        Self::new(T::one(), T::zero(), Point2::origin(), false)
    }

    pub fn scaling(scale: T) -> Self {
        Self::new(scale, T::zero(), Point2::origin(), false)
    }

    pub fn rotation(angle: T) -> Self {
        Self::new(T::one(), angle, Point2::origin(), false)
    }

    pub fn translation(offset: Point2<T>) -> Self {
        Self::new(T::one(), T::zero(), offset, false)
    }

    /// Reflection `x -> -x`.
    pub fn reflection() -> Self {
        Self::new(T::one(), T::zero(), Point2::origin(), true)
    }

    /// Rotation by `angle` about `pivot`.
    pub fn rotation_about(pivot: Point2<T>, angle: T) -> Self {
        let r = Self::rotation(angle);
        Self::new(T::one(), angle, pivot - r.apply(pivot), false)
    }

    /// The mirror, scale and rotation parts without translation.
    pub fn apply_linear(&self, p: Point2<T>) -> Point2<T> {
        let x = if self.mirror { -p.x } else { p.x };
        let (sin, cos) = self.angle.sin_cos();
        let (x, y) = (x * self.scale, p.y * self.scale);
        Point2::new(cos * x - sin * y, sin * x + cos * y)
    }

    pub fn apply(&self, p: Point2<T>) -> Point2<T> {
        self.apply_linear(p) + self.translation
    }

    /// The transform `p -> outer(inner(p))`.
    ///
    /// A mirror in `outer` commutes with the rotation of `inner` by negating
    /// its angle.
    pub fn compose(outer: &Self, inner: &Self) -> Self {
        let inner_angle = if outer.mirror { -inner.angle } else { inner.angle };
        Self::new(
            outer.scale * inner.scale,
            outer.angle + inner_angle,
            outer.apply(inner.translation),
            outer.mirror ^ inner.mirror,
        )
    }

    pub fn then(&self, outer: &Self) -> Self {
        Self::compose(outer, self)
    }

    pub fn inverse(&self) -> Self {
        let linear = Self::new(
            T::one() / self.scale,
            if self.mirror { self.angle } else { -self.angle },
            Point2::origin(),
            self.mirror,
        );
        Self {
            translation: -linear.apply_linear(self.translation),
            ..linear
        }
    }
}

/// Which alignment steps are applied by [`estimate_alignment_with`].
///
/// Disabled steps fall back to their identity: unit scale, zero rotation, no
/// mirror, and for translation the template wrist stays at its template
/// position (scale and rotation then pivot about it).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentComponents {
    pub scale: bool,
    pub translation: bool,
    pub rotation: bool,
    pub handedness: bool,
    /// Inverts the chirality decision; reproduces a wrongly flipped template.
    #[serde(default)]
    pub flip: bool,
}

impl Default for AlignmentComponents {
    fn default() -> Self {
        Self {
            scale: true,
            translation: true,
            rotation: true,
            handedness: true,
            flip: false,
        }
    }
}

fn chirality_disagrees<T: Scalar>(a: &KeypointSet<T>, b: &KeypointSet<T>) -> bool {
    match (infer_chirality(a), infer_chirality(b)) {
        (Ok(ha), Ok(hb)) => ha != hb,
        _ => false,
    }
}

/// Full alignment of template keypoints onto detected keypoints.
pub fn estimate_alignment<T: Scalar>(
    template_kps: &KeypointSet<T>,
    detected_kps: &KeypointSet<T>,
    anchors: (u8, u8),
) -> Result<SimilarityTransform<T>, GeometryError> {
    estimate_alignment_with(template_kps, detected_kps, anchors, AlignmentComponents::default())
}

/// Alignment with individual steps switched off.
///
/// The translation reference is always the wrist. When chirality cannot be
/// inferred for either set no mirror is applied.
pub fn estimate_alignment_with<T: Scalar>(
    template_kps: &KeypointSet<T>,
    detected_kps: &KeypointSet<T>,
    anchors: (u8, u8),
    components: AlignmentComponents,
) -> Result<SimilarityTransform<T>, GeometryError> {
    let (a, b) = anchors;
    let template_vec = template_kps.require(b)? - template_kps.require(a)?;
    let detected_vec = detected_kps.require(b)? - detected_kps.require(a)?;
    let eps = T::lit(ANCHOR_EPSILON);
    if template_vec.norm() <= eps {
        return Err(GeometryError::DegenerateKeypoints(format!(
            "template anchors {a} and {b} coincide"
        )));
    }
    if detected_vec.norm() <= eps {
        return Err(GeometryError::DegenerateKeypoints(format!(
            "detected anchors {a} and {b} coincide"
        )));
    }
    let template_ref = template_kps.require(landmark::WRIST)?;
    let detected_ref = detected_kps.require(landmark::WRIST)?;

    let mut mirror = components.handedness && chirality_disagrees(template_kps, detected_kps);
    if components.flip {
        mirror = !mirror;
    }
    let oriented = if mirror {
        Point2::new(-template_vec.x, template_vec.y)
    } else {
        template_vec
    };
    let scale = if components.scale {
        detected_vec.norm() / template_vec.norm()
    } else {
        T::one()
    };
    let angle = if components.rotation {
        oriented.cross(detected_vec).atan2(oriented.dot(detected_vec))
    } else {
        T::zero()
    };
    let linear = SimilarityTransform::new(scale, angle, Point2::origin(), mirror);
    let target = if components.translation {
        detected_ref
    } else {
        template_ref
    };
    Ok(SimilarityTransform {
        translation: target - linear.apply_linear(template_ref),
        ..linear
    })
}
