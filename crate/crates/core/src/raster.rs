//! Binary masks, 16-bit depth images and the operations that turn an aligned
//! depth template into a control image and restoration mask.
//!
//! Pixel `(x, y)` has its center at integer coordinates `(x, y)`; rows are
//! stored top to bottom.
//!
//! PNG conventions: masks are 8-bit gray (0 clear, 255 set), depth images are
//! 16-bit gray, photographs are 8-bit RGB.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Point2, SimilarityTransform};
use crate::scalar::Scalar;

pub use image::RgbImage;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("bounding box lies outside the {0}x{1} image")]
    EmptyIntersection(u32, u32),
    #[error("mask is empty")]
    EmptyMask,
    #[error("both masks are empty; IoU undefined")]
    BothEmpty,
    #[error("invalid bounding box: width and height must be at least 1")]
    InvalidBox,
    #[error("scale factor {0} outside [0.5, 2.0]")]
    InvalidScale(f64),
    #[error("image dimensions must be positive")]
    ZeroSize,
    #[error("{path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

fn check_dims(a: (u32, u32), b: (u32, u32)) -> Result<(), RasterError> {
    if a != b {
        return Err(RasterError::DimensionMismatch(a.0, a.1, b.0, b.1));
    }
    Ok(())
}

/// Axis-aligned integer box, top-left origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: i64,
    pub y: i64,
    pub width: u32,
    pub height: u32,
}

impl BoundingBox {
    pub fn new(x: i64, y: i64, width: u32, height: u32) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::InvalidBox);
        }
        Ok(Self {
            x,
            y,
            width,
            height,
        })
    }

    pub fn right(&self) -> i64 {
        self.x + self.width as i64
    }

    pub fn bottom(&self) -> i64 {
        self.y + self.height as i64
    }

    /// Intersection with a `width x height` image, or `None` when disjoint.
    pub fn clamp_to(&self, width: u32, height: u32) -> Option<BoundingBox> {
        let x0 = self.x.max(0);
        let y0 = self.y.max(0);
        let x1 = self.right().min(width as i64);
        let y1 = self.bottom().min(height as i64);
        if x1 <= x0 || y1 <= y0 {
            return None;
        }
        Some(BoundingBox {
            x: x0,
            y: y0,
            width: (x1 - x0) as u32,
            height: (y1 - y0) as u32,
        })
    }
}

/// One boolean per pixel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    fn index(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[self.index(x, y)]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let i = self.index(x, y);
        self.bits[i] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Coordinates of set pixels in row-major order.
    pub fn iter_set(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width as usize;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| ((i % w) as u32, (i / w) as u32))
    }

    fn zip_with(&self, other: &Self, f: impl Fn(bool, bool) -> bool) -> Result<Self, RasterError> {
        check_dims(self.dimensions(), other.dimensions())?;
        Ok(Self {
            width: self.width,
            height: self.height,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn union(&self, other: &Self) -> Result<Self, RasterError> {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &Self) -> Result<Self, RasterError> {
        self.zip_with(other, |a, b| a && b)
    }

    /// True when every pixel set in `self` is set in `other`.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.dimensions() == other.dimensions()
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            Luma([if self.get(x, y) { 255 } else { 0 }])
        })
    }

    /// Any nonzero gray value counts as set.
    pub fn from_gray_image(img: &GrayImage) -> Self {
        Self::from_fn(img.width(), img.height(), |x, y| img.get_pixel(x, y)[0] > 0)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RasterError> {
        save(self.to_gray_image(), path)
    }

    pub fn load_png(path: &Path) -> Result<Self, RasterError> {
        let img = open(path)?.into_luma8();
        Ok(Self::from_gray_image(&img))
    }
}

/// 16-bit depth map; 0 is background and larger values are nearer.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DepthImage {
    width: u32,
    height: u32,
    data: Vec<u16>,
}

impl DepthImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> u16) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn get(&self, x: u32, y: u32) -> u16 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: u16) {
        let i = y as usize * self.width as usize + x as usize;
        self.data[i] = v;
    }

    pub fn max_depth(&self) -> u16 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn flipped_horizontally(&self) -> Self {
        Self::from_fn(self.width, self.height, |x, y| self.get(self.width - 1 - x, y))
    }

    pub fn to_image(&self) -> ImageBuffer<Luma<u16>, Vec<u16>> {
        ImageBuffer::from_raw(self.width, self.height, self.data.clone())
            .expect("buffer length matches dimensions")
    }

    pub fn from_image(img: &ImageBuffer<Luma<u16>, Vec<u16>>) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            data: img.as_raw().clone(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RasterError> {
        save(self.to_image(), path)
    }

    pub fn load_png(path: &Path) -> Result<Self, RasterError> {
        Ok(Self::from_image(&open(path)?.into_luma16()))
    }
}

fn open(path: &Path) -> Result<image::DynamicImage, RasterError> {
    image::open(path).map_err(|source| RasterError::Image {
        path: path.display().to_string(),
        source,
    })
}

fn save<P>(img: ImageBuffer<P, Vec<P::Subpixel>>, path: &Path) -> Result<(), RasterError>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
{
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| RasterError::Image {
            path: path.display().to_string(),
            source,
        })
}

pub fn load_rgb_png(path: &Path) -> Result<RgbImage, RasterError> {
    Ok(open(path)?.into_rgb8())
}

pub fn save_rgb_png(img: &RgbImage, path: &Path) -> Result<(), RasterError> {
    save(img.clone(), path)
}

/// Mask of the pixels inside `b`, clamped to the image.
pub fn bbox_to_mask(b: &BoundingBox, width: u32, height: u32) -> Result<BinaryMask, RasterError> {
    let c = b
        .clamp_to(width, height)
        .ok_or(RasterError::EmptyIntersection(width, height))?;
    Ok(BinaryMask::from_fn(width, height, |x, y| {
        let (x, y) = (x as i64, y as i64);
        x >= c.x && x < c.right() && y >= c.y && y < c.bottom()
    }))
}

pub fn union(a: &BinaryMask, b: &BinaryMask) -> Result<BinaryMask, RasterError> {
    a.union(b)
}

/// Resamples `template` into an `out_width x out_height` frame where the
/// template pixel `q` lands at `t(q)`.
///
/// Each output pixel reads the template at `t^-1(p)` with bilinear weights.
/// Reads outside the template are background. The output pixel is foreground
/// when the foreground neighbours carry at least half of the bilinear weight,
/// and its depth is the weighted mean over those neighbours, so edges neither
/// dilate nor fade toward zero.
pub fn warp_depth<T: Scalar>(
    template: &DepthImage,
    t: &SimilarityTransform<T>,
    out_width: u32,
    out_height: u32,
) -> DepthImage {
    let inv = t.inverse();
    let (w, h) = (template.width as i64, template.height as i64);
    let sample = |sx: i64, sy: i64| -> u16 {
        if sx < 0 || sy < 0 || sx >= w || sy >= h {
            0
        } else {
            template.get(sx as u32, sy as u32)
        }
    };
    DepthImage::from_fn(out_width, out_height, |x, y| {
        let src = inv.apply(Point2::new(T::lit(x as f64), T::lit(y as f64)));
        let (sx, sy) = (src.x.as_f64(), src.y.as_f64());
        let (fx, fy) = (sx.floor(), sy.floor());
        if !(fx > -2.0 && fy > -2.0 && fx < w as f64 + 1.0 && fy < h as f64 + 1.0) {
            return 0;
        }
        let (ax, ay) = (sx - fx, sy - fy);
        let (x0, y0) = (fx as i64, fy as i64);
        let taps = [
            (x0, y0, (1.0 - ax) * (1.0 - ay)),
            (x0 + 1, y0, ax * (1.0 - ay)),
            (x0, y0 + 1, (1.0 - ax) * ay),
            (x0 + 1, y0 + 1, ax * ay),
        ];
        let mut fg_weight = 0.0;
        let mut acc = 0.0;
        for (tx, ty, wgt) in taps {
            if wgt == 0.0 {
                continue;
            }
            let d = sample(tx, ty);
            if d > 0 {
                fg_weight += wgt;
                acc += wgt * d as f64;
            }
        }
        if fg_weight < 0.5 {
            0
        } else {
            (acc / fg_weight).round().clamp(1.0, u16::MAX as f64) as u16
        }
    })
}

/// Mask of the pixels with nonzero depth.
pub fn silhouette(d: &DepthImage) -> BinaryMask {
    BinaryMask {
        width: d.width,
        height: d.height,
        bits: d.data.iter().map(|&v| v > 0).collect(),
    }
}

/// Intersection over union.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, RasterError> {
    check_dims(a.dimensions(), b.dimensions())?;
    let (mut inter, mut uni) = (0usize, 0usize);
    for (&pa, &pb) in a.bits.iter().zip(&b.bits) {
        inter += (pa && pb) as usize;
        uni += (pa || pb) as usize;
    }
    if uni == 0 {
        return Err(RasterError::BothEmpty);
    }
    Ok(inter as f64 / uni as f64)
}

/// Tight box around the set pixels.
pub fn mask_bbox(m: &BinaryMask) -> Result<BoundingBox, RasterError> {
    let mut it = m.iter_set();
    let (fx, fy) = it.next().ok_or(RasterError::EmptyMask)?;
    let (mut x0, mut y0, mut x1, mut y1) = (fx, fy, fx, fy);
    for (x, y) in it {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    Ok(BoundingBox {
        x: x0 as i64,
        y: y0 as i64,
        width: x1 - x0 + 1,
        height: y1 - y0 + 1,
    })
}

/// Filled bounding box of the set pixels.
pub fn filled_bbox(m: &BinaryMask) -> Result<BinaryMask, RasterError> {
    bbox_to_mask(&mask_bbox(m)?, m.width, m.height)
}

pub const MIN_MASK_SCALE: f64 = 0.5;
pub const MAX_MASK_SCALE: f64 = 2.0;

/// Scales the set region about the center of its bounding box.
///
/// Pixel `p` of the result is set when the pixel containing
/// `c + (p + 0.5 - c) / factor` is set in `m`, with `c` the continuous box
/// center. Results are clipped to the image.
pub fn scale_mask(m: &BinaryMask, factor: f64) -> Result<BinaryMask, RasterError> {
    if !(MIN_MASK_SCALE..=MAX_MASK_SCALE).contains(&factor) {
        return Err(RasterError::InvalidScale(factor));
    }
    let b = mask_bbox(m)?;
    if factor == 1.0 {
        return Ok(m.clone());
    }
    let cx = b.x as f64 + b.width as f64 / 2.0;
    let cy = b.y as f64 + b.height as f64 / 2.0;
    let (w, h) = (m.width as f64, m.height as f64);
    Ok(BinaryMask::from_fn(m.width, m.height, |x, y| {
        let sx = (cx + (x as f64 + 0.5 - cx) / factor).floor();
        let sy = (cy + (y as f64 + 0.5 - cy) / factor).floor();
        sx >= 0.0 && sy >= 0.0 && sx < w && sy < h && m.get(sx as u32, sy as u32)
    }))
}

/// Linear depth-to-gray mapping: 0 to 0, 65535 to 255.
pub fn depth_to_gray(d: u16) -> u8 {
    ((d as u32 * 255 + 32767) / 65535) as u8
}

/// Grayscale preview of a depth image.
pub fn depth_preview(d: &DepthImage) -> GrayImage {
    GrayImage::from_fn(d.width, d.height, |x, y| Luma([depth_to_gray(d.get(x, y))]))
}

/// Inside `m` the gray rendering of `d`; outside `m` the untouched `base`.
pub fn paste_depth(base: &RgbImage, d: &DepthImage, m: &BinaryMask) -> Result<RgbImage, RasterError> {
    check_dims(base.dimensions(), d.dimensions())?;
    check_dims(base.dimensions(), m.dimensions())?;
    let mut out = base.clone();
    for (x, y) in m.iter_set() {
        let g = depth_to_gray(d.get(x, y));
        out.put_pixel(x, y, Rgb([g, g, g]));
    }
    Ok(out)
}
