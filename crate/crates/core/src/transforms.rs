//! Reduction transformations: cropping (MR-1), stretching (MR-2) and
//! rotation (MR-3).
//!
//! Each transformation produces the follow-up image together with a
//! retained-pixel mask over the *source* frame: a bit is set iff that source
//! pixel is still visible in the follow-up.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagery::{BBox, BitMask, Raster};

/// Smallest share of the image a stretch may keep.
pub const MIN_STRETCH_RETAINED: f64 = 0.6;
/// `1 / MIN_STRETCH_RETAINED`.
pub const MAX_STRETCH_FACTOR: f64 = 5.0 / 3.0;
pub const MAX_ROTATION_DEGREES: f64 = 30.0;
/// Share of the image area assumed as the mean object size when the
/// detector reports nothing.
pub const FALLBACK_OBJECT_AREA_SHARE: f64 = 0.1;

const FACTOR_EPS: f64 = 1e-9;
const STRETCH_STEPS: u32 = 20;
const STRETCH_STEP: f64 = 1.0 / 30.0;
const CROP_TOP_LEFT_POINTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TransformKind {
    #[serde(rename = "MR1")]
    Crop,
    #[serde(rename = "MR2")]
    Stretch,
    #[serde(rename = "MR3")]
    Rotate,
}

impl TransformKind {
    pub const ALL: [TransformKind; 3] = [Self::Crop, Self::Stretch, Self::Rotate];

    pub fn mr_label(self) -> &'static str {
        match self {
            Self::Crop => "MR1",
            Self::Stretch => "MR2",
            Self::Rotate => "MR3",
        }
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mr_label())
    }
}

impl std::str::FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mr1" | "crop" => Ok(Self::Crop),
            "mr2" | "stretch" => Ok(Self::Stretch),
            "mr3" | "rotate" => Ok(Self::Rotate),
            other => Err(Error::Config(format!("unknown transformation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Horizontal,
    Vertical,
}

/// A parameterised reduction transformation.
///
/// Rotation angles are in degrees; positive angles turn the content
/// counter-clockwise as displayed. A stretch keeps the `anchor` coordinate
/// (a pixel-edge offset along `axis`, `0..=extent`) fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TransformSpec {
    Crop {
        top_left: [u32; 2],
        bottom_right: [u32; 2],
    },
    Stretch {
        axis: Axis,
        factor: f64,
        anchor: u32,
    },
    Rotate {
        angle: f64,
    },
}

impl TransformSpec {
    pub fn kind(&self) -> TransformKind {
        match self {
            Self::Crop { .. } => TransformKind::Crop,
            Self::Stretch { .. } => TransformKind::Stretch,
            Self::Rotate { .. } => TransformKind::Rotate,
        }
    }

    /// Checks the parameters against the source frame and the per-kind
    /// guideline. The crop-area guideline needs the mean object area and is
    /// checked separately by [`check_crop_area`].
    pub fn validate(&self, width: u32, height: u32) -> Result<()> {
        match *self {
            Self::Crop {
                top_left,
                bottom_right,
            } => crop_box(top_left, bottom_right)?.check_within(width, height),
            Self::Stretch {
                axis,
                factor,
                anchor,
            } => {
                check_stretch_factor(factor)?;
                let extent = axis_extent(axis, width, height);
                if anchor > extent {
                    return Err(Error::InvalidInput(format!(
                        "stretch anchor {anchor} outside 0..={extent}"
                    )));
                }
                Ok(())
            }
            Self::Rotate { angle } => check_rotation_angle(angle),
        }
    }

    /// Retained-pixel mask over a `width` x `height` source frame.
    pub fn retained_mask(&self, width: u32, height: u32) -> Result<BitMask> {
        self.validate(width, height)?;
        Ok(match *self {
            Self::Crop {
                top_left,
                bottom_right,
            } => {
                let mut m = BitMask::zeros(width, height);
                m.fill_box(crop_box(top_left, bottom_right)?);
                m
            }
            Self::Stretch {
                axis,
                factor,
                anchor,
            } => stretch_mask(width, height, axis, factor, anchor),
            Self::Rotate { angle } => {
                let geom = RotationGeometry::new(width, height, angle);
                BitMask::from_fn(width, height, |x, y| geom.source_pixel_retained(x, y))
            }
        })
    }

    pub fn apply(&self, src: &Raster) -> Result<TransformResult> {
        match *self {
            Self::Crop {
                top_left,
                bottom_right,
            } => apply_crop(src, top_left, bottom_right),
            Self::Stretch {
                axis,
                factor,
                anchor,
            } => apply_stretch(src, axis, factor, anchor),
            Self::Rotate { angle } => apply_rotate(src, angle),
        }
    }
}

impl fmt::Display for TransformSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Crop {
                top_left,
                bottom_right,
            } => write!(
                f,
                "crop ({},{})-({},{})",
                top_left[0], top_left[1], bottom_right[0], bottom_right[1]
            ),
            Self::Stretch {
                axis,
                factor,
                anchor,
            } => write!(f, "stretch {axis:?} x{factor:.4} @{anchor}"),
            Self::Rotate { angle } => write!(f, "rotate {angle}°"),
        }
    }
}

/// A follow-up image with its retained-pixel mask over the source frame.
#[derive(Debug, Clone)]
pub struct TransformResult {
    pub image: Raster,
    pub m_tran: BitMask,
    pub spec: TransformSpec,
}

fn crop_box(top_left: [u32; 2], bottom_right: [u32; 2]) -> Result<BBox> {
    BBox::new(top_left[0], top_left[1], bottom_right[0], bottom_right[1])
}

fn axis_extent(axis: Axis, width: u32, height: u32) -> u32 {
    match axis {
        Axis::Horizontal => width,
        Axis::Vertical => height,
    }
}

fn check_stretch_factor(factor: f64) -> Result<()> {
    if !factor.is_finite() || factor <= 1.0 || factor > MAX_STRETCH_FACTOR + FACTOR_EPS {
        return Err(Error::Guideline(format!(
            "stretch factor {factor} must lie in (1, 5/3] so that at least {MIN_STRETCH_RETAINED} of the image is retained"
        )));
    }
    Ok(())
}

fn check_rotation_angle(angle: f64) -> Result<()> {
    if !angle.is_finite() || angle == 0.0 || angle.abs() > MAX_ROTATION_DEGREES {
        return Err(Error::Guideline(format!(
            "rotation angle {angle} must lie in [-30, 30] and be nonzero"
        )));
    }
    Ok(())
}

/// A crop must keep more area than the mean detected object.
pub fn check_crop_area(crop_area: u64, mean_object_area: f64) -> Result<()> {
    if (crop_area as f64) <= mean_object_area {
        return Err(Error::Guideline(format!(
            "crop area {crop_area} must exceed mean object area {mean_object_area}"
        )));
    }
    Ok(())
}

/// Mean box area of the detections, or the fallback share of the image
/// when there are none.
pub fn mean_object_area(boxes: &[BBox], width: u32, height: u32) -> f64 {
    if boxes.is_empty() {
        return FALLBACK_OBJECT_AREA_SHARE * f64::from(width) * f64::from(height);
    }
    boxes.iter().map(|b| b.area() as f64).sum::<f64>() / boxes.len() as f64
}

pub fn apply_crop(src: &Raster, top_left: [u32; 2], bottom_right: [u32; 2]) -> Result<TransformResult> {
    let region = crop_box(top_left, bottom_right)?;
    let image = src.sub_image(region)?;
    let mut m_tran = BitMask::zeros(src.width(), src.height());
    m_tran.fill_box(region);
    Ok(TransformResult {
        image,
        m_tran,
        spec: TransformSpec::Crop {
            top_left,
            bottom_right,
        },
    })
}

// Position of source coordinate `c` after stretching about `anchor`.
#[inline]
fn stretch_forward(c: f64, anchor: f64, factor: f64) -> f64 {
    anchor + (c - anchor) * factor
}

fn stretch_mask(width: u32, height: u32, axis: Axis, factor: f64, anchor: u32) -> BitMask {
    let extent = axis_extent(axis, width, height);
    let a = f64::from(anchor);
    let limit = f64::from(extent);
    let kept: Vec<bool> = (0..extent)
        .map(|i| {
            let p = stretch_forward(f64::from(i) + 0.5, a, factor);
            (0.0..limit).contains(&p)
        })
        .collect();
    match axis {
        Axis::Horizontal => BitMask::from_fn(width, height, |x, _| kept[x as usize]),
        Axis::Vertical => BitMask::from_fn(width, height, |_, y| kept[y as usize]),
    }
}

pub fn apply_stretch(src: &Raster, axis: Axis, factor: f64, anchor: u32) -> Result<TransformResult> {
    let spec = TransformSpec::Stretch {
        axis,
        factor,
        anchor,
    };
    spec.validate(src.width(), src.height())?;
    let a = f64::from(anchor);
    let image = Raster::from_fn(src.width(), src.height(), |x, y| {
        let cx = f64::from(x) + 0.5;
        let cy = f64::from(y) + 0.5;
        match axis {
            Axis::Horizontal => src.sample_bilinear(a + (cx - a) / factor, cy),
            Axis::Vertical => src.sample_bilinear(cx, a + (cy - a) / factor),
        }
    })?;
    let m_tran = stretch_mask(src.width(), src.height(), axis, factor, anchor);
    Ok(TransformResult {
        image,
        m_tran,
        spec,
    })
}

/// Rotation about the frame center followed by a crop to the largest
/// centered axis-aligned rectangle with the source aspect ratio that fits
/// inside the rotated frame.
#[derive(Debug, Clone, Copy)]
pub struct RotationGeometry {
    width: f64,
    height: f64,
    cos: f64,
    sin: f64,
    pub out_width: u32,
    pub out_height: u32,
}

impl RotationGeometry {
    pub fn new(width: u32, height: u32, angle_degrees: f64) -> Self {
        let w = f64::from(width);
        let h = f64::from(height);
        let theta = angle_degrees.abs().to_radians();
        let (s_abs, c) = theta.sin_cos();
        let scale = inscribed_scale(w, h, c, s_abs);
        Self {
            width: w,
            height: h,
            cos: c,
            sin: s_abs.copysign(angle_degrees),
            out_width: ((scale * w).floor() as u32).max(1),
            out_height: ((scale * h).floor() as u32).max(1),
        }
    }

    // source offset from center -> follow-up offset from center
    #[inline]
    fn forward(&self, px: f64, py: f64) -> (f64, f64) {
        (self.cos * px + self.sin * py, self.cos * py - self.sin * px)
    }

    #[inline]
    fn inverse(&self, qx: f64, qy: f64) -> (f64, f64) {
        (self.cos * qx - self.sin * qy, self.sin * qx + self.cos * qy)
    }

    pub fn source_pixel_retained(&self, x: u32, y: u32) -> bool {
        let px = f64::from(x) + 0.5 - self.width / 2.0;
        let py = f64::from(y) + 0.5 - self.height / 2.0;
        let (qx, qy) = self.forward(px, py);
        qx.abs() <= f64::from(self.out_width) / 2.0 && qy.abs() <= f64::from(self.out_height) / 2.0
    }

    /// Source-frame coordinates sampled for follow-up pixel `(x, y)`.
    pub fn source_point(&self, x: u32, y: u32) -> (f64, f64) {
        let qx = f64::from(x) + 0.5 - f64::from(self.out_width) / 2.0;
        let qy = f64::from(y) + 0.5 - f64::from(self.out_height) / 2.0;
        let (px, py) = self.inverse(qx, qy);
        (px + self.width / 2.0, py + self.height / 2.0)
    }
}

/// Largest `s` such that an `s*w` x `s*h` centered rectangle fits inside a
/// `w` x `h` rectangle rotated by an angle with the given |cos| and |sin|.
fn inscribed_scale(w: f64, h: f64, cos: f64, sin: f64) -> f64 {
    let sx = w / (w * cos + h * sin);
    let sy = h / (w * sin + h * cos);
    sx.min(sy).min(1.0)
}

pub fn apply_rotate(src: &Raster, angle: f64) -> Result<TransformResult> {
    check_rotation_angle(angle)?;
    let geom = RotationGeometry::new(src.width(), src.height(), angle);
    let image = Raster::from_fn(geom.out_width, geom.out_height, |x, y| {
        let (sx, sy) = geom.source_point(x, y);
        src.sample_bilinear(sx, sy)
    })?;
    let m_tran = BitMask::from_fn(src.width(), src.height(), |x, y| {
        geom.source_pixel_retained(x, y)
    });
    Ok(TransformResult {
        image,
        m_tran,
        spec: TransformSpec::Rotate { angle },
    })
}

/// Candidate parameterisations for one transformation kind, in generation
/// order. Every returned spec satisfies its guideline.
pub fn candidate_specs(
    width: u32,
    height: u32,
    mean_object_area: f64,
    kind: TransformKind,
    seed: u64,
) -> Vec<TransformSpec> {
    match kind {
        TransformKind::Rotate => (-30..=30)
            .filter(|&a| a != 0)
            .map(|a| TransformSpec::Rotate { angle: f64::from(a) })
            .collect(),
        TransformKind::Stretch => stretch_specs(width, height),
        TransformKind::Crop => crop_specs(width, height, mean_object_area, seed),
    }
}

fn stretch_specs(width: u32, height: u32) -> Vec<TransformSpec> {
    let mut out = Vec::new();
    for axis in [Axis::Horizontal, Axis::Vertical] {
        let extent = axis_extent(axis, width, height);
        let mut anchors = vec![0, extent / 2, extent];
        anchors.dedup();
        for step in 1..=STRETCH_STEPS {
            let factor = 1.0 + f64::from(step) * STRETCH_STEP;
            for &anchor in &anchors {
                // too small to move any pixel center out of a narrow frame
                if stretch_mask(width, height, axis, factor, anchor).count() == u64::from(width) * u64::from(height) {
                    continue;
                }
                out.push(TransformSpec::Stretch {
                    axis,
                    factor,
                    anchor,
                });
            }
        }
    }
    out
}

/// Top-left points are drawn from a 5x5 lattice over the upper-left quarter
/// of the frame; the origin is always included so the full-frame crop is
/// reachable. Bottom-right corners walk inward from the far edges in
/// strides of a tenth of each dimension.
fn crop_specs(width: u32, height: u32, mean_object_area: f64, seed: u64) -> Vec<TransformSpec> {
    let mut lattice: Vec<(u32, u32)> = Vec::new();
    for b in 0..5u32 {
        for a in 0..5u32 {
            let p = (a * width / 10, b * height / 10);
            if !lattice.contains(&p) {
                lattice.push(p);
            }
        }
    }
    let origin = lattice.remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    lattice.shuffle(&mut rng);
    let mut points: Vec<(u32, u32)> = std::iter::once(origin)
        .chain(lattice.into_iter().take(CROP_TOP_LEFT_POINTS - 1))
        .collect();
    points.sort_by_key(|&(x, y)| (y, x));

    let stride_x = (width / 10).max(1);
    let stride_y = (height / 10).max(1);
    let mut out = Vec::new();
    for (x0, y0) in points {
        let mut x1 = width;
        while x1 > x0 {
            let mut y1 = height;
            while y1 > y0 {
                let area = u64::from(x1 - x0) * u64::from(y1 - y0);
                if check_crop_area(area, mean_object_area).is_ok() {
                    out.push(TransformSpec::Crop {
                        top_left: [x0, y0],
                        bottom_right: [x1, y1],
                    });
                }
                y1 = y1.saturating_sub(stride_y);
            }
            x1 = x1.saturating_sub(stride_x);
        }
    }
    out
}

/// Materialises every candidate of `kind` for `src`.
pub fn generate_candidates(
    src: &Raster,
    mean_object_area: f64,
    kind: TransformKind,
    seed: u64,
) -> Result<Vec<TransformResult>> {
    candidate_specs(src.width(), src.height(), mean_object_area, kind, seed)
        .iter()
        .map(|spec| spec.apply(src))
        .collect()
}
