//! Locating caption objects in the source image.
//!
//! Objects whose name matches a detector label take that detection's box.
//! The rest are located by occlusion: every detected box is hidden in three
//! ways (blur, black fill, inpainting) and a box counts as the object's
//! position when none of the three re-generated captions mention it.

use serde::{Deserialize, Serialize};

use crate::adapters::{detect_objects, inpaint_region, Detection, Models};
use crate::caption::{contains_object, extract_objects, Caption, NounPhrase, SemanticMatcher};
use crate::error::{Error, OcclusionVariant, Result};
use crate::imagery::{mask_from_boxes, remove_included_boxes, BBox, BitMask, Raster};

pub const DEFAULT_OD_SCORE_THRESHOLD: f64 = 0.3;
const MIN_BLUR_RADIUS: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocationSource {
    Od,
    Occlusion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocatedObject {
    /// Position of the object in the caption's object list.
    pub index: usize,
    pub object: NounPhrase,
    pub mask: BitMask,
    pub source: LocationSource,
    pub regions: Vec<BBox>,
}

/// Where each caption object sits in the source image. Objects are kept
/// in caption order within `located` and `unlocated`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationMap {
    pub width: u32,
    pub height: u32,
    pub located: Vec<LocatedObject>,
    pub unlocated: Vec<(usize, NounPhrase)>,
}

impl LocalizationMap {
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            located: Vec::new(),
            unlocated: Vec::new(),
        }
    }

    pub fn object_count(&self) -> usize {
        self.located.len() + self.unlocated.len()
    }

    /// All objects, located or not, in caption order.
    pub fn objects(&self) -> Vec<NounPhrase> {
        let mut all: Vec<(usize, &NounPhrase)> = self
            .located
            .iter()
            .map(|l| (l.index, &l.object))
            .chain(self.unlocated.iter().map(|(i, o)| (*i, o)))
            .collect();
        all.sort_by_key(|(i, _)| *i);
        all.into_iter().map(|(_, o)| o.clone()).collect()
    }
}

/// Drops detections scoring below `min_score`.
pub fn filter_detections(detections: &[Detection], min_score: f64) -> Vec<Detection> {
    detections
        .iter()
        .filter(|d| d.score >= min_score)
        .cloned()
        .collect()
}

fn label_phrase(label: &str) -> NounPhrase {
    let phrase = label.trim().to_lowercase();
    let head = phrase.split_whitespace().last().unwrap_or("").to_string();
    NounPhrase {
        surface: label.to_string(),
        lemma: head,
        phrase,
        span: (0, 1),
    }
}

/// Matches objects against detector labels. Returns the located objects and
/// the `(index, object)` pairs left for occlusion.
pub fn align_by_detection(
    objects: &[NounPhrase],
    detections: &[Detection],
    width: u32,
    height: u32,
    m: &SemanticMatcher,
) -> Result<(Vec<LocatedObject>, Vec<(usize, NounPhrase)>)> {
    let labels: Vec<NounPhrase> = detections.iter().map(|d| label_phrase(&d.label)).collect();
    let mut located = Vec::new();
    let mut rest = Vec::new();
    for (index, object) in objects.iter().enumerate() {
        let regions: Vec<BBox> = detections
            .iter()
            .zip(&labels)
            .filter(|(_, l)| contains_object(std::slice::from_ref(*l), object, m))
            .map(|(d, _)| d.bbox)
            .collect();
        if regions.is_empty() {
            rest.push((index, object.clone()));
        } else {
            located.push(LocatedObject {
                index,
                object: object.clone(),
                mask: mask_from_boxes(&regions, width, height)?,
                source: LocationSource::Od,
                regions,
            });
        }
    }
    Ok((located, rest))
}

pub fn blur_radius(region: BBox) -> u32 {
    MIN_BLUR_RADIUS.max(region.width().min(region.height()).div_ceil(4))
}

fn gaussian_kernel(radius: u32) -> Vec<f64> {
    let sigma = f64::from(radius) / 2.0;
    let r = radius as i64;
    let raw: Vec<f64> = (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Gaussian blur written only inside `region`. The kernel reads the
/// surrounding pixels too (clamped at the image edge), so a flat-colored
/// object loses its color toward the box border.
pub fn blur_region(image: &Raster, region: BBox) -> Result<Raster> {
    region.check_within(image.width(), image.height())?;
    let (w, h) = (i64::from(image.width()), i64::from(image.height()));
    let radius = blur_radius(region);
    let kernel = gaussian_kernel(radius);
    let r = i64::from(radius);

    // horizontal pass over the rows the vertical pass will read
    let row_lo = (i64::from(region.y0) - r).max(0);
    let row_hi = (i64::from(region.y1) + r).min(h);
    let cols = region.width() as usize;
    let mut rows: Vec<[f64; 3]> = Vec::with_capacity(cols * (row_hi - row_lo) as usize);
    for y in row_lo..row_hi {
        for x in region.x0..region.x1 {
            let mut acc = [0.0; 3];
            for (k, wt) in kernel.iter().enumerate() {
                let sx = (i64::from(x) + k as i64 - r).clamp(0, w - 1);
                let p = image.pixel(sx as u32, y as u32);
                for c in 0..3 {
                    acc[c] += wt * f64::from(p[c]);
                }
            }
            rows.push(acc);
        }
    }

    let mut out = image.clone();
    for y in region.y0..region.y1 {
        for (cx, x) in (region.x0..region.x1).enumerate() {
            let mut acc = [0.0; 3];
            for (k, wt) in kernel.iter().enumerate() {
                let sy = (i64::from(y) + k as i64 - r).clamp(0, h - 1);
                let v = rows[(sy - row_lo) as usize * cols + cx];
                for c in 0..3 {
                    acc[c] += wt * v[c];
                }
            }
            out.set_pixel(x, y, acc.map(|v| v.round().clamp(0.0, 255.0) as u8));
        }
    }
    Ok(out)
}

pub fn black_fill(image: &Raster, region: BBox) -> Result<Raster> {
    region.check_within(image.width(), image.height())?;
    let mut out = image.clone();
    out.fill_box(region, [0, 0, 0]);
    Ok(out)
}

/// Objects named in each occluded variant's caption, for one box.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionProbe {
    pub region: BBox,
    /// Blur, black fill and inpaint, in that order.
    pub objects: [Vec<NounPhrase>; 3],
}

const VARIANTS: [OcclusionVariant; 3] = [
    OcclusionVariant::Blur,
    OcclusionVariant::BlackFill,
    OcclusionVariant::Inpaint,
];

fn variant_objects(
    variant: OcclusionVariant,
    src: &Raster,
    region: BBox,
    models: Models<'_>,
) -> Result<Vec<NounPhrase>> {
    let wrap = |e: Error| Error::Occlusion {
        variant,
        source: Box::new(e),
    };
    let occluded = match variant {
        OcclusionVariant::Blur => blur_region(src, region),
        OcclusionVariant::BlackFill => black_fill(src, region),
        OcclusionVariant::Inpaint => inpaint_region(models.inpaint, src, region),
    }
    .map_err(wrap)?;
    let text = models.sut.caption(&occluded).map_err(wrap)?;
    let caption = models.tagger.tag_caption(&text).map_err(wrap)?;
    Ok(extract_objects(&caption))
}

/// Captions the three occluded variants of every box. The variants of one
/// box are captioned concurrently; boxes go in input order.
pub fn probe_occlusions(src: &Raster, boxes: &[BBox], models: Models<'_>) -> Result<Vec<OcclusionProbe>> {
    let mut probes = Vec::with_capacity(boxes.len());
    for &region in boxes {
        let results: Vec<Result<Vec<NounPhrase>>> = std::thread::scope(|s| {
            let handles: Vec<_> = VARIANTS
                .iter()
                .map(|&v| s.spawn(move || variant_objects(v, src, region, models)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("occlusion worker panicked"))
                .collect()
        });
        let mut it = results.into_iter();
        let mut next = || it.next().expect("three variants");
        let objects = [next()?, next()?, next()?];
        probes.push(OcclusionProbe { region, objects });
    }
    Ok(probes)
}

/// Boxes whose occlusion removes `object` from every variant caption, with
/// nested boxes reduced to the innermost.
pub fn occlusion_regions(object: &NounPhrase, probes: &[OcclusionProbe], m: &SemanticMatcher) -> Vec<BBox> {
    let hits: Vec<BBox> = probes
        .iter()
        .filter(|p| p.objects.iter().all(|objs| !contains_object(objs, object, m)))
        .map(|p| p.region)
        .collect();
    remove_included_boxes(&hits)
}

/// Occlusion localization of a single object. `None` when no box removes
/// it from all three captions.
pub fn occlusion_localize(
    object: &NounPhrase,
    src: &Raster,
    boxes: &[BBox],
    models: Models<'_>,
    m: &SemanticMatcher,
) -> Result<Option<(BitMask, Vec<BBox>)>> {
    let probes = probe_occlusions(src, boxes, models)?;
    let regions = occlusion_regions(object, &probes, m);
    if regions.is_empty() {
        return Ok(None);
    }
    Ok(Some((mask_from_boxes(&regions, src.width(), src.height())?, regions)))
}

/// Locates every object of `caption` given the detections for `src`.
/// Detections should already be score-filtered.
pub fn localize_with_detections(
    caption: &Caption,
    src: &Raster,
    detections: &[Detection],
    models: Models<'_>,
    m: &SemanticMatcher,
) -> Result<LocalizationMap> {
    let (w, h) = (src.width(), src.height());
    let objects = extract_objects(caption);
    let (mut located, rest) = align_by_detection(&objects, detections, w, h, m)?;
    let mut unlocated = Vec::new();
    if !rest.is_empty() {
        let boxes: Vec<BBox> = detections.iter().map(|d| d.bbox).collect();
        let probes = probe_occlusions(src, &boxes, models)?;
        for (index, object) in rest {
            let regions = occlusion_regions(&object, &probes, m);
            if regions.is_empty() {
                unlocated.push((index, object));
            } else {
                located.push(LocatedObject {
                    index,
                    object,
                    mask: mask_from_boxes(&regions, w, h)?,
                    source: LocationSource::Occlusion,
                    regions,
                });
            }
        }
    }
    located.sort_by_key(|l| l.index);
    Ok(LocalizationMap {
        width: w,
        height: h,
        located,
        unlocated,
    })
}

/// Detects objects in `src` and locates every object of `caption`.
pub fn build_localization_map(
    caption: &Caption,
    src: &Raster,
    models: Models<'_>,
    m: &SemanticMatcher,
    min_score: f64,
) -> Result<LocalizationMap> {
    let detections = filter_detections(&detect_objects(models.od, src)?, min_score);
    localize_with_detections(caption, src, &detections, models, m)
}
