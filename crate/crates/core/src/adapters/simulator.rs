//! Deterministic stand-ins for the captioner and the detector.
//!
//! A scene is a flat background with solid-colored rectangular objects.
//! Both simulated models recognise an object by counting pixels of its
//! color in whatever image they are shown, so they react to crops, stretches,
//! rotations and occlusions the way a real model plausibly would: an object
//! is captioned when enough of its original area is still visible.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Captioner, Detection, Detector};
use crate::caption::SemanticMatcher;
use crate::error::{Error, Result};
use crate::imagery::{BBox, Raster, Rgb};

/// Per-channel slack when matching an object's color.
pub const COLOR_TOLERANCE: u8 = 3;
/// Smallest neighbour difference (L-inf) that counts as a sharp outline.
pub const EDGE_CONTRAST: u8 = 40;
pub const DEFAULT_VISIBILITY_THRESHOLD: f64 = 0.5;
pub const DEFAULT_BACKGROUND: Rgb = [110, 110, 110];
const DETECTION_MIN_FRACTION: f64 = 0.05;
const DETECTION_SCORE: f64 = 0.9;

/// Object labels the scene generator draws from.
pub const SCENE_VOCABULARY: &[&str] = &[
    "ball", "box", "vase", "flower", "cat", "dog", "horse", "bird", "car", "bus", "truck",
    "bicycle", "boat", "chair", "table", "bed", "lamp", "clock", "book", "bottle", "cup", "laptop",
    "phone", "television", "umbrella", "bag", "kite", "apple", "banana", "pizza", "cake",
    "sandwich", "giraffe", "elephant", "zebra", "sheep", "cow", "bench", "hydrant", "sign", "bowl",
    "knife", "hat", "shoe", "tree", "guitar", "toy",
];

/// Object colors; each differs from the background and from black in at
/// least one channel by 100 or more.
pub const PALETTE: &[Rgb] = &[
    [220, 30, 30],
    [30, 170, 40],
    [40, 60, 225],
    [235, 205, 20],
    [205, 40, 205],
    [20, 205, 210],
    [245, 135, 20],
    [250, 250, 250],
    [95, 20, 150],
    [150, 230, 90],
    [250, 150, 185],
    [0, 110, 120],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub color: Rgb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub canvas: [u32; 2],
    pub objects: Vec<SceneObject>,
    #[serde(default = "default_background")]
    pub background: Rgb,
}

fn default_background() -> Rgb {
    DEFAULT_BACKGROUND
}

fn color_matches(a: Rgb, b: Rgb) -> bool {
    a.iter().zip(&b).all(|(x, y)| x.abs_diff(*y) <= COLOR_TOLERANCE)
}

impl SyntheticScene {
    pub fn new(width: u32, height: u32, objects: Vec<SceneObject>) -> Result<Self> {
        let scene = Self {
            canvas: [width, height],
            objects,
            background: DEFAULT_BACKGROUND,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        let [w, h] = self.canvas;
        if w == 0 || h == 0 {
            return Err(Error::InvalidInput("scene canvas must be nonempty".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            o.bbox.check_within(w, h)?;
            if color_matches(o.color, self.background) || color_matches(o.color, [0, 0, 0]) {
                return Err(Error::InvalidInput(format!(
                    "object {i} ({}) color is indistinguishable from background or black",
                    o.label
                )));
            }
            if self.objects[..i].iter().any(|p| color_matches(p.color, o.color)) {
                return Err(Error::InvalidInput(format!(
                    "object {i} ({}) reuses another object's color",
                    o.label
                )));
            }
        }
        Ok(())
    }

    pub fn width(&self) -> u32 {
        self.canvas[0]
    }

    pub fn height(&self) -> u32 {
        self.canvas[1]
    }

    pub fn render(&self) -> Raster {
        let mut img = Raster::filled(self.width(), self.height(), self.background)
            .expect("validated canvas");
        for o in &self.objects {
            img.fill_box(o.bbox, o.color);
        }
        img
    }

    /// Pixels of the object's color in `image`, relative to the object's
    /// original box area, capped at 1.
    pub fn visible_fraction(&self, object: usize, image: &Raster) -> f64 {
        let o = &self.objects[object];
        let n = image.pixels().filter(|&p| color_matches(p, o.color)).count();
        (n as f64 / o.bbox.area() as f64).min(1.0)
    }

    /// Whether some pixel of the object's colour sits on a sharp edge inside
    /// the image. A flat field of colour with no edge is not an object. Blurring a box leaves its core colour intact but
    /// removes this outline, which is what makes it unrecognizable.
    pub fn outline_visible(&self, object: usize, image: &Raster) -> bool {
        let color = self.objects[object].color;
        let (w, h) = (image.width(), image.height());
        (0..h).any(|y| {
            (0..w).any(|x| {
                if !color_matches(image.pixel(x, y), color) {
                    return false;
                }
                let p = image.pixel(x, y);
                let (x, y) = (i64::from(x), i64::from(y));
                [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)]
                    .iter()
                    .filter(|&&(nx, ny)| nx >= 0 && ny >= 0 && nx < i64::from(w) && ny < i64::from(h))
                    .any(|&(nx, ny)| {
                        let q = image.pixel(nx as u32, ny as u32);
                        p.iter().zip(&q).any(|(a, b)| a.abs_diff(*b) >= EDGE_CONTRAST)
                    })
            })
        })
    }

    /// An object is described when enough of it shows and its outline is sharp.
    pub fn recognizable(&self, object: usize, image: &Raster, threshold: f64) -> bool {
        self.visible_fraction(object, image) >= threshold && self.outline_visible(object, image)
    }

    /// Indices of objects in left-to-right order of their boxes.
    fn reading_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.objects.len()).collect();
        idx.sort_by_key(|&i| (self.objects[i].bbox.x0, self.objects[i].bbox.y0, i));
        idx
    }

    pub fn load(path: &Path) -> Result<Self> {
        let scene: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum FaultMode {
    None,
    /// Never mention `label`.
    Omit { label: String },
    /// Call every `from` a `to`.
    Misclassify { from: String, to: String },
    /// Mention `fabricated` whenever `trigger` is mentioned.
    Fabricate { trigger: String, fabricated: String },
}

/// Which images a fault applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaultScope {
    #[default]
    All,
    /// Every image except the unmodified scene render.
    Transformed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    #[serde(flatten)]
    pub mode: FaultMode,
    #[serde(default = "default_visibility")]
    pub visibility_threshold: f64,
    #[serde(default)]
    pub scope: FaultScope,
}

fn default_visibility() -> f64 {
    DEFAULT_VISIBILITY_THRESHOLD
}

impl Default for FaultSpec {
    fn default() -> Self {
        Self::none()
    }
}

impl FaultSpec {
    pub fn none() -> Self {
        Self {
            mode: FaultMode::None,
            visibility_threshold: DEFAULT_VISIBILITY_THRESHOLD,
            scope: FaultScope::All,
        }
    }

    pub fn new(mode: FaultMode) -> Self {
        Self {
            mode,
            ..Self::none()
        }
    }

    pub fn on_transformed(mode: FaultMode) -> Self {
        Self {
            mode,
            scope: FaultScope::Transformed,
            ..Self::none()
        }
    }

    /// Threshold in (0, 1]; every label known to `matcher`.
    pub fn validate(&self, matcher: &SemanticMatcher) -> Result<()> {
        if !(self.visibility_threshold > 0.0 && self.visibility_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "visibility threshold {} outside (0, 1]",
                self.visibility_threshold
            )));
        }
        let labels: Vec<&String> = match &self.mode {
            FaultMode::None => vec![],
            FaultMode::Omit { label } => vec![label],
            FaultMode::Misclassify { from, to } => vec![from, to],
            FaultMode::Fabricate {
                trigger,
                fabricated,
            } => vec![trigger, fabricated],
        };
        for l in labels {
            if matcher.vector(l).is_none() {
                return Err(Error::Config(format!("fault label {l:?} is not in the vocabulary")));
            }
        }
        Ok(())
    }
}

fn with_article(label: &str) -> String {
    let article = match label.chars().next() {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    };
    format!("{article} {label}")
}

/// Caption for `image` viewed as (a transformation of) `scene`.
pub fn simulate(scene: &SyntheticScene, fault: &FaultSpec, image: &Raster) -> String {
    let is_source = image == &scene.render();
    simulate_inner(scene, fault, image, is_source)
}

fn simulate_inner(scene: &SyntheticScene, fault: &FaultSpec, image: &Raster, is_source: bool) -> String {
    let mut labels: Vec<String> = scene
        .reading_order()
        .into_iter()
        .filter(|&i| scene.recognizable(i, image, fault.visibility_threshold))
        .map(|i| scene.objects[i].label.clone())
        .collect();

    let faulty = match fault.scope {
        FaultScope::All => true,
        FaultScope::Transformed => !is_source,
    };
    if faulty {
        match &fault.mode {
            FaultMode::None => {}
            FaultMode::Omit { label } => labels.retain(|l| l != label),
            FaultMode::Misclassify { from, to } => {
                for l in labels.iter_mut().filter(|l| *l == from) {
                    *l = to.clone();
                }
            }
            FaultMode::Fabricate {
                trigger,
                fabricated,
            } => {
                if labels.contains(trigger) && !labels.contains(fabricated) {
                    labels.push(fabricated.clone());
                }
            }
        }
    }
    labels
        .iter()
        .map(|l| with_article(l))
        .collect::<Vec<_>>()
        .join(" and ")
}

/// Captioner backed by [`simulate`].
#[derive(Debug, Clone)]
pub struct SimulatedCaptioner {
    scene: SyntheticScene,
    fault: FaultSpec,
    source: Raster,
}

impl SimulatedCaptioner {
    pub fn new(scene: SyntheticScene, fault: FaultSpec) -> Self {
        let source = scene.render();
        Self {
            scene,
            fault,
            source,
        }
    }
}

impl Captioner for SimulatedCaptioner {
    fn caption(&self, image: &Raster) -> Result<String> {
        Ok(simulate_inner(
            &self.scene,
            &self.fault,
            image,
            image == &self.source,
        ))
    }
}

/// Detector that finds each scene object by color and reports the box of
/// its visible pixels, optionally jittered, renamed or dropped.
#[derive(Debug, Clone)]
pub struct SimulatedDetector {
    scene: SyntheticScene,
    jitter: u32,
    seed: u64,
    relabel: HashMap<String, String>,
    missed: HashSet<String>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SimulatedDetector {
    pub fn new(scene: SyntheticScene) -> Self {
        Self {
            scene,
            jitter: 0,
            seed: 0,
            relabel: HashMap::new(),
            missed: HashSet::new(),
        }
    }

    /// Moves every box edge by up to `pixels` in either direction.
    pub fn with_jitter(mut self, pixels: u32, seed: u64) -> Self {
        self.jitter = pixels;
        self.seed = seed;
        self
    }

    /// Reports objects labelled `from` as `to`.
    pub fn with_relabel(mut self, from: &str, to: &str) -> Self {
        self.relabel.insert(from.to_string(), to.to_string());
        self
    }

    /// Never reports objects labelled `label`.
    pub fn with_missed(mut self, label: &str) -> Self {
        self.missed.insert(label.to_string());
        self
    }

    fn offset(&self, object: usize, edge: u64) -> i64 {
        if self.jitter == 0 {
            return 0;
        }
        let span = 2 * u64::from(self.jitter) + 1;
        let r = splitmix(self.seed ^ splitmix(object as u64 * 4 + edge));
        (r % span) as i64 - i64::from(self.jitter)
    }
}

fn shift(v: u32, by: i64, lo: i64, hi: i64) -> u32 {
    (i64::from(v) + by).clamp(lo, hi) as u32
}

impl Detector for SimulatedDetector {
    fn detect(&self, image: &Raster) -> Result<Vec<Detection>> {
        let (w, h) = (image.width(), image.height());
        let mut out = Vec::new();
        for (i, o) in self.scene.objects.iter().enumerate() {
            if self.missed.contains(&o.label) {
                continue;
            }
            let mut bounds: Option<(u32, u32, u32, u32)> = None;
            let mut count = 0u64;
            for y in 0..h {
                for x in 0..w {
                    if color_matches(image.pixel(x, y), o.color) {
                        count += 1;
                        bounds = Some(match bounds {
                            None => (x, y, x, y),
                            Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
                        });
                    }
                }
            }
            let Some((x0, y0, x1, y1)) = bounds else { continue };
            if (count as f64) < DETECTION_MIN_FRACTION * o.bbox.area() as f64 {
                continue;
            }
            let nx0 = shift(x0, self.offset(i, 0), 0, i64::from(w) - 1);
            let ny0 = shift(y0, self.offset(i, 1), 0, i64::from(h) - 1);
            let nx1 = shift(x1 + 1, self.offset(i, 2), i64::from(nx0) + 1, i64::from(w));
            let ny1 = shift(y1 + 1, self.offset(i, 3), i64::from(ny0) + 1, i64::from(h));
            out.push(Detection {
                label: self.relabel.get(&o.label).unwrap_or(&o.label).clone(),
                score: DETECTION_SCORE,
                bbox: BBox::new(nx0, ny0, nx1, ny1)?,
            });
        }
        Ok(out)
    }
}

/// Layout knobs for [`generate_corpus`].
#[derive(Debug, Clone)]
pub struct SceneLayout {
    pub width: u32,
    pub height: u32,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_side: u32,
    pub max_side: u32,
    /// Empty space kept between object boxes.
    pub gap: u32,
}

impl Default for SceneLayout {
    fn default() -> Self {
        Self {
            width: 128,
            height: 96,
            min_objects: 1,
            max_objects: 4,
            min_side: 16,
            max_side: 44,
            gap: 3,
        }
    }
}

fn overlaps_with_gap(a: &BBox, b: &BBox, gap: u32) -> bool {
    a.x0 < b.x1 + gap && b.x0 < a.x1 + gap && a.y0 < b.y1 + gap && b.y0 < a.y1 + gap
}

/// Places one more object into `objects`, returning false when no spot is
/// found.
pub fn place_object(
    rng: &mut impl Rng,
    layout: &SceneLayout,
    objects: &mut Vec<SceneObject>,
    label: &str,
    color: Rgb,
) -> bool {
    for _ in 0..400 {
        let w = rng.random_range(layout.min_side..=layout.max_side.min(layout.width));
        let h = rng.random_range(layout.min_side..=layout.max_side.min(layout.height));
        if f64::from(w.max(h)) / f64::from(w.min(h)) > 2.5 {
            continue;
        }
        let x0 = rng.random_range(0..=layout.width - w);
        let y0 = rng.random_range(0..=layout.height - h);
        let b = BBox::new(x0, y0, x0 + w, y0 + h).expect("positive size");
        if objects.iter().all(|o| !overlaps_with_gap(&o.bbox, &b, layout.gap)) {
            objects.push(SceneObject {
                label: label.to_string(),
                bbox: b,
                color,
            });
            return true;
        }
    }
    false
}

/// Random scene whose labels are pairwise unrelated under `matcher`.
pub fn generate_scene(rng: &mut impl Rng, layout: &SceneLayout, matcher: &SemanticMatcher) -> SyntheticScene {
    let n = rng.random_range(layout.min_objects..=layout.max_objects);
    let mut colors = PALETTE.to_vec();
    colors.shuffle(rng);
    let mut objects: Vec<SceneObject> = Vec::new();
    for color in colors.into_iter().take(n) {
        let label = loop {
            let candidate = *SCENE_VOCABULARY.choose(rng).expect("vocabulary nonempty");
            if objects
                .iter()
                .all(|o| !matcher.same_category(&o.label, candidate))
            {
                break candidate;
            }
        };
        if !place_object(rng, layout, &mut objects, label, color) {
            break;
        }
    }
    SyntheticScene {
        canvas: [layout.width, layout.height],
        objects,
        background: DEFAULT_BACKGROUND,
    }
}

pub fn generate_corpus(count: usize, seed: u64, matcher: &SemanticMatcher) -> Vec<SyntheticScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = SceneLayout::default();
    (0..count)
        .map(|_| generate_scene(&mut rng, &layout, matcher))
        .collect()
}
