//! The four external model roles (captioner under test, object detector,
//! inpainter, POS tagger), their wire protocol, builtin fallbacks and a
//! deterministic scene simulator.

mod builtin;
mod protocol;
mod remote;
pub mod simulator;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

pub use builtin::{BuiltinInpainter, BuiltinTagger};
pub use protocol::{
    Endpoint, EndpointConfig, HttpTransport, ProcessTransport, Transport, TransportKind,
    DEFAULT_MAX_IN_FLIGHT,
};
pub use remote::{RemoteCaptioner, RemoteDetector, RemoteInpainter, RemoteTagger};

use crate::caption::{Caption, Token};
use crate::error::{Error, Result};
use crate::imagery::{BBox, Raster};

/// One object reported by a detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

impl Detection {
    pub fn validate(&self, width: u32, height: u32) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::InvalidInput(format!(
                "detection score {} outside [0,1]",
                self.score
            )));
        }
        self.bbox.check_within(width, height)
    }
}

/// The image-captioning system under test.
pub trait Captioner: Send + Sync {
    fn caption(&self, image: &Raster) -> Result<String>;
}

pub trait Detector: Send + Sync {
    fn detect(&self, image: &Raster) -> Result<Vec<Detection>>;
}

/// Fills `region` of an image. Implementations may touch other pixels;
/// [`inpaint_region`] restores them.
pub trait Inpainter: Send + Sync {
    fn inpaint(&self, image: &Raster, region: BBox) -> Result<Raster>;
}

pub trait Tagger: Send + Sync {
    fn tag(&self, text: &str) -> Result<Vec<Token>>;

    fn tag_caption(&self, text: &str) -> Result<Caption> {
        Caption::new(text, self.tag(text)?)
    }
}

impl<T: Captioner + ?Sized> Captioner for &T {
    fn caption(&self, image: &Raster) -> Result<String> {
        (**self).caption(image)
    }
}

impl<T: Captioner + ?Sized> Captioner for Box<T> {
    fn caption(&self, image: &Raster) -> Result<String> {
        (**self).caption(image)
    }
}

impl<T: Captioner + ?Sized> Captioner for Arc<T> {
    fn caption(&self, image: &Raster) -> Result<String> {
        (**self).caption(image)
    }
}

impl<T: Detector + ?Sized> Detector for Arc<T> {
    fn detect(&self, image: &Raster) -> Result<Vec<Detection>> {
        (**self).detect(image)
    }
}

impl<T: Inpainter + ?Sized> Inpainter for Arc<T> {
    fn inpaint(&self, image: &Raster, region: BBox) -> Result<Raster> {
        (**self).inpaint(image, region)
    }
}

impl<T: Tagger + ?Sized> Tagger for Arc<T> {
    fn tag(&self, text: &str) -> Result<Vec<Token>> {
        (**self).tag(text)
    }
}

pub fn caption_image(sut: &dyn Captioner, image: &Raster) -> Result<String> {
    sut.caption(image)
}

/// Runs the detector and checks every detection against the image frame.
pub fn detect_objects(od: &dyn Detector, image: &Raster) -> Result<Vec<Detection>> {
    let detections = od.detect(image)?;
    for d in &detections {
        d.validate(image.width(), image.height())
            .map_err(|e| Error::adapter("od", e.to_string()))?;
    }
    Ok(detections)
}

/// Inpaints `region`, guaranteeing that pixels outside it are untouched.
pub fn inpaint_region(inpaint: &dyn Inpainter, image: &Raster, region: BBox) -> Result<Raster> {
    region.check_within(image.width(), image.height())?;
    let filled = inpaint.inpaint(image, region)?;
    if filled.width() != image.width() || filled.height() != image.height() {
        return Err(Error::adapter(
            "inpaint",
            format!(
                "returned {}x{} image for {}x{} input",
                filled.width(),
                filled.height(),
                image.width(),
                image.height()
            ),
        ));
    }
    let mut out = image.clone();
    for y in region.y0..region.y1 {
        for x in region.x0..region.x1 {
            out.set_pixel(x, y, filled.pixel(x, y));
        }
    }
    debug_assert!(outside_unchanged(image, &out, region));
    Ok(out)
}

pub(crate) fn outside_unchanged(before: &Raster, after: &Raster, region: BBox) -> bool {
    (0..before.height()).all(|y| {
        (0..before.width()).all(|x| {
            let inside = x >= region.x0 && x < region.x1 && y >= region.y0 && y < region.y1;
            inside || before.pixel(x, y) == after.pixel(x, y)
        })
    })
}

pub fn tag_tokens(tagger: &dyn Tagger, text: &str) -> Result<Vec<Token>> {
    tagger.tag(text)
}

/// Memoises captions by image content hash. Captioners are assumed to be
/// deterministic per image.
pub struct CachedCaptioner<C> {
    inner: C,
    cache: Mutex<HashMap<String, String>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl<C: Captioner> CachedCaptioner<C> {
    pub fn new(inner: C) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn inner(&self) -> &C {
        &self.inner
    }
}

impl<C: Captioner> Captioner for CachedCaptioner<C> {
    fn caption(&self, image: &Raster) -> Result<String> {
        let key = image.content_hash();
        if let Some(hit) = self.cache.lock().unwrap().get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(hit.clone());
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let caption = self.inner.caption(image)?;
        self.cache.lock().unwrap().insert(key, caption.clone());
        Ok(caption)
    }
}

/// The four model handles one pipeline run talks to.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub sut: &'a dyn Captioner,
    pub od: &'a dyn Detector,
    pub inpaint: &'a dyn Inpainter,
    pub tagger: &'a dyn Tagger,
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scribbler;

    impl Inpainter for Scribbler {
        fn inpaint(&self, image: &Raster, _region: BBox) -> Result<Raster> {
            Raster::filled(image.width(), image.height(), [9, 9, 9])
        }
    }

    struct Shrinker;

    impl Inpainter for Shrinker {
        fn inpaint(&self, _image: &Raster, _region: BBox) -> Result<Raster> {
            Raster::filled(2, 2, [0, 0, 0])
        }
    }

    #[test]
    fn inpaint_contract_restores_outside_pixels() {
        let img = Raster::from_fn(6, 5, |x, y| [x as u8, y as u8, 1]).unwrap();
        let region = BBox::new(1, 1, 3, 4).unwrap();
        let out = inpaint_region(&Scribbler, &img, region).unwrap();
        assert!(outside_unchanged(&img, &out, region));
        assert_eq!(out.pixel(2, 2), [9, 9, 9]);
        assert_eq!(out.pixel(4, 4), img.pixel(4, 4));
    }

    #[test]
    fn inpaint_size_mismatch_is_adapter_error() {
        let img = Raster::filled(6, 5, [1, 1, 1]).unwrap();
        let err = inpaint_region(&Shrinker, &img, BBox::new(0, 0, 1, 1).unwrap()).unwrap_err();
        assert!(err.is_adapter_failure());
    }

    struct Counting(AtomicU64);

    impl Captioner for Counting {
        fn caption(&self, image: &Raster) -> Result<String> {
            self.0.fetch_add(1, Ordering::SeqCst);
            Ok(format!("w{}", image.width()))
        }
    }

    #[test]
    fn cache_skips_repeated_images() {
        let cached = CachedCaptioner::new(Counting(AtomicU64::new(0)));
        let a = Raster::filled(3, 3, [0, 0, 0]).unwrap();
        let b = Raster::filled(4, 3, [0, 0, 0]).unwrap();
        assert_eq!(cached.caption(&a).unwrap(), "w3");
        assert_eq!(cached.caption(&a).unwrap(), "w3");
        assert_eq!(cached.caption(&b).unwrap(), "w4");
        assert_eq!(cached.inner().0.load(Ordering::SeqCst), 2);
        assert_eq!((cached.hits(), cached.misses()), (1, 2));
    }

    #[test]
    fn detection_wire_shape() {
        let d = Detection {
            label: "dog".into(),
            score: 0.5,
            bbox: BBox::new(1, 2, 3, 4).unwrap(),
        };
        assert_eq!(
            serde_json::to_string(&d).unwrap(),
            r#"{"label":"dog","score":0.5,"box":[1,2,3,4]}"#
        );
        assert!(Detection { score: 1.5, ..d.clone() }.validate(10, 10).is_err());
        assert!(d.validate(2, 10).is_err());
    }
}
