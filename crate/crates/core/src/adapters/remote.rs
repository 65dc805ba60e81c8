//! Role-specific request/response schemas on top of [`Endpoint`].

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Map, Value};

use super::{Captioner, Detection, Detector, Endpoint, Inpainter, Tagger};
use crate::caption::{PosTag, Token};
use crate::error::{Error, Result};
use crate::imagery::{BBox, Raster};

fn image_field(image: &Raster) -> Result<Value> {
    Ok(Value::String(B64.encode(image.to_png_bytes()?)))
}

fn decode<T: DeserializeOwned>(role: &'static str, response: Map<String, Value>) -> Result<T> {
    let raw = Value::Object(response);
    serde_json::from_value(raw.clone())
        .map_err(|e| Error::adapter_payload(role, format!("malformed response: {e}"), raw.to_string()))
}

fn fields(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => unreachable!("request bodies are objects"),
    }
}

/// `{"id","image_png_b64"}` -> `{"id","caption"}`
pub struct RemoteCaptioner(pub Endpoint);

#[derive(Deserialize)]
struct CaptionResponse {
    caption: String,
}

impl Captioner for RemoteCaptioner {
    fn caption(&self, image: &Raster) -> Result<String> {
        let body = fields(json!({ "image_png_b64": image_field(image)? }));
        let r: CaptionResponse = decode(self.0.role(), self.0.request(body)?)?;
        Ok(r.caption)
    }
}

/// `{"id","image_png_b64"}` -> `{"id","objects":[{"label","score","box"}]}`
pub struct RemoteDetector(pub Endpoint);

#[derive(Deserialize)]
struct DetectResponse {
    objects: Vec<Detection>,
}

impl Detector for RemoteDetector {
    fn detect(&self, image: &Raster) -> Result<Vec<Detection>> {
        let body = fields(json!({ "image_png_b64": image_field(image)? }));
        let r: DetectResponse = decode(self.0.role(), self.0.request(body)?)?;
        Ok(r.objects)
    }
}

/// `{"id","image_png_b64","box"}` -> `{"id","image_png_b64"}`
pub struct RemoteInpainter(pub Endpoint);

#[derive(Deserialize)]
struct InpaintResponse {
    image_png_b64: String,
}

impl Inpainter for RemoteInpainter {
    fn inpaint(&self, image: &Raster, region: BBox) -> Result<Raster> {
        let role = self.0.role();
        let body = fields(json!({ "image_png_b64": image_field(image)?, "box": region }));
        let r: InpaintResponse = decode(role, self.0.request(body)?)?;
        let bytes = B64
            .decode(r.image_png_b64.as_bytes())
            .map_err(|e| Error::adapter(role, format!("image is not base64: {e}")))?;
        Raster::from_png_bytes(&bytes)
            .map_err(|e| Error::adapter(role, format!("image is not a PNG: {e}")))
    }
}

/// `{"id","text"}` -> `{"id","tokens":[{"t","pos","lemma"}]}`
pub struct RemoteTagger(pub Endpoint);

#[derive(Deserialize)]
struct WireToken {
    t: String,
    pos: String,
    lemma: String,
}

#[derive(Deserialize)]
struct TagResponse {
    tokens: Vec<WireToken>,
}

impl Tagger for RemoteTagger {
    fn tag(&self, text: &str) -> Result<Vec<Token>> {
        let r: TagResponse = decode(self.0.role(), self.0.request(fields(json!({ "text": text })))?)?;
        Ok(r.tokens
            .into_iter()
            .map(|w| Token {
                surface: w.t,
                pos: PosTag::parse(&w.pos),
                lemma: w.lemma.to_lowercase(),
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{inpaint_region, EndpointConfig};

    fn sh(script: &str) -> EndpointConfig {
        let mut c = EndpointConfig::process(vec!["sh".into(), "-c".into(), script.into()]);
        c.timeout_ms = 10_000;
        c
    }

    #[test]
    fn echoing_inpainter_leaves_outside_pixels() {
        // `cat` returns the request, whose image field is the input itself
        let inpainter = RemoteInpainter(EndpointConfig::process(vec!["cat".into()]).connect("inpaint").unwrap());
        let img = Raster::from_fn(9, 7, |x, y| [x as u8 * 20, y as u8 * 30, 5]).unwrap();
        let region = BBox::new(2, 2, 5, 6).unwrap();
        let out = inpaint_region(&inpainter, &img, region).unwrap();
        assert_eq!(out.as_bytes(), img.as_bytes());
    }

    #[test]
    fn captioner_missing_field_is_malformed() {
        let c = RemoteCaptioner(EndpointConfig::process(vec!["cat".into()]).connect("sut").unwrap());
        let img = Raster::filled(2, 2, [0, 0, 0]).unwrap();
        match c.caption(&img).unwrap_err() {
            Error::Adapter { message, payload, .. } => {
                assert!(message.contains("malformed"), "{message}");
                assert!(payload.unwrap().contains("image_png_b64"));
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn scripted_tagger_and_detector() {
        let tagger = RemoteTagger(
            sh(r#"while read l; do id=$(echo "$l" | sed 's/.*"id":"\([^"]*\)".*/\1/'); echo "{\"id\":\"$id\",\"tokens\":[{\"t\":\"Dogs\",\"pos\":\"NNS\",\"lemma\":\"Dog\"}]}"; done"#)
                .connect("pos")
                .unwrap(),
        );
        let toks = tagger.tag("Dogs").unwrap();
        assert_eq!(toks, vec![Token::new("Dogs", PosTag::Noun, "dog")]);

        let od = RemoteDetector(
            sh(r#"while read l; do id=$(echo "$l" | sed 's/.*"id":"\([^"]*\)".*/\1/'); echo "{\"id\":\"$id\",\"objects\":[{\"label\":\"cat\",\"score\":0.9,\"box\":[0,0,2,2]}]}"; done"#)
                .connect("od")
                .unwrap(),
        );
        let img = Raster::filled(4, 4, [0, 0, 0]).unwrap();
        let dets = od.detect(&img).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].label, "cat");
        assert_eq!(dets[0].bbox, BBox::new(0, 0, 2, 2).unwrap());
    }
}
