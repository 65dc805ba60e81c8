use std::collections::HashMap;
use std::path::Path;

use super::{Inpainter, Tagger};
use crate::caption::{tokenize, Lemmatizer, PosTag, Token};
use crate::error::{Error, Result};
use crate::imagery::{BBox, Raster, Rgb};

const BUNDLED_POS_LEXICON: &str = include_str!("../../data/pos_lexicon.tsv");

/// Fills the region with the mean color of its 1-pixel outer ring. When the
/// region covers the whole image the ring is empty and the image's own
/// border pixels are averaged instead.
#[derive(Debug, Default, Clone, Copy)]
pub struct BuiltinInpainter;

fn mean_color(image: &Raster, points: &[(u32, u32)]) -> Rgb {
    let mut sum = [0u64; 3];
    for &(x, y) in points {
        let p = image.pixel(x, y);
        for c in 0..3 {
            sum[c] += u64::from(p[c]);
        }
    }
    let n = points.len().max(1) as f64;
    sum.map(|s| (s as f64 / n).round() as u8)
}

fn border_pixels(width: u32, height: u32) -> Vec<(u32, u32)> {
    (0..height)
        .flat_map(|y| (0..width).map(move |x| (x, y)))
        .filter(|&(x, y)| x == 0 || y == 0 || x == width - 1 || y == height - 1)
        .collect()
}

impl Inpainter for BuiltinInpainter {
    fn inpaint(&self, image: &Raster, region: BBox) -> Result<Raster> {
        region.check_within(image.width(), image.height())?;
        let mut ring = region.ring_pixels(image.width(), image.height());
        if ring.is_empty() {
            ring = border_pixels(image.width(), image.height());
        }
        let fill = mean_color(image, &ring);
        let mut out = image.clone();
        out.fill_box(region, fill);
        Ok(out)
    }
}

/// Lexicon tagger: closed-class words and common caption verbs and
/// adjectives come from a word list; numerals are NUM, punctuation is
/// PUNCT, and every other word is taken to be a noun.
#[derive(Debug, Clone)]
pub struct BuiltinTagger {
    lexicon: HashMap<String, PosTag>,
    lemmatizer: Lemmatizer,
}

impl Default for BuiltinTagger {
    fn default() -> Self {
        Self::new(BUNDLED_POS_LEXICON, Lemmatizer::default()).expect("bundled POS lexicon parses")
    }
}

impl BuiltinTagger {
    pub fn new(lexicon_tsv: &str, lemmatizer: Lemmatizer) -> Result<Self> {
        let mut lexicon = HashMap::new();
        for (i, line) in lexicon_tsv.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            let (Some(word), Some(tag)) = (cols.next(), cols.next()) else {
                return Err(Error::Lexicon(format!("POS lexicon line {}: expected two columns", i + 1)));
            };
            lexicon.insert(word.trim().to_lowercase(), PosTag::parse(tag));
        }
        Ok(Self {
            lexicon,
            lemmatizer,
        })
    }

    pub fn with_lemmatizer(lemmatizer: Lemmatizer) -> Self {
        Self::new(BUNDLED_POS_LEXICON, lemmatizer).expect("bundled POS lexicon parses")
    }

    pub fn load(lexicon: &Path, lemmatizer: Lemmatizer) -> Result<Self> {
        Self::new(&std::fs::read_to_string(lexicon)?, lemmatizer)
    }

    pub fn lemmatizer(&self) -> &Lemmatizer {
        &self.lemmatizer
    }

    fn tag_word(&self, word: &str) -> Token {
        let lower = word.to_lowercase();
        let pos = if let Some(&pos) = self.lexicon.get(&lower) {
            pos
        } else if word.chars().all(|c| c.is_ascii_digit()) {
            PosTag::Num
        } else if !word.chars().any(char::is_alphanumeric) {
            PosTag::Punct
        } else {
            PosTag::Noun
        };
        let lemma = if pos == PosTag::Noun {
            self.lemmatizer.lemmatize(&lower)
        } else {
            lower
        };
        Token::new(word, pos, lemma)
    }
}

impl Tagger for BuiltinTagger {
    fn tag(&self, text: &str) -> Result<Vec<Token>> {
        Ok(tokenize(text).iter().map(|w| self.tag_word(w)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::inpaint_region;

    #[test]
    fn tags_simple_phrase() {
        let t = BuiltinTagger::default();
        assert_eq!(
            t.tag("a red ball").unwrap(),
            vec![
                Token::new("a", PosTag::Det, "a"),
                Token::new("red", PosTag::Adj, "red"),
                Token::new("ball", PosTag::Noun, "ball"),
            ]
        );
        assert!(t.tag("").unwrap().is_empty());
    }

    #[test]
    fn unknown_words_are_nouns() {
        let t = BuiltinTagger::default();
        let toks = t.tag("a flurble, 3 Quokkas.").unwrap();
        assert_eq!(toks[1], Token::new("flurble", PosTag::Noun, "flurble"));
        assert_eq!(toks[2].pos, PosTag::Punct);
        assert_eq!(toks[3].pos, PosTag::Num);
        assert_eq!(toks[4], Token::new("Quokkas", PosTag::Noun, "quokka"));
        assert!(t.tag_caption("a flurble, 3 Quokkas.").is_ok());
    }

    #[test]
    fn ring_mean_fill() {
        // 4x4 with a distinct 2x2 center; the ring is the 12 outer pixels
        let img = Raster::from_fn(4, 4, |x, y| {
            if (1..3).contains(&x) && (1..3).contains(&y) {
                [200, 0, 0]
            } else if y == 0 {
                [40, 40, 40]
            } else {
                [10, 20, 30]
            }
        })
        .unwrap();
        let region = BBox::new(1, 1, 3, 3).unwrap();
        let ring = region.ring_pixels(4, 4);
        let expected = mean_color(&img, &ring);
        // 4 pixels of 40 and 8 of (10,20,30): (4*40 + 8*10)/12 = 20, ...
        assert_eq!(expected, [20, 27, 33]);
        let out = inpaint_region(&BuiltinInpainter, &img, region).unwrap();
        assert_eq!(out.pixel(1, 1), expected);
        assert_eq!(out.pixel(2, 2), expected);
        assert_eq!(out.pixel(0, 0), img.pixel(0, 0));
    }

    #[test]
    fn whole_image_fill_uses_border_mean() {
        let img = Raster::from_fn(3, 3, |x, y| if (x, y) == (1, 1) { [255, 255, 255] } else { [9, 18, 27] })
            .unwrap();
        let out = BuiltinInpainter.inpaint(&img, BBox::full(3, 3)).unwrap();
        assert!(out.pixels().all(|p| p == [9, 18, 27]));
    }
}
