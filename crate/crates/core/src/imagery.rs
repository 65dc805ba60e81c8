//! Raster and binary-mask primitives.
//!
//! Coordinates are integer pixel indices. Boxes are half-open:
//! a box `[x0, y0, x1, y1]` covers columns `x0..x1` and rows `y0..y1`.

use std::fmt;
use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type Rgb = [u8; 3];

/// An 8-bit RGB image stored row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct Raster {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl fmt::Debug for Raster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Raster")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl Raster {
    /// Builds a raster from interleaved RGB bytes (`3 * width * height` of them).
    pub fn from_rgb_bytes(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(format!(
                "raster dimensions must be positive, got {width}x{height}"
            )));
        }
        let expected = 3 * width as usize * height as usize;
        if data.len() != expected {
            return Err(Error::InvalidInput(format!(
                "raster {width}x{height} needs {expected} bytes, got {}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, color: Rgb) -> Result<Self> {
        let n = width as usize * height as usize;
        let mut data = Vec::with_capacity(3 * n);
        for _ in 0..n {
            data.extend_from_slice(&color);
        }
        Self::from_rgb_bytes(width, height, data)
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> Rgb) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self::from_rgb_bytes(width, height, data)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width) * u64::from(self.height)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    fn offset(&self, x: u32, y: u32) -> usize {
        3 * (y as usize * self.width as usize + x as usize)
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> Rgb {
        let o = self.offset(x, y);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: u32, y: u32, color: Rgb) {
        let o = self.offset(x, y);
        self.data[o..o + 3].copy_from_slice(&color);
    }

    pub fn pixels(&self) -> impl Iterator<Item = Rgb> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    /// Fills every pixel of `region` with `color`.
    pub fn fill_box(&mut self, region: BBox, color: Rgb) {
        for y in region.y0..region.y1.min(self.height) {
            for x in region.x0..region.x1.min(self.width) {
                self.set_pixel(x, y, color);
            }
        }
    }

    /// Copies out the sub-image covered by `region`.
    pub fn sub_image(&self, region: BBox) -> Result<Self> {
        region.check_within(self.width, self.height)?;
        let mut data = Vec::with_capacity(3 * region.area() as usize);
        for y in region.y0..region.y1 {
            let start = self.offset(region.x0, y);
            let end = self.offset(region.x1 - 1, y) + 3;
            data.extend_from_slice(&self.data[start..end]);
        }
        Self::from_rgb_bytes(region.width(), region.height(), data)
    }

    /// Bilinear sample at continuous coordinates where pixel `(x, y)` has
    /// its center at `(x + 0.5, y + 0.5)`. Coordinates outside the frame are
    /// clamped to the border.
    pub fn sample_bilinear(&self, fx: f64, fy: f64) -> Rgb {
        let gx = (fx - 0.5).clamp(0.0, f64::from(self.width - 1));
        let gy = (fy - 0.5).clamp(0.0, f64::from(self.height - 1));
        let x0 = gx.floor() as u32;
        let y0 = gy.floor() as u32;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = gx - f64::from(x0);
        let ty = gy - f64::from(y0);
        let p00 = self.pixel(x0, y0);
        let p10 = self.pixel(x1, y0);
        let p01 = self.pixel(x0, y1);
        let p11 = self.pixel(x1, y1);
        let mut out = [0u8; 3];
        for c in 0..3 {
            let top = f64::from(p00[c]) * (1.0 - tx) + f64::from(p10[c]) * tx;
            let bottom = f64::from(p01[c]) * (1.0 - tx) + f64::from(p11[c]) * tx;
            let v = top * (1.0 - ty) + bottom * ty;
            out[c] = v.round().clamp(0.0, 255.0) as u8;
        }
        out
    }

    /// SHA-256 over dimensions and pixel bytes, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.width.to_le_bytes());
        hasher.update(self.height.to_le_bytes());
        hasher.update(&self.data);
        hex::encode(hasher.finalize())
    }

    /// Decodes a PNG. Alpha is discarded; grayscale is expanded to RGB.
    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_rgb_bytes(w, h, img.into_raw())
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let img = RgbImage::from_raw(self.width, self.height, self.data.clone())
            .expect("raster buffer length is an invariant");
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        Self::from_png_bytes(&std::fs::read(path)?)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }
}

/// Axis-aligned half-open pixel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl TryFrom<[u32; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [u32; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{},{},{}]", self.x0, self.y0, self.x1, self.y1)
    }
}

impl BBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::InvalidInput(format!(
                "degenerate box [{x0},{y0},{x1},{y1}]"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self {
            x0: 0,
            y0: 0,
            x1: width,
            y1: height,
        }
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    pub fn check_within(&self, width: u32, height: u32) -> Result<()> {
        if self.x1 > width || self.y1 > height {
            return Err(Error::InvalidInput(format!(
                "box {self} exceeds {width}x{height} frame"
            )));
        }
        Ok(())
    }

    /// True when `other` lies entirely inside `self` (boundaries may touch).
    pub fn contains(&self, other: &BBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        BBox::new(
            self.x0.max(other.x0),
            self.y0.max(other.y0),
            self.x1.min(other.x1),
            self.y1.min(other.y1),
        )
        .ok()
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other).map_or(0, |b| b.area());
        let union = self.area() + other.area() - inter;
        inter as f64 / union as f64
    }

    /// The 1-pixel frame around `self`, clipped to the image.
    pub fn ring_pixels(&self, width: u32, height: u32) -> Vec<(u32, u32)> {
        let xa = self.x0.saturating_sub(1);
        let ya = self.y0.saturating_sub(1);
        let xb = (self.x1 + 1).min(width);
        let yb = (self.y1 + 1).min(height);
        let mut out = Vec::new();
        for y in ya..yb {
            for x in xa..xb {
                let inside = x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1;
                if !inside {
                    out.push((x, y));
                }
            }
        }
        out
    }
}

/// Row-major binary mask. Bits are packed into 64-bit words so set algebra
/// runs on popcounts.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BitMask {
    width: u32,
    height: u32,
    words: Vec<u64>,
}

impl fmt::Debug for BitMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BitMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("count", &self.count())
            .finish()
    }
}

impl BitMask {
    pub fn zeros(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        Self {
            width,
            height,
            words: vec![0; n.div_ceil(64)],
        }
    }

    pub fn ones(width: u32, height: u32) -> Self {
        let mut m = Self::zeros(width, height);
        m.set_range(0, width as usize * height as usize);
        m
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut m = Self::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    /// Builds a mask from row-major booleans.
    pub fn from_bools(width: u32, height: u32, bits: &[bool]) -> Result<Self> {
        if bits.len() != width as usize * height as usize {
            return Err(Error::InvalidInput(format!(
                "mask {width}x{height} needs {} bits, got {}",
                width as usize * height as usize,
                bits.len()
            )));
        }
        Ok(Self::from_fn(width, height, |x, y| {
            bits[y as usize * width as usize + x as usize]
        }))
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    fn index(&self, x: u32, y: u32) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y as usize * self.width as usize + x as usize
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        let i = self.index(x, y);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let i = self.index(x, y);
        if value {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    // sets linear bit indices [start, end)
    fn set_range(&mut self, start: usize, end: usize) {
        let mut i = start;
        while i < end {
            let word = i / 64;
            let bit = i % 64;
            let span = (64 - bit).min(end - i);
            let chunk = if span == 64 {
                u64::MAX
            } else {
                ((1u64 << span) - 1) << bit
            };
            self.words[word] |= chunk;
            i += span;
        }
    }

    /// Sets every bit inside `region`, clipped to the mask.
    pub fn fill_box(&mut self, region: BBox) {
        let x1 = region.x1.min(self.width);
        if region.x0 >= x1 {
            return;
        }
        for y in region.y0..region.y1.min(self.height) {
            let row = y as usize * self.width as usize;
            self.set_range(row + region.x0 as usize, row + x1 as usize);
        }
    }

    pub fn count(&self) -> u64 {
        self.words.iter().map(|w| u64::from(w.count_ones())).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    fn check_same_dims(&self, other: &BitMask) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }

    pub fn intersection_count(&self, other: &BitMask) -> Result<u64> {
        self.check_same_dims(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| u64::from((a & b).count_ones()))
            .sum())
    }

    pub fn union_count(&self, other: &BitMask) -> Result<u64> {
        self.check_same_dims(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| u64::from((a | b).count_ones()))
            .sum())
    }

    pub fn iter_set(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        (0..self.height).flat_map(move |y| {
            (0..self.width).filter_map(move |x| self.get(x, y).then_some((x, y)))
        })
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.width, self.height, |x, y| {
            self.get(self.width - 1 - x, y)
        })
    }

    /// Smallest box covering every set bit, if any.
    pub fn bounding_box(&self) -> Option<BBox> {
        let mut bounds: Option<(u32, u32, u32, u32)> = None;
        for (x, y) in self.iter_set() {
            bounds = Some(match bounds {
                None => (x, y, x, y),
                Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
            });
        }
        bounds.map(|(a, b, c, d)| BBox {
            x0: a,
            y0: b,
            x1: c + 1,
            y1: d + 1,
        })
    }

    /// Binary PBM (P4): rows packed MSB first, padded to whole bytes, 1 = set.
    pub fn to_pbm(&self) -> Vec<u8> {
        let mut out = format!("P4\n{} {}\n", self.width, self.height).into_bytes();
        let row_bytes = (self.width as usize).div_ceil(8);
        for y in 0..self.height {
            let mut row = vec![0u8; row_bytes];
            for x in 0..self.width {
                if self.get(x, y) {
                    row[x as usize / 8] |= 0x80 >> (x % 8);
                }
            }
            out.extend_from_slice(&row);
        }
        out
    }
}

/// Union of `boxes` as a mask over a `width` x `height` frame.
pub fn mask_from_boxes(boxes: &[BBox], width: u32, height: u32) -> Result<BitMask> {
    let mut mask = BitMask::zeros(width, height);
    for b in boxes {
        b.check_within(width, height)?;
        mask.fill_box(*b);
    }
    Ok(mask)
}

pub fn mask_count(mask: &BitMask) -> u64 {
    mask.count()
}

pub fn mask_intersection_count(a: &BitMask, b: &BitMask) -> Result<u64> {
    a.intersection_count(b)
}

pub fn mask_union_count(a: &BitMask, b: &BitMask) -> Result<u64> {
    a.union_count(b)
}

/// Drops every box that contains another box of the list. Equal boxes count
/// as mutual containment; the earliest copy survives. Survivor order follows
/// the input.
pub fn remove_included_boxes(boxes: &[BBox]) -> Vec<BBox> {
    boxes
        .iter()
        .enumerate()
        .filter(|&(i, b)| {
            !boxes.iter().enumerate().any(|(j, other)| {
                if i == j {
                    return false;
                }
                if b == other {
                    // duplicate: keep the first occurrence only
                    return j < i;
                }
                b.contains(other)
            })
        })
        .map(|(_, b)| *b)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x0: u32, y0: u32, x1: u32, y1: u32) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn brute_count(boxes: &[BBox], w: u32, h: u32) -> u64 {
        let mut n = 0;
        for y in 0..h {
            for x in 0..w {
                if boxes
                    .iter()
                    .any(|b| x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1)
                {
                    n += 1;
                }
            }
        }
        n
    }

    #[test]
    fn single_box_union() {
        let m = mask_from_boxes(&[bx(0, 0, 2, 2)], 4, 4).unwrap();
        assert_eq!(m.count(), 4);
    }

    #[test]
    fn overlapping_boxes_union_matches_enumeration() {
        let boxes = [bx(0, 0, 2, 2), bx(1, 1, 3, 3)];
        let expected = brute_count(&boxes, 4, 4);
        assert_eq!(expected, 7);
        assert_eq!(mask_from_boxes(&boxes, 4, 4).unwrap().count(), expected);
    }

    #[test]
    fn empty_box_list_gives_empty_mask() {
        let m = mask_from_boxes(&[], 4, 4).unwrap();
        assert_eq!(m.count(), 0);
        assert!(m.is_empty());
    }

    #[test]
    fn out_of_bounds_box_is_named() {
        let err = mask_from_boxes(&[bx(2, 2, 5, 3)], 4, 4).unwrap_err();
        assert!(err.to_string().contains("[2,2,5,3]"), "{err}");
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(BBox::new(0, 0, 0, 0).is_err());
        assert!(BBox::new(3, 1, 2, 4).is_err());
    }

    #[test]
    fn counts() {
        assert_eq!(BitMask::zeros(3, 3).count(), 0);
        assert_eq!(BitMask::ones(3, 3).count(), 9);
        let checker = BitMask::from_fn(4, 4, |x, y| (x + y) % 2 == 0);
        assert_eq!(checker.count(), 8);
    }

    #[test]
    fn intersection_and_union_of_halves() {
        let left = BitMask::from_fn(4, 4, |x, _| x < 2);
        let top = BitMask::from_fn(4, 4, |_, y| y < 2);
        assert_eq!(left.count(), 8);
        assert_eq!(mask_intersection_count(&left, &top).unwrap(), 4);
        assert_eq!(mask_union_count(&left, &top).unwrap(), 12);
        assert_eq!(mask_intersection_count(&left, &left).unwrap(), 8);
        assert_eq!(mask_union_count(&left, &left).unwrap(), 8);

        let right = BitMask::from_fn(4, 4, |x, _| x >= 2);
        assert_eq!(mask_intersection_count(&left, &right).unwrap(), 0);
        assert_eq!(mask_union_count(&left, &right).unwrap(), 16);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let a = BitMask::zeros(3, 3);
        let b = BitMask::zeros(3, 4);
        assert!(matches!(
            a.intersection_count(&b),
            Err(Error::DimensionMismatch(3, 3, 3, 4))
        ));
        assert!(a.union_count(&b).is_err());
    }

    #[test]
    fn nested_box_keeps_smaller() {
        let out = remove_included_boxes(&[bx(0, 0, 50, 50), bx(10, 10, 20, 20)]);
        assert_eq!(out, vec![bx(10, 10, 20, 20)]);
    }

    #[test]
    fn overlapping_non_nested_both_kept() {
        let boxes = [bx(0, 0, 10, 10), bx(5, 5, 15, 15)];
        assert_eq!(remove_included_boxes(&boxes), boxes.to_vec());
    }

    #[test]
    fn duplicates_keep_first() {
        let out = remove_included_boxes(&[bx(1, 1, 4, 4), bx(1, 1, 4, 4), bx(1, 1, 4, 4)]);
        assert_eq!(out, vec![bx(1, 1, 4, 4)]);
    }

    #[test]
    fn pbm_layout() {
        let m = BitMask::from_fn(10, 2, |x, y| y == 0 && (x == 0 || x == 9));
        let pbm = m.to_pbm();
        let header = b"P4\n10 2\n";
        assert_eq!(&pbm[..header.len()], header);
        assert_eq!(&pbm[header.len()..], &[0x80, 0x40, 0x00, 0x00]);
    }

    #[test]
    fn png_round_trip_preserves_pixels() {
        let r = Raster::from_fn(5, 3, |x, y| [x as u8 * 40, y as u8 * 80, 7]).unwrap();
        let back = Raster::from_png_bytes(&r.to_png_bytes().unwrap()).unwrap();
        assert_eq!(r, back);
        assert_eq!(r.content_hash(), back.content_hash());
    }

    #[test]
    fn raster_rejects_bad_buffers() {
        assert!(Raster::from_rgb_bytes(0, 3, vec![]).is_err());
        assert!(Raster::from_rgb_bytes(2, 2, vec![0; 11]).is_err());
    }

    #[test]
    fn ring_of_whole_image_is_empty_and_of_inner_box_is_frame() {
        assert!(BBox::full(4, 4).ring_pixels(4, 4).is_empty());
        assert_eq!(bx(1, 1, 3, 3).ring_pixels(4, 4).len(), 12);
        assert_eq!(bx(0, 0, 2, 2).ring_pixels(4, 4).len(), 5);
    }

    #[test]
    fn sub_image_copies_region() {
        let r = Raster::from_fn(4, 4, |x, y| [x as u8, y as u8, 0]).unwrap();
        let s = r.sub_image(bx(1, 2, 3, 4)).unwrap();
        assert_eq!((s.width(), s.height()), (2, 2));
        assert_eq!(s.pixel(0, 0), [1, 2, 0]);
        assert_eq!(s.pixel(1, 1), [2, 3, 0]);
    }

    #[test]
    fn bbox_json_is_array() {
        let b = bx(1, 2, 3, 4);
        assert_eq!(serde_json::to_string(&b).unwrap(), "[1,2,3,4]");
        assert!(serde_json::from_str::<BBox>("[3,2,1,4]").is_err());
    }
}
