//! Raster types, file I/O, patch geometry and annotation agreement.
//!
//! All rasters are row-major. Multi-channel images are channel-interleaved:
//! the value of channel `c` at `(x, y)` lives at `(y * width + x) * channels + c`.

use std::fs::File;
use std::io::{BufWriter, Read};
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat, ImageReader};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default label binarization threshold, as a fraction of full scale.
pub const DEFAULT_LABEL_THRESHOLD: f32 = 0.5;

/// Fundus image raster with 1 or 3 channels, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyRaster);
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidRaster(format!(
                "images must have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidRaster(format!(
                "expected {} values for {width}x{height}x{channels}, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidRaster(format!(
                "image value {v} outside [0, 1]"
            )));
        }
        Ok(RasterImage {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Returns a 3-channel copy; grayscale images are replicated.
    pub fn to_rgb(&self) -> RasterImage {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        RasterImage {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }

    /// Copies out an arbitrary sub-rectangle. Caller guarantees bounds.
    pub(crate) fn region(&self, x0: usize, y0: usize, w: usize, h: usize) -> RasterImage {
        let c = self.channels;
        let mut data = Vec::with_capacity(w * h * c);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * c;
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        RasterImage {
            width: w,
            height: h,
            channels: c,
            data,
        }
    }
}

/// Binary vessel annotation. `1` marks a vessel pixel.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyRaster);
        }
        if data.len() != width * height {
            return Err(Error::InvalidRaster(format!(
                "expected {} label values for {width}x{height}, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidRaster(format!("label value {v} is not 0 or 1")));
        }
        Ok(LabelMap {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        LabelMap {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        LabelMap {
            width,
            height,
            data: vec![1; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y) as u8);
            }
        }
        LabelMap {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn count_foreground(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn complement(&self) -> LabelMap {
        LabelMap {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    /// Pixel-wise inclusion `self ⊆ other`. Maps of different sizes are never subsets.
    pub fn is_subset_of(&self, other: &LabelMap) -> bool {
        self.same_dims(other) && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    pub fn same_dims(&self, other: &LabelMap) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub(crate) fn region(&self, x0: usize, y0: usize, w: usize, h: usize) -> LabelMap {
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            let start = y * self.width + x0;
            data.extend_from_slice(&self.data[start..start + w]);
        }
        LabelMap {
            width: w,
            height: h,
            data,
        }
    }

    /// Writes `patch` back with its top-left corner at `(x0, y0)`.
    pub(crate) fn paste(&mut self, x0: usize, y0: usize, patch: &LabelMap) {
        for y in 0..patch.height {
            let dst = (y0 + y) * self.width + x0;
            self.data[dst..dst + patch.width]
                .copy_from_slice(&patch.data[y * patch.width..(y + 1) * patch.width]);
        }
    }

    pub fn to_prob(&self) -> ProbMap {
        ProbMap {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Per-pixel vessel probability in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ProbMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyRaster);
        }
        if data.len() != width * height {
            return Err(Error::InvalidRaster(format!(
                "expected {} probabilities for {width}x{height}, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidRaster(format!("probability {v} outside [0, 1]")));
        }
        Ok(ProbMap {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        ProbMap {
            width,
            height,
            data: vec![value.clamp(0.0, 1.0); width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub(crate) fn region(&self, x0: usize, y0: usize, w: usize, h: usize) -> ProbMap {
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            let start = y * self.width + x0;
            data.extend_from_slice(&self.data[start..start + w]);
        }
        ProbMap {
            width: w,
            height: h,
            data,
        }
    }

    /// Binarizes at `p >= 0.5`.
    pub fn to_label_half(&self) -> LabelMap {
        LabelMap {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&p| (p >= 0.5) as u8).collect(),
        }
    }

    /// Rounds to the 8-bit grid used on disk.
    pub fn quantized(&self) -> ProbMap {
        ProbMap {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|&p| quantize_unit(p) as f32 / 255.0)
                .collect(),
        }
    }
}

/// Square crop window. `x0, y0` is the top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchRect {
    pub x0: usize,
    pub y0: usize,
    pub side: usize,
}

impl PatchRect {
    pub fn new(x0: usize, y0: usize, side: usize) -> Self {
        PatchRect { x0, y0, side }
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.side > 0 && self.x0 + self.side <= width && self.y0 + self.side <= height
    }
}

/// Rasters that can be cut to a [`PatchRect`].
pub trait Crop: Sized {
    fn crop(&self, rect: PatchRect) -> Result<Self>;
}

fn check_rect(rect: PatchRect, width: usize, height: usize) -> Result<()> {
    if rect.fits(width, height) {
        Ok(())
    } else {
        Err(Error::OutOfBounds {
            rect,
            width,
            height,
        })
    }
}

impl Crop for RasterImage {
    fn crop(&self, rect: PatchRect) -> Result<Self> {
        check_rect(rect, self.width, self.height)?;
        Ok(self.region(rect.x0, rect.y0, rect.side, rect.side))
    }
}

impl Crop for LabelMap {
    fn crop(&self, rect: PatchRect) -> Result<Self> {
        check_rect(rect, self.width, self.height)?;
        Ok(self.region(rect.x0, rect.y0, rect.side, rect.side))
    }
}

impl Crop for ProbMap {
    fn crop(&self, rect: PatchRect) -> Result<Self> {
        check_rect(rect, self.width, self.height)?;
        Ok(self.region(rect.x0, rect.y0, rect.side, rect.side))
    }
}

pub fn crop<R: Crop>(src: &R, rect: PatchRect) -> Result<R> {
    src.crop(rect)
}

/// Fraction of pixels labelled as vessel.
pub fn vessel_ratio(label: &LabelMap) -> f64 {
    label.count_foreground() as f64 / (label.width * label.height) as f64
}

/// Intersection over union. Two empty maps agree perfectly (1.0).
pub fn iou(a: &LabelMap, b: &LabelMap) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::DimensionMismatch(format!(
            "iou of {}x{} and {}x{} maps",
            a.width, a.height, b.width, b.height
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &q) in a.data.iter().zip(&b.data) {
        inter += (p & q) as usize;
        union += (p | q) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RasterKind {
    Image,
    Label,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Raster {
    Image(RasterImage),
    Label(LabelMap),
}

/// 8-bit pixels as stored on disk.
struct Decoded {
    width: usize,
    height: usize,
    channels: usize,
    bytes: Vec<u8>,
}

fn decode(path: &Path) -> Result<Decoded> {
    let mut head = [0u8; 8];
    let n = File::open(path)
        .and_then(|mut f| f.read(&mut head))
        .map_err(|e| Error::io(path, e))?;
    let head = &head[..n];
    let is_png = head.starts_with(b"\x89PNG");
    let is_binary_pnm = head.starts_with(b"P5") || head.starts_with(b"P6");
    if !is_png && !is_binary_pnm {
        return Err(Error::UnsupportedFormat {
            path: path.into(),
            detail: "expected PNG or binary PGM/PPM (P5/P6)".into(),
        });
    }
    let format = if is_png { ImageFormat::Png } else { ImageFormat::Pnm };
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = reader;
    reader.set_format(format);
    let img = reader.decode().map_err(|e| Error::Decode {
        path: path.into(),
        message: e.to_string(),
    })?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    if width == 0 || height == 0 {
        return Err(Error::EmptyRaster);
    }
    let (channels, bytes) = match img {
        DynamicImage::ImageLuma8(buf) => (1, buf.into_raw()),
        DynamicImage::ImageRgb8(buf) => (3, buf.into_raw()),
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.into(),
                detail: format!("pixel layout {:?}; need 8-bit gray or RGB", other.color()),
            })
        }
    };
    Ok(Decoded {
        width,
        height,
        channels,
        bytes,
    })
}

pub fn load_image(path: impl AsRef<Path>) -> Result<RasterImage> {
    let d = decode(path.as_ref())?;
    let data = d.bytes.iter().map(|&b| b as f32 / 255.0).collect();
    RasterImage::new(d.width, d.height, d.channels, data)
}

/// Loads a label map; a pixel is vessel iff its brightest channel is at least
/// `threshold` of full scale.
pub fn load_label(path: impl AsRef<Path>, threshold: f32) -> Result<LabelMap> {
    let d = decode(path.as_ref())?;
    let data = d
        .bytes
        .chunks_exact(d.channels)
        .map(|px| {
            let v = *px.iter().max().expect("nonempty pixel") as f32 / 255.0;
            (v >= threshold) as u8
        })
        .collect();
    LabelMap::new(d.width, d.height, data)
}

pub fn load_raster(path: impl AsRef<Path>, kind: RasterKind, threshold: f32) -> Result<Raster> {
    match kind {
        RasterKind::Image => load_image(path).map(Raster::Image),
        RasterKind::Label => load_label(path, threshold).map(Raster::Label),
    }
}

fn quantize_unit(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(path: &Path, width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<()> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let color = if channels == 1 {
        ExtendedColorType::L8
    } else {
        ExtendedColorType::Rgb8
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let writer = BufWriter::new(file);
    let encoded = match ext.as_str() {
        "png" => PngEncoder::new(writer).write_image(bytes, width as u32, height as u32, color),
        "pgm" | "ppm" | "pnm" => {
            let subtype = if channels == 1 {
                PnmSubtype::Graymap(SampleEncoding::Binary)
            } else {
                PnmSubtype::Pixmap(SampleEncoding::Binary)
            };
            PnmEncoder::new(writer).with_subtype(subtype).write_image(
                bytes,
                width as u32,
                height as u32,
                color,
            )
        }
        _ => {
            return Err(Error::UnsupportedFormat {
                path: path.into(),
                detail: "output extension must be .png, .pgm, .ppm or .pnm".into(),
            })
        }
    };
    encoded.map_err(|e| Error::Decode {
        path: path.into(),
        message: e.to_string(),
    })
}

pub fn save_image(path: impl AsRef<Path>, img: &RasterImage) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize_unit(v)).collect();
    encode(path.as_ref(), img.width, img.height, img.channels, &bytes)
}

/// Writes an 8-bit grayscale file with values {0, 255}.
pub fn save_label(path: impl AsRef<Path>, label: &LabelMap) -> Result<()> {
    let bytes: Vec<u8> = label.data.iter().map(|&v| v * 255).collect();
    encode(path.as_ref(), label.width, label.height, 1, &bytes)
}

/// Writes an 8-bit grayscale file quantized as `round(255 p)`.
pub fn save_prob(path: impl AsRef<Path>, prob: &ProbMap) -> Result<()> {
    let bytes: Vec<u8> = prob.data.iter().map(|&v| quantize_unit(v)).collect();
    encode(path.as_ref(), prob.width, prob.height, 1, &bytes)
}

/// Reads an 8-bit grayscale probability map written by [`save_prob`].
pub fn load_prob(path: impl AsRef<Path>) -> Result<ProbMap> {
    let img = load_image(path)?;
    if img.channels != 1 {
        return Err(Error::InvalidRaster(
            "probability maps must be single-channel".into(),
        ));
    }
    ProbMap::new(img.width, img.height, img.data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray_png(dir: &Path, name: &str, w: u32, h: u32, px: impl Fn(u32, u32) -> u8) -> std::path::PathBuf {
        let path = dir.join(name);
        let buf = image::GrayImage::from_fn(w, h, |x, y| image::Luma([px(x, y)]));
        buf.save(&path).unwrap();
        path
    }

    #[test]
    fn saturated_label_loads_as_all_ones() {
        let dir = tempfile::tempdir().unwrap();
        let p = gray_png(dir.path(), "a.png", 5, 4, |_, _| 255);
        let l = load_label(&p, 0.5).unwrap();
        assert_eq!(l, LabelMap::ones(5, 4));
    }

    #[test]
    fn checkerboard_label_round_trips_levels() {
        let dir = tempfile::tempdir().unwrap();
        let p = gray_png(dir.path(), "c.png", 6, 6, |x, y| if (x + y) % 2 == 0 { 255 } else { 0 });
        let l = load_label(&p, 0.5).unwrap();
        assert_eq!(l, LabelMap::from_fn(6, 6, |x, y| (x + y) % 2 == 0));
    }

    #[test]
    fn mid_gray_127_is_background_at_half_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let p = gray_png(dir.path(), "m.png", 3, 3, |_, _| 127);
        assert_eq!(load_label(&p, 0.5).unwrap(), LabelMap::zeros(3, 3));
    }

    #[test]
    fn unsupported_and_missing_files_error() {
        let dir = tempfile::tempdir().unwrap();
        let bogus = dir.path().join("x.png");
        std::fs::write(&bogus, b"GIF89a....").unwrap();
        assert!(matches!(load_image(&bogus), Err(Error::UnsupportedFormat { .. })));
        let ascii = dir.path().join("x.pgm");
        std::fs::write(&ascii, b"P2\n1 1\n255\n0\n").unwrap();
        assert!(matches!(load_image(&ascii), Err(Error::UnsupportedFormat { .. })));
        assert!(matches!(load_image(dir.path().join("none.png")), Err(Error::Io { .. })));
    }

    #[test]
    fn pnm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..4 * 3 * 3).map(|i| (i * 7 % 256) as f32 / 255.0).collect();
        let img = RasterImage::new(4, 3, 3, data).unwrap();
        let p = dir.path().join("i.ppm");
        save_image(&p, &img).unwrap();
        assert!(std::fs::read(&p).unwrap().starts_with(b"P6"));
        assert_eq!(load_image(&p).unwrap(), img);

        let lab = LabelMap::from_fn(5, 2, |x, y| x > y);
        let q = dir.path().join("l.pgm");
        save_label(&q, &lab).unwrap();
        assert!(std::fs::read(&q).unwrap().starts_with(b"P5"));
        assert_eq!(load_label(&q, 0.5).unwrap(), lab);
    }

    #[test]
    fn crop_identity_center_and_bounds() {
        let l = LabelMap::from_fn(4, 4, |x, y| (x * 3 + y) % 2 == 0);
        assert_eq!(crop(&l, PatchRect::new(0, 0, 4)).unwrap(), l);
        let c = crop(&l, PatchRect::new(1, 1, 2)).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(c.get(j, i), l.get(1 + j, 1 + i));
            }
        }
        assert!(matches!(
            crop(&l, PatchRect::new(3, 0, 2)),
            Err(Error::OutOfBounds { .. })
        ));
    }

    #[test]
    fn vessel_ratio_cases() {
        assert_eq!(vessel_ratio(&LabelMap::ones(3, 3)), 1.0);
        assert_eq!(vessel_ratio(&LabelMap::zeros(3, 3)), 0.0);
        let mut n = 0;
        let l = LabelMap::from_fn(256, 256, |_, _| {
            n += 1;
            n <= 3277
        });
        let r = vessel_ratio(&l);
        assert_eq!(r, 3277.0 / 65536.0);
        assert!(r > 0.05);
    }

    #[test]
    fn iou_cases() {
        let a = LabelMap::from_fn(4, 1, |x, _| x < 3);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let b = LabelMap::from_fn(4, 1, |x, _| x == 3);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        // |a| = 3, |c| = 2, overlap 1
        let c = LabelMap::from_fn(4, 1, |x, _| x == 2 || x == 3);
        assert_eq!(iou(&a, &c).unwrap(), 0.25);
        assert_eq!(iou(&LabelMap::zeros(2, 2), &LabelMap::zeros(2, 2)).unwrap(), 1.0);
        assert!(iou(&a, &LabelMap::zeros(2, 2)).is_err());
    }

    #[test]
    fn constructors_validate() {
        assert!(matches!(LabelMap::new(0, 3, vec![]), Err(Error::EmptyRaster)));
        assert!(LabelMap::new(2, 1, vec![0, 2]).is_err());
        assert!(RasterImage::new(1, 1, 2, vec![0.0, 0.0]).is_err());
        assert!(RasterImage::new(1, 1, 1, vec![1.5]).is_err());
        assert!(ProbMap::new(1, 1, vec![-0.1]).is_err());
    }

    fn label_strategy() -> impl Strategy<Value = LabelMap> {
        (1usize..12, 1usize..12).prop_flat_map(|(w, h)| {
            proptest::collection::vec(0u8..2, w * h)
                .prop_map(move |d| LabelMap::new(w, h, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn crop_composition(w in 4usize..20, h in 4usize..20, a in 0usize..100, b in 0usize..100, c in 0usize..100, d in 0usize..100) {
            let src = LabelMap::from_fn(w, h, |x, y| (x * 31 + y * 17) % 5 < 2);
            let side = 1 + a % w.min(h);
            let outer = PatchRect::new(b % (w - side + 1), c % (h - side + 1), side);
            let inner_side = 1 + d % side;
            let inner = PatchRect::new(a % (side - inner_side + 1), b % (side - inner_side + 1), inner_side);
            let twice = crop(&crop(&src, outer).unwrap(), inner).unwrap();
            let once = crop(&src, PatchRect::new(outer.x0 + inner.x0, outer.y0 + inner.y0, inner_side)).unwrap();
            prop_assert_eq!(twice, once);
        }

        #[test]
        fn iou_symmetric_and_reflexive(a in label_strategy(), seed in any::<u64>()) {
            let mut s = seed;
            let b = LabelMap::from_fn(a.width(), a.height(), |_, _| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                s >> 63 == 1
            });
            prop_assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
            if a.count_foreground() > 0 {
                prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
            }
            let r = vessel_ratio(&a) + vessel_ratio(&a.complement());
            prop_assert!((r - 1.0).abs() < 1e-12);
        }

        #[test]
        fn png_round_trip(a in label_strategy(), vals in proptest::collection::vec(0u8..=255, 3 * 144)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("l.png");
            save_label(&p, &a).unwrap();
            let back = load_label(&p, DEFAULT_LABEL_THRESHOLD).unwrap();
            prop_assert_eq!(&back, &a);
            let n = a.width() * a.height() * 3;
            let img = RasterImage::new(a.width(), a.height(), 3, vals[..n].iter().map(|&v| v as f32 / 255.0).collect()).unwrap();
            let q = dir.path().join("i.png");
            save_image(&q, &img).unwrap();
            let once = load_image(&q).unwrap();
            prop_assert_eq!(&once, &img);
            save_image(&q, &once).unwrap();
            prop_assert_eq!(load_image(&q).unwrap(), once);
        }
    }
}
