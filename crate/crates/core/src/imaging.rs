//! Binary PPM/PGM image IO and mask preprocessing: hard background
//! masking, and fusion of a binary mask with RGB into a 4-channel input.

use std::path::Path;

use crate::{Error, Result};

/// 8-bit image, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ImageFormat(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::ImageFormat(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::ImageFormat(format!(
                "pixel buffer has {} bytes, expected {}",
                pixels.len(),
                width * height * channels
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self::new(width, height, 3, pixels)
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

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let at = (y * self.width + x) * self.channels;
        &self.pixels[at..at + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [u8] {
        let at = (y * self.width + x) * self.channels;
        &mut self.pixels[at..at + self.channels]
    }
}

/// Strictly binary per-pixel mask; 1 marks the body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    values: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, values: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(Error::ImageFormat(format!(
                "mask buffer of {} values does not fit {width}x{height}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::ImageFormat(format!("mask value {v} is not binary")));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Result<Self> {
        Self::new(width, height, vec![u8::from(value); width * height])
    }

    /// Binarize a single-channel image: samples >= 128 are foreground.
    pub fn from_gray(img: &Image) -> Result<Self> {
        if img.channels != 1 {
            return Err(Error::ImageFormat(format!(
                "mask must be single-channel, got {} channels",
                img.channels
            )));
        }
        let values = img.pixels.iter().map(|&p| u8::from(p >= 128)).collect();
        Self::new(img.width, img.height, values)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.values[y * self.width + x] == 1
    }

    /// Body-shape image: foreground white, background black, three channels.
    pub fn to_rgb(&self) -> Image {
        let pixels = self
            .values
            .iter()
            .flat_map(|&v| [v * 255; 3])
            .collect();
        Image::new(self.width, self.height, 3, pixels).expect("mask dims are valid")
    }

    pub fn to_gray(&self) -> Image {
        let pixels = self.values.iter().map(|&v| v * 255).collect();
        Image::new(self.width, self.height, 1, pixels).expect("mask dims are valid")
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::ImageFormat(format!("missing {what} in header")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|e| Error::ImageFormat(format!("{what}: {e}")))
    }
}

/// Decode binary PPM (`P6`) or PGM (`P5`) with maxval 255.
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        Some(m) => {
            return Err(Error::ImageFormat(format!(
                "unsupported format {:?}; only binary P5/P6 are read",
                String::from_utf8_lossy(m)
            )))
        }
        None => return Err(Error::ImageFormat("empty input".into())),
    };
    let mut r = HeaderReader { bytes, pos: 2 };
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval = r.number("maxval")?;
    if maxval != 255 {
        return Err(Error::ImageFormat(format!(
            "maxval {maxval} unsupported, expected 255"
        )));
    }
    match bytes.get(r.pos) {
        Some(b) if b.is_ascii_whitespace() => r.pos += 1,
        _ => return Err(Error::ImageFormat("missing whitespace after maxval".into())),
    }
    let expected = width * height * channels;
    let data = &bytes[r.pos..];
    if data.len() < expected {
        return Err(Error::Truncated {
            expected: r.pos + expected,
            actual: bytes.len(),
        });
    }
    Image::new(width, height, channels, data[..expected].to_vec())
}

pub fn encode_image(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

pub fn write_image(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_image(img)).map_err(|e| Error::io(path, e))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    Mask::from_gray(&read_image(path)?)
}

fn nearest(target: usize, src: usize, dst: usize) -> usize {
    target * src / dst
}

fn check_target(w: usize, h: usize) -> Result<()> {
    if w == 0 || h == 0 {
        return Err(Error::invalid(format!("resize target {w}x{h} must be positive")));
    }
    Ok(())
}

/// Nearest-neighbour resampling: source index = floor(target * src / dst).
pub fn resize_nearest(img: &Image, w: usize, h: usize) -> Result<Image> {
    check_target(w, h)?;
    let c = img.channels;
    let mut pixels = Vec::with_capacity(w * h * c);
    for y in 0..h {
        let sy = nearest(y, img.height, h);
        for x in 0..w {
            let sx = nearest(x, img.width, w);
            pixels.extend_from_slice(img.pixel(sx, sy));
        }
    }
    Image::new(w, h, c, pixels)
}

pub fn resize_mask_nearest(mask: &Mask, w: usize, h: usize) -> Result<Mask> {
    check_target(w, h)?;
    let mut values = Vec::with_capacity(w * h);
    for y in 0..h {
        let sy = nearest(y, mask.height, h);
        for x in 0..w {
            values.push(mask.values[sy * mask.width + nearest(x, mask.width, w)]);
        }
    }
    Mask::new(w, h, values)
}

fn check_same_size(img: &Image, m: &Mask) -> Result<()> {
    if (img.width, img.height) != (m.width, m.height) {
        return Err(Error::shape(format!(
            "image is {}x{}, mask is {}x{}",
            img.width, img.height, m.width, m.height
        )));
    }
    Ok(())
}

/// Zero every channel of background pixels.
pub fn apply_mask(img: &Image, m: &Mask) -> Result<Image> {
    check_same_size(img, m)?;
    let c = img.channels;
    let pixels = img
        .pixels
        .chunks_exact(c)
        .zip(&m.values)
        .flat_map(|(px, &keep)| px.iter().map(move |&v| v * keep))
        .collect();
    Image::new(img.width, img.height, c, pixels)
}

/// RGB scaled to [0, 1] plus the mask as a fourth channel, laid out
/// height × width × 4.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedTensor {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FusedTensor {
    pub fn at(&self, x: usize, y: usize) -> [f32; 4] {
        let at = (y * self.width + x) * 4;
        self.data[at..at + 4].try_into().unwrap()
    }

    /// Recover the RGB image (×255, rounded) and the mask.
    pub fn split(&self) -> Result<(Image, Mask)> {
        let mut pixels = Vec::with_capacity(self.width * self.height * 3);
        let mut values = Vec::with_capacity(self.width * self.height);
        for px in self.data.chunks_exact(4) {
            pixels.extend(px[..3].iter().map(|v| (v * 255.0).round() as u8));
            values.push(u8::from(px[3] >= 0.5));
        }
        Ok((
            Image::new(self.width, self.height, 3, pixels)?,
            Mask::new(self.width, self.height, values)?,
        ))
    }
}

pub fn fuse_mask_channel(img: &Image, m: &Mask) -> Result<FusedTensor> {
    check_same_size(img, m)?;
    if img.channels != 3 {
        return Err(Error::shape(format!(
            "mask fusion needs an RGB image, got {} channels",
            img.channels
        )));
    }
    let data = img
        .pixels
        .chunks_exact(3)
        .zip(&m.values)
        .flat_map(|(px, &mv)| {
            [
                f32::from(px[0]) / 255.0,
                f32::from(px[1]) / 255.0,
                f32::from(px[2]) / 255.0,
                f32::from(mv),
            ]
        })
        .collect();
    Ok(FusedTensor {
        height: img.height,
        width: img.width,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rgb(w: usize, h: usize, seed: u8) -> Image {
        let pixels = (0..w * h * 3).map(|i| (i as u8).wrapping_mul(37).wrapping_add(seed)).collect();
        Image::new(w, h, 3, pixels).unwrap()
    }

    #[test]
    fn decodes_p6() {
        let mut bytes = b"P6 2 1 255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = decode_image(&bytes).unwrap();
        assert_eq!((img.width(), img.height(), img.channels()), (2, 1, 3));
        assert_eq!(img.pixel(1, 0), &[4, 5, 6]);
    }

    #[test]
    fn decodes_p5_into_mask() {
        let mut bytes = b"P5\n# a comment\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 255, 0]);
        let mask = Mask::from_gray(&decode_image(&bytes).unwrap()).unwrap();
        assert_eq!(mask.values(), &[0, 1, 1, 0]);
    }

    #[test]
    fn mask_threshold_is_128() {
        let img = Image::new(3, 1, 1, vec![127, 128, 200]).unwrap();
        assert_eq!(Mask::from_gray(&img).unwrap().values(), &[0, 1, 1]);
    }

    #[test]
    fn rejects_ascii_and_bad_maxval_and_truncation() {
        assert!(decode_image(b"P3 1 1 255\n0 0 0").is_err());
        assert!(decode_image(b"P5 1 1 15\n\x00").is_err());
        assert!(matches!(
            decode_image(b"P6 2 1 255\n\x00\x00\x00"),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn encode_decode_round_trip() {
        let img = rgb(5, 3, 9);
        assert_eq!(decode_image(&encode_image(&img)).unwrap(), img);
    }

    #[test]
    fn resize_cases() {
        let img = rgb(2, 2, 1);
        assert_eq!(resize_nearest(&img, 2, 2).unwrap(), img);

        let one = Image::new(1, 1, 1, vec![42]).unwrap();
        assert_eq!(resize_nearest(&one, 3, 3).unwrap().pixels(), &[42; 9]);

        // floor(x * 4 / 2) picks source columns 0 and 2.
        let row = Image::new(4, 1, 1, vec![10, 20, 30, 40]).unwrap();
        assert_eq!(resize_nearest(&row, 2, 1).unwrap().pixels(), &[10, 30]);

        assert!(resize_nearest(&row, 0, 1).is_err());
    }

    #[test]
    fn mask_extremes() {
        let img = rgb(4, 3, 5);
        let ones = Mask::filled(4, 3, true).unwrap();
        let zeros = Mask::filled(4, 3, false).unwrap();
        assert_eq!(apply_mask(&img, &ones).unwrap(), img);
        assert!(apply_mask(&img, &zeros).unwrap().pixels().iter().all(|&p| p == 0));
        assert!(apply_mask(&img, &Mask::filled(3, 3, true).unwrap()).is_err());
    }

    #[test]
    fn fuse_red_pixel() {
        let img = Image::new(1, 1, 3, vec![255, 0, 0]).unwrap();
        let t = fuse_mask_channel(&img, &Mask::filled(1, 1, true).unwrap()).unwrap();
        assert_eq!(t.at(0, 0), [1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn fuse_zero_mask_keeps_rgb() {
        let img = rgb(3, 2, 77);
        let t = fuse_mask_channel(&img, &Mask::filled(3, 2, false).unwrap()).unwrap();
        for px in t.data.chunks_exact(4) {
            assert_eq!(px[3], 0.0);
        }
        assert_eq!(t.split().unwrap().0, img);
    }

    #[test]
    fn fuse_rejects_gray() {
        let img = Image::new(1, 1, 1, vec![3]).unwrap();
        assert!(fuse_mask_channel(&img, &Mask::filled(1, 1, true).unwrap()).is_err());
    }

    fn arb_pair() -> impl Strategy<Value = (Image, Mask)> {
        (1usize..9, 1usize..9).prop_flat_map(|(w, h)| {
            (
                proptest::collection::vec(any::<u8>(), w * h * 3),
                proptest::collection::vec(0u8..2, w * h),
            )
                .prop_map(move |(p, m)| {
                    (Image::new(w, h, 3, p).unwrap(), Mask::new(w, h, m).unwrap())
                })
        })
    }

    proptest! {
        #[test]
        fn apply_mask_is_idempotent((img, m) in arb_pair()) {
            let once = apply_mask(&img, &m).unwrap();
            prop_assert_eq!(apply_mask(&once, &m).unwrap(), once);
        }

        #[test]
        fn apply_mask_commutes_with_resize((img, m) in arb_pair(), w in 1usize..12, h in 1usize..12) {
            let a = resize_nearest(&apply_mask(&img, &m).unwrap(), w, h).unwrap();
            let b = apply_mask(&resize_nearest(&img, w, h).unwrap(), &resize_mask_nearest(&m, w, h).unwrap()).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn fusion_is_invertible((img, m) in arb_pair()) {
            let t = fuse_mask_channel(&img, &m).unwrap();
            prop_assert_eq!((t.width, t.height), (img.width(), img.height()));
            let (back, mask) = t.split().unwrap();
            prop_assert_eq!(back, img);
            prop_assert_eq!(mask, m);
        }
    }
}
