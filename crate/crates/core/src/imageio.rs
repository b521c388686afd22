//! Image decoding/encoding (PNG, binary PPM), tensor conversion and the
//! crop/flip/rotate augmentation used during training.

use std::io::{BufRead, Cursor, Seek};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_SIDE: usize = 8;

const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";

/// An RGB image with channel values in `[0, 1]`, stored row-major as
/// `H×W×3`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width < MIN_SIDE || height < MIN_SIDE {
            return Err(Error::dim(format!(
                "image {width}×{height} is below the {MIN_SIDE}×{MIN_SIDE} minimum"
            )));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::dim(format!(
                "{width}×{height} RGB image needs {} values, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract(format!(
                "pixel value {} at index {i} outside [0, 1]",
                pixels[i]
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend(f(x, y).iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    /// Crop a `w×h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::dim(format!(
                "crop {w}×{h}+{x0}+{y0} exceeds {}×{}",
                self.width, self.height
            )));
        }
        Self::from_fn(w, h, |x, y| self.pixel(x0 + x, y0 + y))
    }

    pub fn flip_horizontal(&self) -> Self {
        let w = self.width;
        Self::from_fn(w, self.height, |x, y| self.pixel(w - 1 - x, y)).expect("same extents")
    }

    /// Rotate by `quarter_turns × 90°` counter-clockwise.
    pub fn rotate90(&self, quarter_turns: u32) -> Self {
        let (w, h) = (self.width, self.height);
        match quarter_turns % 4 {
            0 => Ok(self.clone()),
            1 => Self::from_fn(h, w, |x, y| self.pixel(w - 1 - y, x)),
            2 => Self::from_fn(w, h, |x, y| self.pixel(w - 1 - x, h - 1 - y)),
            _ => Self::from_fn(h, w, |x, y| self.pixel(y, h - 1 - x)),
        }
        .expect("rotation preserves validity")
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Load a PNG (8-bit RGB/RGBA, also gray) or binary PPM (P6) file.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

/// Decode an in-memory PNG or PPM byte stream.
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    if bytes.is_empty() {
        return Err(Error::Decode {
            offset: 0,
            message: "empty input".into(),
        });
    }
    if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else {
        Err(Error::UnsupportedFormat(describe_magic(bytes)))
    }
}

fn describe_magic(bytes: &[u8]) -> String {
    if bytes.starts_with(b"GIF8") {
        "GIF".into()
    } else if bytes.starts_with(&[0xff, 0xd8, 0xff]) {
        "JPEG".into()
    } else {
        let head: Vec<String> = bytes.iter().take(4).map(|b| format!("{b:02x}")).collect();
        format!("unrecognized magic bytes {}", head.join(" "))
    }
}

fn decode_png(bytes: &[u8]) -> Result<Image> {
    let mut cursor = Cursor::new(bytes);
    let (w, h, rgb) = read_png(&mut cursor).map_err(|message| Error::Decode {
        offset: cursor.position(),
        message,
    })?;
    Image::from_rgb8(w, h, &rgb)
}

type RawRgb = (usize, usize, Vec<u8>);

fn read_png<R: BufRead + Seek>(reader: R) -> std::result::Result<RawRgb, String> {
    let mut decoder = png::Decoder::new(reader);
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| "image too large".to_string())?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    let (w, h) = (info.width as usize, info.height as usize);
    let data = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => data.to_vec(),
        png::ColorType::Rgba => data.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => data.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => data.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => return Err("indexed color not expanded".into()),
    };
    Ok((w, h, rgb))
}

fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Decode {
                offset: pos as u64,
                message: "expected a decimal header field".into(),
            });
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Decode {
                offset: start as u64,
                message: "header field out of range".into(),
            })?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!("PPM maxval {maxval}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Decode {
            offset: pos as u64,
            message: "missing whitespace after header".into(),
        });
    }
    pos += 1;
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(Error::Decode {
            offset: bytes.len() as u64,
            message: format!(
                "truncated pixel data: expected {need} bytes from offset {pos}, found {}",
                bytes.len() - pos
            ),
        });
    }
    Image::from_rgb8(w, h, &bytes[pos..pos + need])
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Numerical(format!("png header: {e}")))?;
        writer
            .write_image_data(&img.to_rgb8())
            .map_err(|e| Error::Numerical(format!("png data: {e}")))?;
    }
    Ok(out)
}

/// `P6\n{w} {h}\n255\n` followed by RGB triples.
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_rgb8());
    out
}

/// Save as PPM when the extension is `.ppm`, PNG otherwise.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let is_ppm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    let bytes = if is_ppm { encode_ppm(img) } else { encode_png(img)? };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Channel-major `3×H×W` tensor.
pub fn to_tensor(img: &Image) -> Tensor {
    let (w, h) = (img.width, img.height);
    let mut data = vec![0.0; 3 * w * h];
    for (i, px) in img.pixels.chunks(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = px[c] as f64;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("consistent extents")
}

/// Inverse of [`to_tensor`]; out-of-range values are clamped to `[0, 1]`.
pub fn from_tensor(t: &Tensor) -> Result<Image> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::dim(format!("expected 3 channels, got {c}")));
    }
    let d = t.data();
    let mut pixels = Vec::with_capacity(3 * w * h);
    for i in 0..w * h {
        for ch in 0..3 {
            let v = d[ch * w * h + i];
            pixels.push(if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) as f32 });
        }
    }
    Image::new(w, h, pixels)
}

/// Bilinear resampling with half-pixel centers.
pub fn resize_bilinear(img: &Image, width: usize, height: usize) -> Result<Image> {
    if width == img.width && height == img.height {
        return Ok(img.clone());
    }
    let sx = img.width as f64 / width as f64;
    let sy = img.height as f64 / height as f64;
    let sample = |coord: f64, limit: usize| {
        let c = coord.clamp(0.0, (limit - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(limit - 1);
        (lo, hi, c - lo as f64)
    };
    Image::from_fn(width, height, |x, y| {
        let (x0, x1, fx) = sample((x as f64 + 0.5) * sx - 0.5, img.width);
        let (y0, y1, fy) = sample((y as f64 + 0.5) * sy - 0.5, img.height);
        let (a, b, c, d) = (
            img.pixel(x0, y0),
            img.pixel(x1, y0),
            img.pixel(x0, y1),
            img.pixel(x1, y1),
        );
        let mut out = [0f32; 3];
        for ch in 0..3 {
            let top = a[ch] as f64 * (1.0 - fx) + b[ch] as f64 * fx;
            let bottom = c[ch] as f64 * (1.0 - fx) + d[ch] as f64 * fx;
            out[ch] = (top * (1.0 - fy) + bottom * fy) as f32;
        }
        out
    })
}

/// Scale so the short side equals `short`, keeping the aspect ratio.
pub fn resize_short_side(img: &Image, short: usize) -> Result<Image> {
    let (w, h) = (img.width, img.height);
    let (nw, nh) = if w <= h {
        (short, ((h * short) as f64 / w as f64).round() as usize)
    } else {
        (((w * short) as f64 / h as f64).round() as usize, short)
    };
    resize_bilinear(img, nw.max(short), nh.max(short))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentationConfig {
    pub crop_size: usize,
    pub flip: bool,
    pub rotate: bool,
    pub seed: u64,
}

/// Random square crop with optional horizontal flip and rotation by a
/// multiple of 90°. Sources smaller than the crop are first upscaled so
/// their short side matches it.
pub fn random_crop_augment(img: &Image, cfg: &AugmentationConfig) -> Result<Image> {
    if cfg.crop_size < MIN_SIDE {
        return Err(Error::InvalidArgument(format!(
            "crop size {} below minimum {MIN_SIDE}",
            cfg.crop_size
        )));
    }
    let resized;
    let src = if img.width.min(img.height) < cfg.crop_size {
        resized = resize_short_side(img, cfg.crop_size)?;
        &resized
    } else {
        img
    };
    if src.width.min(src.height) < cfg.crop_size {
        return Err(Error::dim(format!(
            "image {}×{} smaller than crop {} after resize",
            src.width, src.height, cfg.crop_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x0 = rng.random_range(0..=src.width - cfg.crop_size);
    let y0 = rng.random_range(0..=src.height - cfg.crop_size);
    let flip = cfg.flip && rng.random_bool(0.5);
    let turns = if cfg.rotate { rng.random_range(0..4u32) } else { 0 };
    let mut out = src.crop(x0, y0, cfg.crop_size, cfg.crop_size)?;
    if flip {
        out = out.flip_horizontal();
    }
    Ok(out.rotate90(turns))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()]).unwrap()
    }

    #[test]
    fn black_png_loads_as_zeros() {
        let img = Image::new(8, 8, vec![0.0; 8 * 8 * 3]).unwrap();
        let bytes = encode_png(&img).unwrap();
        let back = decode_image(&bytes).unwrap();
        assert!(back.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tiny_png_decodes_but_violates_minimum_side() {
        // 2×2 black PNG built by hand with the png crate.
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 2, 2);
            enc.set_color(png::ColorType::Rgb);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[0u8; 12]).unwrap();
        }
        assert!(matches!(decode_image(&out), Err(Error::Dimension(_))));
    }

    #[test]
    fn png_and_ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = random_image(16, 16, 1);
        for name in ["a.png", "a.ppm"] {
            let p = dir.path().join(name);
            save_image(&img, &p).unwrap();
            let back = load_image(&p).unwrap();
            let max = img
                .pixels()
                .iter()
                .zip(back.pixels())
                .map(|(a, b)| (a - b).abs())
                .fold(0f32, f32::max);
            assert!(max <= 1.0 / 255.0, "{name}: {max}");
        }
    }

    #[test]
    fn ppm_header_is_exact() {
        let img = Image::new(8, 9, vec![1.0; 8 * 9 * 3]).unwrap();
        let bytes = encode_ppm(&img);
        assert!(bytes.starts_with(b"P6\n8 9\n255\n"));
        assert_eq!(bytes.len(), 11 + 8 * 9 * 3);
        assert!(bytes[11..].iter().all(|&b| b == 255));
    }

    #[test]
    fn empty_and_truncated_inputs() {
        assert!(matches!(decode_image(&[]), Err(Error::Decode { offset: 0, .. })));
        let img = random_image(8, 8, 2);
        let ppm = encode_ppm(&img);
        match decode_image(&ppm[..100]) {
            Err(Error::Decode { offset, .. }) => assert_eq!(offset, 100),
            other => panic!("{other:?}"),
        }
        let png = encode_png(&img).unwrap();
        match decode_image(&png[..png.len() / 2]) {
            Err(e @ Error::Decode { .. }) => assert!(e.to_string().contains("byte offset")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn gif_is_unsupported() {
        assert!(matches!(
            decode_image(b"GIF89a\x01\x00\x01\x00"),
            Err(Error::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn tensor_conversion_clamps() {
        let mut t = Tensor::filled(&[3, 8, 8], 0.5);
        t.data_mut()[0] = 1.5;
        t.data_mut()[1] = -0.2;
        let img = from_tensor(&t).unwrap();
        assert_eq!(img.pixel(0, 0)[0], 1.0);
        assert_eq!(img.pixel(1, 0)[0], 0.0);
        assert!(from_tensor(&Tensor::zeros(&[8, 8])).is_err());
        assert!(from_tensor(&Tensor::zeros(&[4, 8, 8])).is_err());
    }

    #[test]
    fn tensor_round_trip_is_channel_major() {
        let img = random_image(12, 8, 3);
        let t = to_tensor(&img);
        assert_eq!(t.shape(), &[3, 8, 12]);
        assert_eq!(t.data()[8 * 12 + 5] as f32, img.pixel(5, 0)[1]);
        assert_eq!(from_tensor(&t).unwrap(), img);
    }

    #[test]
    fn full_size_crop_without_augmentation_is_identity() {
        let img = random_image(16, 16, 4);
        let cfg = AugmentationConfig {
            crop_size: 16,
            flip: false,
            rotate: false,
            seed: 99,
        };
        assert_eq!(random_crop_augment(&img, &cfg).unwrap(), img);
    }

    #[test]
    fn augmentation_is_seed_deterministic() {
        let img = random_image(40, 30, 5);
        let cfg = AugmentationConfig {
            crop_size: 16,
            flip: true,
            rotate: true,
            seed: 1234,
        };
        assert_eq!(
            random_crop_augment(&img, &cfg).unwrap(),
            random_crop_augment(&img, &cfg).unwrap()
        );
    }

    #[test]
    fn crop_lies_in_dihedral_orbit_of_source() {
        let img = random_image(128, 96, 6);
        let cfg = AugmentationConfig {
            crop_size: 64,
            flip: true,
            rotate: true,
            seed: 7,
        };
        let out = random_crop_augment(&img, &cfg).unwrap();
        assert_eq!((out.width(), out.height()), (64, 64));
        // Undo every dihedral transform and search every offset.
        let mut found = false;
        for flip in [false, true] {
            for turns in 0..4 {
                let mut cand = out.rotate90((4 - turns) % 4);
                if flip {
                    cand = cand.flip_horizontal();
                }
                for y0 in 0..=96 - 64 {
                    for x0 in 0..=128 - 64 {
                        if img.crop(x0, y0, 64, 64).unwrap() == cand {
                            found = true;
                        }
                    }
                }
            }
        }
        assert!(found);
    }

    #[test]
    fn small_sources_are_upscaled_before_cropping() {
        let img = random_image(10, 20, 8);
        let cfg = AugmentationConfig {
            crop_size: 16,
            flip: false,
            rotate: false,
            seed: 0,
        };
        let out = random_crop_augment(&img, &cfg).unwrap();
        assert_eq!((out.width(), out.height()), (16, 16));
        let bad = AugmentationConfig { crop_size: 4, ..cfg };
        assert!(random_crop_augment(&img, &bad).is_err());
    }

    #[test]
    fn rotations_compose_to_identity() {
        let img = random_image(9, 12, 9);
        assert_eq!(img.rotate90(1).rotate90(3), img);
        assert_eq!(img.rotate90(2).rotate90(2), img);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
    }
}
