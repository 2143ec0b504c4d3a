//! Raster decoding and encoding, JPEG recompression and patch extraction.

use std::path::Path;

use image::codecs::jpeg::JpegEncoder;
use image::codecs::png::PngEncoder;
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat, ImageReader};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Decoded 8-bit raster with interleaved channels, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl PixelImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!(
                "only 1- or 3-channel images are supported, got {channels}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!("empty image {width}x{height}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidImage(format!(
                "data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// A constant-valued image.
    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
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

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> u8 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    /// Copies one channel out as a row-major plane.
    pub fn channel_plane(&self, channel: usize) -> Vec<u8> {
        assert!(channel < self.channels, "channel {channel} out of range");
        self.data
            .iter()
            .skip(channel)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    /// Copies the rectangle starting at `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<PixelImage> {
        if row + height > self.height || col + width > self.width || height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "crop {height}x{width} at ({row},{col}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let stride = self.width * self.channels;
        let mut data = Vec::with_capacity(width * height * self.channels);
        for r in row..row + height {
            let start = r * stride + col * self.channels;
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        PixelImage::new(width, height, self.channels, data)
    }

    fn color_type(&self) -> ExtendedColorType {
        if self.channels == 1 {
            ExtendedColorType::L8
        } else {
            ExtendedColorType::Rgb8
        }
    }
}

/// Sliding-window geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub size: usize,
    pub stride: usize,
}

impl PatchSpec {
    pub fn new(size: usize, stride: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidArgument(format!(
                "patch size must be at least 2, got {size}"
            )));
        }
        if stride < 1 {
            return Err(Error::InvalidArgument("patch stride must be at least 1".into()));
        }
        Ok(Self { size, stride })
    }

    /// Non-overlapping tiling with stride equal to size.
    pub fn tiled(size: usize) -> Result<Self> {
        Self::new(size, size)
    }
}

/// A patch cut from a larger image together with its top-left corner.
#[derive(Debug, Clone)]
pub struct Patch {
    pub image: PixelImage,
    pub origin: (usize, usize),
}

pub fn decode_image(path: impl AsRef<Path>) -> Result<PixelImage> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Jpeg) => {}
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                format: format!("{other:?} (only PNG and JPEG are accepted)"),
            })
        }
    }
    let decoded = reader.decode().map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    from_dynamic(decoded, path)
}

pub fn decode_bytes(bytes: &[u8]) -> Result<PixelImage> {
    let decoded = image::load_from_memory(bytes).map_err(|e| Error::Codec(e.to_string()))?;
    from_dynamic(decoded, Path::new("<memory>"))
}

fn from_dynamic(img: DynamicImage, path: &Path) -> Result<PixelImage> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(buf) => PixelImage::new(w, h, 1, buf.into_raw()),
        DynamicImage::ImageLumaA8(buf) => {
            let data = buf.into_raw().chunks_exact(2).map(|p| p[0]).collect();
            PixelImage::new(w, h, 1, data)
        }
        DynamicImage::ImageRgb8(buf) => PixelImage::new(w, h, 3, buf.into_raw()),
        DynamicImage::ImageRgba8(buf) => {
            let data = buf
                .into_raw()
                .chunks_exact(4)
                .flat_map(|p| [p[0], p[1], p[2]])
                .collect();
            PixelImage::new(w, h, 3, data)
        }
        other => Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            format: format!("{:?}", other.color()),
        }),
    }
}

pub fn encode_png(img: &PixelImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(
            img.data(),
            img.width() as u32,
            img.height() as u32,
            img.color_type(),
        )
        .map_err(|e| Error::Codec(e.to_string()))?;
    Ok(out)
}

pub fn encode_jpeg(img: &PixelImage, quality: u8) -> Result<Vec<u8>> {
    check_quality(quality)?;
    let mut out = Vec::new();
    JpegEncoder::new_with_quality(&mut out, quality)
        .encode(
            img.data(),
            img.width() as u32,
            img.height() as u32,
            img.color_type(),
        )
        .map_err(|e| Error::Codec(e.to_string()))?;
    Ok(out)
}

pub fn save_png(img: &PixelImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_png(img)?).map_err(|e| Error::io(path, e))
}

pub fn save_jpeg(img: &PixelImage, quality: u8, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_jpeg(img, quality)?).map_err(|e| Error::io(path, e))
}

fn check_quality(quality: u8) -> Result<()> {
    if !(1..=100).contains(&quality) {
        return Err(Error::InvalidArgument(format!(
            "JPEG quality must be in [1, 100], got {quality}"
        )));
    }
    Ok(())
}

/// One JPEG encode/decode cycle at `quality`; `None` passes the image through.
pub fn jpeg_recompress(img: &PixelImage, quality: Option<u8>) -> Result<PixelImage> {
    let Some(q) = quality else {
        return Ok(img.clone());
    };
    let bytes = encode_jpeg(img, q)?;
    let decoded = image::load_from_memory_with_format(&bytes, ImageFormat::Jpeg)
        .map_err(|e| Error::Codec(e.to_string()))?;
    // The decoder hands back the colour model it was given, so channel count survives.
    let out = from_dynamic(decoded, Path::new("<jpeg>"))?;
    debug_assert_eq!(
        (out.width(), out.height(), out.channels()),
        (img.width(), img.height(), img.channels())
    );
    Ok(out)
}

/// Offsets along one axis: stride steps, with a final window clamped flush to the border.
pub fn patch_offsets(extent: usize, size: usize, stride: usize) -> Vec<usize> {
    if extent <= size {
        return vec![0];
    }
    let last = extent - size;
    let mut offsets: Vec<usize> = (0..=last).step_by(stride).collect();
    if *offsets.last().expect("nonempty") != last {
        offsets.push(last);
    }
    offsets
}

/// Window rectangles `(row, col, height, width)` for an image of the given size.
///
/// If either dimension is smaller than the patch size the whole image is the single window.
pub fn patch_windows(
    height: usize,
    width: usize,
    spec: PatchSpec,
) -> Vec<(usize, usize, usize, usize)> {
    if height < spec.size || width < spec.size {
        return vec![(0, 0, height, width)];
    }
    let rows = patch_offsets(height, spec.size, spec.stride);
    let cols = patch_offsets(width, spec.size, spec.stride);
    rows.iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c, spec.size, spec.size)))
        .collect()
}

pub fn extract_patches(img: &PixelImage, spec: PatchSpec) -> Result<Vec<Patch>> {
    patch_windows(img.height(), img.width(), spec)
        .into_iter()
        .map(|(r, c, h, w)| {
            Ok(Patch {
                image: img.crop(r, c, h, w)?,
                origin: (r, c),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(w: usize, h: usize, c: usize, seed: u64) -> PixelImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h * c).map(|_| rng.gen()).collect();
        PixelImage::new(w, h, c, data).unwrap()
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(PixelImage::new(2, 2, 4, vec![0; 16]).is_err());
        assert!(PixelImage::new(2, 2, 3, vec![0; 11]).is_err());
        assert!(PixelImage::new(0, 2, 1, vec![]).is_err());
        assert!(PatchSpec::new(1, 1).is_err());
        assert!(PatchSpec::new(2, 0).is_err());
    }

    #[test]
    fn decodes_black_rgb_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("black.png");
        save_png(&PixelImage::filled(2, 2, 3, 0).unwrap(), &path).unwrap();
        let img = decode_image(&path).unwrap();
        assert_eq!((img.width(), img.height(), img.channels()), (2, 2, 3));
        assert!(img.data().iter().all(|&v| v == 0));
    }

    #[test]
    fn decodes_single_gray_pixel() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.png");
        save_png(&PixelImage::filled(1, 1, 1, 255).unwrap(), &path).unwrap();
        let img = decode_image(&path).unwrap();
        assert_eq!(img, PixelImage::new(1, 1, 1, vec![255]).unwrap());
    }

    #[test]
    fn drops_alpha_channel() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgba.png");
        let buf = image::RgbaImage::from_raw(1, 2, vec![1, 2, 3, 9, 4, 5, 6, 9]).unwrap();
        buf.save(&path).unwrap();
        let img = decode_image(&path).unwrap();
        assert_eq!(img.channels(), 3);
        assert_eq!(img.data(), &[1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn rejects_sixteen_bit_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deep.png");
        let buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
            image::ImageBuffer::from_raw(2, 2, vec![0u16, 1000, 40000, 65535]).unwrap();
        buf.save(&path).unwrap();
        let err = decode_image(&path).unwrap_err();
        assert!(matches!(err, Error::UnsupportedFormat { .. }), "{err}");
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            decode_image("/nonexistent/x.png"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn png_round_trip_random_rgb() {
        let img = noise(16, 16, 3, 7);
        let back = decode_bytes(&encode_png(&img).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn jpeg_none_is_identity() {
        let img = noise(20, 13, 3, 1);
        assert_eq!(jpeg_recompress(&img, None).unwrap(), img);
    }

    #[test]
    fn jpeg_flat_gray_survives() {
        let img = PixelImage::filled(64, 64, 3, 128).unwrap();
        let out = jpeg_recompress(&img, Some(90)).unwrap();
        let max_dev = img
            .data()
            .iter()
            .zip(out.data())
            .map(|(&a, &b)| (a as i32 - b as i32).abs())
            .max()
            .unwrap();
        assert!(max_dev <= 1, "max deviation {max_dev}");
    }

    #[test]
    fn jpeg_changes_noise() {
        let img = noise(64, 64, 3, 3);
        let out = jpeg_recompress(&img, Some(75)).unwrap();
        assert_eq!((out.width(), out.height(), out.channels()), (64, 64, 3));
        assert!(img.data().iter().zip(out.data()).any(|(a, b)| a != b));
    }

    #[test]
    fn jpeg_grayscale_keeps_one_channel() {
        let img = noise(32, 24, 1, 4);
        let out = jpeg_recompress(&img, Some(85)).unwrap();
        assert_eq!((out.width(), out.height(), out.channels()), (32, 24, 1));
    }

    #[test]
    fn jpeg_quality_out_of_range() {
        let img = noise(8, 8, 1, 4);
        assert!(jpeg_recompress(&img, Some(0)).is_err());
        assert!(jpeg_recompress(&img, Some(101)).is_err());
    }

    #[test]
    fn exact_tiling() {
        let img = PixelImage::filled(256, 256, 1, 0).unwrap();
        let origins: Vec<_> = extract_patches(&img, PatchSpec::new(128, 128).unwrap())
            .unwrap()
            .into_iter()
            .map(|p| p.origin)
            .collect();
        assert_eq!(origins, vec![(0, 0), (0, 128), (128, 0), (128, 128)]);
    }

    #[test]
    fn small_image_is_single_patch() {
        let img = noise(100, 100, 3, 2);
        let patches = extract_patches(&img, PatchSpec::new(128, 8).unwrap()).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0].origin, (0, 0));
        assert_eq!(patches[0].image, img);
    }

    #[test]
    fn clamped_last_patch() {
        let img = noise(130, 130, 1, 2);
        let patches = extract_patches(&img, PatchSpec::new(128, 8).unwrap()).unwrap();
        let origins: Vec<_> = patches.iter().map(|p| p.origin).collect();
        assert_eq!(origins, vec![(0, 0), (0, 2), (2, 0), (2, 2)]);
        assert_eq!(patches[3].image.get(0, 0, 0), img.get(2, 2, 0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn patches_cover_image(w in 2usize..60, h in 2usize..60, size in 2usize..20, stride in 1usize..20) {
            prop_assume!(stride <= size);
            let img = PixelImage::filled(w, h, 1, 0).unwrap();
            let spec = PatchSpec::new(size, stride).unwrap();
            let patches = extract_patches(&img, spec).unwrap();
            let mut covered = vec![false; w * h];
            for p in &patches {
                for r in 0..p.image.height() {
                    for c in 0..p.image.width() {
                        covered[(p.origin.0 + r) * w + p.origin.1 + c] = true;
                    }
                }
            }
            prop_assert!(covered.iter().all(|&c| c));
            for pair in patches.windows(2) {
                prop_assert!(pair[0].origin < pair[1].origin);
            }
        }

        #[test]
        fn png_round_trip(w in 1usize..24, h in 1usize..24, gray in any::<bool>(), seed in any::<u64>()) {
            let img = noise(w, h, if gray { 1 } else { 3 }, seed);
            prop_assert_eq!(decode_bytes(&encode_png(&img).unwrap()).unwrap(), img);
        }
    }
}
