//! Conversion between 8-bit RGB images and `[-1, 1]` feature maps, plus
//! deterministic PNG coding.

use candle_core::{DType, Device, Tensor};
use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{DynamicImage, ImageEncoder, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::feature::FeatureMap;

/// Maps a 3-channel 8-bit image to `[-1, 1]` via `v / 127.5 - 1`, giving a
/// `(1, 3, h, w)` map.
pub fn normalize_image(raw: &DynamicImage, dtype: DType) -> Result<FeatureMap> {
    let channels = raw.color().channel_count() as usize;
    if channels != 3 {
        return Err(Error::ChannelCount(channels));
    }
    normalize_rgb(&raw.to_rgb8(), dtype)
}

pub fn normalize_rgb(raw: &RgbImage, dtype: DType) -> Result<FeatureMap> {
    let t = rgb_to_tensor(raw, dtype)?.unsqueeze(0)?;
    FeatureMap::image(t)
}

/// `(3, h, w)` tensor in `[-1, 1]`.
pub(crate) fn rgb_to_tensor(raw: &RgbImage, dtype: DType) -> Result<Tensor> {
    let (w, h) = raw.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut planes = vec![0f32; 3 * w * h];
    for (x, y, px) in raw.enumerate_pixels() {
        let idx = y as usize * w + x as usize;
        for c in 0..3 {
            planes[c * w * h + idx] = px.0[c] as f32 / 127.5 - 1.0;
        }
    }
    Ok(Tensor::from_vec(planes, (3, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Inverse of [`normalize_image`]: one RGB image per batch element, with
/// values rounded and clamped to `[0, 255]`.
pub fn denormalize(images: &Tensor) -> Result<Vec<RgbImage>> {
    let (b, c, h, w) = images.dims4()?;
    if c != 3 {
        return Err(Error::ChannelCount(c));
    }
    let values = images.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let plane = h * w;
    Ok((0..b)
        .map(|i| {
            let base = i * 3 * plane;
            RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let idx = y as usize * w + x as usize;
                let px = |ch: usize| to_byte(values[base + ch * plane + idx]);
                Rgb([px(0), px(1), px(2)])
            })
        })
        .collect())
}

fn to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Images on the `[0, 255]` scale as `(3, h, w)` planes of `f64`, the layout
/// the quality metrics consume.
pub fn to_planes(images: &Tensor) -> Result<Vec<crate::metrics::Planes>> {
    let (b, c, h, w) = images.dims4()?;
    if c != 3 {
        return Err(Error::ChannelCount(c));
    }
    let values = images.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let n = 3 * h * w;
    Ok((0..b)
        .map(|i| {
            let data = values[i * n..(i + 1) * n]
                .iter()
                .map(|v| ((v + 1.0) * 127.5).clamp(0.0, 255.0))
                .collect();
            crate::metrics::Planes::new(3, h, w, data).expect("sizes agree")
        })
        .collect())
}

/// PNG bytes with fixed encoder settings so identical pixels always produce
/// identical files.
pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let enc = PngEncoder::new_with_quality(&mut out, CompressionType::Default, FilterType::Adaptive);
    enc.write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)?;
    Ok(out)
}

/// Decodes any PNG and flattens it to opaque RGB, compositing transparency
/// over white.
pub fn decode_png_rgb(bytes: &[u8]) -> Result<RgbImage> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
    Ok(flatten_on_white(&img))
}

pub fn flatten_on_white(img: &DynamicImage) -> RgbImage {
    if !img.color().has_alpha() {
        return img.to_rgb8();
    }
    let rgba = img.to_rgba8();
    RgbImage::from_fn(rgba.width(), rgba.height(), |x, y| {
        let p = rgba.get_pixel(x, y).0;
        let a = p[3] as f32 / 255.0;
        let blend = |c: u8| (c as f32 * a + 255.0 * (1.0 - a)).round() as u8;
        Rgb([blend(p[0]), blend(p[1]), blend(p[2])])
    })
}

/// Fits `img` inside a white `size × size` canvas, preserving aspect ratio.
/// Images already at `size × size` pass through untouched.
pub fn letterbox(img: &RgbImage, size: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    if w == size && h == size {
        return img.clone();
    }
    let scale = (size as f64 / w as f64).min(size as f64 / h as f64);
    let nw = ((w as f64 * scale).round() as u32).clamp(1, size);
    let nh = ((h as f64 * scale).round() as u32).clamp(1, size);
    let resized = image::imageops::resize(img, nw, nh, image::imageops::FilterType::Triangle);
    let mut canvas = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let ox = (size - nw) / 2;
    let oy = (size - nh) / 2;
    image::imageops::replace(&mut canvas, &resized, ox as i64, oy as i64);
    canvas
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(v: u8) -> f32 {
        let img = RgbImage::from_pixel(1, 1, Rgb([v, v, v]));
        let f = normalize_rgb(&img, DType::F32).unwrap();
        f.tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap()[0]
    }

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(single(255), 1.0);
        assert_eq!(single(0), -1.0);
        assert!((single(127) as f64 - (127.0 / 127.5 - 1.0)).abs() < 1e-7);
        assert!((single(127) + 0.003_921_6).abs() < 1e-6);
    }

    #[test]
    fn rejects_non_rgb() {
        let gray = DynamicImage::new_luma8(4, 4);
        assert!(matches!(normalize_image(&gray, DType::F32), Err(Error::ChannelCount(1))));
        let rgba = DynamicImage::new_rgba8(4, 4);
        assert!(matches!(normalize_image(&rgba, DType::F32), Err(Error::ChannelCount(4))));
    }

    #[test]
    fn letterbox_centers_on_white() {
        let img = RgbImage::from_pixel(8, 4, Rgb([0, 0, 0]));
        let boxed = letterbox(&img, 8);
        assert_eq!(boxed.dimensions(), (8, 8));
        assert_eq!(boxed.get_pixel(0, 0).0, [255, 255, 255]);
        assert_eq!(boxed.get_pixel(4, 4).0, [0, 0, 0]);
    }

    #[test]
    fn png_is_deterministic() {
        let img = RgbImage::from_fn(16, 16, |x, y| Rgb([x as u8 * 10, y as u8 * 10, 7]));
        let a = encode_png(&img).unwrap();
        assert_eq!(a, encode_png(&img).unwrap());
        assert_eq!(decode_png_rgb(&a).unwrap(), img);
    }

    proptest! {
        #[test]
        fn round_trip_within_one_step(pixels in proptest::collection::vec(any::<u8>(), 48)) {
            let img = RgbImage::from_raw(4, 4, pixels).unwrap();
            for dtype in [DType::F32, DType::F64] {
                let f = normalize_rgb(&img, dtype).unwrap();
                let back = denormalize(f.tensor()).unwrap().remove(0);
                for (a, b) in img.as_raw().iter().zip(back.as_raw()) {
                    prop_assert!((*a as i32 - *b as i32).abs() <= 1);
                }
            }
        }
    }
}
