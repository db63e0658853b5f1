//! 8-bit PNG persistence. On load a byte `v` becomes `2·(v/255) − 1`.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::imaging::{internal_to_unit, Image};

pub fn byte_to_internal(v: u8) -> f32 {
    2.0 * (f32::from(v) / 255.0) - 1.0
}

pub fn internal_to_byte(v: f32) -> u8 {
    (internal_to_unit(v).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Grayscale files load as one channel, everything else as RGB.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let decoded = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let gray = matches!(
        decoded,
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLuma16(_)
    );
    if gray {
        let img = decoded.into_luma8();
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| byte_to_internal(v)).collect();
        return Image::from_vec(h as usize, w as usize, 1, data);
    }
    let img = decoded.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let hw = h * w;
    let mut data = vec![0.0; 3 * hw];
    for (p, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * hw + p] = byte_to_internal(px[c]);
        }
    }
    Image::from_vec(h, w, 3, data)
}

pub fn save_png(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    let path = path.as_ref();
    let (h, w, c) = image.shape();
    let hw = h * w;
    let wrap = |source| Error::Image {
        path: path.to_path_buf(),
        source,
    };
    match c {
        1 => {
            let bytes = image.data().iter().map(|&v| internal_to_byte(v)).collect();
            let img = GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer size matches");
            img.save_with_format(path, image::ImageFormat::Png).map_err(wrap)
        }
        3 => {
            let mut bytes = Vec::with_capacity(3 * hw);
            for p in 0..hw {
                for ch in 0..3 {
                    bytes.push(internal_to_byte(image.data()[ch * hw + p]));
                }
            }
            let img = RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer size matches");
            img.save_with_format(path, image::ImageFormat::Png).map_err(wrap)
        }
        _ => Err(Error::InvalidArgument(format!("cannot save a {c}-channel image"))),
    }
}
