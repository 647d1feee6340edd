//! PNG rendering of generator outputs.

use std::io::Cursor;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_u8(v: f32) -> u8 {
    // NaN maps to 0 through the clamp
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Converts `[C, H, W]` or `[1, C, H, W]` with C = 1 or 3 into an 8-bit
/// image. Values are clamped to `[0, 1]`.
pub fn to_image(t: &Tensor) -> Result<DynamicImage> {
    let shape = match t.shape() {
        [1, c, h, w] | [c, h, w] => [*c, *h, *w],
        other => {
            return Err(Error::InvalidArgument(format!(
                "cannot render tensor of shape {other:?} as an image"
            )))
        }
    };
    let [c, h, w] = shape;
    let plane = h * w;
    let d = t.data();
    match c {
        1 => {
            let px = d.iter().map(|&v| to_u8(v)).collect();
            let img = GrayImage::from_raw(w as u32, h as u32, px).expect("buffer size matches");
            Ok(DynamicImage::ImageLuma8(img))
        }
        3 => {
            let mut px = Vec::with_capacity(3 * plane);
            for i in 0..plane {
                for ch in 0..3 {
                    px.push(to_u8(d[ch * plane + i]));
                }
            }
            let img = RgbImage::from_raw(w as u32, h as u32, px).expect("buffer size matches");
            Ok(DynamicImage::ImageRgb8(img))
        }
        _ => Err(Error::InvalidArgument(format!("cannot render {c} channels"))),
    }
}

pub fn encode_png(t: &Tensor) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    to_image(t)?
        .write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(buf.into_inner())
}

/// Difference image `0.5 + scale * (perturbed - unperturbed)`, so zero change
/// is mid grey.
pub fn difference(unperturbed: &Tensor, perturbed: &Tensor, scale: f32) -> Result<Tensor> {
    unperturbed.expect_shape("difference", perturbed.shape())?;
    perturbed.zip_map(unperturbed, |p, u| 0.5 + scale * (p - u))
}

/// Horizontal strip: unperturbed, perturbed, difference, separated by a
/// two pixel white gutter.
pub fn triple(unperturbed: &Tensor, perturbed: &Tensor, scale: f32) -> Result<DynamicImage> {
    let diff = difference(unperturbed, perturbed, scale)?;
    let parts = [to_image(unperturbed)?, to_image(perturbed)?, to_image(&diff)?];
    let (w, h) = (parts[0].width(), parts[0].height());
    let gutter = 2;
    let mut out = RgbImage::from_pixel(3 * w + 2 * gutter, h, image::Rgb([255, 255, 255]));
    for (i, part) in parts.iter().enumerate() {
        image::imageops::replace(&mut out, &part.to_rgb8(), (i as u32 * (w + gutter)) as i64, 0);
    }
    Ok(DynamicImage::ImageRgb8(out))
}
