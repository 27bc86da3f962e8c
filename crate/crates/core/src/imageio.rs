//! PNG import/export and quantisation for `[3, H, W]` images in `[-1, 1]`.
//!
//! Pixels are stored as 8-bit RGB with `u8 = round((p + 1) · 127.5)`.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::Image;

pub fn pixel_to_u8(p: f32) -> u8 {
    let v = ((p + 1.0) * 127.5).round();
    v.clamp(0.0, 255.0) as u8
}

pub fn u8_to_pixel(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

pub fn to_rgb8(img: &Image) -> RgbImage {
    let (c, h, w) = img.dim();
    assert_eq!(c, 3, "expected RGB image");
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Rgb([
            pixel_to_u8(img[(0, y as usize, x as usize)]),
            pixel_to_u8(img[(1, y as usize, x as usize)]),
            pixel_to_u8(img[(2, y as usize, x as usize)]),
        ])
    })
}

pub fn from_rgb8(buf: &RgbImage) -> Image {
    let (w, h) = buf.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        u8_to_pixel(buf.get_pixel(x as u32, y as u32).0[c])
    })
}

pub fn save_png(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    to_rgb8(img)
        .save(path.as_ref())
        .map_err(Error::from)
}

pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
    let img = image::open(path.as_ref())?;
    Ok(from_rgb8(&img.to_rgb8()))
}

/// Snaps an image onto the 8-bit storage grid, so in-memory data equals what
/// a PNG round trip would produce.
pub fn quantize(img: &Image) -> Image {
    img.mapv(|p| u8_to_pixel(pixel_to_u8(p)))
}

/// Tiles rows of images (all same size) into one grid image.
pub fn montage(rows: &[Vec<Image>]) -> Result<RgbImage> {
    let nrows = rows.len();
    let ncols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    if nrows == 0 || ncols == 0 {
        return Err(Error::argument("montage needs at least one image"));
    }
    let (_, h, w) = rows[0][0].dim();
    let pad = 2u32;
    let out_w = ncols as u32 * (w as u32 + pad) + pad;
    let out_h = nrows as u32 * (h as u32 + pad) + pad;
    let mut out = RgbImage::from_pixel(out_w, out_h, Rgb([24, 24, 24]));
    for (ri, row) in rows.iter().enumerate() {
        for (ci, img) in row.iter().enumerate() {
            let tile = to_rgb8(img);
            let ox = pad + ci as u32 * (w as u32 + pad);
            let oy = pad + ri as u32 * (h as u32 + pad);
            for y in 0..h as u32 {
                for x in 0..w as u32 {
                    out.put_pixel(ox + x, oy + y, *tile.get_pixel(x, y));
                }
            }
        }
    }
    Ok(out)
}

/// Peak signal-to-noise ratio in dB over the `[-1, 1]` dynamic range.
pub fn psnr(a: &Image, b: &Image) -> f64 {
    assert_eq!(a.dim(), b.dim());
    let mut mse = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = (*x - *y) as f64;
        mse += d * d;
    }
    mse /= a.len() as f64;
    if mse == 0.0 {
        return f64::INFINITY;
    }
    let peak: f64 = 2.0; // dynamic range of [-1, 1]
    10.0 * (peak * peak / mse).log10()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_preserves_quantized_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.png");
        let img = Array3::from_shape_fn((3, 8, 8), |(c, y, x)| {
            ((c + 2 * y + 3 * x) as f32 / 40.0) - 0.8
        });
        let q = quantize(&img);
        save_png(&p, &img).unwrap();
        let back = load_png(&p).unwrap();
        assert_eq!(q, back);
    }
}
