//! Image arrays, PNG I/O and tensor conversions.
//!
//! Images are `(3, h, w)` channel-first `f32` arrays with values in `[0, 1]`.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};

pub type Image = Array3<f32>;
pub type Mask = Array2<bool>;

pub fn image_dims(image: &Image) -> (usize, usize) {
    let (_, h, w) = image.dim();
    (h, w)
}

pub fn check_rgb(image: &Image) -> Result<()> {
    if image.dim().0 != 3 {
        return Err(Error::shape(format!(
            "expected 3 channels, got {}",
            image.dim().0
        )));
    }
    Ok(())
}

pub fn constant_image(h: usize, w: usize, rgb: [f32; 3]) -> Image {
    Array3::from_shape_fn((3, h, w), |(c, _, _)| rgb[c])
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn to_rgb8(image: &Image) -> RgbImage {
    let (h, w) = image_dims(image);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([
            quantize(image[[0, y, x]]),
            quantize(image[[1, y, x]]),
            quantize(image[[2, y, x]]),
        ])
    })
}

pub fn from_rgb8(rgb: &RgbImage) -> Image {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    })
}

pub fn save_png(image: &Image, path: &Path) -> Result<()> {
    check_rgb(image)?;
    to_rgb8(image).save(path)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path)?.to_rgb8();
    Ok(from_rgb8(&img))
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    });
    img.save(path)?;
    Ok(())
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] >= 128
    }))
}

/// Heat colour for a value in `[0, 1]`: black → red → yellow → white.
pub fn heat_color(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    [
        (3.0 * v).min(1.0),
        (3.0 * v - 1.0).clamp(0.0, 1.0),
        (3.0 * v - 2.0).clamp(0.0, 1.0),
    ]
}

/// Blends a heat rendering of `map` over `image` at the given opacity.
pub fn heat_overlay(image: &Image, map: ArrayView2<f32>, opacity: f32) -> Result<Image> {
    let (h, w) = image_dims(image);
    if map.dim() != (h, w) {
        return Err(Error::shape(format!(
            "overlay map {:?} vs image {:?}",
            map.dim(),
            (h, w)
        )));
    }
    let alpha = opacity.clamp(0.0, 1.0);
    Ok(Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        let heat = heat_color(map[[y, x]])[c];
        (1.0 - alpha) * image[[c, y, x]] + alpha * heat
    }))
}

/// Stacks `(c, h, w)` arrays into a `(b, c, h, w)` tensor.
pub fn stack_to_tensor<'a, I>(items: I, dtype: DType, device: &Device) -> Result<Tensor>
where
    I: IntoIterator<Item = &'a Array3<f32>>,
{
    let items: Vec<&Array3<f32>> = items.into_iter().collect();
    let first = items
        .first()
        .ok_or_else(|| Error::Precondition("cannot stack an empty batch".into()))?;
    let dim = first.dim();
    let mut data = Vec::with_capacity(items.len() * first.len());
    for item in &items {
        if item.dim() != dim {
            return Err(Error::shape(format!("batch item {:?} vs {:?}", item.dim(), dim)));
        }
        data.extend(item.iter().copied());
    }
    let t = Tensor::from_vec(data, (items.len(), dim.0, dim.1, dim.2), device)?;
    Ok(t.to_dtype(dtype)?)
}

/// Stacks `(h, w)` maps into a `(b, 1, h, w)` tensor.
pub fn stack_maps_to_tensor<'a, I>(items: I, dtype: DType, device: &Device) -> Result<Tensor>
where
    I: IntoIterator<Item = ArrayView2<'a, f32>>,
{
    let owned: Vec<Array3<f32>> = items
        .into_iter()
        .map(|m| m.to_owned().insert_axis(Axis(0)))
        .collect();
    stack_to_tensor(owned.iter(), dtype, device)
}

/// Splits a `(b, c, h, w)` tensor back into per-item arrays.
pub fn tensor_to_arrays(t: &Tensor) -> Result<Vec<Array3<f32>>> {
    let (b, c, h, w) = t.dims4()?;
    let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok(flat
        .chunks_exact(c * h * w)
        .take(b)
        .map(|chunk| Array3::from_shape_vec((c, h, w), chunk.to_vec()).expect("chunk size"))
        .collect())
}
