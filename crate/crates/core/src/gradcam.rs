//! Grad-CAM attention maps.
//!
//! Channel weights are the spatially averaged gradients of the chosen logit
//! with respect to the final convolutional activations; the rectified
//! weighted sum of activations gives a coarse saliency grid. That grid is
//! bilinearly resized to image resolution, smoothed with a Gaussian
//! (σ = 2, radius 4σ, reflect padding) and divided by its maximum.

use ndarray::{Array2, Array3, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::vqa::VqaModel;

/// Standard deviation of the smoothing filter, in output pixels.
pub const SMOOTHING_SIGMA: f64 = 2.0;
/// Maxima at or below this are treated as an all-zero map.
pub const NORMALIZE_EPS: f32 = 1e-8;

/// Rectified `u × v` saliency grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CoarseSaliency(Array2<f32>);

impl CoarseSaliency {
    pub fn new(values: Array2<f32>) -> Result<Self> {
        if values.iter().any(|&v| v.is_nan() || v < 0.0) {
            return Err(Error::Precondition("saliency must be nonnegative".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.0
    }
}

/// Single-channel map over the image plane with values in `[0, 1]`;
/// conceptually `1 × h × w`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap(Array2<f32>);

impl AttentionMap {
    pub fn new(values: Array2<f32>) -> Result<Self> {
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Precondition("attention values must lie in [0, 1]".into()));
        }
        Ok(Self(values))
    }

    pub fn constant(h: usize, w: usize, value: f32) -> Result<Self> {
        Self::new(Array2::from_elem((h, w), value))
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.0
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        self.0.view()
    }

    /// `(1, h, w)`
    pub fn dims(&self) -> (usize, usize, usize) {
        let (h, w) = self.0.dim();
        (1, h, w)
    }

    pub fn into_inner(self) -> Array2<f32> {
        self.0
    }
}

/// Per-channel importance: gradients averaged over the `u × v` grid.
pub fn channel_weights(gradients: &Array3<f32>) -> Vec<f32> {
    let (_, u, v) = gradients.dim();
    let z = (u * v) as f64;
    gradients
        .axis_iter(Axis(0))
        .map(|g| (g.iter().map(|&x| x as f64).sum::<f64>() / z) as f32)
        .collect()
}

/// Weighted combination of activation maps before rectification.
pub fn weighted_activation_field(activations: &Array3<f32>, gradients: &Array3<f32>) -> Result<Array2<f32>> {
    if activations.dim() != gradients.dim() {
        return Err(Error::shape(format!(
            "activations {:?} vs gradients {:?}",
            activations.dim(),
            gradients.dim()
        )));
    }
    let alphas = channel_weights(gradients);
    let (_, u, v) = activations.dim();
    let mut field = Array2::<f64>::zeros((u, v));
    for (alpha, act) in alphas.iter().zip(activations.axis_iter(Axis(0))) {
        Zip::from(&mut field).and(&act).for_each(|f, &a| *f += *alpha as f64 * a as f64);
    }
    Ok(field.mapv(|x| x as f32))
}

pub fn grad_cam(activations: &Array3<f32>, gradients: &Array3<f32>) -> Result<CoarseSaliency> {
    let field = weighted_activation_field(activations, gradients)?;
    Ok(CoarseSaliency(field.mapv(|x| x.max(0.0))))
}

/// Bilinear resize with half-pixel centres (edges clamp). Constant inputs
/// stay constant.
pub fn bilinear_resize(src: &Array2<f32>, h: usize, w: usize) -> Array2<f32> {
    let (sh, sw) = src.dim();
    let coord = |dst: usize, scale: f64, n: usize| -> (usize, usize, f64) {
        let x = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, x - lo as f64)
    };
    let (sy, sx) = (sh as f64 / h as f64, sw as f64 / w as f64);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (y0, y1, fy) = coord(y, sy, sh);
        let (x0, x1, fx) = coord(x, sx, sw);
        let top = src[[y0, x0]] as f64 * (1.0 - fx) + src[[y0, x1]] as f64 * fx;
        let bottom = src[[y1, x0]] as f64 * (1.0 - fx) + src[[y1, x1]] as f64 * fx;
        (top * (1.0 - fy) + bottom * fy) as f32
    })
}

/// Normalized 1-D Gaussian taps for offsets `-r..=r`, `r = ceil(4σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Mirror index without repeating the edge sample (`d c b | a b c d`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(src: &Array2<f32>, sigma: f64) -> Array2<f32> {
    let taps = gaussian_kernel(sigma);
    let r = (taps.len() / 2) as isize;
    let (h, w) = src.dim();
    let mut rows = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            rows[[y, x]] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * src[[y, reflect_index(x as isize + k as isize - r, w)]] as f64)
                .sum();
        }
    }
    Array2::from_shape_fn((h, w), |(y, x)| {
        taps.iter()
            .enumerate()
            .map(|(k, t)| t * rows[[reflect_index(y as isize + k as isize - r, h), x]])
            .sum::<f64>() as f32
    })
}

/// Divides by the maximum; maps whose maximum is below the guard become zero.
pub fn max_normalize(src: &Array2<f32>) -> Array2<f32> {
    let max = src.iter().copied().fold(0.0f32, f32::max);
    if max <= NORMALIZE_EPS {
        return Array2::zeros(src.dim());
    }
    src.mapv(|v| (v / max).clamp(0.0, 1.0))
}

pub fn to_attention_map(saliency: &CoarseSaliency, h: usize, w: usize) -> Result<AttentionMap> {
    let (u, v) = saliency.0.dim();
    if h < u || w < v {
        return Err(Error::Precondition(format!(
            "attention target {h}x{w} smaller than saliency grid {u}x{v}"
        )));
    }
    let resized = bilinear_resize(&saliency.0, h, w);
    let smooth = gaussian_blur(&resized, SMOOTHING_SIGMA);
    AttentionMap::new(max_normalize(&smooth.mapv(|x| x.max(0.0))))
}

/// Grad-CAM map for answer `answer`, defaulting to the model's prediction.
pub fn attention_for(model: &VqaModel, image: &Image, question: &[u32], answer: Option<usize>) -> Result<AttentionMap> {
    let out = model.forward_one(image, question)?;
    let target = answer.unwrap_or(out.predicted);
    let gradients = model.logit_gradient(image, question, target)?;
    let saliency = grad_cam(&out.conv_activations, &gradients)?;
    let (_, h, w) = image.dim();
    to_attention_map(&saliency, h, w)
}

/// Batched Grad-CAM: one map per `(image, question)` for the given answers
/// (or the predicted ones).
pub fn attention_batch(
    model: &VqaModel,
    images: &[&Image],
    questions: &[&[u32]],
    answers: Option<&[usize]>,
) -> Result<(Vec<AttentionMap>, Vec<usize>)> {
    let intro = model.introspect_batch(images, questions, answers)?;
    let mut maps = Vec::with_capacity(images.len());
    for ((acts, grads), image) in intro.activations.iter().zip(&intro.gradients).zip(images) {
        let (_, h, w) = image.dim();
        maps.push(to_attention_map(&grad_cam(acts, grads)?, h, w)?);
    }
    Ok((maps, intro.targets))
}
