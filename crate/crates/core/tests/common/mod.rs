//! Independent oracles shared by the integration tests and the acceptance
//! harness. Each returns a [`Check`] instead of panicking so callers can
//! either assert or report.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use cfvqa_core::config::{DatasetConfig, Fusion, VqaConfig};
use cfvqa_core::discriminator::spectral_normalize;
use cfvqa_core::generator::{composite, composite_tensor};
use cfvqa_core::gradcam::{gaussian_blur, grad_cam, weighted_activation_field, to_attention_map, AttentionMap, CoarseSaliency, SMOOTHING_SIGMA};
use cfvqa_core::objectives::{
    bce_with_logits, discriminator_loss, flip_loss, flip_loss_value, generator_adv_loss, scalar, weighted_recon_loss,
};
use cfvqa_core::synth::{build_split, AnswerSpace, Language, QuestionType, Shape, Split, Vocabulary};
use cfvqa_core::vqa::{VqaModel, VqaSpec};
use ndarray::{array, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct Check {
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }

    fn all(checks: Vec<Check>) -> Check {
        let passed = checks.iter().all(|c| c.passed);
        let detail = checks.iter().map(|c| c.detail.as_str()).collect::<Vec<_>>().join("; ");
        Check { passed, detail }
    }
}

const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-3;

/// `max |a − b| / max(max |b|, tiny)`.
fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().chain(a).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Central differences of a scalar function of a flat vector.
fn central_differences(x: &[f64], f: &mut dyn FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + FD_STEP;
            let up = f(&probe);
            probe[i] = x[i] - FD_STEP;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array3<f32> {
    Array3::from_shape_fn((3, h, w), |_| rng.random::<f32>())
}

fn fixture_spec(config: VqaConfig, size: usize) -> VqaSpec {
    let data = DatasetConfig::default();
    VqaSpec {
        config,
        vocab: Vocabulary::from_config(&data),
        answers: AnswerSpace::from_config(&data),
        image_height: size,
        image_width: size,
    }
}

/// Three differently shaped VQA networks in double precision.
pub fn fixture_networks() -> Vec<VqaModel> {
    let configs = [
        (VqaConfig::default(), 64, 1),
        (
            VqaConfig {
                conv_channels: vec![8, 12],
                conv_strides: vec![2, 2],
                question_dim: 16,
                fused_dim: 16,
                attention_heads: 2,
                fusion: Fusion::Product,
            },
            16,
            2,
        ),
        (
            VqaConfig {
                conv_channels: vec![6, 10, 8],
                conv_strides: vec![2, 1, 2],
                question_dim: 24,
                fused_dim: 12,
                attention_heads: 3,
                fusion: Fusion::Product,
            },
            32,
            3,
        ),
    ];
    configs
        .into_iter()
        .map(|(c, size, seed)| VqaModel::new(fixture_spec(c, size), seed, DType::F64).expect("fixture network"))
        .collect()
}

/// Analytic `∂y^a/∂φ` against central differences through the head, and
/// the resulting Grad-CAM maps against each other.
pub fn gradcam_finite_differences() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut checks = Vec::new();
    for (n, model) in fixture_networks().into_iter().enumerate() {
        let spec = model.spec().clone();
        let image = random_image(&mut rng, spec.image_height, spec.image_width);
        let question = spec.vocab.tokenize(["what color is the circle", "what shape is the red object"][n % 2]).unwrap();
        let answer = rng.random_range(0..model.num_answers());
        let analytic = model.logit_gradient(&image, &question, answer).unwrap();

        let x = model.images_tensor(&[&image]).unwrap();
        let phi = model.encode_image(&x).unwrap();
        let color = model.local_color(&x).unwrap();
        let q_bar = model.encode_question(&[&question]).unwrap();
        let dims = phi.dims().to_vec();
        let flat: Vec<f64> = phi.flatten_all().unwrap().to_vec1().unwrap();
        let mut logit = |v: &[f64]| {
            let t = Tensor::from_slice(v, dims.as_slice(), &Device::Cpu).unwrap();
            let logits: Vec<Vec<f64>> = model.head(&t, &color, &q_bar).unwrap().to_vec2().unwrap();
            logits[0][answer]
        };
        let numeric = central_differences(&flat, &mut logit);
        let analytic_flat: Vec<f64> = analytic.iter().map(|&g| g as f64).collect();
        let grad_err = max_rel_error(&analytic_flat, &numeric);

        let acts = Array3::from_shape_vec(analytic.dim(), flat.iter().map(|&v| v as f32).collect()).unwrap();
        let numeric_grads = Array3::from_shape_vec(analytic.dim(), numeric.iter().map(|&v| v as f32).collect()).unwrap();
        // Compared before the ReLU so a clipped map cannot hide a mismatch.
        let field = |g: &Array3<f32>| -> Vec<f64> {
            weighted_activation_field(&acts, g).unwrap().iter().map(|&v| v as f64).collect()
        };
        let (cam_a, cam_n) = (field(&analytic), field(&numeric_grads));
        let cam_err = max_rel_error(&cam_a, &cam_n);
        let nonzero = numeric.iter().any(|g| g.abs() > 1e-9) && cam_n.iter().any(|v| v.abs() > 1e-9);
        checks.push(Check::new(
            grad_err <= FD_TOLERANCE && cam_err <= FD_TOLERANCE && nonzero,
            format!("net{n}: |φ|={} grad rel err {grad_err:.2e}, Σα·φ rel err {cam_err:.2e}", flat.len()),
        ));
    }
    Check::all(checks)
}

/// The 2×2 worked example: one channel, gradient 0.5 everywhere.
pub fn gradcam_hand_example() -> Check {
    let acts = array![[[1.0f32, 2.0], [3.0, 4.0]]];
    let grads = Array3::from_elem((1, 2, 2), 0.5f32);
    let got = grad_cam(&acts, &grads).unwrap();
    let want = array![[0.5f32, 1.0], [1.5, 2.0]];
    Check::new(got.values() == want, format!("L = {:?}", got.values().as_slice().unwrap()))
}

fn mirror(i: isize, n: usize) -> usize {
    // Bounce back and forth until inside; written independently of the
    // library's modular form.
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i } else { 2 * (n - 1) - i };
    }
    i as usize
}

/// Non-separable direct convolution with a 2-D Gaussian built from the
/// closed form, reflect-padded.
fn direct_blur(src: &Array2<f32>, sigma: f64) -> Array2<f64> {
    let r = (4.0 * sigma).ceil() as isize;
    let mut kernel = Array2::<f64>::zeros(((2 * r + 1) as usize, (2 * r + 1) as usize));
    for a in -r..=r {
        for b in -r..=r {
            kernel[[(a + r) as usize, (b + r) as usize]] = (-((a * a + b * b) as f64) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total = kernel.sum();
    kernel.mapv_inplace(|k| k / total);
    let (h, w) = src.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = 0.0;
        for a in -r..=r {
            for b in -r..=r {
                let sy = mirror(y as isize + a, h);
                let sx = mirror(x as isize + b, w);
                acc += kernel[[(a + r) as usize, (b + r) as usize]] * src[[sy, sx]] as f64;
            }
        }
        acc
    })
}

pub fn blur_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for &(h, w) in &[(64, 64), (9, 13), (20, 5), (3, 3), (1, 7)] {
        let src = Array2::from_shape_fn((h, w), |_| rng.random::<f32>());
        let got = gaussian_blur(&src, SMOOTHING_SIGMA);
        let want = direct_blur(&src, SMOOTHING_SIGMA);
        for (g, d) in got.iter().zip(&want) {
            worst = worst.max((*g as f64 - d).abs());
        }
    }
    let constant = CoarseSaliency::new(Array2::from_elem((8, 8), 0.7)).unwrap();
    let map = to_attention_map(&constant, 64, 64).unwrap();
    let ones = map.values().iter().all(|&v| (v - 1.0).abs() <= 1e-6);
    Check::new(
        worst <= 1e-6 && ones,
        format!("max |blur − direct| {worst:.2e}; constant input → all-ones map: {ones}"),
    )
}

/// Largest singular value via dense SVD.
fn top_singular_value(rows: usize, cols: usize, data: &[f64]) -> f64 {
    let m = nalgebra::DMatrix::from_row_slice(rows, cols, data);
    m.singular_values().max()
}

pub const SN_ORACLE_ITERS: usize = 100;

pub fn spectral_norm_oracle(kernels: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..kernels {
        let c_out = rng.random_range(1..=16);
        let c_in = rng.random_range(1..=8);
        let k = rng.random_range(1..=4);
        let n = c_out * c_in * k * k;
        let scale = rng.random_range(0.05..5.0);
        let w: Vec<f64> = (0..n).map(|_| scale * (rng.random::<f64>() * 2.0 - 1.0)).collect();
        let u: Vec<f64> = (0..c_out).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let wt = Tensor::from_vec(w, (c_out, c_in, k, k), &Device::Cpu).unwrap();
        let ut = Tensor::from_vec(u, c_out, &Device::Cpu).unwrap();
        let (normalized, _, _) = spectral_normalize(&wt, &ut, SN_ORACLE_ITERS).unwrap();
        let flat: Vec<f64> = normalized.flatten_all().unwrap().to_vec1().unwrap();
        let sigma = top_singular_value(c_out, n / c_out, &flat);
        worst = worst.max((sigma - 1.0).abs());
    }
    Check::new(
        worst <= 1e-3,
        format!("{kernels} kernels, max |σ₁(Ŵ) − 1| = {worst:.2e} ({SN_ORACLE_ITERS} power iterations)"),
    )
}

pub fn compositing_oracle(triples: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut failures = Vec::new();
    let mut worst_bound = f32::MIN;
    for t in 0..triples {
        let h = rng.random_range(1..=12);
        let w = rng.random_range(1..=12);
        let image = random_image(&mut rng, h, w);
        let generated = random_image(&mut rng, h, w);
        let m = AttentionMap::new(Array2::from_shape_fn((h, w), |_| rng.random::<f32>())).unwrap();
        let zero = AttentionMap::constant(h, w, 0.0).unwrap();
        let one = AttentionMap::constant(h, w, 1.0).unwrap();
        if composite(&generated, &image, &zero).unwrap() != image {
            failures.push(format!("triple {t}: M=0 changed I"));
        }
        if composite(&generated, &image, &one).unwrap() != generated {
            failures.push(format!("triple {t}: M=1 is not Î"));
        }
        let out = composite(&generated, &image, &m).unwrap();
        let tensor = |a: &Array3<f32>| {
            Tensor::from_slice(a.as_slice().unwrap(), (1, 3, h, w), &Device::Cpu).unwrap()
        };
        let maps = Tensor::from_slice(m.values().as_slice().unwrap(), (1, 1, h, w), &Device::Cpu).unwrap();
        let batched: Vec<f32> = composite_tensor(&tensor(&generated), &tensor(&image), &maps)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        for ((c, y, x), &v) in out.indexed_iter() {
            let excess = (v - image[[c, y, x]]).abs() - m.values()[[y, x]];
            worst_bound = worst_bound.max(excess);
            let b = batched[(c * h + y) * w + x];
            if (b - v).abs() > 1e-6 {
                failures.push(format!("triple {t}: batched and per-image compositing differ"));
            }
        }
    }
    let ok = failures.is_empty() && worst_bound <= 1e-6;
    Check::new(
        ok,
        format!(
            "{triples} triples; max(|I′−I| − M) = {worst_bound:.2e}; {}",
            failures.first().cloned().unwrap_or_else(|| "identities exact".into())
        ),
    )
}

fn var(data: &[f64], shape: &[usize]) -> Var {
    Var::from_tensor(&Tensor::from_slice(data, shape, &Device::Cpu).unwrap()).unwrap()
}

fn tensor(data: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_slice(data, shape, &Device::Cpu).unwrap()
}

fn grad_of(loss: &Tensor, v: &Var) -> Vec<f64> {
    let g = loss.backward().unwrap();
    g.get(v.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

/// Exact values from the loss definitions.
// The published value is a rounded literal, checked as such.
#[allow(clippy::approx_constant)]
pub fn loss_trivial_cases() -> Check {
    let mut checks = Vec::new();
    let img = tensor(&[0.2, 0.4, 0.6, 0.8, 0.1, 0.3, 0.5, 0.7, 0.9, 0.0, 1.0, 0.5], &[1, 3, 2, 2]);
    let maps = tensor(&[0.0, 0.5, 1.0, 0.25], &[1, 1, 2, 2]);
    let same = scalar(&weighted_recon_loss(&img, &img, &maps).unwrap()).unwrap();
    let other = tensor(&[0.9; 12], &[1, 3, 2, 2]);
    let full = scalar(&weighted_recon_loss(&img, &other, &tensor(&[1.0; 4], &[1, 1, 2, 2])).unwrap()).unwrap();
    checks.push(Check::new(same == 0.0 && full == 0.0, format!("recon(I, I) = {same}, recon at M=1 = {full}")));

    let flip = flip_loss_value(&[0.1, 0.9], 0).unwrap();
    let logits = tensor(&[0.1f64.ln(), 0.9f64.ln()], &[1, 2]);
    let flip_t = scalar(&flip_loss(&logits, &[0]).unwrap()).unwrap();
    let want = 0.1f64.ln();
    checks.push(Check::new(
        (flip - want).abs() <= 1e-6 && (flip_t - want).abs() <= 1e-6 && (want + 2.3026).abs() <= 1e-4,
        format!("flip(p=0.1) = {flip:.7} / {flip_t:.7}"),
    ));

    let zeros = tensor(&[0.0; 36], &[1, 1, 6, 6]);
    let d = scalar(&discriminator_loss(&zeros, &zeros).unwrap()).unwrap();
    let g = scalar(&generator_adv_loss(&zeros).unwrap()).unwrap();
    checks.push(Check::new(
        (d - std::f64::consts::LN_2).abs() <= 1e-6 && (g - std::f64::consts::LN_2).abs() <= 1e-6,
        format!("d_loss(0, 0) = {d:.7}, g_adv(0) = {g:.7}"),
    ));
    Check::all(checks)
}

/// Autograd gradients of every loss against central differences.
pub fn loss_finite_differences() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut rnd = |n: usize, lo: f64, hi: f64| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
    let mut errors = Vec::new();

    let shape = [2usize, 3, 4, 4];
    let image = rnd(96, 0.0, 1.0);
    let generated = rnd(96, 0.0, 1.0);
    let maps = rnd(32, 0.0, 1.0);
    let (it, mt) = (tensor(&image, &shape), tensor(&maps, &[2, 1, 4, 4]));
    let v = var(&generated, &shape);
    let analytic = grad_of(&weighted_recon_loss(&it, v.as_tensor(), &mt).unwrap(), &v);
    let numeric = central_differences(&generated, &mut |x| {
        scalar(&weighted_recon_loss(&it, &tensor(x, &shape), &mt).unwrap()).unwrap()
    });
    errors.push(("recon", max_rel_error(&analytic, &numeric)));

    // Probabilities kept inside (ε, 1 − ε) so the clamp is inactive.
    let logits = rnd(15, -2.0, 2.0);
    let answers = [0usize, 3, 4];
    let v = var(&logits, &[3, 5]);
    let analytic = grad_of(&flip_loss(v.as_tensor(), &answers).unwrap(), &v);
    let numeric = central_differences(&logits, &mut |x| scalar(&flip_loss(&tensor(x, &[3, 5]), &answers).unwrap()).unwrap());
    errors.push(("flip", max_rel_error(&analytic, &numeric)));

    let real = rnd(72, -3.0, 3.0);
    let fake = rnd(72, -3.0, 3.0);
    let grid = [2usize, 1, 6, 6];
    let (rv, fv) = (var(&real, &grid), var(&fake, &grid));
    let d = discriminator_loss(rv.as_tensor(), fv.as_tensor()).unwrap();
    let grads = d.backward().unwrap();
    let flat = |v: &Var| -> Vec<f64> { grads.get(v.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap() };
    let ft = tensor(&fake, &grid);
    let rt = tensor(&real, &grid);
    let num_r = central_differences(&real, &mut |x| scalar(&discriminator_loss(&tensor(x, &grid), &ft).unwrap()).unwrap());
    let num_f = central_differences(&fake, &mut |x| scalar(&discriminator_loss(&rt, &tensor(x, &grid)).unwrap()).unwrap());
    errors.push(("d_loss/real", max_rel_error(&flat(&rv), &num_r)));
    errors.push(("d_loss/fake", max_rel_error(&flat(&fv), &num_f)));

    let fv = var(&fake, &grid);
    let analytic = grad_of(&generator_adv_loss(fv.as_tensor()).unwrap(), &fv);
    let numeric = central_differences(&fake, &mut |x| scalar(&generator_adv_loss(&tensor(x, &grid)).unwrap()).unwrap());
    errors.push(("g_adv", max_rel_error(&analytic, &numeric)));

    let bv = var(&real, &grid);
    let analytic = grad_of(&bce_with_logits(bv.as_tensor(), false).unwrap(), &bv);
    let numeric = central_differences(&real, &mut |x| scalar(&bce_with_logits(&tensor(x, &grid), false).unwrap()).unwrap());
    errors.push(("bce", max_rel_error(&analytic, &numeric)));

    let worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    Check::new(
        worst <= FD_TOLERANCE,
        errors
            .iter()
            .map(|(n, e)| format!("{n} {e:.1e}"))
            .collect::<Vec<_>>()
            .join(", "),
    )
}

/// Re-derives every question's referent and answer from the scene and the
/// rendered pixels, independently of the question generator.
pub fn dataset_sweep(n: usize) -> Check {
    let config = DatasetConfig {
        train_size: n,
        val_size: 0,
        ..DatasetConfig::default()
    };
    let language = Language::new(&config).unwrap();
    let samples = build_split(&config, &language, Split::Train, n).unwrap();
    let colors: Vec<&str> = config.palette.iter().map(|c| c.name.as_str()).collect();
    let mut failures: Vec<String> = Vec::new();
    for s in &samples {
        let words: Vec<&str> = s.question_text.split_whitespace().collect();
        let objects = &s.scene.objects;
        let (matching, answer_name): (Vec<usize>, Option<String>) = match s.question_type {
            QuestionType::Color => {
                let Some(shape) = words.iter().find_map(|w| Shape::from_name(w)) else {
                    failures.push(format!("{}: no shape word", s.id));
                    continue;
                };
                let m: Vec<usize> = (0..objects.len()).filter(|&i| objects[i].shape == shape).collect();
                let name = m.first().map(|&i| colors[objects[i].color].to_string());
                (m, name)
            }
            QuestionType::Shape => {
                let Some(color) = words.iter().find_map(|w| colors.iter().position(|c| c == w)) else {
                    failures.push(format!("{}: no color word", s.id));
                    continue;
                };
                let m: Vec<usize> = (0..objects.len()).filter(|&i| objects[i].color == color).collect();
                let name = m.first().map(|&i| objects[i].shape.name().to_string());
                (m, name)
            }
        };
        if matching != [s.target_object] {
            failures.push(format!("{}: referents {matching:?}, target {}", s.id, s.target_object));
            continue;
        }
        if answer_name.as_deref() != Some(language.answers.name(s.answer).unwrap()) {
            failures.push(format!("{}: answer {:?} but scene says {answer_name:?}", s.id, s.answer));
            continue;
        }
        // The target's pixels carry its palette color and nothing else does.
        let target = &objects[s.target_object];
        let rgb = config.palette[target.color].rgb.map(|c| c as f32 / 255.0);
        let mask = s.target_mask();
        let painted = mask.indexed_iter().filter(|(_, &m)| m).all(|((y, x), _)| {
            (0..3).all(|c| (s.image[[c, y, x]] - rgb[c]).abs() < 1e-6) && target.contains(x, y)
        });
        if !painted || !mask.iter().any(|&m| m) {
            failures.push(format!("{}: target mask does not match its pixels", s.id));
        }
    }
    Check::new(
        failures.is_empty() && samples.len() == n,
        format!(
            "{}/{} samples pass{}",
            samples.len() - failures.len(),
            n,
            failures.first().map(|f| format!(" (first failure: {f})")).unwrap_or_default()
        ),
    )
}

/// A deliberately small pipeline for smoke tests: 64/16 samples, narrow
/// networks.
pub fn smoke_config() -> cfvqa_core::config::Config {
    let mut c = cfvqa_core::config::Config::default();
    c.data.train_size = 64;
    c.data.val_size = 16;
    c.vqa.conv_channels = vec![8, 8, 8, 8];
    c.generator.channels = vec![8, 16, 16];
    c.discriminator.channels = vec![8, 16, 16];
    c.train.vqa_epochs = 25;
    c.train.cf_steps = 8;
    c.train.cf_batch_size = 4;
    c
}
