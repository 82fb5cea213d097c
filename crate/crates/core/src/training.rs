//! Optimisation of the appearance field: L1 colour loss on transfer samples
//! plus a scheduled difference-of-Gaussians edge loss on rendered patches.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correspondence::{TransferSample, TransferSamples};
use crate::field::{AdamState, EncodingConfig, FieldArch, FieldError, FieldInput, FieldParameters};
use crate::par;
use crate::raster::{Image, RasterError, LUMA};
use crate::scene::GBufferView;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("sigma must be > 0, got {0}")]
    Sigma(f64),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no transfer samples")]
    NoSamples,
    #[error("no target views for the edge loss")]
    NoViews,
    #[error("non-finite loss at iteration {iter}{}", checkpoint.as_ref().map(|p| format!(", diagnostic checkpoint at {}", p.display())).unwrap_or_default())]
    NonFinite { iter: usize, checkpoint: Option<PathBuf> },
}

/// Normalised, symmetric 1-D Gaussian of radius `ceil(3 sigma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    pub sigma: f64,
    pub taps: Vec<f64>,
}

impl GaussianKernel {
    pub fn radius(&self) -> usize {
        self.taps.len() / 2
    }
}

pub fn gaussian_kernel(sigma: f64) -> Result<GaussianKernel, TrainError> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(TrainError::Sigma(sigma));
    }
    let r = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-r..=r).map(|t| (-((t * t) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    Ok(GaussianKernel { sigma, taps: raw.into_iter().map(|v| v / total).collect() })
}

#[inline]
fn clamp_index(i: i64, n: usize) -> usize {
    i.clamp(0, n as i64 - 1) as usize
}

/// Separable blur of one `w x h` plane with edge clamping.
pub fn blur_plane(data: &[f64], w: usize, h: usize, k: &GaussianKernel) -> Vec<f64> {
    let r = k.radius() as i64;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, t) in k.taps.iter().enumerate() {
                acc += t * data[y * w + clamp_index(x as i64 + j as i64 - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, t) in k.taps.iter().enumerate() {
                acc += t * tmp[clamp_index(y as i64 + j as i64 - r, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Transpose of [`blur_plane`]: clamped taps scatter back onto the border.
pub fn blur_plane_adjoint(grad: &[f64], w: usize, h: usize, k: &GaussianKernel) -> Vec<f64> {
    let r = k.radius() as i64;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let g = grad[y * w + x];
            for (j, t) in k.taps.iter().enumerate() {
                tmp[clamp_index(y as i64 + j as i64 - r, h) * w + x] += t * g;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let g = tmp[y * w + x];
            for (j, t) in k.taps.iter().enumerate() {
                out[y * w + clamp_index(x as i64 + j as i64 - r, w)] += t * g;
            }
        }
    }
    out
}

/// Channel-wise blur of an image.
pub fn blur(img: &Image, k: &GaussianKernel) -> Image {
    let (w, h, c) = img.shape();
    let mut out = Image::new(w, h, c);
    for ch in 0..c {
        let plane: Vec<f64> = (0..w * h).map(|i| img.data[i * c + ch] as f64).collect();
        for (i, v) in blur_plane(&plane, w, h, k).into_iter().enumerate() {
            out.data[i * c + ch] = v as f32;
        }
    }
    out
}

/// Rec. 709 luma of an RGB image (single-channel images pass through).
pub fn grayscale(img: &Image) -> Image {
    img.to_gray()
}

/// `mean |G1 * current - G2 * target|` over pixels and its gradient with
/// respect to `current`, on grayscale planes in double precision.
pub fn dog_loss_plane(
    current: &[f64],
    target: &[f64],
    w: usize,
    h: usize,
    sigma1: f64,
    sigma2: f64,
) -> Result<(f64, Vec<f64>), TrainError> {
    if current.len() != w * h || target.len() != w * h {
        return Err(TrainError::Raster(RasterError::SizeMismatch {
            left: (w, h, 1),
            right: (current.len().max(target.len()), 1, 1),
        }));
    }
    let k1 = gaussian_kernel(sigma1)?;
    let k2 = gaussian_kernel(sigma2)?;
    let a = blur_plane(current, w, h, &k1);
    let b = blur_plane(target, w, h, &k2);
    let n = (w * h).max(1) as f64;
    let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let loss = par::tree_sum(&diff.iter().map(|d| d.abs()).collect::<Vec<_>>()) / n;
    let sign: Vec<f64> = diff.iter().map(|d| if *d > 0.0 { 1.0 / n } else if *d < 0.0 { -1.0 / n } else { 0.0 }).collect();
    Ok((loss, blur_plane_adjoint(&sign, w, h, &k1)))
}

/// DoG edge loss between grayscale images; RGB inputs are converted first.
/// The returned gradient is with respect to the grayscale `current`.
pub fn dog_loss(current: &Image, target: &Image, sigma1: f64, sigma2: f64) -> Result<(f64, Image), TrainError> {
    current.ensure_same_shape(target).or_else(|e| {
        if current.width == target.width && current.height == target.height {
            Ok(())
        } else {
            Err(e)
        }
    })?;
    let c = grayscale(current);
    let t = grayscale(target);
    let to64 = |i: &Image| i.data.iter().map(|v| *v as f64).collect::<Vec<_>>();
    let (loss, g) = dog_loss_plane(&to64(&c), &to64(&t), c.width, c.height, sigma1, sigma2)?;
    Ok((loss, Image::from_gray(c.width, c.height, g.into_iter().map(|v| v as f32).collect())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeReference {
    /// Target view coloured through the mapping.
    Transfer,
    /// The target's own appearance-free shading.
    Geometry,
}

impl std::str::FromStr for EdgeReference {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "transfer" => Ok(Self::Transfer),
            "geometry" => Ok(Self::Geometry),
            other => Err(format!("unknown edge reference {other:?} (expected transfer|geometry)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_max: f64,
    pub lambda_start_frac: f64,
    pub lambda_ramp_end_frac: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub edge_patch: usize,
    /// Edge loss is evaluated every `edge_period` iterations once `lambda > 0`.
    pub edge_period: usize,
    pub edge_reference: EdgeReference,
    pub seed: u64,
    pub init_seed: u64,
    pub encoding: EncodingConfig,
    pub arch: FieldArch,
    /// Where to dump parameters if the loss blows up.
    #[serde(skip)]
    pub diagnostic_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iters: 60_000,
            batch_size: 512,
            lr: 1e-4,
            lambda_max: 50.0,
            lambda_start_frac: 0.15,
            lambda_ramp_end_frac: 0.5,
            sigma1: 1.0,
            sigma2: 1.6,
            edge_patch: 64,
            edge_period: 1,
            edge_reference: EdgeReference::Transfer,
            seed: 0,
            init_seed: 1,
            encoding: EncodingConfig::default(),
            arch: FieldArch::default(),
            diagnostic_checkpoint: None,
        }
    }
}

impl TrainConfig {
    /// Every violated invariant, each prefixed with its field path.
    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        let p = |f: &str| if prefix.is_empty() { f.to_string() } else { format!("{prefix}.{f}") };
        if self.total_iters == 0 {
            out.push(format!("{}: must be >= 1", p("total_iters")));
        }
        if self.batch_size == 0 {
            out.push(format!("{}: must be >= 1", p("batch_size")));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            out.push(format!("{}: must be a positive number", p("lr")));
        }
        if !(self.lambda_max >= 0.0) || !self.lambda_max.is_finite() {
            out.push(format!("{}: must be >= 0", p("lambda_max")));
        }
        let (s, e) = (self.lambda_start_frac, self.lambda_ramp_end_frac);
        if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&e) || s > e {
            out.push(format!(
                "{} = {s} and {} = {e}: need 0 <= lambda_start_frac <= lambda_ramp_end_frac <= 1",
                p("lambda_start_frac"),
                p("lambda_ramp_end_frac")
            ));
        }
        if !(self.sigma1 > 0.0) {
            out.push(format!("{}: must be > 0", p("sigma1")));
        }
        if !(self.sigma2 > self.sigma1) {
            out.push(format!("{}: sigma2 must exceed sigma1 ({} <= {})", p("sigma2"), self.sigma2, self.sigma1));
        }
        if self.edge_patch == 0 {
            out.push(format!("{}: must be >= 1", p("edge_patch")));
        }
        if self.edge_period == 0 {
            out.push(format!("{}: must be >= 1", p("edge_period")));
        }
        if let Err(e) = self.arch.validate() {
            out.push(format!("{}: {e}", p("arch")));
        }
        out
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let problems = self.problems("");
        if problems.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(problems.join("; ")))
        }
    }
}

/// Edge-loss weight at `iter`: zero, then a linear ramp, then `lambda_max`.
pub fn lambda_schedule(iter: usize, cfg: &TrainConfig) -> f64 {
    let total = cfg.total_iters as f64;
    let start = cfg.lambda_start_frac * total;
    let end = cfg.lambda_ramp_end_frac * total;
    let it = iter as f64;
    if it < start {
        0.0
    } else if it >= end {
        cfg.lambda_max
    } else {
        cfg.lambda_max * (it - start) / (end - start)
    }
}

pub fn sample_input(s: &TransferSample) -> FieldInput<f32> {
    FieldInput { position: s.position, normal: s.normal, view_dir: s.view_dir }
}

pub fn pixel_input(view: &GBufferView, i: usize) -> FieldInput<f32> {
    FieldInput { position: view.position[i], normal: view.normal[i], view_dir: view.view_dir[i] }
}

/// Deferred shading of the field: queries every covered pixel with the
/// G-buffer's position, normal and view direction. Background stays 0.
pub fn render_field(params: &FieldParameters<f32>, view: &GBufferView) -> Result<Image, TrainError> {
    let covered = view.covered_indices();
    let inputs: Vec<FieldInput<f32>> = covered.iter().map(|&i| pixel_input(view, i)).collect();
    let rgb = params.forward_batch(&inputs)?;
    let mut img = Image::new(view.width(), view.height(), 3);
    for (&i, c) in covered.iter().zip(rgb) {
        img.data[i * 3..i * 3 + 3].copy_from_slice(&c);
    }
    Ok(img)
}

/// Appearance-free headlight shading `0.8 max(0, n . w)` of a view, as RGB.
pub fn geometry_reference(view: &GBufferView) -> Image {
    let mut img = Image::new(view.width(), view.height(), 3);
    for i in view.covered_indices() {
        let (n, w) = (view.normal[i], view.view_dir[i]);
        let g = 0.8 * (n[0] * w[0] + n[1] * w[1] + n[2] * w[2]).max(0.0);
        img.data[i * 3..i * 3 + 3].copy_from_slice(&[g; 3]);
    }
    img
}

/// A target view together with the image its edges should follow.
#[derive(Debug, Clone)]
pub struct EdgeView {
    pub view: GBufferView,
    pub reference: Image,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub iter: usize,
    pub color_loss: f64,
    pub edge_loss: Option<f64>,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: FieldParameters<f32>,
    pub history: Vec<LossRow>,
}

impl TrainOutcome {
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("iter,color_loss,edge_loss,lambda\n");
        for r in &self.history {
            let e = r.edge_loss.map(|v| format!("{v:.8}")).unwrap_or_default();
            s.push_str(&format!("{},{:.8},{},{}\n", r.iter, r.color_loss, e, r.lambda));
        }
        s
    }

    pub fn final_color_loss(&self, window: usize) -> f64 {
        let n = window.min(self.history.len()).max(1);
        self.history.iter().rev().take(n).map(|r| r.color_loss).sum::<f64>() / n as f64
    }
}

struct PatchGrad {
    loss: f64,
    grad: Vec<f32>,
}

fn edge_patch_gradient(
    params: &FieldParameters<f32>,
    ev: &EdgeView,
    cfg: &TrainConfig,
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Option<PatchGrad>, TrainError> {
    let (w, h) = (ev.view.width(), ev.view.height());
    let pw = cfg.edge_patch.min(w);
    let ph = cfg.edge_patch.min(h);
    let x0 = rng.random_range(0..=w - pw);
    let y0 = rng.random_range(0..=h - ph);
    let mut pixels = Vec::new();
    for y in y0..y0 + ph {
        for x in x0..x0 + pw {
            let i = y * w + x;
            if ev.view.is_covered(i) {
                pixels.push(((y - y0) * pw + (x - x0), i));
            }
        }
    }
    if pixels.is_empty() {
        return Ok(None);
    }
    let inputs: Vec<FieldInput<f32>> = pixels.iter().map(|&(_, i)| pixel_input(&ev.view, i)).collect();
    let rgb = params.forward_batch(&inputs)?;
    let mut current = vec![0.0f64; pw * ph];
    for (&(p, _), c) in pixels.iter().zip(&rgb) {
        current[p] = (LUMA[0] * c[0] + LUMA[1] * c[1] + LUMA[2] * c[2]) as f64;
    }
    let reference = ev.reference.crop(x0, y0, pw, ph).to_gray();
    let target: Vec<f64> = reference.data.iter().map(|v| *v as f64).collect();
    let (loss, g) = dog_loss_plane(&current, &target, pw, ph, cfg.sigma1, cfg.sigma2)?;
    let upstream: Vec<[f32; 3]> = pixels
        .iter()
        .map(|&(p, _)| {
            let gp = (lambda * g[p]) as f32;
            [LUMA[0] * gp, LUMA[1] * gp, LUMA[2] * gp]
        })
        .collect();
    Ok(Some(PatchGrad { loss, grad: params.backward(&inputs, &upstream) }))
}

/// Fits a fresh field to `samples`, with the edge loss evaluated on
/// `edge_views` whenever the schedule makes it active.
pub fn train(samples: &TransferSamples, edge_views: &[EdgeView], cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let init = FieldParameters::<f32>::new(cfg.encoding, cfg.arch, cfg.init_seed)?;
    train_from(init, samples, edge_views, cfg)
}

/// As [`train`], starting from the given parameters.
pub fn train_from(
    mut params: FieldParameters<f32>,
    samples: &TransferSamples,
    edge_views: &[EdgeView],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(TrainError::NoSamples);
    }
    if cfg.lambda_max > 0.0 && edge_views.is_empty() {
        return Err(TrainError::NoViews);
    }
    let mut adam = AdamState::<f32>::new(params.param_count(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.total_iters);
    let mut inputs = Vec::with_capacity(cfg.batch_size);
    let mut refs = Vec::with_capacity(cfg.batch_size);
    for iter in 0..cfg.total_iters {
        inputs.clear();
        refs.clear();
        for _ in 0..cfg.batch_size {
            let s = &samples.samples[rng.random_range(0..samples.len())];
            inputs.push(sample_input(s));
            refs.push(s.rgb);
        }
        let (color_loss, mut grad) = params.l1_loss_and_gradient(&inputs, &refs, None);
        let color_loss = color_loss as f64;
        let lambda = lambda_schedule(iter, cfg);
        let mut edge_loss = None;
        if lambda > 0.0 && iter % cfg.edge_period == 0 {
            let ev = &edge_views[rng.random_range(0..edge_views.len())];
            if let Some(pg) = edge_patch_gradient(&params, ev, cfg, lambda, &mut rng)? {
                for (g, e) in grad.iter_mut().zip(&pg.grad) {
                    *g += *e;
                }
                edge_loss = Some(pg.loss);
            }
        }
        let total = color_loss + lambda * edge_loss.unwrap_or(0.0);
        if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            let checkpoint = cfg.diagnostic_checkpoint.clone();
            if let Some(path) = &checkpoint {
                crate::field::save_checkpoint(&params, path)?;
            }
            return Err(TrainError::NonFinite { iter, checkpoint });
        }
        adam.step(&mut params.params, &grad);
        history.push(LossRow { iter, color_loss, edge_loss, lambda });
        if iter % 1000 == 0 {
            log::debug!("iter {iter}: color {color_loss:.5} edge {edge_loss:?} lambda {lambda:.2}");
        }
    }
    Ok(TrainOutcome { params, history })
}

/// Mean DoG discrepancy of full renders against reference images.
pub fn mean_dog_discrepancy(
    params: &FieldParameters<f32>,
    views: &[EdgeView],
    sigma1: f64,
    sigma2: f64,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for ev in views {
        let img = render_field(params, &ev.view)?;
        total += dog_loss(&img, &ev.reference, sigma1, sigma2)?.0;
    }
    Ok(total / views.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{presets, render_gbuffer, sample_camera_sphere, Intrinsics};
    use proptest::prelude::*;

    #[test]
    fn kernel_properties() {
        let k = gaussian_kernel(1.0).unwrap();
        assert_eq!(k.taps.len(), 7);
        assert_eq!(gaussian_kernel(1.6).unwrap().taps.len(), 11);
        for s in [0.3, 1.0, 1.6, 2.5, 7.1] {
            let k = gaussian_kernel(s).unwrap();
            assert!((k.taps.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let n = k.taps.len();
            for t in 0..n {
                assert_eq!(k.taps[t], k.taps[n - 1 - t]);
            }
        }
        assert!(gaussian_kernel(0.0).is_err());
        assert!(gaussian_kernel(-1.0).is_err());
    }

    #[test]
    fn grayscale_examples() {
        let img = Image::from_rgb(3, 1, &[[1.0; 3], [0.0; 3], [1.0, 0.0, 0.0]]);
        let g = grayscale(&img);
        assert!((g.data[0] - 1.0).abs() < 1e-6);
        assert_eq!(g.data[1], 0.0);
        assert!((g.data[2] - 0.2126).abs() < 1e-7);
    }

    #[test]
    fn dog_loss_constants() {
        let a = Image::filled(9, 7, &[0.3]);
        assert!(dog_loss(&a, &a, 1.0, 1.6).unwrap().0.abs() < 1e-7);
        let b = Image::filled(9, 7, &[0.8]);
        assert!((dog_loss(&a, &b, 1.0, 1.6).unwrap().0 - 0.5).abs() < 1e-6);
        assert!(dog_loss(&a, &Image::filled(4, 4, &[0.1]), 1.0, 1.6).is_err());
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (w, h) = (9, 6);
        let k = gaussian_kernel(1.6).unwrap();
        let x: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bx = blur_plane(&x, w, h, &k);
        let aty = blur_plane_adjoint(&y, w, h, &k);
        let lhs: f64 = bx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn dog_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (w, h) = (8, 8);
        let cur: Vec<f64> = (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect();
        let tgt: Vec<f64> = (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect();
        let (_, g) = dog_loss_plane(&cur, &tgt, w, h, 1.0, 1.6).unwrap();
        let eps = 1e-7;
        for i in 0..w * h {
            let mut p = cur.clone();
            p[i] += eps;
            let mut m = cur.clone();
            m[i] -= eps;
            let fd = (dog_loss_plane(&p, &tgt, w, h, 1.0, 1.6).unwrap().0 - dog_loss_plane(&m, &tgt, w, h, 1.0, 1.6).unwrap().0) / (2.0 * eps);
            assert!((fd - g[i]).abs() < 1e-5, "pixel {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn schedule_points() {
        let cfg = TrainConfig::default();
        assert_eq!(lambda_schedule(0, &cfg), 0.0);
        assert_eq!(lambda_schedule(8_999, &cfg), 0.0);
        assert_eq!(lambda_schedule(cfg.total_iters - 1, &cfg), 50.0);
        let mid = ((0.15 + 0.5) / 2.0 * 60_000.0) as usize;
        assert!((lambda_schedule(mid, &cfg) - 25.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn schedule_is_monotone(total in 1usize..5000, s in 0.0f64..1.0, span in 0.0f64..1.0) {
            let e = s + (1.0 - s) * span;
            let cfg = TrainConfig { total_iters: total, lambda_start_frac: s, lambda_ramp_end_frac: e, ..TrainConfig::default() };
            let mut prev = 0.0;
            for it in 0..total {
                let l = lambda_schedule(it, &cfg);
                prop_assert!(l >= prev && l >= 0.0 && l <= cfg.lambda_max);
                prev = l;
            }
        }
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = TrainConfig { lambda_start_frac: 0.9, lambda_ramp_end_frac: 0.5, ..TrainConfig::default() };
        let p = bad.problems("train").join("\n");
        assert!(p.contains("train.lambda_start_frac") && p.contains("train.lambda_ramp_end_frac"));
        let bad = TrainConfig { sigma2: 1.0, ..TrainConfig::default() };
        assert!(bad.problems("").join("").contains("sigma2 must exceed sigma1"));
        assert!(TrainConfig::default().validate().is_ok());
    }

    fn small_view() -> GBufferView {
        let cam = sample_camera_sphere(1, 3.0, 4, Intrinsics { fov_y: 40f64.to_radians(), width: 24, height: 24 }).remove(0);
        render_gbuffer(&presets::two_spheres(), &cam).unwrap()
    }

    #[test]
    fn render_zero_output_and_repeatability() {
        let view = small_view();
        let p = FieldParameters::<f32>::new(EncodingConfig::default(), FieldArch::tiny(), 0).unwrap().zero_output_layer();
        let img = render_field(&p, &view).unwrap();
        for i in 0..view.pixel_count() {
            let want = if view.is_covered(i) { 0.5 } else { 0.0 };
            assert!(img.data[i * 3..i * 3 + 3].iter().all(|v| *v == want));
        }
        let p = FieldParameters::<f32>::new(EncodingConfig::default(), FieldArch::tiny(), 5).unwrap();
        assert_eq!(render_field(&p, &view).unwrap(), render_field(&p, &view).unwrap());
    }

    fn constant_samples(view: &GBufferView, color: [f32; 3]) -> TransferSamples {
        TransferSamples {
            samples: view
                .covered_indices()
                .into_iter()
                .map(|i| TransferSample { position: view.position[i], normal: view.normal[i], view_dir: view.view_dir[i], rgb: color })
                .collect(),
        }
    }

    fn quick_cfg(iters: usize) -> TrainConfig {
        TrainConfig {
            total_iters: iters,
            batch_size: 64,
            lr: 1e-3,
            lambda_max: 0.0,
            edge_patch: 8,
            arch: FieldArch { hidden_layers: 2, hidden_width: 32, head_width: 16, skip_layer: None },
            encoding: EncodingConfig { position_freqs: 4, direction_freqs: 2, include_raw: true },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn constant_color_convergence() {
        let view = small_view();
        let color = [0.8, 0.3, 0.55];
        let cfg = TrainConfig { lr: 3e-4, arch: FieldArch::tiny(), ..quick_cfg(2000) };
        let out = train(&constant_samples(&view, color), &[], &cfg).unwrap();
        let img = render_field(&out.params, &view).unwrap();
        for i in view.covered_indices() {
            for c in 0..3 {
                assert!((img.data[i * 3 + c] - color[c]).abs() <= 1.0 / 255.0, "pixel {i}: {:?}", &img.data[i * 3..i * 3 + 3]);
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_edge_loss_runs() {
        let view = small_view();
        let samples = constant_samples(&view, [0.2, 0.6, 0.4]);
        let ev = EdgeView { reference: view.rgb_image(), view };
        let cfg = TrainConfig { lambda_max: 5.0, lambda_start_frac: 0.0, lambda_ramp_end_frac: 0.5, ..quick_cfg(30) };
        let a = train(&samples, std::slice::from_ref(&ev), &cfg).unwrap();
        let b = train(&samples, std::slice::from_ref(&ev), &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert!(a.history.iter().any(|r| r.edge_loss.is_some()));
        assert!(a.loss_csv().starts_with("iter,color_loss,edge_loss,lambda\n"));
        assert_eq!(a.loss_csv().lines().count(), 31);
    }

    #[test]
    fn non_finite_loss_aborts_with_checkpoint() {
        let view = small_view();
        let mut samples = constant_samples(&view, [0.5; 3]);
        samples.samples[0].rgb = [f32::NAN; 3];
        samples.samples.truncate(1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("diag.nfld");
        let cfg = TrainConfig { diagnostic_checkpoint: Some(path.clone()), ..quick_cfg(5) };
        match train(&samples, &[], &cfg) {
            Err(TrainError::NonFinite { iter: 0, checkpoint: Some(p) }) => assert!(p.exists()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn trained_field_depends_on_view_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let dirs = [[0.0f32, 0.0, 1.0], [1.0, 0.0, 0.0]];
        let colors = [[0.9f32, 0.2, 0.1], [0.1, 0.3, 0.9]];
        let mut samples = Vec::new();
        let mut probes = Vec::new();
        for _ in 0..64 {
            let position: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
            let normal = [0.0, 1.0, 0.0];
            probes.push((position, normal));
            for (d, c) in dirs.iter().zip(colors) {
                samples.push(TransferSample { position, normal, view_dir: *d, rgb: c });
            }
        }
        let out = train(&TransferSamples { samples }, &[], &quick_cfg(1500)).unwrap();
        for (position, normal) in probes.iter().take(8) {
            let at = |d: [f32; 3]| out.params.forward(&FieldInput { position: *position, normal: *normal, view_dir: d }).unwrap();
            let (a, b) = (at(dirs[0]), at(dirs[1]));
            assert!((a[0] - b[0]).abs() > 0.3 && (a[2] - b[2]).abs() > 0.3, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn colour_loss_falls_on_self_analogy() {
        use crate::correspondence::{assemble_training_set, build_mapping, sample_points};
        use crate::features::{builtin_descriptor, DescriptorConfig};
        let scene = presets::checker_pair();
        let intr = Intrinsics { fov_y: 40f64.to_radians(), width: 64, height: 64 };
        let set = |seed| -> Vec<_> {
            sample_camera_sphere(4, 4.0, seed, intr)
                .iter()
                .map(|c| {
                    let v = render_gbuffer(&scene, c).unwrap();
                    let f = builtin_descriptor(&v, &DescriptorConfig::default()).unwrap();
                    (v, f)
                })
                .collect()
        };
        let t = sample_points(&set(1), 600, 2).unwrap();
        let s = sample_points(&set(3), 600, 4).unwrap();
        let samples = assemble_training_set(&build_mapping(&t, &s, 10, None).unwrap(), &t, &s);
        let cfg = TrainConfig { batch_size: 512, arch: FieldArch::tiny(), encoding: EncodingConfig::default(), ..quick_cfg(2000) };
        let out = train(&samples, &[], &cfg).unwrap();
        let first: f64 = out.history[..50].iter().map(|r| r.color_loss).sum::<f64>() / 50.0;
        assert!(out.history[1999].color_loss < first, "{} vs {first}", out.history[1999].color_loss);
    }
}
