//! Image metrics, view splits, the bootstrapped consistency protocol and
//! alpha compositing.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correspondence::{TransferSample, TransferSamples};
use crate::field::FieldParameters;
use crate::par;
use crate::raster::{Image, RasterError};
use crate::scene::GBufferView;
use crate::training::{render_field, train, EdgeView, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("image {width}x{height} is smaller than the {window}x{window} SSIM window")]
    TooSmall { width: usize, height: usize, window: usize },
    #[error("split expects {expected} views, got {actual}")]
    SplitCount { expected: usize, actual: usize },
    #[error("invalid split: train {train} + val {val} + test {test} != total {total}")]
    SplitSizes { total: usize, train: usize, val: usize, test: usize },
    #[error("bootstrap: {0}")]
    Bootstrap(String),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Reported in place of +inf for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
    }
}

pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64, EvalError> {
    a.ensure_same_shape(b)?;
    let sq: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| ((*x as f64) - (*y as f64)).powi(2)).collect();
    Ok(psnr_from_mse(par::tree_sum(&sq) / sq.len().max(1) as f64, peak))
}

/// PSNR over the pixels where `mask > 0.5`, all channels.
pub fn psnr_masked(a: &Image, b: &Image, mask: &[f32], peak: f64) -> Result<f64, EvalError> {
    a.ensure_same_shape(b)?;
    if mask.len() != a.pixel_count() {
        return Err(RasterError::SizeMismatch { left: a.shape(), right: (mask.len(), 1, 1) }.into());
    }
    let c = a.channels;
    let mut sq = Vec::new();
    for (i, m) in mask.iter().enumerate() {
        if *m > 0.5 {
            for k in 0..c {
                sq.push(((a.data[i * c + k] as f64) - (b.data[i * c + k] as f64)).powi(2));
            }
        }
    }
    Ok(psnr_from_mse(par::tree_sum(&sq) / sq.len().max(1) as f64, peak))
}

/// Mean SSIM over all 8x8 windows (stride 1) of the grayscale images.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, EvalError> {
    ssim_with_peak(a, b, 1.0)
}

pub fn ssim_with_peak(a: &Image, b: &Image, peak: f64) -> Result<f64, EvalError> {
    a.ensure_same_shape(b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(EvalError::TooSmall { width: w, height: h, window: SSIM_WINDOW });
    }
    let ga: Vec<f64> = a.to_gray().data.iter().map(|v| *v as f64).collect();
    let gb: Vec<f64> = b.to_gray().data.iter().map(|v| *v as f64).collect();
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let rows = h - SSIM_WINDOW + 1;
    let cols = w - SSIM_WINDOW + 1;
    let per_row = par::map_range(rows, |y0| {
        let mut vals = Vec::with_capacity(cols);
        for x0 in 0..cols {
            let (mut sa, mut sb) = (0.0, 0.0);
            for y in y0..y0 + SSIM_WINDOW {
                for x in x0..x0 + SSIM_WINDOW {
                    sa += ga[y * w + x];
                    sb += gb[y * w + x];
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
            for y in y0..y0 + SSIM_WINDOW {
                for x in x0..x0 + SSIM_WINDOW {
                    let (p, q) = (ga[y * w + x] - ma, gb[y * w + x] - mb);
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (va, vb, cov) = (saa / n, sbb / n, sab / n);
            vals.push(((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)));
        }
        par::tree_sum(&vals)
    });
    Ok(par::tree_sum(&per_row) / (rows * cols) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub total: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { total: 200, train: 100, val: 20, test: 80, seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.train + self.val + self.test != self.total {
            return Err(EvalError::SplitSizes { total: self.total, train: self.train, val: self.val, test: self.test });
        }
        Ok(())
    }
}

/// View indices of each part, ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded random partition of `poses` into train / val / test.
pub fn make_split<T>(spec: &SplitSpec, poses: &[T]) -> Result<Split, EvalError> {
    spec.validate()?;
    if poses.len() != spec.total {
        return Err(EvalError::SplitCount { expected: spec.total, actual: poses.len() });
    }
    let mut idx: Vec<usize> = (0..spec.total).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let take = |r: std::ops::Range<usize>| {
        let mut v = idx[r].to_vec();
        v.sort_unstable();
        v
    };
    Ok(Split {
        train: take(0..spec.train),
        val: take(spec.train..spec.train + spec.val),
        test: take(spec.train + spec.val..spec.total),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Direct,
    Bootstrapped,
}

impl std::str::FromStr for Protocol {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "direct" => Ok(Self::Direct),
            "bootstrap" | "bootstrapped" => Ok(Self::Bootstrapped),
            other => Err(format!("unknown protocol {other:?} (expected direct|bootstrap)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewMetric {
    pub view_index: usize,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub protocol: Protocol,
    pub rows: Vec<ViewMetric>,
}

impl MetricReport {
    pub fn new(protocol: Protocol, mut rows: Vec<ViewMetric>) -> Self {
        rows.sort_by_key(|r| r.view_index);
        Self { protocol, rows }
    }

    fn mean(&self, f: impl Fn(&ViewMetric) -> f64) -> f64 {
        let v: Vec<f64> = self.rows.iter().map(f).collect();
        par::tree_sum(&v) / v.len().max(1) as f64
    }

    pub fn mean_psnr(&self) -> f64 {
        self.mean(|r| r.psnr_db)
    }

    pub fn mean_ssim(&self) -> f64 {
        self.mean(|r| r.ssim)
    }

    pub fn min_psnr(&self) -> f64 {
        self.rows.iter().map(|r| r.psnr_db).fold(f64::INFINITY, f64::min)
    }

    pub fn min_ssim(&self) -> f64 {
        self.rows.iter().map(|r| r.ssim).fold(f64::INFINITY, f64::min)
    }

    pub fn summary(&self) -> String {
        let tag = match self.protocol {
            Protocol::Direct => "direct",
            Protocol::Bootstrapped => "bootstrapped",
        };
        format!(
            "protocol={tag} views={} mean_psnr_db={:.4} min_psnr_db={:.4} mean_ssim={:.6} min_ssim={:.6}",
            self.rows.len(),
            self.mean_psnr(),
            self.min_psnr(),
            self.mean_ssim(),
            self.min_ssim()
        )
    }

    /// `view_index,psnr_db,ssim` rows followed by a `# ` summary line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("view_index,psnr_db,ssim\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:.6},{:.8}\n", r.view_index, r.psnr_db, r.ssim));
        }
        s.push_str(&format!("# {}\n", self.summary()));
        s
    }
}

/// PSNR over covered pixels and SSIM over the full frame.
pub fn view_metric(view_index: usize, render: &Image, reference: &Image, alpha: &[f32]) -> Result<ViewMetric, EvalError> {
    Ok(ViewMetric { view_index, psnr_db: psnr_masked(render, reference, alpha, 1.0)?, ssim: ssim(render, reference)? })
}

/// Renders compared directly against reference images.
pub fn direct_metrics(
    params: &FieldParameters<f32>,
    views: &[(usize, &GBufferView, &Image)],
) -> Result<MetricReport, EvalError> {
    let rows = views
        .iter()
        .map(|(i, v, reference)| {
            let img = render_field(params, v)?.quantized();
            view_metric(*i, &img, &reference.quantized(), &v.alpha)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MetricReport::new(Protocol::Direct, rows))
}

/// Supervision for the refit: every covered train-view pixel, coloured by
/// the 8-bit render of the analogy field. G-buffer colours are not read.
pub fn bootstrap_supervision(
    analogy: &FieldParameters<f32>,
    train_views: &[&GBufferView],
) -> Result<(TransferSamples, Vec<EdgeView>), EvalError> {
    let renders = train_views.iter().map(|v| render_field(analogy, v)).collect::<Result<Vec<_>, _>>()?;
    Ok(supervision_from_renders(train_views, &renders))
}

fn supervision_from_renders(train_views: &[&GBufferView], renders: &[Image]) -> (TransferSamples, Vec<EdgeView>) {
    let mut samples = Vec::new();
    let mut edges = Vec::with_capacity(train_views.len());
    for (v, img) in train_views.iter().zip(renders) {
        let img = img.quantized();
        for i in v.covered_indices() {
            let c = &img.data[i * 3..i * 3 + 3];
            samples.push(TransferSample {
                position: v.position[i],
                normal: v.normal[i],
                view_dir: v.view_dir[i],
                rgb: [c[0], c[1], c[2]],
            });
        }
        edges.push(EdgeView { view: GBufferView { rgb: vec![[0.0; 3]; v.pixel_count()], ..(*v).clone() }, reference: img });
    }
    (TransferSamples { samples }, edges)
}

pub struct BootstrapOutcome {
    pub report: MetricReport,
    pub refit: FieldParameters<f32>,
}

/// Renders the analogy on the train views, fits a fresh field to those
/// renders and compares both fields on the test views.
pub fn bootstrap_metrics(
    analogy: &FieldParameters<f32>,
    views: &[GBufferView],
    split: &Split,
    refit_cfg: &TrainConfig,
) -> Result<BootstrapOutcome, EvalError> {
    bootstrap_renders(|_, v| Ok(render_field(analogy, v)?), views, split, refit_cfg)
}

/// Bootstrap protocol over any renderer: `render(view_index, view)` gives a
/// method's image for a view. Renders are quantized to 8 bits before use.
pub fn bootstrap_renders<F>(
    render: F,
    views: &[GBufferView],
    split: &Split,
    refit_cfg: &TrainConfig,
) -> Result<BootstrapOutcome, EvalError>
where
    F: Fn(usize, &GBufferView) -> Result<Image, EvalError> + Sync,
{
    let get = |i: &usize| {
        views.get(*i).ok_or_else(|| EvalError::Bootstrap(format!("split references view {i} but only {} exist", views.len())))
    };
    let train_views = split.train.iter().map(get).collect::<Result<Vec<_>, _>>()?;
    let test_views = split.test.iter().map(|i| get(i).map(|v| (*i, v))).collect::<Result<Vec<_>, _>>()?;
    let renders = split.train.iter().zip(&train_views).map(|(&i, v)| render(i, v)).collect::<Result<Vec<_>, _>>()?;
    let (samples, edges) = supervision_from_renders(&train_views, &renders);
    if samples.is_empty() {
        return Err(EvalError::Bootstrap("train views have no covered pixels".into()));
    }
    let refit = train(&samples, &edges, refit_cfg)?.params;
    let rows = par::map_slice(&test_views, |(i, v)| -> Result<ViewMetric, EvalError> {
        let a = render(*i, v)?.quantized();
        let b = render_field(&refit, v)?.quantized();
        view_metric(*i, &b, &a, &v.alpha)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    Ok(BootstrapOutcome { report: MetricReport::new(Protocol::Bootstrapped, rows), refit })
}

/// Attaches an alpha plane to an RGB image.
pub fn with_alpha(rgb: &Image, alpha: &[f32]) -> Result<Image, EvalError> {
    if rgb.channels != 3 {
        return Err(RasterError::Channels { expected: 3, actual: rgb.channels }.into());
    }
    if alpha.len() != rgb.pixel_count() {
        return Err(RasterError::SizeMismatch { left: rgb.shape(), right: (alpha.len(), 1, 1) }.into());
    }
    let mut out = Image::new(rgb.width, rgb.height, 4);
    for i in 0..rgb.pixel_count() {
        out.data[i * 4..i * 4 + 3].copy_from_slice(&rgb.data[i * 3..i * 3 + 3]);
        out.data[i * 4 + 3] = alpha[i];
    }
    Ok(out)
}

/// Painter's-algorithm alpha-over: `alpha * fg + (1 - alpha) * bg`.
pub fn composite(fg: &Image, bg: &Image) -> Result<Image, EvalError> {
    if fg.channels != 4 {
        return Err(RasterError::Channels { expected: 4, actual: fg.channels }.into());
    }
    if bg.channels != 3 {
        return Err(RasterError::Channels { expected: 3, actual: bg.channels }.into());
    }
    if fg.width != bg.width || fg.height != bg.height {
        return Err(RasterError::SizeMismatch { left: fg.shape(), right: bg.shape() }.into());
    }
    let mut out = Image::new(bg.width, bg.height, 3);
    for i in 0..bg.pixel_count() {
        let a = fg.data[i * 4 + 3];
        for c in 0..3 {
            out.data[i * 3 + c] = a * fg.data[i * 4 + c] + (1.0 - a) * bg.data[i * 3 + c];
        }
    }
    Ok(out)
}
