//! Per-pixel descriptors, cosine similarity, and their visualizations.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par;
use crate::raster::{luma, Image};
use crate::scene::GBufferView;
use crate::training::{blur, gaussian_kernel};

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("empty view")]
    EmptyView,
    #[error("zero-norm descriptor")]
    ZeroNorm,
    #[error("descriptor length mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("query pixel ({0}, {1}) is not covered")]
    UncoveredQuery(usize, usize),
    #[error("query pixel ({0}, {1}) outside the map")]
    QueryOutOfBounds(usize, usize),
    #[error("PCA needs at least 3 covered pixels, found {0}")]
    TooFewPixels(usize),
    #[error("invalid descriptor config: {0}")]
    Config(String),
}

/// Dense descriptor image: `dim` floats per pixel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub data: Vec<f32>,
    pub provenance: String,
}

pub const BUILTIN_PROVENANCE: &str = "builtin-v1";

impl FeatureMap {
    pub fn zeros(width: usize, height: usize, dim: usize, provenance: &str) -> Self {
        Self { width, height, dim, data: vec![0.0; width * height * dim], provenance: provenance.into() }
    }

    pub fn descriptor(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.dim;
        &self.data[i..i + self.dim]
    }

    pub fn descriptor_at(&self, index: usize) -> &[f32] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    /// Descriptor for G-buffer pixel `(px, py)` of a `gw x gh` view, using
    /// nearest-pixel index scaling when the resolutions differ.
    pub fn descriptor_for_pixel(&self, px: usize, py: usize, gw: usize, gh: usize) -> &[f32] {
        self.descriptor(nearest_feature_index(px, gw, self.width), nearest_feature_index(py, gh, self.height))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, s: f32) -> Self {
        let mut m = self.clone();
        m.data.iter_mut().for_each(|v| *v *= s);
        m
    }
}

/// `floor(p * feat_len / gbuf_len)` in exact integer arithmetic.
pub fn nearest_feature_index(p: usize, gbuf_len: usize, feat_len: usize) -> usize {
    ((p as u64 * feat_len as u64) / gbuf_len as u64) as usize
}

/// Axis-aligned box used to normalize positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Bounds {
    pub fn of_views<'a>(views: impl IntoIterator<Item = &'a GBufferView>) -> Option<Self> {
        let mut b: Option<Bounds> = None;
        for v in views {
            for i in v.covered_indices() {
                let p = v.position[i].map(f64::from);
                let bb = b.get_or_insert(Bounds { min: p, max: p });
                for a in 0..3 {
                    bb.min[a] = bb.min[a].min(p[a]);
                    bb.max[a] = bb.max[a].max(p[a]);
                }
            }
        }
        b
    }

    pub fn center(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| 0.5 * (self.min[a] + self.max[a]))
    }

    pub fn diagonal(&self) -> f64 {
        (0..3).map(|a| (self.max[a] - self.min[a]).powi(2)).sum::<f64>().sqrt()
    }
}

/// Which groups the built-in descriptor concatenates.
///
/// Layout per covered pixel, in this order:
/// normal (3) | position normalized by the bounds (3) |
/// chroma `(s cos h, s sin h)` (2) and luminance DoG responses (`scales.len() - 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DescriptorConfig {
    pub scales: Vec<f64>,
    pub include_appearance: bool,
    pub include_normal: bool,
    pub include_relative_position: bool,
    /// Normalization box; if unset the view's own covered bounds are used.
    #[serde(skip)]
    pub position_bounds: Option<Bounds>,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        Self {
            scales: vec![1.0, 2.0, 4.0],
            include_appearance: true,
            include_normal: true,
            include_relative_position: true,
            position_bounds: None,
        }
    }
}

impl DescriptorConfig {
    pub fn normals_only() -> Self {
        Self { include_appearance: false, include_relative_position: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if !(self.include_appearance || self.include_normal || self.include_relative_position) {
            return Err(FeatureError::Config("at least one descriptor group must be enabled".into()));
        }
        if self.scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(FeatureError::Config("scales must be finite and > 0".into()));
        }
        if self.scales.windows(2).any(|w| w[1] <= w[0]) {
            return Err(FeatureError::Config("scales must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        let mut d = 0;
        if self.include_normal {
            d += 3;
        }
        if self.include_relative_position {
            d += 3;
        }
        if self.include_appearance {
            d += 2 + self.scales.len().saturating_sub(1);
        }
        d
    }

    /// Parses a group list like `normal,position,appearance`.
    pub fn with_groups(mut self, groups: &str) -> Result<Self, FeatureError> {
        self.include_normal = false;
        self.include_relative_position = false;
        self.include_appearance = false;
        for g in groups.split(',').map(str::trim).filter(|g| !g.is_empty()) {
            match g {
                "normal" => self.include_normal = true,
                "position" => self.include_relative_position = true,
                "appearance" => self.include_appearance = true,
                other => return Err(FeatureError::Config(format!("unknown descriptor group `{other}`"))),
            }
        }
        self.validate()?;
        Ok(self)
    }
}

/// Hue/saturation in the chroma plane: `(s cos h, s sin h)`. Invariant to
/// uniform scaling of the colour, hence to the Lambertian shading factor.
pub fn chroma(rgb: [f32; 3]) -> [f32; 2] {
    let [r, g, b] = rgb.map(f64::from);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let c = max - min;
    if max <= 0.0 || c <= 0.0 {
        return [0.0, 0.0];
    }
    let h = if max == r {
        ((g - b) / c).rem_euclid(6.0)
    } else if max == g {
        (b - r) / c + 2.0
    } else {
        (r - g) / c + 4.0
    } * std::f64::consts::FRAC_PI_3;
    let s = c / max;
    [(s * h.cos()) as f32, (s * h.sin()) as f32]
}

/// Deterministic handcrafted descriptor; background pixels get zeros.
pub fn builtin_descriptor(view: &GBufferView, cfg: &DescriptorConfig) -> Result<FeatureMap, FeatureError> {
    cfg.validate()?;
    let covered = view.covered_indices();
    if covered.is_empty() {
        return Err(FeatureError::EmptyView);
    }
    let (w, h) = (view.width(), view.height());
    let dim = cfg.dim();
    let bounds = cfg.position_bounds.or_else(|| Bounds::of_views([view])).expect("view has coverage");
    let center = bounds.center();
    let half_diag = (0.5 * bounds.diagonal()).max(1e-12);

    let dogs: Vec<Image> = if cfg.include_appearance && cfg.scales.len() > 1 {
        let lum = Image::from_gray(w, h, view.rgb.iter().map(|p| luma(p[0], p[1], p[2])).collect());
        let blurred: Vec<Image> =
            cfg.scales.iter().map(|s| blur(&lum, &gaussian_kernel(*s).expect("validated scale"))).collect();
        blurred
            .windows(2)
            .map(|pair| {
                let mut d = pair[1].clone();
                for (o, a) in d.data.iter_mut().zip(&pair[0].data) {
                    *o -= a;
                }
                d
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut map = FeatureMap::zeros(w, h, dim, BUILTIN_PROVENANCE);
    par::for_each_chunk_mut(&mut map.data, dim, |i, out| {
        if !view.is_covered(i) {
            return;
        }
        let mut k = 0;
        if cfg.include_normal {
            out[..3].copy_from_slice(&view.normal[i]);
            k += 3;
        }
        if cfg.include_relative_position {
            for a in 0..3 {
                out[k + a] = ((view.position[i][a] as f64 - center[a]) / half_diag) as f32;
            }
            k += 3;
        }
        if cfg.include_appearance {
            out[k..k + 2].copy_from_slice(&chroma(view.rgb[i]));
            k += 2;
            for d in &dogs {
                out[k] = d.data[i];
                k += 1;
            }
        }
    });
    Ok(map)
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity from a precomputed dot product and norms. Shared by
/// [`cosine_similarity`] and the matcher so both produce identical bits.
#[inline]
pub fn cosine_from_parts(dot: f64, norm_a: f64, norm_b: f64) -> f64 {
    (dot / (norm_a * norm_b)).clamp(-1.0, 1.0)
}

/// `<f1, f2> / (|f1| |f2|)`.
pub fn cosine_similarity(f1: &[f32], f2: &[f32]) -> Result<f64, FeatureError> {
    if f1.len() != f2.len() {
        return Err(FeatureError::DimMismatch(f1.len(), f2.len()));
    }
    let (n1, n2) = (norm(f1), norm(f2));
    if n1 == 0.0 || n2 == 0.0 {
        return Err(FeatureError::ZeroNorm);
    }
    Ok(cosine_from_parts(dot(f1, f2), n1, n2))
}

/// Similarity of every pixel of `other` to the query descriptor, clamped to
/// `[0, 1]` for display. With `mask_background`, zero descriptors map to 0
/// instead of failing.
pub fn affinity_heatmap(
    query: (usize, usize),
    query_map: &FeatureMap,
    other: &FeatureMap,
    mask_background: bool,
) -> Result<Image, FeatureError> {
    let (qx, qy) = query;
    if qx >= query_map.width || qy >= query_map.height {
        return Err(FeatureError::QueryOutOfBounds(qx, qy));
    }
    if query_map.dim != other.dim {
        return Err(FeatureError::DimMismatch(query_map.dim, other.dim));
    }
    let q = query_map.descriptor(qx, qy);
    let qn = norm(q);
    if qn == 0.0 {
        return Err(FeatureError::UncoveredQuery(qx, qy));
    }
    let values = par::map_range(other.width * other.height, |i| {
        let f = other.descriptor_at(i);
        let n = norm(f);
        if n == 0.0 {
            return if mask_background { Ok(0.0) } else { Err(FeatureError::ZeroNorm) };
        }
        Ok(cosine_from_parts(dot(q, f), qn, n).clamp(0.0, 1.0) as f32)
    });
    let data = values.into_iter().collect::<Result<Vec<f32>, _>>()?;
    Ok(Image::from_gray(other.width, other.height, data))
}

/// Joint PCA colouring of several descriptor maps.
#[derive(Debug, Clone)]
pub struct PcaVisualization {
    pub images: Vec<Image>,
    /// Eigenvalues of the first three components (0 where rank-deficient).
    pub explained_variance: [f64; 3],
}

/// Fits PCA on the covered (non-zero) descriptors of all maps together and
/// maps the first three principal coordinates to RGB, each rescaled to
/// `[0, 1]` over the joint set. Components beyond the data rank are 0.5.
/// Each component's largest-magnitude loading is made positive.
pub fn pca_visualization(maps: &[FeatureMap]) -> Result<PcaVisualization, FeatureError> {
    let dim = maps.first().map(|m| m.dim).ok_or(FeatureError::TooFewPixels(0))?;
    if let Some(m) = maps.iter().find(|m| m.dim != dim) {
        return Err(FeatureError::DimMismatch(dim, m.dim));
    }
    let covered: Vec<(usize, usize)> = maps
        .iter()
        .enumerate()
        .flat_map(|(mi, m)| (0..m.width * m.height).filter(|&i| norm(m.descriptor_at(i)) > 0.0).map(move |i| (mi, i)))
        .collect();
    if covered.len() < 3 {
        return Err(FeatureError::TooFewPixels(covered.len()));
    }

    let n = covered.len() as f64;
    let mut mean = vec![0.0f64; dim];
    for &(mi, i) in &covered {
        for (m, v) in mean.iter_mut().zip(maps[mi].descriptor_at(i)) {
            *m += *v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    let mut centered = vec![0.0f64; dim];
    for &(mi, i) in &covered {
        for (c, (v, m)) in centered.iter_mut().zip(maps[mi].descriptor_at(i).iter().zip(&mean)) {
            *c = *v as f64 - m;
        }
        for r in 0..dim {
            for c in r..dim {
                cov[(r, c)] += centered[r] * centered[c];
            }
        }
    }
    for r in 0..dim {
        for c in r..dim {
            cov[(r, c)] /= n;
            cov[(c, r)] = cov[(r, c)];
        }
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = 1e-9 * top.max(f64::MIN_POSITIVE);

    let mut components: Vec<Option<Vec<f64>>> = Vec::with_capacity(3);
    let mut explained = [0.0; 3];
    for k in 0..3 {
        let Some(&idx) = order.get(k) else {
            components.push(None);
            continue;
        };
        let lambda = eig.eigenvalues[idx];
        if lambda <= tol || top == 0.0 {
            components.push(None);
            continue;
        }
        explained[k] = lambda;
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let mut lead = 0;
        for j in 1..dim {
            if v[j].abs() > v[lead].abs() {
                lead = j;
            }
        }
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(Some(v));
    }

    let project = |f: &[f32], comp: &[f64]| -> f64 {
        f.iter().zip(&mean).zip(comp).map(|((v, m), c)| (*v as f64 - m) * c).sum()
    };
    let mut ranges = [(f64::INFINITY, f64::NEG_INFINITY); 3];
    for &(mi, i) in &covered {
        let f = maps[mi].descriptor_at(i);
        for (k, comp) in components.iter().enumerate() {
            if let Some(c) = comp {
                let p = project(f, c);
                ranges[k].0 = ranges[k].0.min(p);
                ranges[k].1 = ranges[k].1.max(p);
            }
        }
    }

    let images = maps
        .iter()
        .map(|m| {
            let mut img = Image::new(m.width, m.height, 3);
            for i in 0..m.width * m.height {
                let f = m.descriptor_at(i);
                if norm(f) == 0.0 {
                    continue;
                }
                for (k, comp) in components.iter().enumerate() {
                    let (lo, hi) = ranges[k];
                    img.data[i * 3 + k] = match comp {
                        Some(c) if hi > lo => ((project(f, c) - lo) / (hi - lo)) as f32,
                        _ => 0.5,
                    };
                }
            }
            img
        })
        .collect();
    Ok(PcaVisualization { images, explained_variance: explained })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{presets, render_gbuffer, CameraPose, Intrinsics};
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn front_view(scene: &crate::scene::SceneDescription, res: u32) -> GBufferView {
        let cam = CameraPose::new(Vector3::new(0.0, 0.0, 4.0), Vector3::zeros(), Vector3::y(), Intrinsics {
            fov_y: 0.9,
            width: res,
            height: res,
        });
        render_gbuffer(scene, &cam).unwrap()
    }

    #[test]
    fn normals_only_descriptor_is_the_normal() {
        let v = front_view(&presets::two_spheres(), 16);
        let f = builtin_descriptor(&v, &DescriptorConfig::normals_only()).unwrap();
        assert_eq!(f.dim, 3);
        for i in v.covered_indices() {
            assert_eq!(f.descriptor_at(i), &v.normal[i]);
        }
        assert_eq!(f.descriptor_at(0), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn normal_plus_z_gives_plus_z_descriptor() {
        let mut v = GBufferView::empty(CameraPose::new(
            Vector3::new(0.0, 0.0, 2.0),
            Vector3::zeros(),
            Vector3::y(),
            Intrinsics { fov_y: 1.0, width: 2, height: 1 },
        ));
        v.alpha[1] = 1.0;
        v.normal[1] = [0.0, 0.0, 1.0];
        v.view_dir[1] = [0.0, 0.0, 1.0];
        let f = builtin_descriptor(&v, &DescriptorConfig::normals_only()).unwrap();
        assert_eq!(f.descriptor(1, 0), &[0.0, 0.0, 1.0]);
        assert_eq!(f.descriptor(0, 0), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_view_is_an_error() {
        let v = GBufferView::empty(CameraPose::new(Vector3::z(), Vector3::zeros(), Vector3::y(), Intrinsics {
            fov_y: 1.0,
            width: 4,
            height: 4,
        }));
        assert_eq!(builtin_descriptor(&v, &DescriptorConfig::default()), Err(FeatureError::EmptyView));
    }

    #[test]
    fn config_validation() {
        let mut c = DescriptorConfig::default();
        assert_eq!(c.dim(), 3 + 3 + 2 + 2);
        c.scales = vec![2.0, 1.0];
        assert!(c.validate().is_err());
        assert!(DescriptorConfig::default().with_groups("").is_err());
        assert!(DescriptorConfig::default().with_groups("normal,bogus").is_err());
        assert_eq!(DescriptorConfig::default().with_groups("normal").unwrap().dim(), 3);
    }

    #[test]
    fn mirrored_same_texture_pixels_beat_other_primitive() {
        // 8x8 front render of two differently coloured spheres. For every
        // pixel pair mirrored about the left sphere's vertical axis, their
        // similarity must exceed the similarity of either one to any pixel
        // of the right sphere.
        let scene = presets::two_spheres();
        let cam = CameraPose::new(Vector3::new(-0.9, 0.0, 2.0), Vector3::new(-0.9, 0.0, 0.0), Vector3::y(), Intrinsics {
            fov_y: 1.3,
            width: 8,
            height: 8,
        });
        let v = render_gbuffer(&scene, &cam).unwrap();
        let f = builtin_descriptor(&v, &DescriptorConfig::default()).unwrap();
        let frame = cam.frame();
        let owner = |i: usize| {
            let (x, y) = ((i % 8) as u32, (i / 8) as u32);
            scene.trace(&cam.position_vec(), &cam.ray_dir(&frame, x, y)).map(|h| h.primitive)
        };
        let left: Vec<usize> = v.covered_indices().into_iter().filter(|&i| owner(i) == Some(0)).collect();
        let right: Vec<usize> = v.covered_indices().into_iter().filter(|&i| owner(i) == Some(1)).collect();
        assert!(!right.is_empty() && left.len() > 8);
        let mut pairs = 0;
        for &i in &left {
            let (x, y) = (i % 8, i / 8);
            let j = y * 8 + (7 - x);
            if j == i || !left.contains(&j) {
                continue;
            }
            pairs += 1;
            let s = cosine_similarity(f.descriptor_at(i), f.descriptor_at(j)).unwrap();
            for &r in &right {
                let si = cosine_similarity(f.descriptor_at(i), f.descriptor_at(r)).unwrap();
                let sj = cosine_similarity(f.descriptor_at(j), f.descriptor_at(r)).unwrap();
                assert!(s > si && s > sj, "pair ({i},{j}) sim {s} vs right {r}: {si} {sj}");
            }
        }
        assert!(pairs > 4);
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap() - 8.0 / 9.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&[0.3, -0.7, 2.0], &[0.3, -0.7, 2.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(FeatureError::ZeroNorm));
        assert_eq!(cosine_similarity(&[1.0], &[1.0, 0.0]), Err(FeatureError::DimMismatch(1, 2)));
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric_bounded_and_scale_invariant(
            a in proptest::collection::vec(-10.0f32..10.0, 1..16),
            b_seed in proptest::collection::vec(-10.0f32..10.0, 16),
            s in 0.01f32..100.0,
        ) {
            let b = &b_seed[..a.len()];
            prop_assume!(norm(&a) > 1e-3 && norm(b) > 1e-3);
            let ab = cosine_similarity(&a, b).unwrap();
            let ba = cosine_similarity(b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&ab));
            let scaled: Vec<f32> = a.iter().map(|v| v * s).collect();
            prop_assert!((cosine_similarity(&a, &scaled).unwrap() - 1.0).abs() < 1e-6);
        }
    }

    fn argmax(img: &Image) -> usize {
        let mut best = 0;
        for (i, v) in img.data.iter().enumerate() {
            if *v > img.data[best] {
                best = i;
            }
        }
        best
    }

    #[test]
    fn heatmap_self_query_and_argmax() {
        let scene = presets::checker_pair();
        let a = builtin_descriptor(&front_view(&scene, 24), &DescriptorConfig::default()).unwrap();
        let other = {
            let cam = CameraPose::new(Vector3::new(1.0, 1.0, 3.5), Vector3::zeros(), Vector3::y(), Intrinsics {
                fov_y: 0.9,
                width: 24,
                height: 24,
            });
            builtin_descriptor(&render_gbuffer(&scene, &cam).unwrap(), &DescriptorConfig::default()).unwrap()
        };
        let q = (12, 12);
        let own = affinity_heatmap(q, &a, &a, true).unwrap();
        assert_eq!(own.pixel(12, 12)[0], 1.0);
        assert_eq!(affinity_heatmap(q, &a, &a, false), Err(FeatureError::ZeroNorm));

        let heat = affinity_heatmap(q, &a, &other, true).unwrap();
        // Brute-force scan.
        let qd = a.descriptor(12, 12);
        let mut best = (f64::NEG_INFINITY, 0);
        for i in 0..other.width * other.height {
            if let Ok(s) = cosine_similarity(qd, other.descriptor_at(i)) {
                if s > best.0 {
                    best = (s, i);
                }
            }
        }
        assert_eq!(argmax(&heat), best.1);
        // Positive rescaling keeps the argmax.
        assert_eq!(argmax(&affinity_heatmap(q, &a.scaled(3.5), &other.scaled(0.2), true).unwrap()), best.1);

        assert_eq!(affinity_heatmap((0, 0), &a, &other, true), Err(FeatureError::UncoveredQuery(0, 0)));
        let bg = FeatureMap::zeros(24, 24, a.dim, "external");
        assert_eq!(affinity_heatmap(q, &a, &bg, false), Err(FeatureError::ZeroNorm));
        assert!(affinity_heatmap(q, &a, &bg, true).unwrap().data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pca_properties() {
        let scene = presets::checker_pair();
        let f = builtin_descriptor(&front_view(&scene, 20), &DescriptorConfig::default()).unwrap();
        let viz = pca_visualization(&[f.clone(), f.clone()]).unwrap();
        assert_eq!(viz.images[0], viz.images[1]);
        let ev = viz.explained_variance;
        assert!(ev[0] >= ev[1] && ev[1] >= ev[2] && ev[2] > 0.0);
        for v in &viz.images[0].data {
            assert!((0.0..=1.0).contains(v));
        }

        // Descriptors on a line: only the first component is informative.
        let mut line = FeatureMap::zeros(5, 1, 4, "test");
        for i in 0..5 {
            let t = i as f32 + 1.0;
            line.data[i * 4..i * 4 + 4].copy_from_slice(&[t, 2.0 * t, -t, 0.5 * t]);
        }
        let viz = pca_visualization(&[line]).unwrap();
        for i in 0..5 {
            let p = viz.images[0].pixel(i, 0);
            assert_eq!(p[1], 0.5);
            assert_eq!(p[2], 0.5);
        }
        assert_eq!(viz.images[0].pixel(0, 0)[0], 0.0);
        assert_eq!(viz.images[0].pixel(4, 0)[0], 1.0);

        let tiny = FeatureMap { width: 2, height: 1, dim: 1, data: vec![1.0, 2.0], provenance: String::new() };
        assert_eq!(pca_visualization(&[tiny]).unwrap_err(), FeatureError::TooFewPixels(2));
    }

    #[test]
    fn nearest_index_scaling_is_surjective() {
        let mut hit = vec![false; 392];
        for p in 0..400 {
            let f = nearest_feature_index(p, 400, 392);
            assert_eq!(f, (p as f64 * 392.0 / 400.0).floor() as usize);
            hit[f] = true;
        }
        assert!(hit.iter().all(|h| *h));
        assert_eq!(nearest_feature_index(7, 8, 8), 7);
    }

    #[test]
    fn descriptor_is_deterministic() {
        let v = front_view(&presets::torus_cone(), 16);
        let c = DescriptorConfig::default();
        assert_eq!(builtin_descriptor(&v, &c).unwrap(), builtin_descriptor(&v, &c).unwrap());
    }
}
