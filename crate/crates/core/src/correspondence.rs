//! Feature point clouds, the target-to-source mapping and transfer samples.

use std::collections::BTreeMap;

use nalgebra::Matrix3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{cosine_from_parts, dot, norm, FeatureMap};
use crate::par;
use crate::raster::Image;
use crate::scene::{rotation_about, CameraPose, GBufferView, Vec3};

#[derive(Debug, Error, PartialEq)]
pub enum CorrespondenceError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("no candidate source points")]
    NoCandidates,
    #[error("descriptor dimensions differ: target {target}, source {source_dim}")]
    DimMismatch { target: usize, source_dim: usize },
    #[error("k must be >= 1")]
    InvalidK,
    #[error("per_view must be >= 1")]
    InvalidPerView,
    #[error("view {view}: feature map {fw}x{fh} cannot serve a {gw}x{gh} G-buffer")]
    FeatureResolution { view: usize, fw: usize, fh: usize, gw: usize, gh: usize },
}

/// One sampled pixel: descriptor lives in the cloud's flat feature buffer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudPoint {
    pub position: [f32; 3],
    pub normal: [f32; 3],
    pub view_dir: [f32; 3],
    pub rgb: [f32; 3],
    /// Index into [`FeaturePointCloud::cameras`].
    pub view: usize,
    pub pixel: (u32, u32),
}

/// Sampled pixels embedded in descriptor space.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePointCloud {
    pub dim: usize,
    pub features: Vec<f32>,
    pub norms: Vec<f64>,
    pub points: Vec<CloudPoint>,
    pub cameras: Vec<CameraPose>,
    /// Views without any covered pixel.
    pub skipped_views: usize,
    /// Covered pixels dropped because their descriptor was zero.
    pub skipped_zero_norm: usize,
}

impl FeaturePointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Builds a cloud from explicit points and descriptors (descriptor `i`
    /// at `features[i*dim..]`). Zero-norm descriptors are rejected.
    pub fn from_parts(
        dim: usize,
        features: Vec<f32>,
        points: Vec<CloudPoint>,
        cameras: Vec<CameraPose>,
    ) -> Result<Self, CorrespondenceError> {
        assert_eq!(features.len(), dim * points.len());
        let norms: Vec<f64> = features.chunks_exact(dim).map(norm).collect();
        assert!(norms.iter().all(|n| *n > 0.0), "zero-norm descriptor in cloud");
        Ok(Self { dim, features, norms, points, cameras, skipped_views: 0, skipped_zero_norm: 0 })
    }

    /// Same points with every descriptor multiplied by `s`.
    pub fn with_scaled_features(&self, s: f32) -> Self {
        let features: Vec<f32> = self.features.iter().map(|v| v * s).collect();
        let norms = features.chunks_exact(self.dim).map(norm).collect();
        Self { features, norms, ..self.clone() }
    }

    fn push(&mut self, p: CloudPoint, f: &[f32], n: f64) {
        self.points.push(p);
        self.features.extend_from_slice(f);
        self.norms.push(n);
    }

    pub fn centroid(&self) -> Vec3 {
        let sum = self.points.iter().fold(Vec3::zeros(), |acc, p| acc + Vec3::from(p.position.map(f64::from)));
        sum / self.len().max(1) as f64
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in &self.points {
            let v = Vec3::from(p.position.map(f64::from));
            lo = lo.inf(&v);
            hi = hi.sup(&v);
        }
        if self.is_empty() {
            0.0
        } else {
            (hi - lo).norm()
        }
    }
}

/// How many covered pixels to draw per view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PerView {
    Count(usize),
    All,
}

pub const DEFAULT_VIEWS: usize = 100;
pub const DEFAULT_PER_VIEW: usize = 5000;
pub const DEFAULT_K: usize = 10;

/// Draws `min(per_view, covered)` covered pixels per view uniformly without
/// replacement. Each view has its own RNG stream derived from `seed`, so the
/// draw does not depend on evaluation order.
pub fn sample_points(
    views: &[(GBufferView, FeatureMap)],
    per_view: usize,
    seed: u64,
) -> Result<FeaturePointCloud, CorrespondenceError> {
    if per_view == 0 {
        return Err(CorrespondenceError::InvalidPerView);
    }
    sample_points_with(views, PerView::Count(per_view), seed)
}

pub fn sample_points_with(
    views: &[(GBufferView, FeatureMap)],
    per_view: PerView,
    seed: u64,
) -> Result<FeaturePointCloud, CorrespondenceError> {
    let dim = views.first().map(|(_, f)| f.dim).unwrap_or(1);
    for (vi, (g, f)) in views.iter().enumerate() {
        if f.dim != dim {
            return Err(CorrespondenceError::DimMismatch { target: dim, source_dim: f.dim });
        }
        if f.width == 0 || f.height == 0 || f.width > g.width() || f.height > g.height() {
            return Err(CorrespondenceError::FeatureResolution {
                view: vi,
                fw: f.width,
                fh: f.height,
                gw: g.width(),
                gh: g.height(),
            });
        }
    }
    let per_view_picks = par::map_range(views.len(), |vi| {
        let (g, _) = &views[vi];
        let covered = g.covered_indices();
        match per_view {
            PerView::All => covered,
            PerView::Count(k) if k >= covered.len() => covered,
            PerView::Count(k) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(vi as u64);
                let mut picks: Vec<usize> =
                    rand::seq::index::sample(&mut rng, covered.len(), k).into_iter().map(|i| covered[i]).collect();
                picks.sort_unstable();
                picks
            }
        }
    });

    let mut cloud = FeaturePointCloud {
        dim,
        features: Vec::new(),
        norms: Vec::new(),
        points: Vec::new(),
        cameras: views.iter().map(|(g, _)| g.camera.clone()).collect(),
        skipped_views: 0,
        skipped_zero_norm: 0,
    };
    for (vi, picks) in per_view_picks.into_iter().enumerate() {
        let (g, f) = &views[vi];
        if picks.is_empty() {
            cloud.skipped_views += 1;
            continue;
        }
        let (w, h) = (g.width(), g.height());
        for i in picks {
            let (x, y) = (i % w, i / w);
            let desc = f.descriptor_for_pixel(x, y, w, h);
            let n = norm(desc);
            if n == 0.0 || !n.is_finite() {
                cloud.skipped_zero_norm += 1;
                continue;
            }
            cloud.push(
                CloudPoint {
                    position: g.position[i],
                    normal: g.normal[i],
                    view_dir: g.view_dir[i],
                    rgb: g.rgb[i],
                    view: vi,
                    pixel: (x as u32, y as u32),
                },
                desc,
                n,
            );
        }
    }
    if cloud.skipped_views > 0 {
        log::warn!("sample_points: skipped {} view(s) without coverage", cloud.skipped_views);
    }
    Ok(cloud)
}

/// Rigid similarity transform mapping target coordinates into the source
/// frame: `x_source = scale * rotation * x_target + translation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
    pub scale: f64,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vec3::zeros(), scale: 1.0 }
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rotation * x * self.scale + self.translation
    }

    /// Rotation angle about +z, in radians within `(-pi, pi]`.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max()
    }
}

/// Angle between two camera forward axes, with an optional rotation applied
/// to the target axis first.
fn forward_angle(target: &CameraPose, source: &CameraPose, rotation: Option<&Matrix3<f64>>) -> f64 {
    let mut ft = target.forward();
    if let Some(r) = rotation {
        ft = r * ft;
    }
    ft.dot(&source.forward()).clamp(-1.0, 1.0).acos()
}

/// The `k` source views whose forward axes are angularly closest to the
/// target view's, ties broken by lower index, returned in ascending order
/// of distance.
pub fn select_candidate_views(
    target_view_index: usize,
    target_views: &[CameraPose],
    source_views: &[CameraPose],
    k: usize,
    alignment: Option<&RigidTransform>,
) -> Vec<usize> {
    let t = &target_views[target_view_index];
    let rot = alignment.map(|a| &a.rotation);
    let mut ranked: Vec<(f64, usize)> =
        source_views.iter().enumerate().map(|(i, s)| (forward_angle(t, s, rot), i)).collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    ranked.into_iter().take(k.min(source_views.len())).map(|(_, i)| i).collect()
}

/// Target-to-source index map with the similarity of each pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceMap {
    pub source_index: Vec<usize>,
    pub score: Vec<f64>,
    pub source_count: usize,
}

impl CorrespondenceMap {
    pub fn len(&self) -> usize {
        self.source_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_index.is_empty()
    }
}

const TILE: usize = 16;

/// For every target point, the source point of maximal cosine similarity
/// among those whose view is one of the `k` closest source views to the
/// target point's view. Ties resolve to the lowest source index. With `k`
/// covering all source views this is the exact full argmax.
pub fn build_mapping(
    target: &FeaturePointCloud,
    source: &FeaturePointCloud,
    k: usize,
    alignment: Option<&RigidTransform>,
) -> Result<CorrespondenceMap, CorrespondenceError> {
    if k == 0 {
        return Err(CorrespondenceError::InvalidK);
    }
    if target.is_empty() || source.is_empty() {
        return Err(CorrespondenceError::EmptyCloud);
    }
    if target.dim != source.dim {
        return Err(CorrespondenceError::DimMismatch { target: target.dim, source_dim: source.dim });
    }

    let all_views = k >= source.cameras.len();
    let all_points: Vec<usize> = (0..source.len()).collect();
    let mut by_view: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in source.points.iter().enumerate() {
        by_view.entry(p.view).or_default().push(i);
    }
    let mut candidates: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    if !all_views {
        for p in &target.points {
            candidates.entry(p.view).or_insert_with(|| {
                let views = select_candidate_views(p.view, &target.cameras, &source.cameras, k, alignment);
                let mut c: Vec<usize> = views.iter().filter_map(|v| by_view.get(v)).flatten().copied().collect();
                c.sort_unstable();
                c
            });
        }
    }

    // Blocks of consecutive target points that share a view.
    let mut blocks: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    for j in 1..=target.len() {
        if j == target.len() || j - start == TILE || target.points[j].view != target.points[start].view {
            blocks.push((start, j));
            start = j;
        }
    }

    let results = par::map_slice(&blocks, |&(lo, hi)| {
        let cand: &[usize] = if all_views { &all_points } else { &candidates[&target.points[lo].view] };
        if cand.is_empty() {
            return Err(CorrespondenceError::NoCandidates);
        }
        let mut best = vec![(f64::NEG_INFINITY, usize::MAX); hi - lo];
        for &i in cand {
            let fs = source.feature(i);
            let ns = source.norms[i];
            for (slot, j) in best.iter_mut().zip(lo..hi) {
                let s = cosine_from_parts(dot(target.feature(j), fs), target.norms[j], ns);
                if s > slot.0 {
                    *slot = (s, i);
                }
            }
        }
        Ok(best)
    });

    let mut map = CorrespondenceMap {
        source_index: Vec::with_capacity(target.len()),
        score: Vec::with_capacity(target.len()),
        source_count: source.len(),
    };
    for block in results {
        for (s, i) in block? {
            map.source_index.push(i);
            map.score.push(s);
        }
    }
    Ok(map)
}

/// One supervision tuple: target position and normal, source view
/// direction and colour.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferSample {
    pub position: [f32; 3],
    pub normal: [f32; 3],
    pub view_dir: [f32; 3],
    pub rgb: [f32; 3],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TransferSamples {
    pub samples: Vec<TransferSample>,
}

impl TransferSamples {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Sample `j` = (x_target[j], n_target[j], w_source[phi_j], L_source[phi_j]).
/// Target colours and source positions are never read.
pub fn assemble_training_set(
    map: &CorrespondenceMap,
    target: &FeaturePointCloud,
    source: &FeaturePointCloud,
) -> TransferSamples {
    assert_eq!(map.len(), target.len(), "mapping does not match the target cloud");
    let samples = target
        .points
        .iter()
        .zip(&map.source_index)
        .map(|(t, &i)| {
            let s = &source.points[i];
            TransferSample { position: t.position, normal: t.normal, view_dir: s.view_dir, rgb: s.rgb }
        })
        .collect();
    TransferSamples { samples }
}

/// Search settings for [`prealign`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrealignConfig {
    pub yaw_steps: usize,
    pub subsample: usize,
    /// Also search pitch and roll on a coarse grid.
    pub full_rotation: bool,
    pub pitch_steps: usize,
    pub roll_steps: usize,
    /// Gaussian distance bandwidth as a fraction of the source bbox diagonal.
    pub bandwidth: f64,
}

impl Default for PrealignConfig {
    fn default() -> Self {
        Self { yaw_steps: 36, subsample: 500, full_rotation: false, pitch_steps: 7, roll_steps: 12, bandwidth: 0.1 }
    }
}

fn strided(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    (0..max).map(|k| k * n / max).collect()
}

fn candidate_rotations(cfg: &PrealignConfig) -> Vec<Matrix3<f64>> {
    use std::f64::consts::PI;
    let yaws: Vec<f64> = (0..cfg.yaw_steps.max(1)).map(|k| 2.0 * PI * k as f64 / cfg.yaw_steps.max(1) as f64).collect();
    let mut out = Vec::new();
    if cfg.full_rotation {
        let pitches: Vec<f64> = if cfg.pitch_steps <= 1 {
            vec![0.0]
        } else {
            (0..cfg.pitch_steps).map(|k| -PI / 2.0 + PI * k as f64 / (cfg.pitch_steps - 1) as f64).collect()
        };
        let rolls: Vec<f64> = (0..cfg.roll_steps.max(1)).map(|k| 2.0 * PI * k as f64 / cfg.roll_steps.max(1) as f64).collect();
        let mut pitches = pitches;
        // Put the zero pitch first so identity is the first candidate.
        pitches.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
        for &p in &pitches {
            for &r in &rolls {
                for &y in &yaws {
                    out.push(rotation_about(Vec3::z(), y) * rotation_about(Vec3::y(), p) * rotation_about(Vec3::x(), r));
                }
            }
        }
    } else {
        out.extend(yaws.iter().map(|&y| rotation_about(Vec3::z(), y)));
    }
    out[0] = Matrix3::identity();
    out
}

/// Rough rigid alignment of the target onto the source.
///
/// Translation matches position centroids and scale matches bounding-box
/// diagonals. The rotation is picked from a grid (yaw about +z by default)
/// to maximize, over a deterministic subsample, the mean over target points
/// of `max_i sim(f_t, f_i) * exp(-d^2 / (2 h^2))`, where `d` is the distance
/// between the transformed target point and source point `i`. Earlier grid
/// entries win ties, and the identity is always first.
pub fn prealign(
    target: &FeaturePointCloud,
    source: &FeaturePointCloud,
    cfg: &PrealignConfig,
) -> Result<RigidTransform, CorrespondenceError> {
    if target.is_empty() || source.is_empty() {
        return Err(CorrespondenceError::EmptyCloud);
    }
    if target.dim != source.dim {
        return Err(CorrespondenceError::DimMismatch { target: target.dim, source_dim: source.dim });
    }
    let ct = target.centroid();
    let cs = source.centroid();
    let (dt, ds) = (target.bbox_diagonal(), source.bbox_diagonal());
    if dt == 0.0 || ds == 0.0 {
        return Ok(RigidTransform { rotation: Matrix3::identity(), translation: cs - ct, scale: 1.0 });
    }
    let scale = if dt == ds { 1.0 } else { ds / dt };

    let ti = strided(target.len(), cfg.subsample.max(1));
    let si = strided(source.len(), cfg.subsample.max(1));
    let sim: Vec<Vec<f64>> = par::map_slice(&ti, |&j| {
        si.iter()
            .map(|&i| cosine_from_parts(dot(target.feature(j), source.feature(i)), target.norms[j], source.norms[i]))
            .collect()
    });
    let tpos: Vec<Vec3> = ti.iter().map(|&j| Vec3::from(target.points[j].position.map(f64::from)) - ct).collect();
    let spos: Vec<Vec3> = si.iter().map(|&i| Vec3::from(source.points[i].position.map(f64::from))).collect();
    let inv_2h2 = 1.0 / (2.0 * (cfg.bandwidth * ds).powi(2));

    let rotations = candidate_rotations(cfg);
    let scores = par::map_slice(&rotations, |r| {
        let per_point: Vec<f64> = tpos
            .iter()
            .zip(&sim)
            .map(|(p, row)| {
                let x = r * p * scale + cs;
                spos.iter()
                    .zip(row)
                    .map(|(s, sv)| sv * (-(x - s).norm_squared() * inv_2h2).exp())
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        par::tree_sum(&per_point) / per_point.len() as f64
    });
    let mut best = 0;
    for (k, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = k;
        }
    }
    let rotation = rotations[best];
    Ok(RigidTransform { rotation, translation: cs - rotation * ct * scale, scale })
}

/// Colours every covered pixel of one target view through the mapping: the
/// dense counterpart of [`assemble_training_set`], used as the edge-loss
/// reference image.
pub fn transferred_image(
    view: &GBufferView,
    features: &FeatureMap,
    source: &FeaturePointCloud,
    k: usize,
    alignment: Option<&RigidTransform>,
) -> Result<Image, CorrespondenceError> {
    let mut img = Image::new(view.width(), view.height(), 3);
    let dense = sample_points_with(&[(view.clone(), features.clone())], PerView::All, 0)?;
    if dense.is_empty() {
        return Ok(img);
    }
    let map = build_mapping(&dense, source, k, alignment)?;
    for (p, &i) in dense.points.iter().zip(&map.source_index) {
        img.pixel_mut(p.pixel.0 as usize, p.pixel.1 as usize).copy_from_slice(&source.points[i].rgb);
    }
    Ok(img)
}

/// Histogram of similarity scores over `[-1, 1]` as a grayscale bar chart.
pub fn score_histogram_image(map: &CorrespondenceMap, bins: usize, height: usize) -> Image {
    let mut counts = vec![0usize; bins];
    for s in &map.score {
        let b = (((s + 1.0) / 2.0) * bins as f64).floor().clamp(0.0, bins as f64 - 1.0) as usize;
        counts[b] += 1;
    }
    let peak = counts.iter().copied().max().unwrap_or(0).max(1);
    let mut img = Image::new(bins, height, 1);
    for (x, c) in counts.iter().enumerate() {
        let bar = (c * height).div_ceil(peak);
        for y in height - bar..height {
            img.pixel_mut(x, y)[0] = 1.0;
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{builtin_descriptor, cosine_similarity, DescriptorConfig};
    use crate::scene::{presets, render_gbuffer, sample_camera_sphere, Intrinsics};
    use proptest::prelude::*;
    use rand::Rng;

    fn point(view: usize, pos: [f32; 3]) -> CloudPoint {
        CloudPoint { position: pos, normal: [0.0, 0.0, 1.0], view_dir: [0.0, 0.0, 1.0], rgb: [0.5; 3], view, pixel: (0, 0) }
    }

    fn cam_at(p: [f64; 3]) -> CameraPose {
        CameraPose::new(Vec3::from(p), Vec3::zeros(), Vec3::y(), Intrinsics { fov_y: 1.0, width: 4, height: 4 })
    }

    fn cloud_from(features: &[&[f32]]) -> FeaturePointCloud {
        let dim = features[0].len();
        FeaturePointCloud::from_parts(
            dim,
            features.iter().flat_map(|f| f.iter().copied()).collect(),
            (0..features.len()).map(|i| point(0, [i as f32, 0.0, 0.0])).collect(),
            vec![cam_at([0.0, 0.0, 3.0])],
        )
        .unwrap()
    }

    /// Exhaustive argmax straight from the similarity definition.
    fn brute_force(target: &FeaturePointCloud, source: &FeaturePointCloud) -> (Vec<usize>, Vec<f64>) {
        let mut idx = Vec::new();
        let mut sc = Vec::new();
        for j in 0..target.len() {
            let mut best = (f64::NEG_INFINITY, 0);
            for i in 0..source.len() {
                let s = cosine_similarity(target.feature(j), source.feature(i)).unwrap();
                if s > best.0 {
                    best = (s, i);
                }
            }
            idx.push(best.1);
            sc.push(best.0);
        }
        (idx, sc)
    }

    #[test]
    fn small_mapping_example() {
        let t = cloud_from(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let s = cloud_from(&[&[0.9, 0.1], &[0.1, 0.9], &[1.0, 1.0]]);
        let m = build_mapping(&t, &s, 1, None).unwrap();
        assert_eq!(m.source_index, vec![0, 1]);
        // 0.9 / sqrt(0.82): from the exhaustive table.
        let table = brute_force(&t, &s);
        assert_eq!(table.0, vec![0, 1]);
        for (a, b) in m.score.iter().zip([0.9 / 0.82f64.sqrt(); 2]) {
            assert!((a - b).abs() < 1e-6);
            assert!((a - 0.9939).abs() < 1e-4);
        }
    }

    #[test]
    fn self_match_and_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let feats: Vec<Vec<f32>> = (0..50).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let refs: Vec<&[f32]> = feats.iter().map(|f| f.as_slice()).collect();
        let c = cloud_from(&refs);
        let m = build_mapping(&c, &c, 1, None).unwrap();
        assert_eq!(m.source_index, (0..50).collect::<Vec<_>>());
        let scaled = build_mapping(&c, &c.with_scaled_features(3.0), 1, None).unwrap();
        assert_eq!(scaled.source_index, m.source_index);
    }

    #[test]
    fn ties_go_to_the_lowest_source_index() {
        let t = cloud_from(&[&[1.0, 0.0]]);
        let s = cloud_from(&[&[0.0, 1.0], &[2.0, 0.0], &[1.0, 0.0], &[5.0, 0.0]]);
        assert_eq!(build_mapping(&t, &s, 1, None).unwrap().source_index, vec![1]);
    }

    #[test]
    fn mapping_errors() {
        let t = cloud_from(&[&[1.0, 0.0]]);
        let s3 = cloud_from(&[&[1.0, 0.0, 0.0]]);
        assert!(matches!(build_mapping(&t, &s3, 1, None), Err(CorrespondenceError::DimMismatch { .. })));
        assert_eq!(build_mapping(&t, &t, 0, None), Err(CorrespondenceError::InvalidK));
        let empty = FeaturePointCloud::from_parts(2, vec![], vec![], vec![]).unwrap();
        assert_eq!(build_mapping(&t, &empty, 1, None), Err(CorrespondenceError::EmptyCloud));

        // Candidate views exist but none of them holds a source point.
        let mut s = cloud_from(&[&[1.0, 0.0]]);
        s.cameras = vec![cam_at([0.0, 0.0, 3.0]), cam_at([0.0, 0.0, -3.0])];
        s.points[0].view = 1;
        assert_eq!(build_mapping(&t, &s, 1, None), Err(CorrespondenceError::NoCandidates));
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize, dim: usize, views: usize) -> FeaturePointCloud {
        let cams: Vec<CameraPose> = sample_camera_sphere(views, 3.0, rng.random(), Intrinsics::default());
        let mut feats = Vec::with_capacity(n * dim);
        let mut pts = Vec::with_capacity(n);
        let mut view_ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..views)).collect();
        view_ids.sort_unstable();
        for &view in &view_ids {
            loop {
                let f: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                if norm(&f) > 1e-3 {
                    feats.extend(f);
                    break;
                }
            }
            pts.push(point(view, [rng.random(), rng.random(), rng.random()]));
        }
        FeaturePointCloud::from_parts(dim, feats, pts, cams).unwrap()
    }

    #[test]
    fn restricted_mapping_matches_brute_force_over_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let t = random_cloud(&mut rng, 120, 8, 6);
        let s = random_cloud(&mut rng, 200, 8, 9);
        let m = build_mapping(&t, &s, 3, None).unwrap();
        for j in 0..t.len() {
            let views = select_candidate_views(t.points[j].view, &t.cameras, &s.cameras, 3, None);
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            for i in 0..s.len() {
                if !views.contains(&s.points[i].view) {
                    continue;
                }
                let v = cosine_similarity(t.feature(j), s.feature(i)).unwrap();
                if v > best.0 {
                    best = (v, i);
                }
            }
            assert_eq!(m.source_index[j], best.1);
            assert!(views.contains(&s.points[m.source_index[j]].view));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn full_mapping_equals_brute_force(seed in any::<u64>(), n in 1usize..150, m in 1usize..150, dim in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_cloud(&mut rng, m, dim, 4);
            let s = random_cloud(&mut rng, n, dim, 5);
            let map = build_mapping(&t, &s, 5, None).unwrap();
            let (idx, sc) = brute_force(&t, &s);
            prop_assert_eq!(&map.source_index, &idx);
            prop_assert_eq!(&map.score, &sc);
        }

        #[test]
        fn mapping_is_permutation_equivariant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_cloud(&mut rng, 40, 5, 1);
            let s = random_cloud(&mut rng, 60, 5, 1);
            let base = build_mapping(&t, &s, 1, None).unwrap();
            let mut perm: Vec<usize> = (0..s.len()).collect();
            perm.reverse();
            let feats: Vec<f32> = perm.iter().flat_map(|&i| s.feature(i).to_vec()).collect();
            let pts: Vec<CloudPoint> = perm.iter().map(|&i| s.points[i]).collect();
            let sp = FeaturePointCloud::from_parts(s.dim, feats, pts, s.cameras.clone()).unwrap();
            let pm = build_mapping(&t, &sp, 1, None).unwrap();
            prop_assert_eq!(&pm.score, &base.score);
            for j in 0..t.len() {
                prop_assert_eq!(s.feature(base.source_index[j]), sp.feature(pm.source_index[j]));
            }
        }
    }

    #[test]
    fn candidate_views() {
        let src: Vec<CameraPose> = sample_camera_sphere(12, 3.0, 5, Intrinsics::default());
        let tgt = vec![src[4].clone()];
        assert_eq!(select_candidate_views(0, &tgt, &src, 1, None), vec![4]);
        let mut all = select_candidate_views(0, &tgt, &src, 12, None);
        all.sort_unstable();
        assert_eq!(all, (0..12).collect::<Vec<_>>());

        // Exhaustive sort oracle.
        let other = sample_camera_sphere(3, 3.0, 99, Intrinsics::default());
        for ti in 0..3 {
            let f = other[ti].forward();
            let mut oracle: Vec<(f64, usize)> =
                src.iter().enumerate().map(|(i, s)| (f.dot(&s.forward()).clamp(-1.0, 1.0).acos(), i)).collect();
            oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want: Vec<usize> = oracle.iter().take(5).map(|p| p.1).collect();
            assert_eq!(select_candidate_views(ti, &other, &src, 5, None), want);
        }

        // Equal angles: lower index first.
        let dup = vec![cam_at([0.0, 0.0, 3.0]), cam_at([0.0, 0.0, 5.0])];
        assert_eq!(select_candidate_views(0, &dup[..1], &dup, 1, None), vec![0]);
    }

    fn scene_cloud(seed: u64) -> FeaturePointCloud {
        let scene = presets::checker_pair();
        let intr = Intrinsics { fov_y: 0.8, width: 24, height: 24 };
        let views: Vec<(GBufferView, FeatureMap)> = sample_camera_sphere(4, 4.0, seed, intr)
            .iter()
            .map(|c| {
                let g = render_gbuffer(&scene, c).unwrap();
                let f = builtin_descriptor(&g, &DescriptorConfig::default()).unwrap();
                (g, f)
            })
            .collect();
        sample_points(&views, 100, seed).unwrap()
    }

    #[test]
    fn sampling_rules() {
        let scene = presets::two_spheres();
        let intr = Intrinsics { fov_y: 0.8, width: 20, height: 20 };
        let cams = sample_camera_sphere(3, 4.0, 2, intr);
        let views: Vec<(GBufferView, FeatureMap)> = cams
            .iter()
            .map(|c| {
                let g = render_gbuffer(&scene, c).unwrap();
                let f = builtin_descriptor(&g, &DescriptorConfig::default()).unwrap();
                (g, f)
            })
            .collect();
        let coverage: Vec<usize> = views.iter().map(|(g, _)| g.covered_indices().len()).collect();

        // More requested than covered: take all, each exactly once.
        let c = sample_points(&views, 5000, 1).unwrap();
        assert_eq!(c.len(), coverage.iter().sum::<usize>());
        for (vi, cov) in coverage.iter().enumerate() {
            let mut px: Vec<(u32, u32)> = c.points.iter().filter(|p| p.view == vi).map(|p| p.pixel).collect();
            assert_eq!(px.len(), *cov);
            px.dedup();
            assert_eq!(px.len(), *cov);
        }

        let a = sample_points(&views, 10, 7).unwrap();
        assert_eq!(a.len(), 30);
        assert_eq!(a, sample_points(&views, 10, 7).unwrap());
        assert_ne!(a, sample_points(&views, 10, 8).unwrap());
        for (j, p) in a.points.iter().enumerate() {
            let (g, _) = &views[p.view];
            let i = p.pixel.1 as usize * g.width() + p.pixel.0 as usize;
            assert!(g.is_covered(i));
            assert!(a.norms[j] > 0.0);
        }
        assert_eq!(sample_points(&views, 0, 1), Err(CorrespondenceError::InvalidPerView));

        // An empty view is skipped and counted.
        let mut with_empty = views.clone();
        let far = CameraPose::new(Vec3::new(0.0, 0.0, 4.0), Vec3::new(0.0, 0.0, 10.0), Vec3::y(), intr);
        with_empty.push((render_gbuffer(&scene, &far).unwrap(), views[0].1.clone()));
        let c = sample_points(&with_empty, 10, 7).unwrap();
        assert_eq!(c.skipped_views, 1);
        assert_eq!(c.len(), 30);
    }

    #[test]
    fn assemble_uses_the_right_fields() {
        let c = scene_cloud(4);
        let ident = CorrespondenceMap { source_index: (0..c.len()).collect(), score: vec![1.0; c.len()], source_count: c.len() };
        let s = assemble_training_set(&ident, &c, &c);
        assert_eq!(s.len(), c.len());
        for (smp, p) in s.samples.iter().zip(&c.points) {
            assert_eq!((smp.position, smp.normal, smp.view_dir, smp.rgb), (p.position, p.normal, p.view_dir, p.rgb));
        }

        let zero = CorrespondenceMap { source_index: vec![0; c.len()], score: vec![1.0; c.len()], source_count: c.len() };
        let s = assemble_training_set(&zero, &c, &c);
        assert!(s.samples.iter().all(|x| x.rgb == c.points[0].rgb && x.view_dir == c.points[0].view_dir));

        // Poisoned target colours and source positions must not leak.
        let mut target = c.clone();
        let mut source = c.clone();
        target.points.iter_mut().for_each(|p| p.rgb = [f32::NAN; 3]);
        source.points.iter_mut().for_each(|p| p.position = [f32::NAN; 3]);
        let s = assemble_training_set(&ident, &target, &source);
        assert!(s.samples.iter().all(|x| x.rgb.iter().chain(&x.position).all(|v| v.is_finite())));
    }

    #[test]
    fn prealign_identity_on_same_cloud() {
        let c = scene_cloud(9);
        let t = prealign(&c, &c, &PrealignConfig::default()).unwrap();
        assert_eq!(t.rotation, Matrix3::identity());
        assert_eq!(t.translation, Vec3::zeros());
        assert_eq!(t.scale, 1.0);
    }

    #[test]
    fn prealign_recovers_yaw() {
        let source = scene_cloud(13);
        let r = rotation_about(Vec3::z(), 90f64.to_radians());
        let mut target = source.clone();
        for p in &mut target.points {
            let x = r * Vec3::from(p.position.map(f64::from));
            p.position = [x.x as f32, x.y as f32, x.z as f32];
        }
        let t = prealign(&target, &source, &PrealignConfig::default()).unwrap();
        assert!((t.yaw().to_degrees() + 90.0).abs() <= 10.0, "yaw {}", t.yaw().to_degrees());
        assert!(t.orthonormality_error() < 1e-6);
        assert!((t.rotation.determinant() - 1.0).abs() < 1e-9);
        assert!((t.scale - 1.0).abs() < 1e-3);

        let full = PrealignConfig { full_rotation: true, pitch_steps: 3, roll_steps: 4, ..PrealignConfig::default() };
        let tf = prealign(&target, &source, &full).unwrap();
        assert!(tf.orthonormality_error() < 1e-6);
        let mapped = tf.apply(&Vec3::from(target.points[0].position.map(f64::from)));
        assert!((mapped - Vec3::from(source.points[0].position.map(f64::from))).norm() < 0.5);
    }

    #[test]
    fn prealign_degenerate_cloud() {
        let t = cloud_from(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let mut t = t;
        t.points.iter_mut().for_each(|p| p.position = [1.0, 1.0, 1.0]);
        let s = scene_cloud(1);
        let s = FeaturePointCloud::from_parts(
            2,
            s.points.iter().map(|_| [1.0f32, 0.5]).flatten().collect(),
            s.points.clone(),
            s.cameras.clone(),
        )
        .unwrap();
        let r = prealign(&t, &s, &PrealignConfig::default()).unwrap();
        assert_eq!(r.rotation, Matrix3::identity());
        assert_eq!(r.scale, 1.0);
        assert!((r.translation - (s.centroid() - t.centroid())).norm() < 1e-12);
    }

    #[test]
    fn histogram_image_shape() {
        let m = CorrespondenceMap { source_index: vec![0; 4], score: vec![-1.0, 0.0, 0.99, 1.0], source_count: 1 };
        let img = score_histogram_image(&m, 8, 4);
        assert_eq!((img.width, img.height), (8, 4));
        assert_eq!(img.pixel(7, 0)[0], 1.0);
        assert_eq!(img.pixel(1, 3)[0], 0.0);
    }
}
