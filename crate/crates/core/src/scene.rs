//! Analytic test scenes, cameras and G-buffer rendering.
//!
//! Scenes are unions of rigidly posed solids with procedural textures. A
//! closest-hit raycaster produces exact per-pixel position, normal, view
//! direction and shaded colour, which is all the transfer method consumes.
//! Shading is a headlight Lambertian term, `albedo * max(0, n . w)`, so the
//! observed colour depends on the viewing direction.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par;
use crate::raster::Image;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("scene has no primitives")]
    Empty,
    #[error("primitive {index}: {message}")]
    InvalidPrimitive { index: usize, message: String },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("scene file parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Analytic solid in its local frame.
///
/// Local frames: the box is centred on the origin, the torus lies in the
/// local xy-plane around the z axis, and the capped cone runs along z from
/// `-height/2` (radius `radius_bottom`) to `+height/2` (radius `radius_top`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
    Torus { major_radius: f64, minor_radius: f64 },
    CappedCone { height: f64, radius_bottom: f64, radius_top: f64 },
}

/// Procedural albedo evaluated at object-space coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Constant { color: [f64; 3] },
    /// Parity of `floor(p * scale)` summed over the three axes.
    Checker { a: [f64; 3], b: [f64; 3], scale: f64 },
    /// Linear blend from `a` at `from` to `b` at `to` along `axis`.
    Gradient { axis: usize, a: [f64; 3], b: [f64; 3], from: f64, to: f64 },
    /// `a` where `sin(frequency * p[axis]) >= 0`, else `b`.
    Bands { axis: usize, a: [f64; 3], b: [f64; 3], frequency: f64 },
}

impl Texture {
    pub fn albedo(&self, p: &Vec3) -> Vec3 {
        match self {
            Texture::Constant { color } => Vec3::from(*color),
            Texture::Checker { a, b, scale } => {
                let s = (p.x * scale).floor() + (p.y * scale).floor() + (p.z * scale).floor();
                if (s as i64).rem_euclid(2) == 0 {
                    Vec3::from(*a)
                } else {
                    Vec3::from(*b)
                }
            }
            Texture::Gradient { axis, a, b, from, to } => {
                let t = ((p[*axis] - from) / (to - from)).clamp(0.0, 1.0);
                Vec3::from(*a) * (1.0 - t) + Vec3::from(*b) * t
            }
            Texture::Bands { axis, a, b, frequency } => {
                if (frequency * p[*axis]).sin() >= 0.0 {
                    Vec3::from(*a)
                } else {
                    Vec3::from(*b)
                }
            }
        }
    }

    fn colors(&self) -> Vec<[f64; 3]> {
        match self {
            Texture::Constant { color } => vec![*color],
            Texture::Checker { a, b, .. } | Texture::Gradient { a, b, .. } | Texture::Bands { a, b, .. } => {
                vec![*a, *b]
            }
        }
    }
}

/// Rigid placement: `world = rotation * local + translation`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vec3::zeros() }
    }

    /// Rotation `Rz(yaw) * Ry(pitch) * Rx(roll)`, angles in degrees.
    pub fn from_euler_deg(translation: Vec3, yaw_pitch_roll: [f64; 3]) -> Self {
        let [yaw, pitch, roll] = yaw_pitch_roll.map(f64::to_radians);
        let r = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw)
            * Rotation3::from_axis_angle(&Vector3::y_axis(), pitch)
            * Rotation3::from_axis_angle(&Vector3::x_axis(), roll);
        Self { rotation: *r.matrix(), translation }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub pose: Pose,
    pub texture: Texture,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDescription {
    pub primitives: Vec<Primitive>,
}

/// Closest intersection of a ray with the scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub position: Vec3,
    pub normal: Vec3,
    pub albedo: Vec3,
    pub primitive: usize,
}

const T_MIN: f64 = 1e-9;

impl Shape {
    fn validate(&self) -> Result<(), String> {
        let ok = match self {
            Shape::Sphere { radius } => *radius > 0.0,
            Shape::Box { half_extents } => half_extents.iter().all(|h| *h > 0.0),
            Shape::Torus { major_radius, minor_radius } => *major_radius > 0.0 && *minor_radius > 0.0,
            Shape::CappedCone { height, radius_bottom, radius_top } => {
                *height > 0.0 && *radius_bottom > 0.0 && *radius_top > 0.0
            }
        };
        let finite = match self {
            Shape::Sphere { radius } => radius.is_finite(),
            Shape::Box { half_extents } => half_extents.iter().all(|h| h.is_finite()),
            Shape::Torus { major_radius, minor_radius } => major_radius.is_finite() && minor_radius.is_finite(),
            Shape::CappedCone { height, radius_bottom, radius_top } => {
                height.is_finite() && radius_bottom.is_finite() && radius_top.is_finite()
            }
        };
        if ok && finite {
            Ok(())
        } else {
            Err("all size parameters must be finite and > 0".into())
        }
    }

    /// Radius of a local-origin sphere enclosing the shape.
    pub fn bounding_radius(&self) -> f64 {
        match self {
            Shape::Sphere { radius } => *radius,
            Shape::Box { half_extents } => Vec3::from(*half_extents).norm(),
            Shape::Torus { major_radius, minor_radius } => major_radius + minor_radius,
            Shape::CappedCone { height, radius_bottom, radius_top } => {
                (radius_bottom.max(*radius_top).powi(2) + (height / 2.0).powi(2)).sqrt()
            }
        }
    }

    /// Local-frame intersection: `(t, local normal)`.
    fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<(f64, Vec3)> {
        match self {
            Shape::Sphere { radius } => intersect_sphere(o, d, *radius).map(|t| (t, (o + d * t) / *radius)),
            Shape::Box { half_extents } => intersect_box(o, d, half_extents),
            Shape::Torus { major_radius, minor_radius } => intersect_torus(o, d, *major_radius, *minor_radius),
            Shape::CappedCone { height, radius_bottom, radius_top } => {
                intersect_cone(o, d, *height, *radius_bottom, *radius_top)
            }
        }
    }

    /// Local-frame signed implicit value (negative inside), used by tests.
    pub fn implicit(&self, p: &Vec3) -> f64 {
        match self {
            Shape::Sphere { radius } => p.norm() - radius,
            Shape::Box { half_extents } => {
                let q = p.abs() - Vec3::from(*half_extents);
                q.map(|v| v.max(0.0)).norm() + q.max().min(0.0)
            }
            Shape::Torus { major_radius, minor_radius } => {
                let q = (p.x * p.x + p.y * p.y).sqrt() - major_radius;
                (q * q + p.z * p.z).sqrt() - minor_radius
            }
            Shape::CappedCone { height, radius_bottom, radius_top } => {
                let h = height / 2.0;
                let k = (radius_top - radius_bottom) / height;
                let r = (radius_bottom + radius_top) / 2.0 + k * p.z;
                let lateral = ((p.x * p.x + p.y * p.y).sqrt() - r) / (1.0 + k * k).sqrt();
                lateral.max(p.z.abs() - h)
            }
        }
    }
}

fn intersect_sphere(o: &Vec3, d: &Vec3, radius: f64) -> Option<f64> {
    let b = o.dot(d);
    let c = o.dot(o) - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    [-b - s, -b + s].into_iter().find(|t| *t > T_MIN)
}

fn intersect_box(o: &Vec3, d: &Vec3, half: &[f64; 3]) -> Option<(f64, Vec3)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut near_axis = 0;
    let mut far_axis = 0;
    for a in 0..3 {
        if d[a].abs() < 1e-300 {
            if o[a].abs() > half[a] {
                return None;
            }
            continue;
        }
        let t0 = (-half[a] - o[a]) / d[a];
        let t1 = (half[a] - o[a]) / d[a];
        let (lo, hi) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
        if lo > t_near {
            t_near = lo;
            near_axis = a;
        }
        if hi < t_far {
            t_far = hi;
            far_axis = a;
        }
    }
    if t_near > t_far {
        return None;
    }
    let (t, axis) = if t_near > T_MIN {
        (t_near, near_axis)
    } else if t_far > T_MIN {
        (t_far, far_axis)
    } else {
        return None;
    };
    let p = o + d * t;
    let mut n = Vec3::zeros();
    n[axis] = p[axis].signum();
    Some((t, n))
}

fn intersect_torus(o: &Vec3, d: &Vec3, major: f64, minor: f64) -> Option<(f64, Vec3)> {
    let f = |t: f64| {
        let p = o + d * t;
        let q = (p.x * p.x + p.y * p.y).sqrt() - major;
        q * q + p.z * p.z - minor * minor
    };
    // Bracket with the enclosing sphere, march for the first sign change and
    // refine by bisection.
    let bound = major + minor;
    let b = o.dot(d);
    let c = o.dot(o) - bound * bound;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let t_start = (-b - s).max(T_MIN);
    let t_end = -b + s;
    if t_end <= T_MIN {
        return None;
    }
    let step = minor / 32.0;
    let mut t0 = t_start;
    let mut f0 = f(t0);
    if f0 <= 0.0 {
        // Ray origin inside the tube; not expected for external cameras.
        return None;
    }
    while t0 < t_end {
        let t1 = (t0 + step).min(t_end);
        let f1 = f(t1);
        if f1 <= 0.0 {
            let (mut lo, mut hi) = (t0, t1);
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if f(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let t = 0.5 * (lo + hi);
            let p = o + d * t;
            let rho = (p.x * p.x + p.y * p.y).sqrt().max(1e-300);
            let ring = Vec3::new(p.x / rho * major, p.y / rho * major, 0.0);
            return Some((t, (p - ring).normalize()));
        }
        t0 = t1;
        f0 = f1;
    }
    let _ = f0;
    None
}

fn intersect_cone(o: &Vec3, d: &Vec3, height: f64, rb: f64, rt: f64) -> Option<(f64, Vec3)> {
    let h = height / 2.0;
    let k = (rt - rb) / height;
    let rc = (rb + rt) / 2.0;
    let mut best: Option<(f64, Vec3)> = None;
    let mut consider = |t: f64, n: Vec3| {
        if t > T_MIN && best.is_none_or(|(bt, _)| t < bt) {
            best = Some((t, n));
        }
    };

    // Lateral surface: x^2 + y^2 = (rc + k z)^2.
    let a = d.x * d.x + d.y * d.y - k * k * d.z * d.z;
    let r0 = rc + k * o.z;
    let b = 2.0 * (o.x * d.x + o.y * d.y - k * r0 * d.z);
    let c = o.x * o.x + o.y * o.y - r0 * r0;
    let mut roots = Vec::with_capacity(2);
    if a.abs() > 1e-14 {
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let s = disc.sqrt();
            roots.push((-b - s) / (2.0 * a));
            roots.push((-b + s) / (2.0 * a));
        }
    } else if b.abs() > 1e-300 {
        roots.push(-c / b);
    }
    for t in roots {
        let p = o + d * t;
        let r = rc + k * p.z;
        if p.z.abs() <= h && r >= 0.0 {
            let n = Vec3::new(p.x, p.y, -k * r);
            if n.norm() > 0.0 {
                consider(t, n.normalize());
            }
        }
    }

    // Caps.
    if d.z.abs() > 1e-300 {
        for (z, r, nz) in [(-h, rb, -1.0), (h, rt, 1.0)] {
            let t = (z - o.z) / d.z;
            let p = o + d * t;
            if p.x * p.x + p.y * p.y <= r * r {
                consider(t, Vec3::new(0.0, 0.0, nz));
            }
        }
    }
    best
}

impl Primitive {
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, Vec3, Vec3)> {
        let rt = self.pose.rotation.transpose();
        let o = rt * (origin - self.pose.translation);
        let d = rt * dir;
        let (t, n_local) = self.shape.intersect(&o, &d)?;
        let local = o + d * t;
        Some((t, (self.pose.rotation * n_local).normalize(), local))
    }
}

impl SceneDescription {
    pub fn new(primitives: Vec<Primitive>) -> Result<Self, SceneError> {
        let scene = Self { primitives };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.primitives.is_empty() {
            return Err(SceneError::Empty);
        }
        for (index, p) in self.primitives.iter().enumerate() {
            p.shape.validate().map_err(|message| SceneError::InvalidPrimitive { index, message })?;
            for c in p.texture.colors() {
                if !c.iter().all(|v| (0.0..=1.0).contains(v)) {
                    return Err(SceneError::InvalidPrimitive {
                        index,
                        message: format!("texture colour {c:?} outside [0,1]"),
                    });
                }
            }
            let axis_ok = match &p.texture {
                Texture::Gradient { axis, from, to, .. } => *axis < 3 && from != to,
                Texture::Bands { axis, .. } => *axis < 3,
                _ => true,
            };
            if !axis_ok {
                return Err(SceneError::InvalidPrimitive { index, message: "invalid texture axis or range".into() });
            }
        }
        Ok(())
    }

    /// Closest hit along `origin + t * dir` (`dir` unit length).
    pub fn trace(&self, origin: &Vec3, dir: &Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, prim) in self.primitives.iter().enumerate() {
            if let Some((t, normal, local)) = prim.intersect(origin, dir) {
                if best.is_none_or(|b| t < b.t) {
                    best = Some(Hit {
                        t,
                        position: origin + dir * t,
                        normal,
                        albedo: prim.texture.albedo(&local),
                        primitive: i,
                    });
                }
            }
        }
        best
    }

    /// World-space axis-aligned bounds of all primitives' bounding spheres.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in &self.primitives {
            let r = p.shape.bounding_radius();
            lo = lo.inf(&(p.pose.translation - Vec3::repeat(r)));
            hi = hi.sup(&(p.pose.translation + Vec3::repeat(r)));
        }
        (lo, hi)
    }

    /// Replaces every texture by a constant albedo (untextured geometry).
    pub fn untextured(&self, albedo: [f64; 3]) -> Self {
        let mut s = self.clone();
        for p in &mut s.primitives {
            p.texture = Texture::Constant { color: albedo };
        }
        s
    }

    pub fn from_toml_str(text: &str) -> Result<Self, SceneError> {
        let file: SceneFile = toml::from_str(text).map_err(|e| SceneError::Parse(e.to_string()))?;
        let primitives = file
            .primitive
            .into_iter()
            .map(|p| Primitive {
                shape: p.shape,
                pose: Pose::from_euler_deg(Vec3::from(p.center), p.rotation_deg),
                texture: p.texture,
            })
            .collect();
        Self::new(primitives)
    }

    pub fn load(path: &Path) -> Result<Self, SceneError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    #[serde(default)]
    primitive: Vec<PrimitiveSpec>,
}

#[derive(Debug, Deserialize)]
struct PrimitiveSpec {
    #[serde(flatten)]
    shape: Shape,
    #[serde(default)]
    center: [f64; 3],
    /// Yaw (about z), pitch (about y), roll (about x) in degrees.
    #[serde(default)]
    rotation_deg: [f64; 3],
    texture: Texture,
}

/// Pinhole camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    /// Vertical field of view in radians.
    pub fov_y: f64,
    pub width: u32,
    pub height: u32,
}

/// Field of view and resolution shared by a set of cameras.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fov_y: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self { fov_y: 40f64.to_radians(), width: 400, height: 400 }
    }
}

/// Orthonormal camera frame: `(right, up, forward)`.
#[derive(Debug, Clone, Copy)]
pub struct CameraFrame {
    pub right: Vec3,
    pub up: Vec3,
    pub forward: Vec3,
}

impl CameraPose {
    pub fn new(position: Vec3, look_at: Vec3, up: Vec3, intr: Intrinsics) -> Self {
        Self {
            position: position.into(),
            look_at: look_at.into(),
            up: up.into(),
            fov_y: intr.fov_y,
            width: intr.width,
            height: intr.height,
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let p = Vec3::from(self.position);
        let l = Vec3::from(self.look_at);
        if !(p - l).iter().all(|v| v.is_finite()) || (p - l).norm() == 0.0 {
            return Err(SceneError::InvalidCamera("position must differ from look-at".into()));
        }
        if !(self.fov_y > 0.0 && self.fov_y < PI) {
            return Err(SceneError::InvalidCamera(format!("fov {} outside (0, pi)", self.fov_y)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(SceneError::InvalidCamera("resolution must be at least 1x1".into()));
        }
        Ok(())
    }

    pub fn position_vec(&self) -> Vec3 {
        Vec3::from(self.position)
    }

    pub fn forward(&self) -> Vec3 {
        (Vec3::from(self.look_at) - self.position_vec()).normalize()
    }

    /// Camera basis. If the up-hint is parallel to the view direction the
    /// hint falls back to +z, then +x.
    pub fn frame(&self) -> CameraFrame {
        let forward = self.forward();
        let mut right = Vec3::zeros();
        for hint in [Vec3::from(self.up), Vec3::z(), Vec3::x()] {
            let r = forward.cross(&hint);
            if r.norm() > 1e-9 * hint.norm().max(1e-300) {
                right = r.normalize();
                break;
            }
        }
        let up = right.cross(&forward);
        CameraFrame { right, up, forward }
    }

    /// Unit direction of the ray through the centre of pixel `(x, y)`.
    pub fn ray_dir(&self, frame: &CameraFrame, x: u32, y: u32) -> Vec3 {
        let tan = (self.fov_y / 2.0).tan();
        let aspect = self.width as f64 / self.height as f64;
        let u = (2.0 * (x as f64 + 0.5) / self.width as f64 - 1.0) * tan * aspect;
        let v = (1.0 - 2.0 * (y as f64 + 0.5) / self.height as f64) * tan;
        (frame.forward + frame.right * u + frame.up * v).normalize()
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Per-pixel geometry and appearance record for one camera.
///
/// All planes are row-major with `width * height` entries. Where
/// `alpha <= 0.5` every other plane is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GBufferView {
    pub camera: CameraPose,
    pub position: Vec<[f32; 3]>,
    pub normal: Vec<[f32; 3]>,
    pub view_dir: Vec<[f32; 3]>,
    pub rgb: Vec<[f32; 3]>,
    pub alpha: Vec<f32>,
}

impl GBufferView {
    pub fn empty(camera: CameraPose) -> Self {
        let n = camera.pixel_count();
        Self {
            camera,
            position: vec![[0.0; 3]; n],
            normal: vec![[0.0; 3]; n],
            view_dir: vec![[0.0; 3]; n],
            rgb: vec![[0.0; 3]; n],
            alpha: vec![0.0; n],
        }
    }

    pub fn width(&self) -> usize {
        self.camera.width as usize
    }

    pub fn height(&self) -> usize {
        self.camera.height as usize
    }

    pub fn pixel_count(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_covered(&self, i: usize) -> bool {
        self.alpha[i] > 0.5
    }

    pub fn covered_indices(&self) -> Vec<usize> {
        (0..self.pixel_count()).filter(|&i| self.is_covered(i)).collect()
    }

    pub fn rgb_image(&self) -> Image {
        Image::from_rgb(self.width(), self.height(), &self.rgb)
    }

    pub fn alpha_image(&self) -> Image {
        Image::from_gray(self.width(), self.height(), self.alpha.clone())
    }

    /// Same geometry with the colour plane replaced (background kept at zero).
    pub fn with_rgb(&self, rgb: &Image) -> Self {
        let mut v = self.clone();
        for i in 0..v.pixel_count() {
            v.rgb[i] = if v.is_covered(i) {
                let p = &rgb.data[i * 3..i * 3 + 3];
                [p[0], p[1], p[2]]
            } else {
                [0.0; 3]
            };
        }
        v
    }
}

fn to_f32(v: &Vec3) -> [f32; 3] {
    [v.x as f32, v.y as f32, v.z as f32]
}

/// Shaded colour of a hit seen from direction `omega` (towards the camera).
pub fn shade(hit: &Hit, omega: &Vec3) -> Vec3 {
    hit.albedo * hit.normal.dot(omega).max(0.0)
}

/// Closest-hit raycast of every pixel. Deterministic and independent of the
/// number of worker threads (each row is computed independently).
pub fn render_gbuffer(scene: &SceneDescription, camera: &CameraPose) -> Result<GBufferView, SceneError> {
    camera.validate()?;
    let frame = camera.frame();
    let cam = camera.position_vec();
    let w = camera.width as usize;
    let mut view = GBufferView::empty(camera.clone());
    let rows = par::map_range(camera.height as usize, |y| {
        let mut row = Vec::with_capacity(w);
        for x in 0..w {
            let dir = camera.ray_dir(&frame, x as u32, y as u32);
            row.push(scene.trace(&cam, &dir).map(|hit| {
                let omega = (cam - hit.position).normalize();
                (hit, omega, shade(&hit, &omega))
            }));
        }
        row
    });
    for (y, row) in rows.into_iter().enumerate() {
        for (x, px) in row.into_iter().enumerate() {
            if let Some((hit, omega, rgb)) = px {
                let i = y * w + x;
                view.position[i] = to_f32(&hit.position);
                view.normal[i] = to_f32(&hit.normal);
                view.view_dir[i] = to_f32(&omega);
                view.rgb[i] = to_f32(&rgb.map(|c| c.clamp(0.0, 1.0)));
                view.alpha[i] = 1.0;
            }
        }
    }
    Ok(view)
}

/// `count` cameras uniformly distributed on a sphere around the origin,
/// all looking at the origin with a +y up-hint.
pub fn sample_camera_sphere(count: usize, radius: f64, seed: u64, intr: Intrinsics) -> Vec<CameraPose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let z: f64 = rng.random_range(-1.0..=1.0);
            let phi: f64 = rng.random_range(0.0..2.0 * PI);
            let s = (1.0 - z * z).max(0.0).sqrt();
            let dir = Vec3::new(s * phi.cos(), s * phi.sin(), z).normalize();
            CameraPose::new(dir * radius, Vec3::zeros(), Vec3::y(), intr)
        })
        .collect()
}

/// `count` cameras equally spaced in azimuth (starting at +x) at a fixed
/// elevation above the xy-plane. These orbit the z axis and use +z as the
/// up-hint.
pub fn circular_trajectory(count: usize, radius: f64, elevation: f64, intr: Intrinsics) -> Vec<CameraPose> {
    (0..count)
        .map(|i| {
            let az = 2.0 * PI * i as f64 / count as f64;
            let pos = Vec3::new(
                radius * elevation.cos() * az.cos(),
                radius * elevation.cos() * az.sin(),
                radius * elevation.sin(),
            );
            CameraPose::new(pos, Vec3::zeros(), Vec3::z(), intr)
        })
        .collect()
}

/// Axis-aligned rotation helper used by tests and pre-alignment.
pub fn rotation_about(axis: Vec3, angle: f64) -> Matrix3<f64> {
    *Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).matrix()
}

/// Built-in scenes used by tests and the smoke pipeline.
pub mod presets {
    use super::*;

    /// Checker-textured sphere next to a banded box.
    pub fn checker_pair() -> SceneDescription {
        SceneDescription::new(vec![
            Primitive {
                shape: Shape::Sphere { radius: 0.8 },
                pose: Pose::from_euler_deg(Vec3::new(-0.55, 0.0, 0.0), [0.0; 3]),
                texture: Texture::Checker { a: [0.9, 0.2, 0.15], b: [0.15, 0.3, 0.9], scale: 2.5 },
            },
            Primitive {
                shape: Shape::Box { half_extents: [0.45, 0.45, 0.6] },
                pose: Pose::from_euler_deg(Vec3::new(0.75, 0.0, 0.0), [25.0, 0.0, 0.0]),
                texture: Texture::Bands { axis: 2, a: [0.95, 0.85, 0.2], b: [0.2, 0.7, 0.3], frequency: 6.0 },
            },
        ])
        .expect("preset is valid")
    }

    /// Two spheres with different textures, mirrored about the yz-plane.
    pub fn two_spheres() -> SceneDescription {
        SceneDescription::new(vec![
            Primitive {
                shape: Shape::Sphere { radius: 0.7 },
                pose: Pose::from_euler_deg(Vec3::new(-0.9, 0.0, 0.0), [0.0; 3]),
                texture: Texture::Constant { color: [0.9, 0.15, 0.1] },
            },
            Primitive {
                shape: Shape::Sphere { radius: 0.7 },
                pose: Pose::from_euler_deg(Vec3::new(0.9, 0.0, 0.0), [0.0; 3]),
                texture: Texture::Constant { color: [0.1, 0.3, 0.95] },
            },
        ])
        .expect("preset is valid")
    }

    /// Torus around a capped cone; a geometric counterpart for transfer tests.
    pub fn torus_cone() -> SceneDescription {
        SceneDescription::new(vec![
            Primitive {
                shape: Shape::Torus { major_radius: 0.8, minor_radius: 0.25 },
                pose: Pose::identity(),
                texture: Texture::Gradient { axis: 0, a: [0.8, 0.3, 0.2], b: [0.2, 0.4, 0.8], from: -1.0, to: 1.0 },
            },
            Primitive {
                shape: Shape::CappedCone { height: 1.2, radius_bottom: 0.45, radius_top: 0.15 },
                pose: Pose::identity(),
                texture: Texture::Constant { color: [0.7, 0.7, 0.2] },
            },
        ])
        .expect("preset is valid")
    }
}
