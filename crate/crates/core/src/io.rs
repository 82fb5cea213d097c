//! Binary containers and PNG output.
//!
//! All containers start with a four-byte magic and a `u32` version, and use
//! little-endian integers and IEEE floats throughout. Readers reject any
//! file whose declared sizes disagree with the actual payload length.
//!
//! GBUF (G-buffer view), version 1:
//!
//! ```text
//! "GBUF" u32:version u32:width u32:height u32:channel_count
//! channel_count x { u32:name_len  name:utf8  u32:arity }
//! camera: f64x3 position, f64x3 look_at, f64x3 up, f64 fov_y
//! payload: for each channel, for each component: width*height f32 (planar)
//! ```
//!
//! Channels written: `position`(3) `normal`(3) `view_dir`(3) `rgb`(3) `alpha`(1).
//! Unknown channels are skipped on read.
//!
//! FEAT (feature map), version 1:
//!
//! ```text
//! "FEAT" u32:version u32:width u32:height u32:dim u32:prov_len prov:utf8
//! payload: width*height*dim f32, row-major, descriptor-contiguous per pixel
//! ```
//!
//! CORR (correspondence map): `"CORR" u32:version u32:m u32:n`, then `m` u32
//! source indices and `m` f32 scores.
//!
//! TSMP (transfer samples): `"TSMP" u32:version u32:count`, then per sample
//! 12 f32: position, normal, view direction, rgb.
//!
//! IMGF (float image): `"IMGF" u32:version u32:width u32:height u32:channels`,
//! then `width*height*channels` f32 interleaved.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::correspondence::{CorrespondenceMap, TransferSample, TransferSamples};
use crate::features::FeatureMap;
use crate::raster::{quantize_u8, Image};
use crate::scene::{CameraPose, GBufferView};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported version {found} (field `version`)")]
    Version { found: u32 },
    #[error("payload length mismatch: expected {expected} bytes, found {actual}")]
    PayloadLength { expected: u64, actual: u64 },
    #[error("truncated header while reading field `{field}`")]
    Truncated { field: &'static str },
    #[error("invalid field `{field}`: {message}")]
    Field { field: &'static str, message: String },
    #[error("png error: {0}")]
    Png(String),
}

impl FormatError {
    fn field(field: &'static str, message: impl Into<String>) -> Self {
        FormatError::Field { field, message: message.into() }
    }
}

#[derive(Default)]
pub(crate) struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn magic(&mut self, m: &[u8; 4]) -> &mut Self {
        self.buf.extend_from_slice(m);
        self
    }
    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }
    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn i32(&mut self, v: i32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn f32(&mut self, v: f32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn str(&mut self, s: &str) -> &mut Self {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
        self
    }
    pub fn f32s(&mut self, vs: impl IntoIterator<Item = f32>) -> &mut Self {
        for v in vs {
            self.f32(v);
        }
        self
    }
}

pub(crate) struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], FormatError> {
        if self.data.len() - self.pos < n {
            return Err(FormatError::Truncated { field });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<(), FormatError> {
        let found = self.take(4, "magic")?;
        if found != expected {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    pub fn version(&mut self) -> Result<u32, FormatError> {
        let v = self.u32("version")?;
        if v != FORMAT_VERSION {
            return Err(FormatError::Version { found: v });
        }
        Ok(v)
    }

    pub fn u8(&mut self, field: &'static str) -> Result<u8, FormatError> {
        Ok(self.take(1, field)?[0])
    }
    pub fn u32(&mut self, field: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
    pub fn i32(&mut self, field: &'static str) -> Result<i32, FormatError> {
        Ok(i32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
    pub fn u64(&mut self, field: &'static str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
    pub fn f64(&mut self, field: &'static str) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
    pub fn string(&mut self, field: &'static str) -> Result<String, FormatError> {
        let n = self.u32(field)? as usize;
        let bytes = self.take(n, field)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| FormatError::field(field, "not valid UTF-8"))
    }

    /// Checks that exactly `expected` bytes remain.
    pub fn expect_remaining(&self, expected: u64) -> Result<(), FormatError> {
        let actual = (self.data.len() - self.pos) as u64;
        if actual != expected {
            return Err(FormatError::PayloadLength { expected, actual });
        }
        Ok(())
    }

    /// Reads `n` f32 values; call after [`Self::expect_remaining`].
    pub fn f32s(&mut self, n: usize) -> Vec<f32> {
        let bytes = &self.data[self.pos..self.pos + n * 4];
        self.pos += n * 4;
        bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect()
    }

    pub fn u32s(&mut self, n: usize) -> Vec<u32> {
        let bytes = &self.data[self.pos..self.pos + n * 4];
        self.pos += n * 4;
        bytes.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect()
    }
}

/// Writes via a sibling temp file and rename, so readers never observe a
/// partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

const GBUF_CHANNELS: [(&str, u32); 5] = [("position", 3), ("normal", 3), ("view_dir", 3), ("rgb", 3), ("alpha", 1)];

pub fn encode_gbuf(view: &GBufferView) -> Vec<u8> {
    let cam = &view.camera;
    let mut w = ByteWriter::default();
    w.magic(b"GBUF").u32(FORMAT_VERSION).u32(cam.width).u32(cam.height).u32(GBUF_CHANNELS.len() as u32);
    for (name, arity) in GBUF_CHANNELS {
        w.str(name).u32(arity);
    }
    for v in cam.position.iter().chain(&cam.look_at).chain(&cam.up) {
        w.f64(*v);
    }
    w.f64(cam.fov_y);
    for plane in [&view.position, &view.normal, &view.view_dir, &view.rgb] {
        for c in 0..3 {
            w.f32s(plane.iter().map(|p| p[c]));
        }
    }
    w.f32s(view.alpha.iter().copied());
    w.buf
}

pub fn decode_gbuf(bytes: &[u8]) -> Result<GBufferView, FormatError> {
    let mut r = ByteReader::new(bytes);
    r.magic(b"GBUF")?;
    r.version()?;
    let width = r.u32("width")?;
    let height = r.u32("height")?;
    if width == 0 || height == 0 {
        return Err(FormatError::field("width", "width and height must be >= 1"));
    }
    let count = r.u32("channel_count")?;
    let mut table: Vec<(String, u32)> = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name = r.string("channel_name")?;
        let arity = r.u32("channel_arity")?;
        if arity == 0 {
            return Err(FormatError::field("channel_arity", format!("channel `{name}` has arity 0")));
        }
        if table.iter().any(|(n, _)| *n == name) {
            return Err(FormatError::field("channel_name", format!("duplicate channel `{name}`")));
        }
        table.push((name, arity));
    }
    let mut cam_vals = [0.0f64; 10];
    for v in &mut cam_vals {
        *v = r.f64("camera")?;
    }
    let pixels = width as u64 * height as u64;
    let total_arity: u64 = table.iter().map(|(_, a)| *a as u64).sum();
    r.expect_remaining(pixels * total_arity * 4)?;

    let camera = CameraPose {
        position: [cam_vals[0], cam_vals[1], cam_vals[2]],
        look_at: [cam_vals[3], cam_vals[4], cam_vals[5]],
        up: [cam_vals[6], cam_vals[7], cam_vals[8]],
        fov_y: cam_vals[9],
        width,
        height,
    };
    let n = pixels as usize;
    let mut view = GBufferView::empty(camera);
    let mut seen = [false; 5];
    for (name, arity) in &table {
        let planes: Vec<Vec<f32>> = (0..*arity).map(|_| r.f32s(n)).collect();
        let Some(slot) = GBUF_CHANNELS.iter().position(|(c, _)| c == name) else {
            continue;
        };
        if *arity != GBUF_CHANNELS[slot].1 {
            return Err(FormatError::field(
                "channel_arity",
                format!("channel `{name}` has arity {arity}, expected {}", GBUF_CHANNELS[slot].1),
            ));
        }
        seen[slot] = true;
        if slot == 4 {
            view.alpha = planes.into_iter().next().unwrap();
        } else {
            let dst = match slot {
                0 => &mut view.position,
                1 => &mut view.normal,
                2 => &mut view.view_dir,
                _ => &mut view.rgb,
            };
            for (i, px) in dst.iter_mut().enumerate() {
                *px = [planes[0][i], planes[1][i], planes[2][i]];
            }
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(FormatError::field("channels", format!("missing channel `{}`", GBUF_CHANNELS[missing].0)));
    }
    Ok(view)
}

pub fn write_gbuf(view: &GBufferView, path: &Path) -> Result<(), FormatError> {
    write_atomic(path, &encode_gbuf(view))
}

pub fn read_gbuf(path: &Path) -> Result<GBufferView, FormatError> {
    decode_gbuf(&fs::read(path)?)
}

pub fn encode_feat(map: &FeatureMap) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.magic(b"FEAT")
        .u32(FORMAT_VERSION)
        .u32(map.width as u32)
        .u32(map.height as u32)
        .u32(map.dim as u32)
        .str(&map.provenance)
        .f32s(map.data.iter().copied());
    w.buf
}

pub fn decode_feat(bytes: &[u8]) -> Result<FeatureMap, FormatError> {
    let mut r = ByteReader::new(bytes);
    r.magic(b"FEAT")?;
    r.version()?;
    let width = r.u32("width")? as usize;
    let height = r.u32("height")? as usize;
    let dim = r.u32("dim")? as usize;
    if dim == 0 {
        return Err(FormatError::field("dim", "dim must be ≥ 1"));
    }
    if width == 0 || height == 0 {
        return Err(FormatError::field("width", "width and height must be >= 1"));
    }
    let provenance = r.string("provenance")?;
    let n = width * height * dim;
    r.expect_remaining(n as u64 * 4)?;
    let data = r.f32s(n);
    if data.iter().any(|v| !v.is_finite()) {
        return Err(FormatError::field("payload", "non-finite descriptor value"));
    }
    Ok(FeatureMap { width, height, dim, data, provenance })
}

pub fn write_feat(map: &FeatureMap, path: &Path) -> Result<(), FormatError> {
    write_atomic(path, &encode_feat(map))
}

pub fn read_feat(path: &Path) -> Result<FeatureMap, FormatError> {
    decode_feat(&fs::read(path)?)
}

pub fn encode_corr(map: &CorrespondenceMap) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.magic(b"CORR").u32(FORMAT_VERSION).u32(map.source_index.len() as u32).u32(map.source_count as u32);
    for &i in &map.source_index {
        w.u32(i as u32);
    }
    w.f32s(map.score.iter().map(|s| *s as f32));
    w.buf
}

pub fn decode_corr(bytes: &[u8]) -> Result<CorrespondenceMap, FormatError> {
    let mut r = ByteReader::new(bytes);
    r.magic(b"CORR")?;
    r.version()?;
    let m = r.u32("target_count")? as usize;
    let n = r.u32("source_count")? as usize;
    r.expect_remaining(m as u64 * 8)?;
    let source_index: Vec<usize> = r.u32s(m).into_iter().map(|i| i as usize).collect();
    if let Some(bad) = source_index.iter().find(|&&i| i >= n) {
        return Err(FormatError::field("source_index", format!("index {bad} out of range for {n} source points")));
    }
    let score = r.f32s(m).into_iter().map(f64::from).collect();
    Ok(CorrespondenceMap { source_index, score, source_count: n })
}

pub fn encode_samples(samples: &TransferSamples) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.magic(b"TSMP").u32(FORMAT_VERSION).u32(samples.len() as u32);
    for s in &samples.samples {
        w.f32s(s.position.iter().chain(&s.normal).chain(&s.view_dir).chain(&s.rgb).copied());
    }
    w.buf
}

pub fn decode_samples(bytes: &[u8]) -> Result<TransferSamples, FormatError> {
    let mut r = ByteReader::new(bytes);
    r.magic(b"TSMP")?;
    r.version()?;
    let count = r.u32("count")? as usize;
    r.expect_remaining(count as u64 * 48)?;
    let flat = r.f32s(count * 12);
    let samples = flat
        .chunks_exact(12)
        .map(|c| TransferSample {
            position: [c[0], c[1], c[2]],
            normal: [c[3], c[4], c[5]],
            view_dir: [c[6], c[7], c[8]],
            rgb: [c[9], c[10], c[11]],
        })
        .collect();
    Ok(TransferSamples { samples })
}

pub fn encode_imgf(img: &Image) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.magic(b"IMGF")
        .u32(FORMAT_VERSION)
        .u32(img.width as u32)
        .u32(img.height as u32)
        .u32(img.channels as u32)
        .f32s(img.data.iter().copied());
    w.buf
}

pub fn decode_imgf(bytes: &[u8]) -> Result<Image, FormatError> {
    let mut r = ByteReader::new(bytes);
    r.magic(b"IMGF")?;
    r.version()?;
    let width = r.u32("width")? as usize;
    let height = r.u32("height")? as usize;
    let channels = r.u32("channels")? as usize;
    if channels == 0 {
        return Err(FormatError::field("channels", "channels must be >= 1"));
    }
    let n = width * height * channels;
    r.expect_remaining(n as u64 * 4)?;
    Ok(Image { width, height, channels, data: r.f32s(n) })
}

/// Writes an 8-bit PNG: 3 channels as RGB, 1 channel as grayscale. Values
/// are clamped to `[0, 1]` and stored as `round(v * 255)`.
pub fn write_png(img: &Image, path: &Path) -> Result<(), FormatError> {
    write_atomic(path, &encode_png(img)?)
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>, FormatError> {
    let color = match img.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        c => return Err(FormatError::field("channels", format!("cannot write {c}-channel PNG"))),
    };
    let bytes: Vec<u8> = img.data.iter().map(|v| quantize_u8(*v)).collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| FormatError::Png(e.to_string()))?;
        writer.write_image_data(&bytes).map_err(|e| FormatError::Png(e.to_string()))?;
    }
    Ok(out)
}

pub fn read_png(path: &Path) -> Result<Image, FormatError> {
    let file = std::io::BufReader::new(fs::File::open(path)?);
    let mut dec = png::Decoder::new(file);
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| FormatError::Png(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| FormatError::Png("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| FormatError::Png(e.to_string()))?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(FormatError::Png("indexed PNG after expansion".into())),
    };
    let data = buf[..info.buffer_size()].iter().map(|b| *b as f32 / 255.0).collect();
    Ok(Image { width: info.width as usize, height: info.height as usize, channels, data })
}

/// Header summary of any supported container, for `inspect`.
pub fn describe(bytes: &[u8]) -> Result<String, FormatError> {
    let magic = bytes.get(..4).ok_or(FormatError::Truncated { field: "magic" })?;
    Ok(match magic {
        b"GBUF" => {
            let v = decode_gbuf(bytes)?;
            let c = &v.camera;
            format!(
                "GBUF v{FORMAT_VERSION} {}x{} covered={} camera position={:?} look_at={:?} up={:?} fov_y={:.6}",
                c.width,
                c.height,
                v.covered_indices().len(),
                c.position,
                c.look_at,
                c.up,
                c.fov_y
            )
        }
        b"FEAT" => {
            let f = decode_feat(bytes)?;
            format!("FEAT v{FORMAT_VERSION} {}x{} dim={} provenance={:?}", f.width, f.height, f.dim, f.provenance)
        }
        b"CORR" => {
            let c = decode_corr(bytes)?;
            let mean = c.score.iter().sum::<f64>() / c.score.len().max(1) as f64;
            format!("CORR v{FORMAT_VERSION} targets={} sources={} mean_score={mean:.6}", c.len(), c.source_count)
        }
        b"TSMP" => format!("TSMP v{FORMAT_VERSION} samples={}", decode_samples(bytes)?.len()),
        b"IMGF" => {
            let i = decode_imgf(bytes)?;
            format!("IMGF v{FORMAT_VERSION} {}x{} channels={}", i.width, i.height, i.channels)
        }
        b"NFLD" => crate::field::decode_checkpoint(bytes)
            .map(|p| format!("NFLD {}", p.arch_summary()))
            .map_err(|e| FormatError::field("checkpoint", e.to_string()))?,
        other => {
            return Err(FormatError::BadMagic {
                expected: "GBUF|FEAT|CORR|TSMP|IMGF|NFLD".into(),
                found: String::from_utf8_lossy(other).into_owned(),
            })
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{presets, render_gbuffer, Intrinsics};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_view() -> GBufferView {
        let cam = CameraPose::new(Vector3::new(0.3, 0.4, 3.0), Vector3::zeros(), Vector3::y(), Intrinsics {
            fov_y: 0.9,
            width: 13,
            height: 7,
        });
        render_gbuffer(&presets::checker_pair(), &cam).unwrap()
    }

    #[test]
    fn gbuf_round_trip_is_exact() {
        let v = sample_view();
        let bytes = encode_gbuf(&v);
        assert_eq!(decode_gbuf(&bytes).unwrap(), v);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.gbuf");
        write_gbuf(&v, &path).unwrap();
        assert_eq!(read_gbuf(&path).unwrap(), v);
    }

    #[test]
    fn gbuf_truncated_payload_is_rejected() {
        let mut bytes = encode_gbuf(&sample_view());
        bytes.truncate(bytes.len() - 3);
        let err = decode_gbuf(&bytes).unwrap_err();
        assert!(err.to_string().contains("payload length mismatch"), "{err}");
        let mut bytes = encode_gbuf(&sample_view());
        bytes.extend_from_slice(&[0; 4]);
        assert!(matches!(decode_gbuf(&bytes), Err(FormatError::PayloadLength { .. })));
    }

    #[test]
    fn gbuf_bad_magic_and_version() {
        let mut bytes = encode_gbuf(&sample_view());
        bytes[3] = b'X';
        assert!(decode_gbuf(&bytes).unwrap_err().to_string().contains("bad magic"));
        let mut bytes = encode_gbuf(&sample_view());
        bytes[4] = 9;
        assert!(matches!(decode_gbuf(&bytes), Err(FormatError::Version { found: 9 })));
        assert!(matches!(decode_gbuf(b"GB"), Err(FormatError::Truncated { field: "magic" })));
    }

    #[test]
    fn gbuf_duplicate_channel_rejected() {
        let v = sample_view();
        let mut w = ByteWriter::default();
        w.magic(b"GBUF").u32(1).u32(v.camera.width).u32(v.camera.height).u32(2);
        w.str("alpha").u32(1).str("alpha").u32(1);
        let err = decode_gbuf(&w.buf).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    fn random_feat(w: usize, h: usize, dim: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap {
            width: w,
            height: h,
            dim,
            data: (0..w * h * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
            provenance: "external".into(),
        }
    }

    #[test]
    fn feat_round_trip_and_errors() {
        let f = random_feat(8, 8, 16, 1);
        assert_eq!(decode_feat(&encode_feat(&f)).unwrap(), f);

        let mut zero_dim = f.clone();
        zero_dim.dim = 0;
        zero_dim.data.clear();
        let err = decode_feat(&encode_feat(&zero_dim)).unwrap_err();
        assert!(err.to_string().contains("dim must be ≥ 1"), "{err}");

        let mut bytes = encode_feat(&f);
        bytes.pop();
        assert!(matches!(decode_feat(&bytes), Err(FormatError::PayloadLength { .. })));
    }

    #[test]
    fn corr_samples_and_imgf_round_trip() {
        let c = CorrespondenceMap { source_index: vec![2, 0, 1], score: vec![0.5, -0.25, 1.0], source_count: 3 };
        assert_eq!(decode_corr(&encode_corr(&c)).unwrap(), c);
        let bad = CorrespondenceMap { source_index: vec![5], score: vec![0.0], source_count: 3 };
        assert!(decode_corr(&encode_corr(&bad)).is_err());

        let s = TransferSamples {
            samples: vec![TransferSample {
                position: [1.0, 2.0, 3.0],
                normal: [0.0, 0.0, 1.0],
                view_dir: [1.0, 0.0, 0.0],
                rgb: [0.1, 0.2, 0.3],
            }],
        };
        assert_eq!(decode_samples(&encode_samples(&s)).unwrap(), s);

        let img = Image::filled(3, 2, &[0.25, 0.5]);
        assert_eq!(decode_imgf(&encode_imgf(&img)).unwrap(), img);
    }

    #[test]
    fn png_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("half.png");
        write_png(&Image::filled(4, 3, &[0.5, 0.5, 0.5]), &p).unwrap();
        let back = read_png(&p).unwrap();
        assert_eq!((back.width, back.height, back.channels), (4, 3, 3));
        assert!(back.data.iter().all(|v| *v == 128.0 / 255.0));

        write_png(&Image::filled(2, 2, &[0.0]), &p).unwrap();
        assert!(read_png(&p).unwrap().data.iter().all(|v| *v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Image { width: 9, height: 5, channels: 3, data: (0..135).map(|_| rng.random::<f32>()).collect() };
        write_png(&img, &p).unwrap();
        let back = read_png(&p).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn describe_reports_headers() {
        let v = sample_view();
        assert!(describe(&encode_gbuf(&v)).unwrap().starts_with("GBUF v1 13x7"));
        assert!(describe(b"ZZZZ").is_err());
    }
}
