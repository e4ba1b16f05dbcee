//! File formats: binary PPM images, `GDTENSR1` tensor dumps, layout JSON,
//! TOML run configs and JSON manifests.
//!
//! Every `decode_*` / `parse_*` function works on an in-memory buffer and
//! rejects trailing bytes; the path-based wrappers add the file name to
//! I/O errors. Writers are deterministic and go through [`write_atomic`].

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{LatentGrid, Shape};
use crate::pipeline::RunConfig;
use crate::scene::LayoutSpec;

pub const TENSOR_MAGIC: &[u8; 8] = b"GDTENSR1";

/// Writes `bytes` to a temporary sibling of `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = read_bytes(path)?;
    String::from_utf8(bytes).map_err(|e| Error::Malformed {
        path: path.display().to_string(),
        message: format!("not UTF-8: {e}"),
    })
}

// ---------------------------------------------------------------- PPM

/// Transfer curve applied after clamping to `[0, 1]` and before quantizing.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum GammaMap {
    #[default]
    Linear,
    /// `v ↦ v^(1/γ)`.
    Power(f64),
}

impl GammaMap {
    fn apply(self, v: f64) -> f64 {
        let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        match self {
            GammaMap::Linear => v,
            GammaMap::Power(g) => v.powf(1.0 / g),
        }
    }
}

/// Quantizes `[0, 1]` to a byte, rounding halves up.
pub fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Encodes a 3-channel grid as a binary (P6) PPM.
pub fn encode_ppm(img: &LatentGrid, gamma: GammaMap) -> Result<Vec<u8>> {
    if img.channels() != 3 {
        return Err(Error::invalid(format!("PPM needs 3 channels, got {}", img.channels())));
    }
    if let GammaMap::Power(g) = gamma {
        if !(g > 0.0 && g.is_finite()) {
            return Err(Error::invalid(format!("gamma must be positive, got {g}")));
        }
    }
    let (h, w) = (img.height(), img.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(quantize(gamma.apply(img.get(c, y, x))));
            }
        }
    }
    Ok(out)
}

pub fn write_ppm(img: &LatentGrid, path: &Path, gamma: GammaMap) -> Result<()> {
    write_atomic(path, &encode_ppm(img, gamma)?)
}

fn ppm_error(message: impl Into<String>) -> Error {
    Error::Malformed {
        path: "ppm".into(),
        message: message.into(),
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        let digits = &self.bytes[start..self.pos];
        if digits.is_empty() || digits.len() > 9 {
            return Err(ppm_error(format!("bad {what} at byte {start}")));
        }
        Ok(std::str::from_utf8(digits).unwrap().parse().unwrap())
    }
}

/// Decodes a P6 PPM with maxval up to 255 into a 3-channel grid in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<LatentGrid> {
    if !bytes.starts_with(b"P6") {
        return Err(ppm_error("missing P6 magic"));
    }
    let mut hdr = Header { bytes, pos: 2 };
    let w = hdr.number("width")?;
    let h = hdr.number("height")?;
    let maxval = hdr.number("maxval")?;
    if w == 0 || h == 0 {
        return Err(ppm_error("empty image"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(ppm_error(format!("unsupported maxval {maxval}")));
    }
    if !bytes.get(hdr.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(ppm_error("header must end with one whitespace byte"));
    }
    let body = &bytes[hdr.pos + 1..];
    let need = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| ppm_error("image too large"))?;
    if body.len() != need {
        return Err(ppm_error(format!("expected {need} pixel bytes, found {}", body.len())));
    }
    let mut img = LatentGrid::zeros(Shape::new(3, h, w));
    for (i, &b) in body.iter().enumerate() {
        if b as usize > maxval {
            return Err(ppm_error(format!("sample {b} exceeds maxval {maxval}")));
        }
        let (p, c) = (i / 3, i % 3);
        img.set(c, p / w, p % w, b as f64 / maxval as f64);
    }
    Ok(img)
}

pub fn read_ppm(path: &Path) -> Result<LatentGrid> {
    decode_ppm(&read_bytes(path)?).map_err(|e| with_file(e, path))
}

fn with_file(e: Error, path: &Path) -> Error {
    let file = path.display();
    match e {
        Error::Malformed { path, message } => Error::Malformed {
            path: format!("{file}: {path}"),
            message,
        },
        Error::Schema { path, message } => Error::Schema {
            path: format!("{file}: {path}"),
            message,
        },
        Error::Invariant { path, message } => Error::Invariant {
            path: format!("{file}: {path}"),
            message,
        },
        other => other,
    }
}

// ---------------------------------------------------------------- tensors

/// A dense row-major `f64` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorDump {
    pub dims: Vec<u64>,
    pub data: Vec<f64>,
}

impl TensorDump {
    pub fn new(dims: Vec<u64>, data: Vec<f64>) -> Result<Self> {
        let n = element_count(&dims).ok_or_else(|| Error::invalid("tensor dims overflow"))?;
        if n != data.len() as u64 {
            return Err(Error::invalid(format!(
                "dims {dims:?} need {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_grid(g: &LatentGrid) -> Self {
        let s = g.shape();
        Self {
            dims: vec![s.channels as u64, s.height as u64, s.width as u64],
            data: g.as_slice().to_vec(),
        }
    }

    /// Stacks equally shaped grids into an `N × C × H × W` tensor.
    pub fn from_grids(grids: &[LatentGrid]) -> Result<Self> {
        let shape = grids
            .first()
            .map(LatentGrid::shape)
            .ok_or_else(|| Error::invalid("nothing to stack"))?;
        let mut data = Vec::with_capacity(grids.len() * shape.len());
        for g in grids {
            crate::grid::ensure_shape(shape, g.shape())?;
            data.extend_from_slice(g.as_slice());
        }
        let dims = vec![grids.len() as u64, shape.channels as u64, shape.height as u64, shape.width as u64];
        Ok(Self { dims, data })
    }

    pub fn to_grid(&self) -> Result<LatentGrid> {
        match self.dims[..] {
            [c, h, w] => LatentGrid::from_vec(Shape::new(c as usize, h as usize, w as usize), self.data.clone()),
            _ => Err(Error::invalid(format!("expected 3 dims, got {:?}", self.dims))),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.dims.len() + 8 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |message: String| Error::Malformed {
            path: "tensor".into(),
            message,
        };
        let rest = bytes
            .strip_prefix(TENSOR_MAGIC.as_slice())
            .ok_or_else(|| bad("missing GDTENSR1 magic".into()))?;
        if rest.len() < 4 {
            return Err(bad("truncated ndim".into()));
        }
        let ndim = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
        let rest = &rest[4..];
        if rest.len() / 8 < ndim {
            return Err(bad(format!("truncated dims: ndim {ndim}")));
        }
        let dims: Vec<u64> = rest[..8 * ndim]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let payload = &rest[8 * ndim..];
        let n = element_count(&dims).ok_or_else(|| bad(format!("dims {dims:?} overflow")))?;
        if n.checked_mul(8) != Some(payload.len() as u64) {
            return Err(bad(format!(
                "dims {dims:?} need {n} values, payload has {} bytes",
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { dims, data })
    }
}

fn element_count(dims: &[u64]) -> Option<u64> {
    dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d))
}

pub fn write_tensor(t: &TensorDump, path: &Path) -> Result<()> {
    write_atomic(path, &t.encode())
}

pub fn read_tensor(path: &Path) -> Result<TensorDump> {
    TensorDump::decode(&read_bytes(path)?).map_err(|e| with_file(e, path))
}

// ---------------------------------------------------------------- JSON

fn json_error(e: serde_path_to_error::Error<serde_json::Error>) -> Error {
    let path = e.path().to_string();
    let inner = e.into_inner();
    match inner.classify() {
        serde_json::error::Category::Data => Error::Schema {
            path,
            message: inner.to_string(),
        },
        _ => Error::Malformed {
            path,
            message: inner.to_string(),
        },
    }
}

/// Deserializes one JSON document, recording the field path of any failure.
/// Anything but whitespace after the document is an error.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(text);
    let value = serde_path_to_error::deserialize(&mut de).map_err(json_error)?;
    de.end().map_err(|e| Error::Malformed {
        path: ".".into(),
        message: e.to_string(),
    })?;
    Ok(value)
}

/// Pretty-printed JSON with a trailing newline. Keys follow struct field order.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::invalid(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Parses and validates a layout document.
pub fn parse_layout(text: &str) -> Result<LayoutSpec> {
    let spec: LayoutSpec = parse_json(text)?;
    spec.validate()?;
    Ok(spec)
}

/// Canonical layout serialization: two-space indented JSON, keys in the
/// order `canvas, boxes` and `x, y, w, h, label`, shortest round-trip
/// float formatting, trailing newline.
pub fn format_layout(spec: &LayoutSpec) -> Result<String> {
    spec.validate()?;
    to_json(spec)
}

pub fn read_layout(path: &Path) -> Result<LayoutSpec> {
    parse_layout(&read_text(path)?).map_err(|e| with_file(e, path))
}

pub fn write_layout(spec: &LayoutSpec, path: &Path) -> Result<()> {
    write_atomic(path, format_layout(spec)?.as_bytes())
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    write_atomic(path, to_json(value)?.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    parse_json(&read_text(path)?).map_err(|e| with_file(e, path))
}

// ---------------------------------------------------------------- TOML

/// Parses a run config. Missing keys take their defaults; unknown keys are
/// schema errors.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Malformed {
        path: ".".into(),
        message: e.message().to_string(),
    })?;
    let cfg: RunConfig =
        serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| Error::Schema {
            path: e.path().to_string(),
            message: e.into_inner().message().to_string(),
        })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn format_run_config(cfg: &RunConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::invalid(e.to_string()))
}

pub fn read_run_config(path: &Path) -> Result<RunConfig> {
    parse_run_config(&read_text(path)?).map_err(|e| with_file(e, path))
}
