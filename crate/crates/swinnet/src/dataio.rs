//! Dataset manifests, image loading and preprocessing, edge extraction,
//! checkpoint serialization, and saliency-map export.
//!
//! A dataset is a JSON manifest: an array of records with an `id` and
//! paths to the appearance image (`rgb`), the auxiliary modality (`aux`,
//! e.g. depth or thermal, read as grayscale), and the binary ground truth
//! (`gt`). Images are resized to the model's input size on load; the
//! appearance image bilinearly, the ground truth by nearest neighbor.
//!
//! Checkpoints are a flat named-tensor directory with a header that binds
//! the file to a model configuration by hash, so weights can never be
//! loaded into a differently-shaped model.

use std::collections::BTreeMap;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

// ---------------------------------------------------------------------------
// manifest
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub rgb: PathBuf,
    pub aux: PathBuf,
    pub gt: PathBuf,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Read a manifest (a JSON array of records). Relative paths are
    /// resolved against the manifest's directory.
    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries: Vec<ManifestEntry> =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if let Some(dir) = path.parent() {
            for e in entries.iter_mut() {
                for p in [&mut e.rgb, &mut e.aux, &mut e.gt] {
                    if p.is_relative() {
                        *p = dir.join(&p);
                    }
                }
            }
        }
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !seen.insert(e.id.clone()) {
                return Err(Error::Format(format!("duplicate sample id {:?}", e.id)));
            }
        }
        Ok(DatasetManifest { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

// ---------------------------------------------------------------------------
// planes and resizing
// ---------------------------------------------------------------------------

/// A single-channel image as f64 in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Plane> {
        if data.len() != h * w || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "plane data length {} does not match {h}x{w}",
                data.len()
            )));
        }
        Ok(Plane { h, w, data })
    }

    pub fn constant(h: usize, w: usize, v: f64) -> Plane {
        Plane {
            h,
            w,
            data: vec![v; h * w],
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.w + c]
    }

    /// Bilinear resample with half-pixel-aligned centers.
    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Plane {
        if oh == self.h && ow == self.w {
            return self.clone();
        }
        let mut out = Vec::with_capacity(oh * ow);
        let fy = self.h as f64 / oh as f64;
        let fx = self.w as f64 / ow as f64;
        for r in 0..oh {
            let sy = ((r as f64 + 0.5) * fy - 0.5).clamp(0.0, (self.h - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(self.h - 1);
            let wy = sy - y0 as f64;
            for c in 0..ow {
                let sx = ((c as f64 + 0.5) * fx - 0.5).clamp(0.0, (self.w - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(self.w - 1);
                let wx = sx - x0 as f64;
                let top = self.at(y0, x0) * (1.0 - wx) + self.at(y0, x1) * wx;
                let bot = self.at(y1, x0) * (1.0 - wx) + self.at(y1, x1) * wx;
                out.push(top * (1.0 - wy) + bot * wy);
            }
        }
        Plane {
            h: oh,
            w: ow,
            data: out,
        }
    }

    /// Nearest-neighbor resample (for label maps).
    pub fn resize_nearest(&self, oh: usize, ow: usize) -> Plane {
        if oh == self.h && ow == self.w {
            return self.clone();
        }
        let mut out = Vec::with_capacity(oh * ow);
        let fy = self.h as f64 / oh as f64;
        let fx = self.w as f64 / ow as f64;
        for r in 0..oh {
            let sr = (((r as f64 + 0.5) * fy - 0.5).round().max(0.0) as usize).min(self.h - 1);
            for c in 0..ow {
                let sc = (((c as f64 + 0.5) * fx - 0.5).round().max(0.0) as usize).min(self.w - 1);
                out.push(self.at(sr, sc));
            }
        }
        Plane {
            h: oh,
            w: ow,
            data: out,
        }
    }

    /// Min-max normalize to [0,1]; constant planes become zero.
    pub fn minmax_normalize(&self) -> Plane {
        Plane {
            h: self.h,
            w: self.w,
            data: crate::metrics::normalize_map(&self.data),
        }
    }
}

// ---------------------------------------------------------------------------
// image files
// ---------------------------------------------------------------------------

/// Load an image file as RGB planes scaled to [0,1].
pub fn load_rgb(path: &Path) -> Result<[Plane; 3]> {
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut planes = [
        Plane::constant(h, w, 0.0),
        Plane::constant(h, w, 0.0),
        Plane::constant(h, w, 0.0),
    ];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            planes[c].data[i] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(planes)
}

/// Load an image file as a single grayscale plane scaled to [0,1].
pub fn load_gray(path: &Path) -> Result<Plane> {
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
    Plane::new(h, w, data)
}

/// Write a probability map in [0,1] as an 8-bit grayscale PNG,
/// quantized by round(255 * p).
pub fn save_mask_png(path: &Path, plane: &Plane) -> Result<()> {
    let mut buf = Vec::with_capacity(plane.data.len());
    for &v in &plane.data {
        if !v.is_finite() {
            return Err(Error::numeric("non-finite value in exported map"));
        }
        buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    let img = image::GrayImage::from_raw(plane.w as u32, plane.h as u32, buf)
        .ok_or_else(|| Error::invalid("plane extent inconsistent"))?;
    img.save(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// samples
// ---------------------------------------------------------------------------

/// One preprocessed training/eval sample at the model input size S.
pub struct Sample {
    pub id: String,
    /// 3,S,S appearance image, mean/std normalized
    pub rgb: Vec<f32>,
    /// 3,S,S auxiliary modality: per-image min-max, replicated, normalized
    pub aux: Vec<f32>,
    /// S,S binary ground truth
    pub gt: Vec<f32>,
    /// S,S binary edge target derived from the ground truth
    pub edge: Vec<f32>,
    pub size: usize,
}

fn normalize_channel(p: &Plane, mean: f64, std: f64) -> impl Iterator<Item = f32> + '_ {
    p.data.iter().map(move |&v| ((v - mean) / std) as f32)
}

/// Assemble a sample from raw planes (already loaded, any size).
pub fn build_sample(
    id: &str,
    rgb: &[Plane; 3],
    aux: &Plane,
    gt: &Plane,
    size: usize,
) -> Result<Sample> {
    let mut rgb_t = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        let r = rgb[c].resize_bilinear(size, size);
        rgb_t.extend(normalize_channel(&r, IMAGENET_MEAN[c], IMAGENET_STD[c]));
    }
    let aux_n = aux.resize_bilinear(size, size).minmax_normalize();
    let mut aux_t = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        aux_t.extend(normalize_channel(&aux_n, IMAGENET_MEAN[c], IMAGENET_STD[c]));
    }
    let gt_r = gt.resize_nearest(size, size);
    let gt_bin: Vec<f64> = gt_r.data.iter().map(|&v| (v >= 0.5) as u8 as f64).collect();
    let gt_plane = Plane::new(size, size, gt_bin.clone())?;
    let edge = canny_edges(&gt_plane);
    Ok(Sample {
        id: id.to_string(),
        rgb: rgb_t,
        aux: aux_t,
        gt: gt_bin.iter().map(|&v| v as f32).collect(),
        edge: edge.data.iter().map(|&v| v as f32).collect(),
        size,
    })
}

/// Load and preprocess one manifest entry.
pub fn load_sample(entry: &ManifestEntry, size: usize) -> Result<Sample> {
    let rgb = load_rgb(&entry.rgb)?;
    let aux = load_gray(&entry.aux)?;
    let gt = load_gray(&entry.gt)?;
    build_sample(&entry.id, &rgb, &aux, &gt, size)
}

/// Batched model inputs: (rgb, aux) as N,3,S,S and (gt, edge) as N,1,S,S.
pub type BatchTensors = (Tensor<f32>, Tensor<f32>, Tensor<f32>, Tensor<f32>);

/// Named tensor snapshot as stored in checkpoints: shape plus f32 payload.
pub type TensorStore = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

/// Stack samples into model input tensors.
pub fn batch_tensors(samples: &[&Sample]) -> Result<BatchTensors> {
    if samples.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let s = samples[0].size;
    let n = samples.len();
    let mut rgb = Vec::with_capacity(n * 3 * s * s);
    let mut aux = Vec::with_capacity(n * 3 * s * s);
    let mut gt = Vec::with_capacity(n * s * s);
    let mut edge = Vec::with_capacity(n * s * s);
    for sm in samples {
        if sm.size != s {
            return Err(Error::invalid("mixed sample sizes in batch"));
        }
        rgb.extend_from_slice(&sm.rgb);
        aux.extend_from_slice(&sm.aux);
        gt.extend_from_slice(&sm.gt);
        edge.extend_from_slice(&sm.edge);
    }
    Ok((
        Tensor::from_vec(&[n, 3, s, s], rgb)?,
        Tensor::from_vec(&[n, 3, s, s], aux)?,
        Tensor::from_vec(&[n, 1, s, s], gt)?,
        Tensor::from_vec(&[n, 1, s, s], edge)?,
    ))
}

// ---------------------------------------------------------------------------
// edge extraction
// ---------------------------------------------------------------------------

/// Classic edge detector: 5x5 Gaussian (sigma 1.4), Sobel gradients,
/// non-maximum suppression over four quantized directions, double
/// threshold at 0.1/0.2 of the gradient maximum, then hysteresis.
pub fn canny_edges(src: &Plane) -> Plane {
    let (h, w) = (src.h, src.w);
    if h < 3 || w < 3 {
        return Plane::constant(h, w, 0.0);
    }

    // Gaussian blur, sigma = 1.4, 5x5
    let mut kernel = [[0.0f64; 5]; 5];
    let mut ksum = 0.0;
    for i in 0..5 {
        for j in 0..5 {
            let (dy, dx) = (i as f64 - 2.0, j as f64 - 2.0);
            let v = (-(dy * dy + dx * dx) / (2.0 * 1.4 * 1.4)).exp();
            kernel[i][j] = v;
            ksum += v;
        }
    }
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut blur = vec![0.0f64; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for i in 0..5 {
                for j in 0..5 {
                    let rr = clamp(r as isize + i as isize - 2, h);
                    let cc = clamp(c as isize + j as isize - 2, w);
                    acc += kernel[i][j] * src.at(rr, cc);
                }
            }
            blur[r * w + c] = acc / ksum;
        }
    }

    // Sobel gradients
    let at = |r: isize, c: isize| blur[clamp(r, h) * w + clamp(c, w)];
    let mut mag = vec![0.0f64; h * w];
    let mut dir = vec![0u8; h * w];
    let mut max_mag = 0.0f64;
    for r in 0..h as isize {
        for c in 0..w as isize {
            let gx = -at(r - 1, c - 1) - 2.0 * at(r, c - 1) - at(r + 1, c - 1)
                + at(r - 1, c + 1)
                + 2.0 * at(r, c + 1)
                + at(r + 1, c + 1);
            let gy = -at(r - 1, c - 1) - 2.0 * at(r - 1, c) - at(r - 1, c + 1)
                + at(r + 1, c - 1)
                + 2.0 * at(r + 1, c)
                + at(r + 1, c + 1);
            let m = (gx * gx + gy * gy).sqrt();
            let i = r as usize * w + c as usize;
            mag[i] = m;
            max_mag = max_mag.max(m);
            // quantize the angle to 0, 45, 90, 135 degrees
            let angle = gy.atan2(gx).to_degrees();
            let a = ((angle + 180.0) % 180.0 + 22.5) % 180.0;
            dir[i] = (a / 45.0) as u8 % 4;
        }
    }
    if max_mag < 1e-9 {
        return Plane::constant(h, w, 0.0);
    }

    // non-maximum suppression along the gradient direction
    let offsets = [(0isize, 1isize), (-1, 1), (-1, 0), (-1, -1)];
    let mut thin = vec![0.0f64; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let i = r as usize * w + c as usize;
            let (dr, dc) = offsets[dir[i] as usize];
            let m = mag[i];
            let a = mag[clamp(r + dr, h) * w + clamp(c + dc, w)];
            let b = mag[clamp(r - dr, h) * w + clamp(c - dc, w)];
            if m >= a && m >= b {
                thin[i] = m;
            }
        }
    }

    // double threshold + hysteresis
    let lo = 0.1 * max_mag;
    let hi_t = 0.2 * max_mag;
    let mut state = vec![0u8; h * w]; // 0 off, 1 weak, 2 strong
    let mut stack = Vec::new();
    for i in 0..h * w {
        if thin[i] >= hi_t {
            state[i] = 2;
            stack.push(i);
        } else if thin[i] >= lo {
            state[i] = 1;
        }
    }
    while let Some(i) = stack.pop() {
        let (r, c) = ((i / w) as isize, (i % w) as isize);
        for dr in -1..=1isize {
            for dc in -1..=1isize {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let (rr, cc) = (r + dr, c + dc);
                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                    continue;
                }
                let j = rr as usize * w + cc as usize;
                if state[j] == 1 {
                    state[j] = 2;
                    stack.push(j);
                }
            }
        }
    }
    Plane {
        h,
        w,
        data: state.iter().map(|&s| (s == 2) as u8 as f64).collect(),
    }
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"SWNT";
const CKPT_VERSION: u32 = 1;

/// SHA-256 of a canonical JSON rendering of any serializable config.
pub fn config_hash<C: Serialize>(cfg: &C) -> Result<[u8; 32]> {
    let json = serde_json::to_string(cfg).map_err(|e| Error::Format(e.to_string()))?;
    let mut h = Sha256::new();
    h.update(json.as_bytes());
    Ok(h.finalize().into())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Write a named-tensor checkpoint bound to `cfg`.
///
/// Layout (all integers little-endian): magic "SWNT", version u32,
/// config hash (32 bytes), tensor count u32, then per tensor: name length
/// u32 + UTF-8 name, rank u32, dims as u64, and the f32 payload.
pub fn save_checkpoint<C: Serialize>(
    path: &Path,
    cfg: &C,
    tensors: &TensorStore,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&config_hash(cfg)?);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, (shape, data)) in tensors {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::invalid(format!(
                "tensor {name} has {} values but shape {shape:?}",
                data.len()
            )));
        }
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Read a checkpoint, verifying magic, version, and the config hash.
pub fn load_checkpoint<C: Serialize>(
    path: &Path,
    cfg: &C,
) -> Result<TensorStore> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > buf.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &buf[pos..pos + n];
        pos += n;
        Ok(s)
    };
    if take(4)? != CKPT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let stored: [u8; 32] = take(32)?.try_into().unwrap();
    let expected = config_hash(cfg)?;
    if stored != expected {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint was written for config {} but the current config is {}",
            hex(&stored),
            hex(&expected)
        )));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let nlen = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(nlen)?.to_vec())
            .map_err(|_| Error::Format("bad tensor name".into()))?;
        let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(4 * n)?;
        let mut data = Vec::with_capacity(n);
        for ch in raw.chunks_exact(4) {
            data.push(f32::from_le_bytes(ch.try_into().unwrap()));
        }
        if out.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    if pos != buf.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(out)
}
