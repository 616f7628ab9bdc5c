//! Patch ingestion and preprocessing.
//!
//! Patches travel in the LS8P container (see [`encode_patch`]). Raw Landsat-8
//! patches carry 10 bands; the working composite keeps bands 7, 6 and 2 as
//! R, G, B. Each channel is then min/max scaled to `[-1, 1]` on its own.

use std::fs;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LS8P_MAGIC: &[u8; 4] = b"LS8P";
pub const LS8P_VERSION: u16 = 1;
const LS8P_HEADER_LEN: usize = 18;

/// Number of bands in a raw Landsat-8 patch.
pub const RAW_BANDS: usize = 10;
/// 1-based raw band indices forming the (R, G, B) composite.
pub const COMPOSITE_BANDS: [usize; 3] = [7, 6, 2];

/// One multispectral patch and its binary fire mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub id: String,
    /// `[B, H, W]` sensor values.
    pub bands: Tensor<f32>,
    /// `[H, W]`, values in {0, 1}.
    pub mask: Tensor<f32>,
}

impl PatchRecord {
    pub fn new(id: impl Into<String>, bands: Tensor<f32>, mask: Tensor<f32>) -> Result<Self> {
        let &[_, h, w] = bands.shape() else {
            return Err(Error::shape(
                "patch",
                format!("bands must be [B, H, W], got {:?}", bands.shape()),
            ));
        };
        if mask.shape() != [h, w] {
            return Err(Error::shape(
                "patch",
                format!(
                    "mask {:?} does not match bands {:?}",
                    mask.shape(),
                    bands.shape()
                ),
            ));
        }
        if let Some(v) = mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument(format!(
                "mask must be binary, found {v}"
            )));
        }
        Ok(Self {
            id: id.into(),
            bands,
            mask,
        })
    }

    pub fn band_count(&self) -> usize {
        self.bands.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.bands.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.bands.shape()[2]
    }

    fn plane(&self, band: usize) -> &[f32] {
        let n = self.height() * self.width();
        &self.bands.data()[band * n..(band + 1) * n]
    }
}

/// Keep raw bands 7, 6, 2 (1-based) as R, G, B.
pub fn select_channels(p: &PatchRecord) -> Result<PatchRecord> {
    if p.band_count() != RAW_BANDS {
        return Err(Error::InvalidArgument(format!(
            "channel selection needs {RAW_BANDS} raw bands, patch {} has {}",
            p.id,
            p.band_count()
        )));
    }
    let data: Vec<f32> = COMPOSITE_BANDS
        .iter()
        .flat_map(|&b| p.plane(b - 1).iter().copied())
        .collect();
    let bands = Tensor::new([3, p.height(), p.width()], data)?;
    Ok(PatchRecord {
        id: p.id.clone(),
        bands,
        mask: p.mask.clone(),
    })
}

/// Per-channel linear scaling `2(x − min)/(max − min) − 1`; constant channels become 0.
pub fn normalize_patch(p: &PatchRecord) -> PatchRecord {
    let n = p.height() * p.width();
    let mut data = Vec::with_capacity(p.bands.numel());
    for band in 0..p.band_count() {
        let plane = p.plane(band);
        let (lo, hi) = plane
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v as f64), hi.max(v as f64))
            });
        if n == 0 || hi <= lo {
            data.extend(std::iter::repeat_n(0.0, n));
        } else {
            let range = hi - lo;
            data.extend(
                plane
                    .iter()
                    .map(|&v| ((2.0 * (v as f64 - lo) / range - 1.0).clamp(-1.0, 1.0)) as f32),
            );
        }
    }
    let bands = Tensor::new(p.bands.shape(), data).expect("shape preserved");
    PatchRecord {
        id: p.id.clone(),
        bands,
        mask: p.mask.clone(),
    }
}

/// Source coordinate for output index `i` under the half-pixel-centre convention.
pub fn bilinear_source(i: usize, scale: f64, extent: usize) -> f64 {
    ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (extent - 1) as f64)
}

/// Resize to `target × target`: bilinear for bands, nearest neighbour for the mask.
pub fn resize_bilinear(p: &PatchRecord, target: usize) -> Result<PatchRecord> {
    if target == 0 {
        return Err(Error::InvalidArgument(
            "resize target must be positive".into(),
        ));
    }
    let (h, w) = (p.height(), p.width());
    if h == target && w == target {
        return Ok(p.clone());
    }
    let (sy, sx) = (h as f64 / target as f64, w as f64 / target as f64);
    let mut data = Vec::with_capacity(p.band_count() * target * target);
    for band in 0..p.band_count() {
        let plane = p.plane(band);
        for i in 0..target {
            let y = bilinear_source(i, sy, h);
            let (y0, fy) = (y.floor() as usize, y - y.floor());
            let y1 = (y0 + 1).min(h - 1);
            for j in 0..target {
                let x = bilinear_source(j, sx, w);
                let (x0, fx) = (x.floor() as usize, x - x.floor());
                let x1 = (x0 + 1).min(w - 1);
                let at = |r: usize, c: usize| plane[r * w + c] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                data.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    let nearest =
        |i: usize, scale: f64, extent: usize| (((i as f64 + 0.5) * scale) as usize).min(extent - 1);
    let mut mask = Vec::with_capacity(target * target);
    for i in 0..target {
        let r = nearest(i, sy, h);
        for j in 0..target {
            mask.push(p.mask.data()[r * w + nearest(j, sx, w)]);
        }
    }
    Ok(PatchRecord {
        id: p.id.clone(),
        bands: Tensor::new([p.band_count(), target, target], data)?,
        mask: Tensor::new([target, target], mask)?,
    })
}

/// Ordered train/validation/test lists.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

pub const MANIFEST_FILES: [&str; 3] = ["train.txt", "val.txt", "test.txt"];

impl DatasetManifest {
    /// Write `train.txt`, `val.txt` and `test.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, list) in MANIFEST_FILES
            .iter()
            .zip([&self.train, &self.val, &self.test])
        {
            let path = dir.join(name);
            let mut text = list.join("\n");
            if !list.is_empty() {
                text.push('\n');
            }
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Seeded shuffle, then 40% train, 10% validation, remainder test
/// (floor rounding on the first two cuts).
pub fn split_dataset(ids: &[String], seed: u64) -> Result<DatasetManifest> {
    let n = ids.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 patches to split, got {n}"
        )));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut SplitMix64::seed_from_u64(seed));
    let n_train = n * 4 / 10;
    let n_val = n / 10;
    let test = shuffled.split_off(n_train + n_val);
    let val = shuffled.split_off(n_train);
    Ok(DatasetManifest {
        train: shuffled,
        val,
        test,
    })
}

/// Read a manifest; relative entries resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let p = Path::new(l);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        })
        .collect())
}

/// Serialize to LS8P: little-endian header `"LS8P"`, `u16` version, `u16`
/// bands, `u32` height, `u32` width, `u8` dtype (0 = f32), `u8` reserved,
/// then band-major `f32` data and one `u8` (0/1) per mask pixel.
pub fn encode_patch(p: &PatchRecord) -> Vec<u8> {
    let (b, h, w) = (p.band_count(), p.height(), p.width());
    let mut out = Vec::with_capacity(LS8P_HEADER_LEN + 4 * b * h * w + h * w);
    out.extend_from_slice(LS8P_MAGIC);
    out.extend_from_slice(&LS8P_VERSION.to_le_bytes());
    out.extend_from_slice(&(b as u16).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.push(0);
    out.push(0);
    for v in p.bands.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend(p.mask.data().iter().map(|&m| m as u8));
    out
}

pub fn decode_patch(bytes: &[u8], id: impl Into<String>) -> Result<PatchRecord> {
    let id = id.into();
    let fail = |msg: String| Error::Format(format!("{id}: {msg}"));
    if bytes.len() < LS8P_HEADER_LEN {
        return Err(fail(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != LS8P_MAGIC {
        return Err(fail(format!("bad magic {:?}", &bytes[..4])));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at =
        |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let version = u16_at(4);
    if version != LS8P_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let (b, h, w) = (u16_at(6) as usize, u32_at(8) as usize, u32_at(12) as usize);
    if bytes[16] != 0 {
        return Err(fail(format!("unsupported dtype {}", bytes[16])));
    }
    if b == 0 || h == 0 || w == 0 {
        return Err(fail(format!("empty dimensions {b}x{h}x{w}")));
    }
    let n_values = b * h * w;
    let expected = LS8P_HEADER_LEN + 4 * n_values + h * w;
    if bytes.len() != expected {
        return Err(fail(format!(
            "header declares {b}x{h}x{w} ({expected} bytes) but file has {}",
            bytes.len()
        )));
    }
    let body = &bytes[LS8P_HEADER_LEN..];
    let data: Vec<f32> = body[..4 * n_values]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mask_bytes = &body[4 * n_values..];
    if let Some(pos) = mask_bytes.iter().position(|&m| m > 1) {
        return Err(fail(format!(
            "mask byte {} at pixel {pos} is not 0/1",
            mask_bytes[pos]
        )));
    }
    let mask = mask_bytes.iter().map(|&m| m as f32).collect();
    PatchRecord::new(
        id,
        Tensor::new([b, h, w], data)?,
        Tensor::new([h, w], mask)?,
    )
}

pub fn save_patch(p: &PatchRecord, path: &Path) -> Result<()> {
    fs::write(path, encode_patch(p)).map_err(|e| Error::io(path, e))
}

/// Load an LS8P file; the record id is the file stem.
pub fn load_patch(path: &Path) -> Result<PatchRecord> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_patch(&bytes, id)
}

/// Network-ready patch: `input [3, S, S]` in `[-1, 1]`, `mask [1, S, S]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub input: Tensor<f32>,
    pub mask: Tensor<f32>,
}

/// Channel selection (raw 10-band patches only), optional resize, then scaling.
pub fn prepare(record: &PatchRecord, resize_to: Option<usize>) -> Result<Sample> {
    let selected = match record.band_count() {
        RAW_BANDS => select_channels(record)?,
        3 => record.clone(),
        b => {
            return Err(Error::InvalidArgument(format!(
                "patch {} has {b} bands; expected 3 or {RAW_BANDS}",
                record.id
            )))
        }
    };
    let sized = match resize_to {
        Some(s) => resize_bilinear(&selected, s)?,
        None => selected,
    };
    let normalized = normalize_patch(&sized);
    let (h, w) = (normalized.height(), normalized.width());
    Ok(Sample {
        id: normalized.id,
        input: normalized.bands,
        mask: normalized.mask.reshape([1, h, w])?,
    })
}

/// Parameters of the synthetic fire-patch generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub size: usize,
    pub blob_count: RangeInclusive<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            blob_count: 0..=4,
        }
    }
}

/// Background lattice cells per side.
const NOISE_CELLS: usize = 4;
const BACKGROUND_MAX: f64 = 0.4;
/// Per-channel (R, G, B) gain of a fire blob.
const FIRE_SIGNATURE: [f64; 3] = [1.0, 0.6, 0.1];
/// Blob R-channel contribution above which a pixel is labelled fire.
pub const FIRE_LEVEL: f64 = 0.25;
const AMPLITUDE: (f64, f64) = (0.8, 1.6);
const SIGMA_FRACTION: (f64, f64) = (0.05, 0.12);
const MIN_SIGMA: f64 = 1.5;

struct Blob {
    cy: f64,
    cx: f64,
    cos: f64,
    sin: f64,
    inv_sy2: f64,
    inv_sx2: f64,
    amplitude: f64,
}

impl Blob {
    fn at(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = self.cos * dx + self.sin * dy;
        let v = -self.sin * dx + self.cos * dy;
        self.amplitude * (-0.5 * (u * u * self.inv_sx2 + v * v * self.inv_sy2)).exp()
    }
}

fn value_noise(rng: &mut SplitMix64, size: usize) -> Vec<f64> {
    let lattice: Vec<f64> = (0..(NOISE_CELLS + 1) * (NOISE_CELLS + 1))
        .map(|_| BACKGROUND_MAX * rng.random::<f64>())
        .collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let cell = size as f64 / NOISE_CELLS as f64;
    let mut out = Vec::with_capacity(size * size);
    for i in 0..size {
        let fy = (i as f64 + 0.5) / cell;
        let y0 = (fy.floor() as usize).min(NOISE_CELLS - 1);
        let ty = smooth((fy - y0 as f64).clamp(0.0, 1.0));
        for j in 0..size {
            let fx = (j as f64 + 0.5) / cell;
            let x0 = (fx.floor() as usize).min(NOISE_CELLS - 1);
            let tx = smooth((fx - x0 as f64).clamp(0.0, 1.0));
            let l = |r: usize, c: usize| lattice[r * (NOISE_CELLS + 1) + c];
            let top = l(y0, x0) * (1.0 - tx) + l(y0, x0 + 1) * tx;
            let bottom = l(y0 + 1, x0) * (1.0 - tx) + l(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Deterministic synthetic 3-band fire patches.
///
/// Background: smooth value noise in `[0, 0.4]`, independent per channel.
/// Each blob is an anisotropic Gaussian adding `(1.0, 0.6, 0.1)·a` to
/// (R, G, B); the mask marks pixels whose summed blob R contribution exceeds
/// [`FIRE_LEVEL`]. Patches without blobs have empty masks.
pub fn synth_generate(seed: u64, count: usize, config: &SynthConfig) -> Result<Vec<PatchRecord>> {
    let size = config.size;
    if size < 16 {
        return Err(Error::InvalidArgument(format!(
            "synthetic patch size must be at least 16, got {size}"
        )));
    }
    if config.blob_count.is_empty() {
        return Err(Error::InvalidArgument("empty blob count range".into()));
    }
    let mut rng = SplitMix64::seed_from_u64(seed);
    let n = size * size;
    let mut patches = Vec::with_capacity(count);
    for idx in 0..count {
        let mut bands: Vec<f64> = (0..3).flat_map(|_| value_noise(&mut rng, size)).collect();
        let blobs: Vec<Blob> = (0..rng.random_range(config.blob_count.clone()))
            .map(|_| {
                let s = size as f64;
                let sigma = |rng: &mut SplitMix64| {
                    (s * rng.random_range(SIGMA_FRACTION.0..SIGMA_FRACTION.1)).max(MIN_SIGMA)
                };
                let (sy, sx) = (sigma(&mut rng), sigma(&mut rng));
                let angle = rng.random_range(0.0..std::f64::consts::PI);
                Blob {
                    cy: s * rng.random_range(0.15..0.85),
                    cx: s * rng.random_range(0.15..0.85),
                    cos: angle.cos(),
                    sin: angle.sin(),
                    inv_sy2: 1.0 / (sy * sy),
                    inv_sx2: 1.0 / (sx * sx),
                    amplitude: rng.random_range(AMPLITUDE.0..AMPLITUDE.1),
                }
            })
            .collect();
        let mut mask = vec![0.0f32; n];
        if !blobs.is_empty() {
            for i in 0..size {
                for j in 0..size {
                    let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
                    let fire: f64 = blobs.iter().map(|b| b.at(y, x)).sum();
                    for (c, gain) in FIRE_SIGNATURE.iter().enumerate() {
                        bands[c * n + i * size + j] += gain * fire;
                    }
                    if fire > FIRE_LEVEL {
                        mask[i * size + j] = 1.0;
                    }
                }
            }
        }
        let bands = Tensor::new(
            [3, size, size],
            bands.into_iter().map(|v| v as f32).collect(),
        )?;
        patches.push(PatchRecord::new(
            format!("synth_{idx:05}"),
            bands,
            Tensor::new([size, size], mask)?,
        )?);
    }
    Ok(patches)
}
