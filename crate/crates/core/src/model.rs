//! The Operational U-Net: five strided operational encoder stages, five
//! transposed operational decoder stages, and channel-concatenation skips.
//!
//! ```text
//! x ─enc1─tanh─ e1 ─enc2─tanh─ e2 ─enc3─tanh─ e3 ─enc4─tanh─ e4 ─enc5─tanh─ e5
//!                                                                            │
//! out ←sigmoid─dec5←[d4|e1]  d4←tanh─dec4←[d3|e2]  …  d2←tanh─dec2←[d1|e4]  d1←tanh─dec1
//! ```

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{LayerVars, OperationalConv2D, TransposedOperationalConv2D};
use crate::tensor::{Element, Tensor};

pub const STAGES: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpUNetConfig {
    pub in_channels: usize,
    /// Output channels of encoder stages 1..=5.
    pub encoder_widths: Vec<usize>,
    pub q: usize,
    pub encoder_kernel: usize,
    pub decoder_kernel: usize,
    pub last_decoder_kernel: usize,
    pub stride: usize,
    pub input_size: usize,
}

impl Default for OpUNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            encoder_widths: vec![12, 24, 48, 96, 192],
            q: 3,
            encoder_kernel: 5,
            decoder_kernel: 5,
            last_decoder_kernel: 6,
            stride: 2,
            input_size: 256,
        }
    }
}

/// Padding giving exact `1/stride` down-sampling (and, transposed, exact up-sampling).
pub fn stage_padding(kernel: usize) -> usize {
    (kernel - 1) / 2
}

/// Output padding that makes a transposed stage multiply the size by exactly `stride`.
pub fn stage_output_padding(kernel: usize, stride: usize) -> Result<usize> {
    let op = (stride + 2 * stage_padding(kernel)) as isize - kernel as isize;
    if op < 0 || op as usize >= stride {
        return Err(Error::Config(format!(
            "kernel {kernel} cannot upsample exactly by stride {stride}"
        )));
    }
    Ok(op as usize)
}

impl OpUNetConfig {
    /// A narrow configuration for tests and desk-scale experiments.
    pub fn reduced(widths: [usize; STAGES], input_size: usize) -> Self {
        Self {
            encoder_widths: widths.to_vec(),
            input_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.encoder_widths.len() != STAGES {
            return fail(format!(
                "encoder_widths needs exactly {STAGES} entries, got {}",
                self.encoder_widths.len()
            ));
        }
        if self.in_channels == 0 || self.encoder_widths.contains(&0) {
            return fail("channel counts must be positive".into());
        }
        if self.q == 0 {
            return fail("q must be at least 1".into());
        }
        if self.stride < 2 {
            return fail(format!("stride must be at least 2, got {}", self.stride));
        }
        for (name, k) in [
            ("encoder_kernel", self.encoder_kernel),
            ("decoder_kernel", self.decoder_kernel),
            ("last_decoder_kernel", self.last_decoder_kernel),
        ] {
            if k == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        let factor = self.stride.pow(STAGES as u32);
        if self.input_size == 0 || !self.input_size.is_multiple_of(factor) {
            return fail(format!(
                "input_size {} must be a positive multiple of stride^5 = {factor}",
                self.input_size
            ));
        }
        stage_output_padding(self.decoder_kernel, self.stride)?;
        stage_output_padding(self.last_decoder_kernel, self.stride)?;
        // Encoder stages must halve exactly.
        let mut size = self.input_size;
        for _ in 0..STAGES {
            let p = stage_padding(self.encoder_kernel);
            if self.encoder_kernel > size + 2 * p
                || (size + 2 * p - self.encoder_kernel) / self.stride + 1 != size / self.stride
            {
                return fail(format!(
                    "encoder_kernel {} does not downsample {size} exactly",
                    self.encoder_kernel
                ));
            }
            size /= self.stride;
        }
        Ok(())
    }

    /// Spatial resolution after each encoder stage.
    pub fn encoder_resolutions(&self) -> Vec<usize> {
        (1..=STAGES as u32)
            .map(|i| self.input_size / self.stride.pow(i))
            .collect()
    }
}

/// One row of the architecture summary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSummary {
    pub name: String,
    pub transposed: bool,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub in_resolution: usize,
    pub out_resolution: usize,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpUNet<T: Element = f32> {
    config: OpUNetConfig,
    encoder: Vec<OperationalConv2D<T>>,
    decoder: Vec<TransposedOperationalConv2D<T>>,
}

/// Tape handles for every layer of a bound model.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub encoder: Vec<LayerVars>,
    pub decoder: Vec<LayerVars>,
}

impl ModelVars {
    /// Weight/bias vars in [`OpUNet::param_names`] order.
    pub fn flat(&self) -> Vec<Var> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(|l| [l.weights, l.bias])
            .collect()
    }
}

impl<T: Element> OpUNet<T> {
    /// Wire the architecture with zeroed parameters.
    pub fn skeleton(config: &OpUNetConfig) -> Result<Self> {
        config.validate()?;
        let (q, s) = (config.q, config.stride);
        let w = &config.encoder_widths;
        let mut encoder = Vec::with_capacity(STAGES);
        let mut cin = config.in_channels;
        for &cout in w {
            let k = config.encoder_kernel;
            encoder.push(OperationalConv2D::new(
                cin,
                cout,
                k,
                q,
                s,
                stage_padding(k),
            )?);
            cin = cout;
        }
        // dec1: w5→w4; dec i (2..=4): 2·w(6−i) → w(5−i); dec5: 2·w1 → 1.
        let mut decoder = Vec::with_capacity(STAGES);
        for i in 1..=STAGES {
            let cin = if i == 1 { w[4] } else { 2 * w[STAGES - i] };
            let cout = if i == STAGES { 1 } else { w[STAGES - 1 - i] };
            let k = if i == STAGES {
                config.last_decoder_kernel
            } else {
                config.decoder_kernel
            };
            decoder.push(TransposedOperationalConv2D::new(
                cin,
                cout,
                k,
                q,
                s,
                stage_padding(k),
                stage_output_padding(k, s)?,
            )?);
        }
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
        })
    }

    /// Build and initialize deterministically from `seed`.
    pub fn build(config: &OpUNetConfig, seed: u64) -> Result<Self> {
        let mut model = Self::skeleton(config)?;
        let mut seeds = SplitMix64::seed_from_u64(seed);
        for layer in &mut model.encoder {
            layer.init_params(seeds.next_u64());
        }
        for layer in &mut model.decoder {
            layer.init_params(seeds.next_u64());
        }
        Ok(model)
    }

    pub fn config(&self) -> &OpUNetConfig {
        &self.config
    }

    pub fn encoder(&self) -> &[OperationalConv2D<T>] {
        &self.encoder
    }

    pub fn decoder(&self) -> &[TransposedOperationalConv2D<T>] {
        &self.decoder
    }

    pub fn count_params(&self) -> usize {
        self.encoder.iter().map(|l| l.param_count()).sum::<usize>()
            + self.decoder.iter().map(|l| l.param_count()).sum::<usize>()
    }

    /// `enc1.w, enc1.b, …, enc5.b, dec1.w, …, dec5.b`.
    pub fn param_names(&self) -> Vec<String> {
        let names = |prefix: &str| {
            (1..=STAGES)
                .flat_map(move |i| [format!("{prefix}{i}.w"), format!("{prefix}{i}.b")])
                .collect::<Vec<_>>()
        };
        let mut all = names("enc");
        all.extend(names("dec"));
        all
    }

    /// Parameter tensors in [`Self::param_names`] order.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let enc = self.encoder.iter().flat_map(|l| [&l.weights, &l.bias]);
        let dec = self.decoder.iter().flat_map(|l| [&l.weights, &l.bias]);
        enc.chain(dec).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let enc = self
            .encoder
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.bias]);
        let dec = self
            .decoder
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.bias]);
        enc.chain(dec).collect()
    }

    pub fn summary(&self) -> Vec<LayerSummary> {
        let mut rows = Vec::with_capacity(2 * STAGES);
        let mut res = self.config.input_size;
        for (i, l) in self.encoder.iter().enumerate() {
            let out = l.output_size(res).unwrap_or(0);
            rows.push(LayerSummary {
                name: format!("enc{}", i + 1),
                transposed: false,
                in_channels: l.in_channels(),
                out_channels: l.out_channels(),
                kernel: l.kernel(),
                in_resolution: res,
                out_resolution: out,
                params: l.param_count(),
            });
            res = out;
        }
        for (i, l) in self.decoder.iter().enumerate() {
            let out = l.output_size(res).unwrap_or(0);
            rows.push(LayerSummary {
                name: format!("dec{}", i + 1),
                transposed: true,
                in_channels: l.in_channels(),
                out_channels: l.out_channels(),
                kernel: l.kernel(),
                in_resolution: res,
                out_resolution: out,
                params: l.param_count(),
            });
            res = out;
        }
        rows
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> ModelVars {
        ModelVars {
            encoder: self
                .encoder
                .iter()
                .map(|l| l.bind(tape, trainable))
                .collect(),
            decoder: self
                .decoder
                .iter()
                .map(|l| l.bind(tape, trainable))
                .collect(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.config.input_size;
        if c != self.config.in_channels || h != s || w != s {
            return Err(Error::shape(
                "forward",
                format!(
                    "model expects [N, {}, {s}, {s}], got {:?}",
                    self.config.in_channels,
                    x.shape()
                ),
            ));
        }
        Ok(())
    }

    /// Record the forward pass of `x: [N, C, S, S]`; returns the `[N, 1, S, S]` probability map.
    pub fn forward_on(&self, tape: &mut Tape<T>, vars: &ModelVars, x: Var) -> Result<Var> {
        self.check_input(tape.value(x))?;
        let mut skips = Vec::with_capacity(STAGES);
        let mut h = x;
        for (layer, v) in self.encoder.iter().zip(&vars.encoder) {
            let pre = layer.forward(tape, *v, h)?;
            h = tape.tanh(pre)?;
            skips.push(h);
        }
        skips.pop();
        for (i, (layer, v)) in self.decoder.iter().zip(&vars.decoder).enumerate() {
            if i > 0 {
                let skip = skips.pop().expect("one skip per inner decoder stage");
                h = tape.concat_channels(h, skip)?;
            }
            let pre = layer.forward(tape, *v, h)?;
            h = if i + 1 == STAGES {
                tape.sigmoid(pre)?
            } else {
                tape.tanh(pre)?
            };
        }
        Ok(h)
    }

    /// Inference forward pass.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(x.clone());
        let y = self.forward_on(&mut tape, &vars, x)?;
        Ok(tape.value(y).clone())
    }

    /// Binary mask `probability ≥ threshold`. Sigmoid outputs are taken to lie in
    /// the open interval (0, 1), so a threshold of exactly 1 selects nothing.
    pub fn predict_mask(&self, x: &Tensor<T>, threshold: f64) -> Result<Tensor<T>> {
        let probs = self.forward(x)?;
        threshold_mask(&probs, threshold)
    }

    pub fn cast<U: Element>(&self) -> OpUNet<U> {
        OpUNet {
            config: self.config.clone(),
            encoder: self
                .encoder
                .iter()
                .map(|l| OperationalConv2D {
                    weights: l.weights.cast(),
                    bias: l.bias.cast(),
                    stride: l.stride,
                    padding: l.padding,
                })
                .collect(),
            decoder: self
                .decoder
                .iter()
                .map(|l| TransposedOperationalConv2D {
                    weights: l.weights.cast(),
                    bias: l.bias.cast(),
                    stride: l.stride,
                    padding: l.padding,
                    output_padding: l.output_padding,
                })
                .collect(),
        }
    }
}

pub fn threshold_mask<T: Element>(probs: &Tensor<T>, threshold: f64) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!(
            "threshold {threshold} outside [0, 1]"
        )));
    }
    let t = T::from_f64_lossy(threshold);
    let never = threshold >= 1.0;
    Ok(probs.map(|p| {
        if !never && p >= t {
            T::one()
        } else {
            T::zero()
        }
    }))
}

/// Checkpoint tensors in file order.
pub type NamedTensors = Vec<(String, Tensor<f32>)>;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OPUN";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Serialize: `"OPUN"`, `u16` version, `u32` JSON length, JSON config, `u32`
/// tensor count, then per tensor `u16` name length, name, `u8` rank,
/// `u32` dims, raw little-endian `f32` data.
pub fn encode_checkpoint<T: Element>(model: &OpUNet<T>) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(model.config())?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let params = model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in model.param_names().iter().zip(params) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.cast::<f32>().data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::Format(format!("checkpoint truncated while reading {what}")))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parse a checkpoint into its embedded config and named tensors.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<(OpUNetConfig, NamedTensors)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let json_len = r.u32("config length")? as usize;
    let config: OpUNetConfig = serde_json::from_slice(r.take(json_len, "config")?)
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let name_len = r.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let raw = r.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| Error::Format("tensor too large".into()))?,
            &name,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((name, Tensor::new(dims, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok((config, tensors))
}

/// Assemble a model for `config` from named tensors, rejecting any mismatch.
pub fn model_from_tensors(config: &OpUNetConfig, tensors: NamedTensors) -> Result<OpUNet<f32>> {
    let mut model = OpUNet::<f32>::skeleton(config)?;
    let names = model.param_names();
    if tensors.len() != names.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, configuration needs {}",
            tensors.len(),
            names.len()
        )));
    }
    for ((expected, slot), (name, tensor)) in names.iter().zip(model.params_mut()).zip(tensors) {
        if &name != expected {
            return Err(Error::Format(format!(
                "expected tensor {expected}, found {name}"
            )));
        }
        if tensor.shape() != slot.shape() {
            return Err(Error::shape(
                "load_checkpoint",
                format!(
                    "tensor {name} has shape {:?}, configuration expects {:?}",
                    tensor.shape(),
                    slot.shape()
                ),
            ));
        }
        *slot = tensor;
    }
    Ok(model)
}

pub fn save_checkpoint<T: Element>(model: &OpUNet<T>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Load a checkpoint using its embedded configuration.
pub fn load_checkpoint(path: &Path) -> Result<OpUNet<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (config, tensors) = parse_checkpoint(&bytes)?;
    model_from_tensors(&config, tensors)
}

/// Load a checkpoint into an explicitly given configuration.
pub fn load_checkpoint_as(path: &Path, config: &OpUNetConfig) -> Result<OpUNet<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, tensors) = parse_checkpoint(&bytes)?;
    model_from_tensors(config, tensors)
}
