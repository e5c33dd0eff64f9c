//! Miniature 3D U-Net with five side paths and a threshold-map head.
//!
//! Stage `l` of the encoder runs at `crop / 2^l` with `base * 2^l`
//! channels (two 3x3x3 conv + relu, max-pool between stages). Each decoder
//! stage reduces channels with a 3x3x3 conv + relu at the coarse
//! resolution, upsamples 2x, adds the encoder skip and applies one more
//! 3x3x3 conv + relu. Two 1x1x1 heads read the last decoder stage: the
//! main logit and the sigmoid threshold map. Side paths are 1x1x1 conv,
//! nearest upsampling to crop resolution, sigmoid.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::volcore::{decode_f32_le, encode_f32_le, write_atomic, Volume};

/// Number of auxiliary side paths; with the main output that makes six
/// supervised outputs.
pub const SIDE_PATHS: usize = 5;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Threshold-map outputs live in `[TM_MARGIN, 1 - TM_MARGIN]`.
pub const TM_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    /// Training crop and sliding-window size, `[nx, ny, nz]`.
    pub crop: [usize; 3],
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            base_channels: 8,
            in_channels: 1,
            crop: [32, 32, 32],
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::config("unet.levels", "must be at least 2"));
        }
        if self.base_channels == 0 {
            return Err(Error::config("unet.base_channels", "must be positive"));
        }
        if self.in_channels != 1 {
            return Err(Error::config(
                "unet.in_channels",
                "only single-channel input is supported",
            ));
        }
        let div = 1usize << (self.levels - 1);
        if self.crop.iter().any(|&c| c == 0 || c % div != 0) {
            return Err(Error::config(
                "unet.crop",
                format!("{:?} not divisible by 2^(levels-1) = {div}", self.crop),
            ));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Encoder stage tapped by side path `i` (0..3).
    fn encoder_tap(&self, i: usize) -> usize {
        i.min(self.levels - 1)
    }

    /// Decoder stage tapped by side path `3 + i` (0..2).
    fn decoder_tap(&self, i: usize) -> usize {
        let stages = self.levels - 1;
        // the last two decoder stages, or the only one twice
        (stages + i).saturating_sub(2).min(stages - 1)
    }

    /// (stage kind, stage index, channels, upsample count) per side path.
    fn side_taps(&self) -> Vec<(bool, usize, usize, usize)> {
        let mut taps = Vec::with_capacity(SIDE_PATHS);
        for i in 0..3 {
            let l = self.encoder_tap(i);
            taps.push((true, l, self.channels(l), l));
        }
        for i in 0..2 {
            let j = self.decoder_tap(i);
            let level = self.levels - 2 - j;
            taps.push((false, j, self.channels(level), level));
        }
        taps
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvSlot {
    weight: usize,
    bias: usize,
}

/// Parameter indices of every layer in declaration order.
#[derive(Debug, Clone)]
struct Layout {
    encoder: Vec<[ConvSlot; 2]>,
    decoder: Vec<[ConvSlot; 2]>,
    logit: ConvSlot,
    tm: ConvSlot,
    sides: Vec<ConvSlot>,
    specs: Vec<ParamSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Fan-in used for initialization; 0 marks a bias.
    pub fan_in: usize,
}

impl Layout {
    fn new(cfg: &UNetConfig) -> Self {
        let mut specs = Vec::new();
        let mut conv = |name: String, c_in: usize, c_out: usize, k: usize| {
            let weight = specs.len();
            specs.push(ParamSpec {
                name: format!("{name}.weight"),
                shape: vec![c_out, c_in, k, k, k],
                fan_in: c_in * k * k * k,
            });
            specs.push(ParamSpec {
                name: format!("{name}.bias"),
                shape: vec![c_out],
                fan_in: 0,
            });
            ConvSlot {
                weight,
                bias: weight + 1,
            }
        };
        let mut encoder = Vec::new();
        for l in 0..cfg.levels {
            let c_in = if l == 0 { cfg.in_channels } else { cfg.channels(l - 1) };
            let c = cfg.channels(l);
            encoder.push([
                conv(format!("enc{l}.conv1"), c_in, c, 3),
                conv(format!("enc{l}.conv2"), c, c, 3),
            ]);
        }
        let mut decoder = Vec::new();
        for j in 0..cfg.levels - 1 {
            let t = cfg.levels - 2 - j;
            decoder.push([
                conv(format!("dec{j}.reduce"), cfg.channels(t + 1), cfg.channels(t), 3),
                conv(format!("dec{j}.conv"), cfg.channels(t), cfg.channels(t), 3),
            ]);
        }
        let c0 = cfg.channels(0);
        let logit = conv("head.logit".into(), c0, 1, 1);
        let tm = conv("head.tm".into(), c0, 1, 1);
        let sides = cfg
            .side_taps()
            .iter()
            .enumerate()
            .map(|(s, &(_, _, c, _))| conv(format!("side{s}"), c, 1, 1))
            .collect();
        Self {
            encoder,
            decoder,
            logit,
            tm,
            sides,
            specs,
        }
    }
}

/// Named parameter tensors of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: UNetConfig,
    params: Vec<NamedTensor>,
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone)]
pub struct OutputVars {
    pub logit: Var,
    pub prob: Var,
    pub tm: Var,
    pub sides: Vec<Var>,
}

/// Evaluated network outputs on a crop.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkOutputs {
    pub main_logit: Volume,
    pub main_prob: Volume,
    pub tm: Volume,
    pub side_probs: Vec<Volume>,
}

pub fn param_specs(cfg: &UNetConfig) -> Vec<ParamSpec> {
    Layout::new(cfg).specs
}

/// Seeded fan-in scaled uniform initialization (`U(-sqrt(6/fan_in), ..)`),
/// zero biases except the logit head, which starts at -1.
pub fn build_unet(cfg: &UNetConfig, seed: u64) -> Result<Network> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(layout.specs.len());
    for (i, spec) in layout.specs.iter().enumerate() {
        let n: usize = spec.shape.iter().product();
        let data: Vec<f32> = if spec.fan_in == 0 {
            let v = if i == layout.logit.bias { -1.0 } else { 0.0 };
            vec![v; n]
        } else {
            let bound = (6.0 / spec.fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect()
        };
        params.push(NamedTensor {
            name: spec.name.clone(),
            tensor: Tensor::new(spec.shape.clone(), data)?,
        });
    }
    Ok(Network {
        config: cfg.clone(),
        params,
    })
}

impl Network {
    pub fn from_params(config: UNetConfig, params: Vec<NamedTensor>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameters, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (s, p) in specs.iter().zip(&params) {
            if s.name != p.name || s.shape != p.tensor.shape() {
                return Err(Error::Contract(format!(
                    "parameter `{}` {:?} does not match expected `{}` {:?}",
                    p.name,
                    p.tensor.shape(),
                    s.name,
                    s.shape
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Adds every parameter to `g`, either as trainable leaves or constants.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                let t = p.tensor.cast::<T>();
                if trainable {
                    g.param(t)
                } else {
                    g.constant(t)
                }
            })
            .collect()
    }

    /// Builds the forward pass. `input` is `[1, 1, D, H, W]` with spatial
    /// extents divisible by `2^(levels-1)`.
    pub fn forward_graph<T: Scalar>(&self, g: &mut Graph<T>, params: &[Var], input: Var) -> Result<OutputVars> {
        forward_graph(&self.config, g, params, input)
    }

    /// Deterministic evaluation on a crop of exactly the configured size.
    pub fn forward(&self, crop: &Volume) -> Result<NetworkOutputs> {
        if crop.dims() != self.config.crop {
            return Err(Error::Shape {
                op: "network forward",
                lhs: crop.dims().to_vec(),
                rhs: self.config.crop.to_vec(),
            });
        }
        self.forward_any(crop)
    }

    /// Like [`Network::forward`] but accepts any divisible spatial size.
    pub fn forward_any(&self, crop: &Volume) -> Result<NetworkOutputs> {
        let mut g = Graph::<f32>::new();
        let params = self.bind(&mut g, false);
        let input = g.constant(volume_to_tensor(crop));
        let out = self.forward_graph(&mut g, &params, input)?;
        let to_vol = |v: Var| tensor_to_volume(g.value(v), crop.spacing());
        Ok(NetworkOutputs {
            main_logit: to_vol(out.logit)?,
            main_prob: to_vol(out.prob)?,
            tm: to_vol(out.tm)?,
            side_probs: out.sides.iter().map(|&s| to_vol(s)).collect::<Result<_>>()?,
        })
    }
}

fn forward_graph<T: Scalar>(cfg: &UNetConfig, g: &mut Graph<T>, params: &[Var], input: Var) -> Result<OutputVars> {
    let layout = Layout::new(cfg);
    if params.len() != layout.specs.len() {
        return Err(Error::Contract(format!(
            "expected {} parameter handles, got {}",
            layout.specs.len(),
            params.len()
        )));
    }
    let shape = g.shape(input).to_vec();
    let div = 1usize << (cfg.levels - 1);
    if shape.len() != 5 || shape[0] != 1 || shape[1] != cfg.in_channels || shape[2..].iter().any(|&d| d % div != 0) {
        return Err(Error::Shape {
            op: "unet input",
            lhs: shape,
            rhs: vec![1, cfg.in_channels, div, div, div],
        });
    }
    let conv = |g: &mut Graph<T>, x: Var, s: ConvSlot| -> Result<Var> {
        g.conv3d(x, params[s.weight], Some(params[s.bias]), 1)
    };
    let conv_relu = |g: &mut Graph<T>, x: Var, s: ConvSlot| -> Result<Var> {
        let y = conv(g, x, s)?;
        Ok(g.relu(y))
    };

    let mut enc = Vec::with_capacity(cfg.levels);
    let mut x = input;
    for (l, slots) in layout.encoder.iter().enumerate() {
        if l > 0 {
            x = g.max_pool2(x)?;
        }
        let h = conv_relu(g, x, slots[0])?;
        x = conv_relu(g, h, slots[1])?;
        enc.push(x);
    }

    let mut dec = Vec::with_capacity(cfg.levels - 1);
    for (j, slots) in layout.decoder.iter().enumerate() {
        let t = cfg.levels - 2 - j;
        let r = conv_relu(g, x, slots[0])?;
        let u = g.upsample2x(r)?;
        if g.shape(u) != g.shape(enc[t]) {
            return Err(Error::Shape {
                op: "skip addition",
                lhs: g.shape(u).to_vec(),
                rhs: g.shape(enc[t]).to_vec(),
            });
        }
        let merged = g.add(u, enc[t])?;
        x = conv_relu(g, merged, slots[1])?;
        dec.push(x);
    }

    let logit = conv(g, x, layout.logit)?;
    let prob = g.sigmoid(logit);
    let tm_logit = conv(g, x, layout.tm)?;
    let tm_raw = g.sigmoid(tm_logit);
    // keep thresholds strictly inside (0, 1) even when f32 sigmoid saturates
    let tm_scaled = g.scale(tm_raw, 1.0 - 2.0 * TM_MARGIN);
    let tm = g.add_scalar(tm_scaled, TM_MARGIN);

    let mut sides = Vec::with_capacity(SIDE_PATHS);
    for (&(is_enc, stage, _, ups), &slot) in cfg.side_taps().iter().zip(&layout.sides) {
        let feat = if is_enc { enc[stage] } else { dec[stage] };
        let mut s = conv(g, feat, slot)?;
        for _ in 0..ups {
            s = g.upsample2x(s)?;
        }
        sides.push(g.sigmoid(s));
    }
    Ok(OutputVars { logit, prob, tm, sides })
}

/// `[1, 1, nz, ny, nx]` view of a volume.
pub fn volume_to_tensor<T: Scalar>(v: &Volume) -> Tensor<T> {
    let [nx, ny, nz] = v.dims();
    Tensor::new(
        vec![1, 1, nz, ny, nx],
        v.data().iter().map(|&x| T::from_f64(x as f64)).collect(),
    )
    .expect("volume dims are positive")
}

pub fn tensor_to_volume<T: Scalar>(t: &Tensor<T>, spacing: [f64; 3]) -> Result<Volume> {
    let s = t.shape();
    if s.len() != 5 || s[0] != 1 || s[1] != 1 {
        return Err(Error::Shape {
            op: "tensor to volume",
            lhs: s.to_vec(),
            rhs: vec![1, 1],
        });
    }
    Volume::new(
        [s[4], s[3], s[2]],
        spacing,
        t.data().iter().map(|v| v.to_f64() as f32).collect(),
    )
}

// ---------------------------------------------------------------------------
// Checkpoints

/// Adam moments, one buffer per parameter in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn zeros(net: &Network) -> Self {
        let bufs: Vec<Vec<f32>> = net.params().iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        Self {
            m: bufs.clone(),
            v: bufs,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub optimizer: OptimizerState,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Refinement level this network serves (0 = plain network).
    pub level: usize,
    /// Free-form snapshot of the training configuration.
    pub train_config: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    role: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format: String,
    version: u32,
    step: u64,
    level: usize,
    unet: UNetConfig,
    train_config: serde_json::Value,
    payload: String,
    tensors: Vec<TensorEntry>,
}

const ROLES: [&str; 3] = ["param", "adam_m", "adam_v"];

impl Checkpoint {
    pub fn fresh(network: Network) -> Self {
        let optimizer = OptimizerState::zeros(&network);
        Self {
            network,
            optimizer,
            step: 0,
            level: 0,
            train_config: serde_json::Value::Null,
        }
    }

    fn buffers(&self) -> impl Iterator<Item = (&'static str, &NamedTensor, &[f32])> {
        let p = &self.network.params;
        p.iter()
            .map(|t| (ROLES[0], t, t.tensor.data()))
            .chain(
                p.iter()
                    .zip(&self.optimizer.m)
                    .map(|(t, m)| (ROLES[1], t, m.as_slice())),
            )
            .chain(
                p.iter()
                    .zip(&self.optimizer.v)
                    .map(|(t, v)| (ROLES[2], t, v.as_slice())),
            )
    }

    /// Writes `<path>` (JSON manifest) and `<path>.bin` (little-endian f32).
    pub fn save(&self, path: &Path) -> Result<()> {
        let payload_path = bin_path(path);
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        for (role, t, data) in self.buffers() {
            tensors.push(TensorEntry {
                name: t.name.clone(),
                role: role.to_string(),
                shape: t.tensor.shape().to_vec(),
                offset: payload.len(),
                len: data.len() * 4,
            });
            payload.extend_from_slice(&encode_f32_le(data));
        }
        let manifest = CheckpointManifest {
            format: "atrium-checkpoint".into(),
            version: CHECKPOINT_VERSION,
            step: self.step,
            level: self.level,
            unet: self.network.config.clone(),
            train_config: self.train_config.clone(),
            payload: payload_path
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            tensors,
        };
        write_atomic(&payload_path, &payload)?;
        write_atomic(path, serde_json::to_string_pretty(&manifest)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                field: "version".into(),
                reason: format!("unsupported checkpoint version {}", manifest.version),
            });
        }
        let payload_path = path.with_file_name(&manifest.payload);
        let payload = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
        let specs = param_specs(&manifest.unet);
        let n = specs.len();
        if manifest.tensors.len() != 3 * n {
            return Err(Error::Format {
                field: "tensors".into(),
                reason: format!("expected {} entries, found {}", 3 * n, manifest.tensors.len()),
            });
        }
        let mut bufs: Vec<Vec<f32>> = Vec::with_capacity(3 * n);
        for (k, e) in manifest.tensors.iter().enumerate() {
            let spec = &specs[k % n];
            if e.name != spec.name || e.shape != spec.shape || e.role != ROLES[k / n] {
                return Err(Error::Format {
                    field: format!("tensors[{k}]"),
                    reason: format!(
                        "found {} `{}` {:?}, expected {} `{}` {:?}",
                        e.role,
                        e.name,
                        e.shape,
                        ROLES[k / n],
                        spec.name,
                        spec.shape
                    ),
                });
            }
            let numel: usize = e.shape.iter().product();
            if e.len != numel * 4 {
                return Err(Error::Format {
                    field: format!("tensors[{k}].len"),
                    reason: format!("{} bytes for {} elements", e.len, numel),
                });
            }
            let end = e.offset + e.len;
            if end > payload.len() {
                return Err(Error::Truncated {
                    expected: end,
                    found: payload.len(),
                });
            }
            bufs.push(decode_f32_le(&payload[e.offset..end]));
        }
        let v = bufs.split_off(2 * n);
        let m = bufs.split_off(n);
        let params = bufs
            .into_iter()
            .zip(&specs)
            .map(|(data, s)| {
                Ok(NamedTensor {
                    name: s.name.clone(),
                    tensor: Tensor::new(s.shape.clone(), data)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            network: Network::from_params(manifest.unet, params)?,
            optimizer: OptimizerState { m, v },
            step: manifest.step,
            level: manifest.level,
            train_config: manifest.train_config,
        })
    }
}

fn bin_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".bin");
    s.into()
}
