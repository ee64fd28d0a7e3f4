//! Hierarchical shifted-window transformer encoder with a convolutional
//! U-shaped decoder and a per-channel sigmoid head.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Real, Tensor, TensorError, Var};
use crate::volumeio::{ClassSet, LabelMap, Spacing};

mod checkpoint;
mod layers;
mod window;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, OptimizerSnapshot,
    CHECKPOINT_MAGIC,
};
pub use layers::{
    decoder_forward, encoder_forward, patch_embed, patch_merging, residual_block, swin_block, swin_stage,
};
pub use window::{
    build_shift_mask, window_attention, window_partition, window_reverse, WindowGeometry, MASK_NEG,
};

/// Epsilon of every layer and instance normalization in the network.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("parameter {name}: {detail}")]
    Param { name: String, detail: String },
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: String, detail: String },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

fn config_err(detail: impl Into<String>) -> ModelError {
    ModelError::Config(detail.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Foreground classes `J`; the head emits `J + 1` channels.
    pub num_classes: usize,
    pub embed_dim: usize,
    pub patch_size: usize,
    pub window: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub mlp_ratio: f64,
    pub use_rel_pos_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 4,
            embed_dim: 24,
            patch_size: 2,
            window: 4,
            depths: vec![2, 2, 2, 2],
            heads: vec![3, 6, 12, 24],
            mlp_ratio: 4.0,
            use_rel_pos_bias: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.embed_dim == 0 || self.patch_size == 0 {
            return Err(config_err("in_channels, embed_dim and patch_size must be positive"));
        }
        if self.num_classes == 0 || self.num_classes > crate::volumeio::MAX_CLASS as usize {
            return Err(config_err(format!(
                "num_classes must be in 1..={}, got {}",
                crate::volumeio::MAX_CLASS,
                self.num_classes
            )));
        }
        if self.window < 2 {
            return Err(config_err(format!("window must be >= 2, got {}", self.window)));
        }
        if self.depths.is_empty() || self.depths.len() != self.heads.len() {
            return Err(config_err(format!(
                "depths {:?} and heads {:?} must be non-empty and of equal length",
                self.depths, self.heads
            )));
        }
        if self.depths.contains(&0) {
            return Err(config_err("every stage needs at least one block"));
        }
        for (k, &h) in self.heads.iter().enumerate() {
            let c = self.stage_dim(k);
            if h == 0 || c % h != 0 {
                return Err(config_err(format!("stage {k}: width {c} is not divisible by {h} heads")));
            }
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) || self.mlp_hidden(self.embed_dim) == 0 {
            return Err(config_err(format!("mlp_ratio must be positive, got {}", self.mlp_ratio)));
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.depths.len()
    }

    /// Token width inside encoder stage `k`.
    pub fn stage_dim(&self, k: usize) -> usize {
        self.embed_dim << k
    }

    pub fn mlp_hidden(&self, c: usize) -> usize {
        (self.mlp_ratio * c as f64).round() as usize
    }

    /// Channel width of pyramid level `i` (0 = input resolution, last = bottleneck).
    pub fn level_width(&self, i: usize) -> usize {
        match i {
            0 => self.in_channels,
            _ => self.embed_dim << (i - 1),
        }
    }

    /// Width of decoder features at level `i`.
    pub fn decoder_width(&self, i: usize) -> usize {
        match i {
            0 => self.embed_dim,
            _ => self.embed_dim << (i - 1),
        }
    }

    /// Input extents must be multiples of this; the forward pass pads up to it.
    pub fn downsample_factor(&self) -> usize {
        self.patch_size << self.num_stages()
    }

    pub fn out_channels(&self) -> usize {
        self.num_classes + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    He { fan_in: usize },
    Normal { std: f64 },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(out: &mut Vec<ParamSpec>, name: String, shape: &[usize], init: Init) {
    out.push(ParamSpec {
        name,
        shape: shape.to_vec(),
        init,
    });
}

fn linear_specs(out: &mut Vec<ParamSpec>, prefix: &str, cin: usize, cout: usize, bias: bool) {
    spec(out, format!("{prefix}.w"), &[cin, cout], Init::He { fan_in: cin });
    if bias {
        spec(out, format!("{prefix}.b"), &[cout], Init::Zeros);
    }
}

fn norm_specs(out: &mut Vec<ParamSpec>, prefix: &str, c: usize) {
    spec(out, format!("{prefix}.g"), &[c], Init::Ones);
    spec(out, format!("{prefix}.b"), &[c], Init::Zeros);
}

fn conv_specs(out: &mut Vec<ParamSpec>, prefix: &str, cin: usize, cout: usize, k: usize) {
    spec(out, format!("{prefix}.w"), &[cout, cin, k, k, k], Init::He { fan_in: cin * k * k * k });
}

fn resblock_specs(out: &mut Vec<ParamSpec>, prefix: &str, cin: usize, cout: usize) {
    conv_specs(out, &format!("{prefix}.conv1"), cin, cout, 3);
    norm_specs(out, &format!("{prefix}.norm1"), cout);
    conv_specs(out, &format!("{prefix}.conv2"), cout, cout, 3);
    norm_specs(out, &format!("{prefix}.norm2"), cout);
    if cin != cout {
        conv_specs(out, &format!("{prefix}.proj"), cin, cout, 1);
    }
}

/// Every parameter of the architecture, in a fixed order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let (c, p) = (cfg.embed_dim, cfg.patch_size);
    spec(&mut out, "embed.w".into(), &[c, cfg.in_channels, p, p, p], Init::He {
        fan_in: cfg.in_channels * p * p * p,
    });
    spec(&mut out, "embed.b".into(), &[c], Init::Zeros);
    let table = (2 * cfg.window - 1).pow(3);
    for (k, (&depth, &heads)) in cfg.depths.iter().zip(&cfg.heads).enumerate() {
        let ck = cfg.stage_dim(k);
        for l in 0..depth {
            let b = format!("stage{k}.block{l}");
            norm_specs(&mut out, &format!("{b}.norm1"), ck);
            linear_specs(&mut out, &format!("{b}.attn.qkv"), ck, 3 * ck, true);
            if cfg.use_rel_pos_bias {
                spec(&mut out, format!("{b}.attn.rpb"), &[table, heads], Init::Normal { std: 0.02 });
            }
            linear_specs(&mut out, &format!("{b}.attn.proj"), ck, ck, true);
            norm_specs(&mut out, &format!("{b}.norm2"), ck);
            let hidden = cfg.mlp_hidden(ck);
            linear_specs(&mut out, &format!("{b}.mlp.fc1"), ck, hidden, true);
            linear_specs(&mut out, &format!("{b}.mlp.fc2"), hidden, ck, true);
        }
        norm_specs(&mut out, &format!("stage{k}.merge.norm"), 8 * ck);
        linear_specs(&mut out, &format!("stage{k}.merge.reduce"), 8 * ck, 2 * ck, false);
    }
    let n = cfg.num_stages();
    for i in 0..=n + 1 {
        resblock_specs(&mut out, &format!("enc{i}"), cfg.level_width(i), cfg.decoder_width(i));
    }
    for i in (0..=n).rev() {
        let (wi, below) = (cfg.decoder_width(i), cfg.decoder_width(i + 1));
        let k = 2;
        spec(&mut out, format!("dec{i}.up.w"), &[below, wi, k, k, k], Init::He {
            fan_in: below * k * k * k,
        });
        spec(&mut out, format!("dec{i}.up.b"), &[wi], Init::Zeros);
        resblock_specs(&mut out, &format!("dec{i}.block"), 2 * wi, wi);
    }
    let j1 = cfg.out_channels();
    spec(&mut out, "head.w".into(), &[j1, c, 1, 1, 1], Init::Zeros);
    spec(&mut out, "head.b".into(), &[j1], Init::Zeros);
    out
}

pub type ParamStore<T> = BTreeMap<String, Tensor<T>>;

/// Graph handles for a bound parameter set.
#[derive(Clone, Debug, Default)]
pub struct Params(BTreeMap<String, Var>);

impl FromIterator<(String, Var)> for Params {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Params(iter.into_iter().collect())
    }
}

impl Params {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.0.get(name).copied().ok_or_else(|| ModelError::Param {
            name: name.to_string(),
            detail: "not bound".into(),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.0.iter()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SwinUnetr<T: Real> {
    config: ModelConfig,
    params: ParamStore<T>,
}

/// Logits and sigmoid probabilities, both `[J + 1, D, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    pub logits: Var,
    pub probs: Var,
}

impl<T: Real> SwinUnetr<T> {
    /// He-normal initialization, except norms (identity affine), biases and
    /// the output head (zeros) and relative-position tables (N(0, 0.02²)).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for s in param_specs(&config) {
            let n: usize = s.shape.iter().product();
            let data: Vec<T> = match s.init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::He { fan_in } => sample(&mut rng, (2.0 / fan_in as f64).sqrt(), n),
                Init::Normal { std } => sample(&mut rng, std, n),
            };
            params.insert(s.name, Tensor::new(&s.shape, data)?);
        }
        Ok(Self { config, params })
    }

    /// Checks that `params` holds exactly the architecture's tensors.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        for s in &specs {
            match params.get(&s.name) {
                None => {
                    return Err(ModelError::Param {
                        name: s.name.clone(),
                        detail: "missing".into(),
                    })
                }
                Some(t) if t.shape() != s.shape.as_slice() => {
                    return Err(ModelError::Param {
                        name: s.name.clone(),
                        detail: format!("shape {:?}, expected {:?}", t.shape(), s.shape),
                    })
                }
                _ => {}
            }
        }
        if params.len() != specs.len() {
            let extra = params
                .keys()
                .find(|k| !specs.iter().any(|s| &s.name == *k))
                .cloned()
                .unwrap_or_default();
            return Err(ModelError::Param {
                name: extra,
                detail: "not part of the architecture".into(),
            });
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> SwinUnetr<U> {
        SwinUnetr {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Registers every parameter in `g`, as leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Params {
        Params(
            self.params
                .iter()
                .map(|(k, v)| {
                    let var = if trainable { g.leaf(v.clone()) } else { g.constant(v.clone()) };
                    (k.clone(), var)
                })
                .collect(),
        )
    }

    /// Full network on `x: [in_channels, D, H, W]`. Extents are zero-padded
    /// up to a multiple of the downsampling factor and the padding is
    /// removed from the outputs.
    pub fn forward(&self, g: &mut Graph<T>, p: &Params, x: Var) -> Result<ModelOutput> {
        let cfg = &self.config;
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[0] != cfg.in_channels {
            return Err(config_err(format!(
                "input shape {shape:?} does not match in_channels {}",
                cfg.in_channels
            )));
        }
        let f = cfg.downsample_factor();
        let dims = [shape[1], shape[2], shape[3]];
        if dims.iter().any(|&d| d < f) {
            return Err(config_err(format!(
                "input extents {dims:?} are smaller than the downsampling factor {f}"
            )));
        }
        let padded = dims.map(|d| d.div_ceil(f) * f);
        let xp = if padded == dims {
            x
        } else {
            let widths = [(0, 0), (0, padded[0] - dims[0]), (0, padded[1] - dims[1]), (0, padded[2] - dims[2])];
            g.pad(x, &widths)?
        };
        let pyramid = encoder_forward(g, p, cfg, xp)?;
        let mut logits = decoder_forward(g, p, cfg, &pyramid)?;
        if padded != dims {
            for a in 0..3 {
                logits = g.slice(logits, a + 1, 0, dims[a])?;
            }
        }
        let probs = g.sigmoid(logits)?;
        Ok(ModelOutput { logits, probs })
    }

    /// Forward pass without gradient tracking; returns probabilities.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &p, xv)?;
        Ok(g.value(out.probs).clone())
    }
}

fn sample<T: Real>(rng: &mut ChaCha8Rng, std: f64, n: usize) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect()
}

/// Per-voxel argmax over channels of `probs: [J + 1, D, H, W]`; ties go to
/// the lower class index. Every class is marked available.
pub fn predict_labels<T: Real>(probs: &Tensor<T>, spacing: Spacing) -> Result<LabelMap> {
    let s = probs.shape();
    if s.len() != 4 || s[0] < 2 || s[0] - 1 > crate::volumeio::MAX_CLASS as usize {
        return Err(config_err(format!("probability shape {s:?} is not [J+1, D, H, W]")));
    }
    let classes = (s[0] - 1) as u8;
    let n = s[1] * s[2] * s[3];
    let d = probs.data();
    let labels = (0..n)
        .map(|i| {
            let mut best = 0usize;
            for c in 1..s[0] {
                if d[c * n + i] > d[best * n + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new([s[1], s[2], s[3]], spacing, classes, ClassSet::full(classes), labels)
        .map_err(|e| config_err(e.to_string()))
}

#[cfg(test)]
mod tests;
