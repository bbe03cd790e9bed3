//! Run configuration: TOML-backed, fully defaulted, validated into a `Shape`
//! that the model code consumes. The canonical serialization (all defaults
//! materialized) is hashed to key run directories.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Sqvae2,
    Rsqvae,
    Hybrid,
    Vqvae,
    Vqvae2,
    Rqvae,
}

impl Variant {
    /// Stochastic variants train with relaxed sampling and learned variances;
    /// the rest are straight-through baselines with EMA codebooks.
    pub fn is_stochastic(self) -> bool {
        matches!(self, Variant::Sqvae2 | Variant::Rsqvae | Variant::Hybrid)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sqvae2 => "sqvae2",
            Variant::Rsqvae => "rsqvae",
            Variant::Hybrid => "hybrid",
            Variant::Vqvae => "vqvae",
            Variant::Vqvae2 => "vqvae2",
            Variant::Rqvae => "rqvae",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    First,
    Injected,
    Residual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerCfg {
    pub kind: LayerKind,
    /// Spatial extent of the latent grid (square: size x size sites).
    pub size: usize,
    /// Codebook capacity K for this layer.
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataCfg {
    /// "synth" or "cifar10".
    pub dataset: String,
    /// Dataset root; falls back to the HQQ_DATA_DIR environment variable.
    pub dir: Option<String>,
    pub train_images: usize,
    pub val_images: usize,
    pub test_images: usize,
    /// Square image extent; cifar10 is fixed at 32.
    pub image_size: usize,
    /// Shape count range per synthetic image (complexity control).
    pub synth_shapes: [usize; 2],
}

impl Default for DataCfg {
    fn default() -> Self {
        DataCfg {
            dataset: "synth".into(),
            dir: None,
            train_images: 512,
            val_images: 128,
            test_images: 128,
            image_size: 32,
            synth_shapes: [3, 7],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelCfg {
    pub variant: Variant,
    /// Code dimension and the channel width of every conv stage.
    pub d_b: usize,
    /// Residual blocks per encoder/decoder stage.
    pub resblocks: usize,
    pub shared_codebook: bool,
    /// Train with the progressive multi-prefix reconstruction objective.
    pub progressive: bool,
    /// Use the per-layer residual gap objective instead of the pooled one
    /// (rsqvae only; kept for the instability comparison).
    pub naive_objective: bool,
    /// Commitment weight for the straight-through baselines.
    pub beta: f64,
    /// EMA decay for baseline codebook updates.
    pub ema_decay: f64,
    /// Re-seed codes whose EMA cluster size falls below reset_threshold.
    pub codebook_reset: bool,
    pub reset_threshold: f64,
    /// Initial quantizer variance s^2 per layer.
    pub s2_init: f64,
    /// Initial decoder variance.
    pub sigma2_init: f64,
    pub layer: Vec<LayerCfg>,
}

impl Default for ModelCfg {
    fn default() -> Self {
        ModelCfg {
            variant: Variant::Sqvae2,
            d_b: 16,
            resblocks: 1,
            shared_codebook: false,
            progressive: false,
            naive_objective: false,
            beta: 0.25,
            ema_decay: 0.99,
            codebook_reset: false,
            reset_threshold: 1.0,
            s2_init: 1.0,
            sigma2_init: 1.0,
            layer: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCfg {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before the LR is halved.
    pub patience: usize,
    pub tau_floor: f64,
    pub tau_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub precision: Precision,
    /// Also keep a numbered checkpoint every N epochs; 0 keeps only last/best.
    pub checkpoint_every: usize,
}

impl Default for TrainCfg {
    fn default() -> Self {
        TrainCfg {
            lr: 1e-3,
            batch: 32,
            epochs: 20,
            patience: 3,
            tau_floor: 0.0,
            tau_decay: 1e-5,
            clip_norm: 0.0,
            precision: Precision::F32,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataCfg,
    pub model: ModelCfg,
    pub train: TrainCfg,
}

/// One resolution group of the top-down path: a contiguous run of layers at a
/// single latent extent. The first and every injected layer start a group;
/// residual layers extend the current one.
#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    pub size: usize,
    pub layers: Range<usize>,
}

/// Validated geometry derived from a config.
#[derive(Clone, Debug, PartialEq)]
pub struct Shape {
    /// Coarsest group first.
    pub groups: Vec<Group>,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl Shape {
    pub fn num_layers(&self) -> usize {
        self.groups.last().map_or(0, |g| g.layers.end)
    }

    /// Per-sample input dimension D.
    pub fn input_dim(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    pub fn group_of_layer(&self, l: usize) -> usize {
        self.groups.iter().position(|g| g.layers.contains(&l)).expect("layer index in range")
    }

    /// Latent sites of layer l (size^2).
    pub fn sites(&self, l: usize) -> usize {
        let g = &self.groups[self.group_of_layer(l)];
        g.size * g.size
    }
}

fn power_of_two_ratio(num: usize, den: usize) -> Option<u32> {
    if den == 0 || num % den != 0 {
        return None;
    }
    let r = num / den;
    r.is_power_of_two().then(|| r.trailing_zeros())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::config(format!("parse failure: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Canonical serialization with every default materialized. Byte-stable
    /// for a given config, so its hash can key run directories.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash12(&self) -> String {
        let digest = Sha256::digest(self.canonical_toml().as_bytes());
        let mut s = String::with_capacity(12);
        for b in &digest[..6] {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }

    pub fn validate(&self) -> Result<Shape> {
        let m = &self.model;
        if m.d_b == 0 {
            return Err(Error::config("d_b must be at least 1"));
        }
        if m.resblocks == 0 {
            return Err(Error::config("resblocks must be at least 1"));
        }
        if !(m.beta > 0.0) {
            return Err(Error::config("beta must be positive"));
        }
        if !(m.ema_decay > 0.0 && m.ema_decay < 1.0) {
            return Err(Error::config("ema_decay must lie in (0, 1)"));
        }
        if !(m.s2_init > 0.0) || !(m.sigma2_init > 0.0) {
            return Err(Error::config("s2_init and sigma2_init must be positive"));
        }
        if m.layer.is_empty() {
            return Err(Error::config("at least one [[model.layer]] is required"));
        }
        if m.layer[0].kind != LayerKind::First {
            return Err(Error::config("the top layer must have kind = \"first\""));
        }
        for (i, l) in m.layer.iter().enumerate().skip(1) {
            if l.kind == LayerKind::First {
                return Err(Error::config(format!("layer {} repeats kind \"first\"", i + 1)));
            }
        }
        for (i, l) in m.layer.iter().enumerate() {
            if l.size == 0 || l.k == 0 {
                return Err(Error::config(format!("layer {}: size and k must be at least 1", i + 1)));
            }
        }
        let kind_ok = |allowed: &[LayerKind]| {
            m.layer.iter().skip(1).all(|l| allowed.contains(&l.kind))
        };
        match m.variant {
            Variant::Vqvae => {
                if m.layer.len() != 1 {
                    return Err(Error::config("vqvae takes exactly one layer"));
                }
            }
            Variant::Sqvae2 | Variant::Vqvae2 => {
                if !kind_ok(&[LayerKind::Injected]) {
                    return Err(Error::config(format!(
                        "{} allows only injected layers below the first",
                        m.variant.name()
                    )));
                }
            }
            Variant::Rsqvae | Variant::Rqvae => {
                if !kind_ok(&[LayerKind::Residual]) {
                    return Err(Error::config(format!(
                        "{} allows only residual layers below the first",
                        m.variant.name()
                    )));
                }
            }
            Variant::Hybrid => {}
        }
        if m.progressive && !m.variant.is_stochastic() {
            return Err(Error::config("progressive training requires a stochastic variant"));
        }
        if m.naive_objective && m.variant != Variant::Rsqvae {
            return Err(Error::config("naive_objective applies to rsqvae only"));
        }
        if m.codebook_reset && m.variant.is_stochastic() {
            return Err(Error::config("codebook_reset applies to the baselines only"));
        }
        if m.shared_codebook {
            let k0 = m.layer[0].k;
            if m.layer.iter().any(|l| l.k != k0) {
                return Err(Error::config("shared_codebook requires equal k on every layer"));
            }
        }

        // group derivation
        let mut groups: Vec<Group> = Vec::new();
        for (i, l) in m.layer.iter().enumerate() {
            match l.kind {
                LayerKind::First | LayerKind::Injected => {
                    groups.push(Group { size: l.size, layers: i..i + 1 });
                }
                LayerKind::Residual => {
                    let g = groups.last_mut().expect("first layer opens a group");
                    if l.size != g.size {
                        return Err(Error::config(format!(
                            "layer {}: residual size {} differs from its group's {}",
                            i + 1,
                            l.size,
                            g.size
                        )));
                    }
                    g.layers.end = i + 1;
                }
            }
        }
        // resolution chain: sizes non-decreasing top-down, power-of-two steps
        for w in groups.windows(2) {
            if power_of_two_ratio(w[1].size, w[0].size).is_none() {
                return Err(Error::config(format!(
                    "group sizes {} -> {} must grow by a power of two (or stay equal)",
                    w[0].size, w[1].size
                )));
            }
        }

        let d = &self.data;
        if d.dataset != "synth" && d.dataset != "cifar10" {
            return Err(Error::config(format!("unknown dataset {:?}", d.dataset)));
        }
        if d.dataset == "cifar10" && d.image_size != 32 {
            return Err(Error::config("cifar10 images are 32x32"));
        }
        if d.synth_shapes[0] > d.synth_shapes[1] {
            return Err(Error::config("synth_shapes must be an ordered [min, max] pair"));
        }
        let finest = groups.last().expect("nonempty").size;
        if power_of_two_ratio(d.image_size, finest).is_none() {
            return Err(Error::config(format!(
                "image size {} must be a power-of-two multiple of the finest latent extent {}",
                d.image_size, finest
            )));
        }

        let t = &self.train;
        if !(t.lr > 0.0) {
            return Err(Error::config("lr must be positive"));
        }
        if t.batch == 0 || t.epochs == 0 {
            return Err(Error::config("batch and epochs must be at least 1"));
        }
        if t.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        if !(t.tau_floor >= 0.0 && t.tau_floor <= 1.0) {
            return Err(Error::config("tau_floor must lie in [0, 1]"));
        }
        if !(t.tau_decay >= 0.0) {
            return Err(Error::config("tau_decay must be nonnegative"));
        }
        if t.clip_norm < 0.0 {
            return Err(Error::config("clip_norm must be nonnegative"));
        }

        Ok(Shape { groups, in_c: 3, in_h: d.image_size, in_w: d.image_size })
    }

    /// Total latent bits of the configuration.
    pub fn bits(&self, shape: &Shape) -> f64 {
        self.model
            .layer
            .iter()
            .enumerate()
            .map(|(l, spec)| shape.sites(l) as f64 * (spec.k as f64).log2())
            .sum()
    }
}
