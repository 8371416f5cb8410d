//! Residual blocks, residual attention blocks (RACAB) and the 18-layer
//! cloud-removal network.
//!
//! Layer plan (1-based positions):
//!
//! | position | layer                                   |
//! |----------|-----------------------------------------|
//! | 1        | stem: 3×3 conv `C_in → C`, ReLU         |
//! | 2–9      | 8 × residual block                      |
//! | 10       | RACAB                                   |
//! | 11–13    | 3 × residual block                      |
//! | 14       | RACAB                                   |
//! | 15–17    | 3 × residual block                      |
//! | 18       | refine: 3×3 conv `C → C_in`             |
//!
//! The refine output is added to the input image.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_forward, AttentionConfig, AttentionOutput, AttentionParams, AttentionVariant, AttentionVars,
    SimilarityRecord,
};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{he_normal, Element, Tape, Tensor, Var};

pub const LAYER_COUNT: usize = 18;
pub const RACAB_POSITIONS: [usize; 2] = [10, 14];

/// Which block occupies the two attention positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockVariant {
    /// Plain residual blocks; no attention.
    Base,
    /// Residual blocks around contextual attention.
    Ca,
    /// Residual blocks around attentive contextual attention.
    Ac,
}

impl BlockVariant {
    pub const ALL: [BlockVariant; 3] = [BlockVariant::Base, BlockVariant::Ca, BlockVariant::Ac];

    pub fn attention(self) -> Option<AttentionVariant> {
        match self {
            BlockVariant::Base => None,
            BlockVariant::Ca => Some(AttentionVariant::Ca),
            BlockVariant::Ac => Some(AttentionVariant::Ac),
        }
    }
}

impl std::fmt::Display for BlockVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BlockVariant::Base => "base",
            BlockVariant::Ca => "ca",
            BlockVariant::Ac => "ac",
        })
    }
}

impl std::str::FromStr for BlockVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(BlockVariant::Base),
            "ca" => Ok(BlockVariant::Ca),
            "ac" => Ok(BlockVariant::Ac),
            other => Err(Error::InvalidArgument(format!("unknown variant {other:?} (base, ca, ac)"))),
        }
    }
}

/// How the refined features combine with the input image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkipMode {
    #[default]
    Add,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Stem,
    Residual,
    Racab,
    Refine,
}

fn default_channels() -> usize {
    32
}
fn default_alpha() -> f64 {
    0.1
}
fn default_variant() -> BlockVariant {
    BlockVariant::Ac
}
fn default_patch() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub c_in: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_variant")]
    pub variant: BlockVariant,
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    #[serde(default)]
    pub skip_mode: SkipMode,
}

impl NetworkConfig {
    pub fn new(c_in: usize, channels: usize, variant: BlockVariant) -> Self {
        Self {
            c_in,
            channels,
            alpha: default_alpha(),
            variant,
            patch_size: default_patch(),
            skip_mode: SkipMode::Add,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.channels == 0 || self.patch_size == 0 {
            return Err(Error::InvalidArgument(
                "c_in, channels and patch_size must be positive".into(),
            ));
        }
        if self.channels % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "channels must be divisible by 4, got {}",
                self.channels
            )));
        }
        if !self.alpha.is_finite() {
            return Err(Error::InvalidArgument("alpha must be finite".into()));
        }
        Ok(())
    }

    pub fn attention_config(&self) -> Option<AttentionConfig> {
        self.variant.attention().map(|variant| AttentionConfig {
            variant,
            patch_size: self.patch_size,
            channels: self.channels,
        })
    }

    /// Kind of each of the 18 layers, in order.
    pub fn layout(&self) -> Vec<LayerKind> {
        (1..=LAYER_COUNT)
            .map(|pos| match pos {
                1 => LayerKind::Stem,
                LAYER_COUNT => LayerKind::Refine,
                p if RACAB_POSITIONS.contains(&p) && self.variant != BlockVariant::Base => LayerKind::Racab,
                _ => LayerKind::Residual,
            })
            .collect()
    }

    /// Spatial extents must be multiples of this.
    pub fn required_multiple(&self) -> usize {
        if self.variant == BlockVariant::Base {
            1
        } else {
            2 * self.patch_size
        }
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (h, w, c) = match *shape {
            [h, w, c] => (h, w, c),
            _ => return Err(Error::shape("network input", format!("expected [H, W, C], got {shape:?}"))),
        };
        if c != self.c_in {
            return Err(Error::shape(
                "network input",
                format!("expected {} bands, got {c}", self.c_in),
            ));
        }
        let m = self.required_multiple();
        for extent in [h, w] {
            if extent == 0 || extent % m != 0 {
                return Err(Error::Divisibility {
                    extent,
                    multiple: m,
                    context: "network input height and width",
                });
            }
        }
        Ok(())
    }
}

fn layer_prefix(pos: usize) -> String {
    format!("l{pos:02}")
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T>(IndexMap<String, Tensor<T>>);

impl<T: Element> Params<T> {
    pub fn new() -> Self {
        Self(IndexMap::new())
    }

    pub fn insert(&mut self, name: String, t: Tensor<T>) {
        self.0.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.0.get(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.0.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.0.values_mut()
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.0.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Element>(&self) -> Params<U> {
        Params(self.0.iter().map(|(k, v)| (k.clone(), v.cast())).collect())
    }
}

impl<T: Element> Default for Params<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameters recorded on one tape, addressable by name.
pub struct TapeParams<'t, T> {
    vars: IndexMap<String, Var<'t, T>>,
}

impl<'t, T: Element> TapeParams<'t, T> {
    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    /// Vars in parameter order.
    pub fn vars(&self) -> impl Iterator<Item = Var<'t, T>> + '_ {
        self.vars.values().copied()
    }
}

/// Builds a parameter set from arbitrary vars, e.g. perturbed copies for a
/// finite-difference check.
impl<'t, T> FromIterator<(String, Var<'t, T>)> for TapeParams<'t, T> {
    fn from_iter<I: IntoIterator<Item = (String, Var<'t, T>)>>(iter: I) -> Self {
        Self {
            vars: iter.into_iter().collect(),
        }
    }
}

/// `x + α · ReLU(Conv(ReLU(Conv(x))))`.
pub fn residual_block<'t, T: Element>(
    x: Var<'t, T>,
    conv1: &Var<'t, T>,
    conv2: &Var<'t, T>,
    alpha: T,
) -> Result<Var<'t, T>> {
    let branch = x.conv2d(conv1, 1)?.relu()?.conv2d(conv2, 1)?.relu()?;
    x.add(&branch.scale(alpha)?)
}

/// `x + α · Up₂(Attn(ReLU(Conv(ReLU(Conv_stride2(x))))))`.
pub fn racab<'t, T: Element>(
    x: Var<'t, T>,
    conv1: &Var<'t, T>,
    conv2: &Var<'t, T>,
    attn: &AttentionVars<'t, T>,
    attn_config: &AttentionConfig,
    alpha: T,
) -> Result<(Var<'t, T>, AttentionOutput<'t, T>)> {
    let shape = x.shape();
    for &extent in &shape[..2.min(shape.len())] {
        if extent % 2 != 0 {
            return Err(Error::Divisibility {
                extent,
                multiple: 2,
                context: "RACAB input",
            });
        }
        if (extent / 2) % attn_config.patch_size != 0 {
            return Err(Error::Divisibility {
                extent,
                multiple: 2 * attn_config.patch_size,
                context: "RACAB input (half resolution must tile into patches)",
            });
        }
    }
    let half = x.conv2d(conv1, 2)?.relu()?.conv2d(conv2, 1)?.relu()?;
    let att = attention_forward(half, attn, attn_config)?;
    let up = att.output.bilinear_upsample(2)?;
    Ok((x.add(&up.scale(alpha)?)?, att))
}

/// Knobs for analysis runs; the defaults give the plain forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Scale used by the RACABs instead of `config.alpha`.
    pub racab_alpha: Option<f64>,
    /// Replace every RACAB with the identity.
    pub skip_racabs: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    config: NetworkConfig,
    params: Params<T>,
}

impl<T: Element> Network<T> {
    /// Builds a freshly initialized network. Convolutions are He-normal
    /// except the refine conv (zero, so the network starts as the identity)
    /// and the attention selection modules' final convs (zero).
    pub fn build(config: NetworkConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let (c, c_in) = (config.channels, config.c_in);
        let mut params = Params::new();
        for (i, kind) in config.layout().into_iter().enumerate() {
            let prefix = layer_prefix(i + 1);
            match kind {
                LayerKind::Stem => params.insert(format!("{prefix}.stem"), he_normal(&[3, 3, c_in, c], rng)),
                LayerKind::Residual | LayerKind::Racab => {
                    params.insert(format!("{prefix}.conv1"), he_normal(&[3, 3, c, c], rng));
                    params.insert(format!("{prefix}.conv2"), he_normal(&[3, 3, c, c], rng));
                    if kind == LayerKind::Racab {
                        let attn_config = config.attention_config().expect("RACAB implies attention");
                        let attn = AttentionParams::<T>::init(&attn_config, rng)?;
                        for (name, t) in attn.named() {
                            params.insert(format!("{prefix}.attn.{name}"), t.clone());
                        }
                    }
                }
                LayerKind::Refine => params.insert(format!("{prefix}.refine"), Tensor::zeros(&[3, 3, c, c_in])),
            }
        }
        Ok(Self { config, params })
    }

    /// Wraps existing parameters, checking names and shapes against a fresh
    /// build of `config`.
    pub fn from_params(config: NetworkConfig, params: Params<T>) -> Result<Self> {
        let reference = Self::build(config.clone(), &mut RngStream::new(0))?;
        if reference.params.len() != params.len() {
            return Err(Error::Incompatible(format!(
                "expected {} parameter tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for ((rn, rt), (n, t)) in reference.params.iter().zip(params.iter()) {
            if rn != n || rt.shape() != t.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter {n} {:?} does not match expected {rn} {:?}",
                    t.shape(),
                    rt.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    pub fn into_params(self) -> Params<T> {
        self.params
    }

    pub fn register<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> TapeParams<'t, T> {
        let vars = self
            .params
            .iter()
            .map(|(n, t)| {
                let v = if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
                (n.clone(), v)
            })
            .collect();
        TapeParams { vars }
    }

    /// Forward pass on a tape. Returns the output and the attention results
    /// of each RACAB in order.
    pub fn forward_on<'t>(
        &self,
        x: Var<'t, T>,
        p: &TapeParams<'t, T>,
        opts: &ForwardOptions,
    ) -> Result<(Var<'t, T>, Vec<AttentionOutput<'t, T>>)> {
        self.config.check_input(&x.shape())?;
        let alpha = T::from_f64_lossy(self.config.alpha);
        let racab_alpha = T::from_f64_lossy(opts.racab_alpha.unwrap_or(self.config.alpha));
        let attn_config = self.config.attention_config();
        let mut attentions = Vec::new();
        let mut h = x;
        for (i, kind) in self.config.layout().into_iter().enumerate() {
            let prefix = layer_prefix(i + 1);
            h = match kind {
                LayerKind::Stem => x.conv2d(&p.get(&format!("{prefix}.stem"))?, 1)?.relu()?,
                LayerKind::Residual => residual_block(
                    h,
                    &p.get(&format!("{prefix}.conv1"))?,
                    &p.get(&format!("{prefix}.conv2"))?,
                    alpha,
                )?,
                LayerKind::Racab if opts.skip_racabs => h,
                LayerKind::Racab => {
                    let cfg = attn_config.as_ref().expect("RACAB implies attention");
                    let attn = AttentionVars::from_lookup(cfg, |name| p.get(&format!("{prefix}.attn.{name}")).ok())?;
                    let (y, att) = racab(
                        h,
                        &p.get(&format!("{prefix}.conv1"))?,
                        &p.get(&format!("{prefix}.conv2"))?,
                        &attn,
                        cfg,
                        racab_alpha,
                    )?;
                    attentions.push(att);
                    y
                }
                LayerKind::Refine => {
                    let refined = h.conv2d(&p.get(&format!("{prefix}.refine"))?, 1)?;
                    match self.config.skip_mode {
                        SkipMode::Add => x.add(&refined)?,
                    }
                }
            };
        }
        Ok((h, attentions))
    }

    /// Inference on a plain tensor.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_with(x, &ForwardOptions::default())
    }

    pub fn forward_with(&self, x: &Tensor<T>, opts: &ForwardOptions) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.register(&tape, false);
        let (out, _) = self.forward_on(tape.constant(x.clone()), &p, opts)?;
        let v = out.value();
        Ok((*v).clone())
    }

    /// Inference that also captures each RACAB's similarity matrices for the
    /// patch nearest to fractional coordinates `query = (row, col)`.
    pub fn forward_traced(&self, x: &Tensor<T>, query: (f64, f64)) -> Result<(Tensor<T>, Vec<SimilarityRecord>)> {
        let tape = Tape::new();
        let p = self.register(&tape, false);
        let (out, atts) = self.forward_on(tape.constant(x.clone()), &p, &ForwardOptions::default())?;
        let records = atts
            .iter()
            .map(|a| {
                let q = SimilarityRecord::patch_at(a.grid, query.0, query.1)?;
                SimilarityRecord::from_output(a, q)
            })
            .collect::<Result<Vec<_>>>()?;
        let v = out.value();
        Ok(((*v).clone(), records))
    }

    /// Number of attention parameters (zero for the base variant).
    pub fn attention_scalar_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.contains(".attn."))
            .map(|(_, t)| t.len())
            .sum()
    }
}
