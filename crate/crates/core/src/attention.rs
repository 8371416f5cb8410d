//! Vanilla token attention, patch-based contextual attention (CA), and
//! attentive contextual attention (AC), which reshapes CA's similarity
//! scores with a learned per-query weight and bias followed by a ReLU.
//!
//! Pipeline for the patch variants on a feature map `F: [H, W, C]`:
//!
//! 1. `Q, K, V` from three 1×1 convolutions of `F`
//! 2. split each into `N_p = HW / s²` patches of length `d = s·s·C`
//! 3. `S_p = softmax(Q_p K_pᵀ / √d)`
//! 4. (AC only) `S_att = ReLU((S_p − rowmean(S_p)) · W_sel + B_sel)`, with
//!    `W_sel`, `B_sel` predicted per query patch from `Q`
//! 5. `O_p = S · V_p`, reassembled to `[H, W, C]`, then a 3×3 convolution

use std::path::Path;

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{he_normal, kernels, Element, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionVariant {
    Vanilla,
    Ca,
    Ac,
}

impl std::fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttentionVariant::Vanilla => "vanilla",
            AttentionVariant::Ca => "ca",
            AttentionVariant::Ac => "ac",
        })
    }
}

fn default_patch_size() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub variant: AttentionVariant,
    #[serde(default = "default_patch_size")]
    pub patch_size: usize,
    pub channels: usize,
}

impl AttentionConfig {
    pub fn new(variant: AttentionVariant, channels: usize) -> Self {
        Self {
            variant,
            patch_size: default_patch_size(),
            channels,
        }
    }

    /// Hidden width of the selection modules (`C/4`).
    pub fn selection_hidden(&self) -> usize {
        self.channels / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.patch_size == 0 {
            return Err(Error::InvalidArgument(
                "attention channels and patch size must be positive".into(),
            ));
        }
        if self.variant == AttentionVariant::Ac && self.channels % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "AC attention needs channels divisible by 4, got {}",
                self.channels
            )));
        }
        Ok(())
    }

    /// Patch grid for an `h × w` feature map.
    pub fn grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        kernels::patch_grid(h, w, self.patch_size)
    }
}

/// Weights of one selection module: 1×1 conv `C → C/4`, ReLU, 1×1 conv `C/4 → 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionModule<T> {
    pub hidden: Tensor<T>,
    pub out: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    /// Weight and bias modules; AC only.
    pub selection: Option<(SelectionModule<T>, SelectionModule<T>)>,
    /// 3×3 output convolution; CA and AC.
    pub output: Option<Tensor<T>>,
}

impl<T: Element> AttentionParams<T> {
    /// He-normal embeddings and output conv; the selection modules' final
    /// convs start at zero so that `W_sel = 1`, `B_sel = 0`.
    pub fn init(config: &AttentionConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let wq = he_normal(&[1, 1, c, c], rng);
        let wk = he_normal(&[1, 1, c, c], rng);
        let wv = he_normal(&[1, 1, c, c], rng);
        let selection = (config.variant == AttentionVariant::Ac).then(|| {
            let hidden = config.selection_hidden();
            let mut module = || SelectionModule {
                hidden: he_normal(&[1, 1, c, hidden], rng),
                out: Tensor::zeros(&[1, 1, hidden, 1]),
            };
            let weight = module();
            let bias = module();
            (weight, bias)
        });
        let output = (config.variant != AttentionVariant::Vanilla).then(|| he_normal(&[3, 3, c, c], rng));
        Ok(Self {
            wq,
            wk,
            wv,
            selection,
            output,
        })
    }

    /// Identity embeddings, zero selection modules, identity output conv.
    pub fn identity(config: &AttentionConfig) -> Self {
        let c = config.channels;
        let eye = |k: usize| {
            let mut t = Tensor::zeros(&[k, k, c, c]);
            let centre = (k / 2 * k + k / 2) * c * c;
            for i in 0..c {
                t.data_mut()[centre + i * c + i] = T::one();
            }
            t
        };
        let hidden = config.selection_hidden();
        Self {
            wq: eye(1),
            wk: eye(1),
            wv: eye(1),
            selection: (config.variant == AttentionVariant::Ac).then(|| {
                let m = SelectionModule {
                    hidden: Tensor::zeros(&[1, 1, c, hidden]),
                    out: Tensor::zeros(&[1, 1, hidden, 1]),
                };
                (m.clone(), m)
            }),
            output: (config.variant != AttentionVariant::Vanilla).then(|| eye(3)),
        }
    }

    /// Parameter tensors with their local names, in a fixed order.
    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out = vec![("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv)];
        if let Some((w, b)) = &self.selection {
            out.extend([
                ("sel_w.hidden", &w.hidden),
                ("sel_w.out", &w.out),
                ("sel_b.hidden", &b.hidden),
                ("sel_b.out", &b.out),
            ]);
        }
        if let Some(o) = &self.output {
            out.push(("out", o));
        }
        out
    }

    /// Records every parameter on `tape`.
    pub fn on_tape<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> AttentionVars<'t, T> {
        let leaf = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        AttentionVars {
            wq: leaf(&self.wq),
            wk: leaf(&self.wk),
            wv: leaf(&self.wv),
            selection: self.selection.as_ref().map(|(w, b)| SelectionVars {
                weight_hidden: leaf(&w.hidden),
                weight_out: leaf(&w.out),
                bias_hidden: leaf(&b.hidden),
                bias_out: leaf(&b.out),
            }),
            output: self.output.as_ref().map(leaf),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SelectionVars<'t, T> {
    pub weight_hidden: Var<'t, T>,
    pub weight_out: Var<'t, T>,
    pub bias_hidden: Var<'t, T>,
    pub bias_out: Var<'t, T>,
}

/// Attention parameters already recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars<'t, T> {
    pub wq: Var<'t, T>,
    pub wk: Var<'t, T>,
    pub wv: Var<'t, T>,
    pub selection: Option<SelectionVars<'t, T>>,
    pub output: Option<Var<'t, T>>,
}

impl<'t, T: Element> AttentionVars<'t, T> {
    /// Builds from a name lookup, using the names of [`AttentionParams::named`].
    pub fn from_lookup(config: &AttentionConfig, get: impl Fn(&str) -> Option<Var<'t, T>>) -> Result<Self> {
        let need = |name: &str| get(name).ok_or_else(|| Error::InvalidArgument(format!("missing attention parameter {name}")));
        let selection = if config.variant == AttentionVariant::Ac {
            Some(SelectionVars {
                weight_hidden: need("sel_w.hidden")?,
                weight_out: need("sel_w.out")?,
                bias_hidden: need("sel_b.hidden")?,
                bias_out: need("sel_b.out")?,
            })
        } else {
            None
        };
        let output = if config.variant == AttentionVariant::Vanilla {
            None
        } else {
            Some(need("out")?)
        };
        Ok(Self {
            wq: need("wq")?,
            wk: need("wk")?,
            wv: need("wv")?,
            selection,
            output,
        })
    }
}

/// Replaces the learned `W_sel`/`B_sel` for analysis.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum SelectionOverride {
    #[default]
    Learned,
    Fixed { weight: f64, bias: f64 },
    /// `W_sel = 1`, `B_sel = 1/N_p`: the transform then returns `S_p`.
    CaReduction,
}

/// Result of one attention evaluation.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput<'t, T> {
    pub output: Var<'t, T>,
    /// `S` (vanilla) or `S_p` (patch variants).
    pub scores: Var<'t, T>,
    /// `S_att`; AC only.
    pub attentive: Option<Var<'t, T>>,
    /// Patch grid (token grid for vanilla).
    pub grid: (usize, usize),
}

/// `Q = F W_q`, `K = F W_k`, `V = F W_v` as 1×1 convolutions.
pub fn embed_qkv<'t, T: Element>(
    f: Var<'t, T>,
    p: &AttentionVars<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>)> {
    Ok((f.conv2d(&p.wq, 1)?, f.conv2d(&p.wk, 1)?, f.conv2d(&p.wv, 1)?))
}

/// Token attention over all `H·W` positions: `O = softmax(QKᵀ/√C) V`.
pub fn vanilla_attention<'t, T: Element>(
    f: Var<'t, T>,
    p: &AttentionVars<'t, T>,
) -> Result<AttentionOutput<'t, T>> {
    let shape = f.shape();
    let (h, w, c) = match *shape.as_slice() {
        [h, w, c] => (h, w, c),
        _ => return Err(Error::shape("vanilla_attention", format!("expected [H, W, C], got {shape:?}"))),
    };
    let (q, k, v) = embed_qkv(f, p)?;
    let n = h * w;
    let q = q.reshape(&[n, c])?;
    let k = k.reshape(&[n, c])?;
    let v = v.reshape(&[n, c])?;
    let scale = T::from_f64_lossy(1.0 / (c as f64).sqrt());
    let s = q.matmul(&k.transpose()?)?.scale(scale)?.softmax_rows()?;
    let o = s.matmul(&v)?.reshape(&[h, w, c])?;
    Ok(AttentionOutput {
        output: o,
        scores: s,
        attentive: None,
        grid: (h, w),
    })
}

/// `S_p = softmax(Q_p K_pᵀ / √d)`.
pub fn patch_similarity<'t, T: Element>(qp: Var<'t, T>, kp: Var<'t, T>) -> Result<Var<'t, T>> {
    let (qs, ks) = (qp.shape(), kp.shape());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(Error::shape("patch_similarity", format!("{qs:?} vs {ks:?}")));
    }
    let scale = T::from_f64_lossy(1.0 / (qs[1] as f64).sqrt());
    qp.matmul(&kp.transpose()?)?.scale(scale)?.softmax_rows()
}

/// One selection module reduced to a scalar per query patch: conv → ReLU →
/// conv gives an `[H, W, 1]` map, averaged over each `s×s` patch.
fn selection_scalars<'t, T: Element>(q: Var<'t, T>, hidden: Var<'t, T>, out: Var<'t, T>, s: usize) -> Result<Var<'t, T>> {
    q.conv2d(&hidden, 1)?.relu()?.conv2d(&out, 1)?.patchify(s)?.mean_axis(1)
}

/// Per-query-patch `(W_sel, B_sel)` vectors of length `N_p`. `W_sel`
/// carries a constant `+1` offset.
pub fn selection_params<'t, T: Element>(
    q: Var<'t, T>,
    sel: &SelectionVars<'t, T>,
    patch_size: usize,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let w = selection_scalars(q, sel.weight_hidden, sel.weight_out, patch_size)?.add_scalar(T::one())?;
    let b = selection_scalars(q, sel.bias_hidden, sel.bias_out, patch_size)?;
    Ok((w, b))
}

/// `S_p,ad = S_p − rowmean(S_p)`.
pub fn adjust_similarity<'t, T: Element>(sp: Var<'t, T>) -> Result<Var<'t, T>> {
    let cols = sp.shape()[1];
    sp.sub(&sp.mean_axis(1)?.expand_cols(cols)?)
}

/// `S_att[i, j] = ReLU(S_p,ad[i, j] · W_sel[i] + B_sel[i])`. Rows are not
/// renormalized.
pub fn attentive_transform<'t, T: Element>(
    sp_ad: Var<'t, T>,
    w_sel: Var<'t, T>,
    b_sel: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let shape = sp_ad.shape();
    let n = shape[0];
    if w_sel.shape() != [n] || b_sel.shape() != [n] {
        return Err(Error::shape(
            "attentive_transform",
            format!("{shape:?} with W {:?}, B {:?}", w_sel.shape(), b_sel.shape()),
        ));
    }
    let cols = shape[1];
    sp_ad
        .mul(&w_sel.expand_cols(cols)?)?
        .add(&b_sel.expand_cols(cols)?)?
        .relu()
}

/// `O_p = S V_p`.
pub fn attend_patches<'t, T: Element>(s: Var<'t, T>, vp: Var<'t, T>) -> Result<Var<'t, T>> {
    s.matmul(&vp)
}

struct PatchEmbedding<'t, T> {
    q: Var<'t, T>,
    sp: Var<'t, T>,
    vp: Var<'t, T>,
    h: usize,
    w: usize,
    grid: (usize, usize),
}

fn embed_patches<'t, T: Element>(
    f: Var<'t, T>,
    p: &AttentionVars<'t, T>,
    config: &AttentionConfig,
) -> Result<PatchEmbedding<'t, T>> {
    let shape = f.shape();
    let (h, w) = match *shape.as_slice() {
        [h, w, c] if c == config.channels => (h, w),
        _ => {
            return Err(Error::shape(
                "attention",
                format!("expected [H, W, {}], got {shape:?}", config.channels),
            ))
        }
    };
    let grid = config.grid(h, w)?;
    let s = config.patch_size;
    let (q, k, v) = embed_qkv(f, p)?;
    let sp = patch_similarity(q.patchify(s)?, k.patchify(s)?)?;
    Ok(PatchEmbedding {
        q,
        sp,
        vp: v.patchify(s)?,
        h,
        w,
        grid,
    })
}

fn finish<'t, T: Element>(
    e: &PatchEmbedding<'t, T>,
    s: Var<'t, T>,
    p: &AttentionVars<'t, T>,
    patch_size: usize,
) -> Result<Var<'t, T>> {
    let out_conv = p
        .output
        .ok_or_else(|| Error::InvalidArgument("patch attention needs an output convolution".into()))?;
    attend_patches(s, e.vp)?
        .unpatchify(e.h, e.w, patch_size)?
        .conv2d(&out_conv, 1)
}

/// Contextual attention: `S_p` feeds the attending step directly.
pub fn ca_attention_forward<'t, T: Element>(
    f: Var<'t, T>,
    p: &AttentionVars<'t, T>,
    config: &AttentionConfig,
) -> Result<AttentionOutput<'t, T>> {
    let e = embed_patches(f, p, config)?;
    let output = finish(&e, e.sp, p, config.patch_size)?;
    Ok(AttentionOutput {
        output,
        scores: e.sp,
        attentive: None,
        grid: e.grid,
    })
}

/// Attentive contextual attention.
pub fn ac_attention_forward<'t, T: Element>(
    f: Var<'t, T>,
    p: &AttentionVars<'t, T>,
    config: &AttentionConfig,
    selection: SelectionOverride,
) -> Result<AttentionOutput<'t, T>> {
    let e = embed_patches(f, p, config)?;
    let n_p = e.grid.0 * e.grid.1;
    let tape = f.tape();
    let fixed = |value: f64| tape.constant(Tensor::full(&[n_p], T::from_f64_lossy(value)));
    let (w_sel, b_sel) = match selection {
        SelectionOverride::Learned => {
            let sel = p
                .selection
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("AC attention needs selection modules".into()))?;
            selection_params(e.q, sel, config.patch_size)?
        }
        SelectionOverride::Fixed { weight, bias } => (fixed(weight), fixed(bias)),
        SelectionOverride::CaReduction => (fixed(1.0), fixed(1.0 / n_p as f64)),
    };
    let s_att = attentive_transform(adjust_similarity(e.sp)?, w_sel, b_sel)?;
    let output = finish(&e, s_att, p, config.patch_size)?;
    Ok(AttentionOutput {
        output,
        scores: e.sp,
        attentive: Some(s_att),
        grid: e.grid,
    })
}

/// Dispatches on `config.variant`.
pub fn attention_forward<'t, T: Element>(
    f: Var<'t, T>,
    p: &AttentionVars<'t, T>,
    config: &AttentionConfig,
) -> Result<AttentionOutput<'t, T>> {
    match config.variant {
        AttentionVariant::Vanilla => vanilla_attention(f, p),
        AttentionVariant::Ca => ca_attention_forward(f, p, config),
        AttentionVariant::Ac => ac_attention_forward(f, p, config, SelectionOverride::Learned),
    }
}

/// Similarity matrices captured from one attention evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityRecord {
    /// `N_p × N_p`, rows sum to 1.
    pub s_p: Tensor<f64>,
    /// `N_p × N_p`, non-negative; absent for CA.
    pub s_att: Option<Tensor<f64>>,
    pub query_index: usize,
    pub grid: (usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchScore {
    pub patch_index: usize,
    pub row: usize,
    pub col: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityExport {
    pub record: SimilarityRecord,
    pub top_s_p: Vec<PatchScore>,
    pub top_s_att: Option<Vec<PatchScore>>,
}

impl SimilarityRecord {
    pub fn from_output<T: Element>(out: &AttentionOutput<'_, T>, query_index: usize) -> Result<Self> {
        let n_p = out.grid.0 * out.grid.1;
        if query_index >= n_p {
            return Err(Error::InvalidArgument(format!(
                "query index {query_index} out of range for {n_p} patches"
            )));
        }
        Ok(Self {
            s_p: out.scores.value().cast(),
            s_att: out.attentive.map(|a| a.value().cast()),
            query_index,
            grid: out.grid,
        })
    }

    pub fn n_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn s_p_row(&self) -> &[f64] {
        let n = self.n_patches();
        &self.s_p.data()[self.query_index * n..(self.query_index + 1) * n]
    }

    pub fn s_att_row(&self) -> Option<&[f64]> {
        let n = self.n_patches();
        self.s_att
            .as_ref()
            .map(|t| &t.data()[self.query_index * n..(self.query_index + 1) * n])
    }

    /// Patch index nearest to fractional image coordinates `(r, c) ∈ [0,1]²`.
    pub fn patch_at(grid: (usize, usize), r: f64, c: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&r) || !(0.0..=1.0).contains(&c) {
            return Err(Error::InvalidArgument(format!(
                "query coordinates ({r}, {c}) must lie in [0, 1]"
            )));
        }
        let row = ((r * grid.0 as f64).floor() as usize).min(grid.0 - 1);
        let col = ((c * grid.1 as f64).floor() as usize).min(grid.1 - 1);
        Ok(row * grid.1 + col)
    }

    pub fn export(self, top_fraction: f64) -> Result<SimilarityExport> {
        let top_s_p = top_patches(self.s_p_row(), self.grid, top_fraction)?;
        let top_s_att = self
            .s_att_row()
            .map(|row| top_patches(row, self.grid, top_fraction))
            .transpose()?;
        Ok(SimilarityExport {
            record: self,
            top_s_p,
            top_s_att,
        })
    }

    /// CSV with header `patch_index,row,col,s_p,s_att`; `s_att` is empty
    /// when absent.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("patch_index,row,col,s_p,s_att\n");
        let att = self.s_att_row();
        for (j, sp) in self.s_p_row().iter().enumerate() {
            let a = att.map(|r| r[j].to_string()).unwrap_or_default();
            out.push_str(&format!("{j},{},{},{sp},{a}\n", j / self.grid.1, j % self.grid.1));
        }
        out
    }
}

/// The `⌈fraction · N⌉` highest scores, descending, ties broken by
/// ascending patch index.
pub fn top_patches(row: &[f64], grid: (usize, usize), fraction: f64) -> Result<Vec<PatchScore>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "top fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let n = row.len();
    // tolerance keeps e.g. 0.05 · 400 from rounding up to 21
    let k = ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n.max(1)).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .take(k)
        .map(|j| PatchScore {
            patch_index: j,
            row: j / grid.1,
            col: j % grid.1,
            score: row[j],
        })
        .collect())
}

/// Grayscale heatmap of one similarity row over the patch grid, scaled so
/// the row maximum maps to 255. Each patch covers `cell × cell` pixels.
pub fn similarity_heatmap(row: &[f64], grid: (usize, usize), cell: usize) -> GrayImage {
    let max = row.iter().copied().fold(0.0f64, f64::max);
    let cell = cell.max(1);
    GrayImage::from_fn((grid.1 * cell) as u32, (grid.0 * cell) as u32, |x, y| {
        let j = (y as usize / cell) * grid.1 + x as usize / cell;
        let v = if max > 0.0 { (row[j] / max * 255.0).round() } else { 0.0 };
        Luma([v.clamp(0.0, 255.0) as u8])
    })
}

pub fn save_heatmap(path: &Path, row: &[f64], grid: (usize, usize), cell: usize) -> Result<()> {
    similarity_heatmap(row, grid, cell).save(path)?;
    Ok(())
}

/// Runs one attention block on a constant tape and exports the similarity
/// rows of `query_index` with their top `top_fraction` patches.
pub fn export_similarity<T: Element>(
    f: &Tensor<T>,
    params: &AttentionParams<T>,
    config: &AttentionConfig,
    query_index: usize,
    top_fraction: f64,
) -> Result<SimilarityExport> {
    let tape = Tape::new();
    let fv = tape.constant(f.clone());
    let vars = params.on_tape(&tape, false);
    let out = attention_forward(fv, &vars, config)?;
    SimilarityRecord::from_output(&out, query_index)?.export(top_fraction)
}

/// Plain-tensor evaluation of one attention block.
pub fn evaluate<T: Element>(
    f: &Tensor<T>,
    params: &AttentionParams<T>,
    config: &AttentionConfig,
    selection: SelectionOverride,
) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let fv = tape.constant(f.clone());
    let vars = params.on_tape(&tape, false);
    let out = match config.variant {
        AttentionVariant::Ac => ac_attention_forward(fv, &vars, config, selection)?,
        _ => attention_forward(fv, &vars, config)?,
    };
    Ok((*out.output.value()).clone())
}
