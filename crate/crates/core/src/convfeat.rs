//! Temporal-domain feature branch and dual-domain fusion.
//!
//! Each stacked-convolution block runs `Conv1D → GELU → LayerNorm` per layer
//! over the 256 samples of a patch, mean-pools its output to a fixed length
//! and flattens. Stacks are concatenated and projected to the temporal
//! embedding; fusion z-normalizes the temporal and spectral branches, maps
//! each with its own linear layer and concatenates them.
//!
//! Activations are laid out as `[patches · length, width]` matrices so that a
//! convolution becomes an `im2col` gather followed by one matrix product.

use ndarray::{s, Array4};
use serde::{Deserialize, Serialize};

use crate::attention::Mat;
use crate::autograd::{Tape, Var};
use crate::eegdata::PATCH_LEN;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Bound, Init, ParamId, ParamStore, INIT_STD};
use crate::spectral::num_bins;

pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub kernel: usize,
    pub stride: usize,
    pub in_width: usize,
    pub out_width: usize,
}

impl ConvLayerSpec {
    pub fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }

    /// Output length for an input of `lin` samples.
    pub fn out_len(&self, lin: usize) -> Result<usize> {
        if lin < self.kernel {
            return Err(Error::Config(format!("input length {lin} shorter than kernel {}", self.kernel)));
        }
        Ok((lin + 2 * self.padding() - self.kernel) / self.stride + 1)
    }
}

/// One stacked-convolution block plus its pooled length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStackSpec {
    pub layers: Vec<ConvLayerSpec>,
    pub pool_len: usize,
}

impl ConvStackSpec {
    /// `layers` repetitions of the same kernel and stride; the first layer
    /// reads one input channel.
    pub fn uniform(kernel: usize, stride: usize, layers: usize, width: usize, pool_len: usize) -> Self {
        ConvStackSpec {
            layers: (0..layers)
                .map(|i| ConvLayerSpec {
                    kernel,
                    stride,
                    in_width: if i == 0 { 1 } else { width },
                    out_width: width,
                })
                .collect(),
            pool_len,
        }
    }

    pub fn validate(&self, input_len: usize) -> Result<()> {
        if self.pool_len == 0 {
            return Err(Error::Config("pool length must be positive".into()));
        }
        let mut width = 1;
        for (i, l) in self.layers.iter().enumerate() {
            if l.kernel == 0 || l.kernel % 2 == 0 {
                return Err(Error::Config(format!("layer {i}: kernel {} must be odd", l.kernel)));
            }
            if l.stride == 0 || l.out_width == 0 {
                return Err(Error::Config(format!("layer {i}: stride and width must be positive")));
            }
            if l.in_width != width {
                return Err(Error::Config(format!("layer {i}: input width {} != {width}", l.in_width)));
            }
            width = l.out_width;
        }
        let len = self.output_len(input_len)?;
        if len == 0 {
            return Err(Error::Config("stack output length is zero".into()));
        }
        Ok(())
    }

    /// Temporal length after the last layer.
    pub fn output_len(&self, input_len: usize) -> Result<usize> {
        self.layers.iter().try_fold(input_len, |len, l| l.out_len(len))
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().map_or(1, |l| l.out_width)
    }

    /// Flattened width after pooling (`D_conv`).
    pub fn output_dim(&self) -> usize {
        self.pool_len * self.out_width()
    }
}

/// `R_l = R_{l-1} + (K_l - 1) · Π_{i<l} s_i`, with `R_0 = 1`.
pub fn receptive_field(spec: &ConvStackSpec) -> usize {
    let mut r = 1;
    let mut jump = 1;
    for l in &spec.layers {
        r += (l.kernel - 1) * jump;
        jump *= l.stride;
    }
    r
}

/// Geometry of one `im2col` gather.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub patches: usize,
    pub lin: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub lout: usize,
}

impl ConvGeometry {
    fn source(&self, o: usize, k: usize) -> Option<usize> {
        let pos = (o * self.stride + k).checked_sub(self.pad)?;
        (pos < self.lin).then_some(pos)
    }
}

/// `[patches·lin, width]` → `[patches·lout, kernel·width]`, zero padded.
pub fn im2col_forward(x: &Mat, g: &ConvGeometry) -> Mat {
    let cols = g.kernel * g.width;
    let mut out = Mat::zeros((g.patches * g.lout, cols));
    let xs = x.as_slice().expect("standard layout");
    let os = out.as_slice_mut().expect("standard layout");
    for n in 0..g.patches {
        for o in 0..g.lout {
            let row = (n * g.lout + o) * cols;
            for k in 0..g.kernel {
                if let Some(pos) = g.source(o, k) {
                    let src = (n * g.lin + pos) * g.width;
                    os[row + k * g.width..row + (k + 1) * g.width].copy_from_slice(&xs[src..src + g.width]);
                }
            }
        }
    }
    out
}

pub fn im2col_backward(grad: &Mat, g: &ConvGeometry) -> Mat {
    let cols = g.kernel * g.width;
    let mut gx = Mat::zeros((g.patches * g.lin, g.width));
    let gs = grad.as_slice().expect("standard layout");
    let xs = gx.as_slice_mut().expect("standard layout");
    for n in 0..g.patches {
        for o in 0..g.lout {
            let row = (n * g.lout + o) * cols;
            for k in 0..g.kernel {
                if let Some(pos) = g.source(o, k) {
                    let dst = (n * g.lin + pos) * g.width;
                    for w in 0..g.width {
                        xs[dst + w] += gs[row + k * g.width + w];
                    }
                }
            }
        }
    }
    gx
}

fn pool_bounds(j: usize, lin: usize, lout: usize) -> (usize, usize) {
    let start = j * lin / lout;
    let end = ((j + 1) * lin).div_ceil(lout);
    (start, end)
}

/// Adaptive mean pooling of each patch's `lin` rows down to `lout` rows.
pub fn adaptive_pool_forward(x: &Mat, patches: usize, lin: usize, lout: usize) -> Mat {
    let w = x.ncols();
    let mut out = Mat::zeros((patches * lout, w));
    for n in 0..patches {
        for j in 0..lout {
            let (a, b) = pool_bounds(j, lin, lout);
            let inv = 1.0 / (b - a) as f64;
            let mut dst = out.row_mut(n * lout + j);
            for r in a..b {
                dst.scaled_add(inv, &x.row(n * lin + r));
            }
        }
    }
    out
}

pub fn adaptive_pool_backward(grad: &Mat, patches: usize, lin: usize, lout: usize) -> Mat {
    let w = grad.ncols();
    let mut gx = Mat::zeros((patches * lin, w));
    for n in 0..patches {
        for j in 0..lout {
            let (a, b) = pool_bounds(j, lin, lout);
            let inv = 1.0 / (b - a) as f64;
            for r in a..b {
                gx.row_mut(n * lin + r).scaled_add(inv, &grad.row(n * lout + j));
            }
        }
    }
    gx
}

/// Dimensions of the feature extractor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub stacks: Vec<ConvStackSpec>,
    /// Width of the multi-scale temporal embedding.
    pub temporal_embed: usize,
    /// Temporal share of the fused model dimension.
    pub temporal_out: usize,
    /// Spectral share of the fused model dimension.
    pub spectral_out: usize,
}

impl FeatureConfig {
    /// Two stacks: 3 × (K=7, s=2) and 2 × (K=15, s=4), eight channels each,
    /// pooled to length 8 (`D_conv = 64`).
    pub fn default_stacks() -> Vec<ConvStackSpec> {
        vec![ConvStackSpec::uniform(7, 2, 3, 8, 8), ConvStackSpec::uniform(15, 4, 2, 8, 8)]
    }

    pub fn model_dim(&self) -> usize {
        self.temporal_out + self.spectral_out
    }

    pub fn validate(&self) -> Result<()> {
        if self.stacks.is_empty() {
            return Err(Error::Config("need at least one convolution stack".into()));
        }
        for s in &self.stacks {
            s.validate(PATCH_LEN)?;
        }
        if self.temporal_embed == 0 || self.temporal_out == 0 || self.spectral_out == 0 {
            return Err(Error::Config("feature widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ConvLayerParams {
    spec: ConvLayerSpec,
    weight: ParamId,
    bias: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
}

/// Parameters of the temporal/spectral feature extractor.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    config: FeatureConfig,
    stacks: Vec<Vec<ConvLayerParams>>,
    embed: Linear,
    embed_ln_gain: ParamId,
    embed_ln_bias: ParamId,
    fuse_temporal: Linear,
    fuse_spectral: Linear,
}

impl FeatureExtractor {
    pub fn new(config: FeatureConfig, store: &mut ParamStore, prefix: &str) -> Result<Self> {
        config.validate()?;
        let stacks = config
            .stacks
            .iter()
            .enumerate()
            .map(|(si, stack)| {
                stack
                    .layers
                    .iter()
                    .enumerate()
                    .map(|(li, &spec)| {
                        let p = format!("{prefix}.stack{si}.layer{li}");
                        ConvLayerParams {
                            spec,
                            weight: store.add(
                                format!("{p}.weight"),
                                (spec.kernel * spec.in_width, spec.out_width),
                                Init::TruncNormal(INIT_STD),
                            ),
                            bias: store.add(format!("{p}.bias"), (1, spec.out_width), Init::Zeros),
                            ln_gain: store.add(format!("{p}.ln.gain"), (1, spec.out_width), Init::Ones),
                            ln_bias: store.add(format!("{p}.ln.bias"), (1, spec.out_width), Init::Zeros),
                        }
                    })
                    .collect()
            })
            .collect();
        let concat: usize = config.stacks.iter().map(|s| s.output_dim()).sum();
        let embed = Linear::new(store, &format!("{prefix}.embed"), concat, config.temporal_embed, true);
        let embed_ln_gain = store.add(format!("{prefix}.embed.ln.gain"), (1, config.temporal_embed), Init::Ones);
        let embed_ln_bias = store.add(format!("{prefix}.embed.ln.bias"), (1, config.temporal_embed), Init::Zeros);
        let fuse_temporal = Linear::new(store, &format!("{prefix}.fuse.temporal"), config.temporal_embed, config.temporal_out, true);
        let fuse_spectral = Linear::new(store, &format!("{prefix}.fuse.spectral"), num_bins(PATCH_LEN), config.spectral_out, true);
        Ok(FeatureExtractor {
            config,
            stacks,
            embed,
            embed_ln_gain,
            embed_ln_bias,
            fuse_temporal,
            fuse_spectral,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    /// One `Conv1D → GELU → LayerNorm` layer on `[patches·lin, in_width]`.
    fn conv_layer(&self, tape: &mut Tape, p: &Bound, layer: &ConvLayerParams, x: Var, patches: usize, lin: usize) -> Result<(Var, usize)> {
        let spec = layer.spec;
        let lout = spec.out_len(lin)?;
        let geom = ConvGeometry {
            patches,
            lin,
            width: spec.in_width,
            kernel: spec.kernel,
            stride: spec.stride,
            pad: spec.padding(),
            lout,
        };
        let cols = tape.im2col(x, geom);
        let y = tape.matmul(cols, p[layer.weight]);
        let y = tape.add_row(y, p[layer.bias]);
        let y = tape.gelu(y);
        let y = tape.layernorm(y, LAYERNORM_EPS);
        let y = tape.mul_row(y, p[layer.ln_gain]);
        Ok((tape.add_row(y, p[layer.ln_bias]), lout))
    }

    /// Output of stack `si` for `[patches, 256]` input: `[patches, D_conv]`.
    pub fn stack_forward(&self, tape: &mut Tape, p: &Bound, si: usize, patches_rows: Var) -> Result<Var> {
        let n = tape.value(patches_rows).nrows();
        let mut len = tape.value(patches_rows).ncols();
        let mut h = tape.reshape(patches_rows, n * len, 1);
        for layer in &self.stacks[si] {
            let (y, lout) = self.conv_layer(tape, p, layer, h, n, len)?;
            h = y;
            len = lout;
        }
        let spec = &self.config.stacks[si];
        let pooled = tape.adaptive_pool(h, n, len, spec.pool_len);
        Ok(tape.reshape(pooled, n, spec.output_dim()))
    }

    /// Multi-scale temporal embedding `[patches, temporal_embed]`.
    pub fn multiscale_embed(&self, tape: &mut Tape, p: &Bound, patches_rows: Var) -> Result<Var> {
        let outs = (0..self.stacks.len())
            .map(|si| self.stack_forward(tape, p, si, patches_rows))
            .collect::<Result<Vec<_>>>()?;
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
        let y = self.embed.apply(tape, p, cat);
        let y = tape.gelu(y);
        let y = tape.layernorm(y, LAYERNORM_EPS);
        let y = tape.mul_row(y, p[self.embed_ln_gain]);
        Ok(tape.add_row(y, p[self.embed_ln_bias]))
    }

    /// Fused features `[patches, D]`: temporal part first, spectral second.
    pub fn fuse(&self, tape: &mut Tape, p: &Bound, x_t: Var, x_s: Var) -> Var {
        let zt = tape.layernorm(x_t, LAYERNORM_EPS);
        let zs = tape.layernorm(x_s, LAYERNORM_EPS);
        let t = self.fuse_temporal.apply(tape, p, zt);
        let f = self.fuse_spectral.apply(tape, p, zs);
        tape.concat_cols(&[t, f])
    }

    /// Full extractor: raw patch rows and their log-PSD rows → fused rows.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, patches_rows: Var, psd_rows: Var) -> Result<Var> {
        let x_t = self.multiscale_embed(tape, p, patches_rows)?;
        Ok(self.fuse(tape, p, x_t, psd_rows))
    }
}

/// Log-PSD of every patch: `[B, T, C, 256]` → `[B, T, C, 129]`.
pub fn spectral_features(patches: &Array4<f64>) -> Result<Array4<f64>> {
    let (b, t, c, p) = patches.dim();
    let per = if p == PATCH_LEN {
        None
    } else {
        Some(crate::spectral::Periodogram::new(p)?)
    };
    let per = per.as_ref().unwrap_or_else(|| crate::spectral::Periodogram::standard());
    let mut out = Array4::zeros((b, t, c, num_bins(p)));
    for bi in 0..b {
        for ti in 0..t {
            for ci in 0..c {
                let patch = patches.slice(s![bi, ti, ci, ..]).to_vec();
                let spec = per.psd_log(&patch)?;
                out.slice_mut(s![bi, ti, ci, ..]).assign(&ndarray::Array1::from(spec.bins));
            }
        }
    }
    Ok(out)
}

/// Reconstruction reference `raw ⊕ log-PSD` along the last axis.
pub fn recon_reference(x_p: &Array4<f64>, x_s: &Array4<f64>) -> Result<Array4<f64>> {
    let (b, t, c, p) = x_p.dim();
    let (b2, t2, c2, f) = x_s.dim();
    if (b, t, c) != (b2, t2, c2) {
        return Err(Error::Shape(format!("patches {:?} vs spectra {:?}", x_p.dim(), x_s.dim())));
    }
    let mut out = Array4::zeros((b, t, c, p + f));
    out.slice_mut(s![.., .., .., ..p]).assign(x_p);
    out.slice_mut(s![.., .., .., p..]).assign(x_s);
    Ok(out)
}

/// Flattens `[B, T, C, W]` into `[B·T·C, W]` rows.
pub fn to_rows(x: &Array4<f64>) -> Mat {
    let (b, t, c, w) = x.dim();
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((b * t * c, w))
        .expect("contiguous")
}
