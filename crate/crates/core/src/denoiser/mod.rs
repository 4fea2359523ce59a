//! Conditional UNet noise predictor.
//!
//! The conditioning stack of `N` (imperviousness, likelihood) pairs passes
//! through one shared 1x1 convolution per pair; the `N` fused channels feed
//! a small SPADE branch at every group-normalization site, which regresses
//! per-pixel `(gamma, beta)` used as `norm(h) * (1 + gamma) + beta`.

mod tape;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{normalize_percent, NoisePredictor};
use crate::raster::{Grid, GridKind};
use crate::{Error, Result};
use tape::{ConvRef, Shape, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub gn_groups: usize,
    pub embed_dim: usize,
    pub n_cond: usize,
    pub input_side: usize,
    /// Width of every SPADE trunk.
    pub spade_hidden: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { depth: 3, base_channels: 8, gn_groups: 4, embed_dim: 32, n_cond: 3, input_side: 32, spade_hidden: 8 }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.depth == 0 || self.depth > 6 {
            return bad(format!("depth {} outside 1..=6", self.depth));
        }
        if self.base_channels == 0 || self.gn_groups == 0 || self.base_channels % self.gn_groups != 0 {
            return bad(format!(
                "base_channels {} must be a positive multiple of gn_groups {}",
                self.base_channels, self.gn_groups
            ));
        }
        if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return bad(format!("embed_dim {} must be even and at least 2", self.embed_dim));
        }
        if self.n_cond == 0 || self.spade_hidden == 0 {
            return bad("n_cond and spade_hidden must be positive".into());
        }
        let f = 1usize << (self.depth - 1);
        if self.input_side == 0 || self.input_side % f != 0 {
            return bad(format!("input_side {} must be a multiple of {f}", self.input_side));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// A named parameter tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub offset: usize,
}

impl ParamTensor {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct SiteRefs {
    trunk: ConvRef,
    gamma: ConvRef,
    beta: ConvRef,
}

#[derive(Debug, Clone)]
struct BlockRefs {
    site1: SiteRefs,
    conv1: ConvRef,
    time: ConvRef,
    site2: SiteRefs,
    conv2: ConvRef,
    skip: Option<ConvRef>,
}

#[derive(Debug, Clone)]
struct Layout {
    fusion: ConvRef,
    time: ConvRef,
    input: ConvRef,
    down: Vec<BlockRefs>,
    mid: BlockRefs,
    up: Vec<BlockRefs>,
    output: ConvRef,
}

#[derive(Clone, Copy, PartialEq)]
enum Init {
    Uniform,
    Zero,
}

struct Builder {
    tensors: Vec<ParamTensor>,
    params: Vec<f64>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn tensor(&mut self, name: String, dims: Vec<usize>, bound: f64) -> usize {
        let offset = self.params.len();
        let n: usize = dims.iter().product();
        for _ in 0..n {
            let v = if bound > 0.0 { self.rng.random_range(-bound..bound) } else { 0.0 };
            self.params.push(v);
        }
        self.tensors.push(ParamTensor { name, dims, offset });
        offset
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, init: Init) -> ConvRef {
        let bound = match init {
            Init::Uniform => 1.0 / libm::sqrt((cin * k * k) as f64),
            Init::Zero => 0.0,
        };
        let w = self.tensor(format!("{name}.weight"), vec![cout, cin, k, k], bound);
        let b = self.tensor(format!("{name}.bias"), vec![cout], 0.0);
        ConvRef { w, b, cout, k, stride }
    }

    fn site(&mut self, name: &str, cfg: &DenoiserConfig, channels: usize, stride: usize) -> SiteRefs {
        let hidden = cfg.spade_hidden;
        SiteRefs {
            trunk: self.conv(&format!("{name}.trunk"), cfg.n_cond, hidden, 3, 1, Init::Uniform),
            gamma: self.conv(&format!("{name}.gamma"), hidden, channels, 3, stride, Init::Zero),
            beta: self.conv(&format!("{name}.beta"), hidden, channels, 3, stride, Init::Zero),
        }
    }

    fn block(&mut self, name: &str, cfg: &DenoiserConfig, cin: usize, cout: usize, level: usize) -> BlockRefs {
        let stride = 1 << level;
        BlockRefs {
            site1: self.site(&format!("{name}.norm1"), cfg, cin, stride),
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, 1, Init::Uniform),
            time: self.conv(&format!("{name}.time"), cfg.embed_dim, cout, 1, 1, Init::Uniform),
            site2: self.site(&format!("{name}.norm2"), cfg, cout, stride),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, 1, Init::Uniform),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, 1, Init::Uniform)),
        }
    }
}

/// Conditioning input: `N` aligned pairs of normalized imperviousness
/// (`[-1, 1]`) and likelihood (`[0, 1]`), oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningStack {
    side: usize,
    years: Vec<u16>,
    imperv: Vec<Vec<f64>>,
    likelihood: Vec<Vec<f64>>,
}

impl ConditioningStack {
    pub fn new(side: usize, years: Vec<u16>, imperv: Vec<Vec<f64>>, likelihood: Vec<Vec<f64>>) -> Result<Self> {
        if imperv.is_empty() || imperv.len() != likelihood.len() {
            return Err(Error::shape(format!(
                "{} imperviousness maps vs {} likelihood maps",
                imperv.len(),
                likelihood.len()
            )));
        }
        if !years.is_empty() && years.len() != imperv.len() {
            return Err(Error::shape(format!("{} years for {} pairs", years.len(), imperv.len())));
        }
        for m in imperv.iter().chain(&likelihood) {
            if m.len() != side * side {
                return Err(Error::shape(format!("map of {} values, expected {side}x{side}", m.len())));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("conditioning stack".into()));
            }
        }
        Ok(Self { side, years, imperv, likelihood })
    }

    /// Builds a stack from percent imperviousness and likelihood grids.
    /// Nodata pixels become 0 % imperviousness and zero likelihood.
    pub fn from_grids(imperv: &[Grid], likelihood: &[Grid], years: Vec<u16>) -> Result<Self> {
        let Some(first) = imperv.first() else {
            return Err(Error::Insufficient("empty conditioning stack".into()));
        };
        if first.width() != first.height() {
            return Err(Error::shape(format!("patches must be square, got {}x{}", first.width(), first.height())));
        }
        let mut iv = Vec::with_capacity(imperv.len());
        let mut lv = Vec::with_capacity(likelihood.len());
        for (i, l) in imperv.iter().zip(likelihood) {
            i.expect_kind(GridKind::Continuous)?;
            l.expect_kind(GridKind::Continuous)?;
            first.expect_same_shape(i)?;
            first.expect_same_shape(l)?;
            iv.push((0..i.len()).map(|k| normalize_percent(if i.is_valid(k) { i.values()[k] } else { 0.0 })).collect());
            lv.push((0..l.len()).map(|k| if l.is_valid(k) { l.values()[k] } else { 0.0 }).collect());
        }
        Self::new(first.width(), years, iv, lv)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.imperv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.imperv.is_empty()
    }

    pub fn years(&self) -> &[u16] {
        &self.years
    }

    pub fn imperv(&self, i: usize) -> &[f64] {
        &self.imperv[i]
    }

    pub fn likelihood(&self, i: usize) -> &[f64] {
        &self.likelihood[i]
    }

    /// Pair `i` as a 2-channel `[I, L]` map.
    fn pair(&self, i: usize) -> Vec<f64> {
        let mut v = self.imperv[i].clone();
        v.extend_from_slice(&self.likelihood[i]);
        v
    }
}

/// Plain `[channels, height, width]` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "{} values for a {channels}x{height}x{width} map",
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    fn shape(&self) -> Shape {
        Shape::new(self.channels, self.height, self.width)
    }
}

/// Shared 1x1 fusion: channel `t` is `w[0] * I_t + w[1] * L_t + b`.
pub fn fuse_conditions(stack: &ConditioningStack, w: [f64; 2], b: f64) -> FeatureMap {
    let params = [w[0], w[1], b];
    let mut tape = Tape::new(&params);
    let out = fuse_on_tape(&mut tape, stack, ConvRef { w: 0, b: 2, cout: 1, k: 1, stride: 1 });
    let s = tape.shape(out);
    FeatureMap { channels: s.c, height: s.h, width: s.w, data: tape.value(out).to_vec() }
}

fn fuse_on_tape(tape: &mut Tape<'_>, stack: &ConditioningStack, fusion: ConvRef) -> usize {
    let side = stack.side;
    let outs: Vec<usize> = (0..stack.len())
        .map(|i| {
            let pair = tape.input(Shape::new(2, side, side), stack.pair(i));
            tape.conv(pair, fusion)
        })
        .collect();
    tape.concat(&outs)
}

/// Parameters of one SPADE site: 3x3 trunk `fused -> hidden` followed by
/// ReLU, then 3x3 gamma and beta convolutions `hidden -> channels`.
/// Weights are `[out, in, 3, 3]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SpadeParams {
    pub hidden: usize,
    pub channels: usize,
    pub trunk_weight: Vec<f64>,
    pub trunk_bias: Vec<f64>,
    pub gamma_weight: Vec<f64>,
    pub gamma_bias: Vec<f64>,
    pub beta_weight: Vec<f64>,
    pub beta_bias: Vec<f64>,
}

impl SpadeParams {
    pub fn zeros(inputs: usize, hidden: usize, channels: usize) -> Self {
        Self {
            hidden,
            channels,
            trunk_weight: vec![0.0; hidden * inputs * 9],
            trunk_bias: vec![0.0; hidden],
            gamma_weight: vec![0.0; channels * hidden * 9],
            gamma_bias: vec![0.0; channels],
            beta_weight: vec![0.0; channels * hidden * 9],
            beta_bias: vec![0.0; channels],
        }
    }
}

/// `(gamma, beta)` maps for an activation of side `target_side`.
///
/// The maps are the full-resolution convolution outputs subsampled by
/// nearest neighbour (top-left of each block), evaluated directly with a
/// strided convolution.
pub fn spade_modulation(fused: &FeatureMap, site: &SpadeParams, target_side: usize) -> Result<(FeatureMap, FeatureMap)> {
    let inputs = fused.channels;
    if site.trunk_weight.len() != site.hidden * inputs * 9
        || site.trunk_bias.len() != site.hidden
        || site.gamma_weight.len() != site.channels * site.hidden * 9
        || site.beta_weight.len() != site.channels * site.hidden * 9
        || site.gamma_bias.len() != site.channels
        || site.beta_bias.len() != site.channels
    {
        return Err(Error::shape("SPADE parameter sizes do not match the fused input"));
    }
    if fused.height != fused.width || target_side == 0 || fused.height % target_side != 0 {
        return Err(Error::shape(format!("cannot resample side {} to {target_side}", fused.height)));
    }
    let stride = fused.height / target_side;
    let mut params = Vec::new();
    let mut put = |v: &[f64]| {
        let o = params.len();
        params.extend_from_slice(v);
        o
    };
    let tw = put(&site.trunk_weight);
    let tb = put(&site.trunk_bias);
    let gw = put(&site.gamma_weight);
    let gb = put(&site.gamma_bias);
    let bw = put(&site.beta_weight);
    let bb = put(&site.beta_bias);
    let refs = SiteRefs {
        trunk: ConvRef { w: tw, b: tb, cout: site.hidden, k: 3, stride: 1 },
        gamma: ConvRef { w: gw, b: gb, cout: site.channels, k: 3, stride },
        beta: ConvRef { w: bw, b: bb, cout: site.channels, k: 3, stride },
    };
    let mut tape = Tape::new(&params);
    let x = tape.input(fused.shape(), fused.data.clone());
    let (g, b) = site_on_tape(&mut tape, x, &refs);
    let map = |id: usize| {
        let s = tape.shape(id);
        FeatureMap { channels: s.c, height: s.h, width: s.w, data: tape.value(id).to_vec() }
    };
    Ok((map(g), map(b)))
}

fn site_on_tape(tape: &mut Tape<'_>, fused: usize, s: &SiteRefs) -> (usize, usize) {
    let trunk = tape.conv(fused, s.trunk);
    let trunk = tape.relu(trunk);
    (tape.conv(trunk, s.gamma), tape.conv(trunk, s.beta))
}

/// Group normalization followed by `h * (1 + gamma) + beta`.
pub fn cond_group_norm(h: &FeatureMap, gamma: &FeatureMap, beta: &FeatureMap, groups: usize) -> Result<FeatureMap> {
    if groups == 0 || h.channels % groups != 0 {
        return Err(Error::param(format!("{} channels not divisible into {groups} groups", h.channels)));
    }
    if gamma.shape() != h.shape() || beta.shape() != h.shape() {
        return Err(Error::shape("gamma/beta must match the activation"));
    }
    let params = [];
    let mut tape = Tape::new(&params);
    let x = tape.input(h.shape(), h.data.clone());
    let g = tape.input(gamma.shape(), gamma.data.clone());
    let b = tape.input(beta.shape(), beta.data.clone());
    let n = tape.group_norm(x, groups);
    let out = tape.modulate(n, g, b);
    Ok(FeatureMap { data: tape.value(out).to_vec(), ..h.clone() })
}

/// Sinusoidal embedding of step `t`: `[sin(t f_i), cos(t f_i)]` with
/// `f_i = 10000^(-i / (dim / 2))`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = libm::exp(-libm::log(10000.0) * i as f64 / half as f64);
        out[i] = libm::sin(t as f64 * f);
        out[half + i] = libm::cos(t as f64 * f);
    }
    out
}

/// One training example after noising: predict `eps` from `(x_t, t, cond)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedSample {
    pub x_t: Vec<f64>,
    pub t: usize,
    pub cond: ConditioningStack,
    pub eps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    config: DenoiserConfig,
    tensors: Vec<ParamTensor>,
    params: Vec<f64>,
    layout: Layout,
}

impl PartialEq for Layout {
    fn eq(&self, _: &Self) -> bool {
        // derived from the config
        true
    }
}

impl Denoiser {
    /// Builds the network with seeded uniform fan-in initialization; SPADE
    /// gamma/beta convolutions and the output convolution start at zero.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder { tensors: Vec::new(), params: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) };
        let cfg = &config;
        let fusion = b.conv("fusion", 2, 1, 1, 1, Init::Uniform);
        let time = b.conv("time_mlp", cfg.embed_dim, cfg.embed_dim, 1, 1, Init::Uniform);
        let input = b.conv("input", 1, cfg.channels(0), 3, 1, Init::Uniform);
        let mut down = Vec::new();
        for l in 0..cfg.depth {
            let cin = if l == 0 { cfg.channels(0) } else { cfg.channels(l - 1) };
            down.push(b.block(&format!("down{l}"), cfg, cin, cfg.channels(l), l));
        }
        let top = cfg.depth - 1;
        let mid = b.block("mid", cfg, cfg.channels(top), cfg.channels(top), top);
        let mut up = Vec::new();
        for l in (0..cfg.depth).rev() {
            let below = if l == top { cfg.channels(top) } else { cfg.channels(l + 1) };
            up.push(b.block(&format!("up{l}"), cfg, below + cfg.channels(l), cfg.channels(l), l));
        }
        let output = b.conv("output", cfg.channels(0), 1, 3, 1, Init::Zero);
        let layout = Layout { fusion, time, input, down, mid, up, output };
        Ok(Self { config, tensors: b.tensors, params: b.params, layout })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::shape(format!("{} parameters, expected {}", params.len(), self.params.len())));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// Copy of this network carrying `params` (e.g. the EMA weights).
    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.set_params(params)?;
        Ok(out)
    }

    /// Fusion weights `([w_I, w_L], b)`.
    pub fn fusion_params(&self) -> ([f64; 2], f64) {
        let f = self.layout.fusion;
        ([self.params[f.w], self.params[f.w + 1]], self.params[f.b])
    }

    pub fn fuse_conditions(&self, stack: &ConditioningStack) -> Result<FeatureMap> {
        self.check_stack(stack)?;
        let (w, b) = self.fusion_params();
        Ok(fuse_conditions(stack, w, b))
    }

    fn check_stack(&self, stack: &ConditioningStack) -> Result<()> {
        if stack.len() != self.config.n_cond {
            return Err(Error::shape(format!("{} conditioning pairs, model expects {}", stack.len(), self.config.n_cond)));
        }
        if stack.side != self.config.input_side {
            return Err(Error::shape(format!("stack side {}, model side {}", stack.side, self.config.input_side)));
        }
        Ok(())
    }

    fn check_inputs(&self, x_t: &[f64], t: usize, cond: Option<&ConditioningStack>) -> Result<()> {
        let side = self.config.input_side;
        if x_t.len() != side * side {
            return Err(Error::shape(format!("x_t has {} values, expected {side}x{side}", x_t.len())));
        }
        if t == 0 {
            return Err(Error::param("timestep must be at least 1"));
        }
        if let Some(c) = cond {
            self.check_stack(c)?;
        }
        Ok(())
    }

    fn block(&self, tape: &mut Tape<'_>, h: usize, b: &BlockRefs, fused: Option<usize>, emb: usize) -> usize {
        let groups = self.config.gn_groups;
        let norm = |tape: &mut Tape<'_>, x: usize, site: &SiteRefs| {
            let n = tape.group_norm(x, groups);
            match fused {
                Some(f) => {
                    let (g, bt) = site_on_tape(tape, f, site);
                    tape.modulate(n, g, bt)
                }
                None => n,
            }
        };
        let a = norm(tape, h, &b.site1);
        let a = tape.silu(a);
        let a = tape.conv(a, b.conv1);
        let tp = tape.conv(emb, b.time);
        let a = tape.add_channel(a, tp);
        let a = norm(tape, a, &b.site2);
        let a = tape.silu(a);
        let a = tape.conv(a, b.conv2);
        let skip = match b.skip {
            Some(s) => tape.conv(h, s),
            None => h,
        };
        tape.add(a, skip)
    }

    fn graph(&self, tape: &mut Tape<'_>, x_t: &[f64], t: usize, cond: Option<&ConditioningStack>) -> usize {
        let cfg = &self.config;
        let side = cfg.input_side;
        let fused = cond.map(|c| fuse_on_tape(tape, c, self.layout.fusion));
        let temb = tape.input(Shape::new(cfg.embed_dim, 1, 1), timestep_embedding(t, cfg.embed_dim));
        let emb = tape.conv(temb, self.layout.time);
        let emb = tape.silu(emb);

        let x = tape.input(Shape::new(1, side, side), x_t.to_vec());
        let mut h = tape.conv(x, self.layout.input);
        let mut skips = Vec::with_capacity(cfg.depth);
        for (l, b) in self.layout.down.iter().enumerate() {
            h = self.block(tape, h, b, fused, emb);
            skips.push(h);
            if l + 1 < cfg.depth {
                h = tape.avg_pool2(h);
            }
        }
        h = self.block(tape, h, &self.layout.mid, fused, emb);
        for (b, l) in self.layout.up.iter().zip((0..cfg.depth).rev()) {
            h = tape.concat(&[h, skips[l]]);
            h = self.block(tape, h, b, fused, emb);
            if l > 0 {
                h = tape.upsample2(h);
            }
        }
        let h = tape.group_norm(h, cfg.gn_groups);
        let h = tape.silu(h);
        tape.conv(h, self.layout.output)
    }

    /// Predicted noise for `x_t` (normalized, row-major `side * side`).
    pub fn forward(&self, x_t: &[f64], t: usize, cond: &ConditioningStack) -> Result<Vec<f64>> {
        self.check_inputs(x_t, t, Some(cond))?;
        let mut tape = Tape::new(&self.params);
        let out = self.graph(&mut tape, x_t, t, Some(cond));
        Ok(tape.value(out).to_vec())
    }

    /// The same trunk with every normalization site left unmodulated.
    pub fn forward_unconditioned(&self, x_t: &[f64], t: usize) -> Result<Vec<f64>> {
        self.check_inputs(x_t, t, None)?;
        let mut tape = Tape::new(&self.params);
        let out = self.graph(&mut tape, x_t, t, None);
        Ok(tape.value(out).to_vec())
    }

    /// Mean squared error of the predicted noise and its gradient with
    /// respect to every parameter, scaled by `loss_scale`.
    pub fn loss_and_gradient(&self, sample: &NoisedSample, loss_scale: f64) -> Result<(f64, Vec<f64>)> {
        self.check_inputs(&sample.x_t, sample.t, Some(&sample.cond))?;
        if sample.eps.len() != sample.x_t.len() {
            return Err(Error::shape("eps and x_t differ in size"));
        }
        let mut tape = Tape::new(&self.params);
        let out = self.graph(&mut tape, &sample.x_t, sample.t, Some(&sample.cond));
        let pred = tape.value(out);
        let n = pred.len() as f64;
        let loss = crate::diffusion::denoise_loss(pred, &sample.eps)?;
        let seed = pred.iter().zip(&sample.eps).map(|(p, e)| loss_scale * 2.0 * (p - e) / n).collect();
        let mut grad = vec![0.0; self.params.len()];
        tape.backward(out, seed, &mut grad);
        self.check_finite(&grad)?;
        Ok((loss_scale * loss, grad))
    }

    /// Batch-mean loss and gradient, summed in batch order.
    pub fn gradients(&self, batch: &[NoisedSample]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Insufficient("empty batch".into()));
        }
        let per: Result<Vec<_>> = batch.iter().map(|s| self.loss_and_gradient(s, 1.0)).collect();
        Ok(reduce_gradients(&per?, self.params.len()))
    }

    /// Names the first tensor holding a non-finite gradient entry.
    pub fn check_finite(&self, grad: &[f64]) -> Result<()> {
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            let name = self
                .tensors
                .iter()
                .find(|t| t.range().contains(&i))
                .map_or_else(|| String::from("?"), |t| t.name.clone());
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        Ok(())
    }
}

/// Averages per-sample `(loss, gradient)` pairs in slice order.
pub fn reduce_gradients(per: &[(f64, Vec<f64>)], len: usize) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; len];
    let mut loss = 0.0;
    for (l, g) in per {
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    let n = per.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

impl NoisePredictor for Denoiser {
    type Cond = ConditioningStack;

    fn patch_len(&self, _cond: &ConditioningStack) -> usize {
        self.config.input_side * self.config.input_side
    }

    fn predict_noise(&self, x_t: &[f64], t: usize, cond: &ConditioningStack) -> Result<Vec<f64>> {
        self.forward(x_t, t, cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(side: usize, n: usize, seed: u64) -> ConditioningStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = || (0..side * side).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let imperv = (0..n).map(|_| m()).collect();
        let lik = (0..n).map(|_| m().iter().map(|v| v.abs()).collect()).collect();
        ConditioningStack::new(side, vec![], imperv, lik).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(DenoiserConfig::default().validate().is_ok());
        let bad = DenoiserConfig { gn_groups: 3, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = DenoiserConfig { input_side: 30, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn fusion_projection() {
        let s = stack(4, 3, 1);
        let f = fuse_conditions(&s, [1.0, 0.0], 0.0);
        assert_eq!(f.channels, 3);
        for i in 0..3 {
            assert_eq!(f.channel(i), s.imperv(i));
        }
        let f = fuse_conditions(&s, [0.0, 0.0], 2.5);
        assert!(f.data.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn zero_site_gives_zero_modulation() {
        let s = stack(8, 3, 2);
        let fused = fuse_conditions(&s, [0.3, -0.7], 0.1);
        let site = SpadeParams::zeros(3, 4, 6);
        let (g, b) = spade_modulation(&fused, &site, 4).unwrap();
        assert_eq!((g.channels, g.height, g.width), (6, 4, 4));
        assert!(g.data.iter().chain(&b.data).all(|&v| v == 0.0));
        let mut site = site;
        site.gamma_bias = vec![0.5; 6];
        let (g, _) = spade_modulation(&fused, &site, 8).unwrap();
        assert!(g.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn constant_channels_normalize_to_beta() {
        let h = FeatureMap::new(2, 2, 2, vec![3.0; 8]).unwrap();
        let g = FeatureMap::new(2, 2, 2, vec![0.7; 8]).unwrap();
        let b = FeatureMap::new(2, 2, 2, (0..8).map(f64::from).collect()).unwrap();
        let out = cond_group_norm(&h, &g, &b, 2).unwrap();
        assert_eq!(out.data, b.data);
        assert!(cond_group_norm(&h, &g, &b, 3).is_err());
    }

    #[test]
    fn output_shape_and_zero_init() {
        for side in [16, 32, 64] {
            let cfg = DenoiserConfig { input_side: side, base_channels: 4, gn_groups: 2, ..Default::default() };
            let m = Denoiser::new(cfg, 0).unwrap();
            let x = vec![0.1; side * side];
            let out = m.forward(&x, 10, &stack(side, 3, 3)).unwrap();
            assert_eq!(out.len(), side * side);
            // zero-initialized output convolution
            assert!(out.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_parameters_zero_output() {
        let cfg = DenoiserConfig { input_side: 8, depth: 2, base_channels: 2, gn_groups: 1, embed_dim: 4, n_cond: 2, spade_hidden: 2 };
        let mut m = Denoiser::new(cfg, 0).unwrap();
        m.params_mut().fill(0.0);
        let out = m.forward(&[0.5; 64], 3, &stack(8, 2, 4)).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_wrong_stack() {
        let m = Denoiser::new(DenoiserConfig { input_side: 8, ..Default::default() }, 0).unwrap();
        assert!(m.forward(&[0.0; 64], 1, &stack(8, 2, 0)).is_err());
        assert!(m.forward(&[0.0; 64], 0, &stack(8, 3, 0)).is_err());
        assert!(m.forward(&[0.0; 63], 1, &stack(8, 3, 0)).is_err());
    }

    #[test]
    fn embedding_at_zero() {
        let e = timestep_embedding(0, 4);
        assert_eq!(e, vec![0.0, 0.0, 1.0, 1.0]);
    }
}
