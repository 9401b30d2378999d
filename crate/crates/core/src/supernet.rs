//! The searchable network and everything that reads it.
//!
//! A stem convolution feeds a stack of depthwise-separable blocks
//! (1×1 expansion, depthwise, 1×1 projection), then global average pooling
//! and a linear head. Each block's depthwise layer either searches over a
//! [`CandidateSet`] through its architecture logits, or carries a fixed
//! per-filter choice (a derived architecture).
//!
//! Normalization is a per-channel affine map with no batch statistics, which
//! keeps every block linear in its depthwise kernel and the kernel-sum
//! identity exact.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{OpKind, Tape, Var};
use crate::conv::Padding;
use crate::cost::{self, CostBudget, CostModel, LayerCostSpec};
use crate::error::{Error, Result};
use crate::meta_kernel::{self, roi_of, CandidateSet, KernelShape, MetaKernel};
use crate::sampler::{self, NoiseStream, RelaxMode};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaSharing {
    /// One logit vector per depthwise filter.
    PerFilter,
    /// One logit vector shared by all filters of a layer.
    PerLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub out_channels: usize,
    pub stride: usize,
    #[serde(default = "one")]
    pub expansion: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub stem_channels: usize,
    pub blocks: Vec<BlockConfig>,
    pub candidates: Vec<KernelShape>,
    pub include_none: bool,
    pub alpha_sharing: AlphaSharing,
    /// Identity shortcut on blocks with stride 1 and equal widths.
    pub residual: bool,
    /// Offer None only in blocks with an identity shortcut. Elsewhere its
    /// logit starts at `BLOCKED_LOGIT`, so it never gets sampled or derived.
    pub none_needs_shortcut: bool,
}

/// Initial logit of an option that must never be chosen. Its softmax weight
/// underflows to exactly 0, so its gradient is exactly 0 as well.
pub const BLOCKED_LOGIT: f64 = -1e4;

impl Default for NetConfig {
    fn default() -> Self {
        let block = |out_channels, stride| BlockConfig {
            out_channels,
            stride,
            expansion: 1,
        };
        NetConfig {
            in_channels: 1,
            height: 24,
            width: 24,
            num_classes: 4,
            stem_channels: 8,
            blocks: vec![block(8, 1), block(16, 2), block(16, 1), block(32, 2)],
            candidates: vec![KernelShape::square(3), KernelShape::square(5), KernelShape::square(7)],
            include_none: true,
            alpha_sharing: AlphaSharing::PerFilter,
            residual: true,
            none_needs_shortcut: true,
        }
    }
}

impl NetConfig {
    pub fn candidate_set(&self) -> Result<CandidateSet> {
        CandidateSet::new(self.candidates.clone(), self.include_none)
    }

    pub fn validate(&self) -> Result<()> {
        self.candidate_set()?;
        if self.blocks.is_empty() {
            return Err(Error::invalid("network needs at least one searchable block"));
        }
        if self.in_channels == 0 || self.stem_channels == 0 || self.num_classes < 2 {
            return Err(Error::invalid("channel and class counts must be positive (>= 2 classes)"));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if !(b.stride == 1 || b.stride == 2) || b.out_channels == 0 || b.expansion == 0 {
                return Err(Error::invalid(format!("block {i}: invalid configuration {b:?}")));
            }
        }
        let meta = self.candidate_set()?.meta_shape();
        let (mut h, mut w) = (self.height, self.width);
        for b in &self.blocks {
            if meta.h() > h + meta.h() - 1 || h == 0 || w == 0 {
                return Err(Error::invalid("image too small for the block stack"));
            }
            h = (h - 1) / b.stride + 1;
            w = (w - 1) / b.stride + 1;
        }
        Ok(())
    }

    /// Whether block `l` adds its input back to its output.
    pub fn has_shortcut(&self, l: &BlockLayout) -> bool {
        self.residual && l.stride == 1 && l.in_channels == l.out_channels
    }

    /// Input/output widths, depthwise width and spatial sizes of every block.
    pub fn layout(&self) -> Vec<BlockLayout> {
        let (mut h, mut w) = (self.height, self.width);
        let mut cin = self.stem_channels;
        self.blocks
            .iter()
            .map(|b| {
                let out_h = (h - 1) / b.stride + 1;
                let out_w = (w - 1) / b.stride + 1;
                let l = BlockLayout {
                    in_channels: cin,
                    dw_channels: cin * b.expansion,
                    out_channels: b.out_channels,
                    stride: b.stride,
                    in_h: h,
                    in_w: w,
                    out_h,
                    out_w,
                };
                cin = b.out_channels;
                h = out_h;
                w = out_w;
                l
            })
            .collect()
    }

    /// Cost of the searchable layers per option, plus all fixed layers.
    pub fn cost_model(&self) -> Result<CostModel> {
        let set = self.candidate_set()?;
        let layout = self.layout();
        let hw = (self.height * self.width) as f64;
        let mut fixed = hw * (self.stem_channels * self.in_channels * 9) as f64;
        let mut layers = Vec::with_capacity(layout.len());
        for l in &layout {
            fixed += (l.in_h * l.in_w * l.in_channels * l.dw_channels) as f64;
            fixed += (l.out_h * l.out_w * l.dw_channels * l.out_channels) as f64;
            layers.push(LayerCostSpec {
                out_h: l.out_h,
                out_w: l.out_w,
                channels: l.dw_channels,
                stride: l.stride,
                areas: set.areas(),
            });
        }
        let last = layout.last().map_or(self.stem_channels, |l| l.out_channels);
        fixed += (last * self.num_classes) as f64;
        Ok(CostModel { layers, fixed })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub in_channels: usize,
    pub dw_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub scale: Tensor,
    pub shift: Tensor,
}

impl Affine {
    pub fn identity(c: usize) -> Self {
        Affine {
            scale: Tensor::ones(&[c]),
            shift: Tensor::zeros(&[c]),
        }
    }
}

/// Kernel selection state of one depthwise layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKernel {
    /// `[C or 1, options]` architecture logits.
    Search { alpha: Tensor },
    /// Option index per filter; the meta kernel is cropped to the largest choice.
    Fixed { choices: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchableLayer {
    pub stride: usize,
    pub residual: bool,
    pub expand: Tensor,
    pub expand_affine: Affine,
    pub meta: MetaKernel,
    pub dw_affine: Affine,
    pub project: Tensor,
    pub project_affine: Affine,
    pub kernel: LayerKernel,
}

impl SearchableLayer {
    pub fn channels(&self) -> usize {
        self.meta.channels()
    }

    pub fn alpha(&self) -> Option<&Tensor> {
        match &self.kernel {
            LayerKernel::Search { alpha } => Some(alpha),
            LayerKernel::Fixed { .. } => None,
        }
    }

    /// `[C, 1, h, w]` 0/1 mask of a fixed layer over its cropped meta kernel.
    fn fixed_mask(&self, set: &CandidateSet, choices: &[usize]) -> Result<Tensor> {
        let shape = self.meta.shape();
        let mut data = Vec::with_capacity(self.meta.weights.len());
        for &c in choices {
            let plane = match set.option(c) {
                None => vec![0.0; shape.area()],
                Some(k) => {
                    let roi = roi_of(k, shape)?;
                    (0..shape.h())
                        .flat_map(|y| (0..shape.w()).map(move |x| f64::from(u8::from(roi.contains(y, x)))))
                        .collect()
                }
            };
            data.extend(plane);
        }
        Tensor::new(self.meta.weights.shape(), data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperNet {
    pub config: NetConfig,
    pub stem: Tensor,
    pub stem_affine: Affine,
    pub layers: Vec<SearchableLayer>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

fn kaiming(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Smallest shape covering every chosen (non-None) option; 1×1 when all are None.
fn crop_shape(set: &CandidateSet, choices: &[usize]) -> KernelShape {
    let chosen: Vec<KernelShape> = choices.iter().filter_map(|&c| set.option(c)).collect();
    meta_kernel::build_meta_shape(&chosen).unwrap_or(KernelShape(1, 1))
}

impl SuperNet {
    /// Fresh searchable network. Weights come from `seed`; architecture
    /// logits come from an independent stream so that weight initialization
    /// matches a fixed network built from the same seed.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, None)
    }

    /// Fresh network with a fixed architecture (`choices[layer][filter]`).
    pub fn fixed(config: NetConfig, choices: &[Vec<usize>], seed: u64) -> Result<Self> {
        Self::build(config, seed, Some(choices))
    }

    fn build(config: NetConfig, seed: u64, fixed: Option<&[Vec<usize>]>) -> Result<Self> {
        config.validate()?;
        let set = config.candidate_set()?;
        let layout = config.layout();
        if let Some(choices) = fixed {
            check_choices(&config, &set, choices)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut alpha_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA1FA_0000_0000_0001);
        let (s, cin) = (config.stem_channels, config.in_channels);
        let stem = kaiming(&[s, cin, 3, 3], cin * 9, &mut rng);
        let mut layers = Vec::with_capacity(layout.len());
        for (i, l) in layout.iter().enumerate() {
            let expand = kaiming(&[l.dw_channels, l.in_channels, 1, 1], l.in_channels, &mut rng);
            let (meta_shape, kernel) = match fixed {
                None => {
                    let rows = match config.alpha_sharing {
                        AlphaSharing::PerFilter => l.dw_channels,
                        AlphaSharing::PerLayer => 1,
                    };
                    let mut alpha = Tensor::randn(&[rows, set.num_options()], 1e-3, &mut alpha_rng);
                    if set.include_none() && config.none_needs_shortcut && !config.has_shortcut(l) {
                        for row in alpha.data_mut().chunks_mut(set.num_options()) {
                            row[0] = BLOCKED_LOGIT;
                        }
                    }
                    (set.meta_shape(), LayerKernel::Search { alpha })
                }
                Some(choices) => (
                    crop_shape(&set, &choices[i]),
                    LayerKernel::Fixed {
                        choices: choices[i].clone(),
                    },
                ),
            };
            let meta = MetaKernel::init(l.dw_channels, meta_shape, &mut rng);
            let project = kaiming(&[l.out_channels, l.dw_channels, 1, 1], l.dw_channels, &mut rng);
            layers.push(SearchableLayer {
                stride: l.stride,
                residual: config.has_shortcut(l),
                expand,
                expand_affine: Affine::identity(l.dw_channels),
                meta,
                dw_affine: Affine::identity(l.dw_channels),
                project,
                project_affine: Affine::identity(l.out_channels),
                kernel,
            });
        }
        let last = layout.last().map_or(s, |l| l.out_channels);
        let head_w = Tensor::randn(&[config.num_classes, last], (1.0 / last as f64).sqrt(), &mut rng);
        let head_b = Tensor::zeros(&[config.num_classes]);
        Ok(SuperNet {
            config,
            stem,
            stem_affine: Affine::identity(s),
            layers,
            head_w,
            head_b,
        })
    }

    /// Copy of this network with fixed choices and the same weights; each meta
    /// kernel is cropped to the largest chosen option.
    pub fn with_fixed_choices(&self, choices: &[Vec<usize>]) -> Result<Self> {
        let set = self.config.candidate_set()?;
        check_choices(&self.config, &set, choices)?;
        let mut out = self.clone();
        for (layer, ch) in out.layers.iter_mut().zip(choices) {
            let shape = crop_shape(&set, ch);
            let weights = if shape == layer.meta.shape() {
                layer.meta.weights.clone()
            } else if roi_of(shape, layer.meta.shape()).is_ok() {
                layer.meta.slice(shape)?
            } else {
                Tensor::zeros(&[layer.channels(), 1, shape.h(), shape.w()])
            };
            layer.meta = MetaKernel { weights };
            layer.kernel = LayerKernel::Fixed { choices: ch.clone() };
        }
        Ok(out)
    }

    pub fn candidate_set(&self) -> CandidateSet {
        self.config.candidate_set().expect("validated at construction")
    }

    pub fn cost_model(&self) -> CostModel {
        self.config.cost_model().expect("validated at construction")
    }

    pub fn is_searching(&self) -> bool {
        self.layers.iter().any(|l| l.alpha().is_some())
    }

    /// Trainable weights in canonical order (architecture logits excluded).
    pub fn weights_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.stem, &mut self.stem_affine.scale, &mut self.stem_affine.shift];
        for l in &mut self.layers {
            v.extend([
                &mut l.expand,
                &mut l.expand_affine.scale,
                &mut l.expand_affine.shift,
                &mut l.meta.weights,
                &mut l.dw_affine.scale,
                &mut l.dw_affine.shift,
                &mut l.project,
                &mut l.project_affine.scale,
                &mut l.project_affine.shift,
            ]);
        }
        v.extend([&mut self.head_w, &mut self.head_b]);
        v
    }

    pub fn alphas(&self) -> Vec<&Tensor> {
        self.layers.iter().filter_map(|l| l.alpha()).collect()
    }

    pub fn alphas_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .filter_map(|l| match &mut l.kernel {
                LayerKernel::Search { alpha } => Some(alpha),
                LayerKernel::Fixed { .. } => None,
            })
            .collect()
    }

    pub fn num_weights(&self) -> usize {
        self.clone().weights_mut().iter().map(|t| t.len()).sum()
    }

    /// Puts every tensor on `tape`: weights as grad-enabled leaves, logits as
    /// grad-enabled leaves when `train_alpha`, constants otherwise.
    pub fn register(&self, tape: &Tape, train_alpha: bool) -> NetVars {
        let aff = |a: &Affine| (tape.param(a.scale.clone()), tape.param(a.shift.clone()));
        let (stem_scale, stem_shift) = aff(&self.stem_affine);
        let stem = tape.param(self.stem.clone());
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let expand = tape.param(l.expand.clone());
                let (e_scale, e_shift) = aff(&l.expand_affine);
                let meta = tape.param(l.meta.weights.clone());
                let (d_scale, d_shift) = aff(&l.dw_affine);
                let project = tape.param(l.project.clone());
                let (p_scale, p_shift) = aff(&l.project_affine);
                let alpha = l.alpha().map(|a| {
                    if train_alpha {
                        tape.param(a.clone())
                    } else {
                        tape.constant(a.clone())
                    }
                });
                LayerVars {
                    expand,
                    e_scale,
                    e_shift,
                    meta,
                    d_scale,
                    d_shift,
                    project,
                    p_scale,
                    p_shift,
                    alpha,
                }
            })
            .collect();
        NetVars {
            stem,
            stem_scale,
            stem_shift,
            layers,
            head_w: tape.param(self.head_w.clone()),
            head_b: tape.param(self.head_b.clone()),
        }
    }
}

fn check_choices(config: &NetConfig, set: &CandidateSet, choices: &[Vec<usize>]) -> Result<()> {
    let layout = config.layout();
    if choices.len() != layout.len() {
        return Err(Error::invalid(format!(
            "{} layer choices for {} blocks",
            choices.len(),
            layout.len()
        )));
    }
    for (i, (c, l)) in choices.iter().zip(&layout).enumerate() {
        if c.len() != l.dw_channels {
            return Err(Error::invalid(format!(
                "layer {i}: {} choices for {} filters",
                c.len(),
                l.dw_channels
            )));
        }
        if let Some(bad) = c.iter().find(|&&o| o >= set.num_options()) {
            return Err(Error::invalid(format!("layer {i}: option {bad} out of range")));
        }
    }
    Ok(())
}

/// Tape handles of one block.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub expand: Var,
    pub e_scale: Var,
    pub e_shift: Var,
    pub meta: Var,
    pub d_scale: Var,
    pub d_shift: Var,
    pub project: Var,
    pub p_scale: Var,
    pub p_shift: Var,
    pub alpha: Option<Var>,
}

/// Tape handles of a whole network, mirroring [`SuperNet::weights_mut`].
#[derive(Debug, Clone)]
pub struct NetVars {
    pub stem: Var,
    pub stem_scale: Var,
    pub stem_shift: Var,
    pub layers: Vec<LayerVars>,
    pub head_w: Var,
    pub head_b: Var,
}

impl NetVars {
    pub fn weights(&self) -> Vec<Var> {
        let mut v = vec![self.stem, self.stem_scale, self.stem_shift];
        for l in &self.layers {
            v.extend([
                l.expand, l.e_scale, l.e_shift, l.meta, l.d_scale, l.d_shift, l.project, l.p_scale, l.p_shift,
            ]);
        }
        v.extend([self.head_w, self.head_b]);
        v
    }

    pub fn alphas(&self) -> Vec<Var> {
        self.layers.iter().filter_map(|l| l.alpha).collect()
    }
}

/// How searchable layers turn logits into option weights for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Relaxation {
    pub mode: RelaxMode,
    pub tau: f64,
    pub noise: Option<NoiseStream>,
    pub step: usize,
}

impl Relaxation {
    /// Noise-free softmax weights.
    pub fn plain() -> Self {
        Relaxation {
            mode: RelaxMode::PlainSoftmax,
            tau: 1.0,
            noise: None,
            step: 0,
        }
    }

    fn weights(&self, tape: &Tape, layer: usize, alpha: Var) -> Result<Var> {
        let noise = match (self.mode, self.noise) {
            (RelaxMode::PlainSoftmax, _) => None,
            (_, Some(stream)) => {
                let [rows, n] = tape.value(alpha).dims2()?;
                Some(stream.gumbel_matrix(NoiseStream::search_stream(layer, self.step), rows, n))
            }
            (_, None) => return Err(Error::invalid("Gumbel relaxation without a noise stream")),
        };
        sampler::relaxed_weights(tape, alpha, noise.as_ref(), self.tau, self.mode)
    }
}

/// Which aggregation a searchable layer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Path {
    /// Masks summed into one effective kernel, one convolution.
    KernelSum,
    /// One convolution per candidate, features weighted and summed.
    FeatureSum,
}

/// Structural counters of one searchable layer's depthwise stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LayerCounters {
    /// Depthwise convolutions executed.
    pub convolutions: usize,
    /// Candidate feature maps materialized before aggregation.
    pub feature_maps: usize,
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Relaxed option weights of each searching layer, `[C or 1, options]`.
    pub option_weights: Vec<Var>,
    /// Noise-free softmax of each searching layer's logits.
    pub probs: Vec<Var>,
    /// Depthwise outputs before their affine map, one per block.
    pub dw_outputs: Vec<Var>,
    pub counters: Vec<LayerCounters>,
}

/// Single-convolution forward pass: masks, one effective kernel, one depthwise conv per layer.
pub fn forward_search(tape: &Tape, net: &SuperNet, vars: &NetVars, batch: Var, relax: &Relaxation) -> Result<ForwardOutput> {
    forward(tape, net, vars, batch, relax, Path::KernelSum)
}

/// Multi-path reference: every candidate convolves the input separately and
/// the features are probability-weighted.
pub fn forward_multipath_reference(
    tape: &Tape,
    net: &SuperNet,
    vars: &NetVars,
    batch: Var,
    relax: &Relaxation,
) -> Result<ForwardOutput> {
    forward(tape, net, vars, batch, relax, Path::FeatureSum)
}

pub fn forward(
    tape: &Tape,
    net: &SuperNet,
    vars: &NetVars,
    batch: Var,
    relax: &Relaxation,
    path: Path,
) -> Result<ForwardOutput> {
    let cfg = &net.config;
    let shape = tape.shape(batch);
    if shape.len() != 4 || shape[1] != cfg.in_channels || shape[2] != cfg.height || shape[3] != cfg.width {
        return Err(Error::shape(format!(
            "batch {shape:?} does not match network input [B, {}, {}, {}]",
            cfg.in_channels, cfg.height, cfg.width
        )));
    }
    let set = net.candidate_set();
    let mut x = tape.conv2d(batch, vars.stem, 1, Padding::Same)?;
    x = tape.relu(tape.channel_affine(x, vars.stem_scale, vars.stem_shift)?);

    let mut out = ForwardOutput {
        logits: x,
        option_weights: Vec::new(),
        probs: Vec::new(),
        dw_outputs: Vec::new(),
        counters: Vec::new(),
    };
    for (i, (layer, lv)) in net.layers.iter().zip(&vars.layers).enumerate() {
        let input = x;
        let mut h = tape.conv2d(x, lv.expand, 1, Padding::Explicit(0, 0))?;
        h = tape.relu(tape.channel_affine(h, lv.e_scale, lv.e_shift)?);

        let mark = tape.len();
        let d = match (&layer.kernel, lv.alpha) {
            (LayerKernel::Search { .. }, Some(alpha)) => {
                let w = relax.weights(tape, i, alpha)?;
                out.option_weights.push(w);
                out.probs.push(if relax.mode == RelaxMode::PlainSoftmax {
                    w
                } else {
                    tape.softmax(alpha)?
                });
                let d = match path {
                    Path::KernelSum => {
                        let k = meta_kernel::effective_kernel_var(tape, lv.meta, w, &set)?;
                        tape.depthwise_conv2d(h, k, layer.stride, Padding::Same)?
                    }
                    Path::FeatureSum => multipath_layer(tape, &set, layer, lv, h, w)?,
                };
                out.counters.push(count_stage(tape, mark, &tape.shape(d)));
                d
            }
            (LayerKernel::Fixed { choices }, _) => {
                let mask = tape.constant(layer.fixed_mask(&set, choices)?);
                let k = tape.mul(lv.meta, mask)?;
                tape.depthwise_conv2d(h, k, layer.stride, Padding::Same)?
            }
            (LayerKernel::Search { .. }, None) => {
                return Err(Error::invalid(format!("layer {i}: searching layer registered without logits")))
            }
        };
        out.dw_outputs.push(d);
        h = tape.relu(tape.channel_affine(d, lv.d_scale, lv.d_shift)?);
        h = tape.conv2d(h, lv.project, 1, Padding::Explicit(0, 0))?;
        h = tape.channel_affine(h, lv.p_scale, lv.p_shift)?;
        x = if layer.residual { tape.add(h, input)? } else { h };
    }
    let pooled = tape.global_avg_pool(x)?;
    out.logits = tape.linear(pooled, vars.head_w, vars.head_b)?;
    Ok(out)
}

fn multipath_layer(
    tape: &Tape,
    set: &CandidateSet,
    layer: &SearchableLayer,
    lv: &LayerVars,
    h: Var,
    weights: Var,
) -> Result<Var> {
    let meta_shape = set.meta_shape();
    let c = layer.channels();
    let rows = tape.shape(weights)[0];
    let mut features = Vec::with_capacity(set.num_candidates());
    let mut scales = Vec::with_capacity(set.num_candidates());
    for opt in 0..set.num_options() {
        let Some(shape) = set.option(opt) else { continue };
        let roi = roi_of(shape, meta_shape)?;
        let k = tape.crop_kernel(lv.meta, roi.top, roi.left, roi.h, roi.w)?;
        features.push(tape.depthwise_conv2d(h, k, layer.stride, Padding::Same)?);
        let mut col = tape.column(weights, opt)?;
        if rows == 1 && c != 1 {
            let row = tape.reshape(col, &[1, 1])?;
            col = tape.reshape(tape.expand_rows(row, c)?, &[c])?;
        }
        scales.push(col);
    }
    if features.is_empty() {
        // only the None option: the layer produces nothing
        let k = tape.constant(Tensor::zeros(&[c, 1, 1, 1]));
        return tape.depthwise_conv2d(h, k, layer.stride, Padding::Same);
    }
    tape.weighted_feature_sum(&features, &scales)
}

fn count_stage(tape: &Tape, mark: usize, out_shape: &[usize]) -> LayerCounters {
    let records = tape.shapes_since(mark);
    LayerCounters {
        convolutions: records.iter().filter(|(k, _)| *k == OpKind::DepthwiseConv2d).count(),
        feature_maps: records
            .iter()
            .filter(|(k, s)| s.as_slice() == out_shape && *k != OpKind::WeightedFeatureSum)
            .count(),
    }
}

/// Loss components of one step.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub ce: Var,
    pub flops: Var,
    pub expected_flops: Var,
    pub total: Var,
}

/// `L_CE + λ_cost · L_FLOPs(E[C])`.
pub fn total_loss(
    tape: &Tape,
    logits: Var,
    labels: &[usize],
    cost_probs: &[Var],
    model: &CostModel,
    budget: &CostBudget,
) -> Result<LossParts> {
    let ce = tape.cross_entropy(logits, labels)?;
    let expected = cost::expected_flops(tape, cost_probs, model)?;
    let flops = cost::flops_loss(tape, expected, budget)?;
    let total = tape.add(ce, tape.scale(flops, budget.lambda_cost))?;
    Ok(LossParts {
        ce,
        flops,
        expected_flops: expected,
        total,
    })
}

/// Discrete per-filter architecture read from the logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedArch {
    pub candidates: CandidateSet,
    /// `choices[layer][filter]` option index.
    pub choices: Vec<Vec<usize>>,
    pub flops: f64,
    /// Logit snapshot per layer (`[C or 1, options]`), empty for fixed layers.
    pub alpha: Vec<Tensor>,
}

impl DerivedArch {
    /// Kernel shape per filter, `None` for pruned filters.
    pub fn shapes(&self) -> Vec<Vec<Option<KernelShape>>> {
        self.choices
            .iter()
            .map(|l| l.iter().map(|&c| self.candidates.option(c)).collect())
            .collect()
    }

    /// Mean kernel area over the active (non-None) filters.
    pub fn mean_active_area(&self) -> f64 {
        let areas: Vec<f64> = self
            .shapes()
            .into_iter()
            .flatten()
            .flatten()
            .map(|s| s.area() as f64)
            .collect();
        if areas.is_empty() {
            0.0
        } else {
            areas.iter().sum::<f64>() / areas.len() as f64
        }
    }
}

/// Argmax of one logit row; ties go to the smaller kernel area, then the
/// lower index (so None wins a tie when present).
pub fn select_option(logits: &[f64], set: &CandidateSet) -> usize {
    let areas = set.areas();
    let mut best = 0;
    for i in 1..logits.len() {
        let better = logits[i] > logits[best] || (logits[i] == logits[best] && areas[i] < areas[best]);
        if better {
            best = i;
        }
    }
    best
}

pub fn derive_architecture(net: &SuperNet) -> Result<DerivedArch> {
    let set = net.candidate_set();
    let mut choices = Vec::with_capacity(net.layers.len());
    let mut alpha = Vec::with_capacity(net.layers.len());
    for layer in &net.layers {
        let c = layer.channels();
        match &layer.kernel {
            LayerKernel::Search { alpha: a } => {
                let [rows, n] = a.dims2()?;
                let picks: Vec<usize> = a.data().chunks(n).map(|row| select_option(row, &set)).collect();
                choices.push(if rows == c { picks } else { vec![picks[0]; c] });
                alpha.push(a.clone());
            }
            LayerKernel::Fixed { choices: ch } => {
                choices.push(ch.clone());
                alpha.push(Tensor::zeros(&[0, set.num_options()]));
            }
        }
    }
    let flops = cost::flops_of_arch(&choices, &net.cost_model())?;
    Ok(DerivedArch {
        candidates: set,
        choices,
        flops,
        alpha,
    })
}

/// Deviation between the two aggregation paths on one batch.
#[derive(Debug, Clone)]
pub struct EquivalenceReport {
    /// `max |single - multi| / (1 + |multi|)` over all logits.
    pub max_deviation: f64,
    pub kernel_sum: Vec<LayerCounters>,
    pub feature_sum: Vec<LayerCounters>,
}

/// Runs both aggregation paths with identical option weights and compares logits.
pub fn verify_equivalence(net: &SuperNet, batch: &Tensor, relax: &Relaxation) -> Result<EquivalenceReport> {
    let run = |path| -> Result<(Tensor, Vec<LayerCounters>)> {
        let tape = Tape::new();
        let vars = net.register(&tape, false);
        let x = tape.constant(batch.clone());
        let out = forward(&tape, net, &vars, x, relax, path)?;
        let logits = (*tape.value(out.logits)).clone();
        Ok((logits, out.counters))
    };
    let (single, kernel_sum) = run(Path::KernelSum)?;
    let (multi, feature_sum) = run(Path::FeatureSum)?;
    let max_deviation = single
        .data()
        .iter()
        .zip(multi.data())
        .map(|(s, m)| (s - m).abs() / (1.0 + m.abs()))
        .fold(0.0, f64::max);
    Ok(EquivalenceReport {
        max_deviation,
        kernel_sum,
        feature_sum,
    })
}

/// Logits for `images` without recording gradients of interest.
pub fn predict(net: &SuperNet, images: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let vars = net.register(&tape, false);
    let x = tape.constant(images.clone());
    let out = forward_search(&tape, net, &vars, x, &Relaxation::plain())?;
    let logits = (*tape.value(out.logits)).clone();
    Ok(logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> NetConfig {
        NetConfig {
            in_channels: 1,
            height: 8,
            width: 8,
            num_classes: 3,
            stem_channels: 3,
            blocks: vec![
                BlockConfig {
                    out_channels: 3,
                    stride: 1,
                    expansion: 1,
                },
                BlockConfig {
                    out_channels: 4,
                    stride: 2,
                    expansion: 2,
                },
            ],
            ..NetConfig::default()
        }
    }

    fn batch(seed: u64, b: usize, cfg: &NetConfig) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[b, cfg.in_channels, cfg.height, cfg.width], 1.0, &mut rng)
    }

    fn force_alpha(net: &mut SuperNet, layer: usize, option: usize) {
        for a in net.alphas_mut().into_iter().skip(layer).take(1) {
            let n = a.shape()[1];
            for row in a.data_mut().chunks_mut(n) {
                for (i, v) in row.iter_mut().enumerate() {
                    *v = if i == option { 1e3 } else { -1e3 };
                }
            }
        }
    }

    #[test]
    fn default_layout_and_cost() {
        let cfg = NetConfig::default();
        let layout = cfg.layout();
        assert_eq!(layout.iter().map(|l| (l.out_h, l.out_channels)).collect::<Vec<_>>(), vec![(24, 8), (12, 16), (12, 16), (6, 32)]);
        let model = cfg.cost_model().unwrap();
        // stem 24·24·8·9; expansions and projections; head 32·4
        let fixed = 576.0 * 72.0
            + 576.0 * 64.0 * 2.0
            + 576.0 * 64.0
            + 144.0 * 128.0
            + 144.0 * 256.0 * 2.0
            + 144.0 * 256.0
            + 36.0 * 512.0
            + 128.0;
        assert_eq!(model.fixed, fixed);
        let dw_max = 49.0 * (576.0 * 8.0 + 144.0 * 8.0 + 144.0 * 16.0 + 36.0 * 16.0);
        assert_eq!(model.max_flops(), fixed + dw_max);
    }

    #[test]
    fn none_is_blocked_without_a_shortcut() {
        let cfg = tiny_config();
        let net = SuperNet::new(cfg.clone(), 4).unwrap();
        let alphas = net.alphas();
        let first: Vec<f64> = alphas[0].data().chunks(4).map(|r| r[0]).collect();
        assert!(first.iter().all(|v| v.abs() < 0.1));
        for row in alphas[1].data().chunks(4) {
            assert_eq!(row[0], BLOCKED_LOGIT);
            assert_eq!(crate::sampler::softmax_probs(row)[0], 0.0);
        }
        assert!(derive_architecture(&net).unwrap().choices[1].iter().all(|&c| c != 0));

        let open = NetConfig {
            none_needs_shortcut: false,
            ..cfg
        };
        let net = SuperNet::new(open, 4).unwrap();
        assert!(net.alphas()[1].data().iter().all(|v| v.abs() < 0.1));
    }

    #[test]
    fn one_hot_search_matches_fixed_network() {
        let cfg = tiny_config();
        let mut net = SuperNet::new(cfg.clone(), 3).unwrap();
        for l in 0..2 {
            force_alpha(&mut net, l, 1);
        }
        let x = batch(1, 2, &cfg);
        let searched = predict(&net, &x).unwrap();
        let choices: Vec<Vec<usize>> = cfg.layout().iter().map(|l| vec![1; l.dw_channels]).collect();
        let fixed = net.with_fixed_choices(&choices).unwrap();
        assert_eq!(fixed.layers[0].meta.shape(), KernelShape::square(3));
        let plain = predict(&fixed, &x).unwrap();
        assert!(searched.max_rel_diff(&plain, 1.0).unwrap() <= 1e-12);
    }

    #[test]
    fn none_layer_output_is_zero() {
        let cfg = tiny_config();
        let mut net = SuperNet::new(cfg.clone(), 4).unwrap();
        force_alpha(&mut net, 1, 0);
        let tape = Tape::new();
        let vars = net.register(&tape, true);
        let x = tape.constant(batch(2, 2, &cfg));
        let out = forward_search(&tape, &net, &vars, x, &Relaxation::plain()).unwrap();
        assert!(tape.value(out.dw_outputs[1]).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(out.dw_outputs[0]).max_abs() > 0.0);
    }

    #[test]
    fn paths_agree_with_gumbel_noise() {
        let cfg = tiny_config();
        let mut net = SuperNet::new(cfg.clone(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for a in net.alphas_mut() {
            *a = Tensor::randn(a.shape(), 1.0, &mut rng);
        }
        for mode in [RelaxMode::Soft, RelaxMode::HardStraightThrough, RelaxMode::PlainSoftmax] {
            let relax = Relaxation {
                mode,
                tau: 0.8,
                noise: Some(NoiseStream::new(1)),
                step: 3,
            };
            let rep = verify_equivalence(&net, &batch(3, 3, &cfg), &relax).unwrap();
            assert!(rep.max_deviation < 1e-10, "{mode:?}: {}", rep.max_deviation);
            for (s, m) in rep.kernel_sum.iter().zip(&rep.feature_sum) {
                assert_eq!((s.convolutions, s.feature_maps), (1, 1));
                assert_eq!((m.convolutions, m.feature_maps), (3, 3));
            }
        }
    }

    #[test]
    fn single_candidate_paths_agree() {
        let cfg = NetConfig {
            candidates: vec![KernelShape::square(3)],
            include_none: false,
            ..tiny_config()
        };
        let net = SuperNet::new(cfg.clone(), 6).unwrap();
        let rep = verify_equivalence(&net, &batch(4, 2, &cfg), &Relaxation::plain()).unwrap();
        assert!(rep.max_deviation < 1e-14);
    }

    #[test]
    fn zero_input_gives_zero_depthwise_features() {
        let cfg = tiny_config();
        let net = SuperNet::new(cfg.clone(), 7).unwrap();
        let tape = Tape::new();
        let vars = net.register(&tape, false);
        let x = tape.constant(Tensor::zeros(&[2, 1, 8, 8]));
        let out = forward_multipath_reference(&tape, &net, &vars, x, &Relaxation::plain()).unwrap();
        for d in out.dw_outputs {
            assert!(tape.value(d).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn derive_tie_breaks_and_scan() {
        let set = CandidateSet::default_square();
        assert_eq!(select_option(&[0.0; 4], &set), 0);
        let no_none = CandidateSet::new(vec![KernelShape::square(5), KernelShape::square(3)], false).unwrap();
        assert_eq!(select_option(&[0.0, 0.0], &no_none), 1);
        assert_eq!(select_option(&[0.1, 0.5, 0.5, 0.2], &set), 1);

        let cfg = tiny_config();
        let mut net = SuperNet::new(cfg.clone(), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for a in net.alphas_mut() {
            *a = Tensor::randn(a.shape(), 1.0, &mut rng);
        }
        let arch = derive_architecture(&net).unwrap();
        for (layer, a) in arch.choices.iter().zip(net.alphas()) {
            for (pick, row) in layer.iter().zip(a.data().chunks(4)) {
                let mut best = 0;
                for i in 0..4 {
                    if row[i] > row[best] {
                        best = i;
                    }
                }
                assert_eq!(*pick, best);
            }
        }
        assert_eq!(arch.flops, cost::flops_of_arch(&arch.choices, &net.cost_model()).unwrap());

        force_alpha(&mut net, 0, 3);
        assert!(derive_architecture(&net).unwrap().choices[0].iter().all(|&c| c == 3));
    }

    #[test]
    fn per_layer_sharing() {
        let cfg = NetConfig {
            alpha_sharing: AlphaSharing::PerLayer,
            ..tiny_config()
        };
        let mut net = SuperNet::new(cfg.clone(), 9).unwrap();
        assert!(net.alphas().iter().all(|a| a.shape()[0] == 1));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for a in net.alphas_mut() {
            *a = Tensor::randn(a.shape(), 1.0, &mut rng);
        }
        let rep = verify_equivalence(&net, &batch(5, 2, &cfg), &Relaxation::plain()).unwrap();
        assert!(rep.max_deviation < 1e-10);
        let arch = derive_architecture(&net).unwrap();
        assert_eq!(arch.choices[1].len(), 6);
        assert!(arch.choices[1].iter().all(|&c| c == arch.choices[1][0]));
    }

    #[test]
    fn fixed_network_shapes_and_errors() {
        let cfg = tiny_config();
        let choices = vec![vec![0, 1, 2], vec![0; 6]];
        let net = SuperNet::fixed(cfg.clone(), &choices, 1).unwrap();
        assert!(!net.is_searching());
        assert_eq!(net.layers[0].meta.shape(), KernelShape::square(5));
        assert_eq!(net.layers[1].meta.shape(), KernelShape::square(1));
        let y = predict(&net, &batch(1, 2, &cfg)).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert!(SuperNet::fixed(cfg.clone(), &[vec![0, 1, 2]], 1).is_err());
        assert!(SuperNet::fixed(cfg, &[vec![0, 1, 9], vec![0; 6]], 1).is_err());
        let wrong = Tensor::zeros(&[1, 1, 7, 8]);
        assert!(predict(&net, &wrong).is_err());
    }

    #[test]
    fn loss_reduces_to_cross_entropy() {
        let cfg = tiny_config();
        let net = SuperNet::new(cfg.clone(), 10).unwrap();
        let model = net.cost_model();
        let tape = Tape::new();
        let vars = net.register(&tape, true);
        let x = tape.constant(batch(6, 3, &cfg));
        let out = forward_search(&tape, &net, &vars, x, &Relaxation::plain()).unwrap();
        let e = cost::expected_flops_plain(
            &out.probs.iter().map(|&p| (*tape.value(p)).clone()).collect::<Vec<_>>(),
            &model,
        )
        .unwrap();
        let inside = CostBudget::new(e, 0.1, 2.0).unwrap();
        let parts = total_loss(&tape, out.logits, &[0, 1, 2], &out.probs, &model, &inside).unwrap();
        assert_eq!(tape.value(parts.total).item(), tape.value(parts.ce).item());
        let outside = CostBudget::new(e / 2.0, 0.1, 0.0).unwrap();
        let parts = total_loss(&tape, out.logits, &[0, 1, 2], &out.probs, &model, &outside).unwrap();
        assert_eq!(tape.value(parts.total).item(), tape.value(parts.ce).item());
        assert!(tape.value(parts.flops).item() > 0.0);
    }
}
