//! The restoration network: a four-level encoder-decoder of parser-prompted
//! transformer blocks with pixel-unshuffle/shuffle resampling, skip
//! connections and a residual reconstruction head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{ChannelAttention, InterPpa, IntraPpa};
use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::fusion::{BiPpf, CpfpGate, Fuser, Ppfn, PPFN_EXPANSION};
use crate::layers::{ChannelNorm, Conv1x1, Conv3x3};
use crate::parser::ParserNet;
use crate::params::{ParamBuilder, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::sft::SftFusion;

/// Which attention branches the IN2PPT block runs in parallel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchLayout {
    IntraInter,
    IntraOnly,
    InterOnly,
    BothIntra,
    BothInter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Bippf,
    Sft,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub levels: usize,
    /// PPTB count per level, shared by the encoder and the mirrored decoder.
    pub blocks_per_level: Vec<usize>,
    pub heads_per_level: Vec<usize>,
    pub ppfn_expansion: usize,
    pub normalize_qk: bool,
    pub refinement_blocks: usize,
    /// Residual depthwise/pointwise blocks per parser-network level.
    pub parser_stage_blocks: usize,
    /// Off removes the parser network and every parser injection.
    pub use_parser: bool,
    pub branches: BranchLayout,
    pub fusion: FusionKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            levels: 4,
            blocks_per_level: vec![2, 3, 3, 4],
            heads_per_level: vec![1, 2, 4, 8],
            ppfn_expansion: PPFN_EXPANSION,
            normalize_qk: true,
            refinement_blocks: 2,
            parser_stage_blocks: 2,
            use_parser: true,
            branches: BranchLayout::IntraInter,
            fusion: FusionKind::Bippf,
        }
    }
}

impl ModelConfig {
    /// The configuration used for laptop-scale training runs.
    pub fn desk() -> Self {
        Self { blocks_per_level: vec![1, 1, 1, 2], ..Self::default() }
    }

    pub fn level_width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial dimensions must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::invalid("levels must be positive"));
        }
        if self.blocks_per_level.len() != self.levels || self.heads_per_level.len() != self.levels {
            return Err(Error::invalid(format!(
                "blocks_per_level ({}) and heads_per_level ({}) must both have {} entries",
                self.blocks_per_level.len(),
                self.heads_per_level.len(),
                self.levels
            )));
        }
        if self.base_channels == 0 || self.base_channels % 2 != 0 {
            return Err(Error::invalid("base_channels must be a positive even number"));
        }
        if self.ppfn_expansion == 0 {
            return Err(Error::invalid("ppfn_expansion must be positive"));
        }
        for (l, &h) in self.heads_per_level.iter().enumerate() {
            let w = self.level_width(l);
            if h == 0 || w % h != 0 {
                return Err(Error::invalid(format!("level {l} width {w} not divisible by {h} heads")));
            }
        }
        Ok(())
    }

    /// Names of the fields whose values differ between two configurations.
    pub fn diff_fields(&self, other: &Self) -> Vec<&'static str> {
        let mut out = Vec::new();
        macro_rules! cmp {
            ($($f:ident),*) => {$(if self.$f != other.$f { out.push(stringify!($f)); })*};
        }
        cmp!(
            base_channels,
            levels,
            blocks_per_level,
            heads_per_level,
            ppfn_expansion,
            normalize_qk,
            refinement_blocks,
            parser_stage_blocks,
            use_parser,
            branches,
            fusion
        );
        out
    }
}

fn make_fuser<T: Scalar>(
    pb: &mut ParamBuilder<'_, T>,
    kind: FusionKind,
    width: usize,
    parser_width: usize,
) -> Result<Fuser> {
    Ok(match kind {
        FusionKind::Bippf => Fuser::BiPpf(BiPpf::new(pb, width, parser_width)?),
        FusionKind::Sft => Fuser::Sft(SftFusion::new(pb, width, parser_width)?),
    })
}

fn make_inter<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &ModelConfig, width: usize, heads: usize) -> Result<InterPpa> {
    let fusion = if cfg.use_parser {
        Some(make_fuser(&mut pb.child("fusion"), cfg.fusion, width, width)?)
    } else {
        None
    };
    let attention = ChannelAttention::new(&mut pb.child("attn"), width, heads, cfg.normalize_qk)?;
    Ok(InterPpa { fusion, attention })
}

fn make_ppfn<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &ModelConfig, width: usize) -> Result<Ppfn> {
    let fusion = if cfg.use_parser {
        let hidden = cfg.ppfn_expansion * width;
        Some(make_fuser(&mut pb.child("fusion"), cfg.fusion, hidden, width)?)
    } else {
        None
    };
    Ppfn::new(pb, width, cfg.ppfn_expansion, fusion)
}

#[derive(Clone, Debug)]
pub enum AttentionBranch {
    Intra(IntraPpa),
    Inter(InterPpa),
}

impl AttentionBranch {
    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId, m: Option<NodeId>) -> Result<NodeId> {
        match self {
            AttentionBranch::Intra(a) => {
                let m = m.ok_or_else(|| Error::invalid("intra attention needs parser features"))?;
                a.forward(g, x, m)
            }
            AttentionBranch::Inter(a) => a.forward(g, x, m),
        }
    }
}

/// Parallel intra/inter attention branches, 1x1-merged, followed by the parser-prompted FFN.
#[derive(Clone, Debug)]
pub struct In2pptBlock {
    pub pre_norm_attn: ChannelNorm,
    pub branches: Vec<AttentionBranch>,
    pub branch_merge: Option<Conv1x1>,
    pub pre_norm_ffn: ChannelNorm,
    pub ffn: Ppfn,
}

impl In2pptBlock {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &ModelConfig, width: usize, heads: usize) -> Result<Self> {
        let pre_norm_attn = ChannelNorm::new(&mut pb.child("norm_attn"), width)?;
        let layout: &[(&str, bool)] = if !cfg.use_parser {
            &[("attn", false)]
        } else {
            match cfg.branches {
                BranchLayout::IntraInter => &[("intra", true), ("inter", false)],
                BranchLayout::IntraOnly => &[("intra", true)],
                BranchLayout::InterOnly => &[("inter", false)],
                BranchLayout::BothIntra => &[("intra_a", true), ("intra_b", true)],
                BranchLayout::BothInter => &[("inter_a", false), ("inter_b", false)],
            }
        };
        let mut branches = Vec::with_capacity(layout.len());
        for &(name, intra) in layout {
            let mut bp = pb.child(name);
            branches.push(if intra {
                AttentionBranch::Intra(IntraPpa::new(&mut bp, width, width, heads, cfg.normalize_qk)?)
            } else {
                AttentionBranch::Inter(make_inter(&mut bp, cfg, width, heads)?)
            });
        }
        let branch_merge = if branches.len() > 1 {
            Some(Conv1x1::new(&mut pb.child("merge"), branches.len() * width, width, true)?)
        } else {
            None
        };
        Ok(Self {
            pre_norm_attn,
            branches,
            branch_merge,
            pre_norm_ffn: ChannelNorm::new(&mut pb.child("norm_ffn"), width)?,
            ffn: make_ppfn(&mut pb.child("ffn"), cfg, width)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId, m: Option<NodeId>) -> Result<NodeId> {
        let n = self.pre_norm_attn.forward(g, x)?;
        let outs = self
            .branches
            .iter()
            .map(|b| b.forward(g, n, m))
            .collect::<Result<Vec<_>>>()?;
        let attn = match &self.branch_merge {
            Some(merge) => {
                let cat = g.concat(&outs)?;
                merge.forward(g, cat)?
            }
            None => outs[0],
        };
        let x = g.add(x, attn)?;
        let n = self.pre_norm_ffn.forward(g, x)?;
        self.ffn.forward_with_input(g, x, n, m)
    }
}

/// Inter attention plus parser-prompted FFN, each fed through its own propagation gate.
#[derive(Clone, Debug)]
pub struct PptbBlock {
    pub pre_norm_attn: ChannelNorm,
    pub attn: InterPpa,
    pub gate_attn: Option<CpfpGate>,
    pub pre_norm_ffn: ChannelNorm,
    pub ffn: Ppfn,
    pub gate_ffn: Option<CpfpGate>,
}

impl PptbBlock {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &ModelConfig, width: usize, heads: usize) -> Result<Self> {
        let gate = |pb: &mut ParamBuilder<'_, T>, name: &str| -> Result<Option<CpfpGate>> {
            if cfg.use_parser {
                Ok(Some(CpfpGate::new(&mut pb.child(name))?))
            } else {
                Ok(None)
            }
        };
        Ok(Self {
            pre_norm_attn: ChannelNorm::new(&mut pb.child("norm_attn"), width)?,
            attn: make_inter(&mut pb.child("inter"), cfg, width, heads)?,
            gate_attn: gate(pb, "gate_attn")?,
            pre_norm_ffn: ChannelNorm::new(&mut pb.child("norm_ffn"), width)?,
            ffn: make_ppfn(&mut pb.child("ffn"), cfg, width)?,
            gate_ffn: gate(pb, "gate_ffn")?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId, m: Option<NodeId>) -> Result<NodeId> {
        let m_attn = match (&self.gate_attn, m) {
            (Some(gate), Some(m)) => Some(gate.apply(g, m)?),
            _ => m,
        };
        let n = self.pre_norm_attn.forward(g, x)?;
        let a = self.attn.forward(g, n, m_attn)?;
        let x = g.add(x, a)?;
        let m_ffn = match (&self.gate_ffn, m) {
            (Some(gate), Some(m)) => Some(gate.apply(g, m)?),
            _ => m,
        };
        let n = self.pre_norm_ffn.forward(g, x)?;
        self.ffn.forward_with_input(g, x, n, m_ffn)
    }
}

/// Pixel-unshuffle then 1x1 convolution: `(B, C, H, W) -> (B, 2C, H/2, W/2)`.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub conv: Conv1x1,
}

impl Downsample {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, channels: usize) -> Result<Self> {
        Ok(Self { conv: Conv1x1::new(pb, 4 * channels, 2 * channels, true)? })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let u = g.pixel_unshuffle(x)?;
        self.conv.forward(g, u)
    }
}

/// 1x1 convolution then pixel-shuffle: `(B, C, H, W) -> (B, C/2, 2H, 2W)`.
#[derive(Clone, Debug)]
pub struct Upsample {
    pub conv: Conv1x1,
}

impl Upsample {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, channels: usize) -> Result<Self> {
        Ok(Self { conv: Conv1x1::new(pb, channels, 2 * channels, true)? })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let c = self.conv.forward(g, x)?;
        g.pixel_shuffle(c)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLevel {
    pub in2ppt: In2pptBlock,
    pub blocks: Vec<PptbBlock>,
}

impl EncoderLevel {
    fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &ModelConfig, level: usize) -> Result<Self> {
        let (w, h) = (cfg.level_width(level), cfg.heads_per_level[level]);
        let in2ppt = In2pptBlock::new(&mut pb.child("in2ppt"), cfg, w, h)?;
        let blocks = (0..cfg.blocks_per_level[level])
            .map(|i| PptbBlock::new(&mut pb.child("pptb").child(i), cfg, w, h))
            .collect::<Result<_>>()?;
        Ok(Self { in2ppt, blocks })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId, m: Option<NodeId>) -> Result<NodeId> {
        let mut h = scoped(g, |g| self.in2ppt.forward(g, x, m))?;
        for b in &self.blocks {
            h = scoped(g, |g| b.forward(g, h, m))?;
        }
        Ok(h)
    }
}

/// Runs `f` and, in inference graphs, frees everything it created except the result.
fn scoped<'p, T: Scalar>(g: &mut Graph<'p, T>, f: impl FnOnce(&mut Graph<'p, T>) -> Result<NodeId>) -> Result<NodeId> {
    let mark = g.mark();
    let out = f(g)?;
    g.release_since(mark, &[out]);
    Ok(out)
}

/// The image restoration branch.
#[derive(Clone, Debug)]
pub struct IrNet {
    pub embed: Conv3x3,
    pub encoder: Vec<EncoderLevel>,
    pub down: Vec<Downsample>,
    pub up: Vec<Upsample>,
    pub skip_reduce: Vec<Conv1x1>,
    /// Indexed by level; the deepest level has no decoder stage.
    pub decoder: Vec<EncoderLevel>,
    pub refinement: Vec<PptbBlock>,
    pub reconstruct: Conv3x3,
}

impl IrNet {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let embed = Conv3x3::new(&mut pb.child("embed"), 3, cfg.base_channels, true)?;
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        for l in 0..cfg.levels {
            encoder.push(EncoderLevel::new(&mut pb.child("encoder").child(l), cfg, l)?);
            if l + 1 < cfg.levels {
                down.push(Downsample::new(&mut pb.child("down").child(l), cfg.level_width(l))?);
            }
        }
        let mut up = Vec::new();
        let mut skip_reduce = Vec::new();
        let mut decoder = Vec::new();
        for l in 0..cfg.levels.saturating_sub(1) {
            up.push(Upsample::new(&mut pb.child("up").child(l), cfg.level_width(l + 1))?);
            let w = cfg.level_width(l);
            skip_reduce.push(Conv1x1::new(&mut pb.child("skip").child(l), 2 * w, w, true)?);
            decoder.push(EncoderLevel::new(&mut pb.child("decoder").child(l), cfg, l)?);
        }
        let refinement = (0..cfg.refinement_blocks)
            .map(|i| PptbBlock::new(&mut pb.child("refine").child(i), cfg, cfg.base_channels, cfg.heads_per_level[0]))
            .collect::<Result<_>>()?;
        let reconstruct = Conv3x3::new(&mut pb.child("reconstruct"), cfg.base_channels, 3, true)?;
        Ok(Self { embed, encoder, down, up, skip_reduce, decoder, refinement, reconstruct })
    }

    /// The 3x3 shallow feature extraction.
    pub fn extract_features<T: Scalar>(&self, g: &mut Graph<'_, T>, image: NodeId) -> Result<NodeId> {
        self.embed.forward(g, image)
    }

    /// Returns the unclamped restoration `image + residual`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        image: NodeId,
        pyramid: Option<&[NodeId]>,
    ) -> Result<NodeId> {
        let levels = self.encoder.len();
        let m = |l: usize| pyramid.map(|p| p[l]);
        let mut h = self.extract_features(g, image)?;
        let mut skips = Vec::with_capacity(levels);
        for l in 0..levels {
            h = self.encoder[l].forward(g, h, m(l))?;
            if l + 1 < levels {
                skips.push(h);
                h = scoped(g, |g| self.down[l].forward(g, h))?;
            }
        }
        for l in (0..levels - 1).rev() {
            let skip = skips[l];
            h = scoped(g, |g| {
                let u = self.up[l].forward(g, h)?;
                let cat = g.concat(&[u, skip])?;
                self.skip_reduce[l].forward(g, cat)
            })?;
            h = self.decoder[l].forward(g, h, m(l))?;
        }
        for b in &self.refinement {
            h = scoped(g, |g| b.forward(g, h, m(0)))?;
        }
        let residual = self.reconstruct.forward(g, h)?;
        g.add(image, residual)
    }
}

/// Reflect-padding record so [`crop`] can undo [`pad_reflect`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Padding {
    pub height: usize,
    pub width: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
}

/// Mirror index without edge repetition; a length-1 axis maps everything to 0.
pub fn reflect_index(i: usize, len: usize) -> usize {
    if len <= 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let r = i % period;
    if r < len {
        r
    } else {
        period - r
    }
}

/// Reflect-pads the bottom and right edges up to the next multiple of `multiple`.
pub fn pad_reflect<T: Scalar>(image: &Tensor<T>, multiple: usize) -> Result<(Tensor<T>, Padding)> {
    let (b, c, h, w) = image.dims4()?;
    let round = |v: usize| v.div_ceil(multiple) * multiple;
    let (ph, pw) = (round(h), round(w));
    let pad = Padding { height: h, width: w, pad_bottom: ph - h, pad_right: pw - w };
    if ph == h && pw == w {
        return Ok((image.clone(), pad));
    }
    let mut data = Vec::with_capacity(b * c * ph * pw);
    for plane in image.data().chunks(h * w) {
        for y in 0..ph {
            let sy = reflect_index(y, h);
            for x in 0..pw {
                data.push(plane[sy * w + reflect_index(x, w)]);
            }
        }
    }
    Ok((Tensor::from_vec(&[b, c, ph, pw], data)?, pad))
}

pub fn crop<T: Scalar>(image: &Tensor<T>, pad: &Padding) -> Result<Tensor<T>> {
    image.crop(0, 0, pad.height, pad.width)
}

/// IRNet plus (optionally) the parser feature network, with the parameters they share.
#[derive(Clone, Debug)]
pub struct PptFormer<T> {
    pub config: ModelConfig,
    pub irnet: IrNet,
    pub parser_net: Option<ParserNet>,
    pub params: ParamStore<T>,
}

impl<T: Scalar> PptFormer<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let irnet = IrNet::new(&mut pb, &config)?;
        let parser_net = if config.use_parser {
            Some(ParserNet::new(&mut pb.child("parser_net"), &config)?)
        } else {
            None
        };
        Ok(Self { config, irnet, parser_net, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Zeroes the reconstruction head so the network starts as the identity map.
    pub fn zero_reconstruction(&mut self) {
        let w = self.irnet.reconstruct.weight;
        self.params.get_mut(w).data_mut().iter_mut().for_each(|v| *v = T::zero());
        if let Some(b) = self.irnet.reconstruct.bias {
            self.params.get_mut(b).data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    fn check_input(&self, g: &Graph<'_, T>, image: NodeId) -> Result<()> {
        let s = g.shape(image);
        let k = self.config.spatial_multiple();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::invalid(format!("expected a (B, 3, H, W) image, got {s:?}")));
        }
        if s[2] % k != 0 || s[3] % k != 0 {
            return Err(Error::invalid(format!(
                "spatial size {}x{} is not a multiple of {k}; pad the input first",
                s[2], s[3]
            )));
        }
        Ok(())
    }

    /// Checks a pyramid against the level widths and resolutions for `image`.
    pub fn check_pyramid(&self, g: &Graph<'_, T>, image: NodeId, pyramid: &[NodeId]) -> Result<()> {
        let s = g.shape(image).to_vec();
        if pyramid.len() != self.config.levels {
            return Err(Error::invalid(format!(
                "parser pyramid has {} levels, model has {}",
                pyramid.len(),
                self.config.levels
            )));
        }
        for (l, &p) in pyramid.iter().enumerate() {
            let want = [s[0], self.config.level_width(l), s[2] >> l, s[3] >> l];
            if g.shape(p) != want {
                return Err(Error::invalid(format!(
                    "parser level {l} has shape {:?}, expected {want:?}",
                    g.shape(p)
                )));
            }
        }
        Ok(())
    }

    /// Parser pyramid for a `(B, 3, H, W)` parser map node.
    pub fn parser_pyramid(&self, g: &mut Graph<'_, T>, parser_map: NodeId) -> Result<Vec<NodeId>> {
        let net = self
            .parser_net
            .as_ref()
            .ok_or_else(|| Error::invalid("this model was built without the parser network"))?;
        net.forward(g, parser_map)
    }

    /// Restoration graph with an explicit pyramid.
    pub fn forward_with_pyramid(&self, g: &mut Graph<'_, T>, image: NodeId, pyramid: Option<&[NodeId]>) -> Result<NodeId> {
        self.check_input(g, image)?;
        match (pyramid, self.config.use_parser) {
            (Some(p), true) => self.check_pyramid(g, image, p)?,
            (None, false) => {}
            (Some(_), false) => return Err(Error::invalid("parser-free model was given a parser pyramid")),
            (None, true) => return Err(Error::invalid("model needs a parser pyramid")),
        }
        self.irnet.forward(g, image, pyramid)
    }

    /// Full graph: parser network (if any) then restoration. Output is unclamped.
    pub fn forward(&self, g: &mut Graph<'_, T>, image: NodeId, parser_map: Option<NodeId>) -> Result<NodeId> {
        self.check_input(g, image)?;
        let pyramid = if self.config.use_parser {
            let pm = parser_map.ok_or_else(|| Error::invalid("model needs a parser map"))?;
            if g.shape(pm) != g.shape(image) {
                return Err(Error::invalid(format!(
                    "parser map {:?} does not match image {:?}",
                    g.shape(pm),
                    g.shape(image)
                )));
            }
            Some(self.parser_pyramid(g, pm)?)
        } else {
            None
        };
        self.forward_with_pyramid(g, image, pyramid.as_deref())
    }

    /// Inference on an arbitrary-size `(B, 3, H, W)` image: reflect-pad, run, crop, clamp to `[0, 1]`.
    pub fn restore(&self, image: &Tensor<T>, parser_map: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let out = self.restore_unclamped(image, parser_map)?;
        Ok(out.map(|v| v.max(T::zero()).min(T::one())))
    }

    pub fn restore_unclamped(&self, image: &Tensor<T>, parser_map: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let k = self.config.spatial_multiple();
        let (padded, pad) = pad_reflect(image, k)?;
        let mut g = Graph::inference(&self.params);
        let x = g.constant(padded);
        let pm = match parser_map {
            Some(p) => {
                p.check_same_shape(image)?;
                Some(g.constant(pad_reflect(p, k)?.0))
            }
            None => None,
        };
        let y = self.forward(&mut g, x, pm)?;
        crop(g.value(y), &pad)
    }

    /// Multiply-accumulates of one forward pass at `size x size`.
    pub fn macs_at(&self, size: usize) -> Result<u64> {
        let probe = size.div_ceil(self.config.spatial_multiple()) * self.config.spatial_multiple();
        let mut g = Graph::inference(&self.params);
        let x = g.constant(Tensor::zeros(&[1, 3, probe, probe]));
        let pm = self.config.use_parser.then(|| g.constant(Tensor::zeros(&[1, 3, probe, probe])));
        self.forward(&mut g, x, pm)?;
        Ok(g.macs())
    }
}
