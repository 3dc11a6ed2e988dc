//! Channel-wise attention and the two parser-prompted variants.
//!
//! All three attend across channels rather than pixels: the similarity matrix
//! is `c x c` per head, so cost grows linearly with image area.
//!
//! * [`ChannelAttention`]: plain self-attention, queries/keys/values from one tensor.
//! * [`IntraPpa`]: queries from restoration features; keys and values are the
//!   1x1 merge of restoration and parser keys/values (implicit parser perception).
//! * [`InterPpa`]: self-attention over restoration features that were first
//!   fused with parser features (explicit parser perception).

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::fusion::Fuser;
use crate::layers::{Conv1x1, Depthwise3x3};
use crate::params::{ParamBuilder, ParamId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Initial value of every per-head temperature.
pub const ALPHA_INIT: f64 = 1.0;

/// Evaluates channel attention on plain tensors.
///
/// `q`, `k`, `v` are `(B, C, H, W)`; `alpha` holds one temperature per head.
pub fn channel_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    alpha: &[T],
    normalize_qk: bool,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let a = g.constant(Tensor::from_vec(&[alpha.len()], alpha.to_vec())?);
    let out = g.channel_attention(q, k, v, a, alpha.len(), normalize_qk)?;
    Ok(g.value(out).clone())
}

pub(crate) fn check_aligned<T: Scalar>(g: &Graph<'_, T>, x: NodeId, m: NodeId) -> Result<()> {
    let (xs, ms) = (g.shape(x), g.shape(m));
    if xs.len() != 4 || ms.len() != 4 || xs[0] != ms[0] || xs[2..] != ms[2..] {
        return Err(Error::invalid(format!(
            "restoration features {xs:?} and parser features {ms:?} are not spatially aligned"
        )));
    }
    Ok(())
}

/// Plain channel self-attention with learnable per-head temperature.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub qkv_pointwise: Conv1x1,
    pub qkv_depthwise: Depthwise3x3,
    pub output_pointwise: Conv1x1,
    pub alpha: ParamId,
    pub heads: usize,
    pub normalize_qk: bool,
}

impl ChannelAttention {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, channels: usize, heads: usize, normalize_qk: bool) -> Result<Self> {
        check_heads(channels, heads)?;
        Ok(Self {
            qkv_pointwise: Conv1x1::new(&mut pb.child("qkv_pw"), channels, 3 * channels, true)?,
            qkv_depthwise: Depthwise3x3::new(&mut pb.child("qkv_dw"), 3 * channels, true)?,
            output_pointwise: Conv1x1::new(&mut pb.child("out_pw"), channels, channels, true)?,
            alpha: pb.constant("alpha", &[heads], ALPHA_INIT)?,
            heads,
            normalize_qk,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let qkv = self.qkv_pointwise.forward(g, x)?;
        let qkv = self.qkv_depthwise.forward(g, qkv)?;
        let parts = g.chunk(qkv, 3)?;
        let alpha = g.param(self.alpha);
        let a = g.channel_attention(parts[0], parts[1], parts[2], alpha, self.heads, self.normalize_qk)?;
        self.output_pointwise.forward(g, a)
    }
}

fn check_heads(channels: usize, heads: usize) -> Result<()> {
    if heads == 0 || channels % heads != 0 {
        return Err(Error::invalid(format!("{channels} channels not divisible by {heads} heads")));
    }
    Ok(())
}

/// Cross attention whose keys and values blend restoration and parser sources.
#[derive(Clone, Debug)]
pub struct IntraPpa {
    pub parser_kv_pointwise: Conv1x1,
    pub parser_kv_depthwise: Depthwise3x3,
    pub qkv_pointwise: Conv1x1,
    pub qkv_depthwise: Depthwise3x3,
    pub key_merge: Conv1x1,
    pub value_merge: Conv1x1,
    pub alpha: ParamId,
    pub heads: usize,
    pub normalize_qk: bool,
}

impl IntraPpa {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        channels: usize,
        parser_channels: usize,
        heads: usize,
        normalize_qk: bool,
    ) -> Result<Self> {
        check_heads(channels, heads)?;
        Ok(Self {
            parser_kv_pointwise: Conv1x1::new(&mut pb.child("parser_kv_pw"), parser_channels, 2 * channels, true)?,
            parser_kv_depthwise: Depthwise3x3::new(&mut pb.child("parser_kv_dw"), 2 * channels, true)?,
            qkv_pointwise: Conv1x1::new(&mut pb.child("qkv_pw"), channels, 3 * channels, true)?,
            qkv_depthwise: Depthwise3x3::new(&mut pb.child("qkv_dw"), 3 * channels, true)?,
            key_merge: Conv1x1::new(&mut pb.child("key_merge"), 2 * channels, channels, true)?,
            value_merge: Conv1x1::new(&mut pb.child("value_merge"), 2 * channels, channels, true)?,
            alpha: pb.constant("alpha", &[heads], ALPHA_INIT)?,
            heads,
            normalize_qk,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId, m: NodeId) -> Result<NodeId> {
        check_aligned(g, x, m)?;
        let kv_m = self.parser_kv_pointwise.forward(g, m)?;
        let kv_m = self.parser_kv_depthwise.forward(g, kv_m)?;
        let kv_m = g.chunk(kv_m, 2)?;
        let qkv = self.qkv_pointwise.forward(g, x)?;
        let qkv = self.qkv_depthwise.forward(g, qkv)?;
        let qkv = g.chunk(qkv, 3)?;
        let keys = g.concat(&[kv_m[0], qkv[1]])?;
        let keys = self.key_merge.forward(g, keys)?;
        let values = g.concat(&[kv_m[1], qkv[2]])?;
        let values = self.value_merge.forward(g, values)?;
        let alpha = g.param(self.alpha);
        g.channel_attention(qkv[0], keys, values, alpha, self.heads, self.normalize_qk)
    }
}

/// Attention over parser-fused features. Without a fuser it is plain self-attention.
#[derive(Clone, Debug)]
pub struct InterPpa {
    pub fusion: Option<Fuser>,
    pub attention: ChannelAttention,
}

impl InterPpa {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId, m: Option<NodeId>) -> Result<NodeId> {
        let fused = match (&self.fusion, m) {
            (Some(f), Some(m)) => f.forward(g, x, m)?,
            (None, _) => x,
            (Some(_), None) => return Err(Error::invalid("parser-prompted attention needs parser features")),
        };
        self.attention.forward(g, fused)
    }
}

