//! Parser/restoration feature fusion: the bidirectional fusion block, the
//! parser-prompted gated feed-forward network and the propagation gates.

use crate::attention::check_aligned;
use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::layers::{Conv1x1, Depthwise3x3};
use crate::params::{ParamBuilder, ParamId};
use crate::scalar::Scalar;
use crate::training::sft::SftFusion;

/// Feed-forward channel expansion factor.
pub const PPFN_EXPANSION: usize = 3;

/// Bidirectional fusion. A shared fusion map gates both projected streams
/// multiplicatively; the re-merged result is added back onto `x`.
/// Every convolution is 1x1.
#[derive(Clone, Debug)]
pub struct BiPpf {
    pub x_proj: Conv1x1,
    pub m_proj: Conv1x1,
    pub fuse_proj: Conv1x1,
    pub out_proj: Conv1x1,
}

impl BiPpf {
    /// `width` is the restoration width (kept for the projections), `parser_width` the incoming parser width.
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, width: usize, parser_width: usize) -> Result<Self> {
        Ok(Self {
            x_proj: Conv1x1::new(&mut pb.child("x_proj"), width, width, true)?,
            m_proj: Conv1x1::new(&mut pb.child("m_proj"), parser_width, width, true)?,
            fuse_proj: Conv1x1::new(&mut pb.child("fuse_proj"), 2 * width, width, true)?,
            out_proj: Conv1x1::new(&mut pb.child("out_proj"), 2 * width, width, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId, m: NodeId) -> Result<NodeId> {
        check_aligned(g, x, m)?;
        let x_hat = self.x_proj.forward(g, x)?;
        let m_hat = self.m_proj.forward(g, m)?;
        let cat = g.concat(&[x_hat, m_hat])?;
        let fusion = self.fuse_proj.forward(g, cat)?;
        let gx = g.mul(fusion, x_hat)?;
        let x_tilde = g.add(gx, x_hat)?;
        let gm = g.mul(fusion, m_hat)?;
        let m_tilde = g.add(gm, m_hat)?;
        let cat = g.concat(&[x_tilde, m_tilde])?;
        let out = self.out_proj.forward(g, cat)?;
        g.add(out, x)
    }
}

/// Which fusion block a parser injection site uses.
#[derive(Clone, Debug)]
pub enum Fuser {
    BiPpf(BiPpf),
    Sft(SftFusion),
}

impl Fuser {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId, m: NodeId) -> Result<NodeId> {
        match self {
            Fuser::BiPpf(f) => f.forward(g, x, m),
            Fuser::Sft(f) => f.forward(g, x, m),
        }
    }
}

/// Gated feed-forward network whose first branch is fused with parser features.
///
/// The input is expanded to `2 r C` channels, filtered depthwise and split in
/// two; branch one is fused with the parser, branch two passes through GELU
/// and gates it. Without a fuser this is the plain gated feed-forward network.
#[derive(Clone, Debug)]
pub struct Ppfn {
    pub expand: Conv1x1,
    pub depthwise: Depthwise3x3,
    pub fusion: Option<Fuser>,
    pub project: Conv1x1,
    pub expansion: usize,
}

impl Ppfn {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        channels: usize,
        expansion: usize,
        fusion: Option<Fuser>,
    ) -> Result<Self> {
        let hidden = expansion * channels;
        Ok(Self {
            expand: Conv1x1::new(&mut pb.child("expand"), channels, 2 * hidden, true)?,
            depthwise: Depthwise3x3::new(&mut pb.child("dw"), 2 * hidden, true)?,
            fusion,
            project: Conv1x1::new(&mut pb.child("project"), hidden, channels, true)?,
            expansion,
        })
    }

    /// `project(fuse(X1, m) * gelu(X2)) + x`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId, m: Option<NodeId>) -> Result<NodeId> {
        self.forward_with_input(g, x, x, m)
    }

    /// Same as [`Ppfn::forward`] but the branches read `input` (typically a
    /// normalized copy) while the residual adds `residual`.
    pub fn forward_with_input<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        residual: NodeId,
        input: NodeId,
        m: Option<NodeId>,
    ) -> Result<NodeId> {
        let e = self.expand.forward(g, input)?;
        let e = self.depthwise.forward(g, e)?;
        let branches = g.chunk(e, 2)?;
        let first = match (&self.fusion, m) {
            (Some(f), Some(m)) => f.forward(g, branches[0], m)?,
            (None, _) => branches[0],
            (Some(_), None) => return Err(Error::invalid("parser-prompted feed-forward needs parser features")),
        };
        let gate = g.gelu(branches[1]);
        let gated = g.mul(first, gate)?;
        let out = self.project.forward(g, gated)?;
        g.add(out, residual)
    }
}

/// Learnable scalar gate on a parser injection site: `sigmoid(gamma) * m`.
#[derive(Clone, Debug)]
pub struct CpfpGate {
    pub gamma: ParamId,
}

/// Gate pre-activation at initialization (gate value one half).
pub const GAMMA_INIT: f64 = 0.0;

impl CpfpGate {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>) -> Result<Self> {
        Ok(Self { gamma: pb.constant("gamma", &[1], GAMMA_INIT)? })
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<'_, T>, m: NodeId) -> Result<NodeId> {
        let gamma = g.param(self.gamma);
        let s = g.sigmoid(gamma);
        g.scale(m, s)
    }
}
