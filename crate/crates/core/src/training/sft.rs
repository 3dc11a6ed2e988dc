//! Scale-and-shift feature modulation, used only as the fusion ablation baseline.

use crate::autograd::{Graph, NodeId};
use crate::error::Result;
use crate::layers::Conv1x1;
use crate::params::ParamBuilder;
use crate::scalar::Scalar;

const SLOPE: f64 = 0.1;

/// `x * (1 + scale(m)) + shift(m)` with two-layer 1x1 condition branches.
#[derive(Clone, Debug)]
pub struct SftFusion {
    pub scale_hidden: Conv1x1,
    pub scale_out: Conv1x1,
    pub shift_hidden: Conv1x1,
    pub shift_out: Conv1x1,
}

impl SftFusion {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, width: usize, parser_width: usize) -> Result<Self> {
        Ok(Self {
            scale_hidden: Conv1x1::new(&mut pb.child("scale_hidden"), parser_width, width, true)?,
            scale_out: Conv1x1::new(&mut pb.child("scale_out"), width, width, true)?,
            shift_hidden: Conv1x1::new(&mut pb.child("shift_hidden"), parser_width, width, true)?,
            shift_out: Conv1x1::new(&mut pb.child("shift_out"), width, width, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId, m: NodeId) -> Result<NodeId> {
        crate::attention::check_aligned(g, x, m)?;
        let s = self.scale_hidden.forward(g, m)?;
        let s = g.leaky_relu(s, SLOPE);
        let s = self.scale_out.forward(g, s)?;
        let t = self.shift_hidden.forward(g, m)?;
        let t = g.leaky_relu(t, SLOPE);
        let t = self.shift_out.forward(g, t)?;
        let xs = g.mul(x, s)?;
        let y = g.add(x, xs)?;
        g.add(y, t)
    }
}
