//! Parameterized convolution and normalization layers.

use crate::autograd::{Graph, NodeId};
use crate::error::Result;
use crate::params::{ParamBuilder, ParamId};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Conv1x1 {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv1x1 {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, c_in: usize, c_out: usize, bias: bool) -> Result<Self> {
        let weight = pb.fan_in_uniform("weight", &[c_out, c_in, 1, 1], c_in)?;
        let bias = if bias { Some(pb.fan_in_uniform("bias", &[c_out], c_in)?) } else { None };
        Ok(Self { weight, bias, c_in, c_out })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv1x1(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Depthwise3x3 {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub channels: usize,
}

impl Depthwise3x3 {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, channels: usize, bias: bool) -> Result<Self> {
        let weight = pb.fan_in_uniform("weight", &[channels, 1, 3, 3], 9)?;
        let bias = if bias { Some(pb.fan_in_uniform("bias", &[channels], 9)?) } else { None };
        Ok(Self { weight, bias, channels })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.depthwise3x3(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv3x3 {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv3x3 {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, c_in: usize, c_out: usize, bias: bool) -> Result<Self> {
        let fan_in = c_in * 9;
        let weight = pb.fan_in_uniform("weight", &[c_out, c_in, 3, 3], fan_in)?;
        let bias = if bias { Some(pb.fan_in_uniform("bias", &[c_out], fan_in)?) } else { None };
        Ok(Self { weight, bias, c_in, c_out })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv3x3(x, w, b)
    }
}

/// Layer normalization across channels at every pixel.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ChannelNorm {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.constant("weight", &[channels], 1.0)?,
            bias: pb.constant("bias", &[channels], 0.0)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.layer_norm(x, w, b)
    }
}
