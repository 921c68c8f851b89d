//! Convolutional block attention: a channel gate from pooled per-channel
//! statistics through a shared two-layer MLP, then a spatial gate from
//! channel-pooled maps through a 7×7 convolution. Both gates multiply the
//! feature map in sequence.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::kernels::PoolMode;
use crate::params::{Forward, ParamKind, ParamSpec};
use crate::tensor::Real;

pub const SPATIAL_KERNEL: usize = 7;

/// Where the sigmoid sits in the channel gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelGate {
    /// `sigmoid(mlp(avg) + mlp(max))`
    #[default]
    SumThenSigmoid,
    /// `sigmoid(mlp(avg)) + mlp(max)`: the asymmetric printed variant, kept
    /// for comparison runs. Its output is not confined to (0, 1).
    SigmoidAvgOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CbamConfig {
    /// MLP hidden width is `channels / reduction`.
    pub reduction: usize,
    pub mlp_bias: bool,
    pub gate: ChannelGate,
}

impl Default for CbamConfig {
    fn default() -> Self {
        Self {
            reduction: 16,
            mlp_bias: false,
            gate: ChannelGate::SumThenSigmoid,
        }
    }
}

impl CbamConfig {
    pub fn hidden(&self, channels: usize) -> Result<usize> {
        if self.reduction == 0 || !channels.is_multiple_of(self.reduction) {
            return Err(Error::config(format!(
                "attention width {channels} is not divisible by reduction ratio {}",
                self.reduction
            )));
        }
        let hidden = channels / self.reduction;
        if hidden == 0 {
            return Err(Error::config("attention MLP hidden width must be at least 1"));
        }
        Ok(hidden)
    }

    pub fn param_specs(&self, prefix: &str, channels: usize) -> Result<Vec<ParamSpec>> {
        let hidden = self.hidden(channels)?;
        let mut specs = vec![
            ParamSpec::dense(format!("{prefix}.channel.fc1.weight"), hidden, channels),
            ParamSpec::dense(format!("{prefix}.channel.fc2.weight"), channels, hidden),
        ];
        if self.mlp_bias {
            specs.push(ParamSpec::vector(
                format!("{prefix}.channel.fc1.bias"),
                hidden,
                ParamKind::Trainable,
                0.0,
            ));
            specs.push(ParamSpec::vector(
                format!("{prefix}.channel.fc2.bias"),
                channels,
                ParamKind::Trainable,
                0.0,
            ));
        }
        specs.push(ParamSpec::conv(
            format!("{prefix}.spatial.weight"),
            1,
            2,
            SPATIAL_KERNEL,
        ));
        Ok(specs)
    }

    /// Scalar parameter count of one block at `channels` width.
    pub fn param_count(&self, channels: usize) -> Result<usize> {
        Ok(self.param_specs("x", channels)?.iter().map(ParamSpec::numel).sum())
    }
}

/// The two gates produced by one attention pass.
#[derive(Debug, Clone, Copy)]
pub struct AttentionMaps {
    /// N×C×1×1
    pub channel: Var,
    /// N×1×H×W
    pub spatial: Var,
}

fn shared_mlp<T: Real>(fw: &mut Forward<'_, T>, pooled: Var, prefix: &str, cfg: &CbamConfig) -> Result<Var> {
    let [n, c, _, _] = fw.graph.value(pooled).dims4()?;
    let flat = fw.graph.reshape(pooled, &[n, c])?;
    let w1 = fw.p(&format!("{prefix}.channel.fc1.weight"))?;
    let w2 = fw.p(&format!("{prefix}.channel.fc2.weight"))?;
    let (b1, b2) = if cfg.mlp_bias {
        (
            Some(fw.p(&format!("{prefix}.channel.fc1.bias"))?),
            Some(fw.p(&format!("{prefix}.channel.fc2.bias"))?),
        )
    } else {
        (None, None)
    };
    let h = fw.graph.dense(flat, w1, b1)?;
    let h = fw.graph.relu(h)?;
    fw.graph.dense(h, w2, b2)
}

/// Channel gate of shape N×C×1×1.
pub fn channel_attention<T: Real>(
    fw: &mut Forward<'_, T>,
    p: Var,
    prefix: &str,
    cfg: &CbamConfig,
) -> Result<Var> {
    let [n, c, _, _] = fw.graph.value(p).dims4()?;
    let w1 = fw.p(&format!("{prefix}.channel.fc1.weight"))?;
    if fw.graph.value(w1).shape()[1] != c {
        return Err(Error::dim(format!(
            "attention MLP expects {} channels, feature map has {c}",
            fw.graph.value(w1).shape()[1]
        )));
    }
    let avg = fw.graph.global_pool(p, PoolMode::Avg)?;
    let max = fw.graph.global_pool(p, PoolMode::Max)?;
    let a = shared_mlp(fw, avg, prefix, cfg)?;
    let m = shared_mlp(fw, max, prefix, cfg)?;
    let gate = match cfg.gate {
        ChannelGate::SumThenSigmoid => {
            let s = fw.graph.add(a, m)?;
            fw.graph.sigmoid(s)?
        }
        ChannelGate::SigmoidAvgOnly => {
            let s = fw.graph.sigmoid(a)?;
            fw.graph.add(s, m)?
        }
    };
    fw.graph.reshape(gate, &[n, c, 1, 1])
}

/// Spatial gate of shape N×1×H×W.
pub fn spatial_attention<T: Real>(fw: &mut Forward<'_, T>, p: Var, prefix: &str) -> Result<Var> {
    let avg = fw.graph.channel_pool(p, PoolMode::Avg)?;
    let max = fw.graph.channel_pool(p, PoolMode::Max)?;
    let stacked = fw.graph.concat_channels(&[avg, max])?;
    let k = fw.p(&format!("{prefix}.spatial.weight"))?;
    let logits = fw.graph.conv2d(stacked, k, 1, SPATIAL_KERNEL / 2)?;
    fw.graph.sigmoid(logits)
}

/// Channel gate then spatial gate: `P' = Mc(P)·P`, `T = Ms(P')·P'`.
pub fn cbam_forward<T: Real>(
    fw: &mut Forward<'_, T>,
    p: Var,
    prefix: &str,
    cfg: &CbamConfig,
) -> Result<(Var, AttentionMaps)> {
    let channel = channel_attention(fw, p, prefix, cfg)?;
    let refined = fw.graph.mul(p, channel)?;
    let spatial = spatial_attention(fw, refined, prefix)?;
    let out = fw.graph.mul(refined, spatial)?;
    Ok((out, AttentionMaps { channel, spatial }))
}
