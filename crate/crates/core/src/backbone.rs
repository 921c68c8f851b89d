//! Four-stage multi-resolution backbone with repeated all-to-all fusion and
//! an attention-gated classification head.
//!
//! Stage `i` holds `i` parallel branches; branch `j` (1-based) runs at
//! 1/2^(j-1) of the stage-1 resolution with width `C_j`. After every stage
//! past the first, all branches exchange features; a new lower-resolution
//! branch is then spawned from the lowest existing one.
//!
//! ```text
//! stem ─ D11 ─ D21 ─ D31 ─ D41 ┐
//!          ╲   D22 ─ D32 ─ D42 ┤ downsample-and-add ─ 1×1 expand ─ attention ─ pool ─ dense
//!                ╲   D33 ─ D43 ┤
//!                      ╲   D44 ┘
//! ```

use serde::{Deserialize, Serialize};

use crate::attention::{cbam_forward, CbamConfig};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Forward, ParamKind, ParamSpec, ParamStore};
use crate::tensor::{Real, Tensor};

pub const NUM_STAGES: usize = 4;
pub const NUM_GRADES: usize = 5;

/// Feature-map names recorded during a forward pass.
pub const LAYER_MERGED: &str = "merged";
pub const LAYER_ATTENDED: &str = "attended";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub in_channels: usize,
    /// Square input side in pixels; must be divisible by 32.
    pub input_size: usize,
    pub stem_width: usize,
    /// C_1; branch widths default to C_1·2^(j-1).
    pub base_width: usize,
    /// Explicit per-branch widths, overriding `base_width` doubling.
    pub widths: Option<[usize; NUM_STAGES]>,
    /// Residual blocks per branch in each stage.
    pub blocks_per_stage: [usize; NUM_STAGES],
    pub head_width: usize,
    pub num_classes: usize,
    pub attention: bool,
    pub cbam: CbamConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            input_size: 224,
            stem_width: 64,
            base_width: 18,
            widths: None,
            blocks_per_stage: [1, 1, 2, 2],
            head_width: 256,
            num_classes: NUM_GRADES,
            attention: true,
            cbam: CbamConfig::default(),
        }
    }
}

impl NetworkConfig {
    /// Small network for desk-scale experiments: C_1 = 8, 64×64 input.
    pub fn toy() -> Self {
        Self {
            input_size: 64,
            stem_width: 16,
            base_width: 8,
            head_width: 64,
            ..Self::default()
        }
    }

    pub fn branch_widths(&self) -> [usize; NUM_STAGES] {
        self.widths
            .unwrap_or_else(|| std::array::from_fn(|j| self.base_width << j))
    }

    /// Branch `j` (0-based) width.
    pub fn width(&self, j: usize) -> usize {
        self.branch_widths()[j]
    }

    /// Spatial side of the stage-1 branch: the stem halves twice.
    pub fn stage1_size(&self) -> usize {
        self.input_size / 4
    }

    /// Spatial side of branch `j` (0-based).
    pub fn branch_size(&self, j: usize) -> usize {
        self.stage1_size() >> j
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes != NUM_GRADES {
            return Err(Error::config(format!(
                "num_classes must be {NUM_GRADES}, got {}",
                self.num_classes
            )));
        }
        if self.in_channels == 0 || self.stem_width == 0 || self.head_width == 0 {
            return Err(Error::config("channel widths must be positive"));
        }
        if self.branch_widths().contains(&0) {
            return Err(Error::config("branch widths must be positive"));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return Err(Error::config(format!(
                "input size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        if self.attention {
            self.cbam.hidden(self.head_width)?;
        }
        Ok(())
    }

    /// Every parameter of the network, in construction order.
    pub fn param_specs(&self) -> Result<Vec<ParamSpec>> {
        self.validate()?;
        let widths = self.branch_widths();
        let mut specs = Vec::new();
        let conv_bn = |specs: &mut Vec<ParamSpec>, name: String, c_out, c_in, k| {
            specs.push(ParamSpec::conv(format!("{name}.conv"), c_out, c_in, k));
            specs.extend(ParamSpec::batch_norm(&format!("{name}.bn"), c_out));
        };

        conv_bn(&mut specs, "stem.1".into(), self.stem_width, self.in_channels, 3);
        conv_bn(&mut specs, "stem.2".into(), self.stem_width, self.stem_width, 3);
        conv_bn(&mut specs, "stem.entry".into(), widths[0], self.stem_width, 3);

        for stage in 1..=NUM_STAGES {
            if stage > 1 {
                conv_bn(
                    &mut specs,
                    format!("transition{stage}"),
                    widths[stage - 1],
                    widths[stage - 2],
                    3,
                );
            }
            for (j, &c) in widths.iter().enumerate().take(stage) {
                for b in 0..self.blocks_per_stage[stage - 1] {
                    let prefix = format!("stage{stage}.branch{}.block{b}", j + 1);
                    conv_bn(&mut specs, format!("{prefix}.a"), c, c, 3);
                    conv_bn(&mut specs, format!("{prefix}.b"), c, c, 3);
                }
            }
            if stage > 1 {
                for to in 0..stage {
                    for from in 0..stage {
                        let name = format!("stage{stage}.fuse.{}to{}", from + 1, to + 1);
                        if from < to {
                            for step in 0..to - from {
                                let last = step + 1 == to - from;
                                let c_out = if last { widths[to] } else { widths[from] };
                                conv_bn(&mut specs, format!("{name}.down{step}"), c_out, widths[from], 3);
                            }
                        } else if from > to {
                            conv_bn(&mut specs, format!("{name}.up"), widths[to], widths[from], 1);
                        }
                    }
                }
            }
        }

        for j in 1..NUM_STAGES {
            conv_bn(&mut specs, format!("head.down{}", j + 1), widths[j], widths[j - 1], 3);
        }
        conv_bn(
            &mut specs,
            "head.expand".into(),
            self.head_width,
            widths[NUM_STAGES - 1],
            1,
        );
        if self.attention {
            specs.extend(self.cbam.param_specs("cbam", self.head_width)?);
        }
        specs.push(ParamSpec::dense("classifier.weight", self.num_classes, self.head_width));
        specs.push(ParamSpec::vector(
            "classifier.bias",
            self.num_classes,
            ParamKind::Trainable,
            0.0,
        ));
        Ok(specs)
    }

    /// Trainable scalar count.
    pub fn trainable_count(&self) -> Result<usize> {
        Ok(self
            .param_specs()?
            .iter()
            .filter(|s| s.kind == ParamKind::Trainable)
            .map(ParamSpec::numel)
            .sum())
    }
}

/// All model tensors (weights and batch-norm buffers).
pub type ModelParams<T> = ParamStore<T>;

/// Seeded He-uniform weights, unit batch-norm scale, zero shift.
pub fn build_network<T: Real>(config: &NetworkConfig, seed: u64) -> Result<ModelParams<T>> {
    let specs = config.param_specs()?;
    let params = ParamStore::from_specs(&specs, seed)?;
    log::debug!(
        "built network: {} tensors, {} trainable values",
        params.len(),
        params.trainable_count()
    );
    Ok(params)
}

/// Switches for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Batch statistics and running-stat collection.
    pub train: bool,
    /// Replace both attention gates with ones; the block passes its input
    /// through untouched.
    pub identity_attention: bool,
}

impl ForwardOptions {
    pub fn train() -> Self {
        Self {
            train: true,
            identity_attention: false,
        }
    }

    pub fn eval() -> Self {
        Self {
            train: false,
            identity_attention: false,
        }
    }
}

fn check_branches<T: Real>(fw: &Forward<'_, T>, config: &NetworkConfig, features: &[Var]) -> Result<()> {
    for (j, &f) in features.iter().enumerate() {
        let [_, c, h, w] = fw.graph.value(f).dims4()?;
        let side = config.branch_size(j);
        if c != config.width(j) || h != side || w != side {
            return Err(Error::dim(format!(
                "branch {} expected {}×{side}×{side}, got {c}×{h}×{w}",
                j + 1,
                config.width(j)
            )));
        }
    }
    Ok(())
}

fn basic_block<T: Real>(fw: &mut Forward<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let y = fw.conv_bn(x, &format!("{prefix}.a"), 1, true)?;
    let y = fw.conv_bn(y, &format!("{prefix}.b"), 1, false)?;
    let y = fw.graph.add(y, x)?;
    fw.graph.relu(y)
}

/// Runs each branch's residual blocks independently; no cross-branch flow.
pub fn stage_forward<T: Real>(
    fw: &mut Forward<'_, T>,
    config: &NetworkConfig,
    stage: usize,
    features: &[Var],
) -> Result<Vec<Var>> {
    if features.len() != stage {
        return Err(Error::dim(format!(
            "stage {stage} needs {stage} branches, got {}",
            features.len()
        )));
    }
    check_branches(fw, config, features)?;
    let mut out = Vec::with_capacity(stage);
    for (j, &f) in features.iter().enumerate() {
        let mut x = f;
        for b in 0..config.blocks_per_stage[stage - 1] {
            x = basic_block(fw, x, &format!("stage{stage}.branch{}.block{b}", j + 1))?;
        }
        out.push(x);
    }
    Ok(out)
}

/// All-to-all exchange. Output branch `j` sums, over every input branch `k`:
/// identity for k = j, a chain of k→j stride-2 3×3 convs for k < j, and
/// bilinear upsampling followed by a 1×1 conv for k > j.
pub fn fuse<T: Real>(
    fw: &mut Forward<'_, T>,
    config: &NetworkConfig,
    stage: usize,
    features: &[Var],
) -> Result<Vec<Var>> {
    if features.len() < 2 || features.len() != stage {
        return Err(Error::dim(format!(
            "fusion at stage {stage} needs {stage} ≥ 2 branches, got {}",
            features.len()
        )));
    }
    check_branches(fw, config, features)?;
    let mut out = Vec::with_capacity(stage);
    for to in 0..stage {
        let mut acc = features[to];
        for (from, &f) in features.iter().enumerate() {
            if from == to {
                continue;
            }
            let name = format!("stage{stage}.fuse.{}to{}", from + 1, to + 1);
            let contribution = if from < to {
                let mut x = f;
                for step in 0..to - from {
                    let last = step + 1 == to - from;
                    x = fw.conv_bn(x, &format!("{name}.down{step}"), 2, !last)?;
                }
                x
            } else {
                let up = fw.graph.bilinear_upsample(f, 1 << (from - to))?;
                fw.conv_bn(up, &format!("{name}.up"), 1, false)?
            };
            let expected = fw.graph.value(features[to]).shape();
            assert_eq!(
                fw.graph.value(contribution).shape(),
                expected,
                "fusion transform {name} produced a misaligned map"
            );
            acc = fw.graph.add(acc, contribution)?;
        }
        out.push(fw.graph.relu(acc)?);
    }
    Ok(out)
}

/// Spawns branch `stage + 1` from the lowest branch with a stride-2 3×3 conv.
pub fn new_branch<T: Real>(
    fw: &mut Forward<'_, T>,
    config: &NetworkConfig,
    stage: usize,
    features: &[Var],
) -> Result<Var> {
    if stage == 0 || stage >= NUM_STAGES || features.len() != stage {
        return Err(Error::dim(format!(
            "no transition from stage {stage} with {} branches",
            features.len()
        )));
    }
    check_branches(fw, config, features)?;
    fw.conv_bn(features[stage - 1], &format!("transition{}", stage + 1), 2, true)
}

/// Merges the four branches into one map at the lowest resolution, applies
/// attention and returns N×5 logits.
pub fn head_forward<T: Real>(
    fw: &mut Forward<'_, T>,
    config: &NetworkConfig,
    features: &[Var],
    opts: ForwardOptions,
) -> Result<Var> {
    if features.len() != NUM_STAGES {
        return Err(Error::dim(format!(
            "head needs {NUM_STAGES} branch maps, got {}",
            features.len()
        )));
    }
    check_branches(fw, config, features)?;
    let mut y = features[0];
    for (j, &f) in features.iter().enumerate().skip(1) {
        let down = fw.conv_bn(y, &format!("head.down{}", j + 1), 2, true)?;
        y = fw.graph.add(down, f)?;
    }
    let merged = fw.conv_bn(y, "head.expand", 1, true)?;
    fw.tap(LAYER_MERGED, merged);

    let attended = if config.attention && !opts.identity_attention {
        let (t, maps) = cbam_forward(fw, merged, "cbam", &config.cbam)?;
        fw.tap("cbam.channel_map", maps.channel);
        fw.tap("cbam.spatial_map", maps.spatial);
        t
    } else {
        merged
    };
    fw.tap(LAYER_ATTENDED, attended);

    let pooled = fw.graph.global_pool(attended, crate::kernels::PoolMode::Avg)?;
    let n = fw.graph.value(pooled).shape()[0];
    let flat = fw.graph.reshape(pooled, &[n, config.head_width])?;
    let w = fw.p("classifier.weight")?;
    let b = fw.p("classifier.bias")?;
    fw.graph.dense(flat, w, Some(b))
}

/// Stem: two stride-2 convs, then a 3×3 conv to the stage-1 width.
pub fn stem_forward<T: Real>(fw: &mut Forward<'_, T>, config: &NetworkConfig, images: Var) -> Result<Var> {
    let [_, c, h, w] = fw.graph.value(images).dims4()?;
    if c != config.in_channels || h != config.input_size || w != config.input_size {
        return Err(Error::dim(format!(
            "network expects {}×{}×{} images, got {c}×{h}×{w}",
            config.in_channels, config.input_size, config.input_size
        )));
    }
    let x = fw.conv_bn(images, "stem.1", 2, true)?;
    let x = fw.conv_bn(x, "stem.2", 2, true)?;
    let x = fw.conv_bn(x, "stem.entry", 1, true)?;
    fw.tap("stem", x);
    Ok(x)
}

/// Full pass from N×C×S×S images to N×5 logits on the context's graph.
/// Branch outputs are recorded as `stage{i}.branch{j}`.
pub fn network_forward<T: Real>(
    fw: &mut Forward<'_, T>,
    config: &NetworkConfig,
    images: Var,
    opts: ForwardOptions,
) -> Result<Var> {
    let mut features = vec![stem_forward(fw, config, images)?];
    for stage in 1..=NUM_STAGES {
        if stage > 1 {
            let branch = new_branch(fw, config, stage - 1, &features)?;
            features.push(branch);
        }
        features = stage_forward(fw, config, stage, &features)?;
        if stage > 1 {
            features = fuse(fw, config, stage, &features)?;
        }
        for (j, &f) in features.iter().enumerate() {
            fw.tap(format!("stage{stage}.branch{}", j + 1), f);
        }
    }
    head_forward(fw, config, &features, opts)
}

/// Convenience: build a context, feed `images`, return it with the logits.
pub fn forward<'p, T: Real>(
    config: &NetworkConfig,
    params: &'p ModelParams<T>,
    images: &Tensor<T>,
    opts: ForwardOptions,
) -> Result<(Forward<'p, T>, Var)> {
    let mut fw = Forward::new(params, opts.train);
    let x = fw.graph.constant(images.clone());
    let logits = network_forward(&mut fw, config, x, opts)?;
    Ok((fw, logits))
}
