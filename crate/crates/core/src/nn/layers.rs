//! Layer specifications and the branch-plus-trunk architecture.
//!
//! A model reads a flat feature row that is partitioned into input groups.
//! Each group either passes straight through or runs its own small stack of
//! layers (typically `conv1d -> relu -> batchnorm` over a temporal block).
//! Group outputs are concatenated in group order and fed to the trunk, a
//! plain sequential stack ending in a single regression output.

use serde::{Deserialize, Serialize};

use crate::data::FeatureGroup;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// `y = W x + b`, weights row-major `(outputs, inputs)`.
    Dense { inputs: usize, outputs: usize },
    /// Valid (unpadded) 1-D convolution over a channel-major block of
    /// `in_channels * length` values. Output is channel-major as well.
    Conv1d {
        in_channels: usize,
        length: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Relu { width: usize },
    /// Per-feature batch normalization with learned scale and shift.
    BatchNorm { width: usize },
}

impl LayerSpec {
    pub fn dense(inputs: usize, outputs: usize) -> Self {
        LayerSpec::Dense { inputs, outputs }
    }

    pub fn conv1d(
        in_channels: usize,
        length: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        LayerSpec::Conv1d { in_channels, length, out_channels, kernel, stride }
    }

    pub fn relu(width: usize) -> Self {
        LayerSpec::Relu { width }
    }

    pub fn batch_norm(width: usize) -> Self {
        LayerSpec::BatchNorm { width }
    }

    pub fn input_width(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv1d { in_channels, length, .. } => in_channels * length,
            LayerSpec::Relu { width } | LayerSpec::BatchNorm { width } => width,
        }
    }

    pub fn output_width(&self) -> usize {
        match *self {
            LayerSpec::Dense { outputs, .. } => outputs,
            LayerSpec::Conv1d { out_channels, .. } => out_channels * self.conv_output_length(),
            LayerSpec::Relu { width } | LayerSpec::BatchNorm { width } => width,
        }
    }

    /// Number of positions along the convolved axis; zero for other kinds.
    pub fn conv_output_length(&self) -> usize {
        match *self {
            LayerSpec::Conv1d { length, kernel, stride, .. } if kernel <= length && stride > 0 => {
                (length - kernel) / stride + 1
            }
            _ => 0,
        }
    }

    /// Weight entries (batchnorm scale counts here, but is never prunable).
    pub fn weight_count(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, outputs } => inputs * outputs,
            LayerSpec::Conv1d { in_channels, out_channels, kernel, .. } => {
                out_channels * in_channels * kernel
            }
            LayerSpec::Relu { .. } => 0,
            LayerSpec::BatchNorm { width } => width,
        }
    }

    /// Bias entries (batchnorm shift counts here).
    pub fn bias_count(&self) -> usize {
        match *self {
            LayerSpec::Dense { outputs, .. } => outputs,
            LayerSpec::Conv1d { out_channels, .. } => out_channels,
            LayerSpec::Relu { .. } => 0,
            LayerSpec::BatchNorm { width } => width,
        }
    }

    pub fn is_prunable(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv1d { .. })
    }

    /// Fan-in used by Kaiming initialization.
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv1d { in_channels, kernel, .. } => in_channels * kernel,
            _ => 0,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Dense { inputs, outputs } if inputs == 0 || outputs == 0 => {
                Err(Error::Config(format!("dense layer has a zero dimension: {inputs}->{outputs}")))
            }
            LayerSpec::Conv1d { in_channels, length, out_channels, kernel, stride } => {
                if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
                    Err(Error::Config(format!("conv1d has a zero dimension: {self:?}")))
                } else if kernel > length {
                    Err(Error::Config(format!("conv1d kernel {kernel} exceeds length {length}")))
                } else {
                    Ok(())
                }
            }
            LayerSpec::Relu { width } | LayerSpec::BatchNorm { width } if width == 0 => {
                Err(Error::Config("zero-width activation layer".into()))
            }
            _ => Ok(()),
        }
    }
}

/// A contiguous block of input columns and the layers applied to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputGroup {
    pub name: String,
    pub width: usize,
    /// Empty means the block is copied into the trunk input unchanged.
    #[serde(default)]
    pub layers: Vec<LayerSpec>,
}

impl InputGroup {
    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(self.width, LayerSpec::output_width)
    }
}

/// Sizes for the default feature-extractor + regressor model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub conv_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Hidden widths of the trunk; a final width-1 layer is always appended.
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { conv_channels: 4, kernel: 3, stride: 1, hidden: vec![64, 32] }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub groups: Vec<InputGroup>,
    pub trunk: Vec<LayerSpec>,
}

impl Architecture {
    /// A single passthrough input block feeding `layers`.
    pub fn sequential(layers: Vec<LayerSpec>) -> Result<Self> {
        let width = layers
            .first()
            .map(LayerSpec::input_width)
            .ok_or_else(|| Error::Config("empty layer list".into()))?;
        let arch = Self {
            groups: vec![InputGroup { name: "input".into(), width, layers: Vec::new() }],
            trunk: layers,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// One conv block per temporal feature group, concatenation, then the
    /// dense trunk with ReLU and batchnorm after every hidden layer.
    pub fn from_feature_groups(groups: &[FeatureGroup], cfg: &ModelConfig) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::Config("no feature groups".into()));
        }
        let mut inputs = Vec::with_capacity(groups.len());
        for g in groups {
            let mut layers = Vec::new();
            if g.temporal && g.length >= cfg.kernel && cfg.conv_channels > 0 {
                let conv = LayerSpec::conv1d(g.channels, g.length, cfg.conv_channels, cfg.kernel, cfg.stride);
                let w = conv.output_width();
                layers = vec![conv, LayerSpec::relu(w), LayerSpec::batch_norm(w)];
            }
            inputs.push(InputGroup { name: g.name.clone(), width: g.width(), layers });
        }
        let mut width: usize = inputs.iter().map(InputGroup::output_width).sum();
        let mut trunk = Vec::new();
        for &h in &cfg.hidden {
            trunk.push(LayerSpec::dense(width, h));
            trunk.push(LayerSpec::relu(h));
            trunk.push(LayerSpec::batch_norm(h));
            width = h;
        }
        trunk.push(LayerSpec::dense(width, 1));
        let arch = Self { groups: inputs, trunk };
        arch.validate()?;
        Ok(arch)
    }

    pub fn input_width(&self) -> usize {
        self.groups.iter().map(|g| g.width).sum()
    }

    /// Checks that every chain composes and the trunk ends in one output.
    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::Config("architecture has no input groups".into()));
        }
        for g in &self.groups {
            if g.width == 0 {
                return Err(Error::Config(format!("input group {} has zero width", g.name)));
            }
            check_chain(&g.name, g.width, &g.layers)?;
        }
        let trunk_in: usize = self.groups.iter().map(InputGroup::output_width).sum();
        check_chain("trunk", trunk_in, &self.trunk)?;
        let out = self.trunk.last().map_or(trunk_in, LayerSpec::output_width);
        if out != 1 {
            return Err(Error::Config(format!("model must end in a single output, got {out}")));
        }
        Ok(())
    }

    /// All layers in parameter order: each group's stack, then the trunk.
    pub fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.groups.iter().flat_map(|g| g.layers.iter()).chain(self.trunk.iter())
    }
}

fn check_chain(name: &str, mut width: usize, layers: &[LayerSpec]) -> Result<()> {
    for (i, layer) in layers.iter().enumerate() {
        layer.validate()?;
        if layer.input_width() != width {
            return Err(Error::Config(format!(
                "{name} layer {i} expects {} inputs but receives {width}",
                layer.input_width()
            )));
        }
        width = layer.output_width();
    }
    Ok(())
}
