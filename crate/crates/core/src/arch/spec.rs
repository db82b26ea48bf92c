use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Conv,
    Maxpool,
    Bn,
    Relu,
    Deconv,
    Score,
    SumJunction,
}

impl LayerKind {
    /// Layers whose output is a distinct feature map (as opposed to an
    /// elementwise refinement of the previous one).
    pub fn is_feature_map(self) -> bool {
        matches!(
            self,
            LayerKind::Conv | LayerKind::Maxpool | LayerKind::Score
        )
    }

    pub fn is_elementwise(self) -> bool {
        matches!(self, LayerKind::Bn | LayerKind::Relu)
    }
}

/// Which part of a network a layer belongs to; drives parameter groups and counting.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    #[default]
    Backbone,
    /// Classification head of the pretrained trunk (fc6/fc7), dropped by IFCN variants.
    Classifier,
    Context,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub pad: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tie_group: Option<String>,
    #[serde(default)]
    pub role: Role,
}

impl LayerSpec {
    pub fn conv(
        name: impl Into<String>,
        k: usize,
        stride: usize,
        pad: usize,
        cin: usize,
        cout: usize,
    ) -> Self {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::Conv,
            kernel: (k, k),
            stride,
            pad,
            in_channels: cin,
            out_channels: cout,
            tie_group: None,
            role: Role::Backbone,
        }
    }

    pub fn maxpool(name: impl Into<String>, k: usize, stride: usize, channels: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Maxpool,
            ..LayerSpec::conv(name, k, stride, 0, channels, channels)
        }
    }

    pub fn elementwise(name: impl Into<String>, kind: LayerKind, channels: usize) -> Self {
        LayerSpec {
            kind,
            ..LayerSpec::conv(name, 1, 1, 0, channels, channels)
        }
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }
}

/// One shortcut branch: a 1x1 score layer followed by an upsampler onto the fusion grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchSpec {
    pub classes: usize,
    /// Ratio between the source jump and the fusion stride; 1 means no upsampling.
    pub upsample: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkipEdge {
    pub source: String,
    pub branch: BranchSpec,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub upsample: usize,
}

/// Declarative network: a trunk chain plus skip branches fused at one stride.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub name: String,
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub skip_edges: Vec<SkipEdge>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion_stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<HeadSpec>,
}

impl NetworkSpec {
    pub fn trunk(name: impl Into<String>, input_channels: usize, layers: Vec<LayerSpec>) -> Self {
        NetworkSpec {
            name: name.into(),
            input_channels,
            layers,
            skip_edges: Vec::new(),
            fusion_stride: None,
            head: None,
        }
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Index of the layer whose output is the tap point for feature map `name`:
    /// the named layer followed by any trailing BN/ReLU layers.
    pub fn tap_index(&self, name: &str) -> Option<usize> {
        let start = self.layer_index(name)?;
        let mut end = start;
        while end + 1 < self.layers.len() && self.layers[end + 1].kind.is_elementwise() {
            end += 1;
        }
        Some(end)
    }

    /// Channels of the trunk output.
    pub fn output_channels(&self) -> usize {
        self.layers
            .last()
            .map_or(self.input_channels, |l| l.out_channels)
    }

    pub fn classes(&self) -> Option<usize> {
        self.skip_edges.first().map(|e| e.branch.classes)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: NetworkSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network specs always serialize")
    }

    /// Structural checks: unique names, a consistent channel chain, trunk-only
    /// layer kinds and resolvable skip sources.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config(format!(
                "network '{}' has no layers",
                self.name
            )));
        }
        let mut names = HashSet::new();
        let mut channels = self.input_channels;
        for l in &self.layers {
            if !names.insert(l.name.as_str()) {
                return Err(Error::config(format!("duplicate layer name '{}'", l.name)));
            }
            if l.kernel.0 == 0 || l.kernel.1 == 0 || l.stride == 0 {
                return Err(Error::config(format!(
                    "layer '{}': kernel and stride must be positive",
                    l.name
                )));
            }
            if matches!(l.kind, LayerKind::Deconv | LayerKind::SumJunction) {
                return Err(Error::config(format!(
                    "layer '{}': {:?} layers belong to branches, not the trunk chain",
                    l.name, l.kind
                )));
            }
            if l.in_channels != channels {
                return Err(Error::config(format!(
                    "layer '{}' expects {} input channels but receives {channels}",
                    l.name, l.in_channels
                )));
            }
            if !matches!(l.kind, LayerKind::Conv | LayerKind::Score)
                && l.out_channels != l.in_channels
            {
                return Err(Error::config(format!(
                    "layer '{}' cannot change the channel count",
                    l.name
                )));
            }
            channels = l.out_channels;
        }
        let mut tie_shapes = std::collections::HashMap::new();
        for l in self.layers.iter().filter(|l| l.tie_group.is_some()) {
            let key = (l.kernel, l.in_channels, l.out_channels);
            let group = l.tie_group.as_deref().unwrap_or_default();
            if *tie_shapes.entry(group).or_insert(key) != key {
                return Err(Error::config(format!(
                    "tie group '{group}' mixes layer shapes (layer '{}')",
                    l.name
                )));
            }
        }
        let mut sources = HashSet::new();
        for edge in &self.skip_edges {
            let layer = self.layer(&edge.source).ok_or_else(|| {
                Error::config(format!(
                    "skip source '{}' is not a trunk layer",
                    edge.source
                ))
            })?;
            if !layer.kind.is_feature_map() {
                return Err(Error::config(format!(
                    "skip source '{}' is not a feature map layer",
                    edge.source
                )));
            }
            if !sources.insert(edge.source.as_str()) {
                return Err(Error::config(format!(
                    "duplicate skip source '{}'",
                    edge.source
                )));
            }
            if edge.branch.upsample == 0 || edge.branch.classes == 0 {
                return Err(Error::config(format!(
                    "skip '{}': classes and upsample factor must be positive",
                    edge.source
                )));
            }
            if Some(edge.branch.classes) != self.classes() {
                return Err(Error::config("all branches must predict the same classes"));
            }
        }
        if !self.skip_edges.is_empty() {
            let x = self
                .fusion_stride
                .ok_or_else(|| Error::config("skip edges present but no fusion stride"))?;
            let geometry = super::analyze_geometry(self);
            for edge in &self.skip_edges {
                let jump = geometry
                    .get(&edge.source)
                    .map(|g| g.jump)
                    .unwrap_or_default();
                if jump != x * edge.branch.upsample {
                    return Err(Error::geometry(format!(
                        "skip '{}' has jump {jump}, which upsample {} does not map onto stride {x}",
                        edge.source, edge.branch.upsample
                    )));
                }
            }
            match &self.head {
                Some(h) if h.upsample == x => {}
                _ => {
                    return Err(Error::config(format!(
                        "head must upsample by the fusion stride {x}"
                    )))
                }
            }
        }
        Ok(())
    }
}

/// Context network shape: `m` blocks of `k x k` conv + BN + ReLU.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextNetConfig {
    pub k: usize,
    pub m: usize,
    #[serde(default = "ContextNetConfig::default_hidden")]
    pub hidden: usize,
    #[serde(default)]
    pub tied: bool,
    pub input_channels: usize,
}

impl ContextNetConfig {
    pub const DEFAULT_HIDDEN: usize = 512;

    fn default_hidden() -> usize {
        Self::DEFAULT_HIDDEN
    }

    pub fn new(k: usize, m: usize, input_channels: usize) -> Self {
        ContextNetConfig {
            k,
            m,
            hidden: Self::DEFAULT_HIDDEN,
            tied: false,
            input_channels,
        }
    }

    pub fn hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn tied(mut self, tied: bool) -> Self {
        self.tied = tied;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k % 2 == 0 {
            return Err(Error::config(format!(
                "context kernel {} must be odd",
                self.k
            )));
        }
        if self.m == 0 || self.hidden == 0 || self.input_channels == 0 {
            return Err(Error::config(
                "context depth, width and input channels must be positive",
            ));
        }
        if self.tied && self.hidden != self.input_channels {
            return Err(Error::config(format!(
                "tied context blocks need hidden ({}) == input channels ({})",
                self.hidden, self.input_channels
            )));
        }
        Ok(())
    }
}

/// Name of the feature map produced by context block `i` (1-based).
pub fn context_block_name(i: usize) -> String {
    format!("ctx{i}")
}

/// Trunk-extension layers of a context network. Every block is a
/// same-padded stride-1 conv followed by BN and ReLU; tied blocks share one
/// tie group.
pub fn context_network_spec(cfg: &ContextNetConfig) -> Result<Vec<LayerSpec>> {
    cfg.validate()?;
    let pad = (cfg.k - 1) / 2;
    let mut layers = Vec::with_capacity(3 * cfg.m);
    for i in 1..=cfg.m {
        let name = context_block_name(i);
        let cin = if i == 1 {
            cfg.input_channels
        } else {
            cfg.hidden
        };
        let mut conv =
            LayerSpec::conv(&name, cfg.k, 1, pad, cin, cfg.hidden).with_role(Role::Context);
        if cfg.tied {
            conv.tie_group = Some("ctx".to_string());
        }
        layers.push(conv);
        layers.push(
            LayerSpec::elementwise(format!("{name}/bn"), LayerKind::Bn, cfg.hidden)
                .with_role(Role::Context),
        );
        layers.push(
            LayerSpec::elementwise(format!("{name}/relu"), LayerKind::Relu, cfg.hidden)
                .with_role(Role::Context),
        );
    }
    Ok(layers)
}

/// VGG-16 trunk conv1_1 .. pool5 plus fc6 (7x7, 4096) and fc7 (1x1, 4096) as convs.
pub fn vgg16_spec() -> NetworkSpec {
    let stages: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];
    let mut layers = Vec::new();
    let mut cin = 3;
    for (s, &(width, convs)) in stages.iter().enumerate() {
        for j in 1..=convs {
            let name = format!("conv{}_{j}", s + 1);
            layers.push(LayerSpec::conv(&name, 3, 1, 1, cin, width));
            layers.push(LayerSpec::elementwise(
                format!("{name}/relu"),
                LayerKind::Relu,
                width,
            ));
            cin = width;
        }
        layers.push(LayerSpec::maxpool(format!("pool{}", s + 1), 2, 2, width));
    }
    for (name, k, pad, cin, cout) in [("fc6", 7, 3, 512, 4096), ("fc7", 1, 0, 4096, 4096)] {
        layers.push(LayerSpec::conv(name, k, 1, pad, cin, cout).with_role(Role::Classifier));
        layers.push(
            LayerSpec::elementwise(format!("{name}/relu"), LayerKind::Relu, cout)
                .with_role(Role::Classifier),
        );
    }
    NetworkSpec::trunk("vgg16", 3, layers)
}

/// Desk-scale VGG-style trunk: per stage two 3x3 conv + BN + ReLU blocks and a
/// 2x2/2 max pool, named exactly like VGG-16 (`conv{s}_{j}`, `pool{s}`).
pub fn mini_backbone_spec(widths: &[usize], stages: usize) -> Result<NetworkSpec> {
    if !(3..=5).contains(&stages) {
        return Err(Error::config(format!(
            "mini backbone needs 3..=5 stages, got {stages}"
        )));
    }
    if widths.len() != stages || widths.contains(&0) {
        return Err(Error::config(format!(
            "mini backbone needs {stages} positive stage widths, got {widths:?}"
        )));
    }
    let mut layers = Vec::new();
    let mut cin = 3;
    for (s, &width) in widths.iter().enumerate() {
        for j in 1..=2 {
            let name = format!("conv{}_{j}", s + 1);
            layers.push(LayerSpec::conv(&name, 3, 1, 1, cin, width));
            layers.push(LayerSpec::elementwise(
                format!("{name}/bn"),
                LayerKind::Bn,
                width,
            ));
            layers.push(LayerSpec::elementwise(
                format!("{name}/relu"),
                LayerKind::Relu,
                width,
            ));
            cin = width;
        }
        layers.push(LayerSpec::maxpool(format!("pool{}", s + 1), 2, 2, width));
    }
    Ok(NetworkSpec::trunk(format!("mini{stages}"), 3, layers))
}
