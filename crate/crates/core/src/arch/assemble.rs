use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::geometry::analyze_geometry;
use super::spec::{
    context_block_name, context_network_spec, BranchSpec, ContextNetConfig, HeadSpec, LayerKind,
    NetworkSpec, Role, SkipEdge,
};
use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Classic skip topology: the stride-x pools up to the trunk top.
    Fcn,
    /// Every feature map from the stride-x pool onward, context blocks included.
    Ifcn,
    /// FCN pool skips plus every context block output.
    IfcnA,
    /// FCN pool skips plus only the last context block output.
    IfcnB,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Fcn, Variant::Ifcn, Variant::IfcnA, Variant::IfcnB];

    pub fn uses_context(self) -> bool {
        self != Variant::Fcn
    }

    /// Display name for a stride: `ifcn-8s`, `ifcn-8s-a`, ...
    pub fn model_name(self, x: usize) -> String {
        match self {
            Variant::Fcn => format!("fcn-{x}s"),
            Variant::Ifcn => format!("ifcn-{x}s"),
            Variant::IfcnA => format!("ifcn-{x}s-a"),
            Variant::IfcnB => format!("ifcn-{x}s-b"),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Fcn => "fcn",
            Variant::Ifcn => "ifcn",
            Variant::IfcnA => "ifcn-a",
            Variant::IfcnB => "ifcn-b",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown variant '{s}' (expected fcn, ifcn, ifcn-a or ifcn-b)"
                ))
            })
    }
}

/// Builds a segmentation network: trunk (+ context net) with score branches
/// fused at stride `x` and one final deconv back to input resolution.
pub fn assemble(
    variant: Variant,
    backbone: &NetworkSpec,
    ctx: Option<&ContextNetConfig>,
    x: usize,
    classes: usize,
) -> Result<NetworkSpec> {
    if classes < 2 || classes > 255 {
        return Err(Error::config(format!(
            "class count must be in 2..=255, got {classes}"
        )));
    }
    if x == 0 {
        return Err(Error::geometry("fusion stride must be positive"));
    }
    backbone.validate()?;
    let mut layers: Vec<_> = backbone
        .layers
        .iter()
        .filter(|l| variant == Variant::Fcn || l.role != Role::Classifier)
        .cloned()
        .collect();
    let backbone_top = layers
        .iter()
        .rev()
        .find(|l| l.kind.is_feature_map())
        .map(|l| l.name.clone())
        .ok_or_else(|| Error::config("backbone has no feature maps"))?;
    match (variant.uses_context(), ctx) {
        (false, Some(_)) => return Err(Error::config("FCN variants take no context network")),
        (true, None) => {
            return Err(Error::config(format!(
                "{} needs a context network",
                variant.model_name(x)
            )))
        }
        _ => {}
    }
    let channels = layers
        .last()
        .map_or(backbone.input_channels, |l| l.out_channels);
    if let Some(cfg) = ctx {
        if cfg.input_channels != channels {
            return Err(Error::config(format!(
                "context network expects {} input channels, backbone gives {channels}",
                cfg.input_channels
            )));
        }
        layers.extend(context_network_spec(cfg)?);
    }
    let mut spec = NetworkSpec::trunk(variant.model_name(x), backbone.input_channels, layers);
    let geometry = analyze_geometry(&spec);
    let jump_of = |name: &str| geometry.get(name).map_or(0, |g| g.jump);
    let top_jump = jump_of(&backbone_top);
    if top_jump % x != 0
        || !spec
            .layers
            .iter()
            .any(|l| l.kind.is_feature_map() && jump_of(&l.name) == x)
    {
        return Err(Error::geometry(format!(
            "fusion stride {x} is not achievable on a trunk with feature-map jumps {:?}",
            spec.layers
                .iter()
                .filter(|l| l.kind == LayerKind::Maxpool)
                .map(|l| jump_of(&l.name))
                .collect::<Vec<_>>()
        )));
    }
    let skip_pools: Vec<String> = spec
        .layers
        .iter()
        .filter(|l| l.kind == LayerKind::Maxpool && (x..top_jump).contains(&jump_of(&l.name)))
        .map(|l| l.name.clone())
        .collect();
    let context_maps: Vec<String> =
        ctx.map_or(Vec::new(), |c| (1..=c.m).map(context_block_name).collect());
    let sources: Vec<String> = match variant {
        Variant::Fcn => skip_pools.into_iter().chain([backbone_top]).collect(),
        Variant::Ifcn => {
            let start = spec
                .layers
                .iter()
                .position(|l| l.kind == LayerKind::Maxpool && jump_of(&l.name) == x)
                .ok_or_else(|| Error::geometry(format!("no pooling layer produces stride {x}")))?;
            spec.layers[start..]
                .iter()
                .filter(|l| l.kind.is_feature_map())
                .map(|l| l.name.clone())
                .collect()
        }
        Variant::IfcnA => skip_pools.into_iter().chain(context_maps).collect(),
        Variant::IfcnB => skip_pools
            .into_iter()
            .chain(context_maps.last().cloned())
            .collect(),
    };
    spec.skip_edges = sources
        .into_iter()
        .map(|source| {
            let upsample = jump_of(&source) / x;
            SkipEdge {
                source,
                branch: BranchSpec { classes, upsample },
            }
        })
        .collect();
    spec.fusion_stride = Some(x);
    spec.head = Some(HeadSpec { upsample: x });
    spec.validate()?;
    Ok(spec)
}
