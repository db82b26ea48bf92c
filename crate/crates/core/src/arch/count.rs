use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use super::bilinear::bilinear_kernel_size;
use super::spec::{LayerKind, NetworkSpec, Role};
use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ParamConvention {
    /// `k_h * k_w * C_in * C_out` over context-network convs, each tie group once.
    ContextConvWeights,
    /// Every learnable scalar of the instantiated model.
    All,
}

impl FromStr for ParamConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "context-conv-weights" => Ok(ParamConvention::ContextConvWeights),
            "all" => Ok(ParamConvention::All),
            other => Err(Error::config(format!(
                "unknown parameter convention '{other}' (expected context-conv-weights or all)"
            ))),
        }
    }
}

impl fmt::Display for ParamConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamConvention::ContextConvWeights => "context-conv-weights",
            ParamConvention::All => "all",
        })
    }
}

/// A conv carries a bias unless a BN layer directly follows it.
pub fn conv_has_bias(spec: &NetworkSpec, index: usize) -> bool {
    !matches!(spec.layers.get(index + 1), Some(l) if l.kind == LayerKind::Bn)
}

pub fn count_params(spec: &NetworkSpec, convention: ParamConvention) -> u64 {
    let mut seen = HashSet::new();
    let mut total = 0u64;
    for (i, l) in spec.layers.iter().enumerate() {
        if let Some(group) = &l.tie_group {
            if !seen.insert(group.clone()) {
                continue;
            }
        }
        let weights = (l.kernel.0 * l.kernel.1 * l.in_channels * l.out_channels) as u64;
        total += match (convention, l.kind) {
            (ParamConvention::ContextConvWeights, LayerKind::Conv) if l.role == Role::Context => {
                weights
            }
            (ParamConvention::ContextConvWeights, _) => 0,
            (ParamConvention::All, LayerKind::Conv | LayerKind::Score) => {
                weights
                    + if conv_has_bias(spec, i) {
                        l.out_channels as u64
                    } else {
                        0
                    }
            }
            (ParamConvention::All, LayerKind::Bn) => 2 * l.out_channels as u64,
            (ParamConvention::All, _) => 0,
        };
    }
    if convention == ParamConvention::All {
        for edge in &spec.skip_edges {
            let source = spec
                .tap_index(&edge.source)
                .map_or(0, |i| spec.layers[i].out_channels);
            let classes = edge.branch.classes as u64;
            total += source as u64 * classes + classes;
            total += deconv_params(edge.branch.upsample, classes);
        }
        if let (Some(head), Some(classes)) = (&spec.head, spec.classes()) {
            total += deconv_params(head.upsample, classes as u64);
        }
    }
    total
}

fn deconv_params(factor: usize, classes: u64) -> u64 {
    if factor < 2 {
        return 0;
    }
    let k = bilinear_kernel_size(factor) as u64;
    classes * k * k
}
