//! Run configuration documents.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::{
    assemble, mini_backbone_spec, vgg16_spec, ContextNetConfig, NetworkSpec, Variant,
};
use crate::data::{generate_dataset, read_dataset, Dataset, SceneConfig};
use crate::error::{Error, Result};
use crate::train::TrainConfig;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    Mini,
    Vgg16,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Per-stage widths of the mini backbone.
    pub widths: Vec<usize>,
    pub stages: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            kind: BackboneKind::Mini,
            widths: vec![4, 8, 16, 16, 16],
            stages: 5,
        }
    }
}

impl BackboneConfig {
    pub fn spec(&self) -> Result<NetworkSpec> {
        match self.kind {
            BackboneKind::Mini => mini_backbone_spec(&self.widths, self.stages),
            BackboneKind::Vgg16 => Ok(vgg16_spec()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContextConfig {
    pub k: usize,
    pub m: usize,
    pub hidden: usize,
    pub tied: bool,
    /// Doubles the hidden width.
    pub wide: bool,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig {
            k: 5,
            m: 3,
            hidden: 16,
            tied: false,
            wide: false,
        }
    }
}

impl ContextConfig {
    pub fn net_config(&self, input_channels: usize) -> ContextNetConfig {
        let hidden = if self.wide {
            2 * self.hidden
        } else {
            self.hidden
        };
        ContextNetConfig::new(self.k, self.m, input_channels)
            .hidden(hidden)
            .tied(self.tied)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub variant: Variant,
    pub x: usize,
    pub classes: usize,
    pub backbone: BackboneConfig,
    /// Used by the variants that carry a context network.
    pub context: ContextConfig,
    pub init_seed: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            variant: Variant::Ifcn,
            x: 8,
            classes: 5,
            backbone: BackboneConfig::default(),
            context: ContextConfig::default(),
            init_seed: 0,
        }
    }
}

impl ArchConfig {
    pub fn backbone_spec(&self) -> Result<NetworkSpec> {
        self.backbone.spec()
    }

    /// Context network config sized to the backbone output.
    pub fn context_net(&self) -> Result<ContextNetConfig> {
        let backbone = self.backbone_spec()?;
        let channels = backbone
            .layers
            .iter()
            .rev()
            .find(|l| l.role != crate::arch::Role::Classifier)
            .map_or(backbone.input_channels, |l| l.out_channels);
        Ok(self.context.net_config(channels))
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        let backbone = self.backbone_spec()?;
        let ctx = if self.variant.uses_context() {
            Some(self.context_net()?)
        } else {
            None
        };
        assemble(self.variant, &backbone, ctx.as_ref(), self.x, self.classes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub scene: SceneConfig,
    pub train_count: usize,
    pub val_count: usize,
    /// Read samples from a dataset directory instead of generating them.
    /// Training uses the first `train_count`, validation the next `val_count`.
    pub dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            scene: SceneConfig::default(),
            train_count: 400,
            val_count: 100,
            dir: None,
        }
    }
}

impl DataConfig {
    /// Training and validation splits.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        if self.train_count == 0 || self.val_count == 0 {
            return Err(Error::config("train_count and val_count must be positive"));
        }
        match &self.dir {
            Some(dir) => {
                let (all, _) = read_dataset(dir)?;
                let need = self.train_count + self.val_count;
                if all.len() < need {
                    return Err(Error::data(format!(
                        "{} holds {} samples, {need} requested",
                        dir.display(),
                        all.len()
                    )));
                }
                Ok((
                    all.slice(0, self.train_count),
                    all.slice(self.train_count, need),
                ))
            }
            None => Ok((
                generate_dataset(&self.scene, 0, self.train_count)?,
                generate_dataset(&self.scene, self.train_count as u64, self.val_count)?,
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: ArchConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        if text.trim().is_empty() {
            return Err(Error::config("config document is empty"));
        }
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run configs always serialize")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.scene.validate()?;
        if self.data.dir.is_none() && self.data.scene.classes != self.arch.classes {
            return Err(Error::config(format!(
                "scene has {} classes but the model predicts {}",
                self.data.scene.classes, self.arch.classes
            )));
        }
        self.arch.network_spec()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            RunConfig::from_json(r#"{"arch": {"depth": 3}}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_json(r#"{"extra": 1}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(RunConfig::from_json("  "), Err(Error::Config(_))));
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = RunConfig::from_json(r#"{"arch": {"variant": "fcn"}}"#).unwrap();
        assert_eq!(cfg.arch.variant, Variant::Fcn);
        assert_eq!(cfg.train.epochs, 25);
    }

    #[test]
    fn wide_doubles_hidden() {
        let c = ContextConfig {
            wide: true,
            ..ContextConfig::default()
        };
        assert_eq!(c.net_config(16).hidden, 32);
    }
}
