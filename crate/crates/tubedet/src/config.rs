//! Single configuration surface for every command. A config file only
//! needs the fields it overrides; the rest keep their defaults. The
//! resolved merge is echoed (with per-field provenance) before any work
//! so a run can be reproduced from its own output.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::geometry::AnchorGrid;
use crate::tensor::{LrSchedule, SgdConfig};
use crate::tpn::{BackboneConfig, ProposalConfig};

/// Which stages run: proposals only, proposals plus within-clip
/// attention, or the whole cascade including the cross-clip graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineMode {
    Tpn,
    Short,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub frames_per_clip: usize,
    pub clip_stride: usize,
    pub channels: Vec<usize>,
    pub spatial_kernel: usize,
    pub temporal_kernel: usize,
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
    pub nms_iou: f64,
    pub proposal_cap: usize,
    pub lambda: f64,
    pub minibatch_size: usize,
    pub minibatch_pos_fraction: f64,
    pub match_iou: f64,
    pub d_h: usize,
    pub window_radius: usize,
    pub gamma: f64,
    pub dropout: f64,
    pub multi_label: bool,
    pub base_lr: f64,
    pub warmup_start_lr: f64,
    pub warmup_epochs: f64,
    pub epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub tpn_pretrain_epochs: usize,
    pub freeze_tpn_in_joint: bool,
    /// Global gradient-norm cap per step; 0 disables clipping.
    pub clip_grad_norm: f64,
    pub delta: f64,
    pub link_iou_weight: f64,
    pub mode: PipelineMode,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synth: SynthConfig::default(),
            frames_per_clip: 8,
            clip_stride: 8,
            channels: vec![8, 16, 32],
            spatial_kernel: 3,
            temporal_kernel: 3,
            anchor_scales: vec![12.0, 20.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            nms_iou: 0.7,
            proposal_cap: 300,
            lambda: 1.0,
            minibatch_size: 32,
            minibatch_pos_fraction: 0.5,
            match_iou: 0.5,
            d_h: 32,
            window_radius: 4,
            gamma: 1.0,
            dropout: 0.5,
            multi_label: false,
            base_lr: 0.001,
            warmup_start_lr: 0.0001,
            warmup_epochs: 0.3,
            epochs: 10,
            momentum: 0.9,
            weight_decay: 0.0001,
            tpn_pretrain_epochs: 3,
            freeze_tpn_in_joint: false,
            clip_grad_norm: 5.0,
            delta: 0.5,
            link_iou_weight: 1.0,
            mode: PipelineMode::Full,
            seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
        }
    }
}

/// Where each default comes from: `reference` values are the method's
/// standard settings; `local` values are desk-scale choices for the
/// synthetic corpus.
pub fn provenance() -> Vec<(&'static str, &'static str)> {
    vec![
        ("synth", "local"),
        ("frames_per_clip", "local"),
        ("clip_stride", "local"),
        ("channels", "local"),
        ("spatial_kernel", "local"),
        ("temporal_kernel", "local"),
        ("anchor_scales", "local"),
        ("anchor_ratios", "local"),
        ("nms_iou", "reference"),
        ("proposal_cap", "reference"),
        ("lambda", "reference"),
        ("minibatch_size", "local"),
        ("minibatch_pos_fraction", "local"),
        ("match_iou", "local"),
        ("d_h", "local"),
        ("window_radius", "reference"),
        ("gamma", "reference"),
        ("dropout", "reference"),
        ("multi_label", "local"),
        ("base_lr", "reference"),
        ("warmup_start_lr", "reference"),
        ("warmup_epochs", "reference"),
        ("epochs", "reference"),
        ("momentum", "reference"),
        ("weight_decay", "reference"),
        ("tpn_pretrain_epochs", "local"),
        ("freeze_tpn_in_joint", "local"),
        ("clip_grad_norm", "local"),
        ("delta", "reference"),
        ("link_iou_weight", "local"),
        ("mode", "local"),
        ("seed", "local"),
        ("data_dir", "local"),
        ("out_dir", "local"),
    ]
}

impl RunConfig {
    /// Accepts either a bare config document or a resolved echo (the
    /// wrapper with "config" and "provenance" keys), so a run can be
    /// repeated from its own output.
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let bad = |e: serde_json::Error| Error::format(path.display().to_string(), e.to_string());
        let doc: serde_json::Value = serde_json::from_str(&text).map_err(bad)?;
        let body = match &doc {
            serde_json::Value::Object(m) if m.contains_key("config") => &m["config"],
            _ => &doc,
        };
        let cfg: RunConfig = serde_json::from_value(body.clone()).map_err(bad)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Error::invalid("config", d);
        if self.frames_per_clip == 0 {
            return Err(bad("frames_per_clip must be positive".into()));
        }
        if self.clip_stride == 0 || self.clip_stride > self.frames_per_clip {
            return Err(bad(format!(
                "clip_stride {} outside 1..={}",
                self.clip_stride, self.frames_per_clip
            )));
        }
        if self.channels.is_empty() {
            return Err(bad("channels must not be empty".into()));
        }
        let stride = 1usize << self.channels.len();
        if self.synth.image_size % stride != 0 {
            return Err(bad(format!(
                "image_size {} not divisible by backbone stride {}",
                self.synth.image_size, stride
            )));
        }
        if self.anchor_scales.is_empty() || self.anchor_ratios.is_empty() {
            return Err(bad("anchor scales and ratios must not be empty".into()));
        }
        if !(0.0 < self.nms_iou && self.nms_iou <= 1.0) {
            return Err(bad(format!("nms_iou {} outside (0,1]", self.nms_iou)));
        }
        if self.proposal_cap == 0 {
            return Err(bad("proposal_cap must be positive".into()));
        }
        if self.lambda < 0.0 || self.gamma < 0.0 {
            return Err(bad("lambda and gamma must be nonnegative".into()));
        }
        if !(0.0 < self.match_iou && self.match_iou < 1.0) {
            return Err(bad(format!("match_iou {} outside (0,1)", self.match_iou)));
        }
        if !(0.0 < self.delta && self.delta < 1.0) {
            return Err(bad(format!("delta {} outside (0,1)", self.delta)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(bad(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if self.d_h == 0 {
            return Err(bad("d_h must be positive".into()));
        }
        if self.epochs == 0 || self.tpn_pretrain_epochs >= self.epochs {
            return Err(bad(format!(
                "need tpn_pretrain_epochs {} < epochs {}",
                self.tpn_pretrain_epochs, self.epochs
            )));
        }
        if self.minibatch_size == 0 || !(0.0..=1.0).contains(&self.minibatch_pos_fraction) {
            return Err(bad("bad minibatch settings".into()));
        }
        if self.link_iou_weight < 0.0 {
            return Err(bad("link_iou_weight must be nonnegative".into()));
        }
        if self.clip_grad_norm < 0.0 || !self.clip_grad_norm.is_finite() {
            return Err(bad(format!("clip_grad_norm {} must be finite and nonnegative", self.clip_grad_norm)));
        }
        Ok(())
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            t: self.frames_per_clip,
            channels: self.channels.clone(),
            spatial_kernel: self.spatial_kernel,
            temporal_kernel: self.temporal_kernel,
        }
    }

    pub fn anchor_grid(&self) -> AnchorGrid {
        let stride = 1usize << self.channels.len();
        AnchorGrid {
            feature_height: self.synth.image_size / stride,
            feature_width: self.synth.image_size / stride,
            stride,
            scales: self.anchor_scales.clone(),
            aspect_ratios: self.anchor_ratios.clone(),
            t: self.frames_per_clip,
        }
    }

    pub fn proposal_config(&self) -> ProposalConfig {
        ProposalConfig {
            nms_iou: self.nms_iou,
            keep_top: self.proposal_cap,
            image_w: self.synth.image_size as f64,
            image_h: self.synth.image_size as f64,
        }
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.base_lr,
            warmup_start_lr: self.warmup_start_lr,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs as f64,
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig { momentum: self.momentum, weight_decay: self.weight_decay }
    }

    /// Config plus provenance, pretty-printed; emitted before any command
    /// does work and written alongside run outputs.
    pub fn resolved_json(&self) -> Result<String> {
        let mut prov = serde_json::Map::new();
        for (field, source) in provenance() {
            prov.insert(field.to_string(), serde_json::Value::String(source.to_string()));
        }
        let doc = serde_json::json!({
            "config": self,
            "provenance": prov,
        });
        Ok(serde_json::to_string_pretty(&doc)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_settings() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.nms_iou, 0.7);
        assert_eq!(cfg.proposal_cap, 300);
        assert_eq!(cfg.window_radius, 4);
        assert_eq!(cfg.gamma, 1.0);
        assert_eq!(cfg.lambda, 1.0);
        assert_eq!(cfg.dropout, 0.5);
        assert_eq!(cfg.base_lr, 0.001);
        assert_eq!(cfg.warmup_start_lr, 0.0001);
        assert_eq!(cfg.warmup_epochs, 0.3);
        assert_eq!(cfg.epochs, 10);
        assert_eq!(cfg.momentum, 0.9);
        assert_eq!(cfg.weight_decay, 0.0001);
        cfg.validate().unwrap();
    }

    #[test]
    fn provenance_covers_every_field() {
        let value = serde_json::to_value(RunConfig::default()).unwrap();
        let fields: Vec<String> = value.as_object().unwrap().keys().cloned().collect();
        let prov = provenance();
        for f in &fields {
            assert!(prov.iter().any(|(name, _)| name == f), "missing provenance for {}", f);
        }
        assert_eq!(fields.len(), prov.len());
        for (_, source) in prov {
            assert!(source == "reference" || source == "local");
        }
    }

    #[test]
    fn partial_file_merges_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"window_radius": 6, "seed": 42}"#).unwrap();
        let cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg.window_radius, 6);
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.nms_iou, 0.7);

        std::fs::write(&path, r#"{"clip_stride": 0}"#).unwrap();
        assert!(RunConfig::from_file(&path).is_err());
        std::fs::write(&path, "not json").unwrap();
        assert!(RunConfig::from_file(&path).is_err());
    }

    #[test]
    fn resolved_echo_roundtrips() {
        let cfg = RunConfig { seed: 9, ..RunConfig::default() };
        let echo = cfg.resolved_json().unwrap();
        let doc: serde_json::Value = serde_json::from_str(&echo).unwrap();
        let back: RunConfig = serde_json::from_value(doc["config"].clone()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(doc["provenance"]["nms_iou"], "reference");
        assert_eq!(doc["provenance"]["d_h"], "local");
    }

    #[test]
    fn validation_rejects_bad_settings() {
        let base = RunConfig::default();
        let cases = [
            RunConfig { nms_iou: 0.0, ..base.clone() },
            RunConfig { delta: 1.0, ..base.clone() },
            RunConfig { dropout: 1.0, ..base.clone() },
            RunConfig { epochs: 2, tpn_pretrain_epochs: 2, ..base.clone() },
            RunConfig { channels: vec![], ..base.clone() },
            RunConfig {
                synth: SynthConfig { image_size: 60, ..SynthConfig::default() },
                ..base.clone()
            },
        ];
        for c in cases {
            assert!(c.validate().is_err());
        }
    }
}
