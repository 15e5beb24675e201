//! The full detector as one parameter set, plus its checkpoint format.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use rand::Rng;

use crate::config::{PipelineMode, RunConfig};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::long_term::{ClassMode, Classifier, LtrParams, RelationParams};
use crate::records::write_atomic;
use crate::short_term::{StrParams, ROI_SIZE};
use crate::tensor::{ParamSet, Parameter, Tensor};
use crate::tpn::Tpn;

/// Stage parameters for one pipeline mode. Proposal-only mode classifies
/// an embedded RoI feature; short mode classifies the fused human-context
/// feature; full mode additionally propagates features through the
/// cross-clip relation graph before classifying.
pub struct Model {
    pub mode: PipelineMode,
    pub num_classes: usize,
    pub tpn: Tpn,
    pub embed: Option<Linear>,
    pub short: Option<StrParams>,
    pub ltr: Option<LtrParams>,
    pub head: Option<Classifier>,
}

impl Model {
    pub fn new(cfg: &RunConfig, rng: &mut impl Rng) -> Result<Model> {
        cfg.validate()?;
        let backbone = cfg.backbone();
        let c_out = backbone.out_channels();
        let t = cfg.frames_per_clip;
        let k = cfg.synth.num_classes;
        let anchors_per_cell = cfg.anchor_scales.len() * cfg.anchor_ratios.len();
        let tpn = Tpn::new(backbone, anchors_per_cell, rng)?;
        let class_mode = if cfg.multi_label { ClassMode::MultiLabel } else { ClassMode::SingleLabel };
        let fused_d = cfg.d_h + c_out;
        let (embed, short, ltr, head) = match cfg.mode {
            PipelineMode::Tpn => {
                let embed = Linear::new(t * ROI_SIZE * ROI_SIZE * c_out, cfg.d_h, 0.01, rng);
                let head = Classifier::new(cfg.d_h, k, class_mode, cfg.dropout, rng)?;
                (Some(embed), None, None, Some(head))
            }
            PipelineMode::Short => {
                let short = StrParams::new(t, c_out, cfg.d_h, rng);
                let head = Classifier::new(fused_d, k, class_mode, cfg.dropout, rng)?;
                (None, Some(short), None, Some(head))
            }
            PipelineMode::Full => {
                let short = StrParams::new(t, c_out, cfg.d_h, rng);
                let ltr = LtrParams {
                    relation: RelationParams::new(fused_d, cfg.gamma, rng),
                    classifier: Classifier::new(fused_d, k, class_mode, cfg.dropout, rng)?,
                };
                (None, Some(short), Some(ltr), None)
            }
        };
        Ok(Model { mode: cfg.mode, num_classes: k, tpn, embed, short, ltr, head })
    }

    /// Width of the per-tubelet feature each mode classifies.
    pub fn feature_dim(&self) -> usize {
        match self.mode {
            PipelineMode::Tpn => self.embed.as_ref().expect("tpn mode").d_out(),
            PipelineMode::Short | PipelineMode::Full => {
                let s = self.short.as_ref().expect("short params");
                s.d()
            }
        }
    }

    pub fn classifier(&self) -> &Classifier {
        match self.mode {
            PipelineMode::Full => &self.ltr.as_ref().expect("full mode").classifier,
            _ => self.head.as_ref().expect("head"),
        }
    }
}

impl ParamSet for Model {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.tpn.visit_params(f);
        if let Some(embed) = &mut self.embed {
            f("embed.weight", &mut embed.weight);
            f("embed.bias", &mut embed.bias);
        }
        if let Some(short) = &mut self.short {
            short.visit(f);
        }
        if let Some(ltr) = &mut self.ltr {
            ltr.visit(f);
        }
        if let Some(head) = &mut self.head {
            head.visit(f);
        }
    }
}

const CKPT_MAGIC: &[u8; 8] = b"TBDTCKP1";

/// Checkpoint: 8-byte magic, little-endian u32 block count, then per
/// block a u32-length-prefixed UTF-8 parameter name, u32 rank, that many
/// u32 dims, and the row-major f64 values.
pub fn save_checkpoint(path: &Path, model: &mut Model) -> Result<()> {
    let mut blocks: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    model.visit_params(&mut |name, p| {
        blocks.push((name.to_string(), p.value.shape().to_vec(), p.value.data().to_vec()));
    });
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CKPT_MAGIC);
    bytes.extend_from_slice(&u32::try_from(blocks.len()).expect("few blocks").to_le_bytes());
    for (name, shape, data) in &blocks {
        bytes.extend_from_slice(&u32::try_from(name.len()).expect("short name").to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&u32::try_from(shape.len()).expect("small rank").to_le_bytes());
        for &d in shape {
            let d32 = u32::try_from(d)
                .map_err(|_| Error::invalid("save_checkpoint", format!("dim {} exceeds u32", d)))?;
            bytes.extend_from_slice(&d32.to_le_bytes());
        }
        for &v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &bytes)
}

/// Loads named blocks into an already-built model. Every model parameter
/// must be present with a matching shape, and every block must be used.
pub fn load_checkpoint(path: &Path, model: &mut Model) -> Result<()> {
    let name = path.display().to_string();
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::format(name.clone(), "truncated checkpoint"));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 8)? != CKPT_MAGIC {
        return Err(Error::format(name, "bad magic"));
    }
    let read_u32 = |pos: &mut usize| -> Result<usize> {
        let b = take(pos, 4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    };
    let count = read_u32(&mut pos)?;
    let mut blocks: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut pos)?;
        let block_name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::format(name.clone(), "non-utf8 block name"))?;
        let rank = read_u32(&mut pos)?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut pos)?);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(name.clone(), "dims overflow"))?;
        let raw = take(&mut pos, len * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if blocks.insert(block_name.clone(), Tensor::from_vec(&shape, data)?).is_some() {
            return Err(Error::format(name, format!("duplicate block {:?}", block_name)));
        }
    }
    if pos != bytes.len() {
        return Err(Error::format(name, "trailing bytes after blocks"));
    }
    let mut missing = Vec::new();
    let mut shape_err = None;
    model.visit_params(&mut |param_name, p| {
        match blocks.remove(param_name) {
            Some(t) if t.shape() == p.value.shape() => p.value = t,
            Some(t) => {
                shape_err.get_or_insert(format!(
                    "{}: checkpoint shape {:?}, model shape {:?}",
                    param_name,
                    t.shape(),
                    p.value.shape()
                ));
            }
            None => missing.push(param_name.to_string()),
        }
    });
    if let Some(detail) = shape_err {
        return Err(Error::format(name, detail));
    }
    if !missing.is_empty() {
        return Err(Error::format(name, format!("missing blocks {:?}", missing)));
    }
    if !blocks.is_empty() {
        let extra: Vec<String> = blocks.keys().cloned().collect();
        return Err(Error::format(name, format!("unused blocks {:?}", extra)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::param_count;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(mode: PipelineMode) -> RunConfig {
        RunConfig {
            mode,
            synth: crate::data::SynthConfig {
                image_size: 32,
                num_classes: 3,
                ..Default::default()
            },
            channels: vec![4, 8],
            frames_per_clip: 4,
            clip_stride: 4,
            d_h: 6,
            ..RunConfig::default()
        }
    }

    #[test]
    fn param_names_unique_per_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for mode in [PipelineMode::Tpn, PipelineMode::Short, PipelineMode::Full] {
            let mut model = Model::new(&small_cfg(mode), &mut rng).unwrap();
            let mut names = std::collections::BTreeSet::new();
            model.visit_params(&mut |n, _| {
                assert!(names.insert(n.to_string()), "duplicate param {}", n);
            });
            assert!(names.len() > 8);
        }
    }

    #[test]
    fn feature_dims_per_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tpn = Model::new(&small_cfg(PipelineMode::Tpn), &mut rng).unwrap();
        assert_eq!(tpn.feature_dim(), 6);
        let full = Model::new(&small_cfg(PipelineMode::Full), &mut rng).unwrap();
        assert_eq!(full.feature_dim(), 6 + 8);
        assert_eq!(full.classifier().k(), 3);
    }

    #[test]
    fn checkpoint_roundtrip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = small_cfg(PipelineMode::Full);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = Model::new(&cfg, &mut rng).unwrap();
        save_checkpoint(&path, &mut a).unwrap();

        // different init, then load: parameters must match bit for bit
        let mut rng2 = ChaCha8Rng::seed_from_u64(99);
        let mut b = Model::new(&cfg, &mut rng2).unwrap();
        load_checkpoint(&path, &mut b).unwrap();
        let mut a_params: Vec<(String, Vec<f64>)> = Vec::new();
        a.visit_params(&mut |n, p| a_params.push((n.to_string(), p.value.data().to_vec())));
        let mut idx = 0;
        b.visit_params(&mut |n, p| {
            assert_eq!(n, a_params[idx].0);
            assert_eq!(p.value.data(), &a_params[idx].1[..]);
            idx += 1;
        });
        assert_eq!(param_count(&mut b), param_count(&mut a));
    }

    #[test]
    fn checkpoint_mismatches_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tpn_model = Model::new(&small_cfg(PipelineMode::Tpn), &mut rng).unwrap();
        save_checkpoint(&path, &mut tpn_model).unwrap();

        // full model wants blocks the proposal-only checkpoint lacks
        let mut full = Model::new(&small_cfg(PipelineMode::Full), &mut rng).unwrap();
        assert!(matches!(load_checkpoint(&path, &mut full), Err(Error::Format { .. })));

        // narrower head: same names, wrong shapes
        let mut narrow =
            Model::new(&RunConfig { d_h: 4, ..small_cfg(PipelineMode::Tpn) }, &mut rng).unwrap();
        assert!(matches!(load_checkpoint(&path, &mut narrow), Err(Error::Format { .. })));

        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, b"WRONGMAG\x00\x00\x00\x00").unwrap();
        assert!(matches!(load_checkpoint(&bad, &mut tpn_model), Err(Error::Format { .. })));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() / 2);
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&bad, &mut tpn_model), Err(Error::Format { .. })));
    }
}
