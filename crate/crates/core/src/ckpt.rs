//! Checkpoint I/O.
//!
//! Transformer checkpoints are a versioned binary: the magic string
//! `PTPCKPT`, a format version, a JSON config block, and the flat parameter
//! array in declared layout order (f64, little-endian). PTP student
//! checkpoints carry an extra config block with the variant, embedding kind,
//! and window. Tabular models serialize as their textual table.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PtpError, Result};
use crate::harness::atomic_write;
use crate::model::{EmbedKind, PtpConfig, PtpModel, PtpVariant, TransformerLm};
use crate::nn::ArchConfig;
use crate::sampling::ShapingParams;
use crate::teacher::{TabularTeacher, TransformerTeacher};

const MAGIC: &[u8; 7] = b"PTPCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct PtpBlock {
    variant: PtpVariant,
    embed_kind: EmbedKind,
    embed_width: usize,
    window: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ConfigBlock {
    kind: String,
    arch: ArchConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shaping: Option<ShapingParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ptp: Option<PtpBlock>,
}

/// Any loadable model artifact.
pub enum Checkpoint {
    Teacher(TransformerTeacher),
    Ptp(PtpModel),
}

fn encode(block: &ConfigBlock, params: &[f64]) -> Vec<u8> {
    let config = serde_json::to_vec(block).expect("config block serializes");
    let mut bytes = Vec::with_capacity(MAGIC.len() + 16 + config.len() + params.len() * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(config.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&config);
    bytes.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    bytes
}

fn decode(path: &Path, bytes: &[u8]) -> Result<(ConfigBlock, Vec<f64>)> {
    let malformed = |reason: String| PtpError::Malformed {
        path: path.display().to_string(),
        reason,
    };
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(malformed("missing PTPCKPT magic".into()));
    }
    let mut off = MAGIC.len();
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(PtpError::Malformed {
                path: path.display().to_string(),
                reason: "truncated checkpoint".into(),
            });
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(malformed(format!("unsupported format version {version}")));
    }
    let config_len = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let block: ConfigBlock = serde_json::from_slice(take(&mut off, config_len)?)
        .map_err(|e| malformed(format!("bad config block: {e}")))?;
    let count = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize;
    if bytes.len() - off != count * 8 {
        return Err(malformed(format!(
            "parameter section has {} bytes, expected {}",
            bytes.len() - off,
            count * 8
        )));
    }
    let params = bytes[off..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((block, params))
}

pub fn save_teacher(path: &Path, teacher: &TransformerTeacher) -> Result<()> {
    let block = ConfigBlock {
        kind: "teacher".into(),
        arch: teacher.lm().arch().clone(),
        shaping: Some(teacher.shaping().clone()),
        ptp: None,
    };
    atomic_write(path, &encode(&block, &teacher.lm.params))
}

pub fn save_ptp(path: &Path, model: &PtpModel) -> Result<()> {
    let cfg = model.config();
    let block = ConfigBlock {
        kind: "ptp".into(),
        arch: cfg.arch.clone(),
        shaping: None,
        ptp: Some(PtpBlock {
            variant: cfg.variant,
            embed_kind: cfg.embed_kind,
            embed_width: cfg.embed_width,
            window: cfg.window,
        }),
    };
    atomic_write(path, &encode(&block, &model.params))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let (block, params) = decode(path, &bytes)?;
    match block.kind.as_str() {
        "teacher" => {
            let lm = TransformerLm::from_params(block.arch, params)?;
            Ok(Checkpoint::Teacher(TransformerTeacher::new(
                lm,
                block.shaping.unwrap_or_default(),
            )?))
        }
        "ptp" => {
            let ptp = block.ptp.ok_or_else(|| PtpError::Malformed {
                path: path.display().to_string(),
                reason: "ptp checkpoint missing its ptp block".into(),
            })?;
            let cfg = PtpConfig {
                variant: ptp.variant,
                window: ptp.window,
                embed_kind: ptp.embed_kind,
                embed_width: ptp.embed_width,
                arch: block.arch,
            };
            Ok(Checkpoint::Ptp(PtpModel::from_params(cfg, params)?))
        }
        other => Err(PtpError::Malformed {
            path: path.display().to_string(),
            reason: format!("unknown checkpoint kind {other:?}"),
        }),
    }
}

pub fn load_teacher(path: &Path) -> Result<TransformerTeacher> {
    match load(path)? {
        Checkpoint::Teacher(t) => Ok(t),
        Checkpoint::Ptp(_) => Err(PtpError::InvalidInput(format!(
            "{} is a PTP student checkpoint, expected a teacher",
            path.display()
        ))),
    }
}

pub fn load_ptp(path: &Path) -> Result<PtpModel> {
    match load(path)? {
        Checkpoint::Ptp(m) => Ok(m),
        Checkpoint::Teacher(_) => Err(PtpError::InvalidInput(format!(
            "{} is a teacher checkpoint, expected a PTP student",
            path.display()
        ))),
    }
}

pub fn save_tabular(path: &Path, model: &TabularTeacher) -> Result<()> {
    atomic_write(path, model.to_text().as_bytes())
}

pub fn load_tabular(path: &Path) -> Result<TabularTeacher> {
    let text = std::fs::read_to_string(path)?;
    TabularTeacher::from_text(&text).map_err(|e| match e {
        PtpError::Malformed { reason, .. } => PtpError::Malformed {
            path: path.display().to_string(),
            reason,
        },
        other => other,
    })
}

/// Loads any reference model usable as a verifier: a binary teacher
/// checkpoint or a textual tabular table, detected by content.
pub fn load_verifier(path: &Path) -> Result<Box<dyn crate::teacher::ArModel>> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(MAGIC) {
        return Ok(Box::new(load_teacher(path)?));
    }
    if bytes.starts_with(b"ptp-tabular") {
        return Ok(Box::new(load_tabular(path)?));
    }
    Err(PtpError::Malformed {
        path: path.display().to_string(),
        reason: "neither a PTPCKPT binary nor a ptp-tabular table".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::teacher::ArModel;

    fn arch() -> ArchConfig {
        ArchConfig {
            vocab: 5,
            hidden: 8,
            layers: 1,
            heads: 1,
            max_seq: 12,
            ff: None,
        }
    }

    #[test]
    fn teacher_checkpoint_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("teacher.ptpckpt");
        let lm = TransformerLm::new(arch(), 5).unwrap();
        let teacher = TransformerTeacher::new(
            lm,
            ShapingParams {
                temperature: 0.7,
                top_k: Some(3),
                top_p: None,
            },
        )
        .unwrap();
        save_teacher(&path, &teacher).unwrap();
        let back = load_teacher(&path).unwrap();
        assert_eq!(back.lm.params, teacher.lm.params);
        assert_eq!(back.shaping(), teacher.shaping());
        let a = back.next_token_dist(&[1, 2]).unwrap();
        let b = teacher.next_token_dist(&[1, 2]).unwrap();
        assert_eq!(a.probs(), b.probs());
    }

    #[test]
    fn ptp_checkpoint_roundtrip_preserves_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("student.ptpckpt");
        let cfg = PtpConfig {
            variant: PtpVariant::Categorical,
            window: 4,
            embed_kind: EmbedKind::ArLin,
            embed_width: 32,
            arch: arch(),
        };
        let model = PtpModel::new(cfg.clone(), 6).unwrap();
        save_ptp(&path, &model).unwrap();
        let back = load_ptp(&path).unwrap();
        assert_eq!(back.config(), &cfg);
        assert_eq!(back.params, model.params);
        assert!(load_teacher(&path).is_err());
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ptpckpt");
        std::fs::write(&path, b"NOTACKPT").unwrap();
        assert!(matches!(load(&path), Err(PtpError::Malformed { .. })));

        let model = PtpModel::new(
            PtpConfig {
                variant: PtpVariant::OneHot,
                window: 2,
                embed_kind: EmbedKind::Mask,
                embed_width: 0,
                arch: arch(),
            },
            7,
        )
        .unwrap();
        save_ptp(&path, &model).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(PtpError::Malformed { .. })));
    }

    #[test]
    fn verifier_loader_detects_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let tab_path = dir.path().join("chain.tab");
        let chain = TabularTeacher::two_state_chain(0.8).unwrap();
        save_tabular(&tab_path, &chain).unwrap();
        let v = load_verifier(&tab_path).unwrap();
        assert_eq!(v.vocab(), 2);

        let ck_path = dir.path().join("teacher.ptpckpt");
        let teacher =
            TransformerTeacher::new(TransformerLm::new(arch(), 8).unwrap(), Default::default())
                .unwrap();
        save_teacher(&ck_path, &teacher).unwrap();
        let v = load_verifier(&ck_path).unwrap();
        assert_eq!(v.vocab(), 5);
    }
}
