//! Binary parameter blob plus a JSON sidecar describing how it was trained.

use std::io::{Cursor, Read};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DainConfig, EpochRecord, Forecaster, LstmHeadConfig, Param, ParamGroup, TrainConfig, TrainedModel, WEIGHT_FORMULA};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CCFM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub version: u32,
    pub head: LstmHeadConfig,
    pub dain: Option<DainConfig>,
    pub train: TrainConfig,
    pub seed: u64,
    pub weight_formula: String,
    pub weight_short: f64,
    pub n_train: usize,
    pub validation_f1: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// SHA-256 of the parameter blob.
    pub blob_sha256: String,
    #[serde(default)]
    pub config_hash: Option<String>,
}

fn encode(model: &Forecaster) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    out.extend((model.params.len() as u32).to_le_bytes());
    for p in &model.params {
        out.extend((p.name.len() as u16).to_le_bytes());
        out.extend(p.name.as_bytes());
        out.push(p.group.code());
        out.extend((p.value.nrows() as u32).to_le_bytes());
        out.extend((p.value.ncols() as u32).to_le_bytes());
        for v in p.value.iter() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

fn decode(bytes: &[u8]) -> Result<Vec<Param>> {
    let bad = |m: &str| Error::Checkpoint(format!("model blob: {m}"));
    let mut r = Cursor::new(bytes);
    let mut take = |n: usize| -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        r.read_exact(&mut buf).map_err(|_| bad("truncated"))?;
        Ok(buf)
    };
    if take(4)? != MAGIC {
        return Err(bad("wrong magic"));
    }
    let u32_of = |b: Vec<u8>| u32::from_le_bytes(b.try_into().expect("four bytes"));
    let version = u32_of(take(4)?);
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = u32_of(take(4)?) as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u16::from_le_bytes(take(2)?.try_into().expect("two bytes")) as usize;
        let name = String::from_utf8(take(len)?).map_err(|_| bad("parameter name is not UTF-8"))?;
        let group = ParamGroup::from_code(take(1)?[0]).ok_or_else(|| bad("unknown parameter group"))?;
        let rows = u32_of(take(4)?) as usize;
        let cols = u32_of(take(4)?) as usize;
        let raw = take(rows * cols * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect();
        let value = Array2::from_shape_vec((rows, cols), values).expect("sized");
        params.push(Param { name, group, value });
    }
    if take(1).is_ok() {
        return Err(bad("trailing bytes"));
    }
    Ok(params)
}

/// Writes `checkpoint.bin` and `checkpoint.json` into `dir`.
pub fn save_model(dir: &Path, trained: &TrainedModel, config_hash: Option<&str>) -> Result<ModelSidecar> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let blob = encode(&trained.model);
    let sidecar = ModelSidecar {
        version: CHECKPOINT_VERSION,
        head: trained.model.head.clone(),
        dain: trained.model.dain.clone(),
        train: trained.config.clone(),
        seed: trained.config.seed,
        weight_formula: WEIGHT_FORMULA.to_string(),
        weight_short: trained.weight_short,
        n_train: trained.n_train,
        validation_f1: trained.validation_f1,
        best_epoch: trained.best_epoch,
        history: trained.history.clone(),
        blob_sha256: hex::encode(Sha256::digest(&blob)),
        config_hash: config_hash.map(str::to_string),
    };
    let bin = dir.join("checkpoint.bin");
    std::fs::write(&bin, &blob).map_err(|e| Error::io(&bin, e))?;
    let json = dir.join("checkpoint.json");
    std::fs::write(&json, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&json, e))?;
    Ok(sidecar)
}

/// Reads a model written by [`save_model`], checking the blob against its
/// sidecar.
pub fn load_model(dir: &Path) -> Result<(Forecaster, ModelSidecar)> {
    let json = dir.join("checkpoint.json");
    let raw = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let sidecar: ModelSidecar = serde_json::from_str(&raw)?;
    let bin = dir.join("checkpoint.bin");
    let blob = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if hex::encode(Sha256::digest(&blob)) != sidecar.blob_sha256 {
        return Err(Error::Checkpoint(format!("{} does not match its sidecar", bin.display())));
    }
    let params = decode(&blob)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let template = Forecaster::init(sidecar.head.clone(), sidecar.dain.clone(), &mut rng)?;
    let layout_matches = template.params.len() == params.len()
        && template
            .params
            .iter()
            .zip(&params)
            .all(|(a, b)| a.name == b.name && a.group == b.group && a.value.dim() == b.value.dim());
    if !layout_matches {
        return Err(Error::Checkpoint("parameter layout does not match the recorded configuration".into()));
    }
    Ok((
        Forecaster {
            head: sidecar.head.clone(),
            dain: sidecar.dain.clone(),
            params,
        },
        sidecar,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn trained() -> TrainedModel {
        let mut head = LstmHeadConfig::new(4);
        head.hidden_dim = 3;
        let model = Forecaster::init(
            head,
            Some(DainConfig::default()),
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        TrainedModel {
            model,
            config: TrainConfig::default(),
            validation_f1: 0.5,
            best_epoch: 1,
            history: Vec::new(),
            weight_short: 1.0,
            n_train: 10,
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = trained();
        save_model(dir.path(), &t, Some("abc")).unwrap();
        let (m, side) = load_model(dir.path()).unwrap();
        assert_eq!(m, t.model);
        assert_eq!(side.config_hash.as_deref(), Some("abc"));
        assert_eq!(side.weight_formula, WEIGHT_FORMULA);
    }

    #[test]
    fn tampered_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_model(dir.path(), &trained(), None).unwrap();
        let bin = dir.path().join("checkpoint.bin");
        let mut bytes = std::fs::read(&bin).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        std::fs::write(&bin, bytes).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncated_blob_rejected() {
        assert!(decode(b"CCFM").is_err());
        assert!(decode(b"XXXX\x01\0\0\0\0\0\0\0").is_err());
    }
}
