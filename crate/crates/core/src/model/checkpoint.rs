//! Checkpoint file: `u64` little-endian header length, JSON header, then every
//! parameter block as little-endian `f32`, row-major, in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelSpec, ParamGroup};
use crate::diff::Mat;
use crate::error::{Error, Result};

const FORMAT: &str = "metaug-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockInfo {
    pub group: String,
    pub view: usize,
    pub index: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub model: ModelSpec,
    pub seed: u64,
    pub step: u64,
    pub epoch: usize,
    pub blocks: Vec<BlockInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamGroup,
}

impl Checkpoint {
    pub fn new(model: ModelSpec, params: ParamGroup, seed: u64, step: u64, epoch: usize) -> Result<Self> {
        params.check(&model)?;
        let mut blocks = Vec::new();
        for (name, group) in groups(&params) {
            for (view, bs) in group.iter().enumerate() {
                for (index, b) in bs.iter().enumerate() {
                    blocks.push(BlockInfo {
                        group: name.into(),
                        view,
                        index,
                        rows: b.nrows(),
                        cols: b.ncols(),
                    });
                }
            }
        }
        Ok(Checkpoint {
            header: CheckpointHeader {
                format: FORMAT.into(),
                model,
                seed,
                step,
                epoch,
                blocks,
            },
            params,
        })
    }
}

fn groups(p: &ParamGroup) -> [(&'static str, &Vec<Vec<Mat>>); 3] {
    [("theta", &p.theta), ("vartheta", &p.vartheta), ("omega", &p.omega)]
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let header = serde_json::to_vec(&ckpt.header)?;
    let mut out = Vec::with_capacity(8 + header.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, group) in groups(&ckpt.params) {
        for b in group.iter().flatten() {
            for v in b.iter() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |why: &str| Error::invalid(format!("checkpoint {}: {why}", path.display()));
    let len = bytes
        .get(..8)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
        .ok_or_else(|| corrupt("truncated header length"))?;
    let header_bytes = bytes.get(8..8 + len).ok_or_else(|| corrupt("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(header_bytes)?;
    if header.format != FORMAT {
        return Err(corrupt(&format!("unknown format {:?}", header.format)));
    }
    let mut floats = bytes[8 + len..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    let m = header.model.num_views();
    let mut groups: [Vec<Vec<Mat>>; 3] = std::array::from_fn(|_| vec![Vec::new(); m]);
    let names = ["theta", "vartheta", "omega"];
    let mut expected_len = 0;
    for b in &header.blocks {
        let g = names
            .iter()
            .position(|n| *n == b.group)
            .ok_or_else(|| corrupt(&format!("unknown group {}", b.group)))?;
        if b.view >= m || b.index != groups[g][b.view].len() {
            return Err(corrupt("blocks out of order"));
        }
        let data: Vec<f64> = floats.by_ref().take(b.rows * b.cols).collect();
        if data.len() != b.rows * b.cols {
            return Err(corrupt("truncated parameter data"));
        }
        expected_len += data.len();
        groups[g][b.view].push(Mat::from_shape_vec((b.rows, b.cols), data).expect("sized above"));
    }
    if bytes.len() != 8 + len + 4 * expected_len {
        return Err(corrupt("trailing bytes"));
    }
    let [theta, vartheta, omega] = groups;
    let params = ParamGroup::new(theta, vartheta, omega);
    params.check(&header.model)?;
    Ok(Checkpoint { header, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn round_trip_rounds_to_f32() {
        let spec = ModelSpec::build(&ModelConfig::default(), &[16, 16], None, 1).unwrap();
        let params = spec.init();
        let ckpt = Checkpoint::new(spec, params.clone(), 1, 7, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.header, ckpt.header);
        let rounded =
            |g: &Vec<Vec<Mat>>| -> Vec<Vec<Mat>> { g.iter().map(|b| b.iter().map(|m| m.mapv(|v| v as f32 as f64)).collect()).collect() };
        assert_eq!(back.params.theta, rounded(&params.theta));
        assert_eq!(back.params.omega, rounded(&params.omega));
    }

    #[test]
    fn missing_and_truncated_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_checkpoint(&dir.path().join("x")), Err(Error::MissingArtifact(_))));
        let spec = ModelSpec::build(&ModelConfig::default(), &[4, 4], None, 1).unwrap();
        let ckpt = Checkpoint::new(spec.clone(), spec.init(), 1, 0, 0).unwrap();
        let path = dir.path().join("c");
        save_checkpoint(&path, &ckpt).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
