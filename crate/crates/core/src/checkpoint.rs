//! Checkpoint files: model weights with explicit alias structure.
//!
//! Layout: an 8-byte magic, a little-endian u32 version, a u64 JSON header
//! length, the header, then raw little-endian f64 blocks in header order.
//! The header records the model config, a checkpoint kind tag, the block
//! table, and a role map. Each unique storage is written once as a block;
//! every parameter slot (role) points at a block, so aliased slots — like a
//! tied output projection or the cross-model shared embedding — are stored
//! once and rebound to one storage on load. Loading verifies that the alias
//! topology of the receiving model matches the file exactly.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dual::DualSystem;
use crate::param::Param;
use crate::rng::Rng;
use crate::transformer::{ModelConfig, Seq2Seq};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"DNMTCKPT";
const VERSION: u32 = 1;

/// What a checkpoint file contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Both directions plus the shared embedding.
    Dual,
    /// One translation model.
    Single,
    /// A bare embedding matrix (the attack's perturbed output).
    Embedding,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: CheckpointKind,
    config: ModelConfig,
    blocks: Vec<BlockEntry>,
    roles: Vec<(String, String)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    shape: Vec<usize>,
}

/// Writes `slots` under `kind`, deduplicating storage into blocks.
pub fn save(
    path: &Path,
    kind: CheckpointKind,
    config: &ModelConfig,
    slots: &[(String, Param)],
) -> Result<()> {
    let mut block_of_ptr: HashMap<usize, String> = HashMap::new();
    let mut blocks: Vec<(BlockEntry, Param)> = Vec::new();
    let mut roles = Vec::with_capacity(slots.len());
    for (role, p) in slots {
        let block_name = match block_of_ptr.get(&p.ptr_id()) {
            Some(name) => name.clone(),
            None => {
                let name = p.name();
                if blocks.iter().any(|(b, _)| b.name == name) {
                    return Err(Error::contract(format!(
                        "two distinct storages share the block name {name:?}"
                    )));
                }
                block_of_ptr.insert(p.ptr_id(), name.clone());
                blocks.push((
                    BlockEntry {
                        name: name.clone(),
                        shape: p.value().shape.clone(),
                    },
                    p.clone(),
                ));
                name
            }
        };
        roles.push((role.clone(), block_name));
    }

    let header = Header {
        kind,
        config: config.clone(),
        blocks: blocks.iter().map(|(b, _)| BlockEntry {
            name: b.name.clone(),
            shape: b.shape.clone(),
        }).collect(),
        roles,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::contract(format!("header serialization failed: {e}")))?;

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(header_json.len() as u64).to_le_bytes())?;
    f.write_all(&header_json)?;
    for (_, p) in &blocks {
        for x in &p.value().data {
            f.write_all(&x.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

/// A loaded checkpoint, not yet bound to a model.
#[derive(Debug)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: ModelConfig,
    /// Block name -> one shared storage per block.
    pub blocks: HashMap<String, Param>,
    /// Role -> block name, in file order.
    pub roles: Vec<(String, String)>,
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::contract(format!(
            "{} is not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::contract(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut u64buf = [0u8; 8];
    f.read_exact(&mut u64buf)?;
    let header_len = u64::from_le_bytes(u64buf) as usize;
    let mut header_json = vec![0u8; header_len];
    f.read_exact(&mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| Error::contract(format!("malformed checkpoint header: {e}")))?;

    let mut blocks = HashMap::with_capacity(header.blocks.len());
    for entry in &header.blocks {
        let len: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; len * 8];
        f.read_exact(&mut bytes)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric(format!(
                "checkpoint block {:?} contains NaN/Inf",
                entry.name
            )));
        }
        blocks.insert(
            entry.name.clone(),
            Param::new(
                entry.name.clone(),
                crate::tensor::Tensor::new(entry.shape.clone(), data),
            ),
        );
    }
    Ok(Checkpoint {
        kind: header.kind,
        config: header.config,
        blocks,
        roles: header.roles,
    })
}

impl Checkpoint {
    /// Copies block data into a model's slots, enforcing that the file's
    /// alias structure matches the model's.
    pub fn restore_into(&self, slots: &[(String, Param)]) -> Result<()> {
        let role_map: HashMap<&str, &str> = self
            .roles
            .iter()
            .map(|(r, b)| (r.as_str(), b.as_str()))
            .collect();
        if role_map.len() != slots.len() {
            return Err(Error::contract(format!(
                "checkpoint has {} roles, model expects {}",
                role_map.len(),
                slots.len()
            )));
        }
        // Storage identity on the model side must induce the same grouping
        // as block names on the file side.
        let mut block_of_ptr: HashMap<usize, &str> = HashMap::new();
        for (role, p) in slots {
            let block_name = *role_map.get(role.as_str()).ok_or_else(|| {
                Error::contract(format!("checkpoint lacks role {role:?}"))
            })?;
            if let Some(prev) = block_of_ptr.insert(p.ptr_id(), block_name) {
                if prev != block_name {
                    return Err(Error::contract(format!(
                        "role {role:?} aliases a slot bound to block {prev:?}, \
                         but the file stores it in {block_name:?}"
                    )));
                }
            }
            let src = self.blocks.get(block_name).ok_or_else(|| {
                Error::contract(format!("checkpoint lacks block {block_name:?}"))
            })?;
            if src.value().shape != p.value().shape {
                return Err(Error::contract(format!(
                    "block {block_name:?} has shape {:?}, slot {role:?} expects {:?}",
                    src.value().shape,
                    p.value().shape
                )));
            }
            p.assign(src.value().clone());
        }
        // Conversely: distinct model storages must not be fed by one block
        // in a way that loses sharing the file promised. Count unique
        // pairings both ways.
        let file_groups: std::collections::HashSet<&str> =
            block_of_ptr.values().copied().collect();
        if file_groups.len() != block_of_ptr.len() {
            return Err(Error::contract(
                "checkpoint shares a block across slots the model keeps separate",
            ));
        }
        Ok(())
    }
}

/// Saves a dual system.
pub fn save_dual(path: &Path, sys: &DualSystem) -> Result<()> {
    save(path, CheckpointKind::Dual, &sys.cfg, &sys.slots())
}

/// Rebuilds a dual system from a file, restoring the exact sharing topology.
pub fn load_dual(path: &Path) -> Result<DualSystem> {
    let ckpt = load(path)?;
    if ckpt.kind != CheckpointKind::Dual {
        return Err(Error::contract(format!(
            "{} is a {:?} checkpoint, expected Dual",
            path.display(),
            ckpt.kind
        )));
    }
    let sys = DualSystem::init(&ckpt.config, &mut Rng::new(0))?;
    ckpt.restore_into(&sys.slots())?;
    Ok(sys)
}

/// Saves one translation model.
pub fn save_single(path: &Path, model: &Seq2Seq) -> Result<()> {
    save(path, CheckpointKind::Single, &model.cfg, &model.slots())
}

pub fn load_single(path: &Path) -> Result<Seq2Seq> {
    let ckpt = load(path)?;
    if ckpt.kind != CheckpointKind::Single {
        return Err(Error::contract(format!(
            "{} is a {:?} checkpoint, expected Single",
            path.display(),
            ckpt.kind
        )));
    }
    let model = Seq2Seq::init("model", &ckpt.config, &mut Rng::new(0))?;
    ckpt.restore_into(&model.slots())?;
    Ok(model)
}

/// Saves a bare embedding matrix (the attack output E').
pub fn save_embedding(path: &Path, config: &ModelConfig, embed: &Param) -> Result<()> {
    save(
        path,
        CheckpointKind::Embedding,
        config,
        &[("embedding".to_string(), embed.clone())],
    )
}

pub fn load_embedding(path: &Path) -> Result<(ModelConfig, Param)> {
    let ckpt = load(path)?;
    if ckpt.kind != CheckpointKind::Embedding {
        return Err(Error::contract(format!(
            "{} is a {:?} checkpoint, expected Embedding",
            path.display(),
            ckpt.kind
        )));
    }
    let block_name = &ckpt
        .roles
        .first()
        .ok_or_else(|| Error::contract("embedding checkpoint has no roles"))?
        .1;
    let p = ckpt.blocks.get(block_name).cloned().ok_or_else(|| {
        Error::contract(format!("embedding checkpoint lacks block {block_name:?}"))
    })?;
    Ok((ckpt.config, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::checksum_params;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 10,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ffn: 12,
            max_len: 12,
            tie_decoder_embed: true,
        }
    }

    #[test]
    fn dual_round_trip_preserves_weights_and_sharing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sys.ckpt");
        let sys = DualSystem::init(&cfg(), &mut Rng::new(5)).unwrap();
        let before = checksum_params(&sys.params());
        save_dual(&path, &sys).unwrap();

        let restored = load_dual(&path).unwrap();
        assert_eq!(checksum_params(&restored.params()), before);
        // Sharing is structural, not just value-equal: write through one
        // role, observe through another.
        restored.forward.enc_embed.value_mut().data[0] += 1.0;
        assert_eq!(
            restored.backward.dec_embed.value().data[0],
            restored.forward.enc_embed.value().data[0]
        );
    }

    #[test]
    fn shared_embedding_is_stored_once() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sys.ckpt");
        let sys = DualSystem::init(&cfg(), &mut Rng::new(6)).unwrap();
        save_dual(&path, &sys).unwrap();
        let ckpt = load(&path).unwrap();
        // Three roles point at the one forward.enc_embed block.
        let e_block: Vec<&(String, String)> = ckpt
            .roles
            .iter()
            .filter(|(_, b)| b == "forward.enc_embed")
            .collect();
        assert_eq!(e_block.len(), 3);
        assert!(ckpt.blocks.contains_key("forward.enc_embed"));
        assert!(!ckpt.blocks.contains_key("backward.dec_embed"));
    }

    #[test]
    fn single_and_embedding_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mpath = dir.path().join("m.ckpt");
        let epath = dir.path().join("e.ckpt");
        let c = cfg();
        let m = Seq2Seq::init("model", &c, &mut Rng::new(7)).unwrap();
        save_single(&mpath, &m).unwrap();
        let back = load_single(&mpath).unwrap();
        assert_eq!(checksum_params(&back.params()), checksum_params(&m.params()));

        save_embedding(&epath, &c, &m.enc_embed).unwrap();
        let (ecfg, e) = load_embedding(&epath).unwrap();
        assert_eq!(ecfg, c);
        assert_eq!(e.value().data, m.enc_embed.value().data);
    }

    #[test]
    fn kind_mismatch_is_a_contract_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = Seq2Seq::init("model", &cfg(), &mut Rng::new(8)).unwrap();
        save_single(&path, &m).unwrap();
        assert!(load_dual(&path).is_err());
    }

    #[test]
    fn missing_and_corrupt_files_error_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.ckpt");
        assert!(matches!(
            load(&missing).unwrap_err(),
            Error::MissingArtifact(_)
        ));
        let garbage = dir.path().join("junk.ckpt");
        std::fs::write(&garbage, b"not a checkpoint at all").unwrap();
        assert!(matches!(load(&garbage).unwrap_err(), Error::Contract(_)));
    }

    #[test]
    fn bit_exact_file_reproducibility() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let sys = DualSystem::init(&cfg(), &mut Rng::new(9)).unwrap();
        save_dual(&p1, &sys).unwrap();
        save_dual(&p2, &sys).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
