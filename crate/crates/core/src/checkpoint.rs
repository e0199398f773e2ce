//! Binary model checkpoints.
//!
//! Layout: the 8-byte magic `MUIRCKPT`, a little-endian `u64` header length,
//! a JSON header, then every parameter value as little-endian `f64` in
//! header order (modules by id, then contexts, then adapters). The header
//! carries the SHA-256 of the value blob. Optimizer moments are not stored.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::ModelState;
use crate::bank::{BankConfig, Contexts, Hypermodule, HypermoduleBank, ModuleId};
use crate::error::{MuirError, Result};
use crate::tensor::Array;

const MAGIC: &[u8; 8] = b"MUIRCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModuleEntry {
    id: ModuleId,
    usage: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    bank: BankConfig,
    next_id: ModuleId,
    initial_count: usize,
    modules: Vec<ModuleEntry>,
    context_shapes: Vec<Vec<usize>>,
    adapter_shapes: Vec<Vec<usize>>,
    psi: Vec<ModuleId>,
    values: usize,
    sha256: String,
}

/// Parameters and alignment restored from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub bank: HypermoduleBank,
    pub contexts: Contexts,
    pub adapters: Vec<Array>,
    pub psi: Vec<ModuleId>,
}

fn integrity(msg: impl Into<String>) -> MuirError {
    MuirError::Integrity(msg.into())
}

pub fn encode_checkpoint(state: &ModelState) -> Result<Vec<u8>> {
    let mut blob = Vec::new();
    let mut push = |a: &Array| {
        for v in a.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    };
    let mut modules = Vec::with_capacity(state.bank.len());
    for m in state.bank.modules() {
        push(&m.tensor);
        modules.push(ModuleEntry { id: m.id, usage: m.usage });
    }
    state.contexts.values.iter().for_each(&mut push);
    state.adapters.iter().for_each(&mut push);

    let header = Header {
        version: FORMAT_VERSION,
        bank: *state.bank.config(),
        next_id: state.bank.next_id(),
        initial_count: state.bank.initial_count(),
        modules,
        context_shapes: state.contexts.values.iter().map(|a| a.shape().to_vec()).collect(),
        adapter_shapes: state.adapters.iter().map(|a| a.shape().to_vec()).collect(),
        psi: state.psi.clone(),
        values: blob.len() / 8,
        sha256: hex::encode(Sha256::digest(&blob)),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(integrity("not a checkpoint file"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if header_len > body.len() {
        return Err(integrity("truncated checkpoint header"));
    }
    let header: Header = serde_json::from_slice(&body[..header_len])?;
    if header.version != FORMAT_VERSION {
        return Err(integrity(format!("unsupported checkpoint version {}", header.version)));
    }
    let blob = &body[header_len..];
    if blob.len() != header.values * 8 {
        return Err(integrity(format!(
            "expected {} values, found {} bytes",
            header.values,
            blob.len()
        )));
    }
    if hex::encode(Sha256::digest(blob)) != header.sha256 {
        return Err(integrity("checkpoint checksum mismatch"));
    }

    let mut values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut take = |shape: &[usize]| -> Result<Array> {
        let len = shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(len).collect();
        if data.len() != len {
            return Err(integrity("checkpoint value count does not match shapes"));
        }
        Array::new(shape.to_vec(), data)
    };

    let module_shape = header.bank.module_shape();
    let modules = header
        .modules
        .iter()
        .map(|e| {
            Ok(Hypermodule {
                id: e.id,
                tensor: take(&module_shape)?,
                usage: e.usage,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let contexts = Contexts {
        values: header.context_shapes.iter().map(|s| take(s)).collect::<Result<_>>()?,
    };
    let adapters = header.adapter_shapes.iter().map(|s| take(s)).collect::<Result<Vec<_>>>()?;
    if values.next().is_some() {
        return Err(integrity("checkpoint has trailing values"));
    }

    let bank = HypermoduleBank::from_parts(header.bank, modules, header.next_id, header.initial_count)?;
    if contexts.len() != header.psi.len() || !bank.usage_consistent(&header.psi) {
        return Err(integrity("alignment does not match the stored bank"));
    }
    Ok(Checkpoint {
        bank,
        contexts,
        adapters,
        psi: header.psi,
    })
}

pub fn save_checkpoint(path: &Path, state: &ModelState) -> Result<()> {
    fs::write(path, encode_checkpoint(state)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::{JointModel, MuirConfig};
    use crate::synthetic::{generate_synthetic, DataConfig, JointLinearModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state() -> ModelState {
        let tasks = generate_synthetic(3, &DataConfig::default()).unwrap();
        let model = JointLinearModel::new(&tasks);
        let mut s =
            ModelState::pessimistic(&model, &MuirConfig::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(model.num_tasks(), 30);
        // Share module 4 at location 5 so the round trip covers a gap in ids.
        s.psi[5] = 4;
        s.bank.recount(&s.psi).unwrap();
        s.bank.remove_orphans();
        s
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let s = state();
        let c = decode_checkpoint(&encode_checkpoint(&s).unwrap()).unwrap();
        assert_eq!(c.bank, s.bank);
        assert_eq!(c.contexts, s.contexts);
        assert_eq!(c.adapters, s.adapters);
        assert_eq!(c.psi, s.psi);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode_checkpoint(&state()).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        assert!(matches!(decode_checkpoint(&bytes), Err(MuirError::Integrity(_))));
        assert!(decode_checkpoint(b"garbage").is_err());
    }
}
