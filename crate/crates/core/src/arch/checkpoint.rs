//! Binary model checkpoints.
//!
//! Layout: the 8-byte magic `SEGKITCK`, a little-endian `u64` header length,
//! a JSON header (spec, BN state, parameter names), then one tensor payload
//! per parameter in header order.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{instantiate, BnState, Model, ParamGroup};
use super::spec::NetworkSpec;
use crate::error::{Error, Result};
use crate::tensor::{BnMode, Tensor};

const MAGIC: &[u8; 8] = b"SEGKITCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    spec: NetworkSpec,
    mode: BnMode,
    params: Vec<ParamEntry>,
    bn: Vec<BnState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    group: ParamGroup,
}

pub fn checkpoint_bytes(model: &Model) -> Vec<u8> {
    let header = Header {
        version: VERSION,
        spec: model.spec().clone(),
        mode: model.mode(),
        params: model
            .params()
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                group: p.group,
            })
            .collect(),
        bn: model.bn_states().to_vec(),
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params() {
        out.extend_from_slice(&p.value.to_bytes());
    }
    out
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::format(0, "not a segkit checkpoint (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16usize.saturating_add(len))
        .ok_or_else(|| Error::format(bytes.len(), "checkpoint header truncated"))?;
    let header: Header = serde_json::from_slice(body)
        .map_err(|e| Error::format(16, format!("bad checkpoint header: {e}")))?;
    if header.version != VERSION {
        return Err(Error::format(
            16,
            format!("unsupported checkpoint version {}", header.version),
        ));
    }
    let mut model = instantiate(&header.spec, 0)?;
    if header.params.len() != model.params().len() || header.bn.len() != model.bn_states().len() {
        return Err(Error::format(
            16,
            "checkpoint parameters do not match its network spec",
        ));
    }
    let start = 16 + len;
    let mut cursor = Cursor::new(&bytes[start..]);
    for (entry, p) in header.params.iter().zip(model.params_mut()) {
        let offset = start + cursor.position() as usize;
        if entry.name != p.name || entry.group != p.group {
            return Err(Error::format(
                offset,
                format!("unexpected parameter '{}'", entry.name),
            ));
        }
        let value = Tensor::read_from(&mut cursor).map_err(|e| match e {
            Error::Format { offset: o, message } => Error::format(offset + o, message),
            other => other,
        })?;
        if value.shape() != p.value.shape() {
            return Err(Error::format(
                offset,
                format!(
                    "parameter '{}' has shape {}, expected {}",
                    p.name,
                    value.shape(),
                    p.value.shape()
                ),
            ));
        }
        p.value = value;
    }
    let mut rest = Vec::new();
    cursor.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::format(
            bytes.len() - rest.len(),
            "trailing bytes after checkpoint payload",
        ));
    }
    model.bn_states_mut().clone_from_slice(&header.bn);
    model.set_mode(header.mode);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::assemble::{assemble, Variant};
    use crate::arch::spec::mini_backbone_spec;
    use crate::tensor::Shape;

    #[test]
    fn round_trip_is_bit_exact() {
        let spec = assemble(
            Variant::Fcn,
            &mini_backbone_spec(&[3, 4, 5], 3).unwrap(),
            None,
            4,
            2,
        )
        .unwrap();
        let mut m = instantiate(&spec, 42).unwrap();
        m.bn_states_mut()[0].running_mean[1] = 0.125;
        m.set_mode(BnMode::Eval);
        let bytes = checkpoint_bytes(&m);
        let mut back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(checkpoint_bytes(&back), bytes);
        let x = Tensor::filled(Shape::new(1, 3, 16, 16), 0.5);
        assert_eq!(
            m.predict(&x).unwrap().data(),
            back.predict(&x).unwrap().data()
        );
    }

    #[test]
    fn truncation_and_magic_are_reported() {
        let spec = assemble(
            Variant::Fcn,
            &mini_backbone_spec(&[2, 2, 2], 3).unwrap(),
            None,
            8,
            2,
        )
        .unwrap();
        let bytes = checkpoint_bytes(&instantiate(&spec, 1).unwrap());
        assert!(matches!(
            checkpoint_from_bytes(b"NOTACKPTxxxxxxxxxxxx"),
            Err(Error::Format { offset: 0, .. })
        ));
        match checkpoint_from_bytes(&bytes[..bytes.len() - 3]) {
            Err(Error::Format { offset, .. }) => assert!(offset > bytes.len() - 40),
            other => panic!("expected format error, got {:?}", other.map(|_| ())),
        }
    }
}
