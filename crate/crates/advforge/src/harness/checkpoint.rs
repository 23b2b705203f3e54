//! Binary checkpoint format for trained networks.
//!
//! Layout: 8-byte magic `MATCKPT1`, u32 LE version (= 1), u32 LE header
//! length, UTF-8 `key=value` header serializing the network spec,
//! parameter payload as little-endian f64 in layer order (weights then
//! bias per layer, row-major), and a trailing CRC-32 of header+payload.

use crate::error::{Error, Result};
use crate::nn::{init_network, LayerParams, Network, NetworkSpec};
use crate::tensor::Tensor;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 8] = b"MATCKPT1";
const VERSION: u32 = 1;

pub fn checkpoint_bytes(net: &Network) -> Vec<u8> {
    let header = net.spec().canonical();
    let mut payload = Vec::new();
    for p in net.params().iter().flatten() {
        for &v in p.weights.data().iter().chain(p.bias.data()) {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(header.as_bytes());
    hasher.update(&payload);
    let crc = hasher.finalize();

    let mut out = Vec::with_capacity(16 + header.len() + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Atomic write: temp file in the destination directory, then rename.
pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(net);
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "ckpt".into())
    ));
    std::fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn network_from_bytes(bytes: &[u8]) -> Result<Network> {
    let fail = |msg: String| Error::Checkpoint(msg);
    if bytes.len() < 16 {
        return Err(fail("truncated: shorter than the fixed header".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(fail(format!(
            "bad magic {:02x?}, expected {MAGIC:02x?}",
            &bytes[..8]
        )));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(fail(format!(
            "version mismatch: file is v{version}, supported v{VERSION}"
        )));
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len + 4 {
        return Err(fail("truncated: header extends past end of file".into()));
    }
    let header = std::str::from_utf8(&bytes[16..16 + header_len])
        .map_err(|_| fail("header is not valid UTF-8".into()))?;
    let payload = &bytes[16 + header_len..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(header.as_bytes());
    hasher.update(payload);
    if hasher.finalize() != stored_crc {
        return Err(fail("digest mismatch: CRC-32 does not match contents".into()));
    }

    let spec = NetworkSpec::from_canonical(header)?;
    let reference = init_network(&spec, 0)?;
    let expected: usize = reference
        .params()
        .iter()
        .flatten()
        .map(|p| p.weights.len() + p.bias.len())
        .sum();
    if payload.len() != expected * 8 {
        return Err(fail(format!(
            "truncated: payload holds {} values, spec needs {expected}",
            payload.len() / 8
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let params = reference
        .params()
        .iter()
        .map(|slot| {
            slot.as_ref().map(|p| {
                let w: Vec<f64> = (&mut values).take(p.weights.len()).collect();
                let b: Vec<f64> = (&mut values).take(p.bias.len()).collect();
                LayerParams {
                    weights: Tensor::new(p.weights.shape().to_vec(), w).unwrap(),
                    bias: Tensor::new(p.bias.shape().to_vec(), b).unwrap(),
                }
            })
        })
        .collect();
    Network::from_parts(spec, params)
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    network_from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}
