//! Binary weight archive.
//!
//! Layout:
//!
//! ```text
//! "LPROBE01"                      8 bytes
//! header length (u64, LE)         8 bytes
//! header (UTF-8 JSON)             network spec, tensor directory, sigma metadata
//! payload                         raw little-endian f32 tensors in directory order
//! ```
//!
//! Directory offsets are byte offsets from the start of the payload. A
//! calibrated sigma profile is stored as extra tensors named `sigma.<k>`, one
//! per injection point in ordinal order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, NetworkSpec, Weights};
use crate::sigma::{SigmaMeta, SigmaProfile};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LPROBE01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    network: NetworkSpec,
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma: Option<SigmaMeta>,
}

/// Contents of an archive: a validated network and, if present, its
/// calibrated sigma profile.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub network: Network,
    pub sigma: Option<SigmaProfile>,
}

fn sigma_name(ordinal: usize) -> String {
    format!("sigma.{ordinal}")
}

pub fn encode(network: &Network, sigma: Option<&SigmaProfile>) -> Result<Vec<u8>> {
    if let Some(s) = sigma {
        s.check_against(network)?;
    }
    let mut named: Vec<(String, &Tensor)> = network
        .weights()
        .iter()
        .map(|(k, v)| (k.clone(), v))
        .collect();
    if let Some(s) = sigma {
        named.extend(s.tensors().iter().enumerate().map(|(i, t)| (sigma_name(i), t)));
    }

    let mut tensors = Vec::with_capacity(named.len());
    let mut payload = Vec::new();
    for (name, t) in &named {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        version: FORMAT_VERSION,
        network: network.spec().clone(),
        tensors,
        sigma: sigma.map(SigmaProfile::meta),
    };
    let header = serde_json::to_vec(&header)?;

    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Archive> {
    if bytes.len() < MAGIC.len() {
        return Err(Error::Truncated("missing magic".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::BadMagic);
    }
    let len_bytes: [u8; 8] = bytes
        .get(8..16)
        .ok_or_else(|| Error::Truncated("missing header length".into()))?
        .try_into()
        .expect("8 bytes");
    let header_len = usize::try_from(u64::from_le_bytes(len_bytes))
        .map_err(|_| Error::Truncated("header length overflows".into()))?;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Truncated(format!("header of {header_len} bytes")))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
    if header.version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: header.version,
            expected: FORMAT_VERSION,
        });
    }

    let payload = &bytes[header_end..];
    let mut weights = Weights::new();
    let mut sigma_tensors: Vec<Option<Tensor>> = vec![None; header.network.injection_points.len()];
    let mut expected_offset = 0u64;
    for entry in &header.tensors {
        if entry.offset != expected_offset {
            return Err(Error::InvalidSpec(format!(
                "tensor `{}` at offset {} but directory implies {expected_offset}",
                entry.name, entry.offset
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + numel * 4;
        let raw = payload.get(start..end).ok_or_else(|| {
            Error::Truncated(format!("tensor `{}` needs bytes {start}..{end}", entry.name))
        })?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let tensor = Tensor::new(entry.shape.clone(), data)?;
        expected_offset = end as u64;

        match entry.name.strip_prefix("sigma.").and_then(|k| k.parse::<usize>().ok()) {
            Some(k) if header.sigma.is_some() => {
                let slot = sigma_tensors.get_mut(k).ok_or_else(|| {
                    Error::InvalidSpec(format!("`{}` has no matching injection point", entry.name))
                })?;
                *slot = Some(tensor);
            }
            _ => {
                weights.insert(entry.name.clone(), tensor);
            }
        }
    }
    if (payload.len() as u64) > expected_offset {
        return Err(Error::InvalidSpec(format!(
            "{} trailing payload bytes",
            payload.len() as u64 - expected_offset
        )));
    }

    let network = Network::new(header.network, weights)?;
    let sigma = match header.sigma {
        Some(meta) => {
            let tensors = sigma_tensors
                .into_iter()
                .enumerate()
                .map(|(i, t)| t.ok_or_else(|| Error::MissingWeight(sigma_name(i))))
                .collect::<Result<Vec<_>>>()?;
            let profile = SigmaProfile::new(tensors, meta.sample_count, meta.seed, meta.floor)?;
            profile.check_against(&network)?;
            Some(profile)
        }
        None => None,
    };
    Ok(Archive { network, sigma })
}

pub fn save_archive(path: impl AsRef<Path>, network: &Network, sigma: Option<&SigmaProfile>) -> Result<()> {
    let bytes = encode(network, sigma)?;
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_archive(path: impl AsRef<Path>) -> Result<Archive> {
    decode(&fs::read(path)?)
}
