//! Binary checkpoint format.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "SPMOECKP"
//! 8       4     format version, u32 little-endian
//! 12      8     header length H, u64 little-endian
//! 20      H     UTF-8 JSON header: config, train state, vocabulary, tensor table
//! 20+H    ...   tensor payload, f64 little-endian, row-major, in table order
//! ```
//!
//! Each tensor table entry holds `name`, `shape`, and `offset` (in values from
//! the start of the payload). The payload must hold exactly the values the
//! table describes.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{ExpertBundle, ModelConfig, ModelParams, TrainState};
use crate::nn::Parameters;

pub const MAGIC: &[u8; 8] = b"SPMOECKP";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    state: TrainState,
    vocabulary: Vec<String>,
    tensors: Vec<TensorEntry>,
}

fn encode(bundle: &ExpertBundle) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload = Vec::with_capacity(8 * bundle.params.num_parameters());
    let mut offset = 0;
    bundle.params.visit("", &mut |name, shape, data| {
        tensors.push(TensorEntry {
            name: name.to_owned(),
            shape: shape.to_vec(),
            offset,
        });
        offset += data.len();
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    });
    let header = Header {
        config: bundle.config.clone(),
        state: bundle.state.clone(),
        vocabulary: bundle.vocab.tokens().to_vec(),
        tensors,
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Internal(format!("header encoding: {e}")))?;
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Writes `bundle` to `path`. The file is written beside the target and renamed
/// into place, so an existing checkpoint survives a failed save.
pub fn save_checkpoint(bundle: &ExpertBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(bundle)?;
    let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(&bytes)?;
        file.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ExpertBundle> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

fn decode(bytes: &[u8], path: &Path) -> Result<ExpertBundle> {
    let corrupt = |detail: String| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < PREAMBLE {
        return Err(corrupt(format!("file is {} bytes, shorter than the preamble", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|h| h.checked_add(PREAMBLE))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| corrupt(format!("header length {header_len} runs past end of file")))?;
    let header: Header =
        serde_json::from_slice(&bytes[PREAMBLE..header_end]).map_err(|e| corrupt(format!("header: {e}")))?;
    header.config.validate().map_err(|e| corrupt(format!("config: {e}")))?;
    let vocab = Vocabulary::from_tokens(header.vocabulary).map_err(|e| corrupt(format!("vocabulary: {e}")))?;
    if vocab.len() != header.config.vocab_size {
        return Err(corrupt(format!(
            "vocabulary has {} tokens, config says {}",
            vocab.len(),
            header.config.vocab_size
        )));
    }

    let payload = &bytes[header_end..];
    if payload.len() % 8 != 0 {
        return Err(corrupt(format!("payload of {} bytes is not a whole number of f64 values", payload.len())));
    }
    let values = payload.len() / 8;

    let mut params = ModelParams::zeros(&header.config);
    let mut entries = header.tensors.iter();
    let mut expected_offset = 0;
    let mut failure = None;
    params.visit_mut("", &mut |name, shape, data| {
        if failure.is_some() {
            return;
        }
        let Some(entry) = entries.next() else {
            failure = Some(format!("tensor table ends before {name}"));
            return;
        };
        if entry.name != name || entry.shape != shape {
            failure = Some(format!(
                "expected {name} {shape:?}, table has {} {:?}",
                entry.name, entry.shape
            ));
            return;
        }
        if entry.offset != expected_offset {
            failure = Some(format!("{name}: offset {} should be {expected_offset}", entry.offset));
            return;
        }
        let end = expected_offset + data.len();
        if end > values {
            failure = Some(format!("{name}: payload truncated"));
            return;
        }
        for (dst, chunk) in data.iter_mut().zip(payload[8 * expected_offset..8 * end].chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        expected_offset = end;
    });
    if let Some(detail) = failure {
        return Err(corrupt(detail));
    }
    if let Some(extra) = entries.next() {
        return Err(corrupt(format!("unexpected tensor {}", extra.name)));
    }
    if expected_offset != values {
        return Err(corrupt(format!("{} trailing payload values", values - expected_offset)));
    }

    Ok(ExpertBundle {
        config: header.config,
        vocab,
        params,
        state: header.state,
    })
}
