//! Parameter checkpoints: one line of JSON header, then the raw
//! little-endian f32 payload in manifest order.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::Parameters;

pub const FORMAT_VERSION: &str = "hybridlab-ckpt-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub path: String,
    pub shape: Vec<usize>,
    /// Byte offset of the tensor within the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub config: ModelConfig,
    pub manifest: Vec<ManifestRecord>,
    pub payload_bytes: usize,
}

pub fn header_for(params: &Parameters<f32>, config: &ModelConfig) -> Header {
    let mut offset = 0;
    let manifest = params
        .manifest()
        .into_iter()
        .map(|(path, shape)| {
            let rec = ManifestRecord {
                path,
                offset,
                shape: shape.clone(),
            };
            offset += shape.iter().product::<usize>() * 4;
            rec
        })
        .collect();
    Header {
        format: FORMAT_VERSION.to_string(),
        config: config.clone(),
        manifest,
        payload_bytes: offset,
    }
}

pub fn write_to<W: Write>(mut out: W, params: &Parameters<f32>, config: &ModelConfig) -> Result<()> {
    params.audit_shapes(config)?;
    let header = header_for(params, config);
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    let mut payload = Vec::with_capacity(header.payload_bytes);
    params.visit(|_, t| {
        for v in &t.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    });
    out.write_all(&payload)?;
    out.flush()?;
    Ok(())
}

pub fn save(path: &Path, params: &Parameters<f32>, config: &ModelConfig) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_to(std::io::BufWriter::new(file), params, config)
}

pub fn read_from<R: Read>(input: R) -> Result<(Parameters<f32>, ModelConfig)> {
    let mut reader = BufReader::new(input);
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::Format("missing header terminator".into()));
    }
    let header: Header = serde_json::from_slice(&line[..line.len() - 1])
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;
    if header.format != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format {:?}", header.format)));
    }
    header.config.validate()?;
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    if payload.len() != header.payload_bytes {
        return Err(Error::Format(format!(
            "payload has {} bytes, header declares {}",
            payload.len(),
            header.payload_bytes
        )));
    }
    let mut params = Parameters::<f32>::init(&header.config)?;
    if header_for(&params, &header.config).manifest != header.manifest {
        return Err(Error::Format("manifest does not match the declared config".into()));
    }
    let mut records = header.manifest.iter();
    params.visit_mut(|_, t| {
        let rec = records.next().expect("manifest length checked above");
        let bytes = &payload[rec.offset..rec.offset + t.len() * 4];
        for (v, chunk) in t.data.iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
    });
    Ok((params, header.config))
}

pub fn load(path: &Path) -> Result<(Parameters<f32>, ModelConfig)> {
    read_from(std::fs::File::open(path)?)
}
