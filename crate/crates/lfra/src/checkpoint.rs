//! Checkpoint directories: `manifest.txt` plus one raw little-endian blob.
//!
//! ```text
//! lfra-ckpt-v1
//! dtype f32
//! blob weights.bin 715120 <sha256>
//! [config]
//! in_channels=3
//! ...
//! [tensors]
//! enc1.branch1x1.weight param 8x3x1x1 0 24
//! ```
//!
//! Each tensor line gives name, kind, shape, byte offset and element count,
//! in parameter-registration order.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use lfra_core::model::{LfraNet, ModelConfig};
use lfra_core::nn::ParamKind;
use lfra_core::{Scalar, Shape, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "lfra-ckpt-v1";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BLOB_FILE: &str = "weights.bin";

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Manifest text and blob bytes of a network, without touching the disk.
pub fn encode<T: Scalar>(net: &LfraNet<T>) -> (String, Vec<u8>) {
    let mut blob = Vec::with_capacity(net.params.total_count() * T::DTYPE.size());
    let mut tensors = String::new();
    for (_, p) in net.params.iter() {
        let offset = blob.len();
        for &v in p.value.data() {
            v.write_le(&mut blob);
        }
        let _ = writeln!(
            tensors,
            "{} {} {} {} {}",
            p.name,
            p.kind.name(),
            p.value.shape(),
            offset,
            p.value.numel()
        );
    }
    let mut m = String::new();
    let _ = writeln!(m, "{FORMAT_TAG}");
    let _ = writeln!(m, "dtype {}", T::DTYPE.name());
    let _ = writeln!(m, "blob {BLOB_FILE} {} {}", blob.len(), sha256_hex(&blob));
    m.push_str("[config]\n");
    m.push_str(&net.config.to_kv());
    m.push_str("[tensors]\n");
    m.push_str(&tensors);
    (m, blob)
}

/// Writes `dir/manifest.txt` and `dir/weights.bin`. The files are staged in
/// a sibling directory and moved into place, so a failed save never leaves
/// a partial checkpoint at `dir`.
pub fn save_checkpoint<T: Scalar>(net: &LfraNet<T>, dir: &Path) -> Result<()> {
    let (manifest, blob) = encode(net);
    save_encoded(&manifest, &blob, dir)
}

/// Writes the output of [`encode`] as a checkpoint directory.
pub fn save_encoded(manifest: &str, blob: &[u8], dir: &Path) -> Result<()> {
    let staging = staging_dir(dir);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(Error::io(&staging))?;
    }
    fs::create_dir_all(&staging).map_err(Error::io(&staging))?;
    let m = staging.join(MANIFEST_FILE);
    fs::write(&m, manifest).map_err(Error::io(&m))?;
    let b = staging.join(BLOB_FILE);
    fs::write(&b, blob).map_err(Error::io(&b))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(Error::io(dir))?;
    }
    fs::rename(&staging, dir).map_err(Error::io(dir))
}

fn staging_dir(dir: &Path) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    dir.with_file_name(name)
}

struct Entry {
    name: String,
    kind: ParamKind,
    shape: Shape,
    offset: usize,
    len: usize,
}

/// Loads an `f32` network from a checkpoint directory.
pub fn load_checkpoint(dir: &Path) -> Result<LfraNet<f32>> {
    let mp = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mp).map_err(Error::io(&mp))?;
    let bp = dir.join(BLOB_FILE);
    let blob = fs::read(&bp).map_err(Error::io(&bp))?;
    decode(&text, &blob, dir)
}

/// Rebuilds a network from manifest text and blob bytes. `origin` only
/// labels errors.
pub fn decode(text: &str, blob: &[u8], origin: &Path) -> Result<LfraNet<f32>> {
    let corrupt = |reason: String| Error::CorruptCheckpoint {
        path: origin.to_path_buf(),
        reason,
    };
    let mut lines = text.lines();
    let tag = lines.next().unwrap_or("").trim();
    if tag != FORMAT_TAG {
        return Err(Error::VersionMismatch {
            found: tag.to_string(),
            expected: FORMAT_TAG,
        });
    }
    let dtype = lines.next().and_then(|l| l.strip_prefix("dtype ")).map(str::trim);
    if dtype != Some("f32") {
        return Err(corrupt(format!("unsupported dtype {dtype:?}")));
    }
    let blob_line = lines
        .next()
        .and_then(|l| l.strip_prefix("blob "))
        .ok_or_else(|| corrupt("missing blob line".into()))?;
    let fields: Vec<&str> = blob_line.split_whitespace().collect();
    let [_, len, hash] = fields[..] else {
        return Err(corrupt("malformed blob line".into()));
    };
    if len.parse::<usize>().ok() != Some(blob.len()) {
        return Err(corrupt(format!(
            "blob holds {} bytes, manifest expects {len}",
            blob.len()
        )));
    }
    if sha256_hex(blob) != hash {
        return Err(corrupt("blob checksum mismatch".into()));
    }
    if lines.next() != Some("[config]") {
        return Err(corrupt("missing [config] section".into()));
    }
    let mut config = String::new();
    for line in lines.by_ref() {
        if line == "[tensors]" {
            break;
        }
        config.push_str(line);
        config.push('\n');
    }
    let cfg = ModelConfig::from_kv(&config).map_err(|e| corrupt(e.to_string()))?;
    let entries = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| parse_entry(l).ok_or_else(|| corrupt(format!("bad tensor line `{l}`"))))
        .collect::<Result<Vec<_>>>()?;

    let mut net = LfraNet::<f32>::new(&cfg)?;
    if entries.len() != net.params.len() {
        return Err(corrupt(format!(
            "{} tensors listed, the configuration has {}",
            entries.len(),
            net.params.len()
        )));
    }
    let ids: Vec<_> = net.params.ids().collect();
    for (id, e) in ids.into_iter().zip(&entries) {
        let p = net.params.get(id);
        if p.name != e.name || p.kind != e.kind || *p.value.shape() != e.shape || e.shape.numel() != e.len {
            return Err(corrupt(format!("tensor `{}` does not match the configuration", e.name)));
        }
        let end = e.offset + 4 * e.len;
        let bytes = blob
            .get(e.offset..end)
            .ok_or_else(|| corrupt(format!("tensor `{}` runs past the blob", e.name)))?;
        let data = bytes.chunks_exact(4).map(f32::read_le).collect();
        *net.params.value_mut(id) = Tensor::new(e.shape.clone(), data)?;
    }
    Ok(net)
}

fn parse_entry(line: &str) -> Option<Entry> {
    let f: Vec<&str> = line.split_whitespace().collect();
    let [name, kind, shape, offset, len] = f[..] else {
        return None;
    };
    let kind = match kind {
        "param" => ParamKind::Trainable,
        "stat" => ParamKind::Statistic,
        _ => return None,
    };
    let dims = shape
        .split('x')
        .map(|d| d.parse().ok())
        .collect::<Option<Vec<usize>>>()?;
    Some(Entry {
        name: name.to_string(),
        kind,
        shape: Shape::new(&dims),
        offset: offset.parse().ok()?,
        len: len.parse().ok()?,
    })
}

/// Total bytes of manifest plus blob.
pub fn serialized_size<T: Scalar>(net: &LfraNet<T>) -> usize {
    let (m, b) = encode(net);
    m.len() + b.len()
}
