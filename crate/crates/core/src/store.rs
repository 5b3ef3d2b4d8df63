//! On-disk artifacts: a JSON manifest next to a raw little-endian `f64` blob.
//!
//! Every manifest carries `format_version`; a mismatch is rejected before any
//! other field is read.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::awg::DomainSignature;
use crate::encoder::{Encoder, FeatureExtractor};
use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::matrix::Matrix;
use crate::model::{ToyModel, Vocab};

pub const FORMAT_VERSION: u32 = 1;

pub fn write_blob(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_blob(path: &Path, expected_len: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected_len * 8 {
        return Err(Error::Data(format!(
            "{}: expected {} floats, found {} bytes",
            path.display(),
            expected_len,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_manifest<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let json_err = |source| Error::Json {
        path: path.to_path_buf(),
        source,
    };
    let value: serde_json::Value = serde_json::from_str(&text).map_err(json_err)?;
    let found = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Data(format!("{}: missing format_version", path.display())))?;
    if found != u64::from(FORMAT_VERSION) {
        return Err(Error::FormatVersion {
            path: path.to_path_buf(),
            found: u32::try_from(found).unwrap_or(u32::MAX),
            expected: FORMAT_VERSION,
        });
    }
    serde_json::from_value(value).map_err(json_err)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn blob_path(manifest: &Path, blob_file: &str) -> Result<PathBuf> {
    if blob_file.contains('/') || blob_file.contains('\\') || blob_file.starts_with('.') {
        return Err(Error::Data(format!(
            "{}: blob_file must be a plain file name, got {blob_file:?}",
            manifest.display()
        )));
    }
    Ok(manifest.with_file_name(blob_file))
}

/// `<dir>/<stem>.json` and the blob name stored in it.
fn pair_paths(dir: &Path, stem: &str) -> (PathBuf, String) {
    (dir.join(format!("{stem}.json")), format!("{stem}.bin"))
}

/// File-name-safe form of a domain id.
pub fn file_stem(domain_id: &str) -> String {
    domain_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct AdapterManifest {
    format_version: u32,
    domain_id: String,
    layer_name: String,
    rank: usize,
    d_in: usize,
    d_out: usize,
    blob_file: String,
}

/// Writes `<dir>/<stem>.json` and `<dir>/<stem>.bin` (A then B, row-major).
pub fn save_adapter(dir: &Path, stem: &str, adapter: &LoraAdapter) -> Result<PathBuf> {
    ensure_dir(dir)?;
    let (path, blob_file) = pair_paths(dir, stem);
    let mut values = adapter.a().values().to_vec();
    values.extend_from_slice(adapter.b().values());
    write_blob(&dir.join(&blob_file), &values)?;
    write_json(
        &path,
        &AdapterManifest {
            format_version: FORMAT_VERSION,
            domain_id: adapter.domain_id().to_string(),
            layer_name: adapter.layer_name().to_string(),
            rank: adapter.rank(),
            d_in: adapter.d_in(),
            d_out: adapter.d_out(),
            blob_file,
        },
    )?;
    Ok(path)
}

pub fn load_adapter(manifest_path: &Path) -> Result<LoraAdapter> {
    let m: AdapterManifest = read_manifest(manifest_path)?;
    let a_len = m.d_in * m.rank;
    let values = read_blob(&blob_path(manifest_path, &m.blob_file)?, a_len + m.rank * m.d_out)?;
    let a = Matrix::from_vec(m.d_in, m.rank, values[..a_len].to_vec())?;
    let b = Matrix::from_vec(m.rank, m.d_out, values[a_len..].to_vec())?;
    LoraAdapter::new(m.domain_id, m.layer_name, a, b)
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelManifest {
    format_version: u32,
    tokens: Vec<String>,
    dim: usize,
    context_window: usize,
    /// Matrices in the blob, in order.
    matrices: Vec<String>,
    blob_file: String,
}

pub fn save_model(dir: &Path, stem: &str, model: &ToyModel) -> Result<PathBuf> {
    ensure_dir(dir)?;
    let (path, blob_file) = pair_paths(dir, stem);
    let mut values = model.embed().values().to_vec();
    values.extend_from_slice(model.hidden().values());
    values.extend_from_slice(model.out().values());
    write_blob(&dir.join(&blob_file), &values)?;
    write_json(
        &path,
        &ModelManifest {
            format_version: FORMAT_VERSION,
            tokens: model.vocab().tokens().to_vec(),
            dim: model.dim(),
            context_window: model.context_window(),
            matrices: ["embed", "hidden", "out"].map(String::from).to_vec(),
            blob_file,
        },
    )?;
    Ok(path)
}

pub fn load_model(manifest_path: &Path) -> Result<ToyModel> {
    let m: ModelManifest = read_manifest(manifest_path)?;
    if m.matrices != ["embed", "hidden", "out"] {
        return Err(Error::Data(format!(
            "{}: unexpected matrix order {:?}",
            manifest_path.display(),
            m.matrices
        )));
    }
    let vocab = Vocab::new(m.tokens.iter().cloned());
    if vocab.tokens() != m.tokens.as_slice() {
        return Err(Error::Data(format!(
            "{}: token list must start with the reserved tokens and hold no duplicates",
            manifest_path.display()
        )));
    }
    let (v, d) = (vocab.len(), m.dim);
    let values = read_blob(&blob_path(manifest_path, &m.blob_file)?, v * d + d * d + d * v)?;
    let embed = Matrix::from_vec(v, d, values[..v * d].to_vec())?;
    let hidden = Matrix::from_vec(d, d, values[v * d..v * d + d * d].to_vec())?;
    let out = Matrix::from_vec(d, v, values[v * d + d * d..].to_vec())?;
    ToyModel::from_parts(vocab, m.context_window, embed, hidden, out)
}

#[derive(Debug, Serialize, Deserialize)]
struct EncoderManifest {
    format_version: u32,
    feature_dim: usize,
    hash_seed: u64,
    d_e: usize,
    normalize: bool,
    blob_file: String,
}

pub fn save_encoder(dir: &Path, stem: &str, encoder: &Encoder) -> Result<PathBuf> {
    ensure_dir(dir)?;
    let (path, blob_file) = pair_paths(dir, stem);
    write_blob(&dir.join(&blob_file), encoder.projection().values())?;
    write_json(
        &path,
        &EncoderManifest {
            format_version: FORMAT_VERSION,
            feature_dim: encoder.extractor().feature_dim(),
            hash_seed: encoder.extractor().hash_seed(),
            d_e: encoder.embed_dim(),
            normalize: encoder.normalize_output(),
            blob_file,
        },
    )?;
    Ok(path)
}

pub fn load_encoder(manifest_path: &Path) -> Result<Encoder> {
    let m: EncoderManifest = read_manifest(manifest_path)?;
    let values = read_blob(&blob_path(manifest_path, &m.blob_file)?, m.feature_dim * m.d_e)?;
    let projection = Matrix::from_vec(m.feature_dim, m.d_e, values)?;
    Encoder::new(
        FeatureExtractor::new(m.feature_dim, m.hash_seed)?,
        projection,
        m.normalize,
    )
}

#[derive(Debug, Serialize, Deserialize)]
struct SignatureManifest {
    format_version: u32,
    domain_id: String,
    k_used: usize,
    medoid_indices: Vec<usize>,
    dim: usize,
    blob_file: String,
}

pub fn save_signature(dir: &Path, stem: &str, signature: &DomainSignature) -> Result<PathBuf> {
    ensure_dir(dir)?;
    let (path, blob_file) = pair_paths(dir, stem);
    write_blob(&dir.join(&blob_file), &signature.representation)?;
    write_json(
        &path,
        &SignatureManifest {
            format_version: FORMAT_VERSION,
            domain_id: signature.domain_id.clone(),
            k_used: signature.k_used,
            medoid_indices: signature.medoid_indices.clone(),
            dim: signature.representation.len(),
            blob_file,
        },
    )?;
    Ok(path)
}

pub fn load_signature(manifest_path: &Path) -> Result<DomainSignature> {
    let m: SignatureManifest = read_manifest(manifest_path)?;
    let representation = read_blob(&blob_path(manifest_path, &m.blob_file)?, m.dim)?;
    if representation.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!(
            "{}: non-finite signature",
            manifest_path.display()
        )));
    }
    Ok(DomainSignature {
        domain_id: m.domain_id,
        representation,
        k_used: m.k_used,
        medoid_indices: m.medoid_indices,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct DomainList {
    format_version: u32,
    domains: Vec<String>,
}

/// Ordered domain ids; adapters and signatures are loaded in this order.
pub fn save_domains(path: &Path, domains: &[&str]) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    write_json(
        path,
        &DomainList {
            format_version: FORMAT_VERSION,
            domains: domains.iter().map(|d| d.to_string()).collect(),
        },
    )
}

pub fn load_domains(path: &Path) -> Result<Vec<String>> {
    let list: DomainList = read_manifest(path)?;
    Ok(list.domains)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adapter_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Matrix::random_uniform(5, 2, 1.0, &mut rng);
        let b = Matrix::random_uniform(2, 4, 1.0, &mut rng);
        let ad = LoraAdapter::new("bio", "hidden", a, b).unwrap();
        let path = save_adapter(dir.path(), "bio", &ad).unwrap();
        assert_eq!(load_adapter(&path).unwrap(), ad);
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let sig = DomainSignature {
            domain_id: "x".into(),
            representation: vec![0.5, -1.0],
            k_used: 1,
            medoid_indices: vec![0],
        };
        let path = save_signature(dir.path(), "x", &sig).unwrap();
        assert_eq!(load_signature(&path).unwrap(), sig);
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 9");
        fs::write(&path, text).unwrap();
        assert!(matches!(
            load_signature(&path),
            Err(Error::FormatVersion { found: 9, .. })
        ));
    }

    #[test]
    fn short_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        write_blob(&p, &[1.0, 2.0]).unwrap();
        assert_eq!(read_blob(&p, 2).unwrap(), vec![1.0, 2.0]);
        assert!(read_blob(&p, 3).is_err());
    }

    #[test]
    fn stems_are_file_safe() {
        assert_eq!(file_stem("bio/med.x"), "bio_med_x");
    }
}
