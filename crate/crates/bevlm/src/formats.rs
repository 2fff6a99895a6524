//! On-disk artifact formats.
//!
//! Everything the pipeline writes is either JSON (single documents), JSON
//! lines (sample streams), CSV (report tables) or the binary named-tensor
//! checkpoint container from the core crate. Checkpoints get a `.digest`
//! sidecar carrying the content hash of the parameter set so later stages
//! can prove they left a file's parameters untouched. All writers are
//! deterministic: no timestamps, stable field order, `\n` line endings.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use bevlm_core::checkpoint;
use bevlm_core::tensor::ParamSet;
use bevlm_core::world::SceneGraph;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Version stamp embedded in every artifact.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Provenance block embedded in every JSON artifact and manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

/// A split's worth of synthesized scenes.
///
/// `first_index` is the split's offset in the global scene numbering; a
/// scene's generation and question seeds derive from the experiment seed
/// and its global index, so splits never overlap.
#[derive(Serialize, Deserialize)]
pub struct SceneFile {
    pub provenance: Provenance,
    pub split: String,
    pub first_index: u64,
    pub scenes: Vec<SceneGraph>,
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .with_context(|| format!("parsing {} line {}", path.display(), i + 1))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".digest");
    os.into()
}

pub fn params_digest_hex(params: &ParamSet) -> String {
    params.digest().to_hex()
}

/// Write the binary container plus a `.digest` sidecar with the content
/// hash of the parameters.
pub fn save_params(path: &Path, params: &ParamSet) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, checkpoint::encode(params))
        .with_context(|| format!("writing {}", path.display()))?;
    fs::write(sidecar_path(path), params_digest_hex(params) + "\n")
        .with_context(|| format!("writing digest sidecar for {}", path.display()))?;
    Ok(())
}

/// Load a checkpoint; when the digest sidecar exists, verify the decoded
/// parameters against it and fail on any mismatch.
pub fn load_params(path: &Path) -> Result<ParamSet> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let params = checkpoint::decode(&bytes)
        .map_err(|e| anyhow::anyhow!("decoding {}: {e:?}", path.display()))?;
    let sidecar = sidecar_path(path);
    if sidecar.exists() {
        let want = fs::read_to_string(&sidecar)?.trim().to_string();
        let got = params_digest_hex(&params);
        if want != got {
            bail!(
                "checkpoint {} does not match its digest sidecar (want {want}, got {got})",
                path.display()
            );
        }
    }
    Ok(params)
}

/// Read just the recorded digest of a checkpoint without decoding it.
pub fn read_digest_sidecar(path: &Path) -> Result<String> {
    let sidecar = sidecar_path(path);
    Ok(fs::read_to_string(&sidecar)
        .with_context(|| format!("reading {}", sidecar.display()))?
        .trim()
        .to_string())
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

fn csv_field(f: &str) -> String {
    if f.contains(',') || f.contains('"') || f.contains('\n') {
        format!("\"{}\"", f.replace('"', "\"\""))
    } else {
        f.to_string()
    }
}

pub fn csv_line<S: AsRef<str>>(fields: &[S]) -> String {
    fields.iter().map(|f| csv_field(f.as_ref())).collect::<Vec<_>>().join(",")
}

/// Write a header + rows table. Numeric cells should be preformatted by
/// the caller so that report bytes stay reproducible.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    ensure_parent(path)?;
    let mut out = csv_line(header);
    out.push('\n');
    for row in rows {
        assert_eq!(row.len(), header.len(), "csv row width mismatch");
        out.push_str(&csv_line(row));
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Fixed-precision float formatting for report tables.
pub fn fmt_f(x: f64, decimals: usize) -> String {
    format!("{x:.decimals$}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use bevlm_core::tensor::Tensor;
    use bevlm_core::world::{generate_scene, WorldConfig};

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().expect("tempdir")
    }

    #[test]
    fn json_and_jsonl_roundtrip() {
        let dir = tmp();
        let scenes: Vec<SceneGraph> =
            (0..4).map(|s| generate_scene(s, &WorldConfig::default())).collect();
        let file = SceneFile {
            provenance: Provenance {
                config_hash: "abc".into(),
                seed: 9,
                version: TOOL_VERSION.into(),
            },
            split: "train".into(),
            first_index: 0,
            scenes,
        };
        let path = dir.path().join("scenes/train.json");
        write_json(&path, &file).unwrap();
        let back: SceneFile = read_json(&path).unwrap();
        assert_eq!(back.scenes.len(), 4);
        assert_eq!(
            serde_json::to_string(&back.scenes).unwrap(),
            serde_json::to_string(&file.scenes).unwrap()
        );

        let jl = dir.path().join("qa/x.jsonl");
        let items: Vec<u64> = vec![3, 1, 4, 1, 5];
        write_jsonl(&jl, &items).unwrap();
        assert_eq!(read_jsonl::<u64>(&jl).unwrap(), items);
    }

    #[test]
    fn checkpoint_sidecar_detects_tampering() {
        let dir = tmp();
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let path = dir.path().join("m.ckpt");
        save_params(&path, &ps).unwrap();
        let back = load_params(&path).unwrap();
        assert_eq!(back.digest(), ps.digest());

        // Corrupt one payload byte; the sidecar must catch it.
        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0xFF;
        fs::write(&path, bytes).unwrap();
        let err = load_params(&path);
        assert!(err.is_err(), "tampered checkpoint must fail digest verification");
    }

    #[test]
    fn csv_quotes_only_when_needed() {
        assert_eq!(csv_line(&["a", "b,c", "d\"e"]), "a,\"b,c\",\"d\"\"e\"");
        assert_eq!(fmt_f(1.0 / 3.0, 4), "0.3333");
    }
}
