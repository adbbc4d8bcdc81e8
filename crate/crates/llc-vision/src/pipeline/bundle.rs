//! Model bundle: one binary container holding everything inference needs,
//! plus a human-readable JSON sidecar of the hyperparameters.
//!
//! Binary layout, all integers and floats little-endian:
//!
//! ```text
//! magic            4 bytes  "LVMB"
//! version          u32
//! meta length      u32
//! meta             UTF-8 JSON: config, class names, thresholds, unknown ids
//! codebook sha256  32 bytes (hash of the codebook block below)
//! codebook length  u64
//! codebook block   the codebook's own serialized form
//! svm classes      u32
//! svm dim          u32
//! svm weights      classes x dim f64, row-major
//! svm biases       classes f64
//! svm lambda       f64
//! mlp count        u8 (1 = known-only model without the second-stage MLP)
//! per mlp:
//!   arch length    u32
//!   arch           u32 each
//!   per layer:     out*in f64 weights row-major, then out f64 biases
//! ```
//!
//! The loader verifies the magic, the version and the codebook hash, and
//! rebuilds every model through its validating constructor, so a truncated
//! or tampered file fails loudly instead of mis-classifying quietly.
//! Identical training inputs produce byte-identical bundles.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codebook::{read_codebook, write_codebook, Codebook};
use crate::error::{Error, Result};
use crate::mlp::{Layer, MlpModel};
use crate::openset::OpenSetConfig;
use crate::pipeline::config::PipelineConfig;
use crate::svm::LinearSvmModel;

pub const BUNDLE_MAGIC: [u8; 4] = *b"LVMB";
pub const BUNDLE_VERSION: u32 = 1;

/// A trained model with everything needed to classify an image.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: PipelineConfig,
    /// Class id -> display name; known classes first, unknowns last.
    pub class_names: Vec<String>,
    pub num_known: usize,
    pub codebook: Codebook,
    pub svm: LinearSvmModel,
    pub mlp1: MlpModel,
    /// Second-stage MLP over known + unknown classes; `None` when the model
    /// was trained without unknown data (known-only mode).
    pub mlp2: Option<MlpModel>,
    pub openset: OpenSetConfig,
}

/// The JSON block embedded in the binary, doubling as the sidecar body.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct BundleMeta {
    version: u32,
    class_names: Vec<String>,
    num_known: usize,
    known_only: bool,
    t1: f64,
    t2: f64,
    unknown_ids: BTreeSet<usize>,
    codebook_sha256: String,
    config: PipelineConfig,
}

impl ModelBundle {
    pub fn known_only(&self) -> bool {
        self.mlp2.is_none()
    }

    fn codebook_block(&self) -> Vec<u8> {
        let mut block = Vec::new();
        write_codebook(&mut block, &self.codebook).expect("writing to a Vec cannot fail");
        block
    }

    pub fn codebook_sha256(&self) -> [u8; 32] {
        let mut hash = [0u8; 32];
        hash.copy_from_slice(&Sha256::digest(self.codebook_block()));
        hash
    }

    fn meta(&self) -> BundleMeta {
        BundleMeta {
            version: BUNDLE_VERSION,
            class_names: self.class_names.clone(),
            num_known: self.num_known,
            known_only: self.known_only(),
            t1: self.openset.t1,
            t2: self.openset.t2,
            unknown_ids: self.openset.unknown_ids.clone(),
            codebook_sha256: hex(&self.codebook_sha256()),
            config: self.config.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta())
            .map_err(|e| Error::Internal(format!("bundle meta serialization: {e}")))?;
        let codebook = self.codebook_block();

        let mut out = Vec::new();
        out.extend_from_slice(&BUNDLE_MAGIC);
        out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&self.codebook_sha256());
        out.extend_from_slice(&(codebook.len() as u64).to_le_bytes());
        out.extend_from_slice(&codebook);

        out.extend_from_slice(&(self.svm.num_classes() as u32).to_le_bytes());
        out.extend_from_slice(&(self.svm.dim() as u32).to_le_bytes());
        for w in &self.svm.weights {
            for v in w {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for b in &self.svm.biases {
            out.extend_from_slice(&b.to_le_bytes());
        }
        out.extend_from_slice(&self.svm.lambda.to_le_bytes());

        let mlps: Vec<&MlpModel> = std::iter::once(&self.mlp1).chain(self.mlp2.as_ref()).collect();
        out.push(mlps.len() as u8);
        for mlp in mlps {
            out.extend_from_slice(&(mlp.arch.len() as u32).to_le_bytes());
            for &width in &mlp.arch {
                out.extend_from_slice(&(width as u32).to_le_bytes());
            }
            for layer in &mlp.layers {
                for v in &layer.weights {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                for v in &layer.biases {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0, path };

        if r.take(4)? != BUNDLE_MAGIC {
            return Err(r.bad("not a model bundle (magic mismatch)"));
        }
        let version = r.u32()?;
        if version != BUNDLE_VERSION {
            return Err(r.bad(&format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta: BundleMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| r.bad(&format!("bad meta block: {e}")))?;

        let mut expected_hash = [0u8; 32];
        expected_hash.copy_from_slice(r.take(32)?);
        let cb_len = r.u64()? as usize;
        let cb_block = r.take(cb_len)?;
        let mut actual = [0u8; 32];
        actual.copy_from_slice(&Sha256::digest(cb_block));
        if actual != expected_hash {
            return Err(r.bad("codebook hash mismatch"));
        }
        let codebook = read_codebook(&mut { cb_block })
            .map_err(|e| Error::BadBundle { path: path.to_path_buf(), detail: e.to_string() })?;

        let classes = r.u32()? as usize;
        let dim = r.u32()? as usize;
        if classes == 0 {
            return Err(r.bad("bundle holds zero SVM classes"));
        }
        let mut weights = Vec::with_capacity(classes);
        for _ in 0..classes {
            weights.push(r.f64_vec(dim)?);
        }
        let biases = r.f64_vec(classes)?;
        let lambda = r.f64()?;
        let svm = LinearSvmModel { weights, biases, lambda };

        let mlp_count = r.take(1)?[0];
        if !(1..=2).contains(&mlp_count) {
            return Err(r.bad(&format!("bundle holds {mlp_count} MLPs, expected 1 or 2")));
        }
        let mut mlps = Vec::new();
        for _ in 0..mlp_count {
            let arch_len = r.u32()? as usize;
            let mut arch = Vec::with_capacity(arch_len);
            for _ in 0..arch_len {
                arch.push(r.u32()? as usize);
            }
            if arch.len() < 2 {
                return Err(r.bad("MLP architecture shorter than two layers"));
            }
            let mut layers = Vec::new();
            for w in arch.windows(2) {
                let (in_dim, out_dim) = (w[0], w[1]);
                let weights = r.f64_vec(in_dim * out_dim)?;
                let biases = r.f64_vec(out_dim)?;
                layers.push(Layer { in_dim, out_dim, weights, biases });
            }
            let mlp = MlpModel::from_layers(layers)
                .map_err(|e| Error::BadBundle { path: path.to_path_buf(), detail: e.to_string() })?;
            mlps.push(mlp);
        }
        if r.pos != bytes.len() {
            return Err(r.bad(&format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let mut mlps = mlps.into_iter();
        let mlp1 = mlps.next().expect("count checked above");
        let mlp2 = mlps.next();
        if meta.known_only != mlp2.is_none() {
            return Err(Error::BadBundle {
                path: path.to_path_buf(),
                detail: "meta known_only flag disagrees with MLP count".into(),
            });
        }
        if meta.class_names.len() < meta.num_known || meta.num_known != svm.num_classes() {
            return Err(Error::BadBundle {
                path: path.to_path_buf(),
                detail: "class map disagrees with SVM class count".into(),
            });
        }

        Ok(ModelBundle {
            config: meta.config,
            class_names: meta.class_names,
            num_known: meta.num_known,
            codebook,
            svm,
            mlp1,
            mlp2,
            openset: OpenSetConfig { t1: meta.t1, t2: meta.t2, unknown_ids: meta.unknown_ids },
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn bad(&self, detail: &str) -> Error {
        Error::BadBundle { path: self.path.to_path_buf(), detail: detail.to_string() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.bad(&format!(
                "truncated: wanted {n} bytes at offset {}, file holds {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("length checked")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("length checked")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("length checked")))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk size"))).collect())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Sidecar path: the bundle path with `.json` appended.
pub fn sidecar_path(bundle: &Path) -> PathBuf {
    let mut name = bundle.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".json");
    bundle.with_file_name(name)
}

/// Write the binary bundle and its JSON sidecar.
pub fn save_bundle(path: &Path, bundle: &ModelBundle) -> Result<()> {
    let bytes = bundle.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let sidecar = serde_json::to_string_pretty(&bundle.meta())
        .map_err(|e| Error::Internal(format!("sidecar serialization: {e}")))?;
    let sp = sidecar_path(path);
    std::fs::write(&sp, sidecar).map_err(|e| Error::io(&sp, e))?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelBundle::from_bytes(&bytes, path)
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::PyramidConfig;

    /// Small but fully consistent bundle for round-trip tests.
    fn sample_bundle(known_only: bool) -> ModelBundle {
        let m = 4;
        let dim = 2;
        let codebook =
            Codebook::from_flat(dim, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let mut config = PipelineConfig::paper_profile(m, 16);
        config.pyramid = PyramidConfig { grids: vec![1], normalize: true };
        let feature_len = config.feature_len();

        let num_known = 2;
        let svm = LinearSvmModel {
            weights: (0..num_known).map(|c| vec![0.25 * c as f64; feature_len]).collect(),
            biases: vec![0.5, -0.5],
            lambda: 1e-4,
        };
        let mlp1 = MlpModel::zeroed(&[num_known, 3, num_known]).unwrap();
        let mlp2 = if known_only {
            None
        } else {
            Some(MlpModel::zeroed(&[num_known, 3, num_known + 1]).unwrap())
        };
        let class_names = if known_only {
            vec!["a".into(), "b".into()]
        } else {
            vec!["a".into(), "b".into(), "unknown_light".into()]
        };
        let unknown_ids = if known_only { BTreeSet::new() } else { BTreeSet::from([2]) };
        ModelBundle {
            config,
            class_names,
            num_known,
            codebook,
            svm,
            mlp1,
            mlp2,
            openset: OpenSetConfig { t1: 0.87, t2: 0.93, unknown_ids },
        }
    }

    #[test]
    fn roundtrip_is_identity_and_serialization_is_stable() {
        for known_only in [false, true] {
            let bundle = sample_bundle(known_only);
            let tmp = tempfile::tempdir().unwrap();
            let path = tmp.path().join("model.lvmb");
            save_bundle(&path, &bundle).unwrap();
            let back = load_bundle(&path).unwrap();
            assert_eq!(back, bundle);
            // Serializing the loaded bundle reproduces the same bytes.
            assert_eq!(back.to_bytes().unwrap(), bundle.to_bytes().unwrap());
            assert!(sidecar_path(&path).exists());
        }
    }

    #[test]
    fn sidecar_is_readable_json_with_the_key_fields() {
        let bundle = sample_bundle(false);
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("model.lvmb");
        save_bundle(&path, &bundle).unwrap();
        let text = std::fs::read_to_string(sidecar_path(&path)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["version"], 1);
        assert_eq!(v["t1"], 0.87);
        assert_eq!(v["class_names"][2], "unknown_light");
        assert_eq!(v["codebook_sha256"].as_str().unwrap().len(), 64);
    }

    #[test]
    fn bad_magic_version_and_truncation_are_rejected() {
        let bundle = sample_bundle(false);
        let bytes = bundle.to_bytes().unwrap();
        let path = Path::new("test.lvmb");

        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(matches!(
            ModelBundle::from_bytes(&wrong_magic, path),
            Err(Error::BadBundle { .. })
        ));

        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert!(matches!(
            ModelBundle::from_bytes(&wrong_version, path),
            Err(Error::BadBundle { .. })
        ));

        assert!(matches!(
            ModelBundle::from_bytes(&bytes[..bytes.len() - 3], path),
            Err(Error::BadBundle { .. })
        ));

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(ModelBundle::from_bytes(&trailing, path), Err(Error::BadBundle { .. })));
    }

    #[test]
    fn codebook_corruption_is_caught_by_the_hash() {
        let bundle = sample_bundle(true);
        let mut bytes = bundle.to_bytes().unwrap();
        // Flip one byte inside the codebook block: locate it after the
        // meta JSON + hash + length prefix.
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let cb_start = 12 + meta_len + 32 + 8;
        bytes[cb_start + 10] ^= 0xff;
        match ModelBundle::from_bytes(&bytes, Path::new("x")) {
            Err(Error::BadBundle { detail, .. }) => assert!(detail.contains("hash")),
            other => panic!("expected hash mismatch, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_file_not_found() {
        assert!(matches!(
            load_bundle(Path::new("/definitely/not/here.lvmb")),
            Err(Error::FileNotFound(_))
        ));
    }
}
