use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelError, Params, PositiveWeight, Result};
use crate::corpus::LabelSet;
use crate::tokenizer::Vocabulary;

pub const PARAMS_FILE: &str = "params.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub model_config: ModelConfig,
    pub label_set: Vec<String>,
    pub l_max: usize,
    pub lambda: f64,
    pub w_policy: PositiveWeight,
    pub seed: u64,
}

impl Manifest {
    pub fn labels(&self) -> Result<LabelSet> {
        LabelSet::new(self.label_set.iter().cloned())
            .map_err(|e| ModelError::MalformedCheckpoint(format!("label set: {e}")))
    }

    /// Fails unless the checkpoint was trained on exactly `labels`, in order.
    pub fn check_labels(&self, labels: &LabelSet) -> Result<()> {
        if self.label_set.as_slice() == labels.names() {
            Ok(())
        } else {
            Err(ModelError::ManifestMismatch(format!(
                "checkpoint labels {:?}, requested {:?}",
                self.label_set,
                labels.names()
            )))
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ParamsBlob {
    vocab: Vocabulary,
    params: Params,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes `params.json` and `manifest.json` into `dir`, each via a temporary
/// file and rename. The manifest is written last.
pub fn save_checkpoint(dir: impl AsRef<Path>, model: &Model, manifest: &Manifest) -> Result<()> {
    let dir = dir.as_ref();
    if manifest.model_config != model.config || manifest.l_max != model.config.l_max {
        return Err(ModelError::ManifestMismatch(
            "manifest does not describe this model".into(),
        ));
    }
    fs::create_dir_all(dir)?;
    let blob = ParamsBlob {
        vocab: model.vocab.clone(),
        params: model.params.clone(),
    };
    let params = serde_json::to_vec(&blob).map_err(|e| ModelError::MalformedCheckpoint(e.to_string()))?;
    write_atomic(&dir.join(PARAMS_FILE), &params)?;
    let mut meta = serde_json::to_vec_pretty(manifest).map_err(|e| ModelError::MalformedCheckpoint(e.to_string()))?;
    meta.push(b'\n');
    write_atomic(&dir.join(MANIFEST_FILE), &meta)?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Model, Manifest)> {
    let dir = dir.as_ref();
    let read = |name: &str| {
        fs::read(dir.join(name))
            .map_err(|e| ModelError::MalformedCheckpoint(format!("{}: {e}", dir.join(name).display())))
    };
    let manifest: Manifest = serde_json::from_slice(&read(MANIFEST_FILE)?)
        .map_err(|e| ModelError::MalformedCheckpoint(format!("{MANIFEST_FILE}: {e}")))?;
    let blob: ParamsBlob = serde_json::from_slice(&read(PARAMS_FILE)?)
        .map_err(|e| ModelError::MalformedCheckpoint(format!("{PARAMS_FILE}: {e}")))?;
    if manifest.l_max != manifest.model_config.l_max || manifest.label_set.len() != manifest.model_config.n_classes {
        return Err(ModelError::MalformedCheckpoint(
            "manifest is inconsistent with its model config".into(),
        ));
    }
    let model = Model::from_parts(manifest.model_config.clone(), blob.vocab, blob.params)?;
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Preset;

    fn fixture() -> (Model, Manifest) {
        let vocab = Vocabulary::build(["alpha beta gamma"], 50, 1);
        let cfg = ModelConfig::from_preset(Preset::Tiny, 2, vocab.len()).with_l_max(8);
        let model = Model::new(cfg.clone(), vocab, 9).unwrap();
        let manifest = Manifest {
            model_config: cfg,
            label_set: vec!["a".into(), "b".into()],
            l_max: 8,
            lambda: 0.7,
            w_policy: PositiveWeight::Balanced,
            seed: 9,
        };
        (model, manifest)
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (model, manifest) = fixture();
        save_checkpoint(dir.path(), &model, &manifest).unwrap();
        let (loaded, loaded_manifest) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded, model);
        assert_eq!(loaded_manifest, manifest);
        let json: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        for key in ["model_config", "label_set", "l_max", "lambda", "w_policy", "seed"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        assert_eq!(json["w_policy"], "balanced");
    }

    #[test]
    fn label_mismatch_is_reported() {
        let (_, manifest) = fixture();
        assert!(manifest.check_labels(&LabelSet::new(["a", "b"]).unwrap()).is_ok());
        assert!(matches!(
            manifest.check_labels(&LabelSet::new(["b", "a"]).unwrap()),
            Err(ModelError::ManifestMismatch(_))
        ));
    }

    #[test]
    fn missing_or_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(ModelError::MalformedCheckpoint(_))
        ));
        let (model, manifest) = fixture();
        save_checkpoint(dir.path(), &model, &manifest).unwrap();
        fs::write(dir.path().join(PARAMS_FILE), b"{").unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(ModelError::MalformedCheckpoint(_))
        ));
    }
}
