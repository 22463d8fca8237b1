//! Run configuration files: TOML or JSON, unknown keys rejected.
//!
//! ```toml
//! manifest = "data/manifest.json"   # relative to this file
//!
//! [pipeline]
//! tile_size = 512
//! overlap = 64
//! nms_iou = 0.4
//! seed = 7
//! detector = { kind = "blob", intensity_threshold = 120.0 }
//! eval = { radius = { microns = 7.5 }, strategy = "greedy_by_distance" }
//!
//! [pipeline.ensemble]
//! patch_size = 128
//! decision_threshold = 0.5
//! scorers = [{ kind = "mock_intensity" }]
//!
//! [sampling]
//! ratio = [5.0, 1.0, 4.0]
//! patch_size = 512
//!
//! [augment]
//! defocus_p = 0.3
//! ```
//!
//! A bare pipeline configuration, such as the `run_config.json` a run
//! writes, is accepted as well.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mitopipe::{AugmentConfig, PipelineConfig, SamplingSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub sampling: SamplingSpec,
    #[serde(default)]
    pub augment: AugmentConfig,
}

#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub file: RunConfigFile,
    /// Whether the file set `pipeline.seed` itself.
    pub has_seed: bool,
}

fn is_toml(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"))
}

fn parse_value(text: &str, path: &Path) -> Result<serde_json::Value> {
    if is_toml(path) {
        let v: toml::Value = toml::from_str(text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(serde_json::to_value(v)?)
    } else {
        serde_json::from_str(text).with_context(|| format!("parsing {}", path.display()))
    }
}

pub fn load(path: &Path) -> Result<LoadedConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value = parse_value(&text, path)?;
    let Some(obj) = value.as_object() else {
        bail!("{}: configuration must be a table", path.display());
    };
    let sectioned = ["manifest", "pipeline", "sampling", "augment"]
        .iter()
        .any(|k| obj.contains_key(*k))
        || obj.is_empty();
    let (mut file, has_seed) = if sectioned {
        let has_seed = obj
            .get("pipeline")
            .and_then(|p| p.as_object())
            .is_some_and(|p| p.contains_key("seed"));
        let file: RunConfigFile = serde_json::from_value(value.clone())
            .with_context(|| format!("invalid configuration in {}", path.display()))?;
        (file, has_seed)
    } else {
        let pipeline: PipelineConfig = serde_json::from_value(value.clone())
            .with_context(|| format!("invalid configuration in {}", path.display()))?;
        let has_seed = obj.contains_key("seed");
        (
            RunConfigFile {
                pipeline,
                ..Default::default()
            },
            has_seed,
        )
    };
    if let Some(m) = &file.manifest {
        if m.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            file.manifest = Some(base.join(m));
        }
    }
    Ok(LoadedConfig { file, has_seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn toml_sections() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "c.toml",
            "manifest = \"m.json\"\n[pipeline]\nseed = 3\n[pipeline.ensemble]\ndecision_threshold = 0.7\n",
        );
        let c = load(&p).unwrap();
        assert!(c.has_seed);
        assert_eq!(c.file.pipeline.seed, 3);
        assert_eq!(c.file.pipeline.ensemble.decision_threshold, 0.7);
        assert_eq!(c.file.manifest.unwrap(), dir.path().join("m.json"));
    }

    #[test]
    fn bare_pipeline_json() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "run_config.json", &PipelineConfig::default().to_json());
        let c = load(&p).unwrap();
        assert_eq!(c.file.pipeline, PipelineConfig::default());
        assert!(c.has_seed);
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.toml", "[pipeline]\ntile = 3\n");
        assert!(load(&p).is_err());
        let p = write(dir.path(), "d.toml", "[pipelin]\n");
        assert!(load(&p).is_err());
    }
}
