//! Dataset manifests: the JSON document that lists tasks in training order.
//!
//! ```json
//! {
//!   "tasks": [
//!     {
//!       "name": "bottle",
//!       "text_feature": "bottle/text.mtns",
//!       "train_items": [{ "features": "bottle/train/000.mtns", "mask": "bottle/train/000_mask.mtns" }],
//!       "test_items": [{ "features": "bottle/test/000.mtns", "image_label": 1, "pixel_mask": "bottle/test/000_mask.mtns" }]
//!     }
//!   ]
//! }
//! ```
//!
//! Relative paths resolve against the directory holding the manifest.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestDoc {
    pub tasks: Vec<TaskDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDoc {
    pub name: String,
    pub text_feature: String,
    pub train_items: Vec<TrainItemDoc>,
    pub test_items: Vec<TestItemDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainItemDoc {
    pub features: String,
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestItemDoc {
    pub features: String,
    pub image_label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_mask: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub tasks: Vec<TaskSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub text_feature: PathBuf,
    pub train_items: Vec<TrainItem>,
    pub test_items: Vec<TestItem>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub features: PathBuf,
    pub mask: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestItem {
    pub features: PathBuf,
    pub image_label: u8,
    pub pixel_mask: Option<PathBuf>,
}

impl ManifestDoc {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let doc: ManifestDoc = serde_json::from_slice(bytes).map_err(|e| Error::Schema(e.to_string()))?;
        doc.validate()?;
        Ok(doc)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for task in &self.tasks {
            if task.name.is_empty() {
                return Err(Error::Validation("empty task name".into()));
            }
            if !seen.insert(task.name.as_str()) {
                return Err(Error::Validation(format!("duplicate task name {:?}", task.name)));
            }
            if let Some(item) = task.test_items.iter().find(|i| i.image_label > 1) {
                return Err(Error::Validation(format!(
                    "task {:?}: image_label {} is not 0 or 1",
                    task.name, item.image_label
                )));
            }
        }
        Ok(())
    }

    /// Resolve every path against `base` without touching the filesystem.
    pub fn resolve(&self, base: &Path) -> DatasetManifest {
        let join = |p: &str| base.join(p);
        DatasetManifest {
            tasks: self
                .tasks
                .iter()
                .map(|t| TaskSpec {
                    name: t.name.clone(),
                    text_feature: join(&t.text_feature),
                    train_items: t
                        .train_items
                        .iter()
                        .map(|i| TrainItem {
                            features: join(&i.features),
                            mask: join(&i.mask),
                        })
                        .collect(),
                    test_items: t
                        .test_items
                        .iter()
                        .map(|i| TestItem {
                            features: join(&i.features),
                            image_label: i.image_label,
                            pixel_mask: i.pixel_mask.as_deref().map(join),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

impl DatasetManifest {
    fn paths(&self) -> impl Iterator<Item = &Path> {
        self.tasks.iter().flat_map(|t| {
            std::iter::once(t.text_feature.as_path())
                .chain(
                    t.train_items
                        .iter()
                        .flat_map(|i| [i.features.as_path(), i.mask.as_path()]),
                )
                .chain(
                    t.test_items
                        .iter()
                        .flat_map(|i| std::iter::once(i.features.as_path()).chain(i.pixel_mask.as_deref())),
                )
        })
    }

    pub fn check_paths(&self) -> Result<()> {
        match self.paths().find(|p| !p.is_file()) {
            Some(p) => Err(Error::Reference(p.to_path_buf())),
            None => Ok(()),
        }
    }

    pub fn task_names(&self) -> Vec<&str> {
        self.tasks.iter().map(|t| t.name.as_str()).collect()
    }
}

/// Parse, validate, and resolve a manifest file, checking every referenced path.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let doc = ManifestDoc::from_json(&bytes)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let manifest = doc.resolve(base);
    manifest.check_paths()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(dir: &Path, name: &str) {
        let p = dir.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).unwrap();
        }
        fs::write(p, b"x").unwrap();
    }

    const MINIMAL: &str = r#"{
        "tasks": [{
            "name": "a",
            "text_feature": "text.mtns",
            "train_items": [{"features": "f0.mtns", "mask": "m0.mtns"}],
            "test_items": [{"features": "t0.mtns", "image_label": 1, "pixel_mask": "pm0.mtns"},
                           {"features": "t1.mtns", "image_label": 0}]
        }]
    }"#;

    #[test]
    fn minimal_manifest_loads() {
        let dir = tempfile::tempdir().unwrap();
        for f in [
            "text.mtns",
            "f0.mtns",
            "m0.mtns",
            "t0.mtns",
            "pm0.mtns",
            "t1.mtns",
        ] {
            touch(dir.path(), f);
        }
        let path = dir.path().join("manifest.json");
        fs::write(&path, MINIMAL).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.tasks.len(), 1);
        assert_eq!(m.tasks[0].text_feature, dir.path().join("text.mtns"));
        assert_eq!(m.tasks[0].test_items[1].pixel_mask, None);
    }

    #[test]
    fn missing_text_feature_is_schema_error() {
        let doc = MINIMAL.replace(r#""text_feature": "text.mtns","#, "");
        assert!(matches!(
            ManifestDoc::from_json(doc.as_bytes()),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn dangling_path_is_reference_error() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["text.mtns", "f0.mtns", "m0.mtns", "t0.mtns", "t1.mtns"] {
            touch(dir.path(), f);
        }
        let path = dir.path().join("manifest.json");
        fs::write(&path, MINIMAL).unwrap();
        match load_manifest(&path) {
            Err(Error::Reference(p)) => assert!(p.ends_with("pm0.mtns")),
            other => panic!("expected reference error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_names_and_bad_labels_rejected() {
        let mut doc = ManifestDoc::from_json(MINIMAL.as_bytes()).unwrap();
        doc.tasks.push(doc.tasks[0].clone());
        assert!(matches!(doc.validate(), Err(Error::Validation(_))));

        let bad = MINIMAL.replace(r#""image_label": 1"#, r#""image_label": 2"#);
        assert!(matches!(
            ManifestDoc::from_json(bad.as_bytes()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn unknown_fields_rejected() {
        let bad = MINIMAL.replace(r#""name": "a","#, r#""name": "a", "extra": 1,"#);
        assert!(matches!(
            ManifestDoc::from_json(bad.as_bytes()),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn task_order_is_preserved() {
        let names = ["zeta", "alpha", "mid"];
        let doc = ManifestDoc {
            tasks: names
                .iter()
                .map(|n| TaskDoc {
                    name: n.to_string(),
                    text_feature: "t".into(),
                    train_items: vec![],
                    test_items: vec![],
                })
                .collect(),
        };
        let text = serde_json::to_vec(&doc).unwrap();
        let back = ManifestDoc::from_json(&text).unwrap().resolve(Path::new("/"));
        assert_eq!(back.task_names(), names);
    }
}
