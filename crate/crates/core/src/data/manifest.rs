use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Way;
use crate::model::PromptSet;

pub const MANIFEST_VERSION: &str = "uupc-manifest-1";

/// Which annotations a sample carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleTask {
    Seg,
    Cls,
    Both,
}

impl SampleTask {
    pub fn has_mask(self) -> bool {
        matches!(self, SampleTask::Seg | SampleTask::Both)
    }

    pub fn has_label(self) -> bool {
        matches!(self, SampleTask::Cls | SampleTask::Both)
    }
}

/// One manifest entry. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub way: Option<Way>,
    pub prompts: PromptSet,
    pub task: SampleTask,
}

impl SampleRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid(format!("sample {}: {msg}", self.id)));
        if self.task.has_mask() != self.mask_path.is_some() {
            return bad(format!("task {:?} and mask_path disagree", self.task));
        }
        if self.task.has_label() != self.label.is_some() {
            return bad(format!("task {:?} and label disagree", self.task));
        }
        match (self.label, self.way) {
            (Some(_), None) => return bad("label without way".into()),
            (None, Some(_)) => return bad("way without label".into()),
            (Some(l), Some(w)) if l >= w.classes() => {
                return bad(format!("label {l} >= way {}", w.classes()))
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: String,
    /// Cardinalities of nature, position, task and type prompts.
    pub prompt_cardinalities: [usize; 4],
    pub image_size: usize,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn new(prompt_cardinalities: [usize; 4], image_size: usize) -> Self {
        DatasetManifest {
            version: MANIFEST_VERSION.to_string(),
            prompt_cardinalities,
            image_size,
            samples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Same header, different samples.
    pub fn with_samples(&self, samples: Vec<SampleRecord>) -> Self {
        DatasetManifest {
            samples,
            ..self.clone()
        }
    }

    /// Record-level checks that need no filesystem access.
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Invalid(format!(
                "manifest version {:?}, expected {MANIFEST_VERSION:?}",
                self.version
            )));
        }
        let mut ids = HashSet::new();
        for r in &self.samples {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Invalid(format!("duplicate sample id {:?}", r.id)));
            }
            r.validate()?;
            for (idx, card) in r.prompts.indices().into_iter().zip(self.prompt_cardinalities) {
                if idx >= card {
                    return Err(Error::Invalid(format!(
                        "sample {}: prompt index {idx} >= cardinality {card}",
                        r.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Parses and validates a manifest, then checks that every referenced
    /// file exists next to it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        m.validate()
            .map_err(|e| Error::format(path, e.to_string()))?;
        let root = path.parent().unwrap_or(Path::new("."));
        for r in &m.samples {
            for rel in std::iter::once(&r.image_path).chain(r.mask_path.as_ref()) {
                let p = root.join(rel);
                if !p.is_file() {
                    return Err(Error::io(
                        p,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "referenced file missing"),
                    ));
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
