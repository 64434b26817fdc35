//! JSONL meme dataset: one record per line, validated on load.
//!
//! Images never enter the repo as pixels; a record carries the caption/overlay
//! as `text_tokens` and the pre-extracted visual content as `image_tags`.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Benchmark task category a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Harmfulness,
    Hatefulness,
    Misogyny,
    Offensiveness,
    Sarcasm,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::Harmfulness,
        Task::Hatefulness,
        Task::Misogyny,
        Task::Offensiveness,
        Task::Sarcasm,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Task::Harmfulness => "harmfulness",
            Task::Hatefulness => "hatefulness",
            Task::Misogyny => "misogyny",
            Task::Offensiveness => "offensiveness",
            Task::Sarcasm => "sarcasm",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One meme: text tokens, image tags, and optional supervision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemeRecord {
    pub id: String,
    #[serde(default)]
    pub text_tokens: Vec<String>,
    #[serde(default)]
    pub image_tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_rationale: Option<String>,
}

impl MemeRecord {
    /// Structural checks shared by the loader and by programmatic builders.
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Data("record with empty id".into()));
        }
        if self.text_tokens.is_empty() && self.image_tags.is_empty() {
            return Err(Error::Data(format!(
                "record '{}' has neither text tokens nor image tags",
                self.id
            )));
        }
        if let Some(l) = self.label {
            if l > 1 {
                return Err(Error::Data(format!(
                    "record '{}' has label {} outside {{0,1}}",
                    self.id, l
                )));
            }
        }
        Ok(())
    }
}

/// Load and validate a JSONL dataset. Errors carry the 1-based line number.
pub fn load_dataset(path: &Path) -> Result<Vec<MemeRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: MemeRecord = serde_json::from_str(line).map_err(|e| {
            Error::Data(format!(
                "{}:{}: malformed record: {}",
                path.display(),
                lineno + 1,
                e
            ))
        })?;
        record.validate().map_err(|e| {
            Error::Data(format!("{}:{}: {}", path.display(), lineno + 1, e))
        })?;
        if !seen.insert(record.id.clone()) {
            return Err(Error::Data(format!(
                "{}:{}: duplicate record id '{}'",
                path.display(),
                lineno + 1,
                record.id
            )));
        }
        records.push(record);
    }
    Ok(records)
}

/// Serialize records back to JSONL (one object per line, input order).
pub fn records_to_jsonl(records: &[MemeRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(
            &serde_json::to_string(r)
                .map_err(|e| Error::Data(format!("serialize record '{}': {e}", r.id)))?,
        );
        out.push('\n');
    }
    Ok(out)
}
