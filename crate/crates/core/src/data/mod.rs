//! Task instances, tokenized batches and their sources.

mod batch;
pub mod jsonl;
pub mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub use batch::{batch_iter, lm_batch, Batcher, TokenBatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Text,
    Symbolic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    IidTest,
    OodA,
    OodB,
}

impl Format {
    pub fn as_str(self) -> &'static str {
        match self {
            Format::Text => "text",
            Format::Symbolic => "symbolic",
        }
    }
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::IidTest, Split::OodA, Split::OodB];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::IidTest => "iid-test",
            Split::OodA => "ood-a",
            Split::OodB => "ood-b",
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "text" => Ok(Format::Text),
            "symbolic" => Ok(Format::Symbolic),
            _ => Err(Error::Config(format!("unknown format `{s}`"))),
        }
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}`")))
    }
}

/// One prompt/answer pair. Labels are metadata for evaluation and analysis
/// and never reach a model input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub prompt: String,
    pub answer: String,
    pub format: Format,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
}

impl TaskInstance {
    /// Label used by alignment tables: `family/format/split`, or
    /// `format/split` when no family is set.
    pub fn label(&self) -> String {
        match &self.family {
            Some(f) => format!("{f}/{}/{}", self.format, self.split),
            None => format!("{}/{}", self.format, self.split),
        }
    }
}

pub fn filter_split(data: &[TaskInstance], split: Split) -> Vec<TaskInstance> {
    data.iter().filter(|x| x.split == split).cloned().collect()
}
