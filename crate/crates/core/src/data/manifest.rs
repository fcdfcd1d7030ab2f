//! Split manifests: a header and one file stem per line per split.
//!
//! ```text
//! # dataset BCCD
//! # counts train=327 val=0 test=37
//! [train]
//! BloodImage_00000
//! [val]
//! [test]
//! BloodImage_00412
//! ```

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub dataset: String,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn files(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn files_mut(&mut self, split: Split) -> &mut Vec<String> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    /// Validation split to use while training: `val`, or `test` when `val`
    /// is empty.
    pub fn validation_split(&self) -> Split {
        if self.val.is_empty() {
            Split::Test
        } else {
            Split::Val
        }
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in Split::ALL {
            for f in self.files(s) {
                if !seen.insert(f.as_str()) {
                    return Err(Error::Config(format!("manifest {}: `{f}` listed twice", self.dataset)));
                }
            }
        }
        Ok(())
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line: line as u32, column: 1, msg };
        let mut m = SplitManifest::default();
        let mut counts: Option<[usize; 3]> = None;
        let mut current: Option<Split> = None;
        for (i, raw) in text.lines().enumerate() {
            let ln = i + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(name) = rest.strip_prefix("dataset") {
                    m.dataset = name.trim().to_string();
                } else if let Some(c) = rest.strip_prefix("counts") {
                    let mut v = [0usize; 3];
                    for kv in c.split_whitespace() {
                        let (k, n) = kv.split_once('=').ok_or_else(|| err(ln, format!("bad count `{kv}`")))?;
                        let split: Split = k.parse().map_err(|_| err(ln, format!("unknown split `{k}`")))?;
                        v[split as usize] = n.parse().map_err(|_| err(ln, format!("bad count `{kv}`")))?;
                    }
                    counts = Some(v);
                }
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = Some(name.parse().map_err(|_| err(ln, format!("unknown split `{name}`")))?);
                continue;
            }
            let split = current.ok_or_else(|| err(ln, "file listed before any [split] header".into()))?;
            m.files_mut(split).push(line.to_string());
        }
        let counts = counts.ok_or_else(|| err(1, "missing `# counts` header".into()))?;
        for s in Split::ALL {
            if m.files(s).len() != counts[s as usize] {
                return Err(Error::Config(format!(
                    "manifest {}: header says {s}={} but {} files are listed",
                    path.display(),
                    counts[s as usize],
                    m.files(s).len()
                )));
            }
        }
        m.check_disjoint()?;
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path)
    }
}

impl fmt::Display for SplitManifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# dataset {}", self.dataset)?;
        writeln!(f, "# counts train={} val={} test={}", self.train.len(), self.val.len(), self.test.len())?;
        for s in Split::ALL {
            writeln!(f, "[{s}]")?;
            for name in self.files(s) {
                writeln!(f, "{name}")?;
            }
        }
        Ok(())
    }
}
