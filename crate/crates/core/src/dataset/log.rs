use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

/// Raw `(user, item, timestamp)` records, in input order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
}

impl InteractionLog {
    pub fn new(records: Vec<Interaction>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, user: impl Into<String>, item: impl Into<String>, timestamp: i64) {
        self.records.push(Interaction {
            user: user.into(),
            item: item.into(),
            timestamp,
        });
    }

    /// Parse TSV text; `origin` only labels error messages.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fail = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(fail(format!(
                    "expected user<TAB>item<TAB>timestamp, found {} field(s)",
                    fields.len()
                )));
            }
            let (user, item) = (fields[0].trim(), fields[1].trim());
            if user.is_empty() || item.is_empty() {
                return Err(fail("empty user or item token".into()));
            }
            let timestamp = fields[2]
                .trim()
                .parse::<i64>()
                .map_err(|e| fail(format!("bad timestamp {:?}: {}", fields[2], e)))?;
            records.push(Interaction {
                user: user.to_string(),
                item: item.to_string(),
                timestamp,
            });
        }
        Ok(Self { records })
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!("{}\t{}\t{}\n", r.user, r.item, r.timestamp));
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_tsv().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// Read a UTF-8 TSV interaction file. Lines starting with `#` are ignored.
pub fn ingest(path: &Path) -> Result<InteractionLog> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    InteractionLog::parse(&text, path)
}

/// Iteratively drop users and items with fewer than `k` interactions until
/// every remaining user and item has at least `k`.
pub fn k_core_filter(log: &InteractionLog, k: usize) -> InteractionLog {
    let mut records = log.records.clone();
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for r in &records {
            *users.entry(&r.user).or_default() += 1;
            *items.entry(&r.item).or_default() += 1;
        }
        let keep: Vec<bool> = records
            .iter()
            .map(|r| users[r.user.as_str()] >= k && items[r.item.as_str()] >= k)
            .collect();
        if keep.iter().all(|&k| k) {
            return InteractionLog { records };
        }
        let mut it = keep.into_iter();
        records.retain(|_| it.next().unwrap());
    }
}

pub fn five_core_filter(log: &InteractionLog) -> InteractionLog {
    k_core_filter(log, 5)
}
