//! `manifest.tsv`: one row per file with its domain, class, id, split and
//! optional SHA-256.

use std::path::Path;

use super::{Domain, Split};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";
const HEADER: &str = "domain\tclass\tid\tsplit\tsha256";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub domain: Domain,
    pub class: String,
    pub id: String,
    pub split: Split,
    pub sha256: Option<String>,
}

pub fn render(rows: &[ManifestRow]) -> String {
    let mut s = String::from(HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.domain.dir(),
            r.class,
            r.id,
            r.split.name(),
            r.sha256.as_deref().unwrap_or("-")
        ));
    }
    s
}

pub fn parse(text: &str, path: &Path) -> Result<Vec<ManifestRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == HEADER => {}
        _ => return Err(Error::ingestion(path, format!("missing header `{HEADER}`"))),
    }
    let mut rows = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = |msg: String| Error::ingestion(path, format!("line {}: {msg}", n + 1));
        if cols.len() != 5 {
            return Err(bad(format!("expected 5 columns, found {}", cols.len())));
        }
        let domain = Domain::from_dir(cols[0]).ok_or_else(|| bad(format!("unknown domain `{}`", cols[0])))?;
        let split = Split::from_name(cols[3]).ok_or_else(|| bad(format!("unknown split `{}`", cols[3])))?;
        rows.push(ManifestRow {
            domain,
            class: cols[1].to_string(),
            id: cols[2].to_string(),
            split,
            sha256: (cols[4] != "-").then(|| cols[4].to_string()),
        });
    }
    Ok(rows)
}
