//! Output directory handling. Every tabular file starts with a
//! `# config_digest=` line followed by a header row; floats are written with
//! 17 significant digits so they round-trip exactly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// 17 significant digits.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Debug, Clone, Serialize)]
pub struct FileRecord {
    pub name: String,
    pub sha256: String,
}

pub struct Outputs {
    dir: PathBuf,
    digest: String,
    files: Vec<FileRecord>,
}

impl Outputs {
    pub fn new(dir: &Path, digest: &str) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            digest: digest.to_string(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn files(&self) -> &[FileRecord] {
        &self.files
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let path = self.dir.join(name);
        let mut f =
            fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        f.write_all(bytes)?;
        self.files.retain(|r| r.name != name);
        self.files.push(FileRecord {
            name: name.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
        });
        Ok(())
    }

    /// CSV with the digest line, a header row and pre-formatted cells.
    pub fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> anyhow::Result<()> {
        let mut s = format!("# config_digest={}\n{}\n", self.digest, header.join(","));
        for r in rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        self.write(name, s.as_bytes())
    }

    /// Whitespace-separated columns for gnuplot; comment lines carry the
    /// digest and the column names.
    pub fn dat(&mut self, name: &str, columns: &[&str], rows: &[Vec<f64>]) -> anyhow::Result<()> {
        let mut s = format!("# config_digest={}\n# {}\n", self.digest, columns.join(" "));
        for r in rows {
            let cells: Vec<String> = r.iter().map(|&x| num(x)).collect();
            s.push_str(&cells.join(" "));
            s.push('\n');
        }
        self.write(name, s.as_bytes())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    /// Raw bytes produced elsewhere (for example matrix triplets); the digest
    /// line is prepended.
    pub fn raw_with_digest(&mut self, name: &str, body: &[u8]) -> anyhow::Result<()> {
        let mut bytes = format!("# config_digest={}\n", self.digest).into_bytes();
        bytes.extend_from_slice(body);
        self.write(name, &bytes)
    }
}

/// Reads a CSV written by [`Outputs::csv`]: returns the digest, the header
/// and the rows.
pub fn read_csv(path: &Path) -> anyhow::Result<(String, Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let digest = lines
        .next()
        .and_then(|l| l.strip_prefix("# config_digest="))
        .context("missing digest line")?
        .to_string();
    let header = lines
        .next()
        .context("missing header")?
        .split(',')
        .map(String::from)
        .collect();
    let rows = lines
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    Ok((digest, header, rows))
}
