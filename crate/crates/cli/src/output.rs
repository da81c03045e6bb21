//! Output directories are staged next to their destination and renamed into
//! place once every file and the manifest are written, so a failed run
//! leaves no partial directory behind.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: u64,
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub core_version: String,
    pub command: String,
    pub config: Value,
    pub plot: bool,
    pub files: Vec<FileEntry>,
    pub failures: Vec<String>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

pub struct Staging {
    dir: PathBuf,
    dest: PathBuf,
    files: Vec<String>,
    pub failures: Vec<String>,
}

impl Staging {
    pub fn new(dest: &Path) -> Result<Self, CliError> {
        if dest.exists() {
            let ours = dest.join(MANIFEST).is_file();
            let empty = dest.is_dir() && fs::read_dir(dest)?.next().is_none();
            if !(ours || empty) {
                return Err(CliError::Config(format!(
                    "{} exists and is not an output directory of this tool",
                    dest.display()
                )));
            }
        }
        let parent = match dest.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent)?;
        let name = dest.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
        let dir = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir(&dir)?;
        Ok(Self { dir, dest: dest.to_path_buf(), files: Vec::new(), failures: Vec::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Registers a file written under `path(name)`.
    pub fn add(&mut self, name: &str) {
        self.files.push(name.to_string());
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        fs::write(self.path(name), bytes)?;
        self.add(name);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(anyhow::Error::from)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn write_csv(&mut self, name: &str, table: &Table) -> Result<(), CliError> {
        let mut w = csv::Writer::from_path(self.path(name)).map_err(anyhow::Error::from)?;
        w.write_record(&table.header).map_err(anyhow::Error::from)?;
        for row in &table.rows {
            w.write_record(row).map_err(anyhow::Error::from)?;
        }
        w.flush()?;
        self.add(name);
        Ok(())
    }

    /// Writes the manifest and moves the directory into place.
    pub fn commit(mut self, command: &str, config: Value, plot: bool) -> Result<PathBuf, CliError> {
        let mut files = Vec::new();
        for name in &self.files {
            files.push(FileEntry { name: name.clone(), bytes: fs::metadata(self.dir.join(name))?.len() });
        }
        let manifest = Manifest {
            tool: "doublepass".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            core_version: doublepass_core::VERSION.into(),
            command: command.into(),
            config,
            plot,
            files,
            failures: std::mem::take(&mut self.failures),
        };
        let mut text = serde_json::to_string_pretty(&manifest).map_err(anyhow::Error::from)?;
        text.push('\n');
        fs::write(self.dir.join(MANIFEST), text)?;
        if self.dest.exists() {
            fs::remove_dir_all(&self.dest)?;
        }
        fs::rename(&self.dir, &self.dest)?;
        Ok(self.dest.clone())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if self.dir.exists() {
            let _ = fs::remove_dir_all(&self.dir);
        }
    }
}

/// A CSV table with round-trip decimal formatting.
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row.into_iter().map(|c| c.to_string()).collect());
    }
}

pub enum Cell {
    F(f64),
    U(u64),
    Empty,
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            // Both forms print the shortest digits that parse back exactly.
            Cell::F(x) if *x == 0.0 || (1e-5..1e16).contains(&x.abs()) || !x.is_finite() => write!(f, "{x}"),
            Cell::F(x) => write!(f, "{x:e}"),
            Cell::U(n) => write!(f, "{n}"),
            Cell::Empty => Ok(()),
        }
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::F(x)
    }
}

impl From<Option<f64>> for Cell {
    fn from(x: Option<f64>) -> Self {
        x.map_or(Cell::Empty, Cell::F)
    }
}

impl From<usize> for Cell {
    fn from(n: usize) -> Self {
        Cell::U(n as u64)
    }
}

impl From<u64> for Cell {
    fn from(n: u64) -> Self {
        Cell::U(n)
    }
}
