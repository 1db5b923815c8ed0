//! Dataset manifests: one CSV row per record with its class, domain
//! (deployment) and native sample rate.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

const HEADER: &str = "path,class,domain,sample_rate";

/// One manifest row.  `path` is relative to the manifest location
/// unless absolute.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: String,
    pub class: String,
    pub domain: String,
    pub sample_rate: f64,
}

/// A parsed manifest plus the label vocabularies found in it.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    /// Directory the manifest was read from; relative record paths
    /// resolve against it.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    /// Sorted unique class names.
    pub classes: Vec<String>,
    /// Sorted unique domain names.
    pub domains: Vec<String>,
}

impl DatasetManifest {
    /// Reads and validates a manifest file.
    pub fn read(path: &Path) -> Result<Self> {
        let disp = path.display().to_string();
        let file = File::open(path).map_err(|e| Error::io(disp.clone(), e))?;
        let reader = BufReader::new(file);
        let mut lines = reader.lines().enumerate();

        let merr = |line: usize, msg: String| Error::Manifest {
            path: disp.clone(),
            line,
            msg,
        };

        let header = match lines.next() {
            Some((_, Ok(h))) => h,
            Some((_, Err(e))) => return Err(Error::io(disp.clone(), e)),
            None => return Err(merr(1, "empty manifest".into())),
        };
        if header.trim() != HEADER {
            return Err(merr(
                1,
                format!("header must be {HEADER:?}, got {:?}", header.trim()),
            ));
        }

        let mut entries = Vec::new();
        for (idx, line) in lines {
            let line = line.map_err(|e| Error::io(disp.clone(), e))?;
            let lineno = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(merr(
                    lineno,
                    format!("expected 4 comma-separated fields, got {}", fields.len()),
                ));
            }
            let sample_rate: f64 = fields[3].trim().parse().map_err(|_| {
                merr(lineno, format!("bad sample_rate {:?}", fields[3].trim()))
            })?;
            if !(sample_rate > 0.0) || !sample_rate.is_finite() {
                return Err(merr(lineno, format!("sample_rate must be positive, got {sample_rate}")));
            }
            for (name, value) in [("path", fields[0]), ("class", fields[1]), ("domain", fields[2])] {
                if value.trim().is_empty() {
                    return Err(merr(lineno, format!("empty {name} field")));
                }
            }
            entries.push(ManifestEntry {
                path: fields[0].trim().to_string(),
                class: fields[1].trim().to_string(),
                domain: fields[2].trim().to_string(),
                sample_rate,
            });
        }
        if entries.is_empty() {
            return Err(merr(1, "manifest has no records".into()));
        }

        let mut classes: Vec<String> = entries.iter().map(|e| e.class.clone()).collect();
        classes.sort();
        classes.dedup();
        let mut domains: Vec<String> = entries.iter().map(|e| e.domain.clone()).collect();
        domains.sort();
        domains.dedup();

        Ok(DatasetManifest {
            root: path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf(),
            entries,
            classes,
            domains,
        })
    }

    /// Resolves a record path against the manifest root.
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

/// Writes a manifest.  Fields may not contain commas or newlines (the
/// format does no quoting).
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let disp = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(disp.clone(), e))?;
    let mut w = BufWriter::new(file);
    let werr = |e: std::io::Error| Error::io(disp.clone(), e);
    writeln!(w, "{HEADER}").map_err(werr)?;
    for e in entries {
        for (name, value) in [("path", &e.path), ("class", &e.class), ("domain", &e.domain)] {
            if value.contains(',') || value.contains('\n') {
                return Err(Error::Data(format!(
                    "manifest {name} field {value:?} contains a comma or newline"
                )));
            }
        }
        writeln!(w, "{},{},{},{}", e.path, e.class, e.domain, e.sample_rate).map_err(werr)?;
    }
    w.flush().map_err(werr)?;
    Ok(())
}
