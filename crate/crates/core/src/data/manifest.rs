//! Sample manifests (`path,kind,source_id,label`) and the field list written
//! by the synthetic generator (`path,mask_path,source_id,label`).

use std::fs::File;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleKind {
    Patch,
    Cell,
}

impl SampleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SampleKind::Patch => "patch",
            SampleKind::Cell => "cell",
        }
    }
}

impl std::str::FromStr for SampleKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "patch" => Ok(Self::Patch),
            "cell" => Ok(Self::Cell),
            _ => Err(format!("unknown sample kind `{s}` (patch|cell)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub kind: SampleKind,
    pub source_id: String,
    pub label: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path.display(), format!("{other:?}")),
    }
}

/// Relative paths in a CSV are resolved against the CSV's directory.
fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = PathBuf::from(p);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

impl Manifest {
    /// Reads and validates a manifest: every path must exist and all records
    /// must share one kind.
    pub fn read(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "kind", "source_id", "label"] {
            return Err(Error::format(
                path.display(),
                "expected header `path,kind,source_id,label`",
            ));
        }
        let mut records = Vec::new();
        for (i, row) in rdr.records().enumerate() {
            let row = row.map_err(|e| csv_err(path, e))?;
            let kind = row[1]
                .parse::<SampleKind>()
                .map_err(|m| Error::format(path.display(), format!("row {}: {m}", i + 1)))?;
            let p = resolve(base, &row[0]);
            if !p.exists() {
                return Err(Error::io(
                    &p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "listed in manifest"),
                ));
            }
            if row[2].is_empty() {
                return Err(Error::format(path.display(), format!("row {}: empty source_id", i + 1)));
            }
            records.push(ManifestRecord {
                path: p,
                kind,
                source_id: row[2].to_string(),
                label: (!row[3].is_empty()).then(|| row[3].to_string()),
            });
        }
        let m = Manifest { records };
        m.kind()?;
        Ok(m)
    }

    /// The single kind shared by all records (`None` when empty).
    pub fn kind(&self) -> Result<Option<SampleKind>> {
        let mut kinds = self.records.iter().map(|r| r.kind);
        let Some(first) = kinds.next() else {
            return Ok(None);
        };
        if kinds.any(|k| k != first) {
            return Err(Error::Protocol("manifest mixes patch and cell samples".into()));
        }
        Ok(Some(first))
    }

    /// Writes paths relative to the manifest's directory when possible.
    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["path", "kind", "source_id", "label"])
            .map_err(|e| csv_err(path, e))?;
        for r in &self.records {
            let p = r.path.strip_prefix(base).unwrap_or(&r.path);
            w.write_record([
                p.to_string_lossy().as_ref(),
                r.kind.as_str(),
                &r.source_id,
                r.label.as_deref().unwrap_or(""),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// One smear field with its label map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldRecord {
    pub path: PathBuf,
    pub mask_path: Option<PathBuf>,
    pub source_id: String,
    pub label: Option<String>,
}

pub fn read_fields(path: &Path) -> Result<Vec<FieldRecord>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["path", "mask_path", "source_id", "label"] {
        return Err(Error::format(
            path.display(),
            "expected header `path,mask_path,source_id,label`",
        ));
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| csv_err(path, e))?;
        out.push(FieldRecord {
            path: resolve(base, &row[0]),
            mask_path: (!row[1].is_empty()).then(|| resolve(base, &row[1])),
            source_id: row[2].to_string(),
            label: (!row[3].is_empty()).then(|| row[3].to_string()),
        });
    }
    Ok(out)
}

pub fn write_fields(path: &Path, fields: &[FieldRecord]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["path", "mask_path", "source_id", "label"])
        .map_err(|e| csv_err(path, e))?;
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned();
    for f in fields {
        w.write_record([
            rel(&f.path),
            f.mask_path.as_deref().map(rel).unwrap_or_default(),
            f.source_id.clone(),
            f.label.clone().unwrap_or_default(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
