//! `EMB1` embedding matrices with a `row,id,source_id,label` sidecar CSV.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::data::image::RgbImage;
use crate::data::manifest::Manifest;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::VitEncoder;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"EMB1";

/// Images embedded per forward pass.
const EMBED_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowMeta {
    pub id: String,
    /// Empty for unlabeled rows.
    pub label: String,
    pub source_id: String,
}

/// `n × d` row embeddings plus per-row metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    data: Vec<f32>,
    meta: Vec<RowMeta>,
}

impl EmbeddingSet {
    pub fn new(dim: usize, data: Vec<f32>, meta: Vec<RowMeta>) -> Result<Self> {
        if data.len() != dim * meta.len() {
            return Err(Error::Shape(format!(
                "{} values do not form {} rows of dimension {dim}",
                data.len(),
                meta.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding row {}", i / dim.max(1))));
        }
        Ok(Self { dim, data, meta })
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn meta(&self) -> &[RowMeta] {
        &self.meta
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.meta.iter().map(|m| m.label.as_str())
    }

    /// Distinct source ids in sorted order.
    pub fn sources(&self) -> Vec<String> {
        let mut s: Vec<String> = self.meta.iter().map(|m| m.source_id.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    /// Distinct labels in sorted order.
    pub fn classes(&self) -> Vec<String> {
        let mut s: Vec<String> = self.labels().map(str::to_string).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn select(&self, rows: &[usize]) -> EmbeddingSet {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        let mut meta = Vec::with_capacity(rows.len());
        for &r in rows {
            data.extend_from_slice(self.row(r));
            meta.push(self.meta[r].clone());
        }
        EmbeddingSet {
            dim: self.dim,
            data,
            meta,
        }
    }

    pub fn filter(&self, keep: impl Fn(&RowMeta) -> bool) -> EmbeddingSet {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| keep(&self.meta[i])).collect();
        self.select(&rows)
    }

    /// Evaluation needs a label on every row.
    pub fn require_labels(&self) -> Result<()> {
        match self.meta.iter().position(|m| m.label.is_empty()) {
            Some(i) => Err(Error::Protocol(format!("row {i} (`{}`) has no label", self.meta[i].id))),
            None => Ok(()),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(EMBEDDING_MAGIC).map_err(io)?;
        for v in [self.len(), self.dim] {
            let v = u32::try_from(v).map_err(|_| Error::format(path.display(), "size exceeds u32"))?;
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)?;

        let side = sidecar_path(path);
        let mut c = csv::Writer::from_path(&side).map_err(|e| csv_error(&side, e))?;
        c.write_record(["row", "id", "source_id", "label"])
            .map_err(|e| csv_error(&side, e))?;
        for (i, m) in self.meta.iter().enumerate() {
            c.write_record([i.to_string().as_str(), &m.id, &m.source_id, &m.label])
                .map_err(|e| csv_error(&side, e))?;
        }
        c.flush().map_err(|e| Error::io(&side, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(io)?;
        let fmt = |m: &str| Error::format(path.display(), m);
        if bytes.len() < 12 || &bytes[..4] != EMBEDDING_MAGIC {
            return Err(fmt("missing EMB1 header"));
        }
        let u = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
        let (n, d) = (u(4), u(8));
        let expected = n
            .checked_mul(d)
            .and_then(|x| x.checked_mul(4))
            .and_then(|x| x.checked_add(12))
            .ok_or_else(|| fmt("size overflow"))?;
        if bytes.len() != expected {
            return Err(fmt(&format!(
                "expected {expected} bytes for {n}×{d}, found {}",
                bytes.len()
            )));
        }
        let data: Vec<f32> = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();

        let side = sidecar_path(path);
        let mut c = csv::Reader::from_path(&side).map_err(|e| csv_error(&side, e))?;
        let header = c.headers().map_err(|e| csv_error(&side, e))?.clone();
        if header.iter().collect::<Vec<_>>() != ["row", "id", "source_id", "label"] {
            return Err(Error::format(
                side.display(),
                "expected header `row,id,source_id,label`",
            ));
        }
        let mut meta = Vec::with_capacity(n);
        for (i, rec) in c.records().enumerate() {
            let rec = rec.map_err(|e| csv_error(&side, e))?;
            if rec[0].parse::<usize>().ok() != Some(i) {
                return Err(Error::format(side.display(), format!("row {i} is out of order")));
            }
            meta.push(RowMeta {
                id: rec[1].to_string(),
                source_id: rec[2].to_string(),
                label: rec[3].to_string(),
            });
        }
        if meta.len() != n {
            return Err(Error::format(
                side.display(),
                format!("{} metadata rows for {n} embeddings", meta.len()),
            ));
        }
        EmbeddingSet::new(d, data, meta)
    }
}

/// `emb.bin` → `emb.csv`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("csv")
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path.display(), format!("{other:?}")),
    }
}

/// CLS embeddings of in-memory images. Square images are resized to the
/// encoder input size.
pub fn embed_images(encoder: &VitEncoder<f32>, images: &[RgbImage]) -> Result<Vec<f32>> {
    let s = encoder.config.image_size;
    let mut out = Vec::with_capacity(images.len() * encoder.config.embed_dim);
    for chunk in images.chunks(EMBED_CHUNK) {
        let mut data = Vec::with_capacity(chunk.len() * s * s * 3);
        for img in chunk {
            if img.width != img.height {
                return Err(Error::Shape(format!(
                    "encoder expects square inputs, got {}×{}",
                    img.width, img.height
                )));
            }
            let f = img.to_float();
            let f = if img.width == s { f } else { f.resize(s, s) };
            data.extend_from_slice(&f.data);
        }
        let batch = Tensor::new(vec![chunk.len(), s, s, 3], data)?;
        out.extend_from_slice(encoder.embed(&batch)?.data());
    }
    Ok(out)
}

/// One row per manifest record, in manifest order.
pub fn embed(encoder: &VitEncoder<f32>, manifest: &Manifest) -> Result<EmbeddingSet> {
    if encoder.config.in_channels != 3 {
        return Err(Error::Shape("embedding needs an RGB encoder".into()));
    }
    let mut images = Vec::with_capacity(manifest.records.len());
    let mut meta = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        images.push(RgbImage::read_ppm(&r.path)?);
        meta.push(RowMeta {
            id: r
                .path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            label: r.label.clone().unwrap_or_default(),
            source_id: r.source_id.clone(),
        });
    }
    let data = embed_images(encoder, &images)?;
    EmbeddingSet::new(encoder.config.embed_dim, data, meta)
}
