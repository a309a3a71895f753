//! Dataset manifests and the synthetic multi-domain corpus generator.
//!
//! A manifest is a JSON-lines file. Line 1 is a header
//! `{"manifest_version":1,"kind":...,"dataset_id":...}`; every following
//! line is one record. Image paths are relative to the manifest's directory.

mod synth;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;
use crate::raster::Image;

pub use synth::{generate_synthetic_corpus, DomainSpec, GlyphPalette, Style, SynthSpec};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: invalid record: {message}")]
    Validation { line: usize, message: String },
    #[error("line {line}: referenced image {path} does not exist")]
    MissingImage { line: usize, path: PathBuf },
    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("synthetic spec: {0}")]
    Spec(String),
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifestKind {
    Detection,
    ReidLabeled,
    ReidUnlabeled,
    /// Scene images with boxes and identities: the fine-tuning and
    /// evaluation target.
    PersonSearch,
}

impl ManifestKind {
    pub fn is_scene(self) -> bool {
        matches!(self, Self::Detection | Self::PersonSearch)
    }
}

/// Scene image with person boxes. Identities are present only for
/// person-search corpora.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionRecord {
    pub image_path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<BBox>,
    pub identities: Option<Vec<u64>>,
    pub dataset_id: String,
}

/// A single person crop.
#[derive(Clone, Debug, PartialEq)]
pub struct ReidRecord {
    pub image_path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub identity: Option<u64>,
    pub dataset_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Record {
    Detection(DetectionRecord),
    Reid(ReidRecord),
}

impl Record {
    pub fn image_path(&self) -> &Path {
        match self {
            Record::Detection(r) => &r.image_path,
            Record::Reid(r) => &r.image_path,
        }
    }

    pub fn size(&self) -> (u32, u32) {
        match self {
            Record::Detection(r) => (r.width, r.height),
            Record::Reid(r) => (r.width, r.height),
        }
    }

    pub fn dataset_id(&self) -> &str {
        match self {
            Record::Detection(r) => &r.dataset_id,
            Record::Reid(r) => &r.dataset_id,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub dataset_id: String,
    pub kind: ManifestKind,
    pub records: Vec<Record>,
    /// Directory that record image paths are relative to.
    pub root: PathBuf,
}

/// `((min_w, max_w), (min_h, max_h))` over all records.
pub type SizeStats = ((u32, u32), (u32, u32));

impl CorpusManifest {
    pub fn path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_size_stats(&self) -> Option<SizeStats> {
        let mut it = self.records.iter().map(Record::size);
        let (w, h) = it.next()?;
        let init = ((w, w), (h, h));
        Some(it.fold(init, |((a, b), (c, d)), (w, h)| {
            ((a.min(w), b.max(w)), (c.min(h), d.max(h)))
        }))
    }

    pub fn resolve(&self, record: &Record) -> PathBuf {
        self.root.join(record.image_path())
    }

    pub fn load_image(&self, index: usize) -> Result<Image, CorpusError> {
        let path = self.resolve(&self.records[index]);
        Image::load_png(&path).map_err(|e| CorpusError::Image {
            path,
            message: e.to_string(),
        })
    }

    pub fn detection(&self, index: usize) -> Option<&DetectionRecord> {
        match &self.records[index] {
            Record::Detection(r) => Some(r),
            Record::Reid(_) => None,
        }
    }

    pub fn reid(&self, index: usize) -> Option<&ReidRecord> {
        match &self.records[index] {
            Record::Reid(r) => Some(r),
            Record::Detection(_) => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    manifest_version: u32,
    kind: ManifestKind,
    dataset_id: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    image_path: String,
    width: u32,
    height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    boxes: Option<Vec<BBox>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    identities: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    identity: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dataset_id: Option<String>,
}

fn validate_line(kind: ManifestKind, dataset_id: &str, l: Line, line: usize) -> Result<Record, CorpusError> {
    let bad = |message: String| CorpusError::Validation { line, message };
    if let Some(id) = &l.dataset_id {
        if id != dataset_id {
            return Err(bad(format!(
                "dataset_id {id:?} differs from header {dataset_id:?}"
            )));
        }
    }
    if l.width == 0 || l.height == 0 {
        return Err(bad("zero image dimension".into()));
    }
    if kind.is_scene() {
        if l.identity.is_some() {
            return Err(bad("scene record carries a crop identity".into()));
        }
        let boxes = l.boxes.ok_or_else(|| bad("scene record without boxes".into()))?;
        for (i, b) in boxes.iter().enumerate() {
            if !b.is_valid_in(l.width as f64, l.height as f64) {
                return Err(bad(format!(
                    "box {i} {:?} is degenerate or outside the {}x{} image",
                    <[f64; 4]>::from(*b),
                    l.width,
                    l.height
                )));
            }
        }
        match (kind, &l.identities) {
            (ManifestKind::Detection, Some(_)) => {
                return Err(bad("detection record carries identities".into()))
            }
            (ManifestKind::PersonSearch, None) => {
                return Err(bad("person-search record without identities".into()))
            }
            (ManifestKind::PersonSearch, Some(ids)) if ids.len() != boxes.len() => {
                return Err(bad(format!(
                    "{} identities for {} boxes",
                    ids.len(),
                    boxes.len()
                )))
            }
            _ => {}
        }
        Ok(Record::Detection(DetectionRecord {
            image_path: PathBuf::from(l.image_path),
            width: l.width,
            height: l.height,
            boxes,
            identities: l.identities,
            dataset_id: dataset_id.to_string(),
        }))
    } else {
        if l.boxes.is_some() || l.identities.is_some() {
            return Err(bad("re-ID record carries boxes".into()));
        }
        match (kind, l.identity) {
            (ManifestKind::ReidLabeled, None) => {
                return Err(bad("labeled re-ID record without identity".into()))
            }
            (ManifestKind::ReidUnlabeled, Some(_)) => {
                return Err(bad("unlabeled re-ID record with identity".into()))
            }
            _ => {}
        }
        Ok(Record::Reid(ReidRecord {
            image_path: PathBuf::from(l.image_path),
            width: l.width,
            height: l.height,
            identity: l.identity,
            dataset_id: dataset_id.to_string(),
        }))
    }
}

/// Parse manifest text without touching the filesystem.
pub fn parse_manifest(text: &str, root: &Path) -> Result<CorpusManifest, CorpusError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, first) = lines.next().ok_or(CorpusError::Parse {
        line: 1,
        message: "empty manifest".into(),
    })?;
    let header: Header = serde_json::from_str(first).map_err(|e| CorpusError::Parse {
        line: 1,
        message: format!("header: {e}"),
    })?;
    if header.manifest_version != MANIFEST_VERSION {
        return Err(CorpusError::Validation {
            line: 1,
            message: format!("unsupported manifest_version {}", header.manifest_version),
        });
    }
    let mut records = Vec::new();
    for (n, text) in lines {
        if text.trim().is_empty() {
            continue;
        }
        let l: Line = serde_json::from_str(text).map_err(|e| CorpusError::Parse {
            line: n,
            message: e.to_string(),
        })?;
        records.push(validate_line(header.kind, &header.dataset_id, l, n)?);
    }
    Ok(CorpusManifest {
        dataset_id: header.dataset_id,
        kind: header.kind,
        records,
        root: root.to_path_buf(),
    })
}

/// Load and validate a manifest, checking that every image exists.
pub fn load_manifest(path: &Path) -> Result<CorpusManifest, CorpusError> {
    let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    let root = path.parent().unwrap_or(Path::new("."));
    let manifest = parse_manifest(&text, root)?;
    for (i, r) in manifest.records.iter().enumerate() {
        let p = manifest.resolve(r);
        if !p.is_file() {
            return Err(CorpusError::MissingImage { line: i + 2, path: p });
        }
    }
    Ok(manifest)
}

pub fn render_manifest(m: &CorpusManifest) -> String {
    let header = Header {
        manifest_version: MANIFEST_VERSION,
        kind: m.kind,
        dataset_id: m.dataset_id.clone(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for r in &m.records {
        let line = match r {
            Record::Detection(d) => Line {
                image_path: d.image_path.to_string_lossy().into_owned(),
                width: d.width,
                height: d.height,
                boxes: Some(d.boxes.clone()),
                identities: d.identities.clone(),
                identity: None,
                dataset_id: Some(d.dataset_id.clone()),
            },
            Record::Reid(c) => Line {
                image_path: c.image_path.to_string_lossy().into_owned(),
                width: c.width,
                height: c.height,
                boxes: None,
                identities: None,
                identity: c.identity,
                dataset_id: Some(c.dataset_id.clone()),
            },
        };
        out.push_str(&serde_json::to_string(&line).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn save_manifest(m: &CorpusManifest, path: &Path) -> Result<(), CorpusError> {
    let mut f = fs::File::create(path).map_err(|e| CorpusError::io(path, e))?;
    f.write_all(render_manifest(m).as_bytes())
        .map_err(|e| CorpusError::io(path, e))
}
