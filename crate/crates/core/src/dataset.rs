//! Hidden-state dump format, manifests and probing-subset selection.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! header (25 bytes)
//!   magic        4 bytes  "HSD1"
//!   version      u32      1
//!   num_layers   u32      L
//!   hidden_dim   u32      D
//!   num_records  u64      N
//!   dtype        u8       1 = f32
//! record (17 + 4*L*D bytes), repeated N times
//!   label        u8       0 = normal, 1 = anomalous, 255 = unlabeled
//!   video_id     u64
//!   frame_index  u64
//!   vectors      f32 * L * D, layer-major
//! ```
//!
//! Every dump is paired with a JSON manifest sidecar stored next to it as
//! `<dump path>.manifest.json`.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"HSD1";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;
pub const HEADER_LEN: usize = 25;
const RECORD_PREFIX_LEN: usize = 17;

/// Frames per extraction segment used when a manifest does not say otherwise.
pub const DEFAULT_SEGMENT_LEN: u32 = 24;
/// Keyframes sampled per segment.
pub const DEFAULT_SAMPLING_K: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Anomalous,
    Unlabeled,
}

impl Label {
    pub fn to_byte(self) -> u8 {
        match self {
            Label::Normal => 0,
            Label::Anomalous => 1,
            Label::Unlabeled => 255,
        }
    }

    pub fn from_byte(byte: u8) -> Option<Self> {
        match byte {
            0 => Some(Label::Normal),
            1 => Some(Label::Anomalous),
            255 => Some(Label::Unlabeled),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Anomalous => "anomalous",
            Label::Unlabeled => "unlabeled",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelScheme {
    VideoLevel,
    FrameLevel,
    Unlabeled,
}

/// JSON sidecar describing a dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model_name: String,
    pub num_layers: u32,
    pub hidden_dim: u32,
    pub sampling_k: u32,
    pub segment_len: u32,
    pub label_scheme: LabelScheme,
    pub created_utc: String,
}

impl Manifest {
    pub fn new(
        model_name: impl Into<String>,
        num_layers: usize,
        hidden_dim: usize,
        label_scheme: LabelScheme,
        created_utc: impl Into<String>,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model_name: model_name.into(),
            num_layers: num_layers as u32,
            hidden_dim: hidden_dim as u32,
            sampling_k: DEFAULT_SAMPLING_K,
            segment_len: DEFAULT_SEGMENT_LEN,
            label_scheme,
            created_utc: created_utc.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported format_version {}",
                self.format_version
            )));
        }
        if self.num_layers == 0 || self.hidden_dim == 0 {
            return Err(Error::Manifest(
                "num_layers and hidden_dim must be at least 1".into(),
            ));
        }
        if self.sampling_k == 0 || self.sampling_k > self.segment_len {
            return Err(Error::Manifest(format!(
                "sampling_k {} must be in 1..={}",
                self.sampling_k, self.segment_len
            )));
        }
        Ok(())
    }

    /// Original frames covered by one sampled keyframe.
    pub fn frames_per_keyframe(&self) -> u32 {
        (self.segment_len / self.sampling_k.max(1)).max(1)
    }
}

/// One dump record: a label, its position in a video and the hidden state of
/// every layer, stored layer-major as `num_layers * hidden_dim` floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub label: Label,
    pub video_id: u64,
    pub frame_index: u64,
    pub vectors: Vec<f32>,
}

impl Record {
    pub fn layer(&self, layer: usize, hidden_dim: usize) -> &[f32] {
        &self.vectors[layer * hidden_dim..(layer + 1) * hidden_dim]
    }

    fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.video_id
            .cmp(&other.video_id)
            .then(self.frame_index.cmp(&other.frame_index))
            .then(self.label.cmp(&other.label))
            .then_with(|| {
                let a = self.vectors.iter().map(|v| v.to_bits());
                let b = other.vectors.iter().map(|v| v.to_bits());
                a.cmp(b)
            })
    }
}

/// In-memory contents of an HSD1 file.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStateDump {
    num_layers: usize,
    hidden_dim: usize,
    records: Vec<Record>,
}

pub fn record_len(num_layers: usize, hidden_dim: usize) -> usize {
    RECORD_PREFIX_LEN + 4 * num_layers * hidden_dim
}

impl HiddenStateDump {
    pub fn new(num_layers: usize, hidden_dim: usize) -> Result<Self> {
        if num_layers == 0 || hidden_dim == 0 {
            return Err(Error::Dimension(format!(
                "num_layers ({num_layers}) and hidden_dim ({hidden_dim}) must be at least 1"
            )));
        }
        Ok(Self {
            num_layers,
            hidden_dim,
            records: Vec::new(),
        })
    }

    pub fn from_records(
        num_layers: usize,
        hidden_dim: usize,
        records: Vec<Record>,
    ) -> Result<Self> {
        let mut dump = Self::new(num_layers, hidden_dim)?;
        for record in records {
            dump.push(record)?;
        }
        Ok(dump)
    }

    pub fn push(&mut self, record: Record) -> Result<()> {
        let expected = self.num_layers * self.hidden_dim;
        if record.vectors.len() != expected {
            return Err(Error::Dimension(format!(
                "record {} has {} values, expected {} ({} layers x {})",
                self.records.len(),
                record.vectors.len(),
                expected,
                self.num_layers,
                self.hidden_dim
            )));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn into_records(self) -> Vec<Record> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.records.len() * record_len(self.num_layers, self.hidden_dim)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.num_layers as u32).to_le_bytes());
        out.extend_from_slice(&(self.hidden_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        out.push(DTYPE_F32);
        for (i, record) in self.records.iter().enumerate() {
            if let Some(pos) = record.vectors.iter().position(|v| !v.is_finite()) {
                return Err(Error::Data {
                    record: i as u64,
                    reason: format!("non-finite value at offset {pos}"),
                });
            }
            out.push(record.label.to_byte());
            out.extend_from_slice(&record.video_id.to_le_bytes());
            out.extend_from_slice(&record.frame_index.to_le_bytes());
            for v in &record.vectors {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated { record: None });
        }
        if bytes[0..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &bytes[0..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let num_layers = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let hidden_dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let dtype = bytes[24];
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype code {dtype}")));
        }
        if num_layers == 0 || hidden_dim == 0 {
            return Err(Error::Format(format!(
                "header declares {num_layers} layers x {hidden_dim} dims"
            )));
        }

        let rec_len = record_len(num_layers, hidden_dim);
        let payload = bytes.len() - HEADER_LEN;
        let expected = usize::try_from(count)
            .ok()
            .and_then(|n| n.checked_mul(rec_len))
            .ok_or_else(|| Error::Format(format!("record count {count} overflows")))?;
        if payload < expected {
            return Err(Error::Truncated {
                record: Some((payload / rec_len) as u64),
            });
        }
        if payload > expected {
            return Err(Error::Format(format!(
                "{} trailing bytes after {count} records",
                payload - expected
            )));
        }

        let floats = num_layers * hidden_dim;
        let mut records = Vec::with_capacity(count as usize);
        for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(rec_len).enumerate() {
            let label = Label::from_byte(chunk[0]).ok_or_else(|| Error::Data {
                record: i as u64,
                reason: format!("invalid label byte {}", chunk[0]),
            })?;
            let video_id = u64::from_le_bytes(chunk[1..9].try_into().unwrap());
            let frame_index = u64::from_le_bytes(chunk[9..17].try_into().unwrap());
            let mut vectors = Vec::with_capacity(floats);
            for (j, b) in chunk[RECORD_PREFIX_LEN..].chunks_exact(4).enumerate() {
                let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
                if !v.is_finite() {
                    return Err(Error::Data {
                        record: i as u64,
                        reason: format!("non-finite value at offset {j}"),
                    });
                }
                vectors.push(v);
            }
            records.push(Record {
                label,
                video_id,
                frame_index,
                vectors,
            });
        }
        Ok(Self {
            num_layers,
            hidden_dim,
            records,
        })
    }

    /// Splits the dump into per-video sequences of one layer's vectors,
    /// ordered by video id and then frame index.
    pub fn sequences(&self, layer: usize) -> Result<Vec<VideoSequence>> {
        self.check_layer(layer)?;
        let mut by_video: BTreeMap<u64, Vec<&Record>> = BTreeMap::new();
        for r in &self.records {
            by_video.entry(r.video_id).or_default().push(r);
        }
        by_video
            .into_iter()
            .map(|(video_id, mut recs)| {
                recs.sort_by_key(|r| r.frame_index);
                let frames = recs
                    .into_iter()
                    .map(|r| (r.frame_index, r.layer(layer, self.hidden_dim).to_vec()))
                    .collect();
                VideoSequence::new(video_id, frames)
            })
            .collect()
    }

    pub fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.num_layers {
            return Err(Error::Dimension(format!(
                "layer {layer} out of range for {} layers",
                self.num_layers
            )));
        }
        Ok(())
    }
}

/// Sidecar manifest location for a dump path.
pub fn manifest_path(dump_path: &Path) -> PathBuf {
    let mut name = dump_path.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

/// Writes a dump and its manifest sidecar, returning the size in bytes of the
/// binary file. Everything is validated before any file is created.
pub fn write_dump(dump: &HiddenStateDump, manifest: &Manifest, destination: &Path) -> Result<u64> {
    manifest.validate()?;
    if manifest.num_layers as usize != dump.num_layers
        || manifest.hidden_dim as usize != dump.hidden_dim
    {
        return Err(Error::Dimension(format!(
            "manifest declares {}x{}, dump is {}x{}",
            manifest.num_layers, manifest.hidden_dim, dump.num_layers, dump.hidden_dim
        )));
    }
    let bytes = dump.encode()?;
    let manifest_json = serde_json::to_vec_pretty(manifest)?;

    let mut file = BufWriter::new(fs::File::create(destination)?);
    file.write_all(&bytes)?;
    file.flush()?;
    fs::write(manifest_path(destination), manifest_json)?;
    Ok(bytes.len() as u64)
}

/// Reads and validates a dump together with its manifest sidecar.
pub fn read_dump(source: &Path) -> Result<(Manifest, HiddenStateDump)> {
    let bytes = fs::read(source)?;
    let dump = HiddenStateDump::decode(&bytes)?;
    let manifest: Manifest = serde_json::from_slice(&fs::read(manifest_path(source))?)?;
    manifest.validate()?;
    if manifest.num_layers as usize != dump.num_layers
        || manifest.hidden_dim as usize != dump.hidden_dim
    {
        return Err(Error::Manifest(format!(
            "manifest declares {}x{}, binary header is {}x{}",
            manifest.num_layers, manifest.hidden_dim, dump.num_layers, dump.hidden_dim
        )));
    }
    Ok((manifest, dump))
}

/// Frames of one video at a single layer.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSequence {
    pub video_id: u64,
    frame_indices: Vec<u64>,
    vectors: Vec<Vec<f32>>,
}

impl VideoSequence {
    pub fn new(video_id: u64, frames: Vec<(u64, Vec<f32>)>) -> Result<Self> {
        let dim = frames.first().map(|(_, v)| v.len());
        let mut frame_indices = Vec::with_capacity(frames.len());
        let mut vectors = Vec::with_capacity(frames.len());
        for (idx, v) in frames {
            if Some(v.len()) != dim {
                return Err(Error::Dimension(format!(
                    "video {video_id} frame {idx} has dimension {}",
                    v.len()
                )));
            }
            if let Some(&prev) = frame_indices.last() {
                if idx <= prev {
                    return Err(Error::Data {
                        record: idx,
                        reason: format!(
                            "video {video_id}: frame index {idx} does not follow {prev}"
                        ),
                    });
                }
            }
            frame_indices.push(idx);
            vectors.push(v);
        }
        Ok(Self {
            video_id,
            frame_indices,
            vectors,
        })
    }

    pub fn frame_indices(&self) -> &[u64] {
        &self.frame_indices
    }

    pub fn vectors(&self) -> &[Vec<f32>] {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.frame_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_indices.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.vectors.first().map(Vec::len)
    }
}

/// A labeled probing corpus: every record is either normal or anomalous.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    dump: HiddenStateDump,
}

impl ProbeSet {
    pub fn new(dump: HiddenStateDump) -> Result<Self> {
        if let Some(i) = dump
            .records
            .iter()
            .position(|r| r.label == Label::Unlabeled)
        {
            return Err(Error::Data {
                record: i as u64,
                reason: "unlabeled record in probing set".into(),
            });
        }
        Ok(Self { dump })
    }

    pub fn num_layers(&self) -> usize {
        self.dump.num_layers
    }

    pub fn hidden_dim(&self) -> usize {
        self.dump.hidden_dim
    }

    pub fn records(&self) -> &[Record] {
        &self.dump.records
    }

    pub fn len(&self) -> usize {
        self.dump.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dump.is_empty()
    }

    pub fn as_dump(&self) -> &HiddenStateDump {
        &self.dump
    }

    pub fn into_dump(self) -> HiddenStateDump {
        self.dump
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let anomalous = self
            .records()
            .iter()
            .filter(|r| r.label == Label::Anomalous)
            .count();
        (self.len() - anomalous, anomalous)
    }

    /// Labels as 0.0 (normal) / 1.0 (anomalous).
    pub fn targets(&self) -> Vec<f64> {
        self.records()
            .iter()
            .map(|r| {
                if r.label == Label::Anomalous {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Row-major `N x D` matrix of one layer's vectors.
    pub fn layer_rows(&self, layer: usize) -> Result<ndarray::Array2<f64>> {
        self.dump.check_layer(layer)?;
        let d = self.hidden_dim();
        Ok(ndarray::Array2::from_shape_fn((self.len(), d), |(i, j)| {
            self.dump.records[i].vectors[layer * d + j] as f64
        }))
    }
}

/// Number of samples kept from a class of `class_size` at `fraction`:
/// round-half-up with a floor of one.
pub fn subset_count(class_size: usize, fraction: f64) -> usize {
    if class_size == 0 {
        return 0;
    }
    let n = (fraction * class_size as f64 + 0.5).floor() as usize;
    n.clamp(1, class_size)
}

/// Picks `round(fraction * class size)` samples of each label (at least one
/// per present class). The selection depends only on the multiset of samples
/// and the seed; survivors keep their input order.
pub fn stratified_subset(set: &ProbeSet, fraction: f64, seed: u64) -> Result<ProbeSet> {
    if set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fraction {fraction} outside (0, 1]"
        )));
    }
    let records = set.records();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; records.len()];
    for label in [Label::Normal, Label::Anomalous] {
        let mut members: Vec<usize> = (0..records.len())
            .filter(|&i| records[i].label == label)
            .collect();
        if members.is_empty() {
            continue;
        }
        members.sort_by(|&a, &b| records[a].canonical_cmp(&records[b]));
        members.shuffle(&mut rng);
        for &i in members.iter().take(subset_count(members.len(), fraction)) {
            keep[i] = true;
        }
    }
    let selected = records
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(r, _)| r.clone())
        .collect();
    ProbeSet::new(HiddenStateDump::from_records(
        set.num_layers(),
        set.hidden_dim(),
        selected,
    )?)
}
