//! MOTChallenge-style track files and per-detection embedding files.
//!
//! Track lines are `frame,id,x,y,w,h,conf,-1,-1,-1`. Ground-truth style files
//! with only six columns are accepted and get a confidence of 1. Embedding
//! lines are `frame,id,f0,...,f127`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use thiserror::Error;

/// Length of the per-detection appearance vectors.
pub const EMBEDDING_DIM: usize = 128;

#[derive(Debug, Error)]
pub enum TrackIoError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: duplicate detection for frame {frame}, id {id}")]
    Duplicate { line: usize, frame: u32, id: u32 },
    #[error("line {line}: box width and height must be positive")]
    NonPositiveBox { line: usize },
    #[error("tracklet {id}: {msg}")]
    InvalidTracklet { id: u32, msg: String },
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrackIoError>;

/// Axis-aligned box in pixels, `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            // identical boxes can round a hair above 1
            (inter / union).min(1.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub frame: u32,
    pub track_id: u32,
    pub bbox: BBox,
    pub confidence: f64,
}

/// One observation of a tracklet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub frame: u32,
    pub bbox: BBox,
    pub confidence: f64,
}

impl Entry {
    pub fn new(frame: u32, bbox: BBox) -> Self {
        Self {
            frame,
            bbox,
            confidence: 1.0,
        }
    }
}

/// Frame-ordered boxes of one identity in one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    id: u32,
    entries: Vec<Entry>,
}

impl Tracklet {
    /// Builds a tracklet, rejecting empty or non strictly increasing entries.
    pub fn new(id: u32, entries: Vec<Entry>) -> Result<Self> {
        let invalid = |msg: &str| TrackIoError::InvalidTracklet {
            id,
            msg: msg.to_string(),
        };
        if id == 0 {
            return Err(invalid("ids must be positive"));
        }
        if entries.is_empty() {
            return Err(invalid("no entries"));
        }
        if entries.windows(2).any(|w| w[0].frame >= w[1].frame) {
            return Err(invalid("frames must be strictly increasing"));
        }
        if entries.iter().any(|e| e.frame == 0) {
            return Err(invalid("frames are 1-based"));
        }
        if entries.iter().any(|e| !e.bbox.is_valid()) {
            return Err(invalid("box with non-positive size or non-finite coordinate"));
        }
        Ok(Self { id, entries })
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<Entry> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn start_frame(&self) -> u32 {
        self.entries[0].frame
    }

    pub fn end_frame(&self) -> u32 {
        self.entries[self.entries.len() - 1].frame
    }

    pub fn first(&self) -> &Entry {
        &self.entries[0]
    }

    pub fn last(&self) -> &Entry {
        &self.entries[self.entries.len() - 1]
    }

    pub fn with_id(mut self, id: u32) -> Self {
        self.id = id;
        self
    }

    pub fn entry_at(&self, frame: u32) -> Option<&Entry> {
        self.entries
            .binary_search_by_key(&frame, |e| e.frame)
            .ok()
            .map(|i| &self.entries[i])
    }
}

/// All tracklets of one camera, keyed by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackSet {
    pub camera_id: String,
    tracklets: BTreeMap<u32, Tracklet>,
}

impl TrackSet {
    pub fn new(camera_id: impl Into<String>) -> Self {
        Self {
            camera_id: camera_id.into(),
            tracklets: BTreeMap::new(),
        }
    }

    pub fn from_tracklets(camera_id: impl Into<String>, tracklets: impl IntoIterator<Item = Tracklet>) -> Result<Self> {
        let mut set = Self::new(camera_id);
        for t in tracklets {
            set.insert(t)?;
        }
        Ok(set)
    }

    /// Adds a tracklet; ids must be unique within the set.
    pub fn insert(&mut self, tracklet: Tracklet) -> Result<()> {
        let id = tracklet.id;
        if self.tracklets.contains_key(&id) {
            return Err(TrackIoError::InvalidTracklet {
                id,
                msg: "duplicate tracklet id".into(),
            });
        }
        self.tracklets.insert(id, tracklet);
        Ok(())
    }

    pub fn get(&self, id: u32) -> Option<&Tracklet> {
        self.tracklets.get(&id)
    }

    pub fn remove(&mut self, id: u32) -> Option<Tracklet> {
        self.tracklets.remove(&id)
    }

    /// Tracklets in ascending id order.
    pub fn tracklets(&self) -> impl Iterator<Item = &Tracklet> {
        self.tracklets.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.tracklets.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.tracklets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracklets.is_empty()
    }

    pub fn max_id(&self) -> u32 {
        self.tracklets.keys().next_back().copied().unwrap_or(0)
    }

    pub fn num_detections(&self) -> usize {
        self.tracklets.values().map(Tracklet::len).sum()
    }

    /// Inclusive `(min, max)` frame over all entries, `None` when empty.
    pub fn frame_range(&self) -> Option<(u32, u32)> {
        let lo = self.tracklets.values().map(Tracklet::start_frame).min()?;
        let hi = self.tracklets.values().map(Tracklet::end_frame).max()?;
        Some((lo, hi))
    }

    /// Detections sorted by `(frame, id)`.
    pub fn detections(&self) -> Vec<Detection> {
        let mut out: Vec<Detection> = self
            .tracklets
            .values()
            .flat_map(|t| {
                t.entries.iter().map(move |e| Detection {
                    frame: e.frame,
                    track_id: t.id,
                    bbox: e.bbox,
                    confidence: e.confidence,
                })
            })
            .collect();
        out.sort_by_key(|d| (d.frame, d.track_id));
        out
    }

    /// Groups detections by frame: `frame -> [(id, box)]`, ids ascending.
    pub fn by_frame(&self) -> BTreeMap<u32, Vec<(u32, BBox)>> {
        let mut frames: BTreeMap<u32, Vec<(u32, BBox)>> = BTreeMap::new();
        for t in self.tracklets.values() {
            for e in &t.entries {
                frames.entry(e.frame).or_default().push((t.id, e.bbox));
            }
        }
        frames
    }
}

fn malformed(line: usize, msg: impl Into<String>) -> TrackIoError {
    TrackIoError::Malformed { line, msg: msg.into() }
}

fn parse_field<T: std::str::FromStr>(field: &str, line: usize, name: &str) -> Result<T> {
    field
        .trim()
        .parse::<T>()
        .map_err(|_| malformed(line, format!("cannot parse {name} from {field:?}")))
}

fn parse_frame_id(fields: &[&str], line: usize) -> Result<(u32, u32)> {
    let frame: u32 = parse_field(fields[0], line, "frame")?;
    let id: u32 = parse_field(fields[1], line, "id")?;
    if frame == 0 {
        return Err(malformed(line, "frame indices are 1-based"));
    }
    if id == 0 {
        return Err(malformed(line, "track ids must be positive"));
    }
    Ok((frame, id))
}

/// Parses MOT-format text into a track set.
pub fn parse_mot(text: &str) -> Result<TrackSet> {
    read_mot(text.as_bytes(), "")
}

/// Reads MOT-format lines from `reader`.
pub fn read_mot<R: BufRead>(reader: R, camera_id: &str) -> Result<TrackSet> {
    let mut grouped: BTreeMap<u32, BTreeMap<u32, (usize, Entry)>> = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if !(6..=10).contains(&fields.len()) {
            return Err(malformed(
                line_no,
                format!("expected 6 to 10 fields, found {}", fields.len()),
            ));
        }
        let (frame, id) = parse_frame_id(&fields, line_no)?;
        let x: f64 = parse_field(fields[2], line_no, "x")?;
        let y: f64 = parse_field(fields[3], line_no, "y")?;
        let w: f64 = parse_field(fields[4], line_no, "w")?;
        let h: f64 = parse_field(fields[5], line_no, "h")?;
        let confidence: f64 = match fields.get(6) {
            Some(f) => parse_field(f, line_no, "confidence")?,
            None => 1.0,
        };
        if ![x, y, w, h, confidence].iter().all(|v| v.is_finite()) {
            return Err(malformed(line_no, "non-finite value"));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(TrackIoError::NonPositiveBox { line: line_no });
        }
        let entry = Entry {
            frame,
            bbox: BBox::new(x, y, w, h),
            confidence,
        };
        let per_id = grouped.entry(id).or_default();
        if per_id.insert(frame, (line_no, entry)).is_some() {
            return Err(TrackIoError::Duplicate {
                line: line_no,
                frame,
                id,
            });
        }
    }
    let mut set = TrackSet::new(camera_id);
    for (id, frames) in grouped {
        let entries = frames.into_values().map(|(_, e)| e).collect();
        set.insert(Tracklet::new(id, entries)?)?;
    }
    Ok(set)
}

pub fn read_mot_file(path: impl AsRef<Path>, camera_id: &str) -> Result<TrackSet> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| TrackIoError::File {
        path: path.display().to_string(),
        source,
    })?;
    read_mot(std::io::BufReader::new(file), camera_id)
}

/// Serializes a track set, one line per detection sorted by `(frame, id)`.
pub fn write_mot(set: &TrackSet) -> String {
    let mut out = String::new();
    for d in set.detections() {
        let b = d.bbox;
        // Display for f64 is the shortest representation that parses back exactly.
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},-1,-1,-1",
            d.frame, d.track_id, b.x, b.y, b.w, b.h, d.confidence
        );
    }
    out
}

pub fn write_mot_file(path: impl AsRef<Path>, set: &TrackSet) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_mot(set)).map_err(|source| TrackIoError::File {
        path: path.display().to_string(),
        source,
    })
}

/// Frame-ordered appearance vectors of one tracklet.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTrack {
    pub id: u32,
    entries: Vec<(u32, Vec<f64>)>,
}

impl EmbeddingTrack {
    pub fn new(id: u32, entries: Vec<(u32, Vec<f64>)>) -> Result<Self> {
        let invalid = |msg: &str| TrackIoError::InvalidTracklet {
            id,
            msg: msg.to_string(),
        };
        if entries.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(invalid("embedding frames must be strictly increasing"));
        }
        if entries.iter().any(|(_, v)| v.len() != EMBEDDING_DIM) {
            return Err(invalid("embedding vectors must have 128 components"));
        }
        if entries.iter().any(|(_, v)| v.iter().any(|x| !x.is_finite())) {
            return Err(invalid("non-finite embedding component"));
        }
        Ok(Self { id, entries })
    }

    pub fn entries(&self) -> &[(u32, Vec<f64>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub type EmbeddingSet = BTreeMap<u32, EmbeddingTrack>;

pub fn parse_embeddings(text: &str) -> Result<EmbeddingSet> {
    read_embeddings(text.as_bytes())
}

pub fn read_embeddings<R: BufRead>(reader: R) -> Result<EmbeddingSet> {
    let mut grouped: BTreeMap<u32, BTreeMap<u32, Vec<f64>>> = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != EMBEDDING_DIM + 2 {
            return Err(malformed(
                line_no,
                format!("expected {} fields, found {}", EMBEDDING_DIM + 2, fields.len()),
            ));
        }
        let (frame, id) = parse_frame_id(&fields, line_no)?;
        let mut vector = Vec::with_capacity(EMBEDDING_DIM);
        for f in &fields[2..] {
            let v: f64 = parse_field(f, line_no, "embedding component")?;
            if !v.is_finite() {
                return Err(malformed(line_no, "non-finite embedding component"));
            }
            vector.push(v);
        }
        if grouped.entry(id).or_default().insert(frame, vector).is_some() {
            return Err(TrackIoError::Duplicate {
                line: line_no,
                frame,
                id,
            });
        }
    }
    grouped
        .into_iter()
        .map(|(id, frames)| Ok((id, EmbeddingTrack::new(id, frames.into_iter().collect())?)))
        .collect()
}

pub fn read_embeddings_file(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| TrackIoError::File {
        path: path.display().to_string(),
        source,
    })?;
    read_embeddings(std::io::BufReader::new(file))
}

/// Writes embeddings sorted by `(frame, id)`, components with six significant digits.
pub fn write_embeddings<W: Write>(mut out: W, set: &EmbeddingSet) -> Result<()> {
    let mut rows: Vec<(u32, u32, &[f64])> = set
        .values()
        .flat_map(|t| t.entries.iter().map(move |(f, v)| (*f, t.id, v.as_slice())))
        .collect();
    rows.sort_by_key(|r| (r.0, r.1));
    let mut line = String::new();
    for (frame, id, v) in rows {
        line.clear();
        let _ = write!(line, "{frame},{id}");
        for x in v {
            line.push(',');
            line.push_str(&format_sig6(*x));
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    Ok(())
}

pub fn write_embeddings_file(path: impl AsRef<Path>, set: &EmbeddingSet) -> Result<()> {
    let path = path.as_ref();
    let to_err = |source| TrackIoError::File {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(to_err)?;
    let mut w = std::io::BufWriter::new(file);
    write_embeddings(&mut w, set)?;
    w.flush().map_err(to_err)
}

/// `%g`-style formatting with six significant digits.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent in scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let fixed = format!("{v:.decimals$}");
        trim_zeros(&fixed).to_string()
    } else {
        format!("{}e{}", trim_zeros(mantissa), exp)
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}
