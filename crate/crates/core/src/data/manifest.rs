use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One frame of one video, plus whatever labels exist for it.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub video_id: String,
    pub timestamp: f64,
    pub frame_path: String,
    pub phase: Option<usize>,
    pub triplets: Vec<usize>,
    pub mask_path: Option<String>,
    pub depth_path: Option<String>,
    /// `false` marks out-of-body or blank frames.
    pub in_body: bool,
}

impl FrameRecord {
    pub fn new(video_id: impl Into<String>, timestamp: f64, frame_path: impl Into<String>) -> Self {
        Self {
            video_id: video_id.into(),
            timestamp,
            frame_path: frame_path.into(),
            phase: None,
            triplets: Vec::new(),
            mask_path: None,
            depth_path: None,
            in_body: true,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Row {
    video_id: String,
    timestamp: f64,
    frame_path: String,
    phase: Option<usize>,
    triplets: String,
    mask_path: Option<String>,
    depth_path: Option<String>,
    in_body: Option<u8>,
}

/// Validated list of frame records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameManifest {
    records: Vec<FrameRecord>,
}

impl FrameManifest {
    pub fn new(records: Vec<FrameRecord>) -> Result<Self> {
        let mut last: HashMap<&str, f64> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            if r.video_id.is_empty() {
                return Err(Error::Data(format!("record {i}: empty video_id")));
            }
            if !(r.timestamp.is_finite() && r.timestamp >= 0.0) {
                return Err(Error::Data(format!("record {i}: timestamp {} must be finite and non-negative", r.timestamp)));
            }
            if let Some(&prev) = last.get(r.video_id.as_str()) {
                if r.timestamp <= prev {
                    return Err(Error::Data(format!(
                        "record {i}: video `{}` timestamps must be unique and increasing ({} after {prev})",
                        r.video_id, r.timestamp
                    )));
                }
            }
            last.insert(&r.video_id, r.timestamp);
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[FrameRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Video ids in order of first appearance.
    pub fn videos(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for r in &self.records {
            if !seen.contains(&r.video_id.as_str()) {
                seen.push(r.video_id.as_str());
            }
        }
        seen
    }

    pub fn frames_of<'a>(&'a self, video: &'a str) -> impl Iterator<Item = &'a FrameRecord> + 'a {
        self.records.iter().filter(move |r| r.video_id == video)
    }

    /// Drops frames flagged as out of body.
    pub fn in_body(&self) -> Self {
        Self { records: self.records.iter().filter(|r| r.in_body).cloned().collect() }
    }

    /// Every frame of the first `k` videos (few-shot selection).
    pub fn first_k_videos(&self, k: usize) -> Result<Self> {
        let videos = self.videos();
        if k == 0 || k > videos.len() {
            return Err(Error::Data(format!("requested {k} videos but the manifest has {}", videos.len())));
        }
        let keep = &videos[..k];
        Ok(Self { records: self.records.iter().filter(|r| keep.contains(&r.video_id.as_str())).cloned().collect() })
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut records = Vec::new();
        for (i, row) in rdr.deserialize::<Row>().enumerate() {
            let row = row?;
            let triplets = if row.triplets.trim().is_empty() {
                Vec::new()
            } else {
                row.triplets
                    .split(';')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Data(format!("row {}: bad triplet list `{}`: {e}", i + 1, row.triplets)))?
            };
            records.push(FrameRecord {
                video_id: row.video_id,
                timestamp: row.timestamp,
                frame_path: row.frame_path,
                phase: row.phase,
                triplets,
                mask_path: row.mask_path,
                depth_path: row.depth_path,
                in_body: row.in_body.is_none_or(|v| v != 0),
            });
        }
        Self::new(records)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.records {
            w.serialize(Row {
                video_id: r.video_id.clone(),
                timestamp: r.timestamp,
                frame_path: r.frame_path.clone(),
                phase: r.phase,
                triplets: r.triplets.iter().map(usize::to_string).collect::<Vec<_>>().join(";"),
                mask_path: r.mask_path.clone(),
                depth_path: r.depth_path.clone(),
                in_body: Some(u8::from(r.in_body)),
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Keeps, per video, the earliest frame in every `1/fps`-second bucket.
pub fn sample_fps(manifest: &FrameManifest, fps: f64) -> Result<FrameManifest> {
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(Error::Config(format!("fps must be positive, got {fps}")));
    }
    let mut taken: BTreeMap<(&str, i64), ()> = BTreeMap::new();
    let mut out = Vec::new();
    for r in &manifest.records {
        // The small offset keeps t = k/fps in bucket k despite rounding (0.3·10 = 2.999…).
        let bucket = (r.timestamp * fps + 1e-9).floor() as i64;
        if taken.insert((r.video_id.as_str(), bucket), ()).is_none() {
            out.push(r.clone());
        }
    }
    Ok(FrameManifest { records: out })
}
