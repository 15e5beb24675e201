//! Plain-text detection records shared by the detect and eval stages.
//!
//! One record per line: `video_id clip_index frame_index class score x1
//! y1 x2 y2`, space separated, frame_index global to the video. A linked
//! track is stored as one record per member frame, all members sharing
//! the track score; readers regroup by (video, class, score bits). Two
//! same-class tracks in one video that tie bit-for-bit on score would
//! merge on read, which mean-probability scores make vanishingly rare.
//! Ground-truth files reuse the format with the score column holding the
//! track id.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::linking::{Detection, FrameTrack, MapResult};

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub video: String,
    pub clip_index: usize,
    pub frame_index: usize,
    pub class: usize,
    pub score: f64,
    pub bbox: BBox,
}

pub fn format_record(r: &Record) -> String {
    format!(
        "{} {} {} {} {} {} {} {} {}",
        r.video,
        r.clip_index,
        r.frame_index,
        r.class,
        r.score,
        r.bbox.x1,
        r.bbox.y1,
        r.bbox.x2,
        r.bbox.y2
    )
}

pub fn parse_record(line: &str, path: &Path) -> Result<Record> {
    let bad = |detail: String| Error::format(path.display().to_string(), detail);
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 9 {
        return Err(bad(format!("expected 9 fields, got {}: {:?}", fields.len(), line)));
    }
    let int = |s: &str, name: &str| {
        s.parse::<usize>().map_err(|_| bad(format!("bad {} {:?}", name, s)))
    };
    let num = |s: &str, name: &str| {
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| bad(format!("bad {} {:?}", name, s)))
    };
    Ok(Record {
        video: fields[0].to_string(),
        clip_index: int(fields[1], "clip_index")?,
        frame_index: int(fields[2], "frame_index")?,
        class: int(fields[3], "class")?,
        score: num(fields[4], "score")?,
        bbox: BBox::new(
            num(fields[5], "x1")?,
            num(fields[6], "y1")?,
            num(fields[7], "x2")?,
            num(fields[8], "y2")?,
        ),
    })
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&format_record(r));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| parse_record(l, path))
        .collect()
}

/// Write via a sibling temp file and rename so readers never observe a
/// half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name =
        format!(".{}.tmp", path.file_name().and_then(|n| n.to_str()).unwrap_or("out"));
    let tmp = match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(d) => d.join(name),
        None => std::path::PathBuf::from(name),
    };
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn records_from_track(track: &FrameTrack, frames_per_clip: usize) -> Vec<Record> {
    track
        .boxes
        .iter()
        .map(|(&frame, &bbox)| Record {
            video: track.video.clone(),
            clip_index: frame / frames_per_clip,
            frame_index: frame,
            class: track.class,
            score: track.score,
            bbox,
        })
        .collect()
}

/// Regroup records into tracks by (video, class, score bits). Frames are
/// keyed uniquely; a duplicate frame within a group is a format error.
pub fn tracks_from_records(records: &[Record], path: &Path) -> Result<Vec<FrameTrack>> {
    let mut groups: BTreeMap<(String, usize, u64), BTreeMap<usize, BBox>> = BTreeMap::new();
    for r in records {
        let key = (r.video.clone(), r.class, r.score.to_bits());
        let boxes = groups.entry(key).or_default();
        if boxes.insert(r.frame_index, r.bbox).is_some() {
            return Err(Error::format(
                path.display().to_string(),
                format!("duplicate frame {} in track for {} class {}", r.frame_index, r.video, r.class),
            ));
        }
    }
    Ok(groups
        .into_iter()
        .map(|((video, class, bits), boxes)| FrameTrack {
            video,
            class,
            score: f64::from_bits(bits),
            boxes,
        })
        .collect())
}

pub fn detections_from_records(records: &[Record]) -> Vec<Detection> {
    records
        .iter()
        .map(|r| Detection {
            video: r.video.clone(),
            frame: r.frame_index,
            class: r.class,
            score: r.score,
            bbox: r.bbox,
        })
        .collect()
}

/// Per-class AP table: `class,ap,num_gt` rows followed by a `mean` row.
pub fn map_result_csv(result: &MapResult) -> String {
    let mut out = String::from("class,ap,num_gt\n");
    for c in &result.per_class {
        writeln!(out, "{},{:.6},{}", c.class, c.ap, c.num_gt).expect("string write");
    }
    writeln!(out, "mean,{:.6},", result.mean).expect("string write");
    out
}
