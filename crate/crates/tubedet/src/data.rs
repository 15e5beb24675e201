//! Synthetic moving-box videos with ground truth, clip splitting, and the
//! on-disk clip format.
//!
//! Each actor is a bouncing rectangle whose fill color is shared between
//! classes (class k uses actor color k mod 2), so appearance alone cannot
//! separate all classes. The disambiguating signal is a stationary context
//! cue: a small square in a per-class color at a per-class corner, drawn
//! whenever that class is active in the video. Telling aliased classes
//! apart therefore requires looking outside the actor box.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Tubelet};
use crate::linking::FrameTrack;
use crate::records::{write_atomic, Record};
use crate::tensor::Tensor;

const ACTOR_PALETTE: [[f64; 3]; 2] = [[0.9, 0.25, 0.2], [0.2, 0.45, 0.9]];
const CUE_PALETTE: [[f64; 3]; 6] = [
    [0.95, 0.9, 0.15],
    [0.15, 0.9, 0.85],
    [0.9, 0.15, 0.9],
    [0.55, 0.95, 0.3],
    [0.95, 0.55, 0.15],
    [0.75, 0.75, 0.75],
];
const BACKGROUND: f64 = 0.1;

pub fn actor_color(class: usize) -> [f64; 3] {
    ACTOR_PALETTE[class % ACTOR_PALETTE.len()]
}

pub fn cue_color(class: usize) -> [f64; 3] {
    CUE_PALETTE[class % CUE_PALETTE.len()]
}

/// Stationary cue position for a class: one of six fixed spots near the
/// border, as (row, col) of the top-left pixel.
pub fn cue_anchor(class: usize, image_size: usize, cue_size: usize) -> (usize, usize) {
    let m = 2;
    let far = image_size - cue_size - m;
    let mid = (image_size - cue_size) / 2;
    [(m, m), (m, far), (far, m), (far, far), (m, mid), (far, mid)][class % 6]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_videos: usize,
    pub frames_per_video: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub min_actors: usize,
    pub max_actors: usize,
    pub min_actor_size: f64,
    pub max_actor_size: f64,
    pub min_speed: f64,
    pub max_speed: f64,
    pub cue_size: usize,
    /// 0 keeps cues visible in every frame; p > 0 toggles visibility every
    /// p frames, so a single clip can miss the cue that its neighbors see.
    pub cue_blink_period: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_videos: 20,
            frames_per_video: 16,
            image_size: 64,
            num_classes: 3,
            min_actors: 1,
            max_actors: 2,
            min_actor_size: 10.0,
            max_actor_size: 18.0,
            min_speed: 0.5,
            max_speed: 2.5,
            cue_size: 6,
            cue_blink_period: 0,
            noise: 0.05,
            seed: 7,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let bad = |d: String| Error::invalid("generate", d);
        if self.num_videos == 0 || self.frames_per_video == 0 {
            return Err(bad("need at least one video and one frame".into()));
        }
        if self.image_size < 16 {
            return Err(bad(format!("image_size {} below 16", self.image_size)));
        }
        if self.num_classes < 2 || self.num_classes > CUE_PALETTE.len() {
            return Err(bad(format!("num_classes {} outside 2..=6", self.num_classes)));
        }
        if self.min_actors == 0 || self.min_actors > self.max_actors {
            return Err(bad("bad actor count range".into()));
        }
        if self.min_actor_size < 2.0
            || self.min_actor_size > self.max_actor_size
            || self.max_actor_size >= self.image_size as f64 / 2.0
        {
            return Err(bad("bad actor size range".into()));
        }
        if self.min_speed < 0.0 || self.min_speed > self.max_speed {
            return Err(bad("bad speed range".into()));
        }
        if self.cue_size < 2 || self.cue_size + 4 > self.image_size {
            return Err(bad("bad cue size".into()));
        }
        if !(0.0..0.5).contains(&self.noise) {
            return Err(bad("noise outside [0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Ground-truth track: one optional box per video frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GtTrack {
    pub class: usize,
    pub boxes: Vec<Option<BBox>>,
}

#[derive(Debug, Clone)]
pub struct SyntheticVideo {
    pub id: String,
    /// [frames, image_size, image_size, 3], values in [0, 1].
    pub frames: Tensor,
    pub tracks: Vec<GtTrack>,
}

struct Actor {
    class: usize,
    w: f64,
    h: f64,
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
}

fn bounce(x: f64, v: f64, lo: f64, hi: f64) -> (f64, f64) {
    let mut x = x + v;
    let mut v = v;
    if x < lo {
        x = lo + (lo - x);
        v = -v;
    }
    if x > hi {
        x = hi - (x - hi);
        v = -v;
    }
    (x.clamp(lo, hi), v)
}

fn fill_rect(frame: &mut [f64], s: usize, b: &BBox, color: [f64; 3], noise: f64, rng: &mut ChaCha8Rng) {
    let x0 = (b.x1.round().max(0.0) as usize).min(s);
    let x1 = (b.x2.round().max(0.0) as usize).min(s);
    let y0 = (b.y1.round().max(0.0) as usize).min(s);
    let y1 = (b.y2.round().max(0.0) as usize).min(s);
    for y in y0..y1 {
        for x in x0..x1 {
            for c in 0..3 {
                let v = color[c] + noise * (rng.gen::<f64>() * 2.0 - 1.0);
                frame[(y * s + x) * 3 + c] = v.clamp(0.0, 1.0);
            }
        }
    }
}

/// Deterministic corpus: one RNG stream seeded from `cfg.seed` drives all
/// draws in a fixed order.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<SyntheticVideo>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s = cfg.image_size;
    let sf = s as f64;
    let mut videos = Vec::with_capacity(cfg.num_videos);
    for vi in 0..cfg.num_videos {
        let n_actors = rng.gen_range(cfg.min_actors..=cfg.max_actors);
        let mut actors: Vec<Actor> = (0..n_actors)
            .map(|_| {
                let class = rng.gen_range(0..cfg.num_classes);
                let w = rng.gen_range(cfg.min_actor_size..=cfg.max_actor_size);
                let h = rng.gen_range(cfg.min_actor_size..=cfg.max_actor_size);
                let cx = rng.gen_range(w / 2.0..sf - w / 2.0);
                let cy = rng.gen_range(h / 2.0..sf - h / 2.0);
                let speed = |rng: &mut ChaCha8Rng| {
                    let mag = rng.gen_range(cfg.min_speed..=cfg.max_speed);
                    if rng.gen::<bool>() {
                        mag
                    } else {
                        -mag
                    }
                };
                let vx = speed(&mut rng);
                let vy = speed(&mut rng);
                Actor { class, w, h, cx, cy, vx, vy }
            })
            .collect();
        let blink_phase = if cfg.cue_blink_period > 0 {
            rng.gen_range(0..cfg.cue_blink_period * 2)
        } else {
            0
        };
        let active_classes: Vec<usize> = {
            let mut c: Vec<usize> = actors.iter().map(|a| a.class).collect();
            c.sort_unstable();
            c.dedup();
            c
        };
        let mut frames = Tensor::zeros(&[cfg.frames_per_video, s, s, 3]);
        let mut tracks: Vec<GtTrack> = actors
            .iter()
            .map(|a| GtTrack { class: a.class, boxes: Vec::with_capacity(cfg.frames_per_video) })
            .collect();
        for f in 0..cfg.frames_per_video {
            let frame = &mut frames.data_mut()[f * s * s * 3..(f + 1) * s * s * 3];
            for v in frame.iter_mut() {
                *v = (BACKGROUND + cfg.noise * (rng.gen::<f64>() * 2.0 - 1.0)).clamp(0.0, 1.0);
            }
            let cue_visible = cfg.cue_blink_period == 0
                || ((f + blink_phase) / cfg.cue_blink_period) % 2 == 0;
            if cue_visible {
                for &class in &active_classes {
                    let (row, col) = cue_anchor(class, s, cfg.cue_size);
                    let b = BBox::new(
                        col as f64,
                        row as f64,
                        (col + cfg.cue_size) as f64,
                        (row + cfg.cue_size) as f64,
                    );
                    fill_rect(frame, s, &b, cue_color(class), cfg.noise, &mut rng);
                }
            }
            for (a, track) in actors.iter_mut().zip(tracks.iter_mut()) {
                let b = BBox::from_center_size(a.cx, a.cy, a.w, a.h);
                fill_rect(frame, s, &b, actor_color(a.class), cfg.noise, &mut rng);
                track.boxes.push(Some(b));
                let (cx, vx) = bounce(a.cx, a.vx, a.w / 2.0, sf - a.w / 2.0);
                let (cy, vy) = bounce(a.cy, a.vy, a.h / 2.0, sf - a.h / 2.0);
                a.cx = cx;
                a.cy = cy;
                a.vx = vx;
                a.vy = vy;
            }
        }
        videos.push(SyntheticVideo { id: format!("video{:03}", vi), frames, tracks });
    }
    Ok(videos)
}

/// One training or inference unit: a fixed-length frame window with the
/// ground-truth tubelets of actors present in every frame of the window.
#[derive(Debug, Clone)]
pub struct ClipData {
    pub video_id: String,
    pub clip_index: usize,
    pub start_frame: usize,
    /// [t, image_size, image_size, 3]
    pub frames: Tensor,
    /// (class, tubelet); tubelet actionness is 1.0 for ground truth.
    pub gts: Vec<(usize, Tubelet)>,
}

/// Cuts windows of `t` frames starting every `stride` frames. The final
/// window is padded by repeating the last frame (and its boxes). Actors
/// missing from any frame of a window contribute no tubelet to it.
pub fn split_clips(video: &SyntheticVideo, t: usize, stride: usize) -> Result<Vec<ClipData>> {
    if t == 0 || stride == 0 || stride > t {
        return Err(Error::invalid("split_clips", format!("t {} stride {}", t, stride)));
    }
    let dims = video.frames.shape().to_vec();
    let (f_total, h, w, c) = (dims[0], dims[1], dims[2], dims[3]);
    let frame_len = h * w * c;
    let mut clips = Vec::new();
    let mut start = 0;
    let mut clip_index = 0;
    while start < f_total {
        let mut frames = Tensor::zeros(&[t, h, w, c]);
        for i in 0..t {
            let src = (start + i).min(f_total - 1);
            frames.data_mut()[i * frame_len..(i + 1) * frame_len]
                .copy_from_slice(&video.frames.data()[src * frame_len..(src + 1) * frame_len]);
        }
        let mut gts = Vec::new();
        for track in &video.tracks {
            let boxes: Option<Vec<BBox>> =
                (0..t).map(|i| track.boxes[(start + i).min(f_total - 1)]).collect();
            if let Some(boxes) = boxes {
                gts.push((track.class, Tubelet::new(boxes, 1.0, clip_index)));
            }
        }
        clips.push(ClipData {
            video_id: video.id.clone(),
            clip_index,
            start_frame: start,
            frames,
            gts,
        });
        start += stride;
        clip_index += 1;
    }
    Ok(clips)
}

const CLIP_MAGIC: &[u8; 8] = b"TBDTCLP1";

/// Clip volume file: 8-byte magic, four little-endian u32 dims (t, h, w,
/// c), then t*h*w*c little-endian f32 values.
pub fn save_clip(path: &Path, frames: &Tensor) -> Result<()> {
    let shape = frames.shape();
    if shape.len() != 4 {
        return Err(Error::shape("save_clip", format!("expected 4 dims, got {:?}", shape)));
    }
    let mut bytes = Vec::with_capacity(8 + 16 + frames.len() * 4);
    bytes.extend_from_slice(CLIP_MAGIC);
    for &d in shape {
        let d32 = u32::try_from(d)
            .map_err(|_| Error::invalid("save_clip", format!("dim {} exceeds u32", d)))?;
        bytes.extend_from_slice(&d32.to_le_bytes());
    }
    for &v in frames.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_atomic(path, &bytes)
}

pub fn load_clip(path: &Path) -> Result<Tensor> {
    let name = path.display().to_string();
    let mut file = std::fs::File::open(path)?;
    let mut header = [0u8; 24];
    file.read_exact(&mut header)
        .map_err(|_| Error::format(name.clone(), "truncated header"))?;
    if &header[..8] != CLIP_MAGIC {
        return Err(Error::format(name, format!("bad magic {:?}", &header[..8])));
    }
    let dim = |i: usize| {
        u32::from_le_bytes(header[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize
    };
    let shape = [dim(0), dim(1), dim(2), dim(3)];
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(name.clone(), "dims overflow"))?;
    let payload_len = count
        .checked_mul(4)
        .ok_or_else(|| Error::format(name.clone(), "dims overflow"))?;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    if payload.len() != payload_len {
        return Err(Error::format(
            name,
            format!("payload {} bytes, header implies {}", payload.len(), payload_len),
        ));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::from_vec(&shape, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarTubelet {
    pub class: usize,
    pub boxes: Vec<[f64; 4]>,
}

/// Ground-truth sidecar stored next to each clip volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipSidecar {
    pub video_id: String,
    pub clip_index: usize,
    pub tubelets: Vec<SidecarTubelet>,
}

impl ClipSidecar {
    pub fn from_clip(clip: &ClipData) -> ClipSidecar {
        ClipSidecar {
            video_id: clip.video_id.clone(),
            clip_index: clip.clip_index,
            tubelets: clip
                .gts
                .iter()
                .map(|(class, t)| SidecarTubelet {
                    class: *class,
                    boxes: t.boxes.iter().map(|b| [b.x1, b.y1, b.x2, b.y2]).collect(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub synth: SynthConfig,
    pub frames_per_clip: usize,
    pub stride: usize,
}

/// Writes clips/*.clipbin with JSON sidecars, manifest.txt listing the
/// clip files by relative path, gt.txt in record format (score column
/// carries the track id), and dataset.json with the generation settings.
pub fn write_dataset(dir: &Path, cfg: &SynthConfig, t: usize, stride: usize) -> Result<DatasetMeta> {
    let videos = generate(cfg)?;
    let clips_dir = dir.join("clips");
    std::fs::create_dir_all(&clips_dir)?;
    let mut manifest = String::new();
    for video in &videos {
        for clip in split_clips(video, t, stride)? {
            let stem = format!("{}_clip{:03}", clip.video_id, clip.clip_index);
            save_clip(&clips_dir.join(format!("{}.clipbin", stem)), &clip.frames)?;
            let sidecar = serde_json::to_string_pretty(&ClipSidecar::from_clip(&clip))?;
            write_atomic(&clips_dir.join(format!("{}.json", stem)), sidecar.as_bytes())?;
            manifest.push_str(&format!("clips/{}.clipbin\n", stem));
        }
    }
    write_atomic(&dir.join("manifest.txt"), manifest.as_bytes())?;
    crate::records::write_records(&dir.join("gt.txt"), &gt_records(&videos, t))?;
    let meta = DatasetMeta { synth: cfg.clone(), frames_per_clip: t, stride };
    write_atomic(&dir.join("dataset.json"), serde_json::to_string_pretty(&meta)?.as_bytes())?;
    Ok(meta)
}

/// Reads a dataset back via its manifest. Clip tensors come back f32
/// rounded; sidecars restore the ground truth exactly.
pub fn load_dataset(dir: &Path) -> Result<(DatasetMeta, Vec<ClipData>)> {
    let meta_path = dir.join("dataset.json");
    let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?;
    let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
    let mut clips = Vec::new();
    for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
        let clip_path = dir.join(line);
        let frames = load_clip(&clip_path)?;
        let sidecar_path: PathBuf = clip_path.with_extension("json");
        let sidecar: ClipSidecar =
            serde_json::from_str(&std::fs::read_to_string(&sidecar_path)?)?;
        let t = frames.shape()[0];
        let mut gts = Vec::new();
        for st in &sidecar.tubelets {
            if st.boxes.len() != t {
                return Err(Error::format(
                    sidecar_path.display().to_string(),
                    format!("tubelet has {} boxes, clip has {} frames", st.boxes.len(), t),
                ));
            }
            let boxes: Vec<BBox> =
                st.boxes.iter().map(|b| BBox::new(b[0], b[1], b[2], b[3])).collect();
            gts.push((st.class, Tubelet::new(boxes, 1.0, sidecar.clip_index)));
        }
        clips.push(ClipData {
            video_id: sidecar.video_id,
            clip_index: sidecar.clip_index,
            start_frame: sidecar.clip_index * meta.stride,
            frames,
            gts,
        });
    }
    Ok((meta, clips))
}

/// Video-level ground-truth tracks for evaluation; the score field holds
/// the track id to keep same-class tracks distinct.
pub fn gt_frame_tracks(videos: &[SyntheticVideo]) -> Vec<FrameTrack> {
    let mut tracks = Vec::new();
    for video in videos {
        for (ti, track) in video.tracks.iter().enumerate() {
            let boxes: BTreeMap<usize, BBox> = track
                .boxes
                .iter()
                .enumerate()
                .filter_map(|(f, b)| b.map(|b| (f, b)))
                .collect();
            if !boxes.is_empty() {
                tracks.push(FrameTrack {
                    video: video.id.clone(),
                    class: track.class,
                    score: ti as f64,
                    boxes,
                });
            }
        }
    }
    tracks
}

pub fn gt_records(videos: &[SyntheticVideo], frames_per_clip: usize) -> Vec<Record> {
    let mut records = Vec::new();
    for video in videos {
        for (ti, track) in video.tracks.iter().enumerate() {
            for (f, b) in track.boxes.iter().enumerate() {
                if let Some(b) = b {
                    records.push(Record {
                        video: video.id.clone(),
                        clip_index: f / frames_per_clip,
                        frame_index: f,
                        class: track.class,
                        score: ti as f64,
                        bbox: *b,
                    });
                }
            }
        }
    }
    records
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            num_videos: 3,
            frames_per_video: 10,
            image_size: 32,
            num_classes: 3,
            min_actors: 1,
            max_actors: 1,
            min_actor_size: 6.0,
            max_actor_size: 9.0,
            cue_size: 4,
            seed: 11,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small_cfg()).unwrap();
        let b = generate(&small_cfg()).unwrap();
        assert_eq!(a.len(), b.len());
        for (va, vb) in a.iter().zip(b.iter()) {
            assert_eq!(va.id, vb.id);
            assert_eq!(va.frames, vb.frames);
            assert_eq!(va.tracks, vb.tracks);
        }
        let c = generate(&SynthConfig { seed: 12, ..small_cfg() }).unwrap();
        assert_ne!(a[0].frames, c[0].frames);
    }

    #[test]
    fn gt_boxes_in_bounds_with_min_area() {
        let cfg = SynthConfig { num_videos: 10, max_actors: 2, ..small_cfg() };
        let videos = generate(&cfg).unwrap();
        let s = cfg.image_size as f64;
        for v in &videos {
            assert!(!v.tracks.is_empty());
            for track in &v.tracks {
                assert_eq!(track.boxes.len(), cfg.frames_per_video);
                assert!(track.class < cfg.num_classes);
                for b in track.boxes.iter().map(|b| b.expect("full presence")) {
                    assert!(b.x1 >= -1e-9 && b.y1 >= -1e-9 && b.x2 <= s + 1e-9 && b.y2 <= s + 1e-9);
                    assert!(b.area() >= 4.0);
                }
            }
        }
    }

    #[test]
    fn actor_pixels_carry_actor_color() {
        let cfg = small_cfg();
        let videos = generate(&cfg).unwrap();
        let s = cfg.image_size;
        for v in &videos {
            let track = &v.tracks[0];
            let color = actor_color(track.class);
            for f in [0, cfg.frames_per_video - 1] {
                let b = track.boxes[f].unwrap();
                let (cx, cy) = b.center();
                let (px, py) = (cx as usize, cy as usize);
                for c in 0..3 {
                    let v = v.frames.data()[((f * s + py) * s + px) * 3 + c];
                    assert!(
                        (v - color[c]).abs() <= cfg.noise + 1e-12,
                        "channel {} value {} vs color {}",
                        c,
                        v,
                        color[c]
                    );
                }
            }
        }
    }

    #[test]
    fn cue_pixels_carry_class_color() {
        let cfg = small_cfg();
        let videos = generate(&cfg).unwrap();
        let s = cfg.image_size;
        let v = &videos[0];
        let class = v.tracks[0].class;
        let (row, col) = cue_anchor(class, s, cfg.cue_size);
        let color = cue_color(class);
        // cue center pixel, unless the actor happens to sit on it
        let (py, px) = (row + cfg.cue_size / 2, col + cfg.cue_size / 2);
        let b = v.tracks[0].boxes[0].unwrap();
        let covered = (px as f64) >= b.x1.round()
            && (px as f64) < b.x2.round()
            && (py as f64) >= b.y1.round()
            && (py as f64) < b.y2.round();
        if !covered {
            for c in 0..3 {
                let val = v.frames.data()[((py) * s + px) * 3 + c];
                assert!((val - color[c]).abs() <= cfg.noise + 1e-12);
            }
        }
    }

    #[test]
    fn actor_colors_alias_across_classes() {
        assert_eq!(actor_color(0), actor_color(2));
        assert_ne!(actor_color(0), actor_color(1));
        assert_ne!(cue_color(0), cue_color(2));
        let (a0, a2) = (cue_anchor(0, 64, 6), cue_anchor(2, 64, 6));
        assert_ne!(a0, a2);
    }

    #[test]
    fn blinking_cues_toggle() {
        let cfg = SynthConfig { cue_blink_period: 2, noise: 0.0, ..small_cfg() };
        let videos = generate(&cfg).unwrap();
        let s = cfg.image_size;
        let mut seen_on = false;
        let mut seen_off = false;
        for v in &videos {
            let class = v.tracks[0].class;
            let (row, col) = cue_anchor(class, s, cfg.cue_size);
            let (py, px) = (row + cfg.cue_size / 2, col + cfg.cue_size / 2);
            let color = cue_color(class);
            for f in 0..cfg.frames_per_video {
                let b = v.tracks[0].boxes[f].unwrap();
                let covered = (px as f64) >= b.x1.round()
                    && (px as f64) < b.x2.round()
                    && (py as f64) >= b.y1.round()
                    && (py as f64) < b.y2.round();
                if covered {
                    continue;
                }
                let val = v.frames.data()[((f * s + py) * s + px) * 3];
                if (val - color[0]).abs() < 1e-9 {
                    seen_on = true;
                } else {
                    seen_off = true;
                }
            }
        }
        assert!(seen_on && seen_off);
    }

    #[test]
    fn split_exact_windows() {
        let cfg = SynthConfig { frames_per_video: 16, ..small_cfg() };
        let videos = generate(&cfg).unwrap();
        let clips = split_clips(&videos[0], 8, 8).unwrap();
        assert_eq!(clips.len(), 2);
        assert_eq!(clips[0].clip_index, 0);
        assert_eq!(clips[1].start_frame, 8);
        let s = cfg.image_size;
        let frame_len = s * s * 3;
        assert_eq!(
            &clips[1].frames.data()[..frame_len],
            &videos[0].frames.data()[8 * frame_len..9 * frame_len]
        );
        assert_eq!(clips[0].gts.len(), 1);
        assert_eq!(clips[0].gts[0].1.boxes[3], videos[0].tracks[0].boxes[3].unwrap());
    }

    #[test]
    fn split_pads_by_repeating_last_frame() {
        let cfg = SynthConfig { frames_per_video: 13, ..small_cfg() };
        let videos = generate(&cfg).unwrap();
        let clips = split_clips(&videos[0], 8, 8).unwrap();
        assert_eq!(clips.len(), 2);
        let s = cfg.image_size;
        let frame_len = s * s * 3;
        let last_real = &videos[0].frames.data()[12 * frame_len..13 * frame_len];
        for i in 5..8 {
            assert_eq!(&clips[1].frames.data()[i * frame_len..(i + 1) * frame_len], last_real);
            assert_eq!(clips[1].gts[0].1.boxes[i], videos[0].tracks[0].boxes[12].unwrap());
        }
    }

    #[test]
    fn split_stride_one_overlaps() {
        let cfg = SynthConfig { frames_per_video: 10, ..small_cfg() };
        let videos = generate(&cfg).unwrap();
        let clips = split_clips(&videos[0], 8, 1).unwrap();
        assert_eq!(clips.len(), 10);
        assert_eq!(clips[3].start_frame, 3);
        assert!(split_clips(&videos[0], 8, 9).is_err());
        assert!(split_clips(&videos[0], 8, 0).is_err());
    }

    #[test]
    fn partial_presence_drops_tubelet() {
        let cfg = small_cfg();
        let mut video = generate(&cfg).unwrap().remove(0);
        // absent from frame 5 onward: window 0..8 loses the tubelet
        for b in video.tracks[0].boxes[5..].iter_mut() {
            *b = None;
        }
        let clips = split_clips(&video, 8, 8).unwrap();
        assert!(clips[0].gts.is_empty());
        assert!(clips[1].gts.is_empty());
        let tracks = gt_frame_tracks(&[video]);
        assert_eq!(tracks[0].boxes.len(), 5);
    }

    #[test]
    fn clipbin_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.clipbin");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frames = Tensor::randn(&[2, 4, 5, 3], 1.0, &mut rng);
        save_clip(&path, &frames).unwrap();
        let back = load_clip(&path).unwrap();
        assert_eq!(back.shape(), frames.shape());
        for (a, b) in back.data().iter().zip(frames.data().iter()) {
            assert_eq!(*a, *b as f32 as f64);
        }

        let bad_magic = dir.path().join("bad.clipbin");
        std::fs::write(&bad_magic, b"NOTMAGIC\x01\x00\x00\x00").unwrap();
        assert!(matches!(load_clip(&bad_magic), Err(Error::Format { .. })));

        let truncated = dir.path().join("short.clipbin");
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&truncated, &bytes).unwrap();
        assert!(matches!(load_clip(&truncated), Err(Error::Format { .. })));

        let huge = dir.path().join("huge.clipbin");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(CLIP_MAGIC);
        for _ in 0..4 {
            bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        std::fs::write(&huge, &bytes).unwrap();
        assert!(matches!(load_clip(&huge), Err(Error::Format { .. })));
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let meta = write_dataset(dir.path(), &cfg, 8, 8).unwrap();
        assert_eq!(meta.frames_per_clip, 8);
        let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert_eq!(manifest.lines().count(), 3 * 2);
        for line in manifest.lines() {
            assert!(dir.path().join(line).exists(), "{} missing", line);
        }
        let (meta_back, clips) = load_dataset(dir.path()).unwrap();
        assert_eq!(meta_back, meta);
        assert_eq!(clips.len(), 6);

        let videos = generate(&cfg).unwrap();
        let direct = split_clips(&videos[0], 8, 8).unwrap();
        assert_eq!(clips[0].video_id, direct[0].video_id);
        assert_eq!(clips[0].gts, direct[0].gts);
        for (a, b) in clips[0].frames.data().iter().zip(direct[0].frames.data().iter()) {
            assert_eq!(*a, *b as f32 as f64);
        }

        let gt = crate::records::read_records(&dir.path().join("gt.txt")).unwrap();
        assert_eq!(gt.len(), 3 * cfg.frames_per_video);
        let tracks = crate::records::tracks_from_records(&gt, Path::new("gt.txt")).unwrap();
        assert_eq!(tracks.len(), 3);
    }

    #[test]
    fn config_validation() {
        assert!(generate(&SynthConfig { num_classes: 1, ..small_cfg() }).is_err());
        assert!(generate(&SynthConfig { num_classes: 7, ..small_cfg() }).is_err());
        assert!(generate(&SynthConfig { image_size: 8, ..small_cfg() }).is_err());
        assert!(generate(&SynthConfig { min_actor_size: 1.0, ..small_cfg() }).is_err());
        assert!(generate(&SynthConfig { min_speed: 3.0, max_speed: 1.0, ..small_cfg() }).is_err());
        assert!(generate(&SynthConfig { noise: 0.9, ..small_cfg() }).is_err());
    }
}
