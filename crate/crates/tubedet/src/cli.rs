//! Command-line entry points: gen, train, detect, eval, dump-attn,
//! neighbors. Every command echoes the resolved config before doing work
//! and writes outputs atomically, so reruns are reproducible and
//! interrupted runs never leave half-written files.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{PipelineMode, RunConfig};
use crate::data::{load_dataset, write_dataset, ClipData};
use crate::error::{Error, Result};
use crate::linking::{frame_map, video_map};
use crate::long_term::{build_window, ltr_forward};
use crate::model::{load_checkpoint, save_checkpoint, Model};
use crate::records::{
    detections_from_records, map_result_csv, read_records, records_from_track, tracks_from_records,
    write_atomic, write_records, Record,
};
use crate::short_term::str_forward;
use crate::train::{clip_proposal_features, detect_tracks, group_by_video, loss_csv, train};

#[derive(Parser)]
#[command(name = "tubedet", about = "Tubelet action detection pipeline", version)]
pub struct Cli {
    /// JSON config file; omitted fields keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Print the resolved config (with provenance) and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Subcommand)]
pub enum Command {
    /// Write a synthetic dataset into the data directory.
    Gen,
    /// Train on the dataset; writes loss.csv and checkpoint.bin.
    Train,
    /// Run the detection cascade with a trained checkpoint; writes
    /// detection records.
    Detect {
        /// Defaults to <out>/checkpoint.bin.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to the config's data directory.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Score detection records against ground truth; writes per-class AP
    /// tables.
    Eval {
        /// Defaults to <out>/detections.txt.
        #[arg(long)]
        detections: Option<PathBuf>,
        /// Defaults to <data>/gt.txt.
        #[arg(long)]
        gts: Option<PathBuf>,
    },
    /// Export one tubelet's attention maps as per-frame PGM and CSV grids.
    DumpAttn {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        video: String,
        #[arg(long)]
        clip: usize,
        #[arg(long)]
        tubelet: usize,
    },
    /// Export a tubelet's top-k relation-graph neighbors as CSV.
    Neighbors {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        video: String,
        #[arg(long)]
        clip: usize,
        #[arg(long)]
        tubelet: usize,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
}

/// Prints without panicking when stdout is a closed pipe (head, etc.).
fn emit(line: &str) {
    let _ = writeln!(std::io::stdout(), "{}", line);
}

/// Loads the config, applies flag overrides, and validates.
fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    emit(&format!("{}", cfg.resolved_json()?));
    if cli.print_config {
        return Ok(());
    }
    match &cli.command {
        None => Err(Error::invalid("cli", "no command given (try --help)")),
        Some(Command::Gen) => cmd_gen(&cfg),
        Some(Command::Train) => cmd_train(&cfg),
        Some(Command::Detect { checkpoint, dataset }) => {
            cmd_detect(&cfg, checkpoint.as_deref(), dataset.as_deref())
        }
        Some(Command::Eval { detections, gts }) => {
            cmd_eval(&cfg, detections.as_deref(), gts.as_deref())
        }
        Some(Command::DumpAttn { checkpoint, video, clip, tubelet }) => {
            cmd_dump_attn(&cfg, checkpoint.as_deref(), video, *clip, *tubelet)
        }
        Some(Command::Neighbors { checkpoint, video, clip, tubelet, k }) => {
            cmd_neighbors(&cfg, checkpoint.as_deref(), video, *clip, *tubelet, *k)
        }
    }
}

fn cmd_gen(cfg: &RunConfig) -> Result<()> {
    let meta = write_dataset(&cfg.data_dir, &cfg.synth, cfg.frames_per_clip, cfg.clip_stride)?;
    emit(&format!("wrote {} videos ({} frames each) to {}",
        meta.synth.num_videos,
        meta.synth.frames_per_video,
        cfg.data_dir.display()
    ));
    Ok(())
}

/// Loads the dataset and checks it was cut with the configured clip shape,
/// which the model architecture depends on.
fn load_clips(cfg: &RunConfig, dir: &Path) -> Result<Vec<ClipData>> {
    let (meta, clips) = load_dataset(dir)?;
    if meta.frames_per_clip != cfg.frames_per_clip || meta.stride != cfg.clip_stride {
        return Err(Error::invalid(
            "cli",
            format!(
                "dataset cut as T={} stride={}, config wants T={} stride={}",
                meta.frames_per_clip, meta.stride, cfg.frames_per_clip, cfg.clip_stride
            ),
        ));
    }
    Ok(clips)
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let clips = load_clips(cfg, &cfg.data_dir)?;
    let videos = group_by_video(clips);
    let (mut model, report) = train(cfg, &videos)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    write_atomic(&cfg.out_dir.join("loss.csv"), loss_csv(&report).as_bytes())?;
    save_checkpoint(&cfg.out_dir.join("checkpoint.bin"), &mut model)?;
    write_atomic(&cfg.out_dir.join("config.json"), cfg.resolved_json()?.as_bytes())?;
    let last = report.epoch_losses.last();
    emit(&format!("trained {} epochs, final tpn loss {:.4}, cls loss {:.4}",
        report.epoch_losses.len(),
        last.map_or(f64::NAN, |l| l.tpn),
        last.map_or(f64::NAN, |l| l.cls),
    ));
    Ok(())
}

fn load_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Model> {
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_dir.join("checkpoint.bin"));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::new(cfg, &mut rng)?;
    load_checkpoint(&path, &mut model)?;
    Ok(model)
}

fn cmd_detect(cfg: &RunConfig, checkpoint: Option<&Path>, dataset: Option<&Path>) -> Result<()> {
    let dir = dataset.map(Path::to_path_buf).unwrap_or_else(|| cfg.data_dir.clone());
    let clips = load_clips(cfg, &dir)?;
    let videos = group_by_video(clips);
    let model = load_model(cfg, checkpoint)?;
    let tracks = detect_tracks(&model, cfg, &videos)?;
    let mut records: Vec<Record> = Vec::new();
    for track in &tracks {
        records.extend(records_from_track(track, cfg.frames_per_clip));
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    let out = cfg.out_dir.join("detections.txt");
    write_records(&out, &records)?;
    emit(&format!("wrote {} tracks ({} records) to {}", tracks.len(), records.len(), out.display()));
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, detections: Option<&Path>, gts: Option<&Path>) -> Result<()> {
    let det_path = detections
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_dir.join("detections.txt"));
    let gt_path = gts.map(Path::to_path_buf).unwrap_or_else(|| cfg.data_dir.join("gt.txt"));
    let det_records = read_records(&det_path)?;
    let gt_records = read_records(&gt_path)?;

    let det_tracks = tracks_from_records(&det_records, &det_path)?;
    let gt_tracks = tracks_from_records(&gt_records, &gt_path)?;
    let video = video_map(&det_tracks, &gt_tracks, cfg.delta)?;
    let frame = frame_map(
        &detections_from_records(&det_records),
        &detections_from_records(&gt_records),
        cfg.delta,
    )?;

    std::fs::create_dir_all(&cfg.out_dir)?;
    write_atomic(&cfg.out_dir.join("video_map.csv"), map_result_csv(&video).as_bytes())?;
    write_atomic(&cfg.out_dir.join("frame_map.csv"), map_result_csv(&frame).as_bytes())?;
    emit(&format!("video-mAP@{} {:.6}", cfg.delta, video.mean));
    emit(&format!("frame-mAP@{} {:.6}", cfg.delta, frame.mean));
    Ok(())
}

/// Renders one frame's attention grid as a P2 PGM, scaling (0,1) weights
/// to 0..=255.
fn attention_pgm(grid: &[f64], h: usize, w: usize) -> String {
    let mut out = format!("P2\n{} {}\n255\n", w, h);
    for row in grid.chunks(w) {
        let line: Vec<String> =
            row.iter().map(|&v| ((v * 255.0).round().clamp(0.0, 255.0) as u8).to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

fn attention_csv(grid: &[f64], w: usize) -> String {
    let mut out = String::new();
    for row in grid.chunks(w) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

fn find_clip<'c>(clips: &'c [ClipData], video: &str, clip: usize) -> Result<&'c ClipData> {
    clips
        .iter()
        .find(|c| c.video_id == video && c.clip_index == clip)
        .ok_or_else(|| Error::invalid("cli", format!("no clip {} in video {}", clip, video)))
}

fn cmd_dump_attn(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    video: &str,
    clip: usize,
    tubelet: usize,
) -> Result<()> {
    let clips = load_clips(cfg, &cfg.data_dir)?;
    let model = load_model(cfg, checkpoint)?;
    let short = model
        .short
        .as_ref()
        .ok_or_else(|| Error::invalid("cli", "no attention stage in tpn mode"))?;
    let clip_data = find_clip(&clips, video, clip)?;
    let grid = cfg.anchor_grid();
    let (out, feature, _) = model.tpn.forward(&clip_data.frames, &grid)?;
    let proposals = crate::tpn::propose(&out, &grid, &cfg.proposal_config())?;
    let tb = proposals.get(tubelet).ok_or_else(|| {
        Error::invalid("cli", format!("tubelet {} of {} proposals", tubelet, proposals.len()))
    })?;
    let (str_out, _) = str_forward(short, &feature, tb)?;
    let shape = str_out.attention.values.shape().to_vec();
    let (t, h, w) = (shape[0], shape[1], shape[2]);
    std::fs::create_dir_all(&cfg.out_dir)?;
    for frame in 0..t {
        let grid_vals = &str_out.attention.values.data()[frame * h * w..(frame + 1) * h * w];
        let stem = format!("attn_{}_{}_{}_{}", video, clip, tubelet, frame);
        write_atomic(
            &cfg.out_dir.join(format!("{}.pgm", stem)),
            attention_pgm(grid_vals, h, w).as_bytes(),
        )?;
        write_atomic(
            &cfg.out_dir.join(format!("{}.csv", stem)),
            attention_csv(grid_vals, w).as_bytes(),
        )?;
    }
    emit(&format!("wrote {} attention frames to {}", t, cfg.out_dir.display()));
    Ok(())
}

fn cmd_neighbors(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    video: &str,
    clip: usize,
    tubelet: usize,
    k: usize,
) -> Result<()> {
    if cfg.mode != PipelineMode::Full {
        return Err(Error::invalid("cli", "relation graph only exists in full mode"));
    }
    let clips = load_clips(cfg, &cfg.data_dir)?;
    let videos = group_by_video(clips);
    let vc = videos
        .iter()
        .find(|v| v.video_id == video)
        .ok_or_else(|| Error::invalid("cli", format!("no video {}", video)))?;
    let m = vc
        .clips
        .iter()
        .position(|c| c.clip_index == clip)
        .ok_or_else(|| Error::invalid("cli", format!("no clip {} in video {}", clip, video)))?;
    let model = load_model(cfg, checkpoint)?;
    let d = model.feature_dim();
    let mut input = Vec::with_capacity(vc.clips.len());
    for c in &vc.clips {
        let (proposals, fused) = clip_proposal_features(&model, cfg, c)?;
        input.push(proposals.into_iter().zip(fused).collect::<Vec<_>>());
    }
    let window = build_window(&input, m, cfg.window_radius, d)?;
    let ltr = model.ltr.as_ref().expect("full mode");
    let (_, cache) = ltr_forward(ltr, &window, false, 0)?;
    if tubelet >= window.center_len {
        return Err(Error::invalid(
            "cli",
            format!("tubelet {} of {} center proposals", tubelet, window.center_len),
        ));
    }
    // graph rows cover center tubelets only; columns span all members
    let self_col = window.center_start + tubelet;
    let n = window.n();
    let weights = &cache.graph().data()[tubelet * n..(tubelet + 1) * n];
    let mut scored: Vec<(f64, usize, usize)> = Vec::new();
    for (i, member) in window.members.iter().enumerate() {
        if member.tubelet.is_none() || i == self_col {
            continue;
        }
        let clip_pos = (m as isize + member.clip_offset) as usize;
        scored.push((weights[i], vc.clips[clip_pos].clip_index, member.within_clip));
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    scored.truncate(k);
    let mut csv = String::from("clip,tubelet,weight\n");
    for (weight, clip_idx, within) in &scored {
        csv.push_str(&format!("{},{},{}\n", clip_idx, within, weight));
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    let out = cfg.out_dir.join(format!("neighbors_{}_{}_{}.csv", video, clip, tubelet));
    write_atomic(&out, csv.as_bytes())?;
    emit(&format!("wrote {} neighbors to {}", scored.len(), out.display()));
    Ok(())
}
