//! Batch frame extraction: videos laid out as `<root>/{real,fake}/<clip>`
//! become crops at `<out>/<label>/<clip stem>/t<ms>.png`, with eye
//! landmarks collected in `<out>/landmarks.csv`.

use std::path::{Path, PathBuf};

use serde::Serialize;

use super::face::{detect_and_crop_face, FaceDetector};
use super::mask::LandmarkIndex;
use super::video::{decoder_for, extract_frames, VideoDecoder, VideoRecord};
use super::{save_png, Label};
use crate::error::{Error, Result};

const VIDEO_EXTENSIONS: [&str; 6] = ["gif", "mp4", "avi", "mov", "mkv", "webm"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VideoSummary {
    pub video_id: String,
    pub label: Label,
    pub frames: usize,
    pub crops: usize,
    /// Timestamps where the detector found no face.
    pub skipped_s: Vec<f64>,
}

/// Crop file name for a frame timestamp, millisecond resolution.
pub fn crop_file_name(time_s: f64) -> String {
    format!("t{:08}.png", (time_s * 1000.0).round() as u64)
}

/// Extracts one video into `out_root`, recording landmarks into `landmarks`.
pub fn extract_video(
    decoder: &dyn VideoDecoder,
    video: &VideoRecord,
    rate_fps: f64,
    detector: &dyn FaceDetector,
    out_root: &Path,
    landmarks: &mut LandmarkIndex,
) -> Result<VideoSummary> {
    let frames = extract_frames(decoder, video, rate_fps)?;
    let dir = out_root.join(video.label.as_str()).join(video.id());
    let mut summary = VideoSummary {
        video_id: video.id(),
        label: video.label,
        frames: frames.len(),
        crops: 0,
        skipped_s: Vec::new(),
    };
    for (t, frame) in &frames {
        match detect_and_crop_face(frame, detector)? {
            Some(crop) => {
                let path = dir.join(crop_file_name(*t));
                save_png(&crop.image, &path)?;
                landmarks.insert(path, crop.eyes);
                summary.crops += 1;
            }
            None => summary.skipped_s.push(*t),
        }
    }
    if !summary.skipped_s.is_empty() {
        log::warn!(
            "{}: no face in {} of {} frames",
            video.path.display(),
            summary.skipped_s.len(),
            summary.frames
        );
    }
    Ok(summary)
}

fn is_video(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| VIDEO_EXTENSIONS.iter().any(|v| v.eq_ignore_ascii_case(e)))
        .unwrap_or(false)
}

/// Lists `(path, label)` for every video under `<root>/real` and `<root>/fake`, sorted.
pub fn discover_videos(videos_root: &Path) -> Result<Vec<(PathBuf, Label)>> {
    let mut out = Vec::new();
    for label in Label::ALL {
        let dir = videos_root.join(label.as_str());
        if !dir.is_dir() {
            continue;
        }
        let mut paths = Vec::new();
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let p = entry.map_err(|e| Error::io(&dir, e))?.path();
            if p.is_file() && is_video(&p) {
                paths.push(p);
            }
        }
        paths.sort();
        out.extend(paths.into_iter().map(|p| (p, label)));
    }
    if out.is_empty() {
        return Err(Error::Config(format!(
            "no videos under {}/{{real,fake}}",
            videos_root.display()
        )));
    }
    Ok(out)
}

/// Extracts every listed video and merges the landmarks into
/// `<out_root>/landmarks.csv`. Stops at the first undecodable file.
pub fn extract_all(
    videos: &[(PathBuf, Label)],
    rate_fps: f64,
    detector: &dyn FaceDetector,
    out_root: &Path,
) -> Result<Vec<VideoSummary>> {
    let index_path = out_root.join(LandmarkIndex::FILE_NAME);
    let mut landmarks = LandmarkIndex::read(&index_path)?;
    let mut summaries = Vec::with_capacity(videos.len());
    for (path, label) in videos {
        let decoder = decoder_for(path);
        let video = VideoRecord::probe(decoder.as_ref(), path, *label)?;
        summaries.push(extract_video(decoder.as_ref(), &video, rate_fps, detector, out_root, &mut landmarks)?);
    }
    std::fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;
    landmarks.write(&index_path)?;
    Ok(summaries)
}
