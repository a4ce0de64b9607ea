//! Frame sampling from video containers.
//!
//! Frames are taken at `t = k / rate` for `k = 0..=floor(duration * rate)`,
//! independent of the container's native frame rate. Each timestamp maps to
//! the frame being displayed at that instant.

use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::Command;

use image::codecs::gif::GifDecoder as GifReader;
use image::{AnimationDecoder, RgbImage};
use serde::{Deserialize, Serialize};

use super::Label;
use crate::error::{Error, Result};

/// Slack for floating-point products such as `2.3 * 10`.
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub path: PathBuf,
    pub label: Label,
    pub duration_s: f64,
    pub fps: f64,
}

impl VideoRecord {
    pub fn probe(decoder: &dyn VideoDecoder, path: &Path, label: Label) -> Result<Self> {
        let (duration_s, fps) = decoder.probe(path)?;
        Ok(VideoRecord {
            path: path.to_path_buf(),
            label,
            duration_s,
            fps,
        })
    }

    /// Identifier used as `source_video_id`: the file stem.
    pub fn id(&self) -> String {
        self.path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

pub trait VideoDecoder {
    /// Returns `(duration_s, native_fps)`.
    fn probe(&self, path: &Path) -> Result<(f64, f64)>;

    /// Decodes the frame on screen at each timestamp.
    fn frames_at(&self, path: &Path, times: &[f64]) -> Result<Vec<RgbImage>>;
}

/// Sampling instants for a clip of `duration_s` seconds at `rate_fps`.
pub fn frame_timestamps(duration_s: f64, rate_fps: f64) -> Result<Vec<f64>> {
    if !(rate_fps > 0.0) || !rate_fps.is_finite() {
        return Err(Error::Validation(format!("frame rate must be positive, got {rate_fps}")));
    }
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        return Err(Error::EmptyInput(format!("video duration is {duration_s} s")));
    }
    let last = (duration_s * rate_fps + TIME_EPS).floor() as u64;
    Ok((0..=last).map(|k| k as f64 / rate_fps).collect())
}

/// Samples `video` at `rate_fps`, returning `(timestamp, frame)` pairs.
pub fn extract_frames(
    decoder: &dyn VideoDecoder,
    video: &VideoRecord,
    rate_fps: f64,
) -> Result<Vec<(f64, RgbImage)>> {
    let times = frame_timestamps(video.duration_s, rate_fps)?;
    let frames = decoder.frames_at(&video.path, &times)?;
    if frames.len() != times.len() {
        return Err(Error::Decode {
            path: video.path.clone(),
            reason: format!("decoder returned {} frames for {} timestamps", frames.len(), times.len()),
        });
    }
    Ok(times.into_iter().zip(frames).collect())
}

/// Picks a decoder from the file extension: GIF natively, everything else via ffmpeg.
pub fn decoder_for(path: &Path) -> Box<dyn VideoDecoder> {
    let is_gif = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("gif"))
        .unwrap_or(false);
    if is_gif {
        Box::new(GifDecoder)
    } else {
        Box::new(FfmpegDecoder::default())
    }
}

/// Animated GIF decoder using per-frame delays as presentation timestamps.
#[derive(Debug, Clone, Copy, Default)]
pub struct GifDecoder;

struct DecodedClip {
    /// Presentation start of each frame, seconds.
    starts: Vec<f64>,
    duration_s: f64,
    frames: Vec<RgbImage>,
}

impl GifDecoder {
    fn decode(&self, path: &Path) -> Result<DecodedClip> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let decode_err = |e: image::ImageError| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        };
        let reader = GifReader::new(BufReader::new(file)).map_err(decode_err)?;
        let frames = reader.into_frames().collect_frames().map_err(decode_err)?;
        let mut starts = Vec::with_capacity(frames.len());
        let mut images = Vec::with_capacity(frames.len());
        let mut t = 0.0;
        for frame in frames {
            starts.push(t);
            let (num, den) = frame.delay().numer_denom_ms();
            t += num as f64 / den as f64 / 1000.0;
            images.push(image::DynamicImage::ImageRgba8(frame.into_buffer()).to_rgb8());
        }
        Ok(DecodedClip {
            starts,
            duration_s: t,
            frames: images,
        })
    }
}

impl VideoDecoder for GifDecoder {
    fn probe(&self, path: &Path) -> Result<(f64, f64)> {
        let clip = self.decode(path)?;
        if clip.frames.is_empty() || clip.duration_s <= 0.0 {
            return Err(Error::EmptyInput(format!("{} has zero duration", path.display())));
        }
        Ok((clip.duration_s, clip.frames.len() as f64 / clip.duration_s))
    }

    fn frames_at(&self, path: &Path, times: &[f64]) -> Result<Vec<RgbImage>> {
        let clip = self.decode(path)?;
        if clip.frames.is_empty() {
            return Err(Error::EmptyInput(format!("{} has no frames", path.display())));
        }
        Ok(times
            .iter()
            .map(|&t| {
                // last frame whose presentation started at or before t
                let idx = clip.starts.partition_point(|&s| s <= t + TIME_EPS).saturating_sub(1);
                clip.frames[idx].clone()
            })
            .collect())
    }
}

/// Decoder backed by the `ffprobe`/`ffmpeg` executables.
#[derive(Debug, Clone)]
pub struct FfmpegDecoder {
    pub ffmpeg: PathBuf,
    pub ffprobe: PathBuf,
}

impl Default for FfmpegDecoder {
    fn default() -> Self {
        FfmpegDecoder {
            ffmpeg: PathBuf::from("ffmpeg"),
            ffprobe: PathBuf::from("ffprobe"),
        }
    }
}

#[derive(Deserialize)]
struct ProbeOutput {
    format: ProbeFormat,
    #[serde(default)]
    streams: Vec<ProbeStream>,
}

#[derive(Deserialize)]
struct ProbeFormat {
    duration: Option<String>,
}

#[derive(Deserialize)]
struct ProbeStream {
    r_frame_rate: Option<String>,
}

fn parse_rate(s: &str) -> Option<f64> {
    match s.split_once('/') {
        Some((n, d)) => {
            let (n, d) = (n.parse::<f64>().ok()?, d.parse::<f64>().ok()?);
            (d != 0.0).then(|| n / d)
        }
        None => s.parse().ok(),
    }
}

impl FfmpegDecoder {
    fn run(&self, program: &Path, args: &[&str], path: &Path) -> Result<Vec<u8>> {
        let out = Command::new(program).args(args).output().map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: format!("cannot run {}: {e}", program.display()),
        })?;
        if !out.status.success() {
            return Err(Error::Decode {
                path: path.to_path_buf(),
                reason: String::from_utf8_lossy(&out.stderr).trim().to_string(),
            });
        }
        Ok(out.stdout)
    }
}

impl VideoDecoder for FfmpegDecoder {
    fn probe(&self, path: &Path) -> Result<(f64, f64)> {
        let p = path.to_string_lossy();
        let stdout = self.run(
            &self.ffprobe,
            &[
                "-v", "error", "-select_streams", "v:0", "-show_entries",
                "format=duration:stream=r_frame_rate", "-of", "json", &p,
            ],
            path,
        )?;
        let parsed: ProbeOutput = serde_json::from_slice(&stdout).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: format!("unreadable ffprobe output: {e}"),
        })?;
        let duration = parsed
            .format
            .duration
            .as_deref()
            .and_then(|d| d.parse::<f64>().ok())
            .unwrap_or(0.0);
        if duration <= 0.0 {
            return Err(Error::EmptyInput(format!("{} has zero duration", path.display())));
        }
        let fps = parsed
            .streams
            .first()
            .and_then(|s| s.r_frame_rate.as_deref())
            .and_then(parse_rate)
            .unwrap_or(0.0);
        Ok((duration, fps))
    }

    fn frames_at(&self, path: &Path, times: &[f64]) -> Result<Vec<RgbImage>> {
        let p = path.to_string_lossy();
        times
            .iter()
            .map(|t| {
                let ts = format!("{t:.6}");
                let png = self.run(
                    &self.ffmpeg,
                    &[
                        "-v", "error", "-ss", &ts, "-i", &p, "-frames:v", "1", "-f", "image2pipe",
                        "-vcodec", "png", "-",
                    ],
                    path,
                )?;
                let img = image::load_from_memory(&png).map_err(|e| Error::Decode {
                    path: path.to_path_buf(),
                    reason: format!("frame at {ts}s: {e}"),
                })?;
                Ok(img.to_rgb8())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::codecs::gif::GifEncoder;
    use image::{Delay, Frame, Rgba, RgbaImage};

    /// Writes a GIF whose frame `i` is filled with gray level `i` and lasts `delay_ms`.
    fn write_gif(path: &Path, n: usize, delay_ms: u32) {
        let file = std::fs::File::create(path).unwrap();
        let mut enc = GifEncoder::new(file);
        for i in 0..n {
            let img = RgbaImage::from_pixel(8, 8, Rgba([i as u8 * 10, 0, 0, 255]));
            enc.encode_frame(Frame::from_parts(img, 0, 0, Delay::from_numer_denom_ms(delay_ms, 1)))
                .unwrap();
        }
    }

    /// Index of the frame on screen at `t` for a constant-delay clip.
    fn oracle_index(t: f64, delay_s: f64, n: usize) -> usize {
        ((t / delay_s + 1e-9).floor() as usize).min(n - 1)
    }

    #[test]
    fn timestamps_follow_floor_formula() {
        let ts = frame_timestamps(10.5, 1.0).unwrap();
        assert_eq!(ts.len(), 11);
        assert_eq!(ts[10], 10.0);
        assert_eq!(frame_timestamps(0.5, 1.0).unwrap(), vec![0.0]);
        assert_eq!(frame_timestamps(2.0, 2.0).unwrap(), vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        // 2.3 * 10 = 22.999999999999996 in binary floating point
        assert_eq!(frame_timestamps(2.3, 10.0).unwrap().len(), 24);
    }

    #[test]
    fn rejects_bad_rate_and_empty_duration() {
        assert!(matches!(frame_timestamps(1.0, 0.0), Err(Error::Validation(_))));
        assert!(matches!(frame_timestamps(0.0, 1.0), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn gif_frames_match_frame_index_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.gif");
        // 21 frames of 500 ms = 10.5 s
        write_gif(&path, 21, 500);
        let video = VideoRecord::probe(&GifDecoder, &path, Label::Real).unwrap();
        assert!((video.duration_s - 10.5).abs() < 1e-9);
        assert!((video.fps - 2.0).abs() < 1e-9);
        let frames = extract_frames(&GifDecoder, &video, 1.0).unwrap();
        assert_eq!(frames.len(), 11);
        for (t, img) in &frames {
            let want = oracle_index(*t, 0.5, 21) as u8 * 10;
            assert_eq!(img.get_pixel(0, 0)[0], want, "t={t}");
        }

        let frames = extract_frames(&GifDecoder, &video, 2.0).unwrap();
        assert_eq!(frames.len(), 22);
        // t = 10.5 is past the last frame start (10.0): clamps to the last frame
        assert_eq!(frames.last().unwrap().1.get_pixel(0, 0)[0], 200);
    }

    #[test]
    fn undecodable_file_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.gif");
        std::fs::write(&path, b"not a gif").unwrap();
        match GifDecoder.probe(&path) {
            Err(Error::Decode { path: p, .. }) => assert_eq!(p, path),
            other => panic!("expected decode error, got {other:?}"),
        }
    }

    #[test]
    fn missing_ffmpeg_is_a_decode_error() {
        let dec = FfmpegDecoder {
            ffmpeg: PathBuf::from("/nonexistent/ffmpeg"),
            ffprobe: PathBuf::from("/nonexistent/ffprobe"),
        };
        assert!(matches!(dec.probe(Path::new("x.mp4")), Err(Error::Decode { .. })));
    }

    proptest::proptest! {
        #[test]
        fn count_formula_holds(duration in 0.01f64..120.0, rate in 0.1f64..30.0) {
            let ts = frame_timestamps(duration, rate).unwrap();
            let expected = (duration * rate + 1e-9).floor() as usize + 1;
            proptest::prop_assert_eq!(ts.len(), expected);
            proptest::prop_assert!(ts.iter().all(|&t| t <= duration + 1e-6));
            proptest::prop_assert!(ts.last().unwrap() + 1.0 / rate > duration);
        }
    }
}
