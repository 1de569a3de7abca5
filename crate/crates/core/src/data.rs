//! Frame-folder datasets and sliding prediction windows.
//!
//! Layout on disk:
//!
//! ```text
//! root/training/frames/<video>/<frame>.{png,jpg}
//! root/testing/frames/<video>/<frame>.{png,jpg}
//! root/testing/labels/<video>.txt      one 0/1 per line
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::RgbImage;
use log::warn;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "training",
            Split::Test => "testing",
        }
    }
}

/// `[0, 255] → [-1, 1]`.
pub fn normalize_pixel(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

pub fn denormalize_pixel(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Channel-major pixels in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Frame {
    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut pixels = vec![0.0; 3 * h * w];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                pixels[(c * h + y as usize) * w + x as usize] = normalize_pixel(p.0[c]);
            }
        }
        Self {
            channels: 3,
            height: h,
            width: w,
            pixels,
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w) = (self.height, self.width);
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let mut px = [0u8; 3];
            for (c, v) in px.iter_mut().enumerate() {
                let src = c.min(self.channels - 1);
                *v = denormalize_pixel(self.pixels[(src * h + y as usize) * w + x as usize]);
            }
            image::Rgb(px)
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[1, self.channels, self.height, self.width],
            self.pixels.iter().map(|&v| v as f64).collect(),
        )
    }

    /// Inverse of [`Frame::to_tensor`] for one batch item; values are clamped to `[-1, 1]`.
    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        let (c, h, w) = (s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]);
        Self {
            channels: c,
            height: h,
            width: w,
            pixels: t.data()[..c * h * w].iter().map(|&v| v.clamp(-1.0, 1.0) as f32).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVideo {
    pub id: String,
    pub frames: Vec<Frame>,
    /// Per-frame flags, 1 = abnormal. `None` for unlabeled (training) videos.
    pub labels: Option<Vec<u8>>,
}

#[derive(Clone, Copy, Debug)]
pub struct FrameWindow<'a> {
    pub inputs: &'a [Frame],
    pub target: &'a Frame,
    /// Index of `target` within its video.
    pub target_index: usize,
}

pub fn make_windows(video: &LabeledVideo, n: usize) -> Vec<FrameWindow<'_>> {
    if video.frames.len() < n + 1 {
        warn!(
            "video `{}` has {} frames, fewer than the {} needed for one window",
            video.id,
            video.frames.len(),
            n + 1
        );
        return Vec::new();
    }
    (0..video.frames.len() - n)
        .map(|t| FrameWindow {
            inputs: &video.frames[t..t + n],
            target: &video.frames[t + n],
            target_index: t + n,
        })
        .collect()
}

/// Stack windows into `([B, n·C, H, W], [B, C, H, W])`.
pub fn stack_windows(windows: &[FrameWindow<'_>]) -> (Tensor, Tensor) {
    assert!(!windows.is_empty(), "cannot stack an empty batch");
    let first = windows[0].target;
    let n = windows[0].inputs.len();
    let plane = first.channels * first.height * first.width;
    let mut inputs = Vec::with_capacity(windows.len() * n * plane);
    let mut targets = Vec::with_capacity(windows.len() * plane);
    for w in windows {
        for f in w.inputs {
            inputs.extend(f.pixels.iter().map(|&v| v as f64));
        }
        targets.extend(w.target.pixels.iter().map(|&v| v as f64));
    }
    let b = windows.len();
    (
        Tensor::from_vec(&[b, n * first.channels, first.height, first.width], inputs),
        Tensor::from_vec(&[b, first.channels, first.height, first.width], targets),
    )
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() == want_dirs {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn load_frame(path: &Path, resize_to: usize) -> Result<Frame> {
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut rgb = img.to_rgb8();
    let side = resize_to as u32;
    if rgb.width() != side || rgb.height() != side {
        rgb = image::imageops::resize(&rgb, side, side, FilterType::Triangle);
    }
    Ok(Frame::from_rgb8(&rgb))
}

pub fn parse_labels(path: &Path) -> Result<Vec<u8>> {
    let text = fs::read_to_string(path)?;
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match line {
            "0" => labels.push(0),
            "1" => labels.push(1),
            other => {
                return Err(Error::LabelParse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason: format!("expected 0 or 1, found `{other}`"),
                })
            }
        }
    }
    Ok(labels)
}

/// Load one video directory, with an optional label file checked against its length.
pub fn load_video_dir(dir: &Path, resize_to: usize, labels: Option<&Path>) -> Result<LabeledVideo> {
    if !dir.is_dir() {
        return Err(Error::MissingDirectory(dir.to_path_buf()));
    }
    let id = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
    let frames = sorted_entries(dir, false)?
        .into_iter()
        .filter(|p| is_image(p))
        .map(|p| load_frame(&p, resize_to))
        .collect::<Result<Vec<_>>>()?;
    let labels = match labels {
        Some(path) => {
            let labels = parse_labels(path)?;
            if labels.len() != frames.len() {
                return Err(Error::LabelMismatch {
                    video: id,
                    labels: labels.len(),
                    frames: frames.len(),
                });
            }
            Some(labels)
        }
        None => None,
    };
    Ok(LabeledVideo { id, frames, labels })
}

pub fn load_video_frames(root: &Path, split: Split, resize_to: usize) -> Result<Vec<LabeledVideo>> {
    let frames_dir = root.join(split.dir_name()).join("frames");
    if !frames_dir.is_dir() {
        return Err(Error::MissingDirectory(frames_dir));
    }
    let labels_dir = root.join(split.dir_name()).join("labels");
    sorted_entries(&frames_dir, true)?
        .into_iter()
        .map(|dir| {
            let id = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let label_path = labels_dir.join(format!("{id}.txt"));
            load_video_dir(&dir, resize_to, label_path.is_file().then_some(label_path.as_path()))
        })
        .collect()
}

/// Write videos in the loader's layout as lossless PNG frames.
pub fn write_split(root: &Path, split: Split, videos: &[LabeledVideo]) -> Result<()> {
    let frames_dir = root.join(split.dir_name()).join("frames");
    for video in videos {
        let dir = frames_dir.join(&video.id);
        fs::create_dir_all(&dir)?;
        for (i, frame) in video.frames.iter().enumerate() {
            let path = dir.join(format!("{i:04}.png"));
            frame.to_rgb8().save(&path).map_err(|e| Error::Decode {
                path: path.clone(),
                reason: e.to_string(),
            })?;
        }
        if let Some(labels) = &video.labels {
            let labels_dir = root.join(split.dir_name()).join("labels");
            fs::create_dir_all(&labels_dir)?;
            let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
            fs::write(labels_dir.join(format!("{}.txt", video.id)), text)?;
        }
    }
    Ok(())
}
