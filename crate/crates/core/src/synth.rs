//! Desk-scale synthetic surveillance video.
//!
//! A fixed scene is shared by every video. A small yellow square crosses it left
//! to right at a constant slow speed, wrapping around the horizontal edge. Test
//! videos contain one contiguous anomalous segment of a configured kind.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{write_split, Frame, LabeledVideo, Split};
use crate::error::{Error, Result};

/// Normal horizontal displacement per frame, in pixels.
pub const NORMAL_SPEED: i64 = 2;
/// Speed multiplier of the `fast_motion` anomaly.
pub const FAST_FACTOR: i64 = 3;
pub const OBJECT_SIDE: i64 = 8;
pub const OBJECT_COLOR: [u8; 3] = [255, 220, 40];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    FastMotion,
    ShapeSwap,
    ReversePath,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 3] = [Self::FastMotion, Self::ShapeSwap, Self::ReversePath];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::FastMotion => "fast_motion",
            Self::ShapeSwap => "shape_swap",
            Self::ReversePath => "reverse_path",
        }
    }
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AnomalyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown anomaly kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_train: usize,
    pub num_test: usize,
    pub kinds: Vec<AnomalyKind>,
    pub size: usize,
    pub train_len: usize,
    pub test_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            num_train: 8,
            num_test: 4,
            kinds: AnomalyKind::ALL.to_vec(),
            size: 64,
            train_len: 40,
            test_len: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub train: Vec<LabeledVideo>,
    pub test: Vec<LabeledVideo>,
}

impl SynthDataset {
    pub fn write(&self, root: &Path) -> Result<()> {
        write_split(root, Split::Train, &self.train)?;
        write_split(root, Split::Test, &self.test)
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Shape {
    Square,
    Diamond,
}

fn background(size: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let mut img = RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let gx = x as f64 / size as f64;
        let gy = y as f64 / size as f64;
        Rgb([
            (50.0 + 40.0 * gy) as u8,
            (70.0 + 30.0 * gx) as u8,
            (90.0 + 30.0 * (1.0 - gy)) as u8,
        ])
    });
    // a few static blocks standing in for scene structure
    for _ in 0..4 {
        let w = rng.random_range(size / 10 + 1..=size / 3) as u32;
        let h = rng.random_range(size / 16 + 1..=size / 4) as u32;
        let x0 = rng.random_range(0..size as u32 - w);
        let y0 = rng.random_range(0..size as u32 - h);
        let shade = rng.random_range(20..150u8);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                img.put_pixel(x, y, Rgb([shade, shade / 2 + 30, shade / 3 + 40]));
            }
        }
    }
    img
}

fn draw(bg: &RgbImage, x: i64, y: i64, shape: Shape) -> RgbImage {
    let mut img = bg.clone();
    let size = img.width() as i64;
    let r = OBJECT_SIDE / 2;
    for dy in 0..OBJECT_SIDE {
        for dx in 0..OBJECT_SIDE {
            let inside = match shape {
                Shape::Square => true,
                Shape::Diamond => {
                    // distances from the centre of the 8×8 cell, doubled to stay integral
                    let cx = (2 * dx + 1 - 2 * r).abs();
                    let cy = (2 * dy + 1 - 2 * r).abs();
                    cx + cy <= 2 * r
                }
            };
            let py = y + dy;
            if inside && (0..size).contains(&py) {
                let px = (x + dx).rem_euclid(size);
                img.put_pixel(px as u32, py as u32, Rgb(OBJECT_COLOR));
            }
        }
    }
    img
}

fn render(
    bg: &RgbImage,
    rng: &mut ChaCha8Rng,
    id: String,
    len: usize,
    anomaly: Option<(AnomalyKind, usize, usize)>,
) -> LabeledVideo {
    let size = bg.width() as i64;
    let y = rng.random_range(2..size - OBJECT_SIDE - 2);
    let mut x = rng.random_range(0..size);
    let mut frames = Vec::with_capacity(len);
    let mut labels = Vec::with_capacity(len);
    for t in 0..len {
        let kind = anomaly.and_then(|(k, s, e)| (s..e).contains(&t).then_some(k));
        if t > 0 {
            x += match kind {
                Some(AnomalyKind::FastMotion) => FAST_FACTOR * NORMAL_SPEED,
                Some(AnomalyKind::ReversePath) => -NORMAL_SPEED,
                _ => NORMAL_SPEED,
            };
        }
        let shape = if kind == Some(AnomalyKind::ShapeSwap) {
            Shape::Diamond
        } else {
            Shape::Square
        };
        frames.push(Frame::from_rgb8(&draw(bg, x, y, shape)));
        labels.push(kind.is_some() as u8);
    }
    LabeledVideo {
        id,
        frames,
        labels: anomaly.map(|_| labels),
    }
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    if cfg.size < 2 * OBJECT_SIDE as usize {
        return Err(Error::Config(format!("synthetic canvas {} is too small", cfg.size)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bg = background(cfg.size, &mut rng);
    let train = (0..cfg.num_train)
        .map(|i| render(&bg, &mut rng, format!("train_{i:02}"), cfg.train_len, None))
        .collect();
    let mut test = Vec::with_capacity(cfg.num_test);
    for i in 0..cfg.num_test {
        let id = format!("test_{i:02}");
        let video = if cfg.kinds.is_empty() {
            let mut v = render(&bg, &mut rng, id, cfg.test_len, None);
            v.labels = Some(vec![0; cfg.test_len]);
            v
        } else {
            let kind = cfg.kinds[i % cfg.kinds.len()];
            let len = cfg.test_len;
            let seg_len = rng.random_range(len / 5..=len / 3).max(1);
            let start = rng.random_range(len / 5..=(len - seg_len - len / 10).max(len / 5));
            let end = (start + seg_len).min(len);
            render(&bg, &mut rng, id, len, Some((kind, start, end)))
        };
        test.push(video);
    }
    Ok(SynthDataset { train, test })
}
