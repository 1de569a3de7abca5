//! Static figures drawn straight onto RGB buffers.

use std::path::Path;

use anyhow::{Context, Result};
use image::{ImageBuffer, Luma, Rgb, RgbImage};
use lgn_core::eval::RocCurve;
use lgn_core::scoring::ScoreSeries;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const CURVE: Rgb<u8> = Rgb([31, 90, 180]);
const SHADE: Rgb<u8> = Rgb([250, 205, 205]);
const MARGIN: i64 = 30;

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Bresenham line, thickened by one pixel vertically.
fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, c);
        put(img, x, y + 1, c);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Plot area mapping from unit coordinates to pixels.
struct Frame {
    w: i64,
    h: i64,
}

impl Frame {
    fn px(&self, u: f64, v: f64) -> (i64, i64) {
        let x = MARGIN + (u.clamp(0.0, 1.0) * (self.w - 2 * MARGIN) as f64).round() as i64;
        let y = self.h - MARGIN - (v.clamp(0.0, 1.0) * (self.h - 2 * MARGIN) as f64).round() as i64;
        (x, y)
    }

    fn canvas(&self) -> RgbImage {
        let mut img = RgbImage::from_pixel(self.w as u32, self.h as u32, WHITE);
        for i in 1..4 {
            let t = i as f64 / 4.0;
            line(&mut img, self.px(0.0, t), self.px(1.0, t), GRID);
        }
        img
    }

    fn axes(&self, img: &mut RgbImage) {
        line(img, self.px(0.0, 0.0), self.px(1.0, 0.0), AXIS);
        line(img, self.px(0.0, 0.0), self.px(0.0, 1.0), AXIS);
    }
}

/// Normality over time with abnormal frames shaded.
pub fn normality_curve(series: &ScoreSeries, path: &Path) -> Result<()> {
    let f = Frame { w: 800, h: 300 };
    let mut img = f.canvas();
    let n = series.records.len();
    let u = |i: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
    let half = if n > 1 { 0.5 / (n - 1) as f64 } else { 0.5 };
    for (i, r) in series.records.iter().enumerate() {
        if r.label == Some(1) {
            let (x0, _) = f.px(u(i) - half, 0.0);
            let (x1, _) = f.px(u(i) + half, 0.0);
            let (_, top) = f.px(0.0, 1.0);
            let (_, bottom) = f.px(0.0, 0.0);
            for x in x0..=x1 {
                for y in top..=bottom {
                    put(&mut img, x, y, SHADE);
                }
            }
        }
    }
    f.axes(&mut img);
    let pts: Vec<(i64, i64)> = series
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| f.px(u(i), r.normality))
        .collect();
    match pts.as_slice() {
        [] => {}
        [p] => put(&mut img, p.0, p.1, CURVE),
        _ => {
            for w in pts.windows(2) {
                line(&mut img, w[0], w[1], CURVE);
            }
        }
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

pub fn roc_curve(roc: &RocCurve, path: &Path) -> Result<()> {
    let f = Frame { w: 400, h: 400 };
    let mut img = f.canvas();
    line(&mut img, f.px(0.0, 0.0), f.px(1.0, 1.0), GRID);
    f.axes(&mut img);
    for i in 1..roc.fpr.len() {
        line(
            &mut img,
            f.px(roc.fpr[i - 1], roc.tpr[i - 1]),
            f.px(roc.fpr[i], roc.tpr[i]),
            CURVE,
        );
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

/// Piecewise-linear blue, cyan, yellow, red ramp.
pub fn colormap(t: f64) -> Rgb<u8> {
    const STOPS: [(f64, [f64; 3]); 5] = [
        (0.0, [0.0, 0.0, 0.5]),
        (0.25, [0.0, 0.4, 1.0]),
        (0.5, [0.0, 0.9, 0.9]),
        (0.75, [1.0, 0.9, 0.0]),
        (1.0, [0.8, 0.0, 0.0]),
    ];
    let t = t.clamp(0.0, 1.0);
    let k = STOPS.windows(2).position(|w| t <= w[1].0).unwrap_or(3);
    let ((a, ca), (b, cb)) = (STOPS[k], STOPS[k + 1]);
    let s = (t - a) / (b - a);
    Rgb(std::array::from_fn(|i| ((ca[i] + s * (cb[i] - ca[i])) * 255.0).round() as u8))
}

pub type ErrorMapImage = ImageBuffer<Luma<u16>, Vec<u16>>;

/// Store a `[0, 1]` map losslessly enough for later colouring.
pub fn encode_error_map(values: &[f64], width: u32, height: u32) -> ErrorMapImage {
    ImageBuffer::from_fn(width, height, |x, y| {
        let v = values[(y * width + x) as usize].clamp(0.0, 1.0);
        Luma([(v * u16::MAX as f64).round() as u16])
    })
}

pub fn heatmap(src: &Path, dst: &Path) -> Result<()> {
    let gray = image::open(src)
        .with_context(|| format!("reading error map {}", src.display()))?
        .to_luma16();
    let img = RgbImage::from_fn(gray.width(), gray.height(), |x, y| {
        colormap(gray.get_pixel(x, y).0[0] as f64 / u16::MAX as f64)
    });
    img.save(dst).with_context(|| format!("writing {}", dst.display()))
}
