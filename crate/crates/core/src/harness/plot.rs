//! Minimal line plot of per-step mIoU (old, new, all) without text rendering.

use std::path::Path;

use image::{Rgb, RgbImage};

use super::experiment::StepRecord;
use crate::error::{Error, Result};

const W: u32 = 480;
const H: u32 = 320;
const MARGIN: i64 = 30;

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && x < W as i64 && y < H as i64 {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let n = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for i in 0..=n {
        let x = x0 + (x1 - x0) * i / n;
        let y = y0 + (y1 - y0) * i / n;
        put(img, x, y, c);
        put(img, x, y + 1, c);
    }
}

/// Old (red), new (green) and all (blue) mIoU per step. Each run gets its
/// own brightness so several runs can share one canvas.
pub fn plot_curves(runs: &[(String, &[StepRecord])], path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    let grid = Rgb([225, 225, 225]);
    let (x0, y0, x1, y1) = (MARGIN, H as i64 - MARGIN, W as i64 - MARGIN, MARGIN);
    for k in 0..=10 {
        let y = y0 + (y1 - y0) * k / 10;
        line(&mut img, (x0, y), (x1, y), grid);
    }
    line(&mut img, (x0, y0), (x1, y0), axis);
    line(&mut img, (x0, y0), (x0, y1), axis);

    let max_steps = runs.iter().map(|(_, s)| s.len()).max().unwrap_or(1).max(2);
    let px = |i: usize| x0 + (x1 - x0) * i as i64 / (max_steps as i64 - 1);
    let py = |v: f64| y0 + ((y1 - y0) as f64 * v.clamp(0.0, 1.0)).round() as i64;
    for (r, (_, steps)) in runs.iter().enumerate() {
        let shade = (r * 60).min(150) as u8;
        let colours = [
            Rgb([220, shade, shade]),
            Rgb([shade, 170, shade]),
            Rgb([shade, shade, 220]),
        ];
        let series: [fn(&StepRecord) -> Option<f64>; 3] = [
            |s| s.metrics.miou_old,
            |s| s.metrics.miou_new,
            |s| s.metrics.miou_all,
        ];
        for (f, c) in series.iter().zip(colours) {
            let pts: Vec<(i64, i64)> = steps
                .iter()
                .enumerate()
                .filter_map(|(i, s)| f(s).map(|v| (px(i), py(v))))
                .collect();
            for w in pts.windows(2) {
                line(&mut img, w[0], w[1], c);
            }
            for &(x, y) in &pts {
                for dy in -2..=2 {
                    for dx in -2..=2 {
                        put(&mut img, x + dx, y + dy, c);
                    }
                }
            }
        }
    }
    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}
