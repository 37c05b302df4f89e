//! Minimal PNG plotting for analysis reports: a framed scatter with
//! optional connecting polyline. Coordinates auto-scale with a margin.

use std::path::Path;

use image::{Rgb, RgbImage};

use super::EvalError;

const WIDTH: u32 = 640;
const HEIGHT: u32 = 480;
const MARGIN: u32 = 40;
const BG: Rgb<u8> = Rgb([255, 255, 255]);
const FRAME: Rgb<u8> = Rgb([60, 60, 60]);
const POINT: Rgb<u8> = Rgb([30, 90, 200]);
const LINE: Rgb<u8> = Rgb([150, 180, 230]);

fn draw_segment(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()) as u32).max(1);
    for s in 0..=steps {
        let t = f64::from(s) / f64::from(steps);
        let x = a.0 + (b.0 - a.0) * t;
        let y = a.1 + (b.1 - a.1) * t;
        if x >= 0.0 && y >= 0.0 && (x as u32) < WIDTH && (y as u32) < HEIGHT {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// Writes `points` as a scatter plot; with `connect`, consecutive points
/// are joined (useful for per-position trends).
pub fn scatter_png(points: &[(f64, f64)], connect: bool, path: &Path) -> Result<(), EvalError> {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, BG);
    for x in MARGIN..(WIDTH - MARGIN) {
        img.put_pixel(x, MARGIN, FRAME);
        img.put_pixel(x, HEIGHT - MARGIN, FRAME);
    }
    for y in MARGIN..(HEIGHT - MARGIN) {
        img.put_pixel(MARGIN, y, FRAME);
        img.put_pixel(WIDTH - MARGIN, y, FRAME);
    }

    if !points.is_empty() {
        let (mut x0, mut x1) = (f64::MAX, f64::MIN);
        let (mut y0, mut y1) = (f64::MAX, f64::MIN);
        for &(x, y) in points {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        let pad = |lo: &mut f64, hi: &mut f64| {
            if (*hi - *lo).abs() < 1e-12 {
                *lo -= 1.0;
                *hi += 1.0;
            }
        };
        pad(&mut x0, &mut x1);
        pad(&mut y0, &mut y1);
        let to_px = |x: f64, y: f64| {
            let px = f64::from(MARGIN)
                + (x - x0) / (x1 - x0) * f64::from(WIDTH - 2 * MARGIN);
            // image y grows downward
            let py = f64::from(HEIGHT - MARGIN)
                - (y - y0) / (y1 - y0) * f64::from(HEIGHT - 2 * MARGIN);
            (px, py)
        };

        if connect {
            for w in points.windows(2) {
                draw_segment(&mut img, to_px(w[0].0, w[0].1), to_px(w[1].0, w[1].1), LINE);
            }
        }
        for &(x, y) in points {
            let (px, py) = to_px(x, y);
            for dx in -2i32..=2 {
                for dy in -2i32..=2 {
                    let (qx, qy) = (px as i32 + dx, py as i32 + dy);
                    if qx >= 0 && qy >= 0 && (qx as u32) < WIDTH && (qy as u32) < HEIGHT {
                        img.put_pixel(qx as u32, qy as u32, POINT);
                    }
                }
            }
        }
    }

    img.save(path)
        .map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))
}
