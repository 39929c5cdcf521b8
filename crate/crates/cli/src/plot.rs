//! CMC chart rendering with plain pixel drawing.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use davr_core::metrics::EvalReport;
use image::{Rgb, RgbImage};

pub const WIDTH: u32 = 640;
pub const HEIGHT: u32 = 480;
pub const MARGIN: u32 = 48;

const PALETTE: [[u8; 3]; 6] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [148, 103, 189], [255, 127, 14], [23, 190, 207]];

/// Pixel position of rank `k` (1-based) at match rate `rate`.
pub fn point(k: usize, k_max: usize, rate: f64) -> (u32, u32) {
    let span_x = (WIDTH - 2 * MARGIN) as f64;
    let span_y = (HEIGHT - 2 * MARGIN) as f64;
    let fx = if k_max > 1 { (k - 1) as f64 / (k_max - 1) as f64 } else { 0.0 };
    let x = MARGIN as f64 + fx * span_x;
    let y = (HEIGHT - MARGIN) as f64 - rate.clamp(0.0, 1.0) * span_y;
    (x.round() as u32, y.round() as u32)
}

pub fn color(series: usize) -> Rgb<u8> {
    Rgb(PALETTE[series % PALETTE.len()])
}

fn line(img: &mut RgbImage, (x0, y0): (u32, u32), (x1, y1): (u32, u32), c: Rgb<u8>) {
    let steps = (x1 as i64 - x0 as i64).abs().max((y1 as i64 - y0 as i64).abs()).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = (x0 as f64 + t * (x1 as f64 - x0 as f64)).round() as u32;
        let y = (y0 as f64 + t * (y1 as f64 - y0 as f64)).round() as u32;
        img.put_pixel(x, y, c);
    }
}

/// Writes the rank-vs-rate chart to `out` and its CSV twin next to it.
pub fn plot_cmc(reports: &[(String, EvalReport)], out: &Path) -> Result<()> {
    if reports.is_empty() {
        bail!("plot-cmc needs at least one report");
    }
    let k_max = reports.iter().map(|(_, r)| r.cmc.len()).max().unwrap_or(0);
    if k_max == 0 {
        bail!("reports have empty CMC curves");
    }
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    line(&mut img, (MARGIN, HEIGHT - MARGIN), (WIDTH - MARGIN, HEIGHT - MARGIN), axis);
    line(&mut img, (MARGIN, MARGIN), (MARGIN, HEIGHT - MARGIN), axis);
    let grid = Rgb([220, 220, 220]);
    for tenth in 1..=10 {
        let (_, y) = point(1, k_max, tenth as f64 / 10.0);
        line(&mut img, (MARGIN + 1, y), (WIDTH - MARGIN, y), grid);
    }
    let mut csv = String::from("report,k,rate\n");
    for (s, (name, report)) in reports.iter().enumerate() {
        let c = color(s);
        let pts: Vec<(u32, u32)> = report.cmc.iter().enumerate().map(|(i, &r)| point(i + 1, k_max, r)).collect();
        for w in pts.windows(2) {
            line(&mut img, w[0], w[1], c);
        }
        for &(x, y) in &pts {
            for dx in -2i64..=2 {
                for dy in -2i64..=2 {
                    img.put_pixel((x as i64 + dx) as u32, (y as i64 + dy) as u32, c);
                }
            }
        }
        for (i, rate) in report.cmc.iter().enumerate() {
            csv.push_str(&format!("{name},{},{rate}\n", i + 1));
        }
    }
    img.save(out).with_context(|| format!("writing {}", out.display()))?;
    let csv_path = out.with_extension("csv");
    fs::write(&csv_path, csv).with_context(|| format!("writing {}", csv_path.display()))?;
    Ok(())
}
