//! Minimal PNG line plots. Every plot ships next to its CSV, so the
//! rendering stays deliberately simple: axes, ticks, numeric tick
//! labels from a tiny bitmap font, and one polyline per series.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const WIDTH: u32 = 800;
const HEIGHT: u32 = 500;
const MARGIN_L: u32 = 70;
const MARGIN_R: u32 = 20;
const MARGIN_T: u32 = 20;
const MARGIN_B: u32 = 40;

const SERIES_COLORS: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [127, 127, 127],
];

/// 3x5 glyphs for digits, minus, and dot, rows top to bottom.
fn glyph(c: char) -> [u8; 5] {
    match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        'e' => [0b000, 0b111, 0b110, 0b100, 0b111],
        _ => [0b000; 5],
    }
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, color: Rgb<u8>) {
    let mut cx = x;
    for c in text.chars() {
        let g = glyph(c);
        for (row, bits) in g.iter().enumerate() {
            for col in 0..3 {
                if bits & (0b100 >> col) != 0 {
                    put(img, cx + col as i64, y + row as i64, color);
                }
            }
        }
        cx += 4;
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn draw_line(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = x0 + (x1 - x0) * t;
        let y = y0 + (y1 - y0) * t;
        put(img, x.round() as i64, y.round() as i64, color);
    }
}

fn format_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if (1e-3..1e5).contains(&a) {
        let s = format!("{v:.3}");
        let s = s.trim_end_matches('0').trim_end_matches('.').to_string();
        if s.is_empty() {
            "0".into()
        } else {
            s
        }
    } else {
        format!("{v:.1e}")
    }
}

/// One named series of (x, y) points.
pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

/// Render a line plot to a PNG file. Axis ranges cover all series with
/// a small pad; a legend swatch per series sits in the top-right.
pub fn line_plot(path: &Path, series: &[Series<'_>]) -> Result<()> {
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::InvalidInput("nothing to plot".into()));
    }
    let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for &(x, y) in &s.points {
            if !x.is_finite() || !y.is_finite() {
                return Err(Error::NonFinite("plot coordinate".into()));
            }
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
    }
    if xmax == xmin {
        xmax = xmin + 1.0;
    }
    if ymax == ymin {
        ymax = ymin + 1.0;
        ymin -= 1.0;
    } else {
        let pad = (ymax - ymin) * 0.05;
        ymin -= pad;
        ymax += pad;
    }

    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let (x0, x1) = (MARGIN_L as f64, (WIDTH - MARGIN_R) as f64);
    let (y0, y1) = ((HEIGHT - MARGIN_B) as f64, MARGIN_T as f64);
    let to_px = |x: f64, y: f64| {
        (
            x0 + (x - xmin) / (xmax - xmin) * (x1 - x0),
            y0 + (y - ymin) / (ymax - ymin) * (y1 - y0),
        )
    };

    let grid = Rgb([225, 225, 225]);
    let axis = Rgb([0, 0, 0]);
    let ticks = 5;
    for i in 0..=ticks {
        let t = i as f64 / ticks as f64;
        let xv = xmin + (xmax - xmin) * t;
        let yv = ymin + (ymax - ymin) * t;
        let (px, _) = to_px(xv, ymin);
        let (_, py) = to_px(xmin, yv);
        draw_line(&mut img, px, y1, px, y0, grid);
        draw_line(&mut img, x0, py, x1, py, grid);
        draw_text(
            &mut img,
            px as i64 - 8,
            y0 as i64 + 8,
            &format_tick(xv),
            axis,
        );
        draw_text(&mut img, 8, py as i64 - 2, &format_tick(yv), axis);
    }
    draw_line(&mut img, x0, y0, x1, y0, axis);
    draw_line(&mut img, x0, y0, x0, y1, axis);

    for (si, s) in series.iter().enumerate() {
        let color = Rgb(SERIES_COLORS[si % SERIES_COLORS.len()]);
        let mut prev: Option<(f64, f64)> = None;
        for &(x, y) in &s.points {
            let p = to_px(x, y);
            if let Some(q) = prev {
                draw_line(&mut img, q.0, q.1, p.0, p.1, color);
            }
            prev = Some(p);
        }
        // legend swatch
        let lx = (WIDTH - MARGIN_R - 60) as f64;
        let ly = (MARGIN_T + 10 + 10 * si as u32) as f64;
        draw_line(&mut img, lx, ly, lx + 18.0, ly, color);
        draw_text(&mut img, lx as i64 + 24, ly as i64 - 2, &format!("{si}"), axis);
    }

    img.save(path)
        .map_err(|e| Error::InvalidInput(format!("png write: {e}")))?;
    Ok(())
}

/// Convenience: plot one curve indexed by step.
pub fn curve_plot(path: &Path, name: &str, values: &[f64]) -> Result<()> {
    let points = values
        .iter()
        .enumerate()
        .map(|(i, &v)| (i as f64, v))
        .collect();
    line_plot(path, &[Series { name, points }])
}
