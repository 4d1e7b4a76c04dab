//! Line charts and confusion heatmaps rendered straight to RGB images.

use image::{Rgb, RgbImage};

use crate::font::{draw_text, read_glyph, text_width, ADVANCE};

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const PALETTE: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([214, 39, 40]),
    Rgb([44, 160, 44]),
    Rgb([148, 103, 189]),
    Rgb([255, 127, 14]),
    Rgb([23, 190, 207]),
];

const WIDTH: u32 = 720;
const HEIGHT: u32 = 440;
const LEFT: u32 = 70;
const RIGHT: u32 = 20;
const TOP: u32 = 40;
const BOTTOM: u32 = 50;
const TEXT_SCALE: u32 = 2;

pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Two-pixel-wide segment by uniform stepping along the longer axis.
fn segment(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        let (x, y) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            put(img, x.round() as i64 + dx, y.round() as i64 + dy, c);
        }
    }
}

/// Shortest decimal label for a tick value.
fn tick_label(v: f64, span: f64) -> String {
    let digits = if span >= 10.0 { 0 } else if span >= 1.0 { 1 } else if span >= 0.1 { 2 } else { 3 };
    format!("{v:.digits$}")
}

/// Curves over epoch index with a legend; all series share one y axis.
pub fn line_chart(title: &str, y_label: &str, series: &[Series]) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, WHITE);
    let values = series.iter().flat_map(|s| s.values.iter().copied()).filter(|v| v.is_finite());
    let (mut lo, mut hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo, hi) = (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let n = series.iter().map(|s| s.values.len()).max().unwrap_or(1).max(2);
    let (pw, ph) = ((WIDTH - LEFT - RIGHT) as f64, (HEIGHT - TOP - BOTTOM) as f64);
    let to_px = |i: f64, v: f64| (LEFT as f64 + pw * i / (n - 1) as f64, TOP as f64 + ph * (hi - v) / (hi - lo));

    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let (_, y) = to_px(0.0, v);
        segment(&mut img, (LEFT as f64, y), ((WIDTH - RIGHT) as f64, y), GRID);
        let label = tick_label(v, hi - lo);
        let x = LEFT as i64 - 6 - text_width(&label, TEXT_SCALE) as i64;
        draw_text(&mut img, x, y as i64 - 5, &label, TEXT_SCALE, BLACK);
    }
    let x_ticks = (n - 1).min(8);
    for k in 0..=x_ticks {
        let i = ((n - 1) * k / x_ticks) as f64;
        let (x, _) = to_px(i, lo);
        let label = format!("{}", i as usize + 1);
        draw_text(&mut img, x as i64 - text_width(&label, TEXT_SCALE) as i64 / 2, (HEIGHT - BOTTOM + 8) as i64, &label, TEXT_SCALE, BLACK);
    }
    segment(&mut img, (LEFT as f64, TOP as f64), (LEFT as f64, (HEIGHT - BOTTOM) as f64), BLACK);
    segment(&mut img, (LEFT as f64, (HEIGHT - BOTTOM) as f64), ((WIDTH - RIGHT) as f64, (HEIGHT - BOTTOM) as f64), BLACK);
    draw_text(&mut img, LEFT as i64, 12, title, TEXT_SCALE, BLACK);
    let x_title = "epoch";
    draw_text(&mut img, (WIDTH / 2) as i64, (HEIGHT - 20) as i64, x_title, TEXT_SCALE, BLACK);
    draw_text(&mut img, 6, 12, y_label, TEXT_SCALE, BLACK);

    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<(f64, f64)> = s.values.iter().enumerate().filter(|(_, v)| v.is_finite()).map(|(i, &v)| to_px(i as f64, v)).collect();
        for w in pts.windows(2) {
            segment(&mut img, w[0], w[1], color);
        }
        if let [p] = pts[..] {
            segment(&mut img, p, p, color);
        }
        let ly = (TOP + 8 + k as u32 * 16) as i64;
        let lx = (WIDTH - RIGHT - 150) as i64;
        for dy in 0..8 {
            for dx in 0..14 {
                put(&mut img, lx + dx, ly + dy, color);
            }
        }
        draw_text(&mut img, lx + 20, ly - 1, &s.name, TEXT_SCALE, BLACK);
    }
    img
}

pub const CELL: u32 = 64;
const HEAT_LEFT: u32 = 140;
const HEAT_TOP: u32 = 60;
const COUNT_SCALE: u32 = 3;
const COUNT_INSET: u32 = 6;

fn shade(count: usize, max: usize) -> Rgb<u8> {
    if max == 0 || count == 0 {
        return WHITE;
    }
    let t = count as f64 / max as f64;
    let mix = |a: f64, b: f64| (a + t * (b - a)).round() as u8;
    Rgb([mix(235.0, 8.0), mix(242.0, 48.0), mix(250.0, 107.0)])
}

/// Top-left pixel of cell `(row, col)`.
pub fn cell_origin(row: usize, col: usize) -> (u32, u32) {
    (HEAT_LEFT + col as u32 * CELL, HEAT_TOP + row as u32 * CELL)
}

/// Square count grid; rows are ground truth, columns predictions, `labels` names both.
pub fn confusion_heatmap(title: &str, matrix: &[Vec<usize>], labels: &[String]) -> RgbImage {
    let k = matrix.len() as u32;
    let mut img = RgbImage::from_pixel(HEAT_LEFT + k * CELL + 20, HEAT_TOP + k * CELL + 40, WHITE);
    let max = matrix.iter().flatten().copied().max().unwrap_or(0);
    draw_text(&mut img, 10, 10, title, TEXT_SCALE, BLACK);
    draw_text(&mut img, HEAT_LEFT as i64, 30, "predicted", TEXT_SCALE, BLACK);
    draw_text(&mut img, 10, (HEAT_TOP + k * CELL + 16) as i64, "rows: ground truth", TEXT_SCALE, BLACK);
    for (i, row) in matrix.iter().enumerate() {
        let (_, y) = cell_origin(i, 0);
        let name = labels.get(i).map_or("?", |s| s.as_str());
        draw_text(&mut img, 10, (y + CELL / 2 - 5) as i64, name, TEXT_SCALE, BLACK);
        for (j, &count) in row.iter().enumerate() {
            let (x, y) = cell_origin(i, j);
            let bg = shade(count, max);
            for dy in 1..CELL {
                for dx in 1..CELL {
                    img.put_pixel(x + dx, y + dy, bg);
                }
            }
            let fg = if bg.0.iter().map(|&c| c as u32).sum::<u32>() < 3 * 128 { WHITE } else { BLACK };
            draw_text(&mut img, (x + COUNT_INSET) as i64, (y + COUNT_INSET) as i64, &count.to_string(), COUNT_SCALE, fg);
        }
    }
    for j in 0..k as usize {
        let (x, _) = cell_origin(0, j);
        let name: String = labels.get(j).map_or("?".into(), |s| s.chars().take(5).collect());
        draw_text(&mut img, (x + 4) as i64, (HEAT_TOP - 14) as i64, &name, TEXT_SCALE, BLACK);
    }
    img
}

/// Count printed in cell `(row, col)` of a [`confusion_heatmap`] image.
pub fn read_cell_count(img: &RgbImage, row: usize, col: usize) -> Option<usize> {
    let (x, y) = cell_origin(row, col);
    let bg = *img.get_pixel(x + CELL - 2, y + CELL - 2);
    let mut digits = String::new();
    let max_chars = (CELL - COUNT_INSET) / (ADVANCE * COUNT_SCALE);
    for k in 0..max_chars {
        let gx = x + COUNT_INSET + k * ADVANCE * COUNT_SCALE;
        match read_glyph(img, gx, y + COUNT_INSET, COUNT_SCALE, bg)? {
            ' ' => break,
            c if c.is_ascii_digit() => digits.push(c),
            _ => return None,
        }
    }
    digits.parse().ok()
}
