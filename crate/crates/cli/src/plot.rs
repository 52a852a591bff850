//! Minimal PNG curve rendering for metric reports. Draws straight into an
//! RGB buffer so the binary needs no plotting stack.

use image::{Rgb, RgbImage};
use predtrack::metrics::MetricReport;

const WIDTH: u32 = 640;
const HEIGHT: u32 = 480;
const LEFT: u32 = 56;
const RIGHT: u32 = 16;
const TOP: u32 = 16;
const BOTTOM: u32 = 32;

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const FRAME: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([220, 220, 220]);
const SEQUENCE: Rgb<u8> = Rgb([170, 170, 170]);
const AGGREGATE: Rgb<u8> = Rgb([30, 90, 200]);

/// 3x5 glyphs for the tick labels, row bits left to right.
const GLYPHS: [(char, [u8; 5]); 11] = [
    ('0', [0b111, 0b101, 0b101, 0b101, 0b111]),
    ('1', [0b010, 0b110, 0b010, 0b010, 0b111]),
    ('2', [0b111, 0b001, 0b111, 0b100, 0b111]),
    ('3', [0b111, 0b001, 0b111, 0b001, 0b111]),
    ('4', [0b101, 0b101, 0b111, 0b001, 0b001]),
    ('5', [0b111, 0b100, 0b111, 0b001, 0b111]),
    ('6', [0b111, 0b100, 0b111, 0b101, 0b111]),
    ('7', [0b111, 0b001, 0b010, 0b010, 0b010]),
    ('8', [0b111, 0b101, 0b111, 0b101, 0b111]),
    ('9', [0b111, 0b101, 0b111, 0b001, 0b111]),
    ('.', [0b000, 0b000, 0b000, 0b000, 0b010]),
];

const SCALE: u32 = 2;
const GLYPH_W: u32 = 3 * SCALE + SCALE; // advance including spacing
const GLYPH_H: u32 = 5 * SCALE;

fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str, color: Rgb<u8>) {
    let mut cx = x;
    for ch in text.chars() {
        if let Some((_, rows)) = GLYPHS.iter().find(|(g, _)| *g == ch) {
            for (r, bits) in rows.iter().enumerate() {
                for c in 0..3u32 {
                    if bits >> (2 - c) & 1 == 1 {
                        for dy in 0..SCALE {
                            for dx in 0..SCALE {
                                let px = cx + c * SCALE + dx;
                                let py = y + r as u32 * SCALE + dy;
                                if px < img.width() && py < img.height() {
                                    img.put_pixel(px, py, color);
                                }
                            }
                        }
                    }
                }
            }
        }
        cx += GLYPH_W;
    }
}

fn text_width(text: &str) -> u32 {
    text.chars().count() as u32 * GLYPH_W
}

fn draw_line(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, color: Rgb<u8>, thick: bool) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize + 1;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = x0 + (x1 - x0) * t;
        let y = y0 + (y1 - y0) * t;
        let offsets: &[(i64, i64)] = if thick {
            &[(0, 0), (1, 0), (0, 1), (1, 1)]
        } else {
            &[(0, 0)]
        };
        for (dx, dy) in offsets {
            let px = x.round() as i64 + dx;
            let py = y.round() as i64 + dy;
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
    }
}

struct Axes {
    x_max: f64,
}

impl Axes {
    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let w = (WIDTH - LEFT - RIGHT) as f64;
        let h = (HEIGHT - TOP - BOTTOM) as f64;
        (
            LEFT as f64 + x / self.x_max * w,
            TOP as f64 + (1.0 - y) * h,
        )
    }
}

fn format_tick(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1000.0 {
        format!("{v:.0}")
    } else {
        let s = format!("{v:.2}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// One curve panel: y in [0, 1], x in [0, x_max], per-sequence curves in
/// gray behind the bold aggregate.
fn draw_panel(x_max: f64, curves: &[&[f64]], aggregate: &[f64]) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, BACKGROUND);
    let axes = Axes { x_max };

    for k in 0..=4u32 {
        let fy = k as f64 / 4.0;
        let (gx0, gy) = axes.map(0.0, fy);
        let (gx1, _) = axes.map(x_max, fy);
        draw_line(&mut img, gx0, gy, gx1, gy, GRID, false);
        let label = format_tick(fy);
        draw_text(
            &mut img,
            LEFT.saturating_sub(text_width(&label) + 6),
            gy as u32 - GLYPH_H / 2,
            &label,
            FRAME,
        );

        let fx = x_max * k as f64 / 4.0;
        let (gx, gy0) = axes.map(fx, 0.0);
        let (_, gy1) = axes.map(fx, 1.0);
        draw_line(&mut img, gx, gy0, gx, gy1, GRID, false);
        let label = format_tick(fx);
        draw_text(
            &mut img,
            gx as u32 - text_width(&label) / 2,
            HEIGHT - BOTTOM + 8,
            &label,
            FRAME,
        );
    }

    let curve_points = |c: &[f64]| -> Vec<(f64, f64)> {
        c.iter()
            .enumerate()
            .map(|(i, &y)| {
                let x = x_max * i as f64 / (c.len() - 1).max(1) as f64;
                axes.map(x, y.clamp(0.0, 1.0))
            })
            .collect()
    };
    for c in curves {
        for pair in curve_points(c).windows(2) {
            draw_line(&mut img, pair[0].0, pair[0].1, pair[1].0, pair[1].1, SEQUENCE, false);
        }
    }
    for pair in curve_points(aggregate).windows(2) {
        draw_line(&mut img, pair[0].0, pair[0].1, pair[1].0, pair[1].1, AGGREGATE, true);
    }

    let (fx0, fy0) = axes.map(0.0, 0.0);
    let (fx1, fy1) = axes.map(x_max, 1.0);
    draw_line(&mut img, fx0, fy0, fx1, fy0, FRAME, false);
    draw_line(&mut img, fx0, fy0, fx0, fy1, FRAME, false);
    img
}

/// The three standard panels for a report, keyed by output file name.
pub fn report_plots(report: &MetricReport) -> Vec<(&'static str, RgbImage)> {
    let op: Vec<&[f64]> = report
        .sequences
        .values()
        .map(|s| s.op_curve.as_slice())
        .collect();
    let pr: Vec<&[f64]> = report
        .sequences
        .values()
        .map(|s| s.precision_curve.as_slice())
        .collect();
    let npr: Vec<&[f64]> = report
        .sequences
        .values()
        .map(|s| s.npr_curve.as_slice())
        .collect();
    let a = &report.aggregate;
    vec![
        ("success.png", draw_panel(1.0, &op, &a.op_curve)),
        ("precision.png", draw_panel(50.0, &pr, &a.precision_curve)),
        ("norm_precision.png", draw_panel(0.5, &npr, &a.npr_curve)),
    ]
}
