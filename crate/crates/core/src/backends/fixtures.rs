//! Procedural content images and reference sketches for tests and demos.

use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::imaging::Image;

pub const SIDE: usize = 32;

pub const CONTENT_NAMES: &[&str] = &["dog", "house"];
pub const REFERENCE_NAMES: &[&str] = &["hatch", "dots", "bold", "ink"];

fn inside_ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0
}

/// Colored content image named after its caption fixture.
pub fn content(name: &str) -> Option<Image> {
    let img = match name {
        // Brown body and head on a grassy ground with a faint sky gradient.
        "dog" => Image::from_fn(SIDE, SIDE, 3, |x, y, c| {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let body = inside_ellipse(fx, fy, 15.0, 19.0, 9.0, 5.5);
            let head = inside_ellipse(fx, fy, 24.0, 12.0, 4.5, 4.0);
            let leg = (22..28).contains(&y) && (x == 9 || x == 10 || x == 19 || x == 20);
            let eye = x == 25 && y == 11;
            if eye {
                0.05
            } else if body || head || leg {
                [0.55, 0.35, 0.18][c]
            } else if y >= 24 {
                [0.30, 0.62, 0.25][c] + 0.04 * ((x + y) % 3) as f64
            } else {
                [0.75, 0.85, 0.95][c] - 0.01 * y as f64
            }
        }),
        // Square wall, triangular roof, dark door.
        "house" => Image::from_fn(SIDE, SIDE, 3, |x, y, c| {
            let (xi, yi) = (x as i64, y as i64);
            let wall = (8..24).contains(&xi) && (15..28).contains(&yi);
            let roof = (4..15).contains(&yi) && (xi - 16).abs() <= (yi - 4);
            let door = (14..18).contains(&xi) && (21..28).contains(&yi);
            if door {
                [0.2, 0.12, 0.08][c]
            } else if wall {
                [0.9, 0.82, 0.6][c]
            } else if roof {
                [0.7, 0.15, 0.1][c]
            } else {
                [0.85, 0.9, 0.95][c]
            }
        }),
        _ => return None,
    };
    Some(img.quantized().named(name))
}

/// Reference sketch; all but `ink` are single-channel.
pub fn reference(name: &str) -> Option<Image> {
    let img = match name {
        "hatch" => Image::from_fn(SIDE, SIDE, 1, |x, y, _| if (x + y) % 5 == 0 { 0.1 } else { 0.95 }),
        "dots" => Image::from_fn(SIDE, SIDE, 1, |x, y, _| {
            if x % 4 == 1 && y % 4 == 2 || (x + 2) % 6 == 0 && y % 6 == 3 {
                0.0
            } else {
                1.0
            }
        }),
        "bold" => Image::from_fn(SIDE, SIDE, 1, |x, y, _| {
            let ring = {
                let d = ((x as f64 - 15.5).powi(2) + (y as f64 - 15.5).powi(2)).sqrt();
                (d - 11.0).abs() < 2.0
            };
            if ring || (12..15).contains(&x) {
                0.0
            } else {
                1.0
            }
        }),
        "ink" => Image::from_fn(SIDE, SIDE, 3, |x, y, c| {
            if (x * 3 + y) % 7 < 2 {
                [0.1, 0.2, 0.7][c]
            } else {
                [0.98, 0.96, 0.9][c]
            }
        }),
        "blank" => Image::from_fn(SIDE, SIDE, 1, |_, _, _| 1.0),
        _ => return None,
    };
    Some(img.quantized().named(name))
}

/// Writes every fixture as `<name>.png` into `dir`; returns the paths.
pub fn write_all(dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| crate::error::Error::io(dir, e))?;
    let mut out = Vec::new();
    let contents = CONTENT_NAMES.iter().filter_map(|n| content(n));
    let refs = REFERENCE_NAMES.iter().chain(&["blank"]).filter_map(|n| reference(n));
    for img in contents.chain(refs) {
        let path = dir.join(format!("{}.png", img.name.as_deref().unwrap_or("fixture")));
        img.save_png(&path)?;
        out.push(path);
    }
    Ok(out)
}
