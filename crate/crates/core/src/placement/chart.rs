use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const HEIGHT: u32 = 240;
const BAR: u32 = 24;
const GAP: u32 = 8;
const MARGIN: u32 = 16;

/// Writes a plain vertical bar chart as PNG. Bars are scaled to the largest
/// value; the bar at `highlight` is drawn in a contrasting color.
pub fn write_bar_chart(path: &Path, values: &[f64], highlight: Option<usize>) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Parameter("bar chart needs at least one value".into()));
    }
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Parameter("bar chart values must be finite and nonnegative".into()));
    }
    let n = values.len() as u32;
    let width = 2 * MARGIN + n * BAR + (n - 1) * GAP;
    let mut img = RgbImage::from_pixel(width, HEIGHT, Rgb([255, 255, 255]));
    let max = values.iter().cloned().fold(0.0, f64::max);
    let usable = (HEIGHT - 2 * MARGIN) as f64;
    let base = HEIGHT - MARGIN;
    for x in MARGIN - 4..width - MARGIN + 4 {
        img.put_pixel(x, base, Rgb([0, 0, 0]));
    }
    for (i, &v) in values.iter().enumerate() {
        let bar_h = if max > 0.0 { (v / max * usable).round() as u32 } else { 0 };
        let color = if Some(i) == highlight {
            Rgb([200, 40, 40])
        } else {
            Rgb([70, 110, 170])
        };
        let x0 = MARGIN + i as u32 * (BAR + GAP);
        for x in x0..x0 + BAR {
            for y in base - bar_h..base {
                img.put_pixel(x, y, color);
            }
        }
    }
    img.save(path)?;
    Ok(())
}
