//! Static PNG figures: loss curves, 2-D latent scatter, pseudo-image grid.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use cdftn_core::losses::LossBreakdown;
use cdftn_core::Tensor;
use image::{Rgb, RgbImage};
use plotters::prelude::*;

use crate::data::tensor_to_rgb;

/// Series colours, indexed modulo their count.
pub const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(148, 103, 189),
    RGBColor(255, 127, 14),
    RGBColor(23, 190, 207),
];

fn render(path: &Path, w: u32, h: u32, draw: impl FnOnce(DrawingArea<BitMapBackend<'_>, plotters::coord::Shift>) -> Result<()>) -> Result<()> {
    let mut buf = vec![0u8; (w * h * 3) as usize];
    {
        let root = BitMapBackend::with_buffer(&mut buf, (w, h)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| anyhow!("plot: {}", e))?;
        draw(root.clone())?;
        root.present().map_err(|e| anyhow!("plot: {}", e))?;
    }
    let img = RgbImage::from_raw(w, h, buf).expect("buffer matches size");
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

fn padded_range(lo: f64, hi: f64) -> std::ops::Range<f64> {
    let span = (hi - lo).abs().max(1e-9);
    (lo - 0.05 * span)..(hi + 0.05 * span)
}

/// One horizontal strip per component, top to bottom in `components` order,
/// each scaled to its own range.
pub fn loss_curves(path: &Path, history: &[LossBreakdown], components: &[&str]) -> Result<()> {
    if history.is_empty() || components.is_empty() {
        bail!("nothing to plot in {}", path.display());
    }
    let strip = 120u32;
    render(path, 900, strip * components.len() as u32, |root| {
        for (k, (area, name)) in root.split_evenly((components.len(), 1)).iter().zip(components).enumerate() {
            let ys: Vec<f64> = history.iter().map(|b| b.get(name).unwrap_or(f64::NAN)).collect();
            let finite = ys.iter().copied().filter(|v| v.is_finite());
            let lo = finite.clone().fold(f64::INFINITY, f64::min);
            let hi = finite.fold(f64::NEG_INFINITY, f64::max);
            if !lo.is_finite() {
                continue;
            }
            let mut chart = ChartBuilder::on(area)
                .margin(6)
                .build_cartesian_2d(0f64..ys.len() as f64, padded_range(lo, hi))
                .map_err(|e| anyhow!("plot: {}", e))?;
            let color = PALETTE[k % PALETTE.len()];
            chart
                .draw_series(LineSeries::new(
                    ys.iter().enumerate().filter(|(_, v)| v.is_finite()).map(|(i, &v)| (i as f64, v)),
                    color,
                ))
                .map_err(|e| anyhow!("plot: {}", e))?;
            let (w, h) = area.dim_in_pixel();
            area.draw(&Rectangle::new([(0, 0), (w as i32 - 1, h as i32 - 1)], BLACK.stroke_width(1)))
                .map_err(|e| anyhow!("plot: {}", e))?;
        }
        Ok(())
    })
}

/// A point of a scatter panel: coordinates, colour index, filled marker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScatterPoint {
    pub xy: [f64; 2],
    pub group: usize,
    pub filled: bool,
}

/// Side-by-side scatter panels, each with its own axes.
pub fn scatter_panels(path: &Path, panels: &[Vec<ScatterPoint>]) -> Result<()> {
    if panels.is_empty() {
        bail!("nothing to plot in {}", path.display());
    }
    let side = 420u32;
    render(path, side * panels.len() as u32, side, |root| {
        for (area, pts) in root.split_evenly((1, panels.len())).iter().zip(panels) {
            let (w, h) = area.dim_in_pixel();
            area.draw(&Rectangle::new([(0, 0), (w as i32 - 1, h as i32 - 1)], BLACK.stroke_width(1)))
                .map_err(|e| anyhow!("plot: {}", e))?;
            if pts.is_empty() {
                continue;
            }
            let bound = |i: usize| {
                let lo = pts.iter().map(|p| p.xy[i]).fold(f64::INFINITY, f64::min);
                let hi = pts.iter().map(|p| p.xy[i]).fold(f64::NEG_INFINITY, f64::max);
                padded_range(lo, hi)
            };
            let mut chart = ChartBuilder::on(area)
                .margin(10)
                .build_cartesian_2d(bound(0), bound(1))
                .map_err(|e| anyhow!("plot: {}", e))?;
            chart
                .draw_series(pts.iter().map(|p| {
                    let color = PALETTE[p.group % PALETTE.len()];
                    let style = if p.filled { color.filled() } else { color.stroke_width(1) };
                    Circle::new((p.xy[0], p.xy[1]), 3, style)
                }))
                .map_err(|e| anyhow!("plot: {}", e))?;
        }
        Ok(())
    })
}

/// Tile `[3, H, W]` images row by row with a 2-pixel white gutter.
pub fn image_grid(path: &Path, rows: &[Vec<Tensor<f32>>]) -> Result<()> {
    let first = rows
        .iter()
        .flat_map(|r| r.first())
        .next()
        .ok_or_else(|| anyhow!("no images for {}", path.display()))?;
    let (h, w) = (first.shape()[1] as u32, first.shape()[2] as u32);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0) as u32;
    let gap = 2u32;
    let mut canvas = RgbImage::from_pixel(cols * (w + gap) + gap, rows.len() as u32 * (h + gap) + gap, Rgb([255, 255, 255]));
    for (r, row) in rows.iter().enumerate() {
        for (c, t) in row.iter().enumerate() {
            let tile = tensor_to_rgb(t)?;
            if tile.dimensions() != (w, h) {
                bail!("grid images must share one size");
            }
            image::imageops::replace(
                &mut canvas,
                &tile,
                (gap + c as u32 * (w + gap)) as i64,
                (gap + r as u32 * (h + gap)) as i64,
            );
        }
    }
    canvas.save(path).with_context(|| format!("writing {}", path.display()))
}
