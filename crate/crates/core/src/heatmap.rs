//! Space-time heatmap panels written as PNG.
//!
//! Colormap: a value is mapped to `s = (v - lo) / (hi - lo)` in `[0, 1]`
//! and drawn as `RGB = (round(255 s), 0, round(255 (1 - s)))`, so the
//! minimum is pure blue and the maximum pure red. Time runs down the image,
//! space to the right. The color range is shared by every panel of a field.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Array2;

use crate::grid::FieldSet;
use crate::{Error, Result};

const GAP: u32 = 2;
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);

pub fn colormap(v: f64, lo: f64, hi: f64) -> Rgb<u8> {
    let s = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
    Rgb([(255.0 * s).round() as u8, 0, (255.0 * (1.0 - s)).round() as u8])
}

/// Integer upscaling so small grids stay legible.
fn cell_scale(nt: usize, nx: usize) -> (u32, u32) {
    ((128 / nt).max(1) as u32, (256 / nx).max(1) as u32)
}

fn range<'a>(arrays: impl Iterator<Item = &'a Array2<f64>>) -> (f64, f64) {
    arrays
        .flat_map(|a| a.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Tiles `grid[row][col]`, using a per-column color range.
fn render_grid(tiles: &[Vec<Array2<f64>>], path: &Path) -> Result<()> {
    let rows = tiles.len() as u32;
    let cols = tiles[0].len() as u32;
    let (nt, nx) = tiles[0][0].dim();
    let (st, sx) = cell_scale(nt, nx);
    let (th, tw) = (nt as u32 * st, nx as u32 * sx);
    let ranges: Vec<(f64, f64)> = (0..cols as usize).map(|c| range(tiles.iter().map(|r| &r[c]))).collect();
    let mut img = RgbImage::from_pixel(cols * (tw + GAP) - GAP, rows * (th + GAP) - GAP, BACKGROUND);
    for (r, row) in tiles.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            let (lo, hi) = ranges[c];
            let (x0, y0) = (c as u32 * (tw + GAP), r as u32 * (th + GAP));
            for ((t, x), &v) in tile.indexed_iter() {
                let px = colormap(v, lo, hi);
                for dy in 0..st {
                    for dx in 0..sx {
                        img.put_pixel(x0 + x as u32 * sx + dx, y0 + t as u32 * st + dy, px);
                    }
                }
            }
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::Io(io),
            other => Error::Image(other.to_string()),
        })
}

/// Writes `fields.png` (one row per field set, one column per field) and,
/// when there are at least two sets, `abs_error.png` holding
/// `|set_k - set_0|` for every later set. Returns the written paths.
pub fn render_heatmaps(sets: &[&FieldSet], dir: &Path) -> Result<Vec<PathBuf>> {
    let first = sets.first().ok_or_else(|| Error::Empty("no field sets to plot".into()))?;
    if sets.iter().any(|s| s.grid() != first.grid() || s.fields().len() != first.fields().len()) {
        return Err(Error::Incompatible("field sets disagree on grid or field count".into()));
    }
    std::fs::create_dir_all(dir)?;
    let tiles: Vec<Vec<Array2<f64>>> = sets
        .iter()
        .map(|s| s.fields().iter().map(|f| f.data().clone()).collect())
        .collect();
    let mut written = vec![dir.join("fields.png")];
    render_grid(&tiles, &written[0])?;
    if tiles.len() > 1 {
        let errors: Vec<Vec<Array2<f64>>> = tiles[1..]
            .iter()
            .map(|row| row.iter().zip(&tiles[0]).map(|(p, t)| (p - t).mapv(f64::abs)).collect())
            .collect();
        let p = dir.join("abs_error.png");
        render_grid(&errors, &p)?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Boundary, Field, GridSpec, SystemId};

    fn set(offset: f64) -> FieldSet {
        let g = GridSpec::new(8, 6, 0.0, 1.0, 1.0, Boundary::Periodic).unwrap();
        let f = |k: f64| {
            let d = Array2::from_shape_fn((6, 8), |(t, x)| k * (t as f64 - 0.3 * x as f64) + offset);
            Field::new(g, d, "f").unwrap()
        };
        let a = f(1.0);
        let b = f(-2.0);
        let ics = vec![a.data().row(0).to_owned(), b.data().row(0).to_owned()];
        FieldSet::new(vec![a, b], ics, SystemId::ReactionDiffusion).unwrap()
    }

    #[test]
    fn writes_deterministic_png() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (set(0.0), set(0.1));
        let paths = render_heatmaps(&[&a, &b], dir.path()).unwrap();
        assert_eq!(paths.len(), 2);
        let bytes = std::fs::read(&paths[0]).unwrap();
        assert!(!bytes.is_empty());
        let dir2 = tempfile::tempdir().unwrap();
        let again = render_heatmaps(&[&a, &b], dir2.path()).unwrap();
        assert_eq!(std::fs::read(&again[0]).unwrap(), bytes);
        assert!(render_heatmaps(&[], dir.path()).is_err());
    }

    #[test]
    fn extrema_map_to_colormap_ends() {
        let dir = tempfile::tempdir().unwrap();
        let a = set(0.0);
        let p = &render_heatmaps(&[&a], dir.path()).unwrap()[0];
        let img = image::open(p).unwrap().to_rgb8();
        let data = a.fields()[0].data();
        let (st, sx) = cell_scale(6, 8);
        let at = |t: usize, x: usize| *img.get_pixel(x as u32 * sx, t as u32 * st);
        let (lo, hi) = range(std::iter::once(data));
        let (mut imin, mut imax) = ((0, 0), (0, 0));
        for ((t, x), &v) in data.indexed_iter() {
            if v == lo {
                imin = (t, x);
            }
            if v == hi {
                imax = (t, x);
            }
        }
        assert_eq!(at(imin.0, imin.1), Rgb([0, 0, 255]));
        assert_eq!(at(imax.0, imax.1), Rgb([255, 0, 0]));
        // an interior value follows the linear ramp
        let v = data[[2, 3]];
        let s = (v - lo) / (hi - lo);
        assert_eq!(at(2, 3).0[0], (255.0 * s).round() as u8);
    }
}
