//! Per-slice PNG overlays of labels on the image.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, ScalarVolume};

/// RGB per stage-3 code; background is not drawn.
const COLORS: [[u8; 3]; 5] = [[0, 0, 0], [220, 40, 40], [40, 200, 70], [250, 220, 40], [60, 110, 255]];
const ALPHA: f32 = 0.45;

/// Writes `<dir>/<stem>_zNNN.png` for every z-slice and returns the paths.
/// The image is windowed to its 1st..99th percentile.
pub fn write_overlays(image: &ScalarVolume, labels: &LabelVolume, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    image.geometry().ensure_same(labels.geometry())?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let [nx, ny, nz] = image.dims();
    let mut sorted = image.data().to_vec();
    sorted.sort_by(f32::total_cmp);
    let lo = sorted[sorted.len() / 100];
    let hi = sorted[sorted.len() * 99 / 100].max(lo + f32::EPSILON);
    let mut paths = Vec::with_capacity(nz);
    for k in 0..nz {
        let mut rgb = Vec::with_capacity(nx * ny * 3);
        // rows top to bottom with y increasing downward
        for j in 0..ny {
            for i in 0..nx {
                let g = ((image.get(i, j, k) - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0;
                let l = labels.get(i, j, k) as usize;
                for c in 0..3 {
                    let v = if l == 0 || l >= COLORS.len() {
                        g
                    } else {
                        g * (1.0 - ALPHA) + COLORS[l][c] as f32 * ALPHA
                    };
                    rgb.push(v.round() as u8);
                }
            }
        }
        let path = dir.join(format!("{stem}_z{k:03}.png"));
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), nx as u32, ny as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.write_header()
            .and_then(|mut w| w.write_image_data(&rgb))
            .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
        paths.push(path);
    }
    Ok(paths)
}
