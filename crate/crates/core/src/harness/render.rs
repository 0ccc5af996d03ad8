use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Lays out originals in the top row and reconstructions beneath them, one
/// `[C, H, W]` tile per column, clamped to `[0, 1]`. The format follows the
/// file extension (`.png`, `.pgm`, `.ppm`).
pub fn render_grid(originals: &[Tensor], reconstructions: &[Tensor], path: &Path) -> Result<()> {
    grid_image(originals, reconstructions)?.save(path)?;
    Ok(())
}

pub fn grid_image(originals: &[Tensor], reconstructions: &[Tensor]) -> Result<image::DynamicImage> {
    if originals.is_empty() {
        return Err(Error::usage("cannot render an empty grid"));
    }
    if originals.len() != reconstructions.len() {
        return Err(Error::usage(format!(
            "{} originals but {} reconstructions",
            originals.len(),
            reconstructions.len()
        )));
    }
    let shape = originals[0].shape().to_vec();
    let [c, h, w] = shape[..] else {
        return Err(Error::usage(format!("tiles must be [C, H, W], got {shape:?}")));
    };
    if let Some(bad) = originals.iter().chain(reconstructions).find(|t| t.shape() != shape.as_slice()) {
        return Err(Error::Shape {
            op: "render_grid",
            shapes: vec![shape.clone(), bad.shape().to_vec()],
        });
    }
    let cols = originals.len();
    let mut canvas = Tensor::zeros(&[c, 2 * h, cols * w]);
    let width = cols * w;
    for (row, tiles) in [originals, reconstructions].into_iter().enumerate() {
        for (col, tile) in tiles.iter().enumerate() {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let v = tile.data()[(ch * h + y) * w + x].clamp(0.0, 1.0);
                        canvas.data_mut()[(ch * 2 * h + row * h + y) * width + col * w + x] = v;
                    }
                }
            }
        }
    }
    super::dataset::to_dynamic_image(&canvas)
}
