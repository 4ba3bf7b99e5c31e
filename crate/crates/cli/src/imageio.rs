use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use psvae_core::{Real, Tensor};

use crate::error::{CliError, CliResult};

/// 8-bit RGB PNG to `[H, W, 3]` in `[0, 1]`. Other layouts are converted.
pub fn load<T: Real>(path: &Path) -> CliResult<Tensor<T>> {
    let img = image::open(path).map_err(|e| CliError::io(path, e))?.into_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| T::from_f64(f64::from(v) / 255.0)).collect();
    Ok(Tensor::new(&[h as usize, w as usize, 3], data)?)
}

pub fn to_rgb8<T: Real>(t: &Tensor<T>) -> CliResult<RgbImage> {
    let [h, w, c] = <[usize; 3]>::try_from(t.shape())
        .map_err(|_| CliError::Config(format!("expected an [H,W,3] image, got {:?}", t.shape())))?;
    if c != 3 {
        return Err(CliError::Config(format!("expected 3 channels, got {c}")));
    }
    let raw = t.data().iter().map(|v| quantize(v.to_f64_lossy())).collect();
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer matches extents"))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save<T: Real>(t: &Tensor<T>, path: &Path) -> CliResult<()> {
    save_rgb(&to_rgb8(t)?, path)
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| CliError::io(path, e))
}

/// What an 8-bit round trip does to `t`.
pub fn quantized<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| T::from_f64(f64::from(quantize(v.to_f64_lossy())) / 255.0))
}

/// Sorted `*.png` files in `dir`.
pub fn list_pngs(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [145, 30, 180],
    [70, 240, 240],
    [245, 130, 48],
    [128, 128, 128],
];

/// Route map over `base`: each pixel takes the colour of the grid cell it
/// falls in, mixed half and half with the image.
pub fn route_overlay<T: Real>(base: &Tensor<T>, routes: &[usize], cols: usize, stride: usize) -> CliResult<RgbImage> {
    let mut img = to_rgb8(base)?;
    let rows = routes.len() / cols.max(1);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let r = (y as usize / stride).min(rows.saturating_sub(1));
        let c = (x as usize / stride).min(cols.saturating_sub(1));
        let colour = PALETTE[routes[r * cols + c] % PALETTE.len()];
        *px = Rgb(std::array::from_fn(|i| ((u16::from(px.0[i]) + u16::from(colour[i])) / 2) as u8));
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_the_8bit_grid() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::<f32>::from_f64(&[2, 3, 3], &(0..18).map(|i| (i * 13) as f64 / 255.0).collect::<Vec<_>>()).unwrap();
        let p = dir.path().join("x.png");
        save(&t, &p).unwrap();
        assert_eq!(load::<f32>(&p).unwrap(), t);
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert_eq!(load::<f32>(Path::new("/nonexistent/x.png")).unwrap_err().exit_code(), 4);
    }
}
