//! Overlapping patch grids.
//!
//! An image is cut into `D x D` patches on a regular grid with stride
//! `D - overlap`. Reassembly blends every covering patch with a separable
//! tent weight that falls off linearly with distance from the patch centre,
//! then normalises by the total weight at the pixel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Keeps tent weights strictly positive at patch edges.
const TENT_EPS: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGridSpec {
    pub patch_size: usize,
    pub overlap: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl PatchGridSpec {
    pub fn new(patch_size: usize, overlap: usize, height: usize, width: usize, channels: usize) -> Result<Self> {
        let spec = PatchGridSpec {
            patch_size,
            overlap,
            height,
            width,
            channels,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Grid for an image tensor `[H, W, C]`.
    pub fn for_image<T: Real>(patch_size: usize, overlap: usize, image: &Tensor<T>) -> Result<Self> {
        match *image.shape() {
            [h, w, c] => Self::new(patch_size, overlap, h, w, c),
            ref s => Err(Error::dim("patch grid", format!("image must be [H,W,C], got {s:?}"))),
        }
    }

    pub fn stride(&self) -> usize {
        self.patch_size - self.overlap
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.patch_size;
        if d == 0 || self.overlap >= d {
            return Err(Error::Config(format!(
                "patch grid needs 0 <= overlap < patch_size, got overlap {} with patch_size {d}",
                self.overlap
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("patch grid needs at least one channel".into()));
        }
        let stride = self.stride();
        for (name, extent) in [("height", self.height), ("width", self.width)] {
            if extent < d || !(extent - d).is_multiple_of(stride) {
                return Err(Error::Config(format!(
                    "image {name} {extent} does not tile with patch_size {d} and stride {stride}: \
                     ({name} - patch_size) must be a non-negative multiple of the stride"
                )));
            }
        }
        Ok(())
    }

    pub fn grid_rows(&self) -> usize {
        (self.height - self.patch_size) / self.stride() + 1
    }

    pub fn grid_cols(&self) -> usize {
        (self.width - self.patch_size) / self.stride() + 1
    }

    pub fn patch_count(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    /// Largest extent `<= extent` that tiles with this patch size and overlap.
    pub fn fit_extent(extent: usize, patch_size: usize, overlap: usize) -> Option<usize> {
        if extent < patch_size || overlap >= patch_size {
            return None;
        }
        let stride = patch_size - overlap;
        Some(patch_size + (extent - patch_size) / stride * stride)
    }

    /// Unnormalised tent weight of a patch at offset `k` along one axis.
    fn tent(&self, k: usize) -> f64 {
        let d = self.patch_size as f64;
        let center = (d - 1.0) / 2.0;
        1.0 - (k as f64 - center).abs() / (d / 2.0 + TENT_EPS)
    }

    /// Grid cells covering `(y, x)` together with their normalised blend
    /// weights. The weights sum to one.
    pub fn blend_weights(&self, y: usize, x: usize) -> Vec<((usize, usize), f64)> {
        let stride = self.stride();
        let covering = |p: usize, cells: usize| -> Vec<usize> {
            (0..cells)
                .filter(|&c| c * stride <= p && p < c * stride + self.patch_size)
                .collect()
        };
        let rows = covering(y, self.grid_rows());
        let cols = covering(x, self.grid_cols());
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for &r in &rows {
            for &c in &cols {
                let w = self.tent(y - r * stride) * self.tent(x - c * stride);
                out.push(((r, c), w));
            }
        }
        let total: f64 = out.iter().map(|(_, w)| w).sum();
        for (_, w) in &mut out {
            *w /= total;
        }
        out
    }
}

/// One patch cut from an image, with its position on the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord<T> {
    /// `[D, D, C]`
    pub data: Tensor<T>,
    pub grid_pos: (usize, usize),
    /// Top-left pixel; always `grid_pos * stride`.
    pub pixel_origin: (usize, usize),
}

/// Cuts `image` into patches in row-major grid order.
pub fn split<T: Real>(image: &Tensor<T>, spec: &PatchGridSpec) -> Result<Vec<PatchRecord<T>>> {
    spec.validate()?;
    if image.shape() != [spec.height, spec.width, spec.channels] {
        return Err(Error::dim(
            "split",
            format!(
                "image {:?} does not match grid {}x{}x{}",
                image.shape(),
                spec.height,
                spec.width,
                spec.channels
            ),
        ));
    }
    let (d, c, stride) = (spec.patch_size, spec.channels, spec.stride());
    let src = image.data();
    let mut out = Vec::with_capacity(spec.patch_count());
    for r in 0..spec.grid_rows() {
        for col in 0..spec.grid_cols() {
            let (y0, x0) = (r * stride, col * stride);
            let mut data = Vec::with_capacity(d * d * c);
            for y in y0..y0 + d {
                let start = (y * spec.width + x0) * c;
                data.extend_from_slice(&src[start..start + d * c]);
            }
            out.push(PatchRecord {
                data: Tensor::new(&[d, d, c], data)?,
                grid_pos: (r, col),
                pixel_origin: (y0, x0),
            });
        }
    }
    Ok(out)
}

/// Blends patches back into a `[H, W, C]` image.
pub fn assemble<T: Real>(patches: &[PatchRecord<T>], spec: &PatchGridSpec) -> Result<Tensor<T>> {
    spec.validate()?;
    let (d, c, stride) = (spec.patch_size, spec.channels, spec.stride());
    let (rows, cols) = (spec.grid_rows(), spec.grid_cols());
    let mut cells: Vec<Option<&PatchRecord<T>>> = vec![None; rows * cols];
    for p in patches {
        let (r, col) = p.grid_pos;
        if r >= rows || col >= cols {
            return Err(Error::Contract(format!("patch at grid ({r}, {col}) lies outside a {rows}x{cols} grid")));
        }
        if p.data.shape() != [d, d, c] {
            return Err(Error::dim("assemble", format!("patch shape {:?}, expected [{d},{d},{c}]", p.data.shape())));
        }
        cells[r * cols + col] = Some(p);
    }

    let tent: Vec<f64> = (0..d).map(|k| spec.tent(k)).collect();
    let mut num = vec![0.0f64; spec.height * spec.width * c];
    let mut den = vec![0.0f64; spec.height * spec.width];
    for r in 0..rows {
        for col in 0..cols {
            let p = cells[r * cols + col].ok_or(Error::IncompleteGrid { row: r, col })?;
            let (y0, x0) = (r * stride, col * stride);
            let pd = p.data.data();
            for ky in 0..d {
                for kx in 0..d {
                    let w = tent[ky] * tent[kx];
                    let pix = (y0 + ky) * spec.width + x0 + kx;
                    den[pix] += w;
                    let src = &pd[(ky * d + kx) * c..(ky * d + kx + 1) * c];
                    for (acc, &v) in num[pix * c..(pix + 1) * c].iter_mut().zip(src) {
                        *acc += w * v.to_f64_lossy();
                    }
                }
            }
        }
    }
    let data = num
        .iter()
        .enumerate()
        .map(|(i, &v)| T::from_f64(v / den[i / c]))
        .collect();
    Tensor::new(&[spec.height, spec.width, spec.channels], data)
}

/// Top-left crop of an `[H, W, C]` image to the largest extents that tile.
pub fn crop_to_fit<T: Real>(image: &Tensor<T>, patch_size: usize, overlap: usize) -> Result<Tensor<T>> {
    let [h, w, c] = <[usize; 3]>::try_from(image.shape())
        .map_err(|_| Error::dim("crop_to_fit", format!("image must be [H,W,C], got {:?}", image.shape())))?;
    let too_small = || Error::Config(format!("image {h}x{w} is smaller than patch size {patch_size}"));
    let nh = PatchGridSpec::fit_extent(h, patch_size, overlap).ok_or_else(too_small)?;
    let nw = PatchGridSpec::fit_extent(w, patch_size, overlap).ok_or_else(too_small)?;
    let mut data = Vec::with_capacity(nh * nw * c);
    for y in 0..nh {
        data.extend_from_slice(&image.data()[y * w * c..(y * w + nw) * c]);
    }
    Tensor::new(&[nh, nw, c], data)
}
