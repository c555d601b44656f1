//! Pixel-level primitives: grayscale rasters, resizing, convolution,
//! Laplacian-of-Gaussian kernels and integral images.
//!
//! Pixels are stored as `f64` in `[0, 1]` regardless of the bit depth of the
//! source, so normalization downstream is exact.

use std::path::Path;

use crate::error::{GazeError, Result};

/// LoG scale used for both the LoG descriptor and frame selection.
pub const LOG_SIGMA: f64 = 1.4;
/// LoG kernel side used with [`LOG_SIGMA`].
pub const LOG_SIDE: usize = 9;

/// A normalized grayscale image, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(GazeError::DimensionMismatch {
                expected: width * height,
                got: pixels.len(),
            });
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(GazeError::domain(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            pixels: vec![value.clamp(0.0, 1.0); width * height],
        }
    }

    /// Builds an image from `f(x, y)`; values are clamped into `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let v = f(x, y);
                pixels.push(if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 });
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Pixel lookup with replicate (clamp-to-edge) semantics.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y)
    }

    /// Copies rows `[top, top + rows)`.
    pub fn rows(&self, top: usize, rows: usize) -> Result<GrayImage> {
        if top + rows > self.height {
            return Err(GazeError::domain(format!(
                "row range {top}..{} exceeds height {}",
                top + rows,
                self.height
            )));
        }
        let start = top * self.width;
        Ok(GrayImage {
            width: self.width,
            height: rows,
            pixels: self.pixels[start..start + rows * self.width].to_vec(),
        })
    }

    /// Stacks `self` above `other`; widths must agree.
    pub fn vstack(&self, other: &GrayImage) -> Result<GrayImage> {
        if self.width != other.width {
            return Err(GazeError::DimensionMismatch {
                expected: self.width,
                got: other.width,
            });
        }
        let mut pixels = self.pixels.clone();
        pixels.extend_from_slice(&other.pixels);
        Ok(GrayImage {
            width: self.width,
            height: self.height + other.height,
            pixels,
        })
    }

    /// Rotates by 180 degrees.
    pub fn rotate180(&self) -> GrayImage {
        let mut pixels = self.pixels.clone();
        pixels.reverse();
        GrayImage {
            width: self.width,
            height: self.height,
            pixels,
        }
    }

    /// Applies `a * p + b` to every pixel. Fails if any result leaves `[0, 1]`.
    pub fn affine(&self, a: f64, b: f64) -> Result<GrayImage> {
        GrayImage::new(
            self.width,
            self.height,
            self.pixels.iter().map(|p| a * p + b).collect(),
        )
    }

    pub fn to_luma8(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([(self.get(x as usize, y as usize) * 255.0).round() as u8])
        })
    }

    pub fn from_luma8(img: &image::GrayImage) -> GrayImage {
        GrayImage {
            width: img.width() as usize,
            height: img.height() as usize,
            pixels: img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect(),
        }
    }
}

/// Unbounded real raster, e.g. a filter response.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Raster {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

impl From<&GrayImage> for Raster {
    fn from(img: &GrayImage) -> Self {
        Raster {
            width: img.width,
            height: img.height,
            data: img.pixels.clone(),
        }
    }
}

/// Square convolution kernel with odd side length.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    side: usize,
    taps: Vec<f64>,
}

impl Kernel {
    pub fn new(side: usize, taps: Vec<f64>) -> Result<Self> {
        if side % 2 == 0 {
            return Err(GazeError::domain(format!("kernel side {side} is not odd")));
        }
        if taps.len() != side * side {
            return Err(GazeError::DimensionMismatch {
                expected: side * side,
                got: taps.len(),
            });
        }
        if taps.iter().any(|t| !t.is_finite()) {
            return Err(GazeError::domain("kernel taps must be finite"));
        }
        Ok(Self { side, taps })
    }

    pub fn identity(side: usize) -> Result<Self> {
        let mut taps = vec![0.0; side * side];
        if side % 2 == 1 {
            taps[side * side / 2] = 1.0;
        }
        Kernel::new(side, taps)
    }

    pub fn box_filter(side: usize) -> Result<Self> {
        let n = (side * side) as f64;
        Kernel::new(side, vec![1.0 / n; side * side])
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    /// Tap at offset `(dx, dy)` from the center.
    pub fn at(&self, dx: isize, dy: isize) -> f64 {
        let r = (self.side / 2) as isize;
        self.taps[((dy + r) as usize) * self.side + (dx + r) as usize]
    }
}

/// ITU-R BT.601 luma of an 8-bit RGB image.
pub fn to_gray(rgb: &image::RgbImage) -> GrayImage {
    let pixels = rgb
        .pixels()
        .map(|p| {
            let [r, g, b] = p.0;
            let luma = (0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b)) / 255.0;
            luma.clamp(0.0, 1.0)
        })
        .collect();
    GrayImage {
        width: rgb.width() as usize,
        height: rgb.height() as usize,
        pixels,
    }
}

/// Reads an 8-bit grayscale or RGB PNG into the normalized domain.
pub fn load_png(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => GazeError::io(path, e),
        source => GazeError::Image {
            path: path.to_path_buf(),
            source,
        },
    })?;
    Ok(match img {
        image::DynamicImage::ImageLuma8(g) => GrayImage::from_luma8(&g),
        other => to_gray(&other.to_rgb8()),
    })
}

pub fn save_png(img: &GrayImage, path: &Path) -> Result<()> {
    img.to_luma8().save(path).map_err(|source| match source {
        image::ImageError::IoError(e) => GazeError::io(path, e),
        source => GazeError::Image {
            path: path.to_path_buf(),
            source,
        },
    })
}

/// Bilinear resize with pixel-center alignment and edge clamping.
pub fn resize_bilinear(img: &GrayImage, new_w: usize, new_h: usize) -> Result<GrayImage> {
    if new_w == 0 || new_h == 0 {
        return Err(GazeError::domain(format!(
            "resize target {new_w}x{new_h} has a zero dimension"
        )));
    }
    if img.width == 0 || img.height == 0 {
        return Err(GazeError::domain("cannot resize an empty image"));
    }
    let sx = img.width as f64 / new_w as f64;
    let sy = img.height as f64 / new_h as f64;
    let max_x = (img.width - 1) as f64;
    let max_y = (img.height - 1) as f64;

    let mut pixels = Vec::with_capacity(new_w * new_h);
    for y in 0..new_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let ty = fy - y0 as f64;
        for x in 0..new_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let tx = fx - x0 as f64;
            let top = img.get(x0, y0) * (1.0 - tx) + img.get(x1, y0) * tx;
            let bottom = img.get(x0, y1) * (1.0 - tx) + img.get(x1, y1) * tx;
            pixels.push((top * (1.0 - ty) + bottom * ty).clamp(0.0, 1.0));
        }
    }
    Ok(GrayImage {
        width: new_w,
        height: new_h,
        pixels,
    })
}

/// 2D convolution with replicate padding; output has the input dimensions.
pub fn convolve(img: &GrayImage, kernel: &Kernel) -> Raster {
    convolve_raster(&Raster::from(img), kernel)
}

pub fn convolve_raster(src: &Raster, kernel: &Kernel) -> Raster {
    let r = (kernel.side / 2) as isize;
    let (w, h) = (src.width as isize, src.height as isize);
    let mut data = Vec::with_capacity(src.data.len());
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ky in -r..=r {
                // convolution flips the kernel
                let sy = (y - ky).clamp(0, h - 1) as usize;
                let row = &src.data[sy * src.width..(sy + 1) * src.width];
                for kx in -r..=r {
                    let sx = (x - kx).clamp(0, w - 1) as usize;
                    acc += kernel.at(kx, ky) * row[sx];
                }
            }
            data.push(acc);
        }
    }
    Raster {
        width: src.width,
        height: src.height,
        data,
    }
}

/// Analytic Laplacian of a 2D Gaussian at `(x, y)`.
pub fn log_value(sigma: f64, x: f64, y: f64) -> f64 {
    let s2 = sigma * sigma;
    let r2 = x * x + y * y;
    (r2 - 2.0 * s2) / (2.0 * std::f64::consts::PI * s2 * s2 * s2) * (-r2 / (2.0 * s2)).exp()
}

/// Discretized LoG, mean-subtracted so the taps sum to zero.
pub fn log_kernel(sigma: f64, side: usize) -> Result<Kernel> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(GazeError::domain(format!("LoG sigma must be positive, got {sigma}")));
    }
    if side % 2 == 0 {
        return Err(GazeError::domain(format!("kernel side {side} is not odd")));
    }
    let r = (side / 2) as isize;
    let mut taps = Vec::with_capacity(side * side);
    for y in -r..=r {
        for x in -r..=r {
            taps.push(log_value(sigma, x as f64, y as f64));
        }
    }
    let mean = taps.iter().sum::<f64>() / taps.len() as f64;
    taps.iter_mut().for_each(|t| *t -= mean);
    // distribute the residual rounding error onto the center tap
    let residual: f64 = taps.iter().sum();
    taps[(side * side) / 2] -= residual;
    Kernel::new(side, taps)
}

/// The LoG kernel shared by descriptors and frame selection.
pub fn default_log_kernel() -> Kernel {
    log_kernel(LOG_SIGMA, LOG_SIDE).expect("constant LoG parameters are valid")
}

pub fn mean_intensity(img: &GrayImage) -> f64 {
    if img.pixels.is_empty() {
        return 0.0;
    }
    img.pixels.iter().sum::<f64>() / img.pixels.len() as f64
}

/// Axis-aligned pixel rectangle `[x, x + w) x [y, y + h)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub const fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }
}

/// Summed-area table with a zero first row and column.
#[derive(Clone, Debug)]
pub struct IntegralImage {
    width: usize,
    height: usize,
    table: Vec<f64>,
}

impl IntegralImage {
    /// Builds the table over a `width x height` row-major array of values.
    pub fn from_values(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        if values.len() != width * height {
            return Err(GazeError::DimensionMismatch {
                expected: width * height,
                got: values.len(),
            });
        }
        let stride = width + 1;
        let mut table = vec![0.0; stride * (height + 1)];
        for y in 0..height {
            let mut row_sum = 0.0;
            for x in 0..width {
                row_sum += values[y * width + x];
                table[(y + 1) * stride + x + 1] = table[y * stride + x + 1] + row_sum;
            }
        }
        Ok(Self {
            width,
            height,
            table,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Cumulative sum over `[0, x) x [0, y)`.
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.table[y * (self.width + 1) + x]
    }

    pub fn box_sum(&self, rect: Rect) -> Result<f64> {
        if rect.x + rect.w > self.width || rect.y + rect.h > self.height {
            return Err(GazeError::domain(format!(
                "rect {rect:?} exceeds {}x{}",
                self.width, self.height
            )));
        }
        Ok(self.box_sum_unchecked(rect))
    }

    #[inline]
    pub(crate) fn box_sum_unchecked(&self, rect: Rect) -> f64 {
        let (x1, y1) = (rect.x + rect.w, rect.y + rect.h);
        self.at(x1, y1) - self.at(rect.x, y1) - self.at(x1, rect.y) + self.at(rect.x, rect.y)
    }
}

pub fn integral_image(img: &GrayImage) -> IntegralImage {
    IntegralImage::from_values(img.width, img.height, &img.pixels)
        .expect("image buffer length matches its dimensions")
}
