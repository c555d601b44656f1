//! Eye-appearance descriptors. Every descriptor is computed per eye and the
//! two eye blocks are concatenated left then right.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{GazeError, Result};
use crate::eyes::{EyeGeometryFeature, EyePair, CROP_COLS, CROP_ROWS};
use crate::imaging::{self, GrayImage, IntegralImage, Rect};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Descriptor {
    Intensity,
    Log,
    Lbp,
    Hog,
    Mhog,
}

impl Descriptor {
    pub const ALL: [Descriptor; 5] = [
        Descriptor::Intensity,
        Descriptor::Log,
        Descriptor::Lbp,
        Descriptor::Hog,
        Descriptor::Mhog,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Descriptor::Intensity => "intensity",
            Descriptor::Log => "log",
            Descriptor::Lbp => "lbp",
            Descriptor::Hog => "hog",
            Descriptor::Mhog => "mhog",
        }
    }

    /// Length of the per-eye block.
    pub fn eye_len(self) -> usize {
        match self {
            Descriptor::Intensity | Descriptor::Log => CROP_ROWS * CROP_COLS,
            Descriptor::Lbp => LBP_CELLS.0 * LBP_CELLS.1 * LBP_BINS,
            Descriptor::Hog => HogSpec::standard().len(),
            Descriptor::Mhog => HogSpec::multilevel().len(),
        }
    }

    pub fn len(self) -> usize {
        2 * self.eye_len()
    }
}

impl fmt::Display for Descriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Descriptor {
    type Err = GazeError;

    fn from_str(s: &str) -> Result<Self> {
        Descriptor::ALL
            .into_iter()
            .find(|d| d.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| GazeError::domain(format!("unknown descriptor '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub descriptor: Descriptor,
    pub values: Vec<f64>,
    /// Block boundaries: `[0, left_end, right_end]`.
    pub layout: Vec<usize>,
}

impl FeatureVector {
    fn from_eyes(descriptor: Descriptor, left: Vec<f64>, right: Vec<f64>) -> Self {
        let split = left.len();
        let mut values = left;
        values.extend(right);
        let len = values.len();
        Self {
            descriptor,
            values,
            layout: vec![0, split, len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockNorm {
    /// 2x2-cell blocks, stride one cell, L2 norm, clip at 0.2, renormalize.
    L2Hys,
    /// Each cell histogram divided by its sum.
    CellL1,
}

/// Orientation-histogram layout over a 30x100 crop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HogSpec {
    pub bins: usize,
    pub signed: bool,
    pub norm: BlockNorm,
    /// Cell grids `(rows, cols)`; one for plain HoG, several for mHoG.
    pub levels: Vec<(usize, usize)>,
}

pub const HOG_BINS: usize = 9;
const L2HYS_CLIP: f64 = 0.2;
const NORM_EPS: f64 = 1e-10;

impl HogSpec {
    pub fn standard() -> Self {
        Self {
            bins: HOG_BINS,
            signed: false,
            norm: BlockNorm::L2Hys,
            levels: vec![(3, 10)],
        }
    }

    pub fn multilevel() -> Self {
        Self {
            bins: HOG_BINS,
            signed: false,
            norm: BlockNorm::CellL1,
            levels: vec![(1, 1), (2, 2), (3, 5), (6, 10)],
        }
    }

    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        if self.bins < 2 {
            return Err(GazeError::domain("HoG needs at least 2 orientation bins"));
        }
        for &(r, c) in &self.levels {
            if r == 0 || c == 0 || rows % r != 0 || cols % c != 0 {
                return Err(GazeError::domain(format!(
                    "{r}x{c} cell grid does not tile {rows}x{cols}"
                )));
            }
        }
        Ok(())
    }

    /// Per-eye output length.
    pub fn len(&self) -> usize {
        self.levels
            .iter()
            .map(|&(r, c)| match self.norm {
                BlockNorm::L2Hys => (r - 1).max(1) * (c - 1).max(1) * 4 * self.bins,
                BlockNorm::CellL1 => r * c * self.bins,
            })
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-pixel orientation votes: the gradient magnitude split between the two
/// nearest bin centers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Vote {
    pub lo: usize,
    pub w_lo: f64,
    pub hi: usize,
    pub w_hi: f64,
}

pub(crate) fn orientation_votes(img: &GrayImage, bins: usize, signed: bool) -> Vec<Vote> {
    let (w, h) = (img.width() as isize, img.height() as isize);
    let range = if signed { 2.0 * std::f64::consts::PI } else { std::f64::consts::PI };
    let bin_width = range / bins as f64;
    let mut votes = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            let gx = img.get_clamped(x + 1, y) - img.get_clamped(x - 1, y);
            let gy = img.get_clamped(x, y + 1) - img.get_clamped(x, y - 1);
            let mag = gx.hypot(gy);
            let mut angle = gy.atan2(gx);
            if angle < 0.0 {
                angle += range;
            }
            if angle >= range {
                angle -= range;
            }
            // bin centers at (k + 0.5) * width, wrapping around
            let pos = angle / bin_width - 0.5;
            let floor = pos.floor();
            let frac = pos - floor;
            let lo = (floor as isize).rem_euclid(bins as isize) as usize;
            votes.push(Vote {
                lo,
                w_lo: mag * (1.0 - frac),
                hi: (lo + 1) % bins,
                w_hi: mag * frac,
            });
        }
    }
    votes
}

/// Per-bin integral histograms of the orientation votes.
pub struct IntegralHistogram {
    bins: Vec<IntegralImage>,
}

impl IntegralHistogram {
    pub fn new(img: &GrayImage, bins: usize, signed: bool) -> Self {
        let votes = orientation_votes(img, bins, signed);
        let n = votes.len();
        let mut planes = vec![vec![0.0; n]; bins];
        for (i, v) in votes.iter().enumerate() {
            planes[v.lo][i] += v.w_lo;
            planes[v.hi][i] += v.w_hi;
        }
        let bins = planes
            .iter()
            .map(|p| IntegralImage::from_values(img.width(), img.height(), p).expect("plane matches image"))
            .collect();
        Self { bins }
    }

    pub fn bins(&self) -> usize {
        self.bins.len()
    }

    /// Orientation histogram of an arbitrary rectangle.
    pub fn histogram(&self, rect: Rect) -> Result<Vec<f64>> {
        self.bins.iter().map(|b| b.box_sum(rect)).collect()
    }
}

fn cell_histograms(votes: &[Vote], width: usize, height: usize, rows: usize, cols: usize, bins: usize) -> Vec<Vec<f64>> {
    let (ch, cw) = (height / rows, width / cols);
    let mut cells = vec![vec![0.0; bins]; rows * cols];
    for y in 0..height {
        for x in 0..width {
            let v = votes[y * width + x];
            let cell = &mut cells[(y / ch) * cols + x / cw];
            cell[v.lo] += v.w_lo;
            cell[v.hi] += v.w_hi;
        }
    }
    cells
}

fn l2_normalize(v: &mut [f64]) {
    let norm = (v.iter().map(|x| x * x).sum::<f64>() + NORM_EPS * NORM_EPS).sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
}

fn l1_normalize(v: &mut [f64]) {
    let sum: f64 = v.iter().sum();
    if sum > NORM_EPS {
        v.iter_mut().for_each(|x| *x /= sum);
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
    }
}

fn l2hys_blocks(cells: &[Vec<f64>], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for by in 0..rows.saturating_sub(1).max(1) {
        for bx in 0..cols.saturating_sub(1).max(1) {
            let mut block = Vec::with_capacity(4 * cells[0].len());
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let (r, c) = ((by + dy).min(rows - 1), (bx + dx).min(cols - 1));
                block.extend_from_slice(&cells[r * cols + c]);
            }
            l2_normalize(&mut block);
            block.iter_mut().for_each(|x| *x = x.min(L2HYS_CLIP));
            l2_normalize(&mut block);
            out.extend(block);
        }
    }
    out
}

/// Plain HoG of one crop by direct per-cell accumulation.
pub fn hog_eye(img: &GrayImage, spec: &HogSpec) -> Result<Vec<f64>> {
    spec.validate(img.height(), img.width())?;
    let votes = orientation_votes(img, spec.bins, spec.signed);
    let mut out = Vec::with_capacity(spec.len());
    for &(rows, cols) in &spec.levels {
        let mut cells = cell_histograms(&votes, img.width(), img.height(), rows, cols, spec.bins);
        match spec.norm {
            BlockNorm::L2Hys => out.extend(l2hys_blocks(&cells, rows, cols)),
            BlockNorm::CellL1 => {
                for c in cells.iter_mut() {
                    l1_normalize(c);
                    out.extend_from_slice(c);
                }
            }
        }
    }
    Ok(out)
}

/// Multilevel HoG of one crop; every cell is a box sum over the per-bin
/// integral histograms.
pub fn mhog_eye(img: &GrayImage, spec: &HogSpec) -> Result<Vec<f64>> {
    spec.validate(img.height(), img.width())?;
    let ih = IntegralHistogram::new(img, spec.bins, spec.signed);
    let mut out = Vec::with_capacity(spec.len());
    for &(rows, cols) in &spec.levels {
        let (ch, cw) = (img.height() / rows, img.width() / cols);
        let mut cells = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let rect = Rect::new(c * cw, r * ch, cw, ch);
                cells.push(ih.bins.iter().map(|b| b.box_sum_unchecked(rect)).collect::<Vec<f64>>());
            }
        }
        match spec.norm {
            BlockNorm::CellL1 => {
                for c in cells.iter_mut() {
                    l1_normalize(c);
                    out.extend_from_slice(c);
                }
            }
            BlockNorm::L2Hys => out.extend(l2hys_blocks(&cells, rows, cols)),
        }
    }
    Ok(out)
}

fn standardize(img: &GrayImage) -> Vec<f64> {
    let px = img.pixels();
    let n = px.len() as f64;
    let mean = px.iter().sum::<f64>() / n;
    let sd = (px.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd < 1e-8 {
        return vec![0.0; px.len()];
    }
    px.iter().map(|p| (p - mean) / sd).collect()
}

pub fn feat_intensity(pair: &EyePair) -> FeatureVector {
    FeatureVector::from_eyes(Descriptor::Intensity, standardize(&pair.left), standardize(&pair.right))
}

pub fn feat_log(pair: &EyePair) -> FeatureVector {
    let k = imaging::default_log_kernel();
    FeatureVector::from_eyes(
        Descriptor::Log,
        imaging::convolve(&pair.left, &k).data,
        imaging::convolve(&pair.right, &k).data,
    )
}

pub const LBP_BINS: usize = 59;
/// Cell grid for LBP histograms (10x10 px cells on a 30x100 crop).
pub const LBP_CELLS: (usize, usize) = (3, 10);

/// Bin of each 8-bit code: the 58 uniform patterns (at most two circular
/// 0/1 transitions) in ascending code order, everything else in bin 58.
pub fn uniform_lbp_table() -> [u8; 256] {
    let mut table = [0u8; 256];
    let mut next = 0u8;
    for code in 0..256u32 {
        let rotated = (code >> 1) | ((code & 1) << 7);
        let transitions = (code ^ rotated).count_ones();
        if transitions <= 2 {
            table[code as usize] = next;
            next += 1;
        } else {
            table[code as usize] = (LBP_BINS - 1) as u8;
        }
    }
    debug_assert_eq!(next as usize, LBP_BINS - 1);
    table
}

/// Neighbor offsets, bit 0 first: east, then counter-clockwise.
const LBP_NEIGHBORS: [(isize, isize); 8] = [(1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1)];

/// LBP(8,1) code of an interior pixel: bit `i` set when neighbor `i` is
/// strictly brighter than the center.
pub fn lbp_code(img: &GrayImage, x: usize, y: usize) -> u8 {
    let c = img.get(x, y);
    let mut code = 0u8;
    for (i, (dx, dy)) in LBP_NEIGHBORS.iter().enumerate() {
        let n = img.get((x as isize + dx) as usize, (y as isize + dy) as usize);
        if n > c {
            code |= 1 << i;
        }
    }
    code
}

pub fn lbp_eye(img: &GrayImage) -> Vec<f64> {
    let table = uniform_lbp_table();
    let (rows, cols) = LBP_CELLS;
    let (ch, cw) = (img.height() / rows, img.width() / cols);
    let mut hist = vec![0.0; rows * cols * LBP_BINS];
    for y in 1..img.height() - 1 {
        for x in 1..img.width() - 1 {
            let cell = (y / ch).min(rows - 1) * cols + (x / cw).min(cols - 1);
            hist[cell * LBP_BINS + table[lbp_code(img, x, y) as usize] as usize] += 1.0;
        }
    }
    for cell in hist.chunks_mut(LBP_BINS) {
        l1_normalize(cell);
    }
    hist
}

pub fn feat_lbp(pair: &EyePair) -> FeatureVector {
    FeatureVector::from_eyes(Descriptor::Lbp, lbp_eye(&pair.left), lbp_eye(&pair.right))
}

pub fn feat_hog(pair: &EyePair) -> FeatureVector {
    let spec = HogSpec::standard();
    FeatureVector::from_eyes(
        Descriptor::Hog,
        hog_eye(&pair.left, &spec).expect("standard spec tiles the crop"),
        hog_eye(&pair.right, &spec).expect("standard spec tiles the crop"),
    )
}

pub fn feat_mhog(pair: &EyePair) -> FeatureVector {
    let spec = HogSpec::multilevel();
    FeatureVector::from_eyes(
        Descriptor::Mhog,
        mhog_eye(&pair.left, &spec).expect("multilevel spec tiles the crop"),
        mhog_eye(&pair.right, &spec).expect("multilevel spec tiles the crop"),
    )
}

pub fn extract(pair: &EyePair, descriptor: Descriptor) -> FeatureVector {
    match descriptor {
        Descriptor::Intensity => feat_intensity(pair),
        Descriptor::Log => feat_log(pair),
        Descriptor::Lbp => feat_lbp(pair),
        Descriptor::Hog => feat_hog(pair),
        Descriptor::Mhog => feat_mhog(pair),
    }
}

/// Appends the eye-geometry values to an already reduced feature.
pub fn augment(reduced: &[f64], geometry: &EyeGeometryFeature) -> Vec<f64> {
    let mut out = Vec::with_capacity(reduced.len() + EyeGeometryFeature::LEN);
    out.extend_from_slice(reduced);
    out.extend_from_slice(geometry.as_slice());
    out
}

/// Descriptor, then reduction, then the eye-geometry values.
pub fn extract_augmented(
    pair: &EyePair,
    geometry: &EyeGeometryFeature,
    descriptor: Descriptor,
    reduction: &crate::reduction::ReductionModel,
) -> Result<Vec<f64>> {
    let f = extract(pair, descriptor);
    Ok(augment(&reduction.project(&f.values)?, geometry))
}
