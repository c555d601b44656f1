//! Eye localization, canonical cropping and blink detection.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{GazeError, Result};
use crate::imaging::{resize_bilinear, GrayImage};

pub const CROP_ROWS: usize = 30;
pub const CROP_COLS: usize = 100;
/// Side of the square patch a detector box is resampled to before cropping.
pub const NORMALIZED_SIDE: usize = 100;
/// Pupil row in the normalized patch: round(2/3 * 100).
pub const PUPIL_ROW: usize = 67;
/// Minimum box side as a fraction of frame height.
pub const MIN_BOX_FRACTION: f64 = 0.03;
/// Maximum vertical center offset between paired boxes, as a fraction of the
/// taller box.
pub const SYMMETRY_TOLERANCE: f64 = 0.5;
pub const BLINK_WINDOW: usize = 20;
/// Blink peaks must exceed the local baseline by this many local standard
/// deviations...
pub const BLINK_SIGMAS: f64 = 2.0;
/// ...and by at least this much absolute mean intensity.
pub const BLINK_MIN_DELTA: f64 = 0.01;
pub const BLINK_SKIP_BEFORE: usize = 3;
pub const BLINK_SKIP_AFTER: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EyeSide {
    Left,
    Right,
}

impl fmt::Display for EyeSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EyeSide::Left => "left",
            EyeSide::Right => "right",
        })
    }
}

impl FromStr for EyeSide {
    type Err = GazeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "left" | "l" => Ok(EyeSide::Left),
            "right" | "r" => Ok(EyeSide::Right),
            other => Err(GazeError::domain(format!("unknown eye side '{other}'"))),
        }
    }
}

/// Detector output in frame pixels. `side` is the subject's eye.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub side: EyeSide,
}

impl BoundingBox {
    /// Rounds a real-valued box and clips it to the frame; `None` when
    /// nothing remains.
    pub fn clipped(x: f64, y: f64, w: f64, h: f64, side: EyeSide, frame_w: usize, frame_h: usize) -> Option<Self> {
        let x0 = x.round().max(0.0) as usize;
        let y0 = y.round().max(0.0) as usize;
        let x1 = ((x + w).round().max(0.0) as usize).min(frame_w);
        let y1 = ((y + h).round().max(0.0) as usize).min(frame_h);
        (x1 > x0 && y1 > y0).then(|| BoundingBox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
            side,
        })
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x as f64 + self.w as f64 / 2.0, self.y as f64 + self.h as f64 / 2.0)
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn fits(&self, frame_w: usize, frame_h: usize) -> bool {
        self.w > 0 && self.h > 0 && self.x + self.w <= frame_w && self.y + self.h <= frame_h
    }
}

/// The canonical pair of 30x100 eye crops.
#[derive(Clone, Debug, PartialEq)]
pub struct EyePair {
    pub left: GrayImage,
    pub right: GrayImage,
    pub left_box: BoundingBox,
    pub right_box: BoundingBox,
}

impl EyePair {
    pub fn new(left: GrayImage, right: GrayImage, left_box: BoundingBox, right_box: BoundingBox) -> Result<Self> {
        for img in [&left, &right] {
            if img.width() != CROP_COLS || img.height() != CROP_ROWS {
                return Err(GazeError::domain(format!(
                    "eye crop must be {CROP_ROWS}x{CROP_COLS}, got {}x{}",
                    img.height(),
                    img.width()
                )));
            }
        }
        Ok(Self {
            left,
            right,
            left_box,
            right_box,
        })
    }

    /// Mean intensity over both crops.
    pub fn mean_intensity(&self) -> f64 {
        (crate::imaging::mean_intensity(&self.left) + crate::imaging::mean_intensity(&self.right)) / 2.0
    }
}

/// Box centers, sizes and the inter-eye offset, in frame pixels:
/// `[lx, ly, rx, ry, lw, lh, rw, rh, dx, dy]` with `d = left - right`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EyeGeometryFeature(pub [f64; 10]);

impl EyeGeometryFeature {
    pub const LEN: usize = 10;

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn eye_geometry_feature(left: &BoundingBox, right: &BoundingBox) -> EyeGeometryFeature {
    let (lx, ly) = left.center();
    let (rx, ry) = right.center();
    EyeGeometryFeature([
        lx,
        ly,
        rx,
        ry,
        left.w as f64,
        left.h as f64,
        right.w as f64,
        right.h as f64,
        lx - rx,
        ly - ry,
    ])
}

/// Selects the most plausible (left, right) pair among detector candidates.
///
/// Boxes smaller than 3% of the frame height are dropped. A pair must be
/// vertically aligned within half the taller box, and the subject's right eye
/// must appear to the image left of the left eye. The most level pair wins;
/// ties go to the larger combined area.
pub fn localize_eyes(frame_w: usize, frame_h: usize, candidates: &[BoundingBox]) -> Result<(BoundingBox, BoundingBox)> {
    let s_min = MIN_BOX_FRACTION * frame_h as f64;
    let usable: Vec<&BoundingBox> = candidates
        .iter()
        .filter(|b| b.fits(frame_w, frame_h) && (b.w.min(b.h) as f64) >= s_min)
        .collect();
    let lefts = usable.iter().filter(|b| b.side == EyeSide::Left);
    let mut best: Option<(f64, std::cmp::Reverse<usize>, BoundingBox, BoundingBox)> = None;
    for l in lefts {
        for r in usable.iter().filter(|b| b.side == EyeSide::Right) {
            let (lx, ly) = l.center();
            let (rx, ry) = r.center();
            let dy = (ly - ry).abs();
            if dy > SYMMETRY_TOLERANCE * l.h.max(r.h) as f64 || rx >= lx {
                continue;
            }
            let key = (dy, std::cmp::Reverse(l.area() + r.area()), **l, **r);
            let better = match &best {
                None => true,
                Some(b) => {
                    key.0
                        .total_cmp(&b.0)
                        .then_with(|| key.1.cmp(&b.1))
                        .then_with(|| key.2.cmp(&b.2))
                        .then_with(|| key.3.cmp(&b.3))
                        .is_lt()
                }
            };
            if better {
                best = Some(key);
            }
        }
    }
    best.map(|(_, _, l, r)| (l, r))
        .ok_or(GazeError::DetectionFailure {
            candidates: candidates.len(),
        })
}

/// Resamples the box to 100x100 and keeps the 30 rows centered on the pupil
/// row (rows 52..=81), all columns.
pub fn crop_eye(frame: &GrayImage, bbox: &BoundingBox) -> Result<GrayImage> {
    if !bbox.fits(frame.width(), frame.height()) {
        return Err(GazeError::domain(format!(
            "box {bbox:?} exceeds frame {}x{}",
            frame.width(),
            frame.height()
        )));
    }
    let mut patch = Vec::with_capacity(bbox.w * bbox.h);
    for y in bbox.y..bbox.y + bbox.h {
        let start = y * frame.width() + bbox.x;
        patch.extend_from_slice(&frame.pixels()[start..start + bbox.w]);
    }
    let patch = GrayImage::new(bbox.w, bbox.h, patch)?;
    let normalized = resize_bilinear(&patch, NORMALIZED_SIDE, NORMALIZED_SIDE)?;
    normalized.rows(PUPIL_ROW - CROP_ROWS / 2, CROP_ROWS)
}

/// Localizes and crops both eyes of a frame.
pub fn extract_pair(frame: &GrayImage, candidates: &[BoundingBox]) -> Result<EyePair> {
    let (left_box, right_box) = localize_eyes(frame.width(), frame.height(), candidates)?;
    EyePair::new(crop_eye(frame, &left_box)?, crop_eye(frame, &right_box)?, left_box, right_box)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Blink {
    pub peak: usize,
    /// Frames to drop: `peak - 3 ..= peak + 2`, clipped to the series.
    pub skip: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BlinkReport {
    pub blinks: Vec<Blink>,
    pub warning: Option<String>,
}

impl BlinkReport {
    pub fn skipped(&self) -> std::collections::BTreeSet<usize> {
        self.blinks.iter().flat_map(|b| b.skip.iter().copied()).collect()
    }
}

/// Flags mean-intensity peaks caused by the pupil vanishing during a blink.
///
/// The baseline for frame `p` is the 20-frame window centered on `p` with the
/// frames `p-3..=p+3` left out, so a blink does not inflate its own baseline.
/// A frame is a candidate when it exceeds the baseline mean by more than
/// `max(2 * std, BLINK_MIN_DELTA)`; each run of candidates yields one peak at
/// the middle of its maximum.
pub fn detect_blinks(series: &[f64]) -> BlinkReport {
    let n = series.len();
    if n < BLINK_WINDOW {
        return BlinkReport {
            blinks: Vec::new(),
            warning: Some(format!("series of {n} frames is shorter than the {BLINK_WINDOW}-frame window")),
        };
    }
    let half = BLINK_WINDOW / 2;
    let candidate: Vec<bool> = (0..n)
        .map(|p| {
            let lo = p.saturating_sub(half);
            let hi = (p + half).min(n);
            let vals: Vec<f64> = (lo..hi)
                .filter(|&j| j.abs_diff(p) > BLINK_SKIP_BEFORE)
                .map(|j| series[j])
                .collect();
            if vals.is_empty() {
                return false;
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            series[p] - mean > (BLINK_SIGMAS * var.sqrt()).max(BLINK_MIN_DELTA)
        })
        .collect();

    let mut blinks = Vec::new();
    let mut i = 0;
    while i < n {
        if !candidate[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && candidate[i] {
            i += 1;
        }
        let run = start..i;
        let top = run.clone().map(|j| series[j]).fold(f64::NEG_INFINITY, f64::max);
        let first = run.clone().find(|&j| series[j] == top).expect("run is non-empty");
        let last = run.clone().rev().find(|&j| series[j] == top).expect("run is non-empty");
        let peak = (first + last) / 2;
        let skip = (peak.saturating_sub(BLINK_SKIP_BEFORE)..=(peak + BLINK_SKIP_AFTER).min(n - 1)).collect();
        blinks.push(Blink { peak, skip });
    }
    BlinkReport { blinks, warning: None }
}

/// External detector speaking a line protocol over stdin/stdout: one frame
/// path per request line; the reply is zero or more `side,x,y,w,h` lines
/// followed by an empty line.
pub struct SubprocessDetector {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl SubprocessDetector {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| GazeError::io(program, e))?;
        let stdin = child.stdin.take().expect("stdin is piped");
        let stdout = BufReader::new(child.stdout.take().expect("stdout is piped"));
        Ok(Self { child, stdin, stdout })
    }

    pub fn detect(&mut self, frame: &Path) -> Result<Vec<BoundingBox>> {
        writeln!(self.stdin, "{}", frame.display()).map_err(|e| GazeError::io(frame, e))?;
        self.stdin.flush().map_err(|e| GazeError::io(frame, e))?;
        let mut boxes = Vec::new();
        loop {
            let mut line = String::new();
            let read = self.stdout.read_line(&mut line).map_err(|e| GazeError::io(frame, e))?;
            let line = line.trim();
            if read == 0 || line.is_empty() {
                if read == 0 && boxes.is_empty() {
                    return Err(GazeError::Format("detector closed its output".into()));
                }
                break;
            }
            boxes.push(parse_detection(line)?);
        }
        Ok(boxes)
    }
}

impl Drop for SubprocessDetector {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn parse_detection(line: &str) -> Result<BoundingBox> {
    let parts: Vec<&str> = line.split(',').map(str::trim).collect();
    if parts.len() != 5 {
        return Err(GazeError::Format(format!("detection line '{line}' does not have 5 fields")));
    }
    let num = |s: &str| -> Result<usize> { s.parse().map_err(|_| GazeError::Format(format!("bad number '{s}' in '{line}'"))) };
    Ok(BoundingBox {
        side: parts[0].parse()?,
        x: num(parts[1])?,
        y: num(parts[2])?,
        w: num(parts[3])?,
        h: num(parts[4])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(x: usize, y: usize, w: usize, h: usize, side: EyeSide) -> BoundingBox {
        BoundingBox { x, y, w, h, side }
    }

    const FW: usize = 1280;
    const FH: usize = 720;

    #[test]
    fn nostril_box_rejected_by_size() {
        let right = bx(500, 300, 120, 120, EyeSide::Right);
        let left = bx(700, 305, 120, 120, EyeSide::Left);
        // a nostril patch level with the right eye, smaller than 3% of 720
        let nostril = bx(560, 300, 15, 15, EyeSide::Left);
        let (l, r) = localize_eyes(FW, FH, &[right, nostril, left]).unwrap();
        assert_eq!((l, r), (left, right));
    }

    #[test]
    fn lone_mouth_box_rejected() {
        let right = bx(500, 300, 120, 120, EyeSide::Right);
        let left = bx(700, 305, 120, 120, EyeSide::Left);
        let mouth = bx(580, 520, 160, 90, EyeSide::Right);
        let (l, r) = localize_eyes(FW, FH, &[mouth, left, right]).unwrap();
        assert_eq!((l, r), (left, right));
        // with only the mouth as a right-eye candidate nothing pairs up
        assert!(matches!(
            localize_eyes(FW, FH, &[mouth, left]),
            Err(GazeError::DetectionFailure { candidates: 2 })
        ));
    }

    #[test]
    fn symmetric_pair_preferred() {
        let r1 = bx(500, 300, 100, 100, EyeSide::Right);
        let l1 = bx(700, 380, 100, 100, EyeSide::Left); // dy = 80 > 50
        let r2 = bx(200, 100, 90, 90, EyeSide::Right);
        let l2 = bx(400, 110, 90, 90, EyeSide::Left);
        let (l, r) = localize_eyes(FW, FH, &[r1, l1, r2, l2]).unwrap();
        assert_eq!((l, r), (l2, r2));
    }

    #[test]
    fn mirrored_pair_rejected() {
        // right-eye box on the image right of the left-eye box
        let r = bx(700, 300, 100, 100, EyeSide::Right);
        let l = bx(500, 300, 100, 100, EyeSide::Left);
        assert!(localize_eyes(FW, FH, &[r, l]).is_err());
    }

    #[test]
    fn crop_geometry() {
        let frame = GrayImage::filled(200, 150, 0.4);
        let c = crop_eye(&frame, &bx(10, 20, 57, 41, EyeSide::Left)).unwrap();
        assert_eq!((c.width(), c.height()), (CROP_COLS, CROP_ROWS));
        assert!(c.pixels().iter().all(|&p| (p - 0.4).abs() < 1e-12));
        assert!(crop_eye(&frame, &bx(190, 0, 20, 20, EyeSide::Left)).is_err());
    }

    #[test]
    fn crop_of_100_box_keeps_rows_52_to_81() {
        let frame = GrayImage::from_fn(100, 100, |_, y| y as f64 / 100.0);
        let c = crop_eye(&frame, &bx(0, 0, 100, 100, EyeSide::Right)).unwrap();
        for r in 0..CROP_ROWS {
            assert!((c.get(0, r) - (52 + r) as f64 / 100.0).abs() < 1e-12);
        }
    }

    #[test]
    fn iris_lands_on_crop_center_row() {
        // dark disk at (w/2, 2h/3) of a 60x90 box, rendered with anti-aliasing
        let (bx0, by0, w, h) = (30usize, 20usize, 60usize, 90usize);
        let (cx, cy) = (bx0 as f64 + w as f64 / 2.0, by0 as f64 + 2.0 * h as f64 / 3.0);
        let frame = GrayImage::from_fn(160, 140, |x, y| {
            let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
            0.9 - 0.8 * (6.0 - d + 0.5).clamp(0.0, 1.0)
        });
        let crop = crop_eye(&frame, &bx(bx0, by0, w, h, EyeSide::Left)).unwrap();
        // darkness-weighted centroid
        let (mut sw, mut sy, mut sx) = (0.0, 0.0, 0.0);
        for y in 0..crop.height() {
            for x in 0..crop.width() {
                let wgt = 0.9 - crop.get(x, y);
                sw += wgt;
                sy += wgt * (y as f64 + 0.5);
                sx += wgt * (x as f64 + 0.5);
            }
        }
        assert!((sy / sw - 15.0).abs() <= 2.0, "row centroid {}", sy / sw);
        assert!((sx / sw - 50.0).abs() <= 2.0, "col centroid {}", sx / sw);
    }

    #[test]
    fn geometry_feature_layout() {
        let a = bx(100, 50, 40, 30, EyeSide::Left);
        let f = eye_geometry_feature(&a, &BoundingBox { side: EyeSide::Right, ..a });
        assert_eq!(f.as_slice().len(), EyeGeometryFeature::LEN);
        assert_eq!((f.0[8], f.0[9]), (0.0, 0.0));
        let right = bx(0, 50, 40, 30, EyeSide::Right);
        let f = eye_geometry_feature(&a, &right);
        assert_eq!((f.0[8], f.0[9]), (100.0, 0.0));
        assert_eq!(&f.0[..8], &[120.0, 65.0, 20.0, 65.0, 40.0, 30.0, 40.0, 30.0]);
    }

    fn with_bump(series: &mut [f64], peak: usize, height: f64) {
        for j in peak - 2..=peak + 2 {
            series[j] += height;
        }
    }

    #[test]
    fn constant_series_has_no_blinks() {
        let r = detect_blinks(&[0.4; 100]);
        assert!(r.blinks.is_empty());
        assert!(r.warning.is_none());
        let short = detect_blinks(&[0.4; 19]);
        assert!(short.blinks.is_empty() && short.warning.is_some());
    }

    #[test]
    fn single_bump_skips_six_frames() {
        // bounded noise of std ~0.004, bump of 5 sigma
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sigma = 0.004;
        let mut s: Vec<f64> = (0..80).map(|_| 0.4 + rng.gen_range(-1.0..1.0) * sigma * 3f64.sqrt()).collect();
        with_bump(&mut s, 40, 5.0 * sigma);
        let r = detect_blinks(&s);
        assert_eq!(r.blinks.len(), 1, "{r:?}");
        let b = &r.blinks[0];
        assert!((38..=42).contains(&b.peak));
        assert_eq!(b.skip.len(), 6);
        assert_eq!(b.skip, (b.peak - 3..=b.peak + 2).collect::<Vec<_>>());
    }

    #[test]
    fn flat_bump_peak_is_centered() {
        let mut s = vec![0.4; 60];
        with_bump(&mut s, 30, 0.1);
        let r = detect_blinks(&s);
        assert_eq!(r.blinks, vec![Blink { peak: 30, skip: (27..=32).collect() }]);
    }

    #[test]
    fn two_bumps_give_disjoint_skips() {
        let mut s = vec![0.5; 100];
        with_bump(&mut s, 25, 0.08);
        with_bump(&mut s, 65, 0.08);
        let r = detect_blinks(&s);
        assert_eq!(r.blinks.len(), 2);
        let a: std::collections::BTreeSet<_> = r.blinks[0].skip.iter().collect();
        assert!(r.blinks[1].skip.iter().all(|i| !a.contains(i)));
        assert_eq!(r.skipped().len(), 12);
    }

    #[test]
    fn subprocess_detector_protocol() {
        let script = "while read p; do echo \"left,60,10,20,20\"; echo \"right,10,12,20,20\"; echo; done";
        let mut det = SubprocessDetector::spawn("sh", &["-c".into(), script.into()]).unwrap();
        for _ in 0..2 {
            let boxes = det.detect(Path::new("frame.png")).unwrap();
            assert_eq!(boxes.len(), 2);
            assert_eq!(boxes[1], bx(10, 12, 20, 20, EyeSide::Right));
        }
        assert!(parse_detection("left,1,2,3").is_err());
    }

    proptest! {
        #[test]
        fn crop_is_always_30_by_100(x in 0usize..150, y in 0usize..100, w in 1usize..120, h in 1usize..120, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frame = GrayImage::from_fn(200, 160, |_, _| rng.gen::<f64>());
            let b = bx(x, y, w.min(200 - x), h.min(160 - y), EyeSide::Left);
            let c = crop_eye(&frame, &b).unwrap();
            prop_assert_eq!((c.width(), c.height()), (CROP_COLS, CROP_ROWS));
        }

        #[test]
        fn localization_is_permutation_invariant(seed in any::<u64>(), n in 2usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut boxes: Vec<BoundingBox> = (0..n)
                .map(|i| {
                    let side = if i % 2 == 0 { EyeSide::Left } else { EyeSide::Right };
                    bx(rng.gen_range(0..1000), rng.gen_range(200..260), rng.gen_range(10..150), rng.gen_range(10..150), side)
                })
                .collect();
            let base = localize_eyes(FW, FH, &boxes).ok();
            boxes.shuffle(&mut rng);
            prop_assert_eq!(base, localize_eyes(FW, FH, &boxes).ok());
        }

        #[test]
        fn each_separated_bump_adds_one_peak(
            level in 0.2f64..0.7,
            heights in proptest::collection::vec(0.02f64..0.3, 1..4),
            start in 3usize..15,
        ) {
            let len = start + heights.len() * 25 + 10;
            let mut s = vec![level; len];
            let mut expected = 0;
            for (k, h) in heights.iter().enumerate() {
                with_bump(&mut s, start + k * 25, *h);
                expected += 1;
                prop_assert_eq!(detect_blinks(&s).blinks.len(), expected);
            }
        }
    }
}
