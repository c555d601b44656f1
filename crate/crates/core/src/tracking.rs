//! Frame-by-frame gaze tracking with a temporal bilateral filter.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{grid_to_screen, GazePoint, ScreenGeometry};
use crate::error::{GazeError, Result};
use crate::eyes::{detect_blinks, extract_pair, BoundingBox, EyeGeometryFeature, eye_geometry_feature};
use crate::imaging::GrayImage;
use crate::regress::{predict_gaze, GazeModel};

pub const DEFAULT_SIGMA_T: f64 = 5.0;
pub const DEFAULT_SIGMA_R: f64 = 1.7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrameStatus {
    Ok,
    Blink,
    NoEyes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub frame_index: usize,
    pub status: FrameStatus,
    pub raw: Option<GazePoint>,
    pub filtered: Option<GazePoint>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GazeTrack {
    pub points: Vec<TrackPoint>,
    /// Eye geometry of every frame with detected eyes, logged for inspection.
    #[serde(skip)]
    pub eye_geometry: Vec<(usize, EyeGeometryFeature)>,
    pub warnings: Vec<String>,
}

impl GazeTrack {
    /// Builds a track from raw estimates; `None` marks a blink frame.
    pub fn from_raw(raw: &[Option<GazePoint>]) -> Self {
        Self {
            points: raw
                .iter()
                .enumerate()
                .map(|(i, r)| TrackPoint {
                    frame_index: i,
                    status: if r.is_some() { FrameStatus::Ok } else { FrameStatus::Blink },
                    raw: *r,
                    filtered: *r,
                })
                .collect(),
            ..Default::default()
        }
    }

    pub fn estimates(&self) -> usize {
        self.points.iter().filter(|p| p.raw.is_some()).count()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["frame", "raw_x_cm", "raw_y_cm", "filt_x_cm", "filt_y_cm", "blink"])?;
        let fmt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.4}"));
        for p in &self.points {
            w.write_record([
                p.frame_index.to_string(),
                fmt(p.raw.map(|g| g.x_cm)),
                fmt(p.raw.map(|g| g.y_cm)),
                fmt(p.filtered.map(|g| g.x_cm)),
                fmt(p.filtered.map(|g| g.y_cm)),
                u8::from(p.status == FrameStatus::Blink).to_string(),
            ])?;
        }
        w.flush().map_err(|e| GazeError::io(path, e))
    }

    /// Raw and filtered estimates over the screen outline and grid points.
    pub fn to_svg(&self, geom: &ScreenGeometry) -> String {
        let scale = 30.0;
        let pad = 20.0;
        let (w, h) = (geom.width_cm * scale + 2.0 * pad, geom.height_cm * scale + 2.0 * pad);
        let px = |g: GazePoint| (pad + g.x_cm * scale, pad + g.y_cm * scale);
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#);
        let _ = writeln!(s, r##"<rect x="{pad}" y="{pad}" width="{:.1}" height="{:.1}" fill="#fafafa" stroke="#333"/>"##, geom.width_cm * scale, geom.height_cm * scale);
        for g in geom.grid() {
            let (x, y) = px(grid_to_screen(g, geom).expect("grid point"));
            let _ = writeln!(s, r##"<circle cx="{x:.1}" cy="{y:.1}" r="4" fill="none" stroke="#999"/>"##);
        }
        for (color, pick) in [("#d62728", 0), ("#1f77b4", 1)] {
            let pts: Vec<String> = self
                .points
                .iter()
                .filter_map(|p| if pick == 0 { p.raw } else { p.filtered })
                .map(|g| {
                    let (x, y) = px(g);
                    format!("{x:.1},{y:.1}")
                })
                .collect();
            if pick == 0 {
                for p in &pts {
                    let (x, y) = p.split_once(',').expect("formatted pair");
                    let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="1.5" fill="{color}" opacity="0.5"/>"#);
                }
            } else if !pts.is_empty() {
                let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, pts.join(" "));
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Runs the model over an ordered session. Frames without a valid eye pair
/// are marked `NoEyes`; blink frames, found on the mean-intensity series of
/// the detected frames, are marked `Blink`. Neither carries an estimate.
pub fn track(frames: &[GrayImage], candidates: &[Vec<BoundingBox>], model: &GazeModel) -> Result<GazeTrack> {
    if frames.len() != candidates.len() {
        return Err(GazeError::DimensionMismatch { expected: frames.len(), got: candidates.len() });
    }
    let mut out = GazeTrack::default();
    let mut pairs = Vec::with_capacity(frames.len());
    for (i, (f, c)) in frames.iter().zip(candidates).enumerate() {
        match extract_pair(f, c) {
            Ok(p) => {
                out.eye_geometry.push((i, eye_geometry_feature(&p.left_box, &p.right_box)));
                pairs.push(Some(p));
            }
            Err(GazeError::DetectionFailure { .. }) => pairs.push(None),
            Err(e) => return Err(e),
        }
    }
    let detected: Vec<usize> = (0..frames.len()).filter(|&i| pairs[i].is_some()).collect();
    let series: Vec<f64> = detected.iter().map(|&i| pairs[i].as_ref().expect("detected").mean_intensity()).collect();
    let blinks = detect_blinks(&series);
    if let Some(w) = blinks.warning.clone() {
        out.warnings.push(format!("blink detection skipped: {w}"));
    }
    let blinked: std::collections::BTreeSet<usize> = blinks.skipped().into_iter().map(|k| detected[k]).collect();
    for (i, pair) in pairs.iter().enumerate() {
        let (status, raw) = match pair {
            None => (FrameStatus::NoEyes, None),
            Some(_) if blinked.contains(&i) => (FrameStatus::Blink, None),
            Some(p) => (FrameStatus::Ok, Some(predict_gaze(model, p, None)?)),
        };
        out.points.push(TrackPoint {
            frame_index: i,
            status,
            raw,
            filtered: raw,
        });
    }
    if out.estimates() == 0 {
        out.warnings.push(format!("no usable frame among {}", frames.len()));
    }
    Ok(out)
}

/// Smooths raw estimates with weights
/// `exp(-(i-j)^2 / 2 st^2) * exp(-|g_i - g_j|^2 / 2 sr^2)` over frames with
/// `|i - j| <= 3 st`. Both axes share the weights, so each output is a convex
/// combination of raw points. Frames without an estimate contribute nothing.
pub fn bilateral_filter(track: &GazeTrack, sigma_t: f64, sigma_r: f64) -> Result<GazeTrack> {
    if !(sigma_t > 0.0 && sigma_r > 0.0) {
        return Err(GazeError::domain(format!("filter widths must be positive (sigma_t {sigma_t}, sigma_r {sigma_r})")));
    }
    let reach = 3.0 * sigma_t;
    let observed: Vec<(usize, GazePoint)> = track.points.iter().filter_map(|p| p.raw.map(|g| (p.frame_index, g))).collect();
    let mut out = track.clone();
    for p in out.points.iter_mut() {
        let Some(gi) = p.raw else {
            p.filtered = None;
            continue;
        };
        let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
        let lo = observed.partition_point(|&(j, _)| (j as f64) < p.frame_index as f64 - reach);
        for &(j, gj) in observed[lo..].iter().take_while(|&&(j, _)| j as f64 <= p.frame_index as f64 + reach) {
            let dt = j as f64 - p.frame_index as f64;
            let dr2 = (gj.x_cm - gi.x_cm).powi(2) + (gj.y_cm - gi.y_cm).powi(2);
            let w = (-dt * dt / (2.0 * sigma_t * sigma_t)).exp() * (-dr2 / (2.0 * sigma_r * sigma_r)).exp();
            sw += w;
            sx += w * (gj.x_cm - gi.x_cm);
            sy += w * (gj.y_cm - gi.y_cm);
        }
        // offsets from the center frame keep constant segments bit-exact
        p.filtered = Some(GazePoint::new(gi.x_cm + sx / sw, gi.y_cm + sy / sw));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn filtered(t: &GazeTrack) -> Vec<GazePoint> {
        t.points.iter().filter_map(|p| p.filtered).collect()
    }

    #[test]
    fn constant_track_is_unchanged() {
        let g = GazePoint::new(4.2, 9.1);
        let t = GazeTrack::from_raw(&vec![Some(g); 40]);
        let f = bilateral_filter(&t, DEFAULT_SIGMA_T, DEFAULT_SIGMA_R).unwrap();
        assert!(filtered(&f).iter().all(|&p| p == g));
    }

    #[test]
    fn step_is_preserved() {
        let raw: Vec<Option<GazePoint>> = (0..60).map(|i| Some(GazePoint::new(if i < 30 { 2.0 } else { 12.0 }, 5.0))).collect();
        let f = bilateral_filter(&GazeTrack::from_raw(&raw), DEFAULT_SIGMA_T, 1.5).unwrap();
        for (p, r) in f.points.iter().zip(&raw) {
            assert!((p.filtered.unwrap().x_cm - r.unwrap().x_cm).abs() < 0.2);
        }
    }

    #[test]
    fn noisy_plateau_variance_drops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw: Vec<Option<GazePoint>> = (0..100)
            .map(|_| Some(GazePoint::new(8.0 + 0.8 * rng.sample::<f64, _>(StandardNormal), 6.0 + 0.8 * rng.sample::<f64, _>(StandardNormal))))
            .collect();
        let f = bilateral_filter(&GazeTrack::from_raw(&raw), DEFAULT_SIGMA_T, DEFAULT_SIGMA_R).unwrap();
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
        };
        let rx: Vec<f64> = raw.iter().map(|g| g.unwrap().x_cm).collect();
        let fx: Vec<f64> = filtered(&f).iter().map(|g| g.x_cm).collect();
        assert!(var(&fx) < var(&rx));
    }

    #[test]
    fn blink_gaps_equal_zero_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut raw: Vec<Option<GazePoint>> = (0..50).map(|_| Some(GazePoint::new(rng.gen_range(0.0..20.0), rng.gen_range(0.0..14.0)))).collect();
        for i in 20..26 {
            raw[i] = None;
        }
        let f = bilateral_filter(&GazeTrack::from_raw(&raw), 3.0, 2.0).unwrap();
        assert!(f.points[20..26].iter().all(|p| p.filtered.is_none()));
        // removing the gap frames entirely (keeping indices) gives the same values
        let kept: GazeTrack = GazeTrack {
            points: f.points.iter().filter(|p| p.raw.is_some()).cloned().collect(),
            ..Default::default()
        };
        let g = bilateral_filter(&kept, 3.0, 2.0).unwrap();
        assert_eq!(filtered(&f), filtered(&g));
    }

    #[test]
    fn rejects_nonpositive_widths() {
        let t = GazeTrack::from_raw(&[Some(GazePoint::new(0.0, 0.0))]);
        assert!(bilateral_filter(&t, 0.0, 1.0).is_err());
        assert!(bilateral_filter(&t, 1.0, -1.0).is_err());
    }

    proptest! {
        #[test]
        fn output_stays_in_window_hull(xs in prop::collection::vec((0.0f64..20.0, 0.0f64..14.0), 2..40), st in 0.5f64..6.0, sr in 0.3f64..4.0) {
            let raw: Vec<Option<GazePoint>> = xs.iter().map(|&(x, y)| Some(GazePoint::new(x, y))).collect();
            let f = bilateral_filter(&GazeTrack::from_raw(&raw), st, sr).unwrap();
            let reach = (3.0 * st).floor() as usize;
            for (i, p) in f.points.iter().enumerate() {
                let w = &xs[i.saturating_sub(reach)..(i + reach + 1).min(xs.len())];
                let g = p.filtered.unwrap();
                let (lx, hx) = w.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v.0), b.max(v.0)));
                let (ly, hy) = w.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v.1), b.max(v.1)));
                prop_assert!(g.x_cm >= lx - 1e-9 && g.x_cm <= hx + 1e-9);
                prop_assert!(g.y_cm >= ly - 1e-9 && g.y_cm <= hy + 1e-9);
            }
        }
    }
}
