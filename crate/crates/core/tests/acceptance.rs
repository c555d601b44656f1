//! Acceptance suite. Each test prints one verdict line to stderr (uncaptured)
//! and then asserts it.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::OnceLock;

use gazekit::dataset::{grid_to_screen, synth_generate, Corpus, GazePoint, ScreenGeometry, SynthConfig, SynthCorpus};
use gazekit::eval::{angular_error, center_baseline_error, loso_cv, partition_experiments, size_study, suggested_sizes, CvOutcome, Experiment, ExperimentSpec, Factor, PipelineConfig};
use gazekit::features::{hog_eye, lbp_eye, mhog_eye, Descriptor, HogSpec};
use gazekit::imaging::GrayImage;
use gazekit::pipeline::{prepare, PreparedSet};
use gazekit::reduction::{fit_pca, fit_reduction, pca_target, scatter, to_matrix, trace_fisher_ratio};
use gazekit::regress::{fit_knn, fit_rf, train_on, ForestParams, RegressorKind, RegressorParams};
use gazekit::tracking::{bilateral_filter, track, FrameStatus, GazeTrack};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!("acceptance {n} [{}] {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} failed: {detail}");
}

const SEED: u64 = 7;

fn corpus() -> &'static Corpus {
    static C: OnceLock<Corpus> = OnceLock::new();
    C.get_or_init(|| synth_generate(SynthConfig { n_subjects: 8, seed: SEED, ..SynthConfig::default() }).unwrap())
}

fn mhog_set() -> &'static PreparedSet {
    static S: OnceLock<PreparedSet> = OnceLock::new();
    S.get_or_init(|| prepare(corpus(), Descriptor::Mhog).unwrap())
}

fn rf_config() -> PipelineConfig {
    PipelineConfig::new(Descriptor::Mhog, RegressorParams::new(RegressorKind::Rf), SEED)
}

fn rf_loso() -> &'static CvOutcome {
    static O: OnceLock<CvOutcome> = OnceLock::new();
    O.get_or_init(|| loso_cv(mhog_set(), &rf_config()).unwrap())
}

// ---------- criterion 1: feature oracles ----------

fn random_crop(rng: &mut ChaCha8Rng) -> GrayImage {
    // mix of smooth ramps, noise and flat patches so empty cells occur too
    let style = rng.gen_range(0..3);
    let (a, b, c) = (rng.gen_range(-0.01..0.01), rng.gen_range(-0.03..0.03), rng.gen_range(0.2..0.8));
    let flat_col = rng.gen_range(0..100);
    let mut px = Vec::with_capacity(3000);
    for y in 0..30 {
        for x in 0..100 {
            let v = match style {
                0 => rng.gen_range(0.0..1.0),
                1 => c + a * x as f64 + b * y as f64 + 0.05 * rng.gen_range(-1.0..1.0),
                _ if x < flat_col => c,
                _ => rng.gen_range(0.0..1.0),
            };
            px.push(v.clamp(0.0, 1.0));
        }
    }
    GrayImage::new(100, 30, px).unwrap()
}

/// Orientation votes: magnitude shared linearly between the two nearest of
/// `bins` centers spaced over [0, pi).
fn oracle_votes(img: &GrayImage, bins: usize) -> Vec<Vec<f64>> {
    let (w, h) = (img.width() as isize, img.height() as isize);
    let px = |x: isize, y: isize| img.get(x.clamp(0, w - 1) as usize, y.clamp(0, h - 1) as usize);
    let width = PI / bins as f64;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let gx = px(x + 1, y) - px(x - 1, y);
            let gy = px(x, y + 1) - px(x, y - 1);
            let mag = (gx * gx + gy * gy).sqrt();
            let theta = gy.atan2(gx).rem_euclid(PI);
            let mut v = vec![0.0; bins];
            for (k, slot) in v.iter_mut().enumerate() {
                let center = (k as f64 + 0.5) * width;
                let mut d = (theta - center).abs();
                d = d.min(PI - d);
                *slot = mag * (1.0 - d / width).max(0.0);
            }
            out.push(v);
        }
    }
    out
}

fn oracle_cells(img: &GrayImage, votes: &[Vec<f64>], rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let (ch, cw) = (img.height() / rows, img.width() / cols);
    let mut cells = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let mut hist = vec![0.0; votes[0].len()];
            for y in r * ch..(r + 1) * ch {
                for x in c * cw..(c + 1) * cw {
                    for (h, v) in hist.iter_mut().zip(&votes[y * img.width() + x]) {
                        *h += v;
                    }
                }
            }
            cells.push(hist);
        }
    }
    cells
}

fn oracle_mhog(img: &GrayImage) -> Vec<f64> {
    let votes = oracle_votes(img, 9);
    let mut out = Vec::new();
    for (rows, cols) in [(1, 1), (2, 2), (3, 5), (6, 10)] {
        for cell in oracle_cells(img, &votes, rows, cols) {
            let s: f64 = cell.iter().sum();
            out.extend(cell.iter().map(|v| if s > 1e-10 { v / s } else { 0.0 }));
        }
    }
    out
}

fn oracle_hog(img: &GrayImage) -> Vec<f64> {
    let votes = oracle_votes(img, 9);
    let cells = oracle_cells(img, &votes, 3, 10);
    let l2 = |v: &mut Vec<f64>| {
        let n = (v.iter().map(|x| x * x).sum::<f64>() + 1e-20).sqrt();
        v.iter_mut().for_each(|x| *x /= n);
    };
    let mut out = Vec::new();
    for by in 0..2 {
        for bx in 0..9 {
            let mut block: Vec<f64> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                .iter()
                .flat_map(|(dy, dx)| cells[(by + dy) * 10 + bx + dx].clone())
                .collect();
            l2(&mut block);
            block.iter_mut().for_each(|x| *x = x.min(0.2));
            l2(&mut block);
            out.extend(block);
        }
    }
    out
}

fn oracle_lbp(img: &GrayImage) -> Vec<f64> {
    // neighbors counter-clockwise from east, image y pointing down
    let ring = [(1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1)];
    let is_uniform = |code: u32| (0..8).filter(|&i| ((code >> i) & 1) != ((code >> ((i + 1) % 8)) & 1)).count() <= 2;
    let uniform: Vec<u32> = (0..256).filter(|&c| is_uniform(c)).collect();
    assert_eq!(uniform.len(), 58);
    let mut hist = vec![0.0; 30 * 59];
    for y in 1..29 {
        for x in 1..99 {
            let center = img.get(x, y);
            let code: u32 = ring
                .iter()
                .enumerate()
                .filter(|(_, (dx, dy))| img.get((x as isize + dx) as usize, (y as isize + dy) as usize) > center)
                .map(|(i, _)| 1 << i)
                .sum();
            let bin = uniform.iter().position(|&u| u == code).unwrap_or(58);
            let cell = (y / 10).min(2) * 10 + (x / 10).min(9);
            hist[cell * 59 + bin] += 1.0;
        }
    }
    for cell in hist.chunks_mut(59) {
        let s: f64 = cell.iter().sum();
        cell.iter_mut().for_each(|v| *v /= s);
    }
    hist
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn criterion_1_feature_oracles() {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (ms, hs) = (HogSpec::multilevel(), HogSpec::standard());
    let (mut d_direct, mut d_mhog, mut d_hog, mut d_lbp) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let crop = random_crop(&mut rng);
        let fast = mhog_eye(&crop, &ms).unwrap();
        d_direct = d_direct.max(max_diff(&fast, &hog_eye(&crop, &ms).unwrap()));
        d_mhog = d_mhog.max(max_diff(&fast, &oracle_mhog(&crop)));
        d_hog = d_hog.max(max_diff(&hog_eye(&crop, &hs).unwrap(), &oracle_hog(&crop)));
        d_lbp = d_lbp.max(max_diff(&lbp_eye(&crop), &oracle_lbp(&crop)));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = d_direct <= 1e-9 && d_mhog <= 1e-9 && d_hog <= 1e-9 && d_lbp <= 1e-9 && secs < 60.0;
    verdict(
        1,
        "feature oracle equivalence",
        pass,
        &format!("1000 crops; mHoG integral vs direct {d_direct:.1e}, vs oracle {d_mhog:.1e}; HoG {d_hog:.1e}; LBP {d_lbp:.1e} (limit 1e-9); {secs:.1}s"),
    );
}

// ---------- criterion 2: reduction contracts ----------

#[test]
fn criterion_2_reduction_contracts() {
    let set = mhog_set();
    let rows: Vec<Vec<f64>> = set.samples.iter().map(|s| s.features.clone()).collect();
    let labels: Vec<usize> = set.samples.iter().map(|s| s.label).collect();
    let x = to_matrix(&rows).unwrap();
    let model = fit_reduction(&x, &labels, 35).unwrap();
    let out_dim = model.project(&rows[0]).unwrap().len();

    let p = model.pca_basis.ncols();
    let ortho = (model.pca_basis.tr_mul(&model.pca_basis) - DMatrix::identity(p, p)).amax();

    // Fisher dominance in the PCA subspace
    let mut counts = vec![0usize; 35];
    labels.iter().for_each(|&l| counts[l] += 1);
    let target = pca_target(x.ncols(), x.nrows(), 35, *counts.iter().min().unwrap());
    let pca = fit_pca(&x, target).unwrap();
    let mean = x.row_mean();
    let z = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - mean[j]) * &pca.basis;
    let (sw, sb) = scatter(&z, &labels, 35).unwrap();
    let ratio = |w: &DMatrix<f64>| {
        let a = w.tr_mul(&sw) * w;
        let b = w.tr_mul(&sb) * w;
        (a.cholesky().unwrap().inverse() * b).trace()
    };
    let lda_ratio = trace_fisher_ratio(&z, &labels, 35, &model.lda_basis).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut best_random = f64::MIN;
    for _ in 0..1000 {
        let w = DMatrix::from_fn(p, 34, |_, _| rng.sample::<f64, _>(StandardNormal));
        best_random = best_random.max(ratio(&w));
    }
    let pass = out_dim == 34 && model.output_dim() == 34 && ortho <= 1e-8 && lda_ratio > best_random;
    verdict(
        2,
        "reduction contracts",
        pass,
        &format!("output dim {out_dim} (want 34); PCA orthonormality error {ortho:.1e} (limit 1e-8); Fisher ratio LDA {lda_ratio:.2} vs best of 1000 random {best_random:.2}"),
    );
}

// ---------- criterion 3: regressors ----------

#[test]
fn criterion_3_regressors() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 6;
    let mut draw = |n: usize| -> Vec<Vec<f64>> { (0..n).map(|_| (0..d).map(|_| rng.gen_range(0.0..1.0)).collect()).collect() };
    let (train, test) = (draw(600), draw(300));
    let y: Vec<f64> = train.iter().map(|r| r[0]).collect();
    let truth: Vec<f64> = test.iter().map(|r| r[0]).collect();

    // kNN against a full sort of all training points
    let knn = fit_knn(&train, &y, 3).unwrap();
    let mut knn_mismatch = 0;
    for q in &test {
        let mut order: Vec<(f64, usize)> = train
            .iter()
            .enumerate()
            .map(|(i, r)| (r.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let want = order[..3].iter().map(|&(_, i)| y[i]).sum::<f64>() / 3.0;
        if knn.predict(q).unwrap() != want {
            knn_mismatch += 1;
        }
    }

    let params = ForestParams { seed: 11, ..ForestParams::default() };
    let a = fit_rf(&train, &y, &params).unwrap();
    let b = fit_rf(&train, &y, &params).unwrap();
    let pa: Vec<f64> = test.iter().map(|q| a.predict(q).unwrap()).collect();
    let pb: Vec<f64> = test.iter().map(|q| b.predict(q).unwrap()).collect();
    let bit_equal = pa.iter().zip(&pb).all(|(u, v)| u.to_bits() == v.to_bits());
    let mae = |p: &[f64]| p.iter().zip(&truth).map(|(u, v)| (u - v).abs()).sum::<f64>() / truth.len() as f64;
    let mean_y = y.iter().sum::<f64>() / y.len() as f64;
    let baseline = mae(&vec![mean_y; truth.len()]);
    let rf_mae = mae(&pa);
    let gain = 1.0 - rf_mae / baseline;
    let pass = knn_mismatch == 0 && bit_equal && gain >= 0.5;
    verdict(
        3,
        "regressor correctness",
        pass,
        &format!("kNN mismatches vs brute force {knn_mismatch}/300; RF refit bit-identical {bit_equal}; RF MAE {rf_mae:.4} vs mean predictor {baseline:.4} ({:.0}% better, need 50%)", gain * 100.0),
    );
}

// ---------- criterion 4: synthetic end-to-end ----------

#[test]
fn criterion_4_synthetic_end_to_end() {
    let start = std::time::Instant::now();
    let outcome = rf_loso();
    let me = outcome.report.mean_error_cm;
    // screen center coincides with the middle grid point, so the grid is
    // symmetric offsets i*dx, j*dy around it
    let g = ScreenGeometry::default();
    let mut sum = 0.0;
    for i in -3i32..=3 {
        for j in -2i32..=2 {
            sum += ((i as f64 * g.dx_cm).powi(2) + (j as f64 * g.dy_cm).powi(2)).sqrt();
        }
    }
    let oracle = sum / 35.0;
    let library = center_baseline_error(&g);
    let gain = 1.0 - me / oracle;
    let secs = start.elapsed().as_secs_f64();
    let pass = me <= 2.5 && gain >= 0.4 && (library - oracle).abs() < 1e-12;
    verdict(
        4,
        "synthetic 8-subject LOSO, mHoG+RF",
        pass,
        &format!(
            "ME {me:.3} cm (std {:.3}, limit 2.5) on {} images; center baseline {oracle:.3} cm; {:.0}% better (need 40%); {secs:.0}s",
            outcome.report.std_error_cm,
            outcome.report.sample_count,
            gain * 100.0
        ),
    );
}

// ---------- criterion 5: protocol structure ----------

#[test]
fn criterion_5_protocol_structure() {
    let set = mhog_set();
    let cfg = rf_config();
    let outcome = rf_loso();

    // LOSO folds: each test set is exactly one subject's samples, train is the rest
    let mut seen = vec![0usize; set.records.len()];
    let mut folds_ok = outcome.folds.len() == set.subjects().len();
    for f in &outcome.folds {
        let own = set.samples.iter().filter(|s| set.subject_of(s) == f.fold).count();
        folds_ok &= f.test_count == own && f.train_count == set.samples.len() - own;
        folds_ok &= f.errors.iter().all(|e| e.subject_id == f.fold);
        f.errors.iter().for_each(|e| seen[e.record] += 1);
    }
    let covered = set.samples.iter().all(|s| seen[s.record] == 1) && seen.iter().sum::<usize>() == set.samples.len();

    // E2 regroups the plain LOSO errors
    let report = partition_experiments(set, &ExperimentSpec::new(Factor::Glasses, SEED), &cfg).unwrap();
    let e2: Vec<_> = report.results.iter().filter(|r| r.experiment == Experiment::E2).collect();
    let n: usize = e2.iter().map(|r| r.sample_count).sum();
    let regrouped = e2.iter().map(|r| r.mean_error_cm * r.sample_count as f64).sum::<f64>() / n as f64;
    let e2_diff = (regrouped - outcome.report.mean_error_cm).abs();
    let e2_ok = n == outcome.report.sample_count && e2_diff < 1e-9 && (report.e2_overall_cm - outcome.report.mean_error_cm).abs() < 1e-12;

    let sizes = suggested_sizes(set.subjects().len());
    let curve = size_study(set, &sizes, 5, &cfg).unwrap();
    let rho = curve.spearman_rho;
    let points: Vec<String> = curve.points.iter().map(|p| format!("{}:{:.2}", p.k, p.mean_error_cm)).collect();

    let pass = folds_ok && covered && e2_ok && sizes.len() >= 5 && rho < 0.0;
    verdict(
        5,
        "protocol structure",
        pass,
        &format!(
            "LOSO folds disjoint {}; every image tested once {covered}; E2 regrouped ME differs from LOSO by {e2_diff:.1e}; size curve [{}] Spearman rho {rho:.2} (need < 0)",
            folds_ok,
            points.join(" ")
        ),
    );
}

// ---------- criterion 6: tracking and filter ----------

fn filtered(raw: &[Option<GazePoint>], sr: f64) -> Vec<Option<GazePoint>> {
    bilateral_filter(&GazeTrack::from_raw(raw), 5.0, sr).unwrap().points.iter().map(|p| p.filtered).collect()
}

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_6_tracking_and_filter() {
    let constant: Vec<Option<GazePoint>> = vec![Some(GazePoint::new(7.31, 4.02)); 40];
    let constant_exact = filtered(&constant, 1.7) == constant;

    let step: Vec<Option<GazePoint>> = (0..60).map(|i| Some(GazePoint::new(if i < 30 { 5.0 } else { 15.0 }, 7.0))).collect();
    let step_shift = filtered(&step, 1.5)
        .iter()
        .zip(&step)
        .map(|(f, r)| (f.unwrap().x_cm - r.unwrap().x_cm).abs())
        .fold(0.0, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let noisy: Vec<Option<GazePoint>> = (0..80)
        .map(|i| {
            let base = if i < 40 { 5.0 } else { 15.0 };
            let n: f64 = rng.sample(StandardNormal);
            let m: f64 = rng.sample(StandardNormal);
            Some(GazePoint::new(base + 0.8 * n, 7.0 + 0.8 * m))
        })
        .collect();
    let out = filtered(&noisy, 1.7);
    let mut reduced = true;
    let mut ratios = Vec::new();
    for range in [0..40, 40..80] {
        for axis in [0, 1] {
            let pick = |v: &[Option<GazePoint>]| -> Vec<f64> {
                v[range.clone()].iter().map(|p| if axis == 0 { p.unwrap().x_cm } else { p.unwrap().y_cm }).collect()
            };
            let (before, after) = (variance(&pick(&noisy)), variance(&pick(&out)));
            reduced &= after < before;
            ratios.push(after / before);
        }
    }

    // blink bump in a rendered session
    let synth = SynthCorpus::new(SynthConfig { n_subjects: 8, seed: SEED, ..SynthConfig::default() }).unwrap();
    let geom = ScreenGeometry::default();
    let point = grid_to_screen(geom.grid_index(2, 3).unwrap(), &geom).unwrap();
    let peak = 30;
    let seq = synth.render_sequence(0, 0, &vec![point; 60], &[peak], 99);
    let model = train_on(mhog_set(), &RegressorParams::new(RegressorKind::Knn), false, SEED).unwrap();
    let t = track(&seq.frames, &seq.candidates, &model).unwrap();
    let blink_frames: Vec<usize> = t.points.iter().filter(|p| p.status == FrameStatus::Blink).map(|p| p.frame_index).collect();
    let expected: Vec<usize> = (peak - 3..=peak + 2).collect();
    let no_estimates = t.points.iter().filter(|p| p.status == FrameStatus::Blink).all(|p| p.raw.is_none() && p.filtered.is_none());
    let blink_ok = blink_frames == expected && no_estimates;

    let pass = constant_exact && step_shift < 0.2 && reduced && blink_ok;
    verdict(
        6,
        "tracking and filter properties",
        pass,
        &format!(
            "constant track exact {constant_exact}; 10 cm step max shift {step_shift:.4} cm (limit 0.2); noisy plateau variance ratios {:?}; blink at frame {peak} skipped frames {blink_frames:?} (want {expected:?})",
            ratios.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>()
        ),
    );
}

// ---------- criterion 7: real-dataset reproduction ----------

#[test]
fn criterion_7_real_dataset_reproduction() {
    let Some(root) = std::env::var_os("RICETABLETGAZE_ROOT") else {
        let _ = std::io::stderr().write_all(
            b"acceptance 7 [NOT RUN] real-dataset reproduction: RICETABLETGAZE_ROOT is unset; needs the full dataset (see README)\n",
        );
        return;
    };
    let root = std::path::PathBuf::from(root);
    let manifest = if root.is_dir() { root.join("manifest.csv") } else { root };
    let corpus = gazekit::dataset::load_manifest(&manifest).unwrap();
    let reference = [(Descriptor::Mhog, 3.17), (Descriptor::Hog, 3.29), (Descriptor::Log, 4.76), (Descriptor::Lbp, 4.99), (Descriptor::Intensity, 7.20)];
    let mut row = Vec::new();
    for (d, _) in reference {
        let set = prepare(&corpus, d).unwrap();
        let cfg = PipelineConfig::new(d, RegressorParams::new(RegressorKind::Rf), SEED);
        row.push((d, loso_cv(&set, &cfg).unwrap().report.mean_error_cm));
    }
    let mhog = row[0].1;
    let mut sorted = row.clone();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1));
    let order_ok = sorted.iter().map(|r| r.0).eq(reference.iter().map(|r| r.0));
    let pass = (mhog - 3.17).abs() <= 0.5 && order_ok;
    verdict(
        7,
        "real-dataset reproduction",
        pass,
        &format!("mHoG+RF ME {mhog:.2} cm (reference 3.17 +/- 0.5); RF row {row:?}; ordering preserved {order_ok}"),
    );
}

// ---------- criterion 8: angular conversion ----------

#[test]
fn criterion_8_angular_conversion() {
    let near = angular_error(3.17, 30.0).unwrap();
    let far = angular_error(3.17, 50.0).unwrap();
    let direct = |d: f64| (3.17f64 / d).atan() * 180.0 / PI;
    let pass = (near - 6.03).abs() <= 0.01 && (far - 3.63).abs() <= 0.01 && (near - direct(30.0)).abs() < 1e-12 && (far - direct(50.0)).abs() < 1e-12;
    verdict(8, "angular conversion", pass, &format!("3.17 cm at 30 cm = {near:.4} deg (6.03), at 50 cm = {far:.4} deg (3.63)"));
}
