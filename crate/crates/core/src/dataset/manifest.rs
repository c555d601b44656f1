//! CSV manifest and annotation sidecar I/O.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::{Corpus, FrameRef, FrameSource, Provenance, SampleRecord, ScreenGeometry};
use crate::error::{GazeError, Result};
use crate::eyes::{BoundingBox, EyeSide};
use crate::imaging;

pub const MANIFEST_HEADER: [&str; 9] = [
    "subject_id",
    "session_id",
    "posture",
    "glasses",
    "race",
    "frame_path",
    "grid_row",
    "grid_col",
    "timestamp_s",
];

pub const ANNOTATION_HEADER: [&str; 6] = ["frame_path", "side", "x", "y", "w", "h"];

/// Sidecar file name looked up next to a manifest.
pub const ANNOTATIONS_FILE: &str = "annotations.csv";

fn schema(path: &Path, line: usize, message: impl Into<String>) -> GazeError {
    GazeError::Schema {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| GazeError::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file))
}

fn check_header(path: &Path, reader: &mut csv::Reader<fs::File>, expected: &[&str]) -> Result<()> {
    let header = reader.headers()?.clone();
    let got: Vec<&str> = header.iter().collect();
    if got != expected {
        return Err(schema(
            path,
            1,
            format!("expected header '{}', found '{}'", expected.join(","), got.join(",")),
        ));
    }
    Ok(())
}

fn field<T: std::str::FromStr>(path: &Path, line: usize, row: &csv::StringRecord, idx: usize, name: &str) -> Result<T> {
    let raw = row.get(idx).ok_or_else(|| schema(path, line, format!("missing column {name}")))?;
    raw.parse()
        .map_err(|_| schema(path, line, format!("invalid {name} '{raw}'")))
}

/// Loads a manifest and, if present, the `annotations.csv` sidecar next to it.
pub fn load_manifest(path: &Path) -> Result<Corpus> {
    let sidecar = path.parent().unwrap_or(Path::new(".")).join(ANNOTATIONS_FILE);
    let annotations = if sidecar.exists() { Some(sidecar) } else { None };
    load_manifest_with(path, annotations.as_deref(), ScreenGeometry::default())
}

pub fn load_manifest_with(path: &Path, annotations: Option<&Path>, geometry: ScreenGeometry) -> Result<Corpus> {
    geometry.validate()?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut reader = open_csv(path)?;
    check_header(path, &mut reader, &MANIFEST_HEADER)?;

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        if row.len() != MANIFEST_HEADER.len() {
            return Err(schema(path, line, format!("expected 9 fields, found {}", row.len())));
        }
        let glasses = match row.get(3) {
            Some("0") => false,
            Some("1") => true,
            other => return Err(schema(path, line, format!("invalid glasses '{}'", other.unwrap_or("")))),
        };
        let grid_row: usize = field(path, line, &row, 6, "grid_row")?;
        let grid_col: usize = field(path, line, &row, 7, "grid_col")?;
        let grid = geometry
            .grid_index(grid_row, grid_col)
            .map_err(|_| schema(path, line, format!("grid label ({grid_row}, {grid_col}) outside the {}x{} grid", geometry.grid_rows, geometry.grid_cols)))?;
        let timestamp_s: f64 = field(path, line, &row, 8, "timestamp_s")?;
        if !timestamp_s.is_finite() {
            return Err(schema(path, line, "timestamp_s must be finite"));
        }
        records.push(SampleRecord {
            subject_id: row[0].to_string(),
            session_id: row[1].to_string(),
            posture: row[2].parse().map_err(|_| schema(path, line, format!("invalid posture '{}'", &row[2])))?,
            glasses,
            race: row[4].parse().map_err(|_| schema(path, line, format!("invalid race '{}'", &row[4])))?,
            frame_ref: FrameRef::Path(PathBuf::from(&row[5])),
            grid,
            timestamp_s,
        });
    }

    let missing: Vec<PathBuf> = records
        .iter()
        .filter_map(|r| match &r.frame_ref {
            FrameRef::Path(p) if !root.join(p).is_file() => Some(root.join(p)),
            _ => None,
        })
        .collect();
    if !missing.is_empty() {
        return Err(GazeError::MissingFiles(missing));
    }

    let annotations = match annotations {
        Some(a) => load_annotations(a)?,
        None => HashMap::new(),
    };
    Corpus::new(
        geometry,
        records,
        Provenance::Real,
        FrameSource::Files {
            root,
            annotations: Arc::new(annotations),
        },
    )
}

/// Reads `frame_path,side,x,y,w,h` rows, grouped by frame path.
pub fn load_annotations(path: &Path) -> Result<HashMap<PathBuf, Vec<BoundingBox>>> {
    let mut reader = open_csv(path)?;
    check_header(path, &mut reader, &ANNOTATION_HEADER)?;
    let mut out: HashMap<PathBuf, Vec<BoundingBox>> = HashMap::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let side: EyeSide = field(path, line, &row, 1, "side")?;
        let x: usize = field(path, line, &row, 2, "x")?;
        let y: usize = field(path, line, &row, 3, "y")?;
        let w: usize = field(path, line, &row, 4, "w")?;
        let h: usize = field(path, line, &row, 5, "h")?;
        if w == 0 || h == 0 {
            return Err(schema(path, line, "box width and height must be positive"));
        }
        out.entry(PathBuf::from(&row[0])).or_default().push(BoundingBox { x, y, w, h, side });
    }
    Ok(out)
}

/// Writes frames as PNG plus `manifest.csv` and `annotations.csv` under `dir`.
/// Returns the manifest path.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| GazeError::io(dir, e))?;
    let manifest_path = dir.join("manifest.csv");
    let mut manifest = csv::Writer::from_path(&manifest_path)?;
    manifest.write_record(MANIFEST_HEADER)?;
    let mut annotations = csv::Writer::from_path(dir.join(ANNOTATIONS_FILE))?;
    annotations.write_record(ANNOTATION_HEADER)?;

    for (i, r) in corpus.records.iter().enumerate() {
        let rel = match &r.frame_ref {
            FrameRef::Path(p) => p.clone(),
            FrameRef::Index(idx) => PathBuf::from("frames")
                .join(&r.subject_id)
                .join(&r.session_id)
                .join(format!("{idx:06}.png")),
        };
        let target = dir.join(&rel);
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent).map_err(|e| GazeError::io(parent, e))?;
        }
        let (frame, candidates) = corpus.load(i)?;
        imaging::save_png(&frame, &target)?;
        let rel_str = rel.to_string_lossy().replace('\\', "/");
        manifest.write_record([
            r.subject_id.as_str(),
            r.session_id.as_str(),
            r.posture.as_str(),
            if r.glasses { "1" } else { "0" },
            r.race.as_str(),
            rel_str.as_str(),
            &r.grid.row.to_string(),
            &r.grid.col.to_string(),
            &format!("{}", r.timestamp_s),
        ])?;
        for b in candidates {
            annotations.write_record([
                rel_str.clone(),
                b.side.to_string(),
                b.x.to_string(),
                b.y.to_string(),
                b.w.to_string(),
                b.h.to_string(),
            ])?;
        }
    }
    manifest.flush().map_err(|e| GazeError::io(&manifest_path, e))?;
    annotations.flush().map_err(|e| GazeError::io(dir.join(ANNOTATIONS_FILE), e))?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{save_png, GrayImage};

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    fn frame(dir: &Path, name: &str) {
        save_png(&GrayImage::filled(8, 6, 0.5), &dir.join(name)).unwrap();
    }

    const HEADER: &str = "subject_id,session_id,posture,glasses,race,frame_path,grid_row,grid_col,timestamp_s\n";

    #[test]
    fn well_formed_manifest() {
        let dir = tempfile::tempdir().unwrap();
        frame(dir.path(), "a.png");
        frame(dir.path(), "b.png");
        let body = format!("{HEADER}p1,p1-1,sitting,0,asian,a.png,0,0,1.6\np1,p1-1,sitting,0,asian,b.png,4,6,2.0\n");
        let m = write(dir.path(), "manifest.csv", &body);
        let c = load_manifest(&m).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.records[1].grid.row, 4);
        assert_eq!(c.provenance, Provenance::Real);
        assert!(c.candidates(0).unwrap().is_empty());
    }

    #[test]
    fn label_out_of_range_names_row() {
        let dir = tempfile::tempdir().unwrap();
        frame(dir.path(), "a.png");
        let body = format!("{HEADER}p1,p1-1,sitting,0,asian,a.png,0,0,1.6\np1,p1-1,sitting,0,asian,a.png,5,0,2.0\n");
        let m = write(dir.path(), "manifest.csv", &body);
        match load_manifest(&m) {
            Err(GazeError::Schema { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn missing_frame_is_listed() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!("{HEADER}p1,p1-1,sitting,1,other,nope.png,0,0,1.6\n");
        let m = write(dir.path(), "manifest.csv", &body);
        match load_manifest(&m) {
            Err(GazeError::MissingFiles(p)) => assert!(p[0].ends_with("nope.png")),
            other => panic!("expected missing files, got {other:?}"),
        }
        assert!(matches!(load_manifest(&dir.path().join("absent.csv")), Err(GazeError::Io { .. })));
    }

    #[test]
    fn bad_fields_are_schema_errors() {
        let dir = tempfile::tempdir().unwrap();
        frame(dir.path(), "a.png");
        for row in [
            "p1,p1-1,crouching,0,asian,a.png,0,0,1.6",
            "p1,p1-1,sitting,2,asian,a.png,0,0,1.6",
            "p1,p1-1,sitting,0,martian,a.png,0,0,1.6",
            "p1,p1-1,sitting,0,asian,a.png,x,0,1.6",
        ] {
            let m = write(dir.path(), "manifest.csv", &format!("{HEADER}{row}\n"));
            assert!(matches!(load_manifest(&m), Err(GazeError::Schema { line: 2, .. })), "{row}");
        }
        let m = write(dir.path(), "manifest.csv", "subject,session\n");
        assert!(matches!(load_manifest(&m), Err(GazeError::Schema { line: 1, .. })));
    }

    #[test]
    fn sidecar_annotations_are_attached() {
        let dir = tempfile::tempdir().unwrap();
        frame(dir.path(), "a.png");
        let m = write(dir.path(), "manifest.csv", &format!("{HEADER}p1,p1-1,lying,0,caucasian,a.png,2,3,1.6\n"));
        write(dir.path(), ANNOTATIONS_FILE, "frame_path,side,x,y,w,h\na.png,left,4,1,3,3\na.png,right,0,1,3,3\n");
        let c = load_manifest(&m).unwrap();
        assert_eq!(c.candidates(0).unwrap().len(), 2);
        assert_eq!(c.candidates(0).unwrap()[0].side, EyeSide::Left);
    }

    #[test]
    fn synthetic_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = crate::dataset::SynthConfig {
            n_subjects: 2,
            frames_per_point: 1,
            ..Default::default()
        };
        let synth = crate::dataset::synth_generate(cfg).unwrap();
        let m = write_corpus(&synth, dir.path()).unwrap();
        let back = load_manifest(&m).unwrap();
        assert_eq!(back.len(), synth.len());
        assert_eq!(back.records[5].grid, synth.records[5].grid);
        assert_eq!(back.candidates(5).unwrap(), synth.candidates(5).unwrap());
        // 8-bit quantization only
        let (a, b) = (back.frame(5).unwrap(), synth.frame(5).unwrap());
        assert!(a.pixels().iter().zip(b.pixels()).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-12));
    }
}
