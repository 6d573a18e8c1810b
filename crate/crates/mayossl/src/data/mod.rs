//! Dataset ingestion: labeled image manifests, deterministic stratified
//! splits and subsamples, class weights, and a synthetic desk-scale corpus.

pub mod split;
pub mod synthetic;

pub use split::{class_weights, patient_grouped_split, stratified_split, subsample, ClassWeights, SplitPlan};
pub use synthetic::{generate_synthetic, generate_synthetic_with_counts, SynthSpec};

use crate::error::{Error, Result};
use ndarray::Array3;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub const N_CLASSES: usize = 4;

/// One labeled image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub path: PathBuf,
    /// Mayo Endoscopic Score, 0..=3.
    pub mes_class: u8,
    pub patient_id: Option<String>,
    pub procedure_id: Option<String>,
}

/// Ordered collection of records with per-class counts.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub records: Vec<ImageRecord>,
    pub class_counts: [u64; N_CLASSES],
}

/// Directory layouts understood by [`load_manifest`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// One subdirectory per class (default names `Mayo_0`..`Mayo_3`).
    ClassFolders,
    /// UTF-8 CSV with header `path,mes_class[,patient_id,procedure_id]`.
    CsvManifest,
}

/// Mapping from class-folder names to MES classes.
#[derive(Debug, Clone)]
pub struct ClassNaming(pub BTreeMap<String, u8>);

impl Default for ClassNaming {
    fn default() -> Self {
        let mut m = BTreeMap::new();
        for k in 0..N_CLASSES as u8 {
            m.insert(format!("Mayo_{k}"), k);
        }
        ClassNaming(m)
    }
}

impl Manifest {
    pub fn from_records(mut records: Vec<ImageRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::validation("manifest contains zero images"));
        }
        let mut counts = [0u64; N_CLASSES];
        for r in &records {
            if r.mes_class as usize >= N_CLASSES {
                return Err(Error::validation(format!(
                    "mes_class {} outside 0..{} at {}",
                    r.mes_class,
                    N_CLASSES - 1,
                    r.path.display()
                )));
            }
            counts[r.mes_class as usize] += 1;
        }
        records.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(Manifest {
            records,
            class_counts: counts,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Indices of records per class, in manifest order.
    pub fn indices_by_class(&self) -> [Vec<usize>; N_CLASSES] {
        let mut by_class: [Vec<usize>; N_CLASSES] = Default::default();
        for (i, r) in self.records.iter().enumerate() {
            by_class[r.mes_class as usize].push(i);
        }
        by_class
    }
}

/// Load a manifest from disk; ordering is lexicographic by path so repeated
/// loads are identical across file systems.
pub fn load_manifest(root: &Path, layout: Layout) -> Result<Manifest> {
    load_manifest_with(root, layout, &ClassNaming::default())
}

pub fn load_manifest_with(root: &Path, layout: Layout, naming: &ClassNaming) -> Result<Manifest> {
    if !root.exists() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "root does not exist"),
        ));
    }
    match layout {
        Layout::ClassFolders => load_class_folders(root, naming),
        Layout::CsvManifest => load_csv_manifest(root),
    }
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
        Some(ref e) if e == "png" || e == "jpg" || e == "jpeg"
    )
}

fn load_class_folders(root: &Path, naming: &ClassNaming) -> Result<Manifest> {
    let mut records = Vec::new();
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let dir = entry.path();
        if !dir.is_dir() {
            continue;
        }
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let Some(&class) = naming.0.get(&name) else {
            return Err(Error::validation(format!(
                "unknown class folder {name:?} under {}",
                root.display()
            )));
        };
        let files = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for f in files {
            let f = f.map_err(|e| Error::io(&dir, e))?;
            let p = f.path();
            if p.is_file() && is_image_file(&p) {
                records.push(ImageRecord {
                    path: p,
                    mes_class: class,
                    patient_id: None,
                    procedure_id: None,
                });
            }
        }
    }
    Manifest::from_records(records)
}

fn load_csv_manifest(csv_path: &Path) -> Result<Manifest> {
    let base = csv_path.parent().unwrap_or_else(|| Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(csv_path)
        .map_err(|e| Error::validation(format!("csv open {}: {e}", csv_path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::validation(format!("csv headers: {e}")))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(path_col), Some(class_col)) = (col("path"), col("mes_class")) else {
        return Err(Error::validation(
            "csv manifest requires path and mes_class columns",
        ));
    };
    let patient_col = col("patient_id");
    let procedure_col = col("procedure_id");

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::validation(format!("csv row: {e}")))?;
        let rel = row
            .get(path_col)
            .ok_or_else(|| Error::validation("csv row missing path"))?;
        let class: u8 = row
            .get(class_col)
            .ok_or_else(|| Error::validation("csv row missing mes_class"))?
            .trim()
            .parse()
            .map_err(|_| Error::validation(format!("unparseable mes_class for {rel}")))?;
        let opt = |c: Option<usize>| {
            c.and_then(|i| row.get(i))
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
        };
        let path = if Path::new(rel).is_absolute() {
            PathBuf::from(rel)
        } else {
            base.join(rel)
        };
        records.push(ImageRecord {
            path,
            mes_class: class,
            patient_id: opt(patient_col),
            procedure_id: opt(procedure_col),
        });
    }
    Manifest::from_records(records)
}

/// An ordered subset of a manifest. Label-hidden views are handed to the
/// pretext trainers; attempting to read labels through one is a bug.
#[derive(Debug, Clone)]
pub struct DatasetView {
    pub manifest: Arc<Manifest>,
    pub indices: Vec<usize>,
    pub label_visible: bool,
}

impl DatasetView {
    pub fn new(manifest: Arc<Manifest>, indices: Vec<usize>, label_visible: bool) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for &i in &indices {
            if i >= manifest.len() {
                return Err(Error::validation(format!("view index {i} out of range")));
            }
            if !seen.insert(i) {
                return Err(Error::validation(format!("view index {i} duplicated")));
            }
        }
        Ok(Self {
            manifest,
            indices,
            label_visible,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn record(&self, pos: usize) -> &ImageRecord {
        &self.manifest.records[self.indices[pos]]
    }

    pub fn label(&self, pos: usize) -> u8 {
        assert!(self.label_visible, "labels are hidden on this view");
        self.record(pos).mes_class
    }

    /// Per-class counts within the view.
    pub fn class_counts(&self) -> [u64; N_CLASSES] {
        let mut counts = [0u64; N_CLASSES];
        for &i in &self.indices {
            counts[self.manifest.records[i].mes_class as usize] += 1;
        }
        counts
    }
}

/// Decode an image file into an HxWx3 array in [0,1].
pub fn load_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((h as usize, w as usize, 3));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[y as usize, x as usize, c]] = p.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn touch_png(path: &Path) {
        // 1x1 gray png
        let img = image::RgbImage::from_pixel(1, 1, image::Rgb([128, 128, 128]));
        img.save(path).unwrap();
    }

    #[test]
    fn class_folders_layout_counts_and_ordering() {
        let dir = tempfile::tempdir().unwrap();
        for (k, n) in [(0usize, 3usize), (1, 2), (2, 1), (3, 1)] {
            let sub = dir.path().join(format!("Mayo_{k}"));
            std::fs::create_dir(&sub).unwrap();
            for i in 0..n {
                touch_png(&sub.join(format!("img_{i}.png")));
            }
        }
        let m = load_manifest(dir.path(), Layout::ClassFolders).unwrap();
        assert_eq!(m.class_counts, [3, 2, 1, 1]);
        assert_eq!(m.len(), 7);
        let paths: Vec<_> = m.records.iter().map(|r| r.path.clone()).collect();
        let mut sorted = paths.clone();
        sorted.sort();
        assert_eq!(paths, sorted);
    }

    #[test]
    fn one_file_per_class_gives_unit_counts() {
        let dir = tempfile::tempdir().unwrap();
        for k in 0..4 {
            let sub = dir.path().join(format!("Mayo_{k}"));
            std::fs::create_dir(&sub).unwrap();
            touch_png(&sub.join("only.png"));
        }
        let m = load_manifest(dir.path(), Layout::ClassFolders).unwrap();
        assert_eq!(m.class_counts, [1, 1, 1, 1]);
    }

    #[test]
    fn unknown_class_folder_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("Mayo_7");
        std::fs::create_dir(&sub).unwrap();
        touch_png(&sub.join("img.png"));
        assert!(matches!(
            load_manifest(dir.path(), Layout::ClassFolders),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn empty_tree_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_manifest(dir.path(), Layout::ClassFolders),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn missing_root_is_an_io_error() {
        assert!(matches!(
            load_manifest(Path::new("/nonexistent/corpus"), Layout::ClassFolders),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn csv_manifest_roundtrip_and_out_of_range_class() {
        let dir = tempfile::tempdir().unwrap();
        touch_png(&dir.path().join("a.png"));
        touch_png(&dir.path().join("b.png"));
        let csv = dir.path().join("manifest.csv");
        let mut f = std::fs::File::create(&csv).unwrap();
        writeln!(f, "path,mes_class,patient_id,procedure_id").unwrap();
        writeln!(f, "a.png,0,p1,proc1").unwrap();
        writeln!(f, "b.png,3,p2,").unwrap();
        drop(f);
        let m = load_manifest(&csv, Layout::CsvManifest).unwrap();
        assert_eq!(m.class_counts, [1, 0, 0, 1]);
        assert_eq!(m.records[0].patient_id.as_deref(), Some("p1"));
        assert_eq!(m.records[1].procedure_id, None);

        let bad = dir.path().join("bad.csv");
        let mut f = std::fs::File::create(&bad).unwrap();
        writeln!(f, "path,mes_class").unwrap();
        writeln!(f, "a.png,5").unwrap();
        drop(f);
        assert!(matches!(
            load_manifest(&bad, Layout::CsvManifest),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn views_reject_duplicates_and_hide_labels() {
        let dir = tempfile::tempdir().unwrap();
        for k in 0..4 {
            let sub = dir.path().join(format!("Mayo_{k}"));
            std::fs::create_dir(&sub).unwrap();
            touch_png(&sub.join("x.png"));
        }
        let m = Arc::new(load_manifest(dir.path(), Layout::ClassFolders).unwrap());
        assert!(DatasetView::new(m.clone(), vec![0, 0], true).is_err());
        assert!(DatasetView::new(m.clone(), vec![99], true).is_err());
        let v = DatasetView::new(m, vec![0, 1], false).unwrap();
        assert_eq!(v.len(), 2);
        let caught = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| v.label(0)));
        assert!(caught.is_err());
    }
}
