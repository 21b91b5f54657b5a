//! Four-view cases: rasters, on-disk layout, preprocessing, and synthesis.
//!
//! A dataset directory holds `manifest.csv` (header `case_id,label`, label 1 =
//! malignant) and one binary PGM per view named `{case_id}_{VIEW}.pgm`.

mod pgm;
mod preprocess;
mod synth;

pub use pgm::{decode_pgm, encode_pgm, read_pgm, write_pgm};
pub use preprocess::{downsample_avg, preprocess_view, resize_bilinear};
pub use synth::{synth_case, synth_case_planted, synth_dataset, Planted, Side, SynthConfig};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";

/// Grayscale raster, row-major, with samples in `0..2^bit_depth`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    bit_depth: u8,
    pixels: Vec<u16>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, bit_depth: u8, pixels: Vec<u16>) -> Result<Self> {
        if !(1..=16).contains(&bit_depth) {
            return Err(Error::config(format!("bit depth {bit_depth} outside 1..=16")));
        }
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::config(format!(
                "{width}x{height} image needs {} samples, got {}",
                width * height,
                pixels.len()
            )));
        }
        let max = ((1u32 << bit_depth) - 1) as u16;
        if let Some(p) = pixels.iter().find(|&&p| p > max) {
            return Err(Error::config(format!("sample {p} exceeds {bit_depth}-bit range")));
        }
        Ok(Self {
            width,
            height,
            bit_depth,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bit_depth(&self) -> u8 {
        self.bit_depth
    }

    pub fn max_value(&self) -> u16 {
        ((1u32 << self.bit_depth) - 1) as u16
    }

    pub fn pixels(&self) -> &[u16] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.pixels[y * self.width + x]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum View {
    Lcc,
    Rcc,
    Lmlo,
    Rmlo,
}

/// Fixed view order used everywhere: LCC, RCC, LMLO, RMLO.
pub const VIEWS: [View; 4] = [View::Lcc, View::Rcc, View::Lmlo, View::Rmlo];

impl View {
    pub fn name(self) -> &'static str {
        match self {
            View::Lcc => "LCC",
            View::Rcc => "RCC",
            View::Lmlo => "LMLO",
            View::Rmlo => "RMLO",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Benign = 0,
    Malignant = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(v: usize) -> Option<Self> {
        match v {
            0 => Some(Label::Benign),
            1 => Some(Label::Malignant),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaseRecord {
    pub case_id: String,
    /// Indexed by [`View::index`].
    pub views: [GrayImage; 4],
    pub label: Label,
}

impl CaseRecord {
    pub fn view(&self, v: View) -> &GrayImage {
        &self.views[v.index()]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub case_id: String,
    pub label: u8,
}

pub fn view_path(dir: &Path, case_id: &str, view: View) -> PathBuf {
    dir.join(format!("{case_id}_{}.pgm", view.name()))
}

pub fn write_case(case: &CaseRecord, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for v in VIEWS {
        write_pgm(view_path(dir, &case.case_id, v), case.view(v))?;
    }
    Ok(())
}

pub fn read_case(entry: &ManifestEntry, dir: impl AsRef<Path>) -> Result<CaseRecord> {
    let dir = dir.as_ref();
    let label = Label::from_index(entry.label as usize).ok_or_else(|| {
        Error::config(format!("case {}: label {} is not 0 or 1", entry.case_id, entry.label))
    })?;
    let read = |v: View| {
        let path = view_path(dir, &entry.case_id, v);
        if !path.exists() {
            return Err(Error::MissingView {
                case_id: entry.case_id.clone(),
                view: v.name(),
                path,
            });
        }
        read_pgm(&path)
    };
    Ok(CaseRecord {
        case_id: entry.case_id.clone(),
        views: [read(View::Lcc)?, read(View::Rcc)?, read(View::Lmlo)?, read(View::Rmlo)?],
        label,
    })
}

pub fn write_manifest(entries: &[ManifestEntry], dir: impl AsRef<Path>) -> Result<()> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    for e in entries {
        w.serialize(e).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn load_manifest(dir: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let mut r = csv::Reader::from_path(&path).map_err(|e| csv_error(&path, e))?;
    let headers = r.headers().map_err(|e| csv_error(&path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["case_id", "label"] {
        return Err(Error::Format {
            path,
            offset: 0,
            msg: format!("expected header \"case_id,label\", got {:?}", headers.iter().collect::<Vec<_>>()),
        });
    }
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| csv_error(&path, e))?;
        let line = row.position().map_or(0, |p| p.line());
        let label = match row.get(1).map(str::trim) {
            Some("0") => 0,
            Some("1") => 1,
            other => {
                return Err(Error::BadLabel {
                    path,
                    line,
                    value: other.unwrap_or("").to_string(),
                })
            }
        };
        out.push(ManifestEntry {
            case_id: row.get(0).unwrap_or("").to_string(),
            label,
        });
    }
    Ok(out)
}

/// Writes every case's four PGMs plus the manifest, in the given order.
pub fn write_dataset(cases: &[CaseRecord], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for case in cases {
        write_case(case, dir)?;
    }
    let entries: Vec<_> = cases
        .iter()
        .map(|c| ManifestEntry {
            case_id: c.case_id.clone(),
            label: c.label.index() as u8,
        })
        .collect();
    write_manifest(&entries, dir)
}

/// Reads all cases listed in the manifest, in manifest order.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<CaseRecord>> {
    let dir = dir.as_ref();
    load_manifest(dir)?.iter().map(|e| read_case(e, dir)).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            offset,
            msg: format!("{other:?}"),
        },
    }
}
