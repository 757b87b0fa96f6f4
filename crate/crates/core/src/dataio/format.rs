//! Native on-disk dataset.
//!
//! Signal file, one per patient (integers little-endian):
//!
//! ```text
//! magic        4 bytes  "PMAE"
//! version      u32      1
//! n_modalities u32      4 (EEG, EMG, EOG, ECG)
//! sample_rate  f32      Hz
//! n_samples    u32      samples per modality
//! payload      f32 x n_samples, for each modality in order
//! ```
//!
//! Labels live in a side-car `<id>.labels.csv` (`window,stage,arousal`) and
//! the dataset manifest lists every patient with its files and demographics.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::record::{Channel, Demographics, PatientRecord, WindowLabel, N_MODALITIES};
use super::split::{Role, SplitManifest};
use crate::error::{Error, Result};
use crate::numerics::checkpoint::Reader;

pub const SIGNAL_MAGIC: &[u8; 4] = b"PMAE";
pub const SIGNAL_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "dataset.csv";

pub fn encode_signal(record: &PatientRecord) -> Result<Vec<u8>> {
    record.validate()?;
    let n = record.n_samples();
    let mut out = Vec::with_capacity(20 + N_MODALITIES * n * 4);
    out.extend_from_slice(SIGNAL_MAGIC);
    out.extend_from_slice(&SIGNAL_VERSION.to_le_bytes());
    out.extend_from_slice(&(N_MODALITIES as u32).to_le_bytes());
    out.extend_from_slice(&(record.sample_rate() as f32).to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    for ch in &record.channels {
        for &v in &ch.samples {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_signal(bytes: &[u8], path: &Path) -> Result<Vec<Channel>> {
    let mut r = Reader::new(bytes, path);
    if r.take(4)? != SIGNAL_MAGIC {
        return Err(Error::format(path, "bad signal magic"));
    }
    let version = r.u32()?;
    if version != SIGNAL_VERSION {
        return Err(Error::format(path, format!("unsupported signal version {version}")));
    }
    let nm = r.u32()? as usize;
    if nm != N_MODALITIES {
        return Err(Error::format(path, format!("expected {N_MODALITIES} modalities, found {nm}")));
    }
    let fs = f64::from(r.f32()?);
    let n = r.u32()? as usize;
    let mut channels = Vec::with_capacity(nm);
    for _ in 0..nm {
        let samples = (0..n).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
        channels.push(Channel { samples, sample_rate: fs });
    }
    if !r.finished() {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    Ok(channels)
}

/// Opens a CSV writer, first emitting `# <line>` for each comment line.
pub fn csv_writer(path: &Path, comments: &[String]) -> Result<csv::Writer<BufWriter<File>>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut file = BufWriter::new(File::create(path)?);
    for c in comments {
        writeln!(file, "# {c}")?;
    }
    Ok(csv::Writer::from_writer(file))
}

/// Reads a CSV with a header row, skipping `#` comment lines.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).map_err(|e| csv_err(path, e))?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        rows.push(rec.map_err(|e| csv_err(path, e))?.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

pub fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

fn expect_header(path: &Path, got: &[String], want: &[&str]) -> Result<()> {
    if got.len() != want.len() || got.iter().zip(want).any(|(a, b)| a != b) {
        return Err(Error::format(path, format!("expected columns {}", want.join(","))));
    }
    Ok(())
}

fn parse<T: std::str::FromStr>(path: &Path, field: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::format(path, format!("bad {field} value '{v}'")))
}

pub fn write_labels(path: &Path, labels: &[WindowLabel]) -> Result<()> {
    let mut w = csv_writer(path, &[])?;
    w.write_record(["window", "stage", "arousal"]).map_err(|e| csv_err(path, e))?;
    for (i, l) in labels.iter().enumerate() {
        w.write_record([i.to_string(), l.stage.code().into(), u8::from(l.arousal).to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<WindowLabel>> {
    let (header, rows) = read_csv(path)?;
    expect_header(path, &header, &["window", "stage", "arousal"])?;
    let mut out = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let idx: usize = parse(path, "window", &row[0])?;
        if idx != i {
            return Err(Error::format(path, format!("window {idx} out of order")));
        }
        let arousal = match row[2].as_str() {
            "0" => false,
            "1" => true,
            v => return Err(Error::format(path, format!("bad arousal value '{v}'"))),
        };
        out.push(WindowLabel { stage: parse(path, "stage", &row[1])?, arousal });
    }
    Ok(out)
}

/// One manifest row. File names are relative to the manifest directory.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    pub patient_id: String,
    pub signal_file: String,
    pub label_file: Option<String>,
    pub demographics: Demographics,
}

const DATASET_COLUMNS: [&str; 6] = ["patient_id", "signal_file", "label_file", "labeled", "age", "gender"];

/// Writes signal and label files plus the manifest into `dir`.
pub fn write_dataset(dir: &Path, records: &[PatientRecord], comments: &[String]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut sorted: Vec<&PatientRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    let manifest = dir.join(MANIFEST_FILE);
    let mut w = csv_writer(&manifest, comments)?;
    w.write_record(DATASET_COLUMNS).map_err(|e| csv_err(&manifest, e))?;
    for rec in sorted {
        let signal_file = format!("{}.pmae", rec.patient_id);
        fs::write(dir.join(&signal_file), encode_signal(rec)?)?;
        let label_file = match &rec.labels {
            Some(l) => {
                let name = format!("{}.labels.csv", rec.patient_id);
                write_labels(&dir.join(&name), l)?;
                name
            }
            None => String::new(),
        };
        w.write_record([
            rec.patient_id.clone(),
            signal_file,
            label_file.clone(),
            u8::from(!label_file.is_empty()).to_string(),
            format!("{:.3}", rec.demographics.age_years),
            rec.demographics.gender.code().to_string(),
        ])
        .map_err(|e| csv_err(&manifest, e))?;
    }
    w.flush()?;
    Ok(manifest)
}

pub fn read_dataset_manifest(path: &Path) -> Result<Vec<DatasetEntry>> {
    let (header, rows) = read_csv(path)?;
    expect_header(path, &header, &DATASET_COLUMNS)?;
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let labeled = row[3] == "1";
        if labeled == row[2].is_empty() {
            return Err(Error::format(path, format!("{}: labeled flag disagrees with label file", row[0])));
        }
        out.push(DatasetEntry {
            patient_id: row[0].clone(),
            signal_file: row[1].clone(),
            label_file: labeled.then(|| row[2].clone()),
            demographics: Demographics {
                age_years: parse(path, "age", &row[4])?,
                gender: parse(path, "gender", &row[5])?,
            },
        });
    }
    out.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    if out.windows(2).any(|w| w[0].patient_id == w[1].patient_id) {
        return Err(Error::format(path, "duplicate patient id"));
    }
    Ok(out)
}

pub fn load_entry(dir: &Path, entry: &DatasetEntry) -> Result<PatientRecord> {
    let sig = dir.join(&entry.signal_file);
    if !sig.exists() {
        return Err(Error::MissingFile(sig));
    }
    let channels = decode_signal(&fs::read(&sig)?, &sig)?;
    let labels = match &entry.label_file {
        Some(f) => Some(read_labels(&dir.join(f))?),
        None => None,
    };
    let rec = PatientRecord { patient_id: entry.patient_id.clone(), channels, labels, demographics: entry.demographics };
    rec.validate()?;
    Ok(rec)
}

/// Loads every patient listed in a dataset manifest, sorted by id.
pub fn load_dataset(manifest: &Path) -> Result<Vec<PatientRecord>> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    read_dataset_manifest(manifest)?.iter().map(|e| load_entry(dir, e)).collect()
}

pub fn write_split(path: &Path, split: &SplitManifest, comments: &[String]) -> Result<()> {
    split.check()?;
    let mut w = csv_writer(path, comments)?;
    w.write_record(["patient_id", "role"]).map_err(|e| csv_err(path, e))?;
    for (id, role) in split.rows() {
        w.write_record([id.as_str(), role.name()]).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_split(path: &Path) -> Result<SplitManifest> {
    let (header, rows) = read_csv(path)?;
    expect_header(path, &header, &["patient_id", "role"])?;
    let rows = rows
        .into_iter()
        .map(|r| Ok((r[0].clone(), Role::parse(&r[1])?)))
        .collect::<Result<Vec<_>>>()?;
    SplitManifest::from_rows(rows)
}

/// Imports recordings from a foreign format into a [`PatientRecord`].
pub trait RecordConverter {
    fn name(&self) -> &str;
    fn convert(&self, source: &Path, patient_id: &str, demographics: Demographics) -> Result<PatientRecord>;
}

/// Text export with one row per sample and columns `eeg,emg,eog,ecg`.
pub struct CsvColumnsConverter {
    pub sample_rate_hz: f64,
}

impl RecordConverter for CsvColumnsConverter {
    fn name(&self) -> &str {
        "csv-columns"
    }

    fn convert(&self, source: &Path, patient_id: &str, demographics: Demographics) -> Result<PatientRecord> {
        let (header, rows) = read_csv(source)?;
        expect_header(source, &header, &["eeg", "emg", "eog", "ecg"])?;
        let mut channels: Vec<Vec<f64>> = vec![Vec::with_capacity(rows.len()); N_MODALITIES];
        for row in &rows {
            for (ch, v) in channels.iter_mut().zip(row) {
                ch.push(parse(source, "sample", v)?);
            }
        }
        let rec = PatientRecord {
            patient_id: patient_id.to_string(),
            channels: channels.into_iter().map(|samples| Channel { samples, sample_rate: self.sample_rate_hz }).collect(),
            labels: None,
            demographics,
        };
        rec.validate()?;
        Ok(rec)
    }
}
