//! CSV readers, output buffering and atomic file writes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tokenq_core::sim::LatencyModel;

use crate::error::{CliError, Result};

/// Header of the calibration CSV.
pub const CALIBRATION_HEADER: [&str; 4] = ["input_tokens", "output_tokens", "batch_size", "latency_s"];

/// One calibration measurement.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct CalibrationRow {
    pub input_tokens: f64,
    pub output_tokens: f64,
    pub batch_size: f64,
    pub latency_s: f64,
}

/// The file `tokenq fit` writes. Its `model` field has the same shape as a
/// `[latency]` config section, so the file can be referenced from configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub model: LatencyModel,
    pub residuals: Vec<f64>,
    pub max_abs_residual: f64,
    pub points: usize,
    #[serde(default)]
    pub manifest_hash: Option<String>,
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

fn check_header(path: &Path, reader: &mut csv::Reader<std::fs::File>, want: &[&str]) -> Result<()> {
    let got = reader.headers().map_err(|e| csv_error(path, e))?;
    let got: Vec<&str> = got.iter().map(str::trim).collect();
    if got != want {
        return Err(CliError::Input(format!(
            "{}: header must be `{}`, found `{}`",
            path.display(),
            want.join(","),
            got.join(",")
        )));
    }
    Ok(())
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

pub fn read_calibration(path: &Path) -> Result<Vec<CalibrationRow>> {
    let mut r = open_csv(path)?;
    check_header(path, &mut r, &CALIBRATION_HEADER)?;
    let rows =
        r.deserialize().collect::<std::result::Result<Vec<CalibrationRow>, _>>().map_err(|e| csv_error(path, e))?;
    if rows.is_empty() {
        return Err(CliError::Input(format!("{}: no calibration rows", path.display())));
    }
    for (i, row) in rows.iter().enumerate() {
        let ok = [row.input_tokens, row.output_tokens, row.batch_size, row.latency_s].iter().all(|v| v.is_finite())
            && row.batch_size >= 1.0
            && row.batch_size.fract() == 0.0;
        if !ok {
            return Err(CliError::Input(format!("{}: row {} has a bad value", path.display(), i + 2)));
        }
    }
    Ok(rows)
}

/// `tokens,probability` rows.
pub fn read_token_pmf(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut r = open_csv(path)?;
    check_header(path, &mut r, &["tokens", "probability"])?;
    r.deserialize().collect::<std::result::Result<Vec<(f64, f64)>, _>>().map_err(|e| csv_error(path, e))
}

/// One token count per line; blank lines and `#` comments are skipped.
pub fn read_samples(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| (i, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(i, l)| {
            l.parse::<f64>()
                .map_err(|_| CliError::Input(format!("{}:{}: `{l}` is not a number", path.display(), i + 1)))
        })
        .collect()
}

/// A CSV table built in memory.
pub struct Table {
    writer: csv::Writer<Vec<u8>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Result<Self> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(header).map_err(|e| CliError::Input(e.to_string()))?;
        Ok(Self { writer })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(fields).map_err(|e| CliError::Input(e.to_string()))
    }

    pub fn into_bytes(self) -> Result<Vec<u8>> {
        self.writer.into_inner().map_err(|e| CliError::Input(e.to_string()))
    }
}

/// Formats an optional number for a CSV cell; absent values are empty.
pub fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Files produced by a command, held until every computation has finished.
#[derive(Default)]
pub struct Outputs {
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    pub fn add_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Numerical(format!("{name}: {e}")))?;
        bytes.push(b'\n');
        self.add(name, bytes);
        Ok(())
    }

    pub fn files(&self) -> &[(String, Vec<u8>)] {
        &self.files
    }

    /// Writes every file through a temporary name and a rename, so a reader
    /// never sees a half-written output.
    pub fn write_all(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let mut written = Vec::with_capacity(self.files.len());
        for (name, bytes) in &self.files {
            let path = dir.join(name);
            write_atomic(&path, bytes)?;
            written.push(path);
        }
        Ok(written)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibration_header_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        std::fs::write(&p, "input_tokens,output_tokens,batch_size,latency_s\n128,128,1,2.91\n").unwrap();
        assert_eq!(read_calibration(&p).unwrap()[0].latency_s, 2.91);
        std::fs::write(&p, "tokens,latency\n128,2.91\n").unwrap();
        assert!(matches!(read_calibration(&p), Err(CliError::Input(_))));
        std::fs::write(&p, "input_tokens,output_tokens,batch_size,latency_s\n128,128,0.5,2.91\n").unwrap();
        assert!(read_calibration(&p).is_err());
    }

    #[test]
    fn samples_skip_comments() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.txt");
        std::fs::write(&p, "# tokens\n10\n\n20\n").unwrap();
        assert_eq!(read_samples(&p).unwrap(), vec![10.0, 20.0]);
        std::fs::write(&p, "ten\n").unwrap();
        assert!(read_samples(&p).is_err());
    }

    #[test]
    fn outputs_written_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = Outputs::default();
        out.add("a.txt", b"x".to_vec());
        out.add_json("b.json", &serde_json::json!({"k": 1})).unwrap();
        out.write_all(dir.path()).unwrap();
        assert_eq!(std::fs::read(dir.path().join("a.txt")).unwrap(), b"x");
        let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 2);
    }
}
