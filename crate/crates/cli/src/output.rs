//! CSV histories and 16-bit PGM images.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use csv::{Terminator, WriterBuilder};
use nalgebra::DVector;
use sdkrylov::solvers::IterRecord;

use crate::error::CliError;

pub const SCHEMA_LINE: &str = "# schema=1";

pub const HISTORY_HEADER: [&str; 8] = [
    "iter",
    "lambda",
    "alpha",
    "gcv",
    "res_proj",
    "relerr",
    "relerr_s1",
    "relerr_s2",
];

/// CSV file with the schema comment line and CRLF record endings.
pub struct CsvFile {
    inner: csv::Writer<BufWriter<File>>,
    path: std::path::PathBuf,
}

impl CsvFile {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self, CliError> {
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        let mut buf = BufWriter::new(file);
        write!(buf, "{SCHEMA_LINE}\r\n").map_err(|e| CliError::io(path, e))?;
        let mut inner = WriterBuilder::new()
            .terminator(Terminator::CRLF)
            .from_writer(buf);
        inner
            .write_record(header)
            .map_err(|e| CliError::io(path, e))?;
        Ok(Self {
            inner,
            path: path.to_path_buf(),
        })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.inner
            .write_record(fields)
            .map_err(|e| CliError::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.inner.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

/// Shortest round-trip text; non-finite values become empty fields.
pub fn num(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn history_fields(r: &IterRecord) -> Vec<String> {
    vec![
        r.iter.to_string(),
        num(r.lambda),
        num(r.alpha),
        num(r.gcv),
        num(r.res_proj),
        opt(r.relerr),
        opt(r.relerr_s1),
        opt(r.relerr_s2),
    ]
}

pub fn write_history(path: &Path, history: &[IterRecord]) -> Result<(), CliError> {
    let mut csv = CsvFile::create(path, &HISTORY_HEADER)?;
    for r in history {
        csv.row(history_fields(r))?;
    }
    csv.finish()
}

/// Linear scaling used for an image: `value = min + (max − min)·sample/65535`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scaling {
    pub min: f64,
    pub max: f64,
}

/// Encodes `values` as a binary 16-bit PGM of `width` columns; rows follow the vector order.
pub fn encode_pgm(values: &DVector<f64>, width: usize) -> (Vec<u8>, Scaling) {
    let height = values.len() / width;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    out.reserve(2 * values.len());
    for &v in values.iter() {
        let q = if span > 0.0 {
            ((v - min) / span * 65535.0).round().clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        out.extend_from_slice(&q.to_be_bytes());
    }
    (out, Scaling { min, max })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Writes `name.pgm` for each image and a shared `scaling.txt` sidecar.
pub fn write_images(
    dir: &Path,
    images: &[(&str, &DVector<f64>)],
    width: usize,
) -> Result<(), CliError> {
    let mut sidecar = String::from("# value = min + (max - min) * sample / 65535\n");
    for (name, values) in images {
        let (bytes, scale) = encode_pgm(values, width);
        write_file(&dir.join(format!("{name}.pgm")), &bytes)?;
        sidecar += &format!("{name}.min = {}\n{name}.max = {}\n", scale.min, scale.max);
    }
    write_file(&dir.join("scaling.txt"), sidecar.as_bytes())
}
