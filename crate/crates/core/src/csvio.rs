use std::fs::File;
use std::path::Path;
use std::str::FromStr;

use csv::{Reader, ReaderBuilder, StringRecord, Writer};

use crate::error::{Error, Result};

pub(crate) struct Table {
    pub path: String,
    reader: Reader<File>,
    headers: StringRecord,
}

impl Table {
    pub fn open(path: &Path) -> Result<Self> {
        let name = path.display().to_string();
        let mut reader = ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| csv_error(&name, e))?;
        let headers = reader.headers().map_err(|e| csv_error(&name, e))?.clone();
        Ok(Self {
            path: name,
            reader,
            headers,
        })
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema {
                path: self.path.clone(),
                column: name.into(),
            })
    }

    /// Rows with their 1-based line numbers.
    pub fn rows(&mut self) -> impl Iterator<Item = Result<(usize, StringRecord)>> + '_ {
        let path = self.path.clone();
        let width = self.headers.len();
        self.reader.records().map(move |r| {
            let rec = r.map_err(|e| csv_error(&path, e))?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            if rec.len() != width {
                return Err(Error::Parse {
                    path: path.clone(),
                    line,
                    message: format!("expected {width} fields, found {}", rec.len()),
                });
            }
            Ok((line, rec))
        })
    }
}

pub(crate) fn field<T: FromStr>(
    path: &str,
    line: usize,
    rec: &StringRecord,
    idx: usize,
    what: &str,
) -> Result<T> {
    let raw = &rec[idx];
    raw.parse().map_err(|_| Error::Parse {
        path: path.into(),
        line,
        message: format!("cannot parse {what} from `{raw}`"),
    })
}

fn csv_error(path: &str, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        csv::ErrorKind::UnequalLengths {
            expected_len, len, ..
        } => Error::Parse {
            path: path.into(),
            line,
            message: format!("expected {expected_len} fields, found {len}"),
        },
        other => Error::Parse {
            path: path.into(),
            line,
            message: format!("{other:?}"),
        },
    }
}

pub(crate) fn writer(path: &Path) -> Result<Writer<File>> {
    Writer::from_path(path).map_err(|e| csv_error(&path.display().to_string(), e))
}

pub(crate) fn write_row<I, S>(w: &mut Writer<File>, path: &Path, row: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    w.write_record(row)
        .map_err(|e| csv_error(&path.display().to_string(), e))
}

pub(crate) fn finish(mut w: Writer<File>) -> Result<()> {
    w.flush()?;
    Ok(())
}

/// `v` rounded to 12 significant digits, in its shortest decimal form.
pub fn fmt_f64(v: f64) -> String {
    if !v.is_finite() {
        return "NA".into();
    }
    let rounded: f64 = format!("{v:.11e}").parse().unwrap_or(v);
    format!("{rounded:?}")
}
