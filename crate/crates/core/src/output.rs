//! Output files: versioned CSV tables and pretty JSON summaries.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::log::EventLog;

pub const FORMAT_VERSION: u32 = 1;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// An output directory. Each file in it is written by exactly one call.
#[derive(Clone, Debug)]
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(io_err(root))?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn event_log(&self, enabled: bool) -> Result<EventLog> {
        if enabled {
            EventLog::create(&self.path("events.jsonl"))
        } else {
            Ok(EventLog::disabled())
        }
    }

    /// `name` is the table kind, written into the format line.
    pub fn csv<R, I>(&self, file: &str, name: &str, header: &[&str], rows: I) -> Result<PathBuf>
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator,
        R::Item: ToString,
    {
        let path = self.path(file);
        write_csv(&path, name, header, rows)?;
        Ok(path)
    }

    pub fn json<T: Serialize>(&self, file: &str, value: &T) -> Result<PathBuf> {
        let path = self.path(file);
        write_json(&path, value)?;
        Ok(path)
    }
}

pub fn format_line(name: &str) -> String {
    format!("# reloadsim {name} v{FORMAT_VERSION}")
}

/// Writes the format line, the header, then one record per row. An empty
/// `rows` still produces a valid file.
pub fn write_csv<R, I>(path: &Path, name: &str, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: ToString,
{
    let file = File::create(path).map_err(io_err(path))?;
    let mut raw = BufWriter::new(file);
    writeln!(raw, "{}", format_line(name)).map_err(io_err(path))?;
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_writer(raw);
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        let fields: Vec<String> = row.into_iter().map(|f| f.to_string()).collect();
        if fields.len() != header.len() {
            return Err(crate::error::invalid(
                "csv row",
                format!(
                    "{} fields for {} columns in {}",
                    fields.len(),
                    header.len(),
                    path.display()
                ),
            ));
        }
        w.write_record(&fields).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}
