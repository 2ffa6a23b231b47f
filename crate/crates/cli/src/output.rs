//! CSV sink shared by the subcommands.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use crate::error::CliResult;

/// Where a subcommand writes its table.
#[derive(Debug, Clone)]
pub enum Destination {
    Stdout,
    File(PathBuf),
}

impl Destination {
    /// `--out <dir>` wins over the config's `output` file; stdout otherwise.
    pub fn resolve(out_dir: Option<&PathBuf>, config_output: Option<&PathBuf>, subcommand: &str) -> Self {
        match (out_dir, config_output) {
            (Some(dir), _) => Destination::File(dir.join(format!("{subcommand}.csv"))),
            (None, Some(path)) => Destination::File(path.clone()),
            (None, None) => Destination::Stdout,
        }
    }

    pub fn open(&self) -> CliResult<Table> {
        let sink: Box<dyn Write> = match self {
            Destination::Stdout => Box::new(io::stdout().lock()),
            Destination::File(path) => {
                if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                    fs::create_dir_all(parent)?;
                }
                Box::new(BufWriter::new(File::create(path)?))
            }
        };
        Ok(Table {
            writer: csv::WriterBuilder::new()
                .terminator(csv::Terminator::CRLF)
                .from_writer(sink),
        })
    }
}

/// Shortest round-trip representation; exponent form for very small or large magnitudes.
pub fn num(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || !v.is_finite() || (1e-5..1e16).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub struct Table {
    writer: csv::Writer<Box<dyn Write>>,
}

impl Table {
    pub fn row<I, T>(&mut self, fields: I) -> CliResult<()>
    where
        I: IntoIterator<Item = T>,
        T: AsRef<[u8]>,
    {
        self.writer.write_record(fields)?;
        Ok(())
    }

    pub fn finish(mut self) -> CliResult<()> {
        self.writer.flush()?;
        Ok(())
    }
}
