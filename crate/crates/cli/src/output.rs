use std::io::Write;

use clap::ValueEnum;
use serde::{Serialize, Serializer};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Human,
    Json,
}

pub fn json<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    writeln!(out, "{text}")?;
    Ok(())
}

/// RFC 4180 CSV with a header row taken from the field names.
pub fn csv<T: Serialize>(out: &mut dyn Write, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn rows<T: Serialize>(out: &mut dyn Write, format: super::Format, rows: &[T]) -> Result<(), CliError> {
    match format {
        Format::Human => csv(out, rows),
        Format::Json => json(out, &rows),
    }
}

/// `Option<f64>` with infinities spelled out; `None` is an empty CSV cell.
pub fn opt_rate<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(x) => treerate::serde_rate::serialize(x, s),
        None => s.serialize_none(),
    }
}

/// Human rendering of a rate.
pub fn fmt_rate(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{v:.10e}")
    }
}
