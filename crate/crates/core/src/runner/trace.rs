use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column order of the trace CSV.
pub const TRACE_HEADER: [&str; 12] = [
    "run_id",
    "repetition",
    "iteration",
    "wall_ms",
    "elbo",
    "variance_ratio",
    "test_lppd",
    "estimator",
    "family",
    "model",
    "num_samples",
    "seed",
];

/// One evaluation record. A failed repetition ends with a row whose `elbo` is NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub run_id: String,
    pub repetition: u32,
    pub iteration: u64,
    /// Cumulative milliseconds spent in update steps.
    pub wall_ms: f64,
    pub elbo: f64,
    pub variance_ratio: Option<f64>,
    pub test_lppd: Option<f64>,
    pub estimator: String,
    pub family: String,
    pub model: String,
    pub num_samples: usize,
    pub seed: u64,
}

impl TraceRow {
    pub fn is_failure(&self) -> bool {
        self.elbo.is_nan()
    }
}

/// Serialised CSV writer; the header is written on creation.
pub struct TraceWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl TraceWriter<File> {
    pub fn create(path: &Path) -> Result<Self> {
        Self::new(File::create(path)?)
    }
}

impl<W: Write> TraceWriter<W> {
    pub fn new(sink: W) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new()
            .has_headers(false)
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(sink);
        inner.write_record(TRACE_HEADER)?;
        Ok(TraceWriter { inner })
    }

    pub fn write(&mut self, row: &TraceRow) -> Result<()> {
        self.inner.serialize(row)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        self.inner
            .into_inner()
            .map_err(|e| Error::Io(std::io::Error::new(e.error().kind(), e.error().to_string())))
    }
}

/// Parse a trace, rejecting any header other than [`TRACE_HEADER`].
pub fn parse_trace(text: &str) -> Result<Vec<TraceRow>> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    if header.iter().ne(TRACE_HEADER.iter().copied()) {
        return Err(Error::Schema(format!(
            "trace header mismatch: expected `{}`, found `{}`",
            TRACE_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    parse_trace(&std::fs::read_to_string(path)?)
}
