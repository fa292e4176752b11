//! Per-epoch (or per-step) optimizer records shared by every method.

use std::io;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub epoch: usize,
    pub objective: f64,
    pub cost_overrun: f64,
    pub beta: f64,
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, r: TraceRecord) {
        self.records.push(r);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    /// Drops wall-clock readings so two runs can be compared byte for byte.
    pub fn zero_times(&mut self) {
        for r in &mut self.records {
            r.elapsed_ms = 0.0;
        }
    }

    /// CSV with header `epoch,objective,cost_overrun,beta,elapsed_ms`.
    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.records {
            out.serialize(r)?;
        }
        if self.records.is_empty() {
            out.write_record(["epoch", "objective", "cost_overrun", "beta", "elapsed_ms"])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: io::Read>(r: R) -> Result<Self, csv::Error> {
        let mut rdr = csv::Reader::from_reader(r);
        let records = rdr.deserialize().collect::<Result<Vec<TraceRecord>, _>>()?;
        Ok(Trace { records })
    }
}
