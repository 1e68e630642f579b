//! CSV output. Float formatting is the shortest round-trip representation,
//! so equal inputs give equal bytes.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::engine::{RunSummary, SimTrace, TraceRecord};
use crate::error::{Error, Result};
use crate::sweep::Aggregate;

pub const TRACE_COLUMNS: [&str; 14] = [
    "step",
    "t",
    "vehicle",
    "p_abs",
    "v_abs",
    "p_err",
    "v_err",
    "u_cmd",
    "u_real",
    "kappa_front",
    "kappa_rear",
    "theta",
    "queue_len",
    "event",
];

pub const SUMMARY_COLUMNS: [&str; 10] = [
    "scenario",
    "channel",
    "seed",
    "r_steps",
    "delay_s",
    "max_slip",
    "stop_dist_m",
    "final_gap_m",
    "collided",
    "collision_t",
];

fn write_rows<W: Write, T: Serialize>(out: W, header: &[&str], rows: &[T]) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace_to<W: Write>(out: W, records: &[TraceRecord]) -> csv::Result<()> {
    write_rows(out, &TRACE_COLUMNS, records)
}

pub fn write_summary_to<W: Write>(out: W, rows: &[RunSummary]) -> csv::Result<()> {
    write_rows(out, &SUMMARY_COLUMNS, rows)
}

fn to_file(path: &Path, f: impl FnOnce(BufWriter<File>) -> csv::Result<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    f(BufWriter::new(file)).map_err(|e| Error::csv(path, e))
}

pub fn write_trace(path: impl AsRef<Path>, trace: &SimTrace) -> Result<()> {
    to_file(path.as_ref(), |w| write_trace_to(w, &trace.records))
}

pub fn write_summary(path: impl AsRef<Path>, rows: &[RunSummary]) -> Result<()> {
    to_file(path.as_ref(), |w| write_summary_to(w, rows))
}

pub fn write_aggregate(path: impl AsRef<Path>, rows: &[Aggregate]) -> Result<()> {
    to_file(path.as_ref(), |w| {
        let mut w = csv::Writer::from_writer(w);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    })
}

pub fn read_trace_from<R: Read>(input: R) -> csv::Result<Vec<TraceRecord>> {
    csv::Reader::from_reader(input).deserialize().collect()
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_trace_from(file).map_err(|e| Error::csv(path, e))
}
