//! File formats: annotation, match-result and table CSVs, JSON artifacts.
//!
//! Reals are written in scientific notation with 17 significant digits so
//! every value round-trips exactly.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::templates::{Annotation, Label, MatchResult};

pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// A table of already-formatted cells.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        wr.write_record(&self.header)?;
        for r in &self.rows {
            wr.write_record(r)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Parse(format!("CSV header is missing column `{name}`")))
}

fn parse_real(s: &str, what: &str, line: u64) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| Error::Parse(format!("line {line}: bad {what} `{s}`")))?;
    if !v.is_finite() {
        return Err(Error::Parse(format!("line {line}: {what} must be finite")));
    }
    Ok(v)
}

pub fn read_annotations_from<R: Read>(r: R) -> Result<Vec<Annotation>> {
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let h = rd.headers()?.clone();
    let (ci, cx, cy, cd, cl) =
        (column(&h, "id")?, column(&h, "x")?, column(&h, "y")?, column(&h, "diameter_px")?, column(&h, "label")?);
    let cc = column(&h, "counter").ok();
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let get = |i: usize| rec.get(i).unwrap_or("");
        let label: Label = get(cl).parse()?;
        let mut a = Annotation::new(
            get(ci),
            parse_real(get(cx), "x", line)?,
            parse_real(get(cy), "y", line)?,
            parse_real(get(cd), "diameter_px", line)?,
            label,
        );
        if a.id.is_empty() {
            return Err(Error::Parse(format!("line {line}: empty id")));
        }
        a.counter = cc.map(get).filter(|c| !c.is_empty()).map(str::to_string);
        out.push(a);
    }
    Ok(out)
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    read_annotations_from(File::open(path)?)
}

pub fn annotations_table(anns: &[Annotation]) -> Table {
    let with_counter = anns.iter().any(|a| a.counter.is_some());
    let mut t = if with_counter {
        Table::new(&["id", "x", "y", "diameter_px", "label", "counter"])
    } else {
        Table::new(&["id", "x", "y", "diameter_px", "label"])
    };
    for a in anns {
        let mut row = vec![a.id.clone(), fmt_real(a.x), fmt_real(a.y), fmt_real(a.diameter_px), a.label.to_string()];
        if with_counter {
            row.push(a.counter.clone().unwrap_or_default());
        }
        t.push(row);
    }
    t
}

pub fn write_annotations(path: impl AsRef<Path>, anns: &[Annotation]) -> Result<()> {
    annotations_table(anns).write(path)
}

pub fn matches_table(results: &[MatchResult]) -> Table {
    let mut t = Table::new(&["id", "label", "measure", "template_kind", "best_score", "best_sigma"]);
    for m in results {
        t.push(vec![
            m.annotation_id.clone(),
            m.label.to_string(),
            m.measure.to_string(),
            m.template_kind.to_string(),
            fmt_real(m.best_score),
            fmt_real(m.best_smoothing_sigma),
        ]);
    }
    t
}

pub fn read_matches_from<R: Read>(r: R) -> Result<Vec<MatchResult>> {
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let h = rd.headers()?.clone();
    let cols = ["id", "label", "measure", "template_kind", "best_score", "best_sigma"]
        .iter()
        .map(|c| column(&h, c))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let get = |i: usize| rec.get(cols[i]).unwrap_or("");
        out.push(MatchResult {
            annotation_id: get(0).to_string(),
            label: get(1).parse()?,
            measure: get(2).parse()?,
            template_kind: get(3).parse()?,
            best_score: parse_real(get(4), "best_score", line)?,
            best_smoothing_sigma: parse_real(get(5), "best_sigma", line)?,
        });
    }
    Ok(out)
}

pub fn read_matches(path: impl AsRef<Path>) -> Result<Vec<MatchResult>> {
    read_matches_from(File::open(path)?)
}

/// Pretty JSON with reals in the same 17-digit form as the CSV tables.
/// Non-finite reals become `null`.
struct RealFormatter(serde_json::ser::PrettyFormatter<'static>);

impl serde_json::ser::Formatter for RealFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, v: f64) -> std::io::Result<()> {
        if v.is_finite() {
            w.write_all(fmt_real(v).as_bytes())
        } else {
            w.write_all(b"null")
        }
    }
    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, v: f32) -> std::io::Result<()> {
        self.write_f64(w, v as f64)
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn write_json_to<W: Write, T: Serialize>(mut w: W, value: &T) -> Result<()> {
    let mut ser =
        serde_json::Serializer::with_formatter(&mut w, RealFormatter(serde_json::ser::PrettyFormatter::new()));
    value.serialize(&mut ser)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_json_to(&mut w, value)?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?)
}
