//! The `results.csv` row schema, writer and reader.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const HEADER: [&str; 8] = ["run_id", "method", "attack", "concept", "step", "metric", "arm", "value"];

/// Method name used for the unprotected model.
pub const NONE: &str = "none";

pub mod arm {
    /// Similarity of the unprotected attacked model to the references.
    pub const NONE: &str = "none";
    /// Similarity of the attacked immunized model to the references.
    pub const IMMUNIZED: &str = "immunized";
    /// Similarity between the attacked immunized and unprotected models.
    pub const PAIRED: &str = "paired";
}

/// Prefix marking a group's non-target concepts in the `concept` column.
pub const OTHER_PREFIX: &str = "other:";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub method: String,
    pub attack: String,
    pub concept: String,
    pub step: usize,
    pub metric: String,
    pub arm: String,
    pub value: f64,
}

impl ResultRow {
    pub fn is_other(&self) -> bool {
        self.concept.starts_with(OTHER_PREFIX)
    }
}

pub fn concept_label(index: usize, other: bool) -> String {
    if other {
        format!("{OTHER_PREFIX}{index}")
    } else {
        index.to_string()
    }
}

/// Nine significant digits: fixed notation for magnitudes in `[1e-4, 1e9)`,
/// scientific otherwise. Non-finite values are written as `NaN`, `inf` and
/// `-inf`.
pub fn format_value(v: f64) -> String {
    if !v.is_finite() {
        return if v.is_nan() {
            "NaN".into()
        } else if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let v = if v == 0.0 { 0.0 } else { v };
    let sci = format!("{v:.8e}");
    let exp: i32 = sci[sci.find('e').expect("exponent") + 1..].parse().expect("exponent digits");
    if (-4..9).contains(&exp) {
        format!("{:.*}", (8 - exp) as usize, v)
    } else {
        sci
    }
}

/// `v` as it reads back from a results file.
pub fn round_value(v: f64) -> f64 {
    format_value(v).parse().expect("formatted value parses")
}

pub fn write_rows<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let csv_err = |e: csv::Error| CliError::Csv(e.to_string());
    w.write_record(HEADER).map_err(csv_err)?;
    for r in rows {
        let step = r.step.to_string();
        let value = format_value(r.value);
        w.write_record([
            r.run_id.as_str(),
            &r.method,
            &r.attack,
            &r.concept,
            &step,
            &r.metric,
            &r.arm,
            &value,
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::Csv(e.to_string()))
}

pub fn emit_results(rows: &[ResultRow], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(CliError::Csv("no rows to write".into()));
    }
    let file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    write_rows(rows, std::io::BufWriter::new(file))
}

/// Parses a results file, insisting on the exact header.
pub fn read_rows<R: Read>(input: R) -> Result<Vec<ResultRow>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = r.headers().map_err(|e| CliError::Csv(e.to_string()))?;
    if header.iter().ne(HEADER) {
        return Err(CliError::Csv(format!(
            "header must be `{}`, found `{}`",
            HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    r.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec.map_err(|e| CliError::Csv(e.to_string()))?;
            let line = i + 2;
            let field = |k: usize| rec.get(k).unwrap_or_default().to_string();
            Ok(ResultRow {
                run_id: field(0),
                method: field(1),
                attack: field(2),
                concept: field(3),
                step: field(4)
                    .parse()
                    .map_err(|_| CliError::Csv(format!("line {line}: bad step `{}`", field(4))))?,
                metric: field(5),
                arm: field(6),
                value: field(7)
                    .parse()
                    .map_err(|_| CliError::Csv(format!("line {line}: bad value `{}`", field(7))))?,
            })
        })
        .collect()
}

pub fn load_results(path: &Path) -> Result<Vec<ResultRow>> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    read_rows(std::io::BufReader::new(file))
}
