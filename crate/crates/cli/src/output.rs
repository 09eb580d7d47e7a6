use std::fs;
use std::io::Write;
use std::path::Path;

use collapse_lab::Error;
use serde::Serialize;

pub const SCHEMA: &str = "collapse-lab/v1";

/// Top-level JSON document: the schema tag first, then the payload fields.
#[derive(Serialize)]
pub struct Document<'a, T: Serialize> {
    pub schema: &'static str,
    pub command: &'a str,
    pub warnings: &'a [String],
    #[serde(flatten)]
    pub body: T,
}

pub fn json<T: Serialize>(command: &str, warnings: &[String], body: T) -> Result<String, Error> {
    let doc = Document { schema: SCHEMA, command, warnings, body };
    let mut text = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Domain(format!("cannot serialize output: {e}")))?;
    text.push('\n');
    Ok(text)
}

/// CSV text from a header and rows of already formatted cells.
pub fn csv(header: &[String], rows: &[Vec<String>]) -> Result<String, Error> {
    let fail = |e: csv::Error| Error::Domain(format!("cannot write CSV: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(fail)?;
    for row in rows {
        w.write_record(row).map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Domain(format!("cannot write CSV: {e}")))?;
    Ok(String::from_utf8(bytes).expect("CSV of UTF-8 fields is UTF-8"))
}

/// Shortest round-trip form, so equal values always print identically.
pub fn num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:?}")
    }
}

pub fn emit(text: &str, out: Option<&Path>) -> Result<(), Error> {
    match out {
        Some(path) => fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source }),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|source| Error::Io { path: "<stdout>".into(), source })
        }
    }
}

pub fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}
