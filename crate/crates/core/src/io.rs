//! CSV readers and writers for the file formats used by the command line.
//!
//! * labeled matrix: header `id,<l1>,...,<lN>`, then one row `<li>,v1,...,vN`
//!   per label (rows may come in any order); full matrix, both triangles.
//! * marker and feature matrices: header `id,<c1>,...`, one row per
//!   genotype; an empty or `NA` cell is missing.
//! * phenotypes: header `genotype,<trait>[,covariate...]`; records with an
//!   empty or `NA` trait value are skipped.
//! * groups: header `genotype,group`.
//! * label lists: one label per line; blank lines and `#` comments ignored.
//!
//! Every parse error carries a 1-based line and column.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read, Write};

use csv::{ReaderBuilder, StringRecord, Trim, WriterBuilder};
use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::imputation::IncompleteFeatureMatrix;
use crate::kernels::MarkerMatrix;
use crate::matcore::LabeledSymMatrix;
use crate::mixedmodel::{PhenotypeRecord, PhenotypeTable};

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(Trim::All)
        .from_reader(input)
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.kind() {
        csv::ErrorKind::Io(io) => Error::Io(io.to_string()),
        _ => Error::parse(line, 0, e.to_string()),
    }
}

fn line_of(rec: &StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

/// All records, with the header split off.
fn records<R: Read>(input: R, what: &str) -> Result<(StringRecord, Vec<StringRecord>)> {
    let mut rdr = reader(input);
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        rows.push(rec);
    }
    if rows.is_empty() {
        return Err(Error::parse(1, 1, format!("empty {what} file")));
    }
    let header = rows.remove(0);
    Ok((header, rows))
}

fn header_labels(header: &StringRecord, min_cols: usize) -> Result<Vec<String>> {
    let line = line_of(header);
    if header.len() < min_cols {
        return Err(Error::parse(
            line,
            header.len() + 1,
            format!("header needs at least {min_cols} columns"),
        ));
    }
    let labels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut seen = HashMap::new();
    for (i, l) in labels.iter().enumerate() {
        if l.is_empty() {
            return Err(Error::parse(line, i + 2, "empty label"));
        }
        if seen.insert(l.as_str(), i).is_some() {
            return Err(Error::parse(line, i + 2, format!("duplicate label '{l}'")));
        }
    }
    Ok(labels)
}

fn check_width(rec: &StringRecord, width: usize) -> Result<()> {
    if rec.len() != width {
        return Err(Error::parse(
            line_of(rec),
            rec.len().min(width) + 1,
            format!("expected {width} fields, found {}", rec.len()),
        ));
    }
    Ok(())
}

fn number(rec: &StringRecord, col: usize) -> Result<f64> {
    let field = &rec[col];
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::parse(
            line_of(rec),
            col + 1,
            format!("'{field}' is not a finite number"),
        )),
    }
}

fn optional_number(rec: &StringRecord, col: usize) -> Result<Option<f64>> {
    if rec[col].is_empty() || rec[col].eq_ignore_ascii_case("NA") {
        Ok(None)
    } else {
        number(rec, col).map(Some)
    }
}

pub fn read_labeled_matrix<R: Read>(input: R) -> Result<LabeledSymMatrix> {
    let (header, rows) = records(input, "matrix")?;
    let labels = header_labels(&header, 2)?;
    let n = labels.len();
    let pos: HashMap<&str, usize> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let mut values = DMatrix::zeros(n, n);
    let mut filled = vec![false; n];
    for rec in &rows {
        check_width(rec, n + 1)?;
        let i = *pos.get(&rec[0]).ok_or_else(|| {
            Error::parse(
                line_of(rec),
                1,
                format!("row label '{}' not in header", &rec[0]),
            )
        })?;
        if std::mem::replace(&mut filled[i], true) {
            return Err(Error::parse(
                line_of(rec),
                1,
                format!("duplicate row '{}'", &rec[0]),
            ));
        }
        for j in 0..n {
            values[(i, j)] = number(rec, j + 1)?;
        }
    }
    if let Some(i) = filled.iter().position(|f| !f) {
        let line = rows.last().map_or(line_of(&header), line_of) + 1;
        return Err(Error::parse(
            line,
            1,
            format!("no row for label '{}'", labels[i]),
        ));
    }
    LabeledSymMatrix::new(labels, values)
}

pub fn parse_labeled_matrix(bytes: &[u8]) -> Result<LabeledSymMatrix> {
    read_labeled_matrix(bytes)
}

/// Values, observed mask and labels of a genotype-by-column table.
type Table = (Vec<String>, Vec<String>, DMatrix<f64>, DMatrix<bool>);

fn read_table<R: Read>(input: R, what: &str) -> Result<Table> {
    let (header, rows) = records(input, what)?;
    let cols = header_labels(&header, 2)?;
    let m = cols.len();
    let mut row_labels = Vec::with_capacity(rows.len());
    let mut seen = HashMap::new();
    let mut values = DMatrix::zeros(rows.len(), m);
    let mut observed = DMatrix::from_element(rows.len(), m, false);
    for (i, rec) in rows.iter().enumerate() {
        check_width(rec, m + 1)?;
        let label = rec[0].to_string();
        if label.is_empty() {
            return Err(Error::parse(line_of(rec), 1, "empty row label"));
        }
        if seen.insert(label.clone(), i).is_some() {
            return Err(Error::parse(
                line_of(rec),
                1,
                format!("duplicate row '{label}'"),
            ));
        }
        for j in 0..m {
            if let Some(v) = optional_number(rec, j + 1)? {
                values[(i, j)] = v;
                observed[(i, j)] = true;
            }
        }
        row_labels.push(label);
    }
    Ok((row_labels, cols, values, observed))
}

pub fn read_marker_matrix<R: Read>(input: R, ploidy: u32) -> Result<MarkerMatrix> {
    let (rows, cols, values, observed) = read_table(input, "marker")?;
    MarkerMatrix::new(rows, cols, values, ploidy, observed.map(|o| !o))
}

pub fn parse_marker_matrix(bytes: &[u8], ploidy: u32) -> Result<MarkerMatrix> {
    read_marker_matrix(bytes, ploidy)
}

pub fn read_feature_matrix<R: Read>(input: R) -> Result<IncompleteFeatureMatrix> {
    let (rows, cols, values, observed) = read_table(input, "feature")?;
    IncompleteFeatureMatrix::new(rows, cols, values, observed)
}

pub fn parse_feature_matrix(bytes: &[u8]) -> Result<IncompleteFeatureMatrix> {
    read_feature_matrix(bytes)
}

pub fn read_phenotypes<R: Read>(input: R) -> Result<PhenotypeTable> {
    let (header, rows) = records(input, "phenotype")?;
    let names = header_labels(&header, 2)?;
    let width = names.len() + 1;
    let mut out = Vec::with_capacity(rows.len());
    for rec in &rows {
        check_width(rec, width)?;
        if rec[0].is_empty() {
            return Err(Error::parse(line_of(rec), 1, "empty genotype"));
        }
        if rec[1].is_empty() || rec[1].eq_ignore_ascii_case("na") {
            continue;
        }
        let value = number(rec, 1)?;
        let covariates = (2..width)
            .map(|c| number(rec, c))
            .collect::<Result<Vec<_>>>()?;
        out.push(PhenotypeRecord {
            genotype: rec[0].to_string(),
            value,
            covariates,
        });
    }
    PhenotypeTable::new(names[0].clone(), names[1..].to_vec(), out)
}

pub fn parse_phenotypes(bytes: &[u8]) -> Result<PhenotypeTable> {
    read_phenotypes(bytes)
}

/// Genotype to group name.
pub fn read_groups<R: Read>(input: R) -> Result<BTreeMap<String, String>> {
    let (header, rows) = records(input, "group")?;
    check_width(&header, 2)?;
    let mut out = BTreeMap::new();
    for rec in &rows {
        check_width(rec, 2)?;
        if rec[0].is_empty() || rec[1].is_empty() {
            return Err(Error::parse(
                line_of(rec),
                if rec[0].is_empty() { 1 } else { 2 },
                "empty field",
            ));
        }
        if out.insert(rec[0].to_string(), rec[1].to_string()).is_some() {
            return Err(Error::parse(
                line_of(rec),
                1,
                format!("genotype '{}' listed twice", &rec[0]),
            ));
        }
    }
    Ok(out)
}

pub fn parse_groups(bytes: &[u8]) -> Result<BTreeMap<String, String>> {
    read_groups(bytes)
}

pub fn read_label_list<R: Read>(input: R) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line.map_err(|e| match e.kind() {
            std::io::ErrorKind::InvalidData => Error::parse(i as u64 + 1, 1, "invalid UTF-8"),
            _ => Error::from(e),
        })?;
        let label = line.trim();
        if !label.is_empty() && !label.starts_with('#') {
            out.push(label.to_string());
        }
    }
    Ok(out)
}

pub fn parse_label_list(bytes: &[u8]) -> Result<Vec<String>> {
    read_label_list(bytes)
}

fn writer<W: Write>(out: W) -> csv::Writer<W> {
    WriterBuilder::new().from_writer(out)
}

fn write_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::from(io),
        other => Error::Io(format!("{other:?}")),
    }
}

/// Shortest representation that parses back to the same value.
fn fmt(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_labeled_matrix<W: Write>(m: &LabeledSymMatrix, out: W) -> Result<()> {
    write_table(m.labels(), m.labels(), m.values(), out)
}

/// Genotype-by-column table with header `id,<cols>`.
pub fn write_table<W: Write>(
    rows: &[String],
    cols: &[String],
    values: &DMatrix<f64>,
    out: W,
) -> Result<()> {
    let mut w = writer(out);
    let header = std::iter::once("id").chain(cols.iter().map(String::as_str));
    w.write_record(header).map_err(write_err)?;
    for (i, label) in rows.iter().enumerate() {
        let fields =
            std::iter::once(label.clone()).chain((0..cols.len()).map(|j| fmt(values[(i, j)])));
        w.write_record(fields).map_err(write_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Two-column table `<key_name>,<value_name>`.
pub fn write_pairs<W: Write>(
    key_name: &str,
    value_name: &str,
    pairs: impl IntoIterator<Item = (String, f64)>,
    out: W,
) -> Result<()> {
    let mut w = writer(out);
    w.write_record([key_name, value_name]).map_err(write_err)?;
    for (k, v) in pairs {
        w.write_record([k, fmt(v)]).map_err(write_err)?;
    }
    w.flush()?;
    Ok(())
}
