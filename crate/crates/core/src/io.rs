//! Text artifacts: one JSON header line followed by a CSV body.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so a
//! write/read cycle reproduces every `f64` bit for bit and identical inputs
//! give byte-identical files.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cell::{EffectiveLagrangianTable, TableLattice, TableMetadata};
use crate::env::EnvironmentSpec;
use crate::model::ModelSpec;
use crate::{Error, Result, Vector};

pub const FORMAT_VERSION: u32 = 1;

/// Header line wrapper: artifact kind, format version and a payload.
#[derive(Debug, Serialize, Deserialize)]
pub struct Header<H> {
    pub kind: String,
    pub version: u32,
    #[serde(flatten)]
    pub body: H,
}

/// Header plus CSV rows, each row as raw fields.
pub struct Document<H> {
    pub header: H,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub fn write_document<H: Serialize>(kind: &str, header: &H, columns: &[String], rows: &[Vec<String>]) -> Result<String> {
    let head = serde_json::to_string(&Header {
        kind: kind.to_string(),
        version: FORMAT_VERSION,
        body: header,
    })?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(columns)?;
    for r in rows {
        w.write_record(r)?;
    }
    let body = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    let body = String::from_utf8(body).map_err(|e| Error::Format(e.to_string()))?;
    Ok(format!("{head}\n{body}"))
}

pub fn read_document<H: DeserializeOwned>(kind: &str, text: &str) -> Result<Document<H>> {
    let (head, body) = text.split_once('\n').ok_or_else(|| Error::Format("missing JSON header line".into()))?;
    let header: Header<H> = serde_json::from_str(head)?;
    if header.kind != kind {
        return Err(Error::Format(format!("expected a {kind} artifact, found {}", header.kind)));
    }
    if header.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {}", header.version)));
    }
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(body.as_bytes());
    let columns = r.headers()?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
    Ok(Document {
        header: header.body,
        columns,
        rows,
    })
}

pub fn num(x: f64) -> String {
    format!("{x}")
}

pub fn parse_num(s: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::Format(format!("not a number: {s:?}")))
}

pub fn axis_names(prefix: &str, dim: usize) -> Vec<String> {
    (0..dim).map(|k| format!("{prefix}{k}")).collect()
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Fingerprint of a model together with its environment law.
pub fn model_hash(model: &ModelSpec, env: &EnvironmentSpec) -> Result<String> {
    let text = serde_json::to_string(&(model, env))?;
    Ok(sha256_hex(text.as_bytes()))
}

// ---------------------------------------------------------------------------
// Effective-Lagrangian tables

#[derive(Serialize, Deserialize)]
struct TableHeader {
    lattice: TableLattice,
    metadata: TableMetadata,
}

pub fn table_to_csv(table: &EffectiveLagrangianTable) -> Result<String> {
    let d = table.lattice.dimension();
    let mut cols = vec!["t".to_string()];
    cols.extend(axis_names("x", d));
    cols.extend(axis_names("u", d));
    cols.extend(["value", "error", "feasible"].map(String::from));
    let grid = table.lattice.grid();
    let rows: Vec<Vec<String>> = (0..grid.len())
        .map(|i| {
            let mut r: Vec<String> = grid.point(i).into_iter().map(num).collect();
            r.push(num(table.values[i]));
            r.push(num(table.errors[i]));
            r.push(table.feasible[i].to_string());
            r
        })
        .collect();
    write_document(
        "effective_lagrangian_table",
        &TableHeader {
            lattice: table.lattice.clone(),
            metadata: table.metadata.clone(),
        },
        &cols,
        &rows,
    )
}

pub fn table_from_csv(text: &str) -> Result<EffectiveLagrangianTable> {
    let doc: Document<TableHeader> = read_document("effective_lagrangian_table", text)?;
    let lattice = doc.header.lattice;
    let d = lattice.dimension();
    let n = lattice.grid().len();
    if doc.rows.len() != n {
        return Err(Error::Format(format!("table has {} rows, lattice needs {n}", doc.rows.len())));
    }
    let width = 1 + 2 * d;
    let mut values = Vec::with_capacity(n);
    let mut errors = Vec::with_capacity(n);
    let mut feasible = Vec::with_capacity(n);
    for r in &doc.rows {
        if r.len() != width + 3 {
            return Err(Error::Format("table row has the wrong number of fields".into()));
        }
        values.push(parse_num(&r[width])?);
        errors.push(parse_num(&r[width + 1])?);
        feasible.push(r[width + 2] == "true");
    }
    Ok(EffectiveLagrangianTable {
        lattice,
        values,
        errors,
        feasible,
        metadata: doc.header.metadata,
    })
}

// ---------------------------------------------------------------------------
// Step controls

/// `(t_break, u…)` rows; the last row carries the final time and a zero
/// control.
pub fn controls_to_csv(breakpoints: &[f64], values: &[Vector], dim: usize) -> Result<String> {
    let mut cols = vec!["t_break".to_string()];
    cols.extend(axis_names("u", dim));
    let rows: Vec<Vec<String>> = breakpoints
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let u = values.get(i).copied().unwrap_or(Vector::ZERO);
            let mut r = vec![num(*t)];
            r.extend(u.components(dim).iter().map(|c| num(*c)));
            r
        })
        .collect();
    write_document("step_control", &serde_json::json!({ "dimension": dim }), &cols, &rows)
}

#[derive(Deserialize)]
struct ControlHeader {
    dimension: usize,
}

pub fn controls_from_csv(text: &str) -> Result<(Vec<f64>, Vec<Vector>)> {
    let doc: Document<ControlHeader> = read_document("step_control", text)?;
    let dim = doc.header.dimension;
    let mut breaks = Vec::with_capacity(doc.rows.len());
    let mut values = Vec::with_capacity(doc.rows.len());
    for r in &doc.rows {
        if r.len() != 1 + dim {
            return Err(Error::Format("control row has the wrong number of fields".into()));
        }
        breaks.push(parse_num(&r[0])?);
        let c = r[1..].iter().map(|s| parse_num(s)).collect::<Result<Vec<_>>>()?;
        values.push(Vector::from_slice(&c).ok_or_else(|| Error::Format("bad control".into()))?);
    }
    values.pop();
    Ok((breaks, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::Axis;

    #[test]
    fn table_round_trip_is_exact() {
        let lattice = TableLattice {
            t: Axis::point(0.0),
            x: vec![Axis::new(-1.0, 1.0, 3).unwrap()],
            u: vec![Axis::new(-1.0, 1.0, 4).unwrap()],
        };
        let meta = TableMetadata {
            model_hash: "abc".into(),
            seed: 3,
            b_schedule: vec![1.0, 2.0],
            micro: None,
            dp_rate: 0.0,
        };
        let mut t = EffectiveLagrangianTable::from_fn(lattice, meta, |_, x, u| 0.1 * x[0] + u[0] * u[0] / 3.0);
        t.feasible[2] = false;
        t.values[2] = f64::NAN;
        let text = table_to_csv(&t).unwrap();
        let back = table_from_csv(&text).unwrap();
        assert_eq!(table_to_csv(&back).unwrap(), text);
        assert!(back.values[2].is_nan());
        assert_eq!(back.values[5].to_bits(), t.values[5].to_bits());
        assert!(text.lines().next().unwrap().starts_with('{'));
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let text = controls_to_csv(&[0.0, 1.0], &[Vector::new1(2.0)], 1).unwrap();
        assert!(matches!(table_from_csv(&text), Err(Error::Format(_))));
        let (b, v) = controls_from_csv(&text).unwrap();
        assert_eq!(b, vec![0.0, 1.0]);
        assert_eq!(v, vec![Vector::new1(2.0)]);
    }
}
