//! CSV files for weights and traffic matrices. Nodes are written by id.

use std::collections::HashMap;
use std::io::{Read, Write};

use super::WorkbenchError;
use crate::fmt_f64;
use crate::netgraph::{DemandVector, Graph, WeightVector};

fn node_index(ids: &[String]) -> HashMap<&str, usize> {
    ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
}

fn header_check(r: &mut csv::Reader<impl Read>, expected: &[&str]) -> Result<(), WorkbenchError> {
    let h = r.headers()?;
    if h.iter().ne(expected.iter().copied()) {
        return Err(WorkbenchError::Invalid(format!(
            "expected header {}, got {}",
            expected.join(","),
            h.iter().collect::<Vec<_>>().join(",")
        )));
    }
    Ok(())
}

fn field<'a>(rec: &'a csv::StringRecord, i: usize, row: usize) -> Result<&'a str, WorkbenchError> {
    rec.get(i)
        .ok_or_else(|| WorkbenchError::Invalid(format!("row {row}: missing column {i}")))
}

fn parse_f64(s: &str, row: usize) -> Result<f64, WorkbenchError> {
    s.trim()
        .parse()
        .map_err(|_| WorkbenchError::Invalid(format!("row {row}: {s:?} is not a number")))
}

/// `edge_index,sender,receiver,weight`.
pub fn write_weights<W: Write>(out: W, g: &Graph, ids: &[String], w: &WeightVector) -> Result<(), WorkbenchError> {
    w.check_for(g)?;
    let mut wr = csv::Writer::from_writer(out);
    wr.write_record(["edge_index", "sender", "receiver", "weight"])?;
    for (e, &x) in g.edges().iter().zip(w.values()) {
        wr.write_record([
            e.index.to_string(),
            ids[e.sender].clone(),
            ids[e.receiver].clone(),
            fmt_f64(x),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// Reads weights, checking every row against the graph's edge list.
pub fn read_weights<R: Read>(input: R, g: &Graph, ids: &[String]) -> Result<WeightVector, WorkbenchError> {
    let mut r = csv::Reader::from_reader(input);
    header_check(&mut r, &["edge_index", "sender", "receiver", "weight"])?;
    let idx = node_index(ids);
    let mut values = vec![None; g.edge_count()];
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = row + 1;
        let k: usize = field(&rec, 0, row)?
            .trim()
            .parse()
            .map_err(|_| WorkbenchError::Invalid(format!("row {row}: bad edge index")))?;
        if k >= g.edge_count() {
            return Err(WorkbenchError::BadReference(format!("row {row}: edge {k} does not exist")));
        }
        let e = g.edge(k);
        let s = field(&rec, 1, row)?;
        let t = field(&rec, 2, row)?;
        if idx.get(s) != Some(&e.sender) || idx.get(t) != Some(&e.receiver) {
            return Err(WorkbenchError::BadReference(format!(
                "row {row}: edge {k} is {} -> {}, file says {s} -> {t}",
                ids[e.sender], ids[e.receiver]
            )));
        }
        if values[k].replace(parse_f64(field(&rec, 3, row)?, row)?).is_some() {
            return Err(WorkbenchError::Invalid(format!("row {row}: edge {k} listed twice")));
        }
    }
    let values: Option<Vec<f64>> = values.into_iter().collect();
    let values = values.ok_or_else(|| WorkbenchError::Invalid("weights file misses some edges".into()))?;
    Ok(WeightVector::new(values)?)
}

/// `src,dst,demand_mbps` in pair order.
pub fn write_traffic<W: Write>(out: W, g: &Graph, ids: &[String], d: &DemandVector) -> Result<(), WorkbenchError> {
    d.check_for(g)?;
    let mut wr = csv::Writer::from_writer(out);
    wr.write_record(["src", "dst", "demand_mbps"])?;
    for ((u, v), &x) in g.pairs().iter().zip(d.values()) {
        wr.write_record([ids[u].clone(), ids[v].clone(), fmt_f64(x)])?;
    }
    wr.flush()?;
    Ok(())
}

/// Reads a traffic matrix; pairs not listed get demand 0.
pub fn read_traffic<R: Read>(input: R, g: &Graph, ids: &[String]) -> Result<DemandVector, WorkbenchError> {
    let mut r = csv::Reader::from_reader(input);
    header_check(&mut r, &["src", "dst", "demand_mbps"])?;
    let idx = node_index(ids);
    let order = g.pairs();
    let mut values = vec![0.0; g.pair_count()];
    let mut seen = vec![false; g.pair_count()];
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = row + 1;
        let lookup = |s: &str| {
            idx.get(s)
                .copied()
                .ok_or_else(|| WorkbenchError::BadReference(format!("row {row}: unknown node {s:?}")))
        };
        let u = lookup(field(&rec, 0, row)?)?;
        let v = lookup(field(&rec, 1, row)?)?;
        let i = order
            .index(u, v)
            .ok_or_else(|| WorkbenchError::Invalid(format!("row {row}: demand from a node to itself")))?;
        if std::mem::replace(&mut seen[i], true) {
            return Err(WorkbenchError::Invalid(format!("row {row}: pair listed twice")));
        }
        values[i] = parse_f64(field(&rec, 2, row)?, row)?;
    }
    Ok(DemandVector::new(values)?)
}
