//! Sparse-vector JSONL: one object per line,
//! `{"id": string, "v": vocab_size, "terms": [[term_id, weight], ...]}`
//! with term ids ascending.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse_repr::SparseLexiconVector;

#[derive(Debug, Serialize, Deserialize)]
struct SparseRecord {
    id: String,
    v: usize,
    terms: Vec<(u32, f64)>,
}

pub fn write_sparse_jsonl<W: Write>(
    mut w: W,
    records: &[(String, SparseLexiconVector)],
) -> Result<()> {
    for (id, vec) in records {
        let rec = SparseRecord {
            id: id.clone(),
            v: vec.vocab_size(),
            terms: vec.entries().to_vec(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_sparse_jsonl<R: BufRead>(r: R) -> Result<Vec<(String, SparseLexiconVector)>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SparseRecord = serde_json::from_str(&line).map_err(|e| {
            Error::InvalidInput(format!("sparse jsonl line {}: {e}", lineno + 1))
        })?;
        let vec = SparseLexiconVector::from_entries(rec.v, rec.terms).map_err(|e| {
            Error::InvalidInput(format!("sparse jsonl line {}: {e}", lineno + 1))
        })?;
        out.push((rec.id, vec));
    }
    Ok(out)
}
