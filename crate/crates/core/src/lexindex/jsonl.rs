//! Quantized-vector JSONL: `{"id": string, "terms": [[term_id, weight], ...]}`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexindex::QuantizedLexiconVector;

#[derive(Debug, Serialize, Deserialize)]
struct QuantizedRecord {
    id: String,
    terms: Vec<(u16, u8)>,
}

pub fn write_quantized_jsonl<W: Write>(
    mut w: W,
    records: &[QuantizedLexiconVector],
) -> Result<()> {
    for vec in records {
        let rec = QuantizedRecord {
            id: vec.id.clone(),
            terms: vec.terms().to_vec(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_quantized_jsonl<R: BufRead>(r: R) -> Result<Vec<QuantizedLexiconVector>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QuantizedRecord = serde_json::from_str(&line).map_err(|e| {
            Error::InvalidInput(format!("quantized jsonl line {}: {e}", lineno + 1))
        })?;
        let vec = QuantizedLexiconVector::new(rec.id, rec.terms).map_err(|e| {
            Error::InvalidInput(format!("quantized jsonl line {}: {e}", lineno + 1))
        })?;
        out.push(vec);
    }
    Ok(out)
}
