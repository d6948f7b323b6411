//! The "LXIX" binary index format.
//!
//! Little-endian throughout:
//!
//! ```text
//! header    magic "LXIX", version u16 = 1, vocab u32, doc_count u32,
//!           total_postings u64
//! doc table doc_count x (length u16, UTF-8 id bytes)
//! postings  per non-empty term, ascending term id:
//!           term_id u16, count u32, count x (ordinal u32, weight u8)
//! ```
//!
//! Postings records are read until `total_postings` entries have been
//! consumed, so an empty index is just the header and doc table.

use crate::error::{Error, Result};
use crate::lexindex::InvertedIndex;

const MAGIC: &[u8; 4] = b"LXIX";
const VERSION: u16 = 1;

pub fn serialize(index: &InvertedIndex) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(index.vocab_size() as u32).to_le_bytes());
    out.extend_from_slice(&(index.doc_count() as u32).to_le_bytes());
    out.extend_from_slice(&index.total_postings().to_le_bytes());
    for id in index.doc_ids() {
        let bytes = id.as_bytes();
        debug_assert!(bytes.len() <= u16::MAX as usize);
        out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(bytes);
    }
    for term in 0..index.vocab_size() {
        let list = index.postings(term);
        if list.is_empty() {
            continue;
        }
        out.extend_from_slice(&(term as u16).to_le_bytes());
        out.extend_from_slice(&(list.len() as u32).to_le_bytes());
        for &(ordinal, weight) in list {
            out.extend_from_slice(&ordinal.to_le_bytes());
            out.push(weight);
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.bytes.len(),
                format!("truncated while reading {what} (needed {n} bytes at offset {})", self.pos),
            ));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn deserialize(bytes: &[u8]) -> Result<InvertedIndex> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(0, "bad magic, expected LXIX"));
    }
    let version = c.u16("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let vocab = c.u32("vocab size")? as usize;
    let doc_count = c.u32("doc count")? as usize;
    let total_postings = c.u64("total postings")?;

    let mut doc_ids = Vec::with_capacity(doc_count);
    for i in 0..doc_count {
        let len_offset = c.pos;
        let len = c.u16("doc id length")? as usize;
        let raw = c.take(len, "doc id")?;
        let id = std::str::from_utf8(raw)
            .map_err(|_| Error::format(len_offset + 2, format!("doc id {i} is not UTF-8")))?;
        doc_ids.push(id.to_string());
    }

    let mut postings: Vec<Vec<(u32, u8)>> = vec![Vec::new(); vocab];
    let mut consumed: u64 = 0;
    let mut prev_term: Option<u16> = None;
    while consumed < total_postings {
        let term_offset = c.pos;
        let term = c.u16("term id")?;
        if let Some(p) = prev_term {
            if term <= p {
                return Err(Error::format(
                    term_offset,
                    format!("term ids must ascend ({p} then {term})"),
                ));
            }
        }
        prev_term = Some(term);
        if term as usize >= vocab {
            return Err(Error::format(
                term_offset,
                format!("term id {term} out of range for vocab {vocab}"),
            ));
        }
        let count = c.u32("posting count")? as u64;
        if count == 0 || consumed + count > total_postings {
            return Err(Error::format(
                term_offset,
                format!(
                    "posting count {count} inconsistent with remaining total {}",
                    total_postings - consumed
                ),
            ));
        }
        let mut list = Vec::with_capacity(count as usize);
        let mut prev_ordinal: Option<u32> = None;
        for _ in 0..count {
            let entry_offset = c.pos;
            let ordinal = c.u32("posting ordinal")?;
            let weight = c.u8("posting weight")?;
            if ordinal as usize >= doc_count {
                return Err(Error::format(
                    entry_offset,
                    format!("ordinal {ordinal} out of range for {doc_count} docs"),
                ));
            }
            if weight == 0 {
                return Err(Error::format(entry_offset + 4, "posting weight 0"));
            }
            if let Some(p) = prev_ordinal {
                if ordinal <= p {
                    return Err(Error::format(
                        entry_offset,
                        format!("ordinals must ascend ({p} then {ordinal})"),
                    ));
                }
            }
            prev_ordinal = Some(ordinal);
            list.push((ordinal, weight));
        }
        postings[term as usize] = list;
        consumed += count;
    }
    if c.pos != bytes.len() {
        return Err(Error::format(c.pos, "trailing bytes after postings"));
    }
    Ok(InvertedIndex::from_parts(vocab, postings, doc_ids, total_postings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexindex::QuantizedLexiconVector;

    fn sample_index() -> InvertedIndex {
        InvertedIndex::build(vec![
            QuantizedLexiconVector::new("alpha", vec![(1, 10), (5, 3)]).unwrap(),
            QuantizedLexiconVector::new("beta", vec![(1, 1), (9, 255)]).unwrap(),
            QuantizedLexiconVector::new("gamma", vec![]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn round_trip_is_identity() {
        let index = sample_index();
        let bytes = serialize(&index);
        let back = deserialize(&bytes).unwrap();
        assert_eq!(back, index);
        assert_eq!(serialize(&back), bytes);
    }

    #[test]
    fn empty_index_round_trips() {
        let index = InvertedIndex::build(Vec::new()).unwrap();
        let back = deserialize(&serialize(&index)).unwrap();
        assert_eq!(back, index);
    }

    #[test]
    fn flipped_magic_is_rejected() {
        let mut bytes = serialize(&sample_index());
        bytes[0] ^= 0xff;
        assert!(matches!(
            deserialize(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut bytes = serialize(&sample_index());
        bytes[4] = 9;
        assert!(matches!(
            deserialize(&bytes),
            Err(Error::Format { offset: 4, .. })
        ));
    }

    #[test]
    fn truncation_reports_an_offset() {
        let bytes = serialize(&sample_index());
        for cut in [bytes.len() - 1, bytes.len() - 3, 10, 20] {
            let err = deserialize(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "cut at {cut}: {err}");
        }
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let mut bytes = serialize(&sample_index());
        bytes.push(0);
        assert!(matches!(deserialize(&bytes), Err(Error::Format { .. })));
    }
}
