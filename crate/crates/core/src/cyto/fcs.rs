//! Reader for a narrow, strict subset of FCS 3.0/3.1: list-mode data stored as
//! 32-bit floats (`$DATATYPE F`) or unsigned integers (`$DATATYPE I`, 16 or 32 bits).

use std::collections::HashMap;

use crate::cyto::{EventTable, MarkerPanel};
use crate::error::{Error, Result};

const HEADER_LEN: usize = 58;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ByteOrder {
    Little,
    Big,
}

/// Parsed keyword dictionary of the TEXT segment; keys are upper-cased.
#[derive(Debug, Clone, Default)]
pub struct Keywords(HashMap<String, String>);

impl Keywords {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(&key.to_ascii_uppercase()).map(String::as_str)
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Corrupt(format!("missing required keyword {key}")))
    }

    fn require_usize(&self, key: &str) -> Result<usize> {
        let v = self.require(key)?;
        v.trim()
            .parse()
            .map_err(|_| Error::Corrupt(format!("keyword {key} is not an integer: `{v}`")))
    }
}

fn header_offset(bytes: &[u8], at: usize) -> Result<usize> {
    let field = std::str::from_utf8(&bytes[at..at + 8])
        .map_err(|_| Error::Corrupt("non-ASCII HEADER offset".into()))?
        .trim();
    if field.is_empty() {
        return Ok(0);
    }
    field
        .parse()
        .map_err(|_| Error::Corrupt(format!("bad HEADER offset `{field}`")))
}

/// Splits a TEXT segment into keyword/value pairs. The first byte is the
/// delimiter; a doubled delimiter inside a value stands for a literal one.
pub fn parse_text_segment(text: &[u8]) -> Result<Keywords> {
    let Some((&delim, body)) = text.split_first() else {
        return Err(Error::Corrupt("empty TEXT segment".into()));
    };
    let mut tokens = Vec::new();
    let mut cur = Vec::new();
    let mut i = 0;
    while i < body.len() {
        let b = body[i];
        if b == delim {
            if body.get(i + 1) == Some(&delim) {
                cur.push(delim);
                i += 2;
                continue;
            }
            tokens.push(std::mem::take(&mut cur));
        } else {
            cur.push(b);
        }
        i += 1;
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    if tokens.len() % 2 != 0 {
        return Err(Error::Corrupt(format!(
            "TEXT segment has an odd number ({}) of keyword/value tokens",
            tokens.len()
        )));
    }
    let mut map = HashMap::new();
    for pair in tokens.chunks(2) {
        let key = String::from_utf8_lossy(&pair[0]).trim().to_ascii_uppercase();
        let value = String::from_utf8_lossy(&pair[1]).into_owned();
        map.insert(key, value);
    }
    Ok(Keywords(map))
}

fn byte_order(kw: &Keywords, width_bytes: usize) -> Result<ByteOrder> {
    let raw = kw.require("$BYTEORD")?;
    let order: Vec<usize> = raw
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Corrupt(format!("bad $BYTEORD `{raw}`")))?;
    let n = order.len();
    let ascending: Vec<usize> = (1..=n).collect();
    let descending: Vec<usize> = (1..=n).rev().collect();
    // $BYTEORD describes 4-byte words; narrower fields use the same direction.
    if n < width_bytes {
        return Err(Error::Unsupported(format!("$BYTEORD `{raw}` for {width_bytes}-byte values")));
    }
    if order == ascending {
        Ok(ByteOrder::Little)
    } else if order == descending {
        Ok(ByteOrder::Big)
    } else {
        Err(Error::Unsupported(format!("mixed byte order `{raw}`")))
    }
}

/// Parses an FCS 3.0/3.1 file into its marker panel and events (file order).
pub fn parse_fcs(bytes: &[u8], sample_id: &str) -> Result<(MarkerPanel, EventTable)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Corrupt(format!("file is {} bytes, shorter than the HEADER", bytes.len())));
    }
    let version = &bytes[0..6];
    if version != b"FCS3.0" && version != b"FCS3.1" {
        return Err(Error::Unsupported(format!(
            "version `{}` (only FCS3.0 and FCS3.1)",
            String::from_utf8_lossy(version)
        )));
    }
    let text_start = header_offset(bytes, 10)?;
    let text_end = header_offset(bytes, 18)?;
    if text_end < text_start || text_end >= bytes.len() {
        return Err(Error::Corrupt(format!(
            "TEXT segment [{text_start}, {text_end}] outside file of {} bytes",
            bytes.len()
        )));
    }
    let kw = parse_text_segment(&bytes[text_start..=text_end])?;

    let mode = kw.get("$MODE").unwrap_or("L").trim().to_ascii_uppercase();
    if mode != "L" {
        return Err(Error::Unsupported(format!("$MODE {mode} (only list mode L)")));
    }
    let datatype = kw.require("$DATATYPE")?.trim().to_ascii_uppercase();
    if datatype != "F" && datatype != "I" {
        return Err(Error::Unsupported(format!("$DATATYPE {datatype} (only F and I)")));
    }
    let n_par = kw.require_usize("$PAR")?;
    let n_tot = kw.require_usize("$TOT")?;
    if n_par == 0 {
        return Err(Error::Corrupt("$PAR is 0".into()));
    }
    if n_tot == 0 {
        return Err(Error::Corrupt("$TOT is 0: no events".into()));
    }

    let mut names = Vec::with_capacity(n_par);
    let mut widths = Vec::with_capacity(n_par);
    for p in 1..=n_par {
        names.push(kw.require(&format!("$P{p}N"))?.trim().to_string());
        let bits = kw.require_usize(&format!("$P{p}B"))?;
        let ok = match datatype.as_str() {
            "F" => bits == 32,
            _ => bits == 16 || bits == 32,
        };
        if !ok {
            return Err(Error::Unsupported(format!("$P{p}B = {bits} with $DATATYPE {datatype}")));
        }
        widths.push(bits / 8);
    }
    let max_width = *widths.iter().max().unwrap_or(&4);
    let order = byte_order(&kw, max_width)?;

    let mut data_start = header_offset(bytes, 26)?;
    let mut data_end = header_offset(bytes, 34)?;
    if data_start == 0 && data_end == 0 {
        data_start = kw.require_usize("$BEGINDATA")?;
        data_end = kw.require_usize("$ENDDATA")?;
    }
    let row_bytes: usize = widths.iter().sum();
    let expected = n_tot * row_bytes;
    let actual = (data_end + 1).saturating_sub(data_start);
    if data_end < data_start || actual != expected {
        return Err(Error::Corrupt(format!(
            "DATA segment [{data_start}, {data_end}] holds {actual} bytes but $TOT·$PAR needs {expected}"
        )));
    }
    if data_end >= bytes.len() {
        return Err(Error::Corrupt(format!(
            "DATA segment ends at byte {data_end} past end of file ({} bytes)",
            bytes.len()
        )));
    }
    let data = &bytes[data_start..=data_end];

    let mut values = Vec::with_capacity(n_tot * n_par);
    let mut pos = 0;
    for _ in 0..n_tot {
        for &w in &widths {
            let field = &data[pos..pos + w];
            pos += w;
            let v = match (datatype.as_str(), w) {
                ("F", 4) => {
                    let b: [u8; 4] = field.try_into().expect("4-byte field");
                    f64::from(match order {
                        ByteOrder::Little => f32::from_le_bytes(b),
                        ByteOrder::Big => f32::from_be_bytes(b),
                    })
                }
                ("I", 4) => {
                    let b: [u8; 4] = field.try_into().expect("4-byte field");
                    f64::from(match order {
                        ByteOrder::Little => u32::from_le_bytes(b),
                        ByteOrder::Big => u32::from_be_bytes(b),
                    })
                }
                ("I", 2) => {
                    let b: [u8; 2] = field.try_into().expect("2-byte field");
                    f64::from(match order {
                        ByteOrder::Little => u16::from_le_bytes(b),
                        ByteOrder::Big => u16::from_be_bytes(b),
                    })
                }
                _ => unreachable!("widths validated above"),
            };
            values.push(v);
        }
    }
    let panel = MarkerPanel::new(names)?;
    let table = EventTable::new(panel.clone(), values, sample_id)?;
    Ok((panel, table))
}
