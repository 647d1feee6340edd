use std::fs::{self, OpenOptions};
use std::path::Path;

use latprobe_core::AttackRecord;

use crate::failure::Failure;

/// Reads a records file. A torn final line (no newline, not valid JSON) is
/// what an interrupted writer leaves behind; with `repair` it is cut off,
/// otherwise ignored. Anything else malformed is an error.
pub fn read_records(path: &Path, repair: bool) -> Result<Vec<AttackRecord>, Failure> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let bytes = fs::read(path)?;
    let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let mut records = Vec::new();
    for (n, line) in bytes[..complete].split(|&b| b == b'\n').enumerate() {
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let r = serde_json::from_slice(line)
            .map_err(|e| Failure::runtime(format!("{} line {}: {e}", path.display(), n + 1)))?;
        records.push(r);
    }
    let tail = &bytes[complete..];
    if !tail.iter().all(u8::is_ascii_whitespace) {
        match serde_json::from_slice::<AttackRecord>(tail) {
            Ok(r) => {
                records.push(r);
                if repair {
                    OpenOptions::new().append(true).open(path).and_then(|mut f| {
                        use std::io::Write;
                        f.write_all(b"\n")
                    })?;
                }
            }
            Err(_) if repair => {
                let f = OpenOptions::new().write(true).open(path)?;
                f.set_len(complete as u64)?;
            }
            Err(_) => {}
        }
    }
    Ok(records)
}

pub fn distinct_hashes(records: &[AttackRecord]) -> Vec<String> {
    let mut h: Vec<String> = records.iter().map(|r| r.config_hash.clone()).collect();
    h.sort();
    h.dedup();
    h
}
