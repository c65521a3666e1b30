//! Rounding, hashing and line-delimited JSON helpers shared across modules.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// `count / total` as a percentage in tenths, rounded half-up with exact
/// integer arithmetic.
pub fn half_up_tenths(count: u64, total: u64) -> u64 {
    if total == 0 {
        return 0;
    }
    (2 * count * 1000 + total) / (2 * total)
}

pub fn half_up_percent(count: u64, total: u64) -> f64 {
    half_up_tenths(count, total) as f64 / 10.0
}

/// Percentages in tenths that sum to exactly 1000 (Hamilton apportionment).
/// Ties on the remainder go to the earlier entry.
pub fn largest_remainder_tenths(counts: &[usize]) -> Vec<u64> {
    let total: u64 = counts.iter().map(|&c| c as u64).sum();
    if total == 0 {
        return vec![0; counts.len()];
    }
    let mut tenths: Vec<u64> = counts.iter().map(|&c| c as u64 * 1000 / total).collect();
    let mut remainders: Vec<(u64, usize)> = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| (c as u64 * 1000 % total, i))
        .collect();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let missing = 1000 - tenths.iter().sum::<u64>();
    for &(_, i) in remainders.iter().take(missing as usize) {
        tenths[i] += 1;
    }
    tenths
}

pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> io::Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("{}:{}: {e}", path.display(), i + 1),
                )
            })
        })
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> io::Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", path.display())))
}
