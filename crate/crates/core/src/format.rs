//! Pattern files and weight bundles.
//!
//! AMK1 record layout, all little endian:
//! magic `AMK1`, D as u64, K as u64, kind byte (0 binary, 1 real), then the
//! D x K matrix row-major as f64 (entry (i, mu) at index i*K + mu).
//!
//! AMKB bundle: magic `AMKB`, u64 section count, then per section a u64 name
//! length, the UTF-8 name and one AMK1 record.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{AmError, Result};
use crate::numeric::fmt_f64;
use crate::patterns::{PatternKind, PatternMatrix};

const MAGIC: &[u8; 4] = b"AMK1";
const BUNDLE_MAGIC: &[u8; 4] = b"AMKB";

pub fn write_patterns<W: Write>(w: &mut W, p: &PatternMatrix) -> Result<()> {
    let (d, k) = (p.dim(), p.count());
    w.write_all(MAGIC)?;
    w.write_all(&(d as u64).to_le_bytes())?;
    w.write_all(&(k as u64).to_le_bytes())?;
    w.write_all(&[match p.kind() {
        PatternKind::Binary => 0u8,
        PatternKind::Real => 1u8,
    }])?;
    let a = p.as_array();
    for i in 0..d {
        for mu in 0..k {
            w.write_all(&a[[mu, i]].to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| AmError::Format(format!("truncated header: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_patterns<R: Read>(r: &mut R) -> Result<PatternMatrix> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| AmError::Format(format!("missing magic: {e}")))?;
    if &magic != MAGIC {
        return Err(AmError::Format("bad magic, expected AMK1".into()));
    }
    let d = read_u64(r)? as usize;
    let k = read_u64(r)? as usize;
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind)
        .map_err(|e| AmError::Format(format!("missing kind byte: {e}")))?;
    let kind = match kind[0] {
        0 => PatternKind::Binary,
        1 => PatternKind::Real,
        b => return Err(AmError::Format(format!("unknown kind byte {b}"))),
    };
    let n = d
        .checked_mul(k)
        .ok_or_else(|| AmError::Format("size overflow".into()))?;
    let mut bytes = vec![
        0u8;
        n.checked_mul(8)
            .ok_or_else(|| AmError::Format("size overflow".into()))?
    ];
    r.read_exact(&mut bytes)
        .map_err(|e| AmError::Format(format!("truncated matrix: {e}")))?;
    let mut a = Array2::zeros((k, d));
    for (idx, chunk) in bytes.chunks_exact(8).enumerate() {
        let (i, mu) = (idx / k, idx % k);
        a[[mu, i]] = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
    }
    PatternMatrix::new(a, kind)
}

pub fn save_patterns(path: &Path, p: &PatternMatrix) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_patterns(&mut f, p)?;
    f.flush()?;
    Ok(())
}

pub fn load_patterns(path: &Path) -> Result<PatternMatrix> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_patterns(&mut f)
}

/// One memory per line, D comma separated values, no header.
pub fn write_patterns_csv<W: Write>(w: &mut W, p: &PatternMatrix) -> Result<()> {
    for row in p.patterns() {
        let line: Vec<String> = row.iter().map(|&x| fmt_f64(x)).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

/// Reads one memory per line. A first line that does not parse as numbers
/// is treated as a header and skipped.
pub fn read_rows_csv<R: BufRead>(r: R) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            t.split(',').map(|s| s.trim().parse::<f64>()).collect();
        match parsed {
            Ok(v) => rows.push(v),
            Err(_) if lineno == 0 => continue,
            Err(e) => return Err(AmError::Format(format!("line {}: {e}", lineno + 1))),
        }
    }
    Ok(rows)
}

pub fn read_patterns_csv<R: BufRead>(r: R, kind: PatternKind) -> Result<PatternMatrix> {
    let rows = read_rows_csv(r)?;
    PatternMatrix::from_rows(&rows, kind)
}

pub fn write_bundle<W: Write>(w: &mut W, sections: &[(String, PatternMatrix)]) -> Result<()> {
    w.write_all(BUNDLE_MAGIC)?;
    w.write_all(&(sections.len() as u64).to_le_bytes())?;
    for (name, m) in sections {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_patterns(w, m)?;
    }
    Ok(())
}

pub fn read_bundle<R: Read>(r: &mut R) -> Result<Vec<(String, PatternMatrix)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| AmError::Format(format!("missing magic: {e}")))?;
    if &magic != BUNDLE_MAGIC {
        return Err(AmError::Format("bad magic, expected AMKB".into()));
    }
    let n = read_u64(r)?;
    let mut out = Vec::new();
    for _ in 0..n {
        let len = read_u64(r)? as usize;
        if len > 1 << 16 {
            return Err(AmError::Format("section name too long".into()));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| AmError::Format(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|e| AmError::Format(e.to_string()))?;
        out.push((name, read_patterns(r)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patterns::{sample_binary_patterns, sample_gaussian_patterns};

    #[test]
    fn binary_round_trip_is_exact() {
        let p = sample_binary_patterns(13, 5, 4).unwrap();
        let mut buf = Vec::new();
        write_patterns(&mut buf, &p).unwrap();
        assert_eq!(buf.len(), 4 + 8 + 8 + 1 + 13 * 5 * 8);
        assert_eq!(&buf[..4], b"AMK1");
        assert_eq!(read_patterns(&mut buf.as_slice()).unwrap(), p);
    }

    #[test]
    fn layout_is_row_major_d_by_k() {
        let p = PatternMatrix::real_from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]])
            .unwrap();
        let mut buf = Vec::new();
        write_patterns(&mut buf, &p).unwrap();
        let vals: Vec<f64> = buf[21..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        // D = 2 rows of K = 3 entries
        assert_eq!(vals, vec![1.0, 3.0, 5.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn corrupt_files_rejected() {
        let p = sample_gaussian_patterns(3, 2, 1).unwrap();
        let mut buf = Vec::new();
        write_patterns(&mut buf, &p).unwrap();
        assert!(read_patterns(&mut &buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_patterns(&mut bad.as_slice()).is_err());
        let mut kind = buf.clone();
        kind[20] = 9;
        assert!(read_patterns(&mut kind.as_slice()).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let p = sample_gaussian_patterns(4, 6, 9).unwrap();
        let mut buf = Vec::new();
        write_patterns_csv(&mut buf, &p).unwrap();
        let q = read_patterns_csv(buf.as_slice(), PatternKind::Real).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn bundle_round_trip() {
        let a = sample_gaussian_patterns(4, 2, 1).unwrap();
        let b = sample_gaussian_patterns(3, 5, 2).unwrap();
        let sections = vec![("wk".to_string(), a), ("xi".to_string(), b)];
        let mut buf = Vec::new();
        write_bundle(&mut buf, &sections).unwrap();
        assert_eq!(read_bundle(&mut buf.as_slice()).unwrap(), sections);
    }
}
