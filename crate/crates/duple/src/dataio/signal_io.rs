//! Reading and writing single-channel vibration signal files.
//!
//! Two encodings are supported and auto-detected on read:
//!
//! * binary: magic `DFOS`, a little-endian `u32` sample count, then
//!   that many little-endian `f32` samples;
//! * text: one decimal sample per line (blank lines and `#` comments
//!   allowed).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DFOS";

fn sig_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Signal {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

/// Reads a signal file, auto-detecting binary vs text by the magic
/// bytes.  Samples must be finite and at least one must be present.
pub fn read_signal(path: &Path) -> Result<Vec<f64>> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut reader = BufReader::new(file);
    let mut head = [0u8; 4];
    let got = read_up_to(&mut reader, &mut head)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let samples = if got == 4 && &head == MAGIC {
        read_binary_body(path, &mut reader)?
    } else {
        read_text_body(path, &head[..got], &mut reader)?
    };
    if samples.is_empty() {
        return Err(sig_err(path, "no samples"));
    }
    if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
        return Err(sig_err(path, format!("non-finite sample at index {i}")));
    }
    Ok(samples)
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            break;
        }
        filled += n;
    }
    Ok(filled)
}

fn read_binary_body(path: &Path, r: &mut impl Read) -> Result<Vec<f64>> {
    let mut lenb = [0u8; 4];
    r.read_exact(&mut lenb)
        .map_err(|_| sig_err(path, "truncated header"))?;
    let count = u32::from_le_bytes(lenb) as usize;
    let mut payload = vec![0u8; count * 4];
    r.read_exact(&mut payload).map_err(|_| {
        sig_err(
            path,
            format!("truncated payload: header promises {count} samples"),
        )
    })?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path.display().to_string(), e))? != 0 {
        return Err(sig_err(path, "trailing bytes after payload"));
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn read_text_body(path: &Path, head: &[u8], r: &mut impl Read) -> Result<Vec<f64>> {
    let mut rest = Vec::from(head);
    r.read_to_end(&mut rest)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let text = String::from_utf8(rest)
        .map_err(|_| sig_err(path, "not valid utf-8 (and not a binary signal)"))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let v: f64 = trimmed
            .parse()
            .map_err(|_| sig_err(path, format!("line {}: bad sample {trimmed:?}", ln + 1)))?;
        out.push(v);
    }
    Ok(out)
}

/// Writes the binary encoding.  Samples are stored as `f32`, so values
/// round to `f32` precision.
pub fn write_signal_binary(path: &Path, samples: &[f64]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let werr = |e: std::io::Error| Error::io(path.display().to_string(), e);
    w.write_all(MAGIC).map_err(werr)?;
    w.write_all(&(samples.len() as u32).to_le_bytes()).map_err(werr)?;
    for &s in samples {
        w.write_all(&(s as f32).to_le_bytes()).map_err(werr)?;
    }
    w.flush().map_err(werr)?;
    Ok(())
}

/// Writes the text encoding with round-trip-exact decimal formatting.
pub fn write_signal_text(path: &Path, samples: &[f64]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let werr = |e: std::io::Error| Error::io(path.display().to_string(), e);
    for &s in samples {
        writeln!(w, "{s}").map_err(werr)?;
    }
    w.flush().map_err(werr)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_round_trip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.sig");
        let samples = vec![0.0, 1.5, -2.25, 1.0e-7, 12345.678];
        write_signal_binary(&path, &samples).unwrap();
        let back = read_signal(&path).unwrap();
        let want: Vec<f64> = samples.iter().map(|&s| s as f32 as f64).collect();
        assert_eq!(back, want);
    }

    #[test]
    fn text_round_trip_is_f64_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.txt");
        let samples = vec![0.1, -1.0 / 3.0, 2.0_f64.sqrt(), 4096.0];
        write_signal_text(&path, &samples).unwrap();
        let back = read_signal(&path).unwrap();
        assert_eq!(back, samples);
    }

    #[test]
    fn text_allows_comments_and_blanks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.txt");
        std::fs::write(&path, "# header\n1.5\n\n  -2\n").unwrap();
        assert_eq!(read_signal(&path).unwrap(), vec![1.5, -2.0]);
    }

    #[test]
    fn truncated_binary_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.sig");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"DFOS");
        bytes.extend_from_slice(&10u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes()); // only 1 of 10
        std::fs::write(&path, bytes).unwrap();
        let err = read_signal(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn garbage_text_is_reported_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.txt");
        std::fs::write(&path, "1.0\nnot-a-number\n").unwrap();
        let err = read_signal(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn non_finite_text_sample_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.txt");
        std::fs::write(&path, "1.0\nNaN\n").unwrap();
        let err = read_signal(&path).unwrap_err();
        assert!(err.to_string().contains("non-finite"), "{err}");
    }

    #[test]
    fn empty_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.txt");
        std::fs::write(&path, "").unwrap();
        assert!(read_signal(&path).is_err());
    }
}
