//! CSV persistence. Every file starts with a `# schema_version=N` line,
//! uses LF line endings and is written to a temporary file and renamed into
//! place, so a crash never leaves a truncated table behind.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Shortest text that parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

pub fn fmt_bool(b: bool) -> String {
    if b { "true" } else { "false" }.to_string()
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Writes `bytes` to `path` via a sibling temporary file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    {
        let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("renaming {} to {}", tmp.display(), path.display()))
}

/// Renders a table with the schema line, any extra `# ` comment lines and a header.
pub fn render_csv(comments: &[String], header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut buf = format!("# schema_version={SCHEMA_VERSION}\n").into_bytes();
    for c in comments {
        buf.extend_from_slice(format!("# {c}\n").as_bytes());
    }
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(buf);
    w.write_record(header)?;
    for r in rows {
        if r.len() != header.len() {
            bail!("row has {} fields, header has {}", r.len(), header.len());
        }
        w.write_record(r)?;
    }
    w.flush()?;
    w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))
}

pub fn write_csv(path: &Path, comments: &[String], header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    write_atomic(path, &render_csv(comments, header, rows)?)
}

/// Reads a table written by [`write_csv`], checking its header.
pub fn read_csv(path: &Path, header: &[&str]) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let first = text.lines().next().unwrap_or_default();
    if first != format!("# schema_version={SCHEMA_VERSION}") {
        bail!("{}: unsupported schema line {first:?}", path.display());
    }
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let found: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if found != header {
        bail!("{}: header {:?} does not match expected {:?}", path.display(), found, header);
    }
    r.records()
        .map(|rec| Ok(rec?.iter().map(str::to_string).collect()))
        .collect::<Result<_>>()
        .with_context(|| format!("parsing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for x in [0.1, 1.0 / 3.0, 1e-300, 2.5e17, f64::INFINITY] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn render_layout() {
        let rows = vec![vec!["a".into(), fmt_f64(0.5)]];
        let out = String::from_utf8(render_csv(&["note".into()], &["x", "y"], &rows).unwrap()).unwrap();
        assert_eq!(out, "# schema_version=1\n# note\nx,y\na,0.5\n");
        assert!(render_csv(&[], &["x"], &rows).is_err());
    }

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let rows = vec![vec!["1".to_string(), "2".to_string()], vec!["3".into(), "4".into()]];
        write_csv(&p, &[], &["a", "b"], &rows).unwrap();
        assert_eq!(read_csv(&p, &["a", "b"]).unwrap(), rows);
        assert!(read_csv(&p, &["a", "c"]).is_err());
        assert!(!tmp_path(&p).exists());
    }
}
