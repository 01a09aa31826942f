//! Per-tile power traces and their on-disk format.
//!
//! A trace file starts with one header line
//!
//! ```text
//! imc-trace v1, tile=<id>, rate=<Sa/s>, n=<count>, t0=<seconds>
//! ```
//!
//! followed by `n` samples in watts, one decimal number per line (`.trace`),
//! or `n` little-endian f64 values (`.tbin`). `t0` is the absolute time of the
//! first sample and defaults to 0 when absent.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const TEXT_EXT: &str = "trace";
pub const BINARY_EXT: &str = "tbin";

#[derive(Debug, Clone, PartialEq)]
pub struct PowerTrace {
    pub tile_id: usize,
    /// Samples per second.
    pub sample_rate: f64,
    /// Time of the first sample, seconds.
    pub t0: f64,
    /// Instantaneous power, watts.
    pub samples: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    Text,
    Binary,
}

impl TraceFormat {
    pub fn extension(self) -> &'static str {
        match self {
            TraceFormat::Text => TEXT_EXT,
            TraceFormat::Binary => BINARY_EXT,
        }
    }
}

impl PowerTrace {
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate
    }

    /// Energy represented by the trace, joules.
    pub fn energy(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.sample_rate
    }

    pub fn header(&self) -> String {
        format!(
            "imc-trace v1, tile={}, rate={}, n={}, t0={}",
            self.tile_id,
            self.sample_rate,
            self.samples.len(),
            self.t0
        )
    }

    pub fn file_name(&self, format: TraceFormat) -> String {
        format!("tile_{:03}.{}", self.tile_id, format.extension())
    }

    pub fn write(&self, path: impl AsRef<Path>, format: TraceFormat) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        writeln!(w, "{}", self.header())?;
        match format {
            TraceFormat::Text => {
                for s in &self.samples {
                    writeln!(w, "{s}")?;
                }
            }
            TraceFormat::Binary => {
                for s in &self.samples {
                    w.write_all(&s.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| {
            Error::TraceFormat(format!("{}: missing header line", path.display()))
        })?;
        let header = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| Error::TraceFormat(format!("{}: header is not UTF-8", path.display())))?;
        let (tile_id, sample_rate, n, t0) = parse_header(header)?;
        let body = &bytes[nl + 1..];
        let binary = path.extension().is_some_and(|e| e == BINARY_EXT);
        let samples: Vec<f64> = if binary {
            if body.len() != n * 8 {
                return Err(Error::TraceFormat(format!(
                    "{}: expected {} bytes of samples, found {}",
                    path.display(),
                    n * 8,
                    body.len()
                )));
            }
            body.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect()
        } else {
            let text = std::str::from_utf8(body).map_err(|_| {
                Error::TraceFormat(format!("{}: body is not UTF-8", path.display()))
            })?;
            text.lines()
                .filter(|l| !l.trim().is_empty())
                .enumerate()
                .map(|(i, l)| {
                    l.trim().parse::<f64>().map_err(|_| {
                        Error::TraceFormat(format!(
                            "{}: bad sample on line {}: `{l}`",
                            path.display(),
                            i + 2
                        ))
                    })
                })
                .collect::<Result<_>>()?
        };
        if samples.len() != n {
            return Err(Error::TraceFormat(format!(
                "{}: header declares {n} samples, found {}",
                path.display(),
                samples.len()
            )));
        }
        Ok(Self {
            tile_id,
            sample_rate,
            t0,
            samples,
        })
    }
}

fn parse_header(line: &str) -> Result<(usize, f64, usize, f64)> {
    let bad = |m: &str| Error::TraceFormat(format!("{m} in header `{line}`"));
    let mut fields = line.split(',').map(str::trim);
    if fields.next() != Some("imc-trace v1") {
        return Err(bad("missing `imc-trace v1` tag"));
    }
    let (mut tile, mut rate, mut n, mut t0) = (None, None, None, 0.0);
    for f in fields {
        let (k, v) = f.split_once('=').ok_or_else(|| bad("malformed field"))?;
        match k.trim() {
            "tile" => tile = Some(v.trim().parse().map_err(|_| bad("bad tile id"))?),
            "rate" => rate = Some(v.trim().parse::<f64>().map_err(|_| bad("bad rate"))?),
            "n" => n = Some(v.trim().parse().map_err(|_| bad("bad sample count"))?),
            "t0" => t0 = v.trim().parse().map_err(|_| bad("bad t0"))?,
            _ => return Err(bad("unknown field")),
        }
    }
    let rate = rate.ok_or_else(|| bad("missing rate"))?;
    if !(rate > 0.0) {
        return Err(bad("non-positive rate"));
    }
    Ok((
        tile.ok_or_else(|| bad("missing tile"))?,
        rate,
        n.ok_or_else(|| bad("missing n"))?,
        t0,
    ))
}

/// Trace files in `dir`, sorted by name.
pub fn trace_files(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .is_some_and(|e| e == TEXT_EXT || e == BINARY_EXT)
        })
        .collect();
    files.sort();
    Ok(files)
}

pub fn read_trace_dir(dir: impl AsRef<Path>) -> Result<Vec<PowerTrace>> {
    let mut traces = trace_files(dir)?
        .into_iter()
        .map(PowerTrace::read)
        .collect::<Result<Vec<_>>>()?;
    traces.sort_by_key(|t| t.tile_id);
    Ok(traces)
}

pub fn write_trace_dir(
    dir: impl AsRef<Path>,
    traces: &[PowerTrace],
    format: TraceFormat,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for t in traces {
        t.write(dir.join(t.file_name(format)), format)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> PowerTrace {
        PowerTrace {
            tile_id: 7,
            sample_rate: 1e10,
            t0: 1.5e-6,
            samples: vec![0.0, 1.25e-3, 3.0e-7, 0.1],
        }
    }

    #[test]
    fn header_format() {
        assert_eq!(
            sample().header(),
            "imc-trace v1, tile=7, rate=10000000000, n=4, t0=0.0000015"
        );
        let (tile, rate, n, t0) =
            parse_header("imc-trace v1, tile=3, rate=1000000000, n=10").unwrap();
        assert_eq!((tile, rate, n, t0), (3, 1e9, 10, 0.0));
        assert!(parse_header("imc-trace v2, tile=3, rate=1, n=1").is_err());
        assert!(parse_header("imc-trace v1, tile=3, n=1").is_err());
    }

    #[test]
    fn count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.trace");
        fs::write(&p, "imc-trace v1, tile=0, rate=10, n=3\n1\n2\n").unwrap();
        assert!(PowerTrace::read(&p).is_err());
    }

    proptest! {
        #[test]
        fn file_roundtrip_is_exact(samples in prop::collection::vec(-1.0f64..1.0, 0..50), binary in any::<bool>()) {
            let dir = tempfile::tempdir().unwrap();
            let t = PowerTrace { samples, ..sample() };
            let fmt = if binary { TraceFormat::Binary } else { TraceFormat::Text };
            let p = dir.path().join(t.file_name(fmt));
            t.write(&p, fmt).unwrap();
            prop_assert_eq!(PowerTrace::read(&p).unwrap(), t);
        }
    }
}
