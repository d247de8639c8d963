use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{DomainError, PoolFile, Result, RoutingTrace};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DomainError + '_ {
    move |source| DomainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads one trace per non-empty line.
pub fn read_traces_jsonl(path: &Path) -> Result<Vec<RoutingTrace>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let trace = serde_json::from_str(&line).map_err(|source| DomainError::Parse {
            path: path.display().to_string(),
            line: n + 1,
            source,
        })?;
        out.push(trace);
    }
    Ok(out)
}

pub fn write_traces_jsonl(path: &Path, traces: &[RoutingTrace]) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for t in traces {
        let line = serde_json::to_string(t).expect("traces serialize");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_pool_file(path: &Path) -> Result<PoolFile> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let pool: PoolFile = serde_json::from_str(&text).map_err(|source| DomainError::Parse {
        path: path.display().to_string(),
        line: 0,
        source,
    })?;
    pool.checked_order()?;
    Ok(pool)
}

pub fn write_pool_file(path: &Path, pool: &PoolFile) -> Result<()> {
    let text = serde_json::to_string_pretty(pool).expect("pool serializes");
    std::fs::write(path, text).map_err(io_err(path))
}
