//! Binary field/trace blocks and CSV helpers.
//!
//! Field block: `b"RTEF"`, u32 rows, u32 columns, u32 reserved, then
//! little-endian f64 values row-major. Trace block: `b"RTET"`, u32 slots,
//! u32 samples, u32 part code, f64 dt, then values sample-major.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::phase_grid::{BoundaryTrace, Field, PhaseSpaceGrid, TracePart};

const FIELD_MAGIC: &[u8; 4] = b"RTEF";
const TRACE_MAGIC: &[u8; 4] = b"RTET";

/// A raw `RTEF` block: `rows × cols` values.
#[derive(Clone, Debug, PartialEq)]
pub struct RawBlock {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub fn encode_block(rows: usize, cols: usize, values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * values.len());
    out.extend_from_slice(FIELD_MAGIC);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_block(path: &Path, bytes: &[u8]) -> Result<RawBlock> {
    if bytes.len() < 16 || &bytes[..4] != FIELD_MAGIC {
        return Err(format_err(path, "missing RTEF header"));
    }
    let rows = u32_at(bytes, 4) as usize;
    let cols = u32_at(bytes, 8) as usize;
    let body = &bytes[16..];
    if body.len() != rows * cols * 8 {
        return Err(format_err(
            path,
            format!("expected {} values, found {} bytes", rows * cols, body.len()),
        ));
    }
    Ok(RawBlock {
        rows,
        cols,
        values: f64s(body),
    })
}

pub fn read_block(path: &Path) -> Result<RawBlock> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_block(path, &bytes)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| Error::io(path, e))
}

pub fn write_field(path: &Path, field: &Field) -> Result<()> {
    write_bytes(
        path,
        &encode_block(field.n_cells(), field.n_dirs(), field.values()),
    )
}

pub fn read_field(path: &Path, grid: &PhaseSpaceGrid) -> Result<Field> {
    let block = read_block(path)?;
    if block.rows != grid.n_cells() || block.cols != grid.n_dirs() {
        return Err(format_err(
            path,
            format!(
                "field is {}×{}, grid expects {}×{}",
                block.rows,
                block.cols,
                grid.n_cells(),
                grid.n_dirs()
            ),
        ));
    }
    Field::from_values(grid, block.values)
}

pub fn encode_trace(trace: &BoundaryTrace) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 8 * trace.values().len());
    out.extend_from_slice(TRACE_MAGIC);
    out.extend_from_slice(&(trace.n_slots() as u32).to_le_bytes());
    out.extend_from_slice(&(trace.n_samples() as u32).to_le_bytes());
    out.extend_from_slice(&trace.part().code().to_le_bytes());
    out.extend_from_slice(&trace.dt().to_le_bytes());
    for v in trace.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_trace(path: &Path, trace: &BoundaryTrace) -> Result<()> {
    write_bytes(path, &encode_trace(trace))
}

pub fn read_trace(path: &Path, grid: &PhaseSpaceGrid) -> Result<BoundaryTrace> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 24 || &bytes[..4] != TRACE_MAGIC {
        return Err(format_err(path, "missing RTET header"));
    }
    let n_slots = u32_at(&bytes, 4) as usize;
    let n_samples = u32_at(&bytes, 8) as usize;
    let part = TracePart::from_code(u32_at(&bytes, 12))
        .ok_or_else(|| format_err(path, "unknown trace part"))?;
    let dt = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
    if n_slots != grid.slots(part).len() || bytes.len() - 24 != n_slots * n_samples * 8 {
        return Err(format_err(path, "trace shape does not match grid"));
    }
    BoundaryTrace::from_values(grid, part, n_samples, dt, f64s(&bytes[24..]))
}

/// Reads `cell,value` rows (header optional) into a dense per-cell array.
pub fn read_coefficient_csv(path: &Path, n_cells: usize) -> Result<Vec<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| format_err(path, e.to_string()))?;
    let mut out = vec![f64::NAN; n_cells];
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| format_err(path, e.to_string()))?;
        if record.len() < 2 {
            return Err(format_err(path, format!("row {line}: expected cell,value")));
        }
        let Ok(cell) = record[0].parse::<usize>() else {
            if line == 0 {
                continue;
            }
            return Err(format_err(path, format!("row {line}: bad cell index")));
        };
        let value: f64 = record[1]
            .parse()
            .map_err(|_| format_err(path, format!("row {line}: bad value")))?;
        if cell >= n_cells {
            return Err(format_err(path, format!("cell {cell} out of range")));
        }
        out[cell] = value;
    }
    if let Some(missing) = out.iter().position(|v| v.is_nan()) {
        return Err(format_err(path, format!("no value for cell {missing}")));
    }
    Ok(out)
}

/// Column-oriented CSV writer with round-trip float formatting.
pub struct CsvTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| format_err(path, e.to_string()))?;
        w.write_record(&self.header)
            .map_err(|e| format_err(path, e.to_string()))?;
        for row in &self.rows {
            w.write_record(row)
                .map_err(|e| format_err(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Round-trip formatting (`{}` on f64 is the shortest exact representation).
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}
