//! CSV input parsing and output writing.

use std::fs;
use std::io::Write;
use std::path::Path;

use iwgvem::{DMatrix, LoadingStructure, ResponseMatrix};

use crate::error::CliError;

/// Reads a rectangular 0/1 table. The first row is treated as a header when
/// it contains a cell that is not a number at all.
/// Optional header cells and the data rows.
type Table = (Option<Vec<String>>, Vec<Vec<u8>>);

fn read_binary_table(path: &Path, what: &str) -> Result<Table, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {what} {}: {e}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut header = None;
    let mut rows = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Data(format!("malformed {what} CSV {}: {e}", path.display())))?;
        let parsed: Option<Vec<u8>> = rec
            .iter()
            .map(|c| match c {
                "0" => Some(0),
                "1" => Some(1),
                _ => None,
            })
            .collect();
        match parsed {
            Some(row) => rows.push(row),
            None if line == 0 && rec.iter().any(|c| c.parse::<f64>().is_err()) => {
                header = Some(rec.iter().map(str::to_string).collect())
            }
            None => {
                let (col, cell) = rec
                    .iter()
                    .enumerate()
                    .find(|(_, c)| *c != "0" && *c != "1")
                    .expect("a non-binary cell exists");
                return Err(CliError::Data(format!(
                    "non-binary entry `{cell}` in {what} {} at line {}, column {}",
                    path.display(),
                    line + 1,
                    col + 1
                )));
            }
        }
    }
    if rows.is_empty() {
        return Err(CliError::Data(format!("{what} {} has no data rows", path.display())));
    }
    Ok((header, rows))
}

pub fn read_responses(path: &Path) -> Result<ResponseMatrix, CliError> {
    let (_, rows) = read_binary_table(path, "response file")?;
    Ok(ResponseMatrix::from_rows(&rows)?)
}

/// A mask CSV path or the literal `exploratory:K`.
pub fn read_structure(arg: &str, n_items: usize) -> Result<LoadingStructure, CliError> {
    if let Some(k) = arg.strip_prefix("exploratory:") {
        let k: usize = k
            .parse()
            .map_err(|_| CliError::Usage(format!("`{arg}`: expected exploratory:K with a positive integer K")))?;
        if k == 0 {
            return Err(CliError::Usage("exploratory:K needs K >= 1".into()));
        }
        return Ok(LoadingStructure::exploratory(n_items, k)?);
    }
    let (_, rows) = read_binary_table(Path::new(arg), "structure file")?;
    if rows.len() != n_items {
        return Err(CliError::Data(format!(
            "dimension mismatch: structure has {} rows but the responses have {} items",
            rows.len(),
            n_items
        )));
    }
    let bools: Vec<Vec<bool>> = rows.iter().map(|r| r.iter().map(|&v| v == 1).collect()).collect();
    Ok(LoadingStructure::from_rows(&bools)?)
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

/// Writes a matrix with a leading 1-based index column.
pub fn write_matrix(path: &Path, index_name: &str, m: &DMatrix<f64>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![index_name.to_string()];
    header.extend((1..=m.ncols()).map(|c| format!("factor_{c}")));
    let err = |e: csv::Error| CliError::Data(format!("writing {}: {e}", path.display()));
    w.write_record(&header).map_err(err)?;
    for r in 0..m.nrows() {
        let mut rec = vec![(r + 1).to_string()];
        rec.extend((0..m.ncols()).map(|c| fmt_f64(m[(r, c)])));
        w.write_record(&rec).map_err(err)?;
    }
    write_file(path, &w.into_inner().map_err(|e| CliError::Data(e.to_string()))?)
}

pub fn write_intercepts(path: &Path, b: &[f64]) -> Result<(), CliError> {
    let mut out = String::from("item,b\n");
    for (j, v) in b.iter().enumerate() {
        out.push_str(&format!("{},{}\n", j + 1, fmt_f64(*v)));
    }
    write_file(path, out.as_bytes())
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn write_with<F>(path: &Path, f: F) -> Result<(), CliError>
where
    F: FnOnce(&mut Vec<u8>) -> Result<(), CliError>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    buf.flush().expect("writing to memory");
    write_file(path, &buf)
}

pub fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Data(format!("cannot create {}: {e}", path.display())))
}
