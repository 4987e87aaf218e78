pub mod fit;
pub mod id;
pub mod lab;
pub mod theory;

use std::path::Path;

use crate::{CliError, CliResult};

pub(crate) fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn read_text(path: &Path) -> CliResult<String> {
    let bytes = read_bytes(path)?;
    String::from_utf8(bytes)
        .map_err(|_| CliError::data(path.display().to_string(), "not UTF-8 text"))
}

/// Pairs two argument lists, repeating a length-one list to match the other.
pub(crate) fn broadcast<A: Copy, B: Copy>(
    a: &[A],
    b: &[B],
    names: (&str, &str),
) -> CliResult<Vec<(A, B)>> {
    let n = a.len().max(b.len());
    let ok = |len: usize| len == n || len == 1;
    if a.is_empty() || b.is_empty() || !ok(a.len()) || !ok(b.len()) {
        return Err(CliError::Usage(format!(
            "--{} and --{} need equal lengths or one value (got {} and {})",
            names.0,
            names.1,
            a.len(),
            b.len()
        )));
    }
    Ok((0..n).map(|i| (a[i % a.len()], b[i % b.len()])).collect())
}
