use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::Result;
use kmask_core::Error;

pub fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).map_err(|e| Error::io(path, e))?,
    ))
}

pub fn read_to_string(path: &Path) -> Result<String> {
    Ok(std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// File when `path` is given, stdout otherwise.
pub fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| Error::io(p, e))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

/// Lines as raw bytes, so invalid UTF-8 can be reported with its position.
pub fn byte_lines(r: impl BufRead) -> impl Iterator<Item = io::Result<Vec<u8>>> {
    r.split(b'\n').map(|l| {
        l.map(|mut v| {
            if v.last() == Some(&b'\r') {
                v.pop();
            }
            v
        })
    })
}
