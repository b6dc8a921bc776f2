//! Plain-text matrix serialization shared by QP dumps and polytope dumps.
//!
//! Format: a named block is one header line `<name> <rows> <cols>` followed by
//! `rows` lines of `cols` space-separated values. Values are printed with Rust's
//! shortest round-trip float formatting, so write/read round-trips are exact.

use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use std::io::{BufRead, Write};

pub fn write_matrix<W: Write>(w: &mut W, name: &str, m: &DMatrix<f64>) -> Result<()> {
    writeln!(w, "{name} {} {}", m.nrows(), m.ncols())?;
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| format!("{}", m[(r, c)])).collect();
        writeln!(w, "{}", row.join(" "))?;
    }
    Ok(())
}

pub fn write_vector<W: Write>(w: &mut W, name: &str, v: &DVector<f64>) -> Result<()> {
    writeln!(w, "{name} {} 1", v.len())?;
    for i in 0..v.len() {
        writeln!(w, "{}", v[i])?;
    }
    Ok(())
}

/// Line reader that keeps track of position for error messages.
pub struct Lines<'a, R: BufRead> {
    reader: &'a mut R,
    line_no: usize,
}

impl<'a, R: BufRead> Lines<'a, R> {
    pub fn new(reader: &'a mut R) -> Self {
        Lines { reader, line_no: 0 }
    }

    pub fn next_line(&mut self) -> Result<String> {
        let mut buf = String::new();
        let n = self.reader.read_line(&mut buf)?;
        self.line_no += 1;
        if n == 0 {
            return Err(Error::Parse(format!(
                "unexpected end of input at line {}",
                self.line_no
            )));
        }
        Ok(buf.trim_end().to_string())
    }

    pub fn line_no(&self) -> usize {
        self.line_no
    }
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| Error::Parse(format!("invalid number '{tok}' at line {line}")))
}

pub fn read_matrix<R: BufRead>(lines: &mut Lines<R>, expect: &str) -> Result<DMatrix<f64>> {
    let header = lines.next_line()?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 3 || parts[0] != expect {
        return Err(Error::Parse(format!(
            "expected block header '{expect} <rows> <cols>' at line {}, got '{header}'",
            lines.line_no()
        )));
    }
    let rows: usize = parts[1]
        .parse()
        .map_err(|_| Error::Parse(format!("bad row count at line {}", lines.line_no())))?;
    let cols: usize = parts[2]
        .parse()
        .map_err(|_| Error::Parse(format!("bad column count at line {}", lines.line_no())))?;
    let mut m = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        let line = lines.next_line()?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != cols {
            return Err(Error::Parse(format!(
                "expected {cols} values at line {}, got {}",
                lines.line_no(),
                toks.len()
            )));
        }
        for (c, tok) in toks.iter().enumerate() {
            m[(r, c)] = parse_f64(tok, lines.line_no())?;
        }
    }
    Ok(m)
}

pub fn read_vector<R: BufRead>(lines: &mut Lines<R>, expect: &str) -> Result<DVector<f64>> {
    let m = read_matrix(lines, expect)?;
    if m.ncols() != 1 && m.nrows() != 0 {
        return Err(Error::Parse(format!(
            "block '{expect}' is {}x{}, expected a column vector",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(DVector::from_fn(m.nrows(), |i, _| m[(i, 0)]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_roundtrip_exact() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, -2.5e-17, 3.000000000001, 0.1, 1e308, -0.0]);
        let mut buf = Vec::new();
        write_matrix(&mut buf, "M", &m).unwrap();
        let mut reader = std::io::BufReader::new(buf.as_slice());
        let mut lines = Lines::new(&mut reader);
        let back = read_matrix(&mut lines, "M").unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(m[(r, c)].to_bits(), back[(r, c)].to_bits());
            }
        }
    }

    #[test]
    fn header_mismatch_reports_line() {
        let mut reader = std::io::BufReader::new("X 1 1\n1.0\n".as_bytes());
        let mut lines = Lines::new(&mut reader);
        let err = read_matrix(&mut lines, "Y").unwrap_err();
        assert!(format!("{err}").contains("line 1"));
    }
}
