//! Dense row-major matrices over f64.
//!
//! Everything in this crate runs at desk scale (a few hundred rows), so the
//! representation is a flat `Vec<f64>` with naive loops. The text format used
//! for persistence is a header line `rows cols` followed by one line of
//! space-separated decimals per row.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "expected {} entries for a {rows}x{cols} matrix, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::DimensionMismatch(format!(
                    "row {i} has {} entries, expected {c}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self { rows: r, cols: c, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    /// Column vector (n x 1) from a slice.
    pub fn column_vector(v: &[f64]) -> Self {
        Self { rows: v.len(), cols: 1, data: v.to_vec() }
    }

    pub fn random_normal(rows: usize, cols: usize, mean: f64, std: f64, rng: &mut Rng) -> Self {
        Self::from_fn(rows, cols, |_, _| mean + std * rng.normal())
    }

    /// Glorot-uniform init on [-a, a] with a = sqrt(6 / (fan_in + fan_out)).
    pub fn random_glorot(rows: usize, cols: usize, rng: &mut Rng) -> Self {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        Self::from_fn(rows, cols, |_, _| (2.0 * rng.uniform() - 1.0) * a)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, v: &[f64]) {
        assert_eq!(v.len(), self.rows, "column length mismatch");
        for i in 0..self.rows {
            self[(i, j)] = v[i];
        }
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(
            self.cols, other.rows,
            "matmul shape mismatch: {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let src = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "shape mismatch");
        for (d, s) in self.data.iter_mut().zip(&other.data) {
            *d += s;
        }
    }

    /// self += alpha * other
    pub fn add_scaled(&mut self, alpha: f64, other: &Self) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "shape mismatch");
        for (d, s) in self.data.iter_mut().zip(&other.data) {
            *d += alpha * s;
        }
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        self.map(|x| alpha * x)
    }

    pub fn scale_in_place(&mut self, alpha: f64) {
        for x in &mut self.data {
            *x *= alpha;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "shape mismatch");
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, &x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Max |a_ij - a_ji| over the square matrix.
    pub fn asymmetry(&self) -> f64 {
        assert!(self.is_square(), "asymmetry needs a square matrix");
        let mut worst = 0.0_f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// Writes the text format: `rows cols` header, one row per line.
    /// f64 Display is shortest-round-trip, so read_text recovers bits exactly.
    pub fn write_text(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "{} {}", self.rows, self.cols)?;
        let mut line = String::new();
        for i in 0..self.rows {
            line.clear();
            for j in 0..self.cols {
                if j > 0 {
                    line.push(' ');
                }
                let _ = write!(line, "{}", self[(i, j)]);
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_text(&mut buf).expect("write to Vec cannot fail");
        String::from_utf8(buf).expect("matrix text is ascii")
    }

    pub fn read_text(r: &mut impl BufRead) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let (rows, cols) = loop {
            let (idx, line) = lines
                .next()
                .ok_or_else(|| parse_err(0, "missing header line"))?;
            let line = line?;
            let body = strip_comment(&line);
            if body.is_empty() {
                continue;
            }
            let mut parts = body.split_whitespace();
            let rows: usize = parse_field(parts.next(), idx + 1, "rows")?;
            let cols: usize = parse_field(parts.next(), idx + 1, "cols")?;
            if parts.next().is_some() {
                return Err(parse_err(idx + 1, "header has trailing fields"));
            }
            break (rows, cols);
        };
        let mut data = Vec::with_capacity(rows * cols);
        let mut filled = 0usize;
        for (idx, line) in &mut lines {
            let line = line?;
            let body = strip_comment(&line);
            if body.is_empty() {
                continue;
            }
            if filled == rows {
                return Err(parse_err(idx + 1, "more rows than the header declares"));
            }
            let mut count = 0usize;
            for tok in body.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| parse_err(idx + 1, &format!("bad number '{tok}'")))?;
                data.push(v);
                count += 1;
            }
            if count != cols {
                return Err(parse_err(
                    idx + 1,
                    &format!("expected {cols} entries in row, got {count}"),
                ));
            }
            filled += 1;
        }
        if filled != rows {
            return Err(parse_err(0, &format!("expected {rows} rows, got {filled}")));
        }
        Self::from_vec(rows, cols, data)
    }

    pub fn from_text(s: &str) -> Result<Self> {
        Self::read_text(&mut s.as_bytes())
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols, "index ({i},{j}) out of bounds");
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols, "index ({i},{j}) out of bounds");
        &mut self.data[i * self.cols + j]
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(pos) => line[..pos].trim(),
        None => line.trim(),
    }
}

fn parse_err(line: usize, message: &str) -> Error {
    Error::Parse { line, message: message.to_string() }
}

fn parse_field<T: std::str::FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<T> {
    let tok = tok.ok_or_else(|| parse_err(line, &format!("missing {what}")))?;
    tok.parse().map_err(|_| parse_err(line, &format!("bad {what} '{tok}'")))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot length mismatch");
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn matmul_identity_is_noop() {
        let mut rng = Rng::new(7);
        let a = DenseMatrix::random_normal(4, 3, 0.0, 1.0, &mut rng);
        let left = DenseMatrix::identity(4).matmul(&a);
        let right = a.matmul(&DenseMatrix::identity(3));
        assert_eq!(a, left);
        assert_eq!(a, right);
    }

    #[test]
    fn matmul_matches_hand_example() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = DenseMatrix::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transpose_involution() {
        let mut rng = Rng::new(11);
        let a = DenseMatrix::random_normal(5, 2, 0.0, 1.0, &mut rng);
        assert_eq!(a, a.transpose().transpose());
    }

    #[test]
    fn frobenius_norm_of_identity() {
        let n = 9;
        let i = DenseMatrix::identity(n);
        assert!((i.frobenius_norm() - (n as f64).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn text_round_trip_is_exact() {
        let mut rng = Rng::new(3);
        let a = DenseMatrix::random_normal(6, 4, 0.0, 1.0, &mut rng)
            .map(|x| x * 1e-7)
            .map(|x| if x.abs() < 1e-8 { 0.0 } else { x });
        let text = a.to_text();
        let b = DenseMatrix::from_text(&text).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn read_text_rejects_wrong_row_count() {
        let err = DenseMatrix::from_text("2 2\n1 2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "got {err:?}");
    }

    #[test]
    fn read_text_rejects_wrong_column_count() {
        let err = DenseMatrix::from_text("2 2\n1 2\n3 4 5\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "got {err:?}");
    }

    #[test]
    fn read_text_skips_comments_and_blank_lines() {
        let m = DenseMatrix::from_text("# header comment\n2 2\n\n1 2 # row one\n3 4\n").unwrap();
        assert_eq!(m.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn glorot_stays_in_bounds() {
        let mut rng = Rng::new(99);
        let w = DenseMatrix::random_glorot(8, 8, &mut rng);
        let a = (6.0 / 16.0_f64).sqrt();
        assert!(w.max_abs() <= a);
    }
}
