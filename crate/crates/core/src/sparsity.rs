//! Geometric support patterns between two node clouds.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{dist2, Point};
use crate::mesh::Mesh;

/// Upper bound on the number of distance entries materialized at once.
const BLOCK_ENTRIES: usize = 1_000_000;

/// Row-major sorted set of `(i, j)` pairs with `|x_j - x'_i| <= r`, stored CSR-style.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsityPattern {
    rows: usize,
    cols: usize,
    support_r: f64,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
}

impl SparsityPattern {
    /// Builds a pattern from row-major sorted, unique entries.
    pub fn from_entries(rows: usize, cols: usize, support_r: f64, entries: &[(usize, usize)]) -> Result<Self> {
        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx = Vec::with_capacity(entries.len());
        let mut prev: Option<(usize, usize)> = None;
        for &(i, j) in entries {
            if i >= rows || j >= cols {
                return Err(Error::InvalidArgument(format!(
                    "entry ({i}, {j}) outside a {rows}x{cols} pattern"
                )));
            }
            if prev.is_some_and(|p| p >= (i, j)) {
                return Err(Error::InvalidArgument(
                    "pattern entries must be unique and sorted row-major".into(),
                ));
            }
            prev = Some((i, j));
            row_ptr[i + 1] += 1;
            col_idx.push(j);
        }
        for i in 0..rows {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(Self { rows, cols, support_r, row_ptr, col_idx })
    }

    /// Full pattern, used for dense layers.
    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            support_r: f64::INFINITY,
            row_ptr: (0..=rows).map(|i| i * cols).collect(),
            col_idx: (0..rows).flat_map(|_| 0..cols).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn support_r(&self) -> f64 {
        self.support_r
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    /// Entries in row-major order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.rows).flat_map(move |i| self.row(i).iter().map(move |&j| (i, j)))
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        i < self.rows && self.row(i).binary_search(&j).is_ok()
    }

    /// Scatters a value vector (one per entry) into a dense `rows x cols` matrix.
    pub fn scatter(&self, values: &[f64]) -> DMatrix<f64> {
        assert_eq!(values.len(), self.nnz(), "value vector length must equal nnz");
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for (k, (i, j)) in self.entries().enumerate() {
            m[(i, j)] = values[k];
        }
        m
    }
}

/// `D[(i, j)] = |X[j] - X'[i]|^2` for output nodes `xp` (rows) and input nodes `x` (columns).
pub fn pairwise_sq_distances(x: &[Point], xp: &[Point]) -> DMatrix<f64> {
    DMatrix::from_fn(xp.len(), x.len(), |i, j| dist2(x[j], xp[i]))
}

/// Pattern of all pairs within distance `r`, compared on squared distances.
pub fn support_pattern(x: &[Point], xp: &[Point], r: f64) -> Result<SparsityPattern> {
    if !(r > 0.0) {
        return Err(Error::InvalidArgument(format!("support radius must be positive, got {r}")));
    }
    let r2 = r * r;
    let rows_per_block = (BLOCK_ENTRIES / x.len().max(1)).max(1);
    let blocks: Vec<Vec<(usize, Vec<usize>)>> = (0..xp.len())
        .collect::<Vec<_>>()
        .par_chunks(rows_per_block)
        .map(|rows| {
            let d = pairwise_sq_distances(x, &rows.iter().map(|&i| xp[i]).collect::<Vec<_>>());
            rows.iter()
                .enumerate()
                .map(|(local, &i)| (i, (0..x.len()).filter(|&j| d[(local, j)] <= r2).collect()))
                .collect()
        })
        .collect();
    let mut row_ptr = Vec::with_capacity(xp.len() + 1);
    row_ptr.push(0);
    let mut col_idx = Vec::new();
    for (_, cols) in blocks.into_iter().flatten() {
        col_idx.extend(cols);
        row_ptr.push(col_idx.len());
    }
    if col_idx.is_empty() {
        log::warn!("{}", Error::EmptyPattern { rows: xp.len(), cols: x.len(), r });
    }
    Ok(SparsityPattern { rows: xp.len(), cols: x.len(), support_r: r, row_ptr, col_idx })
}

/// Explicit nonzero bound `N_h * 3 * (sigma' r / h'_min)^2` for P1 output spaces in 2-D.
pub fn prop1_bound(mesh_in: &Mesh, mesh_out: &Mesh, r: f64) -> f64 {
    let n_e = (mesh_out.sigma() * r / mesh_out.h_min()).powi(2);
    mesh_in.n_nodes() as f64 * 3.0 * n_e
}

pub fn pattern_to_string(p: &SparsityPattern) -> String {
    let mut s = format!("PATTERN {} {} {}\n", p.rows, p.cols, p.support_r);
    for (i, j) in p.entries() {
        writeln!(s, "{i} {j}").unwrap();
    }
    s
}

pub fn pattern_from_str(text: &str) -> Result<SparsityPattern> {
    let mut lines = text.lines().enumerate().map(|(n, l)| (n + 1, l));
    let (ln, header) = lines.next().ok_or_else(|| Error::parse(1, "empty pattern file"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != "PATTERN" {
        return Err(Error::parse(ln, "expected `PATTERN <rows> <cols> <r>`"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|e| Error::parse(ln, e.to_string()));
    let (rows, cols) = (num(fields[1])?, num(fields[2])?);
    let r: f64 = fields[3].parse().map_err(|_| Error::parse(ln, "bad radius"))?;
    let mut entries = Vec::new();
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace().map(str::parse::<usize>);
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(i)), Some(Ok(j)), None) => entries.push((i, j)),
            _ => return Err(Error::parse(ln, "expected `i j`")),
        }
    }
    SparsityPattern::from_entries(rows, cols, r, &entries)
}

pub fn save_pattern(p: &SparsityPattern, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, pattern_to_string(p)).map_err(|e| Error::io(path, e))
}

pub fn load_pattern(path: impl AsRef<Path>) -> Result<SparsityPattern> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    pattern_from_str(&text)
}
