/// Constant sparse matrix in compressed-row form.
///
/// Used as a fixed linear operator inside the graph: neighborhood kernel
/// correlation and interpolation weights are functions of geometry only and
/// never receive gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Csr {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

/// Row-by-row constructor for [`Csr`].
#[derive(Debug)]
pub struct CsrBuilder {
    csr: Csr,
}

impl CsrBuilder {
    /// Appends an entry to the current row.
    pub fn push(&mut self, col: usize, value: f64) {
        assert!(col < self.csr.cols, "column {col} out of range {}", self.csr.cols);
        self.csr.indices.push(col);
        self.csr.values.push(value);
    }

    /// Closes the current row.
    pub fn end_row(&mut self) {
        self.csr.indptr.push(self.csr.indices.len());
        self.csr.rows += 1;
    }

    pub fn build(self) -> Csr {
        self.csr
    }
}

impl Csr {
    /// Builds from per-row `(column, value)` lists, keeping the given order.
    pub fn from_rows(cols: usize, rows: &[Vec<(usize, f64)>]) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for row in rows {
            for &(c, v) in row {
                assert!(c < cols, "column {c} out of range {cols}");
                indices.push(c);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Csr { rows: rows.len(), cols, indptr, indices, values }
    }

    /// Starts an empty matrix that is filled one row at a time.
    pub fn builder(cols: usize) -> CsrBuilder {
        CsrBuilder { csr: Csr { rows: 0, cols, indptr: vec![0], indices: Vec::new(), values: Vec::new() } }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Entries `(column, value)` of row `r`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (s, e) = (self.indptr[r], self.indptr[r + 1]);
        self.indices[s..e].iter().copied().zip(self.values[s..e].iter().copied())
    }

    /// Dense row-major copy, for tests.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.cols];
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                out[r * self.cols + c] += v;
            }
        }
        out
    }
}
