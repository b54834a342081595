//! Observed-entry matrices and everything that produces them.
//!
//! A [`MaskedMatrix`] stores only the observed index set `Ω` with its values;
//! unobserved entries are absent rather than zero, so a literal rating of 0 is
//! an observation like any other. Entries are indexed both by row (CSR) and by
//! column (CSC) and the two indexes always describe the same entry set.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Matrix, Result};

/// Sparse matrix holding the observed entries `Ω` of a ratings matrix.
#[derive(Clone, PartialEq)]
pub struct MaskedMatrix {
    rows: usize,
    cols: usize,
    // Row-major (CSR) storage.
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
    // Column-major index: for every column, the rows and the CSR positions of
    // its entries.
    col_ptr: Vec<usize>,
    col_rows: Vec<usize>,
    col_pos: Vec<usize>,
}

impl fmt::Debug for MaskedMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MaskedMatrix")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("nnz", &self.nnz())
            .finish()
    }
}

impl MaskedMatrix {
    /// Builds a matrix from `(row, col, value)` triplets in any order.
    ///
    /// Fails on out-of-range indices, duplicate positions or non-finite values.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        for &(t, j, x) in &triplets {
            if t >= rows || j >= cols {
                return Err(Error::Dimension(format!(
                    "entry ({t}, {j}) outside a {rows}x{cols} matrix"
                )));
            }
            if !x.is_finite() {
                return Err(Error::Numeric(format!("entry ({t}, {j}) = {x}")));
            }
        }
        triplets.sort_unstable_by_key(|&(t, j, _)| (t, j));
        if let Some(w) = triplets
            .windows(2)
            .find(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1))
        {
            return Err(Error::Domain(format!(
                "duplicate entry at ({}, {})",
                w[0].0, w[0].1
            )));
        }
        Ok(Self::from_sorted_unique(rows, cols, &triplets))
    }

    /// Matrix with no observed entries.
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self::from_sorted_unique(rows, cols, &[])
    }

    fn from_sorted_unique(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let nnz = triplets.len();
        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        for &(t, j, x) in triplets {
            row_ptr[t + 1] += 1;
            col_idx.push(j);
            values.push(x);
        }
        for t in 0..rows {
            row_ptr[t + 1] += row_ptr[t];
        }

        let mut col_ptr = vec![0usize; cols + 1];
        for &j in &col_idx {
            col_ptr[j + 1] += 1;
        }
        for j in 0..cols {
            col_ptr[j + 1] += col_ptr[j];
        }
        let mut next = col_ptr.clone();
        let mut col_rows = vec![0usize; nnz];
        let mut col_pos = vec![0usize; nnz];
        for t in 0..rows {
            for (pos, &j) in col_idx.iter().enumerate().take(row_ptr[t + 1]).skip(row_ptr[t]) {
                let slot = next[j];
                col_rows[slot] = t;
                col_pos[slot] = pos;
                next[j] += 1;
            }
        }

        MaskedMatrix {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
            col_ptr,
            col_rows,
            col_pos,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Number of observed entries `|Ω|`.
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values observed in row `t`.
    pub fn row(&self, t: usize) -> (&[usize], &[f64]) {
        let range = self.row_ptr[t]..self.row_ptr[t + 1];
        (&self.col_idx[range.clone()], &self.values[range])
    }

    /// `(row, value)` pairs observed in column `j`, in increasing row order.
    pub fn col(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.col_ptr[j]..self.col_ptr[j + 1];
        self.col_rows[range.clone()]
            .iter()
            .zip(&self.col_pos[range])
            .map(move |(&t, &pos)| (t, self.values[pos]))
    }

    /// All entries in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |t| {
            let (cols, vals) = self.row(t);
            cols.iter().zip(vals).map(move |(&j, &x)| (t, j, x))
        })
    }

    /// All entries in column-major order.
    pub fn iter_by_col(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.cols).flat_map(move |j| self.col(j).map(move |(t, x)| (t, j, x)))
    }

    /// Values in row-major order.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Same sparsity pattern with new values given in row-major order.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.nnz() {
            return Err(Error::Dimension(format!(
                "{} values for {} observed entries",
                values.len(),
                self.nnz()
            )));
        }
        Ok(MaskedMatrix {
            values,
            ..self.clone()
        })
    }

    /// `‖P_Ω(M)‖²_F`.
    pub fn squared_norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum()
    }

    /// Rows `[start, end)` as a new matrix with local row indices.
    pub fn row_block(&self, start: usize, end: usize) -> MaskedMatrix {
        let order: Vec<usize> = (start..end).collect();
        self.select_rows(&order)
    }

    /// The rows listed in `order`, renumbered `0..order.len()`.
    pub fn select_rows(&self, order: &[usize]) -> MaskedMatrix {
        let mut triplets = Vec::new();
        for (local, &t) in order.iter().enumerate() {
            let (cols, vals) = self.row(t);
            triplets.extend(cols.iter().zip(vals).map(|(&j, &x)| (local, j, x)));
        }
        MaskedMatrix::from_sorted_unique(order.len(), self.cols, &triplets)
    }

    /// Dense copy with unobserved entries set to zero. Test and debugging aid.
    pub fn to_dense(&self) -> Matrix {
        let mut out = Array2::zeros((self.rows, self.cols));
        for (t, j, x) in self.iter() {
            out[[t, j]] = x;
        }
        out
    }
}

/// On-disk layout of a ratings file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatingsFormat {
    /// `user::item::rating::timestamp`, timestamp ignored.
    MovielensDelimited,
    /// CSV with header `user,item,rating`.
    TripletCsv,
}

impl FromStr for RatingsFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "movielens-delimited" | "movielens" => Ok(RatingsFormat::MovielensDelimited),
            "triplet-csv" | "csv" => Ok(RatingsFormat::TripletCsv),
            other => Err(Error::Config(format!("unknown ratings format `{other}`"))),
        }
    }
}

/// A loaded ratings file with its dense re-indexing.
#[derive(Clone, Debug)]
pub struct Ratings {
    pub matrix: MaskedMatrix,
    /// Original user id of every row.
    pub user_ids: Vec<u64>,
    /// Original item id of every column.
    pub item_ids: Vec<u64>,
    /// Records dropped because a later record had the same (user, item).
    pub duplicates: usize,
}

/// Reads a ratings file and compacts user and item ids to dense 0-based
/// indices in increasing id order.
///
/// A repeated `(user, item)` pair keeps the last rating and logs a warning.
pub fn load_ratings(path: &Path, format: RatingsFormat) -> Result<Ratings> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ratings(&text, format, path)
}

/// [`load_ratings`] over in-memory text; `origin` is used in error messages.
pub fn parse_ratings(text: &str, format: RatingsFormat, origin: &Path) -> Result<Ratings> {
    let mut records: Vec<(u64, u64, f64)> = Vec::new();
    let mut latest: HashMap<(u64, u64), usize> = HashMap::new();
    let mut duplicates = 0usize;
    let mut seen_first = false;

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let first = !seen_first;
        seen_first = true;
        let fields: Vec<&str> = match format {
            RatingsFormat::MovielensDelimited => line.split("::").collect(),
            RatingsFormat::TripletCsv => {
                if first && is_triplet_header(line) {
                    continue;
                }
                line.split(',').map(str::trim).collect()
            }
        };
        let parse_err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: lineno + 1,
            message,
        };
        if fields.len() < 3 {
            return Err(parse_err(format!(
                "expected user, item and rating, found {} field(s)",
                fields.len()
            )));
        }
        let user: u64 = fields[0]
            .parse()
            .map_err(|_| parse_err(format!("bad user id `{}`", fields[0])))?;
        let item: u64 = fields[1]
            .parse()
            .map_err(|_| parse_err(format!("bad item id `{}`", fields[1])))?;
        let rating: f64 = fields[2]
            .parse()
            .map_err(|_| parse_err(format!("bad rating `{}`", fields[2])))?;
        if !rating.is_finite() {
            return Err(parse_err(format!("non-finite rating `{}`", fields[2])));
        }

        match latest.get(&(user, item)) {
            Some(&idx) => {
                warn!(
                    "{}:{}: duplicate rating for user {user}, item {item}; keeping the later one",
                    origin.display(),
                    lineno + 1
                );
                duplicates += 1;
                records[idx].2 = rating;
            }
            None => {
                latest.insert((user, item), records.len());
                records.push((user, item, rating));
            }
        }
    }

    if records.is_empty() {
        return Err(Error::EmptyDataset(origin.to_path_buf()));
    }

    let mut user_ids: Vec<u64> = records.iter().map(|r| r.0).collect();
    user_ids.sort_unstable();
    user_ids.dedup();
    let mut item_ids: Vec<u64> = records.iter().map(|r| r.1).collect();
    item_ids.sort_unstable();
    item_ids.dedup();
    let user_index: HashMap<u64, usize> =
        user_ids.iter().enumerate().map(|(i, &u)| (u, i)).collect();
    let item_index: HashMap<u64, usize> =
        item_ids.iter().enumerate().map(|(i, &u)| (u, i)).collect();

    let triplets = records
        .into_iter()
        .map(|(u, i, x)| (user_index[&u], item_index[&i], x))
        .collect();
    let matrix = MaskedMatrix::from_triplets(user_ids.len(), item_ids.len(), triplets)?;
    Ok(Ratings {
        matrix,
        user_ids,
        item_ids,
        duplicates,
    })
}

fn is_triplet_header(line: &str) -> bool {
    let cols: Vec<String> = line.split(',').map(|c| c.trim().to_ascii_lowercase()).collect();
    cols.len() >= 3 && cols[0] == "user" && cols[1] == "item" && cols[2] == "rating"
}

/// Writes `matrix` as a triplet CSV with header `user,item,rating`.
pub fn write_triplet_csv(matrix: &MaskedMatrix, path: &Path) -> Result<()> {
    let mut out = String::from("user,item,rating\n");
    for (t, j, x) in matrix.iter() {
        out.push_str(&format!("{t},{j},{x:?}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Keeps a uniformly random subset of `count` rows (all rows if `count`
/// exceeds the row count), preserving their relative order.
pub fn subsample_rows(matrix: &MaskedMatrix, count: usize, seed: u64) -> MaskedMatrix {
    if count >= matrix.rows() {
        return matrix.clone();
    }
    matrix.select_rows(&subsample_row_indices(matrix.rows(), count, seed))
}

/// The rows [`subsample_rows`] keeps, in increasing order.
pub fn subsample_row_indices(rows: usize, count: usize, seed: u64) -> Vec<usize> {
    if count >= rows {
        return (0..rows).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = rand::seq::index::sample(&mut rng, rows, count).into_vec();
    chosen.sort_unstable();
    chosen
}

/// Entry-level train/test split of one matrix.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: MaskedMatrix,
    pub test: MaskedMatrix,
    pub seed: u64,
}

/// Uniformly splits the observed entries, putting `round(fraction·|Ω|)` of
/// them in the training side. Deterministic in `(matrix, fraction, seed)`.
pub fn split_train_test(matrix: &MaskedMatrix, train_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let nnz = matrix.nnz();
    if nnz < 2 {
        return Err(Error::Config(format!(
            "cannot split {nnz} observed entries into train and test"
        )));
    }
    let n_train = ((train_fraction * nnz as f64).round() as usize).clamp(1, nnz - 1);

    let entries: Vec<(usize, usize, f64)> = matrix.iter().collect();
    let mut order: Vec<usize> = (0..nnz).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut in_train = vec![false; nnz];
    for &k in &order[..n_train] {
        in_train[k] = true;
    }
    let (mut train, mut test) = (Vec::with_capacity(n_train), Vec::with_capacity(nnz - n_train));
    for (k, e) in entries.into_iter().enumerate() {
        if in_train[k] {
            train.push(e);
        } else {
            test.push(e);
        }
    }
    Ok(DatasetSplit {
        train: MaskedMatrix::from_sorted_unique(matrix.rows(), matrix.cols(), &train),
        test: MaskedMatrix::from_sorted_unique(matrix.rows(), matrix.cols(), &test),
        seed,
    })
}

/// Assignment of rows to `p` clients as contiguous blocks.
#[derive(Clone, Debug)]
pub struct ClientPartition {
    /// `p + 1` offsets into `row_order`; client `i` owns
    /// `row_order[boundaries[i]..boundaries[i + 1]]`.
    pub boundaries: Vec<usize>,
    /// Global row of every position; the identity unless rows were shuffled.
    pub row_order: Vec<usize>,
    /// Per-client blocks `M_1..M_p` with local row numbering.
    pub blocks: Vec<MaskedMatrix>,
}

impl ClientPartition {
    pub fn clients(&self) -> usize {
        self.blocks.len()
    }

    /// Row count `m_i` of every client.
    pub fn block_sizes(&self) -> Vec<usize> {
        self.boundaries.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Cuts another matrix over the same rows (e.g. the test side of a split)
    /// into blocks aligned with this partition.
    pub fn split_like(&self, other: &MaskedMatrix) -> Result<Vec<MaskedMatrix>> {
        if other.rows() != self.row_order.len() {
            return Err(Error::Dimension(format!(
                "partition covers {} rows, matrix has {}",
                self.row_order.len(),
                other.rows()
            )));
        }
        Ok(self
            .boundaries
            .windows(2)
            .map(|w| other.select_rows(&self.row_order[w[0]..w[1]]))
            .collect())
    }
}

/// Splits the rows of `matrix` into `p` contiguous blocks whose sizes differ
/// by at most one, the larger blocks first. With `shuffle_seed` the rows are
/// permuted by a seeded shuffle before blocking.
pub fn partition_clients(
    matrix: &MaskedMatrix,
    p: usize,
    shuffle_seed: Option<u64>,
) -> Result<ClientPartition> {
    let m = matrix.rows();
    if p == 0 || p > m {
        return Err(Error::Config(format!(
            "cannot split {m} rows among {p} clients"
        )));
    }
    let mut row_order: Vec<usize> = (0..m).collect();
    if let Some(seed) = shuffle_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        row_order.shuffle(&mut rng);
    }
    let (base, extra) = (m / p, m % p);
    let mut boundaries = Vec::with_capacity(p + 1);
    boundaries.push(0);
    for i in 0..p {
        let size = base + usize::from(i < extra);
        boundaries.push(boundaries[i] + size);
    }
    let blocks = boundaries
        .windows(2)
        .map(|w| matrix.select_rows(&row_order[w[0]..w[1]]))
        .collect();
    Ok(ClientPartition {
        boundaries,
        row_order,
        blocks,
    })
}

/// `P_Ω(UV − M)` evaluated only on the observed entries of `m`.
pub fn residual_on_mask(m: &MaskedMatrix, u: &Matrix, v: &Matrix) -> Result<MaskedMatrix> {
    check_factor_shapes(m, u, v)?;
    let mut values = Vec::with_capacity(m.nnz());
    for t in 0..m.rows() {
        let u_row = u.row(t);
        let (cols, vals) = m.row(t);
        for (&j, &x) in cols.iter().zip(vals) {
            values.push(u_row.dot(&v.column(j)) - x);
        }
    }
    m.with_values(values)
}

pub(crate) fn check_factor_shapes(m: &MaskedMatrix, u: &Matrix, v: &Matrix) -> Result<()> {
    if u.nrows() != m.rows() || v.ncols() != m.cols() || u.ncols() != v.nrows() {
        return Err(Error::Dimension(format!(
            "U is {}x{}, V is {}x{}, data is {}x{}",
            u.nrows(),
            u.ncols(),
            v.nrows(),
            v.ncols(),
            m.rows(),
            m.cols()
        )));
    }
    Ok(())
}
