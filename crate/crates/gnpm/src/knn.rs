//! Neighborhood and distance kernels: pairwise distances, brute-force and
//! blocked k-NN, nearest-neighbor queries, and the two-directional distance
//! used by the symmetric ICP loss.
//!
//! Distances are squared Euclidean throughout. Ties break strictly by lower
//! point index so results are bitwise reproducible. Graph construction is
//! never differentiated through: indices are constants within a step.

use rayon::prelude::*;
use thiserror::Error;

use crate::tensor::kernels::par_enabled;
use crate::tensor::Scalar;

#[derive(Debug, Error)]
pub enum KnnError {
    #[error("k-NN requires k < N (self excluded), got k={k}, N={n}")]
    KTooLarge { k: usize, n: usize },
    #[error("invalid block size {block} for N={n}")]
    BadBlock { block: usize, n: usize },
    #[error("nearest-neighbor query against an empty target set")]
    EmptyTargets,
}

/// k-nearest-neighbor graph. `idx[i*k + j]` is the index of the j-th nearest
/// point to point `i` (self excluded); `dist2` holds the matching squared
/// distances, ascending per row.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph<E> {
    pub n: usize,
    pub k: usize,
    pub idx: Vec<usize>,
    pub dist2: Vec<E>,
}

impl<E> NeighborGraph<E> {
    pub fn row(&self, i: usize) -> &[usize] {
        &self.idx[i * self.k..(i + 1) * self.k]
    }
}

#[inline]
fn dist2<E: Scalar>(a: &[E], b: &[E]) -> E {
    let mut acc = E::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Exact k-NN by materializing each full distance row and sorting it.
/// Reference implementation and benchmark baseline.
pub fn knn_brute<E: Scalar>(
    points: &[E],
    n: usize,
    d: usize,
    k: usize,
) -> Result<NeighborGraph<E>, KnnError> {
    if k >= n {
        return Err(KnnError::KTooLarge { k, n });
    }
    let mut idx = vec![0usize; n * k];
    let mut out_d = vec![E::zero(); n * k];
    let fill = |i: usize, irow: &mut [usize], drow: &mut [E]| {
        let pi = &points[i * d..(i + 1) * d];
        let mut row: Vec<(E, usize)> = (0..n)
            .map(|j| (dist2(pi, &points[j * d..(j + 1) * d]), j))
            .collect();
        row.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let mut w = 0usize;
        for &(dv, j) in &row {
            if j == i {
                continue;
            }
            irow[w] = j;
            drow[w] = dv;
            w += 1;
            if w == k {
                break;
            }
        }
    };
    if par_enabled() {
        idx.par_chunks_mut(k)
            .zip(out_d.par_chunks_mut(k))
            .enumerate()
            .for_each(|(i, (irow, drow))| fill(i, irow, drow));
    } else {
        for (i, (irow, drow)) in idx.chunks_mut(k).zip(out_d.chunks_mut(k)).enumerate() {
            fill(i, irow, drow);
        }
    }
    Ok(NeighborGraph {
        n,
        k,
        idx,
        dist2: out_d,
    })
}

/// Exact k-NN processing query rows in blocks of at most `block`, keeping a
/// bounded per-row top-k instead of sorting full distance rows. Peak auxiliary
/// memory is O(block * N); the result is bitwise identical to [`knn_brute`].
pub fn knn_blocked<E: Scalar>(
    points: &[E],
    n: usize,
    d: usize,
    k: usize,
    block: usize,
) -> Result<NeighborGraph<E>, KnnError> {
    if k >= n {
        return Err(KnnError::KTooLarge { k, n });
    }
    if block == 0 || block > n {
        return Err(KnnError::BadBlock { block, n });
    }
    let mut idx = vec![0usize; n * k];
    let mut out_d = vec![E::zero(); n * k];
    // Blocks are processed in index order; rows within a block in parallel.
    // Per-row results land in disjoint slices, so the merge is deterministic.
    for (bi, (idx_chunk, d_chunk)) in idx
        .chunks_mut(block * k)
        .zip(out_d.chunks_mut(block * k))
        .enumerate()
    {
        let row0 = bi * block;
        let fill = |r: usize, irow: &mut [usize], drow: &mut [E], top: &mut Vec<(E, usize)>| {
            let i = row0 + r;
            let pi = &points[i * d..(i + 1) * d];
            // Sorted top-k buffer; worst entry last. Tie rule: lower
            // index wins, so a new candidate only displaces the current
            // worst when strictly better by (dist2, idx).
            top.clear();
            for j in 0..n {
                if j == i {
                    continue;
                }
                let dv = dist2(pi, &points[j * d..(j + 1) * d]);
                if top.len() == k {
                    let worst = top[k - 1];
                    if (dv, j) >= (worst.0, worst.1) {
                        continue;
                    }
                    top.pop();
                }
                let pos = top.partition_point(|&(td, tj)| (td, tj) < (dv, j));
                top.insert(pos, (dv, j));
            }
            for (w, &(dv, j)) in top.iter().enumerate() {
                irow[w] = j;
                drow[w] = dv;
            }
        };
        if par_enabled() {
            idx_chunk
                .par_chunks_mut(k)
                .zip(d_chunk.par_chunks_mut(k))
                .enumerate()
                .for_each_init(
                    || Vec::with_capacity(k + 1),
                    |top, (r, (irow, drow))| fill(r, irow, drow, top),
                );
        } else {
            let mut top = Vec::with_capacity(k + 1);
            for (r, (irow, drow)) in idx_chunk
                .chunks_mut(k)
                .zip(d_chunk.chunks_mut(k))
                .enumerate()
            {
                fill(r, irow, drow, &mut top);
            }
        }
    }
    Ok(NeighborGraph {
        n,
        k,
        idx,
        dist2: out_d,
    })
}

/// Exact nearest target for each query (self not excluded; the two sets are
/// distinct). Ties go to the lower target index.
pub fn nn_query<E: Scalar>(
    queries: &[E],
    m: usize,
    targets: &[E],
    p: usize,
    d: usize,
) -> Result<(Vec<usize>, Vec<E>), KnnError> {
    if p == 0 {
        return Err(KnnError::EmptyTargets);
    }
    let mut idx = vec![0usize; m];
    let mut out_d = vec![E::zero(); m];
    let fill = |i: usize, ii: &mut usize, dd: &mut E| {
        let qi = &queries[i * d..(i + 1) * d];
        let mut best = dist2(qi, &targets[..d]);
        let mut best_j = 0usize;
        for j in 1..p {
            let dv = dist2(qi, &targets[j * d..(j + 1) * d]);
            if dv < best {
                best = dv;
                best_j = j;
            }
        }
        *ii = best_j;
        *dd = best;
    };
    if par_enabled() {
        idx.par_iter_mut()
            .zip(out_d.par_iter_mut())
            .enumerate()
            .for_each(|(i, (ii, dd))| fill(i, ii, dd));
    } else {
        for (i, (ii, dd)) in idx.iter_mut().zip(out_d.iter_mut()).enumerate() {
            fill(i, ii, dd);
        }
    }
    Ok((idx, out_d))
}

/// Two-directional nearest-neighbor distance from the symmetric ICP
/// construction. For each query x: x' is the nearest target under the forward
/// distance; the score adds the reverse distance from x' back to the query
/// set. Correct assignments thus carry a lower total score than flipped ones
/// even when forward distances alone are indifferent.
pub fn nn_symmetric<E: Scalar>(
    queries: &[E],
    m: usize,
    targets: &[E],
    p: usize,
    d: usize,
) -> Result<(Vec<usize>, Vec<E>), KnnError> {
    let (fwd_idx, fwd_d) = nn_query(queries, m, targets, p, d)?;
    if m == 0 {
        return Ok((fwd_idx, fwd_d));
    }
    // Reverse distance per target: nearest query to each target point.
    let (_, rev_d) = nn_query(targets, p, queries, m, d)?;
    let score: Vec<E> = fwd_idx
        .iter()
        .zip(fwd_d.iter())
        .map(|(&j, &fd)| fd + rev_d[j])
        .collect();
    Ok((fwd_idx, score))
}

/// Column order of the benchmark CSV.
pub const BENCH_HEADER: &str = "method,N,D,k,block,wall_ms,peak_aux_bytes";

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub method: &'static str,
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub block: usize,
    pub wall_ms: f64,
    pub peak_aux_bytes: usize,
}

impl BenchRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.method, self.n, self.d, self.k, self.block, self.wall_ms, self.peak_aux_bytes
        )
    }
}

/// Peak auxiliary bytes of the brute path: each in-flight row materializes
/// the full distance row as (dist2, index) pairs.
pub fn brute_aux_bytes(n: usize) -> usize {
    let width = rayon::current_num_threads().min(n);
    width * n * std::mem::size_of::<(f64, usize)>()
}

/// Peak auxiliary bytes of the blocked path: each in-flight row keeps only
/// a bounded top-k buffer, and at most `block` rows are in flight.
pub fn blocked_aux_bytes(n: usize, k: usize, block: usize) -> usize {
    let width = rayon::current_num_threads().min(block.min(n));
    width * (k + 1) * std::mem::size_of::<(f64, usize)>()
}

/// Time both k-NN paths on one random point set. Each method runs `reps`
/// times; the minimum wall time is reported.
pub fn bench(
    n: usize,
    d: usize,
    k: usize,
    block: usize,
    seed: u64,
    reps: usize,
) -> Result<Vec<BenchRow>, KnnError> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let time = |f: &dyn Fn() -> Result<NeighborGraph<f64>, KnnError>| -> Result<f64, KnnError> {
        let mut best = f64::INFINITY;
        for _ in 0..reps.max(1) {
            let t0 = std::time::Instant::now();
            f()?;
            best = best.min(t0.elapsed().as_secs_f64() * 1e3);
        }
        Ok(best)
    };
    let brute_ms = time(&|| knn_brute(&points, n, d, k))?;
    let blocked_ms = time(&|| knn_blocked(&points, n, d, k, block))?;
    Ok(vec![
        BenchRow {
            method: "brute",
            n,
            d,
            k,
            block: n,
            wall_ms: brute_ms,
            peak_aux_bytes: brute_aux_bytes(n),
        },
        BenchRow {
            method: "blocked",
            n,
            d,
            k,
            block,
            wall_ms: blocked_ms,
            peak_aux_bytes: blocked_aux_bytes(n, k, block),
        },
    ])
}
