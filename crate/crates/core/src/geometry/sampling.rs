//! Farthest-point sampling and k-nearest-neighbor queries over flat
//! `[x, y, z, x, y, z, ...]` coordinate buffers.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SamplingError {
    #[error("requested {k} samples from {m} points")]
    KTooLarge { k: usize, m: usize },
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

/// Greedy farthest-point sampling starting from index 0. Ties resolve to the
/// lowest index.
pub fn fps(points: &[f64], k: usize) -> Result<Vec<usize>, SamplingError> {
    let m = points.len() / 3;
    if k > m {
        return Err(SamplingError::KTooLarge { k, m });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut selected = Vec::with_capacity(k);
    let mut min_d = vec![f64::INFINITY; m];
    let mut current = 0usize;
    selected.push(current);
    for _ in 1..k {
        let c = &points[current * 3..current * 3 + 3];
        let mut best = 0usize;
        let mut best_d = -1.0;
        for i in 0..m {
            let d = sq_dist(&points[i * 3..i * 3 + 3], c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
        selected.push(current);
    }
    Ok(selected)
}

/// For each query point, the indices of the `k` nearest reference points
/// (including itself when the query is in the reference set), nearest
/// first. Ties resolve to the lower index.
pub fn knn(queries: &[f64], refs: &[f64], k: usize) -> Result<Vec<Vec<usize>>, SamplingError> {
    let m = refs.len() / 3;
    if k > m {
        return Err(SamplingError::KTooLarge { k, m });
    }
    let mut out = Vec::with_capacity(queries.len() / 3);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(m);
    for q in queries.chunks_exact(3) {
        scratch.clear();
        scratch.extend(refs.chunks_exact(3).enumerate().map(|(j, r)| (sq_dist(q, r), j)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < m {
            scratch.select_nth_unstable_by(k - 1, cmp);
        }
        let mut nearest = scratch[..k].to_vec();
        nearest.sort_by(cmp);
        out.push(nearest.into_iter().map(|(_, j)| j).collect());
    }
    Ok(out)
}
