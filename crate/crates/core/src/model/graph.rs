use super::ModelError;
use crate::autodiff::Var;
use crate::geometry::sampling::{fps, knn};

/// Neighborhoods over a batch of stacked point rows: center `i` owns rows
/// `neighbors[i*k .. (i+1)*k]`. All indices are global rows of the input.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeGraph {
    pub centers: Vec<usize>,
    pub neighbors: Vec<usize>,
    pub k: usize,
}

impl EdgeGraph {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Row `c*k + j` → center `c`, repeated for each neighbor.
    fn repeated_centers(&self) -> Vec<usize> {
        self.centers.iter().flat_map(|&c| std::iter::repeat_n(c, self.k)).collect()
    }
}

/// Per sample: farthest-point sample `m_out` of the `n_in` points, then the
/// `k` nearest input points of each kept one. Returns the graph and the kept
/// coordinates (flat, sample-major).
pub fn downsample_graph(
    coords: &[f64],
    batch: usize,
    n_in: usize,
    m_out: usize,
    k: usize,
) -> Result<(EdgeGraph, Vec<f64>), ModelError> {
    check_coords(coords, batch, n_in)?;
    let mut g = EdgeGraph { centers: Vec::with_capacity(batch * m_out), neighbors: Vec::with_capacity(batch * m_out * k), k };
    let mut kept = Vec::with_capacity(batch * m_out * 3);
    for b in 0..batch {
        let c = &coords[b * n_in * 3..(b + 1) * n_in * 3];
        let sel = fps(c, m_out)?;
        let centers: Vec<f64> = sel.iter().flat_map(|&i| c[i * 3..i * 3 + 3].iter().copied()).collect();
        for nb in knn(&centers, c, k)? {
            g.neighbors.extend(nb.iter().map(|j| b * n_in + j));
        }
        g.centers.extend(sel.iter().map(|i| b * n_in + i));
        kept.extend(centers);
    }
    Ok((g, kept))
}

/// Every point is a center; neighbors are its `k` nearest within the sample.
pub fn knn_graph(coords: &[f64], batch: usize, n: usize, k: usize) -> Result<EdgeGraph, ModelError> {
    check_coords(coords, batch, n)?;
    let mut g = EdgeGraph { centers: (0..batch * n).collect(), neighbors: Vec::with_capacity(batch * n * k), k };
    for b in 0..batch {
        let c = &coords[b * n * 3..(b + 1) * n * 3];
        for nb in knn(c, c, k)? {
            g.neighbors.extend(nb.iter().map(|j| b * n + j));
        }
    }
    Ok(g)
}

fn check_coords(coords: &[f64], batch: usize, n: usize) -> Result<(), ModelError> {
    if coords.len() != batch * n * 3 {
        return Err(ModelError::ShapeMismatch(format!("{} coordinates for {batch}×{n} points", coords.len())));
    }
    Ok(())
}

/// Raw edge tensor `[h_i, h_j − h_i]`, one row per (center, neighbor).
pub fn edge_features<'t>(h: Var<'t>, graph: &EdgeGraph) -> Result<Var<'t>, ModelError> {
    let hi = h.index_select(&graph.repeated_centers())?;
    let hj = h.index_select(&graph.neighbors)?;
    Ok(Var::concat(&[hi, hj.sub(hi)?], 1)?)
}

/// Max over each center's `k` edge rows: `[c·k, w] → [c, w]`.
pub fn pool_edges<'t>(e: Var<'t>, graph: &EdgeGraph) -> Result<Var<'t>, ModelError> {
    let w = *e.shape().last().unwrap_or(&0);
    Ok(e.reshape(&[graph.len(), graph.k, w])?.max_axis(1)?)
}
