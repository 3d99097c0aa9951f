use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::{AutodiffError, Tensor};

/// Coordinates checked when the parameters are too large to check in full.
pub const MIN_SAMPLED_COORDS: usize = 200;

/// Compares reverse-mode gradients of `f` against central differences and
/// returns the max relative error, `|a - n| / max(|a|, |n|, 1e-8)`.
///
/// `f` receives a tape plus one bound leaf per tensor in `params`. Every
/// coordinate is checked when there are at most `max_coords`; otherwise a
/// seeded sample of `max_coords` (at least [`MIN_SAMPLED_COORDS`]) is used.
/// Training mode is kept for the perturbed evaluations so batch norm sees
/// the same statistics path.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64, max_coords: usize, seed: u64) -> Result<f64, AutodiffError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, AutodiffError>,
{
    Ok(finite_diff_report(f, params, eps, max_coords, seed)?.max_rel_err)
}

/// One checked coordinate: tensor index, flat offset, both gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoordCheck {
    pub param: usize,
    pub offset: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords: Vec<CoordCheck>,
}

/// [`finite_diff_check`] with every checked coordinate reported.
pub fn finite_diff_report<F>(f: F, params: &[Tensor], eps: f64, max_coords: usize, seed: u64) -> Result<GradCheckReport, AutodiffError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, AutodiffError>,
{
    let tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&tape, &leaves)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> =
        leaves.iter().zip(params).map(|(l, p)| grads.wrt(*l).unwrap_or_else(|| Tensor::zeros(p.shape()))).collect();

    let eval = |ps: &[Tensor]| -> Result<f64, AutodiffError> {
        let t = Tape::with_mode(true, false);
        let ls: Vec<Var> = ps.iter().map(|p| t.constant(p.clone())).collect();
        Ok(f(&t, &ls)?.item())
    };

    let total: usize = params.iter().map(Tensor::len).sum();
    let budget = max_coords.max(MIN_SAMPLED_COORDS);
    let coords: Vec<usize> = if total <= budget {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = sample(&mut rng, total, budget).into_vec();
        c.sort_unstable();
        c
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst: f64 = 0.0;
    let mut checked = Vec::with_capacity(coords.len());
    for flat in coords {
        let (mut pi, mut off) = (0, flat);
        while off >= work[pi].len() {
            off -= work[pi].len();
            pi += 1;
        }
        let x0 = work[pi].data()[off];
        work[pi].data_mut()[off] = x0 + eps;
        let fp = eval(&work)?;
        work[pi].data_mut()[off] = x0 - eps;
        let fm = eval(&work)?;
        work[pi].data_mut()[off] = x0;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[pi].data()[off];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
        checked.push(CoordCheck { param: pi, offset: off, analytic: a, numeric, rel_err: rel });
    }
    Ok(GradCheckReport { max_rel_err: worst, coords: checked })
}
