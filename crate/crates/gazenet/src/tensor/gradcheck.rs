//! Finite-difference verification of the reverse-mode gradients.
//!
//! `max_rel_error` runs a builder once to get analytic gradients, then
//! central differences per coordinate: (f(x+h) - f(x-h)) / 2h. The relative
//! error is |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
//! Checkpoints near activation kinks (relu at 0, clamp at 0/1) are the
//! caller's responsibility to avoid.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, ValueId};
use crate::error::{Error, Result};

/// Which coordinates of each input tensor to probe.
#[derive(Clone, Copy, Debug)]
pub enum CoordSelection {
    All,
    /// At most `per_tensor` coordinates of each input, sampled with `seed`.
    Sample { per_tensor: usize, seed: u64 },
}

/// Default step used throughout the test suite.
pub const DEFAULT_H: f64 = 1e-5;

/// Maximum relative error between analytic and central-difference gradients
/// of the scalar produced by `build` over the given input tensors.
pub fn max_rel_error<F>(build: F, points: &[Tensor], h: f64, sel: CoordSelection) -> Result<f64>
where
    F: Fn(&mut Graph, &[ValueId]) -> Result<ValueId>,
{
    let eval = |pts: &[Tensor], with_grad: bool| -> Result<(f64, Option<Vec<Vec<f64>>>)> {
        let mut g = Graph::new();
        let ids: Vec<ValueId> = pts
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.requires_grad = with_grad;
                g.leaf(t)
            })
            .collect();
        let loss = build(&mut g, &ids)?;
        if !g.value(loss).is_scalar() {
            return Err(Error::Usage(
                "gradcheck builder must produce a scalar".into(),
            ));
        }
        let val = g.value(loss).item();
        if !with_grad {
            return Ok((val, None));
        }
        g.backward(loss)?;
        let grads = ids
            .iter()
            .map(|&id| {
                g.grad(id)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; g.value(id).len()])
            })
            .collect();
        Ok((val, Some(grads)))
    };

    let (_, grads) = eval(points, true)?;
    let grads = grads.unwrap();

    let mut worst = 0.0f64;
    for (ti, t) in points.iter().enumerate() {
        let coords: Vec<usize> = match sel {
            CoordSelection::All => (0..t.len()).collect(),
            CoordSelection::Sample { per_tensor, seed } => {
                if t.len() <= per_tensor {
                    (0..t.len()).collect()
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (ti as u64).wrapping_mul(0x9e3779b97f4a7c15));
                    sample(&mut rng, t.len(), per_tensor).into_vec()
                }
            }
        };
        for c in coords {
            let mut plus = points.to_vec();
            plus[ti].data_mut()[c] += h;
            let (fp, _) = eval(&plus, false)?;

            let mut minus = points.to_vec();
            minus[ti].data_mut()[c] -= h;
            let (fm, _) = eval(&minus, false)?;

            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grads[ti][c];
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
