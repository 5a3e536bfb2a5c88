use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, KernelError, NodeId, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates sampled per parameter tensor; smaller tensors are checked exhaustively.
    pub coords_per_param: usize,
    pub seed: u64,
    /// Relative disagreement between the one-sided slopes that marks a kink.
    pub kink_tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_param: 16,
            seed: 0,
            kink_tolerance: 1e-2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |analytic|, |numeric|)` over checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates excluded because the function is not differentiable there.
    pub skipped_kinks: usize,
    /// `(param, coordinate)` of the largest error.
    pub worst: Option<(usize, usize)>,
}

/// Compares tape gradients against central differences.
///
/// `build` records a scalar loss on a fresh graph whose parameter leaves are
/// the given node ids, in the order of `params`.
pub fn grad_check<F>(mut build: F, params: &[Tensor<f64>], cfg: GradCheckConfig) -> Result<GradCheckReport, KernelError>
where
    F: FnMut(&mut Graph<f64>, &[NodeId]) -> Result<NodeId, KernelError>,
{
    let mut eval = |values: &[Tensor<f64>], grad: bool| -> Result<(f64, Option<Vec<Tensor<f64>>>), KernelError> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|v| g.param(v.clone())).collect();
        let loss = build(&mut g, &ids)?;
        let value = g.value(loss).item();
        if grad {
            Ok((value, Some(g.backward(loss)?.collect(&ids)?)))
        } else {
            Ok((value, None))
        }
    };

    let (f0, analytic) = eval(params, true)?;
    let analytic = analytic.expect("requested gradients");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let h = cfg.step;

    for (pi, param) in params.iter().enumerate() {
        let coords: Vec<usize> = if param.len() <= cfg.coords_per_param {
            (0..param.len()).collect()
        } else {
            sample(&mut rng, param.len(), cfg.coords_per_param).into_vec()
        };
        for c in coords {
            let orig = param.data()[c];
            work[pi].data_mut()[c] = orig + h;
            let (fp, _) = eval(&work, false)?;
            work[pi].data_mut()[c] = orig - h;
            let (fm, _) = eval(&work, false)?;
            work[pi].data_mut()[c] = orig;

            let forward = (fp - f0) / h;
            let backward = (f0 - fm) / h;
            if (forward - backward).abs() > cfg.kink_tolerance * 1f64.max(forward.abs()).max(backward.abs()) {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[pi].data()[c];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((pi, c));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_bowl_is_exact() {
        let p = Tensor::from_f64(&[3], &[0.3, -1.2, 2.5]).unwrap();
        let report = grad_check(
            |g, ids| {
                let sq = g.square(ids[0])?;
                let s = g.sum(sq)?;
                g.scale(s, 0.5)
            },
            &[p],
            GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn relu_kink_is_excluded() {
        let p = Tensor::from_f64(&[3], &[0.0, 1.0, -1.0]).unwrap();
        let report = grad_check(
            |g, ids| {
                let r = g.relu(ids[0])?;
                g.sum(r)
            },
            &[p],
            GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.skipped_kinks, 1);
        assert_eq!(report.checked, 2);
        assert!(report.max_rel_error < 1e-8);
    }
}
