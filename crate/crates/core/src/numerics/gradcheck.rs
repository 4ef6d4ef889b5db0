use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::{Graph, NumericsError, ParamStore, Tensor, Var};

/// Settings for [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Probe at most this many coordinates per tensor (all when `None`).
    pub max_entries_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, max_entries_per_tensor: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |g_ad - g_fd| / max(1, |g_ad|, |g_fd|)` over probed coordinates.
    pub max_rel_error: f64,
    /// (tensor index, flat element index) of the worst coordinate.
    pub worst: (usize, usize),
    pub probed: usize,
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences.
///
/// `f` builds the function on a fresh graph from leaves holding `params`
/// and returns the scalar output node.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var, NumericsError>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let leaves = values.iter().map(|t| g.leaf(t.clone())).collect::<Result<Vec<_>, _>>()?;
        let out = f(&mut g, &leaves)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let leaves = params.iter().map(|t| g.leaf(t.clone())).collect::<Result<Vec<_>, _>>()?;
    let out = f(&mut g, &leaves)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = leaves
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    compare(params, &analytic, |values| eval(values), opts)
}

/// Same as [`grad_check`] for a function of every tensor in a parameter
/// store, bound through [`Graph::param`].
pub fn grad_check_params<F>(f: F, store: &ParamStore<f64>, opts: &GradCheckOptions) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var, NumericsError>,
{
    let mut g = Graph::with_params(store);
    let out = f(&mut g)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = g
        .param_grads(&grads)
        .into_iter()
        .zip(store.ids())
        .map(|(gr, id)| gr.unwrap_or_else(|| Tensor::zeros(store.get(id).shape())))
        .collect();
    let params: Vec<Tensor<f64>> = store.ids().map(|id| store.get(id).clone()).collect();
    let mut scratch = store.clone();
    compare(&params, &analytic, |values| {
        for (id, v) in store.ids().zip(values) {
            *scratch.get_mut(id) = v.clone();
        }
        let mut g = Graph::with_params(&scratch);
        let out = f(&mut g)?;
        Ok(g.value(out).item())
    }, opts)
}

fn compare(
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    mut eval: impl FnMut(&[Tensor<f64>]) -> Result<f64, NumericsError>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), probed: 0 };
    for (pi, p) in params.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_entries_per_tensor {
            Some(k) if k < p.len() => {
                let mut c = sample(&mut rng, p.len(), k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..p.len()).collect(),
        };
        for e in coords {
            let orig = p.data()[e];
            work[pi].data_mut()[e] = orig + opts.step;
            let plus = eval(&work)?;
            work[pi].data_mut()[e] = orig - opts.step;
            let minus = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let fd = (plus - minus) / (2.0 * opts.step);
            let ad = analytic[pi].data()[e];
            let rel = (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs());
            report.probed += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, e);
            }
        }
    }
    Ok(report)
}
