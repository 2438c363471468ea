//! Central-difference validation of analytic gradients (64-bit only).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::error::TensorError;
use crate::graph::{Graph, Var};
use crate::param::ParamStore;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("analytic gradient of `{0}` is not finite")]
    NonFiniteGradient(String),
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error(transparent)]
    Graph(#[from] TensorError),
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates checked per parameter; the largest-gradient coordinate is
    /// always among them. `usize::MAX` checks every coordinate.
    pub samples_per_param: usize,
    /// Relative errors are taken against `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples_per_param: 4,
            floor: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub max_grad: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub loss: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn coordinates(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<F>(store: &ParamStore<f64>, f: &F) -> Result<f64, GradCheckError>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var, TensorError>,
{
    let mut g = Graph::new(store);
    let loss = f(&mut g)?;
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(GradCheckError::NonFiniteLoss);
    }
    Ok(v)
}

/// Compares the analytic gradient of the scalar built by `f` against central
/// differences for every trainable parameter in `store`.
pub fn check_gradients<F>(
    store: &mut ParamStore<f64>,
    f: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var, TensorError>,
{
    let (loss, analytic) = {
        let mut g = Graph::new(&*store);
        let loss = f(&mut g)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(GradCheckError::NonFiniteLoss);
        }
        (value, g.backward(loss)?.for_store(store))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, p)| (id, p.name.clone()))
        .collect();
    let mut params = Vec::with_capacity(ids.len());
    for (id, name) in ids {
        let grad = &analytic[id.index()];
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(GradCheckError::NonFiniteGradient(name));
        }
        let n = grad.len();
        let argmax = (0..n)
            .max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs()))
            .unwrap_or(0);
        let mut coords: Vec<usize> = if opts.samples_per_param >= n {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.samples_per_param).into_vec()
        };
        if !coords.contains(&argmax) {
            coords[0] = argmax;
        }
        let mut check = ParamCheck {
            name,
            checked: coords.len(),
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            max_grad: grad[argmax].abs(),
        };
        for j in coords {
            let orig = store.get(id).tensor.data()[j];
            store.get_mut(id).tensor.data_mut()[j] = orig + opts.step;
            let plus = eval(store, &f)?;
            store.get_mut(id).tensor.data_mut()[j] = orig - opts.step;
            let minus = eval(store, &f)?;
            store.get_mut(id).tensor.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            check.max_abs_err = check.max_abs_err.max((grad[j] - numeric).abs());
            check.max_rel_err = check
                .max_rel_err
                .max(relative_error(grad[j], numeric, opts.floor));
        }
        params.push(check);
    }
    Ok(GradCheckReport { loss, params })
}
