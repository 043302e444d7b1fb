//! Central-difference gradient oracle.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Central-difference gradient of `f` with respect to every element of the
/// listed parameters.
pub fn fd_gradient<F>(store: &ParamStore<f64>, ids: &[ParamId], h: f64, mut f: F) -> Result<Vec<Tensor<f64>>>
where
    F: FnMut(&ParamStore<f64>) -> Result<f64>,
{
    let mut work = store.clone();
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let n = work.get(id).tensor.numel();
        let mut g = vec![0.0; n];
        for (i, gi) in g.iter_mut().enumerate() {
            *gi = central_difference(&mut work, id, i, h, &mut f)?;
        }
        out.push(Tensor::new(work.get(id).tensor.shape(), g)?);
    }
    Ok(out)
}

fn central_difference<F>(work: &mut ParamStore<f64>, id: ParamId, i: usize, h: f64, f: &mut F) -> Result<f64>
where
    F: FnMut(&ParamStore<f64>) -> Result<f64>,
{
    let orig = work.get(id).tensor.data()[i];
    work.get_mut(id).tensor.data_mut()[i] = orig + h;
    let plus = f(work)?;
    work.get_mut(id).tensor.data_mut()[i] = orig - h;
    let minus = f(work)?;
    work.get_mut(id).tensor.data_mut()[i] = orig;
    Ok((plus - minus) / (2.0 * h))
}

/// Elementwise relative error `|a-b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub checked_elements: usize,
}

/// Compares backward against central differences for every trainable
/// parameter in `store`, probing at most `per_tensor` random elements per
/// tensor (`None` = all). `build` constructs the scalar loss.
pub fn check<F>(store: &ParamStore<f64>, h: f64, per_tensor: Option<usize>, seed: u64, build: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = build(&mut g)?;
        g.backward(loss)?
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(s);
        let loss = build(&mut g)?;
        Ok(g.value(loss).data()[0])
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut report = GradReport { max_rel_err: 0.0, worst_param: String::new(), checked_elements: 0 };
    for id in 0..store.len() {
        if !store.get(id).trainable {
            continue;
        }
        let n = store.get(id).tensor.numel();
        let coords: Vec<usize> = match per_tensor {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let zero = Tensor::zeros(store.get(id).tensor.shape());
        let a = analytic.param(id).unwrap_or(&zero);
        for i in coords {
            let fd = central_difference(&mut work, id, i, h, &mut |s: &ParamStore<f64>| eval(s))?;
            let e = rel_err(a.data()[i], fd);
            report.checked_elements += 1;
            if e > report.max_rel_err || e.is_nan() {
                report.max_rel_err = if e.is_nan() { f64::INFINITY } else { e };
                report.worst_param = format!("{}[{i}] analytic={} fd={fd}", store.get(id).name, a.data()[i]);
            }
        }
    }
    if report.checked_elements == 0 {
        return Err(Error::Contract("gradient check found no trainable parameters".into()));
    }
    Ok(report)
}
