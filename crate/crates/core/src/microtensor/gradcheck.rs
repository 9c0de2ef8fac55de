use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use super::TensorError;

/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Largest componentwise relative error between the reverse-mode gradient of
/// the scalar `f` at `x` and central differences with step `h`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>,
{
    let mut store = ParamStore::new();
    store.insert("x", x.clone());
    grad_check_params(
        |g, p| {
            let v = g.param(p, "x")?;
            f(g, v)
        },
        &store,
        h,
    )
}

/// As [`grad_check`], over every scalar of every parameter in `params`.
pub fn grad_check_params<F>(f: F, params: &ParamStore<f64>, h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var, TensorError>,
{
    let eval = |p: &ParamStore<f64>| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let loss = f(&mut g, p)?;
        g.value(loss).item()
    };
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    g.backward(loss)?;
    let analytic: Vec<(String, Vec<f64>)> = params
        .iter()
        .map(|(name, t)| {
            let var = g.params().iter().find(|(n, _)| n == name).map(|(_, v)| *v);
            let grad = var.and_then(|v| g.grad(v)).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
            (name.to_string(), grad)
        })
        .collect();

    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for (name, ga) in &analytic {
        for (i, &ad) in ga.iter().enumerate() {
            let orig = probe.get(name).expect("present").data()[i];
            probe.get_mut(name).expect("present").data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(name).expect("present").data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(name).expect("present").data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(ad, fd));
        }
    }
    Ok(worst)
}
/// Directional variant for large ReLU networks: for every parameter tensor
/// and each of `probes` random unit directions `d` supported on it,
/// compares `∇f·d` with `(f(p + hd) - f(p - hd)) / 2h`. The error is
/// `|a - b| / max(|a| + |b|, floor)`, so derivatives far below the
/// round-off level of `f` are judged in absolute terms.
pub fn grad_check_directional<F>(
    f: F,
    params: &ParamStore<f64>,
    h: f64,
    probes: usize,
    floor: f64,
    seed: u64,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var, TensorError>,
{
    let eval = |p: &ParamStore<f64>| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let loss = f(&mut g, p)?;
        g.value(loss).item()
    };
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    g.backward(loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for (name, t) in params.iter() {
        let var = g.params().iter().find(|(n, _)| n == name).map(|(_, v)| *v);
        let grad = var.and_then(|v| g.grad(v)).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
        for _ in 0..probes {
            let mut d: Vec<f64> = (0..t.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            d.iter_mut().for_each(|v| *v /= norm);
            let analytic: f64 = grad.iter().zip(&d).map(|(a, b)| a * b).sum();
            let mut probe = params.clone();
            let shift = |probe: &mut ParamStore<f64>, s: f64| {
                for ((x, o), dv) in probe.get_mut(name).expect("present").data_mut().iter_mut().zip(t.data()).zip(&d) {
                    *x = o + s * dv;
                }
            };
            shift(&mut probe, h);
            let up = eval(&probe)?;
            shift(&mut probe, -h);
            let down = eval(&probe)?;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((analytic - fd).abs() / (analytic.abs() + fd.abs()).max(floor));
        }
    }
    Ok(worst)
}

