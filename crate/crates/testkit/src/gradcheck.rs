//! Central finite-difference gradient checks for `Graph<f64>`.
//!
//! A check builds the graph once for the analytic gradient and then rebuilds it from
//! perturbed copies of the inputs and parameters for the numeric one. Outputs that are
//! not scalar are reduced with a seeded random projection.

use std::collections::HashMap;

use pictor::nn::{Graph, NnError, NodeId, ParamId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Callback that wires inputs (in order) and parameters into an output node.
pub trait Builder: Fn(&mut Graph<f64>, &ParamStore<f64>, &[NodeId]) -> Result<NodeId, NnError> {}
impl<F: Fn(&mut Graph<f64>, &ParamStore<f64>, &[NodeId]) -> Result<NodeId, NnError>> Builder for F {}

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    /// Random output projections (and perturbation directions) to try.
    pub projections: usize,
    pub step: f64,
    pub seed: u64,
    /// Magnitude below which errors are measured absolutely in elementwise checks.
    pub floor: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { projections: 10, step: 1e-6, seed: 0, floor: 1e-6 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Comparisons made (directions or elements).
    pub compared: usize,
    /// `(label, analytic, numeric)` of the worst comparison.
    pub worst: (String, f64, f64),
}

impl GradCheck {
    fn new() -> Self {
        Self { max_rel_error: 0.0, compared: 0, worst: (String::new(), 0.0, 0.0) }
    }

    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64, floor: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        let err = (analytic - numeric).abs() / denom;
        self.compared += 1;
        if err > self.max_rel_error || !err.is_finite() {
            self.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
            self.worst = (label(), analytic, numeric);
        }
    }
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn scalarize(g: &mut Graph<f64>, out: NodeId, weights: &[f64]) -> Result<NodeId, NnError> {
    let n = g.value(out).len();
    g.weighted_sum(out, weights[..n].to_vec())
}

fn evaluate(
    build: &impl Builder,
    inputs: &[Tensor<f64>],
    ps: &ParamStore<f64>,
    weights: &[f64],
) -> Result<f64, NnError> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone(), false)).collect();
    let out = build(&mut g, ps, &ids)?;
    let loss = scalarize(&mut g, out, weights)?;
    Ok(g.value(loss).data()[0])
}

struct Analytic {
    inputs: Vec<Vec<f64>>,
    params: HashMap<ParamId, Vec<f64>>,
}

fn analytic(
    build: &impl Builder,
    inputs: &[Tensor<f64>],
    ps: &ParamStore<f64>,
    weights: &[f64],
) -> Result<Analytic, NnError> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let out = build(&mut g, ps, &ids)?;
    let loss = scalarize(&mut g, out, weights)?;
    g.backward(loss)?;
    let input_grads = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| g.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    let mut params: HashMap<ParamId, Vec<f64>> = HashMap::new();
    for (id, grad) in g.param_grads() {
        let acc = params.entry(id).or_insert_with(|| vec![0.0; grad.len()]);
        for (a, v) in acc.iter_mut().zip(grad) {
            *a += v;
        }
    }
    Ok(Analytic { inputs: input_grads, params })
}

fn output_len(build: &impl Builder, inputs: &[Tensor<f64>], ps: &ParamStore<f64>) -> Result<usize, NnError> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone(), false)).collect();
    let out = build(&mut g, ps, &ids)?;
    Ok(g.value(out).len())
}

fn trainable(ps: &ParamStore<f64>) -> Vec<ParamId> {
    ps.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
}

fn perturbed(
    inputs: &[Tensor<f64>],
    ps: &ParamStore<f64>,
    dir_inputs: &[Vec<f64>],
    dir_params: &[(ParamId, Vec<f64>)],
    t: f64,
) -> (Vec<Tensor<f64>>, ParamStore<f64>) {
    let mut xs = inputs.to_vec();
    for (x, d) in xs.iter_mut().zip(dir_inputs) {
        for (v, dv) in x.data_mut().iter_mut().zip(d) {
            *v += t * dv;
        }
    }
    let mut ps = ps.clone();
    for (id, d) in dir_params {
        for (v, dv) in ps.get_mut(*id).value.data_mut().iter_mut().zip(d) {
            *v += t * dv;
        }
    }
    (xs, ps)
}

/// Compares directional derivatives along random directions through every input and
/// trainable parameter, each under a fresh random output projection.
pub fn check_directional(
    inputs: &[Tensor<f64>],
    ps: &ParamStore<f64>,
    build: impl Builder,
    opts: CheckOptions,
) -> Result<GradCheck, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n_out = output_len(&build, inputs, ps)?;
    let params = trainable(ps);
    let mut report = GradCheck::new();
    for k in 0..opts.projections {
        let weights: Vec<f64> = (0..n_out).map(|_| standard_normal(&mut rng)).collect();
        let grads = analytic(&build, inputs, ps, &weights)?;
        let dir_inputs: Vec<Vec<f64>> =
            inputs.iter().map(|t| (0..t.len()).map(|_| standard_normal(&mut rng)).collect()).collect();
        let dir_params: Vec<(ParamId, Vec<f64>)> = params
            .iter()
            .map(|&id| (id, (0..ps.get(id).value.len()).map(|_| standard_normal(&mut rng)).collect()))
            .collect();
        let mut a = 0.0;
        for (g, d) in grads.inputs.iter().zip(&dir_inputs) {
            a += g.iter().zip(d).map(|(g, d)| g * d).sum::<f64>();
        }
        for (id, d) in &dir_params {
            if let Some(g) = grads.params.get(id) {
                a += g.iter().zip(d).map(|(g, d)| g * d).sum::<f64>();
            }
        }
        let (xp, pp) = perturbed(inputs, ps, &dir_inputs, &dir_params, opts.step);
        let (xm, pm) = perturbed(inputs, ps, &dir_inputs, &dir_params, -opts.step);
        let numeric =
            (evaluate(&build, &xp, &pp, &weights)? - evaluate(&build, &xm, &pm, &weights)?) / (2.0 * opts.step);
        report.record(|| format!("projection {k}"), a, numeric, 1e-12);
    }
    Ok(report)
}

/// Compares every partial derivative of `sum(w ⊙ out)` with `w` drawn once from the seed
/// (all ones when `unit_weights`). Intended for tiny cases.
pub fn check_elementwise(
    inputs: &[Tensor<f64>],
    ps: &ParamStore<f64>,
    build: impl Builder,
    opts: CheckOptions,
    unit_weights: bool,
) -> Result<GradCheck, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n_out = output_len(&build, inputs, ps)?;
    let weights: Vec<f64> =
        (0..n_out).map(|_| if unit_weights { 1.0 } else { rng.random_range(-1.0..1.0) }).collect();
    let grads = analytic(&build, inputs, ps, &weights)?;
    let mut report = GradCheck::new();
    let h = opts.step;
    for (i, x) in inputs.iter().enumerate() {
        for j in 0..x.len() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] = x.data()[j] + h;
            let fp = evaluate(&build, &xs, ps, &weights)?;
            xs[i].data_mut()[j] = x.data()[j] - h;
            let fm = evaluate(&build, &xs, ps, &weights)?;
            report.record(|| format!("input {i}[{j}]"), grads.inputs[i][j], (fp - fm) / (2.0 * h), opts.floor);
        }
    }
    for id in trainable(ps) {
        let len = ps.get(id).value.len();
        let zeros = vec![0.0; len];
        let g = grads.params.get(&id).unwrap_or(&zeros);
        for j in 0..len {
            let mut p = ps.clone();
            let v = ps.get(id).value.data()[j];
            p.get_mut(id).value.data_mut()[j] = v + h;
            let fp = evaluate(&build, inputs, &p, &weights)?;
            p.get_mut(id).value.data_mut()[j] = v - h;
            let fm = evaluate(&build, inputs, &p, &weights)?;
            report.record(|| format!("{}[{j}]", ps.get(id).name), g[j], (fp - fm) / (2.0 * h), opts.floor);
        }
    }
    Ok(report)
}

/// Tensor with standard normal entries.
pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| standard_normal(rng)).collect()).expect("consistent shape")
}

/// Tensor with entries uniform in `±[lo, hi]`, keeping values away from zero.
pub fn random_tensor_away_from_zero(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}
