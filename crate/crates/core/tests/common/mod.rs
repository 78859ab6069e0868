#![allow(dead_code)]

use std::io::Write;

use ecgforge::autodiff::{Graph, Tensor, Var};
use ecgforge::dataset::RecordEntry;
use ecgforge::synth::{generate, SynthConfig};
use ecgforge::training::MemorySource;
use ecgforge::wfdb::ChannelSet;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;

/// Writes straight to stderr so the line survives output capture.
pub fn report_line(line: &str) {
    let mut err = std::io::stderr();
    let _ = writeln!(err, "{line}");
    let _ = err.flush();
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values at least 0.05 away from zero and from each other, so that
/// kinks of relu and max-pool stay out of reach of the finite step.
pub fn spread(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n)
        .map(|i| {
            let v = 0.1 * (i as f64 - n as f64 / 2.0) + 0.05;
            v + 0.01 * rng.random::<f64>()
        })
        .collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

/// Weighted sum `sum_i r_i out_i` of the graph output for given inputs.
fn weighted_output(inputs: &[Tensor], r: &[f64], build: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars);
    g.value(out).data().iter().zip(r).map(|(a, b)| a * b).sum()
}

/// Largest normwise relative error, over all inputs, between the
/// reverse-mode gradient and central finite differences of
/// `sum_i r_i out_i` for a random weighting `r`.
pub fn fd_check(rng: &mut ChaCha8Rng, inputs: Vec<Tensor>, build: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars);
    let r: Vec<f64> = (0..g.value(out).len()).map(|_| StandardNormal.sample(rng)).collect();
    g.backward_with(out, r.clone()).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(*v).len()]))
        .collect();

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= FD_STEP;
            *slot = (weighted_output(&plus, &r, build) - weighted_output(&minus, &r, build)) / (2.0 * FD_STEP);
        }
        let diff: f64 = analytic[k].iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic[k].iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nn);
        let rel = if scale < 1e-12 { diff } else { diff / scale };
        worst = worst.max(rel);
    }
    worst
}

/// Synthetic records held in memory, keyed by record id.
pub fn synthetic(cfg: &SynthConfig, channels: ChannelSet) -> (Vec<RecordEntry>, MemorySource) {
    let data = generate(cfg).unwrap();
    let entries = data.iter().map(|(_, e)| e.clone()).collect();
    let source = MemorySource {
        records: data.into_iter().map(|(r, e)| (e.record_id, r)).collect(),
        channels,
    };
    (entries, source)
}
