#![allow(dead_code)]

use std::io::Write;
use std::path::PathBuf;

use leosplit::config::{ExperimentConfig, Mode};
use leosplit::data::scenario_from_config;
use leosplit::protocol::{run_experiment, RoundReport};
use rand::seq::index;
use rand::Rng;

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

pub fn load_config(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(config_path(name)).expect("shipped config parses")
}

pub fn run(cfg: &ExperimentConfig) -> Vec<RoundReport> {
    let (parts, test) = scenario_from_config(cfg).expect("scenario");
    run_experiment(cfg, parts, test).expect("run")
}

pub fn run_mode(base: &ExperimentConfig, mode: Mode, seed: u64, rounds: usize) -> Vec<RoundReport> {
    let mut cfg = base.clone();
    cfg.mode = mode;
    cfg.seed = seed;
    cfg.rounds = rounds;
    run(&cfg)
}

/// One line per criterion, easy to grep out of the test log. Written to the
/// raw stderr handle so it shows up even when the harness captures output.
pub fn verdict(criterion: &str, pass: bool, detail: &str) {
    let line = format!(
        "[{}] {criterion}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

/// `||a - n|| / (||a|| + ||n||)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt()
        + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Threshold table written straight from the definitions, no shared code.
pub fn threshold_oracle(
    labeled: &[Vec<u64>],
    pseudo: &[Vec<u64>],
    base: f64,
    cap: f64,
) -> Vec<Vec<f64>> {
    let n = labeled.len();
    let m = labeled[0].len();
    let theta: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..m)
                .map(|c| (labeled[i][c] + pseudo[i][c]) as f64)
                .collect()
        })
        .collect();
    let grand: f64 = theta.iter().flatten().sum();
    let q: Vec<f64> = (0..m)
        .map(|c| (0..n).map(|i| theta[i][c]).sum::<f64>() / grand)
        .collect();
    let r: Vec<f64> = theta
        .iter()
        .map(|row| row.iter().sum::<f64>() / grand)
        .collect();
    let mean = q.iter().sum::<f64>() / m as f64;
    let std = (q.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64).sqrt();
    r.iter()
        .map(|ri| {
            q.iter()
                .map(|qm| (ri * (qm + base - std)).min(cap).max(0.01))
                .collect()
        })
        .collect()
}

/// Plain unsplit MLP trained by minibatch SGD on softmax cross-entropy.
pub struct Mlp {
    /// `(weights [out][in], bias [out])` per layer; ReLU on all but the last.
    layers: Vec<(Vec<Vec<f64>>, Vec<f64>)>,
}

impl Mlp {
    pub fn new<R: Rng>(dims: &[usize], rng: &mut R) -> Self {
        let layers = dims
            .windows(2)
            .map(|d| {
                let b = 1.0 / (d[0] as f64).sqrt();
                let w = (0..d[1])
                    .map(|_| (0..d[0]).map(|_| rng.random_range(-b..=b)).collect())
                    .collect();
                let bias = (0..d[1]).map(|_| rng.random_range(-b..=b)).collect();
                (w, bias)
            })
            .collect();
        Self { layers }
    }

    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        let last = self.layers.len() - 1;
        for (l, (w, b)) in self.layers.iter().enumerate() {
            let input = acts.last().unwrap();
            let out: Vec<f64> = w
                .iter()
                .zip(b)
                .map(|(row, bias)| {
                    let z = bias + row.iter().zip(input).map(|(a, c)| a * c).sum::<f64>();
                    if l < last {
                        z.max(0.0)
                    } else {
                        z
                    }
                })
                .collect();
            acts.push(out);
        }
        acts
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let out = self.activations(x).pop().unwrap();
        let mut best = 0;
        for (i, v) in out.iter().enumerate() {
            if *v > out[best] {
                best = i;
            }
        }
        best
    }

    pub fn sgd_batch(&mut self, xs: &[&[f64]], ys: &[usize], lr: f64) {
        let mut gw: Vec<Vec<Vec<f64>>> = self
            .layers
            .iter()
            .map(|(w, _)| vec![vec![0.0; w[0].len()]; w.len()])
            .collect();
        let mut gb: Vec<Vec<f64>> = self
            .layers
            .iter()
            .map(|(_, b)| vec![0.0; b.len()])
            .collect();
        let scale = 1.0 / xs.len() as f64;
        for (x, &y) in xs.iter().zip(ys) {
            let acts = self.activations(x);
            let logits = acts.last().unwrap();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let mut delta: Vec<f64> = exps.iter().map(|e| e / total * scale).collect();
            delta[y] -= scale;
            for l in (0..self.layers.len()).rev() {
                let input = &acts[l];
                let (w, _) = &self.layers[l];
                for o in 0..delta.len() {
                    gb[l][o] += delta[o];
                    for i in 0..input.len() {
                        gw[l][o][i] += delta[o] * input[i];
                    }
                }
                if l > 0 {
                    delta = (0..input.len())
                        .map(|i| {
                            if input[i] > 0.0 {
                                (0..delta.len()).map(|o| w[o][i] * delta[o]).sum()
                            } else {
                                0.0
                            }
                        })
                        .collect();
                }
            }
        }
        for (l, (w, b)) in self.layers.iter_mut().enumerate() {
            for o in 0..w.len() {
                b[o] -= lr * gb[l][o];
                for i in 0..w[o].len() {
                    w[o][i] -= lr * gw[l][o][i];
                }
            }
        }
    }

    pub fn train<R: Rng>(
        &mut self,
        xs: &[Vec<f64>],
        ys: &[usize],
        steps: usize,
        batch: usize,
        lr: f64,
        rng: &mut R,
    ) {
        for _ in 0..steps {
            let idx: Vec<usize> = if xs.len() <= batch {
                (0..xs.len()).collect()
            } else {
                index::sample(rng, xs.len(), batch).into_vec()
            };
            let bx: Vec<&[f64]> = idx.iter().map(|&i| &xs[i][..]).collect();
            let by: Vec<usize> = idx.iter().map(|&i| ys[i]).collect();
            self.sgd_batch(&bx, &by, lr);
        }
    }

    pub fn accuracy(&self, xs: &[Vec<f64>], ys: &[usize]) -> f64 {
        let hits = xs
            .iter()
            .zip(ys)
            .filter(|(x, &y)| self.predict(x) == y)
            .count();
        hits as f64 / xs.len() as f64
    }
}
