//! Independent objective for checking trainer gradients, plus a generator of
//! small random problems.

use fedrs::data::LocalDataset;
use fedrs::model::{Architecture, Model, Proximal};
use fedrs::SeededRng;

/// Cross-entropy of softmax(z) at label y, computed the textbook way.
pub fn xent(z: &[f64], y: usize) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
    -(z[y] - m - s.ln())
}

/// Objective from raw parameters: w0 is `d x out` row-major, then b0, and
/// for the MLP w1 (`h x k`) and b1 with tanh between the layers.
pub fn reference_objective(
    arch: Architecture,
    params: &[Vec<f64>],
    data: &LocalDataset,
    mu: f64,
    anchor: &[Vec<f64>],
) -> f64 {
    let d = data.num_features();
    let mut total = 0.0;
    for i in 0..data.len() {
        let x = data.row(i);
        let logits = match arch {
            Architecture::Logistic { num_classes: k, .. } => (0..k)
                .map(|c| params[1][c] + (0..d).map(|j| x[j] * params[0][j * k + c]).sum::<f64>())
                .collect::<Vec<_>>(),
            Architecture::Mlp {
                hidden: h,
                num_classes: k,
                ..
            } => {
                let a: Vec<f64> = (0..h)
                    .map(|u| (params[1][u] + (0..d).map(|j| x[j] * params[0][j * h + u]).sum::<f64>()).tanh())
                    .collect();
                (0..k)
                    .map(|c| params[3][c] + (0..h).map(|u| a[u] * params[2][u * k + c]).sum::<f64>())
                    .collect()
            }
        };
        total += xent(&logits, data.label(i) as usize);
    }
    let mut obj = total / data.len() as f64;
    let mut sq = 0.0;
    for (p, r) in params.iter().zip(anchor) {
        for (a, b) in p.iter().zip(r) {
            sq += (a - b) * (a - b);
        }
    }
    obj += 0.5 * mu * sq;
    obj
}

pub fn random_instance(rng: &mut SeededRng) -> (Architecture, Model, LocalDataset, f64, Vec<Vec<f64>>) {
    let d = 1 + rng.below(5) as usize;
    let k = 2 + rng.below(4) as usize;
    let arch = if rng.below(2) == 0 {
        Architecture::Logistic {
            num_features: d,
            num_classes: k,
        }
    } else {
        Architecture::Mlp {
            num_features: d,
            hidden: 1 + rng.below(5) as usize,
            num_classes: k,
        }
    };
    let mut model = Model::init(arch, rng.next_u64());
    for p in model.params_mut() {
        for v in p.iter_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
    }
    let n = 1 + rng.below(8) as usize;
    let features: Vec<f64> = (0..n * d).map(|_| rng.uniform(-2.0, 2.0)).collect();
    let labels: Vec<u32> = (0..n).map(|_| rng.below(k as u64) as u32).collect();
    let data = LocalDataset::new(features, d, labels, k).unwrap();
    let mu = if rng.below(2) == 0 { 0.0 } else { rng.uniform(0.01, 2.0) };
    let anchor: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|p| p.iter().map(|_| rng.uniform(-1.0, 1.0)).collect())
        .collect();
    (arch, model, data, mu, anchor)
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(1e-12)
}

/// Relative error of the analytic gradient against central differences of
/// [`reference_objective`] on one random instance.
pub fn gradient_error(rng: &mut SeededRng, step: f64) -> f64 {
    let (arch, model, data, mu, anchor) = random_instance(rng);
    let batch: Vec<usize> = (0..data.len()).collect();
    let prox = Proximal {
        mu,
        reference: &anchor,
    };
    let (_, grads) = model.gradient(&data, &batch, (mu > 0.0).then_some(&prox));
    let mut params = model.params().to_vec();
    let mut numeric = Vec::new();
    for t in 0..params.len() {
        for j in 0..params[t].len() {
            let orig = params[t][j];
            params[t][j] = orig + step;
            let up = reference_objective(arch, &params, &data, mu, &anchor);
            params[t][j] = orig - step;
            let down = reference_objective(arch, &params, &data, mu, &anchor);
            params[t][j] = orig;
            numeric.push((up - down) / (2.0 * step));
        }
    }
    relative_error(&grads.concat(), &numeric)
}
