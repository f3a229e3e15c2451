//! Helpers shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use mlca::model::gamma_row;
use mlca::{posterior, variance, Dataset, MeasurementParams, ModelParams, StructuralParams};
use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn dirichlet(rng: &mut ChaCha8Rng, len: usize) -> Array1<f64> {
    let v: Vec<f64> = (0..len).map(|_| -(1.0 - rng.random::<f64>()).ln() + 0.05).collect();
    let s: f64 = v.iter().sum();
    Array1::from_iter(v.into_iter().map(|x| x / s))
}

/// Small random dataset plus interior parameters, with or without a covariate.
pub fn random_instance(rng: &mut ChaCha8Rng, max_group: usize, max_t: usize, max_m: usize) -> (Dataset, ModelParams) {
    let t_count = rng.random_range(1..=max_t);
    let m_count = rng.random_range(1..=max_m);
    let h = rng.random_range(1..=4);
    let j = rng.random_range(1..=4);
    let with_cov = rng.random_bool(0.5);
    let mut groups = Vec::new();
    for g in 0..j {
        for _ in 0..rng.random_range(1..=max_group) {
            groups.push(g);
        }
    }
    let n = groups.len();
    let y = Array2::from_shape_fn((n, h), |_| u8::from(rng.random_bool(0.5)));
    let k = if with_cov { 2 } else { 1 };
    let z = Array2::from_shape_fn((n, k), |(_, c)| if c == 0 { 1.0 } else { rng.random_range(-2.0..2.0) });
    let data = Dataset::new(y, &groups, z).unwrap();
    let phi = Array2::from_shape_fn((h, t_count), |_| rng.random_range(0.05..0.95));
    let omega = dirichlet(rng, m_count);
    let structural = if with_cov {
        let gamma = Array2::from_shape_fn((m_count * (t_count - 1), k), |_| rng.random_range(-1.5..1.5));
        StructuralParams::conditional(omega, gamma, t_count).unwrap()
    } else {
        let mut pi = Array2::zeros((m_count, t_count));
        for m in 0..m_count {
            pi.row_mut(m).assign(&dirichlet(rng, t_count));
        }
        StructuralParams::unconditional(omega, pi).unwrap()
    };
    let params = ModelParams::new(MeasurementParams::new(phi).unwrap(), structural).unwrap();
    (data, params)
}

fn low_prior(data: &Dataset, params: &ModelParams, i: usize, m: usize) -> Vec<f64> {
    let t_count = params.n_low();
    match params.structural.gamma() {
        None => params.structural.pi().row(m).to_vec(),
        Some(gamma) => {
            let z = data.z();
            let mut eta = vec![0.0; t_count];
            for t in 1..t_count {
                eta[t] = gamma.row(gamma_row(t_count, m, t)).dot(&z.row(i));
            }
            let mx = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = eta.iter().map(|e| (e - mx).exp()).sum();
            eta.iter().map(|e| (e - mx).exp() / s).collect()
        }
    }
}

/// `(u, v, loglik)` by summing the joint probability of every `(W, X_1..X_n)` configuration.
pub fn enumerate_posteriors(data: &Dataset, params: &ModelParams) -> (Array2<f64>, Array3<f64>, f64) {
    let t_count = params.n_low();
    let m_count = params.n_high();
    let phi = params.measurement.phi();
    let y = data.y();
    let omega = params.structural.omega();
    let mut u = Array2::zeros((data.n_groups(), m_count));
    let mut v = Array3::zeros((data.n_units(), t_count, m_count));
    let mut loglik = 0.0;
    for j in 0..data.n_groups() {
        let rows: Vec<usize> = data.group_range(j).collect();
        let n = rows.len();
        let density = |i: usize, t: usize| -> f64 {
            (0..data.n_items())
                .map(|h| if y[[i, h]] == 1 { phi[[h, t]] } else { 1.0 - phi[[h, t]] })
                .product()
        };
        let mut total = 0.0;
        let mut joint_m = vec![0.0; m_count];
        let mut joint_v = vec![vec![vec![0.0; m_count]; t_count]; n];
        for m in 0..m_count {
            let priors: Vec<Vec<f64>> = rows.iter().map(|&i| low_prior(data, params, i, m)).collect();
            let mut x = vec![0usize; n];
            loop {
                let mut p = omega[m];
                for (a, &i) in rows.iter().enumerate() {
                    p *= priors[a][x[a]] * density(i, x[a]);
                }
                total += p;
                joint_m[m] += p;
                for a in 0..n {
                    joint_v[a][x[a]][m] += p;
                }
                let mut pos = 0;
                while pos < n {
                    x[pos] += 1;
                    if x[pos] < t_count {
                        break;
                    }
                    x[pos] = 0;
                    pos += 1;
                }
                if pos == n {
                    break;
                }
            }
        }
        loglik += total.ln();
        for m in 0..m_count {
            u[[j, m]] = joint_m[m] / total;
        }
        for (a, &i) in rows.iter().enumerate() {
            for t in 0..t_count {
                for m in 0..m_count {
                    v[[i, t, m]] = joint_v[a][t][m] / total;
                }
            }
        }
    }
    (u, v, loglik)
}

/// Largest relative gap between the analytic score and central differences of the log-likelihood.
pub fn score_fd_error(data: &Dataset, v: &[f64], n_cov: Option<usize>, t: usize, m: usize) -> f64 {
    let build = |x: &[f64]| variance::params_from_vector(x, data.n_items(), t, m, n_cov).unwrap();
    let params = build(v);
    let post = posterior::e_step(data, &params).unwrap();
    let analytic = variance::score_contributions(data, &params, &post).total();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for p in 0..v.len() {
        let mut up = v.to_vec();
        let mut dn = v.to_vec();
        up[p] += h;
        dn[p] -= h;
        let lu = posterior::loglik(data, &build(&up)).unwrap();
        let ld = posterior::loglik(data, &build(&dn)).unwrap();
        let fd = (lu - ld) / (2.0 * h);
        worst = worst.max((analytic[p] - fd).abs() / fd.abs().max(1.0));
    }
    worst
}

/// Largest drop between consecutive entries of a log-likelihood trace.
pub fn max_decrease(trace: &[f64]) -> f64 {
    trace.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max)
}

pub fn max_abs_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
