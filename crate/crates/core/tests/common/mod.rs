//! Dense, untiled reference implementation of the GP formulas, written
//! without any of the library's tiling or kernel code.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gprs::{Dataset, Hyperparameters};

pub type Mat = Vec<Vec<f64>>;

pub fn kernel(a: &[f64], b: &[f64], l: f64, nu: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    nu * (-d2 / (2.0 * l * l)).exp()
}

fn points(ds: &Dataset) -> Vec<Vec<f64>> {
    (0..ds.n()).map(|i| ds.point(i).to_vec()).collect()
}

pub fn covariance(ds: &Dataset, th: [f64; 3]) -> Mat {
    let p = points(ds);
    let n = p.len();
    let mut k = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            k[i][j] = kernel(&p[i], &p[j], th[0], th[1]) + if i == j { th[2] } else { 0.0 };
        }
    }
    k
}

pub fn cross(test: &Dataset, train: &Dataset, th: [f64; 3]) -> Mat {
    let (pt, pr) = (points(test), points(train));
    pt.iter().map(|a| pr.iter().map(|b| kernel(a, b, th[0], th[1])).collect()).collect()
}

/// Cholesky-Crout, lower factor.
pub fn cholesky(a: &Mat) -> Option<Mat> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for j in 0..n {
        let mut s = a[j][j];
        for k in 0..j {
            s -= l[j][k] * l[j][k];
        }
        if s <= 0.0 {
            return None;
        }
        l[j][j] = s.sqrt();
        for i in j + 1..n {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            l[i][j] = s / l[j][j];
        }
    }
    Some(l)
}

pub fn forward(l: &Mat, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut x = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            x[i] -= l[i][k] * x[k];
        }
        x[i] /= l[i][i];
    }
    x
}

pub fn backward(l: &Mat, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        for k in i + 1..n {
            x[i] -= l[k][i] * x[k];
        }
        x[i] /= l[i][i];
    }
    x
}

pub struct Posterior {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub cov: Mat,
}

pub fn posterior(train: &Dataset, test: &Dataset, th: [f64; 3]) -> Posterior {
    let l = cholesky(&covariance(train, th)).expect("oracle covariance not SPD");
    let alpha = backward(&l, &forward(&l, train.targets()));
    let kc = cross(test, train, th);
    let mean = kc.iter().map(|row| row.iter().zip(&alpha).map(|(a, b)| a * b).sum()).collect();
    // V columns: L v_i = k_i for each test point i.
    let v: Vec<Vec<f64>> = kc.iter().map(|row| forward(&l, row)).collect();
    let pt = points(test);
    let m = pt.len();
    let mut cov = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in 0..m {
            let dot: f64 = v[i].iter().zip(&v[j]).map(|(a, b)| a * b).sum();
            cov[i][j] = kernel(&pt[i], &pt[j], th[0], th[1]) - dot;
        }
    }
    let variance = (0..m).map(|i| cov[i][i]).collect();
    Posterior { mean, variance, cov }
}

pub fn nlml(train: &Dataset, th: [f64; 3]) -> f64 {
    let l = cholesky(&covariance(train, th)).expect("oracle covariance not SPD");
    let z = forward(&l, train.targets());
    let half_logdet: f64 = (0..l.len()).map(|i| l[i][i].ln()).sum();
    let quad: f64 = z.iter().map(|v| v * v).sum();
    half_logdet + 0.5 * quad + 0.5 * l.len() as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Central differences of the oracle loss with absolute step `h`.
pub fn fd_gradient(train: &Dataset, th: [f64; 3], h: f64) -> [f64; 3] {
    let mut g = [0.0; 3];
    for k in 0..3 {
        let (mut up, mut down) = (th, th);
        up[k] += h;
        down[k] -= h;
        g[k] = (nlml(train, up) - nlml(train, down)) / (2.0 * h);
    }
    g
}

/// `||a - b|| / ||b||`, with `||b||` floored at the smallest positive value.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}

pub fn flatten(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Points uniform in `[-2, 2]^d`, targets a smooth function plus noise.
pub fn random_dataset(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Dataset {
    let features: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let targets = (0..n)
        .map(|i| {
            let z = &features[i * d..(i + 1) * d];
            z.iter().map(|v| v.sin()).sum::<f64>() + 0.1 * rng.gen_range(-1.0..1.0)
        })
        .collect();
    Dataset::new(features, targets, d).unwrap()
}

pub fn random_theta(rng: &mut ChaCha8Rng, lo: f64, hi: f64, noise_lo: f64) -> [f64; 3] {
    // Log-uniform so every decade of the range is exercised.
    let mut draw = |a: f64, b: f64| (rng.gen_range(a.ln()..b.ln())).exp();
    [draw(lo, hi), draw(lo, hi), draw(noise_lo, hi)]
}

pub fn hp(th: [f64; 3]) -> Hyperparameters {
    Hyperparameters::new(th[0], th[1], th[2]).unwrap()
}
