//! Reference implementations used only by tests. They follow the textbook
//! definitions directly and share no code with the library.

#![allow(dead_code)]

/// Central finite differences of `f` at `x`.
pub fn fd_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| x / n).collect()
}

/// Greedy herding recomputed from scratch at every step: normalize the
/// features, take their mean and normalize it, and at step k try every unused candidate,
/// scoring `||mu - (sum of chosen + candidate) / k||^2`; the first minimum wins.
pub fn herding_oracle(features: &[Vec<f64>], m: usize) -> Vec<usize> {
    let z: Vec<Vec<f64>> = features.iter().map(|f| unit(f)).collect();
    let d = z[0].len();
    let n = z.len() as f64;
    let mu = unit(&(0..d).map(|j| z.iter().map(|r| r[j]).sum::<f64>() / n).collect::<Vec<_>>());
    let mut chosen: Vec<usize> = Vec::new();
    while chosen.len() < m.min(z.len()) {
        let k = (chosen.len() + 1) as f64;
        let mut best: Option<(usize, f64)> = None;
        for c in 0..z.len() {
            if chosen.contains(&c) {
                continue;
            }
            let score: f64 = (0..d)
                .map(|j| {
                    let s: f64 = chosen.iter().map(|&i| z[i][j]).sum::<f64>() + z[c][j];
                    let diff = mu[j] - s / k;
                    diff * diff
                })
                .sum();
            if best.is_none_or(|(_, b)| score < b) {
                best = Some((c, score));
            }
        }
        chosen.push(best.unwrap().0);
    }
    chosen
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves a small dense system by Gauss-Jordan elimination; `None` if singular.
pub fn gauss_jordan(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().partial_cmp(&a[j][c].abs()).unwrap())?;
        if a[p][c].abs() < 1e-12 {
            return None;
        }
        a.swap(p, c);
        b.swap(p, c);
        let piv = a[c][c];
        for j in 0..n {
            a[c][j] /= piv;
        }
        b[c] /= piv;
        for r in 0..n {
            if r != c {
                let f = a[r][c];
                for j in 0..n {
                    a[r][j] -= f * a[c][j];
                }
                b[r] -= f * b[c];
            }
        }
    }
    Some(b)
}

/// Euclidean projection of `g` onto `{x : <x, G_k> >= 0}` by enumerating every
/// subset S of constraints as the active set: `x_S = g - G_S' (G_S G_S')^-1 G_S g`.
/// Among feasible candidates the closest to `g` is returned.
pub fn gem_oracle(g: &[f64], constraints: &[Vec<f64>]) -> Vec<f64> {
    let t = constraints.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0u32..(1 << t) {
        let s: Vec<usize> = (0..t).filter(|k| mask & (1 << k) != 0).collect();
        let x = if s.is_empty() {
            g.to_vec()
        } else {
            let gram: Vec<Vec<f64>> = s
                .iter()
                .map(|&i| s.iter().map(|&j| dot(&constraints[i], &constraints[j])).collect())
                .collect();
            let rhs: Vec<f64> = s.iter().map(|&i| dot(&constraints[i], g)).collect();
            let Some(lam) = gauss_jordan(gram, rhs) else {
                continue;
            };
            let mut x = g.to_vec();
            for (li, &i) in lam.iter().zip(&s) {
                for (xj, cj) in x.iter_mut().zip(&constraints[i]) {
                    *xj -= li * cj;
                }
            }
            x
        };
        if constraints.iter().all(|c| dot(&x, c) >= -1e-9) {
            let dist: f64 = x.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum();
            if best.as_ref().is_none_or(|(d, _)| dist < *d) {
                best = Some((dist, x));
            }
        }
    }
    best.expect("the zero vector side always has a feasible face").1
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Entropic OT by fixed-point iteration on the dual potentials in the log
/// domain: `f_i = eps ln a_i - eps LSE_j((g_j - C_ij)/eps)`, and likewise for
/// `g`. The plan is `exp((f_i + g_j - C_ij)/eps)`.
pub fn sinkhorn_oracle(cost: &[Vec<f64>], a: &[f64], b: &[f64], eps: f64) -> Vec<Vec<f64>> {
    let (p, q) = (a.len(), b.len());
    let mut f = vec![0.0; p];
    let mut g = vec![0.0; q];
    for _ in 0..200_000 {
        let f_old = f.clone();
        for i in 0..p {
            f[i] = eps * a[i].ln() - eps * log_sum_exp((0..q).map(|j| (g[j] - cost[i][j]) / eps));
        }
        for j in 0..q {
            g[j] = eps * b[j].ln() - eps * log_sum_exp((0..p).map(|i| (f[i] - cost[i][j]) / eps));
        }
        let change = f.iter().zip(&f_old).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        if change < 1e-15 {
            break;
        }
    }
    (0..p)
        .map(|i| (0..q).map(|j| ((f[i] + g[j] - cost[i][j]) / eps).exp()).collect())
        .collect()
}
