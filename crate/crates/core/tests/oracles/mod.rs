//! Independent reference computations used by the integration and
//! acceptance tests. Nothing here calls into the code paths it checks.
#![allow(dead_code)]

/// Direct double-loop NT-Xent: no log-sum-exp, no matrix products.
pub fn nt_xent_naive(z: &[Vec<f64>], pairing: &[usize], tau: f64) -> f64 {
    let m = z.len();
    let cos = |a: &[f64], b: &[f64]| {
        let mut ab = 0.0;
        let mut aa = 0.0;
        let mut bb = 0.0;
        for i in 0..a.len() {
            ab += a[i] * b[i];
            aa += a[i] * a[i];
            bb += b[i] * b[i];
        }
        ab / (aa.sqrt() * bb.sqrt())
    };
    let mut total = 0.0;
    for k in 0..m {
        let kp = pairing[k];
        let num = (cos(&z[k], &z[kp]) / tau).exp();
        let mut den = 0.0;
        for l in 0..m {
            if l != k && l != kp {
                den += (cos(&z[k], &z[l]) / tau).exp();
            }
        }
        total += (num / den).ln();
    }
    -total / m as f64
}

/// Cyclic Jacobi eigenvalue iteration for a dense symmetric matrix.
/// Returns eigenvalues sorted in descending order.
pub fn jacobi_eigenvalues(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off += m[i][j] * m[i][j];
                }
            }
        }
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k][p];
                    let mkq = m[k][q];
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p][k];
                    let mqk = m[q][k];
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ev
}

/// Population covariance (divide by M-1, matching sample covariance) of rows.
pub fn covariance(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = x.len();
    let d = x[0].len();
    let mut mean = vec![0.0; d];
    for row in x {
        for j in 0..d {
            mean[j] += row[j] / m as f64;
        }
    }
    let mut c = vec![vec![0.0; d]; d];
    for row in x {
        for i in 0..d {
            for j in 0..d {
                c[i][j] += (row[i] - mean[i]) * (row[j] - mean[j]) / (m as f64 - 1.0);
            }
        }
    }
    c
}

/// O(n²) silhouette with the singleton-is-zero convention.
pub fn silhouette_brute(points: &[Vec<f64>], labels: &[usize]) -> Vec<f64> {
    let n = points.len();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for j in 0..n {
            if j == i {
                continue;
            }
            sums[labels[j]] += dist(&points[i], &points[j]);
            counts[labels[j]] += 1;
        }
        let own = labels[i];
        if counts[own] == 0 {
            out.push(0.0);
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let mut b = f64::INFINITY;
        for c in 0..k {
            if c != own && counts[c] > 0 {
                b = b.min(sums[c] / counts[c] as f64);
            }
        }
        out.push(if a.max(b) == 0.0 { 0.0 } else { (b - a) / a.max(b) });
    }
    out
}

/// Unrestricted single-head softmax attention `softmax(q kᵀ/√d) v`, computed
/// entry by entry.
pub fn attention_naive(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = q[0].len() as f64;
    let mut out = Vec::new();
    for qi in q {
        let scores: Vec<f64> =
            k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut row = vec![0.0; v[0].len()];
        for (j, e) in exps.iter().enumerate() {
            for (r, vv) in row.iter_mut().zip(&v[j]) {
                *r += e / z * vv;
            }
        }
        out.push(row);
    }
    out
}

/// Full-scan cosine ranking: indices sorted by descending score, ties by index.
pub fn full_scan_cosine(rows: &[Vec<f64>], query: &[f64]) -> Vec<(usize, f64)> {
    let nq = query.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut scored: Vec<(usize, f64)> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let nr = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            (i, r.iter().zip(query).map(|(a, b)| a * b).sum::<f64>() / (nr * nq))
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored
}

/// Full-scan Euclidean ranking: ascending distance, ties by index.
pub fn full_scan_euclidean(rows: &[Vec<f64>], query: &[f64]) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| (i, r.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()))
        .collect();
    scored.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    scored
}

/// Nearest-neighbour label by cosine similarity (first index wins ties).
pub fn one_nn_label<'a>(train: &[Vec<f64>], labels: &'a [String], query: &[f64]) -> &'a str {
    let best = full_scan_cosine(train, query)[0].0;
    &labels[best]
}

/// Relative error ‖a−b‖ / max(‖a‖, ‖b‖, floor).
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb).max(floor);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
