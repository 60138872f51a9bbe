//! Start values for the iterative fitters: one k-means-style hard assignment
//! on the proxy variables plus random responsibility draws.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, XColumn};
use crate::model::Responsibilities;

/// Deterministic per-start RNG: one ChaCha stream per start index.
pub fn start_rng(seed: u64, start: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(start);
    rng
}

/// Encodes the proxy block for k-means: continuous columns z-scored,
/// categorical columns one-hot.
fn encode_x(data: &Dataset) -> DMatrix<f64> {
    let n = data.n();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for col in data.x() {
        match col {
            XColumn::Continuous(v) => {
                let mean = v.iter().sum::<f64>() / n as f64;
                let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
                let sd = if var > 1e-24 { var.sqrt() } else { 1.0 };
                cols.push(v.iter().map(|x| (x - mean) / sd).collect());
            }
            XColumn::Categorical { levels, cardinality } => {
                for l in 0..*cardinality {
                    cols.push(levels.iter().map(|&x| if x == l { 1.0 } else { 0.0 }).collect());
                }
            }
        }
    }
    DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i])
}

/// Lloyd's algorithm with k-means++ seeding; returns hard labels.
pub fn kmeans_labels(data: &Dataset, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let points = encode_x(data);
    let (n, d) = (points.nrows(), points.ncols());
    if k == 1 || d == 0 {
        return vec![0; n];
    }
    let dist2 = |i: usize, c: &[f64]| -> f64 {
        (0..d).map(|j| (points[(i, j)] - c[j]).powi(2)).sum()
    };
    // k-means++ seeding
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.random_range(0..n);
    centers.push((0..d).map(|j| points[(first, j)]).collect());
    let mut d2: Vec<f64> = (0..n).map(|i| dist2(i, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push((0..d).map(|j| points[(pick, j)]).collect());
        for i in 0..n {
            d2[i] = d2[i].min(dist2(i, centers.last().unwrap()));
        }
    }
    // Lloyd iterations
    let mut labels = vec![0usize; n];
    for _ in 0..50 {
        let mut changed = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| dist2(i, &centers[a]).total_cmp(&dist2(i, &centers[b])))
                .unwrap();
            if best != *label {
                *label = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            for (j, cj) in center.iter_mut().enumerate() {
                *cj = members.iter().map(|&i| points[(i, j)]).sum::<f64>() / members.len() as f64;
            }
        }
    }
    labels
}

/// Random responsibilities: uniform draws normalized per row.
pub fn random_responsibilities(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Responsibilities {
    let mut t = DMatrix::zeros(n, k);
    for i in 0..n {
        let mut sum = 0.0;
        for kk in 0..k {
            let v: f64 = rng.random_range(0.05..1.0);
            t[(i, kk)] = v;
            sum += v;
        }
        for kk in 0..k {
            t[(i, kk)] /= sum;
        }
    }
    Responsibilities::new(t).expect("rows normalized by construction")
}

/// The standard start set: start 0 is a k-means hard assignment (softened so
/// no class has zero mass), the rest are random draws.
pub fn standard_starts(data: &Dataset, k: usize, n_starts: usize, seed: u64) -> Vec<Responsibilities> {
    let mut starts = Vec::with_capacity(n_starts.max(1));
    let mut rng = start_rng(seed, 0);
    let labels = kmeans_labels(data, k, &mut rng);
    starts.push(soften_hard_labels(&labels, k, 0.05));
    for s in 1..n_starts.max(1) {
        let mut rng = start_rng(seed, s as u64);
        starts.push(random_responsibilities(data.n(), k, &mut rng));
    }
    starts
}

/// Hard labels as responsibilities with probability `1 - eps` on the assigned
/// class (keeps every class at positive mass).
pub fn soften_hard_labels(labels: &[usize], k: usize, eps: f64) -> Responsibilities {
    let off = if k > 1 { eps / (k - 1) as f64 } else { 0.0 };
    let mut t = DMatrix::from_element(labels.len(), k, off);
    for (i, &l) in labels.iter().enumerate() {
        t[(i, l)] = if k > 1 { 1.0 - eps } else { 1.0 };
    }
    Responsibilities::new(t).expect("rows sum to one by construction")
}
