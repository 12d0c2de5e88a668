//! Brute-force references shared by the integration tests. Everything here
//! is written as plain index loops, independent of the library's matrix
//! kernels.

#![allow(dead_code, clippy::needless_range_loop)]

use cacgen_core::attention::AttentionLayerParams;
use cacgen_core::numerics::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// `maps[h][j][k]`
pub type Maps = Vec<Vec<Vec<f64>>>;

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Pre-control softmax maps of every head.
pub fn naive_maps(z: &Matrix, keys_in: &Matrix, p: &AttentionLayerParams) -> Maps {
    let (pixels, n, d) = (z.rows(), keys_in.rows(), p.query_dim);
    let mut maps = Vec::new();
    for h in 0..p.heads {
        let mut head = vec![vec![0.0; n]; pixels];
        for j in 0..pixels {
            let mut logits = vec![0.0; n];
            for (k, logit) in logits.iter_mut().enumerate() {
                let mut s = 0.0;
                for a in 0..d {
                    let col = h * d + a;
                    let mut q = 0.0;
                    for i in 0..p.model_dim {
                        q += z.get(j, i) * p.w_q.get(i, col);
                    }
                    let mut kk = 0.0;
                    for i in 0..p.key_in_dim {
                        kk += keys_in.get(k, i) * p.w_k.get(i, col);
                    }
                    s += q * kk;
                }
                *logit = s / (d as f64).sqrt();
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            for k in 0..n {
                head[j][k] = (logits[k] - max).exp() / total;
            }
        }
        maps.push(head);
    }
    maps
}

/// `l_O(concat_h(M_h V_h))` for already-controlled maps.
pub fn naive_output(maps: &Maps, keys_in: &Matrix, p: &AttentionLayerParams) -> Vec<Vec<f64>> {
    let pixels = maps[0].len();
    let n = keys_in.rows();
    let dv = p.value_dim;
    let mut out = vec![vec![0.0; p.model_dim]; pixels];
    for (h, head) in maps.iter().enumerate() {
        for j in 0..pixels {
            for a in 0..dv {
                let col = h * dv + a;
                let mut mv = 0.0;
                for k in 0..n {
                    let mut v = 0.0;
                    for i in 0..p.key_in_dim {
                        v += keys_in.get(k, i) * p.w_v.get(i, col);
                    }
                    mv += head[j][k] * v;
                }
                for o in 0..p.model_dim {
                    out[j][o] += mv * p.w_o.get(col, o);
                }
            }
        }
    }
    out
}

/// Masked and weighted maps: `M[j,k]·λ_k·B[j,k]`, rows optionally
/// renormalized.
pub fn naive_control(maps: &Maps, lambdas: &[f64], mask: &[Vec<f64>], renormalize: bool) -> Maps {
    maps.iter()
        .map(|head| {
            head.iter()
                .enumerate()
                .map(|(j, row)| {
                    let mut r: Vec<f64> = row
                        .iter()
                        .enumerate()
                        .map(|(k, m)| m * lambdas[k] * mask[j][k])
                        .collect();
                    if renormalize {
                        let s: f64 = r.iter().sum();
                        if s > 0.0 {
                            r.iter_mut().for_each(|v| *v /= s);
                        }
                    }
                    r
                })
                .collect()
        })
        .collect()
}

pub fn max_diff_rows(a: &Matrix, b: &[Vec<f64>]) -> f64 {
    let mut m: f64 = 0.0;
    for (j, row) in b.iter().enumerate() {
        for (k, v) in row.iter().enumerate() {
            m = m.max((a.get(j, k) - v).abs());
        }
    }
    m
}

/// Largest difference between a record's maps and reference maps.
pub fn max_diff_maps(rec: &cacgen_core::attention::AttentionRecord, maps: &Maps) -> f64 {
    let mut m: f64 = 0.0;
    for (h, head) in maps.iter().enumerate() {
        for (j, row) in head.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                m = m.max((rec.get(h, j, k) - v).abs());
            }
        }
    }
    m
}

/// Unbiased MMD² with the cubic polynomial kernel, as a double loop.
pub fn naive_kid(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let k = |x: &[f64], y: &[f64]| {
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        (dot / x.len() as f64 + 1.0).powi(3)
    };
    let within = |s: &[Vec<f64>]| {
        let n = s.len() as f64;
        let mut t = 0.0;
        for (i, x) in s.iter().enumerate() {
            for (j, y) in s.iter().enumerate() {
                if i != j {
                    t += k(x, y);
                }
            }
        }
        t / (n * (n - 1.0))
    };
    let mut cross = 0.0;
    for x in a {
        for y in b {
            cross += k(x, y);
        }
    }
    within(a) + within(b) - 2.0 * cross / (a.len() * b.len()) as f64
}

/// Box area overlap by counting unit cells of integer boxes.
pub fn pixel_iou(a: [i64; 4], b: [i64; 4]) -> f64 {
    let inside = |bx: [i64; 4], x: i64, y: i64| x >= bx[0] && x < bx[2] && y >= bx[1] && y < bx[3];
    let (mut inter, mut union) = (0, 0);
    for y in a[1].min(b[1])..a[3].max(b[3]) {
        for x in a[0].min(b[0])..a[2].max(b[2]) {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as i64;
            union += (ia || ib) as i64;
        }
    }
    inter as f64 / union as f64
}
