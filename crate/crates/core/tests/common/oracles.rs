//! Brute-force reference implementations shared by several test targets.

use ddtb::data::Image;
use ddtb::tensor::Tensor;

/// Order statistic `k` (0-based) found by counting, without sorting.
pub fn kth(values: &[f64], k: usize) -> f64 {
    for &v in values {
        let below = values.iter().filter(|&&u| u < v).count();
        let equal = values.iter().filter(|&&u| u == v).count();
        if below <= k && k < below + equal {
            return v;
        }
    }
    unreachable!()
}

pub fn percentile_oracle(values: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let a = kth(values, lo);
    a + (pos - lo as f64) * (kth(values, hi) - a)
}

/// Repeated arg-max, shallower layer on ties.
pub fn select_oracle(di: &[(usize, f64)], p: f64) -> Vec<usize> {
    let n = (p / 100.0 * di.len() as f64 - 1e-9).ceil().max(0.0) as usize;
    let mut left = di.to_vec();
    let mut out = Vec::new();
    for _ in 0..n.min(di.len()) {
        let mut best = 0;
        for i in 1..left.len() {
            if left[i].1 > left[best].1 || (left[i].1 == left[best].1 && left[i].0 < left[best].0) {
                best = i;
            }
        }
        out.push(left.remove(best).0);
    }
    out.sort_unstable();
    out
}


pub fn y_of(img: &Image, x: usize, y: usize) -> f64 {
    let p = img.pixel(x, y);
    0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
}

pub fn psnr_oracle(a: &Image, b: &Image, crop: usize) -> f64 {
    let mut se = 0.0;
    let mut n = 0.0;
    for y in crop..a.height - crop {
        for x in crop..a.width - crop {
            let d = y_of(a, x, y) - y_of(b, x, y);
            se += d * d;
            n += 1.0;
        }
    }
    10.0 * (255.0f64 * 255.0 / (se / n)).log10()
}

/// Windowed SSIM with two-pass moments.
pub fn ssim_oracle(a: &Image, b: &Image, crop: usize) -> f64 {
    let mut g = [[0.0; 11]; 11];
    let mut z = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            z += *v;
        }
    }
    let (w, h) = (a.width - 2 * crop, a.height - 2 * crop);
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let mut sum = 0.0;
    let mut count = 0.0;
    for oy in 0..=h - 11 {
        for ox in 0..=w - 11 {
            let at = |img: &Image, i: usize, j: usize| y_of(img, crop + ox + j, crop + oy + i);
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    ma += g[i][j] / z * at(a, i, j);
                    mb += g[i][j] / z * at(b, i, j);
                }
            }
            let (mut va, mut vb, mut cv) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let (da, db) = (at(a, i, j) - ma, at(b, i, j) - mb);
                    va += g[i][j] / z * da * da;
                    vb += g[i][j] / z * db * db;
                    cv += g[i][j] / z * da * db;
                }
            }
            sum += (2.0 * ma * mb + c1) * (2.0 * cv + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1.0;
        }
    }
    sum / count
}


/// Structure-transfer loss written out with explicit loops.
pub fn skt_oracle(s: &Tensor, t: &Tensor) -> f64 {
    let (n, cs, h, w) = s.dims4().unwrap();
    let ct = t.shape()[1];
    let map = |x: &Tensor, c: usize, b: usize| -> Vec<f64> {
        let mut m = vec![0.0; h * w];
        for ch in 0..c {
            for p in 0..h * w {
                let v = x.data()[(b * c + ch) * h * w + p];
                m[p] += v * v;
            }
        }
        let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-12;
        m.iter().map(|v| v / norm).collect()
    };
    let mut total = 0.0;
    for b in 0..n {
        let fs = map(s, cs, b);
        let ft = map(t, ct, b);
        total += fs.iter().zip(&ft).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    }
    total / n as f64
}
