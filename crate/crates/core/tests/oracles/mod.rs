//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use gscnn::data::ImageLabel;

/// Direct quadruple-loop cross-correlation in f64. `x` is `(n, h, w, cin)`,
/// `w` is `(kh, kw, cin, cout)`; returns `(n, oh, ow, cout)` row-major.
pub fn naive_conv(
    x: &[f64],
    (n, h, wd, cin): (usize, usize, usize, usize),
    w: &[f64],
    (kh, kw, cout): (usize, usize, usize),
    b: &[f64],
    (ph, pw): (usize, usize),
) -> Vec<f64> {
    let oh = h + 2 * ph - kh + 1;
    let ow = wd + 2 * pw - kw + 1;
    let mut out = vec![0.0; n * oh * ow * cout];
    for s in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = b[co];
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = oy as isize + dy as isize - ph as isize;
                            let ix = ox as isize + dx as isize - pw as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let xv = x[((s * h + iy as usize) * wd + ix as usize) * cin + ci];
                                let wv = w[((dy * kw + dx) * cin + ci) * cout + co];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((s * oh + oy) * ow + ox) * cout + co] = acc;
                }
            }
        }
    }
    out
}

/// Brute-force single-query ranking. Instead of sorting, the rank of every
/// gallery entry is counted as one plus the number of valid entries that
/// beat it (smaller distance, or equal distance at a smaller index).
pub struct OracleRanking {
    /// Number of queries whose first match has 1-based rank exactly `k`.
    pub first_hits: Vec<usize>,
    pub ap: Vec<f64>,
    pub excluded: usize,
}

pub fn brute_force_ranking(values: &[f64], query: &[ImageLabel], gallery: &[ImageLabel]) -> OracleRanking {
    let cols = gallery.len();
    let mut first_hits = vec![0usize; cols + 1];
    let mut ap = Vec::new();
    let mut excluded = 0;
    for (i, q) in query.iter().enumerate() {
        let row = &values[i * cols..(i + 1) * cols];
        let valid = |j: usize| !(gallery[j].identity == q.identity && gallery[j].camera == q.camera);
        let rank_of = |j: usize| {
            1 + (0..cols)
                .filter(|&k| valid(k) && (row[k] < row[j] || (row[k] == row[j] && k < j)))
                .count()
        };
        let mut match_ranks: Vec<usize> = (0..cols)
            .filter(|&j| valid(j) && gallery[j].identity == q.identity)
            .map(rank_of)
            .collect();
        // summing in rank order makes the floating-point result reproducible
        match_ranks.sort_unstable();
        if match_ranks.is_empty() {
            excluded += 1;
            continue;
        }
        first_hits[*match_ranks.iter().min().unwrap()] += 1;
        let mut precisions = 0.0;
        for &r in &match_ranks {
            let better_or_equal = match_ranks.iter().filter(|&&o| o <= r).count();
            precisions += better_or_equal as f64 / r as f64;
        }
        ap.push(precisions / match_ranks.len() as f64);
    }
    OracleRanking {
        first_hits,
        ap,
        excluded,
    }
}

impl OracleRanking {
    /// CMC at 1-based rank `k`.
    pub fn cmc(&self, k: usize) -> f64 {
        let n = self.ap.len();
        if n == 0 {
            return 0.0;
        }
        self.first_hits[..=k].iter().sum::<usize>() as f64 / n as f64
    }

    pub fn map(&self) -> f64 {
        if self.ap.is_empty() {
            0.0
        } else {
            self.ap.iter().sum::<f64>() / self.ap.len() as f64
        }
    }
}

/// Pixelwise mean by one streaming running-average pass (Welford style).
pub fn streaming_mean(images: &[Vec<f64>]) -> Vec<f64> {
    let mut mean = vec![0.0; images[0].len()];
    for (k, img) in images.iter().enumerate() {
        for (m, v) in mean.iter_mut().zip(img) {
            *m += (v - *m) / (k + 1) as f64;
        }
    }
    mean
}
