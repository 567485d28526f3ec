//! Straight-from-definition reference computations for tests. Everything
//! here favors obviousness over speed and shares no code with the library.

use ndarray::{Array2, Array3};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn row(z: &Array2<f64>, i: usize) -> Vec<f64> {
    z.row(i).to_vec()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b))
}

/// NT-Xent over rows paired as `(0,1), (2,3), ...`; mean over every anchor.
pub fn ntxent(z: &Array2<f64>, tau: f64) -> f64 {
    let n = z.nrows();
    let mut total = 0.0;
    for a in 0..n {
        let pos = a ^ 1;
        let za = row(z, a);
        let mut denom = 0.0;
        for k in 0..n {
            if k != a {
                denom += (cosine(&za, &row(z, k)) / tau).exp();
            }
        }
        total += -(cosine(&za, &row(z, pos)) / tau) + denom.ln();
    }
    total / n as f64
}

/// Mean over rows of `2 - 2 cos(p_i, t_i)`.
pub fn byol(p: &Array2<f64>, t: &Array2<f64>) -> f64 {
    let n = p.nrows();
    (0..n).map(|i| 2.0 - 2.0 * cosine(&row(p, i), &row(t, i))).sum::<f64>() / n as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Vicreg {
    pub invariance: f64,
    pub variance: f64,
    pub covariance: f64,
}

fn column(z: &Array2<f64>, j: usize) -> Vec<f64> {
    z.column(j).to_vec()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn branch(z: &Array2<f64>, gamma: f64, eps: f64) -> (f64, f64) {
    let (n, d) = z.dim();
    let cols: Vec<Vec<f64>> = (0..d).map(|j| column(z, j)).collect();
    let means: Vec<f64> = cols.iter().map(|c| mean(c)).collect();
    let mut var = 0.0;
    for j in 0..d {
        let s2 = cols[j].iter().map(|x| (x - means[j]).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        var += (gamma - (s2 + eps).sqrt()).max(0.0);
    }
    let mut cov = 0.0;
    for a in 0..d {
        for b in 0..d {
            if a == b {
                continue;
            }
            let c = (0..n)
                .map(|i| (cols[a][i] - means[a]) * (cols[b][i] - means[b]))
                .sum::<f64>()
                / (n as f64 - 1.0);
            cov += c * c;
        }
    }
    (var / d as f64, cov / d as f64)
}

/// The three VICReg terms, each averaged over the two branches where it is
/// per-branch.
pub fn vicreg(z1: &Array2<f64>, z2: &Array2<f64>, gamma: f64, eps: f64) -> Vicreg {
    let (n, d) = z1.dim();
    let mut inv = 0.0;
    for i in 0..n {
        for j in 0..d {
            inv += (z1[[i, j]] - z2[[i, j]]).powi(2);
        }
    }
    let (v1, c1) = branch(z1, gamma, eps);
    let (v2, c2) = branch(z2, gamma, eps);
    Vicreg {
        invariance: inv / (n * d) as f64,
        variance: (v1 + v2) / 2.0,
        covariance: (c1 + c2) / 2.0,
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn fd_gradient(x: &Array2<f64>, h: f64, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut g = Array2::zeros(x.dim());
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let (i, j) = (idx / x.ncols(), idx % x.ncols());
        let orig = xp[[i, j]];
        xp[[i, j]] = orig + h;
        let up = f(&xp);
        xp[[i, j]] = orig - h;
        let down = f(&xp);
        xp[[i, j]] = orig;
        g[[i, j]] = (up - down) / (2.0 * h);
    }
    g
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over entries.
pub fn max_rel_err(a: &Array2<f64>, b: &Array2<f64>, floor: f64) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// `2|A n B| / (|A| + |B|)`, with two empty masks scoring 1.
pub fn dice(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    let mut inter = 0usize;
    let mut na = 0usize;
    let mut nb = 0usize;
    for (&x, &y) in a.iter().zip(b.iter()) {
        inter += usize::from(x && y);
        na += usize::from(x);
        nb += usize::from(y);
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

fn points(m: &Array2<bool>) -> Vec<(f64, f64)> {
    m.indexed_iter()
        .filter(|(_, &v)| v)
        .map(|((r, c), _)| (r as f64, c as f64))
        .collect()
}

fn directed(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    a.iter()
        .map(|p| {
            b.iter()
                .map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

/// Symmetric Hausdorff distance over every pixel pair. Both empty gives 0,
/// exactly one empty gives `cap`.
pub fn hausdorff(a: &Array2<bool>, b: &Array2<bool>, cap: f64) -> f64 {
    let (pa, pb) = (points(a), points(b));
    match (pa.is_empty(), pb.is_empty()) {
        (true, true) => 0.0,
        (true, false) | (false, true) => cap,
        _ => directed(&pa, &pb).max(directed(&pb, &pa)),
    }
}

fn origins(extent: usize, size: usize, stride: usize) -> Vec<usize> {
    let mut o = Vec::new();
    let mut x = 0;
    while x + size <= extent {
        o.push(x);
        x += stride;
    }
    if *o.last().unwrap() + size < extent {
        o.push(extent - size);
    }
    o
}

/// Per-pixel average of every window prediction that covers the pixel.
pub fn stitch(
    image: &Array2<f32>,
    h: usize,
    w: usize,
    s: usize,
    classes: usize,
    predict: impl Fn(&Array2<f32>) -> Array3<f32>,
) -> Array3<f64> {
    let (ih, iw) = image.dim();
    let mut sum = Array3::<f64>::zeros((classes, ih, iw));
    let mut count = Array2::<f64>::zeros((ih, iw));
    for &top in &origins(ih, h, s) {
        for &left in &origins(iw, w, s) {
            let patch = Array2::from_shape_fn((h, w), |(r, c)| image[[top + r, left + c]]);
            let out = predict(&patch);
            for k in 0..classes {
                for r in 0..h {
                    for c in 0..w {
                        sum[[k, top + r, left + c]] += out[[k, r, c]] as f64;
                    }
                }
            }
            for r in 0..h {
                for c in 0..w {
                    count[[top + r, left + c]] += 1.0;
                }
            }
        }
    }
    for k in 0..classes {
        for r in 0..ih {
            for c in 0..iw {
                sum[[k, r, c]] /= count[[r, c]];
            }
        }
    }
    sum
}

/// Pearson chi-square statistic and upper-tail p-value for uniform counts.
pub fn chi_square_uniform(counts: &[u64]) -> (f64, f64) {
    let n: u64 = counts.iter().sum();
    let e = n as f64 / counts.len() as f64;
    let stat = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum::<f64>();
    let dist = ChiSquared::new((counts.len() - 1) as f64).expect("df > 0");
    (stat, 1.0 - dist.cdf(stat))
}

/// Sizes of 4-connected components of equal nonzero labels, by union-find.
pub fn component_sizes(mask: &Array2<u8>) -> Vec<usize> {
    let (h, w) = mask.dim();
    let mut parent: Vec<usize> = (0..h * w).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for r in 0..h {
        for c in 0..w {
            let v = mask[[r, c]];
            if v == 0 {
                continue;
            }
            for (rr, cc) in [(r + 1, c), (r, c + 1)] {
                if rr < h && cc < w && mask[[rr, cc]] == v {
                    let (a, b) = (find(&mut parent, r * w + c), find(&mut parent, rr * w + cc));
                    parent[a] = b;
                }
            }
        }
    }
    let mut sizes = std::collections::HashMap::new();
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] != 0 {
                *sizes.entry(find(&mut parent, r * w + c)).or_insert(0usize) += 1;
            }
        }
    }
    let mut out: Vec<usize> = sizes.into_values().collect();
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn ntxent_orthonormal_case() {
        let z = array![[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]];
        let expect = (1.0 + 2.0 * (-2.0f64).exp()).ln();
        assert!((ntxent(&z, 0.5) - expect).abs() < 1e-12);
    }

    #[test]
    fn origins_end_flush() {
        assert_eq!(origins(10, 4, 3), vec![0, 3, 6]);
        assert_eq!(origins(11, 4, 3), vec![0, 3, 6, 7]);
        assert_eq!(origins(4, 4, 3), vec![0]);
    }

    #[test]
    fn components_of_two_blobs() {
        let m = array![[1u8, 1, 0], [0, 0, 0], [0, 1, 1]];
        assert_eq!(component_sizes(&m), vec![2, 2]);
    }
}
