use std::io::Write;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    /// Iterations run with exaggerated affinities and the lower momentum.
    pub exaggeration_iterations: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 5.0,
            iterations: 1000,
            learning_rate: 100.0,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneResult {
    pub embedding: Vec<[f64; 2]>,
    /// Entropy in bits of each point's conditional distribution.
    pub entropies: Vec<f64>,
    /// KL(P || Q) at the random initial layout.
    pub initial_kl: f64,
    pub final_kl: f64,
}

const ENTROPY_TOL: f64 = 1e-6;
const MAX_BISECTIONS: usize = 200;

/// Conditional distribution of row `i` at precision `beta`, and its entropy
/// in bits.
fn conditional(d2: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    // shift by the nearest neighbour so the exponentials cannot all underflow
    let dmin = d2
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    let mut z = 0.0;
    for (j, (o, &d)) in out.iter_mut().zip(d2).enumerate() {
        *o = if j == i { 0.0 } else { (-(d - dmin) * beta).exp() };
        z += *o;
    }
    let mut h = 0.0;
    for o in out.iter_mut() {
        *o /= z;
        if *o > 0.0 {
            h -= *o * o.log2();
        }
    }
    h
}

/// Bisects the Gaussian precision of every point until its conditional
/// entropy is `log2(perplexity)`.
fn affinities(x: &[Vec<f64>], perplexity: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = x.len();
    let target = perplexity.log2();
    let mut p = vec![0.0; n * n];
    let mut entropies = vec![0.0; n];
    let mut d2 = vec![0.0; n];
    for i in 0..n {
        for (j, d) in d2.iter_mut().enumerate() {
            *d = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
        }
        let row = &mut p[i * n..(i + 1) * n];
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        let mut beta = 1.0;
        let mut h = conditional(&d2, i, beta, row);
        for _ in 0..MAX_BISECTIONS {
            if (h - target).abs() <= ENTROPY_TOL {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
            h = conditional(&d2, i, beta, row);
        }
        if !h.is_finite() {
            return Err(Error::NonFinite(format!("t-SNE entropy of point {i}")));
        }
        entropies[i] = h;
    }
    let mut sym = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sym[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-300);
            }
        }
    }
    Ok((sym, entropies))
}

/// Student-t kernel numerators and their sum.
fn kernel(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    let mut z = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let v = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = v;
                z += v;
            }
        }
    }
    (num, z)
}

fn kl(p: &[f64], y: &[[f64; 2]]) -> f64 {
    let (num, z) = kernel(y);
    let n = y.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            let pij = p[i * n + j];
            if i != j && pij > 0.0 {
                s += pij * (pij / (num[i * n + j] / z).max(1e-300)).ln();
            }
        }
    }
    s
}

/// Exact t-SNE to two dimensions. Single-threaded and deterministic given
/// the seed.
pub fn tsne(x: &[Vec<f64>], config: &TsneConfig) -> Result<TsneResult> {
    let n = x.len();
    if n < 3 {
        return Err(Error::config("t-SNE needs at least 3 points"));
    }
    if !(config.perplexity > 1.0 && config.perplexity < n as f64) {
        return Err(Error::config(format!("perplexity must lie in (1, {n}), got {}", config.perplexity)));
    }
    let dim = x[0].len();
    if x.iter().any(|r| r.len() != dim || r.iter().any(|v| !v.is_finite())) {
        return Err(Error::config("t-SNE inputs must be finite vectors of one length"));
    }
    let (p, entropies) = affinities(x, config.perplexity)?;
    let mut rng = rng::keyed(config.seed, Stream::Tsne, 0, 0);
    let normal = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
    let initial_kl = kl(&p, &y);

    let mut velocity = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0; 2]; n];
    for it in 0..config.iterations {
        let early = it < config.exaggeration_iterations;
        let exag = if early { config.early_exaggeration } else { 1.0 };
        let momentum = if early { config.initial_momentum } else { config.final_momentum };
        let (num, z) = kernel(&y);
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = num[i * n + j];
                let m = (exag * p[i * n + j] - w / z) * w;
                g[0] += 4.0 * m * (y[i][0] - y[j][0]);
                g[1] += 4.0 * m * (y[i][1] - y[j][1]);
            }
            for d in 0..2 {
                let same_sign = (g[d] > 0.0) == (velocity[i][d] > 0.0);
                gains[i][d] = if same_sign { (gains[i][d] * 0.8f64).max(0.01) } else { gains[i][d] + 0.2 };
                velocity[i][d] = momentum * velocity[i][d] - config.learning_rate * gains[i][d] * g[d];
            }
        }
        for (yi, v) in y.iter_mut().zip(&velocity) {
            yi[0] += v[0];
            yi[1] += v[1];
        }
        let mean = y.iter().fold([0.0, 0.0], |a, v| [a[0] + v[0], a[1] + v[1]]);
        for yi in &mut y {
            yi[0] -= mean[0] / n as f64;
            yi[1] -= mean[1] / n as f64;
        }
    }
    if y.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
        return Err(Error::NonFinite("t-SNE layout".into()));
    }
    let final_kl = kl(&p, &y);
    Ok(TsneResult { embedding: y, entropies, initial_kl, final_kl })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChartPoint {
    pub x: f64,
    pub y: f64,
    pub label: usize,
    /// Position of the point within its labelled set.
    pub size_rank: usize,
}

/// Attaches labels to an embedding; `size_rank` counts points seen so far
/// with the same label.
pub fn chart_points(embedding: &[[f64; 2]], labels: &[usize]) -> Result<Vec<ChartPoint>> {
    if embedding.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} points, {} labels", embedding.len(), labels.len())));
    }
    let mut seen = std::collections::HashMap::new();
    Ok(embedding
        .iter()
        .zip(labels)
        .map(|(e, &label)| {
            let r = seen.entry(label).or_insert(0usize);
            let p = ChartPoint { x: e[0], y: e[1], label, size_rank: *r };
            *r += 1;
            p
        })
        .collect())
}

pub fn write_chart<W: Write>(w: &mut W, points: &[ChartPoint]) -> Result<()> {
    writeln!(w, "x\ty\tlabel\tsize_rank")?;
    for p in points {
        writeln!(w, "{:?}\t{:?}\t{}\t{}", p.x, p.y, p.label, p.size_rank)?;
    }
    Ok(())
}
