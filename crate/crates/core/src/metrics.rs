//! Evaluation metrics for depth, normals and matting, and average ranking.

use std::collections::BTreeMap;

use crate::error::MetricError;
use crate::losses::{angle_between, AlignmentFit, Trimap};
use crate::tensor::{mask_or_all, DenseMap, Mask, Task};

pub const DELTA1_THRESHOLD: f64 = 1.25;
pub const NORMAL_THRESHOLD_DEG: f64 = 11.25;
/// Gaussian-derivative width for the gradient error.
pub const GRAD_SIGMA: f64 = 1.4;
/// Threshold sweep step for the connectivity error.
pub const CONN_STEP: f64 = 0.1;

fn valid_indices(map: &DenseMap, mask: Option<&Mask>) -> Result<Vec<usize>, MetricError> {
    let mask = mask_or_all(mask, map)?;
    let idx: Vec<usize> = mask.indices().collect();
    if idx.is_empty() {
        return Err(MetricError::NoValidPixels);
    }
    Ok(idx)
}

/// Mean `|ŷ - y| / y` of an already aligned prediction.
pub fn absrel_aligned(y_hat_align: &DenseMap, y: &DenseMap, mask: Option<&Mask>) -> Result<f64, MetricError> {
    y_hat_align.check_same_shape(y)?;
    let idx = valid_indices(y, mask)?;
    let mut total = 0.0;
    for &i in &idx {
        let gt = y.pixel(i)[0];
        if !(gt > 0.0) {
            return Err(MetricError::NonPositive(gt));
        }
        total += (y_hat_align.pixel(i)[0] - gt).abs() / gt;
    }
    Ok(total / idx.len() as f64)
}

/// Scale-shift aligns `y_hat` by least squares, then takes [`absrel_aligned`].
pub fn absrel(y_hat: &DenseMap, y: &DenseMap, mask: Option<&Mask>) -> Result<f64, MetricError> {
    let fit = AlignmentFit::fit(y_hat, y, mask)?;
    absrel_aligned(&fit.apply_map(y_hat), y, mask)
}

/// Fraction of valid pixels with `max(ŷ/y, y/ŷ) < 1.25`.
pub fn delta1(y_hat_align: &DenseMap, y: &DenseMap, mask: Option<&Mask>) -> Result<f64, MetricError> {
    y_hat_align.check_same_shape(y)?;
    let idx = valid_indices(y, mask)?;
    let mut hits = 0usize;
    for &i in &idx {
        let (p, g) = (y_hat_align.pixel(i)[0], y.pixel(i)[0]);
        if !(p > 0.0) {
            return Err(MetricError::NonPositive(p));
        }
        if !(g > 0.0) {
            return Err(MetricError::NonPositive(g));
        }
        if (p / g).max(g / p) < DELTA1_THRESHOLD {
            hits += 1;
        }
    }
    Ok(hits as f64 / idx.len() as f64)
}

/// Mean angular error in degrees and the fraction of pixels under 11.25°.
pub fn normal_metrics(n_hat: &DenseMap, n: &DenseMap, mask: Option<&Mask>) -> Result<(f64, f64), MetricError> {
    n_hat.check_same_shape(n)?;
    if n.channels() != 3 {
        return Err(crate::error::TensorError::BadChannels(n.channels()).into());
    }
    let idx = valid_indices(n, mask)?;
    let (mut sum, mut under) = (0.0, 0usize);
    for &i in &idx {
        let a = n_hat.pixel(i);
        let b = n.pixel(i);
        if a.iter().all(|&v| v == 0.0) || b.iter().all(|&v| v == 0.0) {
            return Err(MetricError::ZeroNorm(i));
        }
        let deg = angle_between([a[0], a[1], a[2]], [b[0], b[1], b[2]]).to_degrees();
        sum += deg;
        if deg < NORMAL_THRESHOLD_DEG {
            under += 1;
        }
    }
    Ok((sum / idx.len() as f64, under as f64 / idx.len() as f64))
}

/// Matting errors over the unknown region of `trimap`. SAD, Grad and Conn are
/// reported ×10⁻³.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MattingMetrics {
    pub mse: f64,
    pub mad: f64,
    pub sad: f64,
    pub grad: f64,
    pub conn: f64,
}

fn gauss(x: f64, sigma: f64) -> f64 {
    (-x * x / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// Normalized first-derivative-of-Gaussian kernel along columns, `size × size`.
fn gauss_derivative_kernel(sigma: f64) -> (usize, Vec<f64>) {
    let eps = 1e-2;
    let half = (sigma * (-2.0 * ((2.0 * std::f64::consts::PI).sqrt() * sigma * eps).ln()).sqrt()).ceil() as isize;
    let size = (2 * half + 1) as usize;
    let mut k = Vec::with_capacity(size * size);
    for i in 0..size as isize {
        for j in 0..size as isize {
            let (u, v) = ((i - half) as f64, (j - half) as f64);
            k.push(gauss(u, sigma) * (-v * gauss(v, sigma) / (sigma * sigma)));
        }
    }
    let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
    k.iter_mut().for_each(|v| *v /= norm);
    (size, k)
}

/// Gradient magnitude from Gaussian-derivative filters with replicated borders.
fn gauss_gradient_magnitude(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let (size, kx) = gauss_derivative_kernel(sigma);
    let half = (size / 2) as isize;
    let at = |r: isize, c: isize| img[(r.clamp(0, h as isize - 1) as usize) * w + c.clamp(0, w as isize - 1) as usize];
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h as isize {
        for c in 0..w as isize {
            let (mut gx, mut gy) = (0.0, 0.0);
            for i in 0..size as isize {
                for j in 0..size as isize {
                    let kv = kx[(i * size as isize + j) as usize];
                    // kx varies along columns; its transpose along rows.
                    gx += kv * at(r + i - half, c + j - half);
                    gy += kv * at(r + j - half, c + i - half);
                }
            }
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}

/// Largest 4-connected component of `on`.
fn largest_component(on: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut label = vec![0usize; on.len()];
    let mut best = (0usize, 0usize);
    let mut next = 0usize;
    let mut stack = Vec::new();
    for start in 0..on.len() {
        if !on[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        stack.push(start);
        let mut size = 0;
        while let Some(p) = stack.pop() {
            size += 1;
            let (r, c) = (p / w, p % w);
            let mut visit = |q: usize| {
                if on[q] && label[q] == 0 {
                    label[q] = next;
                    stack.push(q);
                }
            };
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < w {
                visit(p + 1);
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    label.iter().map(|&l| best.0 != 0 && l == best.0).collect()
}

fn connectivity_error(pred: &[f64], gt: &[f64], region: &Trimap, h: usize, w: usize, step: f64) -> f64 {
    let n_steps = (1.0 / step).round() as usize;
    let mut round_down = vec![-1.0; pred.len()];
    for i in 1..=n_steps {
        let thresh = i as f64 * step;
        let both: Vec<bool> = pred.iter().zip(gt).map(|(&p, &g)| p >= thresh && g >= thresh).collect();
        let omega = largest_component(&both, h, w);
        for k in 0..pred.len() {
            if round_down[k] == -1.0 && !omega[k] {
                round_down[k] = (i - 1) as f64 * step;
            }
        }
    }
    let phi = |v: f64, l: f64| {
        let d = v - if l == -1.0 { 1.0 } else { l };
        1.0 - if d >= 0.15 { d } else { 0.0 }
    };
    (0..pred.len())
        .filter(|&k| region.is_unknown(k))
        .map(|k| (phi(pred[k], round_down[k]) - phi(gt[k], round_down[k])).abs())
        .sum()
}

pub fn matting_metrics(a_hat: &DenseMap, a: &DenseMap, region: &Trimap) -> Result<MattingMetrics, MetricError> {
    a_hat.check_same_shape(a)?;
    let (h, w) = (a.height(), a.width());
    if region.height() != h || region.width() != w {
        return Err(crate::error::TensorError::ShapeMismatch {
            expected: vec![h, w],
            got: vec![region.height(), region.width()],
        }
        .into());
    }
    let pred: Vec<f64> = (0..h * w).map(|i| a_hat.pixel(i)[0]).collect();
    let gt: Vec<f64> = (0..h * w).map(|i| a.pixel(i)[0]).collect();
    if let Some(&bad) = pred.iter().chain(&gt).find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(MetricError::RangeViolation(bad));
    }
    let n = region.unknown_count();
    if n == 0 {
        return Err(MetricError::NoValidPixels);
    }
    let (mut se, mut ae) = (0.0, 0.0);
    for k in (0..h * w).filter(|&k| region.is_unknown(k)) {
        let d = pred[k] - gt[k];
        se += d * d;
        ae += d.abs();
    }
    let gp = gauss_gradient_magnitude(&pred, h, w, GRAD_SIGMA);
    let gg = gauss_gradient_magnitude(&gt, h, w, GRAD_SIGMA);
    let grad: f64 = (0..h * w).filter(|&k| region.is_unknown(k)).map(|k| (gp[k] - gg[k]).powi(2)).sum();
    let conn = connectivity_error(&pred, &gt, region, h, w, CONN_STEP);
    Ok(MattingMetrics {
        mse: se / n as f64,
        mad: ae / n as f64,
        sad: ae * 1e-3,
        grad: grad * 1e-3,
        conn: conn * 1e-3,
    })
}

/// Metric values for one image or an aggregate.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub task: Task,
    pub metrics: BTreeMap<String, f64>,
    pub count: usize,
}

impl EvalResult {
    pub fn new(task: Task) -> Self {
        EvalResult { task, metrics: BTreeMap::new(), count: 1 }
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.metrics.insert(name.to_string(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    /// Unweighted per-image mean of each metric.
    pub fn aggregate(task: Task, results: &[EvalResult]) -> EvalResult {
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        for r in results {
            for (k, v) in &r.metrics {
                *sums.entry(k.clone()).or_default() += v;
            }
        }
        let n = results.len().max(1) as f64;
        EvalResult {
            task,
            metrics: sums.into_iter().map(|(k, v)| (k, v / n)).collect(),
            count: results.len(),
        }
    }

    pub fn csv_header(&self) -> String {
        let names: Vec<&str> = self.metrics.keys().map(String::as_str).collect();
        format!("image,{}", names.join(","))
    }

    pub fn csv_row(&self, label: &str) -> String {
        let vals: Vec<String> = self.metrics.values().map(|v| format!("{v:.6}")).collect();
        format!("{label},{}", vals.join(","))
    }
}

/// Whether larger or smaller values win a column.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    LowerIsBetter,
    HigherIsBetter,
}

/// Methods × columns score table; `None` marks a missing entry.
#[derive(Clone, Debug)]
pub struct RankTable {
    pub methods: Vec<String>,
    pub directions: Vec<Direction>,
    pub values: Vec<Vec<Option<f64>>>,
}

/// Average rank per method. Each column is ranked independently (1 = best)
/// with ties sharing the mean of their rank positions; missing entries rank
/// after every present entry and tie among themselves.
pub fn avg_rank(table: &RankTable) -> Result<Vec<f64>, MetricError> {
    let m = table.methods.len();
    if m < 2 {
        return Err(MetricError::TooFewMethods);
    }
    let mut totals = vec![0.0; m];
    for (col, dir) in table.directions.iter().enumerate() {
        let key = |i: usize| -> Option<f64> {
            table.values[i][col].map(|v| if *dir == Direction::HigherIsBetter { -v } else { v })
        };
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| match (key(a), key(b)) {
            (Some(x), Some(y)) => x.total_cmp(&y),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        });
        let mut pos = 0;
        while pos < m {
            let mut end = pos + 1;
            while end < m && key(order[end]) == key(order[pos]) {
                end += 1;
            }
            // Positions pos..end (0-based) share the mean of ranks pos+1..=end.
            let shared = (pos + 1 + end) as f64 / 2.0;
            for &i in &order[pos..end] {
                totals[i] += shared;
            }
            pos = end;
        }
    }
    let cols = table.directions.len().max(1) as f64;
    Ok(totals.into_iter().map(|t| t / cols).collect())
}
