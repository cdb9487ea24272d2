//! Flow-matching and pixel-space consistency losses with analytic gradients,
//! plus the curriculum weight that blends them.

use crate::error::LossError;
use crate::tensor::{mask_or_all, DenseMap, Mask, Task};

/// Default stabilizer in the curriculum ratio.
pub const LAMBDA_EPS: f64 = 1e-3;
/// Default trimap band radius in pixels.
pub const DEFAULT_TRIMAP_RADIUS: usize = 3;

/// A scalar loss and its gradient with respect to the prediction's data.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Mean squared error and `2 (v_pred - v_true) / numel`.
pub fn fm_loss(v_pred: &DenseMap, v_true: &DenseMap) -> Result<LossGrad, LossError> {
    v_pred.check_same_shape(v_true)?;
    let n = v_pred.numel() as f64;
    let mut value = 0.0;
    let grad = v_pred
        .data()
        .iter()
        .zip(v_true.data())
        .map(|(&p, &t)| {
            let d = p - t;
            value += d * d;
            2.0 * d / n
        })
        .collect();
    Ok(LossGrad { value: value / n, grad })
}

/// Least-squares scale and shift mapping a prediction onto ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignmentFit {
    pub scale: f64,
    pub shift: f64,
}

impl AlignmentFit {
    /// Closed-form fit of `s·ŷ + t ≈ y` over valid pixels (first channel).
    pub fn fit(pred: &DenseMap, gt: &DenseMap, mask: Option<&Mask>) -> Result<AlignmentFit, LossError> {
        let stats = FitStats::collect(pred, gt, mask)?;
        Ok(stats.fit)
    }

    pub fn apply(&self, v: f64) -> f64 {
        self.scale * v + self.shift
    }

    pub fn apply_map(&self, pred: &DenseMap) -> DenseMap {
        pred.map(|v| self.apply(v))
    }
}

struct FitStats {
    idx: Vec<usize>,
    a: Vec<f64>,
    y: Vec<f64>,
    mean_a: f64,
    s_aa: f64,
    fit: AlignmentFit,
}

impl FitStats {
    fn collect(pred: &DenseMap, gt: &DenseMap, mask: Option<&Mask>) -> Result<FitStats, LossError> {
        pred.check_same_shape(gt)?;
        let mask = mask_or_all(mask, gt)?;
        let idx: Vec<usize> = mask.indices().collect();
        if idx.len() < 2 {
            return Err(LossError::TooFewValid { needed: 2, found: idx.len() });
        }
        let a: Vec<f64> = idx.iter().map(|&i| pred.pixel(i)[0]).collect();
        let y: Vec<f64> = idx.iter().map(|&i| gt.pixel(i)[0]).collect();
        let n = a.len() as f64;
        let mean_a = a.iter().sum::<f64>() / n;
        let mean_y = y.iter().sum::<f64>() / n;
        let (mut s_aa, mut s_ay) = (0.0, 0.0);
        for (&ai, &yi) in a.iter().zip(&y) {
            s_aa += (ai - mean_a) * (ai - mean_a);
            s_ay += (ai - mean_a) * (yi - mean_y);
        }
        let scale_a = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !(s_aa > n * (1e-12 * scale_a).powi(2)) {
            return Err(LossError::DegenerateFit);
        }
        let scale = s_ay / s_aa;
        let fit = AlignmentFit { scale, shift: mean_y - scale * mean_a };
        Ok(FitStats { idx, a, y, mean_a, s_aa, fit })
    }
}

/// How the SSI loss differentiates through the alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FitGradient {
    /// `(s, t)` are functions of `ŷ` (full chain rule).
    #[default]
    Full,
    /// `(s, t)` are treated as constants.
    Constant,
}

/// Scale-and-shift invariant L1: fit `(s, t)` by least squares, then take
/// the mean of `|y - (s ŷ + t)|` over valid pixels. The L1 subgradient at 0
/// is 0.
pub fn ssi_l1_depth(
    y_hat: &DenseMap,
    y: &DenseMap,
    mask: Option<&Mask>,
    mode: FitGradient,
) -> Result<(LossGrad, AlignmentFit), LossError> {
    let st = FitStats::collect(y_hat, y, mask)?;
    let AlignmentFit { scale: s, shift: t } = st.fit;
    let n = st.a.len() as f64;
    let mut value = 0.0;
    let mut sigma = Vec::with_capacity(st.a.len());
    for (&ai, &yi) in st.a.iter().zip(&st.y) {
        let r = yi - (s * ai + t);
        value += r.abs();
        sigma.push(if r > 0.0 {
            1.0
        } else if r < 0.0 {
            -1.0
        } else {
            0.0
        });
    }
    let mut grad = vec![0.0; y_hat.numel()];
    let ch = y_hat.channels();
    let sum_sigma: f64 = sigma.iter().sum();
    let sum_sigma_a: f64 = sigma.iter().zip(&st.a).map(|(s, a)| s * a).sum();
    let mean_y = st.y.iter().sum::<f64>() / n;
    for (k, &pix) in st.idx.iter().enumerate() {
        let direct = s * sigma[k];
        let g = match mode {
            FitGradient::Constant => -direct / n,
            FitGradient::Full => {
                // ∂s/∂a_j = ((y_j - ȳ) - 2 s (a_j - ā)) / S_aa,  ∂t/∂a_j = -ā ∂s/∂a_j - s/n
                let ds = ((st.y[k] - mean_y) - 2.0 * s * (st.a[k] - st.mean_a)) / st.s_aa;
                -(direct + ds * (sum_sigma_a - st.mean_a * sum_sigma) - s / n * sum_sigma) / n
            }
        };
        grad[pix * ch] = g;
    }
    Ok((LossGrad { value: value / n, grad }, st.fit))
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn vec3(px: &[f64]) -> [f64; 3] {
    [px[0], px[1], px[2]]
}

fn normalized(v: [f64; 3], pixel: usize) -> Result<([f64; 3], f64), LossError> {
    let norm = dot(v, v).sqrt();
    if !(norm > 1e-12) || !norm.is_finite() {
        return Err(LossError::ZeroNorm(pixel));
    }
    Ok(([v[0] / norm, v[1] / norm, v[2] / norm], norm))
}

fn check_normals(n_hat: &DenseMap, n: &DenseMap) -> Result<(), LossError> {
    n_hat.check_same_shape(n)?;
    if n_hat.channels() != 3 {
        return Err(crate::error::TensorError::BadChannels(n_hat.channels()).into());
    }
    Ok(())
}

/// Angle between two vectors as `atan2(|a × b|, a · b)`.
pub fn angle_between(a: [f64; 3], b: [f64; 3]) -> f64 {
    let c = cross(a, b);
    dot(c, c).sqrt().atan2(dot(a, b))
}

/// Mean angle `atan2(‖n × n̂‖, n · n̂)` over valid pixels, with `n̂`
/// renormalized internally. The gradient stays bounded everywhere: at exact
/// collinearity the undefined cross-product direction contributes zero.
pub fn angular_loss(n_hat: &DenseMap, n: &DenseMap, mask: Option<&Mask>) -> Result<LossGrad, LossError> {
    check_normals(n_hat, n)?;
    let mask = mask_or_all(mask, n)?;
    let count = mask.count();
    if count == 0 {
        return Err(LossError::TooFewValid { needed: 1, found: 0 });
    }
    let inv_n = 1.0 / count as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; n_hat.numel()];
    for i in mask.indices() {
        let (u, norm) = normalized(vec3(n_hat.pixel(i)), i)?;
        let (g, _) = normalized(vec3(n.pixel(i)), i)?;
        let cv = cross(g, u);
        let s = dot(cv, cv).sqrt();
        let c = dot(g, u);
        value += s.atan2(c);
        let r2 = s * s + c * c;
        // dθ/du = (c / r²) ∂s/∂u - (s / r²) ∂c/∂u, with ∂s/∂u = (cv/s) × g.
        let mut du = [-s / r2 * g[0], -s / r2 * g[1], -s / r2 * g[2]];
        if s > 0.0 {
            let dir = cross([cv[0] / s, cv[1] / s, cv[2] / s], g);
            for k in 0..3 {
                du[k] += c / r2 * dir[k];
            }
        }
        // Through u = n̂ / ‖n̂‖: (I - u uᵀ) du / ‖n̂‖.
        let along = dot(u, du);
        for k in 0..3 {
            grad[i * 3 + k] = (du[k] - along * u[k]) / norm * inv_n;
        }
    }
    Ok(LossGrad { value: value * inv_n, grad })
}

/// Mean `arccos(n · n̂)` with the textbook derivative `-1/√(1 - x²)`.
/// Kept as the unstable reference; the gradient diverges as `x → ±1`.
pub fn arccos_loss_reference(n_hat: &DenseMap, n: &DenseMap) -> Result<LossGrad, LossError> {
    check_normals(n_hat, n)?;
    let count = n.pixels() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; n_hat.numel()];
    for i in 0..n.pixels() {
        let a = vec3(n_hat.pixel(i));
        let g = vec3(n.pixel(i));
        let x = dot(g, a).clamp(-1.0, 1.0);
        value += x.acos();
        let d = -1.0 / (1.0 - x * x).sqrt();
        for k in 0..3 {
            grad[i * 3 + k] = d * g[k] / count;
        }
    }
    Ok(LossGrad { value: value / count, grad })
}

/// Unknown/known partition of the pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trimap {
    height: usize,
    width: usize,
    unknown: Vec<bool>,
}

impl Trimap {
    pub fn from_unknown(height: usize, width: usize, unknown: Vec<bool>) -> Result<Self, LossError> {
        Mask::from_vec(height, width, unknown.clone())?;
        Ok(Trimap { height, width, unknown })
    }

    /// Every pixel unknown (whole-image evaluation).
    pub fn all_unknown(height: usize, width: usize) -> Self {
        Trimap { height, width, unknown: vec![true; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_unknown(&self, i: usize) -> bool {
        self.unknown[i]
    }

    pub fn unknown_count(&self) -> usize {
        self.unknown.iter().filter(|&&u| u).count()
    }

    pub fn known_count(&self) -> usize {
        self.unknown.len() - self.unknown_count()
    }

    fn check(&self, map: &DenseMap) -> Result<(), LossError> {
        if self.height != map.height() || self.width != map.width() {
            return Err(crate::error::TensorError::ShapeMismatch {
                expected: vec![map.height(), map.width()],
                got: vec![self.height, self.width],
            }
            .into());
        }
        Ok(())
    }
}

/// Binarizes at 0.5 and marks as unknown every pixel whose Euclidean
/// distance to the nearest pixel of the opposite class is at most
/// `max(radius, 1)`: pixels touching the boundary are always unknown, and a
/// straight edge yields a band `2·max(radius, 1)` pixels wide.
pub fn trimap_from_alpha(alpha: &DenseMap, radius: usize) -> Trimap {
    let (h, w) = (alpha.height(), alpha.width());
    let fg: Vec<bool> = (0..h * w).map(|i| alpha.pixel(i)[0] > 0.5).collect();
    let reach = radius.max(1) as isize;
    let r2 = reach * reach;
    let mut unknown = vec![false; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let me = fg[(r * w as isize + c) as usize];
            'search: for dr in -reach..=reach {
                for dc in -reach..=reach {
                    if dr * dr + dc * dc > r2 {
                        continue;
                    }
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                        continue;
                    }
                    if fg[(rr * w as isize + cc) as usize] != me {
                        unknown[(r * w as isize + c) as usize] = true;
                        break 'search;
                    }
                }
            }
        }
    }
    Trimap { height: h, width: w, unknown }
}

/// Per-region terms of the matting loss; `None` marks an empty region.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RegionBreakdown {
    pub unknown: Option<f64>,
    pub known: Option<f64>,
}

/// Mean L1 over the unknown band plus mean L1 over the known region,
/// each averaged separately. Operates on the first channel.
pub fn matting_region_l1(
    a_hat: &DenseMap,
    a: &DenseMap,
    trimap: &Trimap,
) -> Result<(LossGrad, RegionBreakdown), LossError> {
    a_hat.check_same_shape(a)?;
    trimap.check(a)?;
    let (nu, nk) = (trimap.unknown_count(), trimap.known_count());
    let ch = a_hat.channels();
    let mut sums = [0.0, 0.0];
    let mut grad = vec![0.0; a_hat.numel()];
    for i in 0..a.pixels() {
        let d = a_hat.pixel(i)[0] - a.pixel(i)[0];
        let (slot, count) = if trimap.is_unknown(i) { (0, nu) } else { (1, nk) };
        sums[slot] += d.abs();
        let sign = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        grad[i * ch] = sign / count as f64;
    }
    let breakdown = RegionBreakdown {
        unknown: (nu > 0).then(|| sums[0] / nu as f64),
        known: (nk > 0).then(|| sums[1] / nk as f64),
    };
    let value = breakdown.unknown.unwrap_or(0.0) + breakdown.known.unwrap_or(0.0);
    Ok((LossGrad { value, grad }, breakdown))
}

/// Curriculum weight `|L_FM| / (|L_Cons| + ε) · max(0, step / n_step - 1)`.
/// Inputs are plain numbers, so no gradient can flow through the result.
pub fn adaptive_lambda(l_fm: f64, l_cons: f64, step: u64, n_step: u64, eps: f64) -> f64 {
    let ramp = (step as f64 / n_step.max(1) as f64 - 1.0).max(0.0);
    if ramp == 0.0 {
        return 0.0;
    }
    l_fm.abs() / (l_cons.abs() + eps) * ramp
}

/// Losses recorded for one optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub task: Task,
    pub l_fm: f64,
    pub l_cons: f64,
    pub lambda: f64,
    pub total: f64,
    pub region_breakdown: Option<RegionBreakdown>,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,l_fm,l_cons,lambda,total";

    pub fn new(step: u64, task: Task, l_fm: f64, l_cons: f64, lambda: f64) -> Self {
        LossReport { step, task, l_fm, l_cons, lambda, total: l_fm + lambda * l_cons, region_breakdown: None }
    }

    pub fn to_csv_row(&self) -> String {
        format!("{},{:e},{:e},{:e},{:e}", self.step, self.l_fm, self.l_cons, self.lambda, self.total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(values: &[f64]) -> DenseMap {
        DenseMap::from_vec(1, values.len(), 1, values.to_vec(), Task::Depth).unwrap()
    }

    fn normals(v: &[[f64; 3]]) -> DenseMap {
        DenseMap::from_vec(1, v.len(), 3, v.iter().flatten().copied().collect(), Task::Normal).unwrap()
    }

    #[test]
    fn fm_examples() {
        let a = col(&[1.0, -2.0, 0.5]);
        assert_eq!(fm_loss(&a, &a).unwrap().value, 0.0);
        let b = a.map(|v| v + 1.0);
        assert_eq!(fm_loss(&b, &a).unwrap().value, 1.0);
        assert!(fm_loss(&a, &col(&[1.0])).is_err());
    }

    #[test]
    fn ssi_zero_for_affine_prediction() {
        let y = col(&[1.0, 2.0, 3.0, 4.0]);
        assert!(ssi_l1_depth(&y, &y, None, FitGradient::Full).unwrap().0.value.abs() < 1e-15);
        let p = y.map(|v| 2.0 * v + 3.0);
        assert!(ssi_l1_depth(&p, &y, None, FitGradient::Full).unwrap().0.value.abs() < 1e-14);
    }

    #[test]
    fn ssi_degenerate() {
        let y = col(&[1.0, 2.0, 3.0]);
        let flat = col(&[5.0, 5.0, 5.0]);
        assert!(matches!(ssi_l1_depth(&flat, &y, None, FitGradient::Full), Err(LossError::DegenerateFit)));
    }

    #[test]
    fn angular_examples() {
        let x = normals(&[[1.0, 0.0, 0.0]]);
        assert_eq!(angular_loss(&x, &x, None).unwrap().value, 0.0);
        let y = normals(&[[0.0, 1.0, 0.0]]);
        assert!((angular_loss(&y, &x, None).unwrap().value - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        let back = normals(&[[-1.0, 0.0, 0.0]]);
        let anti = angular_loss(&back, &x, None).unwrap();
        assert!((anti.value - std::f64::consts::PI).abs() < 1e-15);
        assert!(anti.grad.iter().all(|g| g.is_finite()));
        let zero = normals(&[[0.0, 0.0, 0.0]]);
        assert!(matches!(angular_loss(&zero, &x, None), Err(LossError::ZeroNorm(0))));
    }

    #[test]
    fn arccos_gradient_factor() {
        let g = normals(&[[0.0, 0.0, 1.0]]);
        let orth = normals(&[[1.0, 0.0, 0.0]]);
        let r = arccos_loss_reference(&orth, &g).unwrap();
        assert_eq!(r.grad, vec![0.0, 0.0, -1.0]);
        let eps = 1e-8;
        let x = 1.0 - eps;
        let near = normals(&[[(1.0f64 - x * x).sqrt(), 0.0, x]]);
        let big = arccos_loss_reference(&near, &g).unwrap();
        assert!(big.grad[2].abs() > 1e3);
    }

    #[test]
    fn matting_hand_values() {
        let a = col(&[0.0, 0.0, 0.0, 0.0]);
        let a_hat = col(&[0.2, -0.4, 0.0, 0.1]);
        let tri = Trimap::from_unknown(1, 4, vec![true, true, false, false]).unwrap();
        let (l, b) = matting_region_l1(&a_hat, &a, &tri).unwrap();
        assert!((l.value - 0.35).abs() < 1e-15);
        assert_eq!(b.unknown, Some(0.30000000000000004));
        let all = Trimap::all_unknown(1, 4);
        let (l, b) = matting_region_l1(&a.map(|v| v + 0.1), &a, &all).unwrap();
        assert!((l.value - 0.1).abs() < 1e-15);
        assert_eq!(b.known, None);
    }

    #[test]
    fn lambda_examples() {
        assert_eq!(adaptive_lambda(0.5, 0.2, 100, 100, LAMBDA_EPS), 0.0);
        assert_eq!(adaptive_lambda(0.5, 0.2, 3, 100, LAMBDA_EPS), 0.0);
        assert!((adaptive_lambda(0.5, 0.2, 200, 100, LAMBDA_EPS) - 0.5 / 0.201).abs() < 1e-12);
        assert!((adaptive_lambda(0.5, 0.0, 200, 100, LAMBDA_EPS) - 500.0).abs() < 1e-9);
    }

    #[test]
    fn trimap_edge_cases() {
        let ones = DenseMap::filled(6, 6, 1, 1.0, Task::Matting).unwrap();
        assert_eq!(trimap_from_alpha(&ones, 3).unknown_count(), 0);
        let edge = DenseMap::from_fn(5, 10, 1, Task::Matting, |_, c, _| if c >= 5 { 1.0 } else { 0.0 }).unwrap();
        let t0 = trimap_from_alpha(&edge, 0);
        for r in 0..5 {
            for c in 0..10 {
                assert_eq!(t0.is_unknown(r * 10 + c), c == 4 || c == 5);
            }
        }
    }

    #[test]
    fn report_total() {
        let r = LossReport::new(3, Task::Depth, 0.4, 2.0, 0.25);
        assert_eq!(r.total, 0.9);
        assert_eq!(r.to_csv_row().split(',').count(), 5);
    }
}
