//! bfloat16 rounding and relative-error analysis of depth mappings.
//!
//! A depth `y` travels `y → g(y) → d ∈ [-1, 1] → bf16(d)`. The worst-case
//! step on `(-1, 1)` is `2^-8`; pulling it back through the normalization and
//! through `g` gives the mean relative error
//!
//! ```text
//! E(g) = 1 / (512 (y_max - y_min)) ∫ (g(y_max) - g(y_min)) / (y g'(y)) dy
//! ```
//!
//! which the square-root mapping minimizes.

use std::fmt;
use std::str::FromStr;

use crate::error::QuantError;
use crate::stats;
use crate::tensor::DenseMap;

/// Default number of Simpson intervals.
pub const DEFAULT_QUAD_NODES: usize = 100_000;

/// Percentiles used by the robust normalization.
pub const NORM_PERCENTILES: (f64, f64) = (2.0, 98.0);

const BF16_MIN_NORMAL: f64 = 1.1754943508222875e-38; // 2^-126
const BF16_OVERFLOW: f64 = 3.402823669209385e38; // 2^128

/// Rounds to the nearest bfloat16 value (ties to even). Subnormal results
/// flush to a signed zero; results at or beyond 2^128 become infinite.
pub fn bf16_round(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    // Keep 7 of the 52 stored fraction bits.
    const DROP: u32 = 45;
    let bits = x.to_bits();
    let lsb = (bits >> DROP) & 1;
    let rounded = bits.wrapping_add((1u64 << (DROP - 1)) - 1 + lsb) & !((1u64 << DROP) - 1);
    let r = f64::from_bits(rounded);
    if r.abs() < BF16_MIN_NORMAL {
        0.0f64.copysign(x)
    } else if r.abs() >= BF16_OVERFLOW {
        f64::INFINITY.copysign(x)
    } else {
        r
    }
}

/// The 16-bit encoding of a value that is already bf16-representable.
pub fn bf16_to_bits(x: f64) -> u16 {
    ((x as f32).to_bits() >> 16) as u16
}

pub fn bf16_from_bits(bits: u16) -> f64 {
    f32::from_bits((bits as u32) << 16) as f64
}

/// Distance from `bf16_round(x)` to the next representable value away from zero.
pub fn bf16_step_at(x: f64) -> f64 {
    let r = bf16_round(x).abs();
    let bits = bf16_to_bits(r);
    bf16_from_bits(bits + 1) - r
}

/// Largest bf16 grid spacing on the open interval `(-1, 1)`: the spacing
/// just below 1, i.e. on `[0.5, 1)`.
pub fn max_quant_step_unit_interval() -> f64 {
    let below_one = bf16_from_bits(bf16_to_bits(1.0) - 1);
    1.0 - below_one
}

/// Depth-to-representation mapping `g`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mapping {
    Uniform,
    Sqrt,
    Log,
    Power(f64),
}

impl Mapping {
    pub fn forward(self, y: f64) -> f64 {
        match self {
            Mapping::Uniform => y,
            Mapping::Sqrt => y.sqrt(),
            Mapping::Log => y.ln(),
            Mapping::Power(p) => y.powf(p),
        }
    }

    pub fn derivative(self, y: f64) -> f64 {
        match self {
            Mapping::Uniform => 1.0,
            Mapping::Sqrt => 0.5 / y.sqrt(),
            Mapping::Log => 1.0 / y,
            Mapping::Power(p) => p * y.powf(p - 1.0),
        }
    }

    /// `g⁻¹`. For `Sqrt` this is `z²`, which also decodes the rare negative
    /// excursions a network may produce.
    pub fn inverse(self, z: f64) -> f64 {
        match self {
            Mapping::Uniform => z,
            Mapping::Sqrt => z * z,
            Mapping::Log => z.exp(),
            Mapping::Power(p) => z.max(0.0).powf(1.0 / p),
        }
    }

    /// Derivative of `g⁻¹` at `z`.
    pub fn inverse_derivative(self, z: f64) -> f64 {
        match self {
            Mapping::Uniform => 1.0,
            Mapping::Sqrt => 2.0 * z,
            Mapping::Log => z.exp(),
            Mapping::Power(p) => {
                if z <= 0.0 {
                    0.0
                } else {
                    z.powf(1.0 / p - 1.0) / p
                }
            }
        }
    }

    fn check_defined(self) -> Result<(), QuantError> {
        match self {
            Mapping::Power(p) if !(p.is_finite() && p > 0.0) => Err(QuantError::MappingUndefined(self.to_string())),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Mapping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mapping::Uniform => f.write_str("uni"),
            Mapping::Sqrt => f.write_str("sqrt"),
            Mapping::Log => f.write_str("log"),
            Mapping::Power(p) => write!(f, "power:{p}"),
        }
    }
}

impl FromStr for Mapping {
    type Err = QuantError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "uni" | "uniform" => Ok(Mapping::Uniform),
            "sqrt" => Ok(Mapping::Sqrt),
            "log" => Ok(Mapping::Log),
            _ => {
                let p = s
                    .strip_prefix("power:")
                    .and_then(|p| p.parse::<f64>().ok())
                    .ok_or_else(|| QuantError::UnknownMapping(s.clone()))?;
                let m = Mapping::Power(p);
                m.check_defined()?;
                Ok(m)
            }
        }
    }
}

fn check_range(y_min: f64, y_max: f64) -> Result<(), QuantError> {
    if !(y_min > 0.0 && y_max > y_min && y_max.is_finite()) {
        return Err(QuantError::DegenerateRange { lo: y_min, hi: y_max });
    }
    Ok(())
}

/// Composite Simpson over `u = ln y`, where `dy = y du` turns the integrand
/// into `(g_max - g_min) / g'(y)` (constant for the uniform mapping).
pub fn analytic_error(mapping: Mapping, y_min: f64, y_max: f64, n_quad: usize) -> Result<f64, QuantError> {
    check_range(y_min, y_max)?;
    mapping.check_defined()?;
    if n_quad < 1000 {
        return Err(QuantError::TooFewNodes(n_quad));
    }
    let n = n_quad + n_quad % 2;
    let span = mapping.forward(y_max) - mapping.forward(y_min);
    let (a, b) = (y_min.ln(), y_max.ln());
    let h = (b - a) / n as f64;
    let f = |u: f64| span / mapping.derivative(u.exp());
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    let integral = acc * h / 3.0;
    let value = integral / (512.0 * (y_max - y_min));
    if !value.is_finite() || value <= 0.0 {
        return Err(QuantError::MappingUndefined(mapping.to_string()));
    }
    Ok(value)
}

/// Relative tolerance under which two grid errors count as tied.
const SCAN_TIE_RTOL: f64 = 1e-9;

/// Returns the exponent in `power_grid` minimizing the analytic error.
/// Near-ties (flat landscapes on very narrow ranges) go to the grid value
/// closest to 0.5.
pub fn optimality_scan(power_grid: &[f64], y_min: f64, y_max: f64) -> Result<f64, QuantError> {
    if !power_grid.iter().any(|&p| (p - 0.5).abs() < 1e-12) {
        return Err(QuantError::GridMissingHalf);
    }
    let errors = power_grid
        .iter()
        .map(|&p| analytic_error(Mapping::Power(p), y_min, y_max, DEFAULT_QUAD_NODES))
        .collect::<Result<Vec<_>, _>>()?;
    let best = errors.iter().copied().fold(f64::INFINITY, f64::min);
    let winner = power_grid
        .iter()
        .zip(&errors)
        .filter(|(_, &e)| e <= best * (1.0 + SCAN_TIE_RTOL))
        .map(|(&p, _)| p)
        .min_by(|a, b| (a - 0.5).abs().total_cmp(&(b - 0.5).abs()))
        .expect("grid is nonempty");
    Ok(winner)
}

/// The default sweep grid `{0.25, 0.30, …, 1.00}`.
pub fn default_power_grid() -> Vec<f64> {
    (0..=15).map(|i| 0.25 + 0.05 * i as f64).map(|p| (p * 100.0).round() / 100.0).collect()
}

/// Simulates the encode/quantize/decode chain on `depths` and returns the
/// mean of `|y_rec - y| / y`. Normalization uses the 2nd/98th percentiles of
/// `g(y)` without clamping, so only rounding contributes.
pub fn empirical_pipeline_error(mapping: Mapping, depths: &[f64]) -> Result<f64, QuantError> {
    mapping.check_defined()?;
    if let Some(&bad) = depths.iter().find(|&&y| !(y > 0.0 && y.is_finite())) {
        return Err(QuantError::NonPositiveDepth(bad));
    }
    if depths.is_empty() {
        return Err(QuantError::DegenerateRange { lo: 0.0, hi: 0.0 });
    }
    let mapped: Vec<f64> = depths.iter().map(|&y| mapping.forward(y)).collect();
    let (lo, hi) = stats::percentile_pair(&mapped, NORM_PERCENTILES.0, NORM_PERCENTILES.1);
    if !(hi > lo) {
        return Err(QuantError::DegenerateRange { lo, hi });
    }
    let width = hi - lo;
    let total: f64 = depths
        .iter()
        .zip(&mapped)
        .map(|(&y, &z)| {
            let d = ((z - lo) / width - 0.5) * 2.0;
            let q = bf16_round(d);
            let z_rec = (q / 2.0 + 0.5) * width + lo;
            (mapping.inverse(z_rec) - y).abs() / y
        })
        .sum();
    Ok(total / depths.len() as f64)
}

/// Convenience wrapper for depth maps (first channel, all pixels).
pub fn empirical_pipeline_error_map(mapping: Mapping, depth: &DenseMap) -> Result<f64, QuantError> {
    let values: Vec<f64> = (0..depth.pixels()).map(|i| depth.pixel(i)[0]).collect();
    empirical_pipeline_error(mapping, &values)
}

/// One row of the quantization analysis table.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantReport {
    pub mapping: Mapping,
    pub y_min: f64,
    pub y_max: f64,
    pub analytic_error: f64,
    pub empirical_error: Option<f64>,
    /// `analytic(Uniform) - analytic(mapping)` in percentage points.
    pub improvement_pp: f64,
}

impl QuantReport {
    pub const HEADER: &'static str = "mapping\trange\tanalytic\tempirical\timprovement_pp";

    pub fn build(
        mapping: Mapping,
        y_min: f64,
        y_max: f64,
        samples: Option<&[f64]>,
    ) -> Result<QuantReport, QuantError> {
        let analytic = analytic_error(mapping, y_min, y_max, DEFAULT_QUAD_NODES)?;
        let uniform = if mapping == Mapping::Uniform {
            analytic
        } else {
            analytic_error(Mapping::Uniform, y_min, y_max, DEFAULT_QUAD_NODES)?
        };
        let empirical = samples.map(|s| empirical_pipeline_error(mapping, s)).transpose()?;
        Ok(QuantReport {
            mapping,
            y_min,
            y_max,
            analytic_error: analytic,
            empirical_error: empirical,
            improvement_pp: (uniform - analytic) * 100.0,
        })
    }

    pub fn to_line(&self) -> String {
        let emp = self.empirical_error.map_or_else(|| "-".to_string(), |e| format!("{e:.6}"));
        format!(
            "{}\t[{}, {}]\t{:.6}\t{}\t{:.4}",
            self.mapping, self.y_min, self.y_max, self.analytic_error, emp, self.improvement_pp
        )
    }
}
