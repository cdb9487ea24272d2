//! Task-specific conversions between supervision maps and the model's
//! three-channel `[-1, 1]` representation.

use crate::dtf::Meta;
use crate::error::{EncodingError, QuantError, TensorError};
use crate::quant::{Mapping, NORM_PERCENTILES};
use crate::rng::SeededRng;
use crate::stats;
use crate::tensor::{mask_or_all, DenseMap, Mask, Task, ValueRange};

/// Default Gaussian width of prompt kernels, in pixels (tuned for 64×64).
pub const DEFAULT_PROMPT_SIGMA: f64 = 8.0;
pub const MAX_PROMPT_POINTS: usize = 10;

/// Percentile anchors of a depth map in mapped units (`g(y)`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthEncoding {
    pub mapping: Mapping,
    pub p_lo: f64,
    pub p_hi: f64,
}

impl DepthEncoding {
    pub fn new(mapping: Mapping, p_lo: f64, p_hi: f64) -> Result<Self, EncodingError> {
        if !(p_hi > p_lo) {
            return Err(EncodingError::DegenerateRange(p_lo));
        }
        Ok(DepthEncoding { mapping, p_lo, p_hi })
    }

    /// Normalized value of one depth, clamped to `[-1, 1]`.
    pub fn encode_value(&self, y: f64) -> f64 {
        let z = self.mapping.forward(y);
        (((z - self.p_lo) / (self.p_hi - self.p_lo) - 0.5) * 2.0).clamp(-1.0, 1.0)
    }

    /// Mapped value `z` for a normalized value `v`.
    pub fn denormalize(&self, v: f64) -> f64 {
        (v / 2.0 + 0.5) * (self.p_hi - self.p_lo) + self.p_lo
    }

    pub fn decode_value(&self, v: f64) -> f64 {
        self.mapping.inverse(self.denormalize(v))
    }

    /// `d y / d v` at normalized value `v`.
    pub fn decode_derivative(&self, v: f64) -> f64 {
        self.mapping.inverse_derivative(self.denormalize(v)) * (self.p_hi - self.p_lo) / 2.0
    }

    pub fn to_meta(&self, meta: &mut Meta) {
        meta.insert("enc_mapping".into(), self.mapping.to_string());
        meta.insert("enc_p2".into(), format!("{}", self.p_lo));
        meta.insert("enc_p98".into(), format!("{}", self.p_hi));
    }

    pub fn from_meta(meta: &Meta) -> Result<Self, EncodingError> {
        let get = |k: &str| {
            meta.get(k)
                .ok_or_else(|| TensorError::InvalidMeta(format!("missing {k}")))
                .and_then(|v| v.parse::<f64>().map_err(|_| TensorError::InvalidMeta(format!("{k}={v}"))))
        };
        let mapping = match meta.get("enc_mapping") {
            Some(m) => m.parse()?,
            None => Mapping::Sqrt,
        };
        DepthEncoding::new(mapping, get("enc_p2")?, get("enc_p98")?)
    }
}

/// Computes the percentile anchors of `g(y)` over valid pixels.
pub fn fit_depth_encoding(y: &DenseMap, mask: Option<&Mask>, mapping: Mapping) -> Result<DepthEncoding, EncodingError> {
    let mask = mask_or_all(mask, y)?;
    let mut mapped = Vec::with_capacity(mask.count());
    for i in mask.indices() {
        let v = y.pixel(i)[0];
        if !(v > 0.0 && v.is_finite()) {
            return Err(QuantError::NonPositiveDepth(v).into());
        }
        mapped.push(mapping.forward(v));
    }
    if mapped.len() < 2 {
        return Err(EncodingError::TooFewValid(mapped.len()));
    }
    let (lo, hi) = stats::percentile_pair(&mapped, NORM_PERCENTILES.0, NORM_PERCENTILES.1);
    DepthEncoding::new(mapping, lo, hi)
}

/// Encodes metric depth into three identical `[-1, 1]` channels. Pixels
/// outside the percentile band are clamped; invalid pixels encode to 0.
pub fn depth_encode(
    y: &DenseMap,
    mask: Option<&Mask>,
    mapping: Mapping,
) -> Result<(DenseMap, DepthEncoding), EncodingError> {
    let enc = fit_depth_encoding(y, mask, mapping)?;
    let mask = mask_or_all(mask, y)?;
    let single: Vec<f64> = (0..y.pixels())
        .map(|i| if mask.is_valid(i) { enc.encode_value(y.pixel(i)[0]) } else { 0.0 })
        .collect();
    let data = single.iter().flat_map(|&v| [v, v, v]).collect();
    let map = DenseMap::new(y.height(), y.width(), 3, data, Task::Depth, ValueRange::SYMMETRIC)?;
    Ok((map, enc))
}

/// Channel mean, denormalize, invert the mapping. The result is metric depth
/// up to the affine ambiguity resolved by scale-shift alignment.
pub fn depth_decode(m: &DenseMap, enc: &DepthEncoding) -> DenseMap {
    let mean = m.channel_mean();
    mean.map(|v| enc.decode_value(v))
        .with_meta(Task::Depth, ValueRange::Meters)
        .expect("meters carry no bound")
}

/// Divides every valid pixel by its L2 norm; invalid pixels become (0, 0, 1).
pub fn normal_encode(n: &DenseMap, mask: Option<&Mask>) -> Result<DenseMap, EncodingError> {
    if n.channels() != 3 {
        return Err(TensorError::BadChannels(n.channels()).into());
    }
    let mask = mask_or_all(mask, n)?;
    let mut data = Vec::with_capacity(n.numel());
    for i in 0..n.pixels() {
        if !mask.is_valid(i) {
            data.extend_from_slice(&[0.0, 0.0, 1.0]);
            continue;
        }
        let px = n.pixel(i);
        let norm = px.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(EncodingError::ZeroNorm(i));
        }
        data.extend(px.iter().map(|v| v / norm));
    }
    Ok(DenseMap::new(n.height(), n.width(), 3, data, Task::Normal, ValueRange::UnitVector)?)
}

/// Binarizes at `α > 0.5` to ±1 and replicates to three channels.
pub fn matting_encode(alpha: &DenseMap) -> Result<DenseMap, EncodingError> {
    if let Some(&bad) = alpha.data().iter().find(|&&a| !(0.0..=1.0).contains(&a)) {
        return Err(TensorError::RangeViolation(format!("alpha {bad} outside [0, 1]")).into());
    }
    let data = (0..alpha.pixels())
        .flat_map(|i| {
            let v = if alpha.pixel(i)[0] > 0.5 { 1.0 } else { -1.0 };
            [v, v, v]
        })
        .collect();
    Ok(DenseMap::new(alpha.height(), alpha.width(), 3, data, Task::Matting, ValueRange::SYMMETRIC)?)
}

/// Alpha in `[0, 1]` from a normalized single- or multi-channel prediction.
pub fn matting_decode(m: &DenseMap) -> DenseMap {
    m.channel_mean().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

/// Affine map of a declared interval onto `[-1, 1]`.
pub fn rgb_normalize(x: &DenseMap) -> Result<DenseMap, EncodingError> {
    let ValueRange::Interval { lo, hi } = x.range() else {
        return Err(EncodingError::UndeclaredRange(format!("{:?}", x.range())));
    };
    if !(hi > lo) {
        return Err(EncodingError::UndeclaredRange(format!("[{lo}, {hi}]")));
    }
    let out = x.map(|v| 2.0 * (v - lo) / (hi - lo) - 1.0);
    Ok(out.with_meta(x.task(), ValueRange::SYMMETRIC)?)
}

/// Inverse of [`rgb_normalize`] onto `[lo, hi]`.
pub fn rgb_denormalize(x: &DenseMap, lo: f64, hi: f64) -> Result<DenseMap, EncodingError> {
    let out = x.map(|v| (v + 1.0) / 2.0 * (hi - lo) + lo);
    Ok(out.with_meta(x.task(), ValueRange::Interval { lo, hi })?)
}

/// Simulated user clicks for interactive matting.
#[derive(Clone, Debug, PartialEq)]
pub struct PointPrompt {
    pub points: Vec<(usize, usize)>,
    pub sigma: f64,
}

impl PointPrompt {
    pub fn validate(&self, height: usize, width: usize) -> Result<(), EncodingError> {
        let ok = !self.points.is_empty()
            && self.points.len() <= MAX_PROMPT_POINTS
            && self.sigma > 0.0
            && self.points.iter().all(|&(r, c)| r < height && c < width);
        if ok {
            Ok(())
        } else {
            Err(EncodingError::InvalidPrompt)
        }
    }

    /// Draws `1..=10` distinct points uniformly from pixels with `α > 0.9`.
    /// Returns `None` when no pixel qualifies.
    pub fn sample_from_alpha(rng: &mut SeededRng, alpha: &DenseMap, sigma: f64) -> Option<PointPrompt> {
        let mut candidates: Vec<usize> = (0..alpha.pixels()).filter(|&i| alpha.pixel(i)[0] > 0.9).collect();
        if candidates.is_empty() {
            return None;
        }
        let count = (1 + rng.below(MAX_PROMPT_POINTS)).min(candidates.len());
        // Partial Fisher–Yates.
        for i in 0..count {
            let j = i + rng.below(candidates.len() - i);
            candidates.swap(i, j);
        }
        let points = candidates[..count].iter().map(|&i| (i / alpha.width(), i % alpha.width())).collect();
        Some(PointPrompt { points, sigma })
    }

    pub fn to_meta(&self, meta: &mut Meta) {
        let pts: Vec<String> = self.points.iter().map(|(r, c)| format!("{r}:{c}")).collect();
        meta.insert("points".into(), pts.join(";"));
        meta.insert("sigma".into(), format!("{}", self.sigma));
    }

    pub fn from_meta(meta: &Meta) -> Result<Option<PointPrompt>, EncodingError> {
        let Some(raw) = meta.get("points") else { return Ok(None) };
        if raw.is_empty() {
            return Ok(None);
        }
        let bad = || EncodingError::Tensor(TensorError::InvalidMeta(format!("points={raw}")));
        let points = raw
            .split(';')
            .map(|p| {
                let (r, c) = p.split_once(':').ok_or_else(bad)?;
                Ok((r.parse().map_err(|_| bad())?, c.parse().map_err(|_| bad())?))
            })
            .collect::<Result<Vec<_>, EncodingError>>()?;
        let sigma = meta.get("sigma").and_then(|s| s.parse().ok()).unwrap_or(DEFAULT_PROMPT_SIGMA);
        Ok(Some(PointPrompt { points, sigma }))
    }
}

/// Max-combined Gaussian bumps at the prompt points, mapped to `[-1, 1]`.
pub fn point_prompt_mask(prompt: &PointPrompt, height: usize, width: usize) -> Result<DenseMap, EncodingError> {
    prompt.validate(height, width)?;
    let two_s2 = 2.0 * prompt.sigma * prompt.sigma;
    let map = DenseMap::from_fn(height, width, 1, Task::Matting, |r, c, _| {
        let peak = prompt
            .points
            .iter()
            .map(|&(pr, pc)| {
                let dr = r as f64 - pr as f64;
                let dc = c as f64 - pc as f64;
                (-(dr * dr + dc * dc) / two_s2).exp()
            })
            .fold(0.0, f64::max);
        peak * 2.0 - 1.0
    })?;
    Ok(map.with_meta(Task::Matting, ValueRange::SYMMETRIC)?)
}
