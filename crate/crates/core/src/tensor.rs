//! The dense image-like tensor shared by every module.

use std::fmt;
use std::str::FromStr;

use crate::error::TensorError;

/// What a map represents. Drives sidecar metadata and range validation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Depth,
    Normal,
    Matting,
    Rgb,
    Latent,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Depth => "depth",
            Task::Normal => "normal",
            Task::Matting => "matting",
            Task::Rgb => "rgb",
            Task::Latent => "latent",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "depth" => Ok(Task::Depth),
            "normal" => Ok(Task::Normal),
            "matting" => Ok(Task::Matting),
            "rgb" => Ok(Task::Rgb),
            "latent" => Ok(Task::Latent),
            other => Err(TensorError::InvalidMeta(format!("unknown task `{other}`"))),
        }
    }
}

/// Declared value range of a map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ValueRange {
    /// Values lie in the closed interval `[lo, hi]`.
    Interval { lo: f64, hi: f64 },
    /// Physical distances in meters, strictly positive where valid.
    Meters,
    /// Every pixel is a unit-length vector.
    UnitVector,
    Unspecified,
}

impl ValueRange {
    pub const SYMMETRIC: ValueRange = ValueRange::Interval { lo: -1.0, hi: 1.0 };
    pub const UNIT: ValueRange = ValueRange::Interval { lo: 0.0, hi: 1.0 };
    pub const BYTE: ValueRange = ValueRange::Interval { lo: 0.0, hi: 255.0 };
}

const RANGE_SLACK: f64 = 1e-6;
const UNIT_NORM_TOL: f64 = 1e-5;

/// Row-major `height × width × channels` real tensor with task metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
    task: Task,
    range: ValueRange,
}

impl DenseMap {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
        task: Task,
        range: ValueRange,
    ) -> Result<Self, TensorError> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(TensorError::EmptyTensor);
        }
        if channels != 1 && channels != 3 {
            return Err(TensorError::BadChannels(channels));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(TensorError::ShapeMismatch {
                expected: vec![height, width, channels],
                got: vec![data.len()],
            });
        }
        let map = DenseMap { height, width, channels, data, task, range };
        map.validate_range()?;
        Ok(map)
    }

    /// Builds a map with unspecified range (no validation beyond shape).
    pub fn from_vec(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
        task: Task,
    ) -> Result<Self, TensorError> {
        Self::new(height, width, channels, data, task, ValueRange::Unspecified)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64, task: Task) -> Result<Self, TensorError> {
        Self::from_vec(height, width, channels, vec![value; height * width * channels], task)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        task: Task,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self, TensorError> {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self::from_vec(height, width, channels, data, task)
    }

    fn validate_range(&self) -> Result<(), TensorError> {
        match self.range {
            ValueRange::Interval { lo, hi } => {
                if self.data.iter().any(|&v| v < lo - RANGE_SLACK || v > hi + RANGE_SLACK) {
                    return Err(TensorError::RangeViolation(format!("values outside [{lo}, {hi}]")));
                }
            }
            ValueRange::UnitVector => {
                for (i, px) in self.data.chunks_exact(self.channels).enumerate() {
                    let norm = px.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if (norm - 1.0).abs() > UNIT_NORM_TOL {
                        return Err(TensorError::RangeViolation(format!(
                            "pixel {i} has norm {norm}, expected unit length"
                        )));
                    }
                }
            }
            ValueRange::Meters | ValueRange::Unspecified => {}
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    /// Re-tags the map, validating the new range declaration.
    pub fn with_meta(mut self, task: Task, range: ValueRange) -> Result<Self, TensorError> {
        self.task = task;
        self.range = range;
        self.validate_range()?;
        Ok(self)
    }

    /// Same shape and metadata with new contents; range is reset to unspecified.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::from_vec(self.height, self.width, self.channels, data, self.task)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        DenseMap {
            data: self.data.iter().map(|&v| f(v)).collect(),
            range: ValueRange::Unspecified,
            ..self.clone()
        }
    }

    pub fn zip_map(&self, other: &DenseMap, f: impl Fn(f64, f64) -> f64) -> Result<Self, TensorError> {
        self.check_same_shape(other)?;
        Ok(DenseMap {
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            range: ValueRange::Unspecified,
            ..self.clone()
        })
    }

    pub fn check_same_shape(&self, other: &DenseMap) -> Result<(), TensorError> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                expected: self.shape().to_vec(),
                got: other.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Averages channels into a single-channel map.
    pub fn channel_mean(&self) -> DenseMap {
        let c = self.channels as f64;
        let data = self.data.chunks_exact(self.channels).map(|px| px.iter().sum::<f64>() / c).collect();
        DenseMap {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
            task: self.task,
            range: ValueRange::Unspecified,
        }
    }

    /// Replicates a single-channel map to three identical channels.
    pub fn replicate3(&self) -> Result<DenseMap, TensorError> {
        if self.channels != 1 {
            return Err(TensorError::BadChannels(self.channels));
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Ok(DenseMap { channels: 3, data, ..self.clone() })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Per-pixel validity flags; invalid pixels are excluded from fits and metrics.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    valid: Vec<bool>,
}

impl Mask {
    pub fn all_valid(height: usize, width: usize) -> Self {
        Mask { height, width, valid: vec![true; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, valid: Vec<bool>) -> Result<Self, TensorError> {
        if valid.len() != height * width {
            return Err(TensorError::ShapeMismatch { expected: vec![height, width], got: vec![valid.len()] });
        }
        Ok(Mask { height, width, valid })
    }

    /// Pixels whose first channel is finite and strictly positive.
    pub fn positive(map: &DenseMap) -> Self {
        let valid = (0..map.pixels()).map(|i| {
            let v = map.pixel(i)[0];
            v.is_finite() && v > 0.0
        });
        Mask { height: map.height(), width: map.width(), valid: valid.collect() }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_valid(&self, index: usize) -> bool {
        self.valid[index]
    }

    pub fn count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.valid.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i)
    }

    pub fn check_matches(&self, map: &DenseMap) -> Result<(), TensorError> {
        if self.height != map.height() || self.width != map.width() {
            return Err(TensorError::ShapeMismatch {
                expected: vec![map.height(), map.width()],
                got: vec![self.height, self.width],
            });
        }
        Ok(())
    }
}

/// Resolves an optional mask against a map, defaulting to all-valid.
pub(crate) fn mask_or_all(mask: Option<&Mask>, map: &DenseMap) -> Result<Mask, TensorError> {
    match mask {
        Some(m) => {
            m.check_matches(map)?;
            Ok(m.clone())
        }
        None => Ok(Mask::all_valid(map.height(), map.width())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        let err = DenseMap::from_vec(2, 2, 1, vec![0.0; 3], Task::Depth).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn rejects_empty_dims() {
        assert!(matches!(DenseMap::from_vec(0, 2, 1, vec![], Task::Depth), Err(TensorError::EmptyTensor)));
    }

    #[test]
    fn symmetric_range_enforced() {
        let ok = DenseMap::new(1, 2, 1, vec![-1.0, 1.0 + 5e-7], Task::Latent, ValueRange::SYMMETRIC);
        assert!(ok.is_ok());
        let bad = DenseMap::new(1, 2, 1, vec![-1.0, 1.01], Task::Latent, ValueRange::SYMMETRIC);
        assert!(matches!(bad, Err(TensorError::RangeViolation(_))));
    }

    #[test]
    fn unit_vector_range_enforced() {
        let s = 1.0 / 3f64.sqrt();
        assert!(DenseMap::new(1, 1, 3, vec![s, s, s], Task::Normal, ValueRange::UnitVector).is_ok());
        assert!(DenseMap::new(1, 1, 3, vec![0.0, 0.0, 2.0], Task::Normal, ValueRange::UnitVector).is_err());
    }

    #[test]
    fn channel_helpers() {
        let m = DenseMap::from_vec(1, 2, 1, vec![1.0, 2.0], Task::Depth).unwrap();
        let r = m.replicate3().unwrap();
        assert_eq!(r.data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert_eq!(r.channel_mean().data(), m.data());
    }
}
