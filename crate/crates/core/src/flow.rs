//! Rectified-flow path, annealed pyramid noise and the Euler sampler.

use crate::error::{FlowError, TensorError};
use crate::rng::SeededRng;
use crate::tensor::{DenseMap, Task};

/// Conditioning tensors handed to a velocity model alongside `z_t`.
#[derive(Clone, Debug, Default)]
pub struct Conditioning {
    /// Encoded input image.
    pub image: Option<DenseMap>,
    /// Point-prompt mask (matting only).
    pub prompt: Option<DenseMap>,
}

/// Anything that predicts a velocity field.
pub trait VelocityModel {
    fn velocity(&self, z: &DenseMap, cond: &Conditioning, t: f64) -> Result<DenseMap, FlowError>;
}

impl<F> VelocityModel for F
where
    F: Fn(&DenseMap, &Conditioning, f64) -> Result<DenseMap, FlowError>,
{
    fn velocity(&self, z: &DenseMap, cond: &Conditioning, t: f64) -> Result<DenseMap, FlowError> {
        self(z, cond, t)
    }
}

/// A point on the path between `z0` (noise) and `z1` (data).
#[derive(Clone, Debug)]
pub struct FlowState {
    pub z_t: DenseMap,
    pub t: f64,
    pub z0_seed: u64,
    pub conditioning: Conditioning,
}

fn check_t(t: f64) -> Result<(), FlowError> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(FlowError::BadTimestep(t))
    }
}

/// `z_t = (1 - t) z0 + t z1`.
pub fn interpolate(z0: &DenseMap, z1: &DenseMap, t: f64) -> Result<DenseMap, FlowError> {
    check_t(t)?;
    Ok(z0.zip_map(z1, |a, b| (1.0 - t) * a + t * b)?)
}

/// Constant path velocity `z1 - z0`.
pub fn velocity_target(z0: &DenseMap, z1: &DenseMap) -> Result<DenseMap, FlowError> {
    Ok(z0.zip_map(z1, |a, b| b - a)?)
}

/// One-step endpoint estimate `z_t + (1 - t) v`.
pub fn estimate_endpoint(z_t: &DenseMap, v: &DenseMap, t: f64) -> Result<DenseMap, FlowError> {
    check_t(t)?;
    Ok(z_t.zip_map(v, |z, v| z + (1.0 - t) * v)?)
}

/// Pyramid noise whose coarse octaves fade out as `t → 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub levels: usize,
    pub persistence0: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule { levels: 4, persistence0: 0.7 }
    }
}

impl NoiseSchedule {
    pub fn persistence(&self, t: f64) -> f64 {
        self.persistence0 * (1.0 - t)
    }
}

/// Source index pairs and weights for half-pixel-centered linear resampling
/// from `n_src` to `n_dst` samples.
fn linear_weights(n_src: usize, n_dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_src as f64 / n_dst as f64;
    (0..n_dst)
        .map(|i| {
            let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_src - 1) as f64);
            let i0 = x.floor() as usize;
            let i1 = (i0 + 1).min(n_src - 1);
            (i0, i1, x - i0 as f64)
        })
        .collect()
}

/// Mean over output positions of the summed squared interpolation weights.
/// Upsampled unit-variance white noise has exactly this average variance.
fn variance_factor(weights: &[(usize, usize, f64)]) -> f64 {
    let total: f64 = weights
        .iter()
        .map(|&(i0, i1, f)| if i0 == i1 { 1.0 } else { (1.0 - f) * (1.0 - f) + f * f })
        .sum();
    total / weights.len() as f64
}

/// Sum over octaves `k` of `persistence(t)^k ×` bilinearly upsampled white
/// noise drawn at `1/2^k` resolution, divided by the analytic standard
/// deviation of that sum. With one octave, or zero persistence, the result
/// is exactly the first `h·w·c` draws of the stream.
pub fn multires_noise(
    rng: &mut SeededRng,
    shape: [usize; 3],
    schedule: &NoiseSchedule,
    t: f64,
) -> Result<DenseMap, FlowError> {
    check_t(t)?;
    let [h, w, c] = shape;
    if h == 0 || w == 0 || c == 0 {
        return Err(TensorError::EmptyTensor.into());
    }
    let p = schedule.persistence(t);
    let mut out: Vec<f64> = (0..h * w * c).map(|_| rng.gaussian()).collect();
    let mut variance = 1.0;
    for k in 1..schedule.levels.max(1) {
        let weight = p.powi(k as i32);
        if weight == 0.0 {
            break;
        }
        let div = 1usize << k;
        let (hs, ws) = (h.div_ceil(div), w.div_ceil(div));
        let coarse: Vec<f64> = (0..hs * ws * c).map(|_| rng.gaussian()).collect();
        let wy = linear_weights(hs, h);
        let wx = linear_weights(ws, w);
        variance += weight * weight * variance_factor(&wy) * variance_factor(&wx);
        for (r, &(r0, r1, fr)) in wy.iter().enumerate() {
            for (col, &(c0, c1, fc)) in wx.iter().enumerate() {
                for ch in 0..c {
                    let at = |rr: usize, cc: usize| coarse[(rr * ws + cc) * c + ch];
                    let top = at(r0, c0) * (1.0 - fc) + at(r0, c1) * fc;
                    let bottom = at(r1, c0) * (1.0 - fc) + at(r1, c1) * fc;
                    out[(r * w + col) * c + ch] += weight * (top * (1.0 - fr) + bottom * fr);
                }
            }
        }
    }
    if variance != 1.0 {
        let inv = 1.0 / variance.sqrt();
        out.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(DenseMap::from_vec(h, w, c, out, Task::Latent)?)
}

/// Integrates `dz/dt = v(z, t)` from `t = 0` to `1` on a uniform grid.
/// With `steps = 1` this is exactly `z0 + v(z0, 0)`.
pub fn euler_sample<M: VelocityModel + ?Sized>(
    model: &M,
    z0: &DenseMap,
    cond: &Conditioning,
    steps: usize,
) -> Result<DenseMap, FlowError> {
    if steps == 0 {
        return Err(FlowError::ZeroSteps);
    }
    let dt = 1.0 / steps as f64;
    let mut z = z0.clone();
    for k in 0..steps {
        let t = k as f64 / steps as f64;
        let v = model.velocity(&z, cond, t)?;
        if v.shape() != z.shape() {
            return Err(FlowError::ModelShape { expected: z.shape(), got: v.shape() });
        }
        z = z.zip_map(&v, |a, b| a + dt * b)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::gaussian_noise;

    fn ones(v: f64) -> DenseMap {
        DenseMap::filled(2, 3, 3, v, Task::Latent).unwrap()
    }

    #[test]
    fn interpolation_endpoints_and_linearity() {
        let z0 = gaussian_noise(&mut SeededRng::new(1), [2, 3, 3]).unwrap();
        let z1 = gaussian_noise(&mut SeededRng::new(2), [2, 3, 3]).unwrap();
        assert_eq!(interpolate(&z0, &z1, 0.0).unwrap().data(), z0.data());
        assert_eq!(interpolate(&z0, &z1, 1.0).unwrap().data(), z1.data());
        assert_eq!(interpolate(&ones(0.0), &ones(2.0), 0.25).unwrap().data(), ones(0.5).data());
        assert!(matches!(interpolate(&z0, &z1, 1.5), Err(FlowError::BadTimestep(_))));
    }

    #[test]
    fn velocity_examples() {
        assert!(velocity_target(&ones(1.0), &ones(1.0)).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(velocity_target(&ones(1.0), &ones(3.0)).unwrap().data(), ones(2.0).data());
        let small = DenseMap::filled(1, 1, 3, 0.0, Task::Latent).unwrap();
        assert!(velocity_target(&small, &ones(1.0)).is_err());
    }

    #[test]
    fn null_drift_returns_start() {
        let z0 = gaussian_noise(&mut SeededRng::new(5), [2, 3, 3]).unwrap();
        let zero = |z: &DenseMap, _: &Conditioning, _: f64| Ok(z.map(|_| 0.0));
        for steps in [1, 3, 10] {
            assert_eq!(euler_sample(&zero, &z0, &Conditioning::default(), steps).unwrap().data(), z0.data());
        }
        assert!(matches!(euler_sample(&zero, &z0, &Conditioning::default(), 0), Err(FlowError::ZeroSteps)));
    }

    #[test]
    fn sampler_rejects_bad_model_shape() {
        let z0 = ones(0.0);
        let bad = |_: &DenseMap, _: &Conditioning, _: f64| Ok(DenseMap::filled(1, 1, 3, 0.0, Task::Latent).unwrap());
        assert!(matches!(euler_sample(&bad, &z0, &Conditioning::default(), 1), Err(FlowError::ModelShape { .. })));
    }

    #[test]
    fn single_octave_is_white_noise() {
        let schedule = NoiseSchedule { levels: 1, persistence0: 0.9 };
        let a = multires_noise(&mut SeededRng::new(9), [8, 8, 3], &schedule, 0.3).unwrap();
        let b = gaussian_noise(&mut SeededRng::new(9), [8, 8, 3]).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn annealed_endpoint_is_white_noise() {
        let a = multires_noise(&mut SeededRng::new(9), [16, 16, 3], &NoiseSchedule::default(), 1.0).unwrap();
        let b = gaussian_noise(&mut SeededRng::new(9), [16, 16, 3]).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn odd_sizes_are_padded() {
        let n = multires_noise(&mut SeededRng::new(1), [13, 7, 1], &NoiseSchedule::default(), 0.0).unwrap();
        assert_eq!(n.shape(), [13, 7, 1]);
        assert!(n.data().iter().all(|v| v.is_finite()));
    }
}
