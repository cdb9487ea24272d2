//! Small convolutional velocity network.
//!
//! Input channels are `z_t` (3), the encoded image (3), a constant prompt
//! channel, the point-prompt mask for matting, and sinusoidal timestep
//! features broadcast over the image. A small U-shaped stack of SiLU 3×3
//! convolutions (one level per hidden width, halving resolution per level)
//! ends in a zero-initialized 3×3 head. A zero-initialized linear skip maps
//! `z_t`, `t·z_t` and `t²·z_t` straight to the output, so the `-z_t / (1 - t)`
//! part of the velocity is cheap to learn. A fresh network predicts exactly
//! zero velocity.

use std::f64::consts::PI;

use sha2::{Digest, Sha256};

use crate::error::{FlowError, NnError};
use crate::flow::{Conditioning, VelocityModel};
use crate::quant::Mapping;
use crate::rng::SeededRng;
use crate::tensor::{DenseMap, Task};

use super::tape::{Activation, NodeId, Tape, Value};

/// Value of the constant conditioning channel that replaces a text embedding.
pub const PROMPT_CONSTANT: f64 = 1.0;
/// Output gain of the linear skip. Under Adam this is a learning-rate
/// multiplier for the skip weights.
pub const SKIP_GAIN: f64 = 10.0;
/// Powers of `t` multiplying `z_t` in the skip input.
const SKIP_POWERS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub task: Task,
    pub mapping: Mapping,
    pub hidden: Vec<usize>,
    /// Number of sinusoidal timestep channels (even).
    pub time_channels: usize,
}

impl NetConfig {
    pub fn new(task: Task, mapping: Mapping, hidden: Vec<usize>) -> Result<Self, NnError> {
        let cfg = NetConfig { task, mapping, hidden, time_channels: 4 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if !matches!(self.task, Task::Depth | Task::Normal | Task::Matting) {
            return Err(NnError::Config(format!("unsupported task {}", self.task)));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(NnError::Config(format!("hidden widths must be nonempty and positive: {:?}", self.hidden)));
        }
        if self.time_channels % 2 != 0 {
            return Err(NnError::Config("time_channels must be even".into()));
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        3 + 3 + 1 + usize::from(self.task == Task::Matting) + self.time_channels
    }

    /// Stable text form hashed into checkpoints.
    pub fn canonical(&self) -> String {
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        format!("task={};mapping={};hidden={};time={}", self.task, self.mapping, hidden.join(","), self.time_channels)
    }

    pub fn hash(&self) -> [u8; 8] {
        let digest = Sha256::digest(self.canonical().as_bytes());
        let mut out = [0u8; 8];
        out.copy_from_slice(&digest[..8]);
        out
    }
}

/// A named trainable array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityNet {
    config: NetConfig,
    params: Vec<Param>,
}

/// Tape handles from one forward pass.
pub struct Forward {
    pub tape: Tape,
    pub params: Vec<NodeId>,
    pub output: NodeId,
}

/// Sinusoidal timestep features `sin(π 4^k t), cos(π 4^k t)`.
pub fn time_features(t: f64, channels: usize) -> Vec<f64> {
    (0..channels / 2)
        .flat_map(|k| {
            let w = PI * 4f64.powi(k as i32) * t;
            [w.sin(), w.cos()]
        })
        .collect()
}

impl VelocityNet {
    /// Conv weights are uniform in `±√(3 / fan_in)`; biases, the head and the
    /// skip start at zero.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self, NnError> {
        config.validate()?;
        let mut rng = SeededRng::new(seed).derive(0x6e6574);
        let mut params = Vec::new();
        let mut conv = |name: String, cin: usize, cout: usize, params: &mut Vec<Param>| -> Result<(), NnError> {
            let bound = (3.0 / (9 * cin) as f64).sqrt();
            let w = (0..9 * cin * cout).map(|_| rng.uniform_range(-bound, bound)).collect();
            params.push(Param { name: format!("{name}.weight"), value: Value::new(vec![9 * cin, cout], w)? });
            params.push(Param { name: format!("{name}.bias"), value: Value::new(vec![cout], vec![0.0; cout])? });
            Ok(())
        };
        let hidden = &config.hidden;
        let cin0 = config.input_channels();
        for (l, &c) in hidden.iter().enumerate() {
            conv(format!("enc{l}"), if l == 0 { cin0 } else { hidden[l - 1] }, c, &mut params)?;
        }
        for l in (0..hidden.len() - 1).rev() {
            conv(format!("dec{l}"), hidden[l + 1] + hidden[l], hidden[l], &mut params)?;
        }
        params.push(Param { name: "head.weight".into(), value: Value::new(vec![9 * hidden[0], 3], vec![0.0; 9 * hidden[0] * 3])? });
        params.push(Param { name: "head.bias".into(), value: Value::new(vec![3], vec![0.0; 3])? });
        params.push(Param { name: "skip.weight".into(), value: Value::new(vec![3 * SKIP_POWERS, 3], vec![0.0; 9 * SKIP_POWERS])? });
        Ok(VelocityNet { config, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Replaces all parameters; names and shapes must match.
    pub fn set_params(&mut self, params: Vec<Param>) -> Result<(), NnError> {
        if params.len() != self.params.len() {
            return Err(NnError::Config(format!("expected {} tensors, got {}", self.params.len(), params.len())));
        }
        for (old, new) in self.params.iter().zip(&params) {
            if old.name != new.name || old.value.dims != new.value.dims {
                return Err(NnError::ShapeMismatch { name: old.name.clone(), expected: old.value.dims.clone(), found: new.value.dims.clone() });
            }
        }
        self.params = params;
        Ok(())
    }

    /// Assembles the `[h, w, input_channels]` input tensor.
    pub fn build_input(&self, z_t: &DenseMap, cond: &Conditioning, t: f64) -> Result<Value, NnError> {
        let [h, w, c] = z_t.shape();
        if c != 3 {
            return Err(NnError::Shape { op: "input", detail: format!("z_t must have 3 channels, got {c}") });
        }
        let image = cond.image.as_ref().ok_or_else(|| NnError::Config("image conditioning is required".into()))?;
        if image.shape() != [h, w, 3] {
            return Err(NnError::Shape { op: "input", detail: format!("image {:?} vs latent {:?}", image.shape(), z_t.shape()) });
        }
        let prompt = match (self.config.task, &cond.prompt) {
            (Task::Matting, Some(p)) if p.shape() == [h, w, 1] => Some(p),
            (Task::Matting, Some(p)) => {
                return Err(NnError::Shape { op: "input", detail: format!("prompt {:?} for latent {:?}", p.shape(), z_t.shape()) })
            }
            (Task::Matting, None) => return Err(NnError::Config("matting requires a prompt mask".into())),
            _ => None,
        };
        let tf = time_features(t, self.config.time_channels);
        let cin = self.config.input_channels();
        let mut data = Vec::with_capacity(h * w * cin);
        for i in 0..h * w {
            data.extend_from_slice(z_t.pixel(i));
            data.extend_from_slice(image.pixel(i));
            data.push(PROMPT_CONSTANT);
            if let Some(p) = prompt {
                data.push(p.pixel(i)[0]);
            }
            data.extend_from_slice(&tf);
        }
        Value::new(vec![h, w, cin], data)
    }

    /// Records a forward pass on a fresh tape.
    ///
    /// Level `l` runs at `1/2^l` resolution: encoder convolutions after each
    /// pooling, then decoder convolutions over the upsampled coarser
    /// features concatenated with the encoder features of the same level.
    pub fn forward(&self, z_t: &DenseMap, cond: &Conditioning, t: f64) -> Result<Forward, NnError> {
        let input = self.build_input(z_t, cond, t)?;
        let mut tape = Tape::new();
        let x = tape.constant(input)?;
        let ids = self.params.iter().map(|p| tape.param(p.value.clone())).collect::<Result<Vec<_>, _>>()?;
        let levels = self.config.hidden.len();
        let mut next = ids.iter().copied();
        let mut conv_silu = |tape: &mut Tape, h: NodeId| -> Result<NodeId, NnError> {
            let (w, b) = (next.next().expect("weight"), next.next().expect("bias"));
            let c = tape.conv3x3(h, w, b)?;
            tape.activation(c, Activation::Silu)
        };
        let mut enc = Vec::with_capacity(levels);
        let mut h = x;
        for l in 0..levels {
            if l > 0 {
                h = tape.pool2(h)?;
            }
            h = conv_silu(&mut tape, h)?;
            enc.push(h);
        }
        for l in (0..levels - 1).rev() {
            let dims = tape.value(enc[l]).dims.clone();
            let up = tape.upsample2(h, dims[0], dims[1])?;
            let cat = tape.concat(&[up, enc[l]])?;
            h = conv_silu(&mut tape, cat)?;
        }
        let n = ids.len();
        let head = tape.conv3x3(h, ids[n - 3], ids[n - 2])?;
        let skip_in: Vec<f64> = z_t
            .data()
            .chunks_exact(3)
            .flat_map(|z| (0..SKIP_POWERS).flat_map(move |k| z.iter().map(move |v| v * t.powi(k as i32))))
            .collect();
        let [h_, w_, _] = z_t.shape();
        let skip_in = tape.constant(Value::new(vec![h_, w_, 3 * SKIP_POWERS], skip_in)?)?;
        let skip = tape.matmul(skip_in, ids[n - 1])?;
        let skip = tape.scale(skip, SKIP_GAIN)?;
        let output = tape.add(head, skip)?;
        Ok(Forward { tape, params: ids, output })
    }

    /// Forward pass returning the velocity as a latent map.
    pub fn predict(&self, z_t: &DenseMap, cond: &Conditioning, t: f64) -> Result<DenseMap, NnError> {
        let [h, w, _] = z_t.shape();
        let fwd = self.forward(z_t, cond, t)?;
        Ok(DenseMap::from_vec(h, w, 3, fwd.tape.value(fwd.output).data.clone(), Task::Latent)?)
    }
}

impl VelocityModel for VelocityNet {
    fn velocity(&self, z: &DenseMap, cond: &Conditioning, t: f64) -> Result<DenseMap, FlowError> {
        self.predict(z, cond, t).map_err(|e| FlowError::Model(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::gaussian_noise;

    fn cond(h: usize, w: usize, seed: u64) -> Conditioning {
        let image = gaussian_noise(&mut SeededRng::new(seed), [h, w, 3]).unwrap();
        Conditioning { image: Some(image), prompt: None }
    }

    #[test]
    fn fresh_net_predicts_zero() {
        let net = VelocityNet::new(NetConfig::new(Task::Depth, Mapping::Sqrt, vec![4, 4]).unwrap(), 1).unwrap();
        let z = gaussian_noise(&mut SeededRng::new(2), [8, 8, 3]).unwrap();
        let v = net.predict(&z, &cond(8, 8, 3), 0.3).unwrap();
        assert_eq!(v.shape(), [8, 8, 3]);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matting_needs_prompt() {
        let net = VelocityNet::new(NetConfig::new(Task::Matting, Mapping::Sqrt, vec![4]).unwrap(), 1).unwrap();
        let z = gaussian_noise(&mut SeededRng::new(2), [8, 8, 3]).unwrap();
        assert!(matches!(net.predict(&z, &cond(8, 8, 3), 0.0), Err(NnError::Config(_))));
    }

    #[test]
    fn hash_depends_on_mapping() {
        let a = NetConfig::new(Task::Depth, Mapping::Sqrt, vec![8]).unwrap();
        let b = NetConfig::new(Task::Depth, Mapping::Uniform, vec![8]).unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), a.clone().hash());
    }

    #[test]
    fn rejects_bad_config() {
        assert!(NetConfig::new(Task::Rgb, Mapping::Sqrt, vec![8]).is_err());
        assert!(NetConfig::new(Task::Depth, Mapping::Sqrt, vec![]).is_err());
    }
}
