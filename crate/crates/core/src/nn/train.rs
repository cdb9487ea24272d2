//! Training loop, inference and evaluation for the velocity network.

use rayon::prelude::*;

use crate::encoding::{
    depth_decode, depth_encode, matting_decode, matting_encode, normal_encode, point_prompt_mask, rgb_normalize, DepthEncoding,
};
use crate::error::{LossError, NnError};
use crate::flow::{estimate_endpoint, euler_sample, interpolate, multires_noise, velocity_target, Conditioning, NoiseSchedule};
use crate::losses::{
    adaptive_lambda, angular_loss, fm_loss, matting_region_l1, ssi_l1_depth, trimap_from_alpha, AlignmentFit, FitGradient,
    LossReport, Trimap, DEFAULT_TRIMAP_RADIUS, LAMBDA_EPS,
};
use crate::metrics::{absrel_aligned, delta1, matting_metrics, normal_metrics, EvalResult};
use crate::quant::Mapping;
use crate::rng::SeededRng;
use crate::synth::Sample;
use crate::tensor::{DenseMap, Task, ValueRange};

use super::net::{NetConfig, VelocityNet};
use super::optim::Adam;

/// Total loss above which a step is treated as divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e6;
/// Aligned depths are clamped to this floor before ratio metrics.
const MIN_ALIGNED_DEPTH: f64 = 1e-6;
const Z0_TAG: u64 = 0x7a30;
const TIME_TAG: u64 = 0x7469;
const ORDER_TAG: u64 = 0x6f72;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub task: Task,
    pub mapping: Mapping,
    pub use_cons: bool,
    pub lr: f64,
    pub batch: usize,
    /// Optimizer steps per epoch; the consistency weight is zero up to here.
    pub n_step: u64,
    pub epochs: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub noise: NoiseSchedule,
    /// Apply the consistency term only when `t` is at most this value.
    pub cons_max_t: Option<f64>,
    pub lambda_eps: f64,
    /// Rescale the summed gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
}

impl TrainerConfig {
    pub fn new(task: Task, mapping: Mapping) -> Self {
        TrainerConfig {
            task,
            mapping,
            use_cons: true,
            lr: 3e-4,
            batch: 8,
            n_step: 1,
            epochs: 3,
            seed: 0,
            hidden: vec![16, 16, 16],
            noise: NoiseSchedule::default(),
            cons_max_t: None,
            lambda_eps: LAMBDA_EPS,
            grad_clip: Some(1.0),
        }
    }

    pub fn steps_per_epoch(n_examples: usize, batch: usize) -> u64 {
        n_examples.div_ceil(batch.max(1)).max(1) as u64
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.n_step == 0 {
            return Err(NnError::Config("n_step must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(NnError::Config("batch must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(NnError::Config(format!("learning rate {} is invalid", self.lr)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(NnError::Config(format!("gradient clip {c} is invalid")));
            }
        }
        self.net_config().map(|_| ())
    }

    pub fn net_config(&self) -> Result<NetConfig, NnError> {
        NetConfig::new(self.task, self.mapping, self.hidden.clone())
    }
}

/// Task-space supervision kept alongside the encoded target.
#[derive(Clone, Debug)]
pub enum Target {
    Depth { meters: DenseMap, encoding: DepthEncoding },
    Normal(DenseMap),
    /// Binarized alpha and its trimap.
    Matting { alpha: DenseMap, binary: DenseMap, trimap: Trimap },
}

/// One training or evaluation item in model space.
#[derive(Clone, Debug)]
pub struct Example {
    pub z1: DenseMap,
    pub cond: Conditioning,
    pub target: Target,
}

impl Example {
    pub fn shape(&self) -> [usize; 3] {
        self.z1.shape()
    }
}

/// Encodes a rendered sample for `task`.
pub fn prepare_example(sample: &Sample, task: Task, mapping: Mapping) -> Result<Example, NnError> {
    let image = rgb_normalize(&sample.rgb)?;
    let (h, w) = (sample.rgb.height(), sample.rgb.width());
    match task {
        Task::Depth => {
            let (z1, encoding) = depth_encode(&sample.depth, None, mapping)?;
            Ok(Example {
                z1,
                cond: Conditioning { image: Some(image), prompt: None },
                target: Target::Depth { meters: sample.depth.clone(), encoding },
            })
        }
        Task::Normal => {
            let z1 = normal_encode(&sample.normal, None)?;
            Ok(Example { z1: z1.clone(), cond: Conditioning { image: Some(image), prompt: None }, target: Target::Normal(z1) })
        }
        Task::Matting => {
            let z1 = matting_encode(&sample.alpha)?;
            let prompt = match &sample.prompt {
                Some(p) => point_prompt_mask(p, h, w)?,
                None => DenseMap::new(h, w, 1, vec![-1.0; h * w], Task::Matting, ValueRange::SYMMETRIC)?,
            };
            let binary = matting_decode(&z1);
            let trimap = trimap_from_alpha(&sample.alpha, DEFAULT_TRIMAP_RADIUS);
            Ok(Example {
                z1,
                cond: Conditioning { image: Some(image), prompt: Some(prompt) },
                target: Target::Matting { alpha: sample.alpha.clone(), binary, trimap },
            })
        }
        other => Err(NnError::Config(format!("cannot train on task {other}"))),
    }
}

pub fn prepare_examples(samples: &[Sample], task: Task, mapping: Mapping) -> Result<Vec<Example>, NnError> {
    samples.iter().map(|s| prepare_example(s, task, mapping)).collect()
}

/// The shared fixed-seed starting noise, annealed to time `t`.
pub fn initial_noise(seed: u64, shape: [usize; 3], schedule: &NoiseSchedule, t: f64) -> Result<DenseMap, NnError> {
    Ok(multires_noise(&mut SeededRng::new(seed).derive(Z0_TAG), shape, schedule, t)?)
}

/// Consistency loss of the one-step endpoint estimate and its gradient with
/// respect to the endpoint. Returns `None` when the loss is undefined
/// (a constant depth prediction cannot be aligned).
pub fn consistency_loss(example: &Example, z_hat: &DenseMap) -> Result<Option<(f64, Vec<f64>)>, NnError> {
    let (h, w) = (z_hat.height(), z_hat.width());
    let mut grad = vec![0.0; h * w * 3];
    let value = match &example.target {
        Target::Depth { meters, encoding } => {
            let y_hat = depth_decode(z_hat, encoding);
            let (lg, _) = match ssi_l1_depth(&y_hat, meters, None, FitGradient::Full) {
                Ok(r) => r,
                Err(LossError::DegenerateFit) => return Ok(None),
                Err(e) => return Err(e.into()),
            };
            let mean = z_hat.channel_mean();
            for i in 0..h * w {
                let d = lg.grad[i] * encoding.decode_derivative(mean.data()[i]) / 3.0;
                grad[3 * i..3 * i + 3].fill(d);
            }
            lg.value
        }
        Target::Normal(n) => {
            let lg = angular_loss(z_hat, n, None)?;
            grad = lg.grad;
            lg.value
        }
        Target::Matting { binary, trimap, .. } => {
            let a_hat = matting_decode(z_hat);
            let (lg, _) = matting_region_l1(&a_hat, binary, trimap)?;
            let mean = z_hat.channel_mean();
            for i in 0..h * w {
                let inside = (-1.0..=1.0).contains(&mean.data()[i]);
                let d = if inside { lg.grad[i] / 6.0 } else { 0.0 };
                grad[3 * i..3 * i + 3].fill(d);
            }
            lg.value
        }
    };
    Ok(Some((value, grad)))
}

struct SampleWork {
    fwd: super::net::Forward,
    l_fm: f64,
    g_fm: Vec<f64>,
    /// Consistency value and gradient with respect to `v_pred`.
    cons: Option<(f64, Vec<f64>)>,
}

fn sample_work(net: &VelocityNet, example: &Example, config: &TrainerConfig, step: u64, index: usize) -> Result<SampleWork, NnError> {
    let t = SeededRng::new(config.seed).derive(TIME_TAG).derive(step).derive(index as u64).uniform();
    let shape = example.shape();
    let z0 = initial_noise(config.seed, shape, &config.noise, t)?;
    let z_t = interpolate(&z0, &example.z1, t)?;
    let v_true = velocity_target(&z0, &example.z1)?;
    let fwd = net.forward(&z_t, &example.cond, t)?;
    let v_pred = DenseMap::from_vec(shape[0], shape[1], shape[2], fwd.tape.value(fwd.output).data.clone(), Task::Latent)?;
    let fm = fm_loss(&v_pred, &v_true)?;
    let cons = if config.cons_max_t.map_or(true, |tmax| t <= tmax) {
        let z_hat = estimate_endpoint(&z_t, &v_pred, t)?;
        consistency_loss(example, &z_hat)?.map(|(value, g)| (value, g.into_iter().map(|x| x * (1.0 - t)).collect()))
    } else {
        None
    };
    Ok(SampleWork { fwd, l_fm: fm.value, g_fm: fm.grad, cons })
}

/// Scales all gradients by a common factor so their joint L2 norm is at most
/// `limit`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], limit: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > limit {
        let k = limit / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
    }
    norm
}

/// One optimization step on `batch` at 1-based `step`:
/// `L = L_FM + λ L_Cons`, averaged over the batch.
pub fn train_step(net: &mut VelocityNet, opt: &mut Adam, batch: &[&Example], config: &TrainerConfig, step: u64) -> Result<LossReport, NnError> {
    if batch.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    let work: Vec<SampleWork> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| sample_work(net, ex, config, step, i))
        .collect::<Result<_, _>>()?;
    let b = batch.len() as f64;
    let l_fm = work.iter().map(|w| w.l_fm).sum::<f64>() / b;
    let cons: Vec<f64> = work.iter().filter_map(|w| w.cons.as_ref().map(|c| c.0)).collect();
    let l_cons = if cons.is_empty() { 0.0 } else { cons.iter().sum::<f64>() / cons.len() as f64 };
    let lambda = if config.use_cons && !cons.is_empty() { adaptive_lambda(l_fm, l_cons, step, config.n_step, config.lambda_eps) } else { 0.0 };
    let report = LossReport::new(step, config.task, l_fm, l_cons, lambda);
    if !(report.total.abs() <= DIVERGENCE_LIMIT) {
        return Err(NnError::Diverged(report.total));
    }
    let n_cons = cons.len().max(1) as f64;
    let per_sample: Vec<Vec<Vec<f64>>> = work
        .into_par_iter()
        .map(|w| {
            let mut seed: Vec<f64> = w.g_fm.iter().map(|g| g / b).collect();
            if lambda != 0.0 {
                if let Some((_, gc)) = &w.cons {
                    seed.iter_mut().zip(gc).for_each(|(s, g)| *s += lambda * g / n_cons);
                }
            }
            let mut grads = w.fwd.tape.backward_with_seed(w.fwd.output, seed)?;
            Ok(w.fwd.params.iter().map(|&id| grads.take(id).unwrap_or_default()).collect())
        })
        .collect::<Result<_, NnError>>()?;
    let mut total: Vec<Vec<f64>> = net.params().iter().map(|p| vec![0.0; p.value.numel()]).collect();
    for sample in &per_sample {
        for (acc, g) in total.iter_mut().zip(sample) {
            if !g.is_empty() {
                acc.iter_mut().zip(g).for_each(|(a, v)| *a += v);
            }
        }
    }
    if let Some(limit) = config.grad_clip {
        clip_global_norm(&mut total, limit);
    }
    opt.update(net.params_mut(), &total);
    Ok(report)
}

/// Owns the network, optimizer and step counter for a run.
pub struct Trainer {
    pub config: TrainerConfig,
    pub net: VelocityNet,
    pub opt: Adam,
    step: u64,
}

impl Trainer {
    pub fn new(config: TrainerConfig) -> Result<Self, NnError> {
        config.validate()?;
        let net = VelocityNet::new(config.net_config()?, config.seed)?;
        let opt = Adam::new(config.lr);
        Ok(Trainer { config, net, opt, step: 0 })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One epoch over `examples` in a seed-determined order.
    pub fn train_epoch(&mut self, examples: &[Example], epoch: usize) -> Result<Vec<LossReport>, NnError> {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        SeededRng::new(self.config.seed).derive(ORDER_TAG).derive(epoch as u64).shuffle(&mut order);
        let mut reports = Vec::new();
        for chunk in order.chunks(self.config.batch) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            self.step += 1;
            reports.push(train_step(&mut self.net, &mut self.opt, &batch, &self.config, self.step)?);
        }
        Ok(reports)
    }

    /// Runs all configured epochs, calling `on_epoch` after each one.
    pub fn fit(
        &mut self,
        examples: &[Example],
        mut on_epoch: impl FnMut(usize, &[LossReport], &VelocityNet) -> Result<(), NnError>,
    ) -> Result<Vec<LossReport>, NnError> {
        if examples.is_empty() {
            return Err(NnError::EmptyBatch);
        }
        let mut all = Vec::new();
        for epoch in 0..self.config.epochs {
            let reports = self.train_epoch(examples, epoch)?;
            on_epoch(epoch, &reports, &self.net)?;
            all.extend(reports);
        }
        Ok(all)
    }
}

/// Euler-integrates from the fixed-seed noise to a latent prediction.
pub fn infer(net: &VelocityNet, cond: &Conditioning, shape: [usize; 3], steps: usize, seed: u64, noise: &NoiseSchedule) -> Result<DenseMap, NnError> {
    let z0 = initial_noise(seed, shape, noise, 0.0)?;
    Ok(euler_sample(net, &z0, cond, steps)?)
}

/// Aligns a metric depth prediction to ground truth. A constant prediction
/// falls back to the best constant, the mean depth.
pub fn align_depth(y_hat: &DenseMap, y: &DenseMap) -> Result<DenseMap, NnError> {
    let fit = match AlignmentFit::fit(y_hat, y, None) {
        Ok(f) => f,
        Err(LossError::DegenerateFit) => AlignmentFit { scale: 0.0, shift: y.mean() },
        Err(e) => return Err(e.into()),
    };
    Ok(fit.apply_map(y_hat).map(|v| v.max(MIN_ALIGNED_DEPTH)))
}

/// Task metrics of one latent prediction against its example.
pub fn evaluate_prediction(z_hat: &DenseMap, example: &Example) -> Result<EvalResult, NnError> {
    Ok(match &example.target {
        Target::Depth { meters, encoding } => {
            let aligned = align_depth(&depth_decode(z_hat, encoding), meters)?;
            EvalResult::new(Task::Depth)
                .with("absrel", absrel_aligned(&aligned, meters, None)?)
                .with("delta1", delta1(&aligned, meters, None)?)
        }
        Target::Normal(n) => {
            let unit = z_hat.map(|v| v).with_meta(Task::Normal, ValueRange::Unspecified)?;
            let unit = normal_encode(&unit, None)?;
            let (mean, pct) = normal_metrics(&unit, n, None)?;
            EvalResult::new(Task::Normal).with("mean_angle_deg", mean).with("pct_11_25", pct)
        }
        Target::Matting { alpha, .. } => {
            let a_hat = matting_decode(z_hat);
            let m = matting_metrics(&a_hat, alpha, &Trimap::all_unknown(alpha.height(), alpha.width()))?;
            EvalResult::new(Task::Matting)
                .with("mse", m.mse)
                .with("mad", m.mad)
                .with("sad", m.sad)
                .with("grad", m.grad)
                .with("conn", m.conn)
        }
    })
}

/// Mean metrics over `examples` at a given number of sampler steps.
pub fn evaluate(net: &VelocityNet, examples: &[Example], steps: usize, seed: u64, noise: &NoiseSchedule) -> Result<EvalResult, NnError> {
    let task = net.config().task;
    let per: Vec<EvalResult> = examples
        .par_iter()
        .map(|ex| evaluate_prediction(&infer(net, &ex.cond, ex.shape(), steps, seed, noise)?, ex))
        .collect::<Result<_, NnError>>()?;
    Ok(EvalResult::aggregate(task, &per))
}
