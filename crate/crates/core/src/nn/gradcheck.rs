//! Central finite-difference verification of tape ops, losses and the
//! network, plus the atan2 versus arccos gradient comparison.

use crate::error::NnError;
use crate::losses::{
    angle_between, angular_loss, arccos_loss_reference, fm_loss, matting_region_l1, ssi_l1_depth, FitGradient, LossGrad, Trimap,
};
use crate::rng::SeededRng;
use crate::tensor::{DenseMap, Task};

use super::net::{NetConfig, VelocityNet};
use super::tape::{Activation, NodeId, Tape, Value};
use crate::flow::Conditioning;
use crate::quant::Mapping;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const LOSS_TOLERANCE: f64 = 1e-4;
pub const NET_TOLERANCE: f64 = 1e-3;
const FD_STEP: f64 = 1e-6;

/// `‖a - n‖∞ / max(‖a‖∞, ‖n‖∞)`, or the absolute gap when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let gap = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(0.0, f64::max);
    if scale < 1e-12 {
        gap
    } else {
        gap / scale
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

fn random_values(rng: &mut SeededRng, dims: &[usize]) -> Value {
    let n: usize = dims.iter().product();
    Value::new(dims.to_vec(), (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
}

type Builder = fn(&mut Tape, &[NodeId]) -> Result<NodeId, NnError>;

/// The primitive operations and the input shapes each is checked with.
pub fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Builder)> {
    vec![
        ("add", vec![vec![3, 4], vec![3, 4]], |t, x| t.add(x[0], x[1])),
        ("sub", vec![vec![3, 4], vec![3, 4]], |t, x| t.sub(x[0], x[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |t, x| t.mul(x[0], x[1])),
        ("scale", vec![vec![3, 4]], |t, x| t.scale(x[0], -1.7)),
        ("silu", vec![vec![3, 4]], |t, x| t.activation(x[0], Activation::Silu)),
        ("tanh", vec![vec![3, 4]], |t, x| t.activation(x[0], Activation::Tanh)),
        ("mean", vec![vec![3, 4]], |t, x| t.mean(x[0])),
        ("sum", vec![vec![3, 4]], |t, x| t.sum(x[0])),
        ("concat", vec![vec![2, 3, 1], vec![2, 3, 2]], |t, x| t.concat(&[x[0], x[1]])),
        ("matmul", vec![vec![2, 3, 4], vec![4, 3]], |t, x| t.matmul(x[0], x[1])),
        ("pool2", vec![vec![5, 4, 2]], |t, x| t.pool2(x[0])),
        ("upsample2", vec![vec![3, 2, 2]], |t, x| t.upsample2(x[0], 5, 4)),
        ("conv3x3", vec![vec![4, 5, 2], vec![18, 3], vec![3]], |t, x| t.conv3x3(x[0], x[1], x[2])),
    ]
}

/// Scalar `Σ R ⊙ op(inputs)` for a fixed random projection `R`.
fn projected(inputs: &[Value], build: Builder, proj_seed: u64) -> Result<(Tape, Vec<NodeId>, NodeId), NnError> {
    let mut tape = Tape::new();
    let ids = inputs.iter().map(|v| tape.param(v.clone())).collect::<Result<Vec<_>, _>>()?;
    let out = build(&mut tape, &ids)?;
    let dims = tape.value(out).dims.clone();
    let r = tape.constant(random_values(&mut SeededRng::new(proj_seed), &dims))?;
    let m = tape.mul(out, r)?;
    let loss = tape.sum(m)?;
    Ok((tape, ids, loss))
}

/// Checks one op at one random point; returns the relative error.
pub fn check_op(build: Builder, dims: &[Vec<usize>], seed: u64) -> Result<f64, NnError> {
    let mut rng = SeededRng::new(seed);
    let inputs: Vec<Value> = dims.iter().map(|d| random_values(&mut rng, d)).collect();
    let proj = seed ^ 0x5eed;
    let (tape, ids, loss) = projected(&inputs, build, proj)?;
    let grads = tape.backward(loss)?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (k, id) in ids.iter().enumerate() {
        analytic.extend_from_slice(grads.get(*id).unwrap_or(&vec![0.0; inputs[k].numel()]));
        for j in 0..inputs[k].numel() {
            let eval = |delta: f64| -> Result<f64, NnError> {
                let mut pert = inputs.clone();
                pert[k].data[j] += delta;
                let (t, _, l) = projected(&pert, build, proj)?;
                Ok(t.value(l).data[0])
            };
            numeric.push((eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

pub fn check_ops(seeds: u64) -> Result<Vec<CheckResult>, NnError> {
    op_cases()
        .into_iter()
        .map(|(name, dims, build)| {
            let mut worst = 0.0f64;
            for s in 0..seeds {
                worst = worst.max(check_op(build, &dims, 1000 + s)?);
            }
            Ok(CheckResult { name: name.to_string(), trials: seeds as usize, max_rel_err: worst, tolerance: OP_TOLERANCE })
        })
        .collect()
}

/// Finite differences of a scalar map-valued loss against its reported gradient.
pub fn check_loss_gradient(x: &DenseMap, loss: impl Fn(&DenseMap) -> Result<LossGrad, NnError>) -> Result<f64, NnError> {
    let analytic = loss(x)?.grad;
    let mut numeric = Vec::with_capacity(x.numel());
    for j in 0..x.numel() {
        let eval = |delta: f64| -> Result<f64, NnError> {
            let mut d = x.data().to_vec();
            d[j] += delta;
            Ok(loss(&x.with_data(d)?)?.value)
        };
        numeric.push((eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP));
    }
    Ok(relative_error(&analytic, &numeric))
}

fn random_map(rng: &mut SeededRng, h: usize, w: usize, c: usize, lo: f64, hi: f64) -> DenseMap {
    DenseMap::from_vec(h, w, c, (0..h * w * c).map(|_| rng.uniform_range(lo, hi)).collect(), Task::Latent).unwrap()
}

/// Random unit-ish normals that stay well away from exact (anti)alignment.
fn random_normals(rng: &mut SeededRng, n: usize) -> DenseMap {
    let data = (0..n).flat_map(|_| [rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0), rng.uniform_range(0.2, 1.0)]).collect();
    DenseMap::from_vec(1, n, 3, data, Task::Normal).unwrap()
}

pub fn check_losses(points: u64) -> Result<Vec<CheckResult>, NnError> {
    let mut out = Vec::new();
    let mut record = |name: &str, f: &dyn Fn(u64) -> Result<f64, NnError>| -> Result<(), NnError> {
        let mut worst = 0.0f64;
        for s in 0..points {
            worst = worst.max(f(2000 + s)?);
        }
        out.push(CheckResult { name: name.to_string(), trials: points as usize, max_rel_err: worst, tolerance: LOSS_TOLERANCE });
        Ok(())
    };
    record("fm_loss", &|s| {
        let mut rng = SeededRng::new(s);
        let truth = random_map(&mut rng, 3, 3, 3, -1.0, 1.0);
        let x = random_map(&mut rng, 3, 3, 3, -1.0, 1.0);
        check_loss_gradient(&x, |p| Ok(fm_loss(p, &truth)?))
    })?;
    record("ssi_l1_depth", &|s| {
        let mut rng = SeededRng::new(s);
        let y = random_map(&mut rng, 3, 4, 1, 0.5, 5.0);
        let x = random_map(&mut rng, 3, 4, 1, 0.0, 1.0);
        check_loss_gradient(&x, |p| Ok(ssi_l1_depth(p, &y, None, FitGradient::Full)?.0))
    })?;
    record("angular_loss", &|s| {
        let mut rng = SeededRng::new(s);
        let g = random_normals(&mut rng, 6);
        let x = random_normals(&mut rng, 6);
        check_loss_gradient(&x, |p| Ok(angular_loss(p, &g, None)?))
    })?;
    record("arccos_loss_reference", &|s| {
        let mut rng = SeededRng::new(s);
        let unit = |m: DenseMap| {
            let d = m.data().chunks(3).flat_map(|v| {
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                [v[0] / n, v[1] / n, v[2] / n]
            });
            m.with_data(d.collect()).unwrap()
        };
        let g = unit(random_normals(&mut rng, 6));
        let x = unit(random_normals(&mut rng, 6));
        check_loss_gradient(&x, |p| Ok(arccos_loss_reference(p, &g)?))
    })?;
    record("matting_region_l1", &|s| {
        let mut rng = SeededRng::new(s);
        let a = random_map(&mut rng, 4, 4, 1, 0.0, 1.0);
        let x = random_map(&mut rng, 4, 4, 1, 0.0, 1.0);
        let unknown = (0..16).map(|i| i % 3 == 0).collect();
        let trimap = Trimap::from_unknown(4, 4, unknown)?;
        check_loss_gradient(&x, |p| Ok(matting_region_l1(p, &a, &trimap)?.0))
    })?;
    Ok(out)
}

/// Parameter gradients of a downsized network with every weight randomized.
pub fn check_net(seed: u64) -> Result<f64, NnError> {
    let cfg = NetConfig::new(Task::Depth, Mapping::Sqrt, vec![4, 3])?;
    let mut net = VelocityNet::new(cfg, seed)?;
    let mut rng = SeededRng::new(seed).derive(1);
    for p in net.params_mut() {
        p.value.data.iter_mut().for_each(|v| *v = rng.uniform_range(-0.5, 0.5));
    }
    let z = random_map(&mut rng, 8, 8, 3, -1.0, 1.0);
    let image = random_map(&mut rng, 8, 8, 3, -1.0, 1.0);
    let proj: Vec<f64> = (0..8 * 8 * 3).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let cond = Conditioning { image: Some(image), prompt: None };
    let t = rng.uniform();
    let objective = |net: &VelocityNet| -> Result<f64, NnError> {
        let v = net.predict(&z, &cond, t)?;
        Ok(v.data().iter().zip(&proj).map(|(a, b)| a * b).sum())
    };
    let fwd = net.forward(&z, &cond, t)?;
    let grads = fwd.tape.backward_with_seed(fwd.output, proj.clone())?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (k, id) in fwd.params.iter().enumerate() {
        analytic.extend_from_slice(grads.get(*id).expect("every parameter reaches the output"));
        for j in 0..net.params()[k].value.numel() {
            let orig = net.params()[k].value.data[j];
            net.params_mut()[k].value.data[j] = orig + FD_STEP;
            let up = objective(&net)?;
            net.params_mut()[k].value.data[j] = orig - FD_STEP;
            let down = objective(&net)?;
            net.params_mut()[k].value.data[j] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

pub fn check_nets(points: u64) -> Result<CheckResult, NnError> {
    let mut worst = 0.0f64;
    for s in 0..points {
        worst = worst.max(check_net(3000 + s)?);
    }
    Ok(CheckResult { name: "velocity_net".into(), trials: points as usize, max_rel_err: worst, tolerance: NET_TOLERANCE })
}

/// One row of the angular-loss gradient comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StabilityRow {
    pub dot: f64,
    pub atan2_loss: f64,
    pub arccos_loss: f64,
    pub atan2_grad_norm: f64,
    pub arccos_grad_norm: f64,
}

/// Single-pixel losses and gradient norms for a prediction at `acos(dot)`
/// from the ground-truth normal `(0, 0, 1)`.
pub fn stability_row(dot: f64) -> Result<StabilityRow, NnError> {
    let g = DenseMap::from_vec(1, 1, 3, vec![0.0, 0.0, 1.0], Task::Normal)?;
    let p = DenseMap::from_vec(1, 1, 3, vec![(1.0 - dot * dot).max(0.0).sqrt(), 0.0, dot], Task::Normal)?;
    let a = angular_loss(&p, &g, None)?;
    let r = arccos_loss_reference(&p, &g)?;
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(StabilityRow {
        dot,
        atan2_loss: a.value,
        arccos_loss: r.value,
        atan2_grad_norm: norm(&a.grad),
        arccos_grad_norm: norm(&r.grad),
    })
}

/// Dot products `1 - 10^-k` for `k = 4..=9`.
pub fn near_parallel_dots() -> Vec<f64> {
    (4..=9).map(|k| 1.0 - 10f64.powi(-k)).collect()
}

/// Largest gap between the two loss values over `|dot| ≤ 0.999`.
pub fn loss_agreement(samples: usize) -> Result<f64, NnError> {
    let mut worst = 0.0f64;
    for i in 0..=samples {
        let dot = -0.999 + 1.998 * i as f64 / samples as f64;
        let row = stability_row(dot)?;
        worst = worst.max((row.atan2_loss - row.arccos_loss).abs());
        debug_assert!((row.atan2_loss - angle_between([0.0, 0.0, 1.0], [(1.0 - dot * dot).sqrt(), 0.0, dot])).abs() < 1e-12);
    }
    Ok(worst)
}
