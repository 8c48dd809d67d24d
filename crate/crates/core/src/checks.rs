//! The gradient-check suite: every differentiable tape op, and the whole
//! policy → episode → reward composite, against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check_on, NodeId, OpTag, Reduction, Tape, Tensor};
use crate::error::{bail, Result};
use crate::features::{business_days, rolling_vol, ContextScaler, MarketData, ObservationSpec, Series};
use crate::metrics::{reward_node, RewardKind};
use crate::policy::{init_params, Architecture, BranchConfig, NetworkConfig, ParamNodes, PolicyParams};
use crate::simulator::EpisodeConfig;
use crate::trainer::{build_episode, episode_returns_node, Exploration};

/// Worst acceptable relative error.
pub const TOLERANCE: f64 = 1e-4;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

pub const OP_CHECKS: [&str; 17] = [
    "add",
    "sub",
    "mul",
    "div",
    "broadcast",
    "relu",
    "neg",
    "abs",
    "exp",
    "scale",
    "ln",
    "scaled_sigmoid",
    "dense",
    "conv_rowwise",
    "softmax",
    "reductions",
    "rows",
];

pub const COMPOSITE: &str = "policy_episode_reward";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    /// Worst relative error over all seeds.
    pub worst: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.worst < TOLERANCE
    }
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches")
}

/// Keeps values away from the kinks of relu and abs.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    random(rng, shape).map(|x| if x.abs() < 0.05 { x + 0.1 * x.signum() + 0.05 } else { x })
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    random(rng, shape).map(|x| x.abs() + 0.5)
}

fn tape_with(fault: Option<OpTag>) -> impl Fn() -> Tape<f64> {
    move || {
        let mut t = Tape::new();
        if let Some(tag) = fault {
            t.inject_fault(tag);
        }
        t
    }
}

/// One op composed with a fixed random projection to a scalar.
pub fn op_check(name: &str, seed: u64, fault: Option<OpTag>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = random(&mut rng, &[64]);
    let project = move |tape: &mut Tape<f64>, y: NodeId| -> Result<NodeId> {
        let n = tape.value(y).len();
        let w = tape.constant(Tensor::vector(weights.data()[..n].to_vec()));
        let flat = if tape.value(y).shape().len() == 1 {
            y
        } else {
            tape.select(y, (0..n).collect())?
        };
        let p = tape.mul(flat, w)?;
        tape.sum(p)
    };
    let op = name.to_string();
    let (point, f): (Vec<Tensor<f64>>, Build) = match name {
        "add" | "sub" | "mul" | "div" => {
            let a = random(&mut rng, &[6]);
            let b = if name == "div" {
                positive(&mut rng, &[6])
            } else {
                random(&mut rng, &[6])
            };
            (
                vec![a, b],
                Box::new(move |tape, x| {
                    let y = match op.as_str() {
                        "add" => tape.add(x[0], x[1])?,
                        "sub" => tape.sub(x[0], x[1])?,
                        "mul" => tape.mul(x[0], x[1])?,
                        _ => tape.div(x[0], x[1])?,
                    };
                    project(tape, y)
                }),
            )
        }
        "broadcast" => (
            vec![random(&mut rng, &[5]), positive(&mut rng, &[1])],
            Box::new(move |tape, x| {
                let a = tape.mul(x[0], x[1])?;
                let b = tape.div(a, x[1])?;
                let c = tape.mul(x[1], b)?;
                project(tape, c)
            }),
        ),
        "relu" | "neg" | "abs" | "exp" | "scale" => (
            vec![off_kink(&mut rng, &[7])],
            Box::new(move |tape, x| {
                let y = match op.as_str() {
                    "relu" => tape.relu(x[0])?,
                    "neg" => tape.neg(x[0])?,
                    "abs" => tape.abs(x[0])?,
                    "exp" => tape.exp(x[0])?,
                    _ => tape.scale(x[0], -2.5)?,
                };
                project(tape, y)
            }),
        ),
        "ln" => (
            vec![positive(&mut rng, &[5])],
            Box::new(move |tape, x| {
                let y = tape.ln(x[0])?;
                project(tape, y)
            }),
        ),
        "scaled_sigmoid" => (
            vec![random(&mut rng, &[4]).map(|v| 3.0 * v)],
            Box::new(move |tape, x| {
                let y = tape.scaled_sigmoid(x[0], 3.0)?;
                project(tape, y)
            }),
        ),
        "dense" => (
            vec![random(&mut rng, &[3, 4]), random(&mut rng, &[4, 5]), random(&mut rng, &[5])],
            Box::new(move |tape, x| {
                let y = tape.dense(x[0], x[1], x[2])?;
                project(tape, y)
            }),
        ),
        "conv_rowwise" => (
            vec![random(&mut rng, &[3, 6]), random(&mut rng, &[2, 1, 3]), random(&mut rng, &[2])],
            Box::new(move |tape, x| {
                let y = tape.conv_rowwise(x[0], x[1], x[2])?;
                let z = tape.flatten_samples(y, 3)?;
                project(tape, z)
            }),
        ),
        "softmax" => (
            vec![random(&mut rng, &[2, 4]).map(|v| 2.0 * v)],
            Box::new(move |tape, x| {
                let y = tape.softmax(x[0])?;
                project(tape, y)
            }),
        ),
        "reductions" => (
            vec![random(&mut rng, &[6]).map(|v| v + 0.05 * v.signum())],
            Box::new(move |tape, x| {
                let parts = [
                    tape.reduce(Reduction::Mean, x[0])?,
                    tape.reduce(Reduction::StdDev, x[0])?,
                    tape.reduce(Reduction::Sum, x[0])?,
                    tape.reduce(Reduction::Min, x[0])?,
                    tape.reduce(Reduction::Max, x[0])?,
                    tape.reduce(Reduction::Product, x[0])?,
                ];
                let mut acc = parts[0];
                for (i, &p) in parts.iter().enumerate().skip(1) {
                    let scaled = tape.scale(p, 1.0 + i as f64)?;
                    acc = tape.add(acc, scaled)?;
                }
                Ok(acc)
            }),
        ),
        "rows" => (
            vec![random(&mut rng, &[4, 3]), random(&mut rng, &[4]), random(&mut rng, &[4, 2])],
            Box::new(move |tape, x| {
                let s = tape.scale_rows(x[0], x[1])?;
                let c = tape.concat_cols(s, x[2])?;
                let sh = tape.shift_rows(c, 1)?;
                let r = tape.sum_rows(sh)?;
                project(tape, r)
            }),
        ),
        other => bail!(Config, "unknown gradient check {other:?}"),
    };
    grad_check_on(tape_with(fault), f, &point, STEP)
}

/// A 60-day, two-strategy market with a deterministic wiggle.
fn check_market() -> MarketData {
    let n = 60;
    let dates = business_days(chrono::NaiveDate::from_ymd_opt(2001, 1, 2).expect("valid date"), n);
    let strategies: Vec<Series> = (0..2)
        .map(|k| {
            let mu = if k == 0 { 0.2 } else { -0.2 } / 250.0;
            Series::new(
                format!("s{k}"),
                (0..n)
                    .map(|i| mu + 0.02 * (((i * (k + 2)) % 7) as f64 - 3.0) / 3.0)
                    .collect(),
            )
        })
        .collect();
    let vols = strategies
        .iter()
        .map(|s| rolling_vol(&s.values, 3).expect("window fits"))
        .collect();
    MarketData {
        dates,
        risky_name: "risky".into(),
        risky: (0..n).map(|i| 0.02 * ((i % 5) as f64 - 2.0) / 2.0).collect(),
        strategies,
        vols,
        context: vec![Series::new("c", (0..n).map(|i| (i as f64 * 0.3).sin()).collect())],
    }
}

/// Policy, exposures with exploration, costs and every reward, through the
/// tape; parameters jittered off the ReLU kinks that zero biases create.
pub fn composite_check(seed: u64, fault: Option<OpTag>) -> Result<f64> {
    let data = check_market();
    let spec = ObservationSpec {
        lags: vec![0, 1, 2, 5],
        vol_window: 3,
        context_lags: vec![0, 1, 2],
    };
    let arch = Architecture {
        asset: BranchConfig {
            filters: 2,
            kernel: 2,
            hidden: 4,
        },
        context: BranchConfig {
            filters: 1,
            kernel: 2,
            hidden: 2,
        },
        merge: 4,
        ..Architecture::default()
    };
    let net = NetworkConfig::new(arch, 2, &spec, 1)?;
    let ecfg = EpisodeConfig::default();
    let scaler = ContextScaler::fit(&data, data.len() - 1)?;
    let ep = build_episode(&data, &spec, &scaler, spec.first_usable(), data.len() - 1 - ecfg.delay(), &ecfg)?;

    let params: PolicyParams<f64> = init_params(&net, seed)?;
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let point: Vec<Tensor<f64>> = params
        .iter()
        .map(|(_, t)| {
            let data = t.data().iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
            Tensor::from_vec(t.shape(), data)
        })
        .collect::<Result<_>>()?;
    // every third date explored
    let (rows, l) = (ep.len(), 2);
    let mut mask = Tensor::filled(&[rows, l], 1.0);
    let mut random = Tensor::zeros(&[rows, l]);
    for i in (0..rows).step_by(3) {
        for j in 0..l {
            mask.data_mut()[i * l + j] = 0.0;
            random.data_mut()[i * l + j] = rng.random_range(0.0..1.5);
        }
    }
    let plan = Exploration { mask, random };

    let mut worst = 0.0f64;
    for kind in RewardKind::ALL {
        let err = grad_check_on(
            tape_with(fault),
            |tape: &mut Tape<f64>, ids: &[NodeId]| {
                let nodes = ParamNodes::from_pairs(names.iter().cloned().zip(ids.iter().copied()));
                let (port, _) = episode_returns_node(
                    tape,
                    &nodes,
                    &net,
                    &ep,
                    ep.stack.asset.clone(),
                    ep.stack.context.clone(),
                    Some(&plan),
                    &ecfg,
                )?;
                Ok(reward_node(tape, kind, port)?.node)
            },
            &point,
            STEP,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Runs every check over seeds `0..seeds`, optionally with a sign flip in
/// the backward rule of `fault`.
pub fn run_suite(seeds: u64, fault: Option<OpTag>) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::with_capacity(OP_CHECKS.len() + 1);
    for name in OP_CHECKS {
        let mut worst = 0.0f64;
        for s in 0..seeds {
            worst = worst.max(op_check(name, s, fault)?);
        }
        out.push(CheckOutcome {
            name: name.to_string(),
            worst,
        });
    }
    let mut worst = 0.0f64;
    for s in 0..seeds {
        worst = worst.max(composite_check(s, fault)?);
    }
    out.push(CheckOutcome {
        name: COMPOSITE.to_string(),
        worst,
    });
    Ok(out)
}
