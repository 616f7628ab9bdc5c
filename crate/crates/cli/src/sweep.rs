//! Finite-difference sweeps behind `opunet gradcheck`.

use opunet::gradcheck::{check, Group, GroupReport, FD_STEP};
use opunet::layers::LayerVars;
use opunet::model::ModelVars;
use opunet::{
    OpUNet, OpUNetConfig, OperationalConv2D, Result, Rule, Tape, Tensor,
    TransposedOperationalConv2D, Var,
};
use rand::{RngExt, SeedableRng};
use rand_xoshiro::SplitMix64;

pub const LAYER_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;
pub const LAYER_Q: [usize; 3] = [1, 2, 3];
pub const LAYER_KERNELS: [usize; 4] = [1, 3, 5, 6];
pub const LAYER_STRIDES: [usize; 2] = [1, 2];
pub const MODEL_WIDTHS: [usize; 5] = [2, 3, 4, 5, 6];
pub const MODEL_SIZE: usize = 32;

fn uniform(shape: &[usize], half_width: f64, rng: &mut SplitMix64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| rng.random_range(-half_width..half_width))
            .collect(),
    )
    .expect("length matches shape")
}

fn weighted_sum(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let r = tape.constant(weights.clone());
    let prod = tape.mul(y, r)?;
    tape.sum(prod)
}

fn prefixed(prefix: &str, reports: Vec<GroupReport>) -> Vec<GroupReport> {
    reports
        .into_iter()
        .map(|r| GroupReport {
            name: format!("{prefix} {}", r.name),
            ..r
        })
        .collect()
}

/// Both layer types over every (Q, kernel, stride) combination; groups are
/// weights, bias and input of each layer.
pub fn layer_sweep(seed: u64, fault: Option<(Rule, f64)>) -> Result<Vec<GroupReport>> {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut reports = Vec::new();
    for q in LAYER_Q {
        for k in LAYER_KERNELS {
            for s in LAYER_STRIDES {
                let p = (k - 1) / 2;
                let mut conv = OperationalConv2D::<f64>::new(2, 3, k, q, s, p)?;
                conv.init_params(rng.random());
                conv.bias = uniform(&[3], 0.3, &mut rng);
                let x = uniform(&[2, 2, 6, 6], 1.0, &mut rng);
                let out = conv.output_size(6)?;
                let r = uniform(&[2, 3, out, out], 1.0, &mut rng);
                let groups = [
                    Group::new("weights", conv.weights.clone()),
                    Group::new("bias", conv.bias.clone()),
                    Group::new("input", x),
                ];
                let res = check(&groups, FD_STEP, fault, |t, v| {
                    let y = conv.forward(
                        t,
                        LayerVars {
                            weights: v[0],
                            bias: v[1],
                        },
                        v[2],
                    )?;
                    weighted_sum(t, y, &r)
                })?;
                reports.extend(prefixed(&format!("conv q={q} k={k} s={s}"), res));

                let op = (s + 2 * p).saturating_sub(k).min(s - 1);
                let mut tr = TransposedOperationalConv2D::<f64>::new(3, 2, k, q, s, p, op)?;
                tr.init_params(rng.random());
                tr.bias = uniform(&[2], 0.3, &mut rng);
                let x = uniform(&[2, 3, 3, 3], 1.0, &mut rng);
                let out = tr.output_size(3)?;
                let r = uniform(&[2, 2, out, out], 1.0, &mut rng);
                let groups = [
                    Group::new("weights", tr.weights.clone()),
                    Group::new("bias", tr.bias.clone()),
                    Group::new("input", x),
                ];
                let res = check(&groups, FD_STEP, fault, |t, v| {
                    let y = tr.forward(
                        t,
                        LayerVars {
                            weights: v[0],
                            bias: v[1],
                        },
                        v[2],
                    )?;
                    weighted_sum(t, y, &r)
                })?;
                reports.extend(prefixed(&format!("transposed q={q} k={k} s={s}"), res));
            }
        }
    }
    Ok(reports)
}

/// The reduced network under BCE loss; one group per parameter tensor plus the input.
pub fn model_sweep(seed: u64, fault: Option<(Rule, f64)>) -> Result<Vec<GroupReport>> {
    let config = OpUNetConfig::reduced(MODEL_WIDTHS, MODEL_SIZE);
    let model = OpUNet::<f64>::build(&config, seed)?;
    let mut rng = SplitMix64::seed_from_u64(seed ^ 0x5eed);
    let x = uniform(&[1, 3, MODEL_SIZE, MODEL_SIZE], 1.0, &mut rng);
    let target = Tensor::from_fn([1, 1, MODEL_SIZE, MODEL_SIZE], |_| {
        (rng.random::<f64>() < 0.3) as u8 as f64
    });

    let mut groups: Vec<Group> = model
        .param_names()
        .into_iter()
        .zip(model.params())
        .map(|(n, p)| Group::new(n, p.clone()))
        .collect();
    groups.push(Group::new("input", x));
    let layers = model.params().len() / 2;
    check(&groups, FD_STEP, fault, |t, v| {
        let pairs: Vec<LayerVars> = v[..2 * layers]
            .chunks(2)
            .map(|c| LayerVars {
                weights: c[0],
                bias: c[1],
            })
            .collect();
        let half = layers / 2;
        let vars = ModelVars {
            encoder: pairs[..half].to_vec(),
            decoder: pairs[half..].to_vec(),
        };
        let y = model.forward_on(t, &vars, v[2 * layers])?;
        t.bce_loss(y, &target)
    })
}
