//! Central finite-difference check of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::seed::mix_seed;

use super::model::{backward, forward, init_params, total_loss, NetInput, NetParams};
use super::{NetConfig, Streams, Variant, CONF_WIDTH};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor so parameters with vanishing gradients are compared
/// absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub label: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn loss_of(params: &NetParams, input: &NetInput, label: usize) -> Result<f64> {
    let out = forward(params, input)?;
    Ok(total_loss(&out, label, &params.config)?.total)
}

/// Compares every parameter's analytic gradient against
/// `(L(p + eps) - L(p - eps)) / 2 eps`.
pub fn check_gradients(
    params: &NetParams,
    input: &NetInput,
    label: usize,
    eps: f64,
    name: &str,
) -> Result<GradCheckReport> {
    let out = forward(params, input)?;
    let analytic = backward(params, &out, label);
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let flat_grads: Vec<Vec<f64>> = analytic.tensors().into_iter().map(|(_, t)| t.to_vec()).collect();

    let mut probe = params.clone();
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for (t, tensor_name) in names.iter().enumerate() {
        let len = flat_grads[t].len();
        for i in 0..len {
            let orig = probe.tensors_mut()[t][i];
            probe.tensors_mut()[t][i] = orig + eps;
            let plus = loss_of(&probe, input, label)?;
            probe.tensors_mut()[t][i] = orig - eps;
            let minus = loss_of(&probe, input, label)?;
            probe.tensors_mut()[t][i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(flat_grads[t][i], numeric);
            checked += 1;
            if err > worst.0 || worst.1.is_empty() {
                worst = (err, format!("{tensor_name}[{i}]"));
            }
        }
    }
    Ok(GradCheckReport {
        label: name.to_string(),
        checked,
        max_rel_error: worst.0,
        worst: worst.1,
    })
}

/// A small network of the given variant with randomized biases and a random
/// input, so that no gradient is trivially zero.
pub fn toy_instance(variant: Variant, seed: u64) -> Result<(NetParams, NetInput, usize)> {
    let base = NetConfig {
        input_h: 8,
        input_w: 8,
        conv_channels: vec![3, 4],
        n1: 6,
        n3: 4,
        streams: Streams::ALL,
        aux_losses: true,
    };
    let config = variant.apply(&base);
    let mut params = init_params(&config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x6763));
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let n = 3 * config.input_h * config.input_w;
    let mut conf = [0.0; CONF_WIDTH];
    for c in &mut conf {
        *c = rng.gen_range(0.0..=1.0);
    }
    let input = NetInput {
        img: (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        pb: (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        conf,
    };
    let label = rng.gen_range(0..config.n3);
    Ok((params, input, label))
}

/// Checks `count` seeded toy networks, cycling through every variant.
pub fn run_suite(seed: u64, count: usize) -> Result<Vec<GradCheckReport>> {
    (0..count)
        .map(|k| {
            let variant = Variant::ALL[k % Variant::ALL.len()];
            let s = mix_seed(seed, k as u64);
            let (params, input, label) = toy_instance(variant, s)?;
            check_gradients(&params, &input, label, DEFAULT_EPSILON, &format!("{variant}#{k}"))
        })
        .collect()
}
