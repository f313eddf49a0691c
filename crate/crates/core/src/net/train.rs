use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::seed::mix_seed;

use super::model::{backward_into, forward, init_params, total_loss, NetInput, NetParams};
use super::{NetConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub input: NetInput,
    /// Class index in `0..n3`.
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub params: NetParams,
    /// Mean total loss over each epoch's mini-batches.
    pub loss_history: Vec<f64>,
}

/// Step schedule: `lr0 * 10^-(epoch / decay_every)`.
pub fn learning_rate(lr0: f64, decay_every: usize, epoch: usize) -> f64 {
    lr0 * 10f64.powi(-((epoch / decay_every.max(1)) as i32))
}

/// Plain mini-batch SGD over shuffled samples. Fully determined by
/// `(config, train, samples, seed)`.
pub fn train(config: &NetConfig, train: &TrainConfig, samples: &[TrainSample], seed: u64) -> Result<TrainResult> {
    config.validate()?;
    train.validate()?;
    if samples.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.label >= config.n3) {
        return Err(Error::Argument(format!(
            "label {} out of range for {} classes",
            s.label, config.n3
        )));
    }
    let mut params = init_params(config, seed)?;
    let mut grads = params.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x7261_696e));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(train.epochs);

    for epoch in 0..train.epochs {
        let lr = learning_rate(train.lr0, train.lr_decay_every, epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(train.batch_size).enumerate() {
            for t in grads.tensors_mut() {
                t.fill(0.0);
            }
            for &i in batch {
                let sample = &samples[i];
                let out = forward(&params, &sample.input)?;
                let loss = total_loss(&out, sample.label, config)?.total;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                        loss,
                    });
                }
                epoch_loss += loss;
                backward_into(&params, &out, sample.label, &mut grads);
            }
            let step = lr / batch.len() as f64;
            for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors_mut()) {
                for (pv, gv) in p.iter_mut().zip(g.iter()) {
                    *pv -= step * gv;
                }
            }
        }
        history.push(epoch_loss / samples.len() as f64);
    }
    if !params.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: train.epochs,
            batch: 0,
            loss: f64::NAN,
        });
    }
    Ok(TrainResult {
        params,
        loss_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Streams, CONF_WIDTH};

    #[test]
    fn schedule_drops_tenfold() {
        assert_eq!(learning_rate(0.01, 6, 0), 0.01);
        assert!((learning_rate(0.01, 6, 5) - 0.01).abs() < 1e-18);
        assert!((learning_rate(0.01, 6, 6) - 0.001).abs() < 1e-18);
        assert!((learning_rate(0.01, 6, 12) - 0.0001).abs() < 1e-18);
    }

    fn separable(cfg: &NetConfig) -> Vec<TrainSample> {
        let n = 3 * cfg.input_h * cfg.input_w;
        (0..8)
            .map(|i| {
                let label = i % 2;
                let base = if label == 0 { -0.4 } else { 0.4 };
                let jitter = (i as f64) * 0.01;
                TrainSample {
                    input: NetInput {
                        img: vec![base + jitter; n],
                        pb: vec![-base - jitter; n],
                        conf: [1.0; CONF_WIDTH],
                    },
                    label,
                }
            })
            .collect()
    }

    fn tiny() -> NetConfig {
        NetConfig {
            input_h: 8,
            input_w: 8,
            conv_channels: vec![4, 4],
            n1: 8,
            n3: 2,
            streams: Streams::ALL,
            aux_losses: true,
        }
    }

    #[test]
    fn converges_on_separable_data() {
        let cfg = tiny();
        let tc = TrainConfig {
            epochs: 50,
            lr0: 0.05,
            lr_decay_every: 25,
            batch_size: 4,
        };
        let r = train(&cfg, &tc, &separable(&cfg), 1).unwrap();
        let first = r.loss_history[0];
        let last = *r.loss_history.last().unwrap();
        assert!(last < 0.1 * first, "{first} -> {last}");
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny();
        let tc = TrainConfig {
            epochs: 4,
            lr0: 0.05,
            lr_decay_every: 2,
            batch_size: 3,
        };
        let data = separable(&cfg);
        let a = train(&cfg, &tc, &data, 7).unwrap();
        let b = train(&cfg, &tc, &data, 7).unwrap();
        let bits = |h: &[f64]| h.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.loss_history), bits(&b.loss_history));
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let cfg = tiny();
        let tc = TrainConfig {
            epochs: 3,
            lr0: 0.05,
            lr_decay_every: 3,
            batch_size: 8,
        };
        let mut data = separable(&cfg);
        data[5].input.conf[0] = f64::NAN;
        assert!(matches!(
            train(&cfg, &tc, &data, 1),
            Err(Error::NonFiniteLoss { epoch: 0, .. })
        ));
    }

    #[test]
    fn rejects_bad_labels_and_empty_sets() {
        let cfg = tiny();
        let tc = TrainConfig::default();
        assert!(train(&cfg, &tc, &[], 0).is_err());
        let mut data = separable(&cfg);
        data[0].label = 2;
        assert!(train(&cfg, &tc, &data, 0).is_err());
    }
}
