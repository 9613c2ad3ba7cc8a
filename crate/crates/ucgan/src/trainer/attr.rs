use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{TrainConfig, TrainerError};
use crate::autodiff::{AdamOptimizer, Scalar, Tape, ValueId};
use crate::data::LoadedDataset;
use crate::losses::{
    adaptive_mix_on_tape, focal_loss_on_tape, locality_loss_on_tape, softargmax_on_tape,
    softmax_cross_entropy_on_tape, LossMixerState,
};
use crate::models::{
    build_attribute_classifier, AttributeKind, ForwardOpts, ModelConfig, Network, TapeBinding,
};

/// Step size of the stochastic Jacobian probe.
pub const CONTRACTIVE_SIGMA: f64 = 0.01;
/// Standard deviation of the additive pixel noise augmentation.
const NOISE_SIGMA: f64 = 0.02;
/// Maximum absolute pixel shift of the translation augmentation.
const SHIFT_MAX: i64 = 2;

const SEED_INIT: u64 = 3;
const SEED_STREAM: u64 = 0x41545452; // distinct draw stream per phase

/// Random horizontal flip, +-2px shift with zero fill, and pixel noise.
/// Draw order per sample is fixed: flip, dx, dy, then one noise value per
/// element, so equal seeds reproduce the batch exactly.
fn augment_image<T: Scalar, R: Rng>(
    img: &[T],
    c: usize,
    h: usize,
    w: usize,
    rng: &mut R,
) -> Vec<T> {
    let flip = rng.random_range(0.0..1.0) < 0.5;
    let dx = rng.random_range(-SHIFT_MAX..=SHIFT_MAX);
    let dy = rng.random_range(-SHIFT_MAX..=SHIFT_MAX);
    let mut out = Vec::with_capacity(img.len());
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sx = if flip { w as i64 - 1 - x as i64 } else { x as i64 } - dx;
                let sy = y as i64 - dy;
                let v = if (0..w as i64).contains(&sx) && (0..h as i64).contains(&sy) {
                    img[(ch * h + sy as usize) * w + sx as usize]
                } else {
                    T::ZERO
                };
                let noise: f64 = StandardNormal.sample(rng);
                out.push(v + T::from_f64(noise * NOISE_SIGMA));
            }
        }
    }
    out
}

/// Monte-Carlo estimate of the squared input-output Jacobian norm:
/// `|f(x + sigma u) - f(x)|^2 / sigma^2` averaged over the batch, with both
/// evaluations in eval mode (no dropout, stored statistics) so the probe
/// measures the deployed function. Gradients flow into the binding's
/// parameters; a constant-output network scores exactly zero.
pub fn contractive_penalty_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    net: &Network<T>,
    binding: &TapeBinding,
    x: ValueId,
    x_shifted: ValueId,
    sigma: f64,
) -> ValueId {
    assert!(sigma > 0.0);
    let b = tape.shape(x)[0];
    let mut o1 = ForwardOpts::eval();
    let (f1, _) = net.forward_multi(tape, binding, x, &mut o1);
    let mut o2 = ForwardOpts::eval();
    let (f2, _) = net.forward_multi(tape, binding, x_shifted, &mut o2);
    let mut acc: Option<ValueId> = None;
    for (&a, &bo) in f1.iter().zip(&f2) {
        let d = tape.sub(bo, a);
        let s = tape.square(d);
        let t = tape.sum_all(s);
        acc = Some(match acc {
            Some(p) => tape.add(p, t),
            None => t,
        });
    }
    let total = acc.expect("network produced no outputs");
    tape.scale(total, T::from_f64(1.0 / (sigma * sigma * b as f64)))
}

/// Trains the attribute classifier on its own: focal loss per categorical
/// head; quantized heads blend cross-entropy, soft-index regression, and
/// the locality loss through the adaptive mixer; strong input augmentation
/// plus a stochastic contractive penalty regularize the fit. Returns the
/// network together with the per-step total loss trace. The caller freezes
/// the result by binding it non-trainable from then on.
pub fn pretrain_attribute_classifier<T: Scalar>(
    data: &LoadedDataset<T>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Network<T>, Vec<f64>), TrainerError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainerError::EmptyDataset);
    }
    for attr in &model_cfg.attributes {
        if !data.attributes.contains(attr) {
            return Err(TrainerError::MissingLabels(attr.name.clone()));
        }
    }
    assert_eq!(
        model_cfg.attributes, data.attributes,
        "attribute order must match between model and dataset"
    );
    assert_eq!(model_cfg.resolution, data.resolution, "resolution mismatch");

    let mut net = build_attribute_classifier::<T>(model_cfg, cfg.seed.wrapping_add(SEED_INIT))?;
    let mut opt = AdamOptimizer::new(cfg.adam.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(SEED_STREAM));

    // one mixer + one learnable gain vector per quantized attribute
    let mut mixers: Vec<(usize, LossMixerState, Vec<T>)> = model_cfg
        .attributes
        .iter()
        .enumerate()
        .filter(|(_, a)| matches!(a.kind, AttributeKind::QuantizedContinuous { .. }))
        .map(|(i, _)| (i, LossMixerState::with_rho(3, cfg.mixer_rho), vec![T::ONE; 3]))
        .collect();

    let (res, n) = (data.resolution, data.len());
    let sample_len = 3 * res * res;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut epoch = 0u64;
    let mut losses = Vec::with_capacity(cfg.total_steps);

    for step in 1..=cfg.total_steps {
        if cursor + cfg.batch > order.len() {
            order = data.shuffled_indices(cfg.seed.wrapping_add(SEED_STREAM) ^ epoch);
            epoch += 1;
            cursor = 0;
            if cfg.batch > order.len() {
                // dataset smaller than one batch: sample with repetition
                while order.len() < cfg.batch {
                    let extra = order[rng.random_range(0..n)];
                    order.push(extra);
                }
            }
        }
        let batch_idx = &order[cursor..cursor + cfg.batch];
        cursor += cfg.batch;

        let mut aug = Vec::with_capacity(cfg.batch * sample_len);
        for &s in batch_idx {
            aug.extend(augment_image(&data.images[s], 3, res, res, &mut rng));
        }
        // per-sample unit Gaussian probe direction
        let mut shifted = aug.clone();
        for s in 0..cfg.batch {
            let mut u: Vec<f64> = (0..sample_len)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-30);
            for v in &mut u {
                *v /= norm;
            }
            for (i, v) in u.iter().enumerate() {
                shifted[s * sample_len + i] += T::from_f64(v * CONTRACTIVE_SIGMA);
            }
        }

        let mut tape = Tape::new();
        let shape = vec![cfg.batch, 3, res, res];
        let x = tape.constant(shape.clone(), aug);
        let binding = net.bind(&mut tape, true);
        let mut opts = ForwardOpts {
            train: true,
            rng: Some(&mut rng),
            attrs: None,
        };
        let (head_outs, running) = net.forward_multi(&mut tape, &binding, x, &mut opts);
        drop(opts);

        let mut total: Option<ValueId> = None;
        let mut gamma_ids: Vec<ValueId> = Vec::new();
        for (i, attr) in model_cfg.attributes.iter().enumerate() {
            let labels: Vec<usize> = batch_idx.iter().map(|&s| data.labels[s][i]).collect();
            let logits = head_outs[i];
            let term = match attr.kind {
                AttributeKind::Categorical { .. } => {
                    let probs = tape.softmax(logits);
                    focal_loss_on_tape(&mut tape, probs, &labels, cfg.focal_gamma)?
                }
                AttributeKind::QuantizedContinuous { .. } => {
                    let ce = softmax_cross_entropy_on_tape(&mut tape, logits, &labels)?;
                    let soft = softargmax_on_tape(&mut tape, logits, cfg.locality_beta);
                    let target: Vec<T> =
                        labels.iter().map(|&b| T::from_f64(b as f64)).collect();
                    let target = tape.constant(vec![cfg.batch], target);
                    let diff = tape.sub(soft, target);
                    let sq = tape.square(diff);
                    let reg = tape.mean_all(sq);
                    let loc =
                        locality_loss_on_tape(&mut tape, logits, &labels, cfg.locality_beta)?;
                    let slot = mixers
                        .iter_mut()
                        .find(|(ai, _, _)| *ai == i)
                        .expect("mixer for quantized attribute");
                    let gamma = tape.leaf_data(vec![3], slot.2.clone(), true);
                    gamma_ids.push(gamma);
                    adaptive_mix_on_tape(&mut tape, &mut slot.1, &[ce, reg, loc], gamma)?
                }
            };
            total = Some(match total {
                Some(t) => tape.add(t, term),
                None => term,
            });
        }
        let mut total = total.expect("at least one attribute");
        if cfg.contractive_weight > 0.0 {
            let xs = tape.constant(shape, shifted);
            let pen = contractive_penalty_on_tape(
                &mut tape,
                &net,
                &binding,
                x,
                xs,
                CONTRACTIVE_SIGMA,
            );
            let scaled = tape.scale(pen, T::from_f64(cfg.contractive_weight));
            total = tape.add(total, scaled);
        }

        let value = tape.scalar_value(total).to_f64();
        if !value.is_finite() {
            return Err(TrainerError::NonFiniteLoss {
                step,
                detail: format!("classifier loss {value}"),
            });
        }
        losses.push(value);

        let grads = tape.backward(total)?;
        let net_grads = net.collect_grads(&grads, &binding);
        let gamma_grads: Vec<Vec<T>> =
            gamma_ids.iter().map(|&g| grads.dense(g, 3)).collect();

        opt.begin_step();
        net.apply_grads(&mut opt, &net_grads)?;
        for ((ai, _, gamma_buf), g) in mixers.iter_mut().zip(&gamma_grads) {
            opt.update(
                &format!("A/mix_{}/gamma", model_cfg.attributes[*ai].name),
                gamma_buf,
                g,
            )?;
        }
        net.apply_running_updates(&running);
    }
    Ok((net, losses))
}

/// Fraction of samples whose argmax prediction matches the label, one value
/// per attribute, evaluated frozen in chunks.
pub fn classifier_accuracy<T: Scalar>(
    net: &Network<T>,
    data: &LoadedDataset<T>,
    indices: &[usize],
) -> Vec<f64> {
    assert!(!indices.is_empty());
    let n_attr = data.attributes.len();
    let res = data.resolution;
    let mut correct = vec![0usize; n_attr];
    for chunk in indices.chunks(32) {
        let mut flat = Vec::with_capacity(chunk.len() * 3 * res * res);
        for &s in chunk {
            flat.extend_from_slice(&data.images[s]);
        }
        let mut tape = Tape::new();
        let x = tape.constant(vec![chunk.len(), 3, res, res], flat);
        let outs = net.eval_multi(&mut tape, x);
        for (ai, &out) in outs.iter().enumerate() {
            let k = tape.shape(out)[1];
            let vals = tape.value(out);
            for (row, &s) in chunk.iter().enumerate() {
                let logits = &vals[row * k..(row + 1) * k];
                let pred = logits
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                if pred == data.labels[s][ai] {
                    correct[ai] += 1;
                }
            }
        }
    }
    correct
        .iter()
        .map(|&c| c as f64 / indices.len() as f64)
        .collect()
}
