//! Training, evaluation, and gradient verification.

use super::{Gradients, Network};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;
use rayon::prelude::*;

/// Loss used by [`gradient_check`]; training always uses softmax
/// cross-entropy.
pub enum LossKind<'a> {
    /// Mean softmax cross-entropy against integer labels.
    SoftmaxCrossEntropy(&'a [u16]),
    /// Mean `0.5*||logits - target||^2`; targets are `N×num_classes`
    /// row-major. Quadratic in the logits, so central differences are
    /// exact for linear networks.
    Quadratic(&'a [f32]),
}

/// Numerically stable softmax cross-entropy for one sample.
/// Returns `(loss, dloss/dlogits)`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() + m - logits[label];
    let mut grad: Vec<f64> = exps.iter().map(|&e| e / z).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

fn sample_loss(
    net: &Network,
    images: &Tensor,
    loss: &LossKind,
    i: usize,
    want_grads: bool,
) -> (f64, Option<Gradients>) {
    let (inputs, logits) = net.forward_recorded(images.slice(i));
    let (loss_val, dlogits) = match loss {
        LossKind::SoftmaxCrossEntropy(labels) => softmax_cross_entropy(&logits, labels[i] as usize),
        LossKind::Quadratic(targets) => {
            let row = &targets[i * logits.len()..(i + 1) * logits.len()];
            let d: Vec<f64> = logits.iter().zip(row).map(|(&l, &t)| l - t as f64).collect();
            let loss_val = 0.5 * d.iter().map(|v| v * v).sum::<f64>();
            (loss_val, d)
        }
    };
    if !want_grads {
        return (loss_val, None);
    }
    let mut grads = Gradients::zeros_like(net);
    net.backward(&inputs, &dlogits, &mut grads);
    (loss_val, Some(grads))
}

/// Mean loss over a batch of sample indices (no gradients).
fn mean_loss(net: &Network, images: &Tensor, loss: &LossKind, indices: &[usize]) -> f64 {
    let total: f64 = indices
        .iter()
        .map(|&i| sample_loss(net, images, loss, i, false).0)
        .sum();
    total / indices.len() as f64
}

/// Mean loss and mean gradients over the given samples. Per-sample work
/// runs in parallel; the reduction folds in index order so results do not
/// depend on the thread count.
pub(crate) fn batch_loss_and_grads(
    net: &Network,
    images: &Tensor,
    loss: &LossKind,
    indices: &[usize],
) -> (f64, Gradients) {
    let per_sample: Vec<(f64, Option<Gradients>)> = indices
        .par_iter()
        .map(|&i| sample_loss(net, images, loss, i, true))
        .collect();
    let mut total = 0.0;
    let mut grads = Gradients::zeros_like(net);
    for (l, g) in &per_sample {
        total += l;
        grads.add_assign(g.as_ref().unwrap());
    }
    let inv = 1.0 / indices.len() as f64;
    grads.scale(inv);
    (total * inv, grads)
}

/// One epoch of mini-batch SGD on softmax cross-entropy. Shuffling is
/// deterministic in `seed`; pruning masks are reapplied after every step.
/// Returns the mean loss over the epoch.
pub fn train_epoch(
    net: &mut Network,
    train: &Dataset,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    if lr < 0.0 {
        return Err(Error::Config("learning rate must be >= 0".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = stream(seed, "epoch-shuffle");
    for i in (1..order.len()).rev() {
        let j = rand::Rng::random_range(&mut rng, 0..=i);
        order.swap(i, j);
    }
    let loss_kind = LossKind::SoftmaxCrossEntropy(&train.labels);
    let mut total_loss = 0.0;
    for (batch_index, chunk) in order.chunks(batch_size).enumerate() {
        let (loss, grads) = batch_loss_and_grads(net, &train.images, &loss_kind, chunk);
        if !loss.is_finite() {
            let layer = first_non_finite_layer(net, &train.images, chunk);
            return Err(Error::Numeric(format!(
                "non-finite loss at batch {batch_index} (first offending layer: {layer})"
            )));
        }
        total_loss += loss * chunk.len() as f64;
        for (layer, grad) in net.layers.iter_mut().zip(&grads.layers) {
            for (w, &g) in layer.weights.iter_mut().zip(&grad.dw) {
                *w = (*w as f64 - lr * g) as f32;
            }
            for (b, &g) in layer.biases.iter_mut().zip(&grad.db) {
                *b = (*b as f64 - lr * g) as f32;
            }
            layer.enforce_mask();
        }
    }
    Ok(total_loss / train.len() as f64)
}

/// Locates the first layer whose forward output goes non-finite over the
/// given samples (diagnostic for training aborts).
fn first_non_finite_layer(net: &Network, images: &Tensor, indices: &[usize]) -> String {
    for &i in indices {
        let mut cur: Vec<f64> = images.slice(i).iter().map(|&v| v as f64).collect();
        for (li, layer) in net.layers.iter().enumerate() {
            cur = super::layer_forward(layer, &cur);
            if cur.iter().any(|v| !v.is_finite()) {
                return format!("{li}");
            }
        }
    }
    "unknown".into()
}

/// Top-1 accuracy on `data`. Samples evaluate independently (and in
/// parallel), so the result is invariant to batch partitioning.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("evaluate: empty dataset".into()));
    }
    let correct: usize = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let logits = net
                .forward_sample(data.images.slice(i))
                .expect("shapes validated");
            let pred = argmax(&logits);
            usize::from(pred == data.labels[i] as usize)
        })
        .sum();
    Ok(correct as f64 / data.len() as f64)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Compares analytic gradients against central finite differences over a
/// deterministic subset of weights and biases. Returns the worst relative
/// error observed.
pub fn gradient_check(net: &Network, images: &Tensor, loss: LossKind, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::Config("epsilon must be in (0, 1e-2]".into()));
    }
    let indices: Vec<usize> = (0..images.outer()).collect();
    let (_, analytic) = batch_loss_and_grads(net, images, &loss, &indices);

    let mut worst: f64 = 0.0;
    let mut probe = net.clone();
    for li in 0..net.layers.len() {
        let wl = net.layers[li].weights.len();
        if wl == 0 {
            continue;
        }
        for &wi in pick_indices(wl, 24).iter() {
            let orig = net.layers[li].weights[wi];
            probe.layers[li].weights[wi] = (orig as f64 + epsilon) as f32;
            let up = mean_loss(&probe, images, &loss, &indices);
            probe.layers[li].weights[wi] = (orig as f64 - epsilon) as f32;
            let down = mean_loss(&probe, images, &loss, &indices);
            probe.layers[li].weights[wi] = orig;
            let fd = (up - down) / (2.0 * epsilon);
            worst = worst.max(rel_err(analytic.layers[li].dw[wi], fd));
        }
        for &bi in pick_indices(net.layers[li].biases.len(), 4).iter() {
            let orig = net.layers[li].biases[bi];
            probe.layers[li].biases[bi] = (orig as f64 + epsilon) as f32;
            let up = mean_loss(&probe, images, &loss, &indices);
            probe.layers[li].biases[bi] = (orig as f64 - epsilon) as f32;
            let down = mean_loss(&probe, images, &loss, &indices);
            probe.layers[li].biases[bi] = orig;
            let fd = (up - down) / (2.0 * epsilon);
            worst = worst.max(rel_err(analytic.layers[li].db[bi], fd));
        }
    }
    Ok(worst)
}

/// Up to `count` indices spread evenly over `len` items.
fn pick_indices(len: usize, count: usize) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    if len <= count {
        return (0..len).collect();
    }
    (0..count).map(|i| i * len / count).collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-7 {
        // both effectively zero: agreement
        return (a - b).abs();
    }
    (a - b).abs() / denom
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SplitTag;
    use crate::nn::{LayerDef, Network};

    fn toy_dataset(net: &Network, n: usize, seed: u64) -> Dataset {
        let len = net.input_len();
        let mut rng = stream(seed, "toy-data");
        let data: Vec<f32> = (0..n * len)
            .map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0))
            .collect();
        let labels: Vec<u16> = (0..n).map(|i| (i % net.num_classes) as u16).collect();
        Dataset {
            images: Tensor::new(vec![n, net.input_c, net.input_h, net.input_w], data).unwrap(),
            labels,
            num_classes: net.num_classes,
            split_tag: SplitTag::Train,
        }
    }

    #[test]
    fn zero_lr_leaves_weights_unchanged() {
        let mut net = Network::conv3((1, 10, 10), 4).unwrap();
        net.init_weights(3);
        let data = toy_dataset(&net, 12, 5);
        let before: Vec<Vec<f32>> = net.layers.iter().map(|l| l.weights.clone()).collect();
        train_epoch(&mut net, &data, 0.0, 4, 7).unwrap();
        let after: Vec<Vec<f32>> = net.layers.iter().map(|l| l.weights.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn single_dense_step_matches_hand_gradient() {
        // one dense layer 3 -> 2, one sample, label 0:
        // dL/dW[o][i] = (softmax_o - onehot_o) * x_i
        let mut net = Network::chain((3, 1, 1), &[LayerDef::Dense { n: 2 }]).unwrap();
        net.layers[0].weights = vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.1];
        net.layers[0].biases = vec![0.05, -0.05];
        let x = [0.5f32, -1.0, 0.25];
        let data = Dataset {
            images: Tensor::new(vec![1, 3, 1, 1], x.to_vec()).unwrap(),
            labels: vec![0],
            num_classes: 2,
            split_tag: SplitTag::Train,
        };
        let logits = net.forward_sample(&x).unwrap();
        let (_, dlogits) = softmax_cross_entropy(&logits, 0);
        let lr = 0.2;
        let before = net.layers[0].weights.clone();
        train_epoch(&mut net, &data, lr, 1, 0).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                let expect = (before[o * 3 + i] as f64 - lr * dlogits[o] * x[i] as f64) as f32;
                assert!(
                    (net.layers[0].weights[o * 3 + i] - expect).abs() < 1e-7,
                    "weight ({o},{i})"
                );
            }
        }
    }

    #[test]
    fn loss_decreases_on_separable_toy_set() {
        let mut net = Network::chain((2, 1, 1), &[LayerDef::Dense { n: 2 }]).unwrap();
        net.init_weights(1);
        let data = Dataset {
            images: Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            labels: vec![0, 1],
            num_classes: 2,
            split_tag: SplitTag::Train,
        };
        let idx = [0usize, 1];
        let before = mean_loss(&net, &data.images, &LossKind::SoftmaxCrossEntropy(&data.labels), &idx);
        let reported = train_epoch(&mut net, &data, 0.5, 2, 0).unwrap();
        let after = mean_loss(&net, &data.images, &LossKind::SoftmaxCrossEntropy(&data.labels), &idx);
        assert!(after <= before, "{after} vs {before}");
        assert!(reported <= before + 1e-12);
    }

    #[test]
    fn evaluate_matches_counts() {
        let mut net = Network::chain((2, 1, 1), &[LayerDef::Dense { n: 4 }]).unwrap();
        net.layers[0].biases = vec![1.0, 0.0, 0.0, 0.0]; // always predicts class 0
        let all_zero = Dataset {
            images: Tensor::zeros(vec![6, 2, 1, 1]),
            labels: vec![0; 6],
            num_classes: 4,
            split_tag: SplitTag::Val,
        };
        assert_eq!(evaluate(&net, &all_zero).unwrap(), 1.0);
        let balanced = Dataset {
            images: Tensor::zeros(vec![8, 2, 1, 1]),
            labels: (0..8).map(|i| (i % 4) as u16).collect(),
            num_classes: 4,
            split_tag: SplitTag::Val,
        };
        assert_eq!(evaluate(&net, &balanced).unwrap(), 0.25);
    }

    #[test]
    fn evaluate_rejects_empty() {
        let net = Network::chain((2, 1, 1), &[LayerDef::Dense { n: 2 }]).unwrap();
        let empty = Dataset {
            images: Tensor::zeros(vec![0, 2, 1, 1]),
            labels: vec![],
            num_classes: 2,
            split_tag: SplitTag::Val,
        };
        assert!(evaluate(&net, &empty).is_err());
    }

    #[test]
    fn evaluate_is_partition_invariant() {
        let mut net = Network::conv3((1, 10, 10), 4).unwrap();
        net.init_weights(2);
        let data = toy_dataset(&net, 17, 8);
        let full = evaluate(&net, &data).unwrap();
        let mut correct = 0usize;
        for i in 0..data.len() {
            // batch size 1
            let one = data.subset(&[i]);
            correct += (evaluate(&net, &one).unwrap() * 1.0).round() as usize;
        }
        assert!((full - correct as f64 / data.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn gradient_check_linear_quadratic_is_exact() {
        let mut net = Network::chain((4, 1, 1), &[LayerDef::Dense { n: 3 }]).unwrap();
        net.init_weights(4);
        let images = Tensor::new(vec![2, 4, 1, 1], vec![0.3, -0.2, 0.9, 0.1, -0.5, 0.4, 0.0, 0.7])
            .unwrap();
        let targets: Vec<f32> = vec![0.1, -0.3, 0.2, 0.0, 0.5, -0.1];
        let err = gradient_check(&net, &images, LossKind::Quadratic(&targets), 1e-3).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn gradient_check_full_conv_net() {
        let mut net = Network::conv3((1, 10, 10), 4).unwrap();
        net.init_weights(5);
        let data = toy_dataset(&net, 3, 6);
        let err = gradient_check(
            &net,
            &data.images,
            LossKind::SoftmaxCrossEntropy(&data.labels),
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn zero_input_conv_has_zero_weight_gradient() {
        let mut net = Network::chain(
            (1, 6, 6),
            &[
                LayerDef::Conv { n: 2, k: 3, stride: 1 },
                LayerDef::Flatten,
                LayerDef::Dense { n: 2 },
            ],
        )
        .unwrap();
        net.init_weights(9);
        net.layers[0].biases = vec![0.0, 0.0];
        let images = Tensor::zeros(vec![2, 1, 6, 6]);
        let labels = vec![0u16, 1];
        let (_, grads) = batch_loss_and_grads(
            &net,
            &images,
            &LossKind::SoftmaxCrossEntropy(&labels),
            &[0, 1],
        );
        assert!(grads.layers[0].dw.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut net = Network::conv3((1, 10, 10), 4).unwrap();
            net.init_weights(3);
            let data = toy_dataset(&net, 24, 5);
            for epoch in 0..3 {
                train_epoch(&mut net, &data, 0.05, 8, 100 + epoch).unwrap();
            }
            net.layers
                .iter()
                .flat_map(|l| l.weights.iter().map(|w| w.to_bits()))
                .collect::<Vec<u32>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn masked_weights_stay_zero_through_training() {
        let mut net = Network::conv3((1, 10, 10), 4).unwrap();
        net.init_weights(3);
        let wl = net.layers[0].weights.len();
        let mut mask = vec![1u8; wl];
        for m in mask.iter_mut().take(wl / 2) {
            *m = 0;
        }
        net.layers[0].apply_mask(mask.clone()).unwrap();
        let data = toy_dataset(&net, 16, 5);
        for epoch in 0..3 {
            train_epoch(&mut net, &data, 0.1, 4, epoch).unwrap();
        }
        for (w, m) in net.layers[0].weights.iter().zip(&mask) {
            if *m == 0 {
                assert_eq!(*w, 0.0);
            } else {
                assert_ne!(*w, 0.0);
            }
        }
    }
}
