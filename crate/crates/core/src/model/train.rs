use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use super::layers::{softmax_rows, tanh_backward, Linear, Sgd};
use super::{AugmentedBatch, LossKind, ModelConfig, ModelState};
use crate::datasets::FeatureMatrix;
use crate::error::{Error, Result};
use crate::rng::{self, streams};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean training loss of each epoch.
    pub loss_history: Vec<f64>,
    /// Final cross-entropy of the classifier on the training features.
    pub classifier_loss: f64,
    pub warnings: Vec<String>,
}

/// Fresh model trained on `labeled`.
pub fn train(config: &ModelConfig, labeled: &FeatureMatrix, loss: LossKind) -> Result<(ModelState, TrainReport)> {
    let mut state = ModelState::new(config.clone())?;
    let report = state.fit(labeled, loss)?;
    Ok((state, report))
}

impl ModelState {
    /// Train in place.
    ///
    /// Contrastive mode runs minibatch SGD on the contrastive loss over the
    /// encoder and projection head, then fits the classifier on frozen
    /// features with full-batch gradient descent. Cross-entropy mode trains
    /// encoder and classifier jointly.
    pub fn fit(&mut self, labeled: &FeatureMatrix, loss: LossKind) -> Result<TrainReport> {
        let labels = labeled.require_labels()?;
        if labeled.d() != self.config.d_in {
            return Err(Error::shape(format!("input dimension {}", self.config.d_in), labeled.d()));
        }
        if labeled.is_empty() {
            return Err(Error::Usage("cannot train on an empty labeled set".into()));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= self.config.classes) {
            return Err(Error::Usage(format!("label {y} outside [0, {})", self.config.classes)));
        }
        let mut report = TrainReport::default();
        match loss {
            LossKind::Contrastive => {
                let mut counts = BTreeMap::new();
                for &y in labels {
                    *counts.entry(y).or_insert(0usize) += 1;
                }
                for (y, _) in counts.iter().filter(|(_, &c)| c == 1) {
                    let msg = format!("class {y} has a single labeled sample; its only positive is its own second view");
                    log::warn!("{msg}");
                    report.warnings.push(msg);
                }
                self.fit_contrastive(labeled, labels, &mut report)?;
                let features = self.encode(labeled)?.to_dmatrix();
                let mut classifier = Linear::zeros(self.config.d_feat, self.config.classes);
                report.classifier_loss = fit_classifier(&mut classifier, &features, labels, &self.config);
                self.classifier = Some(classifier);
            }
            LossKind::CrossEntropy => {
                self.fit_cross_entropy(labeled, labels, &mut report)?;
                let features = self.encode(labeled)?.to_dmatrix();
                let classifier = self.classifier.as_ref().expect("set by cross-entropy training");
                report.classifier_loss = cross_entropy(&softmax_rows(&classifier.forward(&features)), labels);
            }
        }
        self.trained_loss = Some(loss);
        if !self.weights_finite() {
            return Err(Error::Contract("training produced non-finite weights".into()));
        }
        Ok(report)
    }

    fn learning_rate(&self, epoch: usize) -> f64 {
        match self.config.lr_decay_epoch {
            Some(e) if epoch >= e => self.config.lr * 0.1,
            _ => self.config.lr,
        }
    }

    fn fit_contrastive(&mut self, labeled: &FeatureMatrix, labels: &[usize], report: &mut TrainReport) -> Result<()> {
        let seed = self.config.seed;
        let mut shuffle_rng = rng::stream(seed, streams::SHUFFLE);
        let mut aug_rng = rng::stream(seed, streams::AUGMENT);
        let mut opt = Sgd::new(self.config.momentum, self.config.weight_decay);
        let x = labeled.to_dmatrix();
        let mut order: Vec<usize> = (0..labeled.n()).collect();
        for epoch in 0..self.config.epochs {
            order.shuffle(&mut shuffle_rng);
            let lr = self.learning_rate(epoch);
            let (mut total, mut rows) = (0.0, 0usize);
            for chunk in order.chunks(self.config.batch_size) {
                let source = x.select_rows(chunk);
                let chunk_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let batch = AugmentedBatch::jittered(&source, &chunk_labels, self.config.aug_sigma, &mut aug_rng);
                let (loss, mut grads) = self.contrastive_loss_and_grad(&batch.rows, &batch.labels)?;
                let scale = 1.0 / batch.len() as f64;
                grads.iter_mut().flatten().for_each(|g| *g *= scale);
                total += loss;
                rows += batch.len();
                opt.step(
                    lr,
                    self.contrastive_parameters_mut(),
                    grads.iter().map(Vec::as_slice).collect(),
                );
            }
            report.loss_history.push(total / rows.max(1) as f64);
        }
        Ok(())
    }

    fn fit_cross_entropy(&mut self, labeled: &FeatureMatrix, labels: &[usize], report: &mut TrainReport) -> Result<()> {
        let seed = self.config.seed;
        let mut shuffle_rng = rng::stream(seed, streams::SHUFFLE);
        let mut aug_rng = rng::stream(seed, streams::AUGMENT);
        let mut init_rng = rng::stream(seed, streams::INIT + 100);
        let mut classifier = Linear::glorot(self.config.d_feat, self.config.classes, &mut init_rng);
        let mut opt = Sgd::new(self.config.momentum, self.config.weight_decay);
        let x = labeled.to_dmatrix();
        let mut order: Vec<usize> = (0..labeled.n()).collect();
        for epoch in 0..self.config.epochs {
            order.shuffle(&mut shuffle_rng);
            let lr = self.learning_rate(epoch);
            let (mut total, mut rows) = (0.0, 0usize);
            for chunk in order.chunks(self.config.batch_size) {
                let mut source = x.select_rows(chunk);
                source.apply(|v| {
                    let e: f64 = StandardNormal.sample(&mut aug_rng);
                    *v += self.config.aug_sigma * e;
                });
                let chunk_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let trace = self.encode_trace(source, None);
                let probs = softmax_rows(&classifier.forward(&trace.features));
                total += cross_entropy(&probs, &chunk_labels) * chunk.len() as f64;
                rows += chunk.len();
                let grad_logits = ce_grad(&probs, &chunk_labels);
                let (g_cls, grad_features) = classifier.backward(&trace.features, &grad_logits);
                let (g_out, grad_hidden) = self.encoder_out.backward(&trace.hidden, &grad_features);
                let grad_pre = tanh_backward(&trace.hidden, &grad_hidden);
                let (g_hidden, _) = self.encoder_hidden.backward(&trace.input, &grad_pre);
                opt.step(
                    lr,
                    vec![
                        self.encoder_hidden.weight.as_mut_slice(),
                        self.encoder_hidden.bias.as_mut_slice(),
                        self.encoder_out.weight.as_mut_slice(),
                        self.encoder_out.bias.as_mut_slice(),
                        classifier.weight.as_mut_slice(),
                        classifier.bias.as_mut_slice(),
                    ],
                    vec![
                        g_hidden.weight.as_slice(),
                        g_hidden.bias.as_slice(),
                        g_out.weight.as_slice(),
                        g_out.bias.as_slice(),
                        g_cls.weight.as_slice(),
                        g_cls.bias.as_slice(),
                    ],
                );
            }
            report.loss_history.push(total / rows.max(1) as f64);
        }
        self.classifier = Some(classifier);
        Ok(())
    }
}

/// Mean cross-entropy gradient w.r.t. logits: `(p - onehot) / n`.
fn ce_grad(probs: &DMatrix<f64>, labels: &[usize]) -> DMatrix<f64> {
    let n = probs.nrows() as f64;
    let mut g = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        g[(i, y)] -= 1.0;
    }
    g / n
}

fn cross_entropy(probs: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let n = labels.len().max(1) as f64;
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs[(i, y)].max(1e-12).ln())
        .sum::<f64>()
        / n
}

/// Full-batch gradient descent with momentum on the classifier alone.
/// Returns the final training cross-entropy.
fn fit_classifier(classifier: &mut Linear, features: &DMatrix<f64>, labels: &[usize], config: &ModelConfig) -> f64 {
    let mut opt = Sgd::new(config.momentum, config.weight_decay);
    for _ in 0..config.classifier_steps {
        let probs = softmax_rows(&classifier.forward(features));
        let (g, _) = classifier.backward(features, &ce_grad(&probs, labels));
        opt.step(
            config.classifier_lr,
            vec![classifier.weight.as_mut_slice(), classifier.bias.as_mut_slice()],
            vec![g.weight.as_slice(), g.bias.as_slice()],
        );
    }
    cross_entropy(&softmax_rows(&classifier.forward(features)), labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_mixture, DatasetSpec};
    use crate::model::argmax_rows;

    fn two_blobs() -> FeatureMatrix {
        generate_mixture(&DatasetSpec {
            classes: 2,
            dim: 2,
            n_per_class: 50,
            class_separation: 4.0,
            noise_sigma: 0.5,
            seed: 3,
            ..DatasetSpec::default()
        })
        .unwrap()
    }

    fn config() -> ModelConfig {
        ModelConfig {
            d_in: 2,
            d_hidden: 16,
            d_feat: 8,
            d_proj: 4,
            classes: 2,
            epochs: 20,
            batch_size: 16,
            lr_decay_epoch: Some(16),
            ..ModelConfig::default()
        }
    }

    fn train_accuracy(state: &ModelState, data: &FeatureMatrix) -> f64 {
        let pred = argmax_rows(&state.predict_proba(data).unwrap());
        let labels = data.labels().unwrap();
        pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
    }

    /// Perceptron on the raw data: confirms the two blobs are linearly
    /// separable, so high training accuracy is attainable.
    fn perceptron_separates(data: &FeatureMatrix) -> bool {
        let labels = data.labels().unwrap();
        let mut w = [0.0; 3];
        for _ in 0..1000 {
            let mut mistakes = 0;
            for (row, &y) in data.rows().zip(labels) {
                let t = if y == 1 { 1.0 } else { -1.0 };
                let s = w[0] * row[0] + w[1] * row[1] + w[2];
                if t * s <= 0.0 {
                    w[0] += t * row[0];
                    w[1] += t * row[1];
                    w[2] += t;
                    mistakes += 1;
                }
            }
            if mistakes == 0 {
                return true;
            }
        }
        false
    }

    #[test]
    fn contrastive_training_separates_blobs() {
        let data = two_blobs();
        assert!(perceptron_separates(&data));
        let (state, report) = train(&config(), &data, LossKind::Contrastive).unwrap();
        assert_eq!(report.loss_history.len(), 20);
        assert!(report.loss_history.last().unwrap() < report.loss_history.first().unwrap());
        assert!(train_accuracy(&state, &data) >= 0.95);
        assert!(state.weights_finite());
        assert_eq!(state.trained_loss(), Some(LossKind::Contrastive));
    }

    #[test]
    fn cross_entropy_training_separates_blobs() {
        let data = two_blobs();
        let (state, _) = train(&config(), &data, LossKind::CrossEntropy).unwrap();
        assert!(train_accuracy(&state, &data) >= 0.95);
    }

    #[test]
    fn zero_epochs_only_fits_classifier() {
        let data = two_blobs();
        let cfg = ModelConfig { epochs: 0, ..config() };
        let fresh = ModelState::new(cfg.clone()).unwrap();
        let (state, report) = train(&cfg, &data, LossKind::Contrastive).unwrap();
        assert!(report.loss_history.is_empty());
        let mut stripped = state.clone();
        stripped.classifier = None;
        stripped.trained_loss = None;
        assert_eq!(stripped, fresh);
        assert!(state.classifier().is_some());
    }

    #[test]
    fn training_is_deterministic() {
        let data = two_blobs();
        let (a, ra) = train(&config(), &data, LossKind::Contrastive).unwrap();
        let (b, rb) = train(&config(), &data, LossKind::Contrastive).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn singleton_class_warns_but_trains() {
        let data = two_blobs();
        let labels = data.labels().unwrap();
        let mut rows: Vec<usize> = (0..data.n()).filter(|&i| labels[i] == 0).collect();
        rows.push((0..data.n()).find(|&i| labels[i] == 1).unwrap());
        let (_, report) = train(&config(), &data.select(&rows), LossKind::Contrastive).unwrap();
        assert_eq!(report.warnings.len(), 1);
    }

    #[test]
    fn rejects_bad_inputs() {
        let data = two_blobs();
        let unlabeled = data.clone().with_labels(None).unwrap();
        assert!(train(&config(), &unlabeled, LossKind::Contrastive).is_err());
        let wide = ModelConfig { d_in: 3, ..config() };
        assert!(matches!(train(&wide, &data, LossKind::Contrastive).unwrap_err(), Error::Shape { .. }));
    }
}
