//! Desk-scale trainable model.
//!
//! A one-hidden-layer tanh encoder produces the features `z` used for
//! scoring; a two-layer projection head maps `z` to the unit sphere where the
//! contrastive loss is computed; a linear classifier on `z` yields class
//! probabilities.

mod layers;
mod supcon;
mod train;

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::datasets::FeatureMatrix;
use crate::error::{Error, Result};
use crate::flatconf::FlatConfig;
use crate::rng::{self, streams};

pub use layers::Linear;
pub use supcon::{supcon_loss, supcon_loss_and_grad, AugmentedBatch};
pub use train::{train, TrainReport};

use layers::{softmax_rows, tanh_backward, tanh_inplace, LinearGrad};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Contrastive,
    CrossEntropy,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Contrastive => "contrastive",
            LossKind::CrossEntropy => "cross_entropy",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "contrastive" => Ok(LossKind::Contrastive),
            "cross_entropy" => Ok(LossKind::CrossEntropy),
            other => Err(Error::Config(format!(
                "unknown loss {other:?}; valid: contrastive, cross_entropy"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_feat: usize,
    pub d_proj: usize,
    pub classes: usize,
    pub temperature: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epoch at which the learning rate drops by 10x.
    pub lr_decay_epoch: Option<usize>,
    /// Std of the Gaussian jitter producing augmented views.
    pub aug_sigma: f64,
    pub dropout_rate: f64,
    /// Full-batch gradient steps for the classifier fitted on frozen features.
    pub classifier_steps: usize,
    pub classifier_lr: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_in: 16,
            d_hidden: 64,
            d_feat: 32,
            d_proj: 16,
            classes: 10,
            temperature: 0.07,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 30,
            batch_size: 64,
            lr_decay_epoch: Some(24),
            aug_sigma: 0.05,
            dropout_rate: 0.3,
            classifier_steps: 200,
            classifier_lr: 0.5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if [self.d_in, self.d_hidden, self.d_feat, self.d_proj, self.batch_size].contains(&0) {
            return fail("model dimensions and batch size must be positive".into());
        }
        if self.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout rate must be in [0, 1), got {}", self.dropout_rate));
        }
        if self.d_proj > self.d_feat {
            return fail(format!("d_proj {} exceeds d_feat {}", self.d_proj, self.d_feat));
        }
        if !(self.lr > 0.0 && self.classifier_lr > 0.0 && self.aug_sigma >= 0.0 && self.weight_decay >= 0.0) {
            return fail("learning rates must be positive; aug_sigma and weight_decay non-negative".into());
        }
        Ok(())
    }

    pub fn write_to(&self, c: &mut FlatConfig, prefix: &str) {
        let k = |name: &str| format!("{prefix}.{name}");
        c.set(&k("d_in"), self.d_in);
        c.set(&k("d_hidden"), self.d_hidden);
        c.set(&k("d_feat"), self.d_feat);
        c.set(&k("d_proj"), self.d_proj);
        c.set(&k("classes"), self.classes);
        c.set(&k("temperature"), self.temperature);
        c.set(&k("lr"), self.lr);
        c.set(&k("momentum"), self.momentum);
        c.set(&k("weight_decay"), self.weight_decay);
        c.set(&k("epochs"), self.epochs);
        c.set(&k("batch_size"), self.batch_size);
        c.set(
            &k("lr_decay_epoch"),
            self.lr_decay_epoch.map_or_else(|| "none".to_string(), |e| e.to_string()),
        );
        c.set(&k("aug_sigma"), self.aug_sigma);
        c.set(&k("dropout_rate"), self.dropout_rate);
        c.set(&k("classifier_steps"), self.classifier_steps);
        c.set(&k("classifier_lr"), self.classifier_lr);
        c.set(&k("seed"), self.seed);
    }

    /// Read keys under `prefix`, falling back to `base` for missing ones.
    pub fn read_from(c: &FlatConfig, prefix: &str, base: &ModelConfig) -> Result<Self> {
        let k = |name: &str| format!("{prefix}.{name}");
        let decay = match c.raw(&k("lr_decay_epoch")) {
            None => base.lr_decay_epoch,
            Some("none") => None,
            Some(_) => c.get(&k("lr_decay_epoch"))?,
        };
        let cfg = ModelConfig {
            d_in: c.get_or(&k("d_in"), base.d_in)?,
            d_hidden: c.get_or(&k("d_hidden"), base.d_hidden)?,
            d_feat: c.get_or(&k("d_feat"), base.d_feat)?,
            d_proj: c.get_or(&k("d_proj"), base.d_proj)?,
            classes: c.get_or(&k("classes"), base.classes)?,
            temperature: c.get_or(&k("temperature"), base.temperature)?,
            lr: c.get_or(&k("lr"), base.lr)?,
            momentum: c.get_or(&k("momentum"), base.momentum)?,
            weight_decay: c.get_or(&k("weight_decay"), base.weight_decay)?,
            epochs: c.get_or(&k("epochs"), base.epochs)?,
            batch_size: c.get_or(&k("batch_size"), base.batch_size)?,
            lr_decay_epoch: decay,
            aug_sigma: c.get_or(&k("aug_sigma"), base.aug_sigma)?,
            dropout_rate: c.get_or(&k("dropout_rate"), base.dropout_rate)?,
            classifier_steps: c.get_or(&k("classifier_steps"), base.classifier_steps)?,
            classifier_lr: c.get_or(&k("classifier_lr"), base.classifier_lr)?,
            seed: c.get_or(&k("seed"), base.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Features plus class probabilities from one encoder pass.
#[derive(Debug, Clone)]
pub struct Inference {
    pub features: FeatureMatrix,
    /// `n x K`, rows sum to one.
    pub probs: DMatrix<f64>,
}

impl Inference {
    pub fn predicted(&self) -> Vec<usize> {
        argmax_rows(&self.probs)
    }
}

pub fn argmax_rows(m: &DMatrix<f64>) -> Vec<usize> {
    m.row_iter()
        .map(|r| {
            // first maximum wins
            let mut best = 0;
            for j in 1..r.len() {
                if r[j] > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Unit-norm projections; rows whose pre-normalization vector was exactly
/// zero are replaced by `e_0` and listed in `degenerate_rows`.
#[derive(Debug, Clone)]
pub struct Projection {
    pub projections: FeatureMatrix,
    pub degenerate_rows: Vec<usize>,
}

/// Encoder, projection head and classifier weights.
///
/// `forward_pass_count` counts inference batches through the encoder
/// (`encode`, `infer`, `predict_proba`, `stochastic_proba`); training passes
/// are not counted. It is atomic so a trained model can be shared across
/// scoring threads.
#[derive(Debug)]
pub struct ModelState {
    config: ModelConfig,
    encoder_hidden: Linear,
    encoder_out: Linear,
    proj_hidden: Linear,
    proj_out: Linear,
    classifier: Option<Linear>,
    trained_loss: Option<LossKind>,
    forward_passes: AtomicU64,
}

impl Clone for ModelState {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            encoder_hidden: self.encoder_hidden.clone(),
            encoder_out: self.encoder_out.clone(),
            proj_hidden: self.proj_hidden.clone(),
            proj_out: self.proj_out.clone(),
            classifier: self.classifier.clone(),
            trained_loss: self.trained_loss,
            forward_passes: AtomicU64::new(self.forward_pass_count()),
        }
    }
}

impl PartialEq for ModelState {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.encoder_hidden == other.encoder_hidden
            && self.encoder_out == other.encoder_out
            && self.proj_hidden == other.proj_hidden
            && self.proj_out == other.proj_out
            && self.classifier == other.classifier
            && self.trained_loss == other.trained_loss
    }
}

/// Activations kept for backprop through the encoder.
pub(crate) struct EncoderTrace {
    input: DMatrix<f64>,
    hidden: DMatrix<f64>,
    pub(crate) features: DMatrix<f64>,
}

impl ModelState {
    /// Freshly initialized weights (Glorot-uniform, seeded by `config.seed`),
    /// no classifier.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, streams::INIT);
        Ok(Self {
            encoder_hidden: Linear::glorot(config.d_in, config.d_hidden, &mut rng),
            encoder_out: Linear::glorot(config.d_hidden, config.d_feat, &mut rng),
            proj_hidden: Linear::glorot(config.d_feat, config.d_feat, &mut rng),
            proj_out: Linear::glorot(config.d_feat, config.d_proj, &mut rng),
            classifier: None,
            trained_loss: None,
            forward_passes: AtomicU64::new(0),
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn forward_pass_count(&self) -> u64 {
        self.forward_passes.load(Ordering::SeqCst)
    }

    pub fn trained_loss(&self) -> Option<LossKind> {
        self.trained_loss
    }

    pub fn classifier(&self) -> Option<&Linear> {
        self.classifier.as_ref()
    }

    pub fn set_classifier(&mut self, classifier: Linear) -> Result<()> {
        if classifier.inputs() != self.config.d_feat || classifier.outputs() != self.config.classes {
            return Err(Error::shape(
                format!("{}x{} classifier", self.config.d_feat, self.config.classes),
                format!("{}x{}", classifier.inputs(), classifier.outputs()),
            ));
        }
        self.classifier = Some(classifier);
        Ok(())
    }

    /// Hidden and output layers of the encoder.
    pub fn encoder_mut(&mut self) -> (&mut Linear, &mut Linear) {
        (&mut self.encoder_hidden, &mut self.encoder_out)
    }

    pub fn projection_mut(&mut self) -> (&mut Linear, &mut Linear) {
        (&mut self.proj_hidden, &mut self.proj_out)
    }

    pub fn weights_finite(&self) -> bool {
        [&self.encoder_hidden, &self.encoder_out, &self.proj_hidden, &self.proj_out]
            .into_iter()
            .chain(self.classifier.as_ref())
            .all(Linear::is_finite)
    }

    fn batches(&self, n: usize) -> impl Iterator<Item = (usize, usize)> {
        let b = self.config.batch_size;
        (0..n.div_ceil(b)).map(move |i| (i * b, ((i + 1) * b).min(n)))
    }

    fn count_batches(&self, n: usize, repeats: usize) {
        let batches = n.div_ceil(self.config.batch_size) * repeats;
        self.forward_passes.fetch_add(batches as u64, Ordering::SeqCst);
    }

    fn check_input(&self, x: &FeatureMatrix) -> Result<()> {
        if x.d() != self.config.d_in {
            return Err(Error::shape(format!("input dimension {}", self.config.d_in), x.d()));
        }
        Ok(())
    }

    pub(crate) fn encode_trace(&self, input: DMatrix<f64>, mask: Option<&DMatrix<f64>>) -> EncoderTrace {
        let mut hidden = self.encoder_hidden.forward(&input);
        tanh_inplace(&mut hidden);
        if let Some(mask) = mask {
            hidden.component_mul_assign(mask);
        }
        let features = self.encoder_out.forward(&hidden);
        EncoderTrace { input, hidden, features }
    }

    /// Features `z` (the layer the classifier reads), one counted pass per batch.
    pub fn encode(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        self.check_input(x)?;
        let mut values = Vec::with_capacity(x.n() * self.config.d_feat);
        for (start, end) in self.batches(x.n()) {
            let trace = self.encode_trace(x.block(start, end), None);
            for row in trace.features.row_iter() {
                values.extend(row.iter());
            }
        }
        self.count_batches(x.n(), 1);
        x.with_values(self.config.d_feat, values)
    }

    fn require_classifier(&self) -> Result<&Linear> {
        self.classifier
            .as_ref()
            .ok_or_else(|| Error::Usage("model has no trained classifier".into()))
    }

    /// Features and class probabilities from a single counted pass.
    pub fn infer(&self, x: &FeatureMatrix) -> Result<Inference> {
        let classifier = self.require_classifier()?;
        let features = self.encode(x)?;
        let probs = softmax_rows(&classifier.forward(&features.to_dmatrix()));
        Ok(Inference { features, probs })
    }

    pub fn predict_proba(&self, x: &FeatureMatrix) -> Result<DMatrix<f64>> {
        Ok(self.infer(x)?.probs)
    }

    /// `tau` passes with i.i.d. Bernoulli dropout masks (inverted scaling) on
    /// the encoder hidden layer. Returns one `n x K` probability matrix per pass.
    pub fn stochastic_proba(
        &self,
        x: &FeatureMatrix,
        tau: usize,
        dropout_rate: f64,
        seed: u64,
    ) -> Result<Vec<DMatrix<f64>>> {
        if tau < 2 {
            return Err(Error::Usage(format!("stochastic inference needs tau >= 2, got {tau}")));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {dropout_rate}")));
        }
        if dropout_rate == 0.0 {
            log::warn!("dropout rate 0 with tau = {tau}: every pass is identical and mutual information is 0");
        }
        self.check_input(x)?;
        let classifier = self.require_classifier()?;
        let mut rng = rng::stream(seed, streams::DROPOUT);
        let keep = 1.0 - dropout_rate;
        let mut slices = Vec::with_capacity(tau);
        for _ in 0..tau {
            let mut probs = DMatrix::zeros(x.n(), self.config.classes);
            for (start, end) in self.batches(x.n()) {
                let mask = DMatrix::from_fn(end - start, self.config.d_hidden, |_, _| {
                    if dropout_rate == 0.0 || rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                let trace = self.encode_trace(x.block(start, end), Some(&mask));
                let p = softmax_rows(&classifier.forward(&trace.features));
                probs.rows_mut(start, end - start).copy_from(&p);
            }
            slices.push(probs);
        }
        self.count_batches(x.n(), tau);
        Ok(slices)
    }

    fn project_matrix(&self, z: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, Vec<f64>) {
        let mut hidden = self.proj_hidden.forward(z);
        tanh_inplace(&mut hidden);
        let raw = self.proj_out.forward(&hidden);
        let mut unit = raw.clone();
        let mut norms = Vec::with_capacity(raw.nrows());
        for mut row in unit.row_iter_mut() {
            let norm = row.norm();
            norms.push(norm);
            if norm > 0.0 {
                row /= norm;
            } else {
                row.fill(0.0);
                row[0] = 1.0;
            }
        }
        (hidden, raw, unit, norms)
    }

    /// Projection-head output with L2-normalized rows.
    pub fn project(&self, z: &FeatureMatrix) -> Result<Projection> {
        if z.d() != self.config.d_feat {
            return Err(Error::shape(format!("feature dimension {}", self.config.d_feat), z.d()));
        }
        let (_, _, unit, norms) = self.project_matrix(&z.to_dmatrix());
        let degenerate_rows: Vec<usize> = norms
            .iter()
            .enumerate()
            .filter(|(_, &n)| n == 0.0)
            .map(|(i, _)| i)
            .collect();
        if !degenerate_rows.is_empty() {
            log::warn!("{} zero projection rows replaced by e_0", degenerate_rows.len());
        }
        Ok(Projection {
            projections: z.with_values(self.config.d_proj, unit.transpose().as_slice().to_vec())?,
            degenerate_rows,
        })
    }

    /// Summed contrastive loss of a batch and gradients for the encoder and
    /// projection parameters, in [`ModelState::contrastive_parameters_mut`] order.
    pub fn contrastive_loss_and_grad(&self, batch: &DMatrix<f64>, labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
        let trace = self.encode_trace(batch.clone(), None);
        let (proj_hidden, raw, unit, norms) = self.project_matrix(&trace.features);
        let (loss, grad_unit) = supcon_loss_and_grad(&unit, labels, self.config.temperature)?;
        let mut grad_raw = DMatrix::zeros(raw.nrows(), raw.ncols());
        for i in 0..raw.nrows() {
            if norms[i] == 0.0 {
                continue;
            }
            let u = unit.row(i);
            let g = grad_unit.row(i);
            let dot = u.dot(&g);
            grad_raw.set_row(i, &((g - u * dot) / norms[i]));
        }
        let (g_proj_out, grad_hidden) = self.proj_out.backward(&proj_hidden, &grad_raw);
        let grad_pre = tanh_backward(&proj_hidden, &grad_hidden);
        let (g_proj_hidden, grad_features) = self.proj_hidden.backward(&trace.features, &grad_pre);
        let (g_enc_out, g_enc_hidden) = self.encoder_backward(&trace, &grad_features);
        Ok((loss, flatten(&[g_enc_hidden, g_enc_out, g_proj_hidden, g_proj_out])))
    }

    fn encoder_backward(&self, trace: &EncoderTrace, grad_features: &DMatrix<f64>) -> (LinearGrad, LinearGrad) {
        let (g_out, grad_hidden) = self.encoder_out.backward(&trace.hidden, grad_features);
        let grad_pre = tanh_backward(&trace.hidden, &grad_hidden);
        let (g_hidden, _) = self.encoder_hidden.backward(&trace.input, &grad_pre);
        (g_out, g_hidden)
    }

    /// Encoder then projection parameters: weight and bias of each layer.
    pub fn contrastive_parameters_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.encoder_hidden.weight.as_mut_slice(),
            self.encoder_hidden.bias.as_mut_slice(),
            self.encoder_out.weight.as_mut_slice(),
            self.encoder_out.bias.as_mut_slice(),
            self.proj_hidden.weight.as_mut_slice(),
            self.proj_hidden.bias.as_mut_slice(),
            self.proj_out.weight.as_mut_slice(),
            self.proj_out.bias.as_mut_slice(),
        ]
    }

    /// Contrastive loss (summed over the batch) for the given augmented rows.
    pub fn contrastive_loss(&self, batch: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
        let trace = self.encode_trace(batch.clone(), None);
        let (_, _, unit, _) = self.project_matrix(&trace.features);
        supcon_loss(&unit, labels, self.config.temperature)
    }

    pub fn to_container(&self) -> Container {
        let mut meta = FlatConfig::new();
        self.config.write_to(&mut meta, "model");
        meta.set(
            "model.trained_loss",
            self.trained_loss.map_or("none", LossKind::name),
        );
        let mut c = Container::new(meta);
        let layers = [
            ("encoder.hidden", Some(&self.encoder_hidden)),
            ("encoder.out", Some(&self.encoder_out)),
            ("projection.hidden", Some(&self.proj_hidden)),
            ("projection.out", Some(&self.proj_out)),
            ("classifier", self.classifier.as_ref()),
        ];
        for (name, layer) in layers {
            if let Some(layer) = layer {
                c.push(format!("{name}.weight"), layer.weight.clone());
                c.push(format!("{name}.bias"), DMatrix::from_row_slice(1, layer.bias.len(), layer.bias.as_slice()));
            }
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config = ModelConfig::read_from(&c.meta, "model", &ModelConfig::default())?;
        let layer = |name: &str| -> Result<Linear> {
            let weight = c.tensor(&format!("{name}.weight"))?.clone();
            let bias = c.tensor(&format!("{name}.bias"))?;
            if bias.nrows() != 1 || bias.ncols() != weight.ncols() {
                return Err(Error::Usage(format!("checkpoint bias for {name} has wrong shape")));
            }
            Ok(Linear {
                weight,
                bias: DVector::from_row_slice(bias.as_slice()),
            })
        };
        let mut state = ModelState::new(config)?;
        state.encoder_hidden = layer("encoder.hidden")?;
        state.encoder_out = layer("encoder.out")?;
        state.proj_hidden = layer("projection.hidden")?;
        state.proj_out = layer("projection.out")?;
        let expect = [
            (&state.encoder_hidden, state.config.d_in, state.config.d_hidden),
            (&state.encoder_out, state.config.d_hidden, state.config.d_feat),
            (&state.proj_hidden, state.config.d_feat, state.config.d_feat),
            (&state.proj_out, state.config.d_feat, state.config.d_proj),
        ];
        if expect.iter().any(|(l, i, o)| l.inputs() != *i || l.outputs() != *o) {
            return Err(Error::Usage("checkpoint weights disagree with the echoed config".into()));
        }
        if c.has_tensor("classifier.weight") {
            state.set_classifier(layer("classifier")?)?;
        }
        state.trained_loss = match c.meta.raw("model.trained_loss") {
            None | Some("none") => None,
            Some(s) => Some(s.parse()?),
        };
        Ok(state)
    }
}

fn flatten(grads: &[LinearGrad]) -> Vec<Vec<f64>> {
    grads
        .iter()
        .flat_map(|g| [g.weight.as_slice().to_vec(), g.bias.as_slice().to_vec()])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            d_in: 4,
            d_hidden: 4,
            d_feat: 4,
            d_proj: 3,
            classes: 3,
            batch_size: 2,
            ..ModelConfig::default()
        }
    }

    fn input(n: usize, d: usize) -> FeatureMatrix {
        let values = (0..n * d).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        FeatureMatrix::with_generated_ids(d, values, None).unwrap()
    }

    #[test]
    fn zero_encoder_gives_zero_features() {
        let mut m = ModelState::new(small()).unwrap();
        let (h, o) = m.encoder_mut();
        *h = Linear::zeros(4, 4);
        *o = Linear::zeros(4, 4);
        let z = m.encode(&input(5, 4)).unwrap();
        assert!(z.values().iter().all(|&v| v == 0.0));
        assert_eq!(m.forward_pass_count(), 3);
    }

    #[test]
    fn empty_input_counts_no_batches() {
        let m = ModelState::new(small()).unwrap();
        let z = m.encode(&FeatureMatrix::empty(4)).unwrap();
        assert_eq!((z.n(), z.d()), (0, 4));
        assert_eq!(m.forward_pass_count(), 0);
    }

    #[test]
    fn identity_encoder_applies_tanh() {
        let mut m = ModelState::new(small()).unwrap();
        let (h, o) = m.encoder_mut();
        h.weight = DMatrix::identity(4, 4);
        h.bias.fill(0.0);
        o.weight = DMatrix::identity(4, 4);
        o.bias.fill(0.0);
        let x = input(3, 4);
        let z = m.encode(&x).unwrap();
        for (a, b) in z.values().iter().zip(x.values()) {
            assert!((a - b.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_errors() {
        let m = ModelState::new(small()).unwrap();
        assert!(matches!(m.encode(&input(2, 3)).unwrap_err(), Error::Shape { .. }));
        assert!(matches!(m.project(&input(2, 3)).unwrap_err(), Error::Shape { .. }));
    }

    #[test]
    fn projections_are_unit_and_deterministic() {
        let m = ModelState::new(small()).unwrap();
        let z = input(3, 4);
        let p = m.project(&z).unwrap();
        for row in p.projections.rows() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = p.projections.row(i).iter().zip(p.projections.row(j)).map(|(a, b)| a * b).sum();
                assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&dot));
            }
        }
        let twice = FeatureMatrix::with_generated_ids(4, [z.row(0), z.row(0)].concat(), None).unwrap();
        let q = m.project(&twice).unwrap();
        assert_eq!(q.projections.row(0), q.projections.row(1));
    }

    #[test]
    fn zero_projection_row_is_flagged() {
        let mut m = ModelState::new(small()).unwrap();
        let (_, out) = m.projection_mut();
        *out = Linear::zeros(4, 3);
        let p = m.project(&input(2, 4)).unwrap();
        assert_eq!(p.degenerate_rows, vec![0, 1]);
        assert_eq!(p.projections.row(0), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_classifier_is_uniform_and_untrained_is_usage_error() {
        let mut m = ModelState::new(small()).unwrap();
        assert!(matches!(m.predict_proba(&input(2, 4)).unwrap_err(), Error::Usage(_)));
        m.set_classifier(Linear::zeros(4, 3)).unwrap();
        let p = m.predict_proba(&input(4, 4)).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn stochastic_passes_count_and_reproduce() {
        let mut m = ModelState::new(small()).unwrap();
        m.set_classifier(Linear::glorot(4, 3, &mut rng::stream(1, 1))).unwrap();
        let x = input(5, 4);
        let a = m.stochastic_proba(&x, 4, 0.3, 9).unwrap();
        assert_eq!(m.forward_pass_count(), 4 * 3);
        let b = m.stochastic_proba(&x, 4, 0.3, 9).unwrap();
        assert_eq!(a, b);
        for s in &a {
            for r in s.row_iter() {
                assert!((r.sum() - 1.0).abs() < 1e-12);
            }
        }
        assert_ne!(a[0], a[1]);
        let same = m.stochastic_proba(&x, 3, 0.0, 9).unwrap();
        assert_eq!(same[0], same[1]);
        assert_eq!(same[1], same[2]);
        assert!(matches!(m.stochastic_proba(&x, 1, 0.3, 0).unwrap_err(), Error::Usage(_)));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let mut m = ModelState::new(small()).unwrap();
        m.set_classifier(Linear::glorot(4, 3, &mut rng::stream(1, 1))).unwrap();
        m.to_container().save(&path).unwrap();
        let back = ModelState::from_container(&Container::load(&path).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn config_validation() {
        for bad in [
            ModelConfig { temperature: 0.0, ..small() },
            ModelConfig { dropout_rate: 1.0, ..small() },
            ModelConfig { d_proj: 5, ..small() },
        ] {
            assert!(ModelState::new(bad).unwrap_err().is_config_error());
        }
    }
}
