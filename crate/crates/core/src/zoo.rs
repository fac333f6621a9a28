//! Built-in differentiable classifiers so the whole pipeline runs without an
//! external ML framework.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::metric::argmax;
use crate::error::{Error, Result};
use crate::nn::{self, Adam, Network};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Logreg,
    Mlp,
}

impl ModelKind {
    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::Logreg => "logreg",
            ModelKind::Mlp => "mlp",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    /// Epochs without a validation-accuracy improvement before stopping.
    pub patience: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Hidden layer widths (ignored for logistic regression).
    pub hidden_sizes: Vec<usize>,
    pub lr: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub early_stop: Option<EarlyStop>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![64],
            lr: 0.01,
            epochs: 50,
            weight_decay: 0.0,
            batch_size: 32,
            seed: 0,
            early_stop: None,
        }
    }
}

/// Endpoints for [`overfit_knob`]: level 0 trains `min_epochs` with
/// `max_weight_decay`; level 1 trains `max_epochs` with no decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OverfitSchedule {
    pub min_epochs: usize,
    pub max_epochs: usize,
    pub max_weight_decay: f64,
}

impl Default for OverfitSchedule {
    fn default() -> Self {
        Self {
            min_epochs: 5,
            max_epochs: 200,
            max_weight_decay: 0.05,
        }
    }
}

/// Interpolate epochs up and weight decay down with `level` in [0, 1].
pub fn overfit_knob(config: &TrainConfig, level: f64) -> Result<TrainConfig> {
    overfit_knob_with(&OverfitSchedule::default(), config, level)
}

pub fn overfit_knob_with(schedule: &OverfitSchedule, config: &TrainConfig, level: f64) -> Result<TrainConfig> {
    if !(0.0..=1.0).contains(&level) {
        return Err(Error::config(format!("overfit level {level} outside [0, 1]")));
    }
    let span = schedule.max_epochs.saturating_sub(schedule.min_epochs) as f64;
    Ok(TrainConfig {
        epochs: schedule.min_epochs + (level * span).round() as usize,
        weight_decay: schedule.max_weight_decay * (1.0 - level),
        early_stop: None,
        ..config.clone()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuiltinModel {
    pub kind: ModelKind,
    pub num_classes: usize,
    pub input_dim: usize,
    pub network: Network,
    pub train_config: TrainConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_accuracy: f64,
    pub validation_accuracy: Option<f64>,
    pub epochs_run: usize,
}

impl BuiltinModel {
    /// Untrained model: zero weights for logistic regression, seeded
    /// `U(-0.1, 0.1)` weights for the MLP.
    pub fn init(kind: ModelKind, input_dim: usize, num_classes: usize, config: &TrainConfig) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::config("a classifier needs at least 2 classes"));
        }
        let network = match kind {
            ModelKind::Logreg => Network::zeros(&[input_dim, num_classes])?,
            ModelKind::Mlp => {
                let mut sizes = vec![input_dim];
                sizes.extend(&config.hidden_sizes);
                sizes.push(num_classes);
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9E37_79B9_7F4A_7C15);
                Network::uniform(&sizes, 0.1, &mut rng)?
            }
        };
        Ok(Self {
            kind,
            num_classes,
            input_dim,
            network,
            train_config: config.clone(),
        })
    }

    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.network.forward(features)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: BuiltinModel = serde_json::from_str(&text)?;
        if m.network.input_dim() != m.input_dim || m.network.output_dim() != m.num_classes {
            return Err(Error::validation("network", "layer sizes disagree with model dimensions"));
        }
        Ok(m)
    }
}

/// Softmax probabilities.
pub fn predict(model: &BuiltinModel, features: &[f64]) -> Result<Vec<f64>> {
    Ok(nn::softmax(&model.logits(features)?))
}

pub fn predict_label(model: &BuiltinModel, features: &[f64]) -> Result<usize> {
    Ok(argmax(&model.logits(features)?))
}

/// Cross-entropy loss at `(features, label)` and its gradient w.r.t. the
/// input.
pub fn loss_and_input_grad(model: &BuiltinModel, features: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    check_label(model, label)?;
    let trace = model.network.forward_trace(features)?;
    let (loss, d_out) = nn::softmax_xent(trace.output(), label);
    let mut scratch = vec![0.0; model.network.params.len()];
    Ok((loss, model.network.backward(&trace, &d_out, &mut scratch)))
}

/// Gradient of the cross-entropy w.r.t. the input features.
pub fn grad_wrt_input(model: &BuiltinModel, features: &[f64], label: usize) -> Result<Vec<f64>> {
    loss_and_input_grad(model, features, label).map(|(_, g)| g)
}

/// Gradient of the (unregularized) cross-entropy w.r.t. the parameters.
pub fn grad_wrt_params(model: &BuiltinModel, features: &[f64], label: usize) -> Result<Vec<f64>> {
    check_label(model, label)?;
    let trace = model.network.forward_trace(features)?;
    let (_, d_out) = nn::softmax_xent(trace.output(), label);
    let mut grad = vec![0.0; model.network.params.len()];
    model.network.backward(&trace, &d_out, &mut grad);
    Ok(grad)
}

fn check_label(model: &BuiltinModel, label: usize) -> Result<()> {
    if label >= model.num_classes {
        return Err(Error::validation(
            "label",
            format!("label {label} out of range for {} classes", model.num_classes),
        ));
    }
    Ok(())
}

pub fn accuracy(model: &BuiltinModel, features: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if features.is_empty() {
        return Ok(0.0);
    }
    let mut ok = 0usize;
    for (x, &y) in features.iter().zip(labels) {
        if predict_label(model, x)? == y {
            ok += 1;
        }
    }
    Ok(ok as f64 / features.len() as f64)
}

/// Adam-trained softmax classifier, reproducible per seed.
///
/// With `config.early_stop` set, `validation` must be given; training keeps
/// the parameters of the epoch with the best validation accuracy.
pub fn train_builtin(
    kind: ModelKind,
    features: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    config: &TrainConfig,
    validation: Option<(&[Vec<f64>], &[usize])>,
) -> Result<(BuiltinModel, TrainReport)> {
    if features.len() != labels.len() {
        return Err(Error::Dimension {
            expected: features.len(),
            actual: labels.len(),
        });
    }
    let dim = features
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::DegenerateLabels("empty training set".into()))?;
    if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::validation("label", format!("label {bad} >= num_classes {num_classes}")));
    }
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::DegenerateLabels(format!(
            "training data has {} distinct class(es)",
            present.len()
        )));
    }
    if config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(Error::config("batch_size and lr must be positive"));
    }
    if config.early_stop.is_some() && validation.is_none() {
        return Err(Error::config("early stopping needs a validation set"));
    }

    let mut model = BuiltinModel::init(kind, dim, num_classes, config)?;
    let mask = model.network.weight_mask();
    let mut adam = Adam::new(model.network.params.len(), config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..features.len()).collect();

    let mut best_val = f64::NEG_INFINITY;
    let mut best_params = model.network.params.clone();
    let mut since_best = 0;
    let mut epochs_run = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            nn::minibatch_step(
                &mut model.network,
                &mut adam,
                features,
                batch,
                config.weight_decay,
                &mask,
                |i, out| nn::softmax_xent(out, labels[i]),
            )?;
        }
        epochs_run += 1;
        if let (Some(es), Some((vx, vy))) = (config.early_stop, validation) {
            let acc = accuracy(&model, vx, vy)?;
            if acc > best_val {
                best_val = acc;
                best_params.clone_from(&model.network.params);
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= es.patience {
                    break;
                }
            }
        }
    }
    if config.early_stop.is_some() {
        model.network.params = best_params;
    }
    let report = TrainReport {
        train_accuracy: accuracy(&model, features, labels)?,
        validation_accuracy: validation.map(|(vx, vy)| accuracy(&model, vx, vy)).transpose()?,
        epochs_run,
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn blobs(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.6).unwrap();
        (0..n)
            .map(|i| {
                let y = i % 2;
                let c = if y == 1 { 2.0 } else { -2.0 };
                (vec![c + noise.sample(&mut rng), -c + noise.sample(&mut rng)], y)
            })
            .unzip()
    }

    #[test]
    fn separable_blobs_generalize() {
        let (x, y) = blobs(200, 1);
        let (tx, ty) = blobs(200, 2);
        for kind in [ModelKind::Logreg, ModelKind::Mlp] {
            let cfg = TrainConfig { epochs: 30, ..TrainConfig::default() };
            let (m, report) = train_builtin(kind, &x, &y, 2, &cfg, None).unwrap();
            assert!(report.train_accuracy >= 0.95);
            assert!(accuracy(&m, &tx, &ty).unwrap() >= 0.95, "{kind:?}");
        }
    }

    #[test]
    fn zero_epochs_logreg_is_uniform() {
        let (x, y) = blobs(40, 1);
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let (m, _) = train_builtin(ModelKind::Logreg, &x, &y, 4, &cfg, None).unwrap();
        assert_eq!(predict(&m, &x[0]).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let (x, y) = blobs(50, 1);
        let cfg = TrainConfig { epochs: 5, seed: 3, ..TrainConfig::default() };
        let a = train_builtin(ModelKind::Mlp, &x, &y, 2, &cfg, None).unwrap().0;
        let b = train_builtin(ModelKind::Mlp, &x, &y, 2, &cfg, None).unwrap().0;
        assert_eq!(a, b);
        let c = train_builtin(ModelKind::Mlp, &x, &y, 2, &TrainConfig { seed: 4, ..cfg }, None).unwrap().0;
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_data_rejected() {
        let x = vec![vec![0.0]; 4];
        assert!(matches!(
            train_builtin(ModelKind::Logreg, &x, &[1, 1, 1, 1], 2, &TrainConfig::default(), None),
            Err(Error::DegenerateLabels(_))
        ));
        assert!(train_builtin(ModelKind::Logreg, &[], &[], 2, &TrainConfig::default(), None).is_err());
    }

    #[test]
    fn saturated_weights_give_one_hot() {
        let mut m = BuiltinModel::init(ModelKind::Logreg, 2, 2, &TrainConfig::default()).unwrap();
        m.network.params = vec![500.0, 0.0, -500.0, 0.0, 0.0, 0.0];
        let p = predict(&m, &[1.0, 0.0]).unwrap();
        assert!(p[0] > 1.0 - 1e-12 && p[1] < 1e-12);
        assert!(predict(&m, &[1.0]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..20 {
            let kind = if trial % 2 == 0 { ModelKind::Logreg } else { ModelKind::Mlp };
            let dim = rng.random_range(2..6);
            let k = rng.random_range(2..5);
            let cfg = TrainConfig { hidden_sizes: vec![rng.random_range(3..8)], seed: trial, ..TrainConfig::default() };
            let mut m = BuiltinModel::init(kind, dim, k, &cfg).unwrap();
            for p in &mut m.network.params {
                *p = rng.random_range(-1.0..1.0);
            }
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = rng.random_range(0..k);
            let loss = |mm: &BuiltinModel, xx: &[f64]| nn::softmax_xent(&mm.logits(xx).unwrap(), y).0;

            let gx = grad_wrt_input(&m, &x, y).unwrap();
            let e = gradcheck::max_rel_error(&x, &gx, 1e-5, 1e-6, |xx| loss(&m, xx));
            assert!(e <= 1e-4, "input grad trial {trial}: {e}");

            let gp = grad_wrt_params(&m, &x, y).unwrap();
            let e = gradcheck::max_rel_error(&m.network.params, &gp, 1e-5, 1e-6, |p| {
                let mut mm = m.clone();
                mm.network.params = p.to_vec();
                loss(&mm, &x)
            });
            assert!(e <= 1e-4, "param grad trial {trial}: {e}");
        }
    }

    #[test]
    fn overfit_knob_endpoints() {
        let base = TrainConfig::default();
        let s = OverfitSchedule::default();
        let lo = overfit_knob(&base, 0.0).unwrap();
        assert_eq!((lo.epochs, lo.weight_decay), (s.min_epochs, s.max_weight_decay));
        let hi = overfit_knob(&base, 1.0).unwrap();
        assert_eq!((hi.epochs, hi.weight_decay), (s.max_epochs, 0.0));
        let mid = overfit_knob(&base, 0.5).unwrap();
        assert!(mid.epochs > lo.epochs && mid.epochs < hi.epochs);
        assert!(mid.weight_decay < lo.weight_decay && mid.weight_decay > hi.weight_decay);
        assert!(overfit_knob(&base, 1.5).is_err());
    }

    #[test]
    fn early_stopping_keeps_best_epoch() {
        let (x, y) = blobs(100, 5);
        let (vx, vy) = blobs(60, 6);
        let cfg = TrainConfig { epochs: 100, early_stop: Some(EarlyStop { patience: 3 }), ..TrainConfig::default() };
        let (m, report) = train_builtin(ModelKind::Mlp, &x, &y, 2, &cfg, Some((&vx, &vy))).unwrap();
        assert!(report.epochs_run < 100);
        assert_eq!(report.validation_accuracy, Some(accuracy(&m, &vx, &vy).unwrap()));
        let no_val = train_builtin(ModelKind::Mlp, &x, &y, 2, &cfg, None);
        assert!(no_val.is_err());
    }

    #[test]
    fn json_round_trip() {
        let (x, y) = blobs(20, 1);
        let (m, _) = train_builtin(ModelKind::Mlp, &x, &y, 2, &TrainConfig { epochs: 2, ..TrainConfig::default() }, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        m.save(&p).unwrap();
        assert_eq!(BuiltinModel::load(&p).unwrap(), m);
    }
}
