//! Learning-based attacks: a binary meta-classifier trained on shadow-model
//! outputs, fed one of several feature encodings of the prediction vector.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::metric::{argmax, neg_entropy, require_label};
use crate::error::{Error, Result};
use crate::nn::{self, Adam, Network};
use crate::record::{clamp_prob, LabeledRecord, ScoreEntry, ScoreSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub hidden_sizes: Vec<usize>,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![64, 32],
            learning_rate: 0.001,
            max_epochs: 500,
            patience: 30,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return Err(Error::config("hidden_sizes must be non-empty and positive"));
        }
        if self.patience >= self.max_epochs {
            return Err(Error::config(format!(
                "patience ({}) must be below max_epochs ({})",
                self.patience, self.max_epochs
            )));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::config("batch_size and learning_rate must be positive"));
        }
        Ok(())
    }

    pub(crate) fn layer_sizes(&self, input_dim: usize, output_dim: usize) -> Vec<usize> {
        let mut sizes = vec![input_dim];
        sizes.extend(&self.hidden_sizes);
        sizes.push(output_dim);
        sizes
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureVariant {
    Original,
    Top3,
    Sorted,
    Label,
    Merge,
    AugmentCorr,
}

fn one_hot(k: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[i] = 1.0;
    v
}

fn sorted_desc(probs: &[f64]) -> Vec<f64> {
    let mut v = probs.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

/// Encode a prediction as meta-classifier input.
pub fn extract_features(
    variant: FeatureVariant,
    probs: &[f64],
    label: Option<usize>,
    extras: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if variant == FeatureVariant::AugmentCorr {
        return extras
            .map(<[f64]>::to_vec)
            .ok_or_else(|| Error::MissingInput("augment_corr features need a correctness vector".into()));
    }
    if extras.is_some() {
        return Err(Error::config("extras are only accepted by augment_corr"));
    }
    if probs.is_empty() {
        return Err(Error::validation("probs", "empty probability vector"));
    }
    let k = probs.len();
    Ok(match variant {
        FeatureVariant::Original => probs.to_vec(),
        FeatureVariant::Sorted => sorted_desc(probs),
        FeatureVariant::Top3 => {
            let mut v = sorted_desc(probs);
            v.resize(3, 0.0);
            v
        }
        FeatureVariant::Label => {
            let y = require_label(label, probs, "label features")?;
            let mut v = probs.to_vec();
            v.extend(one_hot(k, y));
            v
        }
        FeatureVariant::Merge => {
            let y = require_label(label, probs, "merge features")?;
            let mut v = probs.to_vec();
            v.extend(one_hot(k, y));
            v.push(neg_entropy(probs));
            v.push(clamp_prob(probs[y]).ln());
            v.extend(one_hot(k, argmax(probs)));
            v
        }
        FeatureVariant::AugmentCorr => unreachable!(),
    })
}

/// Feed-forward binary classifier: ReLU hidden layers, sigmoid output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaClassifier {
    pub network: Network,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
}

/// Per-epoch statistics and the epochs at which a new best checkpoint was
/// taken.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub checkpoints: Vec<usize>,
}

impl MetaClassifier {
    pub fn input_dim(&self) -> usize {
        self.network.input_dim()
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let clf: MetaClassifier = serde_json::from_str(&text)?;
        if clf.network.output_dim() != 1 || clf.network.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::validation("network", "meta-classifier must have one finite output"));
        }
        Ok(clf)
    }
}

pub fn predict_membership_prob(clf: &MetaClassifier, features: &[f64]) -> Result<f64> {
    Ok(nn::sigmoid(clf.network.forward(features)?[0]))
}

fn check_training_set(features: &[Vec<f64>], labels: &[bool]) -> Result<usize> {
    if features.len() != labels.len() {
        return Err(Error::Dimension {
            expected: features.len(),
            actual: labels.len(),
        });
    }
    let dim = features.first().map(Vec::len).ok_or_else(|| Error::MissingInput("no training data".into()))?;
    if let Some(f) = features.iter().find(|f| f.len() != dim) {
        return Err(Error::Dimension {
            expected: dim,
            actual: f.len(),
        });
    }
    let pos = labels.iter().filter(|l| **l).count();
    if pos < 2 || labels.len() - pos < 2 {
        return Err(Error::DegenerateLabels(format!(
            "meta-classifier needs at least 2 samples per class, got {pos} positive and {} negative",
            labels.len() - pos
        )));
    }
    Ok(dim)
}

pub fn train_meta_classifier(
    features: &[Vec<f64>],
    labels: &[bool],
    config: &MlpConfig,
) -> Result<MetaClassifier> {
    train_meta_classifier_with_history(features, labels, config).map(|(c, _)| c)
}

/// Adam on binary cross-entropy with a seeded 90/10 train/validation split.
/// Returns the checkpoint with the best validation accuracy (ties broken by
/// lower validation loss), stopping after `patience` epochs without one.
pub fn train_meta_classifier_with_history(
    features: &[Vec<f64>],
    labels: &[bool],
    config: &MlpConfig,
) -> Result<(MetaClassifier, TrainHistory)> {
    config.validate()?;
    let dim = check_training_set(features, labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut order: Vec<usize> = (0..features.len()).collect();
    order.shuffle(&mut rng);
    let n_val = (features.len() / 10).max(1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();

    let mut net = Network::glorot(&config.layer_sizes(dim, 1), &mut rng)?;
    let mask = net.weight_mask();
    let mut adam = Adam::new(net.params.len(), config.learning_rate);
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();

    let evaluate = |net: &Network| -> Result<(f64, f64)> {
        let mut correct = 0usize;
        let mut loss = 0.0;
        for &i in val_idx {
            let z = net.forward(&features[i])?[0];
            loss += nn::sigmoid_bce(z, y[i]).0;
            if (z >= 0.0) == labels[i] {
                correct += 1;
            }
        }
        Ok((correct as f64 / val_idx.len() as f64, loss / val_idx.len() as f64))
    };

    let mut history = TrainHistory::default();
    let mut best = (f64::NEG_INFINITY, f64::INFINITY);
    let mut best_params = net.params.clone();
    let mut since_best = 0;
    for epoch in 0..config.max_epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in train_idx.chunks(config.batch_size) {
            let l = nn::minibatch_step(&mut net, &mut adam, features, batch, 0.0, &mask, |i, out| {
                let (l, g) = nn::sigmoid_bce(out[0], y[i]);
                (l, vec![g])
            })?;
            epoch_loss += l * batch.len() as f64;
        }
        let (val_acc, val_loss) = evaluate(&net)?;
        history.epochs.push(EpochStats {
            train_loss: epoch_loss / train_idx.len() as f64,
            val_accuracy: val_acc,
            val_loss,
        });
        if val_acc > best.0 || (val_acc == best.0 && val_loss < best.1) {
            best = (val_acc, val_loss);
            best_params.clone_from(&net.params);
            history.checkpoints.push(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    net.params = best_params;
    Ok((MetaClassifier { network: net }, history))
}

fn binary_labels(rows: &[LabeledRecord]) -> Vec<bool> {
    rows.iter().map(|r| r.is_member).collect()
}

fn features_for(variant: FeatureVariant, rows: &[LabeledRecord]) -> Result<Vec<Vec<f64>>> {
    rows.iter()
        .map(|r| extract_features(variant, r.record.require_probs()?, r.sample.label, None))
        .collect()
}

/// Train on shadow features, score target rows with the classifier output.
pub fn run_learning_attack(
    attack_name: &str,
    variant: FeatureVariant,
    shadow: &[LabeledRecord],
    target: &[LabeledRecord],
    config: &MlpConfig,
) -> Result<ScoreSet> {
    if variant == FeatureVariant::AugmentCorr {
        return Err(Error::config(
            "augment_corr features come from oracle queries; use the query-augment attack",
        ));
    }
    let shadow_x = features_for(variant, shadow)?;
    let target_x = features_for(variant, target)?;
    let ids: Vec<(&str, bool)> = target.iter().map(|r| (r.sample.sample_id.as_str(), r.is_member)).collect();
    score_with_meta_classifier(attack_name, &shadow_x, &binary_labels(shadow), &target_x, &ids, config)
}

/// Shared tail of the learning-style attacks.
pub(crate) fn score_with_meta_classifier(
    attack_name: &str,
    train_x: &[Vec<f64>],
    train_y: &[bool],
    target_x: &[Vec<f64>],
    target_ids: &[(&str, bool)],
    config: &MlpConfig,
) -> Result<ScoreSet> {
    let clf = train_meta_classifier(train_x, train_y, config)?;
    let entries = target_x
        .iter()
        .zip(target_ids)
        .map(|(x, (id, member))| {
            Ok(ScoreEntry {
                sample_id: id.to_string(),
                score: predict_membership_prob(&clf, x)?,
                is_member: *member,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ScoreSet::new(attack_name, entries)
}
