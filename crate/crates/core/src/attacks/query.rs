//! Attacks that issue extra queries to a model oracle: augmentation,
//! neighbors, surrogate transfer, decision-boundary distance, quantile
//! regression and reference-crafted queries.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attacks::learn::{extract_features, score_with_meta_classifier, FeatureVariant, MlpConfig};
use crate::attacks::metric::xent_loss;
use crate::attacks::model::{scaled_logit, BankEntry, LiraMode, PooledBank};
use crate::error::{Error, Result};
use crate::nn::{self, Adam, Network};
use crate::oracle::{ModelOracle, Session};
use crate::record::{ScoreEntry, ScoreSet};
use crate::zoo::{self, BuiltinModel, ModelKind, TrainConfig};

/// A sample the attacker can query, with its ground-truth membership (used
/// only for evaluation and for shadow-side training).
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySample {
    pub sample_id: String,
    pub features: Vec<f64>,
    pub label: usize,
    pub is_member: bool,
}

fn check_budget(requested: usize, oracle: &ModelOracle) -> Result<()> {
    let budget = oracle.budget().max_extra_queries_per_sample;
    if requested > budget {
        return Err(Error::BudgetExceeded { requested, budget });
    }
    Ok(())
}

fn stream_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// `n` Gaussian perturbations of `features`, deterministic per seed.
pub fn gen_neighbors(features: &[f64], n: usize, sigma: f64, budget: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n > budget {
        return Err(Error::BudgetExceeded { requested: n, budget });
    }
    if !(sigma > 0.0) {
        return Err(Error::config(format!("neighbor sigma must be positive, got {sigma}")));
    }
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| features.iter().map(|v| v + noise.sample(&mut rng)).collect())
        .collect())
}

/// Mean neighbor loss minus the sample's own loss.
pub fn score_query_neighbor(loss_x: f64, neighbor_losses: &[f64]) -> Result<f64> {
    if neighbor_losses.is_empty() {
        return Err(Error::MissingInput("empty neighbor list".into()));
    }
    Ok(neighbor_losses.iter().sum::<f64>() / neighbor_losses.len() as f64 - loss_x)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeighborSpec {
    pub count: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for NeighborSpec {
    fn default() -> Self {
        Self {
            count: 10,
            sigma: 0.05,
            seed: 0,
        }
    }
}

pub fn run_query_neighbor(
    attack_name: &str,
    oracle: &ModelOracle,
    samples: &[QuerySample],
    spec: &NeighborSpec,
) -> Result<ScoreSet> {
    check_budget(spec.count, oracle)?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let mut session = oracle.session(&s.sample_id);
        let loss_x = xent_loss(&session.probs(&s.features)?, s.label);
        let neighbors = gen_neighbors(
            &s.features,
            spec.count,
            spec.sigma,
            oracle.budget().max_extra_queries_per_sample,
            stream_seed(spec.seed, i),
        )?;
        let losses = neighbors
            .iter()
            .map(|n| Ok(xent_loss(&session.probs(n)?, s.label)))
            .collect::<Result<Vec<_>>>()?;
        entries.push(entry(s, score_query_neighbor(loss_x, &losses)?));
    }
    ScoreSet::new(attack_name, entries)
}

fn entry(s: &QuerySample, score: f64) -> ScoreEntry {
    ScoreEntry {
        sample_id: s.sample_id.clone(),
        score,
        is_member: s.is_member,
    }
}

/// Layout of image-like features (channel-major), enabling flips and shifts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSpec {
    pub count: usize,
    /// Noise scale for non-image features.
    pub sigma: f64,
    pub image: Option<ImageShape>,
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            count: 10,
            sigma: 0.05,
            image: None,
            seed: 0,
        }
    }
}

const SHIFTS: [(isize, isize); 9] = [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1), (1, -1), (-1, 1)];

/// The `k`-th deterministic flip/shift of an image. Augmentation 0 is the
/// plain horizontal flip; later ones cycle through one-pixel shifts with and
/// without a flip.
fn image_augment(x: &[f64], shape: ImageShape, k: usize) -> Result<Vec<f64>> {
    let ImageShape { channels, height, width } = shape;
    if channels * height * width != x.len() {
        return Err(Error::Dimension {
            expected: channels * height * width,
            actual: x.len(),
        });
    }
    let flip = k.is_multiple_of(2);
    let (dx, dy) = SHIFTS[(k / 2) % SHIFTS.len()];
    let mut out = vec![0.0; x.len()];
    for c in 0..channels {
        for r in 0..height {
            for col in 0..width {
                let src_r = r as isize - dy;
                let mut src_c = col as isize - dx;
                if src_r < 0 || src_r >= height as isize || src_c < 0 || src_c >= width as isize {
                    continue;
                }
                if flip {
                    src_c = width as isize - 1 - src_c;
                }
                out[(c * height + r) * width + col] = x[(c * height + src_r as usize) * width + src_c as usize];
            }
        }
    }
    Ok(out)
}

pub fn augmentations(features: &[f64], spec: &AugmentSpec, seed: u64) -> Result<Vec<Vec<f64>>> {
    match spec.image {
        Some(shape) => (0..spec.count).map(|k| image_augment(features, shape, k)).collect(),
        None => gen_neighbors(features, spec.count, spec.sigma, spec.count, seed),
    }
}

/// 0/1 correctness of the oracle's label on the sample and each augmentation.
fn correctness_vector(session: &mut Session<'_>, s: &QuerySample, spec: &AugmentSpec, seed: u64) -> Result<Vec<f64>> {
    let mut v = Vec::with_capacity(spec.count + 1);
    v.push(f64::from(session.label(&s.features)? == s.label));
    for a in augmentations(&s.features, spec, seed)? {
        v.push(f64::from(session.label(&a)? == s.label));
    }
    Ok(v)
}

fn correctness_table(oracle: &ModelOracle, samples: &[QuerySample], spec: &AugmentSpec) -> Result<Vec<Vec<f64>>> {
    check_budget(spec.count, oracle)?;
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut session = oracle.session(&s.sample_id);
            let v = correctness_vector(&mut session, s, spec, stream_seed(spec.seed, i))?;
            extract_features(FeatureVariant::AugmentCorr, &[], None, Some(&v))
        })
        .collect()
}

/// Meta-classifier over correctness vectors, trained on the shadow side.
pub fn run_query_augment(
    attack_name: &str,
    target: (&ModelOracle, &[QuerySample]),
    shadow: (&ModelOracle, &[QuerySample]),
    spec: &AugmentSpec,
    mlp: &MlpConfig,
) -> Result<ScoreSet> {
    let shadow_x = correctness_table(shadow.0, shadow.1, spec)?;
    let shadow_y: Vec<bool> = shadow.1.iter().map(|s| s.is_member).collect();
    let target_x = correctness_table(target.0, target.1, spec)?;
    let ids: Vec<(&str, bool)> = target.1.iter().map(|s| (s.sample_id.as_str(), s.is_member)).collect();
    score_with_meta_classifier(attack_name, &shadow_x, &shadow_y, &target_x, &ids, mlp)
}

/// Train a surrogate on auxiliary features labeled by the oracle, then score
/// target samples by their log-likelihood under the surrogate.
pub fn run_query_transfer(
    attack_name: &str,
    oracle: &ModelOracle,
    auxiliary: &[Vec<f64>],
    targets: &[QuerySample],
    num_classes: usize,
    kind: ModelKind,
    config: &TrainConfig,
) -> Result<ScoreSet> {
    if auxiliary.is_empty() {
        return Err(Error::DegenerateLabels("auxiliary set is empty".into()));
    }
    let labels = auxiliary
        .iter()
        .enumerate()
        .map(|(i, x)| oracle.session(&format!("aux:{i}")).label(x))
        .collect::<Result<Vec<_>>>()?;
    let (surrogate, _) = zoo::train_builtin(kind, auxiliary, &labels, num_classes, config, None)?;
    let entries = targets
        .iter()
        .map(|s| Ok(entry(s, -xent_loss(&zoo::predict(&surrogate, &s.features)?, s.label))))
        .collect::<Result<Vec<_>>>()?;
    ScoreSet::new(attack_name, entries)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundarySpec {
    /// Random directions; each is tried with both signs.
    pub num_directions: usize,
    /// Largest perturbation norm probed; also the "no flip found" sentinel.
    pub cap: f64,
    pub bisect_steps: usize,
    pub seed: u64,
}

impl Default for BoundarySpec {
    fn default() -> Self {
        Self {
            num_directions: 8,
            cap: 4.0,
            bisect_steps: 4,
            seed: 0,
        }
    }
}

fn random_unit_directions(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
            let n = nn::dot(&v, &v).sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Label-flip distance along `directions` (unit vectors, tried in order with
/// both signs). Queries stop when the session's budget runs out; a
/// misclassified sample scores 0 and "no flip found" scores `cap`.
pub fn boundary_distance_along(
    session: &mut Session<'_>,
    features: &[f64],
    label: usize,
    directions: &[Vec<f64>],
    cap: f64,
    bisect_steps: usize,
) -> Result<f64> {
    if !(cap > 0.0) {
        return Err(Error::config("boundary cap must be positive"));
    }
    if session.label(features)? != label {
        return Ok(0.0);
    }
    let point = |d: &[f64], sign: f64, t: f64| -> Vec<f64> {
        features.iter().zip(d).map(|(x, di)| x + sign * t * di).collect()
    };
    let mut best = cap;
    'outer: for d in directions {
        for sign in [1.0, -1.0] {
            if session.remaining() == 0 {
                break 'outer;
            }
            // Only probe up to the best flip found so far.
            let (mut lo, mut hi) = (0.0, best);
            if session.label(&point(d, sign, hi))? == label {
                continue;
            }
            for _ in 0..bisect_steps {
                if session.remaining() == 0 {
                    break;
                }
                let mid = 0.5 * (lo + hi);
                if session.label(&point(d, sign, mid))? == label {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            best = best.min(hi);
        }
    }
    Ok(best)
}

pub fn boundary_distance(session: &mut Session<'_>, features: &[f64], label: usize, spec: &BoundarySpec) -> Result<f64> {
    let dirs = random_unit_directions(features.len(), spec.num_directions, spec.seed);
    boundary_distance_along(session, features, label, &dirs, spec.cap, spec.bisect_steps)
}

pub fn run_query_adv(
    attack_name: &str,
    oracle: &ModelOracle,
    samples: &[QuerySample],
    spec: &BoundarySpec,
) -> Result<ScoreSet> {
    let entries = samples
        .iter()
        .map(|s| {
            let mut session = oracle.session(&s.sample_id);
            Ok(entry(s, boundary_distance(&mut session, &s.features, s.label, spec)?))
        })
        .collect::<Result<Vec<_>>>()?;
    ScoreSet::new(attack_name, entries)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QrmConfig {
    pub alpha: f64,
    pub hidden_sizes: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for QrmConfig {
    fn default() -> Self {
        Self {
            alpha: 0.95,
            hidden_sizes: vec![64, 32],
            learning_rate: 0.001,
            epochs: 100,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileRegressor {
    pub network: Network,
    pub alpha: f64,
}

impl QuantileRegressor {
    pub fn predict(&self, features: &[f64]) -> Result<f64> {
        Ok(self.network.forward(features)?[0])
    }
}

/// Empirical `alpha`-quantile (lower interpolation-free order statistic).
fn empirical_quantile(values: &[f64], alpha: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let idx = ((alpha * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
    v[idx]
}

/// Pinball-loss regression of `targets` on `features`, with the output bias
/// warm-started at the empirical quantile.
pub fn train_quantile_regressor(features: &[Vec<f64>], targets: &[f64], config: &QrmConfig) -> Result<QuantileRegressor> {
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(Error::config(format!("alpha {} outside (0, 1)", config.alpha)));
    }
    if features.is_empty() {
        return Err(Error::MissingInput("empty auxiliary set".into()));
    }
    if features.len() != targets.len() {
        return Err(Error::Dimension {
            expected: features.len(),
            actual: targets.len(),
        });
    }
    if config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::config("batch_size and learning_rate must be positive"));
    }
    let mut sizes = vec![features[0].len()];
    sizes.extend(&config.hidden_sizes);
    sizes.push(1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = Network::glorot(&sizes, &mut rng)?;
    // Start from the unconditional quantile so training only has to learn
    // the feature-dependent correction.
    let base: f64 = features.iter().map(|x| net.forward(x).map(|o| o[0])).sum::<Result<f64>>()? / features.len() as f64;
    net.output_bias_mut()[0] = empirical_quantile(targets, config.alpha) - base;

    let mask = net.weight_mask();
    let mut adam = Adam::new(net.params.len(), config.learning_rate);
    let mut order: Vec<usize> = (0..features.len()).collect();
    for _ in 0..config.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for batch in order.chunks(config.batch_size) {
            nn::minibatch_step(&mut net, &mut adam, features, batch, 0.0, &mask, |i, out| {
                let (l, g) = nn::pinball(out[0], targets[i], config.alpha);
                (l, vec![g])
            })?;
        }
    }
    Ok(QuantileRegressor {
        network: net,
        alpha: config.alpha,
    })
}

/// Target statistic minus the predicted non-member quantile.
pub fn score_qrm(reg: &QuantileRegressor, features: &[f64], phi_target: f64) -> Result<f64> {
    Ok(phi_target - reg.predict(features)?)
}

/// Fit the regressor on the target's scaled logits over auxiliary
/// (non-member) data, then score target samples.
pub fn run_query_qrm(
    attack_name: &str,
    oracle: &ModelOracle,
    auxiliary: &[QuerySample],
    targets: &[QuerySample],
    config: &QrmConfig,
) -> Result<ScoreSet> {
    let phi = |s: &QuerySample| -> Result<f64> { scaled_logit(&oracle.session(&s.sample_id).probs(&s.features)?, s.label) };
    let aux_x: Vec<Vec<f64>> = auxiliary.iter().map(|s| s.features.clone()).collect();
    let aux_y = auxiliary.iter().map(phi).collect::<Result<Vec<_>>>()?;
    let reg = train_quantile_regressor(&aux_x, &aux_y, config)?;
    let entries = targets
        .iter()
        .map(|s| Ok(entry(s, score_qrm(&reg, &s.features, phi(s)?)?)))
        .collect::<Result<Vec<_>>>()?;
    ScoreSet::new(attack_name, entries)
}

/// A differentiable reference model and the sample ids it was trained on.
#[derive(Clone, Copy, Debug)]
pub struct ReferenceModel<'a> {
    pub model: &'a BuiltinModel,
    pub trained_on: &'a BTreeSet<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CraftSpec {
    pub step_size: f64,
    pub iterations: usize,
}

impl Default for CraftSpec {
    fn default() -> Self {
        Self {
            step_size: 0.05,
            iterations: 10,
        }
    }
}

/// `x` followed by up to `min(iterations, budget)` normalized gradient-ascent
/// iterates on (mean OUT-model loss − mean IN-model loss).
pub fn craft_reference_queries(
    features: &[f64],
    label: usize,
    in_models: &[&BuiltinModel],
    out_models: &[&BuiltinModel],
    budget: usize,
    spec: &CraftSpec,
) -> Result<Vec<Vec<f64>>> {
    let steps = spec.iterations.min(budget);
    let mut queries = vec![features.to_vec()];
    if steps > 0 && in_models.is_empty() && out_models.is_empty() {
        return Err(Error::MissingInput("crafting needs at least one reference model".into()));
    }
    let mut x = features.to_vec();
    for _ in 0..steps {
        let mut g = vec![0.0; x.len()];
        for (models, sign) in [(out_models, 1.0), (in_models, -1.0)] {
            let w = sign / models.len().max(1) as f64;
            for m in models {
                for (gi, di) in g.iter_mut().zip(zoo::grad_wrt_input(m, &x, label)?) {
                    *gi += w * di;
                }
            }
        }
        let norm = nn::dot(&g, &g).sqrt();
        if norm == 0.0 {
            break;
        }
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi += spec.step_size * gi / norm;
        }
        queries.push(x.clone());
    }
    Ok(queries)
}

fn mean_scaled_logit(probs: &[Vec<f64>], label: usize) -> Result<f64> {
    let mut s = 0.0;
    for p in probs {
        s += scaled_logit(p, label)?;
    }
    Ok(s / probs.len() as f64)
}

/// LiRA over the mean scaled logit of reference-crafted queries.
pub fn run_query_ref(
    attack_name: &str,
    oracle: &ModelOracle,
    references: &[ReferenceModel<'_>],
    samples: &[QuerySample],
    spec: &CraftSpec,
    mode: LiraMode,
) -> Result<ScoreSet> {
    if references.is_empty() {
        return Err(Error::MissingInput("Query-ref needs reference models".into()));
    }
    let budget = oracle.budget().max_extra_queries_per_sample;
    let mut scored = Vec::with_capacity(samples.len());
    for s in samples {
        let (ins, outs): (Vec<&ReferenceModel<'_>>, Vec<_>) = references.iter().partition(|r| r.trained_on.contains(&s.sample_id));
        let in_models: Vec<&BuiltinModel> = ins.iter().map(|r| r.model).collect();
        let out_models: Vec<&BuiltinModel> = outs.iter().map(|r| r.model).collect();
        let queries = craft_reference_queries(&s.features, s.label, &in_models, &out_models, budget, spec)?;

        let mut session = oracle.session(&s.sample_id);
        let target_probs = queries.iter().map(|q| session.probs(q)).collect::<Result<Vec<_>>>()?;
        let phi = mean_scaled_logit(&target_probs, s.label)?;

        let ref_phi = |m: &BuiltinModel| -> Result<f64> {
            let p = queries.iter().map(|q| zoo::predict(m, q)).collect::<Result<Vec<_>>>()?;
            mean_scaled_logit(&p, s.label)
        };
        let bank = BankEntry {
            in_values: in_models.iter().map(|m| ref_phi(m)).collect::<Result<_>>()?,
            out_values: out_models.iter().map(|m| ref_phi(m)).collect::<Result<_>>()?,
        };
        scored.push((s, phi, bank));
    }
    let pooled = PooledBank::from_entries(&scored.iter().map(|(_, _, b)| b).collect::<Vec<_>>());
    let entries = scored
        .iter()
        .map(|(s, phi, bank)| Ok(entry(s, pooled.score_lira(*phi, bank, mode)?)))
        .collect::<Result<Vec<_>>>()?;
    ScoreSet::new(attack_name, entries)
}
