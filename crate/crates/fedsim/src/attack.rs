//! Local training for benign clients and every attack variant: plain OOD
//! backdoor training, its stealthy regularized form with self-reference
//! training, and the baseline update transforms (scaling, projection,
//! colluding mean-shift, masking).

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{cosine_similarity, l2_norm};
use crate::nn::{Batch, ModelState};
use crate::seeding::mix_seed;

/// Hyperparameters for one client's local SGD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub seed: u64,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        LocalTrainConfig {
            epochs: 2,
            batch_size: 64,
            lr: 0.1,
            lr_decay: 0.99,
            seed: 0,
        }
    }
}

impl LocalTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("lr must be > 0 (got {})", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "lr_decay must be in (0, 1] (got {})",
                self.lr_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// How the stealthy attack obtains its benign reference model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// Train a reference on the clean local data this round.
    SelfReference,
    /// Use the downloaded global model directly.
    GlobalAsReference,
    /// Use a reference trained during the previous round's gap time.
    PreviousRoundPretrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SodaConfig {
    pub lambda_m: f64,
    pub lambda_d: f64,
    pub reference_mode: ReferenceMode,
}

impl Default for SodaConfig {
    fn default() -> Self {
        SodaConfig {
            lambda_m: 0.1,
            lambda_d: 100.0,
            reference_mode: ReferenceMode::SelfReference,
        }
    }
}

impl SodaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_m < 0.0 || self.lambda_d < 0.0 {
            return Err(Error::InvalidConfig(
                "regularization coefficients must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// One client's contribution to a round: the flat delta (trainables followed
/// by buffers) relative to the downloaded global model.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub delta: Vec<f64>,
    /// Ground truth, visible only to the engine's metrics.
    pub is_malicious: bool,
}

/// Gradient of `lambda_m * ||theta - ref||^2 + lambda_d * (1 - cos(theta, ref))`
/// with respect to `theta`.
pub fn regularizer_grad(
    theta: &[f64],
    theta_ref: &[f64],
    lambda_m: f64,
    lambda_d: f64,
) -> Result<Vec<f64>> {
    if theta.len() != theta_ref.len() {
        return Err(Error::LengthMismatch {
            expected: theta.len(),
            got: theta_ref.len(),
        });
    }
    let mut grad = vec![0.0; theta.len()];
    if lambda_m != 0.0 {
        for ((g, t), r) in grad.iter_mut().zip(theta).zip(theta_ref) {
            *g += 2.0 * lambda_m * (t - r);
        }
    }
    if lambda_d != 0.0 {
        let nt = l2_norm(theta);
        let nr = l2_norm(theta_ref);
        if nt == 0.0 || nr == 0.0 {
            return Err(Error::ZeroNorm("soda direction regularizer".into()));
        }
        let cos = cosine_similarity(theta, theta_ref)?;
        let nt2 = nt * nt;
        for ((g, t), r) in grad.iter_mut().zip(theta).zip(theta_ref) {
            *g -= lambda_d * (r / (nt * nr) - cos * t / nt2);
        }
    }
    Ok(grad)
}

struct Regularizer<'a> {
    lambda_m: f64,
    lambda_d: f64,
    /// Multiplier on `lambda_m` in the proximal magnitude step; set by the
    /// attack-progress monitor (see [`SodaProgress`]).
    tether_gain: f64,
    theta_ref: &'a [f64],
}

/// Tether gain while the poison is visibly taking hold in the global model:
/// the attacker favours attack strength over stealth.
const TETHER_GAIN_DIRECT: f64 = 0.35;
/// Tether gain once the aggregator appears to be filtering the attack: the
/// attacker trades per-round strength for updates that blend into the benign
/// population.
const TETHER_GAIN_STEALTH: f64 = 6.0;
/// Cosine between the global round delta and the client's last poison
/// direction above which the client counts its update as accepted.
const ACCEPT_COS_MIN: f64 = 0.05;
/// Exponential-moving-average weight kept on the previous acceptance
/// estimate each round.
const ACCEPT_EMA_DECAY: f64 = 0.7;
/// Acceptance estimate below which the client assumes it is being filtered.
const ACCEPT_THRESHOLD: f64 = 0.5;

/// Cross-round attack-progress memory for one malicious client.
///
/// Each round the client asks a simple question: did the aggregator accept
/// my previous update? It answers it without any server cooperation by
/// projecting the observed global round delta onto the poison-specific
/// direction of the update it submitted last round (its trained weights
/// minus its clean-trained reference — the part of the update only a
/// malicious client contributes). A clearly positive cosine means the
/// aggregator folded the poison in; a cosine near zero means the update was
/// filtered out. An exponential moving average of that accept/reject
/// indicator picks the tether gain: while the aggregator is absorbing the
/// poison the client favours attack strength, and once it appears to be
/// filtered it trades per-round strength for updates that blend into the
/// benign spread. The state is threaded by the engine like the stored
/// reference model, keeping each client's training an independent
/// deterministic task.
#[derive(Debug, Clone, PartialEq)]
pub struct SodaProgress {
    /// Trainables of the global model downloaded last round.
    pub prev_global: Option<Vec<f64>>,
    /// Poison-specific direction of the update submitted last round.
    pub prev_direction: Option<Vec<f64>>,
    /// Moving average of the per-round accepted/filtered indicator; starts
    /// at 1 (assume accepted until there is evidence of filtering).
    pub acceptance: f64,
}

impl Default for SodaProgress {
    fn default() -> Self {
        SodaProgress { prev_global: None, prev_direction: None, acceptance: 1.0 }
    }
}

impl SodaProgress {
    /// Fold the newly downloaded global model into the acceptance estimate
    /// and return the tether gain to use this round.
    fn observe(&mut self, global_trainable: &[f64]) -> f64 {
        if let (Some(prev), Some(dir)) = (&self.prev_global, &self.prev_direction) {
            let round_delta: Vec<f64> =
                global_trainable.iter().zip(prev).map(|(g, p)| g - p).collect();
            let cos = cosine_similarity(&round_delta, dir).unwrap_or(0.0);
            let accepted = if cos > ACCEPT_COS_MIN { 1.0 } else { 0.0 };
            self.acceptance =
                ACCEPT_EMA_DECAY * self.acceptance + (1.0 - ACCEPT_EMA_DECAY) * accepted;
        }
        if self.acceptance < ACCEPT_THRESHOLD {
            TETHER_GAIN_STEALTH
        } else {
            TETHER_GAIN_DIRECT
        }
    }

    /// Record what this round's training produced so next round's download
    /// can be checked against it.
    fn record(&mut self, global: &ModelState, local: &ModelState, reference: &ModelState) {
        self.prev_global = Some(global.trainable.clone());
        let dir: Vec<f64> = local
            .trainable
            .iter()
            .zip(&reference.trainable)
            .map(|(l, r)| l - r)
            .collect();
        self.prev_direction = if l2_norm(&dir) > 0.0 { Some(dir) } else { None };
    }
}

/// Mini-batch index schedule: shuffle per epoch, fixed-size chunks, trailing
/// partial chunk dropped. Dropping the incomplete batch is the usual practice
/// when training with batch norm: the unbiased variance of a near-singleton
/// batch is wildly noisy and would be folded into the running buffers with
/// full momentum weight. A shard smaller than one full batch trains as a
/// single batch of everything (train-mode batch norm still needs >= 2
/// samples; smaller shards fail upstream).
fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(rng);
    if n <= batch_size {
        return vec![indices];
    }
    indices
        .chunks(batch_size)
        .filter(|c| c.len() == batch_size)
        .map(|c| c.to_vec())
        .collect()
}

fn batch_from(data: &Dataset, indices: &[usize]) -> Result<Batch> {
    let sub = data.subset(indices);
    Batch::new(sub.features, sub.labels)
}

fn train_inner(
    model: &mut ModelState,
    data: &Dataset,
    cfg: &LocalTrainConfig,
    reg: Option<&Regularizer<'_>>,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidData("cannot train on an empty dataset".into()));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.epochs {
        for chunk in epoch_batches(data.len(), cfg.batch_size, &mut rng) {
            let batch = batch_from(data, &chunk)?;
            let (_, mut grad) = model.loss_and_grad(&batch)?;
            if let Some(reg) = reg {
                if reg.lambda_d != 0.0 {
                    let rg = regularizer_grad(&model.trainable, reg.theta_ref, 0.0, reg.lambda_d)?;
                    for (g, r) in grad.iter_mut().zip(&rg) {
                        *g += r;
                    }
                }
            }
            model.sgd_step(&grad, cfg.lr)?;
            if let Some(reg) = reg {
                if reg.lambda_m != 0.0 {
                    // Proximal (implicit) step on the magnitude term: the exact
                    // minimizer of gain*lambda_m*||u - ref||^2 + 0.5*||u - theta||^2.
                    // Unconditionally stable for any lambda_m; as lambda_m grows
                    // the trainables are pinned to the reference.
                    let shrink = 1.0 / (1.0 + 2.0 * reg.tether_gain * reg.lambda_m);
                    for (t, r) in model.trainable.iter_mut().zip(reg.theta_ref) {
                        *t = r + (*t - r) * shrink;
                    }
                }
            }
        }
    }
    Ok(())
}

fn delta_from(global: &ModelState, local: &ModelState, client_id: usize, malicious: bool) -> ClientUpdate {
    let g = global.flatten_all();
    let l = local.flatten_all();
    ClientUpdate {
        client_id,
        delta: l.iter().zip(&g).map(|(a, b)| a - b).collect(),
        is_malicious: malicious,
    }
}

/// Shuffled mini-batch SGD on cross-entropy, starting from the global model.
pub fn benign_local_train(
    global: &ModelState,
    data: &Dataset,
    cfg: &LocalTrainConfig,
    client_id: usize,
) -> Result<ClientUpdate> {
    let mut local = global.clone();
    train_inner(&mut local, data, cfg, None)?;
    Ok(delta_from(global, &local, client_id, false))
}

/// Identical to [`benign_local_train`] but on the poisoned dataset.
pub fn oba_local_train(
    global: &ModelState,
    poisoned: &Dataset,
    cfg: &LocalTrainConfig,
    client_id: usize,
) -> Result<ClientUpdate> {
    let mut local = global.clone();
    train_inner(&mut local, poisoned, cfg, None)?;
    let mut update = delta_from(global, &local, client_id, true);
    update.is_malicious = true;
    Ok(update)
}

/// Salt for the reference-phase RNG so it does not share a stream with the
/// poisoned-phase shuffle.
const REF_PHASE_SALT: u64 = 0x5e1f_4ef5;

/// Two-phase stealthy training. Phase 1 produces a benign reference model
/// (mode-dependent); phase 2 trains on the poisoned data with magnitude and
/// direction regularizers pulling the trainables toward the reference.
///
/// Returns the update, a freshly trained reference for the next round in
/// `PreviousRoundPretrained` mode, and the updated attack-progress state
/// (pass [`SodaProgress::default`] on the first round).
pub fn soda_local_train(
    global: &ModelState,
    clean: &Dataset,
    poisoned: &Dataset,
    cfg: &LocalTrainConfig,
    soda: &SodaConfig,
    stored_ref: Option<&ModelState>,
    progress: Option<&SodaProgress>,
    client_id: usize,
) -> Result<(ClientUpdate, Option<ModelState>, SodaProgress)> {
    soda.validate()?;
    let mut progress = progress.cloned().unwrap_or_default();
    let tether_gain = progress.observe(&global.trainable);
    let ref_cfg = LocalTrainConfig {
        seed: mix_seed(cfg.seed, REF_PHASE_SALT),
        ..cfg.clone()
    };
    let train_reference = |g: &ModelState| -> Result<ModelState> {
        let mut r = g.clone();
        train_inner(&mut r, clean, &ref_cfg, None)?;
        Ok(r)
    };

    let reference = match soda.reference_mode {
        ReferenceMode::SelfReference => train_reference(global)?,
        ReferenceMode::GlobalAsReference => global.clone(),
        ReferenceMode::PreviousRoundPretrained => match stored_ref {
            Some(r) => r.clone(),
            // First round: no stored reference exists yet.
            None => train_reference(global)?,
        },
    };

    let mut local = global.clone();
    let reg = Regularizer {
        lambda_m: soda.lambda_m,
        lambda_d: soda.lambda_d,
        tether_gain,
        theta_ref: &reference.trainable,
    };
    train_inner(&mut local, poisoned, cfg, Some(&reg))?;
    let update = delta_from(global, &local, client_id, true);
    progress.record(global, &local, &reference);

    let next_ref = match soda.reference_mode {
        ReferenceMode::PreviousRoundPretrained => Some(train_reference(global)?),
        _ => None,
    };
    Ok((update, next_ref, progress))
}

/// `delta <- gamma * delta` over trainables and buffers.
pub fn transform_scaling(update: &mut ClientUpdate, gamma: f64) -> Result<()> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidConfig(format!("scaling gamma must be > 0 (got {gamma})")));
    }
    for v in update.delta.iter_mut() {
        *v *= gamma;
    }
    Ok(())
}

/// Project the trainable part of the delta onto the L2 ball of radius `eps`.
/// Buffer deltas are untouched.
pub fn transform_pgd(update: &mut ClientUpdate, trainable_len: usize, eps: f64) -> Result<()> {
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig(format!("pgd eps must be > 0 (got {eps})")));
    }
    let norm = l2_norm(&update.delta[..trainable_len]);
    if norm > eps {
        let scale = eps / norm;
        for v in update.delta[..trainable_len].iter_mut() {
            *v *= scale;
        }
    }
    Ok(())
}

/// Colluding clients submit the identical crafted delta
/// `mean(delta) + z * std(delta)` computed coordinate-wise over their own
/// updates (population standard deviation).
pub fn transform_lie(updates: &mut [ClientUpdate], z: f64) -> Result<()> {
    if updates.len() < 2 {
        return Err(Error::InvalidConfig(
            "lie transform needs at least 2 colluding updates".into(),
        ));
    }
    let len = updates[0].delta.len();
    let n = updates.len() as f64;
    let mut mean = vec![0.0; len];
    for u in updates.iter() {
        if u.delta.len() != len {
            return Err(Error::LengthMismatch { expected: len, got: u.delta.len() });
        }
        for (m, v) in mean.iter_mut().zip(&u.delta) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut std = vec![0.0; len];
    for u in updates.iter() {
        for ((s, v), m) in std.iter_mut().zip(&u.delta).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    let crafted: Vec<f64> = mean
        .iter()
        .zip(&std)
        .map(|(m, s)| m + z * (s / n).sqrt())
        .collect();
    for u in updates.iter_mut() {
        u.delta = crafted.clone();
    }
    Ok(())
}

/// Indices of the `ceil(k_frac * len)` largest-magnitude coordinates,
/// ties broken by lower index.
pub fn top_magnitude_indices(values: &[f64], k_frac: f64) -> Vec<usize> {
    let k = ((k_frac * values.len() as f64).ceil() as usize).min(values.len());
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .abs()
            .partial_cmp(&values[a].abs())
            .unwrap()
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Zero the malicious delta on the coordinates the benign population moved
/// most in the previous round. Only trainable coordinates are masked.
pub fn transform_neurotoxin(
    update: &mut ClientUpdate,
    prev_global_delta: &[f64],
    k_frac: f64,
) -> Result<()> {
    if !(k_frac > 0.0 && k_frac < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "neurotoxin k_frac must be in (0, 1) (got {k_frac})"
        )));
    }
    if prev_global_delta.len() > update.delta.len() {
        return Err(Error::LengthMismatch {
            expected: update.delta.len(),
            got: prev_global_delta.len(),
        });
    }
    for i in top_magnitude_indices(prev_global_delta, k_frac) {
        update.delta[i] = 0.0;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic_id, gen_synthetic_ood, poison_dataset, PoisonSpec};
    use crate::nn::ModelSpec;

    fn setup() -> (ModelState, Dataset, Dataset) {
        let spec = ModelSpec::mlp(8, 4);
        let global = ModelState::init(spec, 1);
        let clean = gen_synthetic_id(4, 8, 30, 1.0, 2).unwrap();
        let ood = gen_synthetic_ood(4, 8, 100, 3).unwrap();
        let poisoned = poison_dataset(
            &clean,
            &ood,
            &PoisonSpec { ratio: 0.3, target_label: 0, seed: 4, ood_seed: 4 },
        )
        .unwrap();
        (global, clean, poisoned)
    }

    fn cfg(seed: u64) -> LocalTrainConfig {
        LocalTrainConfig { seed, ..Default::default() }
    }

    #[test]
    fn benign_train_deterministic() {
        let (global, clean, _) = setup();
        let a = benign_local_train(&global, &clean, &cfg(9), 0).unwrap();
        let b = benign_local_train(&global, &clean, &cfg(9), 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn benign_train_reduces_loss() {
        let (global, clean, _) = setup();
        let measure = |m: &ModelState| {
            let mut m = m.clone();
            let batch = Batch::new(clean.features.clone(), clean.labels.clone()).unwrap();
            m.loss_and_grad(&batch).unwrap().0
        };
        let before = measure(&global);
        let update = benign_local_train(&global, &clean, &cfg(9), 0).unwrap();
        let local = global.apply_delta(&update.delta).unwrap();
        let after = measure(&local);
        assert!(after <= before, "loss went up: {before} -> {after}");
    }

    #[test]
    fn lr_epsilon_trainables_frozen_buffers_move() {
        // lr must be > 0, so use one that underflows every update to zero:
        // a step of lr*g with lr = 0 is disallowed; instead check the lr = 0
        // semantics through sgd_step directly and the buffer side effect here.
        let (global, clean, _) = setup();
        let mut local = global.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let chunk = epoch_batches(clean.len(), 64, &mut rng).remove(0);
        let batch = batch_from(&clean, &chunk).unwrap();
        let (_, grad) = local.loss_and_grad(&batch).unwrap();
        local.sgd_step(&grad, 0.0).unwrap();
        assert_eq!(local.trainable, global.trainable);
        assert_ne!(local.buffers, global.buffers);
    }

    #[test]
    fn oba_reduces_to_benign_on_clean_data() {
        let (global, clean, _) = setup();
        let a = benign_local_train(&global, &clean, &cfg(5), 3).unwrap();
        let b = oba_local_train(&global, &clean, &cfg(5), 3).unwrap();
        assert_eq!(a.delta, b.delta);
        assert!(b.is_malicious && !a.is_malicious);
    }

    #[test]
    fn soda_with_zero_lambdas_reduces_to_oba() {
        let (global, clean, poisoned) = setup();
        let oba = oba_local_train(&global, &poisoned, &cfg(7), 2).unwrap();
        let soda = SodaConfig { lambda_m: 0.0, lambda_d: 0.0, ..Default::default() };
        let (update, next, _) =
            soda_local_train(&global, &clean, &poisoned, &cfg(7), &soda, None, None, 2).unwrap();
        assert_eq!(update.delta, oba.delta);
        assert!(next.is_none());
    }

    #[test]
    fn magnitude_regularizer_pulls_toward_reference() {
        // The magnitude penalty is applied as a proximal shrink after each
        // SGD step, so it is stable for any lambda_m >= 0.
        let (global, clean, poisoned) = setup();
        let dist_for = |lambda_m: f64| {
            let soda = SodaConfig { lambda_m, lambda_d: 0.0, ..Default::default() };
            let (update, _, _) =
                soda_local_train(&global, &clean, &poisoned, &cfg(7), &soda, None, None, 2)
                    .unwrap();
            // Reconstruct the reference this call used.
            let ref_cfg = LocalTrainConfig { seed: mix_seed(7, REF_PHASE_SALT), ..cfg(7) };
            let mut reference = global.clone();
            train_inner(&mut reference, &clean, &ref_cfg, None).unwrap();
            let local = global.apply_delta(&update.delta).unwrap();
            crate::linalg::l2_distance(&local.trainable, &reference.trainable).unwrap()
        };
        let free = dist_for(0.0);
        let pulled = dist_for(4.0);
        assert!(
            pulled < 0.5 * free,
            "regularized distance {pulled} not well below unregularized {free}"
        );
    }

    #[test]
    fn huge_magnitude_penalty_pins_to_reference() {
        let (global, clean, poisoned) = setup();
        let soda = SodaConfig { lambda_m: 1e6, lambda_d: 0.0, ..Default::default() };
        let (update, _, _) =
            soda_local_train(&global, &clean, &poisoned, &cfg(7), &soda, None, None, 2).unwrap();
        let ref_cfg = LocalTrainConfig { seed: mix_seed(7, REF_PHASE_SALT), ..cfg(7) };
        let mut reference = global.clone();
        train_inner(&mut reference, &clean, &ref_cfg, None).unwrap();
        let local = global.apply_delta(&update.delta).unwrap();
        let dist = crate::linalg::l2_distance(&local.trainable, &reference.trainable).unwrap();
        let ref_norm = crate::linalg::l2_distance(&reference.trainable, &global.trainable).unwrap();
        assert!(dist < 0.01 * ref_norm, "dist {dist} vs reference step {ref_norm}");
    }

    #[test]
    fn soda_moves_closer_to_reference_than_oba() {
        let (global, clean, poisoned) = setup();
        let soda = SodaConfig::default();
        let (soda_up, _, _) =
            soda_local_train(&global, &clean, &poisoned, &cfg(7), &soda, None, None, 2).unwrap();
        let oba_up = oba_local_train(&global, &poisoned, &cfg(7), 2).unwrap();
        let ref_cfg = LocalTrainConfig { seed: mix_seed(7, REF_PHASE_SALT), ..cfg(7) };
        let mut reference = global.clone();
        train_inner(&mut reference, &clean, &ref_cfg, None).unwrap();
        let cos_of = |u: &ClientUpdate| {
            let local = global.apply_delta(&u.delta).unwrap();
            cosine_similarity(&local.trainable, &reference.trainable).unwrap()
        };
        assert!(cos_of(&soda_up) >= cos_of(&oba_up));
    }

    #[test]
    fn soda_b_threads_reference() {
        let (global, clean, poisoned) = setup();
        let soda = SodaConfig {
            reference_mode: ReferenceMode::PreviousRoundPretrained,
            ..Default::default()
        };
        let (_, next, _) =
            soda_local_train(&global, &clean, &poisoned, &cfg(7), &soda, None, None, 2).unwrap();
        let stored = next.expect("soda_b returns a reference");
        let (u2, next2, _) =
            soda_local_train(&global, &clean, &poisoned, &cfg(8), &soda, Some(&stored), None, 2)
                .unwrap();
        assert!(next2.is_some());
        assert_eq!(u2.delta.len(), global.flatten_all().len());
    }

    #[test]
    fn regularizer_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let theta: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let theta_ref: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (lm, ld) = (0.1, 100.0);
            let analytic = regularizer_grad(&theta, &theta_ref, lm, ld).unwrap();
            let value = |t: &[f64]| {
                lm * crate::linalg::l2_distance(t, &theta_ref).unwrap().powi(2)
                    + ld * (1.0 - cosine_similarity(t, &theta_ref).unwrap())
            };
            for i in 0..theta.len() {
                let mut plus = theta.clone();
                plus[i] += 1e-5;
                let mut minus = theta.clone();
                minus[i] -= 1e-5;
                let numeric = (value(&plus) - value(&minus)) / 2e-5;
                let scale = analytic[i].abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (analytic[i] - numeric).abs() / scale < 1e-4,
                    "coord {i}: analytic {}, numeric {numeric}",
                    analytic[i]
                );
            }
        }
    }

    #[test]
    fn scaling_identity_and_norm() {
        let mut u = ClientUpdate { client_id: 0, delta: vec![1.0, -2.0, 3.0], is_malicious: true };
        let before = u.clone();
        transform_scaling(&mut u, 1.0).unwrap();
        assert_eq!(u, before);
        transform_scaling(&mut u, 10.0).unwrap();
        assert_eq!(l2_norm(&u.delta), 10.0 * l2_norm(&before.delta));
    }

    #[test]
    fn pgd_projects_onto_ball() {
        let mut u = ClientUpdate { client_id: 0, delta: vec![3.0, 4.0, 7.0], is_malicious: true };
        transform_pgd(&mut u, 2, 1.0).unwrap();
        assert!((l2_norm(&u.delta[..2]) - 1.0).abs() < 1e-12);
        assert_eq!(u.delta[2], 7.0); // buffer part untouched
        // Already inside the ball: unchanged.
        let mut v = ClientUpdate { client_id: 0, delta: vec![0.1, 0.1, 7.0], is_malicious: true };
        let before = v.clone();
        transform_pgd(&mut v, 2, 1.0).unwrap();
        assert_eq!(v, before);
    }

    #[test]
    fn lie_crafted_update_properties() {
        let mut ups = vec![
            ClientUpdate { client_id: 0, delta: vec![1.0, 0.0], is_malicious: true },
            ClientUpdate { client_id: 1, delta: vec![3.0, 2.0], is_malicious: true },
        ];
        // z = 0: plain mean.
        let mut z0 = ups.clone();
        transform_lie(&mut z0, 0.0).unwrap();
        assert_eq!(z0[0].delta, vec![2.0, 1.0]);
        assert_eq!(z0[0].delta, z0[1].delta);
        // Deviation from the mean equals z * std exactly.
        transform_lie(&mut ups, 0.74).unwrap();
        assert_eq!(ups[0].delta, ups[1].delta);
        assert!((ups[0].delta[0] - (2.0 + 0.74 * 1.0)).abs() < 1e-12);
        assert!((ups[0].delta[1] - (1.0 + 0.74 * 1.0)).abs() < 1e-12);
    }

    #[test]
    fn neurotoxin_masks_top_coordinates() {
        let prev = vec![0.5, -3.0, 1.0, 0.1, -2.0];
        let mut u = ClientUpdate {
            client_id: 0,
            delta: vec![1.0; 6],
            is_malicious: true,
        };
        transform_neurotoxin(&mut u, &prev, 0.4).unwrap();
        // ceil(0.4 * 5) = 2 coordinates zeroed: |prev| ranks -3.0 then -2.0.
        assert_eq!(u.delta, vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn neurotoxin_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let prev: Vec<f64> = (0..30).map(|_| rng.random_range(-5.0..5.0)).collect();
            let k_frac = rng.random_range(0.05..0.9);
            let got = top_magnitude_indices(&prev, k_frac);
            let mut oracle: Vec<usize> = (0..prev.len()).collect();
            oracle.sort_by(|&a, &b| {
                prev[b].abs().partial_cmp(&prev[a].abs()).unwrap().then(a.cmp(&b))
            });
            let k = (k_frac * prev.len() as f64).ceil() as usize;
            assert_eq!(got, oracle[..k].to_vec());
            assert_eq!(got.len(), k);
        }
    }

    #[test]
    fn small_batch_degrades_to_full_batch() {
        let (global, clean, _) = setup();
        let big_batch = LocalTrainConfig { batch_size: 10_000, seed: 4, ..Default::default() };
        // batch_size > |D_i| is not an error.
        assert!(benign_local_train(&global, &clean, &big_batch, 0).is_ok());
    }
}
