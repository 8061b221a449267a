//! Round orchestration: client sampling, local training dispatch, defense
//! invocation, global model update, and per-round metric evaluation.
//!
//! The whole experiment is a pure function of its configuration (including
//! the master seed): every random draw happens on a generator whose seed is
//! derived from the master seed via named streams, so sequential and parallel
//! client execution produce bitwise-identical results.

use std::collections::{HashMap, HashSet};
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{
    benign_local_train, oba_local_train, soda_local_train, transform_lie, transform_neurotoxin,
    transform_pgd, transform_scaling, ClientUpdate, LocalTrainConfig, ReferenceMode, SodaConfig,
    SodaProgress,
};
use crate::data::{
    dirichlet_partition, gen_synthetic_id, gen_synthetic_ood, iid_partition, poison_dataset,
    Dataset, PartitionPlan, PoisonSpec,
};
use crate::defense::{
    agg_fedavg, agg_fedavg_star, agg_flame_lite, agg_foolsgold, agg_mkrum, agg_rfa, agg_rlr,
    bnguard, BnguardConfig, DefenseOutcome,
};
use crate::error::{Error, Result};
use crate::linalg::l2_norm;
use crate::nn::{ModelSpec, ModelState};
use crate::seeding::{client_round_seed, mix_seed, stream_seed, Stream};

/// Who participates each round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scenario {
    /// Every client participates every round.
    CrossSilo,
    /// A uniform sample of `k` clients participates per round.
    CrossDevice { k: usize },
}

/// How the training data is split over clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Partition {
    Iid,
    Dirichlet { alpha: f64 },
}

/// What malicious clients do locally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attack {
    None,
    Oba,
    Soda,
    SodaA,
    SodaB,
}

/// Optional post-training transform applied to malicious updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Scaling { gamma: f64 },
    Pgd { eps: f64 },
    Lie { z: f64 },
    Neurotoxin { k_frac: f64 },
}

/// Server-side aggregation rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Defense {
    Fedavg,
    FedavgStar,
    Mkrum,
    Rfa,
    Foolsgold,
    Rlr,
    FlameLite,
    Bnguard,
}

impl Defense {
    /// Weight-based rules have no selected set; TPR/FPR are not applicable.
    pub fn reports_selection(&self) -> bool {
        !matches!(self, Defense::Fedavg | Defense::Rfa | Defense::Foolsgold | Defense::Rlr)
    }
}

/// Shape of the synthetic datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    pub input_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub ood_pool: usize,
    pub ood_test: usize,
    pub spread: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            classes: 8,
            input_dim: 32,
            train_per_class: 1000,
            test_per_class: 250,
            ood_pool: 2000,
            ood_test: 1000,
            spread: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MkrumParams {
    /// Assumed malicious count; derived as `ceil(0.25 * participants)` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f_hat: Option<usize>,
    /// Updates kept; derived as `participants - f_hat` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m_select: Option<usize>,
}

impl Default for MkrumParams {
    fn default() -> Self {
        MkrumParams { f_hat: None, m_select: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlrParams {
    /// Sign-vote threshold; derived as `ceil(participants / 2)` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    pub server_lr: f64,
}

impl Default for RlrParams {
    fn default() -> Self {
        RlrParams { threshold: None, server_lr: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlameParams {
    pub lambda_noise: f64,
}

impl Default for FlameParams {
    fn default() -> Self {
        FlameParams { lambda_noise: 0.001 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RfaParams {
    pub iters: usize,
    pub smooth_eps: f64,
}

impl Default for RfaParams {
    fn default() -> Self {
        RfaParams { iters: 10, smooth_eps: 1e-6 }
    }
}

/// Whether client training runs on one thread or a rayon pool. Both produce
/// bitwise-identical results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    Sequential,
    Parallel,
}

/// Full description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_clients: usize,
    /// Fraction of clients compromised; `f = round(attack_ratio * n)`.
    pub attack_ratio: f64,
    pub scenario: Scenario,
    pub rounds: usize,
    pub partition: Partition,
    pub attack: Attack,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<Transform>,
    pub defense: Defense,
    /// Fraction of a malicious client's local data replaced by poison.
    pub poison_ratio: f64,
    pub target_label: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub local: LocalTrainConfig,
    #[serde(default)]
    pub soda: SodaConfig,
    #[serde(default)]
    pub bnguard: BnguardConfig,
    #[serde(default)]
    pub mkrum: MkrumParams,
    #[serde(default)]
    pub rlr: RlrParams,
    #[serde(default)]
    pub flame: FlameParams,
    #[serde(default)]
    pub rfa: RfaParams,
    #[serde(default = "default_execution")]
    pub execution: Execution,
}

fn default_execution() -> Execution {
    Execution::Parallel
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::reference(1)
    }
}

impl ExperimentConfig {
    /// The desk-scale reference scenario: 8 classes in 32 dimensions,
    /// 20 clients with 4 malicious, IID split, 30 rounds.
    pub fn reference(master_seed: u64) -> Self {
        ExperimentConfig {
            n_clients: 20,
            attack_ratio: 0.20,
            scenario: Scenario::CrossSilo,
            rounds: 30,
            partition: Partition::Iid,
            attack: Attack::Soda,
            transform: None,
            defense: Defense::Bnguard,
            poison_ratio: 0.30,
            target_label: 0,
            master_seed,
            data: DataConfig::default(),
            local: LocalTrainConfig::default(),
            soda: SodaConfig::default(),
            bnguard: BnguardConfig::default(),
            mkrum: MkrumParams::default(),
            rlr: RlrParams::default(),
            flame: FlameParams::default(),
            rfa: RfaParams::default(),
            execution: Execution::Parallel,
        }
    }

    /// Number of malicious clients implied by the attack ratio.
    pub fn f_malicious(&self) -> usize {
        if self.attack == Attack::None {
            0
        } else {
            (self.attack_ratio * self.n_clients as f64).round() as usize
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::InvalidConfig("n_clients must be >= 1".into()));
        }
        if self.rounds == 0 {
            return Err(Error::InvalidConfig("rounds must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.attack_ratio) {
            return Err(Error::InvalidConfig(format!(
                "attack_ratio must be in [0, 1) (got {})",
                self.attack_ratio
            )));
        }
        let f = self.f_malicious();
        if self.attack != Attack::None && f >= self.n_clients / 2 {
            return Err(Error::InvalidConfig(format!(
                "malicious count f={f} must satisfy f < floor(n/2) = {}",
                self.n_clients / 2
            )));
        }
        if !(self.poison_ratio > 0.0 && self.poison_ratio < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "poison_ratio must be in (0, 1) (got {})",
                self.poison_ratio
            )));
        }
        if self.target_label >= self.data.classes {
            return Err(Error::InvalidConfig(format!(
                "target_label {} out of range for {} classes",
                self.target_label, self.data.classes
            )));
        }
        if let Scenario::CrossDevice { k } = self.scenario {
            if k == 0 || k > self.n_clients {
                return Err(Error::InvalidConfig(format!(
                    "cross-device sample size k={k} must be in [1, {}]",
                    self.n_clients
                )));
            }
        }
        if let Partition::Dirichlet { alpha } = self.partition {
            if !(alpha > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "dirichlet alpha must be > 0 (got {alpha})"
                )));
            }
        }
        if let Some(t) = self.transform {
            match t {
                Transform::Scaling { gamma } if !(gamma > 0.0) => {
                    return Err(Error::InvalidConfig("scaling gamma must be > 0".into()));
                }
                Transform::Pgd { eps } if !(eps > 0.0) => {
                    return Err(Error::InvalidConfig("pgd eps must be > 0".into()));
                }
                Transform::Neurotoxin { k_frac } if !(k_frac > 0.0 && k_frac < 1.0) => {
                    return Err(Error::InvalidConfig("neurotoxin k_frac must be in (0, 1)".into()));
                }
                _ => {}
            }
        }
        self.local.validate()?;
        self.soda.validate()?;
        Ok(())
    }
}

/// Extra per-round defense output, serialized for offline analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundDiagnostics {
    /// One feature row per participant, in sorted-client-id order.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bn_features: Option<Vec<[f64; 4]>>,
    /// Cluster assignment aligned with `bn_features`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub assignment: Option<Vec<usize>>,
}

/// One round's results.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Main-task accuracy on clean test data, percent.
    pub ma: f64,
    /// Attack success rate on the poison test set, percent.
    pub asr: f64,
    pub participants: Vec<usize>,
    pub selected: Option<Vec<usize>>,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub global_trainable_norm: f64,
    /// Wall time is excluded from serialization so emitted record files are
    /// byte-identical across runs.
    #[serde(skip)]
    pub wall_time_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub diagnostics: Option<RoundDiagnostics>,
}

/// Equality ignores wall time, which is not part of the experiment's
/// deterministic output.
impl PartialEq for RoundRecord {
    fn eq(&self, other: &Self) -> bool {
        self.round == other.round
            && self.ma == other.ma
            && self.asr == other.asr
            && self.participants == other.participants
            && self.selected == other.selected
            && self.tpr == other.tpr
            && self.fpr == other.fpr
            && self.global_trainable_norm == other.global_trainable_norm
            && self.diagnostics == other.diagnostics
    }
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    pub malicious: Vec<usize>,
    pub final_model: ModelState,
}

/// Local learning rate at round `t`: `lr0 * decay^t`.
pub fn lr_at_round(lr0: f64, decay: f64, round: usize) -> f64 {
    lr0 * decay.powi(round as i32)
}

/// Uniform sample of `k` of `n` clients, deterministic per (seed, round).
pub fn sample_participants(n: usize, k: usize, round: usize, master_seed: u64) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..n).collect();
    if k >= n {
        return ids;
    }
    let seed = mix_seed(stream_seed(master_seed, Stream::Participation), round as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    ids.truncate(k);
    ids.sort_unstable();
    ids
}

/// Main-task accuracy and attack success rate, both in percent.
pub fn evaluate(
    model: &ModelState,
    test_id: &Dataset,
    test_ood: &Dataset,
    target_label: usize,
) -> Result<(f64, f64)> {
    if test_id.is_empty() || test_ood.is_empty() {
        return Err(Error::InvalidData("evaluation needs nonempty test sets".into()));
    }
    let mut m = model.clone();
    let id_preds = m.predict(&test_id.features)?;
    let correct = id_preds
        .iter()
        .zip(&test_id.labels)
        .filter(|(p, l)| p == l)
        .count();
    let ood_preds = m.predict(&test_ood.features)?;
    let hits = ood_preds.iter().filter(|&&p| p == target_label).count();
    Ok((
        100.0 * correct as f64 / test_id.len() as f64,
        100.0 * hits as f64 / test_ood.len() as f64,
    ))
}

/// TPR = percent of participating benign clients selected; FPR = percent of
/// participating malicious clients (wrongly) selected. Either is `None` when
/// its denominator is empty.
pub fn compute_tpr_fpr(
    selected: &[usize],
    malicious: &HashSet<usize>,
    participating: &[usize],
) -> (Option<f64>, Option<f64>) {
    let sel: HashSet<usize> = selected.iter().copied().collect();
    let benign_part: Vec<usize> = participating
        .iter()
        .copied()
        .filter(|c| !malicious.contains(c))
        .collect();
    let mal_part: Vec<usize> = participating
        .iter()
        .copied()
        .filter(|c| malicious.contains(c))
        .collect();
    let tpr = if benign_part.is_empty() {
        None
    } else {
        let kept = benign_part.iter().filter(|c| sel.contains(c)).count();
        Some(100.0 * kept as f64 / benign_part.len() as f64)
    };
    let fpr = if mal_part.is_empty() {
        None
    } else {
        let kept = mal_part.iter().filter(|c| sel.contains(c)).count();
        Some(100.0 * kept as f64 / mal_part.len() as f64)
    };
    (tpr, fpr)
}

/// Fixed malicious set for the whole experiment: the first `f` ids of a
/// seeded shuffle of all clients.
pub fn malicious_set(n: usize, f: usize, master_seed: u64) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(master_seed, Stream::MaliciousSet));
    ids.shuffle(&mut rng);
    ids.truncate(f);
    ids.sort_unstable();
    ids
}

struct ClientData {
    clean: Dataset,
    /// Present only for malicious clients with enough data to poison.
    poisoned: Option<Dataset>,
}

/// Run the full experiment and return one record per round.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let d = &cfg.data;
    let master = cfg.master_seed;

    let id_train = gen_synthetic_id(
        d.classes,
        d.input_dim,
        d.train_per_class,
        d.spread,
        stream_seed(master, Stream::IdTrain),
    )?;
    let id_test = gen_synthetic_id(
        d.classes,
        d.input_dim,
        d.test_per_class,
        d.spread,
        stream_seed(master, Stream::IdTest),
    )?;
    let ood_pool =
        gen_synthetic_ood(d.classes, d.input_dim, d.ood_pool, stream_seed(master, Stream::OodPool))?;
    let ood_test =
        gen_synthetic_ood(d.classes, d.input_dim, d.ood_test, stream_seed(master, Stream::OodTest))?;

    let plan: PartitionPlan = match cfg.partition {
        Partition::Iid => iid_partition(&id_train, cfg.n_clients, stream_seed(master, Stream::Partition))?,
        Partition::Dirichlet { alpha } => {
            dirichlet_partition(&id_train, cfg.n_clients, alpha, stream_seed(master, Stream::Partition))?
        }
    };

    let f = cfg.f_malicious();
    let malicious_ids = malicious_set(cfg.n_clients, f, master);
    let malicious: HashSet<usize> = malicious_ids.iter().copied().collect();

    let mut clients = Vec::with_capacity(cfg.n_clients);
    for c in 0..cfg.n_clients {
        let clean = id_train.subset(&plan.clients[c]);
        let poisoned = if malicious.contains(&c) {
            let replace = (cfg.poison_ratio * clean.len() as f64).floor() as usize;
            if replace == 0 {
                // Too little local data to poison; the client trains clean.
                None
            } else {
                Some(poison_dataset(
                    &clean,
                    &ood_pool,
                    &PoisonSpec {
                        ratio: cfg.poison_ratio,
                        target_label: cfg.target_label,
                        seed: mix_seed(stream_seed(master, Stream::Poison), c as u64),
                        ood_seed: stream_seed(master, Stream::Poison),
                    },
                )?)
            }
        } else {
            None
        };
        clients.push(ClientData { clean, poisoned });
    }

    let spec = ModelSpec::mlp(d.input_dim, d.classes);
    let trainable_len = spec.trainable_len();
    let mut global = ModelState::init(spec, stream_seed(master, Stream::ModelInit));

    // Per-client state threaded across rounds.
    let mut stored_refs: HashMap<usize, ModelState> = HashMap::new();
    let mut soda_progress: HashMap<usize, SodaProgress> = HashMap::new();
    let mut histories: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut prev_global_delta: Option<Vec<f64>> = None;

    let mut records = Vec::with_capacity(cfg.rounds);
    for t in 0..cfg.rounds {
        let started = Instant::now();
        let lr = lr_at_round(cfg.local.lr, cfg.local.lr_decay, t);

        let sampled = match cfg.scenario {
            Scenario::CrossSilo => (0..cfg.n_clients).collect::<Vec<_>>(),
            Scenario::CrossDevice { k } => sample_participants(cfg.n_clients, k, t, master),
        };
        // Clients without enough data for a train-mode batch sit the round out.
        let participants: Vec<usize> =
            sampled.into_iter().filter(|&c| clients[c].clean.len() >= 2).collect();
        if participants.is_empty() {
            return Err(Error::InvalidData(format!("round {t}: no trainable participants")));
        }

        let train_one =
            |&c: &usize| -> Result<(ClientUpdate, Option<ModelState>, Option<SodaProgress>)> {
            let local_cfg = LocalTrainConfig {
                lr,
                seed: client_round_seed(master, t, c),
                ..cfg.local.clone()
            };
            let data = &clients[c];
            if !malicious.contains(&c) || cfg.attack == Attack::None {
                return Ok((benign_local_train(&global, &data.clean, &local_cfg, c)?, None, None));
            }
            let poisoned = match &data.poisoned {
                Some(p) => p,
                None => {
                    // Degenerate malicious client: behaves benignly but is
                    // still counted as malicious in the metrics.
                    let mut u = benign_local_train(&global, &data.clean, &local_cfg, c)?;
                    u.is_malicious = true;
                    return Ok((u, None, None));
                }
            };
            match cfg.attack {
                Attack::Oba => Ok((oba_local_train(&global, poisoned, &local_cfg, c)?, None, None)),
                Attack::Soda | Attack::SodaA | Attack::SodaB => {
                    let soda_cfg = SodaConfig {
                        reference_mode: match cfg.attack {
                            Attack::Soda => ReferenceMode::SelfReference,
                            Attack::SodaA => ReferenceMode::GlobalAsReference,
                            _ => ReferenceMode::PreviousRoundPretrained,
                        },
                        ..cfg.soda.clone()
                    };
                    let (u, next_ref, progress) = soda_local_train(
                        &global,
                        &data.clean,
                        poisoned,
                        &local_cfg,
                        &soda_cfg,
                        stored_refs.get(&c),
                        soda_progress.get(&c),
                        c,
                    )?;
                    Ok((u, next_ref, Some(progress)))
                }
                Attack::None => unreachable!(),
            }
        };

        let results: Vec<(ClientUpdate, Option<ModelState>, Option<SodaProgress>)> = match cfg.execution {
            Execution::Sequential => participants.iter().map(train_one).collect::<Result<_>>()?,
            Execution::Parallel => participants.par_iter().map(train_one).collect::<Result<_>>()?,
        };
        let mut updates = Vec::with_capacity(results.len());
        for (u, next_ref, progress) in results {
            if let Some(r) = next_ref {
                stored_refs.insert(u.client_id, r);
            }
            if let Some(p) = progress {
                soda_progress.insert(u.client_id, p);
            }
            updates.push(u);
        }

        apply_transforms(cfg, &mut updates, trainable_len, prev_global_delta.as_deref())?;

        // Foolsgold history accumulates the submitted (post-transform) updates.
        if cfg.defense == Defense::Foolsgold {
            for u in &updates {
                let h = histories
                    .entry(u.client_id)
                    .or_insert_with(|| vec![0.0; u.delta.len()]);
                for (a, b) in h.iter_mut().zip(&u.delta) {
                    *a += b;
                }
            }
        }

        let outcome = run_defense(cfg, &updates, &global, trainable_len, &histories, t)?;
        global = global.apply_delta(&outcome.delta)?;
        prev_global_delta = Some(outcome.delta.clone());

        let (ma, asr) = evaluate(&global, &id_test, &ood_test, cfg.target_label)?;
        let (tpr, fpr, selected) = if cfg.defense.reports_selection() {
            let sel = outcome.selected.clone().unwrap_or_default();
            let (tpr, fpr) = compute_tpr_fpr(&sel, &malicious, &participants);
            (tpr, fpr, Some(sel))
        } else {
            (None, None, None)
        };
        let diagnostics = if outcome.features.is_some() || outcome.assignment.is_some() {
            Some(RoundDiagnostics {
                bn_features: outcome.features.clone(),
                assignment: outcome.assignment.clone(),
            })
        } else {
            None
        };
        records.push(RoundRecord {
            round: t,
            ma,
            asr,
            participants,
            selected,
            tpr,
            fpr,
            global_trainable_norm: l2_norm(&global.trainable),
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
            diagnostics,
        });
    }

    Ok(RunOutput {
        records,
        malicious: malicious_ids,
        final_model: global,
    })
}

fn apply_transforms(
    cfg: &ExperimentConfig,
    updates: &mut [ClientUpdate],
    trainable_len: usize,
    prev_global_delta: Option<&[f64]>,
) -> Result<()> {
    let Some(transform) = cfg.transform else { return Ok(()) };
    match transform {
        Transform::Lie { z } => {
            let mut idx: Vec<usize> = updates
                .iter()
                .enumerate()
                .filter(|(_, u)| u.is_malicious)
                .map(|(i, _)| i)
                .collect();
            idx.sort_by_key(|&i| updates[i].client_id);
            if idx.len() < 2 {
                return Ok(()); // collusion needs at least two sampled attackers
            }
            let mut cohort: Vec<ClientUpdate> = idx.iter().map(|&i| updates[i].clone()).collect();
            transform_lie(&mut cohort, z)?;
            for (i, u) in idx.into_iter().zip(cohort) {
                updates[i] = u;
            }
        }
        Transform::Scaling { gamma } => {
            for u in updates.iter_mut().filter(|u| u.is_malicious) {
                transform_scaling(u, gamma)?;
            }
        }
        Transform::Pgd { eps } => {
            for u in updates.iter_mut().filter(|u| u.is_malicious) {
                transform_pgd(u, trainable_len, eps)?;
            }
        }
        Transform::Neurotoxin { k_frac } => {
            let Some(prev) = prev_global_delta else { return Ok(()) }; // no history in round 0
            for u in updates.iter_mut().filter(|u| u.is_malicious) {
                transform_neurotoxin(u, prev, k_frac)?;
            }
        }
    }
    Ok(())
}

fn run_defense(
    cfg: &ExperimentConfig,
    updates: &[ClientUpdate],
    global: &ModelState,
    trainable_len: usize,
    histories: &HashMap<usize, Vec<f64>>,
    round: usize,
) -> Result<DefenseOutcome> {
    let n = updates.len();
    let master = cfg.master_seed;
    match cfg.defense {
        Defense::Fedavg => agg_fedavg(updates),
        Defense::FedavgStar => agg_fedavg_star(updates),
        Defense::Mkrum => {
            let f_hat = cfg
                .mkrum
                .f_hat
                .unwrap_or_else(|| (0.25 * n as f64).ceil() as usize);
            let m_select = cfg.mkrum.m_select.unwrap_or(n.saturating_sub(f_hat));
            agg_mkrum(updates, f_hat, m_select, trainable_len)
        }
        Defense::Rfa => agg_rfa(updates, cfg.rfa.iters, cfg.rfa.smooth_eps),
        Defense::Foolsgold => {
            let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
            sorted.sort_by_key(|u| u.client_id);
            let hist: Vec<Vec<f64>> = sorted
                .iter()
                .map(|u| histories.get(&u.client_id).cloned().unwrap_or_default())
                .collect();
            agg_foolsgold(updates, &hist)
        }
        Defense::Rlr => {
            let threshold = cfg
                .rlr
                .threshold
                .unwrap_or_else(|| (n as f64 / 2.0).ceil());
            agg_rlr(updates, threshold, cfg.rlr.server_lr, trainable_len)
        }
        Defense::FlameLite => agg_flame_lite(
            updates,
            &global.trainable,
            trainable_len,
            cfg.flame.lambda_noise,
            mix_seed(stream_seed(master, Stream::FlameNoise), round as u64),
        ),
        Defense::Bnguard => {
            let bn_cfg = BnguardConfig {
                kmeans_seed: mix_seed(
                    stream_seed(master, Stream::Clustering),
                    mix_seed(cfg.bnguard.kmeans_seed, round as u64),
                ),
                ..cfg.bnguard.clone()
            };
            bnguard(updates, global, &bn_cfg)
        }
    }
}
