//! The communication-round engine: participant sampling, local updates,
//! aggregation of the shared parameter groups, and the strategy layer that
//! expresses every supported method as a (wiring, shared/private groups,
//! schedule, loss extras) tuple.
//!
//! Privacy invariant: nothing from a private group and no private feature
//! value ever enters an upload, the server cache, or a wire message. The
//! engine only ever serializes `flatten_groups(shared)`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::EncodedSample;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Metrics};
use crate::model::{
    client_local_update, ArchConfig, ClientNetwork, HyperParams, LocalUpdate, ParamGroup,
    ProxPull, UpdateSchedule, Wiring,
};
use crate::nn::{derive_seed, seeded_rng, SeededRng};

/// Seed-derivation tags; both execution modes use the same scheme so that
/// simulated and distributed runs are interchangeable.
pub mod seeds {
    use crate::nn::derive_seed;

    const SERVER: u64 = 1;
    const CLIENT_INIT: u64 = 2;
    const SHUFFLE: u64 = 3;
    const PARTITION: u64 = 4;
    const SPLIT: u64 = 5;

    pub fn server(run_seed: u64) -> u64 {
        derive_seed(run_seed, &[SERVER])
    }
    pub fn client_init(run_seed: u64, client_id: usize) -> u64 {
        derive_seed(run_seed, &[CLIENT_INIT, client_id as u64])
    }
    pub fn shuffle(run_seed: u64, client_id: usize, round: usize) -> u64 {
        derive_seed(run_seed, &[SHUFFLE, client_id as u64, round as u64])
    }
    pub fn partition(run_seed: u64) -> u64 {
        derive_seed(run_seed, &[PARTITION])
    }
    pub fn split(run_seed: u64, client_id: usize) -> u64 {
        derive_seed(run_seed, &[SPLIT, client_id as u64])
    }
}

/// Federated training method.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    /// Split network, private feature routing, separation penalty.
    FecMap,
    /// Split network and penalty, but no private feature routing.
    FecMapLslOnly,
    /// Split network and private feature routing, no penalty.
    FecMapMppOnly,
    FedAvg,
    FedProx { mu: f64 },
    FedPer,
    LgFed,
    FedRep,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::FecMap => "fecmap",
            Strategy::FecMapLslOnly => "fecmap_lsl",
            Strategy::FecMapMppOnly => "fecmap_mpp",
            Strategy::FedAvg => "fedavg",
            Strategy::FedProx { .. } => "fedprox",
            Strategy::FedPer => "fedper",
            Strategy::LgFed => "lgfed",
            Strategy::FedRep => "fedrep",
        }
    }

    pub fn all_names() -> &'static [&'static str] {
        &[
            "fecmap", "fecmap_lsl", "fecmap_mpp", "fedavg", "fedprox", "fedper", "lgfed",
            "fedrep",
        ]
    }

    /// Parses a strategy name; `fedprox_mu` only applies to `fedprox`.
    pub fn parse(name: &str, fedprox_mu: f64) -> Result<Strategy> {
        Ok(match name {
            "fecmap" => Strategy::FecMap,
            "fecmap_lsl" => Strategy::FecMapLslOnly,
            "fecmap_mpp" => Strategy::FecMapMppOnly,
            "fedavg" => Strategy::FedAvg,
            "fedprox" => Strategy::FedProx { mu: fedprox_mu },
            "fedper" => Strategy::FedPer,
            "lgfed" => Strategy::LgFed,
            "fedrep" => Strategy::FedRep,
            other => {
                return Err(Error::invalid(format!(
                    "unknown strategy `{other}` (expected one of {:?})",
                    Strategy::all_names()
                )))
            }
        })
    }

    /// Resolves the strategy into the concrete knobs the engine runs on.
    pub fn resolve(&self) -> StrategySpec {
        let (wiring, shared, private, separation, prox_mu, head_then_body) = match *self {
            Strategy::FecMap => (
                Wiring::SplitPrivate,
                vec![ParamGroup::Global],
                vec![ParamGroup::Local, ParamGroup::Head],
                true,
                None,
                false,
            ),
            Strategy::FecMapLslOnly => (
                Wiring::SplitFull,
                vec![ParamGroup::Global],
                vec![ParamGroup::Local, ParamGroup::Head],
                true,
                None,
                false,
            ),
            Strategy::FecMapMppOnly => (
                Wiring::SplitPrivate,
                vec![ParamGroup::Global],
                vec![ParamGroup::Local, ParamGroup::Head],
                false,
                None,
                false,
            ),
            Strategy::FedAvg => (
                Wiring::SingleBody,
                vec![ParamGroup::Global, ParamGroup::Head],
                vec![],
                false,
                None,
                false,
            ),
            Strategy::FedProx { mu } => (
                Wiring::SingleBody,
                vec![ParamGroup::Global, ParamGroup::Head],
                vec![],
                false,
                Some(mu),
                false,
            ),
            Strategy::FedPer => (
                Wiring::SingleBody,
                vec![ParamGroup::Global],
                vec![ParamGroup::Head],
                false,
                None,
                false,
            ),
            Strategy::LgFed => (
                Wiring::SingleBody,
                vec![ParamGroup::Head],
                vec![ParamGroup::Global],
                false,
                None,
                false,
            ),
            Strategy::FedRep => (
                Wiring::SingleBody,
                vec![ParamGroup::Global],
                vec![ParamGroup::Head],
                false,
                None,
                true,
            ),
        };
        StrategySpec {
            name: self.name().to_string(),
            wiring,
            shared,
            private,
            separation_enabled: separation,
            prox_mu,
            head_then_body,
            body_steps: 1,
        }
    }
}

/// A strategy resolved into engine knobs. The engine is driven entirely by
/// this struct, so two strategies that resolve identically train
/// identically.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategySpec {
    pub name: String,
    pub wiring: Wiring,
    /// Groups uploaded to and overwritten by the server.
    pub shared: Vec<ParamGroup>,
    /// Groups that never leave the client.
    pub private: Vec<ParamGroup>,
    pub separation_enabled: bool,
    pub prox_mu: Option<f64>,
    /// Alternate schedule: tau head-only steps, then `body_steps` body-only
    /// steps per round.
    pub head_then_body: bool,
    pub body_steps: usize,
}

impl StrategySpec {
    pub fn schedule(&self, tau: usize) -> UpdateSchedule {
        if self.head_then_body {
            UpdateSchedule::HeadThenBody { head_steps: tau, body_steps: self.body_steps }
        } else {
            UpdateSchedule::Joint
        }
    }

    /// Shared and private groups must partition the groups that exist for
    /// this wiring.
    pub fn validate(&self) -> Result<()> {
        let mut all = vec![ParamGroup::Global, ParamGroup::Head];
        if self.wiring.has_local_part() {
            all.push(ParamGroup::Local);
        }
        for g in &all {
            let in_shared = self.shared.contains(g);
            let in_private = self.private.contains(g);
            if in_shared == in_private {
                return Err(Error::invalid(format!(
                    "group {g:?} must be in exactly one of shared/private"
                )));
            }
        }
        Ok(())
    }
}

/// The parameter-group partition and schedule of a strategy, as a tuple of
/// (shared, private, uses-head-then-body-schedule).
pub fn strategy_param_groups(
    strategy: &Strategy,
) -> (Vec<ParamGroup>, Vec<ParamGroup>, bool) {
    let spec = strategy.resolve();
    (spec.shared, spec.private, spec.head_then_body)
}

/// How the server combines uploads into the next global model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Mean over this round's uploads.
    ParticipantsMean,
    /// Mean over every client's most recent upload (stale entries included).
    AllClientsStaleMean,
}

/// Knobs of one federated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub n_clients: usize,
    /// Fraction of clients sampled per round (gamma in (0, 1]).
    pub participation_rate: f64,
    pub rounds: usize,
    pub aggregation: AggregationMode,
    pub hyper: HyperParams,
    pub seed: u64,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::invalid("n_clients must be >= 1"));
        }
        if !(self.participation_rate > 0.0 && self.participation_rate <= 1.0) {
            return Err(Error::invalid("participation_rate must be in (0, 1]"));
        }
        if self.rounds == 0 {
            return Err(Error::invalid("rounds must be >= 1"));
        }
        Ok(())
    }
}

/// Uniform sample without replacement of `max(1, round(gamma * m))` client
/// indices, ascending.
pub fn sample_participants(m: usize, gamma: f64, rng: &mut SeededRng) -> Vec<usize> {
    let count = ((gamma * m as f64).round() as usize).clamp(1, m);
    let mut picked = rand::seq::index::sample(rng, m, count).into_vec();
    picked.sort_unstable();
    picked
}

/// Server-side aggregation. Uploads are summed in ascending client order so
/// results never depend on arrival order.
pub fn aggregate_global(
    round: usize,
    uploads: &[(usize, Vec<f64>)],
    mode: AggregationMode,
    cache: &mut [Vec<f64>],
) -> Result<Vec<f64>> {
    if uploads.is_empty() {
        return Err(Error::RoundAborted { round });
    }
    let width = uploads[0].1.len();
    if uploads.iter().any(|(_, u)| u.len() != width) {
        return Err(Error::Protocol("uploads differ in length".into()));
    }
    let mut ordered: Vec<&(usize, Vec<f64>)> = uploads.iter().collect();
    ordered.sort_by_key(|(id, _)| *id);

    match mode {
        AggregationMode::ParticipantsMean => {
            let mut sum = vec![0.0; width];
            for (_, u) in &ordered {
                for (s, v) in sum.iter_mut().zip(u) {
                    *s += v;
                }
            }
            let n = ordered.len() as f64;
            sum.iter_mut().for_each(|s| *s /= n);
            Ok(sum)
        }
        AggregationMode::AllClientsStaleMean => {
            for (id, u) in &ordered {
                if *id >= cache.len() {
                    return Err(Error::Protocol(format!("client id {id} out of range")));
                }
                if cache[*id].len() != width {
                    return Err(Error::Protocol("upload width differs from cache".into()));
                }
                cache[*id] = u.clone();
            }
            let mut sum = vec![0.0; width];
            for entry in cache.iter() {
                for (s, v) in sum.iter_mut().zip(entry) {
                    *s += v;
                }
            }
            let n = cache.len() as f64;
            sum.iter_mut().for_each(|s| *s /= n);
            Ok(sum)
        }
    }
}

/// Proximal-term value and gradient: `(mu/2)|w - w*|^2`, `mu (w - w*)`.
pub fn fedprox_penalty(w: &[f64], w_server: &[f64], mu: f64) -> Result<(f64, Vec<f64>)> {
    if w.len() != w_server.len() {
        return Err(Error::shape(format!(
            "proximal operands differ in length: {} vs {}",
            w.len(),
            w_server.len()
        )));
    }
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(w.len());
    for (a, b) in w.iter().zip(w_server) {
        let d = a - b;
        value += d * d;
        grad.push(mu * d);
    }
    Ok((0.5 * mu * value, grad))
}

/// Server-side view of a run: round counter, current global model, and the
/// per-client upload cache for the stale-mean aggregation mode.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub round: usize,
    pub w_star: Vec<f64>,
    pub cache: Vec<Vec<f64>>,
    pub rng: SeededRng,
}

impl ServerState {
    /// Initializes the global model from a server-seeded template network,
    /// and the stale cache with that same initial model for every client.
    pub fn new(template: &ClientNetwork, spec: &StrategySpec, m: usize, run_seed: u64) -> Self {
        let w_star = template.flatten_groups(&spec.shared);
        ServerState {
            round: 0,
            cache: vec![w_star.clone(); m],
            w_star,
            rng: seeded_rng(seeds::server(run_seed)),
        }
    }
}

/// One client in the in-process simulator.
#[derive(Debug, Clone)]
pub struct SimClient {
    pub id: usize,
    pub net: ClientNetwork,
    pub train: Vec<EncodedSample>,
    pub test: Vec<EncodedSample>,
}

/// One round's outcome. Train loss and test accuracy are means over the
/// round's participants (after their local updates); dropped clients are
/// excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub participants: Vec<usize>,
    pub mean_train_loss: f64,
    pub mean_test_accuracy: f64,
    pub duration_secs: f64,
}

/// Everything a finished run reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub strategy: String,
    pub rounds: Vec<RoundRecord>,
    /// The global model after each round's aggregation.
    pub global_snapshots: Vec<Vec<f64>>,
    /// Final per-client metrics after the closing synchronization; `None`
    /// for clients that could not be evaluated (e.g. lost agents).
    pub final_metrics: Vec<Option<Metrics>>,
    /// Mean over the evaluated clients' final local test accuracy.
    pub mean_accuracy: f64,
}

impl TrainingHistory {
    /// Equality over everything except wall-clock durations, comparing
    /// floats bit for bit.
    pub fn numeric_eq(&self, other: &TrainingHistory) -> bool {
        if self.strategy != other.strategy
            || self.rounds.len() != other.rounds.len()
            || self.global_snapshots.len() != other.global_snapshots.len()
            || self.final_metrics != other.final_metrics
            || self.mean_accuracy.to_bits() != other.mean_accuracy.to_bits()
        {
            return false;
        }
        let bits = |v: f64| v.to_bits();
        for (a, b) in self.rounds.iter().zip(&other.rounds) {
            if a.round != b.round
                || a.participants != b.participants
                || bits(a.mean_train_loss) != bits(b.mean_train_loss)
                || bits(a.mean_test_accuracy) != bits(b.mean_test_accuracy)
            {
                return false;
            }
        }
        self.global_snapshots
            .iter()
            .zip(&other.global_snapshots)
            .all(|(a, b)| {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// What one participant produced this round.
struct ParticipantResult {
    id: usize,
    upload: Vec<f64>,
    train_loss: f64,
    test_accuracy: f64,
}

fn train_participant(
    client: &mut SimClient,
    spec: &StrategySpec,
    cfg: &FederationConfig,
    w_star: &[f64],
    round: usize,
) -> Result<ParticipantResult> {
    client.net.install_groups(&spec.shared, w_star)?;
    let prox_groups = spec.shared.clone();
    let update = LocalUpdate {
        hp: &cfg.hyper,
        separation_enabled: spec.separation_enabled,
        schedule: spec.schedule(cfg.hyper.local_steps),
        prox: spec.prox_mu.map(|mu| ProxPull {
            mu,
            reference: w_star,
            groups: &prox_groups,
        }),
        shuffle_seed: seeds::shuffle(cfg.seed, client.id, round),
    };
    let report = client_local_update(&mut client.net, &client.train, &update)?;
    let metrics = evaluate(&client.net, &client.test)?;
    Ok(ParticipantResult {
        id: client.id,
        upload: client.net.flatten_groups(&spec.shared),
        train_loss: report.train_loss,
        test_accuracy: metrics.accuracy,
    })
}

/// Executes one communication round: sample, distribute the global model,
/// train participants (concurrently, one thread each), aggregate uploads in
/// ascending client order. A failing client is dropped for the round; the
/// round aborts only if nothing was uploaded.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [SimClient],
    spec: &StrategySpec,
    cfg: &FederationConfig,
) -> Result<RoundRecord> {
    let started = Instant::now();
    let round = server.round;
    let participants = sample_participants(clients.len(), cfg.participation_rate, &mut server.rng);

    let w_star = server.w_star.clone();
    let mut results: Vec<Result<ParticipantResult>> = Vec::new();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        let mut rest = clients;
        let mut offset = 0;
        for &id in &participants {
            let (_, tail) = rest.split_at_mut(id - offset);
            let (chosen, tail) = tail.split_at_mut(1);
            rest = tail;
            offset = id + 1;
            let client = &mut chosen[0];
            let w_star = &w_star;
            handles.push(
                scope.spawn(move || train_participant(client, spec, cfg, w_star, round)),
            );
        }
        for h in handles {
            results.push(h.join().expect("participant thread panicked"));
        }
    });

    let ok: Vec<ParticipantResult> = results.into_iter().filter_map(|r| r.ok()).collect();
    let uploads: Vec<(usize, Vec<f64>)> =
        ok.iter().map(|r| (r.id, r.upload.clone())).collect();
    server.w_star = aggregate_global(round, &uploads, cfg.aggregation, &mut server.cache)?;
    server.round += 1;

    let n = ok.len() as f64;
    Ok(RoundRecord {
        round,
        participants: ok.iter().map(|r| r.id).collect(),
        mean_train_loss: ok.iter().map(|r| r.train_loss).sum::<f64>() / n,
        mean_test_accuracy: ok.iter().map(|r| r.test_accuracy).sum::<f64>() / n,
        duration_secs: started.elapsed().as_secs_f64(),
    })
}

/// Builds the simulator's client set: one network per client (seeded from
/// the run seed and the client id) over the given train/test datasets.
pub fn build_clients(
    spec: &StrategySpec,
    cfg: &FederationConfig,
    arch: &ArchConfig,
    datasets: Vec<(Vec<EncodedSample>, Vec<EncodedSample>)>,
    star_dim: usize,
    prime_dim: usize,
) -> Result<Vec<SimClient>> {
    if datasets.len() != cfg.n_clients {
        return Err(Error::invalid(format!(
            "{} datasets for {} clients",
            datasets.len(),
            cfg.n_clients
        )));
    }
    datasets
        .into_iter()
        .enumerate()
        .map(|(id, (train, test))| {
            let net = ClientNetwork::new(
                spec.wiring,
                star_dim,
                prime_dim,
                arch,
                &cfg.hyper,
                seeds::client_init(cfg.seed, id),
            )?;
            Ok(SimClient { id, net, train, test })
        })
        .collect()
}

/// Runs the full loop: `rounds` communication rounds, then a closing
/// synchronization that installs the final global model on every client
/// before the final evaluation (the same thing the distributed runtime does
/// with a zero-step round).
pub fn run_training(
    spec: &StrategySpec,
    cfg: &FederationConfig,
    clients: &mut [SimClient],
) -> Result<TrainingHistory> {
    spec.validate()?;
    cfg.validate()?;
    if clients.is_empty() {
        return Err(Error::invalid("no clients"));
    }
    let template = ClientNetwork::new(
        clients[0].net.wiring,
        clients[0].net.global.spec.input_size(),
        prime_dim_of(&clients[0].net),
        &arch_of(&clients[0].net),
        &cfg.hyper,
        seeds::server(cfg.seed),
    )?;
    let mut server = ServerState::new(&template, spec, clients.len(), cfg.seed);

    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut snapshots = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let record = run_round(&mut server, clients, spec, cfg)?;
        snapshots.push(server.w_star.clone());
        rounds.push(record);
    }

    // closing sync: every client receives the final global model
    let mut final_metrics = Vec::with_capacity(clients.len());
    for client in clients.iter_mut() {
        client.net.install_groups(&spec.shared, &server.w_star)?;
        final_metrics.push(Some(evaluate(&client.net, &client.test)?));
    }
    let evaluated: Vec<f64> = final_metrics
        .iter()
        .flatten()
        .map(|m| m.accuracy)
        .collect();
    let mean_accuracy = evaluated.iter().sum::<f64>() / evaluated.len() as f64;

    Ok(TrainingHistory {
        strategy: spec.name.clone(),
        rounds,
        global_snapshots: snapshots,
        final_metrics,
        mean_accuracy,
    })
}

fn arch_of(net: &ClientNetwork) -> ArchConfig {
    let sub = net.global.spec.layer_sizes();
    let head = net.head.spec.layer_sizes();
    ArchConfig {
        subpart_layers: sub[1..].to_vec(),
        head_layers: head[1..head.len() - 1].to_vec(),
        classes: *head.last().unwrap(),
    }
}

fn prime_dim_of(net: &ClientNetwork) -> usize {
    match net.wiring {
        Wiring::SplitPrivate => net.head.spec.input_size() - 2 * net.representation_width(),
        Wiring::SingleBody => net.head.spec.input_size() - net.representation_width(),
        Wiring::SplitFull => 0,
    }
}
