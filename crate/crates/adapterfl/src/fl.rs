//! The federated round engine: resource tiers, client selection with the
//! memory-threshold constraint, local SGD, and block-wise aggregation.
//!
//! Rounds are a strict sequence with an aggregation barrier. Within a
//! round, clients train private copies (optionally in parallel, each with
//! its own derived RNG stream); aggregation consumes uploads in client-id
//! order so results are schedule-independent.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{ClientShard, DatasetSource, Split};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::nn::loss::cross_entropy;
use crate::nn::optim::{OptimizerState, SgdHyper};
use crate::nn::params::ParameterSet;
use crate::nn::{Mode, ModelGraph, ParamKind};
use crate::reassembly::ModelGroup;
use crate::zoo::SizeLevel;

/// A simulated device: resource tier, memory threshold (in parameter-count
/// units) and its private data shard.
#[derive(Clone, Debug)]
pub struct ClientProfile {
    pub client_id: usize,
    pub level: SizeLevel,
    pub gamma: u64,
    pub shard: ClientShard,
}

impl ClientProfile {
    /// The memory-threshold predicate: can this client host a model of
    /// `param_count` parameters?
    pub fn can_host(&self, param_count: usize) -> bool {
        param_count as u64 <= self.gamma
    }
}

/// Per-round activation: which client trains which group member.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoundPlan {
    pub round: usize,
    /// `(client_id, member index)` sorted by client id.
    pub assignments: Vec<(usize, usize)>,
}

/// Headroom factor on the tier's largest hostable member.
pub const GAMMA_HEADROOM: f64 = 1.05;

/// Assign resource tiers by ratio (largest-remainder rounding), give each
/// tier the memory threshold of the group member it is meant to host, and
/// attach the data shards. Tier membership is a seeded shuffle of ids.
pub fn assign_levels(
    ratio: (f64, f64, f64),
    group: &ModelGroup,
    shards: &[ClientShard],
    seed: u64,
) -> Result<Vec<ClientProfile>> {
    let sum = ratio.0 + ratio.1 + ratio.2;
    if (sum - 1.0).abs() > 1e-9 || ratio.0 < 0.0 || ratio.1 < 0.0 || ratio.2 < 0.0 {
        return Err(Error::InvalidConfig(format!("tier ratio {ratio:?} must be nonnegative and sum to 1")));
    }
    let n = shards.len();
    let raw = [ratio.0 * n as f64, ratio.1 * n as f64, ratio.2 * n as f64];
    let mut counts: [usize; 3] = [raw[0] as usize, raw[1] as usize, raw[2] as usize];
    let mut frac: Vec<(f64, usize)> =
        raw.iter().enumerate().map(|(i, r)| (r - r.floor(), i)).collect();
    frac.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let leftover = n - counts.iter().sum::<usize>();
    for &(_, i) in frac.iter().cycle().take(leftover) {
        counts[i] += 1;
    }

    let member_counts: Vec<usize> = group.members.iter().map(|m| m.param_count()).collect();
    let gamma_of = |tier: usize| (member_counts[tier] as f64 * GAMMA_HEADROOM).ceil() as u64;

    let mut ids: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut profiles: Vec<Option<ClientProfile>> = vec![None; n];
    let mut pos = 0;
    for (tier, level) in SizeLevel::all().into_iter().enumerate() {
        for &id in &ids[pos..pos + counts[tier]] {
            profiles[id] = Some(ClientProfile {
                client_id: id,
                level,
                gamma: gamma_of(tier),
                shard: shards[id].clone(),
            });
        }
        pos += counts[tier];
    }
    Ok(profiles.into_iter().map(|p| p.expect("all ids assigned")).collect())
}

/// Sample `k` activated clients and assign each a group member under the
/// memory-threshold constraint. Coverage first: every member gets one
/// eligible client (largest member first); the remainder is filled by
/// uniform sampling, each client taking the largest member it can host.
pub fn select_and_dispatch(
    profiles: &[ClientProfile],
    member_counts: &[usize],
    k: usize,
    round: usize,
    seed: u64,
) -> Result<RoundPlan> {
    let n_members = member_counts.len();
    if k < n_members {
        return Err(Error::Infeasible(format!(
            "{k} activated clients cannot cover {n_members} group members"
        )));
    }
    let pool: Vec<&ClientProfile> =
        profiles.iter().filter(|p| !p.shard.indices.is_empty()).collect();
    if k > pool.len() {
        return Err(Error::Infeasible(format!(
            "{k} activated clients requested but only {} have data",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[round as u64]));
    let mut taken = vec![false; profiles.len()];
    let mut assignments: Vec<(usize, usize)> = Vec::with_capacity(k);

    // coverage phase: largest member first
    let mut member_order: Vec<usize> = (0..n_members).collect();
    member_order.sort_by_key(|&j| std::cmp::Reverse(member_counts[j]));
    for &j in &member_order {
        let eligible: Vec<usize> = pool
            .iter()
            .filter(|p| !taken[p.client_id] && p.can_host(member_counts[j]))
            .map(|p| p.client_id)
            .collect();
        if eligible.is_empty() {
            return Err(Error::Infeasible(format!(
                "no eligible client for member {j} ({} params)",
                member_counts[j]
            )));
        }
        let pick = eligible[rng.random_range(0..eligible.len())];
        taken[pick] = true;
        assignments.push((pick, j));
    }

    // fill phase: uniform over the remaining pool; a client trains the
    // largest member it can host
    let mut rest: Vec<usize> =
        pool.iter().filter(|p| !taken[p.client_id]).map(|p| p.client_id).collect();
    rest.shuffle(&mut rng);
    for &cid in rest.iter().take(k - n_members) {
        let p = &profiles[cid];
        let member = member_order
            .iter()
            .copied()
            .find(|&j| p.can_host(member_counts[j]))
            .ok_or_else(|| {
                Error::Infeasible(format!("client {cid} cannot host any member"))
            })?;
        assignments.push((cid, member));
    }

    assignments.sort_unstable();
    let plan = RoundPlan { round, assignments };
    debug_assert!(plan
        .assignments
        .iter()
        .all(|&(cid, j)| profiles[cid].can_host(member_counts[j])));
    Ok(plan)
}

#[derive(Clone, Copy, Debug)]
pub struct LocalTrainCfg {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate for this round (already decayed).
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Local SGD on a private weight copy. Momentum buffers start at zero each
/// round; gradients are zeroed by the optimizer after every step. Returns
/// the mean training loss of the last epoch.
pub fn local_train(
    model: &mut ModelGraph<f32>,
    train: &Split,
    indices: &[usize],
    cfg: &LocalTrainCfg,
    seed: u64,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::InvalidConfig("client shard is empty".into()));
    }
    let mut opt = OptimizerState::new(SgdHyper {
        learning_rate: cfg.learning_rate,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        lr_decay: 1.0,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = indices.to_vec();
    let mut last_epoch_loss = 0.0;
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = train.gather(chunk);
            let (logits, caches) = model.forward(x, Mode::Train)?;
            let (loss, dlogits) = cross_entropy(&logits, &labels, model.num_classes)?;
            model.backward(caches, dlogits);
            opt.step_model(model);
            loss_sum += loss;
            batches += 1;
        }
        last_epoch_loss = loss_sum / batches.max(1) as f64;
    }
    Ok(last_epoch_loss)
}

/// One client's trained weights heading back to the server.
#[derive(Clone, Debug)]
pub struct Upload {
    pub client_id: usize,
    pub member: usize,
    pub params: ParameterSet<f32>,
    pub num_samples: usize,
}

#[derive(Clone, Debug)]
pub struct AggregationReport {
    pub ex_contributors: usize,
    pub member_contributors: Vec<usize>,
    pub ex_delta_norm: f64,
    pub member_delta_norms: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct AggregateOptions {
    /// Use data-size weights instead of unweighted means (ablation).
    pub weighted: bool,
    /// Keep previous batch-norm running statistics instead of averaging.
    pub freeze_bn_stats: bool,
}

fn mean_into(
    target: &mut ParameterSet<f32>,
    sources: &[(&ParameterSet<f32>, f64)],
    skip_buffers: bool,
) -> Result<f64> {
    let mut delta_sq = 0.0f64;
    for entry in target.iter_mut() {
        if skip_buffers && entry.kind == ParamKind::Buffer {
            continue;
        }
        let mut acc = vec![0.0f64; entry.value.numel()];
        for (src, w) in sources {
            let s = src.get(&entry.name).ok_or_else(|| {
                Error::shape("aggregate", format!("upload missing parameter {}", entry.name))
            })?;
            if s.value.shape() != entry.value.shape() {
                return Err(Error::shape(
                    "aggregate",
                    format!(
                        "shape mismatch for {}: {:?} vs {:?}",
                        entry.name,
                        s.value.shape(),
                        entry.value.shape()
                    ),
                ));
            }
            for (a, v) in acc.iter_mut().zip(s.value.data()) {
                *a += *w * *v as f64;
            }
        }
        for (dst, a) in entry.value.data_mut().iter_mut().zip(&acc) {
            let new = *a as f32;
            delta_sq += (new as f64 - *dst as f64).powi(2);
            *dst = new;
        }
    }
    Ok(delta_sq.sqrt())
}

/// Block-wise aggregation: the shared ex block averages over *all* K
/// uploads (weight 1/K), each member's adapter+ad block averages over the
/// clients that trained that member (weight 1/|C_j|). Members with no
/// uploads keep their previous weights. With `weighted`, both means use
/// data-size weights instead.
pub fn aggregate(
    group: &mut ModelGroup,
    mut uploads: Vec<Upload>,
    opt: &AggregateOptions,
) -> Result<AggregationReport> {
    if uploads.is_empty() {
        return Err(Error::InvalidConfig("no uploads to aggregate".into()));
    }
    uploads.sort_by_key(|u| u.client_id);
    for u in &uploads {
        if !u.params.is_finite() {
            return Err(Error::NonFinite(format!("upload from client {}", u.client_id)));
        }
    }
    let k = uploads.len();

    // ex block: every upload contributes
    let ex_weights: Vec<f64> = if opt.weighted {
        let total: usize = uploads.iter().map(|u| u.num_samples).sum();
        uploads.iter().map(|u| u.num_samples as f64 / total as f64).collect()
    } else {
        vec![1.0 / k as f64; k]
    };
    let ex_sources: Vec<(&ParameterSet<f32>, f64)> =
        uploads.iter().zip(&ex_weights).map(|(u, w)| (&u.params, *w)).collect();
    let ex_delta = mean_into(&mut group.ex_params, &ex_sources, opt.freeze_bn_stats)?;

    // per-member blocks
    let mut member_contributors = vec![0usize; group.members.len()];
    let mut member_delta_norms = vec![0.0f64; group.members.len()];
    for j in 0..group.members.len() {
        let subset: Vec<&Upload> = uploads.iter().filter(|u| u.member == j).collect();
        member_contributors[j] = subset.len();
        if subset.is_empty() {
            continue;
        }
        let weights: Vec<f64> = if opt.weighted {
            let total: usize = subset.iter().map(|u| u.num_samples).sum();
            subset.iter().map(|u| u.num_samples as f64 / total as f64).collect()
        } else {
            vec![1.0 / subset.len() as f64; subset.len()]
        };
        // target: the member's own (non-ex) parameters
        let mut own = ParameterSet::new();
        let graph = &group.members[j].graph;
        let mut collect_err = None;
        graph.visit_params(&mut |p| {
            if collect_err.is_some() || p.name.starts_with("ex.") {
                return;
            }
            if let Err(e) = own.insert(crate::nn::params::ParamEntry {
                name: p.name,
                value: p.value.clone(),
                grad: None,
                kind: p.kind,
            }) {
                collect_err = Some(e);
            }
        });
        if let Some(e) = collect_err {
            return Err(e);
        }
        let sources: Vec<(&ParameterSet<f32>, f64)> =
            subset.iter().zip(&weights).map(|(u, w)| (&u.params, *w)).collect();
        member_delta_norms[j] = mean_into(&mut own, &sources, opt.freeze_bn_stats)?;
        own.load_partial(&mut group.members[j].graph)?;
    }
    group.sync_ex()?;
    Ok(AggregationReport {
        ex_contributors: k,
        member_contributors,
        ex_delta_norm: ex_delta,
        member_delta_norms,
    })
}

/// Top-1 accuracy and mean loss on a split, evaluated in inference mode.
pub fn evaluate_split(
    model: &mut ModelGraph<f32>,
    split: &Split,
    batch: usize,
) -> Result<(f64, f64)> {
    if split.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let n = split.len();
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(batch) {
        let (x, labels) = split.gather(chunk);
        let (logits, _) = model.forward(x, Mode::Eval)?;
        let classes = model.num_classes;
        for (row, &label) in logits.data().chunks(classes).zip(&labels) {
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap();
            correct += usize::from(pred == label);
        }
        let (loss, _) = cross_entropy(&logits, &labels, classes)?;
        loss_sum += loss * labels.len() as f64;
    }
    Ok((correct as f64 / n as f64, loss_sum / n as f64))
}

/// Everything the round loop needs.
pub struct TrainSetup<'a> {
    pub source: &'a DatasetSource,
    pub profiles: &'a [ClientProfile],
    pub rounds: usize,
    pub clients_per_round: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub hyper: SgdHyper,
    pub dispatch_seed: u64,
    pub train_seed: u64,
    pub aggregate: AggregateOptions,
    pub parallel: bool,
    pub eval_every: usize,
    pub eval_batch: usize,
}

/// The full training loop: select -> dispatch -> local train -> upload ->
/// aggregate, with the learning rate decaying once per round and every
/// member evaluated on the held-out split.
pub fn run_training(
    group: &mut ModelGroup,
    setup: &TrainSetup<'_>,
    mut on_round: Option<&mut dyn FnMut(usize, &ModelGroup)>,
) -> Result<Vec<MetricsRecord>> {
    let member_counts: Vec<usize> = group.members.iter().map(|m| m.param_count()).collect();
    let mut lr = setup.hyper.learning_rate;
    let mut records = Vec::new();
    for t in 0..setup.rounds {
        let wall = std::time::Instant::now();
        let plan = select_and_dispatch(
            setup.profiles,
            &member_counts,
            setup.clients_per_round,
            t,
            setup.dispatch_seed,
        )?;
        let train_one = |&(cid, member): &(usize, usize)| -> Result<Upload> {
            let mut model = group.materialize(member)?;
            let shard = &setup.profiles[cid].shard;
            local_train(
                &mut model,
                &setup.source.train,
                &shard.indices,
                &LocalTrainCfg {
                    epochs: setup.local_epochs,
                    batch_size: setup.batch_size,
                    learning_rate: lr,
                    momentum: setup.hyper.momentum,
                    weight_decay: setup.hyper.weight_decay,
                },
                derive_seed(setup.train_seed, &[t as u64, cid as u64]),
            )?;
            Ok(Upload {
                client_id: cid,
                member,
                params: ParameterSet::from_model(&model, false),
                num_samples: shard.indices.len(),
            })
        };
        let uploads: Result<Vec<Upload>> = if setup.parallel {
            plan.assignments.par_iter().map(train_one).collect()
        } else {
            plan.assignments.iter().map(train_one).collect()
        };
        aggregate(group, uploads?, &setup.aggregate)?;

        let wall_ms = wall.elapsed().as_secs_f64() * 1e3;
        if t % setup.eval_every == 0 || t + 1 == setup.rounds {
            for j in 0..group.members.len() {
                let mut model = group.materialize(j)?;
                let (acc, loss) = evaluate_split(&mut model, &setup.source.test, setup.eval_batch)?;
                records.push(MetricsRecord {
                    method: "adapterfl".into(),
                    round: t,
                    model_id: group.member_label(j),
                    test_accuracy: acc,
                    test_loss: loss,
                    lr,
                    wall_time_ms: wall_ms,
                });
            }
        }
        if let Some(cb) = on_round.as_deref_mut() {
            cb(t, group);
        }
        lr *= setup.hyper.lr_decay;
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{iid_split, synthetic_dataset, SyntheticConfig};
    use crate::partition::partition_search;
    use crate::reassembly::build_group;
    use crate::zoo::{default_zoo, ZooGroup};

    fn setup_world(
        n_clients: usize,
        seed: u64,
    ) -> (crate::data::DatasetSource, ModelGroup, Vec<ClientProfile>) {
        let ds = synthetic_dataset(&SyntheticConfig {
            n_train: 400,
            n_test: 80,
            seed,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let mut zoo = default_zoo(ZooGroup::Toy, 4, ds.input_shape, seed).unwrap();
        let (probe, _) = ds.train.gather(&(0..64).collect::<Vec<_>>());
        let part = partition_search(&mut zoo, &probe).unwrap();
        let group = build_group(&zoo, &part, 2, seed).unwrap();
        let shards = iid_split(&ds, n_clients, seed).unwrap();
        let profiles = assign_levels((0.4, 0.4, 0.2), &group, &shards, seed).unwrap();
        (ds, group, profiles)
    }

    #[test]
    fn tier_counts_match_ratio() {
        let (_, group, profiles) = setup_world(100, 0);
        let count = |l: SizeLevel| profiles.iter().filter(|p| p.level == l).count();
        assert_eq!(count(SizeLevel::S), 40);
        assert_eq!(count(SizeLevel::M), 40);
        assert_eq!(count(SizeLevel::L), 20);
        // small tier cannot host the large member
        let large_count = group.members[2].param_count();
        for p in profiles.iter().filter(|p| p.level == SizeLevel::S) {
            assert!(!p.can_host(large_count));
        }
        // everyone can host the smallest member
        let small_count = group.members[0].param_count();
        assert!(profiles.iter().all(|p| p.can_host(small_count)));
    }

    #[test]
    fn all_large_ratio_hosts_everything() {
        let ds = synthetic_dataset(&SyntheticConfig {
            n_train: 60,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let mut zoo = default_zoo(ZooGroup::Toy, 4, ds.input_shape, 1).unwrap();
        let (probe, _) = ds.train.gather(&(0..32).collect::<Vec<_>>());
        let part = partition_search(&mut zoo, &probe).unwrap();
        let group = build_group(&zoo, &part, 2, 1).unwrap();
        let shards = iid_split(&ds, 10, 1).unwrap();
        let profiles = assign_levels((0.0, 0.0, 1.0), &group, &shards, 1).unwrap();
        let biggest = group.members[2].param_count();
        assert!(profiles.iter().all(|p| p.can_host(biggest)));
    }

    #[test]
    fn bad_ratio_rejected() {
        let (_, group, _) = setup_world(10, 2);
        let shards = vec![ClientShard { client_id: 0, indices: vec![0] }];
        assert!(assign_levels((0.5, 0.2, 0.2), &group, &shards, 0).is_err());
    }

    #[test]
    fn dispatch_covers_every_member_and_respects_gamma() {
        let (_, group, profiles) = setup_world(100, 3);
        let counts: Vec<usize> = group.members.iter().map(|m| m.param_count()).collect();
        for seed in 0..1000u64 {
            let plan = select_and_dispatch(&profiles, &counts, 10, 0, seed).unwrap();
            assert_eq!(plan.assignments.len(), 10);
            let mut seen = [false; 3];
            for &(cid, j) in &plan.assignments {
                assert!(profiles[cid].can_host(counts[j]), "seed {seed}");
                seen[j] = true;
            }
            assert!(seen.iter().all(|&s| s), "seed {seed}: member uncovered");
        }
    }

    #[test]
    fn dispatch_k_too_small_errors() {
        let (_, group, profiles) = setup_world(20, 4);
        let counts: Vec<usize> = group.members.iter().map(|m| m.param_count()).collect();
        assert!(matches!(
            select_and_dispatch(&profiles, &counts, 2, 0, 0),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn dispatch_tier_proportions_roughly_hold() {
        let (_, group, profiles) = setup_world(100, 5);
        let counts: Vec<usize> = group.members.iter().map(|m| m.param_count()).collect();
        let mut totals = [0usize; 3];
        for seed in 0..200u64 {
            let plan = select_and_dispatch(&profiles, &counts, 10, 0, seed).unwrap();
            for &(_, j) in &plan.assignments {
                totals[j] += 1;
            }
        }
        // expected ~ (4, 4, 2)/10 per round over 200 rounds
        let frac: Vec<f64> = totals.iter().map(|&t| t as f64 / 2000.0).collect();
        assert!((frac[0] - 0.4).abs() < 0.08, "{frac:?}");
        assert!((frac[1] - 0.4).abs() < 0.08, "{frac:?}");
        assert!((frac[2] - 0.2).abs() < 0.08, "{frac:?}");
    }

    #[test]
    fn zero_lr_training_is_identity() {
        let (ds, group, profiles) = setup_world(10, 6);
        let mut model = group.materialize(1).unwrap();
        let before = ParameterSet::from_model(&model, false);
        local_train(
            &mut model,
            &ds.train,
            &profiles[0].shard.indices,
            &LocalTrainCfg {
                epochs: 2,
                batch_size: 16,
                learning_rate: 0.0,
                momentum: 0.5,
                weight_decay: 1e-3,
            },
            9,
        )
        .unwrap();
        let after = ParameterSet::from_model(&model, false);
        for (a, b) in before.iter().zip(after.iter()) {
            if a.kind == ParamKind::Buffer {
                continue; // bn running stats do move in train mode
            }
            assert_eq!(a.value.data(), b.value.data(), "{} changed", a.name);
        }
    }

    #[test]
    fn identical_clients_train_identically() {
        let (ds, group, profiles) = setup_world(10, 7);
        let cfg = LocalTrainCfg {
            epochs: 2,
            batch_size: 16,
            learning_rate: 0.05,
            momentum: 0.5,
            weight_decay: 1e-3,
        };
        let mut m1 = group.materialize(0).unwrap();
        let mut m2 = group.materialize(0).unwrap();
        local_train(&mut m1, &ds.train, &profiles[3].shard.indices, &cfg, 42).unwrap();
        local_train(&mut m2, &ds.train, &profiles[3].shard.indices, &cfg, 42).unwrap();
        let p1 = ParameterSet::from_model(&m1, false);
        let p2 = ParameterSet::from_model(&m2, false);
        for (a, b) in p1.iter().zip(p2.iter()) {
            assert_eq!(a.value.data(), b.value.data());
        }
    }

    #[test]
    fn training_loss_mostly_decreases() {
        let (ds, group, _) = setup_world(10, 8);
        let mut model = group.materialize(0).unwrap();
        let idx: Vec<usize> = (0..120).collect();
        let mut losses = Vec::new();
        for e in 0..5 {
            let l = local_train(
                &mut model,
                &ds.train,
                &idx,
                &LocalTrainCfg {
                    epochs: 1,
                    batch_size: 30,
                    learning_rate: 0.05,
                    momentum: 0.5,
                    weight_decay: 1e-3,
                },
                derive_seed(0, &[e]),
            )
            .unwrap();
            losses.push(l);
        }
        let decreases = losses.windows(2).filter(|w| w[1] <= w[0]).count();
        assert!(decreases >= 3, "losses {losses:?}");
    }

    #[test]
    fn aggregate_simple_means() {
        let (_, mut group, _) = setup_world(10, 9);
        // two uploads for member 0 with ex weights all-0 and all-2 -> ex all-1
        let mut u0 = ParameterSet::from_model(&group.members[0].graph, false);
        let mut u1 = u0.clone();
        for e in u0.iter_mut() {
            e.value.fill(0.0);
        }
        for e in u1.iter_mut() {
            e.value.fill(2.0);
        }
        let uploads = vec![
            Upload { client_id: 0, member: 0, params: u0, num_samples: 10 },
            Upload { client_id: 1, member: 0, params: u1, num_samples: 10 },
        ];
        let report = aggregate(&mut group, uploads, &AggregateOptions::default()).unwrap();
        assert_eq!(report.ex_contributors, 2);
        assert_eq!(report.member_contributors, vec![2, 0, 0]);
        for e in group.ex_params.iter() {
            assert!(e.value.data().iter().all(|v| *v == 1.0), "{}", e.name);
        }
        // member 0's own params are all-1 too
        let own = ParameterSet::from_model(&group.members[0].graph, false);
        for e in own.iter() {
            if !e.name.starts_with("ex.") {
                assert!(e.value.data().iter().all(|v| *v == 1.0), "{}", e.name);
            }
        }
    }

    #[test]
    fn aggregate_single_upload_copies() {
        let (ds, mut group, profiles) = setup_world(10, 10);
        let mut model = group.materialize(2).unwrap();
        local_train(
            &mut model,
            &ds.train,
            &profiles[0].shard.indices,
            &LocalTrainCfg {
                epochs: 1,
                batch_size: 20,
                learning_rate: 0.05,
                momentum: 0.5,
                weight_decay: 1e-3,
            },
            11,
        )
        .unwrap();
        let upload = ParameterSet::from_model(&model, false);
        let before_m0 = ParameterSet::from_model(&group.members[0].graph, false);
        aggregate(
            &mut group,
            vec![Upload { client_id: 5, member: 2, params: upload.clone(), num_samples: 40 }],
            &AggregateOptions::default(),
        )
        .unwrap();
        // global member 2 equals the upload for both blocks
        let after = ParameterSet::from_model(&group.members[2].graph, false);
        for (a, b) in after.iter().zip(upload.iter()) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert!((x - y).abs() < 1e-7, "{}", a.name);
            }
        }
        // conservation: member 0's own (non-ex) params untouched
        let after_m0 = ParameterSet::from_model(&group.members[0].graph, false);
        for (a, b) in after_m0.iter().zip(before_m0.iter()) {
            if !a.name.starts_with("ex.") {
                assert_eq!(a.value.data(), b.value.data(), "{} changed", a.name);
            }
        }
    }

    #[test]
    fn aggregate_matches_brute_force_mean_oracle() {
        // randomized uploads across members vs a direct per-parameter mean
        use rand::Rng;
        let (_, mut group, _) = setup_world(10, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut uploads = Vec::new();
        let members = [0usize, 0, 1, 2, 2, 2, 1];
        for (cid, &m) in members.iter().enumerate() {
            let mut p = ParameterSet::from_model(&group.members[m].graph, false);
            for e in p.iter_mut() {
                for v in e.value.data_mut() {
                    *v = rng.random_range(-1.0..1.0);
                }
            }
            uploads.push(Upload { client_id: cid, member: m, params: p, num_samples: cid + 1 });
        }
        // oracle: straightforward mean per parameter name
        let oracle_mean = |names: &ParameterSet<f32>, subset: Vec<&Upload>| -> Vec<(String, Vec<f64>)> {
            names
                .iter()
                .map(|e| {
                    let mut acc = vec![0.0f64; e.value.numel()];
                    for u in &subset {
                        let s = u.params.get(&e.name).unwrap();
                        for (a, v) in acc.iter_mut().zip(s.value.data()) {
                            *a += *v as f64;
                        }
                    }
                    acc.iter_mut().for_each(|v| *v /= subset.len() as f64);
                    (e.name.clone(), acc)
                })
                .collect()
        };
        let ex_expected = oracle_mean(&group.ex_params.clone(), uploads.iter().collect());
        let m1_names = {
            let mut s = ParameterSet::new();
            group.members[1].graph.visit_params(&mut |p| {
                if !p.name.starts_with("ex.") {
                    s.insert(crate::nn::params::ParamEntry {
                        name: p.name,
                        value: p.value.clone(),
                        grad: None,
                        kind: p.kind,
                    })
                    .unwrap();
                }
            });
            s
        };
        let m1_expected =
            oracle_mean(&m1_names, uploads.iter().filter(|u| u.member == 1).collect());

        aggregate(&mut group, uploads, &AggregateOptions::default()).unwrap();

        for (name, want) in ex_expected {
            let got = group.ex_params.get(&name).unwrap();
            for (g, w) in got.value.data().iter().zip(&want) {
                let rel = (*g as f64 - w).abs() / w.abs().max(1e-12);
                assert!(rel < 1e-6, "{name}: {g} vs {w}");
            }
        }
        let m1_after = ParameterSet::from_model(&group.members[1].graph, false);
        for (name, want) in m1_expected {
            let got = m1_after.get(&name).unwrap();
            for (g, w) in got.value.data().iter().zip(&want) {
                let rel = (*g as f64 - w).abs() / w.abs().max(1e-12);
                assert!(rel < 1e-6, "{name}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn nan_upload_aborts() {
        let (_, mut group, _) = setup_world(10, 12);
        let mut p = ParameterSet::from_model(&group.members[0].graph, false);
        p.iter_mut().next().unwrap().value.data_mut()[0] = f32::NAN;
        assert!(matches!(
            aggregate(
                &mut group,
                vec![Upload { client_id: 0, member: 0, params: p, num_samples: 5 }],
                &AggregateOptions::default()
            ),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn ex_blocks_identical_after_aggregate() {
        let (ds, mut group, profiles) = setup_world(12, 13);
        let setup = TrainSetup {
            source: &ds,
            profiles: &profiles,
            rounds: 2,
            clients_per_round: 4,
            local_epochs: 1,
            batch_size: 20,
            hyper: SgdHyper { learning_rate: 0.05, ..SgdHyper::default() },
            dispatch_seed: 1,
            train_seed: 2,
            aggregate: AggregateOptions::default(),
            parallel: false,
            eval_every: 1,
            eval_batch: 64,
        };
        let records = run_training(&mut group, &setup, None).unwrap();
        assert_eq!(records.len(), 2 * 3);
        let bits = |p: &ParameterSet<f32>| {
            p.iter()
                .flat_map(|e| e.value.data().iter().map(|v| v.to_bits()))
                .collect::<Vec<u32>>()
        };
        let b0 = bits(&ParameterSet::from_model(&group.members[0].graph, false).subset("ex."));
        for j in 1..3 {
            let bj = bits(&ParameterSet::from_model(&group.members[j].graph, false).subset("ex."));
            assert_eq!(b0, bj, "member {j} ex diverged");
        }
    }

    #[test]
    fn zero_rounds_returns_initial_state() {
        let (ds, mut group, profiles) = setup_world(10, 14);
        let before = ParameterSet::from_model(&group.members[0].graph, false);
        let setup = TrainSetup {
            source: &ds,
            profiles: &profiles,
            rounds: 0,
            clients_per_round: 4,
            local_epochs: 1,
            batch_size: 20,
            hyper: SgdHyper::default(),
            dispatch_seed: 0,
            train_seed: 0,
            aggregate: AggregateOptions::default(),
            parallel: false,
            eval_every: 1,
            eval_batch: 64,
        };
        let records = run_training(&mut group, &setup, None).unwrap();
        assert!(records.is_empty());
        let after = ParameterSet::from_model(&group.members[0].graph, false);
        for (a, b) in before.iter().zip(after.iter()) {
            assert_eq!(a.value.data(), b.value.data());
        }
    }

    #[test]
    fn serial_equals_parallel() {
        let (ds, group, profiles) = setup_world(12, 15);
        let run = |parallel: bool| {
            let mut g = group.clone();
            let setup = TrainSetup {
                source: &ds,
                profiles: &profiles,
                rounds: 3,
                clients_per_round: 4,
                local_epochs: 1,
                batch_size: 20,
                hyper: SgdHyper { learning_rate: 0.05, ..SgdHyper::default() },
                dispatch_seed: 3,
                train_seed: 4,
                aggregate: AggregateOptions::default(),
                parallel,
                eval_every: 1,
                eval_batch: 64,
            };
            run_training(&mut g, &setup, None).unwrap()
        };
        let serial = run(false);
        let par = run(true);
        assert_eq!(serial.len(), par.len());
        for (a, b) in serial.iter().zip(&par) {
            assert_eq!(a.test_accuracy.to_bits(), b.test_accuracy.to_bits());
            assert_eq!(a.test_loss.to_bits(), b.test_loss.to_bits());
        }
    }
}
