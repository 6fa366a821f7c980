//! Ranked acquisition pool.
//!
//! A fixed-capacity batch ordered by sequentially conditioned acquisition:
//! the entry at rank `k` stores `a(x_k | x_1, ..., x_{k-1})`, where
//! conditioning is a Kriging-believer ghost update of the shared base
//! surrogate. `cache[k]` is the base conditioned on ranks `0..k`.
//!
//! An offered candidate is rejected outright when the pool is full and its
//! unconditioned value does not beat the lowest conditioned value. Otherwise
//! it walks down from the first rank its unconditioned value beats, being
//! re-conditioned on the ranks above, until it beats the incumbent. Everything
//! below the insertion point is then re-sorted by competition: for each slot
//! the displaced entries are conditioned on all ranks above and the best one
//! wins. The entry left in the bottom working slot is discarded.

use std::sync::Arc;

use thiserror::Error;

use crate::acquisition::{AcquisitionParams, Candidate};
use crate::gp::{ConditionedSurrogate, FittedSurrogate};
use crate::util::Workers;

/// Conditioned values closer than this count as tied; the earlier offer wins.
pub const TIE_MARGIN: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoolError {
    #[error("pools were built on different base surrogates")]
    BaseMismatch,
    #[error("pools have different acquisition parameters")]
    ParamsMismatch,
    #[error("no pools to merge")]
    Empty,
}

#[derive(Debug, Clone)]
pub struct PoolEntry {
    pub candidate: Candidate,
    pub conditioned: f64,
    /// Offer sequence number, used for tie-breaking.
    pub order: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OfferOutcome {
    Rejected,
    Inserted { rank: usize },
}

#[derive(Debug, Clone)]
pub struct RankedPool {
    base: Arc<FittedSurrogate>,
    params: AcquisitionParams,
    capacity: usize,
    entries: Vec<PoolEntry>,
    /// `cache[k]` is conditioned on `entries[..k]`; one longer than `entries`.
    cache: Vec<ConditionedSurrogate>,
    offers: usize,
}

fn beats(value: f64, incumbent: f64) -> bool {
    value > incumbent + TIE_MARGIN
}

impl RankedPool {
    pub fn new(base: Arc<FittedSurrogate>, params: AcquisitionParams, capacity: usize) -> Self {
        let root = ConditionedSurrogate::from_base(Arc::clone(&base));
        Self {
            base,
            params,
            capacity,
            entries: Vec::with_capacity(capacity),
            cache: vec![root],
            offers: 0,
        }
    }

    pub fn base(&self) -> &Arc<FittedSurrogate> {
        &self.base
    }

    pub fn params(&self) -> &AcquisitionParams {
        &self.params
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn locations(&self) -> Vec<Vec<f64>> {
        self.entries
            .iter()
            .map(|e| e.candidate.location.clone())
            .collect()
    }

    /// Base surrogate conditioned on ranks `0..k`.
    pub fn conditioned_surrogate(&self, k: usize) -> &ConditionedSurrogate {
        &self.cache[k]
    }

    /// Surrogate conditioned on the whole batch.
    pub fn final_surrogate(&self) -> &ConditionedSurrogate {
        &self.cache[self.entries.len()]
    }

    fn push_entry(&mut self, entry: PoolEntry) {
        let k = self.entries.len();
        let next = self.cache[k]
            .condition_on_solved(&entry.candidate.location, entry.candidate.base_solve())
            .surrogate;
        self.entries.push(entry);
        self.cache.push(next);
    }

    fn truncate(&mut self, k: usize) -> Vec<PoolEntry> {
        self.cache.truncate(k + 1);
        self.entries.split_off(k)
    }

    pub fn offer(&mut self, candidate: Candidate) -> OfferOutcome {
        let order = self.offers;
        self.offers += 1;
        self.offer_with_order(candidate, order)
    }

    fn offer_with_order(&mut self, candidate: Candidate, order: usize) -> OfferOutcome {
        if self.capacity == 0 || candidate.unconditioned == f64::NEG_INFINITY {
            return OfferOutcome::Rejected;
        }
        if self.is_full()
            && !beats(
                candidate.unconditioned,
                self.entries[self.capacity - 1].conditioned,
            )
        {
            return OfferOutcome::Rejected;
        }
        // Conditioning only lowers the value, so ranks the unconditioned value
        // cannot beat are skipped without evaluation.
        let mut k = self
            .entries
            .iter()
            .position(|e| beats(candidate.unconditioned, e.conditioned))
            .unwrap_or(self.entries.len());
        let mut value = candidate.conditioned(&self.cache[k], &self.params);
        while k < self.entries.len() && !beats(value, self.entries[k].conditioned) {
            k += 1;
            value = candidate.conditioned(&self.cache[k], &self.params);
        }
        if value == f64::NEG_INFINITY || k >= self.capacity {
            return OfferOutcome::Rejected;
        }
        let displaced = self.truncate(k);
        self.push_entry(PoolEntry {
            candidate,
            conditioned: value,
            order,
        });
        self.refill(displaced);
        OfferOutcome::Inserted { rank: k }
    }

    /// Fills the slots below the current last entry by conditioned competition.
    fn refill(&mut self, mut contenders: Vec<PoolEntry>) {
        while !self.is_full() && !contenders.is_empty() {
            let k = self.entries.len();
            let mut best = 0;
            for i in 0..contenders.len() {
                let c = &mut contenders[i];
                c.conditioned = c.candidate.conditioned(&self.cache[k], &self.params);
                if i == 0 {
                    continue;
                }
                let (v, o) = (contenders[best].conditioned, contenders[best].order);
                let c = &contenders[i];
                if beats(c.conditioned, v) || (!beats(v, c.conditioned) && c.order < o) {
                    best = i;
                }
            }
            if contenders[best].conditioned == f64::NEG_INFINITY {
                break;
            }
            let winner = contenders.remove(best);
            self.push_entry(winner);
        }
    }

    /// Conditioned values recomputed from fresh conditioning chains.
    pub fn recompute_conditioned(&self) -> Vec<f64> {
        let mut s = ConditionedSurrogate::from_base(Arc::clone(&self.base));
        let mut out = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            out.push(crate::acquisition::acquisition_at(
                &s,
                &e.candidate.location,
                &self.params,
            ));
            s = s.condition_on(&e.candidate.location).surrogate;
        }
        out
    }
}

/// Ranks candidates into a pool of the given capacity.
///
/// Candidates are offered in descending unconditioned order (stable, so ties
/// go to the earlier candidate). Rejected candidates are re-offered in further
/// passes until a pass inserts nothing; at that point no candidate beats any
/// rank conditioned on the ranks above, which makes the batch the greedy
/// sequentially conditioned one.
pub fn rank_sample(
    base: Arc<FittedSurrogate>,
    params: AcquisitionParams,
    candidates: Vec<Candidate>,
    capacity: usize,
) -> RankedPool {
    let mut pool = RankedPool::new(base, params, capacity);
    let mut indexed: Vec<(usize, Candidate)> = candidates.into_iter().enumerate().collect();
    indexed.sort_by(|a, b| {
        b.1.unconditioned
            .total_cmp(&a.1.unconditioned)
            .then(a.0.cmp(&b.0))
    });
    let ordered: Vec<Candidate> = indexed.into_iter().map(|(_, c)| c).collect();
    pool.offers = ordered.len();

    let mut in_pool = vec![false; ordered.len()];
    loop {
        let mut inserted = false;
        for (i, c) in ordered.iter().enumerate() {
            if in_pool[i] {
                continue;
            }
            if let OfferOutcome::Inserted { .. } = pool.offer_with_order(c.clone(), i) {
                inserted = true;
                in_pool.iter_mut().for_each(|f| *f = false);
                for e in &pool.entries {
                    in_pool[e.order] = true;
                }
            }
        }
        if !inserted {
            break;
        }
    }
    pool
}

/// Combines pools built on the same base by re-ranking the union of their
/// entries.
pub fn merge(pools: Vec<RankedPool>) -> Result<RankedPool, PoolError> {
    let first = pools.first().ok_or(PoolError::Empty)?;
    let base = Arc::clone(&first.base);
    let params = first.params;
    let capacity = pools.iter().map(|p| p.capacity).max().unwrap_or(0);
    for p in &pools {
        if !Arc::ptr_eq(&p.base, &base) {
            return Err(PoolError::BaseMismatch);
        }
        if p.params != params {
            return Err(PoolError::ParamsMismatch);
        }
    }
    let union: Vec<Candidate> = pools
        .into_iter()
        .flat_map(|p| p.entries.into_iter().map(|e| e.candidate))
        .collect();
    Ok(rank_sample(base, params, union, capacity))
}

/// Index of the first rank `candidate` would take over, if any.
fn first_violation(pool: &RankedPool, candidate: &Candidate) -> Option<usize> {
    if candidate.unconditioned == f64::NEG_INFINITY {
        return None;
    }
    if pool.is_full()
        && !beats(
            candidate.unconditioned,
            pool.entries[pool.capacity - 1].conditioned,
        )
    {
        return None;
    }
    for k in 0..=pool.entries.len().min(pool.capacity.saturating_sub(1)) {
        if k < pool.entries.len() && !beats(candidate.unconditioned, pool.entries[k].conditioned) {
            continue;
        }
        let v = candidate.conditioned(&pool.cache[k], &pool.params);
        if v == f64::NEG_INFINITY {
            return None;
        }
        if k == pool.entries.len() || beats(v, pool.entries[k].conditioned) {
            return Some(k);
        }
    }
    None
}

/// Re-offers candidates that would displace a pool entry until none does.
///
/// The scan is parallel; offers are sequential and in descending
/// unconditioned order. The fixed point is the greedy conditioned batch over
/// `candidates` regardless of how the pool was assembled.
pub fn repair(mut pool: RankedPool, candidates: &[Candidate], workers: &Workers) -> RankedPool {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .unconditioned
            .total_cmp(&candidates[a].unconditioned)
            .then(a.cmp(&b))
    });
    let chunk = order.len().div_ceil(workers.count() * 4).max(1);
    loop {
        let groups: Vec<&[usize]> = order.chunks(chunk).collect();
        let violators: Vec<usize> = workers
            .map(&groups, |g| {
                g.iter()
                    .copied()
                    .filter(|&i| {
                        let loc = &candidates[i].location;
                        !pool.entries.iter().any(|e| &e.candidate.location == loc)
                            && first_violation(&pool, &candidates[i]).is_some()
                    })
                    .collect::<Vec<_>>()
            })
            .into_iter()
            .flatten()
            .collect();
        if violators.is_empty() {
            return pool;
        }
        let mut inserted = false;
        for i in violators {
            if let OfferOutcome::Inserted { .. } = pool.offer_with_order(candidates[i].clone(), i) {
                inserted = true;
            }
        }
        if !inserted {
            return pool;
        }
    }
}

/// Splits candidates round-robin (in descending unconditioned order) over the
/// workers, ranks each share, merges, then repairs against all candidates.
pub fn split_rank_merge(
    base: Arc<FittedSurrogate>,
    params: AcquisitionParams,
    candidates: Vec<Candidate>,
    capacity: usize,
    workers: &Workers,
) -> RankedPool {
    let w = workers.count();
    if w <= 1 || candidates.len() <= capacity {
        return rank_sample(base, params, candidates, capacity);
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .unconditioned
            .total_cmp(&candidates[a].unconditioned)
            .then(a.cmp(&b))
    });
    let shares: Vec<Vec<Candidate>> = (0..w)
        .map(|j| {
            order
                .iter()
                .skip(j)
                .step_by(w)
                .map(|&i| candidates[i].clone())
                .collect()
        })
        .collect();
    let pools = workers.map(&shares, |share| {
        rank_sample(Arc::clone(&base), params, share.clone(), capacity)
    });
    let merged = merge(pools).expect("sub-pools share one base");
    // Offer numbers must refer to the full candidate list for tie-breaking.
    let mut pool = RankedPool::new(base, params, capacity);
    pool.offers = candidates.len();
    let seed: Vec<Candidate> = merged.entries.into_iter().map(|e| e.candidate).collect();
    for c in seed {
        let i = candidates
            .iter()
            .position(|x| x.location == c.location)
            .unwrap_or(candidates.len());
        pool.offer_with_order(c, i);
    }
    repair(pool, &candidates, workers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::{acquisition_at, candidates};
    use crate::gp::{fit, FitOptions, TrainingSet};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};

    type TestRng = rand_chacha::ChaCha8Rng;

    fn instance(
        seed: u64,
        n_train: usize,
        m: usize,
    ) -> (Arc<FittedSurrogate>, AcquisitionParams, Vec<Candidate>) {
        let mut rng = TestRng::seed_from_u64(seed);
        let locs: Vec<Vec<f64>> = (0..n_train)
            .map(|_| vec![rng.random(), rng.random()])
            .collect();
        let (cx, cy) = (rng.random::<f64>(), rng.random::<f64>());
        let vals = locs
            .iter()
            .map(|x| -12.0 * ((x[0] - cx).powi(2) + (x[1] - cy).powi(2)))
            .collect();
        let ts = TrainingSet::new(locs, vals).unwrap();
        let s = Arc::new(fit(ts, &FitOptions::for_dim(2, seed), &Workers::serial()).unwrap());
        let p = AcquisitionParams::for_surrogate(&s);
        let xs: Vec<Vec<f64>> = (0..m).map(|_| vec![rng.random(), rng.random()]).collect();
        let c = candidates(&s, xs, &p, &Workers::serial());
        (s, p, c)
    }

    /// Exhaustive greedy: repeatedly pick the best candidate conditioned on
    /// all previous picks. Returns picks and the smallest winning margin.
    fn greedy(
        base: &Arc<FittedSurrogate>,
        p: &AcquisitionParams,
        cands: &[Candidate],
        capacity: usize,
    ) -> (Vec<usize>, f64) {
        let mut s = ConditionedSurrogate::from_base(base.clone());
        let mut picked: Vec<usize> = Vec::new();
        let mut margin = f64::INFINITY;
        for _ in 0..capacity {
            let mut vals: Vec<(usize, f64)> = (0..cands.len())
                .filter(|i| !picked.contains(i))
                .map(|i| (i, acquisition_at(&s, &cands[i].location, p)))
                .collect();
            vals.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            if vals.is_empty() || vals[0].1 == f64::NEG_INFINITY {
                break;
            }
            if vals.len() > 1 {
                margin = margin.min(vals[0].1 - vals[1].1);
            }
            picked.push(vals[0].0);
            s = s.condition_on(&cands[vals[0].0].location).surrogate;
        }
        (picked, margin)
    }

    fn batch_of(pool: &RankedPool) -> Vec<Vec<f64>> {
        pool.locations()
    }

    fn check_invariants(pool: &RankedPool) {
        let e = pool.entries();
        for w in e.windows(2) {
            assert!(w[0].conditioned >= w[1].conditioned - TIE_MARGIN);
        }
        for x in e {
            assert!(x.conditioned <= x.candidate.unconditioned + 1e-9);
        }
        if let Some(first) = e.first() {
            assert_eq!(first.conditioned, first.candidate.unconditioned);
        }
        for (stored, fresh) in e.iter().zip(pool.recompute_conditioned()) {
            assert!(
                (stored.conditioned - fresh).abs() < 1e-9,
                "{} vs {fresh}",
                stored.conditioned
            );
        }
        assert!(e.len() <= pool.capacity());
    }

    #[test]
    fn capacity_one_takes_the_unconditioned_maximum() {
        let (s, p, c) = instance(1, 8, 30);
        let best = c
            .iter()
            .max_by(|a, b| a.unconditioned.total_cmp(&b.unconditioned))
            .unwrap()
            .location
            .clone();
        let pool = rank_sample(s, p, c, 1);
        assert_eq!(batch_of(&pool), vec![best]);
    }

    #[test]
    fn identical_candidates_collapse_to_one() {
        let (s, p, _) = instance(2, 8, 0);
        let c = Candidate::new(&s, vec![0.3, 0.3], &p);
        let pool = rank_sample(s, p, vec![c.clone(), c.clone(), c], 3);
        assert_eq!(pool.len(), 1);
    }

    #[test]
    fn empty_candidates_give_empty_pool() {
        let (s, p, _) = instance(3, 6, 0);
        assert!(rank_sample(s, p, vec![], 4).is_empty());
    }

    #[test]
    fn matches_greedy_oracle_on_small_instances() {
        let mut compared = 0;
        for seed in 0..40u64 {
            let m = 4 + (seed as usize % 9);
            let cap = 1 + (seed as usize % 4);
            let (s, p, c) = instance(100 + seed, 6 + seed as usize % 5, m);
            let (picks, margin) = greedy(&s, &p, &c, cap);
            let pool = rank_sample(s.clone(), p, c.clone(), cap);
            check_invariants(&pool);
            if margin <= 1e-9 {
                continue;
            }
            compared += 1;
            let expected: Vec<Vec<f64>> = picks.iter().map(|&i| c[i].location.clone()).collect();
            assert_eq!(batch_of(&pool), expected, "seed {seed}");
        }
        assert!(compared >= 30);
    }

    #[test]
    fn matches_greedy_oracle_with_fifty_candidates() {
        let (s, p, c) = instance(7, 10, 50);
        let (picks, margin) = greedy(&s, &p, &c, 3);
        assert!(margin > 1e-9);
        let pool = rank_sample(s, p, c.clone(), 3);
        let expected: Vec<Vec<f64>> = picks.iter().map(|&i| c[i].location.clone()).collect();
        assert_eq!(batch_of(&pool), expected);
    }

    #[test]
    fn offer_cases() {
        let (s, p, c) = instance(11, 8, 40);
        let mut pool = rank_sample(s.clone(), p, c, 3);
        assert!(pool.is_full());
        let before = batch_of(&pool);

        // rejected: unconditioned value below the last conditioned one
        let mut rng = TestRng::seed_from_u64(5);
        let low = loop {
            let cand = Candidate::new(&s, vec![rng.random(), rng.random()], &p);
            if cand.unconditioned < pool.entries()[2].conditioned {
                break cand;
            }
        };
        assert_eq!(pool.offer(low), OfferOutcome::Rejected);
        assert_eq!(batch_of(&pool), before);

        // a point above the current top lands at rank 0 and the rest re-sorts
        let top = (0..5000)
            .map(|_| Candidate::new(&s, vec![rng.random(), rng.random()], &p))
            .find(|c| c.unconditioned > pool.entries()[0].conditioned + TIE_MARGIN)
            .expect("some point beats the top");
        let mut forced = pool.clone();
        assert_eq!(forced.offer(top), OfferOutcome::Inserted { rank: 0 });
        check_invariants(&forced);

        // walk-down insertions keep every invariant
        let mut walked = 0;
        for _ in 0..400 {
            let cand = Candidate::new(&s, vec![rng.random(), rng.random()], &p);
            let start = pool
                .entries()
                .iter()
                .position(|e| cand.unconditioned > e.conditioned + TIE_MARGIN);
            if let OfferOutcome::Inserted { rank } = pool.offer(cand) {
                if start.is_some_and(|s0| rank > s0) {
                    walked += 1;
                }
                check_invariants(&pool);
            }
        }
        assert!(walked > 0);
    }

    #[test]
    fn offer_order_does_not_change_the_batch() {
        for seed in 0..10u64 {
            let (s, p, c) = instance(200 + seed, 8, 10);
            let (_, margin) = greedy(&s, &p, &c, 3);
            if margin <= 1e-9 {
                continue;
            }
            let sorted = rank_sample(s.clone(), p, c.clone(), 3);
            let mut shuffled = c.clone();
            shuffled.shuffle(&mut TestRng::seed_from_u64(seed));
            let mut pool = RankedPool::new(s.clone(), p, 3);
            loop {
                let mut any = false;
                for cand in &shuffled {
                    if let OfferOutcome::Inserted { .. } = pool.offer(cand.clone()) {
                        any = true;
                    }
                }
                if !any {
                    break;
                }
            }
            assert_eq!(batch_of(&pool), batch_of(&sorted), "seed {seed}");
        }
    }

    #[test]
    fn merge_reduces_to_rank_sample() {
        let (s, p, c) = instance(21, 8, 20);
        let whole = rank_sample(s.clone(), p, c.clone(), 3);
        let merged = merge(vec![whole.clone()]).unwrap();
        assert_eq!(batch_of(&merged), batch_of(&whole));

        let singles: Vec<RankedPool> = c[..5]
            .iter()
            .map(|x| rank_sample(s.clone(), p, vec![x.clone()], 1))
            .collect();
        let merged = merge(singles).unwrap();
        let direct = rank_sample(s.clone(), p, c[..5].to_vec(), 1);
        assert_eq!(batch_of(&merged), batch_of(&direct));

        let (other, _, _) = instance(22, 8, 0);
        let foreign = RankedPool::new(other, p, 3);
        assert_eq!(
            merge(vec![whole, foreign]).unwrap_err(),
            PoolError::BaseMismatch
        );
        assert_eq!(merge(vec![]).unwrap_err(), PoolError::Empty);
    }

    #[test]
    fn split_rank_merge_matches_single_process() {
        let workers = Workers::new(4);
        let mut compared = 0;
        for seed in 0..10u64 {
            let (s, p, c) = instance(300 + seed, 12, 200);
            let (_, margin) = greedy(&s, &p, &c, 4);
            if margin <= 1e-9 {
                continue;
            }
            compared += 1;
            let whole = rank_sample(s.clone(), p, c.clone(), 4);
            let split = split_rank_merge(s.clone(), p, c.clone(), 4, &workers);
            assert_eq!(batch_of(&split), batch_of(&whole), "seed {seed}");
            check_invariants(&split);
        }
        assert!(compared > 5);
    }
}
