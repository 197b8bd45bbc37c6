//! Reconstruction of the receiver's arrival stream from cumulative nonce
//! sums.
//!
//! The sender knows which nonces it transmitted; each returning packet
//! carries the receiver's running sum. Every subset of outstanding nonces
//! whose wrapped sum matches a sum delta is a possible delivery; tracking
//! all consistent assignments over the observation sequence yields which
//! packets definitely arrived (and in what confirmation order), which are
//! loss candidates, and which arrived out of order. A sum no subset can
//! explain means tampering, duplication, or state loss.
//!
//! The searcher here is meet-in-the-middle per sum delta with memoized
//! subset solutions. Its correctness bar is equality with the exhaustive
//! brute-force oracle (test code) on every window it can both handle.

use std::collections::{BTreeSet, HashMap};
use std::rc::Rc;

use crate::error::ArrivalError;

/// A transmitted nonce not yet folded into any confirmed sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutstandingNonce {
    pub value: u32,
    /// Index of the first observation (in observer-nonce order) that could
    /// possibly include this packet: the number of observations already
    /// received when it was sent. Earlier observations were generated before
    /// this packet existed, so excluding them is sound and shrinks the
    /// search.
    pub eligible_from: usize,
}

impl OutstandingNonce {
    pub fn new(value: u32) -> Self {
        OutstandingNonce {
            value,
            eligible_from: 0,
        }
    }
}

/// One returning packet's nonce tuple as seen by the sender.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observation {
    /// The observer's own transmit nonce; increasing when the return stream
    /// is in order, and the sort key when it is not.
    pub observer_nonce: u32,
    /// The observer's running sum of everything it received so far.
    pub n_sum: u32,
}

/// What the sum stream proves about the outstanding window.
///
/// `arrived`, `lost_candidates`, and `ambiguous` partition the outstanding
/// set. Arrived packets are ordered by confirmation: the first observation
/// whose sum could include them, ties broken by send order. A reordered pair
/// `(a, b)` means `a` was sent before `b` but every consistent explanation
/// confirms `a` strictly after `b`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ArrivalReport {
    pub arrived: Vec<u32>,
    pub lost_candidates: Vec<u32>,
    pub ambiguous: Vec<u32>,
    pub reordered: Vec<(u32, u32)>,
    /// Whether the observer nonces arrived in increasing order (the return
    /// path itself did not reorder).
    pub acks_in_order: bool,
}

const UNASSIGNED: u32 = u32::MAX;
/// Memoized subset solutions, keyed by (candidate indices, sum delta).
type SubsetMemo = HashMap<(Vec<u32>, u32), Rc<Vec<Vec<u32>>>>;
/// Meet-in-the-middle enumerates 2^(n/2) sums per half; 36 candidates keeps
/// the worst case around 2^18 entries.
const MAX_CANDIDATES: usize = 36;
const MAX_HYPOTHESES: usize = 200_000;

/// Reconstruct the arrival stream.
///
/// `base_sum` is the receiver sum already accounted for before the first
/// observation (0 at flow start). `window` is the number of excluding
/// observations after which an unexplained packet is reported as a loss
/// candidate rather than ambiguous.
pub fn reconstruct_arrivals(
    outstanding: &[OutstandingNonce],
    observations: &[Observation],
    base_sum: u32,
    window: usize,
) -> Result<ArrivalReport, ArrivalError> {
    let (ordered, acks_in_order) = normalize_observations(observations)?;

    let mut deltas = Vec::with_capacity(ordered.len());
    let mut prev = base_sum;
    for obs in &ordered {
        deltas.push(obs.n_sum.wrapping_sub(prev));
        prev = obs.n_sum;
    }

    let n = outstanding.len();
    let mut hypotheses: Vec<Vec<u32>> = vec![vec![UNASSIGNED; n]];
    let mut memo: SubsetMemo = HashMap::new();

    for (obs_idx, &delta) in deltas.iter().enumerate() {
        let mut next = Vec::new();
        for hyp in &hypotheses {
            let candidates: Vec<u32> = (0..n as u32)
                .filter(|&p| {
                    hyp[p as usize] == UNASSIGNED
                        && outstanding[p as usize].eligible_from <= obs_idx
                })
                .collect();
            if candidates.len() > MAX_CANDIDATES {
                return Err(ArrivalError::WindowTooLarge {
                    size: candidates.len(),
                });
            }
            let subsets = match memo.get(&(candidates.clone(), delta)) {
                Some(cached) => Rc::clone(cached),
                None => {
                    let values: Vec<u32> = candidates
                        .iter()
                        .map(|&p| outstanding[p as usize].value)
                        .collect();
                    let found = Rc::new(subsets_summing_to(&candidates, &values, delta));
                    memo.insert((candidates.clone(), delta), Rc::clone(&found));
                    found
                }
            };
            for subset in subsets.iter() {
                let mut branched = hyp.clone();
                for &p in subset {
                    branched[p as usize] = obs_idx as u32;
                }
                next.push(branched);
                if next.len() > MAX_HYPOTHESES {
                    return Err(ArrivalError::WindowTooLarge { size: next.len() });
                }
            }
        }
        if next.is_empty() {
            return Err(ArrivalError::Inconsistent {
                observation: obs_idx,
                delta,
            });
        }
        hypotheses = next;
    }

    Ok(aggregate(
        outstanding,
        &hypotheses,
        deltas.len(),
        window,
        acks_in_order,
    ))
}

/// Sort by observer nonce (recovering the generation order when the return
/// path reordered), drop exact duplicates, reject contradictions.
fn normalize_observations(
    observations: &[Observation],
) -> Result<(Vec<Observation>, bool), ArrivalError> {
    let in_order = observations
        .windows(2)
        .all(|w| w[0].observer_nonce <= w[1].observer_nonce);
    let mut ordered = observations.to_vec();
    ordered.sort_by_key(|o| o.observer_nonce);
    let mut deduped: Vec<Observation> = Vec::with_capacity(ordered.len());
    for obs in ordered {
        match deduped.last() {
            Some(last) if last.observer_nonce == obs.observer_nonce => {
                if last.n_sum != obs.n_sum {
                    return Err(ArrivalError::ConflictingObservation {
                        nonce: obs.observer_nonce,
                    });
                }
            }
            _ => deduped.push(obs),
        }
    }
    Ok((deduped, in_order))
}

/// All subsets of `values` (paired with caller indices) whose wrapped sum is
/// `delta`, meet-in-the-middle. Subsets come back as sorted index lists; the
/// empty subset explains a zero delta.
fn subsets_summing_to(indices: &[u32], values: &[u32], delta: u32) -> Vec<Vec<u32>> {
    let n = values.len();
    let half = n / 2;
    let (low_vals, high_vals) = values.split_at(half);

    let mut low_sums: HashMap<u32, Vec<u32>> = HashMap::new();
    for mask in 0u32..(1 << low_vals.len()) {
        let mut sum = 0u32;
        for (i, &v) in low_vals.iter().enumerate() {
            if mask & (1 << i) != 0 {
                sum = sum.wrapping_add(v);
            }
        }
        low_sums.entry(sum).or_default().push(mask);
    }

    let mut out = Vec::new();
    for mask in 0u64..(1u64 << high_vals.len()) {
        let mut sum = 0u32;
        for (i, &v) in high_vals.iter().enumerate() {
            if mask & (1 << i) != 0 {
                sum = sum.wrapping_add(v);
            }
        }
        let need = delta.wrapping_sub(sum);
        if let Some(low_masks) = low_sums.get(&need) {
            for &low_mask in low_masks {
                let mut subset = Vec::new();
                for (i, &idx) in indices.iter().enumerate().take(half) {
                    if low_mask & (1 << i) != 0 {
                        subset.push(idx);
                    }
                }
                for (i, &idx) in indices.iter().enumerate().skip(half) {
                    if mask & (1 << (i - half)) != 0 {
                        subset.push(idx);
                    }
                }
                out.push(subset);
            }
        }
    }
    // Deterministic branch order regardless of hash-map iteration.
    out.sort();
    out
}

fn aggregate(
    outstanding: &[OutstandingNonce],
    hypotheses: &[Vec<u32>],
    observation_count: usize,
    window: usize,
    acks_in_order: bool,
) -> ArrivalReport {
    let n = outstanding.len();
    let mut possible: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n];
    for hyp in hypotheses {
        for (p, &assignment) in hyp.iter().enumerate() {
            possible[p].insert(assignment);
        }
    }

    let mut arrived_idx = Vec::new();
    let mut lost = Vec::new();
    let mut ambiguous = Vec::new();
    for p in 0..n {
        if !possible[p].contains(&UNASSIGNED) {
            arrived_idx.push(p);
        } else if possible[p].len() == 1 {
            // Excluded from every explanation; loss once enough observations
            // have had the chance to include it.
            let exclusions = observation_count.saturating_sub(outstanding[p].eligible_from);
            if exclusions >= window && observation_count > 0 {
                lost.push(outstanding[p].value);
            } else {
                ambiguous.push(outstanding[p].value);
            }
        } else {
            ambiguous.push(outstanding[p].value);
        }
    }

    arrived_idx.sort_by_key(|&p| (*possible[p].iter().next().unwrap(), p));
    let arrived: Vec<u32> = arrived_idx.iter().map(|&p| outstanding[p].value).collect();

    let mut reordered = Vec::new();
    for (ai, &a) in arrived_idx.iter().enumerate() {
        for &b in &arrived_idx[ai + 1..] {
            let (first_sent, later_sent) = if a < b { (a, b) } else { (b, a) };
            let inverted_everywhere = hypotheses
                .iter()
                .all(|hyp| hyp[first_sent] > hyp[later_sent]);
            if inverted_everywhere {
                reordered.push((
                    outstanding[first_sent].value,
                    outstanding[later_sent].value,
                ));
            }
        }
    }
    reordered.sort();
    reordered.dedup();
    lost.sort_unstable();
    ambiguous.sort_unstable();

    ArrivalReport {
        arrived,
        lost_candidates: lost,
        ambiguous,
        reordered,
        acks_in_order,
    }
}
