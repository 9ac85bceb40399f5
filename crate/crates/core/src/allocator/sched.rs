//! Slot scheduling under conflict and precedence constraints.
//!
//! A slot assigns each arm at most one segment; slots are barrier
//! synchronized and a slot's duration is its longest member. Both solvers
//! minimize `(makespan, slot-id sequence)` with the same lexicographic
//! tie-break, so equal-makespan optima resolve to the identical schedule.

use std::collections::{BTreeMap, BTreeSet};

use super::{ArmAssignment, ConflictGraph, PrecedenceDag, Result, Segment};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slot {
    /// (arm, segment id), sorted by arm.
    pub entries: Vec<(usize, usize)>,
}

impl Slot {
    pub fn segment_ids(&self) -> Vec<usize> {
        self.entries.iter().map(|(_, s)| *s).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub slots: Vec<Slot>,
}

impl Schedule {
    pub fn makespan(&self, segments: &[Segment]) -> f64 {
        let by_id: BTreeMap<usize, &Segment> = segments.iter().map(|s| (s.id, s)).collect();
        self.slots
            .iter()
            .map(|slot| {
                slot.entries
                    .iter()
                    .map(|(_, id)| by_id[id].duration)
                    .fold(0.0f64, f64::max)
            })
            .sum()
    }

    /// Nested id sequence used for the deterministic tie-break.
    pub fn key(&self) -> Vec<Vec<usize>> {
        self.slots
            .iter()
            .map(|s| {
                let mut ids = s.segment_ids();
                ids.sort_unstable();
                ids
            })
            .collect()
    }
}

struct Problem<'a> {
    segments: &'a [Segment],
    conflicts: &'a ConflictGraph,
    dag: &'a PrecedenceDag,
    assignment: &'a ArmAssignment,
}

impl Problem<'_> {
    fn arm(&self, id: usize) -> usize {
        let seg = self.segments.iter().find(|s| s.id == id).expect("segment id");
        self.assignment.arm_of(seg)
    }

    fn duration(&self, id: usize) -> f64 {
        self.segments.iter().find(|s| s.id == id).expect("segment id").duration
    }

    /// Segments whose predecessors are all done and which are not yet done.
    fn ready(&self, done: &BTreeSet<usize>) -> Vec<usize> {
        self.segments
            .iter()
            .filter(|s| !done.contains(&s.id) && self.dag.predecessors_done(s.id, done))
            .map(|s| s.id)
            .collect()
    }

    /// All valid next slots from the ready set: singletons plus
    /// non-conflicting cross-arm pairs, in deterministic order.
    fn slot_choices(&self, ready: &[usize]) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for (i, &a) in ready.iter().enumerate() {
            out.push(vec![a]);
            for &b in ready.iter().skip(i + 1) {
                if self.arm(a) != self.arm(b) && !self.conflicts.conflicts(a, b) {
                    let mut pair = vec![a, b];
                    pair.sort_unstable();
                    out.push(pair);
                }
            }
        }
        out.sort();
        out
    }

    fn slot_of(&self, ids: &[usize]) -> Slot {
        let mut entries: Vec<(usize, usize)> = ids.iter().map(|&s| (self.arm(s), s)).collect();
        entries.sort_unstable();
        Slot { entries }
    }
}

/// Exhaustive oracle: enumerate every valid slot sequence (memoized over the
/// done-set) and return the minimum-makespan schedule, ties broken by the
/// lexicographically smallest segment-id sequence.
pub fn schedule_exhaustive(
    segments: &[Segment],
    conflicts: &ConflictGraph,
    dag: &PrecedenceDag,
    assignment: &ArmAssignment,
) -> Result<Schedule> {
    let problem = Problem { segments, conflicts, dag, assignment };
    if dag.has_cycle(segments) {
        return Err(super::AllocError::CyclicPrecedence);
    }
    let mut memo: BTreeMap<Vec<usize>, (f64, Vec<Vec<usize>>)> = BTreeMap::new();
    let done = BTreeSet::new();
    let (_, slots) = best_completion(&problem, &done, &mut memo)
        .ok_or(super::AllocError::Unschedulable)?;
    Ok(build_schedule(&problem, &slots))
}

/// Left-associated sum of slot durations in slot order -- the one canonical
/// makespan evaluation shared by both solvers, so float rounding can never
/// split a tie differently between them.
fn canonical_makespan(problem: &Problem, slots: &[Vec<usize>]) -> f64 {
    let mut total = 0.0f64;
    for slot in slots {
        total += slot.iter().map(|&s| problem.duration(s)).fold(0.0f64, f64::max);
    }
    total
}

fn best_completion(
    problem: &Problem,
    done: &BTreeSet<usize>,
    memo: &mut BTreeMap<Vec<usize>, (f64, Vec<Vec<usize>>)>,
) -> Option<(f64, Vec<Vec<usize>>)> {
    if done.len() == problem.segments.len() {
        return Some((0.0, vec![]));
    }
    let key: Vec<usize> = done.iter().copied().collect();
    if let Some(hit) = memo.get(&key) {
        return Some(hit.clone());
    }
    let ready = problem.ready(done);
    if ready.is_empty() {
        return None;
    }
    let mut best: Option<(f64, Vec<Vec<usize>>)> = None;
    for choice in problem.slot_choices(&ready) {
        let mut next_done = done.clone();
        next_done.extend(choice.iter().copied());
        if let Some((_, suffix_slots)) = best_completion(problem, &next_done, memo) {
            let mut slots = Vec::with_capacity(suffix_slots.len() + 1);
            slots.push(choice.clone());
            slots.extend(suffix_slots);
            let mk = canonical_makespan(problem, &slots);
            let better = match &best {
                None => true,
                Some((bmk, bslots)) => mk < *bmk || (mk == *bmk && slots < *bslots),
            };
            if better {
                best = Some((mk, slots));
            }
        }
    }
    if let Some(b) = &best {
        memo.insert(key, b.clone());
    }
    best
}

fn build_schedule(problem: &Problem, slots: &[Vec<usize>]) -> Schedule {
    Schedule { slots: slots.iter().map(|ids| problem.slot_of(ids)).collect() }
}

/// Greedy list scheduler: longest ready segment first, paired with the
/// longest compatible segment on the other arm. Used as the branch-and-bound
/// incumbent; never better than optimal.
pub fn greedy_schedule(
    segments: &[Segment],
    conflicts: &ConflictGraph,
    dag: &PrecedenceDag,
    assignment: &ArmAssignment,
) -> Result<Schedule> {
    let problem = Problem { segments, conflicts, dag, assignment };
    if dag.has_cycle(segments) {
        return Err(super::AllocError::CyclicPrecedence);
    }
    let mut done = BTreeSet::new();
    let mut slots = Vec::new();
    while done.len() < segments.len() {
        let mut ready = problem.ready(&done);
        if ready.is_empty() {
            return Err(super::AllocError::Unschedulable);
        }
        ready.sort_by(|&a, &b| {
            problem
                .duration(b)
                .partial_cmp(&problem.duration(a))
                .unwrap()
                .then_with(|| a.cmp(&b))
        });
        let first = ready[0];
        let mut slot = vec![first];
        if let Some(&second) = ready.iter().skip(1).find(|&&s| {
            problem.arm(s) != problem.arm(first) && !conflicts.conflicts(s, first)
        }) {
            slot.push(second);
        }
        slot.sort_unstable();
        done.extend(slot.iter().copied());
        slots.push(slot);
    }
    Ok(build_schedule(&problem, &slots))
}

/// Branch-and-bound over partial schedules. Lower bound: elapsed plus the
/// larger of (a) the per-arm remaining work and (b) the remaining critical
/// path through the precedence DAG. Guarantees the optimal makespan; the
/// final tie-break matches the exhaustive oracle.
pub fn schedule_bnb(
    segments: &[Segment],
    conflicts: &ConflictGraph,
    dag: &PrecedenceDag,
    assignment: &ArmAssignment,
) -> Result<Schedule> {
    let problem = Problem { segments, conflicts, dag, assignment };
    if dag.has_cycle(segments) {
        return Err(super::AllocError::CyclicPrecedence);
    }
    let incumbent = greedy_schedule(segments, conflicts, dag, assignment)?;
    let mut best_mk = incumbent.makespan(segments);
    let mut best_key: Vec<Vec<usize>> = incumbent.key();
    let mut best_slots: Vec<Vec<usize>> = best_key.clone();

    // Critical-path tail lengths through the DAG (duration-weighted).
    let mut tail: BTreeMap<usize, f64> = BTreeMap::new();
    let mut ids: Vec<usize> = segments.iter().map(|s| s.id).collect();
    ids.sort_unstable();
    // Iterate to fixpoint; the DAG is tiny.
    for _ in 0..ids.len() + 1 {
        for s in segments {
            let succ_max = dag
                .edges
                .iter()
                .filter(|(a, _)| *a == s.id)
                .map(|(_, b)| tail.get(b).copied().unwrap_or(0.0))
                .fold(0.0f64, f64::max);
            tail.insert(s.id, s.duration + succ_max);
        }
    }

    let mut elapsed_memo: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    let mut prefix: Vec<Vec<usize>> = Vec::new();
    let done = BTreeSet::new();
    bnb_dfs(
        &problem,
        &done,
        0.0,
        &mut prefix,
        &tail,
        &mut best_mk,
        &mut best_key,
        &mut best_slots,
        &mut elapsed_memo,
    );
    Ok(build_schedule(&problem, &best_slots))
}

#[allow(clippy::too_many_arguments)]
fn bnb_dfs(
    problem: &Problem,
    done: &BTreeSet<usize>,
    elapsed: f64,
    prefix: &mut Vec<Vec<usize>>,
    tail: &BTreeMap<usize, f64>,
    best_mk: &mut f64,
    best_key: &mut Vec<Vec<usize>>,
    best_slots: &mut Vec<Vec<usize>>,
    elapsed_memo: &mut BTreeMap<Vec<usize>, f64>,
) {
    if done.len() == problem.segments.len() {
        let key: Vec<Vec<usize>> = prefix.clone();
        if elapsed < *best_mk || (elapsed == *best_mk && key < *best_key) {
            *best_mk = elapsed;
            *best_key = key.clone();
            *best_slots = key;
        }
        return;
    }
    // Lower bound.
    let mut per_arm = [0.0f64; 2];
    let mut crit = 0.0f64;
    for s in problem.segments {
        if !done.contains(&s.id) {
            per_arm[problem.assignment.arm_of(s)] += s.duration;
            crit = crit.max(tail[&s.id]);
        }
    }
    // Slack keeps float rounding in the bound from pruning an optimum that
    // differs only in summation order; it can only widen the search.
    let lb = elapsed + per_arm[0].max(per_arm[1]).max(crit);
    if lb > *best_mk + 1e-9 {
        return;
    }
    // Dominance: a strictly earlier arrival at the same done-set subsumes us.
    let key: Vec<usize> = done.iter().copied().collect();
    match elapsed_memo.get(&key) {
        Some(&prev) if prev < elapsed => return,
        _ => {
            elapsed_memo.insert(key, elapsed);
        }
    }
    let ready = problem.ready(done);
    if ready.is_empty() {
        return;
    }
    for choice in problem.slot_choices(&ready) {
        let dur = choice.iter().map(|&s| problem.duration(s)).fold(0.0f64, f64::max);
        let mut next = done.clone();
        next.extend(choice.iter().copied());
        prefix.push(choice);
        bnb_dfs(
            problem,
            &next,
            elapsed + dur,
            prefix,
            tail,
            best_mk,
            best_key,
            best_slots,
            elapsed_memo,
        );
        prefix.pop();
    }
}

/// Independent schedule validator used by tests and the VLM client. Checks
/// the four schedule invariants directly against the inputs; shares no code
/// with the solvers.
pub fn validate_schedule(
    schedule: &Schedule,
    segments: &[Segment],
    conflicts: &ConflictGraph,
    dag: &PrecedenceDag,
    assignment: &ArmAssignment,
) -> Vec<String> {
    let mut violations = Vec::new();
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    for (si, slot) in schedule.slots.iter().enumerate() {
        let mut arms = BTreeSet::new();
        for (arm, id) in &slot.entries {
            let seg = match segments.iter().find(|s| s.id == *id) {
                Some(s) => s,
                None => {
                    violations.push(format!("slot {si}: unknown segment {id}"));
                    continue;
                }
            };
            if *arm != assignment.stream_to_arm[seg.stream as usize] {
                violations.push(format!("slot {si}: segment {id} on wrong arm {arm}"));
            }
            if !arms.insert(*arm) {
                violations.push(format!("slot {si}: arm {arm} runs two segments"));
            }
            if let Some(prev) = seen.insert(*id, si) {
                violations.push(format!("segment {id} appears in slots {prev} and {si}"));
            }
        }
        let ids = slot.segment_ids();
        for (i, a) in ids.iter().enumerate() {
            for b in ids.iter().skip(i + 1) {
                if conflicts.conflicts(*a, *b) {
                    violations.push(format!("slot {si}: conflicting pair ({a}, {b})"));
                }
            }
        }
    }
    for s in segments {
        if !seen.contains_key(&s.id) {
            violations.push(format!("segment {} never scheduled", s.id));
        }
    }
    for (a, b) in &dag.edges {
        if let (Some(&sa), Some(&sb)) = (seen.get(a), seen.get(b)) {
            if sa >= sb {
                violations.push(format!("precedence {a} -> {b} violated (slots {sa} >= {sb})"));
            }
        }
    }
    violations
}
