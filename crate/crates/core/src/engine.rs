//! Random scheduler engine for standard and selective population protocols.
//!
//! A [`Population`] keeps, besides per-agent states, a dense per-group agent
//! index with swap-remove bookkeeping so the selective scheduler can draw a
//! uniform responder from any target group in constant time. Runs reach 10^8+
//! interactions, so the per-step path allocates nothing.

use std::cmp::Ordering;

use rand::Rng;
use rand::SeedableRng;
use thiserror::Error;

use crate::metrics::{ChunkReport, ChunkStream};
use crate::spec::{Model, ProtocolSpec, Responder, StateId};

/// Agent identifier: a dense index in `0..n`.
pub type AgentId = u32;

/// Deterministic, seedable generator with independent streams for parallel
/// trials. Bounded draws go through `rand`'s unbiased range sampling.
pub type SimRng = rand_chacha::ChaCha8Rng;

/// Build the generator for one trial. `stream` separates trials that share a
/// base seed.
pub fn rng_for(seed: u64, stream: u64) -> SimRng {
    let mut rng = SimRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Hidden, totally ordered key carried by agents in comparison-model
/// protocols. Protocol logic may only observe keys through
/// [`Population::compare`]; the raw value is exposed solely for reporting a
/// final answer.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct Key(pub(crate) u64);

impl Key {
    pub fn new(v: u64) -> Self {
        Key(v)
    }
}

impl std::fmt::Display for Key {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Initial configuration of a population.
#[derive(Clone, Debug)]
pub enum PopulationInit {
    /// Multiset of states: `(state, count)` pairs.
    Counts(Vec<(StateId, u64)>),
    /// One agent per entry, carrying a hidden key.
    Keyed(Vec<(StateId, Key)>),
}

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum BuildError {
    #[error("population would be empty")]
    EmptyPopulation,
    #[error("unknown state id {0:?}")]
    UnknownState(StateId),
    #[error("duplicate key {0}")]
    DuplicateKey(Key),
    #[error("protocol carries comparison guards but the population has no keys")]
    KeysRequired,
    #[error("standard-model runs need at least two agents")]
    TooFewAgents,
}

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum StepError {
    #[error("state `{state}` hit an {kind} test at step {step} but declares no null rule")]
    MissingNullRule {
        state: String,
        kind: &'static str,
        step: u64,
    },
}

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum StabilityError {
    #[error("generic stability check cannot handle comparison-guarded protocols")]
    GuardedProtocolNeedsPredicate,
}

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Step(#[from] StepError),
    #[error(transparent)]
    Stability(#[from] StabilityError),
    #[error("invariant breach: {0}")]
    InvariantBreach(String),
}

/// Outcome of one scheduler attempt.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum OutcomeKind {
    /// Responder drawn and a rule fired.
    Meaningful,
    /// Target group empty, initiator outside it; null rule rewrote the
    /// initiator.
    Emptiness,
    /// Initiator alone in its own target group; null rule rewrote it.
    Singleton,
    /// A pair was drawn but no rule matched; nothing changed.
    NoMatch,
}

impl OutcomeKind {
    pub fn index(self) -> usize {
        match self {
            OutcomeKind::Meaningful => 0,
            OutcomeKind::Emptiness => 1,
            OutcomeKind::Singleton => 2,
            OutcomeKind::NoMatch => 3,
        }
    }
}

/// One scheduler step.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub struct InteractionRecord {
    /// 1-based interaction counter.
    pub step: u64,
    pub initiator: AgentId,
    pub responder: Option<AgentId>,
    pub kind: OutcomeKind,
    pub rule: Option<u32>,
}

/// Per-kind interaction tallies for a run.
#[derive(Copy, Clone, Default, PartialEq, Eq, Debug)]
pub struct KindCounts(pub [u64; 4]);

impl KindCounts {
    #[inline]
    pub fn note(&mut self, kind: OutcomeKind) {
        self.0[kind.index()] += 1;
    }

    pub fn meaningful(&self) -> u64 {
        self.0[0]
    }
    pub fn emptiness(&self) -> u64 {
        self.0[1]
    }
    pub fn singleton(&self) -> u64 {
        self.0[2]
    }
    pub fn no_match(&self) -> u64 {
        self.0[3]
    }
    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }
}

/// Agent states plus the group-membership index.
#[derive(Clone, Debug)]
pub struct Population {
    n: u32,
    state_of: Vec<StateId>,
    keys: Vec<Key>,
    counts: Vec<u64>,
    /// Per-state group index, copied from the spec (empty for the standard
    /// model, where no group bookkeeping is kept).
    group_of_state: Vec<u16>,
    group_agents: Vec<Vec<AgentId>>,
    slot_of: Vec<u32>,
}

impl Population {
    pub fn new(spec: &ProtocolSpec, init: &PopulationInit) -> Result<Self, BuildError> {
        let (state_of, keys) = match init {
            PopulationInit::Counts(counts) => {
                let mut states = Vec::new();
                for &(s, c) in counts {
                    if s.0 as usize >= spec.n_states() {
                        return Err(BuildError::UnknownState(s));
                    }
                    for _ in 0..c {
                        states.push(s);
                    }
                }
                (states, Vec::new())
            }
            PopulationInit::Keyed(entries) => {
                let mut states = Vec::with_capacity(entries.len());
                let mut keys = Vec::with_capacity(entries.len());
                for &(s, k) in entries {
                    if s.0 as usize >= spec.n_states() {
                        return Err(BuildError::UnknownState(s));
                    }
                    states.push(s);
                    keys.push(k);
                }
                let mut sorted = keys.clone();
                sorted.sort_unstable();
                if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
                    return Err(BuildError::DuplicateKey(w[0]));
                }
                (states, keys)
            }
        };
        if state_of.is_empty() {
            return Err(BuildError::EmptyPopulation);
        }
        if spec.comparison_model() && keys.is_empty() {
            return Err(BuildError::KeysRequired);
        }
        Ok(Self::assemble(spec, state_of, keys))
    }

    fn assemble(spec: &ProtocolSpec, state_of: Vec<StateId>, keys: Vec<Key>) -> Self {
        let n = state_of.len() as u32;
        let mut counts = vec![0u64; spec.n_states()];
        for &s in &state_of {
            counts[s.0 as usize] += 1;
        }
        let (group_of_state, group_agents, slot_of) = if spec.model() == Model::Selective {
            let gos: Vec<u16> = spec.states().map(|s| spec.group_of(s).0).collect();
            let mut ga: Vec<Vec<AgentId>> = vec![Vec::new(); spec.n_groups()];
            let mut slots = vec![0u32; n as usize];
            for (a, &s) in state_of.iter().enumerate() {
                let g = gos[s.0 as usize] as usize;
                slots[a] = ga[g].len() as u32;
                ga[g].push(a as u32);
            }
            (gos, ga, slots)
        } else {
            (Vec::new(), Vec::new(), Vec::new())
        };
        Population {
            n,
            state_of,
            keys,
            counts,
            group_of_state,
            group_agents,
            slot_of,
        }
    }

    /// Rebuild the population for a different spec, mapping each agent's
    /// state. Keys and agent ids carry over. Used by composed protocols that
    /// swap the active spec between stages.
    pub fn reshape(
        &self,
        new_spec: &ProtocolSpec,
        mut map: impl FnMut(AgentId, StateId) -> StateId,
    ) -> Population {
        let states: Vec<StateId> = self
            .state_of
            .iter()
            .enumerate()
            .map(|(a, &s)| map(a as u32, s))
            .collect();
        debug_assert!(states.iter().all(|s| (s.0 as usize) < new_spec.n_states()));
        Self::assemble(new_spec, states, self.keys.clone())
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    #[inline]
    pub fn state_of(&self, a: AgentId) -> StateId {
        self.state_of[a as usize]
    }

    #[inline]
    pub fn count(&self, s: StateId) -> u64 {
        self.counts[s.0 as usize]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn group_len(&self, g: crate::spec::GroupId) -> usize {
        self.group_agents[g.0 as usize].len()
    }

    pub fn has_keys(&self) -> bool {
        !self.keys.is_empty()
    }

    /// The two-outcome comparator: the only key access protocol logic may
    /// use. Keys are pairwise distinct, so `Equal` never occurs for `a != b`.
    #[inline]
    pub fn compare(&self, a: AgentId, b: AgentId) -> Ordering {
        self.keys[a as usize].cmp(&self.keys[b as usize])
    }

    /// Opaque key token of an agent (for reporting results).
    pub fn key(&self, a: AgentId) -> Option<Key> {
        self.keys.get(a as usize).copied()
    }

    /// First agent currently in the given state, if any.
    pub fn find_agent(&self, s: StateId) -> Option<AgentId> {
        self.state_of
            .iter()
            .position(|&t| t == s)
            .map(|i| i as u32)
    }

    #[inline]
    pub fn set_state(&mut self, a: AgentId, s_new: StateId) {
        let s_old = self.state_of[a as usize];
        if s_old == s_new {
            return;
        }
        self.counts[s_old.0 as usize] -= 1;
        self.counts[s_new.0 as usize] += 1;
        self.state_of[a as usize] = s_new;
        if self.group_of_state.is_empty() {
            return;
        }
        let g_old = self.group_of_state[s_old.0 as usize];
        let g_new = self.group_of_state[s_new.0 as usize];
        if g_old == g_new {
            return;
        }
        // swap-remove from the old group's dense list
        let slot = self.slot_of[a as usize] as usize;
        let list = &mut self.group_agents[g_old as usize];
        let last = list.pop().expect("group list corrupt");
        if last != a {
            list[slot] = last;
            self.slot_of[last as usize] = slot as u32;
        }
        let list = &mut self.group_agents[g_new as usize];
        self.slot_of[a as usize] = list.len() as u32;
        list.push(a);
    }

    /// Full audit of the group index: every agent appears exactly in the list
    /// of its state's group, at its recorded slot, and counts agree.
    pub fn audit_partition(&self, spec: &ProtocolSpec) -> Result<(), String> {
        if spec.model() == Model::Standard {
            return Ok(());
        }
        let mut seen = vec![false; self.n as usize];
        let mut total = 0usize;
        for (g, list) in self.group_agents.iter().enumerate() {
            for (slot, &a) in list.iter().enumerate() {
                let s = self.state_of[a as usize];
                if spec.group_of(s).0 as usize != g {
                    return Err(format!("agent {a} listed in group {g} but its state is not"));
                }
                if self.slot_of[a as usize] as usize != slot {
                    return Err(format!("agent {a} slot mismatch"));
                }
                if seen[a as usize] {
                    return Err(format!("agent {a} listed twice"));
                }
                seen[a as usize] = true;
                total += 1;
            }
        }
        if total != self.n as usize {
            return Err(format!("group lists cover {total} of {} agents", self.n));
        }
        let mut counts = vec![0u64; self.counts.len()];
        for &s in &self.state_of {
            counts[s.0 as usize] += 1;
        }
        if counts != self.counts {
            return Err("state counts out of sync".into());
        }
        Ok(())
    }
}

/// Draw an initiator uniformly from the whole population.
#[inline]
pub fn sample_initiator(pop: &Population, rng: &mut SimRng) -> AgentId {
    rng.random_range(0..pop.n)
}

/// Draw a responder for the given initiator under the selective scheduler:
/// uniform over the initiator's target group minus the initiator itself.
/// `None` when that set is empty (emptiness or singleton test).
#[inline]
pub fn sample_responder(
    pop: &Population,
    spec: &ProtocolSpec,
    initiator: AgentId,
    rng: &mut SimRng,
) -> Option<AgentId> {
    let s = pop.state_of(initiator);
    let tgt = spec.target_of(s);
    let list = &pop.group_agents[tgt.0 as usize];
    let in_own = pop.group_of_state[s.0 as usize] == tgt.0;
    let avail = list.len() - in_own as usize;
    if avail == 0 {
        return None;
    }
    let mut ix = rng.random_range(0..avail);
    if in_own && ix >= pop.slot_of[initiator as usize] as usize {
        ix += 1;
    }
    Some(list[ix])
}

#[inline]
fn match_and_apply(
    pop: &mut Population,
    spec: &ProtocolSpec,
    a: AgentId,
    b: AgentId,
) -> Option<u32> {
    let s = pop.state_of(a);
    let t = pop.state_of(b);
    let rid = match spec.match_pair(s, t, None) {
        Some(r) => Some(r),
        None => {
            if spec.pair_needs_comparison(s, t) && pop.has_keys() {
                let less = pop.compare(a, b) == Ordering::Less;
                spec.match_pair(s, t, Some(less))
            } else {
                None
            }
        }
    };
    if let Some(r) = rid {
        let rule = spec.rule(r);
        let init_out = rule.initiator_out;
        let resp_out = rule.responder_out.expect("meaningful rule");
        pop.set_state(a, init_out);
        pop.set_state(b, resp_out);
    }
    rid
}

/// One attempt of the selective scheduler.
pub fn step_selective(
    pop: &mut Population,
    spec: &ProtocolSpec,
    rng: &mut SimRng,
    step: u64,
) -> Result<InteractionRecord, StepError> {
    debug_assert_eq!(spec.model(), Model::Selective);
    let a = sample_initiator(pop, rng);
    match sample_responder(pop, spec, a, rng) {
        Some(b) => {
            let rid = match_and_apply(pop, spec, a, b);
            Ok(InteractionRecord {
                step,
                initiator: a,
                responder: Some(b),
                kind: if rid.is_some() {
                    OutcomeKind::Meaningful
                } else {
                    OutcomeKind::NoMatch
                },
                rule: rid,
            })
        }
        None => {
            let s = pop.state_of(a);
            let tgt = spec.target_of(s);
            let kind = if spec.group_of(s) == tgt {
                OutcomeKind::Singleton
            } else {
                OutcomeKind::Emptiness
            };
            match spec.null_rule_of(s) {
                Some(rid) => {
                    pop.set_state(a, spec.rule(rid).initiator_out);
                    Ok(InteractionRecord {
                        step,
                        initiator: a,
                        responder: None,
                        kind,
                        rule: Some(rid),
                    })
                }
                None => Err(StepError::MissingNullRule {
                    state: spec.state_name(s).to_string(),
                    kind: if kind == OutcomeKind::Singleton {
                        "singleton"
                    } else {
                        "emptiness"
                    },
                    step,
                }),
            }
        }
    }
}

/// One attempt of the standard scheduler: an ordered pair drawn uniformly
/// from the n(n-1) ordered pairs.
pub fn step_standard(
    pop: &mut Population,
    spec: &ProtocolSpec,
    rng: &mut SimRng,
    step: u64,
) -> Result<InteractionRecord, StepError> {
    debug_assert_eq!(spec.model(), Model::Standard);
    debug_assert!(pop.n >= 2);
    let a = rng.random_range(0..pop.n);
    let mut b = rng.random_range(0..pop.n - 1);
    if b >= a {
        b += 1;
    }
    let rid = match_and_apply(pop, spec, a, b);
    Ok(InteractionRecord {
        step,
        initiator: a,
        responder: Some(b),
        kind: if rid.is_some() {
            OutcomeKind::Meaningful
        } else {
            OutcomeKind::NoMatch
        },
        rule: rid,
    })
}

#[inline]
pub fn step(
    pop: &mut Population,
    spec: &ProtocolSpec,
    rng: &mut SimRng,
    n: u64,
) -> Result<InteractionRecord, StepError> {
    match spec.model() {
        Model::Selective => step_selective(pop, spec, rng, n),
        Model::Standard => step_standard(pop, spec, rng, n),
    }
}

/// Generic stability: no rule application could change any agent's state.
/// Decided from state counts and group occupancy alone.
pub fn is_stable_generic(pop: &Population, spec: &ProtocolSpec) -> Result<bool, StabilityError> {
    if spec.comparison_model() {
        return Err(StabilityError::GuardedProtocolNeedsPredicate);
    }
    for rule in spec.rules() {
        if rule.is_noop() {
            continue;
        }
        match rule.responder {
            Responder::State(t) => {
                let s = rule.initiator;
                let possible = if s == t {
                    pop.count(s) >= 2
                } else {
                    pop.count(s) >= 1 && pop.count(t) >= 1
                };
                if possible {
                    return Ok(false);
                }
            }
            Responder::Null => {
                let s = rule.initiator;
                if pop.count(s) == 0 {
                    continue;
                }
                let tgt = spec.target_of(s);
                let occupancy = pop.group_len(tgt);
                let fires = if spec.group_of(s) == tgt {
                    occupancy == 1
                } else {
                    occupancy == 0
                };
                if fires {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

/// Stability predicate used by [`run`].
pub enum Stability {
    /// [`is_stable_generic`]; only valid for guard-free protocols.
    Generic,
    Custom(Box<dyn Fn(&Population) -> bool + Send + Sync>),
}

impl Stability {
    pub fn holds(&self, pop: &Population, spec: &ProtocolSpec) -> Result<bool, StabilityError> {
        match self {
            Stability::Generic => is_stable_generic(pop, spec),
            Stability::Custom(f) => Ok(f(pop)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunLimits {
    pub max_interactions: u64,
    /// Stability is checked every this many interactions and at the budget
    /// end. Defaults to n.
    pub stability_check_period: Option<u64>,
}

impl RunLimits {
    pub fn new(max_interactions: u64) -> Result<Self, BuildError> {
        if max_interactions == 0 {
            return Err(BuildError::EmptyPopulation);
        }
        Ok(RunLimits {
            max_interactions,
            stability_check_period: None,
        })
    }
}

/// Hooks called around every step. Implementations are monomorphized into
/// the run loop, so an empty observer costs nothing.
pub trait Observer {
    #[inline]
    fn before_step(&mut self, _pop: &Population) {}
    #[inline]
    fn after_step(&mut self, _pop: &Population, _rec: &InteractionRecord) {}
}

pub struct NoObserver;
impl Observer for NoObserver {}

/// Full in-memory trace. Only sensible for small runs and audits.
#[derive(Default)]
pub struct FullTrace(pub Vec<InteractionRecord>);
impl Observer for FullTrace {
    fn after_step(&mut self, _pop: &Population, rec: &InteractionRecord) {
        self.0.push(*rec);
    }
}

/// Streaming measurement state shared across the stages of composed
/// protocols: the interaction counter, chunk stream and per-kind tallies.
pub struct Meter {
    pub steps: u64,
    pub chunker: ChunkStream,
    pub kinds: KindCounts,
}

impl Meter {
    pub fn new(n: u32) -> Self {
        Meter {
            steps: 0,
            chunker: ChunkStream::new(n),
            kinds: KindCounts::default(),
        }
    }

    #[inline]
    pub fn note(&mut self, rec: &InteractionRecord) {
        self.kinds.note(rec.kind);
        if rec.kind == OutcomeKind::Meaningful {
            if let Some(b) = rec.responder {
                self.chunker.note_meaningful(b, rec.step);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub interactions: u64,
    pub stabilized: bool,
    pub chunk: ChunkReport,
    pub kinds: KindCounts,
    pub final_counts: Vec<u64>,
}

/// Run the scheduler until the stability predicate holds (checked every
/// `stability_check_period` interactions and at the budget end) or the
/// interaction budget is exhausted. Exhaustion is reported in the result, not
/// as an error.
pub fn run(
    pop: &mut Population,
    spec: &ProtocolSpec,
    rng: &mut SimRng,
    limits: &RunLimits,
    stability: &Stability,
    observer: &mut impl Observer,
) -> Result<RunResult, EngineError> {
    let mut meter = Meter::new(pop.n());
    let stabilized = run_with_meter(pop, spec, rng, limits, stability, &mut meter, observer)?;
    Ok(RunResult {
        interactions: meter.steps,
        stabilized,
        chunk: meter.chunker.report(),
        kinds: meter.kinds,
        final_counts: pop.counts().to_vec(),
    })
}

/// As [`run`], but accumulating into an existing [`Meter`] so composed
/// protocols measure one continuous trace across stage swaps.
pub fn run_with_meter(
    pop: &mut Population,
    spec: &ProtocolSpec,
    rng: &mut SimRng,
    limits: &RunLimits,
    stability: &Stability,
    meter: &mut Meter,
    observer: &mut impl Observer,
) -> Result<bool, EngineError> {
    if spec.comparison_model() && !pop.has_keys() {
        return Err(BuildError::KeysRequired.into());
    }
    if spec.model() == Model::Standard && pop.n() < 2 {
        return Err(BuildError::TooFewAgents.into());
    }
    let period = limits
        .stability_check_period
        .unwrap_or(pop.n() as u64)
        .max(1);
    let budget_end = meter.steps + limits.max_interactions;
    if stability.holds(pop, spec)? {
        return Ok(true);
    }
    let mut next_check = meter.steps + period;
    while meter.steps < budget_end {
        observer.before_step(pop);
        meter.steps += 1;
        let rec = step(pop, spec, rng, meter.steps)?;
        meter.note(&rec);
        observer.after_step(pop, &rec);
        if meter.steps >= next_check {
            if stability.holds(pop, spec)? {
                return Ok(true);
            }
            next_check = meter.steps + period;
        }
    }
    Ok(stability.holds(pop, spec)?)
}

/// Drive steps until `stop` returns true (inspected after each step) or the
/// step budget is hit. Returns whether the stop condition fired. Used by
/// composed protocols that watch for leader-observed stage boundaries.
pub fn drive_until(
    pop: &mut Population,
    spec: &ProtocolSpec,
    rng: &mut SimRng,
    meter: &mut Meter,
    budget_end: u64,
    mut stop: impl FnMut(&Population, &InteractionRecord) -> bool,
    observer: &mut impl Observer,
) -> Result<bool, EngineError> {
    while meter.steps < budget_end {
        observer.before_step(pop);
        meter.steps += 1;
        let rec = step(pop, spec, rng, meter.steps)?;
        meter.note(&rec);
        observer.after_step(pop, &rec);
        if stop(pop, &rec) {
            return Ok(true);
        }
    }
    Ok(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::{Guard, Model, SpecBuilder};

    fn epidemic() -> ProtocolSpec {
        let mut b = SpecBuilder::new("epidemic", Model::Selective);
        let [zero, one, stop] = b.states(["0", "1", "Stop"]);
        let g0 = b.group("G0", &[zero]);
        let g1 = b.group("G1", &[one]);
        let gs = b.group("GS", &[stop]);
        b.target(zero, g1);
        b.target(one, g0);
        b.target(stop, gs);
        b.rule(one, zero, one, one);
        b.null_rule(one, stop);
        b.null_rule(stop, stop);
        b.build().unwrap()
    }

    #[test]
    fn build_population_counts() {
        let spec = epidemic();
        let one = spec.state_named("1").unwrap();
        let zero = spec.state_named("0").unwrap();
        let pop =
            Population::new(&spec, &PopulationInit::Counts(vec![(one, 1), (zero, 2)])).unwrap();
        assert_eq!(pop.n(), 3);
        assert_eq!(pop.group_len(spec.group_named("G1").unwrap()), 1);
        assert_eq!(pop.group_len(spec.group_named("G0").unwrap()), 2);
        pop.audit_partition(&spec).unwrap();
    }

    #[test]
    fn build_population_rejects_bad_input() {
        let spec = epidemic();
        assert_eq!(
            Population::new(&spec, &PopulationInit::Counts(vec![])),
            Err(BuildError::EmptyPopulation)
        );
        assert_eq!(
            Population::new(&spec, &PopulationInit::Counts(vec![(StateId(9), 1)])),
            Err(BuildError::UnknownState(StateId(9)))
        );
        let zero = spec.state_named("0").unwrap();
        assert_eq!(
            Population::new(
                &spec,
                &PopulationInit::Keyed(vec![(zero, Key::new(5)), (zero, Key::new(5))])
            ),
            Err(BuildError::DuplicateKey(Key::new(5)))
        );
    }

    #[test]
    fn initiator_uniform() {
        // n=4, 10^6 draws: each agent frequency 0.25 +/- 0.005
        let spec = epidemic();
        let zero = spec.state_named("0").unwrap();
        let pop = Population::new(&spec, &PopulationInit::Counts(vec![(zero, 4)])).unwrap();
        let mut rng = rng_for(12345, 0);
        let mut freq = [0u64; 4];
        for _ in 0..1_000_000 {
            freq[sample_initiator(&pop, &mut rng) as usize] += 1;
        }
        for f in freq {
            let p = f as f64 / 1e6;
            assert!((p - 0.25).abs() < 0.005, "frequency {p}");
        }
    }

    #[test]
    fn seeded_draws_are_deterministic() {
        let spec = epidemic();
        let zero = spec.state_named("0").unwrap();
        let pop = Population::new(&spec, &PopulationInit::Counts(vec![(zero, 17)])).unwrap();
        let mut a = rng_for(7, 3);
        let mut b = rng_for(7, 3);
        for _ in 0..100 {
            assert_eq!(
                sample_initiator(&pop, &mut a),
                sample_initiator(&pop, &mut b)
            );
        }
    }

    #[test]
    fn single_agent_initiator_forced() {
        let spec = epidemic();
        let one = spec.state_named("1").unwrap();
        let pop = Population::new(&spec, &PopulationInit::Counts(vec![(one, 1)])).unwrap();
        let mut rng = rng_for(0, 0);
        assert_eq!(sample_initiator(&pop, &mut rng), 0);
    }

    #[test]
    fn selective_step_outcomes() {
        let spec = epidemic();
        let one = spec.state_named("1").unwrap();
        let zero = spec.state_named("0").unwrap();
        let stop = spec.state_named("Stop").unwrap();

        // initiator 1 with uninformed agents present: meaningful, responder informed
        let mut pop =
            Population::new(&spec, &PopulationInit::Counts(vec![(one, 1), (zero, 2)])).unwrap();
        let mut rng = rng_for(11, 0);
        loop {
            let rec = step_selective(&mut pop, &spec, &mut rng, 1).unwrap();
            if rec.initiator == 0 {
                assert_eq!(rec.kind, OutcomeKind::Meaningful);
                assert_eq!(rec.rule, Some(0));
                let b = rec.responder.unwrap();
                assert!(b == 1 || b == 2);
                assert_eq!(pop.state_of(b), one);
                break;
            }
        }

        // all informed: initiator 1 hits emptiness and rests
        let mut pop = Population::new(&spec, &PopulationInit::Counts(vec![(one, 3)])).unwrap();
        let mut rng = rng_for(5, 0);
        let rec = step_selective(&mut pop, &spec, &mut rng, 1).unwrap();
        assert_eq!(rec.kind, OutcomeKind::Emptiness);
        assert_eq!(pop.state_of(rec.initiator), stop);
        pop.audit_partition(&spec).unwrap();
    }

    #[test]
    fn singleton_vs_emptiness_discrimination() {
        // state in its own target group and alone there: singleton
        let mut b = SpecBuilder::new("t", Model::Selective);
        let [l, ls] = b.states(["L", "L*"]);
        let g0 = b.group("G0", &[l]);
        let g1 = b.group("G1", &[ls]);
        b.target(l, g0);
        b.target(ls, g1);
        b.null_rule(l, ls);
        b.null_rule(ls, ls);
        let spec = b.build().unwrap();
        let l = spec.state_named("L").unwrap();
        let ls = spec.state_named("L*").unwrap();
        let mut pop = Population::new(&spec, &PopulationInit::Counts(vec![(l, 1)])).unwrap();
        let mut rng = rng_for(1, 0);
        let rec = step_selective(&mut pop, &spec, &mut rng, 1).unwrap();
        assert_eq!(rec.kind, OutcomeKind::Singleton);
        assert_eq!(pop.state_of(0), ls);
        // now alone in G1, targeting G1: singleton again, no-op rule
        let rec = step_selective(&mut pop, &spec, &mut rng, 2).unwrap();
        assert_eq!(rec.kind, OutcomeKind::Singleton);
    }

    #[test]
    fn missing_null_rule_is_an_error() {
        let mut b = SpecBuilder::new("t", Model::Selective);
        let [a, x] = b.states(["a", "x"]);
        let ga = b.group("GA", &[a]);
        let gx = b.group("GX", &[x]);
        b.target(a, gx);
        b.target(x, ga);
        b.rule(a, x, a, x);
        let spec = b.build().unwrap();
        let a = spec.state_named("a").unwrap();
        let mut pop = Population::new(&spec, &PopulationInit::Counts(vec![(a, 1)])).unwrap();
        let mut rng = rng_for(1, 0);
        let err = step_selective(&mut pop, &spec, &mut rng, 1).unwrap_err();
        assert!(matches!(err, StepError::MissingNullRule { .. }));
    }

    #[test]
    fn standard_pair_uniform_and_nomatch() {
        let mut b = SpecBuilder::new("epi-std", Model::Standard);
        let [zero, one] = b.states(["0", "1"]);
        b.rule(one, zero, one, one);
        let spec = b.build().unwrap();
        let mut pop =
            Population::new(&spec, &PopulationInit::Counts(vec![(zero, 2)])).unwrap();
        let mut rng = rng_for(3, 0);
        let rec = step_standard(&mut pop, &spec, &mut rng, 1).unwrap();
        assert_eq!(rec.kind, OutcomeKind::NoMatch);
        assert_eq!(pop.count(zero), 2);
        assert_ne!(rec.initiator, rec.responder.unwrap());
    }

    #[test]
    fn run_selective_epidemic_stabilizes() {
        let spec = epidemic();
        let one = spec.state_named("1").unwrap();
        let zero = spec.state_named("0").unwrap();
        let stop = spec.state_named("Stop").unwrap();
        let mut pop =
            Population::new(&spec, &PopulationInit::Counts(vec![(one, 1), (zero, 999)])).unwrap();
        let mut rng = rng_for(42, 0);
        let limits = RunLimits::new(10_000_000).unwrap();
        let res = run(
            &mut pop,
            &spec,
            &mut rng,
            &limits,
            &Stability::Generic,
            &mut NoObserver,
        )
        .unwrap();
        assert!(res.stabilized);
        assert_eq!(pop.count(stop), 1000);
        pop.audit_partition(&spec).unwrap();
        assert_eq!(res.kinds.total(), res.interactions);
    }

    #[test]
    fn determinism_bit_identical_traces() {
        let spec = epidemic();
        let one = spec.state_named("1").unwrap();
        let zero = spec.state_named("0").unwrap();
        let limits = RunLimits::new(100_000).unwrap();
        let mut traces = Vec::new();
        for _ in 0..2 {
            let mut pop =
                Population::new(&spec, &PopulationInit::Counts(vec![(one, 1), (zero, 49)]))
                    .unwrap();
            let mut rng = rng_for(99, 1);
            let mut trace = FullTrace::default();
            run(
                &mut pop,
                &spec,
                &mut rng,
                &limits,
                &Stability::Generic,
                &mut trace,
            )
            .unwrap();
            traces.push(trace.0);
        }
        assert_eq!(traces[0], traces[1]);
        assert!(!traces[0].is_empty());
    }

    #[test]
    fn guarded_protocol_needs_predicate() {
        let mut b = SpecBuilder::new("median", Model::Standard);
        let [n, l, u] = b.states(["N", "L", "U"]);
        let _ = (l, u);
        b.rule_if(Guard::Less, n, n, l, u);
        let spec = b.build().unwrap();
        let pop = Population::new(
            &spec,
            &PopulationInit::Keyed(vec![(n, Key::new(1)), (n, Key::new(2))]),
        )
        .unwrap();
        assert_eq!(
            is_stable_generic(&pop, &spec),
            Err(StabilityError::GuardedProtocolNeedsPredicate)
        );
    }

    #[test]
    fn generic_stability_counts() {
        let spec = epidemic();
        let one = spec.state_named("1").unwrap();
        let zero = spec.state_named("0").unwrap();
        let stop = spec.state_named("Stop").unwrap();
        let stable =
            Population::new(&spec, &PopulationInit::Counts(vec![(stop, 5)])).unwrap();
        assert!(is_stable_generic(&stable, &spec).unwrap());
        // one informer left: its emptiness rule still changes state
        let informing =
            Population::new(&spec, &PopulationInit::Counts(vec![(one, 1), (stop, 4)])).unwrap();
        assert!(!is_stable_generic(&informing, &spec).unwrap());
        let spreading =
            Population::new(&spec, &PopulationInit::Counts(vec![(one, 1), (zero, 1)])).unwrap();
        assert!(!is_stable_generic(&spreading, &spec).unwrap());
    }

    #[test]
    fn max_interactions_zero_rejected() {
        assert!(RunLimits::new(0).is_err());
    }

    #[test]
    fn responder_excludes_initiator_within_own_group() {
        // two agents in one group targeting itself: each must always draw the other
        let mut b = SpecBuilder::new("t", Model::Selective);
        let [a] = b.states(["a"]);
        let g = b.group("G", &[a]);
        b.target(a, g);
        b.rule(a, a, a, a);
        let spec = b.build().unwrap();
        let a = spec.state_named("a").unwrap();
        let pop = Population::new(&spec, &PopulationInit::Counts(vec![(a, 2)])).unwrap();
        let mut rng = rng_for(8, 0);
        for _ in 0..200 {
            let i = sample_initiator(&pop, &mut rng);
            let r = sample_responder(&pop, &spec, i, &mut rng).unwrap();
            assert_ne!(i, r);
        }
    }
}
