//! Protocol specifications: state spaces, group partitions, target maps and
//! transition rules, plus construction-time validation and post-hoc
//! diagnostics.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

/// Index into a protocol's state table.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct StateId(pub u16);

/// Index into a protocol's group table.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct GroupId(pub u16);

/// Scheduler variant the protocol is written for.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum Model {
    /// Both agents of each interaction are drawn uniformly from the whole
    /// population.
    Standard,
    /// The responder is drawn uniformly from the target group of the
    /// initiator's state.
    Selective,
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Model::Standard => write!(f, "standard"),
            Model::Selective => write!(f, "selective"),
        }
    }
}

/// Key-comparison guard on a rule. `Less` fires when the initiator's hidden
/// key is smaller than the responder's, `Greater` when it is larger. Keys are
/// pairwise distinct, so the two outcomes are exhaustive.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum Guard {
    None,
    Less,
    Greater,
}

/// What the rule expects to find as the responder.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum Responder {
    /// A meaningful interaction with an agent in the given state.
    State(StateId),
    /// The null outcome of an emptiness or singleton test.
    Null,
}

/// One transition rule.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Rule {
    pub initiator: StateId,
    pub responder: Responder,
    pub guard: Guard,
    pub initiator_out: StateId,
    /// Present exactly when `responder` is a state pattern.
    pub responder_out: Option<StateId>,
}

impl Rule {
    pub fn is_null(&self) -> bool {
        self.responder == Responder::Null
    }

    /// A rule is a no-op if firing it leaves both agents unchanged.
    pub fn is_noop(&self) -> bool {
        self.initiator_out == self.initiator
            && match self.responder {
                Responder::Null => true,
                Responder::State(s) => self.responder_out == Some(s),
            }
    }
}

/// Errors rejected at spec construction time.
#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum SpecError {
    #[error("protocol has no states")]
    NoStates,
    #[error("duplicate state name `{0}`")]
    DuplicateState(String),
    #[error("duplicate group name `{0}`")]
    DuplicateGroup(String),
    #[error("`{0}` is a reserved word and cannot name a state or group")]
    ReservedName(String),
    #[error("unknown state `{0}`")]
    UnknownState(String),
    #[error("unknown group `{0}`")]
    UnknownGroup(String),
    #[error("state `{0}` appears in more than one group")]
    OverlappingGroups(String),
    #[error("state `{0}` is not covered by any group")]
    UncoveredState(String),
    #[error("state `{0}` has no target group")]
    MissingTarget(String),
    #[error("state `{0}` has more than one target group")]
    DuplicateTarget(String),
    #[error("rule {0}: responder pattern `{1}` lies outside the target group of `{2}`")]
    RulePatternOutsideTargetGroup(usize, String, String),
    #[error("rules {0} and {1} both match ({2}, {3}, {4})")]
    DuplicateRuleMatch(usize, usize, String, String, &'static str),
    #[error("rules {0} and {1} are both null rules for initiator `{2}`")]
    DuplicateNullRule(usize, usize, String),
    #[error("rule {0}: group clause is not allowed in the standard model")]
    GroupClauseInStandardModel(usize),
    #[error("rule {0}: null rules are not allowed in the standard model")]
    NullRuleInStandardModel(usize),
    #[error("rule {0}: group clause `{1}` disagrees with the declared target `{2}` of `{3}`")]
    RuleTargetMismatch(usize, String, String, String),
    #[error("rule {0}: null rules cannot carry a comparison guard")]
    GuardedNullRule(usize),
    #[error("model is selective but no groups are declared")]
    NoGroups,
    #[error("group declarations are not allowed in the standard model")]
    GroupsInStandardModel,
}

/// A fully validated protocol specification.
///
/// Construction goes through [`SpecBuilder`]; every instance satisfies the
/// structural invariants (groups partition the states, the target map is
/// total in the selective model, and at most one rule matches any
/// (initiator state, responder state, comparison outcome) triple).
#[derive(Clone, Debug)]
pub struct ProtocolSpec {
    name: String,
    model: Model,
    states: Vec<String>,
    groups: Vec<String>,
    group_members: Vec<Vec<StateId>>,
    group_of: Vec<GroupId>,
    target_of: Vec<GroupId>,
    rules: Vec<Rule>,
    comparison_model: bool,
    // Derived match tables, indexed by initiator * n_states + responder.
    unguarded: Vec<Option<u32>>,
    less: Vec<Option<u32>>,
    greater: Vec<Option<u32>>,
    null_rule: Vec<Option<u32>>,
}

impl PartialEq for ProtocolSpec {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.model == other.model
            && self.states == other.states
            && self.groups == other.groups
            && self.group_members == other.group_members
            && self.target_of == other.target_of
            && self.rules == other.rules
    }
}

impl ProtocolSpec {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn model(&self) -> Model {
        self.model
    }

    pub fn comparison_model(&self) -> bool {
        self.comparison_model
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn state_name(&self, s: StateId) -> &str {
        &self.states[s.0 as usize]
    }

    pub fn group_name(&self, g: GroupId) -> &str {
        &self.groups[g.0 as usize]
    }

    pub fn state_named(&self, name: &str) -> Option<StateId> {
        self.states
            .iter()
            .position(|s| s == name)
            .map(|i| StateId(i as u16))
    }

    pub fn group_named(&self, name: &str) -> Option<GroupId> {
        self.groups
            .iter()
            .position(|g| g == name)
            .map(|i| GroupId(i as u16))
    }

    pub fn states(&self) -> impl Iterator<Item = StateId> {
        (0..self.states.len()).map(|i| StateId(i as u16))
    }

    pub fn group_members(&self, g: GroupId) -> &[StateId] {
        &self.group_members[g.0 as usize]
    }

    /// Group that houses the given state (selective model only).
    pub fn group_of(&self, s: StateId) -> GroupId {
        self.group_of[s.0 as usize]
    }

    /// Target group the given state requests its responder from.
    pub fn target_of(&self, s: StateId) -> GroupId {
        self.target_of[s.0 as usize]
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn rule(&self, id: u32) -> &Rule {
        &self.rules[id as usize]
    }

    /// Rule matching a concrete (initiator state, responder state) pair given
    /// the comparison outcome, if any. `initiator_less` is ignored unless a
    /// guarded rule is consulted.
    #[inline]
    pub fn match_pair(
        &self,
        initiator: StateId,
        responder: StateId,
        initiator_less: Option<bool>,
    ) -> Option<u32> {
        let ix = initiator.0 as usize * self.states.len() + responder.0 as usize;
        if let Some(r) = self.unguarded[ix] {
            return Some(r);
        }
        match initiator_less {
            Some(true) => self.less[ix],
            Some(false) => self.greater[ix],
            None => None,
        }
    }

    /// Whether any guarded rule exists for the pair, so the engine knows a
    /// key comparison is required.
    #[inline]
    pub fn pair_needs_comparison(&self, initiator: StateId, responder: StateId) -> bool {
        let ix = initiator.0 as usize * self.states.len() + responder.0 as usize;
        self.unguarded[ix].is_none() && (self.less[ix].is_some() || self.greater[ix].is_some())
    }

    /// Null rule declared for the state, if any.
    #[inline]
    pub fn null_rule_of(&self, s: StateId) -> Option<u32> {
        self.null_rule[s.0 as usize]
    }

    /// Two specs are semantically equal if they differ at most in rule order.
    pub fn semantically_equal(&self, other: &Self) -> bool {
        self.name == other.name
            && self.model == other.model
            && self.states == other.states
            && self.groups == other.groups
            && self.group_members == other.group_members
            && self.target_of == other.target_of
            && self.rules.len() == other.rules.len()
            && self.rules.iter().all(|r| other.rules.contains(r))
    }
}

/// Incremental builder used by both the DSL parser and the programmatic
/// protocol constructors.
pub struct SpecBuilder {
    name: String,
    model: Model,
    states: Vec<String>,
    state_ix: HashMap<String, StateId>,
    groups: Vec<String>,
    group_ix: HashMap<String, GroupId>,
    group_members: Vec<Vec<StateId>>,
    targets: Vec<Option<GroupId>>,
    duplicate_targets: Vec<StateId>,
    rules: Vec<Rule>,
}

impl SpecBuilder {
    pub fn new(name: impl Into<String>, model: Model) -> Self {
        SpecBuilder {
            name: name.into(),
            model,
            states: Vec::new(),
            state_ix: HashMap::new(),
            groups: Vec::new(),
            group_ix: HashMap::new(),
            group_members: Vec::new(),
            targets: Vec::new(),
            duplicate_targets: Vec::new(),
            rules: Vec::new(),
        }
    }

    pub fn model(&self) -> Model {
        self.model
    }

    /// Declare a state. Re-declaring an existing name is an error surfaced at
    /// `build` time.
    pub fn state(&mut self, name: impl Into<String>) -> StateId {
        let name = name.into();
        if let Some(&id) = self.state_ix.get(&name) {
            // remembered; build() reports the duplicate
            self.states.push(name);
            self.targets.push(None);
            return id;
        }
        let id = StateId(self.states.len() as u16);
        self.state_ix.insert(name.clone(), id);
        self.states.push(name);
        self.targets.push(None);
        id
    }

    pub fn states<const N: usize>(&mut self, names: [&str; N]) -> [StateId; N] {
        names.map(|n| self.state(n))
    }

    pub fn lookup_state(&self, name: &str) -> Option<StateId> {
        self.state_ix.get(name).copied()
    }

    pub fn lookup_group(&self, name: &str) -> Option<GroupId> {
        self.group_ix.get(name).copied()
    }

    pub fn group(&mut self, name: impl Into<String>, members: &[StateId]) -> GroupId {
        let name = name.into();
        let id = GroupId(self.groups.len() as u16);
        if !self.group_ix.contains_key(&name) {
            self.group_ix.insert(name.clone(), id);
        }
        self.groups.push(name);
        self.group_members.push(members.to_vec());
        id
    }

    pub fn target(&mut self, s: StateId, g: GroupId) {
        let slot = &mut self.targets[s.0 as usize];
        if slot.is_some() && *slot != Some(g) {
            self.duplicate_targets.push(s);
        }
        *slot = Some(g);
    }

    /// Meaningful rule without a guard.
    pub fn rule(&mut self, init: StateId, resp: StateId, init_out: StateId, resp_out: StateId) {
        self.rules.push(Rule {
            initiator: init,
            responder: Responder::State(resp),
            guard: Guard::None,
            initiator_out: init_out,
            responder_out: Some(resp_out),
        });
    }

    /// Meaningful rule with a key-comparison guard.
    pub fn rule_if(
        &mut self,
        guard: Guard,
        init: StateId,
        resp: StateId,
        init_out: StateId,
        resp_out: StateId,
    ) {
        self.rules.push(Rule {
            initiator: init,
            responder: Responder::State(resp),
            guard,
            initiator_out: init_out,
            responder_out: Some(resp_out),
        });
    }

    /// Null rule fired by an emptiness or singleton test.
    pub fn null_rule(&mut self, init: StateId, init_out: StateId) {
        self.rules.push(Rule {
            initiator: init,
            responder: Responder::Null,
            guard: Guard::None,
            initiator_out: init_out,
            responder_out: None,
        });
    }

    pub fn push_rule(&mut self, rule: Rule) {
        self.rules.push(rule);
    }

    pub fn build(self) -> Result<ProtocolSpec, SpecError> {
        let n = self.states.len();
        if n == 0 {
            return Err(SpecError::NoStates);
        }
        // unique, non-reserved names
        {
            let mut seen = HashMap::new();
            for (i, name) in self.states.iter().enumerate() {
                if name == "null" {
                    return Err(SpecError::ReservedName(name.clone()));
                }
                if seen.insert(name.clone(), i).is_some() {
                    return Err(SpecError::DuplicateState(name.clone()));
                }
            }
            let mut seen = HashMap::new();
            for (i, name) in self.groups.iter().enumerate() {
                if name == "null" {
                    return Err(SpecError::ReservedName(name.clone()));
                }
                if seen.insert(name.clone(), i).is_some() {
                    return Err(SpecError::DuplicateGroup(name.clone()));
                }
            }
        }

        let mut group_of = vec![GroupId(0); n];
        let mut target_of = vec![GroupId(0); n];
        match self.model {
            Model::Selective => {
                if self.groups.is_empty() {
                    return Err(SpecError::NoGroups);
                }
                // partition check from the membership lists
                let mut owner: Vec<Option<GroupId>> = vec![None; n];
                for (gi, members) in self.group_members.iter().enumerate() {
                    for &s in members {
                        let slot = &mut owner[s.0 as usize];
                        if slot.is_some() {
                            return Err(SpecError::OverlappingGroups(
                                self.states[s.0 as usize].clone(),
                            ));
                        }
                        *slot = Some(GroupId(gi as u16));
                    }
                }
                for (i, o) in owner.iter().enumerate() {
                    match o {
                        Some(g) => group_of[i] = *g,
                        None => return Err(SpecError::UncoveredState(self.states[i].clone())),
                    }
                }
                if let Some(d) = self.duplicate_targets.first() {
                    return Err(SpecError::DuplicateTarget(
                        self.states[d.0 as usize].clone(),
                    ));
                }
                for (i, t) in self.targets.iter().enumerate() {
                    match t {
                        Some(g) => target_of[i] = *g,
                        None => return Err(SpecError::MissingTarget(self.states[i].clone())),
                    }
                }
            }
            Model::Standard => {
                if !self.groups.is_empty() {
                    return Err(SpecError::GroupsInStandardModel);
                }
            }
        }

        // rule checks and match tables
        let mut unguarded = vec![None; n * n];
        let mut less = vec![None; n * n];
        let mut greater = vec![None; n * n];
        let mut null_rule = vec![None; n];
        let mut comparison = false;
        for (ri, rule) in self.rules.iter().enumerate() {
            if rule.guard != Guard::None {
                comparison = true;
            }
            match rule.responder {
                Responder::Null => {
                    if self.model == Model::Standard {
                        return Err(SpecError::NullRuleInStandardModel(ri));
                    }
                    if rule.guard != Guard::None {
                        return Err(SpecError::GuardedNullRule(ri));
                    }
                    let slot = &mut null_rule[rule.initiator.0 as usize];
                    if let Some(prev) = *slot {
                        return Err(SpecError::DuplicateNullRule(
                            prev as usize,
                            ri,
                            self.states[rule.initiator.0 as usize].clone(),
                        ));
                    }
                    *slot = Some(ri as u32);
                }
                Responder::State(resp) => {
                    if self.model == Model::Selective {
                        let tgt = target_of[rule.initiator.0 as usize];
                        if group_of[resp.0 as usize] != tgt {
                            return Err(SpecError::RulePatternOutsideTargetGroup(
                                ri,
                                self.states[resp.0 as usize].clone(),
                                self.states[rule.initiator.0 as usize].clone(),
                            ));
                        }
                    }
                    let ix = rule.initiator.0 as usize * n + resp.0 as usize;
                    let conflict = |prev: u32| {
                        SpecError::DuplicateRuleMatch(
                            prev as usize,
                            ri,
                            self.states[rule.initiator.0 as usize].clone(),
                            self.states[resp.0 as usize].clone(),
                            match rule.guard {
                                Guard::None => "any comparison",
                                Guard::Less => "initiator key smaller",
                                Guard::Greater => "initiator key greater",
                            },
                        )
                    };
                    match rule.guard {
                        Guard::None => {
                            for t in [&unguarded[ix], &less[ix], &greater[ix]] {
                                if let Some(prev) = t {
                                    return Err(conflict(*prev));
                                }
                            }
                            unguarded[ix] = Some(ri as u32);
                        }
                        Guard::Less => {
                            for t in [&unguarded[ix], &less[ix]] {
                                if let Some(prev) = t {
                                    return Err(conflict(*prev));
                                }
                            }
                            less[ix] = Some(ri as u32);
                        }
                        Guard::Greater => {
                            for t in [&unguarded[ix], &greater[ix]] {
                                if let Some(prev) = t {
                                    return Err(conflict(*prev));
                                }
                            }
                            greater[ix] = Some(ri as u32);
                        }
                    }
                }
            }
        }

        Ok(ProtocolSpec {
            name: self.name,
            model: self.model,
            states: self.states,
            groups: self.groups,
            group_members: self.group_members,
            group_of,
            target_of,
            rules: self.rules,
            comparison_model: comparison,
            unguarded,
            less,
            greater,
            null_rule,
        })
    }
}

/// Severity of a [`Diagnostic`].
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum Severity {
    Error,
    Warning,
}

/// Finding reported by [`validate`].
#[derive(Clone, Debug)]
pub struct Diagnostic {
    pub severity: Severity,
    pub code: &'static str,
    pub message: String,
}

/// Re-check the structural invariants of a built spec and report warnings the
/// builder does not reject: states that may face an emptiness or singleton
/// test without declaring a null rule.
pub fn validate(spec: &ProtocolSpec) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    if spec.model() == Model::Selective {
        for s in spec.states() {
            if spec.null_rule_of(s).is_some() {
                continue;
            }
            let has_meaningful = spec
                .rules()
                .iter()
                .any(|r| r.initiator == s && !r.is_null());
            let in_own_target = spec.group_of(s) == spec.target_of(s);
            if has_meaningful || in_own_target {
                out.push(Diagnostic {
                    severity: Severity::Warning,
                    code: "MissingNullRule",
                    message: format!(
                        "state `{}` may face an {} test on `{}` but declares no null rule",
                        spec.state_name(s),
                        if in_own_target { "emptiness/singleton" } else { "emptiness" },
                        spec.group_name(spec.target_of(s)),
                    ),
                });
            }
        }
        // re-check: responder patterns inside the initiator's target group
        for (ri, rule) in spec.rules().iter().enumerate() {
            if let Responder::State(resp) = rule.responder {
                if spec.group_of(resp) != spec.target_of(rule.initiator) {
                    out.push(Diagnostic {
                        severity: Severity::Error,
                        code: "RulePatternOutsideTargetGroup",
                        message: format!(
                            "rule {} can never fire: responder `{}` is not in the target group of `{}`",
                            ri,
                            spec.state_name(resp),
                            spec.state_name(rule.initiator),
                        ),
                    });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

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
    fn builds_epidemic() {
        let spec = epidemic();
        assert_eq!(spec.n_states(), 3);
        assert_eq!(spec.n_groups(), 3);
        assert_eq!(spec.rules().len(), 3);
        assert!(!spec.comparison_model());
        let one = spec.state_named("1").unwrap();
        let zero = spec.state_named("0").unwrap();
        assert_eq!(spec.match_pair(one, zero, None), Some(0));
        assert_eq!(spec.match_pair(zero, one, None), None);
        assert_eq!(spec.null_rule_of(one), Some(1));
    }

    #[test]
    fn uncovered_state_rejected() {
        let mut b = SpecBuilder::new("bad", Model::Selective);
        let [zero, one] = b.states(["0", "1"]);
        let g1 = b.group("G1", &[one]);
        b.target(zero, g1);
        b.target(one, g1);
        assert_eq!(b.build(), Err(SpecError::UncoveredState("0".into())));
    }

    #[test]
    fn overlapping_groups_rejected() {
        let mut b = SpecBuilder::new("bad", Model::Selective);
        let [zero] = b.states(["0"]);
        let g0 = b.group("A", &[zero]);
        b.group("B", &[zero]);
        b.target(zero, g0);
        assert_eq!(b.build(), Err(SpecError::OverlappingGroups("0".into())));
    }

    #[test]
    fn pattern_outside_target_group_rejected() {
        let mut b = SpecBuilder::new("bad", Model::Selective);
        let [a, x, y] = b.states(["a", "x", "y"]);
        let ga = b.group("GA", &[a]);
        let gx = b.group("GX", &[x]);
        let gy = b.group("GY", &[y]);
        b.target(a, gx);
        b.target(x, ga);
        b.target(y, gy);
        b.rule(a, y, a, y); // y is not in a's target group GX
        assert!(matches!(
            b.build(),
            Err(SpecError::RulePatternOutsideTargetGroup(0, _, _))
        ));
    }

    #[test]
    fn duplicate_match_rejected() {
        let mut b = SpecBuilder::new("bad", Model::Standard);
        let [a, c] = b.states(["a", "c"]);
        b.rule(a, a, a, c);
        b.rule_if(Guard::Less, a, a, c, a); // overlaps the unguarded rule
        assert!(matches!(b.build(), Err(SpecError::DuplicateRuleMatch(0, 1, ..))));
    }

    #[test]
    fn standard_model_rejects_null_rules_and_groups() {
        let mut b = SpecBuilder::new("bad", Model::Standard);
        let [a] = b.states(["a"]);
        b.null_rule(a, a);
        assert_eq!(b.build(), Err(SpecError::NullRuleInStandardModel(0)));

        let mut b = SpecBuilder::new("bad", Model::Standard);
        let [a] = b.states(["a"]);
        b.group("G", &[a]);
        assert_eq!(b.build(), Err(SpecError::GroupsInStandardModel));
    }

    #[test]
    fn guarded_rules_set_comparison_model() {
        let mut b = SpecBuilder::new("median", Model::Standard);
        let [n, l, u] = b.states(["N", "L", "U"]);
        b.rule_if(Guard::Less, n, n, l, u);
        b.rule_if(Guard::Greater, n, n, u, l);
        let spec = b.build().unwrap();
        assert!(spec.comparison_model());
        assert_eq!(spec.match_pair(n, n, Some(true)), Some(0));
        assert_eq!(spec.match_pair(n, n, Some(false)), Some(1));
        assert_eq!(spec.match_pair(l, u, Some(true)), None);
    }

    #[test]
    fn validate_flags_missing_null_rule() {
        // epidemic with the informer's null rule removed
        let mut b = SpecBuilder::new("epidemic", Model::Selective);
        let [zero, one, stop] = b.states(["0", "1", "Stop"]);
        let g0 = b.group("G0", &[zero]);
        let g1 = b.group("G1", &[one]);
        let gs = b.group("GS", &[stop]);
        b.target(zero, g1);
        b.target(one, g0);
        b.target(stop, gs);
        b.rule(one, zero, one, one);
        b.null_rule(stop, stop);
        let spec = b.build().unwrap();
        let diags = validate(&spec);
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].code, "MissingNullRule");
        assert!(diags[0].message.contains("`1`"));
    }

    #[test]
    fn validate_clean_on_epidemic() {
        assert!(validate(&epidemic()).is_empty());
    }
}
