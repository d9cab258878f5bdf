//! Phase-transition graphs with per-phase duration bounds, and the
//! synthesis of procedure-consistent label sequences from them.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::LabelSequence;
use crate::error::{Result, SpaError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseNode {
    pub id: usize,
    pub name: String,
    pub min_duration: usize,
    pub max_duration: usize,
    #[serde(default)]
    pub start: bool,
    #[serde(default)]
    pub terminal: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GraphDocument {
    phases: Vec<PhaseNode>,
    edges: Vec<[usize; 2]>,
    #[serde(default = "default_time_unit")]
    time_unit: String,
}

fn default_time_unit() -> String {
    "frames".into()
}

/// A validated task graph. Phases are indexed by id, `0..K`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskGraph {
    phases: Vec<PhaseNode>,
    edges: BTreeSet<(usize, usize)>,
    successors: Vec<Vec<usize>>,
    time_unit: String,
}

/// How phase durations are drawn during synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionModel {
    /// Draw a whole segment duration uniformly from `[min, max]`, then jump.
    #[default]
    Segment,
    /// Decide per frame: forced stay below `min`, forced exit at `max`,
    /// uniform over {stay} and the successors in between.
    PerStep,
}

impl TaskGraph {
    pub fn parse(text: &str) -> Result<Self> {
        let doc: GraphDocument = serde_json::from_str(text)?;
        Self::from_parts(doc.phases, doc.edges.iter().map(|e| (e[0], e[1])).collect(), doc.time_unit)
    }

    pub fn from_parts(mut phases: Vec<PhaseNode>, edges: Vec<(usize, usize)>, time_unit: String) -> Result<Self> {
        let k = phases.len();
        if k == 0 {
            return Err(SpaError::InvalidGraph("no phases".into()));
        }
        phases.sort_by_key(|p| p.id);
        for (i, p) in phases.iter().enumerate() {
            if p.id != i {
                return Err(SpaError::InvalidGraph(format!("phase ids must be exactly 0..{k}")));
            }
            if p.min_duration == 0 || p.min_duration > p.max_duration {
                return Err(SpaError::DurationOrderViolation {
                    phase: p.id,
                    min: p.min_duration,
                    max: p.max_duration,
                });
            }
        }
        let mut edge_set = BTreeSet::new();
        for &(from, to) in &edges {
            if from >= k || to >= k {
                return Err(SpaError::UnknownNodeInEdge { from, to });
            }
            edge_set.insert((from, to));
        }
        // Self-loops are legal in the schema but are not successor choices.
        let mut successors = vec![Vec::new(); k];
        for &(from, to) in &edge_set {
            if from != to {
                successors[from].push(to);
            }
        }
        let starts: Vec<usize> = phases.iter().filter(|p| p.start).map(|p| p.id).collect();
        if starts.is_empty() {
            return Err(SpaError::NoStartPhase);
        }
        for p in &phases {
            if !p.terminal && successors[p.id].is_empty() {
                return Err(SpaError::DeadEndPhase { phase: p.id });
            }
        }
        for &start in &starts {
            let mut seen = vec![false; k];
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            let mut found = false;
            while let Some(node) = queue.pop_front() {
                if phases[node].terminal {
                    found = true;
                    break;
                }
                for &next in &successors[node] {
                    if !seen[next] {
                        seen[next] = true;
                        queue.push_back(next);
                    }
                }
            }
            if !found {
                return Err(SpaError::UnreachableTerminal { start });
            }
        }
        Ok(Self { phases, edges: edge_set, successors, time_unit })
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = GraphDocument {
            phases: self.phases.clone(),
            edges: self.edges.iter().map(|&(a, b)| [a, b]).collect(),
            time_unit: self.time_unit.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn k(&self) -> usize {
        self.phases.len()
    }

    pub fn phases(&self) -> &[PhaseNode] {
        &self.phases
    }

    pub fn phase(&self, id: usize) -> &PhaseNode {
        &self.phases[id]
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.edges.contains(&(from, to))
    }

    /// Successor choices of `id`, self-loops excluded.
    pub fn successors(&self, id: usize) -> &[usize] {
        &self.successors[id]
    }

    pub fn start_phases(&self) -> Vec<usize> {
        self.phases.iter().filter(|p| p.start).map(|p| p.id).collect()
    }

    pub fn time_unit(&self) -> &str {
        &self.time_unit
    }

    fn min_start_duration(&self) -> usize {
        self.phases.iter().filter(|p| p.start).map(|p| p.min_duration).min().unwrap_or(1)
    }

    /// Samples one sequence of at most `max_len` frames.
    pub fn synthesize_sequence<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        max_len: usize,
        model: TransitionModel,
    ) -> Result<PhaseSequence> {
        let needed = self.min_start_duration();
        if max_len < needed {
            return Err(SpaError::MaxLenTooSmall { max_len, needed });
        }
        let starts = self.start_phases();
        let mut phase = *starts.choose(rng).expect("validated graph has a start phase");
        let mut labels = Vec::new();
        match model {
            TransitionModel::Segment => loop {
                let node = &self.phases[phase];
                let duration = rng.random_range(node.min_duration..=node.max_duration);
                let emit = duration.min(max_len - labels.len());
                labels.extend(std::iter::repeat_n(phase, emit));
                if labels.len() >= max_len || node.terminal {
                    break;
                }
                phase = *self.successors[phase].choose(rng).expect("non-terminal has successors");
            },
            TransitionModel::PerStep => {
                let mut dwell = 0;
                while labels.len() < max_len {
                    labels.push(phase);
                    dwell += 1;
                    let node = &self.phases[phase];
                    if dwell < node.min_duration {
                        continue;
                    }
                    // Options: stay (index 0, only below max), then each successor;
                    // a terminal phase treats halting as one more successor.
                    let succ = &self.successors[phase];
                    let halt = usize::from(node.terminal);
                    let stay = usize::from(dwell < node.max_duration);
                    let options = stay + succ.len() + halt;
                    let pick = rng.random_range(0..options);
                    if pick < stay {
                        continue;
                    }
                    let pick = pick - stay;
                    if pick == succ.len() {
                        break;
                    }
                    phase = succ[pick];
                    dwell = 0;
                }
            }
        }
        Ok(PhaseSequence::from_labels(LabelSequence(labels)))
    }

    /// `n` independent sequences; sequence `i` uses its own generator seeded with `seed + i`.
    pub fn synthesize_dataset(
        &self,
        n: usize,
        seed: u64,
        max_len: usize,
        model: TransitionModel,
    ) -> Result<Vec<PhaseSequence>> {
        (0..n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
                self.synthesize_sequence(&mut rng, max_len, model)
            })
            .collect()
    }

    /// Reports every protocol violation in `s`. Never fails.
    pub fn validate_sequence(&self, s: &PhaseSequence, allow_truncated_tail: bool) -> SequenceCheck {
        let mut violations = Vec::new();
        let k = self.k();
        if let Some((position, &value)) = s.labels().as_slice().iter().enumerate().find(|(_, &v)| v >= k) {
            violations.push(Violation::UnknownPhase { position, phase: value });
            return SequenceCheck { violations };
        }
        let segs = s.segments();
        if let Some(first) = segs.first() {
            if !self.phases[first.phase].start {
                violations.push(Violation::BadStart { phase: self.name(first.phase) });
            }
        }
        for pair in segs.windows(2) {
            if !self.has_edge(pair[0].phase, pair[1].phase) {
                violations.push(Violation::MissingEdge {
                    from: self.name(pair[0].phase),
                    to: self.name(pair[1].phase),
                });
            }
        }
        for (i, seg) in segs.iter().enumerate() {
            let node = &self.phases[seg.phase];
            let tail = i + 1 == segs.len();
            if seg.length < node.min_duration && !(tail && allow_truncated_tail) {
                violations.push(Violation::TooShort {
                    phase: node.name.clone(),
                    length: seg.length,
                    min: node.min_duration,
                });
            }
            if seg.length > node.max_duration {
                violations.push(Violation::TooLong {
                    phase: node.name.clone(),
                    length: seg.length,
                    max: node.max_duration,
                });
            }
        }
        SequenceCheck { violations }
    }

    fn name(&self, id: usize) -> String {
        self.phases[id].name.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub phase: usize,
    pub start: usize,
    pub length: usize,
}

/// A label sequence with its run-length decomposition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseSequence {
    labels: LabelSequence,
    segments: Vec<Segment>,
}

impl PhaseSequence {
    pub fn from_labels(labels: LabelSequence) -> Self {
        let mut segments: Vec<Segment> = Vec::new();
        for (i, &l) in labels.as_slice().iter().enumerate() {
            match segments.last_mut() {
                Some(seg) if seg.phase == l => seg.length += 1,
                _ => segments.push(Segment { phase: l, start: i, length: 1 }),
            }
        }
        Self { labels, segments }
    }

    pub fn labels(&self) -> &LabelSequence {
        &self.labels
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Violation {
    UnknownPhase { position: usize, phase: usize },
    BadStart { phase: String },
    MissingEdge { from: String, to: String },
    TooShort { phase: String, length: usize, min: usize },
    TooLong { phase: String, length: usize, max: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnknownPhase { position, phase } => write!(f, "label {phase} at {position} is not a phase"),
            Violation::BadStart { phase } => write!(f, "sequence starts at non-start phase {phase}"),
            Violation::MissingEdge { from, to } => write!(f, "{from}→{to} not an edge"),
            Violation::TooShort { phase, length, min } => write!(f, "phase {phase} duration {length} < {min}"),
            Violation::TooLong { phase, length, max } => write!(f, "phase {phase} duration {length} > {max}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceCheck {
    pub violations: Vec<Violation>,
}

impl SequenceCheck {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn chain(d: usize) -> TaskGraph {
        TaskGraph::parse(&format!(
            r#"{{"phases":[
                {{"id":0,"name":"A","min_duration":{d},"max_duration":{d},"start":true}},
                {{"id":1,"name":"B","min_duration":{d},"max_duration":{d}}},
                {{"id":2,"name":"C","min_duration":{d},"max_duration":{d},"terminal":true}}],
              "edges":[[0,1],[1,2]],"time_unit":"frames"}}"#
        ))
        .unwrap()
    }

    fn branching() -> TaskGraph {
        TaskGraph::parse(
            r#"{"phases":[
                {"id":0,"name":"A","min_duration":2,"max_duration":4,"start":true},
                {"id":1,"name":"B","min_duration":1,"max_duration":3,"terminal":true},
                {"id":2,"name":"C","min_duration":1,"max_duration":3,"terminal":true}],
              "edges":[[0,1],[0,2],[0,0]]}"#,
        )
        .unwrap()
    }

    #[test]
    fn parses_chain() {
        let g = chain(2);
        assert_eq!(g.k(), 3);
        assert_eq!(g.edges().count(), 2);
        assert_eq!(g.time_unit(), "frames");
    }

    #[test]
    fn rejects_malformed_graphs() {
        let base = |phases: &str, edges: &str| TaskGraph::parse(&format!(r#"{{"phases":[{phases}],"edges":{edges}}}"#));
        let a = r#"{"id":0,"name":"A","min_duration":1,"max_duration":2,"start":true}"#;
        let b = r#"{"id":1,"name":"B","min_duration":1,"max_duration":2}"#;
        let c = r#"{"id":2,"name":"C","min_duration":1,"max_duration":2,"terminal":true}"#;
        assert!(matches!(
            base(&format!("{a},{b},{c}"), "[[0,1],[1,2],[0,9]]"),
            Err(SpaError::UnknownNodeInEdge { from: 0, to: 9 })
        ));
        let bad = r#"{"id":0,"name":"A","min_duration":10,"max_duration":5,"start":true,"terminal":true}"#;
        assert!(matches!(base(bad, "[]"), Err(SpaError::DurationOrderViolation { phase: 0, min: 10, max: 5 })));
        let nostart = r#"{"id":0,"name":"A","min_duration":1,"max_duration":1,"terminal":true}"#;
        assert!(matches!(base(nostart, "[]"), Err(SpaError::NoStartPhase)));
        assert!(matches!(base(&format!("{a},{b},{c}"), "[[0,1]]"), Err(SpaError::DeadEndPhase { phase: 1 })));
        // B and C only loop into each other, never reaching a terminal node.
        let c_loop = r#"{"id":2,"name":"C","min_duration":1,"max_duration":2}"#;
        let t = r#"{"id":3,"name":"T","min_duration":1,"max_duration":2,"terminal":true}"#;
        assert!(matches!(
            base(&format!("{a},{b},{c_loop},{t}"), "[[0,1],[1,2],[2,1]]"),
            Err(SpaError::UnreachableTerminal { start: 0 })
        ));
    }

    #[test]
    fn chain_is_deterministic() {
        let g = chain(2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = g.synthesize_sequence(&mut rng, 100, TransitionModel::Segment).unwrap();
        assert_eq!(s.labels().as_slice(), &[0, 0, 1, 1, 2, 2]);
        assert_eq!(s.segments().len(), 3);
    }

    #[test]
    fn single_node_graph() {
        let g = TaskGraph::parse(
            r#"{"phases":[{"id":0,"name":"A","min_duration":5,"max_duration":5,"start":true,"terminal":true}],"edges":[]}"#,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = g.synthesize_sequence(&mut rng, 50, TransitionModel::Segment).unwrap();
        assert_eq!(s.labels().as_slice(), &[0; 5]);
        assert!(matches!(
            g.synthesize_sequence(&mut rng, 4, TransitionModel::Segment),
            Err(SpaError::MaxLenTooSmall { max_len: 4, needed: 5 })
        ));
    }

    #[test]
    fn truncation_respects_max_len() {
        let g = chain(10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = g.synthesize_sequence(&mut rng, 15, TransitionModel::Segment).unwrap();
        assert_eq!(s.len(), 15);
        assert!(g.validate_sequence(&s, true).is_valid());
        assert!(!g.validate_sequence(&s, false).is_valid());
    }

    #[test]
    fn validity_examples() {
        let g = chain(2);
        let ok = PhaseSequence::from_labels(LabelSequence(vec![0, 0, 1, 1, 2, 2]));
        assert!(g.validate_sequence(&ok, false).is_valid());

        let back = PhaseSequence::from_labels(LabelSequence(vec![0, 1, 0, 1]));
        let check = g.validate_sequence(&back, true);
        assert!(!check.is_valid());
        assert!(check.violations.iter().any(|v| v.to_string() == "B→A not an edge"));

        let short = PhaseSequence::from_labels(LabelSequence(vec![0, 1, 1]));
        let check = g.validate_sequence(&short, true);
        assert!(check.violations.iter().any(|v| v.to_string() == "phase A duration 1 < 2"));

        let late = PhaseSequence::from_labels(LabelSequence(vec![1, 1, 2, 2]));
        assert!(g
            .validate_sequence(&late, true)
            .violations
            .contains(&Violation::BadStart { phase: "B".into() }));
    }

    #[test]
    fn self_loops_do_not_count_as_successors() {
        let g = branching();
        assert!(g.has_edge(0, 0));
        assert_eq!(g.successors(0), &[1, 2]);
    }

    #[test]
    fn dataset_is_seeded() {
        let g = branching();
        assert!(g.synthesize_dataset(0, 0, 20, TransitionModel::Segment).unwrap().is_empty());
        let a = g.synthesize_dataset(50, 3, 20, TransitionModel::Segment).unwrap();
        let b = g.synthesize_dataset(50, 3, 20, TransitionModel::Segment).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn per_step_model_produces_valid_sequences() {
        let g = branching();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let s = g.synthesize_sequence(&mut rng, 40, TransitionModel::PerStep).unwrap();
            assert!(g.validate_sequence(&s, true).is_valid(), "{:?}", s.labels());
        }
    }

    #[test]
    fn round_trips_through_json() {
        let g = branching();
        assert_eq!(TaskGraph::parse(&g.to_json().unwrap()).unwrap(), g);
    }
}
