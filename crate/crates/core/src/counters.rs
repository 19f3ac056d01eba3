//! Instrumentation counters backing the reuse contracts: flow pairs are
//! estimated once per adjacent frame pair, the temporal stage never runs for
//! frames that exist in the input, and pseudo-label selection evaluates
//! exactly two candidates per patch.
//!
//! Counters are thread-local: a pipeline run increments only on its own
//! thread, so concurrent runs cannot pollute each other's readings.

use std::cell::Cell;

thread_local! {
    static FLOW_PAIRS: Cell<usize> = const { Cell::new(0) };
    static TEMPORAL: Cell<usize> = const { Cell::new(0) };
    static PSEUDO_EVALS: Cell<usize> = const { Cell::new(0) };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Counter {
    /// Adjacent-pair flow estimations (both directions count as one).
    FlowPairEstimations,
    /// Invocations of the temporal feature interpolation.
    TemporalInterpolations,
    /// Candidate patches scored during pseudo-label selection.
    PseudoCandidateEvals,
}

pub static FLOW_PAIR_ESTIMATIONS: Counter = Counter::FlowPairEstimations;
pub static TEMPORAL_INTERPOLATIONS: Counter = Counter::TemporalInterpolations;
pub static PSEUDO_CANDIDATE_EVALS: Counter = Counter::PseudoCandidateEvals;

fn cell_of<R>(counter: &Counter, f: impl FnOnce(&Cell<usize>) -> R) -> R {
    match counter {
        Counter::FlowPairEstimations => FLOW_PAIRS.with(f),
        Counter::TemporalInterpolations => TEMPORAL.with(f),
        Counter::PseudoCandidateEvals => PSEUDO_EVALS.with(f),
    }
}

pub fn bump(counter: &Counter, by: usize) {
    cell_of(counter, |c| c.set(c.get() + by));
}

pub fn read(counter: &Counter) -> usize {
    cell_of(counter, |c| c.get())
}

pub fn reset_all() {
    FLOW_PAIRS.with(|c| c.set(0));
    TEMPORAL.with(|c| c.set(0));
    PSEUDO_EVALS.with(|c| c.set(0));
}
