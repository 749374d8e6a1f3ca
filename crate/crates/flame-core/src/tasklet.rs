//! Composable, editable chains of execution units.
//!
//! A worker's behavior is a linear chain of tasklets, optionally with one
//! loop span that repeats until an exit predicate holds. Chains stay
//! editable after composition: tasklets are addressed by alias and can be
//! inserted, replaced or removed, which is how derived role programs adjust
//! an inherited workflow without re-chaining it.

use std::ops::ControlFlow;
use std::time::Instant;

use thiserror::Error;

pub type TaskResult = Result<(), Box<dyn std::error::Error + Send + Sync>>;

#[derive(Debug, Error)]
pub enum TaskletError {
    #[error("duplicate tasklet alias '{0}'")]
    DuplicateAlias(String),
    #[error("unknown tasklet alias '{0}'")]
    UnknownAlias(String),
    #[error("loops cannot nest (span '{0}'..'{1}' already contains one)")]
    NestedLoop(String, String),
    #[error("tasklet '{alias}' failed: {cause}")]
    TaskFailure {
        alias: String,
        #[source]
        cause: Box<dyn std::error::Error + Send + Sync>,
    },
}

/// One named execution unit over the worker state `S`.
pub struct Tasklet<S> {
    alias: String,
    body: Box<dyn FnMut(&mut S) -> TaskResult + Send>,
}

impl<S> Tasklet<S> {
    pub fn new(
        alias: impl Into<String>,
        body: impl FnMut(&mut S) -> TaskResult + Send + 'static,
    ) -> Self {
        Tasklet {
            alias: alias.into(),
            body: Box::new(body),
        }
    }

    pub fn alias(&self) -> &str {
        &self.alias
    }
}

impl<S> std::fmt::Debug for Tasklet<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tasklet").field("alias", &self.alias).finish()
    }
}

/// A loop over a contiguous subrange of the chain. The exit predicate is
/// evaluated after each full pass over the span, so the span always runs at
/// least once.
struct LoopSpan<S> {
    start: String,
    end: String,
    exit_when: Box<dyn FnMut(&S) -> bool + Send>,
}

/// An ordered, editable sequence of tasklets with optional loop spans.
pub struct TaskletChain<S> {
    tasklets: Vec<Tasklet<S>>,
    loops: Vec<LoopSpan<S>>,
}

/// One executed tasklet: alias, loop iteration (1 outside loops) and wall
/// duration.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub alias: String,
    pub iteration: u32,
    pub duration_ms: f64,
}

impl<S> std::fmt::Debug for TaskletChain<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TaskletChain")
            .field("aliases", &self.aliases())
            .finish()
    }
}

impl<S> Default for TaskletChain<S> {
    fn default() -> Self {
        TaskletChain {
            tasklets: Vec::new(),
            loops: Vec::new(),
        }
    }
}

/// Anything that can stand on either side of [`chain`].
pub trait IntoChain<S> {
    fn into_chain(self) -> TaskletChain<S>;
}

impl<S> IntoChain<S> for Tasklet<S> {
    fn into_chain(self) -> TaskletChain<S> {
        TaskletChain {
            tasklets: vec![self],
            loops: Vec::new(),
        }
    }
}

impl<S> IntoChain<S> for TaskletChain<S> {
    fn into_chain(self) -> TaskletChain<S> {
        self
    }
}

/// Sequences `b` after `a`. Associative; fails on alias collision.
pub fn chain<S>(
    a: impl IntoChain<S>,
    b: impl IntoChain<S>,
) -> Result<TaskletChain<S>, TaskletError> {
    let mut left = a.into_chain();
    let right = b.into_chain();
    for t in &right.tasklets {
        if left.position(&t.alias).is_some() {
            return Err(TaskletError::DuplicateAlias(t.alias.clone()));
        }
    }
    left.tasklets.extend(right.tasklets);
    left.loops.extend(right.loops);
    Ok(left)
}

/// Wraps a whole chain in a loop that repeats until `exit_when` returns
/// true, checked after each pass. Nested loops are rejected.
pub fn wrap_loop<S>(
    exit_when: impl FnMut(&S) -> bool + Send + 'static,
    span: impl IntoChain<S>,
) -> Result<TaskletChain<S>, TaskletError> {
    let mut span = span.into_chain();
    if let Some(inner) = span.loops.first() {
        return Err(TaskletError::NestedLoop(
            inner.start.clone(),
            inner.end.clone(),
        ));
    }
    if span.tasklets.is_empty() {
        return Ok(span);
    }
    let start = span.tasklets.first().unwrap().alias.clone();
    let end = span.tasklets.last().unwrap().alias.clone();
    span.loops.push(LoopSpan {
        start,
        end,
        exit_when: Box::new(exit_when),
    });
    Ok(span)
}

impl<S> TaskletChain<S> {
    fn position(&self, alias: &str) -> Option<usize> {
        self.tasklets.iter().position(|t| t.alias == alias)
    }

    pub fn aliases(&self) -> Vec<&str> {
        self.tasklets.iter().map(|t| t.alias.as_str()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.tasklets.is_empty()
    }

    /// Returns the tasklet of `alias`.
    pub fn get_tasklet(&self, alias: &str) -> Result<&Tasklet<S>, TaskletError> {
        self.tasklets
            .iter()
            .find(|t| t.alias == alias)
            .ok_or_else(|| TaskletError::UnknownAlias(alias.to_string()))
    }

    /// The loop span enclosing `alias`, if any, as (start, end) aliases.
    pub fn loop_of(&self, alias: &str) -> Option<(&str, &str)> {
        let idx = self.position(alias)?;
        for span in &self.loops {
            let start = self.position(&span.start)?;
            let end = self.position(&span.end)?;
            if idx >= start && idx <= end {
                return Some((&span.start, &span.end));
            }
        }
        None
    }

    fn check_fresh_alias(&self, alias: &str) -> Result<(), TaskletError> {
        if self.position(alias).is_some() {
            return Err(TaskletError::DuplicateAlias(alias.to_string()));
        }
        Ok(())
    }

    /// Inserts `new` immediately before `target`. If `target` starts a loop
    /// span, `new` joins the loop and becomes its first tasklet.
    pub fn insert_before(&mut self, target: &str, new: Tasklet<S>) -> Result<(), TaskletError> {
        self.check_fresh_alias(&new.alias)?;
        let idx = self
            .position(target)
            .ok_or_else(|| TaskletError::UnknownAlias(target.to_string()))?;
        for span in &mut self.loops {
            if span.start == target {
                span.start = new.alias.clone();
            }
        }
        self.tasklets.insert(idx, new);
        Ok(())
    }

    /// Inserts `new` immediately after `target`. If `target` ends a loop
    /// span, `new` joins the loop and becomes its last tasklet.
    pub fn insert_after(&mut self, target: &str, new: Tasklet<S>) -> Result<(), TaskletError> {
        self.check_fresh_alias(&new.alias)?;
        let idx = self
            .position(target)
            .ok_or_else(|| TaskletError::UnknownAlias(target.to_string()))?;
        for span in &mut self.loops {
            if span.end == target {
                span.end = new.alias.clone();
            }
        }
        self.tasklets.insert(idx + 1, new);
        Ok(())
    }

    /// Replaces `target` in place, keeping its chain position and loop
    /// membership.
    pub fn replace_with(&mut self, target: &str, new: Tasklet<S>) -> Result<(), TaskletError> {
        if new.alias != target {
            self.check_fresh_alias(&new.alias)?;
        }
        let idx = self
            .position(target)
            .ok_or_else(|| TaskletError::UnknownAlias(target.to_string()))?;
        for span in &mut self.loops {
            if span.start == target {
                span.start = new.alias.clone();
            }
            if span.end == target {
                span.end = new.alias.clone();
            }
        }
        self.tasklets[idx] = new;
        Ok(())
    }

    /// Removes `target`, preserving the adjacency of its neighbors. Loop
    /// boundaries shrink inward; a loop whose last tasklet is removed
    /// disappears.
    pub fn remove(&mut self, target: &str) -> Result<(), TaskletError> {
        let idx = self
            .position(target)
            .ok_or_else(|| TaskletError::UnknownAlias(target.to_string()))?;
        let mut drop_spans = Vec::new();
        for (span_idx, span) in self.loops.iter_mut().enumerate() {
            if span.start == target && span.end == target {
                drop_spans.push(span_idx);
            } else if span.start == target {
                span.start = self.tasklets[idx + 1].alias.clone();
            } else if span.end == target {
                span.end = self.tasklets[idx - 1].alias.clone();
            }
        }
        for span_idx in drop_spans.into_iter().rev() {
            self.loops.remove(span_idx);
        }
        self.tasklets.remove(idx);
        Ok(())
    }

    /// Executes the chain in order, honoring loop spans. The first body
    /// error aborts the run as `TaskFailure` carrying the alias.
    pub fn run(&mut self, state: &mut S) -> Result<Vec<TraceEntry>, TaskletError> {
        self.run_observed(state, |_| ControlFlow::Continue(()))
    }

    /// Like [`run`](Self::run) but invokes `observe` after every tasklet;
    /// returning `Break` stops the run at that tasklet boundary.
    pub fn run_observed(
        &mut self,
        state: &mut S,
        mut observe: impl FnMut(&TraceEntry) -> ControlFlow<()>,
    ) -> Result<Vec<TraceEntry>, TaskletError> {
        let mut trace = Vec::new();
        let mut idx = 0usize;
        while idx < self.tasklets.len() {
            let span_pos = self
                .loops
                .iter()
                .position(|s| self.tasklets[idx].alias == s.start);
            match span_pos {
                None => {
                    if self
                        .exec(idx, 1, &mut trace, state, &mut observe)?
                        .is_break()
                    {
                        return Ok(trace);
                    }
                    idx += 1;
                }
                Some(span_pos) => {
                    let end_alias = self.loops[span_pos].end.clone();
                    let end_idx = self
                        .position(&end_alias)
                        .expect("loop end alias present in chain");
                    let mut iteration = 0u32;
                    loop {
                        iteration += 1;
                        for j in idx..=end_idx {
                            if self
                                .exec(j, iteration, &mut trace, state, &mut observe)?
                                .is_break()
                            {
                                return Ok(trace);
                            }
                        }
                        if (self.loops[span_pos].exit_when)(state) {
                            break;
                        }
                    }
                    idx = end_idx + 1;
                }
            }
        }
        Ok(trace)
    }

    fn exec(
        &mut self,
        idx: usize,
        iteration: u32,
        trace: &mut Vec<TraceEntry>,
        state: &mut S,
        observe: &mut impl FnMut(&TraceEntry) -> ControlFlow<()>,
    ) -> Result<ControlFlow<()>, TaskletError> {
        let started = Instant::now();
        let tasklet = &mut self.tasklets[idx];
        (tasklet.body)(state).map_err(|cause| TaskletError::TaskFailure {
            alias: tasklet.alias.clone(),
            cause,
        })?;
        let entry = TraceEntry {
            alias: tasklet.alias.clone(),
            iteration,
            duration_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        let flow = observe(&entry);
        trace.push(entry);
        Ok(flow)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Default)]
    struct State {
        log: Vec<String>,
        counter: u32,
        work_done: bool,
    }

    fn record(alias: &str) -> Tasklet<State> {
        let name = alias.to_string();
        Tasklet::new(alias, move |s: &mut State| {
            s.log.push(name.clone());
            Ok(())
        })
    }

    fn aliases_of(trace: &[TraceEntry]) -> Vec<&str> {
        trace.iter().map(|e| e.alias.as_str()).collect()
    }

    #[test]
    fn chained_tasklets_run_in_order() {
        let mut c = chain(chain(record("load"), record("init")).unwrap(), record("train")).unwrap();
        let mut s = State::default();
        let trace = c.run(&mut s).unwrap();
        assert_eq!(s.log, vec!["load", "init", "train"]);
        assert_eq!(aliases_of(&trace), vec!["load", "init", "train"]);
    }

    #[test]
    fn chain_is_associative() {
        let left = chain(chain(record("a"), record("b")).unwrap(), record("c")).unwrap();
        let right = chain(record("a"), chain(record("b"), record("c")).unwrap()).unwrap();
        assert_eq!(left.aliases(), right.aliases());
    }

    #[test]
    fn single_tasklet_chain_runs_once() {
        let mut c = record("only").into_chain();
        let mut s = State::default();
        c.run(&mut s).unwrap();
        assert_eq!(s.log, vec!["only"]);
    }

    #[test]
    fn chaining_duplicate_alias_fails() {
        let err = chain(record("x"), record("x")).unwrap_err();
        assert!(matches!(err, TaskletError::DuplicateAlias(a) if a == "x"));
    }

    #[test]
    fn loop_with_immediate_exit_runs_span_once() {
        let span = chain(record("work"), record("check")).unwrap();
        let mut c = wrap_loop(|_s: &State| true, span).unwrap();
        let mut s = State::default();
        c.run(&mut s).unwrap();
        assert_eq!(s.log, vec!["work", "check"]);
    }

    #[test]
    fn counter_predicate_runs_span_three_times() {
        let bump = Tasklet::new("bump", |s: &mut State| {
            s.counter += 1;
            Ok(())
        });
        let span = chain(record("work"), bump).unwrap();
        let mut c = wrap_loop(|s: &State| s.counter >= 3, span).unwrap();
        let mut s = State::default();
        let trace = c.run(&mut s).unwrap();
        assert_eq!(s.counter, 3);
        assert_eq!(
            aliases_of(&trace),
            vec!["work", "bump", "work", "bump", "work", "bump"]
        );
        assert_eq!(trace.last().unwrap().iteration, 3);
    }

    #[test]
    fn loop_predicate_sees_tasklet_mutations() {
        let set_done = Tasklet::new("set_done", |s: &mut State| {
            s.work_done = true;
            Ok(())
        });
        let mut c = wrap_loop(|s: &State| s.work_done, set_done.into_chain()).unwrap();
        let mut s = State::default();
        c.run(&mut s).unwrap();
        assert!(s.work_done);
    }

    #[test]
    fn nested_loops_are_rejected() {
        let inner = wrap_loop(|_s: &State| true, record("a").into_chain()).unwrap();
        let err = wrap_loop(|_s: &State| true, inner).unwrap_err();
        assert!(matches!(err, TaskletError::NestedLoop(..)));
    }

    #[test]
    fn get_tasklet_and_unknown_alias() {
        let mut c = chain(record("gather"), record("distribute")).unwrap();
        assert_eq!(c.get_tasklet("distribute").unwrap().alias(), "distribute");
        assert!(matches!(
            c.get_tasklet("nope"),
            Err(TaskletError::UnknownAlias(_))
        ));
        c.remove("distribute").unwrap();
        assert!(matches!(
            c.get_tasklet("distribute"),
            Err(TaskletError::UnknownAlias(_))
        ));
    }

    #[test]
    fn insert_before_loop_start_joins_the_loop() {
        let span = chain(record("distribute"), record("gather")).unwrap();
        let mut c = chain(
            record("init"),
            wrap_loop(|s: &State| s.counter >= 1, span).unwrap(),
        )
        .unwrap();
        c.insert_before("distribute", record("get_coord_ends")).unwrap();
        assert_eq!(
            c.aliases(),
            vec!["init", "get_coord_ends", "distribute", "gather"]
        );
        assert_eq!(c.loop_of("get_coord_ends"), Some(("get_coord_ends", "gather")));

        let bump = Tasklet::new("bump", |s: &mut State| {
            s.counter += 1;
            Ok(())
        });
        c.insert_after("gather", bump).unwrap();
        assert_eq!(c.loop_of("bump"), Some(("get_coord_ends", "bump")));

        let mut s = State::default();
        let trace = c.run(&mut s).unwrap();
        assert_eq!(
            aliases_of(&trace),
            vec!["init", "get_coord_ends", "distribute", "gather", "bump"]
        );
    }

    #[test]
    fn remove_excises_and_preserves_adjacency() {
        let mut c = chain(
            chain(record("a"), record("end_of_train")).unwrap(),
            record("b"),
        )
        .unwrap();
        c.remove("end_of_train").unwrap();
        let mut s = State::default();
        c.run(&mut s).unwrap();
        assert_eq!(s.log, vec!["a", "b"]);
    }

    #[test]
    fn replace_with_at_head() {
        let mut c = chain(record("old_head"), record("tail")).unwrap();
        c.replace_with("old_head", record("new_head")).unwrap();
        assert_eq!(c.aliases(), vec!["new_head", "tail"]);
    }

    #[test]
    fn trainer_shaped_trace_with_two_rounds() {
        let round = Tasklet::new("put", |s: &mut State| {
            s.log.push("put".into());
            s.counter += 1;
            Ok(())
        });
        let span = chain(
            chain(chain(record("get"), record("train")).unwrap(), record("evaluate")).unwrap(),
            round,
        )
        .unwrap();
        let looped = wrap_loop(|s: &State| s.counter >= 2, span).unwrap();
        let mut c = chain(chain(record("load"), record("init")).unwrap(), looped).unwrap();
        let mut s = State::default();
        let trace = c.run(&mut s).unwrap();
        assert_eq!(
            aliases_of(&trace),
            vec![
                "load", "init", "get", "train", "evaluate", "put", "get", "train", "evaluate",
                "put"
            ]
        );
    }

    #[test]
    fn empty_chain_is_a_noop() {
        let mut c = TaskletChain::<State>::default();
        let trace = c.run(&mut State::default()).unwrap();
        assert!(trace.is_empty());
    }

    #[test]
    fn body_error_surfaces_as_task_failure_with_alias() {
        let failing = Tasklet::new("explode", |_s: &mut State| {
            Err("boom".to_string().into())
        });
        let mut c = chain(record("ok"), failing).unwrap();
        let err = c.run(&mut State::default()).unwrap_err();
        match err {
            TaskletError::TaskFailure { alias, .. } => assert_eq!(alias, "explode"),
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn observer_break_stops_at_tasklet_boundary() {
        let mut c = chain(chain(record("a"), record("b")).unwrap(), record("c")).unwrap();
        let mut s = State::default();
        let trace = c
            .run_observed(&mut s, |entry| {
                if entry.alias == "b" {
                    ControlFlow::Break(())
                } else {
                    ControlFlow::Continue(())
                }
            })
            .unwrap();
        assert_eq!(s.log, vec!["a", "b"]);
        assert_eq!(trace.len(), 2);
    }

    #[test]
    fn edited_chain_equals_chain_built_from_scratch() {
        // Start from an inherited shape, apply alias-addressed edits, and
        // compare the execution trace with a chain built directly.
        let span = chain(record("distribute"), record("gather")).unwrap();
        let mut inherited = chain(
            chain(
                record("init"),
                wrap_loop(|s: &State| s.counter >= 1, span).unwrap(),
            )
            .unwrap(),
            record("end_of_train"),
        )
        .unwrap();
        inherited
            .insert_before("distribute", record("get_coord_ends"))
            .unwrap();
        inherited.remove("end_of_train").unwrap();
        let bump = Tasklet::new("bump", |s: &mut State| {
            s.counter += 1;
            Ok(())
        });
        inherited.insert_after("gather", bump).unwrap();

        let scratch_span = chain(
            chain(record("get_coord_ends"), record("distribute")).unwrap(),
            chain(
                record("gather"),
                Tasklet::new("bump", |s: &mut State| {
                    s.counter += 1;
                    Ok(())
                }),
            )
            .unwrap(),
        )
        .unwrap();
        let mut scratch = chain(
            record("init"),
            wrap_loop(|s: &State| s.counter >= 1, scratch_span).unwrap(),
        )
        .unwrap();

        let mut s1 = State::default();
        let mut s2 = State::default();
        let t1 = inherited.run(&mut s1).unwrap();
        let t2 = scratch.run(&mut s2).unwrap();
        assert_eq!(aliases_of(&t1), aliases_of(&t2));
        assert_eq!(s1.log, s2.log);
    }
}
