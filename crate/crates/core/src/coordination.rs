//! Neighbor-to-neighbor message bus with round barriers.
//!
//! Agents only talk through an [`AgentPort`], which refuses traffic on
//! channels that are not edges of the coupling graph and counts every
//! attempt. Work is organised in phases: every agent runs the phase body,
//! posts its messages, and then meets the others at a barrier that also
//! AND-reduces one boolean per agent (used for the joint stopping test).
//!
//! In [`SchedulerMode::Deterministic`] the phase bodies run one after the
//! other in agent order on the calling thread. In
//! [`SchedulerMode::Parallel`] each agent runs on its own scoped thread and
//! the barrier blocks. Every agent reads only its own state and its inbox,
//! and inboxes are FIFO per channel, so both modes produce bit-identical
//! results.

use std::collections::{BTreeMap, VecDeque};
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::CouplingGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerMode {
    #[default]
    Deterministic,
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    StaticGradient,
    StaticPrimal,
    OcpGradient,
    OcpState,
}

/// Round label; ordered by MPC step first, then by iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct RoundTag {
    pub step: u64,
    pub iteration: u64,
}

impl RoundTag {
    pub fn new(step: u64, iteration: u64) -> Self {
        Self { step, iteration }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub from: usize,
    pub to: usize,
    pub tag: RoundTag,
    pub kind: PayloadKind,
    pub data: Vec<f64>,
    /// Scalars charged to the channel; see the counting convention of the
    /// payload producer.
    pub floats: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BusError {
    #[error("agents {from} and {to} are not neighbors")]
    NotNeighbors { from: usize, to: usize },
    #[error("stale round on channel {from}->{to}: {got:?} after {last:?}")]
    StaleRound { from: usize, to: usize, last: RoundTag, got: RoundTag },
    #[error("agent {agent} timed out at the barrier after {waited:?}")]
    Timeout { agent: usize, waited: Duration },
    #[error("barrier released with agents missing: {missing:?}")]
    MissingParticipants { missing: Vec<usize> },
    #[error("no {kind:?} message waiting on channel {from}->{to}")]
    MissingMessage { from: usize, to: usize, kind: PayloadKind },
    #[error("expected {expected:?} at {tag:?} on channel {from}->{to}, found {found:?} at {found_tag:?}")]
    Unexpected {
        from: usize,
        to: usize,
        expected: PayloadKind,
        tag: RoundTag,
        found: PayloadKind,
        found_tag: RoundTag,
    },
    #[error("bus aborted by a failing agent")]
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub from: usize,
    pub to: usize,
    pub msgs: usize,
    pub floats: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BusStats {
    /// Floats posted during each step, summed over all channels.
    pub per_step_floats: Vec<usize>,
    pub total_floats: usize,
    /// Completed barriers.
    pub rounds: usize,
    pub channels: Vec<ChannelStats>,
}

impl BusStats {
    pub fn channel(&self, from: usize, to: usize) -> Option<&ChannelStats> {
        self.channels.iter().find(|c| c.from == from && c.to == to)
    }
}

#[derive(Default)]
struct Channel {
    queue: VecDeque<Envelope>,
    last: Option<RoundTag>,
    msgs: usize,
    floats: usize,
    collected: usize,
}

struct BarrierState {
    generation: u64,
    arrived: Vec<bool>,
    flag: bool,
    result: bool,
}

struct State {
    channels: BTreeMap<(usize, usize), Channel>,
    barrier: BarrierState,
    step: usize,
    step_floats: Vec<usize>,
    rounds: usize,
    violations: usize,
    aborted: bool,
}

pub struct MessageBus {
    graph: CouplingGraph,
    mode: SchedulerMode,
    timeout: Duration,
    state: Mutex<State>,
    cv: Condvar,
}

impl MessageBus {
    pub fn new(graph: CouplingGraph, mode: SchedulerMode) -> Self {
        let channels = graph
            .directed_channels()
            .into_iter()
            .map(|c| (c, Channel::default()))
            .collect();
        let m = graph.agent_count();
        Self {
            graph,
            mode,
            timeout: Duration::from_secs(30),
            state: Mutex::new(State {
                channels,
                barrier: BarrierState { generation: 0, arrived: vec![false; m], flag: true, result: true },
                step: 0,
                step_floats: vec![0],
                rounds: 0,
                violations: 0,
                aborted: false,
            }),
            cv: Condvar::new(),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn graph(&self) -> &CouplingGraph {
        &self.graph
    }

    pub fn mode(&self) -> SchedulerMode {
        self.mode
    }

    pub fn port(&self, agent: usize) -> AgentPort<'_> {
        AgentPort { bus: self, agent }
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Starts accounting for a new step (e.g. one MPC sample).
    pub fn begin_step(&self, step: usize) {
        let mut st = self.lock();
        st.step = step;
        if st.step_floats.len() <= step {
            st.step_floats.resize(step + 1, 0);
        }
    }

    pub fn post(&self, env: Envelope) -> Result<(), BusError> {
        let mut st = self.lock();
        if st.aborted {
            return Err(BusError::Aborted);
        }
        if !self.graph.are_neighbors(env.from, env.to) {
            st.violations += 1;
            return Err(BusError::NotNeighbors { from: env.from, to: env.to });
        }
        let step = st.step;
        let ch = st.channels.get_mut(&(env.from, env.to)).expect("channel exists for every edge");
        if let Some(last) = ch.last {
            if env.tag < last {
                return Err(BusError::StaleRound { from: env.from, to: env.to, last, got: env.tag });
            }
        }
        ch.last = Some(env.tag);
        ch.msgs += 1;
        ch.floats += env.floats;
        let floats = env.floats;
        ch.queue.push_back(env);
        st.step_floats[step] += floats;
        Ok(())
    }

    /// Pops the oldest message on `from -> to`, which must match `kind` and `tag`.
    pub fn receive(&self, from: usize, to: usize, kind: PayloadKind, tag: RoundTag) -> Result<Vec<f64>, BusError> {
        let mut st = self.lock();
        if !self.graph.are_neighbors(from, to) {
            st.violations += 1;
            return Err(BusError::NotNeighbors { from, to });
        }
        let ch = st.channels.get_mut(&(from, to)).expect("channel exists for every edge");
        let Some(front) = ch.queue.front() else {
            return Err(BusError::MissingMessage { from, to, kind });
        };
        if front.kind != kind || front.tag != tag {
            return Err(BusError::Unexpected {
                from,
                to,
                expected: kind,
                tag,
                found: front.kind,
                found_tag: front.tag,
            });
        }
        let env = ch.queue.pop_front().expect("front checked above");
        ch.collected += env.floats;
        Ok(env.data)
    }

    /// Records arrival of `agent`. In parallel mode blocks until every agent
    /// has arrived and returns the AND of all flags; in deterministic mode
    /// returns `None` and the driver calls [`MessageBus::release`].
    pub fn barrier(&self, agent: usize, flag: bool) -> Result<Option<bool>, BusError> {
        let mut st = self.lock();
        if st.aborted {
            return Err(BusError::Aborted);
        }
        st.barrier.arrived[agent] = true;
        st.barrier.flag &= flag;
        if self.mode == SchedulerMode::Deterministic {
            return Ok(None);
        }
        if st.barrier.arrived.iter().all(|&a| a) {
            let result = Self::complete(&mut st);
            self.cv.notify_all();
            return Ok(Some(result));
        }
        let generation = st.barrier.generation;
        let start = Instant::now();
        loop {
            let left = self.timeout.saturating_sub(start.elapsed());
            if left.is_zero() {
                st.barrier.arrived[agent] = false;
                return Err(BusError::Timeout { agent, waited: start.elapsed() });
            }
            let (guard, _) = self.cv.wait_timeout(st, left).unwrap_or_else(|e| e.into_inner());
            st = guard;
            if st.aborted {
                return Err(BusError::Aborted);
            }
            if st.barrier.generation != generation {
                return Ok(Some(st.barrier.result));
            }
        }
    }

    /// Deterministic-mode release: fails if some agent did not arrive.
    pub fn release(&self) -> Result<bool, BusError> {
        let mut st = self.lock();
        let missing: Vec<usize> = st
            .barrier
            .arrived
            .iter()
            .enumerate()
            .filter(|(_, &a)| !a)
            .map(|(i, _)| i)
            .collect();
        if !missing.is_empty() {
            return Err(BusError::MissingParticipants { missing });
        }
        Ok(Self::complete(&mut st))
    }

    fn complete(st: &mut State) -> bool {
        let result = st.barrier.flag;
        st.barrier.result = result;
        st.barrier.flag = true;
        st.barrier.arrived.iter_mut().for_each(|a| *a = false);
        st.barrier.generation += 1;
        st.rounds += 1;
        result
    }

    /// Wakes every waiting agent with [`BusError::Aborted`].
    pub fn abort(&self) {
        self.lock().aborted = true;
        self.cv.notify_all();
    }

    pub fn audit_violations(&self) -> usize {
        self.lock().violations
    }

    /// Floats posted minus floats collected, summed over channels.
    pub fn in_flight_floats(&self) -> usize {
        self.lock().channels.values().map(|c| c.floats - c.collected).sum()
    }

    pub fn stats(&self) -> BusStats {
        let st = self.lock();
        let channels: Vec<ChannelStats> = st
            .channels
            .iter()
            .map(|(&(from, to), c)| ChannelStats { from, to, msgs: c.msgs, floats: c.floats })
            .collect();
        BusStats {
            per_step_floats: st.step_floats.clone(),
            total_floats: channels.iter().map(|c| c.floats).sum(),
            rounds: st.rounds,
            channels,
        }
    }
}

/// Agent-scoped handle onto the bus.
pub struct AgentPort<'a> {
    bus: &'a MessageBus,
    agent: usize,
}

impl AgentPort<'_> {
    pub fn agent(&self) -> usize {
        self.agent
    }

    pub fn neighbors(&self) -> &[usize] {
        self.bus.graph.neighbors(self.agent)
    }

    pub fn post(&self, to: usize, tag: RoundTag, kind: PayloadKind, data: Vec<f64>, floats: usize) -> Result<(), BusError> {
        self.bus.post(Envelope { from: self.agent, to, tag, kind, data, floats })
    }

    pub fn receive(&self, from: usize, kind: PayloadKind, tag: RoundTag) -> Result<Vec<f64>, BusError> {
        self.bus.receive(from, self.agent, kind, tag)
    }
}

/// Runs one phase for every agent and meets at the barrier.
///
/// Returns the AND of the flags returned by the phase bodies. In parallel
/// mode the first error (by agent index) is returned after all threads
/// finish.
pub fn run_phase<S, E, F>(bus: &MessageBus, states: &mut [S], body: F) -> Result<bool, E>
where
    S: Send,
    E: From<BusError> + Send,
    F: Fn(usize, &mut S, &AgentPort<'_>) -> Result<bool, E> + Sync,
{
    match bus.mode {
        SchedulerMode::Deterministic => {
            for (i, s) in states.iter_mut().enumerate() {
                let flag = body(i, s, &bus.port(i))?;
                bus.barrier(i, flag)?;
            }
            Ok(bus.release()?)
        }
        SchedulerMode::Parallel => {
            let results: Vec<Result<bool, (E, bool)>> = std::thread::scope(|scope| {
                let handles: Vec<_> = states
                    .iter_mut()
                    .enumerate()
                    .map(|(i, s)| {
                        let body = &body;
                        scope.spawn(move || {
                            let port = bus.port(i);
                            match body(i, s, &port) {
                                Ok(flag) => match bus.barrier(i, flag) {
                                    Ok(r) => Ok(r.unwrap_or(flag)),
                                    Err(e) => Err((E::from(e), false)),
                                },
                                Err(e) => {
                                    bus.abort();
                                    Err((e, true))
                                }
                            }
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("agent thread panicked"))
                    .collect()
            });
            let mut flag = true;
            let mut root = None;
            let mut secondary = None;
            for r in results {
                match r {
                    Ok(f) => flag &= f,
                    Err((e, true)) if root.is_none() => root = Some(e),
                    Err((e, _)) if secondary.is_none() => secondary = Some(e),
                    Err(_) => {}
                }
            }
            match root.or(secondary) {
                Some(e) => Err(e),
                None => Ok(flag),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(mode: SchedulerMode) -> MessageBus {
        MessageBus::new(CouplingGraph::path(2).unwrap(), mode)
    }

    #[test]
    fn fifo_delivery_and_accounting() {
        let bus = pair(SchedulerMode::Deterministic);
        let p0 = bus.port(0);
        let tag = RoundTag::new(0, 1);
        p0.post(1, tag, PayloadKind::StaticGradient, vec![1.0, 2.0], 2).unwrap();
        p0.post(1, tag, PayloadKind::StaticPrimal, vec![3.0], 1).unwrap();
        let p1 = bus.port(1);
        assert_eq!(p1.receive(0, PayloadKind::StaticGradient, tag).unwrap(), vec![1.0, 2.0]);
        assert_eq!(p1.receive(0, PayloadKind::StaticPrimal, tag).unwrap(), vec![3.0]);
        let stats = bus.stats();
        assert_eq!(stats.total_floats, 3);
        assert_eq!(stats.channel(0, 1).unwrap().msgs, 2);
        assert_eq!(bus.in_flight_floats(), 0);
    }

    #[test]
    fn non_neighbor_traffic_is_refused_and_audited() {
        let bus = MessageBus::new(CouplingGraph::path(3).unwrap(), SchedulerMode::Deterministic);
        let err = bus.port(0).post(2, RoundTag::default(), PayloadKind::OcpState, vec![], 0);
        assert_eq!(err, Err(BusError::NotNeighbors { from: 0, to: 2 }));
        assert!(bus.port(2).receive(0, PayloadKind::OcpState, RoundTag::default()).is_err());
        assert_eq!(bus.audit_violations(), 2);
    }

    #[test]
    fn stale_round_rejected() {
        let bus = pair(SchedulerMode::Deterministic);
        let p = bus.port(0);
        p.post(1, RoundTag::new(0, 5), PayloadKind::StaticPrimal, vec![], 0).unwrap();
        let err = p.post(1, RoundTag::new(0, 4), PayloadKind::StaticPrimal, vec![], 0);
        assert!(matches!(err, Err(BusError::StaleRound { .. })));
    }

    #[test]
    fn parallel_barrier_releases_both() {
        let bus = pair(SchedulerMode::Parallel);
        let mut states = vec![true, false];
        let all = run_phase::<_, BusError, _>(&bus, &mut states, |_, s, _| Ok(*s)).unwrap();
        assert!(!all);
        assert_eq!(bus.stats().rounds, 1);
    }

    #[test]
    fn parallel_barrier_times_out_when_agent_missing() {
        let bus = pair(SchedulerMode::Parallel).with_timeout(Duration::from_millis(50));
        let err = bus.barrier(0, true).unwrap_err();
        assert!(matches!(err, BusError::Timeout { agent: 0, .. }));
    }

    #[test]
    fn deterministic_release_detects_missing_agent() {
        let bus = pair(SchedulerMode::Deterministic);
        bus.barrier(1, true).unwrap();
        assert_eq!(bus.release(), Err(BusError::MissingParticipants { missing: vec![0] }));
    }
}
