//! Model parameters, transition schemas and the transient state space.
//!
//! The classic SIS chain is the `k_stages = 1` case of the staged (Erlang)
//! model: infection moves a susceptible into stage 1, stage `m` advances to
//! stage `m + 1` at rate `k γ` per individual, and stage `k` recovers at rate
//! `k γ` per individual.

use crate::error::{Error, Result};

/// Infection rate, recovery rate, population size and number of infectious
/// stages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    pub beta: f64,
    pub gamma: f64,
    pub n_pop: u32,
    pub k_stages: u32,
}

impl ModelParams {
    /// `beta = 0` is accepted as the pure-recovery limit.
    pub fn new(beta: f64, gamma: f64, n_pop: u32, k_stages: u32) -> Result<Self> {
        if !(beta.is_finite() && beta >= 0.0) {
            return Err(Error::InvalidArgument(format!("beta must be >= 0, got {beta}")));
        }
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::InvalidArgument(format!("gamma must be > 0, got {gamma}")));
        }
        if n_pop == 0 {
            return Err(Error::InvalidArgument("population size must be >= 1".into()));
        }
        if k_stages == 0 {
            return Err(Error::InvalidArgument("stage count must be >= 1".into()));
        }
        Ok(Self { beta, gamma, n_pop, k_stages })
    }

    /// Classic SIS model (one infectious stage).
    pub fn sis(beta: f64, gamma: f64, n_pop: u32) -> Result<Self> {
        Self::new(beta, gamma, n_pop, 1)
    }

    pub fn r0(&self) -> f64 {
        self.beta / self.gamma
    }

    pub fn n(&self) -> f64 {
        f64::from(self.n_pop)
    }

    pub fn k(&self) -> usize {
        self.k_stages as usize
    }

    /// Same model with a different population size.
    pub fn with_n(&self, n_pop: u32) -> Result<Self> {
        Self::new(self.beta, self.gamma, n_pop, self.k_stages)
    }

    /// Total endemic infective fraction `1 - 1/R0`.
    ///
    /// At `R0 = 1` the endemic point merges with the disease-free one and
    /// zero is returned; below threshold there is no endemic equilibrium.
    pub fn endemic_fraction(&self) -> Result<f64> {
        let r0 = self.r0();
        if r0 < 1.0 {
            return Err(Error::NoEndemicEquilibrium { r0 });
        }
        Ok(1.0 - 1.0 / r0)
    }

    /// Endemic equilibrium per stage, `(1 - 1/R0) / k` in every component.
    pub fn endemic_state(&self) -> Result<Vec<f64>> {
        let y = self.endemic_fraction()?;
        Ok(vec![y / self.k_stages as f64; self.k()])
    }
}

/// `(R0, y*)` for the given parameters.
pub fn r0_and_equilibria(params: &ModelParams) -> Result<(f64, Vec<f64>)> {
    Ok((params.r0(), params.endemic_state()?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    /// A susceptible enters stage 1.
    Infection,
    /// An individual moves from stage `from` to `from + 1` (0-based).
    Progression { from: usize },
    /// An individual in the last stage recovers.
    Recovery,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub kind: EventKind,
    pub delta: Vec<i32>,
}

/// Jump events of the staged SIS chain with their rate functions.
#[derive(Debug, Clone)]
pub struct TransitionSchema {
    params: ModelParams,
    events: Vec<Event>,
}

impl TransitionSchema {
    pub fn new(params: &ModelParams) -> Self {
        let k = params.k();
        let mut events = Vec::with_capacity(k + 1);
        let mut delta = vec![0; k];
        delta[0] = 1;
        events.push(Event { kind: EventKind::Infection, delta });
        for from in 0..k - 1 {
            let mut delta = vec![0; k];
            delta[from] = -1;
            delta[from + 1] = 1;
            events.push(Event { kind: EventKind::Progression { from }, delta });
        }
        let mut delta = vec![0; k];
        delta[k - 1] = -1;
        events.push(Event { kind: EventKind::Recovery, delta });
        Self { params: *params, events }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    /// Rate of event `idx` in `state` (counts per stage).
    pub fn rate(&self, idx: usize, state: &[u32]) -> f64 {
        let p = &self.params;
        let stage_rate = p.k_stages as f64 * p.gamma;
        match self.events[idx].kind {
            EventKind::Infection => {
                let total: f64 = state.iter().map(|&c| f64::from(c)).sum();
                (p.beta / p.n()) * total * (p.n() - total)
            }
            EventKind::Progression { from } => stage_rate * f64::from(state[from]),
            EventKind::Recovery => stage_rate * f64::from(state[p.k() - 1]),
        }
    }

    /// Writes every event rate into `out` and returns their sum.
    pub fn rates_into(&self, state: &[u32], out: &mut [f64]) -> f64 {
        let mut total = 0.0;
        for (i, slot) in out.iter_mut().enumerate().take(self.events.len()) {
            *slot = self.rate(i, state);
            total += *slot;
        }
        total
    }

    pub fn total_rate(&self, state: &[u32]) -> f64 {
        (0..self.events.len()).map(|i| self.rate(i, state)).sum()
    }
}

/// Binomial coefficient; exact while the result fits in `u128`.
pub(crate) fn binom(n: u64, r: u64) -> u128 {
    if r > n {
        return 0;
    }
    let r = r.min(n - r);
    let mut acc: u128 = 1;
    for i in 0..r {
        acc = acc * u128::from(n - i) / u128::from(i + 1);
    }
    acc
}

/// Indexer over the transient states `{i in Z+^k : sum(i) <= N, i != 0}`.
///
/// States are ordered colexicographically: the last stage count is the most
/// significant key and the first stage count the least significant. For
/// `k = 1` index `j` is the state with `j + 1` infectives. For `k = 2` the
/// order is `(1,0), (2,0), .., (N,0), (0,1), (1,1), .., (N-1,1), (0,2), ..`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateSpace {
    n_pop: u32,
    k_stages: u32,
    size: usize,
}

impl StateSpace {
    pub fn new(n_pop: u32, k_stages: u32) -> Result<Self> {
        if n_pop == 0 || k_stages == 0 {
            return Err(Error::InvalidArgument("state space needs N >= 1 and k >= 1".into()));
        }
        let full = binom(u64::from(n_pop) + u64::from(k_stages), u64::from(k_stages));
        let size = usize::try_from(full - 1)
            .map_err(|_| Error::InvalidArgument("state space too large to index".into()))?;
        Ok(Self { n_pop, k_stages, size })
    }

    pub fn for_params(params: &ModelParams) -> Result<Self> {
        Self::new(params.n_pop, params.k_stages)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn k(&self) -> usize {
        self.k_stages as usize
    }

    pub fn n_pop(&self) -> u32 {
        self.n_pop
    }

    /// Whether `state` is a transient state of this space.
    pub fn contains(&self, state: &[u32]) -> bool {
        state.len() == self.k()
            && state.iter().map(|&c| u64::from(c)).sum::<u64>() <= u64::from(self.n_pop)
            && state.iter().any(|&c| c > 0)
    }

    pub fn rank(&self, state: &[u32]) -> Result<usize> {
        if !self.contains(state) {
            return Err(Error::InvalidArgument(format!(
                "{state:?} is not a transient state for N = {}, k = {}",
                self.n_pop, self.k_stages
            )));
        }
        Ok(self.rank_unchecked(state))
    }

    /// Rank of a state already known to be transient.
    pub(crate) fn rank_unchecked(&self, state: &[u32]) -> usize {
        let mut rem = u64::from(self.n_pop);
        let mut r: u128 = 0;
        for m in (1..self.k()).rev() {
            let c = u64::from(state[m]);
            let m = m as u64;
            // tuples whose stage-m count is below c
            r += binom(rem + m + 1, m + 1) - binom(rem - c + m + 1, m + 1);
            rem -= c;
        }
        r += u128::from(state[0]);
        (r - 1) as usize
    }

    pub fn unrank(&self, index: usize) -> Result<Vec<u32>> {
        if index >= self.size {
            return Err(Error::InvalidArgument(format!(
                "index {index} out of range for a state space of size {}",
                self.size
            )));
        }
        let mut state = vec![0u32; self.k()];
        self.unrank_into(index, &mut state);
        Ok(state)
    }

    pub(crate) fn unrank_into(&self, index: usize, state: &mut [u32]) {
        let mut r = index as u128 + 1;
        let mut rem = u64::from(self.n_pop);
        for m in (1..self.k()).rev() {
            let mm = m as u64;
            let below = |c: u64| binom(rem + mm + 1, mm + 1) - binom(rem - c + mm + 1, mm + 1);
            let mut c = 0;
            while c < rem && below(c + 1) <= r {
                c += 1;
            }
            r -= below(c);
            state[m] = c as u32;
            rem -= c;
        }
        state[0] = r as u32;
    }

    /// All transient states in index order.
    pub fn states(&self) -> impl Iterator<Item = Vec<u32>> + '_ {
        (0..self.size).map(move |j| {
            let mut s = vec![0; self.k()];
            self.unrank_into(j, &mut s);
            s
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn enumerate(n: u32, k: usize) -> Vec<Vec<u32>> {
        let mut out = Vec::new();
        let mut cur = vec![0u32; k];
        fn rec(n: u32, m: usize, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
            if m == cur.len() {
                if cur.iter().sum::<u32>() <= n && cur.iter().any(|&c| c > 0) {
                    out.push(cur.clone());
                }
                return;
            }
            for c in 0..=n {
                cur[m] = c;
                rec(n, m + 1, cur, out);
            }
        }
        rec(n, 0, &mut cur, &mut out);
        out
    }

    #[test]
    fn equilibria_examples() {
        let p = ModelParams::sis(1.1, 1.0, 100).unwrap();
        let (r0, y) = r0_and_equilibria(&p).unwrap();
        assert!((r0 - 1.1).abs() < 1e-15);
        assert!((y[0] - 0.0909).abs() < 1e-4);

        let p = ModelParams::new(1.5, 1.0, 100, 2).unwrap();
        let (_, y) = r0_and_equilibria(&p).unwrap();
        assert_eq!(y.len(), 2);
        assert!((y[0] - 0.1667).abs() < 1e-4 && (y[1] - 0.1667).abs() < 1e-4);

        let p = ModelParams::sis(0.7, 0.7, 10).unwrap();
        let (r0, y) = r0_and_equilibria(&p).unwrap();
        assert_eq!(r0, 1.0);
        assert_eq!(y, vec![0.0]);

        let p = ModelParams::sis(0.5, 1.0, 10).unwrap();
        assert!(matches!(p.endemic_state(), Err(Error::NoEndemicEquilibrium { .. })));
    }

    #[test]
    fn rejects_invalid_params() {
        assert!(ModelParams::new(1.0, 0.0, 10, 1).is_err());
        assert!(ModelParams::new(-1.0, 1.0, 10, 1).is_err());
        assert!(ModelParams::new(1.0, 1.0, 0, 1).is_err());
        assert!(ModelParams::new(1.0, 1.0, 10, 0).is_err());
        assert!(ModelParams::new(f64::NAN, 1.0, 10, 1).is_err());
    }

    #[test]
    fn state_space_sizes() {
        assert_eq!(StateSpace::new(2, 2).unwrap().size(), 5);
        assert_eq!(StateSpace::new(100, 1).unwrap().size(), 100);
        for n in 1..=10 {
            for k in 1..=4 {
                let ss = StateSpace::new(n, k).unwrap();
                assert_eq!(ss.size(), enumerate(n, k as usize).len(), "N={n} k={k}");
            }
        }
    }

    #[test]
    fn colex_order_matches_documentation() {
        let ss = StateSpace::new(2, 2).unwrap();
        let states: Vec<_> = ss.states().collect();
        assert_eq!(states, vec![vec![1, 0], vec![2, 0], vec![0, 1], vec![1, 1], vec![0, 2]]);
        for (j, s) in states.iter().enumerate() {
            assert_eq!(ss.rank(s).unwrap(), j);
        }
        let ss = StateSpace::new(5, 1).unwrap();
        assert_eq!(ss.unrank(0).unwrap(), vec![1]);
        assert_eq!(ss.rank(&[5]).unwrap(), 4);
    }

    #[test]
    fn rank_rejects_out_of_domain() {
        let ss = StateSpace::new(3, 2).unwrap();
        assert!(ss.rank(&[0, 0]).is_err());
        assert!(ss.rank(&[2, 2]).is_err());
        assert!(ss.rank(&[1]).is_err());
        assert!(ss.unrank(ss.size()).is_err());
    }

    #[test]
    fn enumeration_is_the_index_order() {
        for n in 1..=6 {
            for k in 1..=4usize {
                let ss = StateSpace::new(n, k as u32).unwrap();
                let mut brute = enumerate(n, k);
                // colex: compare from the last coordinate
                brute.sort_by(|a, b| a.iter().rev().cmp(b.iter().rev()));
                let ours: Vec<_> = ss.states().collect();
                assert_eq!(ours, brute);
            }
        }
    }

    #[test]
    fn schema_matches_rate_tables() {
        let p = ModelParams::sis(0.8, 1.0, 10).unwrap();
        let s = TransitionSchema::new(&p);
        assert_eq!(s.events().len(), 2);
        assert_eq!(s.events()[0].delta, vec![1]);
        assert_eq!(s.events()[1].delta, vec![-1]);
        assert!((s.rate(0, &[3]) - 0.08 * 3.0 * 7.0).abs() < 1e-14);
        assert!((s.rate(1, &[3]) - 3.0).abs() < 1e-14);
        assert_eq!(s.total_rate(&[0]), 0.0);

        let p = ModelParams::new(1.5, 1.0, 20, 3).unwrap();
        let s = TransitionSchema::new(&p);
        assert_eq!(s.events().len(), 4);
        assert_eq!(s.events()[1].delta, vec![-1, 1, 0]);
        assert_eq!(s.events()[2].delta, vec![0, -1, 1]);
        assert_eq!(s.events()[3].delta, vec![0, 0, -1]);
        let st = [2, 1, 4];
        assert!((s.rate(0, &st) - 1.5 / 20.0 * 7.0 * 13.0).abs() < 1e-12);
        assert!((s.rate(1, &st) - 3.0 * 2.0).abs() < 1e-12);
        assert!((s.rate(2, &st) - 3.0 * 1.0).abs() < 1e-12);
        assert!((s.rate(3, &st) - 3.0 * 4.0).abs() < 1e-12);
        assert_eq!(s.total_rate(&[0, 0, 0]), 0.0);
    }

    #[test]
    fn outgoing_rate_vanishes_only_at_origin() {
        let p = ModelParams::new(1.2, 0.9, 6, 3).unwrap();
        let ss = StateSpace::for_params(&p).unwrap();
        let s = TransitionSchema::new(&p);
        for st in ss.states() {
            let r = s.total_rate(&st);
            assert!(r.is_finite() && r > 0.0);
        }
    }

    proptest! {
        #[test]
        fn rank_unrank_roundtrip(n in 1u32..40, k in 1u32..5, seed in 0usize..1_000_000) {
            let ss = StateSpace::new(n, k).unwrap();
            let j = seed % ss.size();
            let s = ss.unrank(j).unwrap();
            prop_assert!(ss.contains(&s));
            prop_assert_eq!(ss.rank(&s).unwrap(), j);
        }
    }
}
