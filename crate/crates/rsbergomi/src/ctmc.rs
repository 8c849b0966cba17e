//! Continuous-time Markov chain for the regime-switching mean level:
//! simulation, exact path density, state-sequence enumeration, and the
//! stratified importance-sampling machinery built on uniform dwelling times.

use rand::Rng;
use rand_distr::{Distribution, Exp1, Open01};

use crate::error::{Error, Result};

/// Chain definition: state values μ_k, jump intensities q_k, embedded
/// transition probabilities and the initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct CtmcSpec {
    values: Vec<f64>,
    intensities: Vec<f64>,
    transition: Vec<Vec<f64>>,
    initial_state: usize,
}

impl CtmcSpec {
    /// Builds a chain spec. When `transition` is `None` the matrix defaults
    /// to the forced alternation for m = 2 and uniform off-diagonal rows for
    /// m ≥ 3. Rows of absorbing states (q_i = 0) may be all-zero.
    pub fn new(
        values: Vec<f64>,
        intensities: Vec<f64>,
        transition: Option<Vec<Vec<f64>>>,
        initial_state: usize,
    ) -> Result<Self> {
        let m = values.len();
        if m == 0 {
            return Err(Error::domain("CTMC needs at least one state"));
        }
        if intensities.len() != m {
            return Err(Error::domain(format!(
                "CTMC has {m} states but {} intensities",
                intensities.len()
            )));
        }
        if initial_state >= m {
            return Err(Error::domain(format!(
                "initial state {initial_state} out of range for {m} states"
            )));
        }
        for (i, &q) in intensities.iter().enumerate() {
            if !(q >= 0.0) || !q.is_finite() {
                return Err(Error::domain(format!("intensity q_{i} must be >= 0, got {q}")));
            }
        }
        for &v in &values {
            if !v.is_finite() {
                return Err(Error::domain("CTMC state values must be finite"));
            }
        }
        let transition = match transition {
            Some(t) => t,
            None => {
                let mut t = vec![vec![0.0; m]; m];
                if m > 1 {
                    for (i, row) in t.iter_mut().enumerate() {
                        for (j, p) in row.iter_mut().enumerate() {
                            if i != j {
                                *p = 1.0 / (m - 1) as f64;
                            }
                        }
                    }
                }
                t
            }
        };
        if transition.len() != m || transition.iter().any(|r| r.len() != m) {
            return Err(Error::domain("transition matrix must be m x m"));
        }
        for (i, row) in transition.iter().enumerate() {
            if row[i] != 0.0 {
                return Err(Error::domain(format!(
                    "transition matrix must have zero diagonal, row {i}"
                )));
            }
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::domain(format!("transition probabilities in row {i} invalid")));
            }
            let s: f64 = row.iter().sum();
            let absorbing = intensities[i] == 0.0;
            if !absorbing && (s - 1.0).abs() > 1e-12 {
                return Err(Error::domain(format!(
                    "transition row {i} sums to {s}, expected 1"
                )));
            }
            if absorbing && s != 0.0 && (s - 1.0).abs() > 1e-12 {
                return Err(Error::domain(format!(
                    "absorbing row {i} must sum to 0 or 1, got {s}"
                )));
            }
        }
        if m == 2 && (transition[0][1] != 1.0 || transition[1][0] != 1.0) {
            // m = 2 forces alternation unless a state is absorbing.
            if intensities[0] > 0.0 && intensities[1] > 0.0 {
                return Err(Error::domain(
                    "two-state chain must alternate: p12 = p21 = 1",
                ));
            }
        }
        Ok(CtmcSpec { values, intensities, transition, initial_state })
    }

    pub fn two_state(values: [f64; 2], intensities: [f64; 2], initial_state: usize) -> Result<Self> {
        CtmcSpec::new(values.to_vec(), intensities.to_vec(), None, initial_state)
    }

    pub fn n_states(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensities
    }

    pub fn transition(&self) -> &[Vec<f64>] {
        &self.transition
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    pub fn max_intensity(&self) -> f64 {
        self.intensities.iter().cloned().fold(0.0, f64::max)
    }

    /// A copy of this spec started from a different state.
    pub fn with_initial_state(&self, state: usize) -> Result<Self> {
        if state >= self.n_states() {
            return Err(Error::domain(format!("state {state} out of range")));
        }
        let mut s = self.clone();
        s.initial_state = state;
        Ok(s)
    }
}

/// A realized chain path on [0, T]: visited states and the dwelling times of
/// all but the last state. The final dwelling time is implied,
/// t_k = T − Σ t_i.
#[derive(Debug, Clone, PartialEq)]
pub struct CtmcPath {
    pub states: Vec<usize>,
    pub dwell: Vec<f64>,
    pub horizon: f64,
}

impl CtmcPath {
    pub fn new(states: Vec<usize>, dwell: Vec<f64>, horizon: f64) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::domain("CTMC path needs at least the initial state"));
        }
        if dwell.len() + 1 != states.len() {
            return Err(Error::domain(format!(
                "path with {} states needs {} dwelling times, got {}",
                states.len(),
                states.len() - 1,
                dwell.len()
            )));
        }
        if states.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::domain("consecutive path states must differ"));
        }
        if dwell.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::domain("dwelling times must be positive"));
        }
        if dwell.iter().sum::<f64>() >= horizon {
            return Err(Error::domain("dwelling times must sum below the horizon"));
        }
        Ok(CtmcPath { states, dwell, horizon })
    }

    pub fn n_jumps(&self) -> usize {
        self.states.len() - 1
    }

    /// Jump epochs (cumulative dwelling times), strictly inside (0, T).
    pub fn jump_epochs(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.dwell
            .iter()
            .map(|&t| {
                acc += t;
                acc
            })
            .collect()
    }

    /// Dwelling time of the final state.
    pub fn last_dwell(&self) -> f64 {
        self.horizon - self.dwell.iter().sum::<f64>()
    }

    /// Index of the state active at `time`, right-continuous at jump epochs.
    pub fn state_at(&self, time: f64) -> Result<usize> {
        if !(0.0..=self.horizon).contains(&time) {
            return Err(Error::domain(format!(
                "time {time} outside [0, {}]",
                self.horizon
            )));
        }
        let mut acc = 0.0;
        for (i, &t) in self.dwell.iter().enumerate() {
            acc += t;
            if time < acc {
                return Ok(self.states[i]);
            }
        }
        Ok(*self.states.last().unwrap())
    }
}

/// Evaluates μ(time) for a path, i.e. the value of the active state.
pub fn value_at(spec: &CtmcSpec, path: &CtmcPath, time: f64) -> Result<f64> {
    Ok(spec.values[path.state_at(time)?])
}

/// Simulates the chain on [0, T] with exponential clocks.
pub fn sample_path<R: Rng + ?Sized>(spec: &CtmcSpec, horizon: f64, rng: &mut R) -> CtmcPath {
    sample_path_from(spec, spec.initial_state, horizon, rng)
}

/// Simulates the chain on [0, T] conditional on the initial state.
pub fn sample_path_from<R: Rng + ?Sized>(
    spec: &CtmcSpec,
    state: usize,
    horizon: f64,
    rng: &mut R,
) -> CtmcPath {
    let mut states = vec![state];
    let mut dwell = Vec::new();
    let mut t = 0.0;
    let mut s = state;
    loop {
        let q = spec.intensities[s];
        if q == 0.0 {
            break;
        }
        let e: f64 = Exp1.sample(rng);
        let tau = e / q;
        if t + tau >= horizon {
            break;
        }
        t += tau;
        // draw the next state from the embedded transition row
        let u: f64 = Open01.sample(rng);
        let row = &spec.transition[s];
        let mut acc = 0.0;
        let mut next = s;
        for (j, &p) in row.iter().enumerate() {
            acc += p;
            if u <= acc {
                next = j;
                break;
            }
        }
        if next == s {
            // all-zero row; treat as absorbing
            break;
        }
        states.push(next);
        dwell.push(tau);
        s = next;
    }
    CtmcPath { states, dwell, horizon }
}

/// Exact density of (states, dwell) under the chain law:
/// p(s, t) = e^{−q_{s_k} t_k} ∏ p_{s_i, s_{i+1}} q_{s_i} e^{−q_{s_i} t_i},
/// zero when the dwelling times exhaust the horizon.
pub fn path_density(spec: &CtmcSpec, path: &CtmcPath) -> Result<f64> {
    if path.dwell.len() + 1 != path.states.len() {
        return Err(Error::domain("mismatched states/dwell lengths"));
    }
    let spent: f64 = path.dwell.iter().sum();
    if spent >= path.horizon {
        return Ok(0.0);
    }
    let last = *path.states.last().unwrap();
    let mut p = (-spec.intensities[last] * (path.horizon - spent)).exp();
    for (w, &ti) in path.states.windows(2).zip(path.dwell.iter()) {
        let (i, j) = (w[0], w[1]);
        p *= spec.transition[i][j] * spec.intensities[i] * (-spec.intensities[i] * ti).exp();
    }
    Ok(p)
}

/// All state sequences of length k+1 starting at the initial state with
/// nonzero transition probability at each step.
pub fn enumerate_sequences(spec: &CtmcSpec, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut seq = vec![spec.initial_state];
    extend_sequences(spec, k, &mut seq, &mut out);
    out
}

fn extend_sequences(spec: &CtmcSpec, k: usize, seq: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if k == 0 {
        out.push(seq.clone());
        return;
    }
    let s = *seq.last().unwrap();
    if spec.intensities[s] == 0.0 {
        return; // absorbing state cannot jump
    }
    for (j, &p) in spec.transition[s].iter().enumerate() {
        if p > 0.0 && j != s {
            seq.push(j);
            extend_sequences(spec, k - 1, seq, out);
            seq.pop();
        }
    }
}

/// Uniform sample of k dwelling times on A_k = {Σ t_i < T, t_i > 0}, via the
/// flat Dirichlet distribution on the k-simplex scaled by T with the last
/// coordinate dropped. The density is k!/T^k on A_k.
pub fn sample_dwell_uniform<R: Rng + ?Sized>(k: usize, horizon: f64, rng: &mut R) -> Vec<f64> {
    assert!(k >= 1, "sample_dwell_uniform requires k >= 1");
    assert!(horizon > 0.0);
    loop {
        let gaps: Vec<f64> = (0..=k).map(|_| Exp1.sample(rng)).collect();
        let total: f64 = gaps.iter().sum();
        if total <= 0.0 {
            continue;
        }
        let dwell: Vec<f64> = gaps[..k].iter().map(|g| g / total * horizon).collect();
        if dwell.iter().all(|&t| t > 0.0) && dwell.iter().sum::<f64>() < horizon {
            return dwell;
        }
    }
}

/// Stratified sample sizes per jump count k = 0..K_M. Each stratum receives
/// at least `n_min` samples; the remaining budget is split proportionally to
/// a Poisson(q̄ T) proxy for the jump-count mass, q̄ = max_i q_i.
pub fn stratified_allocation(
    spec: &CtmcSpec,
    horizon: f64,
    k_max: usize,
    n_total: usize,
    n_min: usize,
) -> Result<Vec<usize>> {
    let strata = k_max + 1;
    if n_total < strata * n_min {
        return Err(Error::domain(format!(
            "budget {n_total} cannot fund {strata} strata at n_min = {n_min}"
        )));
    }
    let lambda = spec.max_intensity() * horizon;
    let mut mass = Vec::with_capacity(strata);
    let mut log_pk = -lambda; // log of e^{-λ} λ^k / k!
    for k in 0..strata {
        if k > 0 {
            log_pk += lambda.ln() - (k as f64).ln();
        }
        mass.push(if lambda == 0.0 {
            if k == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            log_pk.exp()
        });
    }
    let total_mass: f64 = mass.iter().sum();
    let spare = n_total - strata * n_min;
    let mut alloc: Vec<usize> = mass
        .iter()
        .map(|&m| n_min + (spare as f64 * m / total_mass).floor() as usize)
        .collect();
    // put leftover from flooring into the heaviest stratum
    let assigned: usize = alloc.iter().sum();
    if assigned < n_total {
        let heavy = mass
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        alloc[heavy] += n_total - assigned;
    }
    Ok(alloc)
}
