//! Behavioral cloning vs dataset aggregation on a tabular corridor task.
//!
//! On-track states are positions `0..T`; the first wrong action moves the agent to an
//! absorbing off-track chain indexed by steps since derailment. Every state has one
//! correct action, and a mistake is any step whose action differs from it.

use crate::error::{Error, Result};
use crate::parallel::map_chunks;
use crate::seeds;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum State {
    OnTrack(usize),
    /// Steps since derailment, starting at 1.
    OffTrack(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorridorMdp {
    horizon: usize,
    actions: usize,
    on_oracle: Vec<usize>,
    off_oracle: Vec<usize>,
}

impl CorridorMdp {
    /// Random oracle table over `actions` choices per state.
    pub fn new(horizon: usize, actions: usize, seed: u64) -> Result<Self> {
        if horizon == 0 || actions < 2 {
            return Err(Error::Config(format!("corridor needs horizon >= 1 and >= 2 actions, got T={horizon}, A={actions}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let on_oracle = (0..horizon).map(|_| rng.gen_range(0..actions)).collect();
        let off_oracle = (0..horizon).map(|_| rng.gen_range(0..actions)).collect();
        Ok(CorridorMdp { horizon, actions, on_oracle, off_oracle })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn start(&self) -> State {
        State::OnTrack(0)
    }

    /// Number of table rows: `T` on-track plus `T` off-track.
    pub fn num_states(&self) -> usize {
        2 * self.horizon
    }

    pub fn index(&self, s: State) -> usize {
        match s {
            State::OnTrack(t) => t,
            State::OffTrack(d) => self.horizon + d - 1,
        }
    }

    pub fn oracle(&self, s: State) -> usize {
        match s {
            State::OnTrack(t) => self.on_oracle[t],
            State::OffTrack(d) => self.off_oracle[d - 1],
        }
    }

    pub fn step(&self, s: State, a: usize) -> State {
        match s {
            State::OnTrack(t) if a == self.on_oracle[t] => State::OnTrack(t + 1),
            State::OnTrack(_) => State::OffTrack(1),
            State::OffTrack(d) => State::OffTrack(d + 1),
        }
    }
}

/// Empirical action frequencies per state, mixed with `epsilon` of uniform noise when acting.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    counts: Vec<Vec<u64>>,
    visits: Vec<u64>,
    epsilon: f64,
}

impl TabularPolicy {
    pub fn untrained(num_states: usize, actions: usize, epsilon: f64) -> Self {
        TabularPolicy { counts: vec![vec![0; actions]; num_states], visits: vec![0; num_states], epsilon }
    }

    /// Refits from scratch on `data` given as (state index, action) pairs.
    pub fn fit(num_states: usize, actions: usize, epsilon: f64, data: &[(usize, usize)]) -> Self {
        let mut p = Self::untrained(num_states, actions, epsilon);
        for &(s, a) in data {
            p.counts[s][a] += 1;
            p.visits[s] += 1;
        }
        p
    }

    pub fn visits(&self, s: usize) -> u64 {
        self.visits[s]
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Acting distribution of row `s`; unvisited rows are uniform.
    pub fn probs(&self, s: usize) -> Vec<f64> {
        let a = self.counts[s].len();
        let u = 1.0 / a as f64;
        if self.visits[s] == 0 {
            return vec![u; a];
        }
        let n = self.visits[s] as f64;
        self.counts[s].iter().map(|&c| (1.0 - self.epsilon) * c as f64 / n + self.epsilon * u).collect()
    }

    pub fn sample(&self, s: usize, rng: &mut impl Rng) -> usize {
        let p = self.probs(s);
        let mut x: f64 = rng.gen();
        for (a, &pa) in p.iter().enumerate() {
            if x < pa {
                return a;
            }
            x -= pa;
        }
        p.len() - 1
    }
}

/// One rollout of the token-level mixture: each step follows the oracle with probability
/// `beta`, otherwise the learner. Returns visited (state index, oracle action) pairs and
/// the number of mistakes made by the executed actions.
pub fn rollout(mdp: &CorridorMdp, policy: &TabularPolicy, beta: f64, rng: &mut impl Rng) -> (Vec<(usize, usize)>, usize) {
    let mut s = mdp.start();
    let mut labeled = Vec::with_capacity(mdp.horizon());
    let mut mistakes = 0;
    for _ in 0..mdp.horizon() {
        let idx = mdp.index(s);
        let star = mdp.oracle(s);
        let use_oracle = rng.gen::<f64>() < beta;
        let a = if use_oracle { star } else { policy.sample(idx, rng) };
        labeled.push((idx, star));
        mistakes += usize::from(a != star);
        s = mdp.step(s, a);
    }
    (labeled, mistakes)
}

/// Mean mistakes per episode over `episodes` learner-only rollouts.
pub fn mean_mistakes(mdp: &CorridorMdp, policy: &TabularPolicy, episodes: usize, rng: &mut impl Rng) -> f64 {
    let total: usize = (0..episodes).map(|_| rollout(mdp, policy, 0.0, rng).1).sum();
    total as f64 / episodes.max(1) as f64
}

/// Fits on `rollouts` oracle demonstrations.
pub fn bc_train(mdp: &CorridorMdp, rollouts: usize, epsilon: f64, rng: &mut impl Rng) -> TabularPolicy {
    let blank = TabularPolicy::untrained(mdp.num_states(), mdp.actions(), epsilon);
    let data: Vec<(usize, usize)> = (0..rollouts).flat_map(|_| rollout(mdp, &blank, 1.0, rng).0).collect();
    TabularPolicy::fit(mdp.num_states(), mdp.actions(), epsilon, &data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DaggerConfig {
    pub iterations: usize,
    /// Rollouts per iteration.
    pub rollouts: usize,
    /// Held-out rollouts used to pick the returned policy.
    pub valid_rollouts: usize,
    pub epsilon: f64,
}

impl Default for DaggerConfig {
    fn default() -> Self {
        DaggerConfig { iterations: 8, rollouts: 8, valid_rollouts: 50, epsilon: 0.05 }
    }
}

#[derive(Debug, Clone)]
pub struct DaggerOutcome {
    pub policy: TabularPolicy,
    /// Per-iteration datasets, in order.
    pub datasets: Vec<Vec<(usize, usize)>>,
    /// Aggregate dataset after each iteration.
    pub aggregate: Vec<(usize, usize)>,
    pub best_iteration: usize,
    pub valid_mistakes: Vec<f64>,
}

/// Dataset aggregation with mixture weights `betas[i]` for iteration `i` (0-based).
/// With a single iteration this consumes randomness exactly as `bc_train` does.
pub fn dagger_train(mdp: &CorridorMdp, cfg: &DaggerConfig, betas: &[f64], rng: &mut impl Rng) -> Result<DaggerOutcome> {
    if betas.len() != cfg.iterations || cfg.iterations == 0 {
        return Err(Error::Config(format!("need one beta per iteration ({}), got {}", cfg.iterations, betas.len())));
    }
    if betas.iter().any(|b| !(0.0..=1.0).contains(b)) {
        return Err(Error::Config("betas must lie in [0, 1]".into()));
    }
    let (ns, na, eps) = (mdp.num_states(), mdp.actions(), cfg.epsilon);
    let mut policy = TabularPolicy::untrained(ns, na, eps);
    let mut aggregate = Vec::new();
    let mut datasets = Vec::with_capacity(cfg.iterations);
    let mut candidates = Vec::with_capacity(cfg.iterations);
    for &beta in betas {
        let mut d = Vec::with_capacity(cfg.rollouts * mdp.horizon());
        for _ in 0..cfg.rollouts {
            d.extend(rollout(mdp, &policy, beta, rng).0);
        }
        aggregate.extend_from_slice(&d);
        datasets.push(d);
        policy = TabularPolicy::fit(ns, na, eps, &aggregate);
        candidates.push(policy.clone());
    }
    let mut valid_mistakes = Vec::with_capacity(candidates.len());
    if candidates.len() > 1 {
        for p in &candidates {
            valid_mistakes.push(mean_mistakes(mdp, p, cfg.valid_rollouts, rng));
        }
    }
    let best_iteration = valid_mistakes
        .iter()
        .enumerate()
        .fold(0, |best, (i, &m)| if m < valid_mistakes[best] { i } else { best });
    Ok(DaggerOutcome { policy: candidates.swap_remove(best_iteration), datasets, aggregate, best_iteration, valid_mistakes })
}

/// Cold-start schedule: the first iteration is pure oracle, the rest pure learner.
pub fn cold_start_betas(iterations: usize) -> Vec<f64> {
    (0..iterations).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Bc,
    Dagger,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Bc => "bc",
            Method::Dagger => "dagger",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bc" => Ok(Method::Bc),
            "dagger" => Ok(Method::Dagger),
            _ => Err(Error::Config(format!("unknown method {s:?}; expected bc or dagger"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub horizons: Vec<usize>,
    pub actions: usize,
    pub trials: usize,
    /// Learner rollouts per trial used to measure mistakes.
    pub eval_rollouts: usize,
    pub dagger: DaggerConfig,
    pub seed: u64,
    pub threads: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            horizons: vec![10, 20, 40, 80],
            actions: 4,
            trials: 50,
            eval_rollouts: 20,
            dagger: DaggerConfig::default(),
            seed: 0,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub method: Method,
    pub horizon: usize,
    pub epsilon: f64,
    pub mean_mistakes: f64,
    /// Standard error of the mean across trials.
    pub stderr: f64,
}

/// Least-squares slope of log(mistakes) on log(T).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExponentFit {
    pub exponent: f64,
    pub intercept: f64,
    /// 95% t-interval; absent with fewer than three points.
    pub ci: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub method: Method,
    pub rows: Vec<SweepRow>,
    /// `None` when fewer than two horizons have nonzero mistakes.
    pub fit: Option<ExponentFit>,
}

impl SweepResult {
    pub const CSV_HEADER: &'static str = "method,T,epsilon,mean_mistakes,stderr,fitted_exponent";

    pub fn csv_rows(&self) -> Vec<String> {
        let exp = self.fit.map(|f| format!("{:.6}", f.exponent)).unwrap_or_else(|| "undefined".into());
        self.rows
            .iter()
            .map(|r| format!("{},{},{},{:.6},{:.6},{}", r.method, r.horizon, r.epsilon, r.mean_mistakes, r.stderr, exp))
            .collect()
    }
}

/// Fits `log y = a + b log x` over points with positive `y`.
pub fn fit_exponent(xs: &[f64], ys: &[f64]) -> Option<ExponentFit> {
    let pts: Vec<(f64, f64)> = xs.iter().zip(ys).filter(|(_, &y)| y > 0.0).map(|(&x, &y)| (x.ln(), y.ln())).collect();
    let n = pts.len();
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let b = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx;
    let a = my - b * mx;
    let ci = if n >= 3 {
        let sse: f64 = pts.iter().map(|p| (p.1 - a - b * p.0).powi(2)).sum();
        let se = (sse / (nf - 2.0) / sxx).sqrt();
        let t = StudentsT::new(0.0, 1.0, nf - 2.0).ok()?.inverse_cdf(0.975);
        Some((b - t * se, b + t * se))
    } else {
        None
    };
    Some(ExponentFit { exponent: b, intercept: a, ci })
}

/// Mistakes of one trained policy, one value per trial.
fn trial_mistakes(cfg: &SweepConfig, method: Method, horizon: usize, trial: usize) -> Result<f64> {
    let stream = seeds::indexed(seeds::substream(cfg.seed, "dagger"), (horizon as u64) << 32 | trial as u64);
    let mdp = CorridorMdp::new(horizon, cfg.actions, stream)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::indexed(stream, method as u64 + 1));
    let d = &cfg.dagger;
    let policy = match method {
        Method::Bc => bc_train(&mdp, d.iterations * d.rollouts, d.epsilon, &mut rng),
        Method::Dagger => dagger_train(&mdp, d, &cold_start_betas(d.iterations), &mut rng)?.policy,
    };
    Ok(mean_mistakes(&mdp, &policy, cfg.eval_rollouts, &mut rng))
}

/// Mean mistakes per episode vs horizon, with a log-log exponent fit.
/// BC gets the same number of demonstrations as DAgger collects in total.
pub fn regret_sweep(cfg: &SweepConfig, method: Method) -> Result<SweepResult> {
    if cfg.trials < 20 {
        return Err(Error::Config(format!("regret sweep needs at least 20 trials, got {}", cfg.trials)));
    }
    let mut rows = Vec::with_capacity(cfg.horizons.len());
    for &h in &cfg.horizons {
        let trials: Vec<usize> = (0..cfg.trials).collect();
        let ms = map_chunks(&trials, 4, cfg.threads, |c| c.iter().map(|&t| trial_mistakes(cfg, method, h, t)).collect())?;
        let n = ms.len() as f64;
        let mean = ms.iter().sum::<f64>() / n;
        let var = ms.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0);
        rows.push(SweepRow { method, horizon: h, epsilon: cfg.dagger.epsilon, mean_mistakes: mean, stderr: (var / n).sqrt() });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.horizon as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.mean_mistakes).collect();
    Ok(SweepResult { method, fit: fit_exponent(&xs, &ys), rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_rollout_stays_on_track() {
        let mdp = CorridorMdp::new(12, 3, 5).unwrap();
        let mut s = mdp.start();
        for _ in 0..12 {
            s = mdp.step(s, mdp.oracle(s));
            assert!(matches!(s, State::OnTrack(_)));
        }
        assert_eq!(mdp.step(State::OnTrack(0), (mdp.oracle(State::OnTrack(0)) + 1) % 3), State::OffTrack(1));
        assert_eq!(mdp.step(State::OffTrack(2), mdp.oracle(State::OffTrack(2))), State::OffTrack(3));
    }

    #[test]
    fn rows_sum_to_one_and_unvisited_are_uniform() {
        let p = TabularPolicy::fit(4, 3, 0.1, &[(0, 2), (0, 2), (0, 1), (1, 0)]);
        for s in 0..4 {
            assert!((p.probs(s).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(p.probs(3), vec![1.0 / 3.0; 3]);
        assert!((p.probs(0)[2] - (0.9 * 2.0 / 3.0 + 0.1 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn exponent_fit_recovers_power_law() {
        let xs = [10.0, 20.0, 40.0, 80.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 0.3 * x.powf(1.7)).collect();
        let f = fit_exponent(&xs, &ys).unwrap();
        assert!((f.exponent - 1.7).abs() < 1e-12);
        let (lo, hi) = f.ci.unwrap();
        assert!(lo <= 1.7 + 1e-9 && hi >= 1.7 - 1e-9);
        assert!(fit_exponent(&xs, &[0.0; 4]).is_none());
    }
}
