use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_history, IntensityModel, ThinningBound, TypeSpace};
use crate::autodiff::{Grads, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::event::{Occurrence, Timeline, TypeKey};

/// Natural-scale Hawkes parameters: `λ_k(t) = μ_k + Σ_j α[k_j][k] e^{−δ_k (t − t_j)}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HawkesParams {
    pub mu: Vec<f64>,
    /// `alpha[source][target]`
    pub alpha: Vec<Vec<f64>>,
    /// Decay rate per target type.
    pub delta: Vec<f64>,
}

impl HawkesParams {
    pub fn validate(&self) -> Result<()> {
        let k = self.mu.len();
        if k == 0 || self.delta.len() != k || self.alpha.len() != k {
            return Err(Error::Dimension(format!(
                "hawkes: {} base rates, {} decays, {} excitation rows",
                k,
                self.delta.len(),
                self.alpha.len()
            )));
        }
        if self.alpha.iter().any(|r| r.len() != k) {
            return Err(Error::Dimension("hawkes: excitation matrix is not square".into()));
        }
        let finite_nonneg = |v: &f64| v.is_finite() && *v >= 0.0;
        if !self.mu.iter().all(finite_nonneg) || !self.alpha.iter().flatten().all(finite_nonneg) {
            return Err(Error::InvalidArgument(
                "hawkes: base rates and excitations must be finite and >= 0".into(),
            ));
        }
        if !self.delta.iter().all(|d| d.is_finite() && *d > 0.0) {
            return Err(Error::InvalidArgument("hawkes: decays must be > 0".into()));
        }
        Ok(())
    }
}

const LOG_FLOOR: f64 = -40.0;

fn safe_ln(x: f64) -> f64 {
    if x > 0.0 {
        x.ln().max(LOG_FLOOR)
    } else {
        LOG_FLOOR
    }
}

/// Multivariate exponential-kernel Hawkes process over categorical types.
///
/// Parameters are stored on the log scale so gradient steps keep them positive.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HawkesModel {
    params: ParamSet,
    types: usize,
    excite: bool,
}

impl HawkesModel {
    pub fn new(p: &HawkesParams) -> Result<Self> {
        p.validate()?;
        let k = p.mu.len();
        let mut params = ParamSet::default();
        params.add(
            "log_mu",
            Tensor {
                rows: k,
                cols: 1,
                data: p.mu.iter().map(|&v| safe_ln(v)).collect(),
            },
        );
        params.add(
            "log_alpha",
            Tensor {
                rows: k,
                cols: k,
                data: p.alpha.iter().flatten().map(|&v| safe_ln(v)).collect(),
            },
        );
        params.add(
            "log_delta",
            Tensor {
                rows: k,
                cols: 1,
                data: p.delta.iter().map(|v| v.ln()).collect(),
            },
        );
        Ok(Self {
            params,
            types: k,
            excite: true,
        })
    }

    /// Homogeneous Poisson rates: excitation is fixed at zero and never trained.
    pub fn poisson(mu: &[f64]) -> Result<Self> {
        let k = mu.len();
        let mut m = Self::new(&HawkesParams {
            mu: mu.to_vec(),
            alpha: vec![vec![0.0; k]; k],
            delta: vec![1.0; k],
        })?;
        m.excite = false;
        Ok(m)
    }

    /// Initial parameters: `μ_k = rate / K`, `δ = 1`, small uniform excitation.
    pub fn init<R: Rng + ?Sized>(types: usize, event_rate: f64, rng: &mut R) -> Result<Self> {
        let mu = vec![(event_rate / types as f64).max(1e-6); types];
        let alpha = (0..types)
            .map(|_| (0..types).map(|_| rng.random_range(0.01..0.1)).collect())
            .collect();
        Self::new(&HawkesParams {
            mu,
            alpha,
            delta: vec![1.0; types],
        })
    }

    pub fn excites(&self) -> bool {
        self.excite
    }

    pub fn num_types(&self) -> usize {
        self.types
    }

    pub fn params(&self) -> HawkesParams {
        let k = self.types;
        let t = &self.params.tensors;
        HawkesParams {
            mu: t[0].data.iter().map(|v| v.exp()).collect(),
            alpha: (0..k)
                .map(|s| {
                    (0..k)
                        .map(|d| {
                            if self.excite {
                                t[1].data[s * k + d].exp()
                            } else {
                                0.0
                            }
                        })
                        .collect()
                })
                .collect(),
            delta: t[2].data.iter().map(|v| v.exp()).collect(),
        }
    }

    pub(crate) fn param_set(&self) -> &ParamSet {
        &self.params
    }

    pub(crate) fn param_set_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn type_index(&self, key: TypeKey) -> Result<usize> {
        match key {
            TypeKey::Categorical(c) if (c as usize) < self.types => Ok(c as usize),
            other => Err(Error::Dimension(format!(
                "hawkes model over {} categorical types cannot score {other:?}",
                self.types
            ))),
        }
    }

    /// Intensity of every type at `t`, counting history events with time `<= t`.
    fn rates_at(&self, p: &HawkesParams, history: &[Occurrence], t: f64) -> Result<Vec<f64>> {
        let mut rates = p.mu.clone();
        if self.excite {
            for e in history.iter().filter(|e| e.time <= t) {
                let src = self.type_index(e.key)?;
                for (k, r) in rates.iter_mut().enumerate() {
                    *r += p.alpha[src][k] * (-p.delta[k] * (t - e.time)).exp();
                }
            }
        }
        Ok(rates)
    }

    /// Exact log-likelihood over the timeline's window with its gradient
    /// with respect to the log-scale parameters.
    pub fn exact_log_likelihood(&self, timeline: &Timeline) -> Result<(f64, Grads)> {
        let p = self.params();
        let k = self.types;
        let (start, end) = (timeline.window_start, timeline.window_end);
        let mut g_mu = vec![0.0; k];
        let mut g_alpha = vec![vec![0.0; k]; k];
        let mut g_delta = vec![0.0; k];
        let mut ll = 0.0;

        // a[tgt][src] = Σ e^{−δ_tgt (τ − t_j)}, b[tgt][src] = Σ (τ − t_j) e^{…}
        let mut a = vec![vec![0.0; k]; k];
        let mut b = vec![vec![0.0; k]; k];
        let events = &timeline.events;
        let mut cur = events.first().map(|e| e.time).unwrap_or(start);
        let mut i = 0;
        while i < events.len() && events[i].time < end {
            let tau = events[i].time;
            let dt = tau - cur;
            if dt > 0.0 {
                for tgt in 0..k {
                    let decay = (-p.delta[tgt] * dt).exp();
                    for src in 0..k {
                        b[tgt][src] = (b[tgt][src] + dt * a[tgt][src]) * decay;
                        a[tgt][src] *= decay;
                    }
                }
                cur = tau;
            }
            let mut j = i;
            while j < events.len() && events[j].time == tau {
                j += 1;
            }
            if tau >= start {
                for e in &events[i..j] {
                    let tgt = self.type_index(e.key)?;
                    let mut lam = p.mu[tgt];
                    if self.excite {
                        for src in 0..k {
                            lam += p.alpha[src][tgt] * a[tgt][src];
                        }
                    }
                    if !(lam > 0.0) {
                        return Err(Error::ZeroIntensity { t: tau, value: lam });
                    }
                    ll += lam.ln();
                    g_mu[tgt] += 1.0 / lam;
                    if self.excite {
                        for src in 0..k {
                            g_alpha[src][tgt] += a[tgt][src] / lam;
                            g_delta[tgt] -= p.alpha[src][tgt] * b[tgt][src] / lam;
                        }
                    }
                }
            }
            for e in &events[i..j] {
                let src = self.type_index(e.key)?;
                for row in a.iter_mut() {
                    row[src] += 1.0;
                }
            }
            i = j;
        }

        let width = (end - start).max(0.0);
        for tgt in 0..k {
            ll -= p.mu[tgt] * width;
            g_mu[tgt] -= width;
        }
        if self.excite {
            for e in events.iter().take_while(|e| e.time < end) {
                let src = self.type_index(e.key)?;
                let xa = start.max(e.time) - e.time;
                let xb = end - e.time;
                for tgt in 0..k {
                    let d = p.delta[tgt];
                    let (ea, eb) = ((-d * xa).exp(), (-d * xb).exp());
                    let mass = (ea - eb) / d;
                    ll -= p.alpha[src][tgt] * mass;
                    g_alpha[src][tgt] -= mass;
                    g_delta[tgt] -=
                        p.alpha[src][tgt] * (-(ea - eb) / (d * d) + (-xa * ea + xb * eb) / d);
                }
            }
        }

        // chain rule to log scale
        let grads = Grads(vec![
            g_mu.iter().zip(&p.mu).map(|(g, v)| g * v).collect(),
            (0..k * k)
                .map(|idx| {
                    let (s, d) = (idx / k, idx % k);
                    g_alpha[s][d] * p.alpha[s][d]
                })
                .collect(),
            g_delta.iter().zip(&p.delta).map(|(g, v)| g * v).collect(),
        ]);
        Ok((ll, grads))
    }

    /// Simulates events on `[0, end)` by thinning.
    pub fn simulate<R: Rng + ?Sized>(&self, end: f64, rng: &mut R) -> Vec<Occurrence> {
        let p = self.params();
        let k = self.types;
        let mut excitation = vec![0.0; k];
        let mut t = 0.0;
        let mut out = Vec::new();
        loop {
            let bound: f64 = p.mu.iter().zip(&excitation).map(|(m, e)| m + e).sum();
            if bound <= 0.0 {
                break;
            }
            let gap = -(1.0 - rng.random::<f64>()).ln() / bound;
            let next = t + gap;
            if next >= end {
                break;
            }
            for (tgt, e) in excitation.iter_mut().enumerate() {
                *e *= (-p.delta[tgt] * gap).exp();
            }
            t = next;
            let rates: Vec<f64> = p.mu.iter().zip(&excitation).map(|(m, e)| m + e).collect();
            let total: f64 = rates.iter().sum();
            let u = rng.random::<f64>() * bound;
            if u < total {
                let mut pick = u;
                let mut chosen = k - 1;
                for (i, r) in rates.iter().enumerate() {
                    if pick < *r {
                        chosen = i;
                        break;
                    }
                    pick -= r;
                }
                out.push(Occurrence::new(t, TypeKey::Categorical(chosen as u32)));
                if self.excite {
                    for (tgt, e) in excitation.iter_mut().enumerate() {
                        *e += p.alpha[chosen][tgt];
                    }
                }
            }
        }
        out
    }
}

impl IntensityModel for HawkesModel {
    fn type_space(&self) -> TypeSpace {
        TypeSpace::Categorical {
            categories: self.types as u32,
        }
    }

    fn intensities(&self, history: &[Occurrence], keys: &[TypeKey], t: f64) -> Result<Vec<f64>> {
        check_history(history, t)?;
        let rates = self.rates_at(&self.params(), history, t)?;
        keys.iter()
            .map(|k| Ok(rates[self.type_index(*k)?]))
            .collect()
    }

    fn total_intensity(&self, history: &[Occurrence], t: f64) -> Result<f64> {
        check_history(history, t)?;
        Ok(self.rates_at(&self.params(), history, t)?.iter().sum())
    }

    /// Between events the excitation only decays, so the total intensity at
    /// `from` (counting events at `from`) bounds everything after it.
    fn thinning_bound(&self, history: &[Occurrence], from: f64) -> Result<ThinningBound> {
        let rate = self.rates_at(&self.params(), history, from)?.iter().sum();
        Ok(ThinningBound {
            rate,
            until: f64::INFINITY,
        })
    }
}
