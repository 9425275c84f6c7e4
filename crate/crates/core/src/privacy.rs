//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! For an integer order `α` the single-step RDP of the sampled Gaussian with
//! sampling rate `q` and noise multiplier `σ` is
//!
//! ```text
//! ε(α) = 1/(α-1) · log Σ_{k=0..α} C(α,k) (1-q)^{α-k} q^k exp(k(k-1) / (2σ²))
//! ```
//!
//! evaluated here entirely in log space. Fractional orders use the value at
//! `ceil(α)`, which upper-bounds `ε(α)` because RDP is non-decreasing in the
//! order. Steps compose additively and the curve converts to `(ε, δ)` with
//! `ε = min_α ε_RDP(α) + log(1/δ)/(α-1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ORDERS: [f64; 20] = [
    1.25, 1.5, 1.75, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0, 12.0, 16.0, 20.0, 24.0, 32.0, 48.0,
    64.0, 128.0, 256.0,
];

const SIGMA_MIN: f64 = 1e-2;
const SIGMA_MAX: f64 = 1e3;
const MAX_BISECTIONS: usize = 60;
/// Calibrated σ lands in `[CALIBRATION_FLOOR · target, target]`.
pub const CALIBRATION_FLOOR: f64 = 0.99;

fn check_q_sigma(q: f64, sigma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Parameter(format!("sampling rate q must be in [0, 1], got {q}")));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Parameter(format!("noise multiplier must be positive, got {sigma}")));
    }
    Ok(())
}

fn check_orders(orders: &[f64]) -> Result<()> {
    if orders.is_empty() {
        return Err(Error::Parameter("order grid is empty".into()));
    }
    if orders.iter().any(|a| !(*a > 1.0) || !a.is_finite()) {
        return Err(Error::Parameter("all Rényi orders must be finite and > 1".into()));
    }
    if orders.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Parameter("Rényi orders must be strictly ascending".into()));
    }
    Ok(())
}

/// Single-step RDP of the sampled Gaussian mechanism at `order`.
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, order: f64) -> Result<f64> {
    check_q_sigma(q, sigma)?;
    if !(order > 1.0) || !order.is_finite() {
        return Err(Error::Parameter(format!("Rényi order must be > 1, got {order}")));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    let alpha = order.ceil() as u64;
    let a = alpha as f64;
    let log_a = log_binomial_moment(q, sigma, alpha);
    Ok((log_a / (a - 1.0)).max(0.0))
}

/// `log E[(P/Q)^α]` for the mixture `P = (1-q)N(0,σ²) + qN(1,σ²)` against
/// `Q = N(0,σ²)`, integer `α ≥ 2`.
fn log_binomial_moment(q: f64, sigma: f64, alpha: u64) -> f64 {
    let log_q = q.ln();
    let log_1mq = (-q).ln_1p();
    let two_s2 = 2.0 * sigma * sigma;
    let mut log_binom = 0.0;
    let mut terms = Vec::with_capacity(alpha as usize + 1);
    for k in 0..=alpha {
        if k > 0 {
            log_binom += ((alpha - k + 1) as f64).ln() - (k as f64).ln();
        }
        if k < alpha && log_1mq == f64::NEG_INFINITY {
            // q = 1: only the k = α term has non-zero weight.
            continue;
        }
        let kf = k as f64;
        let rest = if k == alpha { 0.0 } else { (alpha - k) as f64 * log_1mq };
        terms.push(log_binom + rest + kf * log_q + kf * (kf - 1.0) / two_s2);
    }
    crate::tensor::log_sum_exp(&terms)
}

/// RDP values over a grid of orders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    pub orders: Vec<f64>,
    pub eps_rdp: Vec<f64>,
}

impl RdpCurve {
    /// Single-step curve of the sampled Gaussian on `orders`.
    pub fn subsampled_gaussian(q: f64, sigma: f64, orders: &[f64]) -> Result<Self> {
        check_orders(orders)?;
        let eps_rdp = orders
            .iter()
            .map(|&a| rdp_subsampled_gaussian(q, sigma, a))
            .collect::<Result<Vec<_>>>()?;
        Ok(RdpCurve { orders: orders.to_vec(), eps_rdp })
    }

    pub fn zero(orders: &[f64]) -> Result<Self> {
        check_orders(orders)?;
        Ok(RdpCurve { orders: orders.to_vec(), eps_rdp: vec![0.0; orders.len()] })
    }

    /// `steps`-fold composition (RDP adds up).
    pub fn compose(&self, steps: u64) -> RdpCurve {
        RdpCurve {
            orders: self.orders.clone(),
            eps_rdp: self.eps_rdp.iter().map(|e| e * steps as f64).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.eps_rdp.iter().all(|e| e.is_finite())
    }
}

pub fn compose(curve: &RdpCurve, steps: u64) -> RdpCurve {
    curve.compose(steps)
}

/// Best `(ε, order)` for the given `δ`.
pub fn rdp_to_dp(curve: &RdpCurve, delta: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Parameter(format!("delta must be in (0, 1), got {delta}")));
    }
    if curve.orders.len() != curve.eps_rdp.len() || curve.orders.is_empty() {
        return Err(Error::Parameter("malformed RDP curve".into()));
    }
    let log_inv_delta = -delta.ln();
    let mut best = (f64::INFINITY, curve.orders[0]);
    for (&alpha, &eps) in curve.orders.iter().zip(&curve.eps_rdp) {
        let candidate = eps + log_inv_delta / (alpha - 1.0);
        if candidate < best.0 {
            best = (candidate, alpha);
        }
    }
    Ok(best)
}

/// Everything the accountant needs to price a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountantParams {
    pub q: f64,
    pub sigma: f64,
    pub steps: u64,
    pub delta: f64,
    pub orders: Vec<f64>,
}

impl AccountantParams {
    pub fn validate(&self) -> Result<()> {
        check_q_sigma(self.q, self.sigma)?;
        check_orders(&self.orders)?;
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Parameter(format!("delta must be in (0, 1), got {}", self.delta)));
        }
        Ok(())
    }

    pub fn curve(&self) -> Result<RdpCurve> {
        self.validate()?;
        Ok(RdpCurve::subsampled_gaussian(self.q, self.sigma, &self.orders)?.compose(self.steps))
    }

    /// `(ε, best order)` after all steps.
    pub fn epsilon(&self) -> Result<(f64, f64)> {
        rdp_to_dp(&self.curve()?, self.delta)
    }
}

fn epsilon_at(q: f64, sigma: f64, steps: u64, delta: f64, orders: &[f64]) -> Result<f64> {
    let params = AccountantParams { q, sigma, steps, delta, orders: orders.to_vec() };
    Ok(params.epsilon()?.0)
}

/// Smallest-found σ in `[1e-2, 1e3]` whose `ε` lies in
/// `[0.99 · target, target]`. The returned σ never exceeds the target budget.
///
/// When even σ = 1e-2 stays under `0.99 · target` (e.g. `q = 0`), 1e-2 is
/// returned: it satisfies the budget and no admissible σ is smaller.
pub fn calibrate_sigma(target_eps: f64, q: f64, steps: u64, delta: f64, orders: &[f64]) -> Result<f64> {
    if !(target_eps > 0.0) || !target_eps.is_finite() {
        return Err(Error::Parameter(format!("target epsilon must be positive, got {target_eps}")));
    }
    let eps = |s: f64| epsilon_at(q, s, steps, delta, orders);
    let floor = CALIBRATION_FLOOR * target_eps;

    if eps(SIGMA_MAX)? > target_eps {
        return Err(Error::Calibration(format!(
            "target ε = {target_eps} is unreachable with σ ≤ {SIGMA_MAX}"
        )));
    }
    let e_min = eps(SIGMA_MIN)?;
    if e_min <= target_eps {
        return Ok(SIGMA_MIN);
    }

    // Invariant: eps(lo) > target >= eps(hi).
    let (mut lo, mut hi) = (SIGMA_MIN, SIGMA_MAX);
    for _ in 0..MAX_BISECTIONS {
        let e_hi = eps(hi)?;
        if e_hi >= floor {
            return Ok(hi);
        }
        // Geometric midpoint: σ spans five decades.
        let mid = (lo * hi).sqrt();
        if eps(mid)? > target_eps {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if eps(hi)? >= floor {
        Ok(hi)
    } else {
        Err(Error::Calibration(format!(
            "bisection did not reach [{floor}, {target_eps}] within {MAX_BISECTIONS} iterations"
        )))
    }
}
