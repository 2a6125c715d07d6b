//! Softmax transforms and divergences between probability vectors (natural log).

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound applied to probabilities that appear inside a logarithm's denominator.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DivergenceKind {
    Kl,
    Js,
}

impl DivergenceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DivergenceKind::Kl => "kl",
            DivergenceKind::Js => "js",
        }
    }

    pub fn eval(self, p: &[f64], q: &[f64]) -> f64 {
        match self {
            DivergenceKind::Kl => kl_divergence(p, q),
            DivergenceKind::Js => js_divergence(p, q),
        }
    }
}

impl fmt::Display for DivergenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DivergenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kl" => Ok(DivergenceKind::Kl),
            "js" => Ok(DivergenceKind::Js),
            other => Err(Error::UnknownName {
                kind: "divergence",
                name: other.to_string(),
                known: "kl, js".into(),
            }),
        }
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|&v| v - lse).collect()
}

/// Masked softmax output; `floored` is set when the retain mass fell below
/// [`PROB_FLOOR`].
#[derive(Debug, Clone, PartialEq)]
pub struct Masked {
    pub probs: Vec<f64>,
    pub floored: bool,
}

/// Softmax with the forget classes zeroed and the retain classes renormalized.
pub fn masked_softmax(z: &[f64], forget: &BTreeSet<usize>) -> Result<Masked> {
    let c = z.len();
    if let Some(&bad) = forget.iter().find(|&&k| k >= c) {
        return Err(Error::ClassOutOfRange {
            class: bad,
            num_classes: c,
        });
    }
    if forget.len() >= c {
        return Err(Error::InvalidMask(c));
    }
    if forget.is_empty() {
        return Ok(Masked {
            probs: softmax(z),
            floored: false,
        });
    }
    let retained: Vec<f64> = z
        .iter()
        .enumerate()
        .filter(|(k, _)| !forget.contains(k))
        .map(|(_, &v)| v)
        .collect();
    let lse_all = log_sum_exp(z);
    let lse_retain = log_sum_exp(&retained);
    let retain_mass = (lse_retain - lse_all).exp();
    let floored = retain_mass < PROB_FLOOR;
    // Computed in log space, so a vanishing retain mass is flagged but still
    // renormalizes exactly instead of dividing by the floor.
    let mut probs = vec![0.0; c];
    for (k, p) in probs.iter_mut().enumerate() {
        if !forget.contains(&k) {
            *p = (z[k] - lse_retain).exp();
        }
    }
    Ok(Masked { probs, floored })
}

/// `Σ p ln(p/q)` with `0·ln(0/·) = 0` and `q` floored at [`PROB_FLOOR`].
/// Also returns how many entries needed the floor.
pub fn kl_divergence_counted(p: &[f64], q: &[f64]) -> (f64, usize) {
    debug_assert_eq!(p.len(), q.len());
    let mut floors = 0;
    let mut total = 0.0;
    for (&pk, &qk) in p.iter().zip(q) {
        if pk <= 0.0 {
            continue;
        }
        let qk = if qk < PROB_FLOOR {
            floors += 1;
            PROB_FLOOR
        } else {
            qk
        };
        total += pk * (pk / qk).ln();
    }
    (total.max(0.0), floors)
}

pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    kl_divergence_counted(p, q).0
}

/// Jensen–Shannon divergence, bounded by ln 2.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let mut total = 0.0;
    for (&pk, &qk) in p.iter().zip(q) {
        let mk = 0.5 * (pk + qk);
        if pk > 0.0 {
            total += 0.5 * pk * (pk / mk).ln();
        }
        if qk > 0.0 {
            total += 0.5 * qk * (qk / mk).ln();
        }
    }
    total.clamp(0.0, std::f64::consts::LN_2)
}

/// `D(target ‖ softmax(logits))` and its gradient with respect to `logits`.
pub fn divergence_to_logits(kind: DivergenceKind, target: &[f64], logits: &[f64]) -> (f64, Vec<f64>) {
    let q = softmax(logits);
    match kind {
        DivergenceKind::Kl => {
            let log_q = log_softmax(logits);
            let value: f64 = target
                .iter()
                .zip(&log_q)
                .filter(|(&p, _)| p > 0.0)
                .map(|(&p, &lq)| p * (p.ln() - lq))
                .sum();
            let grad = q.iter().zip(target).map(|(&qk, &pk)| qk - pk).collect();
            (value, grad)
        }
        DivergenceKind::Js => {
            let value = js_divergence(target, &q);
            // dJS/dq_k = ½ ln(q_k / m_k), then through the softmax Jacobian.
            let g: Vec<f64> = q
                .iter()
                .zip(target)
                .map(|(&qk, &pk)| {
                    if qk > 0.0 {
                        0.5 * (qk / (0.5 * (pk + qk))).ln()
                    } else {
                        0.0
                    }
                })
                .collect();
            let mean: f64 = q.iter().zip(&g).map(|(a, b)| a * b).sum();
            let grad = q.iter().zip(&g).map(|(&qk, &gk)| qk * (gk - mean)).collect();
            (value, grad)
        }
    }
}
