//! Query–key distances, matching losses and test-time task selection.

use serde::{Deserialize, Serialize};

use crate::error::{DpatError, Result};
use crate::tensor::dot;

/// Which key-matching objective drives the task keys.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchLossKind {
    /// Softmax-normalized negative log-likelihood over keys `1..=t`.
    #[default]
    Softmax,
    /// Raw distance to the current key only (DualPrompt-style baseline).
    Raw,
}

fn checked_norm(v: &[f64], what: &str) -> Result<f64> {
    let n = dot(v, v).sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(DpatError::DegenerateInput(format!("{what} has zero or non-finite norm")));
    }
    Ok(n)
}

/// `1 − cos(a, b)`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(DpatError::DimensionMismatch(format!(
            "vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = checked_norm(a, "query")?;
    let nb = checked_norm(b, "key")?;
    Ok(1.0 - dot(a, b) / (na * nb))
}

/// Gradient of `1 − cos(q, k)` with respect to `k`.
fn cosine_distance_grad_key(q: &[f64], k: &[f64]) -> Result<Vec<f64>> {
    let nq = checked_norm(q, "query")?;
    let nk = checked_norm(k, "key")?;
    let cos = dot(q, k) / (nq * nk);
    Ok(q.iter()
        .zip(k)
        .map(|(qi, ki)| -(qi / (nq * nk) - cos * ki / (nk * nk)))
        .collect())
}

/// Softmax-normalized matching loss
/// `−log( exp(−γ(q,k_t)/τ) / Σ_{i≤t} exp(−γ(q,k_i)/τ) )`, with `t` 1-based.
pub fn match_loss(query: &[f64], keys: &[&[f64]], current: usize, tau: f64) -> Result<f64> {
    match_loss_with_grads(query, keys, current, tau, MatchLossKind::Softmax).map(|(l, _)| l)
}

/// Raw cosine distance to the current key.
pub fn dualprompt_match_loss(query: &[f64], key: &[f64]) -> Result<f64> {
    cosine_distance(query, key)
}

/// Loss value and its gradient with respect to each key in `keys`.
/// Keys after `current` get zero gradients.
pub(crate) fn match_loss_with_grads(
    query: &[f64],
    keys: &[&[f64]],
    current: usize,
    tau: f64,
    kind: MatchLossKind,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if current == 0 || current > keys.len() {
        return Err(DpatError::Selection(format!(
            "task {current} has no key ({} keys)",
            keys.len()
        )));
    }
    let dim = query.len();
    let mut grads = vec![vec![0.0; dim]; keys.len()];
    match kind {
        MatchLossKind::Raw => {
            let k = keys[current - 1];
            let loss = cosine_distance(query, k)?;
            grads[current - 1] = cosine_distance_grad_key(query, k)?;
            Ok((loss, grads))
        }
        MatchLossKind::Softmax => {
            if !(tau > 0.0) {
                return Err(DpatError::Config(format!("temperature must be positive, got {tau}")));
            }
            let logits: Vec<f64> = keys[..current]
                .iter()
                .map(|k| cosine_distance(query, k).map(|g| -g / tau))
                .collect::<Result<_>>()?;
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|a| (a - max).exp()).sum();
            let lse = max + z.ln();
            let loss = lse - logits[current - 1];
            for (i, a) in logits.iter().enumerate() {
                let p = (a - lse).exp();
                let target = if i + 1 == current { 1.0 } else { 0.0 };
                // dL/dγ_i = (δ_it − p_i)/τ
                let dgamma = (target - p) / tau;
                let dk = cosine_distance_grad_key(query, keys[i])?;
                grads[i] = dk.into_iter().map(|v| v * dgamma).collect();
            }
            Ok((loss, grads))
        }
    }
}

/// `argmin_t γ(q, k_t)` as a 1-based task index; ties go to the lowest index.
pub fn select_task<K: AsRef<[f64]>>(query: &[f64], keys: &[K]) -> Result<usize> {
    if keys.is_empty() {
        return Err(DpatError::Selection("key bank is empty".into()));
    }
    let mut best = (0, f64::INFINITY);
    for (i, k) in keys.iter().enumerate() {
        let d = cosine_distance(query, k.as_ref())?;
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best.0 + 1)
}
