//! Mixture-of-experts objective.
//!
//! * `L_rec = −log Σ_j p_j · exp(−CE_j)`, evaluated in log space over the
//!   support of `p` only.
//! * `L_balance = KL(mean_B p ‖ U)`.
//! * `L_final = L_rec + γ·L_balance`.

use ndarray::Array2;

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::model::{pool, Example, ExpertBundle, PatternPooler};
use crate::projection::{LogitVector, SimplexDistribution};

/// Per-expert token-summed cross-entropies `CE_k(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CeVector(Vec<f64>);

impl CeVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("cross-entropy vector must be non-empty".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "cross-entropies must be finite and non-negative: {values:?}"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// The routing distributions of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchAssignment {
    rows: Vec<SimplexDistribution>,
}

impl BatchAssignment {
    pub fn new(rows: Vec<SimplexDistribution>) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::EmptyInput("batch assignment has no rows".into()));
        };
        let k = first.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("batch rows have different expert counts".into()));
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[SimplexDistribution] {
        &self.rows
    }

    pub fn experts(&self) -> usize {
        self.rows[0].len()
    }

    /// Batch-mean distribution `Σ_i pⁱ / |B|`.
    pub fn mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.experts()];
        for row in &self.rows {
            for (m, p) in mean.iter_mut().zip(row.probs()) {
                *m += p;
            }
        }
        let n = self.rows.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

/// Pattern logits from encoder and decoder states. States shorter than the
/// pooler's fixed lengths are treated as zero-padded.
pub fn pattern_logits(enc_states: &Array2<f64>, dec_states: &Array2<f64>, pooler: &PatternPooler) -> Result<LogitVector> {
    let pooled = pool(enc_states, dec_states, pooler)?;
    LogitVector::new((pooled.dot(&pooler.w) + &pooler.b).to_vec())
}

/// Runs the backbone once with teacher forcing and scores `y` under every head.
pub fn expert_cross_entropies(bundle: &ExpertBundle, x: &TokenSequence, y: &TokenSequence) -> Result<CeVector> {
    let fwd = bundle.forward(&Example {
        source: x.tokens.clone(),
        target: y.tokens.clone(),
    })?;
    CeVector::new(fwd.ce)
}

/// Loss value, posterior responsibilities, and `∂L_rec/∂p` (zero off the support).
pub(crate) struct MixtureTerms {
    pub loss: f64,
    pub posterior: Vec<f64>,
    pub dprobs: Vec<f64>,
}

pub(crate) fn mixture_terms(p: &[f64], ce: &[f64]) -> Result<MixtureTerms> {
    if p.len() != ce.len() {
        return Err(Error::Shape(format!(
            "distribution has {} experts, cross-entropies {}",
            p.len(),
            ce.len()
        )));
    }
    let active: Vec<(usize, f64)> = p
        .iter()
        .zip(ce)
        .enumerate()
        .filter(|(_, (&pj, _))| pj > 0.0)
        .map(|(j, (&pj, &cj))| (j, pj.ln() - cj))
        .collect();
    let Some(max) = active.iter().map(|(_, a)| *a).reduce(f64::max) else {
        return Err(Error::Internal("mixture has empty support".into()));
    };
    let lse = max + active.iter().map(|(_, a)| (a - max).exp()).sum::<f64>().ln();
    let loss = -lse;
    let mut posterior = vec![0.0; p.len()];
    let mut dprobs = vec![0.0; p.len()];
    for &(j, a) in &active {
        posterior[j] = (a - lse).exp();
        dprobs[j] = -(-ce[j] - lse).exp();
    }
    Ok(MixtureTerms {
        loss,
        posterior,
        dprobs,
    })
}

/// `−log Σ_j p_j · exp(−CE_j)`, skipping experts with `p_j = 0`.
pub fn reconstruction_loss(p: &SimplexDistribution, ce: &CeVector) -> Result<f64> {
    Ok(mixture_terms(p.probs(), ce.values())?.loss)
}

/// `KL(m ‖ U)` for the batch mean `m`, with `0·ln 0 = 0`.
pub fn load_balance_loss(batch: &BatchAssignment) -> f64 {
    kl_from_uniform(&batch.mean())
}

pub(crate) fn kl_from_uniform(mean: &[f64]) -> f64 {
    let k = mean.len() as f64;
    mean.iter()
        .filter(|&&m| m > 0.0)
        .map(|&m| m * (m * k).ln())
        .sum()
}

/// `∂KL(m‖U)/∂m_i = ln(K·m_i) + 1`; entries with `m_i = 0` get 0.
pub(crate) fn kl_gradient(mean: &[f64]) -> Vec<f64> {
    let k = mean.len() as f64;
    mean.iter()
        .map(|&m| if m > 0.0 { (m * k).ln() + 1.0 } else { 0.0 })
        .collect()
}

pub fn final_loss(l_rec: f64, l_balance: f64, gamma: f64) -> f64 {
    l_rec + gamma * l_balance
}
