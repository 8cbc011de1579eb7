//! Greedy decoding under every pattern head.

use ndarray::s;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSequence, BOS, EOS, RESERVED};
use crate::error::{Error, Result};
use crate::metrics::GenerationRecord;
use crate::model::ExpertBundle;

/// One head's decoded output. `truncated` is set when decoding stopped at the
/// length limit before emitting end-of-sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodedOutput {
    pub tokens: Vec<u32>,
    pub text: String,
    pub truncated: bool,
}

/// The K decoded outputs for one input, one per head in head order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationSet {
    pub input: TokenSequence,
    pub outputs: Vec<DecodedOutput>,
}

impl GenerationSet {
    pub fn output_tokens(&self) -> Vec<Vec<u32>> {
        self.outputs.iter().map(|o| o.tokens.clone()).collect()
    }

    pub fn to_record(&self, references: Vec<String>) -> GenerationRecord {
        GenerationRecord {
            input: self.input.text.clone(),
            outputs: self.outputs.iter().map(|o| o.text.clone()).collect(),
            references,
        }
    }
}

/// Decodes `x` greedily with each head in turn. Pattern selection is skipped:
/// with no target there is nothing to pool from the decoder side.
pub fn generate_all_patterns(bundle: &ExpertBundle, x: &TokenSequence, max_len: usize) -> Result<GenerationSet> {
    if x.is_empty() {
        return Err(Error::InvalidInput("generation input is empty".into()));
    }
    if max_len == 0 {
        return Err(Error::InvalidParameter("max_len must be >= 1".into()));
    }
    let source = bundle.padded_source(&x.tokens)?;
    let (memory, trace) = bundle.encode(&source);
    let outputs = (0..bundle.experts())
        .map(|k| greedy(bundle, k, &memory, &trace.mask, max_len))
        .collect();
    Ok(GenerationSet {
        input: x.clone(),
        outputs,
    })
}

fn greedy(bundle: &ExpertBundle, head: usize, memory: &ndarray::Array2<f64>, mask: &[bool], max_len: usize) -> DecodedOutput {
    let head = &bundle.params.heads[head];
    let mut input = vec![BOS];
    let mut tokens = Vec::new();
    let mut truncated = true;
    while input.len() <= bundle.config.target_positions {
        let (states, _) = bundle.decode(&input, memory, mask);
        let last = states.slice(s![input.len() - 1..input.len(), ..]);
        let logits = head.forward(&last);
        // Only words and end-of-sequence are eligible, and end-of-sequence only
        // after the first word, so every output has at least one token. First
        // maximum wins so ties resolve identically everywhere.
        let next = logits
            .row(0)
            .iter()
            .enumerate()
            .filter(|&(i, _)| i >= RESERVED.len() || (i == EOS as usize && !tokens.is_empty()))
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0 as u32;
        if next == EOS {
            truncated = false;
            break;
        }
        if tokens.len() == max_len {
            break;
        }
        tokens.push(next);
        input.push(next);
    }
    DecodedOutput {
        text: bundle.vocab.decode(&tokens),
        tokens,
        truncated,
    }
}

/// [`generate_all_patterns`] over many inputs, in parallel, results in input order.
pub fn generate_batch(bundle: &ExpertBundle, inputs: &[TokenSequence], max_len: usize) -> Result<Vec<GenerationSet>> {
    inputs
        .par_iter()
        .map(|x| generate_all_patterns(bundle, x, max_len))
        .collect()
}
