#![allow(dead_code)]

use rand::Rng;
use rayon::prelude::*;
use rand_chacha::ChaCha8Rng;
use spmoe::corpus::Vocabulary;
use spmoe::model::{Example, ExpertBundle, ModelConfig};
use spmoe::nn::Parameters;
use spmoe::train::{batch_gradient, batch_objective};

/// K=2, d_model=8, vocabulary of 12 (4 reserved + 8 words).
pub fn tiny_bundle(seed: u64, layers: usize) -> ExpertBundle {
    let mut vocab = Vocabulary::default();
    for w in ["a", "b", "c", "d", "e", "f", "g", "h"] {
        vocab.insert(w);
    }
    assert_eq!(vocab.len(), 12);
    let config = ModelConfig::new(vocab.len(), 5, 6, 2).with_width(8).with_layers(layers);
    ExpertBundle::new(config, vocab, seed).unwrap()
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize) -> Vec<Example> {
    (0..n)
        .map(|_| {
            let src_len = rng.random_range(1..=5);
            let tgt_len = rng.random_range(1..=6);
            Example {
                source: (0..src_len).map(|_| rng.random_range(4..12)).collect(),
                target: (0..tgt_len).map(|_| rng.random_range(4..12)).collect(),
            }
        })
        .collect()
}

/// Moves every parameter by N(0, scale²) so heads and router differ.
pub fn jitter(bundle: &mut ExpertBundle, rng: &mut ChaCha8Rng, scale: f64) {
    let normal = rand_distr::Normal::new(0.0, scale).unwrap();
    bundle.params.visit_mut("", &mut |_, _, data| {
        for v in data.iter_mut() {
            *v += rng.sample(normal);
        }
    });
}

/// Smallest distance of any sample's scaled logits to its projection threshold.
pub fn support_margin(bundle: &ExpertBundle, batch: &[Example]) -> f64 {
    batch
        .iter()
        .map(|ex| bundle.forward(ex).unwrap().projection.boundary_margin())
        .fold(f64::INFINITY, f64::min)
}

pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

/// Central differences of `L_final` against the analytic gradient for every
/// parameter. The error of an entry is `|a − f| / max(|a|, |f|, floor)`.
pub fn gradient_check(bundle: &ExpertBundle, batch: &[Example], h: f64, floor: f64) -> GradCheck {
    let (_, analytic) = batch_gradient(bundle, batch).unwrap();
    let mut flat = Vec::new();
    analytic.visit("", &mut |name, _, data| {
        for (i, &g) in data.iter().enumerate() {
            flat.push((format!("{name}[{i}]"), g));
        }
    });

    // Entries are independent, so workers each perturb their own copy.
    let errors: Vec<(f64, String)> = flat
        .par_iter()
        .enumerate()
        .map_init(
            || bundle.clone(),
            |probe, (index, (name, a))| {
                let original = entry(probe, index, None);
                let mut loss_at = |delta: f64| {
                    entry(probe, index, Some(original + delta));
                    let loss = batch_objective(probe, batch).unwrap().loss;
                    entry(probe, index, Some(original));
                    loss
                };
                let f = (loss_at(h) - loss_at(-h)) / (2.0 * h);
                let err = (a - f).abs() / a.abs().max(f.abs()).max(floor);
                (err, format!("{name}: analytic {a:e}, numeric {f:e}"))
            },
        )
        .collect();
    let checked = errors.len();
    let (max_rel_error, worst) = errors
        .into_iter()
        .fold((0.0, String::new()), |best, e| if e.0 > best.0 { e } else { best });
    GradCheck {
        max_rel_error,
        worst,
        checked,
    }
}

/// Reads the `index`-th parameter in visit order, optionally overwriting it.
fn entry(bundle: &mut ExpertBundle, index: usize, value: Option<f64>) -> f64 {
    let mut seen = 0;
    let mut old = f64::NAN;
    bundle.params.visit_mut("", &mut |_, _, data| {
        if (seen..seen + data.len()).contains(&index) {
            old = data[index - seen];
            if let Some(v) = value {
                data[index - seen] = v;
            }
        }
        seen += data.len();
    });
    old
}
