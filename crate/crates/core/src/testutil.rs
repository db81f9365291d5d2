//! Oracles shared by unit tests. Kept independent of the code they check.

use rand::Rng;

use crate::data::{parse_slot_tag, Sample};

pub fn sample(id: &str, words: &str, tags: &str, intent: &str) -> Sample {
    Sample {
        id: id.into(),
        tokens: words.split_whitespace().map(String::from).collect(),
        slots: tags
            .split_whitespace()
            .map(|t| parse_slot_tag(t).unwrap())
            .collect(),
        intent: intent.into(),
    }
}

/// Central differences `(f(x+h) - f(x-h)) / 2h` for every coordinate.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, point: &[f64], h: f64) -> Vec<f64> {
    let mut p = point.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let plus = f(&p);
            p[i] = orig - h;
            let minus = f(&p);
            p[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Every (intent, tag sequence) pair, in lexicographic order.
pub fn enumerate_configs(
    n_intents: usize,
    n_tags: usize,
    len: usize,
) -> impl Iterator<Item = (usize, Vec<usize>)> {
    let per_intent = n_tags.pow(len as u32);
    (0..n_intents * per_intent).map(move |k| {
        let z = k / per_intent;
        let mut rest = k % per_intent;
        let mut y = vec![0; len];
        for i in (0..len).rev() {
            y[i] = rest % n_tags;
            rest /= n_tags;
        }
        (z, y)
    })
}

/// Box-Muller standard normal.
pub fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
