//! Word-label similarity functions used as emission scores.
//!
//! `Vp` projects a word vector onto the unit direction of a label prototype;
//! `Vpb` additionally subtracts half the prototype norm, which makes it a
//! linear classifier with a unit weight vector and an adaptive bias.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SimilarityError {
    #[error("similarity needs a vector with non-zero norm")]
    ZeroNorm,
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("unknown similarity {0:?} (expected vp, vpb, dot, euclid or cosine)")]
    UnknownKind(String),
    #[error("{0} has no linear form")]
    NotLinear(SimilarityKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    Vp,
    Vpb,
    Dot,
    #[serde(rename = "euclid")]
    SqEuclid,
    Cosine,
}

impl SimilarityKind {
    pub const ALL: [SimilarityKind; 5] = [
        SimilarityKind::Vp,
        SimilarityKind::Vpb,
        SimilarityKind::Dot,
        SimilarityKind::SqEuclid,
        SimilarityKind::Cosine,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SimilarityKind::Vp => "vp",
            SimilarityKind::Vpb => "vpb",
            SimilarityKind::Dot => "dot",
            SimilarityKind::SqEuclid => "euclid",
            SimilarityKind::Cosine => "cosine",
        }
    }
}

impl fmt::Display for SimilarityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SimilarityKind {
    type Err = SimilarityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SimilarityKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| SimilarityError::UnknownKind(s.to_string()))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn nonzero_norm(a: &[f64]) -> Result<f64, SimilarityError> {
    let n = norm(a);
    if n > 0.0 {
        Ok(n)
    } else {
        Err(SimilarityError::ZeroNorm)
    }
}

fn check_dims(x: &[f64], c: &[f64]) -> Result<(), SimilarityError> {
    if x.len() == c.len() {
        Ok(())
    } else {
        Err(SimilarityError::DimMismatch(x.len(), c.len()))
    }
}

/// Similarity of word (or sentence) vector `x` to label prototype `c`.
pub fn sim(kind: SimilarityKind, x: &[f64], c: &[f64]) -> Result<f64, SimilarityError> {
    check_dims(x, c)?;
    Ok(match kind {
        SimilarityKind::Vp => dot(x, c) / nonzero_norm(c)?,
        SimilarityKind::Vpb => {
            let nc = nonzero_norm(c)?;
            dot(x, c) / nc - 0.5 * nc
        }
        SimilarityKind::Dot => dot(x, c),
        SimilarityKind::SqEuclid => {
            -0.5 * x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        }
        SimilarityKind::Cosine => {
            let nc = nonzero_norm(c)?;
            let nx = nonzero_norm(x)?;
            dot(x, c) / (nx * nc)
        }
    })
}

/// Unit weight vector and bias such that `sim(kind, x, c) == x·w + b`.
pub fn sim_linear_form(
    kind: SimilarityKind,
    c: &[f64],
) -> Result<(Vec<f64>, f64), SimilarityError> {
    let bias = match kind {
        SimilarityKind::Vp => 0.0,
        SimilarityKind::Vpb => -0.5 * nonzero_norm(c)?,
        other => return Err(SimilarityError::NotLinear(other)),
    };
    let nc = nonzero_norm(c)?;
    Ok((c.iter().map(|v| v / nc).collect(), bias))
}

/// Gradients `(d sim / dx, d sim / dc)`.
pub fn sim_grad(
    kind: SimilarityKind,
    x: &[f64],
    c: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), SimilarityError> {
    check_dims(x, c)?;
    let grads = match kind {
        SimilarityKind::Vp | SimilarityKind::Vpb => {
            let nc = nonzero_norm(c)?;
            let xc = dot(x, c);
            let gx: Vec<f64> = c.iter().map(|v| v / nc).collect();
            let bias_term = if kind == SimilarityKind::Vpb {
                0.5 / nc
            } else {
                0.0
            };
            let gc = x
                .iter()
                .zip(c)
                .map(|(xi, ci)| xi / nc - xc * ci / (nc * nc * nc) - bias_term * ci)
                .collect();
            (gx, gc)
        }
        SimilarityKind::Dot => (c.to_vec(), x.to_vec()),
        SimilarityKind::SqEuclid => {
            let gx = x.iter().zip(c).map(|(a, b)| b - a).collect();
            let gc = x.iter().zip(c).map(|(a, b)| a - b).collect();
            (gx, gc)
        }
        SimilarityKind::Cosine => {
            let nc = nonzero_norm(c)?;
            let nx = nonzero_norm(x)?;
            let s = dot(x, c) / (nx * nc);
            let gx = x
                .iter()
                .zip(c)
                .map(|(xi, ci)| ci / (nx * nc) - s * xi / (nx * nx))
                .collect();
            let gc = x
                .iter()
                .zip(c)
                .map(|(xi, ci)| xi / (nx * nc) - s * ci / (nc * nc))
                .collect();
            (gx, gc)
        }
    };
    Ok(grads)
}
