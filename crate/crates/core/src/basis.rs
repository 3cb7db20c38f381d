//! Monomial bases over named state features.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filtering::StateSnapshot;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feature {
    Price,
    Filter { measure: usize, state: usize },
    Density { measure: usize },
}

impl Feature {
    pub fn parse(name: &str) -> Result<Self> {
        let bad = || Error::Unsupported(format!("unknown basis feature `{name}`"));
        let name = name.trim();
        if name == "F" {
            return Ok(Feature::Price);
        }
        let idx = |s: &str| -> Result<Vec<usize>> {
            s.split("][")
                .map(|p| p.trim_matches(|c| c == '[' || c == ']').parse::<usize>().map_err(|_| bad()))
                .collect()
        };
        if let Some(rest) = name.strip_prefix("pi") {
            match idx(rest)?.as_slice() {
                [k, i] => return Ok(Feature::Filter { measure: *k, state: *i }),
                _ => return Err(bad()),
            }
        }
        if let Some(rest) = name.strip_prefix('z') {
            match idx(rest)?.as_slice() {
                [k] => return Ok(Feature::Density { measure: *k }),
                _ => return Err(bad()),
            }
        }
        Err(bad())
    }

    #[inline]
    pub fn read(&self, f: f64, pi: &[f64], z: &[f64], states: usize) -> f64 {
        match *self {
            Feature::Price => f,
            Feature::Filter { measure, state } => pi[measure * states + state],
            Feature::Density { measure } => z[measure],
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Feature::Price => write!(f, "F"),
            Feature::Filter { measure, state } => write!(f, "pi[{measure}][{state}]"),
            Feature::Density { measure } => write!(f, "z[{measure}]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisDescriptor {
    pub degree: usize,
    pub features: Vec<String>,
    pub include_cross_terms: bool,
}

impl BasisDescriptor {
    pub fn new(degree: usize, features: Vec<String>, include_cross_terms: bool) -> Self {
        Self { degree, features, include_cross_terms }
    }

    /// Exponent vectors: constant first, then by total degree, lexicographically descending
    /// within a degree (x^2, xy, y^2, ...).
    pub fn exponents(&self) -> Vec<Vec<u32>> {
        let n = self.features.len();
        let mut out = vec![vec![0; n]];
        for d in 1..=self.degree as u32 {
            if self.include_cross_terms {
                let mut cur = vec![0; n];
                compositions(d, 0, &mut cur, &mut out);
            } else {
                for i in 0..n {
                    let mut e = vec![0; n];
                    e[i] = d;
                    out.push(e);
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.exponents().len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn compile(&self) -> Result<CompiledBasis> {
        let features = self.features.iter().map(|s| Feature::parse(s)).collect::<Result<Vec<_>>>()?;
        let exps = self.exponents();
        let index: HashMap<&Vec<u32>, usize> = exps.iter().enumerate().map(|(i, e)| (e, i)).collect();
        let mut recipe = Vec::with_capacity(exps.len());
        for e in exps.iter().skip(1) {
            let var = e.iter().position(|&p| p > 0).expect("non-constant monomial");
            let mut parent = e.clone();
            parent[var] -= 1;
            recipe.push((index[&parent], var));
        }
        Ok(CompiledBasis { features, recipe, exps: exps[1..].to_vec(), degree: self.degree })
    }
}

fn compositions(left: u32, pos: usize, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    let n = cur.len();
    if pos == n - 1 {
        cur[pos] = left;
        out.push(cur.clone());
        cur[pos] = 0;
        return;
    }
    for p in (0..=left).rev() {
        cur[pos] = p;
        compositions(left - p, pos + 1, cur, out);
    }
    cur[pos] = 0;
}

/// Basis ready for repeated evaluation: each monomial is its parent times one feature.
#[derive(Debug, Clone)]
pub struct CompiledBasis {
    pub features: Vec<Feature>,
    recipe: Vec<(usize, usize)>,
    /// Exponents of the non-constant terms.
    exps: Vec<Vec<u32>>,
    degree: usize,
}

impl CompiledBasis {
    pub fn len(&self) -> usize {
        self.recipe.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn read_features(&self, f: f64, pi: &[f64], z: &[f64], states: usize, out: &mut [f64]) {
        for (o, feat) in out.iter_mut().zip(&self.features) {
            *o = feat.read(f, pi, z, states);
        }
    }

    pub fn expand(&self, x: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
        for (i, &(parent, var)) in self.recipe.iter().enumerate() {
            out[i + 1] = out[parent] * x[var];
        }
    }

    /// Same span as `expand`, with each x^e replaced by the probabilists' Hermite polynomial
    /// He_e(x): much better conditioned on standardised features.
    pub fn expand_hermite(&self, x: &[f64], out: &mut [f64]) {
        let d = self.degree + 1;
        let mut stack = [0.0f64; 48];
        let mut heap;
        let he: &mut [f64] = if x.len() * d <= stack.len() {
            &mut stack
        } else {
            heap = vec![0.0; x.len() * d];
            &mut heap
        };
        for (i, &xi) in x.iter().enumerate() {
            let h = &mut he[i * d..(i + 1) * d];
            h[0] = 1.0;
            if d > 1 {
                h[1] = xi;
            }
            for e in 2..d {
                h[e] = xi * h[e - 1] - (e - 1) as f64 * h[e - 2];
            }
        }
        out[0] = 1.0;
        for (o, e) in out[1..].iter_mut().zip(&self.exps) {
            *o = e.iter().enumerate().map(|(i, &p)| he[i * d + p as usize]).product();
        }
    }

    pub fn max_measure(&self) -> Option<usize> {
        self.features
            .iter()
            .filter_map(|f| match f {
                Feature::Price => None,
                Feature::Filter { measure, .. } | Feature::Density { measure } => Some(*measure),
            })
            .max()
    }
}

/// Raw monomial expansion of a state snapshot.
pub fn expand_basis(snapshot: &StateSnapshot, basis: &BasisDescriptor) -> Result<Vec<f64>> {
    let c = basis.compile()?;
    let mut x = vec![0.0; c.n_features()];
    c.read_features(snapshot.f, &snapshot.pi, &snapshot.z, snapshot.j, &mut x);
    let mut out = vec![0.0; c.len()];
    c.expand(&x, &mut out);
    Ok(out)
}

/// Features that coordinate the state: the price, the free filter coordinates of every distinct
/// prior, and the density ratio of every distinct non-reference prior.
pub fn default_features(priors: &[Vec<f64>], q: usize) -> Vec<String> {
    let j = priors.first().map_or(0, |r| r.len());
    let mut distinct: Vec<usize> = vec![q];
    for (k, row) in priors.iter().enumerate() {
        if distinct.iter().all(|&d| priors[d] != *row) {
            distinct.push(k);
        }
    }
    let mut out = vec!["F".to_string()];
    for &k in &distinct {
        for i in 0..j.saturating_sub(1) {
            out.push(format!("pi[{k}][{i}]"));
        }
    }
    for &k in distinct.iter().skip(1) {
        out.push(format!("z[{k}]"));
    }
    out
}
