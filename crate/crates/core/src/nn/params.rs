//! Parameter binding. Graph constructors ask a [`Binder`] for each named
//! tensor; the binder records the request (for `describe` and manifest
//! export) and pulls values from a [`ParamSource`]: seeded initialisation,
//! a loaded manifest, or a closure in tests. Missing and mis-shaped tensors
//! are collected so a failed load names all of them at once.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Result, ShapeMismatch, WeightError};

/// Deterministic initialisation rule for one tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Uniform on `[-bound, bound)`.
    Uniform {
        bound: f32,
    },
    Const(f32),
}

impl Init {
    /// Fan-in scaled uniform, `bound = 1 / sqrt(fan_in)`.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform {
            bound: 1.0 / (fan_in.max(1) as f32).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// One node of the graph definition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerInfo {
    pub name: String,
    pub kind: String,
    pub hyper: serde_json::Value,
    /// `(bins, channels)` per frame.
    pub input: (usize, usize),
    pub output: (usize, usize),
}

pub enum Fetch {
    Found(Vec<f32>),
    Missing,
    Shape(Vec<usize>),
}

pub trait ParamSource {
    fn fetch(&mut self, name: &str, shape: &[usize], init: Init) -> Fetch;
}

/// FNV-1a, used to derive a per-tensor stream from the global seed.
fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Values for one tensor. Each tensor draws from its own ChaCha8 stream
/// keyed by `seed ^ fnv1a(name)`, and uniforms are built from the top 24
/// bits of each `u32`, so the result is identical on every platform and
/// independent of construction order.
pub fn seeded_values(seed: u64, name: &str, len: usize, init: Init) -> Vec<f32> {
    match init {
        Init::Const(v) => vec![v; len],
        Init::Uniform { bound } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name));
            (0..len)
                .map(|_| {
                    let u = (rng.next_u32() >> 8) as f32 / (1u32 << 24) as f32;
                    (2.0 * u - 1.0) * bound
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SeedSource {
    pub seed: u64,
}

impl ParamSource for SeedSource {
    fn fetch(&mut self, name: &str, shape: &[usize], init: Init) -> Fetch {
        Fetch::Found(seeded_values(self.seed, name, shape.iter().product(), init))
    }
}

/// Closure-backed source, handy for hand-set weights in tests.
pub struct FnSource<F>(pub F);

impl<F: FnMut(&str, &[usize], Init) -> Vec<f32>> ParamSource for FnSource<F> {
    fn fetch(&mut self, name: &str, shape: &[usize], init: Init) -> Fetch {
        Fetch::Found((self.0)(name, shape, init))
    }
}

pub struct Binder<'a> {
    source: &'a mut dyn ParamSource,
    specs: Vec<ParamSpec>,
    layers: Vec<LayerInfo>,
    missing: Vec<String>,
    mismatched: Vec<ShapeMismatch>,
}

impl<'a> Binder<'a> {
    pub fn new(source: &'a mut dyn ParamSource) -> Self {
        Self {
            source,
            specs: Vec::new(),
            layers: Vec::new(),
            missing: Vec::new(),
            mismatched: Vec::new(),
        }
    }

    /// Returns zeros for tensors that fail to bind; the failure is reported
    /// by [`Binder::finish`].
    pub fn take(&mut self, name: &str, shape: &[usize], init: Init) -> Vec<f32> {
        let numel: usize = shape.iter().product();
        self.specs.push(ParamSpec {
            name: name.to_string(),
            shape: shape.to_vec(),
            init,
        });
        match self.source.fetch(name, shape, init) {
            Fetch::Found(v) if v.len() == numel => v,
            Fetch::Found(v) => {
                self.mismatched.push(ShapeMismatch {
                    name: name.to_string(),
                    expected: shape.to_vec(),
                    found: vec![v.len()],
                });
                vec![0.0; numel]
            }
            Fetch::Missing => {
                self.missing.push(name.to_string());
                vec![0.0; numel]
            }
            Fetch::Shape(found) => {
                self.mismatched.push(ShapeMismatch {
                    name: name.to_string(),
                    expected: shape.to_vec(),
                    found,
                });
                vec![0.0; numel]
            }
        }
    }

    pub fn layer(
        &mut self,
        name: &str,
        kind: &str,
        hyper: serde_json::Value,
        input: (usize, usize),
        output: (usize, usize),
    ) {
        self.layers.push(LayerInfo {
            name: name.to_string(),
            kind: kind.to_string(),
            hyper,
            input,
            output,
        });
    }

    pub fn finish(self) -> Result<(Vec<ParamSpec>, Vec<LayerInfo>)> {
        if !self.missing.is_empty() {
            return Err(WeightError::Missing {
                names: self.missing,
                mismatched: self.mismatched,
            }
            .into());
        }
        if !self.mismatched.is_empty() {
            return Err(WeightError::ShapeMismatch(self.mismatched).into());
        }
        Ok((self.specs, self.layers))
    }
}
