//! Chunked reductions whose result does not depend on the worker count.
//!
//! Every dot product is split into fixed blocks of [`BLOCK`] elements; block
//! partial sums are computed in parallel and then added strictly in block
//! order. Callers that stream a long vector in pieces whose lengths are
//! multiples of [`BLOCK`] get bit-identical results to a single in-memory call
//! by feeding the pieces into one [`OrderedSum`].

use rayon::prelude::*;

pub const BLOCK: usize = 4096;

/// Accumulates block partials in order.
#[derive(Default)]
pub struct OrderedSum {
    partials: Vec<f64>,
}

impl OrderedSum {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds the block partials of `a · b` for one piece of the vectors.
    pub fn add_dot(&mut self, a: &[f64], b: &[f32]) {
        debug_assert_eq!(a.len(), b.len());
        let partials: Vec<f64> = a
            .par_chunks(BLOCK)
            .zip(b.par_chunks(BLOCK))
            .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| p * q as f64).sum::<f64>())
            .collect();
        self.partials.extend(partials);
    }

    pub fn add_sum_sq(&mut self, a: &[f64]) {
        let partials: Vec<f64> = a
            .par_chunks(BLOCK)
            .map(|x| x.iter().map(|p| p * p).sum::<f64>())
            .collect();
        self.partials.extend(partials);
    }

    pub fn total(&self) -> f64 {
        self.partials.iter().sum()
    }
}

pub fn dot(a: &[f64], b: &[f32]) -> f64 {
    let mut acc = OrderedSum::new();
    acc.add_dot(a, b);
    acc.total()
}

pub fn norm(a: &[f64]) -> f64 {
    let mut acc = OrderedSum::new();
    acc.add_sum_sq(a);
    acc.total().sqrt()
}

/// `a -= c * b`, element-wise.
pub fn sub_scaled(a: &mut [f64], c: f64, b: &[f32]) {
    a.par_chunks_mut(BLOCK)
        .zip(b.par_chunks(BLOCK))
        .for_each(|(x, y)| {
            for (p, &q) in x.iter_mut().zip(y) {
                *p -= c * q as f64;
            }
        });
}
