use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named contiguous range of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

/// Flat parameter vector with a matching gradient buffer.
///
/// Segments are appended in allocation order, so they are disjoint and
/// cover the whole vector.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    flat: Vec<f64>,
    grad: Vec<f64>,
    segments: Vec<Segment>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds a store from a flat vector and its segment map.
    pub fn from_parts(flat: Vec<f64>, segments: Vec<Segment>) -> Result<Self> {
        let mut next = 0;
        for s in &segments {
            if s.start != next {
                return Err(Error::InvalidArgument(format!(
                    "segment '{}' starts at {} but {} was expected",
                    s.name, s.start, next
                )));
            }
            next += s.len;
        }
        if next != flat.len() {
            return Err(Error::InvalidArgument(format!(
                "segments cover {next} parameters, vector has {}",
                flat.len()
            )));
        }
        let grad = vec![0.0; flat.len()];
        Ok(Self { flat, grad, segments })
    }

    /// Appends a zero-initialized segment and returns its offset.
    pub fn alloc(&mut self, name: &str, len: usize) -> Result<usize> {
        if self.segment(name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate segment '{name}'")));
        }
        let start = self.flat.len();
        self.flat.resize(start + len, 0.0);
        self.grad.resize(start + len, 0.0);
        self.segments.push(Segment {
            name: name.to_string(),
            start,
            len,
        });
        Ok(start)
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub(crate) fn params_and_grads(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.flat, &mut self.grad)
    }
}
