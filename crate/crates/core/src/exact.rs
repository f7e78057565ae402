//! Exact floating-point summation.
//!
//! Partial sums are kept as a list of non-overlapping floats (Shewchuk's
//! expansion), so the represented sum is exact and independent of the
//! order in which terms or other accumulators are added. `value()` rounds
//! the exact sum once, correctly. This is what lets edge-side statistics
//! merged in any grouping reproduce direct fusion bit for bit.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(into = "Vec<f64>", try_from = "Vec<f64>")]
pub struct ExactSum {
    partials: Vec<f64>,
}

impl From<ExactSum> for Vec<f64> {
    fn from(s: ExactSum) -> Self {
        s.partials
    }
}

/// Rebuilds the expansion by re-adding each term, so any list of finite
/// floats yields a well-formed accumulator with the same exact sum.
impl TryFrom<Vec<f64>> for ExactSum {
    type Error = String;

    fn try_from(terms: Vec<f64>) -> Result<Self, Self::Error> {
        if let Some(bad) = terms.iter().find(|t| !t.is_finite()) {
            return Err(format!("non-finite partial sum {bad}"));
        }
        Ok(terms.into_iter().collect())
    }
}

impl ExactSum {
    pub fn new() -> Self {
        ExactSum { partials: Vec::new() }
    }

    /// Adds a finite term. Non-finite terms are a caller bug.
    pub fn add(&mut self, mut x: f64) {
        debug_assert!(x.is_finite(), "ExactSum only accepts finite terms");
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        if x != 0.0 {
            self.partials.push(x);
        }
    }

    pub fn merge(&mut self, other: &ExactSum) {
        for &p in &other.partials {
            self.add(p);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.partials.is_empty()
    }

    /// The exact sum rounded to nearest, ties to even.
    pub fn value(&self) -> f64 {
        let p = &self.partials;
        let mut n = p.len();
        if n == 0 {
            return 0.0;
        }
        n -= 1;
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = p[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        // Half-way case: the remaining partials decide the rounding direction.
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            let yr = x - hi;
            if y == yr {
                hi = x;
            }
        }
        hi
    }
}

impl PartialEq for ExactSum {
    fn eq(&self, other: &Self) -> bool {
        let mut diff = self.clone();
        for &p in &other.partials {
            diff.add(-p);
        }
        diff.is_zero()
    }
}

impl FromIterator<f64> for ExactSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = ExactSum::new();
        for x in iter {
            s.add(x);
        }
        s
    }
}
