//! Oracle suites shared by the per-suite tests and the acceptance run. Each
//! suite returns named checks instead of panicking so the acceptance run
//! can report every line.

#![allow(dead_code)]

pub mod oracles;
pub mod reference;

use std::fmt::Display;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Display) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.to_string(),
        }
    }
}

/// Panics with every failing check listed.
pub fn assert_all(checks: &[Check]) {
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{}: {}", c.name, c.detail))
        .collect();
    assert!(failed.is_empty(), "failing checks:\n{}", failed.join("\n"));
}

/// Small deterministic generator for test inputs (splitmix64).
pub struct TestRng(u64);

impl TestRng {
    pub fn new(seed: u64) -> Self {
        TestRng(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.uniform() * n as f64) as usize
    }
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> elpips_core::Tensor {
    let mut r = TestRng::new(seed);
    elpips_core::Tensor::from_fn(shape, |_| r.range(lo, hi) as f32)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
