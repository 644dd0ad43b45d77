//! Deterministic 60/20/20 split keyed on the trip id.
//!
//! The bucket is the 64-bit FNV-1a hash of the id's UTF-8 bytes modulo 100.

use std::fmt;
use std::hash::Hasher;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "TRAIN",
            Split::Val => "VAL",
            Split::Test => "TEST",
        })
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

pub fn split_of(trip_id: &str) -> Split {
    match fnv1a64(trip_id.as_bytes()) % 100 {
        0..=59 => Split::Train,
        60..=79 => Split::Val,
        _ => Split::Test,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitStats {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitStats {
    pub fn from_ids<'a>(ids: impl IntoIterator<Item = &'a str>) -> Self {
        let mut s = SplitStats::default();
        for id in ids {
            match split_of(id) {
                Split::Train => s.train += 1,
                Split::Val => s.val += 1,
                Split::Test => s.test += 1,
            }
        }
        s
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    /// Percentages of (train, val, test).
    pub fn percentages(&self) -> (f64, f64, f64) {
        let n = self.total().max(1) as f64;
        (
            100.0 * self.train as f64 / n,
            100.0 * self.val as f64 / n,
            100.0 * self.test as f64 / n,
        )
    }

    pub fn to_text(&self) -> String {
        let (a, b, c) = self.percentages();
        format!(
            "total={}\ntrain={}\nval={}\ntest={}\ntrain_pct={a:.3}\nval_pct={b:.3}\ntest_pct={c:.3}\n",
            self.total(),
            self.train,
            self.val,
            self.test
        )
    }
}
