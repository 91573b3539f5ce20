use std::ops::{Add, AddAssign};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

/// Tallies of homomorphic and protocol events.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounter {
    pub mult_plain: u64,
    pub mult_cipher: u64,
    pub rotate: u64,
    pub add: u64,
    pub add_plain: u64,
    pub encrypt: u64,
    pub decrypt: u64,
    pub refresh_events: u64,
    pub mpc_bytes: u64,
}

impl OpCounter {
    /// Field-wise sum.
    pub fn merge(&self, other: &OpCounter) -> OpCounter {
        *self + *other
    }

    /// Field-wise difference against an earlier snapshot of the same counter.
    pub fn since(&self, earlier: &OpCounter) -> OpCounter {
        OpCounter {
            mult_plain: self.mult_plain - earlier.mult_plain,
            mult_cipher: self.mult_cipher - earlier.mult_cipher,
            rotate: self.rotate - earlier.rotate,
            add: self.add - earlier.add,
            add_plain: self.add_plain - earlier.add_plain,
            encrypt: self.encrypt - earlier.encrypt,
            decrypt: self.decrypt - earlier.decrypt,
            refresh_events: self.refresh_events - earlier.refresh_events,
            mpc_bytes: self.mpc_bytes - earlier.mpc_bytes,
        }
    }

    /// The homomorphic part only (everything but `mpc_bytes`).
    pub fn he_only(&self) -> OpCounter {
        OpCounter { mpc_bytes: 0, ..*self }
    }
}

impl Add for OpCounter {
    type Output = OpCounter;

    fn add(self, o: OpCounter) -> OpCounter {
        OpCounter {
            mult_plain: self.mult_plain + o.mult_plain,
            mult_cipher: self.mult_cipher + o.mult_cipher,
            rotate: self.rotate + o.rotate,
            add: self.add + o.add,
            add_plain: self.add_plain + o.add_plain,
            encrypt: self.encrypt + o.encrypt,
            decrypt: self.decrypt + o.decrypt,
            refresh_events: self.refresh_events + o.refresh_events,
            mpc_bytes: self.mpc_bytes + o.mpc_bytes,
        }
    }
}

impl AddAssign for OpCounter {
    fn add_assign(&mut self, o: OpCounter) {
        *self = *self + o;
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Event {
    MultPlain,
    MultCipher,
    Rotate,
    Add,
    AddPlain,
    Encrypt,
    Decrypt,
    Refresh,
}

/// Shared counter; increments from any thread commute.
#[derive(Debug, Default)]
pub(crate) struct AtomicCounter {
    cells: [AtomicU64; 9],
}

impl AtomicCounter {
    pub(crate) fn bump(&self, event: Event) {
        let idx = match event {
            Event::MultPlain => 0,
            Event::MultCipher => 1,
            Event::Rotate => 2,
            Event::Add => 3,
            Event::AddPlain => 4,
            Event::Encrypt => 5,
            Event::Decrypt => 6,
            Event::Refresh => 7,
        };
        self.cells[idx].fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn add_bytes(&self, bytes: u64) {
        self.cells[8].fetch_add(bytes, Ordering::Relaxed);
    }

    pub(crate) fn snapshot(&self) -> OpCounter {
        let c = |i: usize| self.cells[i].load(Ordering::Relaxed);
        OpCounter {
            mult_plain: c(0),
            mult_cipher: c(1),
            rotate: c(2),
            add: c(3),
            add_plain: c(4),
            encrypt: c(5),
            decrypt: c(6),
            refresh_events: c(7),
            mpc_bytes: c(8),
        }
    }

    pub(crate) fn reset(&self) {
        for cell in &self.cells {
            cell.store(0, Ordering::Relaxed);
        }
    }
}
