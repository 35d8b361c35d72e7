use crate::Tick;

pub const DEFAULT_BUCKET_CAPACITY: u64 = 10;
pub const DEFAULT_REFILL_PER_TICK: u64 = 1;

/// Token bucket guarding the transfer validation path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBucket {
    capacity: u64,
    refill_per_tick: u64,
    tokens: u64,
    last_refill: Tick,
}

impl TokenBucket {
    /// Starts full.
    pub fn new(capacity: u64, refill_per_tick: u64) -> Self {
        Self {
            capacity,
            refill_per_tick,
            tokens: capacity,
            last_refill: 0,
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn refill_per_tick(&self) -> u64 {
        self.refill_per_tick
    }

    pub fn tokens(&self) -> u64 {
        self.tokens
    }

    /// Credits the ticks elapsed since the last refill. Time never runs
    /// backwards here; an earlier `now` is ignored.
    pub fn refill(&mut self, now: Tick) {
        if now > self.last_refill {
            let earned = (now - self.last_refill).saturating_mul(self.refill_per_tick);
            self.tokens = self.tokens.saturating_add(earned).min(self.capacity);
            self.last_refill = now;
        }
    }

    pub fn try_take(&mut self, now: Tick) -> bool {
        self.refill(now);
        if self.tokens == 0 {
            return false;
        }
        self.tokens -= 1;
        true
    }
}

impl Default for TokenBucket {
    fn default() -> Self {
        Self::new(DEFAULT_BUCKET_CAPACITY, DEFAULT_REFILL_PER_TICK)
    }
}
