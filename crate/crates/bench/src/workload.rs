//! Workload description and the seeded per-client operation stream.

use std::collections::VecDeque;
use std::time::Duration;

use bytes::Bytes;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mix {
    pub put: f64,
    pub get_random: f64,
    pub get_recent: f64,
}

impl Default for Mix {
    fn default() -> Self {
        Self {
            put: 0.20,
            get_random: 0.40,
            get_recent: 0.40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSpec {
    pub clients: usize,
    /// Requests per second each client aims for.
    pub rate: f64,
    pub duration_secs: f64,
    pub mix: Mix,
    pub value_size: usize,
    pub key_space: u64,
    pub recent_window: usize,
    /// Per-request deadline.
    pub timeout_secs: f64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            clients: 16,
            rate: 500.0,
            duration_secs: 20.0,
            mix: Mix::default(),
            value_size: 64,
            key_space: 100_000,
            recent_window: 128,
            timeout_secs: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SpecError {
    #[error("mix fractions sum to {0}, expected 1")]
    MixSum(String),
    #[error("mix fractions must not be negative")]
    NegativeMix,
    #[error("at least one client is required")]
    NoClients,
    #[error("{0} must be positive")]
    NotPositive(&'static str),
}

impl WorkloadSpec {
    pub fn new(clients: usize, rate: f64, duration: Duration) -> Self {
        Self {
            clients,
            rate,
            duration_secs: duration.as_secs_f64(),
            ..Self::default()
        }
    }

    pub fn duration(&self) -> Duration {
        Duration::from_secs_f64(self.duration_secs)
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        let Mix {
            put,
            get_random,
            get_recent,
        } = self.mix;
        if put < 0.0 || get_random < 0.0 || get_recent < 0.0 {
            return Err(SpecError::NegativeMix);
        }
        let sum = put + get_random + get_recent;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(SpecError::MixSum(sum.to_string()));
        }
        if self.clients == 0 {
            return Err(SpecError::NoClients);
        }
        for (value, field) in [
            (self.rate, "rate"),
            (self.duration_secs, "duration_secs"),
            (self.timeout_secs, "timeout_secs"),
        ] {
            if value.is_nan() || value <= 0.0 {
                return Err(SpecError::NotPositive(field));
            }
        }
        if self.key_space == 0 {
            return Err(SpecError::NotPositive("key_space"));
        }
        if self.recent_window == 0 {
            return Err(SpecError::NotPositive("recent_window"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    Put,
    GetRandom,
    GetRecent,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Op {
    pub kind: OpKind,
    pub key: String,
    /// Present for puts.
    pub value: Option<Bytes>,
}

impl Op {
    pub fn method(&self) -> &'static str {
        match self.kind {
            OpKind::Put => "PUT",
            _ => "GET",
        }
    }

    pub fn path(&self) -> String {
        format!("/kv/{}", self.key)
    }
}

/// Seed for the `index`-th client of a run seeded with `seed`.
pub fn client_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Deterministic operation generator for one client.
pub struct WorkloadStream {
    rng: StdRng,
    mix: Mix,
    value_size: usize,
    key_space: u64,
    window: usize,
    recent: VecDeque<String>,
}

impl WorkloadStream {
    pub fn new(spec: &WorkloadSpec, seed: u64) -> Self {
        Self {
            rng: StdRng::seed_from_u64(seed),
            mix: spec.mix,
            value_size: spec.value_size,
            key_space: spec.key_space,
            window: spec.recent_window,
            recent: VecDeque::with_capacity(spec.recent_window),
        }
    }

    /// Picks one of `n` items, consuming the same stream as the ops.
    pub fn pick(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    fn random_key(&mut self) -> String {
        format!("k{}", self.rng.random_range(0..self.key_space))
    }

    fn value(&mut self) -> Bytes {
        const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
        let mut out = Vec::with_capacity(self.value_size);
        let mut bits = 0u64;
        for i in 0..self.value_size {
            if i % 10 == 0 {
                bits = self.rng.random();
            }
            out.push(ALPHABET[(bits % ALPHABET.len() as u64) as usize]);
            bits /= ALPHABET.len() as u64;
        }
        Bytes::from(out)
    }

    pub fn next_op(&mut self) -> Op {
        let draw: f64 = self.rng.random();
        if draw < self.mix.put {
            let key = self.random_key();
            let value = self.value();
            Op {
                kind: OpKind::Put,
                key,
                value: Some(value),
            }
        } else if draw < self.mix.put + self.mix.get_random {
            Op {
                kind: OpKind::GetRandom,
                key: self.random_key(),
                value: None,
            }
        } else {
            let key = if self.recent.is_empty() {
                self.random_key()
            } else {
                let i = self.rng.random_range(0..self.recent.len());
                self.recent[i].clone()
            };
            Op {
                kind: OpKind::GetRecent,
                key,
                value: None,
            }
        }
    }

    /// Records a put the target acknowledged, making it eligible for
    /// recent reads.
    pub fn confirm_put(&mut self, key: String) {
        if self.recent.len() == self.window {
            self.recent.pop_front();
        }
        self.recent.push_back(key);
    }

    /// The first `n` ops, assuming every put succeeds.
    pub fn generate(&mut self, n: usize) -> Vec<Op> {
        (0..n)
            .map(|_| {
                let op = self.next_op();
                if op.kind == OpKind::Put {
                    self.confirm_put(op.key.clone());
                }
                op
            })
            .collect()
    }
}
