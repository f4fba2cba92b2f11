//! Brute-force reference for the cache store's LRU behaviour.
//!
//! The reference keeps only an event history and recomputes everything
//! (presence, freshness, last access, eviction choice) by replaying it from
//! the beginning on every query.

use std::collections::BTreeMap;
use std::time::Duration;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use wcproxy::{CacheStore, Lookup, Timestamp};

#[derive(Clone, Debug)]
enum Event {
    Put { t: u64, key: String, size: u64, ttl: u64 },
    Hit { t: u64, key: String },
    Evict { key: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Hit,
    Expired,
    Miss,
}

#[derive(Default)]
pub struct ReferenceLru {
    history: Vec<Event>,
}

#[derive(Clone, Debug)]
struct Present {
    size: u64,
    stored_at: u64,
    ttl: u64,
    last_access: u64,
}

impl ReferenceLru {
    fn replay(&self) -> BTreeMap<String, Present> {
        let mut state: BTreeMap<String, Present> = BTreeMap::new();
        for ev in &self.history {
            match ev {
                Event::Put { t, key, size, ttl } => {
                    state.insert(
                        key.clone(),
                        Present {
                            size: *size,
                            stored_at: *t,
                            ttl: *ttl,
                            last_access: *t,
                        },
                    );
                }
                Event::Hit { t, key } => {
                    if let Some(p) = state.get_mut(key) {
                        p.last_access = p.last_access.max(*t);
                    }
                }
                Event::Evict { key } => {
                    state.remove(key);
                }
            }
        }
        state
    }

    pub fn put(&mut self, t: u64, key: &str, size: u64, ttl: u64) {
        self.history.push(Event::Put {
            t,
            key: key.to_string(),
            size,
            ttl,
        });
    }

    pub fn lookup(&mut self, t: u64, key: &str) -> Outcome {
        let state = self.replay();
        match state.get(key) {
            None => Outcome::Miss,
            Some(p) if t - p.stored_at > p.ttl => Outcome::Expired,
            Some(_) => {
                self.history.push(Event::Hit {
                    t,
                    key: key.to_string(),
                });
                Outcome::Hit
            }
        }
    }

    pub fn enforce(&mut self, max: u64) -> Vec<String> {
        let mut evicted = Vec::new();
        loop {
            let state = self.replay();
            let used: u64 = state.values().map(|p| p.size).sum();
            if used <= max {
                return evicted;
            }
            let victim = state
                .iter()
                .min_by(|a, b| (a.1.last_access, a.0).cmp(&(b.1.last_access, b.0)))
                .map(|(k, _)| k.clone())
                .unwrap();
            self.history.push(Event::Evict { key: victim.clone() });
            evicted.push(victim);
        }
    }

    pub fn keys(&self) -> Vec<String> {
        self.replay().into_keys().collect()
    }

    pub fn used(&self) -> u64 {
        self.replay().values().map(|p| p.size).sum()
    }
}

#[derive(Debug, Default)]
pub struct RunStats {
    pub evictions: usize,
    pub hits: usize,
    pub expired: usize,
    pub enforces: usize,
}

/// Drives a random sequence through both the store and the reference,
/// failing on the first divergence.
pub fn run_seed(seed: u64, ops: usize) -> Result<RunStats, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store = CacheStore::open(dir.path()).map_err(|e| e.to_string())?;
    let mut oracle = ReferenceLru::default();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut contents: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let mut stats = RunStats::default();
    let mut t = 0u64;

    for step in 0..ops {
        // repeated timestamps exercise the key-order tie break
        t += rng.random_range(0..2);
        let now = Timestamp::from_secs(t);
        let key = format!("/k{}", rng.random_range(0..24));
        match rng.random_range(0..10) {
            0..=3 => {
                let size = rng.random_range(0..200u64);
                let ttl = [3u64, 40, 1000][rng.random_range(0..3)];
                let body: Vec<u8> = (0..size).map(|i| (i as u8) ^ (step as u8)).collect();
                store
                    .put(&key, &body, Duration::from_secs(ttl), now)
                    .map_err(|e| e.to_string())?;
                oracle.put(t, &key, size, ttl);
                contents.insert(key, body);
            }
            4..=7 => {
                let expected = oracle.lookup(t, &key);
                let got = store.lookup(&key, now);
                let matches = match (&got, expected) {
                    (Lookup::Hit(bytes), Outcome::Hit) => Some(bytes) == contents.get(&key),
                    (Lookup::Expired, Outcome::Expired) | (Lookup::Miss, Outcome::Miss) => true,
                    _ => false,
                };
                if !matches {
                    return Err(format!("seed {seed} step {step}: lookup({key}) got {got:?}, reference {expected:?}"));
                }
                match expected {
                    Outcome::Hit => stats.hits += 1,
                    Outcome::Expired => stats.expired += 1,
                    Outcome::Miss => {}
                }
            }
            _ => {
                let max = rng.random_range(0..1500u64);
                let want = oracle.enforce(max);
                let got = store.enforce_capacity(max, now);
                if got != want {
                    return Err(format!("seed {seed} step {step}: evicted {got:?}, reference {want:?}"));
                }
                if store.used_bytes() > max {
                    return Err(format!("seed {seed} step {step}: used {} > max {max}", store.used_bytes()));
                }
                for k in &got {
                    contents.remove(k);
                }
                stats.evictions += got.len();
                stats.enforces += 1;
            }
        }
        if store.used_bytes() != oracle.used() {
            return Err(format!("seed {seed} step {step}: used {} vs reference {}", store.used_bytes(), oracle.used()));
        }
    }
    let mut survivors = store.keys();
    survivors.sort();
    if survivors != oracle.keys() {
        return Err(format!("seed {seed}: survivors {survivors:?} vs reference {:?}", oracle.keys()));
    }
    let on_disk = store.rescan_used_bytes().map_err(|e| e.to_string())?;
    if on_disk != store.used_bytes() {
        return Err(format!("seed {seed}: rescan {on_disk} vs index {}", store.used_bytes()));
    }
    Ok(stats)
}
