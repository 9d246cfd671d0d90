use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use serde::Serialize;
use sha2::{Digest, Sha256};

/// `(run_id, params digest)`.
pub type CacheKey = (String, String);

/// Digest of a parameter set: sha256 over its JSON encoding, tagged with the
/// table kind so different tables never share a key.
pub fn params_digest(kind: &str, params: &impl Serialize) -> String {
    let mut hasher = Sha256::new();
    hasher.update(kind.as_bytes());
    hasher.update([0]);
    hasher.update(serde_json::to_vec(params).expect("params serialize"));
    hex::encode(&hasher.finalize()[..16])
}

type Slot<T, E> = Arc<OnceLock<Result<Arc<T>, E>>>;

/// Memoizes computed tables. Concurrent misses on one key block on a shared
/// slot so the computation runs once.
pub struct SingleFlight<T, E> {
    slots: Mutex<HashMap<CacheKey, Slot<T, E>>>,
    capacity: usize,
    computations: AtomicUsize,
}

impl<T, E: Clone> SingleFlight<T, E> {
    pub fn new(capacity: usize) -> Self {
        Self { slots: Mutex::new(HashMap::new()), capacity, computations: AtomicUsize::new(0) }
    }

    pub fn get_or_compute(&self, key: CacheKey, compute: impl FnOnce() -> Result<T, E>) -> Result<Arc<T>, E> {
        let slot = {
            let mut slots = self.slots.lock().unwrap_or_else(|e| e.into_inner());
            if slots.len() >= self.capacity && !slots.contains_key(&key) {
                // Drop finished entries nobody is waiting on.
                slots.retain(|_, slot| Arc::strong_count(slot) > 1 || slot.get().is_none());
            }
            slots.entry(key).or_default().clone()
        };
        slot.get_or_init(|| {
            self.computations.fetch_add(1, Ordering::Relaxed);
            compute().map(Arc::new)
        })
        .clone()
    }

    /// Number of times a value was actually computed.
    pub fn computations(&self) -> usize {
        self.computations.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Barrier;

    fn key(s: &str) -> CacheKey {
        ("run".into(), s.into())
    }

    #[test]
    fn concurrent_misses_compute_once() {
        let cache: Arc<SingleFlight<u64, String>> = Arc::new(SingleFlight::new(16));
        let barrier = Arc::new(Barrier::new(8));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let (cache, barrier) = (cache.clone(), barrier.clone());
                std::thread::spawn(move || {
                    barrier.wait();
                    cache
                        .get_or_compute(key("a"), || {
                            std::thread::sleep(std::time::Duration::from_millis(20));
                            Ok(42)
                        })
                        .unwrap()
                })
            })
            .collect();
        for h in handles {
            assert_eq!(*h.join().unwrap(), 42);
        }
        assert_eq!(cache.computations(), 1);
    }

    #[test]
    fn errors_are_memoized_per_key() {
        let cache: SingleFlight<u64, String> = SingleFlight::new(16);
        assert_eq!(cache.get_or_compute(key("x"), || Err("bad".into())), Err("bad".to_string()));
        assert_eq!(cache.get_or_compute(key("x"), || Ok(1)), Err("bad".to_string()));
        assert_eq!(*cache.get_or_compute(key("y"), || Ok(1)).unwrap(), 1);
        assert_eq!(cache.computations(), 2);
    }

    #[test]
    fn capacity_evicts_finished_entries() {
        let cache: SingleFlight<usize, String> = SingleFlight::new(2);
        for i in 0..5 {
            cache.get_or_compute(key(&i.to_string()), || Ok(i)).unwrap();
        }
        assert!(cache.slots.lock().unwrap().len() <= 2);
    }

    #[test]
    fn digest_depends_on_kind_and_params() {
        let a = params_digest("stability", &(0.05, 1.0));
        assert_eq!(a, params_digest("stability", &(0.05, 1.0)));
        assert_ne!(a, params_digest("stability", &(0.5, 1.0)));
        assert_ne!(a, params_digest("cooc", &(0.05, 1.0)));
    }
}
