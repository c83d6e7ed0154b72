use std::sync::OnceLock;

use rayon::ThreadPool;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "RAM3D_THREADS";

/// Work is split into fixed-size chunks whose partial results are merged in
/// chunk order, so results do not depend on the worker count.
pub const CHUNK_RAYS: usize = 64;

static POOL: OnceLock<ThreadPool> = OnceLock::new();

pub fn pool() -> &'static ThreadPool {
    POOL.get_or_init(|| {
        let threads = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .thread_name(|i| format!("ram3d-worker-{i}"))
            .build()
            .expect("thread pool")
    })
}

/// SplitMix64 finalizer.
#[inline]
pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based seed derivation: the same parts always give the same seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5241_4D33_44u64, |acc, &p| splitmix(acc ^ splitmix(p)))
}
