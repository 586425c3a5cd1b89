//! Seeded phantom sets for training, validation and testing.

use cstn_core::mri::MultiEchoVolume;
use cstn_core::phantom::{generate_phantom, DEFAULT_ECHO_TIMES_MS};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::Result;
use crate::eval::thread_pool;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train = 1,
    Val = 2,
    Test = 3,
}

/// Phantom seed of item `index` of `split`; the splits never share a seed.
pub fn phantom_seed(base: u64, split: Split, index: usize) -> u64 {
    (base << 24) ^ ((split as u64) << 20) ^ index as u64
}

/// The default echo times, extended by the same 13 ms spacing past three.
pub fn echo_times(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| DEFAULT_ECHO_TIMES_MS.get(k).copied().unwrap_or(14.0 + 13.0 * k as f64))
        .collect()
}

/// `count` phantoms of one split, generated on up to `threads` workers.
pub fn phantom_set(base: u64, split: Split, count: usize, size: usize, echoes: usize, threads: usize) -> Result<Vec<MultiEchoVolume>> {
    let tes = echo_times(echoes);
    thread_pool(threads)?.install(|| {
        (0..count)
            .into_par_iter()
            .map(|i| Ok(generate_phantom(phantom_seed(base, split, i), size, size, &tes)?.0))
            .collect()
    })
}

/// The held-out test phantoms of `cfg.eval`, named `test-000`, ….
pub fn test_scans(cfg: &RunConfig, threads: usize) -> Result<Vec<(String, MultiEchoVolume)>> {
    let e = &cfg.eval;
    let vols = phantom_set(e.seed, Split::Test, e.test_phantoms, e.phantom_size, cfg.model.in_echoes, threads)?;
    Ok(vols.into_iter().enumerate().map(|(i, v)| (format!("test-{i:03}"), v)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_use_disjoint_seeds() {
        let mut seen = std::collections::HashSet::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            for i in 0..1000 {
                assert!(seen.insert(phantom_seed(7, split, i)));
            }
        }
    }

    #[test]
    fn echo_times_extend_defaults() {
        assert_eq!(echo_times(1), vec![14.0]);
        assert_eq!(echo_times(4), vec![14.0, 27.0, 40.0, 53.0]);
    }
}
