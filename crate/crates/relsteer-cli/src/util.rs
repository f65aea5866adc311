//! Output transactionality and the worker pool.

use std::path::{Path, PathBuf};

use anyhow::Result;

/// Deletes registered output files on drop unless the run committed,
/// so a failed command never leaves partial artifacts behind.
pub struct OutputGuard {
    paths: Vec<PathBuf>,
    committed: bool,
}

impl OutputGuard {
    pub fn new() -> Self {
        OutputGuard {
            paths: Vec::new(),
            committed: false,
        }
    }

    pub fn register(&mut self, path: &Path) {
        self.paths.push(path.to_path_buf());
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.paths {
                let _ = std::fs::remove_file(p);
            }
        }
    }
}

/// Worker count: `RELSTEER_WORKERS` if set and positive, else the
/// available parallelism, else 1.
pub fn worker_count() -> usize {
    if let Ok(v) = std::env::var("RELSTEER_WORKERS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                return n;
            }
        }
    }
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Runs `f` over the items on `workers` threads and returns results in
/// input order, so parallelism never changes output bytes. Items are
/// dealt round-robin; each item's work must be independent.
pub fn par_map<T, R, F>(items: Vec<T>, workers: usize, f: F) -> Result<Vec<R>>
where
    T: Send,
    R: Send,
    F: Fn(T) -> Result<R> + Sync,
{
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.into_iter().map(&f).collect();
    }
    let indexed: Vec<(usize, T)> = items.into_iter().enumerate().collect();
    let mut shards: Vec<Vec<(usize, T)>> = (0..workers).map(|_| Vec::new()).collect();
    for (i, item) in indexed {
        shards[i % workers].push((i, item));
    }
    let results: Vec<Vec<(usize, Result<R>)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = shards
            .into_iter()
            .map(|shard| {
                scope.spawn(|| {
                    shard
                        .into_iter()
                        .map(|(i, item)| (i, f(item)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out: Vec<Option<R>> = Vec::new();
    let mut first_err: Option<anyhow::Error> = None;
    for (i, r) in results.into_iter().flatten() {
        if out.len() <= i {
            out.resize_with(i + 1, || None);
        }
        match r {
            Ok(v) => out[i] = Some(v),
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    Ok(out.into_iter().map(|v| v.expect("all indices filled")).collect())
}
