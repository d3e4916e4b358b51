use rayon::prelude::*;
use rayon::ThreadPool;

use semidpo_core::exec::Executor;

use crate::error::{CliError, CliResult};

/// Runs index maps on a dedicated rayon pool, or inline for one worker.
/// Results are collected in index order either way.
pub struct Workers {
    pool: Option<ThreadPool>,
}

impl Workers {
    pub fn new(count: usize) -> CliResult<Self> {
        if count == 0 {
            return Err(CliError::Config("workers must be at least 1".into()));
        }
        let pool = if count == 1 {
            None
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(count)
                .build()
                .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
            Some(pool)
        };
        Ok(Self { pool })
    }
}

impl Executor for Workers {
    fn map_indexed<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match &self.pool {
            None => (0..n).map(f).collect(),
            Some(pool) => pool.install(|| (0..n).into_par_iter().map(f).collect()),
        }
    }
}
