//! Threaded round executor.
//!
//! Client tasks within a round are independent, so they can run on any
//! number of workers without affecting results: all randomness is keyed
//! by `(client id, round)` and outputs are returned in task order. The
//! executor also measures per-task wall time for telemetry.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Instant;

use ppfl_core::federation::{ClientExecutor, ClientTask, FedError, TaskOutput};

pub struct ThreadPoolExecutor {
    workers: usize,
}

impl ThreadPoolExecutor {
    pub fn new(workers: usize) -> Self {
        ThreadPoolExecutor { workers: workers.max(1) }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }
}

impl ClientExecutor for ThreadPoolExecutor {
    fn run(
        &self,
        tasks: Vec<ClientTask>,
        work: &(dyn Fn(ClientTask) -> Result<TaskOutput, FedError> + Sync),
    ) -> Vec<Result<TaskOutput, FedError>> {
        let timed = |task: ClientTask| {
            let start = Instant::now();
            let mut out = work(task);
            if let Ok(ref mut o) = out {
                o.seconds = start.elapsed().as_secs_f64();
            }
            out
        };

        if self.workers == 1 || tasks.len() <= 1 {
            return tasks.into_iter().map(timed).collect();
        }

        let n = tasks.len();
        let queue: Mutex<VecDeque<(usize, ClientTask)>> =
            Mutex::new(tasks.into_iter().enumerate().collect());
        let results: Mutex<Vec<Option<Result<TaskOutput, FedError>>>> =
            Mutex::new((0..n).map(|_| None).collect());

        std::thread::scope(|scope| {
            for _ in 0..self.workers.min(n) {
                scope.spawn(|| loop {
                    let next = queue.lock().expect("queue lock").pop_front();
                    match next {
                        Some((idx, task)) => {
                            let out = timed(task);
                            results.lock().expect("results lock")[idx] = Some(out);
                        }
                        None => break,
                    }
                });
            }
        });

        results
            .into_inner()
            .expect("results lock")
            .into_iter()
            .map(|slot| slot.expect("every task produces an output"))
            .collect()
    }
}
