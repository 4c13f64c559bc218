use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

/// Runs `f` over `jobs` on at most `workers` threads. Results come back in
/// job order regardless of completion order. After the first failure no new
/// jobs are started; jobs never started are `None`.
pub(crate) fn run_bounded<J, T, E, F>(jobs: &[J], workers: usize, f: F) -> Vec<Option<Result<T, E>>>
where
    J: Sync,
    T: Send,
    E: Send,
    F: Fn(&J) -> Result<T, E> + Sync,
{
    let results: Vec<Mutex<Option<Result<T, E>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let halted = AtomicBool::new(false);
    let workers = workers.clamp(1, jobs.len().max(1));
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if halted.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let out = f(&jobs[i]);
                if out.is_err() {
                    halted.store(true, Ordering::SeqCst);
                }
                *results[i].lock().unwrap() = Some(out);
            });
        }
    });
    results.into_iter().map(|m| m.into_inner().unwrap()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keeps_order() {
        let jobs: Vec<u64> = (0..100).collect();
        let out = run_bounded(&jobs, 8, |&j| {
            std::thread::sleep(std::time::Duration::from_micros((100 - j) * 10));
            Ok::<_, ()>(j * 2)
        });
        let values: Vec<u64> = out.into_iter().map(|r| r.unwrap().unwrap()).collect();
        assert_eq!(values, jobs.iter().map(|j| j * 2).collect::<Vec<_>>());
    }

    #[test]
    fn halts_after_failure() {
        let jobs: Vec<u32> = (0..50).collect();
        let out = run_bounded(&jobs, 1, |&j| if j == 10 { Err(j) } else { Ok(j) });
        assert!(matches!(out[10], Some(Err(10))));
        assert!(out[11..].iter().all(Option::is_none));
    }

    #[test]
    fn empty_jobs() {
        let out = run_bounded(&Vec::<u8>::new(), 4, |_| Ok::<u8, ()>(0));
        assert!(out.is_empty());
    }
}
