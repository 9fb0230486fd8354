//! Order-preserving parallel map over indices.

/// Evaluates `f(0..n)` on up to `jobs` scoped threads. Results come back in
/// index order, so output never depends on `jobs` as long as `f` only uses
/// per-index state.
pub fn par_map<T, F>(n: usize, jobs: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let jobs = jobs.clamp(1, n.max(1));
    if jobs == 1 {
        return (0..n).map(&f).collect();
    }
    let mut out: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(jobs);
    std::thread::scope(|scope| {
        for (c, slot) in out.chunks_mut(chunk).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (k, s) in slot.iter_mut().enumerate() {
                    *s = Some(f(c * chunk + k));
                }
            });
        }
    });
    out.into_iter().map(|v| v.expect("every index evaluated")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let serial = par_map(37, 1, |i| i * i);
        let threaded = par_map(37, 4, |i| i * i);
        assert_eq!(serial, threaded);
        assert!(par_map(0, 3, |i| i).is_empty());
    }
}
