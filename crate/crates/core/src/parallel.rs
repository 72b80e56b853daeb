//! Order-preserving chunked map over scoped threads.

use crate::error::{Error, Result};

/// Applies `f` to consecutive chunks of `items` on up to `threads` workers and
/// concatenates the results in input order. Chunk boundaries depend only on `chunk`,
/// so the output does not depend on `threads` whenever `f` is row-independent.
pub fn map_chunks<T, R, F>(items: &[T], chunk: usize, threads: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> Result<Vec<R>> + Sync,
{
    let chunks: Vec<&[T]> = items.chunks(chunk.max(1)).collect();
    let threads = threads.max(1).min(chunks.len().max(1));
    if threads == 1 {
        let mut out = Vec::with_capacity(items.len());
        for c in chunks {
            out.extend(f(c)?);
        }
        return Ok(out);
    }
    let mut slots: Vec<Option<Result<Vec<R>>>> = (0..chunks.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                let (chunks, f) = (&chunks, &f);
                s.spawn(move || {
                    (w..chunks.len()).step_by(threads).map(|i| (i, f(chunks[i]))).collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            match h.join() {
                Ok(done) => {
                    for (i, r) in done {
                        slots[i] = Some(r);
                    }
                }
                Err(_) => {
                    slots.push(Some(Err(Error::Internal("worker thread panicked".into()))));
                }
            }
        }
    });
    let mut out = Vec::with_capacity(items.len());
    for s in slots {
        out.extend(s.ok_or_else(|| Error::Internal("missing chunk result".into()))??);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_independent_of_thread_count() {
        let xs: Vec<u32> = (0..103).collect();
        let f = |c: &[u32]| Ok(c.iter().map(|x| x * 2).collect());
        let one = map_chunks(&xs, 10, 1, f).unwrap();
        for t in [2, 3, 16] {
            assert_eq!(map_chunks(&xs, 10, t, f).unwrap(), one);
        }
        assert_eq!(one.len(), 103);
    }
}
