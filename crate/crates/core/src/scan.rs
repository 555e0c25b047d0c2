//! Generic parallel reduce and fused prefix/suffix scan.
//!
//! Both algorithms run over a fixed binary combine tree whose shape depends
//! only on the element count, never on the executor, so floating-point
//! results are bit-identical across machines and thread counts.
//!
//! The fused scan works in two phases over the same tree: an up-sweep that
//! combines adjacent pairs level by level (odd tails are carried through
//! uncombined), and a down-sweep that pushes inclusive prefix/suffix values
//! back to the leaves. Total combine work is under `3T` and the tree height
//! is `ceil(log2 T)`.

use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScanError {
    #[error("scan over an empty sequence")]
    EmptySequence,
    #[error("supplied identity element fails e (+) id = e on a sampled element")]
    BadIdentity,
}

/// Instrumentation for one scan execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanPlan {
    pub element_count: usize,
    /// Height of the combine tree (up-sweep levels executed).
    pub depth: usize,
    pub combine_invocations: usize,
}

impl ScanPlan {
    pub fn empty() -> Self {
        ScanPlan { element_count: 0, depth: 0, combine_invocations: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct ScanOutput<E> {
    /// `prefix[t] = a_0 (+) ... (+) a_t`.
    pub prefix: Vec<E>,
    /// `suffix[t] = a_t (+) ... (+) a_T`.
    pub suffix: Vec<E>,
    pub plan: ScanPlan,
}

const PAR_LEVEL_THRESHOLD: usize = 8;

/// Left fold `e_0 (+) ... (+) e_T` over a balanced pairing tree.
///
/// Adjacent pairs are combined level by level; an odd tail is carried to the
/// next level uncombined, so the result equals the sequential fold whenever
/// `combine` is associative.
pub fn parallel_reduce<E, F>(elements: &[E], combine: &F) -> Result<E, ScanError>
where
    E: Clone + Send + Sync,
    F: Fn(&E, &E) -> E + Sync,
{
    if elements.is_empty() {
        return Err(ScanError::EmptySequence);
    }
    let mut level: Vec<E> = elements.to_vec();
    while level.len() > 1 {
        level = combine_level(&level, combine);
    }
    Ok(level.pop().expect("reduce level is non-empty"))
}

fn combine_level<E, F>(level: &[E], combine: &F) -> Vec<E>
where
    E: Clone + Send + Sync,
    F: Fn(&E, &E) -> E + Sync,
{
    let pairs = level.len() / 2;
    let make = |j: usize| combine(&level[2 * j], &level[2 * j + 1]);
    let mut next: Vec<E> = if pairs >= PAR_LEVEL_THRESHOLD {
        (0..pairs).into_par_iter().map(make).collect()
    } else {
        (0..pairs).map(make).collect()
    };
    if level.len() % 2 == 1 {
        next.push(level[level.len() - 1].clone());
    }
    next
}

/// Per-node state during the down-sweep.
///
/// `lctx`/`rctx` are the exclusive combinations of everything strictly before
/// and strictly after the node's segment (`None` when empty); `pfx`/`sfx` are
/// the inclusive prefix at the segment's right edge and the inclusive suffix
/// at its left edge.
#[derive(Clone)]
struct Ctx<E> {
    lctx: Option<E>,
    rctx: Option<E>,
    pfx: E,
    sfx: E,
}

/// Fused prefix and suffix sums of a non-empty sequence.
///
/// `identity` must satisfy `e (+) identity = e`; this is validated on the
/// first element. The construction itself carries empty contexts explicitly,
/// so the identity is never mixed into any output value.
pub fn prefix_suffix_scan<E, F>(
    elements: &[E],
    combine: &F,
    identity: &E,
) -> Result<ScanOutput<E>, ScanError>
where
    E: Clone + PartialEq + Send + Sync,
    F: Fn(&E, &E) -> E + Sync,
{
    if elements.is_empty() {
        return Err(ScanError::EmptySequence);
    }
    if combine(&elements[0], identity) != elements[0] {
        return Err(ScanError::BadIdentity);
    }
    let count = elements.len();
    if count == 1 {
        return Ok(ScanOutput {
            prefix: vec![elements[0].clone()],
            suffix: vec![elements[0].clone()],
            plan: ScanPlan { element_count: 1, depth: 0, combine_invocations: 0 },
        });
    }

    // Up-sweep: levels[k+1][j] combines levels[k][2j], levels[k][2j+1].
    let mut levels: Vec<Vec<E>> = vec![elements.to_vec()];
    let mut combines = 0usize;
    while levels.last().expect("levels non-empty").len() > 1 {
        let top = levels.last().expect("levels non-empty");
        combines += top.len() / 2;
        let next = combine_level(top, combine);
        levels.push(next);
    }
    let depth = levels.len() - 1;

    // Down-sweep: push inclusive prefixes/suffixes from the root to level 0.
    let root = levels[depth][0].clone();
    let mut ctxs: Vec<Ctx<E>> =
        vec![Ctx { lctx: None, rctx: None, pfx: root.clone(), sfx: root }];
    let down_combines = std::sync::atomic::AtomicUsize::new(0);
    for k in (0..depth).rev() {
        let child_level = &levels[k];
        let expand = |(p, parent): (usize, &Ctx<E>)| -> (Ctx<E>, Option<Ctx<E>>) {
            let li = 2 * p;
            if li + 1 >= child_level.len() {
                // Carried tail: single child spans the same segment.
                return (parent.clone(), None);
            }
            let mut local = 0usize;
            let pfx_left = match &parent.lctx {
                Some(l) => {
                    local += 1;
                    combine(l, &child_level[li])
                }
                None => child_level[li].clone(),
            };
            let sfx_right = match &parent.rctx {
                Some(r) => {
                    local += 1;
                    combine(&child_level[li + 1], r)
                }
                None => child_level[li + 1].clone(),
            };
            down_combines.fetch_add(local, std::sync::atomic::Ordering::Relaxed);
            let left = Ctx {
                lctx: parent.lctx.clone(),
                rctx: Some(sfx_right.clone()),
                pfx: pfx_left.clone(),
                sfx: parent.sfx.clone(),
            };
            let right = Ctx {
                lctx: Some(pfx_left),
                rctx: parent.rctx.clone(),
                pfx: parent.pfx.clone(),
                sfx: sfx_right,
            };
            (left, Some(right))
        };
        let expanded: Vec<(Ctx<E>, Option<Ctx<E>>)> = if ctxs.len() >= PAR_LEVEL_THRESHOLD {
            ctxs.par_iter().enumerate().map(expand).collect()
        } else {
            ctxs.iter().enumerate().map(expand).collect()
        };
        ctxs = expanded
            .into_iter()
            .flat_map(|(l, r)| std::iter::once(l).chain(r))
            .collect();
        debug_assert_eq!(ctxs.len(), child_level.len());
    }
    combines += down_combines.into_inner();

    let mut prefix = Vec::with_capacity(count);
    let mut suffix = Vec::with_capacity(count);
    for ctx in ctxs {
        prefix.push(ctx.pfx);
        suffix.push(ctx.sfx);
    }
    Ok(ScanOutput {
        prefix,
        suffix,
        plan: ScanPlan { element_count: count, depth, combine_invocations: combines },
    })
}

/// `ceil(log2(n))` for n >= 1.
pub fn ceil_log2(n: usize) -> usize {
    assert!(n >= 1);
    (n.next_power_of_two()).trailing_zeros() as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    fn add(a: &i64, b: &i64) -> i64 {
        a + b
    }

    #[test]
    fn reduce_empty_is_error() {
        assert_eq!(parallel_reduce::<i64, _>(&[], &add), Err(ScanError::EmptySequence));
    }

    #[test]
    fn reduce_single_element() {
        assert_eq!(parallel_reduce(&[7], &add).unwrap(), 7);
    }

    #[test]
    fn reduce_integers_with_odd_tail() {
        let xs: Vec<i64> = (1..=7).collect();
        assert_eq!(parallel_reduce(&xs, &add).unwrap(), 28);
    }

    #[test]
    fn scan_single_element() {
        let out = prefix_suffix_scan(&[5], &add, &0).unwrap();
        assert_eq!(out.prefix, vec![5]);
        assert_eq!(out.suffix, vec![5]);
        assert_eq!(out.plan.depth, 0);
        assert_eq!(out.plan.combine_invocations, 0);
    }

    #[test]
    fn scan_worked_example() {
        let out = prefix_suffix_scan(&[1, 2, 3, 4], &add, &0).unwrap();
        assert_eq!(out.prefix, vec![1, 3, 6, 10]);
        assert_eq!(out.suffix, vec![10, 9, 7, 4]);
    }

    #[test]
    fn scan_rejects_bad_identity() {
        assert_eq!(prefix_suffix_scan(&[1, 2], &add, &3).unwrap_err(), ScanError::BadIdentity);
    }

    #[test]
    fn scan_matches_sequential_recursion_for_all_small_lengths() {
        // Non-commutative semigroup (string concatenation) catches any
        // ordering mistake that integer addition would mask.
        let concat = |a: &String, b: &String| format!("{a}{b}");
        for len in 1usize..=33 {
            let elems: Vec<String> = (0..len).map(|i| format!("[{i}]")).collect();
            let out = prefix_suffix_scan(&elems, &concat, &String::new()).unwrap();
            let mut pfx = elems[0].clone();
            assert_eq!(out.prefix[0], pfx);
            for t in 1..len {
                pfx = concat(&pfx, &elems[t]);
                assert_eq!(out.prefix[t], pfx, "prefix[{t}] at len {len}");
            }
            let mut sfx = elems[len - 1].clone();
            assert_eq!(out.suffix[len - 1], sfx);
            for t in (0..len - 1).rev() {
                sfx = concat(&elems[t], &sfx);
                assert_eq!(out.suffix[t], sfx, "suffix[{t}] at len {len}");
            }
        }
    }

    #[test]
    fn scan_depth_and_work_bounds() {
        let count_combine = |a: &i64, b: &i64| a + b;
        for len in 1usize..=1025 {
            let elems: Vec<i64> = (0..len as i64).collect();
            let out = prefix_suffix_scan(&elems, &count_combine, &0).unwrap();
            assert!(
                out.plan.depth <= ceil_log2(len) + 1,
                "depth {} exceeds bound at len {len}",
                out.plan.depth
            );
            assert!(
                out.plan.combine_invocations <= 4 * len,
                "combines {} exceed 4T at len {len}",
                out.plan.combine_invocations
            );
        }
    }

    #[test]
    fn scan_is_deterministic() {
        let xs: Vec<i64> = (0..317).map(|i| i * 31 % 97).collect();
        let a = prefix_suffix_scan(&xs, &add, &0).unwrap();
        let b = prefix_suffix_scan(&xs, &add, &0).unwrap();
        assert_eq!(a.prefix, b.prefix);
        assert_eq!(a.suffix, b.suffix);
        assert_eq!(a.plan, b.plan);
    }
}
