//! Data preparation before simultaneous training: per-class count matching,
//! class sorting, and class-aligned batch pairing.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::seed;

fn members_by_class(labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        members[y].push(i);
    }
    members
}

/// Upsamples, class by class, whichever dataset has fewer samples so that
/// both end up with `max(count_a(k), count_b(k))` samples of class `k`.
/// Originals keep their order; resampled copies are appended.
pub fn class_balance_resample(a: &Dataset, b: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    let (la, lb) = (a.labels()?, b.labels()?);
    let num_classes = a.num_classes_present().max(b.num_classes_present());
    let ma = members_by_class(la, num_classes);
    let mb = members_by_class(lb, num_classes);
    for class in 0..num_classes {
        match (ma[class].is_empty(), mb[class].is_empty()) {
            (true, false) => return Err(Error::MissingClass { class, side: "first" }),
            (false, true) => return Err(Error::MissingClass { class, side: "second" }),
            _ => {}
        }
    }
    let mut rng = seed::rng(seed, &[seed::stream::RESAMPLE]);
    let mut ia: Vec<usize> = (0..a.len()).collect();
    let mut ib: Vec<usize> = (0..b.len()).collect();
    for class in 0..num_classes {
        let (na, nb) = (ma[class].len(), mb[class].len());
        let (pool, out, deficit) = if na < nb {
            (&ma[class], &mut ia, nb - na)
        } else {
            (&mb[class], &mut ib, na - nb)
        };
        for _ in 0..deficit {
            out.push(pool[rng.random_range(0..pool.len())]);
        }
    }
    Ok((a.select(&ia), b.select(&ib)))
}

/// Stable sort by label.
pub fn sort_by_class(d: &Dataset) -> Result<Dataset> {
    let labels = d.labels()?;
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by_key(|&i| labels[i]);
    Ok(d.select(&order))
}

/// Row indices of one source batch and its paired target batch. Both sides
/// carry the same labels, in the same order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Pairs source and target samples class by class and cuts them into
/// batches in which every class appears on both sides.
///
/// Within each class both domains are shuffled independently and matched by
/// position. The batch count is `ceil(n / batch_size)`, lowered if needed so
/// that the smallest class still reaches every batch; each class is then
/// spread over the batches in near-equal contiguous runs.
pub fn make_aligned_batches(
    source: &Dataset,
    target: &Dataset,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<BatchPair>> {
    let (ls, lt) = (source.labels()?, target.labels()?);
    let num_classes = source.num_classes_present().max(target.num_classes_present());
    if batch_size < num_classes {
        return Err(Error::InvalidConfig(format!(
            "batch size {batch_size} is smaller than the number of classes {num_classes}"
        )));
    }
    let mut ms = members_by_class(ls, num_classes);
    let mut mt = members_by_class(lt, num_classes);
    for class in 0..num_classes {
        if ms[class].len() != mt[class].len() {
            return Err(Error::Precondition(format!(
                "class {class} has {} source but {} target samples; resample first",
                ms[class].len(),
                mt[class].len()
            )));
        }
    }
    let total = ls.len();
    if total == 0 {
        return Ok(Vec::new());
    }
    for class in 0..num_classes {
        ms[class].shuffle(&mut seed::rng(seed, &[class as u64, 0]));
        mt[class].shuffle(&mut seed::rng(seed, &[class as u64, 1]));
    }
    let smallest = ms.iter().map(Vec::len).filter(|&n| n > 0).min().unwrap_or(1);
    let num_batches = total.div_ceil(batch_size).min(smallest).max(1);

    let mut batches = Vec::with_capacity(num_batches);
    for j in 0..num_batches {
        let mut pair = BatchPair {
            source: Vec::with_capacity(batch_size),
            target: Vec::with_capacity(batch_size),
            labels: Vec::with_capacity(batch_size),
        };
        for class in 0..num_classes {
            let n = ms[class].len();
            let (lo, hi) = (n * j / num_batches, n * (j + 1) / num_batches);
            pair.source.extend_from_slice(&ms[class][lo..hi]);
            pair.target.extend_from_slice(&mt[class][lo..hi]);
            pair.labels.extend(std::iter::repeat_n(class, hi - lo));
        }
        batches.push(pair);
    }
    Ok(batches)
}
