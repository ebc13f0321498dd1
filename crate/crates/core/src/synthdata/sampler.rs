//! Identity-balanced (P identities × K instances) batch construction.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use super::{DataError, DatasetSplit, Result};

fn by_pid(split: &DatasetSplit) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in split.train.iter().enumerate() {
        groups.entry(s.pid).or_default().push(i);
    }
    groups
}

fn check_pk(p: usize, k: usize, available: usize) -> Result<()> {
    if k < 2 {
        return Err(DataError::Sampling(format!(
            "K must be at least 2 so every anchor has a positive, got {k}"
        )));
    }
    if p < 2 {
        return Err(DataError::Sampling(format!(
            "P must be at least 2 so every anchor has a negative, got {p}"
        )));
    }
    if p > available {
        return Err(DataError::Sampling(format!(
            "requested {p} identities but only {available} are available"
        )));
    }
    Ok(())
}

/// K instances of one identity; drawn with replacement only when it has fewer than K.
fn draw_instances<R: Rng + ?Sized>(members: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    if members.len() >= k {
        members.choose_multiple(rng, k).copied().collect()
    } else {
        (0..k)
            .map(|_| *members.choose(rng).expect("non-empty group"))
            .collect()
    }
}

/// One batch of `p × k` training indices covering `p` distinct identities.
pub fn pk_sample<R: Rng + ?Sized>(
    split: &DatasetSplit,
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let groups = by_pid(split);
    check_pk(p, k, groups.len())?;
    let pids: Vec<usize> = groups.keys().copied().collect();
    let chosen: Vec<usize> = pids.choose_multiple(rng, p).copied().collect();
    Ok(chosen
        .iter()
        .flat_map(|pid| draw_instances(&groups[pid], k, rng))
        .collect())
}

/// Batches for one epoch: every identity's images are shuffled and cut into
/// chunks of `k` (topped up by resampling), then batches take one chunk from
/// each of `p` randomly chosen identities until fewer than `p` identities have
/// chunks left.
pub fn pk_epoch<R: Rng + ?Sized>(
    split: &DatasetSplit,
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let groups = by_pid(split);
    check_pk(p, k, groups.len())?;
    let mut chunks: BTreeMap<usize, Vec<Vec<usize>>> = BTreeMap::new();
    for (&pid, members) in &groups {
        let mut order = members.clone();
        if order.len() < k {
            order = draw_instances(members, k, rng);
        }
        order.shuffle(rng);
        let full = order.len() / k;
        let list: Vec<Vec<usize>> = order.chunks(k).take(full).map(<[usize]>::to_vec).collect();
        chunks.insert(pid, list);
    }
    let mut batches = Vec::new();
    loop {
        let ready: Vec<usize> = chunks
            .iter()
            .filter(|(_, c)| !c.is_empty())
            .map(|(&pid, _)| pid)
            .collect();
        if ready.len() < p {
            break;
        }
        let picked: Vec<usize> = ready.choose_multiple(rng, p).copied().collect();
        let mut batch = Vec::with_capacity(p * k);
        for pid in picked {
            batch.extend(chunks.get_mut(&pid).and_then(Vec::pop).expect("ready pid"));
        }
        batches.push(batch);
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::synthdata::{build_dataset, DataConfig};
    use std::collections::BTreeMap;

    fn split() -> DatasetSplit {
        build_dataset(&DataConfig {
            pids_per_domain: 6,
            images_per_pid: 4,
            test_pids: 2,
            test_images_per_pid: 4,
            ..Default::default()
        })
        .unwrap()
    }

    fn counts(split: &DatasetSplit, batch: &[usize]) -> BTreeMap<usize, usize> {
        let mut c = BTreeMap::new();
        for &i in batch {
            *c.entry(split.train[i].pid).or_insert(0) += 1;
        }
        c
    }

    #[test]
    fn batch_has_p_identities_with_k_each() {
        let s = split();
        let mut r = rng::stream(0, &[]);
        let batch = pk_sample(&s, 8, 4, &mut r).unwrap();
        assert_eq!(batch.len(), 32);
        let c = counts(&s, &batch);
        assert_eq!(c.len(), 8);
        assert!(c.values().all(|&n| n == 4));
    }

    #[test]
    fn short_identities_are_resampled() {
        let mut s = split();
        let pid = s.train[0].pid;
        // Leave pid with two images.
        let mut kept = 0;
        s.train.retain(|x| {
            if x.pid != pid {
                return true;
            }
            kept += 1;
            kept <= 2
        });
        let mut r = rng::stream(4, &[]);
        let mut hit = false;
        for _ in 0..50 {
            let batch = pk_sample(&s, 17, 4, &mut r).unwrap();
            let c = counts(&s, &batch);
            if let Some(&n) = c.get(&pid) {
                assert_eq!(n, 4);
                hit = true;
            }
        }
        assert!(hit);
    }

    #[test]
    fn paper_batch_geometry() {
        let s = build_dataset(&DataConfig::default()).unwrap();
        let mut r = rng::stream(1, &[]);
        assert_eq!(pk_sample(&s, 16, 8, &mut r).unwrap().len(), 128);
    }

    #[test]
    fn too_many_identities_is_an_error() {
        let s = split();
        let mut r = rng::stream(0, &[]);
        assert!(pk_sample(&s, 19, 4, &mut r).is_err());
        assert!(pk_sample(&s, 4, 1, &mut r).is_err());
    }

    #[test]
    fn epoch_batches_are_balanced_and_deterministic() {
        let s = split();
        let a = pk_epoch(&s, 4, 2, &mut rng::stream(9, &[])).unwrap();
        let b = pk_epoch(&s, 4, 2, &mut rng::stream(9, &[])).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty());
        for batch in &a {
            let c = counts(&s, batch);
            assert_eq!(c.len(), 4);
            assert!(c.values().all(|&n| n == 2));
        }
    }
}
