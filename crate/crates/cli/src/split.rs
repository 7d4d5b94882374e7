//! Train/val/test assignment with largest-remainder rounding.

use std::collections::BTreeMap;

use langadapt_core::dataset::{Manifest, Split};
use langadapt_core::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Sizes summing to `n`: floors of `n * f`, then the leftover items go to
/// the largest fractional parts, ties in train, val, test order.
pub fn largest_remainder(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| n as f64 * f).collect();
    let mut sizes = [0usize; 3];
    for (s, e) in sizes.iter_mut().zip(&exact) {
        *s = e.floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let assigned: usize = sizes.iter().sum();
    for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

/// Assigns every manifest entry to a split. Stratified splits round each
/// class separately and need at least three items per class.
pub fn split_dataset(
    manifest: &Manifest,
    fractions: &[f64; 3],
    seed: u64,
    stratified: bool,
) -> Result<Manifest> {
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || fractions.iter().any(|f| *f < 0.0) {
        return Err(Error::validation(format!(
            "split fractions {fractions:?} must sum to 1"
        )));
    }
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries().iter().enumerate() {
        let key = if stratified {
            e.label.clone().ok_or_else(|| {
                Error::data(format!(
                    "stratified split needs a label for {:?}",
                    e.item_id
                ))
            })?
        } else {
            String::new()
        };
        groups.entry(key).or_default().push(i);
    }
    if stratified {
        let small: Vec<String> = groups
            .iter()
            .filter(|(_, v)| v.len() < 3)
            .map(|(k, v)| format!("{k}: {}", v.len()))
            .collect();
        if !small.is_empty() {
            return Err(Error::data(format!(
                "classes too small for a stratified split (need 3 items): {}",
                small.join(", ")
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![Split::Train; manifest.len()];
    for idx in groups.values_mut() {
        idx.shuffle(&mut rng);
        let sizes = largest_remainder(idx.len(), fractions);
        let mut it = idx.iter();
        for (split, &size) in Split::ALL.iter().zip(&sizes) {
            for &i in it.by_ref().take(size) {
                assignment[i] = *split;
            }
        }
    }
    let entries = manifest
        .entries()
        .iter()
        .zip(assignment)
        .map(|(e, s)| {
            let mut e = e.clone();
            e.split = Some(s);
            e
        })
        .collect();
    manifest.with_entries(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use langadapt_core::dataset::ManifestEntry;
    use std::collections::HashSet;
    use std::path::PathBuf;

    fn manifest(per_class: &[usize]) -> Manifest {
        let entries = per_class
            .iter()
            .enumerate()
            .flat_map(|(k, &n)| {
                (0..n).map(move |i| ManifestEntry {
                    item_id: format!("c{k}-{i}"),
                    path: PathBuf::from(format!("{k}-{i}.png")),
                    split: None,
                    label: Some(format!("c{k}")),
                })
            })
            .collect();
        Manifest::new(entries, "").unwrap()
    }

    /// Brute force: the assignment of leftover units maximizing the sorted
    /// vector of (remainder, -index) keys.
    fn rounding_oracle(n: usize, f: &[f64; 3]) -> [usize; 3] {
        let mut best: Option<([usize; 3], Vec<(f64, i64)>)> = None;
        let floors: Vec<usize> = f.iter().map(|x| (n as f64 * x).floor() as usize).collect();
        let left = n - floors.iter().sum::<usize>();
        for mask in 0u8..8 {
            let picked: Vec<usize> = (0..3).filter(|i| mask & (1 << i) != 0).collect();
            if picked.len() != left {
                continue;
            }
            let mut key: Vec<(f64, i64)> = picked
                .iter()
                .map(|&i| ((n as f64 * f[i]).fract(), -(i as i64)))
                .collect();
            key.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let mut sizes = [floors[0], floors[1], floors[2]];
            for &i in &picked {
                sizes[i] += 1;
            }
            if best.as_ref().is_none_or(|(_, k)| key > *k) {
                best = Some((sizes, key));
            }
        }
        best.unwrap().0
    }

    #[test]
    fn rounding_matches_the_oracle() {
        for n in 0..300 {
            for f in [
                [0.6, 0.2, 0.2],
                [0.7, 0.15, 0.15],
                [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
                [0.5, 0.25, 0.25],
            ] {
                let got = largest_remainder(n, &f);
                assert_eq!(got.iter().sum::<usize>(), n);
                assert_eq!(got, rounding_oracle(n, &f), "n={n} f={f:?}");
            }
        }
        assert_eq!(largest_remainder(101, &[0.6, 0.2, 0.2]), [61, 20, 20]);
    }

    #[test]
    fn balanced_binary_split() {
        let m = split_dataset(&manifest(&[50, 50]), &[0.6, 0.2, 0.2], 3, true).unwrap();
        for (split, want) in Split::ALL.iter().zip([30, 10, 10]) {
            for k in 0..2 {
                let label = format!("c{k}");
                let n = m
                    .split(*split)
                    .iter()
                    .filter(|e| e.label.as_deref() == Some(&label))
                    .count();
                assert_eq!(n, want);
            }
        }
    }

    #[test]
    fn splits_are_disjoint_exhaustive_and_seeded() {
        let src = manifest(&[17, 23, 9]);
        let a = split_dataset(&src, &[0.6, 0.2, 0.2], 11, true).unwrap();
        assert_eq!(a, split_dataset(&src, &[0.6, 0.2, 0.2], 11, true).unwrap());
        assert_ne!(a, split_dataset(&src, &[0.6, 0.2, 0.2], 12, true).unwrap());
        let mut seen = HashSet::new();
        for s in Split::ALL {
            for e in a.split(s) {
                assert!(seen.insert(e.item_id.clone()));
            }
        }
        assert_eq!(seen.len(), src.len());
    }

    #[test]
    fn unstratified_split_of_101() {
        let m = split_dataset(&manifest(&[101]), &[0.6, 0.2, 0.2], 0, false).unwrap();
        let sizes: Vec<usize> = Split::ALL.iter().map(|s| m.split(*s).len()).collect();
        assert_eq!(sizes, vec![61, 20, 20]);
    }

    #[test]
    fn tiny_class_is_a_data_error_with_counts() {
        match split_dataset(&manifest(&[10, 2]), &[0.6, 0.2, 0.2], 0, true) {
            Err(Error::Data(msg)) => assert!(msg.contains("c1: 2"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }
}
