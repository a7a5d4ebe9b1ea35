//! Dataset generation and partition properties.

use std::collections::BTreeSet;

use fedsplit::data::*;
use proptest::prelude::*;

fn spec(kind: PartitionKind, clients: usize, seed: u64) -> PartitionSpec {
    PartitionSpec {
        kind,
        clients,
        seed,
        test_fraction: 0.2,
    }
}

fn labels_of(data: &Dataset, idx: &[usize]) -> BTreeSet<usize> {
    idx.iter().map(|&i| data.labels[i]).collect()
}

fn check_cover(out: &PartitionOutcome) -> std::result::Result<(), TestCaseError> {
    let mut train = BTreeSet::new();
    let mut test = BTreeSet::new();
    for s in &out.shards {
        prop_assert!(!s.train.is_empty());
        for &i in &s.train {
            prop_assert!(train.insert(i), "index {i} dealt twice");
        }
        test.extend(s.test.iter().copied());
    }
    prop_assert_eq!(train.len(), out.class_pool.iter().sum::<usize>());
    prop_assert!(train.is_disjoint(&test));
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn partitions_are_disjoint_covers(
        seed in any::<u64>(),
        clients in 1usize..12,
        kind in 0usize..3,
        alpha in 0.05f64..5.0,
        c in 1usize..6,
    ) {
        let data = generate_synthetic(600, 5, 2.0, seed).unwrap();
        let c = c.max(5usize.div_ceil(clients));
        let kind = match kind {
            0 => PartitionKind::Iid,
            1 => PartitionKind::Dirichlet { alpha },
            _ => PartitionKind::Pathological { classes_per_client: c.min(5) },
        };
        let out = match partition_detailed(&data, &spec(kind, clients, seed)) {
            Ok(out) => out,
            // tiny alpha with many clients may exhaust the redraws
            Err(fedsplit::Error::Partition(_)) if matches!(kind, PartitionKind::Dirichlet { .. }) => return Ok(()),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        check_cover(&out)?;
        if let PartitionKind::Pathological { classes_per_client } = kind {
            for s in &out.shards {
                prop_assert_eq!(labels_of(&data, &s.train).len(), classes_per_client.min(5));
            }
        }
        if let Some(p) = &out.proportions {
            for (class, row) in p.iter().enumerate() {
                let n = out.class_pool[class] as f64;
                for (client, share) in row.iter().enumerate() {
                    let got = out.shards[client].train.iter().filter(|&&i| data.labels[i] == class).count() as f64;
                    prop_assert!((got - share * n).abs() < 1.0, "class {class} client {client}: {got} vs {}", share * n);
                }
            }
        }
        let again = partition_detailed(&data, &spec(kind, clients, seed)).unwrap();
        prop_assert_eq!(again, out);
    }
}

#[test]
fn iid_class_counts_within_binomial_bounds() {
    let data = generate_synthetic(1250, 4, 1.0, 2).unwrap();
    let out = partition(&data, &spec(PartitionKind::Iid, 4, 2)).unwrap();
    for s in &out {
        assert_eq!(s.train.len(), 250);
        for class in 0..4 {
            let k = s.train.iter().filter(|&&i| data.labels[i] == class).count() as f64;
            // hypergeometric sd ≈ 5.9 around 62.5
            assert!((k - 62.5).abs() < 24.0, "class {class}: {k}");
        }
    }
}

#[test]
fn large_alpha_approaches_global_proportions() {
    let data = generate_synthetic(4000, 4, 1.0, 3).unwrap();
    let out = partition_detailed(&data, &spec(PartitionKind::Dirichlet { alpha: 1000.0 }, 10, 3)).unwrap();
    let total: usize = out.class_pool.iter().sum();
    let global: Vec<f64> = out.class_pool.iter().map(|&n| n as f64 / total as f64).collect();
    let mut tv_sum = 0.0;
    for s in &out.shards {
        let tv: f64 = (0..4)
            .map(|c| {
                let k = s.train.iter().filter(|&&i| data.labels[i] == c).count() as f64;
                (k / s.train.len() as f64 - global[c]).abs()
            })
            .sum::<f64>()
            / 2.0;
        tv_sum += tv;
    }
    let mean_tv = tv_sum / out.shards.len() as f64;
    assert!(mean_tv <= 0.05, "mean total variation {mean_tv}");
}

/// Softmax regression by full-batch gradient descent, scored on held-out rows.
fn linear_probe_accuracy(data: &Dataset, seed: u64) -> f64 {
    let (test, train) = data.split_stratified(0.3, seed).unwrap();
    let (d, c) = (data.dim(), data.classes);
    let mut w = vec![0.0; d * c];
    let mut b = vec![0.0; c];
    let x = train.features.data();
    let n = train.len();
    let logits = |w: &[f64], b: &[f64], row: &[f64]| -> Vec<f64> {
        (0..c).map(|k| b[k] + (0..d).map(|j| row[j] * w[j * c + k]).sum::<f64>()).collect()
    };
    for _ in 0..300 {
        let mut gw = vec![0.0; d * c];
        let mut gb = vec![0.0; c];
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            let z = logits(&w, &b, row);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for k in 0..c {
                let g = e[k] / s - f64::from(u8::from(train.labels[i] == k));
                gb[k] += g;
                for j in 0..d {
                    gw[j * c + k] += g * row[j];
                }
            }
        }
        w.iter_mut().zip(&gw).for_each(|(p, g)| *p -= 0.5 * g / n as f64);
        b.iter_mut().zip(&gb).for_each(|(p, g)| *p -= 0.5 * g / n as f64);
    }
    let xt = test.features.data();
    let hits = (0..test.len())
        .filter(|&i| {
            let z = logits(&w, &b, &xt[i * d..(i + 1) * d]);
            fedsplit::nn::argmax(&z) == test.labels[i]
        })
        .count();
    hits as f64 / test.len() as f64
}

#[test]
fn zero_separation_is_chance_for_a_linear_probe() {
    let data = generate_synthetic(2000, 4, 0.0, 4).unwrap();
    let acc = linear_probe_accuracy(&data, 4);
    assert!((acc - 0.25).abs() <= 0.05, "{acc}");
}

#[test]
fn wide_separation_is_linearly_separable() {
    let data = generate_synthetic(2000, 4, 6.0, 5).unwrap();
    let acc = linear_probe_accuracy(&data, 5);
    assert!(acc >= 0.99, "{acc}");
}

#[test]
fn manifest_replays_exactly() {
    let data = generate_synthetic(500, 5, 2.0, 6).unwrap();
    let s = spec(PartitionKind::Pathological { classes_per_client: 2 }, 5, 6);
    let shards = partition(&data, &s).unwrap();
    let text = manifest_text(&s, &shards, &["# seed 6".to_string()]);
    assert_eq!(parse_manifest(&text).unwrap(), shards);
}
