mod common;

use std::fs;

use smaformer::data::{
    generate_sample, hflip, random_augment, rotate90, sample_seed, split_counts, Dataset, SamplePair, INTENSITY,
    NUM_CLASSES, ORGAN, TUMOR,
};
use smaformer::metrics::dsc;
use smaformer::Error;

fn class_means(s: &SamplePair) -> [f64; NUM_CLASSES] {
    let hw = s.height() * s.width();
    let mut sum = [0.0; NUM_CLASSES];
    let mut n = [0usize; NUM_CLASSES];
    for (j, &c) in s.mask.labels.iter().enumerate() {
        for ch in 0..3 {
            sum[c as usize] += f64::from(s.image.data()[ch * hw + j]);
        }
        n[c as usize] += 3;
    }
    std::array::from_fn(|c| sum[c] / n[c] as f64)
}

fn neighbours(i: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (y, x) = (i / w, i % w);
    [(y > 0).then(|| i - w), (y + 1 < h).then(|| i + w), (x > 0).then(|| i - 1), (x + 1 < w).then(|| i + 1)]
        .into_iter()
        .flatten()
}

/// 4-connected tumor components by flood fill.
fn tumor_components(labels: &[u8], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; labels.len()];
    let mut out = Vec::new();
    for start in 0..labels.len() {
        if labels[start] != TUMOR || seen[start] {
            continue;
        }
        let (mut stack, mut comp) = (vec![start], Vec::new());
        seen[start] = true;
        while let Some(i) = stack.pop() {
            comp.push(i);
            for j in neighbours(i, h, w) {
                if labels[j] == TUMOR && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        out.push(comp);
    }
    out
}

#[test]
fn same_seed_gives_identical_samples() {
    for seed in [0, 7, u64::MAX] {
        let (a, b) = (generate_sample(seed, 64, 48).unwrap(), generate_sample(seed, 64, 48).unwrap());
        assert!(a.bitwise_eq(&b));
    }
    assert!(!generate_sample(1, 64, 64).unwrap().bitwise_eq(&generate_sample(2, 64, 64).unwrap()));
}

#[test]
fn sample_layout() {
    let s = generate_sample(3, 32, 64).unwrap();
    assert_eq!(s.image.shape(), &[3, 32, 64]);
    assert_eq!((s.mask.height, s.mask.width, s.mask.labels.len()), (32, 64, 2048));
    assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(s.mask.labels.iter().all(|&c| (c as usize) < NUM_CLASSES));
}

#[test]
fn invalid_sizes_are_rejected() {
    for (h, w) in [(16, 64), (64, 40), (0, 64), (48, 17)] {
        assert!(matches!(generate_sample(0, h, w), Err(Error::Config(_))), "{h}×{w}");
    }
}

#[test]
fn tumors_sit_inside_organs_with_bounded_extent() {
    for seed in 0..100 {
        let s = generate_sample(seed, 64, 64).unwrap();
        // labels are exclusive, so the organ region is organ ∪ tumor; each
        // tumor component must also border organ tissue
        for comp in tumor_components(&s.mask.labels, 64, 64) {
            assert!(comp.iter().any(|&i| neighbours(i, 64, 64).any(|j| s.mask.labels[j] == ORGAN)), "seed {seed}");
        }
        let organ = s.mask.fraction(ORGAN) + s.mask.fraction(TUMOR);
        assert!((0.10..=0.40).contains(&organ), "seed {seed}: organ {organ}");
        let tumor = s.mask.fraction(TUMOR);
        assert!((0.005..=0.05).contains(&tumor), "seed {seed}: tumor {tumor}");
    }
}

#[test]
fn class_means_are_separated() {
    for seed in 0..20 {
        let m = class_means(&generate_sample(seed, 64, 64).unwrap());
        for a in 0..NUM_CLASSES {
            for b in a + 1..NUM_CLASSES {
                assert!((m[a] - m[b]).abs() >= 0.1, "seed {seed}: {m:?}");
            }
        }
        // noise and illumination keep the means near their base levels
        for c in 0..NUM_CLASSES {
            assert!((m[c] - INTENSITY[c]).abs() < 0.1, "seed {seed}: {m:?}");
        }
    }
}

#[test]
fn augmentations_are_exact() {
    let s = generate_sample(11, 64, 64).unwrap();
    assert!(hflip(&hflip(&s)).bitwise_eq(&s));
    let mut r = s.clone();
    for _ in 0..4 {
        r = rotate90(&r, 1);
    }
    assert!(r.bitwise_eq(&s));
    assert!(rotate90(&s, 2).bitwise_eq(&rotate90(&rotate90(&s, 1), 1)));
    assert!(rotate90(&s, 0).bitwise_eq(&s));
    assert!(!hflip(&s).bitwise_eq(&s));

    let mut rng = common::rng(5);
    for _ in 0..20 {
        let a = random_augment(&s, &mut rng);
        assert_eq!(a.mask.histogram(), s.mask.histogram());
        let mut px: Vec<u32> = a.image.data().iter().map(|v| v.to_bits()).collect();
        let mut orig: Vec<u32> = s.image.data().iter().map(|v| v.to_bits()).collect();
        px.sort_unstable();
        orig.sort_unstable();
        assert_eq!(px, orig);
    }
}

#[test]
fn rotation_of_a_rectangle_swaps_dimensions() {
    let s = generate_sample(12, 32, 64).unwrap();
    let r = rotate90(&s, 1);
    assert_eq!(r.image.shape(), &[3, 64, 32]);
    assert_eq!((r.mask.height, r.mask.width), (64, 32));
    // counter-clockwise: the top-right pixel lands at the top-left
    assert_eq!(r.mask.labels[0], s.mask.labels[63]);
    assert_eq!(r.image.data()[0], s.image.data()[63]);
    assert_eq!(r.mask.histogram(), s.mask.histogram());
}

#[test]
fn shared_transforms_keep_perfect_overlap() {
    let s = generate_sample(13, 64, 64).unwrap();
    for k in 0..4 {
        let t = rotate90(&hflip(&s), k);
        let fg = |labels: &[u8]| labels.iter().map(|&c| u8::from(c == ORGAN)).collect::<Vec<u8>>();
        assert_eq!(dsc(&fg(&t.mask.labels), &fg(&t.mask.labels)).unwrap(), 1.0);
    }
}

#[test]
fn split_counts_follow_ratios() {
    assert_eq!(split_counts(100, [0.8, 0.15, 0.05]).unwrap(), [80, 15, 5]);
    assert_eq!(split_counts(16, [0.5, 0.5, 0.0]).unwrap(), [8, 8, 0]);
    assert_eq!(split_counts(7, [0.8, 0.15, 0.05]).unwrap().iter().sum::<usize>(), 7);
    assert!(split_counts(10, [0.8, 0.3, 0.05]).is_err());
}

#[test]
fn dataset_splits_are_a_partition() {
    let ds = Dataset::generate(100, 32, 32, 9, [0.8, 0.15, 0.05]).unwrap();
    let sizes: Vec<usize> = ["train", "val", "test"].iter().map(|n| ds.split(n).unwrap().len()).collect();
    assert_eq!(sizes, [80, 15, 5]);
    let mut ids: Vec<&str> = ["train", "val", "test"]
        .iter()
        .flat_map(|n| ds.split(n).unwrap())
        .map(|s| s.sample_id.as_str())
        .collect();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), 100);
    for (i, s) in ds.samples.iter().enumerate() {
        assert_eq!(s.seed, sample_seed(9, i));
    }
    assert!(ds.split("holdout").is_err());
}

#[test]
fn dataset_content_depends_only_on_its_inputs() {
    let a = Dataset::generate(5, 32, 32, 4, [0.8, 0.15, 0.05]).unwrap();
    let b = Dataset::generate(5, 32, 32, 4, [0.8, 0.15, 0.05]).unwrap();
    assert_eq!(a, b);
    assert!(a.samples.iter().zip(&b.samples).all(|(x, y)| x.bitwise_eq(y)));
}

#[test]
fn dataset_round_trips_through_disk() {
    let ds = Dataset::generate(6, 32, 48, 21, [0.5, 0.5, 0.0]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.write(dir.path()).unwrap();
    assert!(dir.path().join("manifest.json").is_file());
    assert!(dir.path().join("images/000000.smt").is_file());
    assert!(dir.path().join("masks/000005.smt").is_file());
    let back = Dataset::read(dir.path()).unwrap();
    assert_eq!(back.manifest, ds.manifest);
    for (a, b) in back.samples.iter().zip(&ds.samples) {
        assert!(a.bitwise_eq(b));
    }

    let again = tempfile::tempdir().unwrap();
    back.write(again.path()).unwrap();
    for f in ["manifest.json", "images/000003.smt", "masks/000003.smt"] {
        assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(again.path().join(f)).unwrap());
    }
}

#[test]
fn damaged_files_give_format_errors() {
    let ds = Dataset::generate(2, 32, 32, 1, [0.5, 0.5, 0.0]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.write(dir.path()).unwrap();

    let img = dir.path().join("images/000001.smt");
    let bytes = fs::read(&img).unwrap();
    fs::write(&img, &bytes[..bytes.len() - 10]).unwrap();
    match Dataset::read(dir.path()) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, bytes.len() - 10),
        other => panic!("expected a format error, got {other:?}"),
    }

    let mut bad = bytes.clone();
    bad[0] = b'X';
    fs::write(&img, bad).unwrap();
    assert!(matches!(Dataset::read(dir.path()), Err(Error::Format { offset: 0, .. })));
}
