use std::collections::BTreeSet;
use std::path::PathBuf;

use agegrad::data::{
    augment, batches, gen_synthetic, largest_remainder, split_dataset, AugmentSpec, BatchOptions, Dataset, Image,
    Manifest, Record, Sample, Split, SplitMode, SynthSpec,
};
use agegrad::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(h, w, (0..h * w * 3).map(|_| rng.random()).collect()).unwrap()
}

fn records(paths: &[&str]) -> Vec<Record> {
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| Record { path: p.to_string(), age: 20.0 + i as f64, split: Split::Unassigned })
        .collect()
}

proptest! {
    #[test]
    fn noop_augmentation_equals_plain_resize(h in 4usize..40, w in 4usize..40, size in 4usize..48, seed in any::<u64>()) {
        let im = noise_image(h, w, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = augment(&im, &AugmentSpec::none(size), &mut rng).unwrap();
        prop_assert_eq!(a, im.resize(size, size).unwrap());
    }

    #[test]
    fn flip_is_an_involution(h in 1usize..30, w in 1usize..30, seed in any::<u64>()) {
        let im = noise_image(h, w, seed);
        let f = im.flip_horizontal();
        prop_assert_eq!(f.pixel(0, 0), im.pixel(0, w - 1));
        prop_assert_eq!(f.flip_horizontal(), im);
    }

    #[test]
    fn full_augmentation_keeps_size_and_is_seeded(seed in any::<u64>()) {
        let im = noise_image(30, 26, seed);
        let spec = AugmentSpec { size: 24, erase_p: 1.0, blur_p: 1.0, ..AugmentSpec::default() };
        let a = augment(&im, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = augment(&im, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!((a.height(), a.width()), (24, 24));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn largest_remainder_partitions_n(n in 0usize..5000, a in 1u32..100, b in 1u32..100, c in 1u32..100) {
        let total = (a + b + c) as f64;
        let ratios = [a as f64 / total, b as f64 / total, c as f64 / total];
        let sizes = largest_remainder(n, ratios);
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        for (s, r) in sizes.iter().zip(ratios) {
            prop_assert!((*s as f64 - r * n as f64).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn image_split_is_a_seeded_partition(n in 3usize..300, seed in any::<u64>()) {
        let paths: Vec<String> = (0..n).map(|i| format!("img{i}.png")).collect();
        let refs: Vec<&str> = paths.iter().map(String::as_str).collect();
        let m = Manifest::new("", records(&refs)).unwrap();
        let ratios = [0.7, 0.15, 0.15];
        let a = split_dataset(&m, ratios, seed, SplitMode::Image).unwrap();
        prop_assert_eq!(&a, &split_dataset(&m, ratios, seed, SplitMode::Image).unwrap());
        let counts = a.counts();
        let expected = largest_remainder(n, ratios);
        prop_assert_eq!(counts.get(&Split::Train).copied().unwrap_or(0), expected[0]);
        prop_assert_eq!(counts.get(&Split::Val).copied().unwrap_or(0), expected[1]);
        prop_assert_eq!(counts.get(&Split::Test).copied().unwrap_or(0), expected[2]);
        prop_assert!(a.records.iter().zip(&m.records).all(|(x, y)| x.path == y.path && x.age == y.age));
    }
}

#[test]
fn subject_split_keeps_directories_together() {
    let paths: Vec<String> = (0..60).map(|i| format!("s{}/img{i}.png", i % 12)).collect();
    let refs: Vec<&str> = paths.iter().map(String::as_str).collect();
    let m = Manifest::new("", records(&refs)).unwrap();
    let s = split_dataset(&m, [0.6, 0.2, 0.2], 9, SplitMode::Subject).unwrap();
    for subject in 0..12 {
        let splits: BTreeSet<Split> =
            s.records.iter().filter(|r| r.path.starts_with(&format!("s{subject}/"))).map(|r| r.split).collect();
        assert_eq!(splits.len(), 1, "subject {subject} spans {splits:?}");
    }
    assert!(s.records.iter().all(|r| r.split != Split::Unassigned));
}

#[test]
fn preassigned_records_are_kept() {
    let mut recs = records(&["a.png", "b.png", "c.png", "d.png", "e.png"]);
    recs[0].split = Split::Test;
    recs[1].split = Split::Train;
    let m = Manifest::new("", recs).unwrap();
    let s = split_dataset(&m, [0.34, 0.33, 0.33], 1, SplitMode::Image).unwrap();
    assert_eq!(s.records[0].split, Split::Test);
    assert_eq!(s.records[1].split, Split::Train);
    assert!(matches!(split_dataset(&m, [0.5, 0.5, 0.5], 1, SplitMode::Image), Err(Error::Config(_))));
}

#[test]
fn manifest_errors_carry_line_numbers() {
    let bad_header = Manifest::parse("file,age,split\na.png,3,train\n", PathBuf::new()).unwrap_err();
    assert!(matches!(bad_header, Error::Parse { row: 1, .. }), "{bad_header}");
    let bad_age = Manifest::parse("path,age,split\na.png,3,train\nb.png,old,val\n", PathBuf::new()).unwrap_err();
    assert!(matches!(bad_age, Error::Parse { row: 3, .. }), "{bad_age}");
    let neg = Manifest::parse("path,age,split\na.png,-1,train\n", PathBuf::new()).unwrap_err();
    assert!(matches!(neg, Error::Parse { row: 2, .. }), "{neg}");
    let dup = Manifest::parse("path,age,split\na.png,3,train\na.png,4,val\n", PathBuf::new()).unwrap_err();
    assert!(matches!(dup, Error::Parse { row: 3, .. }), "{dup}");
    let split = Manifest::parse("path,age,split\na.png,3,holdout\n", PathBuf::new()).unwrap_err();
    assert!(matches!(split, Error::Parse { row: 2, .. }), "{split}");
}

#[test]
fn manifest_csv_round_trips() {
    let mut recs = records(&["x/a.png", "b,c.png", "d.png"]);
    recs[2].split = Split::Val;
    recs[1].age = 33.25;
    let m = Manifest::new("root", recs).unwrap();
    assert_eq!(Manifest::parse(&m.to_csv(), PathBuf::from("root")).unwrap(), m);
}

#[test]
fn missing_and_undecodable_images_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("junk.png"), b"not a png").unwrap();
    for name in ["junk.png", "absent.png"] {
        let err = Image::load(&dir.path().join(name)).unwrap_err();
        assert_eq!(err.kind(), "io", "{name}: {err}");
        assert!(err.to_string().contains(name));
    }
}

#[test]
fn synthetic_set_loads_and_batches_cover_every_sample_once() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { size: 40, ..SynthSpec::new(23, 3) };
    let m = gen_synthetic(&spec, dir.path()).unwrap();
    let reloaded = Manifest::load(&dir.path().join("manifest.csv")).unwrap();
    assert_eq!(reloaded.records, m.records);

    let all = Manifest { records: m.records.iter().map(|r| Record { split: Split::Train, ..r.clone() }).collect(), ..reloaded };
    let ds = Dataset::load(&all, Split::Train, 32).unwrap();
    assert_eq!(ds.len(), 23);
    assert!(ds.samples.iter().all(|s| (s.image.height(), s.image.width()) == (32, 32)));

    let opts = BatchOptions { shuffle: true, seed: 5, augment: Some(AugmentSpec { size: 32, ..AugmentSpec::default() }), ..BatchOptions::eval(5) };
    let run = |epoch| batches(&ds, &opts, epoch).unwrap().collect::<Result<Vec<_>, _>>().unwrap();
    let e0 = run(0);
    assert_eq!(e0.iter().map(|b| b.ages.len()).collect::<Vec<_>>(), [5, 5, 5, 5, 3]);
    let seen: BTreeSet<usize> = e0.iter().flat_map(|b| b.indices.iter().copied()).collect();
    assert_eq!(seen, (0..23).collect());
    assert_eq!(e0[0].images.shape(), &[5, 3, 32, 32]);
    assert_eq!(e0, run(0));
    assert_ne!(e0[0].indices, run(1)[0].indices);

    let zero = BatchOptions::eval(0);
    assert!(matches!(batches(&ds, &zero, 0).err(), Some(Error::Config(_))));
    let wrong = BatchOptions { augment: Some(AugmentSpec::none(64)), ..BatchOptions::eval(4) };
    assert!(matches!(batches(&ds, &wrong, 0).err(), Some(Error::Config(_))));
}

#[test]
fn eval_batches_are_the_resized_images() {
    let im = noise_image(20, 30, 1);
    let ds = Dataset::from_samples(16, vec![Sample { path: "a".into(), age: 7.0, image: im.clone() }]).unwrap();
    let opts = BatchOptions::eval(8);
    let b = batches(&ds, &opts, 0).unwrap().next().unwrap().unwrap();
    assert_eq!(b.images.data(), im.resize(16, 16).unwrap().to_chw(&opts.normalize).as_slice());
    assert_eq!(b.ages, [7.0]);
}

#[test]
fn synthetic_brightness_rises_with_age() {
    let ims: Vec<(f64, f64)> = agegrad::data::generate(&SynthSpec { size: 32, ..SynthSpec::new(200, 0) })
        .unwrap()
        .into_iter()
        .map(|(age, im)| (age, im.mean_value()))
        .collect();
    let n = ims.len() as f64;
    let (ma, mv) = ims.iter().fold((0.0, 0.0), |(a, v), p| (a + p.0 / n, v + p.1 / n));
    let cov: f64 = ims.iter().map(|(a, v)| (a - ma) * (v - mv)).sum();
    assert!(cov > 0.0);
}
