use std::io::Write;
use std::path::Path;

use flate2::write::GzEncoder;
use flate2::Compression;
use proptest::prelude::*;
use qfed::data::{self, DataPaths, Dataset, Split, IMAGE_MAGIC, LABEL_MAGIC, PIXELS};
use qfed::QfedError;

fn idx_images(images: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [IMAGE_MAGIC, images.len() as u32, 28, 28] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in images {
        out.extend_from_slice(img);
    }
    out
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn gzip(bytes: &[u8]) -> Vec<u8> {
    let mut enc = GzEncoder::new(Vec::new(), Compression::default());
    enc.write_all(bytes).unwrap();
    enc.finish().unwrap()
}

fn two_images() -> (Vec<Vec<u8>>, Vec<u8>) {
    let a: Vec<u8> = (0..PIXELS).map(|i| (i % 256) as u8).collect();
    let b: Vec<u8> = (0..PIXELS).map(|i| 255 - (i * 7 % 256) as u8).collect();
    (vec![a, b], vec![9, 0])
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, bytes).unwrap();
    p
}

#[test]
fn two_image_fixture_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (imgs, labels) = two_images();
    let ip = write(dir.path(), "img", &idx_images(&imgs));
    let lp = write(dir.path(), "lbl", &idx_labels(&labels));
    let ds: Dataset<f64> = data::load_idx(&ip, &lp, Split::Test).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.labels(), vec![9, 0]);
    for (k, img) in imgs.iter().enumerate() {
        let got = ds.get(k);
        for (p, &b) in got.pixels.iter().zip(img) {
            assert_eq!((p * 255.0).round() as u8, b);
            assert_eq!(*p, b as f64 / 255.0);
        }
    }
}

#[test]
fn gzip_and_plain_files_load_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (imgs, labels) = two_images();
    write(dir.path(), "train-images-idx3-ubyte.gz", &gzip(&idx_images(&imgs)));
    write(dir.path(), "train-labels-idx1-ubyte.gz", &gzip(&idx_labels(&labels)));
    let plain_i = write(dir.path(), "plain-img", &idx_images(&imgs));
    let plain_l = write(dir.path(), "plain-lbl", &idx_labels(&labels));
    let gz: Dataset<f32> = DataPaths::in_dir(dir.path()).load_train().unwrap();
    let raw: Dataset<f32> = data::load_idx(&plain_i, &plain_l, Split::Train).unwrap();
    assert_eq!(gz, raw);
}

#[test]
fn label_file_given_as_images_is_a_parse_error() {
    let labels = idx_labels(&[1, 2, 3]);
    match data::parse_idx_images(&labels, "labels-as-images") {
        Err(QfedError::Parse { offset, expected, .. }) => {
            assert_eq!(offset, 0);
            assert!(expected.contains("0x00000803"), "{expected}");
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn truncated_and_mismatched_files_name_the_problem() {
    let (imgs, labels) = two_images();
    let full = idx_images(&imgs);
    let cut = &full[..full.len() - 10];
    let err = data::parse_idx_images(cut, "cut").unwrap_err().to_string();
    assert!(err.contains("truncated"), "{err}");

    let mut bad_dims = full.clone();
    bad_dims[8..12].copy_from_slice(&27u32.to_be_bytes());
    match data::parse_idx_images(&bad_dims, "dims") {
        Err(QfedError::Parse { offset: 8, .. }) => {}
        other => panic!("expected a row-count error at offset 8, got {other:?}"),
    }

    let dir = tempfile::tempdir().unwrap();
    let ip = write(dir.path(), "img", &full);
    let lp = write(dir.path(), "lbl", &idx_labels(&labels[..1]));
    assert!(matches!(
        data::load_idx::<f64>(&ip, &lp, Split::Train),
        Err(QfedError::Parse { .. })
    ));
    assert!(data::parse_idx_labels(&[0, 0], "short").is_err());
}

#[test]
fn out_of_range_labels_are_rejected() {
    let (imgs, _) = two_images();
    let dir = tempfile::tempdir().unwrap();
    let ip = write(dir.path(), "img", &idx_images(&imgs));
    let lp = write(dir.path(), "lbl", &idx_labels(&[3, 10]));
    assert!(data::load_idx::<f64>(&ip, &lp, Split::Train).is_err());
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let r = DataPaths::in_dir(dir.path()).load_test::<f64>();
    assert!(matches!(r, Err(QfedError::Io { .. })), "{r:?}");
}

fn synthetic(n: usize, seed: u64) -> Dataset<f64> {
    let pixels = (0..n * PIXELS)
        .map(|i| ((i as u64 * 31 + seed) % 256) as f64 / 255.0)
        .collect();
    let labels = (0..n).map(|i| ((i * 7 + seed as usize) % 10) as u8).collect();
    Dataset::new(Split::Train, pixels, labels).unwrap()
}

#[test]
fn thousand_sample_subset_is_balanced() {
    let ds = synthetic(3000, 1);
    let s = data::subset(&ds, 1000, 4).unwrap();
    assert_eq!(s.class_counts(), [100; 10]);
    assert!(data::subset(&ds, 3001, 4).is_err());
}

#[test]
fn full_size_subset_is_a_permutation() {
    let ds = synthetic(50, 2);
    let s = data::subset(&ds, 50, 9).unwrap();
    let key = |d: &Dataset<f64>| {
        let mut v: Vec<(usize, Vec<u64>)> = d
            .iter()
            .map(|x| (x.label, x.pixels.iter().map(|p| p.to_bits()).collect()))
            .collect();
        v.sort();
        v
    };
    assert_eq!(key(&s), key(&ds));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn subsets_are_stratified_and_reproducible(n in 0usize..400, seed in any::<u64>()) {
        let ds = synthetic(400, 3);
        let a = data::subset(&ds, n, seed).unwrap();
        let b = data::subset(&ds, n, seed).unwrap();
        prop_assert_eq!(&a, &b);
        let counts = a.class_counts();
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
    }

    #[test]
    fn parsed_pixels_stay_in_unit_range(bytes in prop::collection::vec(any::<u8>(), PIXELS)) {
        let dir = tempfile::tempdir().unwrap();
        let ip = write(dir.path(), "img", &idx_images(&[bytes]));
        let lp = write(dir.path(), "lbl", &idx_labels(&[5]));
        let ds: Dataset<f64> = data::load_idx(&ip, &lp, Split::Test).unwrap();
        prop_assert!(ds.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
    }
}
