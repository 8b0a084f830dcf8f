use std::fs;

use mizero_core::io::{
    encode_bag, read_bag, read_classifier, read_manifest, read_pairs, read_text_table, write_bag,
    write_classifier, write_manifest, write_pairs, write_text_table, PairedEmbeddingSet,
};
use mizero_core::rng::SplitMix64;
use mizero_core::{
    DatasetManifest, ErrorClass, ManifestEntry, Matrix, SlideBag, TextEmbeddingTable, ZeroShotClassifier,
};
use proptest::prelude::*;

fn random_matrix(rng: &mut SplitMix64, rows: usize, cols: usize) -> Matrix<f32> {
    // Raw bit patterns cover subnormals and extreme exponents; non-finite
    // values are replaced since bags reject them.
    let data = (0..rows * cols)
        .map(|_| {
            let x = f32::from_bits(rng.next_u64() as u32);
            if x.is_finite() { x } else { 1.0 }
        })
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn bits(m: &Matrix<f32>) -> Vec<u32> {
    m.as_slice().iter().map(|x| x.to_bits()).collect()
}

proptest! {
    #[test]
    fn bag_files_round_trip_bit_exactly(seed in any::<u64>(), n in 1usize..40, d in 1usize..20, coords in any::<bool>()) {
        let mut rng = SplitMix64::new(seed);
        let emb = random_matrix(&mut rng, n, d);
        prop_assume!(emb.iter_rows().all(|r| r.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt() >= 1e-12));
        let c = coords.then(|| (0..n).map(|_| [rng.next_u64() as i32, rng.next_u64() as i32]).collect());
        let bag = SlideBag::new("slide", emb, c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("slide.mizb");
        write_bag(&bag, &path).unwrap();
        let back = read_bag(&path).unwrap();
        prop_assert_eq!(bits(back.embeddings()), bits(bag.embeddings()));
        prop_assert_eq!(back.coords(), bag.coords());
        prop_assert_eq!(back.slide_id(), "slide");
        prop_assert_eq!(fs::read(&path).unwrap(), encode_bag(&back));
    }

    #[test]
    fn pair_files_round_trip_bit_exactly(seed in any::<u64>(), m in 1usize..30, di in 1usize..10, dt in 1usize..10) {
        let mut rng = SplitMix64::new(seed);
        let set = PairedEmbeddingSet::new(random_matrix(&mut rng, m, di), random_matrix(&mut rng, m, dt)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.mizp");
        write_pairs(&set, &path).unwrap();
        let back = read_pairs(&path).unwrap();
        prop_assert_eq!(bits(&back.images), bits(&set.images));
        prop_assert_eq!(bits(&back.texts), bits(&set.texts));
    }
}

fn header(magic: &[u8; 4], version: u32, flags: u32, n: u64, d: u32) -> Vec<u8> {
    let mut b = magic.to_vec();
    b.extend(version.to_le_bytes());
    b.extend(flags.to_le_bytes());
    b.extend(n.to_le_bytes());
    b.extend(d.to_le_bytes());
    b
}

#[test]
fn hand_made_malformed_bags_fail_as_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut payload = header(b"MIZB", 1, 0, 2, 2);
    for x in [1.0f32, 0.0, 0.0, 1.0] {
        payload.extend(x.to_le_bytes());
    }
    fs::write(dir.path().join("good.mizb"), &payload).unwrap();
    assert_eq!(read_bag(dir.path().join("good.mizb")).unwrap().len(), 2);

    let mut bad_magic = payload.clone();
    bad_magic[..4].copy_from_slice(b"XXXX");
    let mut bad_version = payload.clone();
    bad_version[4..8].copy_from_slice(&7u32.to_le_bytes());
    let truncated = payload[..payload.len() - 3].to_vec();
    for (name, bytes, kind) in [
        ("magic.mizb", bad_magic, "BadMagic"),
        ("version.mizb", bad_version, "UnsupportedVersion"),
        ("short.mizb", truncated, "TruncatedFile"),
    ] {
        let path = dir.path().join(name);
        fs::write(&path, bytes).unwrap();
        let err = read_bag(&path).unwrap_err();
        assert_eq!(err.kind(), kind, "{name}");
        assert_eq!(err.class(), ErrorClass::Input);
        assert!(err.to_string().contains(name), "{err}");
    }
}

#[test]
fn absurd_lengths_fail_before_allocating() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("huge.mizb");
    fs::write(&path, header(b"MIZB", 1, 1, u64::MAX / 2, u32::MAX)).unwrap();
    assert_eq!(read_bag(&path).unwrap_err().kind(), "PayloadTooLarge");
}

fn classifier() -> ZeroShotClassifier {
    let mut rng = SplitMix64::new(3);
    let raw = Matrix::from_vec(3, 7, (0..21).map(|_| rng.normal() as f32).collect()).unwrap();
    ZeroShotClassifier::from_raw_rows(vec!["a".into(), "b".into(), "c".into()], &raw).unwrap()
}

#[test]
fn classifier_files_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let clf = classifier();
    let p1 = dir.path().join("one.json");
    let p2 = dir.path().join("two.json");
    write_classifier(&clf, &p1).unwrap();
    let back = read_classifier(&p1).unwrap();
    assert_eq!(bits(back.weights()), bits(clf.weights()));
    assert_eq!(back.class_labels(), clf.class_labels());
    write_classifier(&back, &p2).unwrap();
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
}

#[test]
fn classifier_rows_are_rechecked_on_read() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    write_classifier(&classifier(), &path).unwrap();
    let mut doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    let w = &mut doc["weights"][1][0];
    *w = serde_json::json!(w.as_f64().unwrap() + 0.01);
    fs::write(&path, doc.to_string()).unwrap();
    assert_eq!(read_classifier(&path).unwrap_err().kind(), "NonUnitRow");
}

#[test]
fn text_tables_deduplicate_identical_records() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    fs::write(
        &path,
        "{\"text\":\"a\",\"embedding\":[1,2,3,4]}\n{\"text\":\"b\",\"embedding\":[0,1,0,0]}\n{\"text\":\"a\",\"embedding\":[1,2,3,4]}\n",
    )
    .unwrap();
    let t = read_text_table(&path).unwrap();
    assert_eq!(t.len(), 2);

    fs::write(&path, "{\"text\":\"a\",\"embedding\":[1,2,3,4]}\n{\"text\":\"a\",\"embedding\":[1,2,3,5]}\n").unwrap();
    assert_eq!(read_text_table(&path).unwrap_err().kind(), "DuplicateText");
    fs::write(&path, "{\"text\":\"a\",\"embedding\":[1,2,3,4]}\n{\"text\":\"b\",\"embedding\":[1,2,3,4,5]}\n").unwrap();
    assert_eq!(read_text_table(&path).unwrap_err().kind(), "RaggedDimensions");
}

#[test]
fn text_tables_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = SplitMix64::new(10);
    let mut t = TextEmbeddingTable::new(5);
    for i in 0..20 {
        t.insert(format!("prompt \"{i}\" ü"), (0..5).map(|_| rng.normal() as f32).collect()).unwrap();
    }
    let path = dir.path().join("t.jsonl");
    write_text_table(&t, &path).unwrap();
    let back = read_text_table(&path).unwrap();
    for (text, e) in t.iter() {
        assert_eq!(back.get(text).unwrap(), e);
    }
}

#[test]
fn manifests_resolve_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let bag = SlideBag::new("s1", Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap(), None).unwrap();
    write_bag(&bag, dir.path().join("s1.mizb")).unwrap();
    let manifest = DatasetManifest {
        classes: vec!["x".into(), "y".into()],
        slides: vec![ManifestEntry { slide_id: "s1".into(), path: "s1.mizb".into(), label: 1 }],
    };
    let path = dir.path().join("manifest.json");
    write_manifest(&manifest, &path).unwrap();
    let back = read_manifest(&path).unwrap();
    assert_eq!(back.slides[0].path, dir.path().join("s1.mizb"));

    let missing = DatasetManifest {
        slides: vec![ManifestEntry { slide_id: "s2".into(), path: "nope.mizb".into(), label: 0 }],
        ..manifest
    };
    write_manifest(&missing, &path).unwrap();
    assert_eq!(read_manifest(&path).unwrap_err().class(), ErrorClass::Input);
}
