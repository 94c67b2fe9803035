use super::*;
use std::collections::HashSet;
use std::fs;

fn tiny(classes: usize, per_class: usize) -> LabeledDataset {
    let names = (0..classes).map(|c| format!("c{c}")).collect();
    let items = (0..classes * per_class)
        .map(|i| Item {
            image: Tensor::full(&[3, 2, 2], i as f64 / 100.0),
            label: i / per_class,
            source_id: format!("item{i}"),
        })
        .collect();
    LabeledDataset::new(names, items).unwrap()
}

#[test]
fn split_counts_follow_ratio() {
    let ds = tiny(21, 100);
    let (train, test) = stratified_split(&ds, 0.8, 3).unwrap();
    assert_eq!(train.class_counts(), vec![80; 21]);
    assert_eq!(test.class_counts(), vec![20; 21]);
    let ds = tiny(3, 7);
    let (train, test) = stratified_split(&ds, 0.5, 3).unwrap();
    assert_eq!(train.class_counts(), vec![3; 3]);
    assert_eq!(test.class_counts(), vec![4; 3]);
}

#[test]
fn split_is_a_seeded_partition() {
    let ds = tiny(4, 10);
    let (a, b) = stratified_split(&ds, 0.3, 11).unwrap();
    let (a2, _) = stratified_split(&ds, 0.3, 11).unwrap();
    let (a3, _) = stratified_split(&ds, 0.3, 12).unwrap();
    assert_eq!(a, a2);
    assert_ne!(a, a3);
    let ids: Vec<&str> = a.items.iter().chain(&b.items).map(|i| i.source_id.as_str()).collect();
    let unique: HashSet<&str> = ids.iter().copied().collect();
    assert_eq!(ids.len(), 40);
    assert_eq!(unique.len(), 40);
}

#[test]
fn split_errors() {
    let ds = tiny(2, 1);
    assert!(matches!(stratified_split(&ds, 0.5, 0), Err(Error::Dataset(_))));
    let ds = tiny(2, 4);
    for r in [0.0, 1.0, -0.2, f64::NAN] {
        assert!(stratified_split(&ds, r, 0).is_err());
    }
}

#[test]
fn dataset_rejects_bad_items() {
    let mut items = tiny(2, 2).items;
    items[1].label = 5;
    assert!(matches!(
        LabeledDataset::new(vec!["a".into(), "b".into()], items),
        Err(Error::LabelOutOfRange { label: 5, classes: 2 })
    ));
    let mut items = tiny(2, 2).items;
    items[3].image = Tensor::zeros(&[3, 4, 4]);
    assert!(LabeledDataset::new(vec!["a".into(), "b".into()], items).is_err());
}

#[test]
fn resize_keeps_constants_and_identity() {
    let c = Tensor::full(&[3, 5, 7], 0.625);
    let r = resize_bilinear(&c, 12, 9);
    assert_eq!(r.shape(), &[3, 12, 9]);
    assert!(r.data().iter().all(|&v| v == 0.625));
    let x = Tensor::from_fn(&[1, 4, 4], |i| i as f64);
    assert_eq!(resize_bilinear(&x, 4, 4), x);
    // 2× downsample of a ramp averages neighbouring pixels.
    let d = resize_bilinear(&Tensor::new(vec![1, 1, 4], vec![0.0, 1.0, 2.0, 3.0]).unwrap(), 1, 2);
    assert_eq!(d.data(), &[0.5, 2.5]);
}

#[test]
fn synth_counts_and_determinism() {
    let ds = synth_generate(3, 100, 96, 7).unwrap();
    assert_eq!(ds.len(), 300);
    assert_eq!(ds.num_classes(), 3);
    assert_eq!(ds.class_counts(), vec![100; 3]);
    assert!(ds.items.iter().all(|i| i.image.shape() == [3, 96, 96]));
    assert!(ds.items.iter().all(|i| i.image.data().iter().all(|&v| (0.0..=1.0).contains(&v))));
    let again = synth_generate(3, 100, 96, 7).unwrap();
    assert!(ds.items.iter().zip(&again.items).all(|(a, b)| a.image.data() == b.image.data()));
    let other = synth_generate(3, 100, 96, 8).unwrap();
    assert_ne!(ds.items[0].image, other.items[0].image);
}

#[test]
fn synth_glyph_boxes_stay_inside() {
    let set = synth_generate_with(8, 20, 64, 1, &SynthParams::default()).unwrap();
    for b in &set.boxes {
        assert_eq!(b.side, 16);
        assert!(b.y + b.side <= 64 && b.x + b.side <= 64);
    }
}

#[test]
fn synth_glyphs_are_distinct() {
    let patterns: Vec<Vec<bool>> = (0..GLYPHS.len()).map(synth::pattern).collect();
    for i in 0..patterns.len() {
        assert!(patterns[i].iter().any(|&b| b) && patterns[i].iter().any(|&b| !b));
        for j in 0..i {
            assert_ne!(patterns[i], patterns[j], "{} vs {}", GLYPHS[i], GLYPHS[j]);
        }
    }
}

#[test]
fn synth_rejects_bad_arguments() {
    assert!(synth_generate(99, 10, 96, 0).is_err());
    assert!(synth_generate(0, 10, 96, 0).is_err());
    assert!(synth_generate(3, 10, 100, 0).is_err());
    assert!(synth_generate(3, 0, 96, 0).is_err());
}

#[test]
fn directory_round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_generate(3, 4, 32, 2).unwrap();
    assert_eq!(write_dataset_dir(&ds, dir.path()).unwrap(), 12);
    let back = load_image_dir(dir.path(), 32).unwrap();
    assert_eq!(back.class_names, ds.class_names);
    assert_eq!(back.len(), 12);
    for (a, b) in ds.items.iter().zip(&back.items) {
        assert_eq!(a.label, b.label);
        assert_eq!(a.image.data(), b.image.data());
    }
    let small = load_image_dir(dir.path(), 64).unwrap();
    assert_eq!(small.image_size(), Some(64));
}

#[test]
fn grayscale_and_ascii_netpbm() {
    let dir = tempfile::tempdir().unwrap();
    let class = dir.path().join("gray");
    fs::create_dir(&class).unwrap();
    fs::write(class.join("a.pgm"), b"P2\n2 2\n255\n0 51\n102 255\n").unwrap();
    fs::write(class.join("b.pgm"), [b"P5\n2 2\n255\n".as_slice(), &[0, 51, 102, 255]].concat()).unwrap();
    fs::write(class.join("c.ppm"), b"P3\n1 1\n255\n255 0 51\n").unwrap();
    fs::write(class.join("notes.txt"), b"ignored").unwrap();
    let a = load_image(&class.join("a.pgm"), 2).unwrap();
    assert_eq!(a.shape(), &[3, 2, 2]);
    for c in 0..3 {
        assert_eq!(&a.data()[c * 4..c * 4 + 4], &[0.0, 0.2, 0.4, 1.0]);
    }
    assert_eq!(a, load_image(&class.join("b.pgm"), 2).unwrap());
    let c = load_image(&class.join("c.ppm"), 1).unwrap();
    assert_eq!(c.data(), &[1.0, 0.0, 0.2]);
    let ds = load_image_dir(dir.path(), 4).unwrap();
    assert_eq!(ds.len(), 3);
}

#[test]
fn ingestion_errors() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("empty")).unwrap();
    assert!(matches!(load_image_dir(dir.path(), 32), Err(Error::Dataset(_))));
    let bad = dir.path().join("empty").join("broken.ppm");
    fs::write(&bad, b"P6\n4 4\n255\nxx").unwrap();
    match load_image_dir(dir.path(), 32) {
        Err(Error::Decode { path, .. }) => assert_eq!(path, bad),
        other => panic!("{other:?}"),
    }
    assert!(load_image_dir(&dir.path().join("missing"), 32).is_err());
}

#[cfg(feature = "png")]
#[test]
fn png_is_decoded() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.png");
    image::RgbImage::from_raw(1, 1, vec![255, 0, 51]).unwrap().save(&path).unwrap();
    assert_eq!(load_image(&path, 1).unwrap().data(), &[1.0, 0.0, 0.2]);
}
