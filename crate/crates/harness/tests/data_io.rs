use pgp_harness::data::{export, gen_synthetic, load_dataset, read_split, write_split, RawDataset, SyntheticSpec};

fn small() -> (RawDataset, RawDataset) {
    gen_synthetic(&SyntheticSpec::new(4, 8, 8, 20, 8, 5)).unwrap()
}

#[test]
fn export_then_load_keeps_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = small();
    export(dir.path(), &train, &test).unwrap();
    assert_eq!(read_split(&dir.path().join("train"), 4).unwrap(), train);
    assert_eq!(read_split(&dir.path().join("test"), 4).unwrap(), test);

    let splits = load_dataset(dir.path(), 4).unwrap();
    assert_eq!(splits.train.len(), 20);
    assert_eq!(splits.test.images.shape().c, 3);
    let labels: Vec<usize> = train.labels.iter().map(|&l| l as usize).collect();
    assert_eq!(splits.train.labels, labels);
    // Pixel 0 of the train split after normalization.
    let n = &splits.train.norm;
    let want = (train.pixels[0] as f64 / 255.0 - n.mean[0]) / n.std[0];
    assert!((splits.train.images.data()[0] as f64 - want).abs() < 1e-6);
}

#[test]
fn file_layout() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = small();
    write_split(dir.path(), &train).unwrap();
    let img = std::fs::read(dir.path().join("images.bin")).unwrap();
    assert_eq!(&img[..6], b"PGPD1\n");
    let dims: Vec<u32> = img[6..22].chunks(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect();
    assert_eq!(dims, vec![20, 3, 8, 8]);
    assert_eq!(img.len(), 22 + 20 * 3 * 64);
    let lab = std::fs::read(dir.path().join("labels.bin")).unwrap();
    assert_eq!(&lab[..6], b"PGPL1\n");
    assert_eq!(u32::from_le_bytes(lab[6..10].try_into().unwrap()), 20);
    assert_eq!(u16::from_le_bytes([lab[12], lab[13]]), 1);
}

#[test]
fn truncated_images_name_both_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = small();
    write_split(dir.path(), &train).unwrap();
    let path = dir.path().join("images.bin");
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
    let err = read_split(dir.path(), 4).unwrap_err().to_string();
    let full = 22 + 20 * 3 * 64;
    assert!(err.contains(&full.to_string()) && err.contains(&(full - 10).to_string()), "{err}");
}

#[test]
fn truncated_labels() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = small();
    write_split(dir.path(), &train).unwrap();
    let path = dir.path().join("labels.bin");
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    let err = read_split(dir.path(), 4).unwrap_err().to_string();
    assert!(err.contains("50") && err.contains("49"), "{err}");
}

#[test]
fn label_out_of_range() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = small();
    write_split(dir.path(), &train).unwrap();
    assert!(read_split(dir.path(), 4).is_ok());
    let err = read_split(dir.path(), 3).unwrap_err().to_string();
    assert!(err.contains("label 3"), "{err}");
}

#[test]
fn magic_and_count_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = small();
    write_split(dir.path(), &train).unwrap();
    let path = dir.path().join("images.bin");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[4] = b'9';
    std::fs::write(&path, &bytes).unwrap();
    assert!(read_split(dir.path(), 4).unwrap_err().to_string().contains("magic"));

    write_split(dir.path(), &train).unwrap();
    let other = tempfile::tempdir().unwrap();
    write_split(other.path(), &test).unwrap();
    std::fs::copy(other.path().join("labels.bin"), dir.path().join("labels.bin")).unwrap();
    let err = read_split(dir.path(), 4).unwrap_err().to_string();
    assert!(err.contains("8 labels for 20 images"), "{err}");
}

#[test]
fn mismatched_split_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = small();
    let (_, test) = gen_synthetic(&SyntheticSpec::new(4, 12, 12, 8, 8, 5)).unwrap();
    export(dir.path(), &train, &test).unwrap();
    assert!(load_dataset(dir.path(), 4).is_err());
}
