use squisher_core::data::{generate, load_idx, parse_idx_images, parse_idx_labels, GeneratorSpec};
use squisher_core::nn::Label;
use squisher_core::Error;

fn write_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [0x0803u32, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

fn write_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&0x0801u32.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[test]
fn writer_round_trip() {
    let (n, rows, cols) = (37, 5, 3);
    let pixels: Vec<u8> = (0..n * rows * cols).map(|i| ((i * 97 + 13) % 256) as u8).collect();
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("images.idx"), dir.path().join("labels.idx"));
    std::fs::write(&ip, write_images(n, rows, cols, &pixels)).unwrap();
    std::fs::write(&lp, write_labels(&labels)).unwrap();
    let (x, y) = load_idx(&ip, &lp).unwrap();
    assert_eq!(x.shape(), &[n, rows * cols]);
    for (got, &p) in x.data().iter().zip(&pixels) {
        assert_eq!(*got, p as f64 / 255.0);
    }
    assert_eq!(y, labels.iter().map(|&c| Label::Class(c as usize)).collect::<Vec<_>>());
}

#[test]
fn count_mismatch_and_truncation_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
    std::fs::write(&ip, write_images(2, 1, 2, &[0, 1, 2, 3])).unwrap();
    std::fs::write(&lp, write_labels(&[1, 2, 3])).unwrap();
    assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { field, .. }) if field == "labels.count"));

    let short = write_images(2, 1, 2, &[0, 1, 2]);
    assert!(matches!(parse_idx_images(&short), Err(Error::Format { field, .. }) if field == "images.pixels"));
    let mut bad = write_labels(&[1]);
    bad[3] = 0x03;
    assert!(matches!(parse_idx_labels(&bad), Err(Error::Format { field, .. }) if field == "labels.magic"));
}

#[test]
fn generated_splits_are_disjoint_and_labels_in_range() {
    let gen = GeneratorSpec::blobs(3, 4, 30, 1.0, 8);
    let stream = generate(&gen).unwrap();
    assert_eq!(stream, generate(&gen).unwrap());
    let task = &stream.tasks[0];
    for d in [&task.train, &task.test] {
        assert!(d.labels().iter().all(|y| y.class().is_some_and(|c| c < task.num_classes)));
    }
    for i in 0..task.train.len() {
        for j in 0..task.test.len() {
            assert_ne!(task.train.inputs().row(i), task.test.inputs().row(j));
        }
    }
}
