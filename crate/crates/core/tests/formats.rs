use std::io::Cursor;

use ckd_core::checkpoint::{decode, encode, load_checkpoint, save_checkpoint};
use ckd_core::cifar::{
    parse_cifar100, serialize_cifar100, to_dataset, CHANNEL_MEAN, CHANNEL_STD, PIXEL_BYTES, RECORD_BYTES,
};
use ckd_core::data::{Dataset, SyntheticSpec};
use ckd_core::model::{MlpParams, MlpSpec};
use ckd_core::train::{read_metrics_log, write_metrics_line, EpochRecord};
use ckd_core::Error;

fn fixture() -> Vec<u8> {
    let mut blob = Vec::with_capacity(2 * RECORD_BYTES);
    for (coarse, fine) in [(3u8, 97u8), (0, 0)] {
        blob.push(coarse);
        blob.push(fine);
        blob.extend((0..PIXEL_BYTES).map(|i| (i % 256) as u8));
    }
    blob
}

#[test]
fn cifar_fixture_round_trips() {
    let blob = fixture();
    let records = parse_cifar100(&blob).unwrap();
    assert_eq!(records.len(), 2);
    assert_eq!((records[0].coarse_label, records[0].fine_label), (3, 97));
    assert_eq!((records[1].coarse_label, records[1].fine_label), (0, 0));
    assert_eq!(records[0].pixels[300], 44);
    assert_eq!(serialize_cifar100(&records), blob);
    assert!(parse_cifar100(&[]).unwrap().is_empty());
}

#[test]
fn cifar_truncated_and_corrupt() {
    assert!(matches!(parse_cifar100(&[0u8; 3073]), Err(Error::Truncated { offset: 0 })));
    let mut blob = fixture();
    blob.pop();
    assert!(matches!(parse_cifar100(&blob), Err(Error::Truncated { offset: RECORD_BYTES })));

    let mut blob = fixture();
    blob[RECORD_BYTES + 1] = 100;
    assert!(matches!(parse_cifar100(&blob), Err(Error::CorruptRecord { record: 1, .. })));
    let mut blob = fixture();
    blob[0] = 20;
    assert!(matches!(parse_cifar100(&blob), Err(Error::CorruptRecord { record: 0, .. })));
}

#[test]
fn cifar_dataset_is_standardized_per_channel() {
    let ds = to_dataset(&parse_cifar100(&fixture()).unwrap()).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.dim(), PIXEL_BYTES);
    assert_eq!(ds.labels(), &[97, 0]);
    assert_eq!(ds.class_count(), 100);
    for (i, ch) in [(5usize, 0usize), (1024 + 7, 1), (2048 + 255, 2)] {
        let raw = (i % 256) as f64 / 255.0;
        let want = (raw - CHANNEL_MEAN[ch]) / CHANNEL_STD[ch];
        assert!((ds.features().get2(0, i) - want).abs() < 1e-15);
    }
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    let spec = MlpSpec::new(vec![6, 9, 4], 17).unwrap();
    let params = MlpParams::<f64>::init(&spec).unwrap();
    save_checkpoint(&params, &path).unwrap();
    let back = load_checkpoint(&path, &spec).unwrap();
    for (a, b) in back.tensors().iter().zip(params.tensors()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(std::fs::read(&path).unwrap(), encode(params.tensors()));

    let other = MlpSpec::new(vec![6, 8, 4], 17).unwrap();
    assert!(matches!(load_checkpoint(&path, &other), Err(Error::ShapeTable(_))));
}

#[test]
fn checkpoint_rejects_damage() {
    let params = MlpParams::<f64>::init(&MlpSpec::new(vec![3, 2], 0).unwrap()).unwrap();
    let bytes = encode(params.tensors());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode(&bad), Err(Error::Format(_))));
    assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Truncated { .. })));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode(&long), Err(Error::Format(_))));
}

#[test]
fn ckds_round_trip() {
    let split = SyntheticSpec { per_class: 7, ..SyntheticSpec::default() }.generate().unwrap();
    let mut buf = Vec::new();
    split.train.write_ckds(&mut buf).unwrap();
    assert_eq!(buf.len(), 16 + 56 * 16 * 8 + 56 * 2);
    let back = Dataset::read_ckds(Cursor::new(&buf)).unwrap();
    assert_eq!(back, split.train);
    assert!(matches!(Dataset::read_ckds(Cursor::new(&buf[..100])), Err(Error::Truncated { .. })));
    buf[1] = b'X';
    assert!(matches!(Dataset::read_ckds(Cursor::new(&buf)), Err(Error::Format(_))));
}

#[test]
fn metrics_log_round_trip_and_line_errors() {
    let rec = EpochRecord {
        epoch: 1,
        lr: 0.05,
        task_loss: 1.25,
        kd_loss: 0.5,
        total_loss: 51.25,
        train_accuracy: 0.5,
        test_accuracy: 0.375,
        wall_ms: 12,
    };
    let mut buf = Vec::new();
    write_metrics_line(&mut buf, &rec).unwrap();
    write_metrics_line(&mut buf, &EpochRecord { epoch: 2, ..rec.clone() }).unwrap();
    let back = read_metrics_log(Cursor::new(&buf)).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(back[0], rec);

    buf.extend_from_slice(b"{\"epoch\": oops}\n");
    match read_metrics_log(Cursor::new(&buf)) {
        Err(Error::Format(m)) => assert!(m.starts_with("line 3:"), "{}", m),
        other => panic!("unexpected {:?}", other),
    }
}
