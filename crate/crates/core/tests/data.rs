use std::collections::BTreeSet;

use genkd::data::{
    batches, decode_dataset, encode_dataset, generate_dataset, load_dataset, save_dataset, spatial_probe, DatasetSpec,
};
use genkd::Error;

fn small() -> DatasetSpec {
    DatasetSpec {
        train_per_class: 5,
        val_per_class: 3,
        ..DatasetSpec::default()
    }
}

#[test]
fn generation_is_deterministic() {
    let a = generate_dataset(&small()).unwrap();
    let b = generate_dataset(&small()).unwrap();
    assert_eq!(encode_dataset(&a).unwrap(), encode_dataset(&b).unwrap());
    let other = generate_dataset(&DatasetSpec { seed: 8, ..small() }).unwrap();
    assert_ne!(a.train[0].clip, other.train[0].clip);
}

#[test]
fn values_stay_in_unit_interval() {
    let ds = generate_dataset(&DatasetSpec::default()).unwrap();
    let all = ds.train.iter().chain(&ds.val).flat_map(|s| s.clip.data().iter().copied());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    assert!(lo >= 0.0 && hi <= 1.0, "range [{lo}, {hi}]");
}

#[test]
fn default_counts_and_shapes() {
    let ds = generate_dataset(&DatasetSpec::default()).unwrap();
    assert_eq!(ds.train.len(), 200);
    assert_eq!(ds.val.len(), 100);
    assert_eq!(ds.train[0].clip.shape(), &[1, 8, 16, 16]);
}

#[test]
fn file_round_trip_is_byte_exact() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&small()).unwrap();
    let p1 = dir.path().join("a.gkdd");
    let p2 = dir.path().join("b.gkdd");
    save_dataset(&p1, &ds).unwrap();
    let back = load_dataset(&p1).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.train.len() + back.val.len(), 4 * (5 + 3));
    save_dataset(&p2, &back).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn corrupt_files_report_offsets() {
    let ds = generate_dataset(&small()).unwrap();
    let good = encode_dataset(&ds).unwrap();

    let mut bad_magic = good.clone();
    bad_magic[1] = b'X';
    assert!(matches!(decode_dataset(&bad_magic), Err(Error::Format { offset: 0, .. })));

    let mut bad_version = good.clone();
    bad_version[4] = 9;
    assert!(matches!(decode_dataset(&bad_version), Err(Error::Format { offset: 8, .. })));

    let truncated = &good[..good.len() - 3];
    match decode_dataset(truncated) {
        Err(Error::Format { offset, msg }) => {
            assert!(offset > 0 && (offset as usize) < good.len());
            assert!(msg.contains("truncated"), "{msg}");
        }
        other => panic!("expected format error, got {other:?}"),
    }

    let mut trailing = good;
    trailing.push(0);
    assert!(matches!(decode_dataset(&trailing), Err(Error::Format { .. })));
}

#[test]
fn batches_cover_each_sample_once() {
    let ds = generate_dataset(&small()).unwrap();
    let bs = batches(&ds.train, 6, 3).unwrap();
    assert_eq!(bs.len(), 4);
    assert_eq!(bs.last().unwrap().labels.len(), 2);
    let seen: Vec<usize> = bs.iter().flat_map(|b| b.indices.iter().copied()).collect();
    assert_eq!(seen.len(), 20);
    assert_eq!(seen.iter().copied().collect::<BTreeSet<_>>().len(), 20);
    for b in &bs {
        for (j, &i) in b.indices.iter().enumerate() {
            assert_eq!(b.labels[j], ds.train[i].label);
        }
        assert_eq!(b.clips.shape()[1..], [1, 8, 16, 16]);
    }
}

#[test]
fn batch_order_is_a_function_of_the_seed() {
    let ds = generate_dataset(&DatasetSpec {
        train_per_class: 25,
        ..small()
    })
    .unwrap();
    let order = |seed| -> Vec<usize> { batches(&ds.train, 7, seed).unwrap().iter().flat_map(|b| b.indices.clone()).collect() };
    assert_eq!(order(11), order(11));
    assert_ne!(order(11), order(12));
}

#[test]
fn zero_batch_size_is_a_usage_error() {
    let ds = generate_dataset(&small()).unwrap();
    assert!(matches!(batches(&ds.train, 0, 0), Err(Error::Usage(_))));
}

#[test]
fn single_frames_carry_no_label_information() {
    let ds = generate_dataset(&DatasetSpec::default()).unwrap();
    let acc = spatial_probe(&ds, 200, 0.5);
    assert!(acc <= 0.35, "spatial probe reached {acc}");
}

#[test]
fn probe_detects_spatial_cues_when_present() {
    let mut ds = generate_dataset(&small()).unwrap();
    // Brighten one image quadrant per class: now single frames do reveal labels.
    for s in ds.train.iter_mut().chain(ds.val.iter_mut()) {
        let (qy, qx) = (s.label / 2, s.label % 2);
        for (i, v) in s.clip.data_mut().iter_mut().enumerate() {
            let (y, x) = ((i / 16) % 16, i % 16);
            if y / 8 == qy && x / 8 == qx {
                *v = (*v + 0.5).min(1.0);
            }
        }
    }
    assert!(spatial_probe(&ds, 200, 0.5) > 0.9);
}
