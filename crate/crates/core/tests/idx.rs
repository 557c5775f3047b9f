use elle_core::config::RunConfig;
use elle_core::data::{load_idx, synth_strokes, write_idx};
use elle_core::trainer::load_data;
use elle_core::Error;

#[test]
fn round_trip_quantizes_to_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
    let ds = synth_strokes(12, 4, 5, 1, 0.3, 2).unwrap();
    write_idx(&ds, &img, &lab, 12, 12).unwrap();
    let back = load_idx(&img, &lab).unwrap();
    assert_eq!(back.labels(), ds.labels());
    assert_eq!(back.dim(), 144);
    for (a, b) in back.inputs().data().iter().zip(ds.inputs().data()) {
        assert_eq!(*a, (b * 255.0).round() / 255.0);
    }
}

#[test]
fn swapped_files_report_bad_magic() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
    write_idx(
        &synth_strokes(8, 2, 3, 0, 0.0, 0).unwrap(),
        &img,
        &lab,
        8,
        8,
    )
    .unwrap();
    let err = load_idx(&lab, &img).unwrap_err();
    assert!(
        matches!(
            err,
            Error::BadMagic {
                found: 2049,
                expected: 2051,
                ..
            }
        ),
        "{err}"
    );
}

#[test]
fn short_payload_is_truncated() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
    write_idx(
        &synth_strokes(8, 2, 3, 0, 0.0, 0).unwrap(),
        &img,
        &lab,
        8,
        8,
    )
    .unwrap();
    let bytes = std::fs::read(&img).unwrap();
    std::fs::write(&img, &bytes[..bytes.len() - 10]).unwrap();
    let err = load_idx(&img, &lab).unwrap_err();
    assert!(
        matches!(err, Error::Truncated { got, expected: 384, .. } if got == 374),
        "{err}"
    );
    std::fs::write(&img, &bytes[..6]).unwrap();
    assert!(matches!(
        load_idx(&img, &lab).unwrap_err(),
        Error::Truncated { .. }
    ));
}

#[test]
fn label_count_must_match() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab, lab2) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    write_idx(
        &synth_strokes(8, 2, 3, 0, 0.0, 0).unwrap(),
        &img,
        &lab,
        8,
        8,
    )
    .unwrap();
    write_idx(
        &synth_strokes(8, 2, 2, 0, 0.0, 0).unwrap(),
        &dir.path().join("d"),
        &lab2,
        8,
        8,
    )
    .unwrap();
    let err = load_idx(&img, &lab2).unwrap_err();
    assert!(
        matches!(
            err,
            Error::CountMismatch {
                images: 6,
                labels: 4
            }
        ),
        "{err}"
    );
}

#[test]
fn idx_config_loads_a_seeded_subset() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
    write_idx(
        &synth_strokes(28, 10, 20, 2, 0.2, 4).unwrap(),
        &img,
        &lab,
        28,
        28,
    )
    .unwrap();
    let text = format!(
        "[model]\ninput_dim = 784\nhidden = [8]\nclasses = 10\n[data]\nsource = \"idx\"\nimages = {:?}\nlabels = {:?}\nsubset = 150\ntest_size = 50\n",
        img.display().to_string(),
        lab.display().to_string()
    );
    let cfg = RunConfig::parse(&text).unwrap();
    let (train, test) = load_data(&cfg).unwrap();
    assert_eq!((train.len(), test.len()), (100, 50));
    let (train2, _) = load_data(&cfg).unwrap();
    assert_eq!(train.inputs(), train2.inputs());
}
