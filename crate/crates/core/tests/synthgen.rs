use std::fs;

use orthomap::synthgen::*;
use orthomap::Error;

#[test]
fn default_scenes_have_sparse_foreground_and_cover_every_class() {
    let cfg = GenConfig::default();
    let scenes = generate_scenes(2024, 1000, &cfg).unwrap();
    let mean_fg = scenes.iter().map(Scene::foreground_fraction).sum::<f64>() / 1000.0;
    assert!((0.02..=0.15).contains(&mean_fg), "foreground fraction {mean_fg}");
    let mut counts = vec![0usize; cfg.classes];
    for s in &scenes {
        assert!(s.annotations.len() <= 6);
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for a in &s.annotations {
            counts[a.class_id] += 1;
            assert_eq!(a.family_id, cfg.family_of(a.class_id));
            assert!((4.0..=24.0).contains(&a.width()) && (4.0..=24.0).contains(&a.height()));
        }
    }
    assert!(counts.iter().all(|&c| c >= 20), "{counts:?}");
}

#[test]
fn subclasses_get_closer_as_delta_shrinks() {
    let mut last = f64::INFINITY;
    for delta in [0.5, 0.3, 0.15, 0.08, 0.04, 0.02] {
        let cfg = GenConfig {
            delta,
            ..GenConfig::default()
        };
        let d = within_family_template_distance(&cfg, 16.0, 32);
        assert!(d < last, "delta {delta}: {d} >= {last}");
        last = d;
    }
}

fn written() -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::generate(5, 6, &GenConfig::default()).unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    (dir, ds)
}

fn kind(e: Error) -> u8 {
    match e {
        Error::Format { kind, .. } => kind.code(),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn dataset_round_trip() {
    let (dir, ds) = written();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), ds.len());
    for (a, b) in ds.scenes.iter().zip(&back.scenes) {
        assert_eq!(a.annotations, b.annotations);
        assert_eq!(a.seed, b.seed);
        let diff = a.image.max_abs_diff(&b.image);
        assert!(diff <= f32::EPSILON as f64, "{diff}");
    }
    let manifest: DatasetManifest =
        serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.content_hash, recompute_hash(dir.path(), ds.len()).unwrap());
}

#[test]
fn rewriting_gives_identical_bytes() {
    let (a, _) = written();
    let (b, _) = written();
    for name in ["manifest.json", "annotations.jsonl", "images/000003.bin"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
    }
}

#[test]
fn corrupted_magic_is_rejected() {
    let (dir, _) = written();
    let p = dir.path().join("images/000002.bin");
    let mut bytes = fs::read(&p).unwrap();
    bytes[0] = b'X';
    fs::write(&p, bytes).unwrap();
    assert_eq!(kind(read_dataset(dir.path()).unwrap_err()), 10);
}

#[test]
fn truncated_image_is_rejected() {
    let (dir, _) = written();
    let p = dir.path().join("images/000001.bin");
    let bytes = fs::read(&p).unwrap();
    fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
    assert_eq!(kind(read_dataset(dir.path()).unwrap_err()), 12);
}

#[test]
fn changed_pixel_fails_the_checksum() {
    let (dir, _) = written();
    let p = dir.path().join("images/000004.bin");
    let mut bytes = fs::read(&p).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 0x01;
    fs::write(&p, bytes).unwrap();
    assert_eq!(kind(read_dataset(dir.path()).unwrap_err()), 13);
}

#[test]
fn future_format_version_is_rejected() {
    let (dir, _) = written();
    let p = dir.path().join("manifest.json");
    let text = fs::read_to_string(&p).unwrap();
    let bumped = text.replace(
        &format!("\"format_version\": {FORMAT_VERSION}"),
        &format!("\"format_version\": {}", FORMAT_VERSION + 1),
    );
    assert_ne!(text, bumped);
    fs::write(&p, bumped).unwrap();
    assert_eq!(kind(read_dataset(dir.path()).unwrap_err()), 11);
}
