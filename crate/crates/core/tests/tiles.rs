use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use edgefire::tiles::synth::{write_corpus, SynthConfig};
use edgefire::tiles::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_synth() -> SynthConfig {
    SynthConfig {
        width: 200,
        height: 200,
        defects: (4, 8),
        box_side: (6, 16),
        ..SynthConfig::default()
    }
}

fn small_config(target: usize, seed: u64) -> DatasetConfig {
    DatasetConfig {
        target_count: target,
        seed,
        tile_size: 32,
        ..DatasetConfig::default()
    }
}

fn voc(img: &AnnotatedImage) -> String {
    let mut s = format!(
        "<annotation><filename>{}</filename><size><width>{}</width><height>{}</height><depth>3</depth></size>",
        img.image.file_name().unwrap().to_string_lossy(),
        img.width,
        img.height
    );
    for b in &img.boxes {
        s += &format!(
            "<object><name>{}</name><bndbox><xmin>{}</xmin><ymin>{}</ymin><xmax>{}</xmax><ymax>{}</ymax></bndbox></object>",
            b.class, b.x0, b.y0, b.x1, b.y1
        );
    }
    s + "</annotation>"
}

#[test]
fn mixed_corpus_parses_in_filename_order() {
    let dir = tempfile::tempdir().unwrap();
    let written = write_corpus(dir.path(), 9, &small_synth(), 3).unwrap();
    // turn every third annotation into VOC XML
    for img in written.iter().step_by(3) {
        fs::remove_file(dir.path().join(format!("{}.json", img.id))).unwrap();
        fs::write(dir.path().join(format!("{}.xml", img.id)), voc(img)).unwrap();
    }
    let parsed = parse_annotations(dir.path()).unwrap();
    assert_eq!(parsed.len(), 9);
    assert_eq!(parsed, written);
}

#[test]
fn inverted_voc_box_names_the_object() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("b.xml");
    fs::write(
        &p,
        "<annotation><filename>b.jpg</filename><size><width>50</width><height>50</height></size>\
         <object><name>short</name><bndbox><xmin>1</xmin><ymin>1</ymin><xmax>4</xmax><ymax>4</ymax></bndbox></object>\
         <object><name>Mouse_bite</name><bndbox><xmin>30</xmin><ymin>1</ymin><xmax>20</xmax><ymax>4</ymax></bndbox></object>\
         </annotation>",
    )
    .unwrap();
    let msg = parse_annotations(&p).unwrap_err().to_string();
    assert!(msg.contains("object 2 (`Mouse_bite`)"), "{msg}");
    assert!(msg.contains("xmin 30 >= xmax 20"), "{msg}");
}

#[test]
fn unknown_class_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("b.json");
    fs::write(&p, r#"{"image":"b.png","width":9,"height":9,"boxes":[{"class":"crack","x0":1,"y0":1,"x1":2,"y1":2}]}"#)
        .unwrap();
    assert!(matches!(parse_annotations(&p), Err(TilesError::UnknownClass(c)) if c == "crack"));
}

/// Counts covered pixels one by one.
fn brute_labels(w: u32, h: u32, boxes: &[DefectBox], grid: Grid, threshold: f64) -> Vec<(u8, f64)> {
    let (cw, ch) = (w / grid.cols as u32, h / grid.rows as u32);
    let cell_of = |x: u32, y: u32| {
        let c = ((x / cw) as usize).min(grid.cols - 1);
        let r = ((y / ch) as usize).min(grid.rows - 1);
        r * grid.cols + c
    };
    let mut best = vec![0f64; grid.cells()];
    for b in boxes {
        let mut hits = vec![0u64; grid.cells()];
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                hits[cell_of(x, y)] += 1;
            }
        }
        let area = u64::from(b.x1 - b.x0) * u64::from(b.y1 - b.y0);
        for (k, n) in hits.into_iter().enumerate() {
            best[k] = best[k].max(n as f64 / area as f64);
        }
    }
    best.into_iter().map(|f| (u8::from(f >= threshold && f > 0.0), f)).collect()
}

#[test]
fn tiling_matches_pixel_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..300 {
        let (w, h) = (rng.gen_range(12..160), rng.gen_range(12..160));
        let grid = Grid {
            rows: rng.gen_range(1..=10.min(h as usize)),
            cols: rng.gen_range(1..=10.min(w as usize)),
        };
        let boxes: Vec<DefectBox> = (0..rng.gen_range(0..5))
            .map(|_| {
                let x0 = rng.gen_range(0..w - 1);
                let y0 = rng.gen_range(0..h - 1);
                DefectBox {
                    class: DefectClass::ALL[rng.gen_range(0..6)],
                    x0,
                    y0,
                    x1: rng.gen_range(x0 + 1..=w),
                    y1: rng.gen_range(y0 + 1..=h),
                }
            })
            .collect();
        let got = tile_image(w, h, &boxes, grid, DEFAULT_OVERLAP_THRESHOLD).unwrap();
        let want = brute_labels(w, h, &boxes, grid, DEFAULT_OVERLAP_THRESHOLD);
        for (t, (label, frac)) in got.iter().zip(&want) {
            assert_eq!(t.label, *label);
            assert!((t.overlap - frac).abs() < 1e-12);
        }
    }
}

fn audit(manifest: &DatasetManifest, corpus: &[AnnotatedImage], holdout: &[DefectClass]) {
    let by_id: BTreeMap<&str, &AnnotatedImage> = corpus.iter().map(|a| (a.id.as_str(), a)).collect();
    let mut owner: BTreeMap<&str, Split> = BTreeMap::new();
    for r in &manifest.records {
        let src = by_id[r.source.as_str()];
        assert!(src.boxes.iter().all(|b| !holdout.contains(&b.class)), "{} carries a holdout class", r.source);
        assert_eq!(*owner.entry(&r.source).or_insert(r.split), r.split, "{} spans splits", r.source);
        let cells = cell_windows(src.width, src.height, manifest.header.config.grid).unwrap();
        let cell = cells.iter().find(|c| (c.row, c.col) == (r.row, r.col)).unwrap();
        let (label, frac) = label_cell(cell, &src.boxes, manifest.header.config.overlap_threshold);
        assert_eq!((label, frac), (r.label, r.overlap));
    }
    let sizes = split_sizes(manifest.header.config.target_count, manifest.header.config.ratio);
    for (split, size) in Split::ALL.into_iter().zip(sizes) {
        let pos = manifest.split(split).filter(|r| r.label == 1).count();
        let neg = manifest.split(split).filter(|r| r.label == 0).count();
        assert_eq!(pos + neg, size, "{split}");
        assert!(pos.abs_diff(neg) <= 1, "{split}: {pos} vs {neg}");
    }
}

#[test]
fn generation_is_balanced_leak_free_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(&dir.path().join("src"), 60, &small_synth(), 11).unwrap();
    let cfg = small_config(201, 5);
    let a = generate_dataset(&dir.path().join("src"), &dir.path().join("a"), &cfg).unwrap();
    let b = generate_dataset(&dir.path().join("src"), &dir.path().join("b"), &cfg).unwrap();
    audit(&a, &corpus, &cfg.holdout);
    assert_eq!(split_sizes(201, cfg.ratio), [141, 40, 20]);
    let ma = fs::read(dir.path().join("a").join(MANIFEST_FILE)).unwrap();
    assert_eq!(ma, fs::read(dir.path().join("b").join(MANIFEST_FILE)).unwrap());
    assert_eq!(a, b);

    // the manifest on disk parses back to the returned value
    assert_eq!(read_manifest(&dir.path().join("a").join(MANIFEST_FILE)).unwrap(), a);

    // holdout index lists exactly the boards with holdout boxes
    let held = read_holdout_index(&dir.path().join("a").join(HOLDOUT_FILE)).unwrap();
    let want: BTreeSet<&str> = corpus
        .iter()
        .filter(|c| c.boxes.iter().any(|b| cfg.holdout.contains(&b.class)))
        .map(|c| c.id.as_str())
        .collect();
    assert_eq!(held.iter().map(|h| h.id.as_str()).collect::<BTreeSet<_>>(), want);
    assert_eq!(a.header.holdout_sources, want.len());

    // every record points at a materialized tile of the configured size
    for r in &a.records {
        assert_eq!(r.path, format!("dataset/{}/{}/{}_r{:02}_c{:02}.png", r.split, r.label, r.source, r.row, r.col));
        let img = image::open(dir.path().join("a").join(&r.path)).unwrap();
        assert_eq!((img.width(), img.height()), (32, 32));
    }

    let c = generate_dataset(&dir.path().join("src"), &dir.path().join("c"), &small_config(201, 6)).unwrap();
    assert_ne!(a.digest(), c.digest());
}

#[test]
fn manifest_only_generation_writes_no_tiles() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&dir.path().join("src"), 30, &small_synth(), 2).unwrap();
    let cfg = DatasetConfig {
        materialize: false,
        ..small_config(60, 1)
    };
    generate_dataset(&dir.path().join("src"), &dir.path().join("out"), &cfg).unwrap();
    assert!(dir.path().join("out").join(MANIFEST_FILE).is_file());
    assert!(!dir.path().join("out").join("dataset").exists());
}

#[test]
fn insufficient_tiles_reports_reachable_maximum() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&dir.path().join("src"), 12, &small_synth(), 4).unwrap();
    let err = generate_dataset(&dir.path().join("src"), &dir.path().join("out"), &small_config(20_000, 0)).unwrap_err();
    match err {
        TilesError::Insufficient { requested, available } => {
            assert_eq!(requested, 20_000);
            assert!(available > 0 && available < 200, "{available}");
        }
        e => panic!("{e}"),
    }
}

#[test]
fn bad_config_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&dir.path().join("src"), 2, &small_synth(), 4).unwrap();
    for cfg in [
        DatasetConfig {
            overlap_threshold: 0.0,
            ..small_config(100, 0)
        },
        small_config(5, 0),
    ] {
        let err = generate_dataset(&dir.path().join("src"), &dir.path().join("out"), &cfg).unwrap_err();
        assert!(matches!(err, TilesError::Config(_)), "{err}");
    }
}

fn small_dataset(root: &Path) -> DatasetManifest {
    write_corpus(&root.join("src"), 40, &small_synth(), 8).unwrap();
    generate_dataset(&root.join("src"), &root.join("ds"), &small_config(100, 3)).unwrap()
}

#[test]
fn loader_batches_are_seeded_scaled_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_dataset(dir.path());
    let root = dir.path().join("ds");
    let iter = load_batches(&root, &m, Split::Train, 16, 7, 0).unwrap();
    assert_eq!(iter.tiles(), 70);
    assert_eq!(iter.batches(), 5);
    let order = iter.order().to_vec();
    let batches: Vec<Batch> = iter.collect::<Result<_>>().unwrap();
    assert_eq!(batches.iter().map(|b| b.labels.len()).collect::<Vec<_>>(), [16, 16, 16, 16, 6]);
    let seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
    assert_eq!(seen, order);
    let mut sorted = seen.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..70).collect::<Vec<_>>());

    let train: Vec<&TileRecord> = m.split(Split::Train).collect();
    for b in &batches {
        assert_eq!(b.images.shape(), &[b.labels.len(), 3, 224, 224]);
        let (lo, hi) = b.images.data().iter().fold((f32::MAX, f32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        assert!(lo >= 0.0 && hi <= 1.0 && hi > lo);
        for (&i, &y) in b.indices.iter().zip(&b.labels) {
            assert_eq!(f32::from(train[i].label), y);
        }
    }

    let again = load_batches(&root, &m, Split::Train, 16, 7, 0).unwrap();
    assert_eq!(again.order(), order);
    let next_epoch = load_batches(&root, &m, Split::Train, 16, 7, 1).unwrap();
    assert_ne!(next_epoch.order(), order);

    // prefetching changes nothing about what is delivered
    let pre: Vec<Batch> = load_batches(&root, &m, Split::Train, 16, 7, 0)
        .unwrap()
        .prefetch(2)
        .collect::<Result<_>>()
        .unwrap();
    for (a, b) in pre.iter().zip(&batches) {
        assert_eq!(a.indices, b.indices);
        assert_eq!(a.images.data(), b.images.data());
    }
    // and dropping a prefetching iterator early does not hang
    let mut partial = load_batches(&root, &m, Split::Train, 4, 7, 0).unwrap().prefetch(1);
    partial.next().unwrap().unwrap();
    drop(partial);
}

#[test]
fn loader_reports_missing_tiles() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_dataset(dir.path());
    let root = dir.path().join("ds");
    let victim = m.split(Split::Val).next().unwrap();
    fs::remove_file(root.join(&victim.path)).unwrap();
    let res: Result<Vec<Batch>> = load_batches(&root, &m, Split::Val, 8, 0, 0).unwrap().in_order().collect();
    assert!(matches!(res, Err(TilesError::MissingTile(p)) if p.ends_with(&victim.path)));
}

#[test]
fn empty_split_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = small_dataset(dir.path());
    m.records.retain(|r| r.split != Split::Test);
    assert!(matches!(
        load_batches(dir.path(), &m, Split::Test, 4, 0, 0),
        Err(TilesError::EmptySplit(Split::Test))
    ));
}
