use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use norppa_core::encoder::FvState;
use norppa_core::features::save_descriptors;
use norppa_core::harness::{
    build_index, check_config_hash, confirm_match, embedding_to_f64, prepare_descriptors, query_and_verify, run_eval,
    train_vocabulary, ConfirmRequest, HarnessError, IndexItem, Journal, Manifest, ManifestEntry, MatchStatus, Pipeline,
    PipelineConfig, PipelineInput, Split, Stage,
};
use norppa_core::index::{load_index, save_index, IdentityIndex, Provenance};
use norppa_core::raster::PatternImage;
use norppa_core::synthetic::{synthetic_dataset, DatasetSpec, SyntheticImage};

fn config() -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.vocab.components = 8;
    c.vocab.pca_dim = 16;
    c.preprocess.target_stroke = 4.0;
    c.descriptor.magnification = 12.0;
    c
}

struct Fixture {
    dir: tempfile::TempDir,
    images: Vec<SyntheticImage>,
    index: IdentityIndex<f64>,
}

impl Fixture {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let spec =
            DatasetSpec { individuals: 6, queries_per_individual: 1, noise: 0.02, seed: 5, ..Default::default() };
        let images = synthetic_dataset(&spec);
        let cfg = config();
        let mut items = Vec::new();
        for im in &images {
            im.image.save_pgm(dir.path().join(format!("{}.pgm", im.image_id))).unwrap();
            if im.is_query {
                continue;
            }
            let (set, _) = prepare_descriptors(&cfg, &PipelineInput::Pattern(im.image.clone())).unwrap();
            // Every other entry gets stored descriptors.
            let descriptor_ref = if items.len() % 2 == 0 {
                let name = format!("{}.nrpd", im.image_id);
                save_descriptors(&set, dir.path().join(&name)).unwrap();
                Some(name)
            } else {
                None
            };
            items.push(IndexItem {
                individual_id: im.individual_id.clone(),
                image_id: im.image_id.clone(),
                descriptors: set,
                descriptor_ref,
            });
        }
        let sets: Vec<_> = items.iter().map(|i| i.descriptors.clone()).collect();
        let vocab = train_vocabulary::<f64>(&cfg, &sets).unwrap();
        let index = build_index(&cfg, vocab, &items).unwrap();
        Fixture { dir, images, index }
    })
}

fn db_image(f: &Fixture, i: usize) -> &SyntheticImage {
    f.images.iter().filter(|im| !im.is_query).nth(i).unwrap()
}

#[test]
fn pipeline_is_deterministic() {
    let f = fixture();
    let p = Pipeline::from_index(&f.index, &config()).unwrap();
    let input = PipelineInput::from_path(f.path("ind-03-q0.pgm")).unwrap();
    assert!(matches!(input, PipelineInput::Pattern(_)));
    let a = p.run(&input).unwrap();
    let b = p.run(&input).unwrap();
    assert_eq!(a.embedding.values(), b.embedding.values());
    assert_eq!(a.embedding.state(), FvState::Final);
    assert_eq!(a.embedding.len(), 2 * 16 * 8);
}

#[test]
fn descriptor_input_matches_pattern_input() {
    let f = fixture();
    let p = Pipeline::from_index(&f.index, &config()).unwrap();
    let from_pattern = p.run(&PipelineInput::from_path(f.path("ind-00-db.pgm")).unwrap()).unwrap();
    let from_file = p.run(&PipelineInput::from_path(f.path("ind-00-db.nrpd")).unwrap()).unwrap();
    assert!(from_file.pattern.is_none());
    assert_eq!(from_file.embedding.len(), f.index.dim().unwrap());
    for (a, b) in from_pattern.embedding.values().iter().zip(from_file.embedding.values()) {
        // Loading re-normalizes the f32 descriptors, so allow rounding.
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn empty_pattern_is_stage_labeled() {
    let f = fixture();
    let p = Pipeline::from_index(&f.index, &config()).unwrap();
    let blank = PatternImage::from_fn(64, 64, |x, y| x == 10 && y == 10).with_source_id("blank");
    let err = p.run(&PipelineInput::Pattern(blank)).unwrap_err();
    assert_eq!(err.stage(), Some(Stage::Preprocess));
    assert_eq!(err.to_string(), "preprocess: empty pattern");
}

#[test]
fn self_query_verifies_with_identity() {
    let f = fixture();
    let input = PipelineInput::Pattern(db_image(f, 0).image.clone());
    let r = query_and_verify(&f.index, &config(), &input, Some(f.dir.path())).unwrap();
    let top = &r.matches[0];
    assert_eq!(top.image_id, "ind-00-db");
    assert!(top.distance <= 1e-9, "distance {}", top.distance);
    assert_eq!(top.status, MatchStatus::Verified);
    let h = top.homography.unwrap();
    let id = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    for (a, b) in h.iter().zip(id) {
        assert!((a - b).abs() < 1e-6, "{h:?}");
    }
    let overlay = top.overlay.as_ref().unwrap();
    assert_eq!(overlay.pairs.len(), top.inlier_count);
    assert_eq!(r.config_hash, config().hash());
}

#[test]
fn query_returns_k_distinct_individuals_and_statuses() {
    let f = fixture();
    let input = PipelineInput::from_path(f.path("ind-02-q0.pgm")).unwrap();
    let r = query_and_verify(&f.index, &config(), &input, Some(f.dir.path())).unwrap();
    assert_eq!(r.k, 5);
    assert!(r.matches.len() <= 5);
    let mut ids: Vec<_> = r.matches.iter().map(|m| m.individual_id.clone()).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), r.matches.len());
    for w in r.matches.windows(2) {
        assert!(w[0].distance <= w[1].distance);
    }
    for m in &r.matches {
        let has_ref = f.index.entries().iter().any(|e| e.image_id == m.image_id && e.descriptor_ref.is_some());
        if !has_ref {
            assert_eq!(m.status, MatchStatus::Unverified);
            assert!(m.overlay.is_none());
        } else {
            assert_ne!(m.status, MatchStatus::Unverified);
            assert_eq!(m.overlay.is_some(), m.status == MatchStatus::Verified);
        }
    }
    let json = serde_json::to_value(&r).unwrap();
    assert!(json.get("query-image-id").is_some());
    assert!(json["matches"][0].get("status").is_some());
}

#[test]
fn config_mismatch_rejected() {
    let f = fixture();
    let mut other = config();
    other.verify.percentile = 25.0;
    assert!(matches!(Pipeline::from_index(&f.index, &other), Err(HarnessError::ConfigMismatch { .. })));
    assert!(check_config_hash(&f.index.config, &config()).is_ok());
    let input = PipelineInput::Pattern(db_image(f, 0).image.clone());
    assert!(query_and_verify(&f.index, &other, &input, None).is_err());
}

fn query_embedding(f: &Fixture, name: &str) -> Vec<f64> {
    let p = Pipeline::from_index(&f.index, &config()).unwrap();
    p.run(&PipelineInput::from_path(f.path(name)).unwrap()).unwrap().embedding.into_values()
}

#[test]
fn confirm_loop() {
    let f = fixture();
    let mut index = f.index.clone();
    let emb = query_embedding(f, "ind-04-q0.pgm");
    let req = ConfirmRequest {
        query_image_id: "ind-04-q0".into(),
        individual_id: "ind-04".into(),
        new_individual: false,
        embedding: embedding_to_f64(&emb),
        descriptor_ref: None,
    };
    let entry = confirm_match(&mut index, None, &req).unwrap();
    assert_eq!(entry.provenance, Provenance::ExpertConfirmed);
    let top = index.query_topk(&emb, 1).unwrap();
    assert_eq!(top[0].entry.image_id, "ind-04-q0");
    assert!(top[0].distance <= 1e-12);

    let before = index.clone();
    let err = confirm_match(&mut index, None, &req).unwrap_err();
    assert!(err.to_string().contains("duplicate image-id"));
    assert_eq!(index, before);

    let n = index.individuals().len();
    let emb5 = query_embedding(f, "ind-05-q0.pgm");
    let new = ConfirmRequest {
        query_image_id: "ind-05-q0".into(),
        individual_id: "seal-new".into(),
        new_individual: true,
        embedding: emb5.clone(),
        descriptor_ref: None,
    };
    confirm_match(&mut index, None, &new).unwrap();
    assert_eq!(index.individuals().len(), n + 1);

    let unknown = ConfirmRequest { query_image_id: "x".into(), individual_id: "nobody".into(), ..new.clone() };
    let unknown = ConfirmRequest { new_individual: false, ..unknown };
    assert!(confirm_match(&mut index, None, &unknown).is_err());
    let bad_norm = ConfirmRequest {
        query_image_id: "y".into(),
        individual_id: "ind-00".into(),
        new_individual: false,
        embedding: vec![0.5; emb5.len()],
        descriptor_ref: None,
    };
    assert!(confirm_match(&mut index, None, &bad_norm).is_err());
}

#[test]
fn journal_survives_crash_before_save() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let idx_path = dir.path().join("db.nrpi");
    let journal_path = dir.path().join("db.journal");
    save_index(&f.index, &idx_path).unwrap();

    let mut index: IdentityIndex<f64> = load_index(&idx_path).unwrap();
    let mut journal = Journal::open(&journal_path).unwrap();
    let emb = query_embedding(f, "ind-01-q0.pgm");
    let req = ConfirmRequest {
        query_image_id: "ind-01-q0".into(),
        individual_id: "ind-01".into(),
        new_individual: false,
        embedding: emb,
        descriptor_ref: Some("ind-01-q0.nrpd".into()),
    };
    confirm_match(&mut index, Some(&mut journal), &req).unwrap();
    // Rejected confirms are not journaled.
    assert!(confirm_match(&mut index, Some(&mut journal), &req).is_err());
    drop(journal);
    // Simulated crash: the index on disk was never re-saved.
    let mut reloaded: IdentityIndex<f64> = load_index(&idx_path).unwrap();
    assert_eq!(reloaded.len(), f.index.len());
    let journal = Journal::open(&journal_path).unwrap();
    assert_eq!(journal.replay(&mut reloaded).unwrap(), 1);
    assert_eq!(journal.replay(&mut reloaded).unwrap(), 0);
    assert_eq!(reloaded.len(), f.index.len() + 1);
    let e = reloaded.entries().last().unwrap();
    assert_eq!(e.provenance, Provenance::ExpertConfirmed);
    assert_eq!(e.descriptor_ref.as_deref(), Some("ind-01-q0.nrpd"));
    assert_eq!(Journal::read(&journal_path).unwrap().len(), 1);
}

#[test]
fn torn_journal_tail_ignored() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("j");
    std::fs::write(
        &p,
        "{\"seq\":0,\"added-at\":1,\"query-image-id\":\"a\",\"individual-id\":\"b\",\"embedding\":[1.0]}\n{\"seq\":1,\"add",
    )
    .unwrap();
    let recs = Journal::read(&p).unwrap();
    assert_eq!(recs.len(), 1);
    std::fs::write(&p, "garbage\n{\"seq\":0}\n").unwrap();
    assert!(Journal::read(&p).is_err());
}

fn manifest(f: &Fixture, copy_db_as_queries: bool) -> Manifest {
    let mut entries = Vec::new();
    for im in &f.images {
        let e = ManifestEntry {
            image_id: im.image_id.clone(),
            individual_id: im.individual_id.clone(),
            split: if im.is_query { Split::Query } else { Split::Database },
            pattern_path: Some(format!("{}.pgm", im.image_id)),
            descriptor_path: None,
        };
        if copy_db_as_queries {
            if im.is_query {
                continue;
            }
            entries.push(ManifestEntry { image_id: format!("{}-copy", im.image_id), split: Split::Query, ..e.clone() });
        }
        entries.push(e);
    }
    Manifest::new(entries, f.dir.path())
}

#[test]
fn eval_on_database_copy_is_perfect() {
    let f = fixture();
    let out = run_eval::<f64>(&config(), &manifest(f, true)).unwrap();
    assert_eq!(out.report.top(1), 1.0);
    assert_eq!(out.report.accuracy.len(), config().query.k_max);
    assert_eq!(out.config_hash, config().hash());
    assert_eq!(out.database_individuals, 6);
    assert!(out.per_individual.values().all(|s| s.queries == 1 && s.hits[0] == 1));
}

#[test]
fn eval_reports_are_deterministic_and_monotone() {
    let f = fixture();
    let a = run_eval::<f64>(&config(), &manifest(f, false)).unwrap();
    let b = run_eval::<f64>(&config(), &manifest(f, false)).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(a.queries_csv(), b.queries_csv());
    for w in a.report.accuracy.windows(2) {
        assert!(w[0] <= w[1]);
    }
    let curve = a.curve_csv();
    assert!(curve.starts_with("k,accuracy\n1,"));
    assert_eq!(curve.lines().count(), 1 + a.report.k_max);
    let q = a.queries_csv();
    assert_eq!(q.lines().count(), 1 + 6);

    let dir = tempfile::tempdir().unwrap();
    a.write(dir.path()).unwrap();
    for name in ["report.json", "queries.csv", "curve.csv"] {
        assert!(dir.path().join(name).exists());
    }
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["config-hash"], config().hash());
}

#[test]
fn eval_rejects_bad_manifests() {
    let f = fixture();
    let mut m = manifest(f, false);
    m.entries[1].image_id = m.entries[0].image_id.clone();
    let err = run_eval::<f64>(&config(), &m).unwrap_err();
    assert!(err.to_string().contains("both splits"), "{err}");

    let mut m = manifest(f, false);
    m.entries.retain(|e| e.split == Split::Database);
    assert!(run_eval::<f64>(&config(), &m).unwrap_err().to_string().contains("empty query split"));
}

#[test]
fn eval_skips_empty_patterns() {
    let f = fixture();
    let mut m = manifest(f, false);
    let blank = PatternImage::from_fn(64, 64, |_, _| false);
    blank.save_pgm(f.path("blank.pgm")).unwrap();
    m.entries.push(ManifestEntry {
        image_id: "blank".into(),
        individual_id: "ind-00".into(),
        split: Split::Query,
        pattern_path: Some("blank.pgm".into()),
        descriptor_path: None,
    });
    let out = run_eval::<f64>(&config(), &m).unwrap();
    assert_eq!(out.skipped.len(), 1);
    assert_eq!(out.skipped[0].reason, "preprocess: empty pattern");
    assert_eq!(out.report.query_count, 6);
}

#[test]
fn manifest_file_forms() {
    let dir = tempfile::tempdir().unwrap();
    let bare = dir.path().join("bare.json");
    std::fs::write(
        &bare,
        r#"[{"image-id":"a","individual-id":"x","split":"database","pattern-path":"a.pgm"},
            {"image-id":"b","individual-id":"x","split":"query","descriptor-path":"/abs/b.nrpd"}]"#,
    )
    .unwrap();
    let m = Manifest::load(&bare).unwrap();
    assert_eq!(m.entries.len(), 2);
    assert_eq!(m.base_dir, dir.path());
    assert_eq!(m.resolve("a.pgm"), dir.path().join("a.pgm"));
    assert_eq!(m.resolve("/abs/b.nrpd"), Path::new("/abs/b.nrpd"));
    m.validate().unwrap();
    let full = dir.path().join("full.json");
    std::fs::write(
        &full,
        format!(r#"{{"entries": {}, "vocabulary": "v.nrpv"}}"#, std::fs::read_to_string(&bare).unwrap()),
    )
    .unwrap();
    assert_eq!(Manifest::load(&full).unwrap().vocabulary.as_deref(), Some("v.nrpv"));
}

#[test]
fn kpca_index_round_trip() {
    let f = fixture();
    let mut cfg = config();
    cfg.encoder.kpca.enabled = true;
    let items: Vec<IndexItem> = f
        .images
        .iter()
        .filter(|im| !im.is_query)
        .map(|im| IndexItem {
            individual_id: im.individual_id.clone(),
            image_id: im.image_id.clone(),
            descriptors: prepare_descriptors(&cfg, &PipelineInput::Pattern(im.image.clone())).unwrap().0,
            descriptor_ref: None,
        })
        .collect();
    let vocab = f.index.vocabulary.clone().unwrap();
    let index = build_index(&cfg, vocab, &items).unwrap();
    assert_eq!(index.state(), FvState::Compressed);
    assert_eq!(index.dim(), Some(5));
    let dir = tempfile::tempdir().unwrap();
    save_index(&index, dir.path().join("k.nrpi")).unwrap();
    let back: IdentityIndex<f64> = load_index(dir.path().join("k.nrpi")).unwrap();
    let r = query_and_verify(&back, &cfg, &PipelineInput::Pattern(db_image(f, 2).image.clone()), None).unwrap();
    assert_eq!(r.matches[0].image_id, "ind-02-db");
    assert!(r.matches[0].distance < 1e-9);
}
