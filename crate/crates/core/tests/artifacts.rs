use std::time::Duration;

use langadapt_core::adapter::Adapter;
use langadapt_core::corpus::llm::FixtureClient;
use langadapt_core::corpus::{
    build_prompts, generate_descriptions, load_corpus, GenerationOptions,
};
use langadapt_core::dataset::{Manifest, Split};
use langadapt_core::encoders::cache::cache_image_embeddings;
use langadapt_core::encoders::{toy_vlm, Modality, VisualEncoder};
use langadapt_core::synth::{write_synthetic, SynthConfig};
use langadapt_core::unsup::PromptVector;
use langadapt_core::Error;

fn small() -> SynthConfig {
    SynthConfig {
        images_per_class: 5,
        ..SynthConfig::default()
    }
}

#[test]
fn synthetic_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let paths = write_synthetic(&cfg, dir.path()).unwrap();

    let corpus = load_corpus(&paths.corpus).unwrap();
    assert_eq!(corpus, cfg.corpus().unwrap());

    // Replaying the recorded fixture regenerates the same corpus.
    let fixture = FixtureClient::from_json_file(&paths.llm_fixture).unwrap();
    assert_eq!(cfg.corpus_with(&fixture).unwrap(), corpus);

    let mut manifest = Manifest::load(&paths.manifest).unwrap();
    assert_eq!(manifest.len(), 10);
    let entries = manifest
        .entries()
        .iter()
        .cloned()
        .map(|mut e| {
            e.split = Some(Split::Test);
            e
        })
        .collect();
    manifest = manifest.with_entries(entries).unwrap();
    let loaded = manifest.labeled(Split::Test, corpus.catalog(), 1).unwrap();
    let memory = cfg.images().unwrap();
    for (a, b) in loaded.iter().zip(&memory) {
        assert_eq!(a.item_id, b.item_id);
        assert_eq!(a.label, b.label);
        let worst = a
            .image
            .data()
            .iter()
            .zip(b.image.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(worst <= 0.5 / 255.0 + 1e-6, "quantization error {worst}");
    }
}

#[test]
fn empty_completions_are_skipped_and_transport_failures_abort() {
    let cfg = small();
    let catalog = cfg.catalog().unwrap();
    let queries = build_prompts(&catalog, &cfg.templates()).unwrap();
    let opts = GenerationOptions {
        backoff: Duration::ZERO,
        ..GenerationOptions::default()
    };

    let mut fixture = FixtureClient::echo("fixture");
    fixture = fixture.with_response(queries[0].text.clone(), "   ");
    let out = generate_descriptions(&catalog, &queries, &fixture, &opts).unwrap();
    assert_eq!(out.skipped.len(), 1);
    assert_eq!(out.corpus.total(), queries.len() - 1);

    let strict = FixtureClient::new("fixture").with_response(queries[0].text.clone(), "ok");
    assert!(matches!(
        generate_descriptions(&catalog, &queries, &strict, &opts),
        Err(Error::Transport(_))
    ));
}

#[test]
fn image_cache_is_reused_and_goes_stale_with_the_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("visual.cache");
    let cfg = small();
    let items: Vec<_> = cfg
        .images()
        .unwrap()
        .into_iter()
        .map(|s| (s.item_id, s.image))
        .collect();
    let (_, visual) = toy_vlm::<f32>(&cfg.toy).unwrap();
    let cold = cache_image_embeddings(&visual, &items, &path).unwrap();
    let warm = cache_image_embeddings(&visual, &items, &path).unwrap();
    assert_eq!(cold.len(), items.len());
    for (id, image) in &items {
        let direct = visual.encode_image(image, None).unwrap();
        assert_eq!(warm.lookup::<f32>(id, Modality::Visual).unwrap(), direct);
    }

    let (_, other) = toy_vlm::<f32>(&langadapt_core::encoders::ToyVlmConfig::with_seed(
        cfg.toy.visual.seed + 1,
    ))
    .unwrap();
    assert!(matches!(
        cache_image_embeddings(&other, &items, &path),
        Err(Error::StaleCache { .. })
    ));
}

#[test]
fn checkpoints_round_trip_with_their_stamp() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let (_, visual) = toy_vlm::<f32>(&cfg.toy).unwrap();
    let mut g = Adapter::<f32>::zeros(2, 512, true, "synthetic-cxr");
    g.params_mut()
        .iter_mut()
        .enumerate()
        .for_each(|(i, p)| *p = (i as f32).sin());
    g.save(&dir.path().join("g.bin"), "stamp-1").unwrap();
    let (back, stamp) = Adapter::<f32>::load(&dir.path().join("g.bin")).unwrap();
    assert_eq!((back, stamp.as_str()), (g, "stamp-1"));

    let mut p = PromptVector::<f32>::zeros(visual.spec());
    p.values_mut()[3] = 0.25;
    p.save(&dir.path().join("p.bin"), "stamp-2").unwrap();
    let (back, stamp) = PromptVector::<f32>::load(&dir.path().join("p.bin")).unwrap();
    assert_eq!((back, stamp.as_str()), (p, "stamp-2"));

    std::fs::write(dir.path().join("bad.bin"), b"LAAD\x01").unwrap();
    assert!(Adapter::<f32>::load(&dir.path().join("bad.bin")).is_err());
}
