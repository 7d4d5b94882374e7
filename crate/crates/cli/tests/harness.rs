mod common;

use langadapt::ablation::{run_ablation, AblationGrid};
use langadapt::compare::compare_llms;
use langadapt::pipeline::RunLock;
use langadapt_core::corpus::{save_corpus, ClassCatalog, DescriptionCorpus};
use langadapt_core::synth::SynthConfig;
use langadapt_core::Error;

use common::{quick, synthetic};

#[test]
fn ablation_shares_stage1_and_entropy_changes_the_trace() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cfg) = synthetic(dir.path(), 20);
    let cfg = quick(cfg);
    let table = run_ablation(&cfg, &AblationGrid::default()).unwrap();
    assert_eq!(table.rows.len(), 6);
    for r in &table.rows {
        assert!(r.error.is_none(), "{:?}", r.error);
        let acc = r.accuracy.unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert_eq!(r.strong_loss_trace.len(), cfg.stage2.epochs);
    }
    assert_eq!(table.rows.iter().filter(|r| r.default).count(), 1);
    for pair in table.rows[..3].iter().zip(&table.rows[3..]) {
        assert_eq!(pair.0.cell.loss, pair.1.cell.loss);
        assert_ne!(pair.0.strong_loss_trace, pair.1.strong_loss_trace);
    }
    let cells = std::fs::read_dir(cfg.output_dir.join("ablation"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().is_dir())
        .count();
    assert_eq!(cells, 6);
    assert!(!cfg.output_dir.join("stage2").exists());
    let text = std::fs::read_to_string(cfg.output_dir.join("ablation/table.txt")).unwrap();
    assert!(
        text.lines()
            .any(|l| l.starts_with("CE + entropy") && l.ends_with("(default)")),
        "{text}"
    );
}

#[test]
fn a_failing_ablation_cell_does_not_stop_the_others() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cfg) = synthetic(dir.path(), 20);
    let cfg = quick(cfg);
    let _held = RunLock::acquire(&cfg.output_dir.join("ablation/ncs")).unwrap();
    let table = run_ablation(&cfg, &AblationGrid::default()).unwrap();
    let failed: Vec<&str> = table
        .rows
        .iter()
        .filter(|r| r.error.is_some())
        .map(|r| r.label.as_str())
        .collect();
    assert_eq!(failed, ["NCS"]);
    assert_eq!(
        table.rows.iter().filter(|r| r.accuracy.is_some()).count(),
        5
    );
    let csv = std::fs::read_to_string(cfg.output_dir.join("ablation/table.csv")).unwrap();
    assert!(
        csv.lines()
            .any(|l| l.starts_with("NCS,false") && l.contains("locked")),
        "{csv}"
    );
}

#[test]
fn informative_descriptions_beat_shuffled_ones() {
    let dir = tempfile::tempdir().unwrap();
    let (paths, cfg) = synthetic(dir.path(), 20);
    let cfg = quick(cfg);
    let synth = SynthConfig::default();
    let shuffled = synth
        .corpus_with(&synth.describer().uninformative())
        .unwrap();
    let shuffled_path = dir.path().join("shuffled.json");
    save_corpus(&shuffled, &shuffled_path).unwrap();

    let table = compare_llms(&cfg, &[paths.corpus.clone(), shuffled_path]).unwrap();
    assert_eq!(table.rows.len(), 2);
    assert_eq!(table.rows[1].llm, "synthetic-shuffled");
    let good = table.rows[0].text_accuracy.unwrap();
    let bad = table.rows[1].text_accuracy.unwrap();
    assert!(good > bad, "informative {good} vs shuffled {bad}");
    assert!(cfg.output_dir.join("compare/table.json").exists());
    assert!(cfg
        .output_dir
        .join("compare/text_accuracy_radar.csv")
        .exists());

    let single = compare_llms(&cfg, &[paths.corpus.clone()]).unwrap();
    assert_eq!(single.rows.len(), 1);
}

#[test]
fn corpora_with_different_catalogs_are_rejected_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let (paths, cfg) = synthetic(dir.path(), 5);
    let other = DescriptionCorpus::from_json_str(
        &std::fs::read_to_string(&paths.corpus)
            .unwrap()
            .replace("synthetic-cxr", "other-set"),
        &paths.corpus,
    )
    .unwrap();
    assert_ne!(
        other.catalog(),
        &ClassCatalog::from_json_file(&paths.catalog).unwrap()
    );
    let other_path = dir.path().join("other.json");
    save_corpus(&other, &other_path).unwrap();
    let err = compare_llms(&cfg, &[paths.corpus.clone(), other_path]).unwrap_err();
    assert!(matches!(err, Error::Validation(_)), "{err}");
    assert!(!cfg.output_dir.exists());
}
