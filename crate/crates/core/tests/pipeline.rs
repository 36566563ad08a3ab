use std::fs;
use std::path::Path;

use emovec_core::param_store;
use emovec_core::{Case, Emotion, ExperimentConfig, Pipeline, ScenarioReport};

const TINY: &str = r#"
[corpus]
seed = 3
neutral_only_speakers = 2
emotional_speakers = 2
unseen_speakers = 1
utterances_per_speaker = 50
utterances_per_emotion = 30
emotions = ["angry", "sad"]

[model]
init_seed = 1

[embedder]
seed = 2
steps = 100

[train.pretrain]
seed = 4
steps = 60

[train.finetune]
seed = 5
steps = 30

[[scenario]]
name = "zero"
case = "same_spk"
alphas = [0.0]
test_sentences = 3

[[scenario]]
name = "unseen"
case = "cross_unseen"
emotions = ["sad"]
test_sentences = 3

[[scenario]]
name = "baseline"
case = "cross_seen"
vector = { single_speaker = "e01" }
alphas = [0.5, 1.0]
test_sentences = 2
"#;

fn run(dir: &Path) -> Vec<ScenarioReport> {
    let cfg = ExperimentConfig::from_toml_str(TINY).unwrap();
    Pipeline::new(cfg, Some(dir.to_path_buf())).unwrap().run_all().unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn tiny_pipeline_end_to_end() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let reports = run(a.path());
    assert_eq!(reports.len(), 3);

    // α = 0 leaves the pretrained model untouched, so every synthesis equals
    // its neutral reference.
    let zero = &reports[0];
    assert_eq!(zero.secs.len(), 2);
    for row in &zero.secs {
        assert_eq!(row.mean, 1.0);
        assert_eq!(row.half_width, 0.0);
    }
    assert!(zero.intensity.is_empty());

    let unseen = &reports[1];
    assert_eq!(unseen.case, Case::CrossUnseen);
    assert_eq!(unseen.targets, vec!["u00".to_string()]);
    assert_eq!(unseen.emotions, vec![Emotion::Sad]);
    assert_eq!(unseen.intensity.len(), 1);
    assert_eq!(unseen.margins.len(), 1);

    let baseline = &reports[2];
    assert!(baseline.margins.iter().all(|m| m.alpha == 1.0));
    assert!(baseline.targets.iter().all(|t| t != "e01"));

    let layout = emovec_core::Layout::new(a.path());
    let tau = param_store::load(layout.vector(Emotion::Angry, Some("e01"))).unwrap();
    assert_eq!(tau.meta_value("scope"), Some("single-speaker"));
    let tau = param_store::load(layout.vector(Emotion::Angry, None)).unwrap();
    assert_eq!(tau.meta_value("scope"), Some("speaker-agnostic"));
    for name in ["zero", "unseen", "baseline"] {
        let json = fs::read(layout.report_dir(name).join("report.json")).unwrap();
        let parsed = ScenarioReport::from_json(&json).unwrap();
        assert_eq!(&parsed, reports.iter().find(|r| r.name == name).unwrap());
    }

    run(b.path());
    assert_eq!(tree(a.path()), tree(b.path()));
}

#[test]
fn stages_refuse_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_toml_str(TINY).unwrap();
    let p = Pipeline::new(cfg, Some(dir.path().to_path_buf())).unwrap();
    assert!(p.pretrain(None).is_err());
    assert!(p.run_scenarios(Some(Case::SameSpk)).is_err());
    p.dataset_gen().unwrap();
    assert!(p.finetune(Emotion::Angry, None).is_err());
}
