use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use plotbench::codeblock::SignatureTable;
use plotbench::forge::{
    balance_corpus, filter_by_library, filter_dialogues, instructions_all, read_jsonl, reconstruct_all, validate_all,
    write_jsonl, CorpusItem, DataMode, DatasetSample, DialogueItem, DialogueLimits, Provenance, PREVIEW_CONNECTIVE,
};
use plotbench::gateway::{Gateway, ScriptEntry, ScriptTable};
use plotbench::library::PlotLibrary;
use plotbench::prompts::PromptSet;
use plotbench::sandbox::{ExecLimits, FakeExecutor, FakeOutcome, FakeRule, FakeScript};
use regex::Regex;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn wanted() -> BTreeSet<PlotLibrary> {
    [PlotLibrary::Seaborn, PlotLibrary::Plotly, PlotLibrary::Altair].into_iter().collect()
}

/// Line-level oracle: an unindented import naming a wanted root module.
fn grep_oracle(source: &str) -> bool {
    let import = Regex::new(r"^(import|from)\s.*\b(seaborn|plotly|altair)(\.|\s|,|$)").unwrap();
    let lookalike = Regex::new(r"\b(seaborn|plotly|altair)_").unwrap();
    source.lines().any(|l| import.is_match(l) && !lookalike.is_match(l))
}

#[test]
fn library_filter_keeps_exactly_the_importing_items() {
    let items: Vec<CorpusItem> = read_jsonl(&fixture("corpus_1000.jsonl")).unwrap();
    assert_eq!(items.len(), 1000);
    let expected: BTreeSet<String> = items.iter().filter(|i| grep_oracle(&i.source)).map(|i| i.id.clone()).collect();
    assert_eq!(expected.len(), 312);
    let (kept, report) = filter_by_library(items, &wanted(), &SignatureTable::default());
    let got: BTreeSet<String> = kept.iter().map(|i| i.id.clone()).collect();
    assert_eq!(got, expected);
    assert_eq!(report.kept, 312);
    assert_eq!(report.dropped["no_wanted_library"], 688);
    assert!(kept.iter().all(|i| !i.detected_libraries.is_empty() && i.detected_libraries.is_subset(&wanted())));
}

#[test]
fn dialogue_filter_matches_independent_count() {
    let raw = std::fs::read_to_string(fixture("dialogues.jsonl")).unwrap();
    let oracle: BTreeSet<String> = raw
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| {
            let turns = v["turns"].as_array().unwrap();
            let chars: usize = turns.iter().map(|t| t["content"].as_str().unwrap().chars().count()).sum();
            turns.len() <= 10 && chars <= 16_000
        })
        .map(|v| v["id"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(oracle.len(), 73);
    let items: Vec<DialogueItem> = read_jsonl(&fixture("dialogues.jsonl")).unwrap();
    let (kept, report) = filter_dialogues(items, DialogueLimits::default());
    let got: BTreeSet<String> = kept.iter().map(|d| d.id.clone()).collect();
    assert_eq!(got, oracle);
    assert_eq!(report.input, 100);
    assert_eq!(report.dropped.values().sum::<usize>(), 27);
}

fn sample(id: &str, library: PlotLibrary) -> DatasetSample {
    DatasetSample {
        id: id.into(),
        library,
        provenance: Provenance::SyntheticCorpus,
        data_mode: DataMode::PreviewTwoRows,
        code_block: String::new(),
        data_table: None,
        verdict: None,
        image_path: None,
        instruction_parts: None,
    }
}

fn mixed_corpus() -> Vec<DatasetSample> {
    let mut out = Vec::new();
    for i in 0..200 {
        out.push(sample(&format!("m{i:03}"), PlotLibrary::Matplotlib));
        if i < 40 {
            out.push(sample(&format!("s{i:03}"), PlotLibrary::Seaborn));
        }
        if i < 25 {
            out.push(sample(&format!("p{i:03}"), PlotLibrary::Plotly));
        }
    }
    out
}

fn counts(samples: &[DatasetSample]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for s in samples {
        *m.entry(s.library.tag().to_string()).or_default() += 1;
    }
    m
}

#[test]
fn balancing_caps_matplotlib_at_the_largest_other_library() {
    let before = mixed_corpus();
    let after = balance_corpus(before.clone(), 7);
    let c = counts(&after);
    assert_eq!(c["matplotlib"], 40);
    assert_eq!(c["seaborn"], 40);
    assert_eq!(c["plotly"], 25);
    // Order preserved: `after` is a subsequence of `before`.
    let mut it = before.iter();
    assert!(after.iter().all(|a| it.any(|b| b.id == a.id)));
    // Same seed, same draw; another seed, another draw.
    assert_eq!(balance_corpus(before.clone(), 7), after);
    assert_ne!(balance_corpus(before, 8), after);
}

#[test]
fn synthetic_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let items: Vec<CorpusItem> = read_jsonl(&fixture("corpus_1000.jsonl")).unwrap();
    let (filtered, _) = filter_by_library(items, &wanted(), &SignatureTable::default());
    let (samples, report) = reconstruct_all(&filtered).unwrap();
    assert_eq!(report.kept, 312);
    assert!(samples.iter().all(|s| s.code_block.starts_with("# Data columns: x,y\n# First data row: 1,2\n")));

    // The look-alike theme module does not exist in the sandbox.
    let executor = FakeExecutor::new(FakeScript {
        rules: vec![FakeRule::contains(
            "import plotly_theme",
            FakeOutcome::error("ModuleNotFoundError", "No module named 'plotly_theme'"),
        )],
        default: Some(FakeOutcome::ok_with_image()),
    });
    let broken = samples.iter().filter(|s| s.code_block.contains("import plotly_theme")).count();
    let (accepted, report) = validate_all(&samples, &executor, dir.path(), ExecLimits::default(), 4).unwrap();
    assert_eq!(accepted.len(), 312 - broken);
    assert_eq!(report.dropped.get("rejected_error:ModuleNotFoundError").copied().unwrap_or(0), broken);
    for s in &accepted {
        let image = s.image_path.as_deref().unwrap();
        assert!(dir.path().join(image).is_file(), "{image}");
    }

    let gateway = Gateway::scripted(
        ScriptTable::new(vec![ScriptEntry {
            attempt: Some(0),
            response: "1. Setup: Python with pandas.\n2. Data Description: Two numeric columns.\n3. Plot Description: A scatter of y over x.\n4. Plot Style Description: Default theme.".into(),
            ..Default::default()
        }]),
        None,
    );
    let (records, report) = instructions_all(&accepted, &gateway, &PromptSet::default(), None, 4).unwrap();
    assert_eq!(report.kept, accepted.len());
    for r in &records {
        assert!(r.instruction.contains(&format!("{PREVIEW_CONNECTIVE}\n\nx,y\n1,2\n3,4\n\nDefault theme.")));
        assert!(r.instruction.starts_with("A scatter of y over x.\n\nPython with pandas."));
    }
    let out = dir.path().join("dataset.jsonl");
    write_jsonl(&out, &records).unwrap();
    let back: Vec<plotbench::forge::DatasetRecord> = read_jsonl(&out).unwrap();
    assert_eq!(back, records);
}

#[test]
fn infrastructure_failures_are_requeued_once() {
    let dir = tempfile::tempdir().unwrap();
    let mut flaky = FakeRule::contains("flaky", FakeOutcome::ok_with_image());
    flaky.infra_failures = 1;
    let mut dead = FakeRule::contains("dead", FakeOutcome::ok_with_image());
    dead.infra_failures = 2;
    let executor = FakeExecutor::new(FakeScript {
        rules: vec![flaky, dead],
        default: None,
    });
    let mut a = sample("a", PlotLibrary::Seaborn);
    a.code_block = "flaky()".into();
    let mut b = sample("b", PlotLibrary::Seaborn);
    b.code_block = "dead()".into();
    let (kept, report) = validate_all(&[a, b], &executor, dir.path(), ExecLimits::default(), 1).unwrap();
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].id, "a");
    assert_eq!(report.dropped["infrastructure"], 1);
}
