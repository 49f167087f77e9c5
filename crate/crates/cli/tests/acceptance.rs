//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! Run with `cargo test --offline -p modevote-cli --test acceptance`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use modevote_cli::{cmd_ensemble, cmd_run, EnsembleArgs, Inputs, RunArgs};
use modevote_core::ensemble::{EnsembleSpec, ModeWeight, SimilarityMatrix};
use modevote_core::evalkit::{activation_sweep, all_activations};
use modevote_core::mode::{CotField, FocusVariant, Paradigm};
use modevote_core::parser::{parse_structured, ParseErrorKind};
use modevote_core::prompt::{build_output_schema, Numbering, Stage};
use modevote_core::{
    compute_weight, select_modes, validate_question_set, CotFieldSet, Labels, ModeConfig, OptionIndex,
    PredictionSet, PromptStyle, QuestionRecord, QuestionSet, TemplateSet,
};
use modevote_runtime::{run_mode, BackendRegistry, CallStage, Config, MockBackend, RunContext, RunOptions};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

const OPTIONS: usize = 5;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn workspace_dir() -> PathBuf {
    crate_dir().join("../..")
}

// ---------------------------------------------------------------------------
// Brute-force oracle over plain answer vectors. Shares no code with the
// library beyond the input types.

/// `answers[k][i]` is mode k's answer on question i; `None` = abstained.
#[derive(Debug, Clone)]
struct Instance {
    weights: Vec<f64>,
    answers: Vec<Vec<Option<usize>>>,
    active: Vec<bool>,
}

impl Instance {
    fn modes(&self) -> usize {
        self.weights.len()
    }

    fn questions(&self) -> usize {
        self.answers[0].len()
    }
}

/// Sum taken in ascending order, so equal multisets give equal totals.
fn ascending_sum(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs.into_iter().sum()
}

fn oracle_similarity(a: &[Option<usize>], b: &[Option<usize>]) -> Option<f64> {
    let (mut shared, mut same) = (0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        if let (Some(x), Some(y)) = (x, y) {
            shared += 1;
            same += usize::from(x == y);
        }
    }
    (shared > 0).then(|| same as f64 / shared as f64)
}

fn oracle_effective(inst: &Instance, k: usize) -> f64 {
    let mut terms = vec![1.0];
    for j in 0..inst.modes() {
        if j != k && inst.active[j] {
            terms.push(oracle_similarity(&inst.answers[k], &inst.answers[j]).unwrap_or(0.0));
        }
    }
    inst.weights[k] / ascending_sum(terms)
}

/// Winning option on question `i`: highest score, then highest raw weight
/// among its backers, then lowest index. `None` when no active mode answered.
fn oracle_vote(inst: &Instance, i: usize) -> Option<usize> {
    let mut best: Option<(f64, f64, usize)> = None;
    for c in 0..OPTIONS {
        let backers: Vec<usize> = (0..inst.modes())
            .filter(|&k| inst.active[k] && inst.answers[k][i] == Some(c))
            .collect();
        if backers.is_empty() {
            continue;
        }
        let score = ascending_sum(backers.iter().map(|&k| oracle_effective(inst, k)).collect());
        let top = backers.iter().map(|&k| inst.weights[k]).fold(f64::NEG_INFINITY, f64::max);
        let better = match best {
            None => true,
            Some((s, t, _)) => score > s || (score == s && top > t),
        };
        if better {
            best = Some((score, top, c));
        }
    }
    best.map(|(_, _, c)| c)
}

fn oracle_accuracy(inst: &Instance, truth: &[usize]) -> f64 {
    let (mut decided, mut correct) = (0usize, 0usize);
    for (i, &t) in truth.iter().enumerate() {
        if let Some(c) = oracle_vote(inst, i) {
            decided += 1;
            correct += usize::from(c == t);
        }
    }
    correct as f64 / decided as f64
}

fn oracle_weight(answers: &[Option<usize>], truth: &[usize]) -> f64 {
    let answered: Vec<(usize, usize)> = answers.iter().zip(truth).filter_map(|(a, &t)| a.map(|a| (a, t))).collect();
    answered.iter().filter(|(a, t)| a == t).count() as f64 / answered.len() as f64
}

fn q_uid(i: usize) -> String {
    format!("q{i:03}")
}

fn to_sets(answers: &[Vec<Option<usize>>]) -> Vec<PredictionSet> {
    answers
        .iter()
        .enumerate()
        .map(|(k, row)| {
            PredictionSet::from_pairs(
                format!("m{k}"),
                row.iter()
                    .enumerate()
                    .filter_map(|(i, a)| a.map(|a| (q_uid(i), OptionIndex::new(a as i64).unwrap()))),
            )
        })
        .collect()
}

fn to_labels(truth: &[usize]) -> Labels {
    truth.iter().enumerate().map(|(i, &t)| (q_uid(i), OptionIndex::new(t as i64).unwrap())).collect()
}

fn engine_spec(inst: &Instance, sets: &[PredictionSet]) -> EnsembleSpec {
    let weights = sets
        .iter()
        .zip(&inst.weights)
        .map(|(s, &w)| ModeWeight {
            mode_id: s.mode_id.clone(),
            w,
            n_eval: 1,
        })
        .collect();
    EnsembleSpec::from_parts(weights, SimilarityMatrix::from_predictions(sets), inst.active.clone()).unwrap()
}

fn engine_decisions(inst: &Instance) -> Vec<Option<usize>> {
    let sets = to_sets(&inst.answers);
    let decided: BTreeMap<String, usize> = engine_spec(inst, &sets)
        .decide_all(&sets)
        .unwrap()
        .into_iter()
        .map(|d| (d.q_uid, d.choice.get()))
        .collect();
    (0..inst.questions()).map(|i| decided.get(&q_uid(i)).copied()).collect()
}

/// Random instance. Half of them draw weights from three values and answers
/// from two options so that exact ties come up often.
fn random_instance(rng: &mut ChaCha8Rng, modes: usize, questions: usize) -> Instance {
    let tie_prone = rng.random_bool(0.5);
    let weights = (0..modes)
        .map(|_| {
            if tie_prone {
                [0.5, 0.6, 0.7][rng.random_range(0..3)]
            } else {
                rng.random_range(0.01..1.0)
            }
        })
        .collect();
    let answers = (0..modes)
        .map(|_| {
            let mut row: Vec<Option<usize>> = (0..questions)
                .map(|_| {
                    let choice = if tie_prone { rng.random_range(0..2) } else { rng.random_range(0..OPTIONS) };
                    (!rng.random_bool(0.1)).then_some(choice)
                })
                .collect();
            if row.iter().all(Option::is_none) {
                row[0] = Some(rng.random_range(0..OPTIONS));
            }
            row
        })
        .collect();
    let mut active: Vec<bool> = (0..modes).map(|_| rng.random_bool(0.7)).collect();
    if !active.contains(&true) {
        active[rng.random_range(0..modes)] = true;
    }
    Instance { weights, answers, active }
}

// ---------------------------------------------------------------------------
// Criteria

fn vote_matches_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    for n in 0..1000 {
        let (m, q) = (rng.random_range(2..=7), rng.random_range(5..=50));
        let inst = random_instance(&mut rng, m, q);
        let engine = engine_decisions(&inst);
        for (i, got) in engine.iter().enumerate() {
            let want = oracle_vote(&inst, i);
            ensure!(*got == want, "instance {n}, question {i}: engine {got:?}, oracle {want:?}");
            checked += 1;
        }
    }
    Ok(format!("1000 instances, {checked} decisions identical"))
}

fn weight_and_similarity_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in 0..500 {
        let (m, q) = (rng.random_range(2..=7), rng.random_range(5..=50));
        let inst = random_instance(&mut rng, m, q);
        let truth: Vec<usize> = (0..q).map(|_| rng.random_range(0..OPTIONS)).collect();
        let sets = to_sets(&inst.answers);
        let labels = to_labels(&truth);
        let spec = EnsembleSpec::build(&sets, &labels, inst.active.clone()).unwrap();

        for k in 0..m {
            let w = spec.weights[k].w;
            ensure!((0.0..=1.0).contains(&w), "case {n}: weight {w} outside [0,1]");
            ensure!(w == oracle_weight(&inst.answers[k], &truth), "case {n}: weight of m{k} differs from oracle");
        }
        let sim = &spec.similarity;
        for i in 0..m {
            ensure!(sim.get(i, i) == Some(1.0), "case {n}: diagonal {i} is {:?}", sim.get(i, i));
            for j in 0..m {
                ensure!(sim.get(i, j) == sim.get(j, i), "case {n}: matrix not symmetric at ({i},{j})");
                if let Some(s) = sim.get(i, j) {
                    ensure!((0.0..=1.0).contains(&s), "case {n}: similarity {s} outside [0,1]");
                }
                if i != j {
                    let want = oracle_similarity(&inst.answers[i], &inst.answers[j]);
                    ensure!(sim.get(i, j) == want, "case {n}: similarity ({i},{j}) differs from oracle");
                }
            }
        }
        let decisions: BTreeMap<String, usize> = spec
            .decide_all(&sets)
            .unwrap()
            .into_iter()
            .map(|d| (d.q_uid, d.choice.get()))
            .collect();

        // Question permutation: rename question i to question perm[i].
        let mut perm: Vec<usize> = (0..q).collect();
        perm.shuffle(&mut rng);
        let mut moved_answers = vec![vec![None; q]; m];
        let mut moved_truth = vec![0; q];
        for i in 0..q {
            for k in 0..m {
                moved_answers[k][perm[i]] = inst.answers[k][i];
            }
            moved_truth[perm[i]] = truth[i];
        }
        let moved_sets = to_sets(&moved_answers);
        let moved = EnsembleSpec::build(&moved_sets, &to_labels(&moved_truth), inst.active.clone()).unwrap();
        ensure!(moved.weights == spec.weights, "case {n}: weights change under question permutation");
        ensure!(moved.similarity.entries == sim.entries, "case {n}: similarities change under question permutation");
        for d in moved.decide_all(&moved_sets).unwrap() {
            let original = perm.iter().position(|&p| q_uid(p) == d.q_uid).unwrap();
            ensure!(
                decisions.get(&q_uid(original)) == Some(&d.choice.get()),
                "case {n}: decision on question {original} changes under question permutation"
            );
        }

        // Mode permutation: position p holds original mode order[p].
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng);
        let shuffled: Vec<PredictionSet> = order.iter().map(|&k| sets[k].clone()).collect();
        let activation: Vec<bool> = order.iter().map(|&k| inst.active[k]).collect();
        let relabeled = EnsembleSpec::build(&shuffled, &labels, activation).unwrap();
        for (p, &k) in order.iter().enumerate() {
            ensure!(relabeled.weights[p] == spec.weights[k], "case {n}: weight moves under mode permutation");
            for (r, &l) in order.iter().enumerate() {
                ensure!(
                    relabeled.similarity.get(p, r) == sim.get(k, l),
                    "case {n}: similarity ({k},{l}) changes under mode permutation"
                );
            }
        }
        let relabeled_decisions: BTreeMap<String, usize> = relabeled
            .decide_all(&shuffled)
            .unwrap()
            .into_iter()
            .map(|d| (d.q_uid, d.choice.get()))
            .collect();
        ensure!(relabeled_decisions == decisions, "case {n}: decisions change under mode permutation");
    }
    Ok("500 cases: bounds, symmetry, unit diagonal, question and mode permutation".into())
}

fn scaling_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in 0..200 {
        let (m, q) = (rng.random_range(2..=7), rng.random_range(5..=50));
        let inst = random_instance(&mut rng, m, q);
        let base = engine_decisions(&inst);
        for _ in 0..5 {
            let c = 10f64.powf(rng.random_range(-3.0..3.0));
            let mut scaled = inst.clone();
            scaled.weights.iter_mut().for_each(|w| *w *= c);
            ensure!(engine_decisions(&scaled) == base, "instance {n}: decisions change when weights are scaled by {c}");
        }
    }
    Ok("200 instances x 5 scale factors, decisions unchanged".into())
}

fn unanimity_and_single_mode() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = 20;
    let (mut unanimous, mut single) = (0, 0);
    for m in 1..=7usize {
        for mask in 1u32..(1 << m) {
            let active: Vec<bool> = (0..m).map(|k| mask & (1 << k) != 0).collect();
            let weights: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..1.0)).collect();
            let first_active = active.iter().position(|a| *a).unwrap();

            // Every active mode that answers picks option c; inactive modes
            // answer at random.
            for c in 0..OPTIONS {
                let answers: Vec<Vec<Option<usize>>> = (0..m)
                    .map(|k| {
                        (0..q)
                            .map(|i| {
                                if !active[k] {
                                    (!rng.random_bool(0.2)).then(|| rng.random_range(0..OPTIONS))
                                } else if k == first_active || !rng.random_bool(0.2) || i == 0 {
                                    Some(c)
                                } else {
                                    None
                                }
                            })
                            .collect()
                    })
                    .collect();
                let inst = Instance {
                    weights: weights.clone(),
                    answers,
                    active: active.clone(),
                };
                let got = engine_decisions(&inst);
                ensure!(got.iter().all(|d| *d == Some(c)), "{m} modes, activation {mask:b}, option {c}: {got:?}");
                unanimous += 1;
            }

            if mask.count_ones() == 1 {
                let answers: Vec<Vec<Option<usize>>> = (0..m)
                    .map(|_| (0..q).map(|_| (!rng.random_bool(0.2)).then(|| rng.random_range(0..OPTIONS))).collect())
                    .collect();
                let inst = Instance {
                    weights: weights.clone(),
                    answers,
                    active: active.clone(),
                };
                ensure!(
                    engine_decisions(&inst) == inst.answers[first_active],
                    "{m} modes, only m{first_active} active: decisions differ from its answers"
                );
                single += 1;
            }
        }
    }
    Ok(format!("{unanimous} unanimous and {single} single-mode configurations"))
}

#[derive(Deserialize)]
struct SevenModes {
    weights: Vec<f64>,
    similarity: Vec<Vec<f64>>,
    expected_effective: BTreeMap<String, Vec<Option<f64>>>,
}

fn effective_weight_fixture() -> Outcome {
    let path = crate_dir().join("tests/fixtures/seven_modes.json");
    let fixture: SevenModes = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let published_pct = [75.9, 73.7, 75.2, 74.0, 73.0, 74.4, 73.7];
    for (w, pct) in fixture.weights.iter().zip(published_pct) {
        ensure!((w * 100.0 - pct).abs() < 1e-9, "fixture weight {w} differs from the published {pct}%");
    }
    let modes: Vec<String> = (1..=7).map(|i| format!("mode{i}")).collect();
    let weights: Vec<ModeWeight> = modes
        .iter()
        .zip(&fixture.weights)
        .map(|(id, &w)| ModeWeight {
            mode_id: id.clone(),
            w,
            n_eval: 5000,
        })
        .collect();
    let matrix = SimilarityMatrix {
        modes: modes.clone(),
        entries: fixture.similarity.iter().map(|r| r.iter().map(|&s| Some(s)).collect()).collect(),
        overlaps: vec![vec![5000; 7]; 7],
    };
    let mut worst: f64 = 0.0;
    for (bits, expected) in &fixture.expected_effective {
        let activation: Vec<bool> = bits.chars().map(|c| c == '1').collect();
        let spec = EnsembleSpec::from_parts(weights.clone(), matrix.clone(), activation.clone()).unwrap();
        let got = spec.effective_weights();
        for k in 0..7 {
            // Independent hand computation from the raw fixture numbers.
            let hand = activation[k].then(|| {
                let d: f64 = 1.0 + (0..7).filter(|&j| j != k && activation[j]).map(|j| fixture.similarity[k][j]).sum::<f64>();
                fixture.weights[k] / d
            });
            for want in [expected[k], hand] {
                match (got[k], want) {
                    (None, None) => {}
                    (Some(g), Some(w)) => {
                        worst = worst.max((g - w).abs());
                        ensure!((g - w).abs() <= 1e-12, "activation {bits}, mode {}: {g} vs {w}", k + 1);
                    }
                    (g, w) => return Err(format!("activation {bits}, mode {}: {g:?} vs {w:?}", k + 1)),
                }
            }
        }
    }
    Ok(format!("{} activations, max deviation {worst:.1e}", fixture.expected_effective.len()))
}

/// Reproducible part of a run directory, keyed by relative path.
fn reproducible_files(out: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for sub in ["predictions", "records"] {
        for entry in std::fs::read_dir(out.join(sub)).unwrap() {
            let path = entry.unwrap().path();
            files.insert(format!("{sub}/{}", path.file_name().unwrap().to_string_lossy()), std::fs::read(&path).unwrap());
        }
    }
    files
}

fn ensemble_files(run_out: &Path, ens_out: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut predictions: Vec<PathBuf> = std::fs::read_dir(run_out.join("predictions"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    predictions.sort();
    let data = workspace_dir().join("data");
    let args = EnsembleArgs {
        inputs: Inputs {
            predictions,
            labels: Some(data.join("labels.json")),
            questions: Some(data.join("questions.jsonl")),
        },
        activation: "all".into(),
        max_k: 7,
        out: ens_out.to_path_buf(),
    };
    cmd_ensemble(&args).unwrap();
    ["submission.json", "submission.csv", "decisions.jsonl", "ensemble_spec.json"]
        .iter()
        .map(|name| (format!("ensemble/{name}"), std::fs::read(ens_out.join(name)).unwrap()))
        .collect()
}

fn mock_config() -> PathBuf {
    workspace_dir().join("configs/mock.toml")
}

fn run_into(out: &Path, workers: Option<usize>) -> modevote_cli::RunSummary {
    let mut args = RunArgs::new(mock_config());
    args.out = Some(out.to_path_buf());
    args.workers = workers;
    args.offline = true;
    cmd_run(&args).unwrap()
}

fn end_to_end_determinism() -> Outcome {
    let config = Config::load(&mock_config()).unwrap();
    let modes = &config.modes;
    ensure!(modes.len() == 3, "mock config declares {} modes", modes.len());
    ensure!(modes.iter().any(|m| m.paradigm == Paradigm::OneStage && m.focus_variant == FocusVariant::None), "no plain one-stage mode");
    ensure!(modes.iter().any(|m| m.paradigm == Paradigm::TwoStage), "no two-stage mode");
    ensure!(modes.iter().any(|m| m.focus_variant == FocusVariant::QaFocal), "no qa_focal mode");
    let n_questions = QuestionSet::load(&workspace_dir().join("data/questions.jsonl")).unwrap().len();
    ensure!(n_questions == 20, "{n_questions} questions");

    let tmp = tempfile::tempdir().unwrap();
    let mut reference: Option<BTreeMap<String, Vec<u8>>> = None;
    let runs = [("repeat-1", None), ("repeat-2", None), ("repeat-3", None), ("workers-1", Some(1)), ("workers-4", Some(4)), ("workers-16", Some(16))];
    for (name, workers) in runs {
        let out = tmp.path().join(name);
        let summary = run_into(&out, workers);
        ensure!(summary.cache_hits == 0, "{name}: cold run hit the cache");
        let mut files = reproducible_files(&out);
        files.extend(ensemble_files(&out, &tmp.path().join(format!("{name}-ensemble"))));
        match &reference {
            None => reference = Some(files),
            Some(want) => {
                ensure!(want.keys().eq(files.keys()), "{name}: different file set");
                for (path, bytes) in &files {
                    ensure!(want[path] == *bytes, "{name}: {path} differs from the first run");
                }
            }
        }
    }
    let files = reference.unwrap();
    Ok(format!("6 runs (3 repeats, workers 1/4/16), {} files byte-identical", files.len()))
}

#[derive(Deserialize)]
struct ParserCase {
    file: String,
    fields: Vec<CotField>,
    numbering: Numbering,
    expect: ParserExpect,
}

#[derive(Deserialize)]
struct ParserExpect {
    answer: Option<usize>,
    confidence: Option<f64>,
    captions: Option<usize>,
    error: Option<ParseErrorKind>,
}

fn parser_corpus() -> Outcome {
    let dir = crate_dir().join("../core/tests/fixtures/parser");
    let cases: Vec<ParserCase> = serde_json::from_str(&std::fs::read_to_string(dir.join("cases.json")).unwrap()).unwrap();
    ensure!(cases.len() >= 25, "only {} fixtures", cases.len());
    let mut errors = 0;
    for case in &cases {
        let raw = std::fs::read_to_string(dir.join(&case.file)).unwrap();
        let schema = build_output_schema(CotFieldSet::from_fields(case.fields.iter().copied()).unwrap(), Stage::Single);
        let outcome = parse_structured(&raw, &schema, case.numbering);
        let agrees = match (&outcome, case.expect.error) {
            (Err(e), Some(kind)) => {
                errors += 1;
                e.kind() == kind
            }
            (Ok(a), None) => {
                case.expect.answer == Some(a.answer.get())
                    && case.expect.confidence.is_none_or(|c| a.confidence == Some(c))
                    && case.expect.captions.is_none_or(|n| a.captions.as_ref().map(Vec::len) == Some(n))
            }
            _ => false,
        };
        ensure!(agrees, "{}: got {outcome:?}", case.file);
    }
    Ok(format!("{} fixtures agree ({} parses, {errors} errors)", cases.len(), cases.len() - errors))
}

fn cache_replay() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let first = run_into(&out, None);
    ensure!(first.mock_invocations > 0, "first run made no backend calls");
    let before = reproducible_files(&out);
    let second = run_into(&out, None);
    ensure!(second.mock_invocations == 0, "second run invoked the mock {} times", second.mock_invocations);
    ensure!(second.backend_calls == 0, "second run made {} backend calls", second.backend_calls);
    ensure!(reproducible_files(&out) == before, "outputs changed on the cached rerun");
    Ok(format!(
        "first run {} mock calls, second run 0 ({} cache hits), outputs identical",
        first.mock_invocations, second.cache_hits
    ))
}

fn question_set(durations: &[u32]) -> QuestionSet {
    let records = durations.iter().enumerate().map(|(i, d)| {
        let mut v = serde_json::json!({
            "q_uid": format!("v{i}"),
            "question": format!("What is C mostly doing in video {i}?"),
            "video_ref": format!("videos/v{i}.mp4"),
            "duration": d,
        });
        for k in 0..OPTIONS {
            v[format!("option {k}")] = serde_json::json!(format!("C handles item {k}"));
        }
        serde_json::from_value::<QuestionRecord>(v).unwrap()
    });
    validate_question_set(records).unwrap()
}

/// Stage-1 hand-off rebuilt from the raw stage-1 reply: one line per clip of
/// `clip` seconds, the last one clipped to the video length.
fn expected_handoff(reply: &str, duration: f64, clip: f64) -> String {
    let value: serde_json::Value = serde_json::from_str(reply).unwrap();
    let mut text = String::new();
    if let Some(captions) = value.get("caption").and_then(|c| c.as_array()) {
        text.push_str("Captions:\n");
        for (i, c) in captions.iter().enumerate() {
            let start = clip * i as f64;
            let end = (clip * (i + 1) as f64).min(duration);
            text.push_str(&format!("[{start}s-{end}s] {}\n", c.as_str().unwrap()));
        }
    }
    if let Some(summary) = value.get("summary").and_then(|s| s.as_str()) {
        text.push_str(&format!("Summary: {summary}\n"));
    }
    text
}

fn two_stage_contract() -> Outcome {
    const CANONICAL: [CotField; 5] = [CotField::Caption, CotField::Summary, CotField::Reason, CotField::Answer, CotField::Confidence];
    let sets: Vec<CotFieldSet> = CotFieldSet::all_valid().collect();
    ensure!(sets.len() == 16, "{} valid field sets", sets.len());

    let durations = [10u32, 16, 30];
    let qs = question_set(&durations);
    let templates = TemplateSet::builtin();
    let mock = Arc::new(MockBackend::new("mock", 11));
    let mut registry = BackendRegistry::new();
    registry.insert(mock).unwrap();
    let ctx = RunContext {
        templates: &templates,
        registry: &registry,
        cache: None,
    };
    let runtime = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();

    let (mut handoffs, mut refused) = (0, 0);
    let mut snapshot = None;
    for fields in &sets {
        let chosen: Vec<CotField> = CANONICAL.into_iter().filter(|f| fields.contains(*f)).collect();
        let keys = |stage| build_output_schema(*fields, stage).fields().collect::<Vec<_>>();
        let (first, second, single) = (keys(Stage::Stage1), keys(Stage::Stage2), keys(Stage::Single));
        ensure!(first == chosen.iter().copied().filter(|f| CANONICAL[..2].contains(f)).collect::<Vec<_>>(), "{chosen:?}: stage 1 keys {first:?}");
        ensure!(second == chosen.iter().copied().filter(|f| CANONICAL[2..].contains(f)).collect::<Vec<_>>(), "{chosen:?}: stage 2 keys {second:?}");
        ensure!(single == chosen, "{chosen:?}: single-call keys {single:?}");

        let mut mode = ModeConfig::one_stage("two", PromptStyle::P3, *fields, "mock");
        mode.paradigm = Paradigm::TwoStage;
        if first.is_empty() {
            ensure!(mode.validate().is_err(), "{chosen:?}: two-stage mode without stage-1 fields accepted");
            refused += 1;
            continue;
        }
        let run = runtime.block_on(run_mode(&mode, &qs, ctx, &RunOptions::default())).map_err(|e| e.to_string())?;
        for (record, duration) in run.records.iter().zip(durations) {
            let stage1 = record.calls.iter().rev().find(|c| c.stage == CallStage::Stage1).unwrap();
            let stage2 = record.first_call(CallStage::Stage2).unwrap();
            let handoff = expected_handoff(&stage1.reply, duration as f64, mode.clip_seconds);
            ensure!(!handoff.is_empty(), "{chosen:?}: empty hand-off");
            ensure!(stage2.prompt.contains(&handoff), "{chosen:?}, {}: stage-2 prompt lacks the stage-1 text", record.q_uid);
            handoffs += 1;
            if *fields == CotFieldSet::ALL && record.q_uid == "v0" {
                snapshot = Some(stage2.prompt.clone());
            }
        }
    }

    let golden = crate_dir().join("tests/snapshots/stage2_prompt.txt");
    let snapshot = snapshot.ok_or("no snapshot prompt captured")?;
    if std::env::var_os("MODEVOTE_BLESS").is_some() {
        std::fs::create_dir_all(golden.parent().unwrap()).unwrap();
        std::fs::write(&golden, &snapshot).unwrap();
    }
    let stored = std::fs::read_to_string(&golden).map_err(|e| format!("{}: {e}", golden.display()))?;
    ensure!(stored == snapshot, "stage-2 prompt differs from {}", golden.display());
    Ok(format!("16 field sets partitioned, {handoffs} hand-offs verbatim, {refused} sets refused for two-stage, snapshot matches"))
}

/// Three modes over 10 questions, each wrong on its own three questions.
/// Any two of them outvote the third, so only the full trio is always right.
fn complementary_trio() -> (Vec<Vec<Option<usize>>>, Vec<usize>) {
    let truth: Vec<usize> = (0..10).map(|i| i % 4 + 1).collect();
    let answers = (0..3)
        .map(|k| {
            (0..10)
                .map(|i| Some(if i < 9 && i / 3 == k { truth[i] - 1 } else { truth[i] }))
                .collect()
        })
        .collect();
    (answers, truth)
}

fn activation_sweep_and_auto() -> Outcome {
    let (answers, truth) = complementary_trio();
    let labels = to_labels(&truth);
    let data = tempfile::tempdir().unwrap();
    let mut reported = String::new();
    for (p, order) in [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]].iter().enumerate() {
        let rows: Vec<Vec<Option<usize>>> = order.iter().map(|&k| answers[k].clone()).collect();
        let weights: Vec<f64> = rows.iter().map(|r| oracle_weight(r, &truth)).collect();
        let sets = to_sets(&rows);

        let vectors = all_activations(3);
        ensure!(vectors.len() == 7, "{} activation vectors", vectors.len());
        let sweep = activation_sweep(&vectors, &sets, &labels).map_err(|e| e.to_string())?;
        ensure!(sweep.len() == 7, "sweep has {} rows", sweep.len());
        let mut best: Option<(f64, Vec<bool>)> = None;
        for bits in &vectors {
            let inst = Instance {
                weights: weights.clone(),
                answers: rows.clone(),
                active: bits.clone(),
            };
            let want = oracle_accuracy(&inst, &truth);
            let key: String = bits.iter().map(|&b| if b { '1' } else { '0' }).collect();
            let row = sweep.iter().find(|r| r.activation == key).ok_or(format!("sweep lacks {key}"))?;
            ensure!(row.accuracy == want, "order {p}, {key}: sweep {} vs oracle {want}", row.accuracy);
            if best.as_ref().is_none_or(|(acc, _)| want > *acc) {
                best = Some((want, bits.clone()));
            }
            if p == 0 {
                reported.push_str(&format!(" {key}={:.0}%", want * 100.0));
            }
        }
        let (best_acc, best_bits) = best.unwrap();
        let ties = vectors
            .iter()
            .filter(|b| oracle_accuracy(&Instance { weights: weights.clone(), answers: rows.clone(), active: (*b).clone() }, &truth) == best_acc)
            .count();
        ensure!(ties == 1, "order {p}: the best subset is not unique");

        let auto = select_modes(&sets, &labels, 3).map_err(|e| e.to_string())?;
        ensure!(auto.activation == best_bits, "order {p}: auto chose {} instead of the best subset", auto.activation_string());
        ensure!(auto.accuracy(&sets, &labels).unwrap() == best_acc, "order {p}: auto accuracy differs");
        ensure!(compute_weight(&sets[0], &labels).unwrap().w == weights[0], "order {p}: weight differs from oracle");

        // The same choice through the command.
        let dir = data.path().join(format!("order{p}"));
        std::fs::create_dir_all(&dir).unwrap();
        let files: Vec<PathBuf> = sets
            .iter()
            .map(|s| {
                let path = dir.join(format!("{}.json", s.mode_id));
                s.save(&path).unwrap();
                path
            })
            .collect();
        let labels_path = dir.join("labels.json");
        std::fs::write(&labels_path, serde_json::to_string(&labels).unwrap()).unwrap();
        let summary = cmd_ensemble(&EnsembleArgs {
            inputs: Inputs {
                predictions: files,
                labels: Some(labels_path),
                questions: None,
            },
            activation: "auto".into(),
            max_k: 7,
            out: dir.join("ensemble"),
        })
        .map_err(|e| e.to_string())?;
        ensure!(summary.activation == auto.activation_string(), "order {p}: command chose {}", summary.activation);
    }
    Ok(format!("7 vectors match the oracle in all 6 mode orders;{reported}; auto picks 111"))
}

// ---------------------------------------------------------------------------

struct Criterion {
    name: &'static str,
    limit: Option<Duration>,
    check: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion {
            name: "weighted vote equals brute-force oracle",
            limit: Some(Duration::from_secs(10)),
            check: vote_matches_oracle,
        },
        Criterion {
            name: "weight and similarity properties",
            limit: Some(Duration::from_secs(5)),
            check: weight_and_similarity_properties,
        },
        Criterion {
            name: "positive scaling keeps every decision",
            limit: Some(Duration::from_secs(5)),
            check: scaling_invariance,
        },
        Criterion {
            name: "unanimity and single-mode identity",
            limit: Some(Duration::from_secs(5)),
            check: unanimity_and_single_mode,
        },
        Criterion {
            name: "effective weights of the seven published modes",
            limit: None,
            check: effective_weight_fixture,
        },
        Criterion {
            name: "end-to-end mock run is byte-identical",
            limit: Some(Duration::from_secs(30)),
            check: end_to_end_determinism,
        },
        Criterion {
            name: "parser corpus",
            limit: None,
            check: parser_corpus,
        },
        Criterion {
            name: "cached rerun makes no backend calls",
            limit: None,
            check: cache_replay,
        },
        Criterion {
            name: "two-stage hand-off and field split",
            limit: None,
            check: two_stage_contract,
        },
        Criterion {
            name: "activation sweep and auto selection",
            limit: None,
            check: activation_sweep_and_auto,
        },
    ];

    // Failures are reported by the lines below, not by the panic hook.
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, c) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panic: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = match (outcome, c.limit) {
            (Ok(_), Some(limit)) if elapsed > limit => Err(format!("took {:.2} s, limit {} s", elapsed.as_secs_f64(), limit.as_secs())),
            (other, _) => other,
        };
        let timing = match c.limit {
            Some(limit) => format!("{:.2} s, limit {} s", elapsed.as_secs_f64(), limit.as_secs()),
            None => format!("{:.2} s", elapsed.as_secs_f64()),
        };
        match outcome {
            Ok(detail) => println!("PASS  AC{:<2} {} | {detail} ({timing})", i + 1, c.name),
            Err(why) => {
                failed += 1;
                println!("FAIL  AC{:<2} {} | {why} ({timing})", i + 1, c.name);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
