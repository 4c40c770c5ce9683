use std::sync::Mutex;

use proptest::prelude::*;
use selfcal::backends::{
    Backend, BackendError, CallKind, Completion, CompletionRequest, ScoreRequest, SyntheticBackend, SyntheticSpec,
    DEFAULT_CONTEXT_LIMIT,
};
use selfcal::engine::{extract_option_confidence, EngineError, Query, SelfImproveMethod, SelfImprover};

fn spec(alpha: f64, delta: f64) -> SyntheticSpec {
    SyntheticSpec {
        alpha,
        gamma: 0.0,
        delta,
        sigma: 0.0,
        k_opts: 4,
        context_limit_tokens: DEFAULT_CONTEXT_LIMIT,
    }
}

fn query(id: &str) -> Query {
    Query {
        id: id.into(),
        stem: "Which planet is known as the red planet?".into(),
        options: vec!["Venus".into(), "Mars".into(), "Jupiter".into(), "Saturn".into()],
        gold: 1,
    }
}

/// Synthetic oracle that logs every call and can replace feedback text.
struct Recorder {
    inner: SyntheticBackend,
    calls: Mutex<Vec<(CallKind, String, u32)>>,
    feedback: Option<String>,
}

impl Recorder {
    fn new(spec: SyntheticSpec) -> Self {
        Self {
            inner: SyntheticBackend::new(spec, 7),
            calls: Mutex::new(Vec::new()),
            feedback: None,
        }
    }

    fn calls(&self) -> Vec<(CallKind, String, u32)> {
        self.calls.lock().unwrap().clone()
    }
}

impl Backend for Recorder {
    fn context_limit_tokens(&self) -> usize {
        self.inner.context_limit_tokens()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        self.calls
            .lock()
            .unwrap()
            .push((request.meta.kind, request.prompt.clone(), request.max_tokens));
        let mut c = self.inner.complete(request)?;
        if let (CallKind::Feedback, Some(f)) = (request.meta.kind, &self.feedback) {
            c.text = f.clone();
        }
        Ok(c)
    }

    fn score_options(&self, request: &ScoreRequest) -> Result<Vec<f64>, BackendError> {
        self.inner.score_options(request)
    }
}

#[test]
fn perfect_oracle_answers_correctly_at_its_target_confidence() {
    let backend = SyntheticBackend::new(spec(1.0, 0.0), 7);
    let engine = SelfImprover::new(&backend, SelfImproveMethod::Basic);
    let state = engine.initial_answer(&query("q")).unwrap();
    assert!(state.record.correct);
    assert_eq!(state.answer, 1);
    let target = 1.0 - 1e-6;
    assert!((state.record.confidence - target).abs() < 1e-12);
    assert!(state.feedback.is_none());
    assert!(state.cot.is_none());
}

#[test]
fn cot_reasoning_call_uses_its_token_cap_and_is_reused() {
    let backend = Recorder::new(spec(0.7, 0.0));
    let method = SelfImproveMethod::Cot {
        max_cot_tokens: SelfImproveMethod::LONG_COT_TOKENS,
    };
    let engine = SelfImprover::new(&backend, method);
    let t = engine.run(&query("q"), 2);
    let calls = backend.calls();
    let cots: Vec<_> = calls.iter().filter(|c| c.0 == CallKind::Cot).collect();
    assert_eq!(cots.len(), 1, "reasoning is generated once");
    assert_eq!(cots[0].2, 512);
    let cot = t.rounds[0].cot.clone().expect("cot present");
    assert!(t.rounds.iter().all(|r| r.cot.as_deref() == Some(cot.as_str())));
    for (kind, prompt, _) in &calls {
        if matches!(kind, CallKind::Feedback | CallKind::Refine | CallKind::Answer) {
            assert!(prompt.contains(&cot), "{kind:?} prompt lacks the reasoning");
        }
    }
}

#[test]
fn identical_options_tie_to_first_index() {
    struct Flat;
    impl Backend for Flat {
        fn context_limit_tokens(&self) -> usize {
            4096
        }
        fn complete(&self, _: &CompletionRequest) -> Result<Completion, BackendError> {
            Ok(Completion {
                text: "hmm".into(),
                option_logprobs: None,
                usage_tokens: None,
            })
        }
        fn score_options(&self, _: &ScoreRequest) -> Result<Vec<f64>, BackendError> {
            Ok(vec![0.5f64.ln(); 2])
        }
    }
    let q = Query {
        id: "tie".into(),
        stem: "Pick one".into(),
        options: vec!["same".into(), "same".into()],
        gold: 1,
    };
    let state = SelfImprover::new(&Flat, SelfImproveMethod::Basic)
        .initial_answer(&q)
        .unwrap();
    assert_eq!(state.answer, 0);
    assert_eq!(state.record.chosen, 0);
    assert!(state.parse_fallback);
    assert_eq!(state.record.confidence, 0.5);
}

#[test]
fn feedback_is_deterministic_and_prompt_holds_query_and_answer() {
    let backend = Recorder::new(spec(0.7, 0.0));
    let engine = SelfImprover::new(&backend, SelfImproveMethod::Basic);
    let q = query("q");
    let state = engine.initial_answer(&q).unwrap();
    let a = engine.feedback(&q, &state, None).unwrap();
    let b = engine.feedback(&q, &state, None).unwrap();
    assert_eq!(a, b);
    let prompt = engine.feedback_prompt(&q, &state, None);
    assert!(prompt.contains(&q.stem));
    for o in &q.options {
        assert!(prompt.contains(o.as_str()));
    }
    let letter = (b'A' + state.answer as u8) as char;
    assert!(prompt.contains(&format!("Proposed answer: {letter}")));
    assert!(!prompt.contains("Reasoning:"));
    assert!(!prompt.contains("confidence"));
    let with_conf = engine.feedback_prompt(&q, &state, Some(0.8125));
    assert!(with_conf.contains("0.8125"));
}

#[test]
fn refine_increments_round_and_carries_feedback() {
    let backend = SyntheticBackend::new(spec(1.0, 0.0), 7);
    let engine = SelfImprover::new(&backend, SelfImproveMethod::Basic);
    let q = query("q");
    let s0 = engine.initial_answer(&q).unwrap();
    let f = engine.feedback(&q, &s0, None).unwrap();
    let s1 = engine.refine(&q, std::slice::from_ref(&s0), &f).unwrap();
    assert_eq!(s1.round, 1);
    assert_eq!(s1.feedback.as_deref(), Some(f.as_str()));
    assert!(s1.record.correct);
    let (prompt, truncated) = engine.refine_prompt(&q, &[s0], &f);
    assert!(!truncated);
    assert!(prompt.contains(&f) && prompt.contains(&q.stem) && prompt.contains("Previous answer: B"));
}

#[test]
fn zero_rounds_gives_one_state() {
    let backend = SyntheticBackend::new(spec(0.6, 0.05), 7);
    let t = SelfImprover::new(&backend, SelfImproveMethod::Basic).run(&query("q"), 0);
    assert_eq!(t.rounds.len(), 1);
    assert!(t.rounds[0].feedback.is_none());
    assert!(t.error.is_none());
}

#[test]
fn confidence_rises_each_round_until_clamped() {
    let backend = SyntheticBackend::new(spec(0.6, 0.1), 7);
    let t = SelfImprover::new(&backend, SelfImproveMethod::Basic).run(&query("q"), 5);
    assert_eq!(t.rounds.len(), 6);
    let conf: Vec<f64> = t.rounds.iter().map(|r| r.record.confidence).collect();
    let cap = 1.0 - 1e-6;
    for w in conf.windows(2) {
        if w[0] < cap - 1e-9 {
            assert!(w[1] > w[0], "{conf:?}");
        } else {
            assert!((w[1] - cap).abs() < 1e-9);
        }
    }
    assert!((conf[5] - cap).abs() < 1e-9, "0.6 + 0.5 clamps");
    for (i, r) in t.rounds.iter().enumerate() {
        assert_eq!(r.round as usize, i);
        r.record.validate().unwrap();
        assert_eq!(r.feedback.is_some(), i > 0);
    }
}

#[test]
fn reruns_are_byte_identical() {
    let backend = SyntheticBackend::new(
        SyntheticSpec {
            sigma: 0.05,
            ..spec(0.6, 0.05)
        },
        11,
    );
    let engine = SelfImprover::new(&backend, SelfImproveMethod::Cot { max_cot_tokens: 128 });
    let a = serde_json::to_string(&engine.run(&query("q"), 4)).unwrap();
    let b = serde_json::to_string(&engine.run(&query("q"), 4)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn overlong_history_drops_oldest_feedback() {
    let mut backend = Recorder::new(spec(0.7, 0.0));
    backend.feedback = Some("This needs more thought. ".repeat(200));
    let engine = SelfImprover::new(&backend, SelfImproveMethod::Basic);
    let t = engine.run(&query("q"), 5);
    assert!(t.error.is_none(), "{:?}", t.error);
    assert_eq!(t.rounds.len(), 6);
    assert!(t.rounds.iter().any(|r| r.truncated));
    assert!(!t.rounds[1].truncated);
    for r in &t.rounds {
        assert!(r.prompt_tokens <= DEFAULT_CONTEXT_LIMIT);
    }
    for (kind, prompt, _) in backend.calls() {
        assert!(
            selfcal::backends::estimate_tokens(&prompt) <= DEFAULT_CONTEXT_LIMIT,
            "{kind:?} prompt over the limit"
        );
    }
}

#[test]
fn empty_feedback_marks_round_truncated_and_errors() {
    let mut backend = Recorder::new(spec(0.7, 0.0));
    backend.feedback = Some("   ".into());
    let engine = SelfImprover::new(&backend, SelfImproveMethod::Basic);
    let q = query("q");
    let state = engine.initial_answer(&q).unwrap();
    assert!(matches!(
        engine.feedback(&q, &state, None),
        Err(EngineError::EmptyFeedback { round: 0, .. })
    ));
    let t = engine.run(&q, 3);
    assert_eq!(t.rounds.len(), 1);
    assert!(t.rounds[0].truncated);
    assert!(t.error.as_deref().unwrap().contains("empty feedback"));
}

#[test]
fn backend_errors_carry_the_query_id() {
    let backend = SyntheticBackend::new(
        SyntheticSpec {
            context_limit_tokens: 10,
            ..spec(0.7, 0.0)
        },
        7,
    );
    let err = SelfImprover::new(&backend, SelfImproveMethod::Basic)
        .initial_answer(&query("q-17"))
        .unwrap_err();
    assert!(err.to_string().starts_with("q-17"), "{err}");
}

#[test]
fn invalid_queries_are_rejected() {
    let backend = SyntheticBackend::new(spec(0.7, 0.0), 7);
    let mut q = query("bad");
    q.gold = 9;
    let engine = SelfImprover::new(&backend, SelfImproveMethod::Basic);
    assert!(matches!(
        engine.initial_answer(&q),
        Err(EngineError::InvalidQuery { .. })
    ));
    q.options.truncate(1);
    q.gold = 0;
    assert!(matches!(
        engine.initial_answer(&q),
        Err(EngineError::InvalidQuery { .. })
    ));
}

#[test]
fn option_confidence_examples() {
    assert_eq!(extract_option_confidence(&[-1.3; 4]).unwrap(), vec![0.25; 4]);
    let p = extract_option_confidence(&[0.5f64.ln(), 0.25f64.ln(), 0.125f64.ln(), 0.125f64.ln()]).unwrap();
    for (a, b) in p.iter().zip([0.5, 0.25, 0.125, 0.125]) {
        assert!((a - b).abs() < 1e-15);
    }
    assert_eq!(extract_option_confidence(&[-7.0]).unwrap(), vec![1.0]);
    assert!(extract_option_confidence(&[0.0, f64::NAN]).is_err());
    assert!(extract_option_confidence(&[0.0, f64::NEG_INFINITY]).is_err());
}

proptest! {
    #[test]
    fn option_confidence_is_a_distribution(lp in prop::collection::vec(-30.0f64..0.0, 1..8)) {
        let p = extract_option_confidence(&lp).unwrap();
        let s: f64 = p.iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|x| *x > 0.0 && *x <= 1.0));
    }

    #[test]
    fn transcripts_keep_round_order_and_record_invariants(
        alpha in 0.3f64..1.0, delta in 0.0f64..0.1, sigma in 0.0f64..0.1, seed in any::<u64>(), t in 0u32..5
    ) {
        let backend = SyntheticBackend::new(SyntheticSpec { sigma, ..spec(alpha, delta) }, seed);
        let tr = SelfImprover::new(&backend, SelfImproveMethod::Basic).run(&query("p"), t);
        prop_assert_eq!(tr.rounds.len(), t as usize + 1);
        for (i, r) in tr.rounds.iter().enumerate() {
            prop_assert_eq!(r.round as usize, i);
            prop_assert!(r.record.validate().is_ok());
        }
    }
}
