use std::time::Duration;

use lynx_core::data_pipeline::Portrait;
use lynx_core::eval_harness::mock::{MockJudgeServer, MockReply};
use lynx_core::eval_harness::{
    aggregate, build_benchmark, case_id, face_resemblance, judge_all, judge_case, JudgeClient, JudgeConfig, JudgeJob,
    ResemblanceReport, ScoreTable, DEFAULT_RUBRIC,
};
use lynx_core::face::embedder_registry;
use lynx_core::media::save_frames;
use lynx_core::LynxError;

fn client(url: String) -> JudgeClient {
    let mut c = JudgeConfig::new(url);
    c.backoff = Duration::from_millis(5);
    c.timeout = Duration::from_secs(10);
    c.token = Some("secret".into());
    JudgeClient::new(c)
}

const FULL: [f64; 4] = [0.7, 0.8, 0.9, 1.0];

#[test]
fn judge_parse_fidelity_and_auth() {
    let server = MockJudgeServer::start(vec![MockReply::scores(FULL)]).unwrap();
    let c = client(server.url());
    let out = judge_case(std::path::Path::new("clip.png"), "abc", "a person", &c, DEFAULT_RUBRIC).unwrap();
    assert_eq!(out.scores.as_array(), FULL);
    assert_eq!(out.attempts, 1);
    let reqs = server.requests();
    assert_eq!(reqs[0].authorization.as_deref(), Some("Bearer secret"));
    let body: serde_json::Value = serde_json::from_str(&reqs[0].body).unwrap();
    assert_eq!(body["case_id"], "abc");
    assert!(body["rubric"].as_str().unwrap().contains("a person"));
}

#[test]
fn judge_rejects_out_of_range_without_retry() {
    let bad = r#"{"scores":{"prompt_alignment":0.7,"aesthetic":1.3,"motion_naturalness":0.9,"video_quality":1.0}}"#;
    let server = MockJudgeServer::start(vec![MockReply::Respond(200, bad.into()), MockReply::scores(FULL)]).unwrap();
    let err = client(server.url()).send(&serde_json::json!({})).unwrap_err();
    assert!(matches!(err, LynxError::JudgeResponse(ref m) if m.contains("aesthetic")), "{err}");
    assert_eq!(server.requests().len(), 1);
}

#[test]
fn judge_retries_transport_failures() {
    let server = MockJudgeServer::start(vec![MockReply::Hangup, MockReply::Respond(503, "{}".into()), MockReply::scores(FULL)]).unwrap();
    let out = client(server.url()).send(&serde_json::json!({})).unwrap();
    assert_eq!(out.attempts, 3);
    assert_eq!(out.scores.as_array(), FULL);

    let down = MockJudgeServer::start(vec![MockReply::Respond(500, "{}".into())]).unwrap();
    let err = client(down.url()).send(&serde_json::json!({})).unwrap_err();
    assert!(matches!(err, LynxError::JudgeTransport { attempts: 4, .. }), "{err}");
    assert_eq!(down.requests().len(), 4);

    let denied = MockJudgeServer::start(vec![MockReply::Respond(401, "no".into())]).unwrap();
    let err = client(denied.url()).send(&serde_json::json!({})).unwrap_err();
    assert!(matches!(err, LynxError::JudgeTransport { attempts: 1, .. }), "{err}");
}

#[test]
fn bounded_parallel_judging_keeps_order() {
    let server = MockJudgeServer::start(vec![MockReply::scores(FULL)]).unwrap();
    let c = client(server.url());
    let ids: Vec<String> = (0..7).map(|i| format!("case{i}")).collect();
    let video = std::path::PathBuf::from("v.png");
    let jobs: Vec<JudgeJob> = ids.iter().map(|id| JudgeJob { case_id: id, prompt: "p", video: &video }).collect();
    let results = judge_all(&jobs, &c, DEFAULT_RUBRIC);
    assert_eq!(results.len(), 7);
    assert!(results.iter().all(|r| r.as_ref().unwrap().scores.as_array() == FULL));
    assert_eq!(server.requests().len(), 7);
}

#[test]
fn benchmark_from_fixture_files() {
    let dir = tempfile::tempdir().unwrap();
    for s in ["bob", "alice", "carol"] {
        Portrait::from_seed(s.len() as u64).render(16, 16, 0).save_png(&dir.path().join(format!("{s}.png"))).unwrap();
    }
    let prompts = dir.path().join("prompts.txt");
    std::fs::write(&prompts, "walking\n\n  talking  \nsinging\neating\n").unwrap();
    let b = build_benchmark(dir.path(), &prompts).unwrap();
    assert_eq!(b.cases.len(), 12);
    assert_eq!(b.subjects[0].name, "alice");
    assert_eq!(b.prompts[1], "talking");
    assert_eq!(b.cases[4].id, case_id("bob", "walking"));
    assert_eq!(build_benchmark(dir.path(), &prompts).unwrap(), b);
    std::fs::write(&prompts, "\n").unwrap();
    assert!(build_benchmark(dir.path(), &prompts).is_err());
}

#[test]
fn identical_video_scores_one_under_every_embedder() {
    let dir = tempfile::tempdir().unwrap();
    let frame = Portrait::from_seed(3).render(48, 48, 0);
    let frames = vec![frame.clone(); 5];
    save_frames(dir.path(), &frames).unwrap();
    for e in embedder_registry(64) {
        let s = face_resemblance(&frames, &frame, &e, 4).unwrap();
        assert!((s.score - 1.0).abs() < 1e-12);
        assert_eq!(s.used, 2);
    }
}

#[test]
fn reference_row_fixture_parses() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/reference_scores.txt")).unwrap();
    let t = ScoreTable::parse(&text).unwrap();
    assert_eq!(t.columns, ["embedder_1", "embedder_2", "embedder_3"]);
    assert_eq!(t.value("reference", "embedder_1"), Some(0.779));
    assert_eq!(t.value("reference", "embedder_2"), Some(0.699));
    assert_eq!(t.value("reference", "embedder_3"), Some(0.781));
}

#[test]
fn aggregate_reports_mismatches() {
    let mut a = ResemblanceReport::new("stub-a");
    let mut b = ResemblanceReport::new("stub-b");
    let score = |s| lynx_core::eval_harness::FrameScore { score: s, used: 1, no_face: 0 };
    a.per_case.insert("x".into(), score(0.6));
    a.per_case.insert("y".into(), score(0.8));
    b.per_case.insert("x".into(), score(0.1));
    let err = aggregate("m", &[a.clone(), b.clone()], &[], false).unwrap_err();
    assert!(matches!(err, LynxError::Aggregate(_)));
    let s = aggregate("m", &[a, b], &[], true).unwrap();
    assert_eq!(s.cases, 1);
    assert_eq!(s.resemblance["stub-a"], 0.6);
}
