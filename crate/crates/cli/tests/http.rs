use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use cilk_cli::config::BusyPolicy;
use cilk_cli::server::{router, Service};
use cilk_core::checkpoint::{load_engine, save_engine};
use cilk_core::kb::{Fact, KnowledgeBase, Split};
use cilk_core::model::ModelConfig;
use cilk_core::session::{session_rng, Engine, InitConfig, Query, SessionConfig};
use cilk_core::sim::{SimWorld, SimulatedUser, WorldBuildConfig, WorldQuery};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn kb_of(facts: &[(&str, &str, &str)]) -> KnowledgeBase {
    let mut kb = KnowledgeBase::new();
    for &(h, r, t) in facts {
        kb.add_fact(&Fact::new(h, r, t), Split::Train).unwrap();
    }
    kb
}

/// The Boston / LocatedInCountry dialogue: the relation is unknown to the
/// engine and the user holds the missing facts.
fn boston_world() -> SimWorld {
    SimWorld {
        config: WorldBuildConfig::wordnet(0),
        kb_base: kb_of(&[
            ("Paris", "CapitalOf", "France"),
            ("Harvard_University", "IsA", "University"),
            ("London", "CapitalOf", "UK"),
            ("Paris", "IsA", "City"),
            ("London", "IsA", "City"),
        ]),
        kb_user: kb_of(&[
            ("London", "LocatedInCountry", "UK"),
            ("Harvard_University", "UniversityLocatedIn", "Boston"),
            ("Boston", "LocatedInCountry", "USA"),
        ]),
        queries: vec![WorldQuery {
            query: Query::tail("Boston", "LocatedInCountry"),
            answers: vec!["USA".into()],
            e_known: false,
            r_known: false,
        }],
        test_relations: vec!["LocatedInCountry".into()],
        unknown_relations: vec!["LocatedInCountry".into()],
    }
}

fn engine_for(world: &SimWorld) -> Engine {
    let init = InitConfig {
        model: ModelConfig {
            dim: 8,
            ..ModelConfig::default()
        },
        epochs: 5,
        seed: 9,
    };
    Engine::initial_training(world.kb_base.clone(), init, SessionConfig::default())
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

fn boston() -> Value {
    json!({"v": 1, "query": {"direction": "tail", "entity": "Boston", "relation": "LocatedInCountry"}})
}

fn triples(facts: &[Fact]) -> Value {
    let ts: Vec<Value> = facts
        .iter()
        .map(|f| json!({"head": f.head, "relation": f.relation, "tail": f.tail}))
        .collect();
    json!({"v": 1, "triples": ts})
}

#[tokio::test]
async fn wire_transcript_matches_in_process_session() {
    let world = boston_world();
    let engine = engine_for(&world);
    let query = world.queries[0].query.clone();

    let mut local = engine.clone();
    let mut user = SimulatedUser::new(&world, query.clone(), session_rng(5, 0));
    let outcome = local.process_query(query.clone(), &mut user).unwrap();

    let app = router(Service::new(engine, BusyPolicy::Reject, None));
    let (status, body) = call(&app, Method::POST, "/sessions", Some(boston())).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(body["v"], 1);
    let id = body["session_id"].as_u64().unwrap();
    let mut state = body["state"].clone();
    let mut rng = session_rng(5, 0);
    let mut turns = Vec::new();
    while state["kind"] != "done" {
        let max_n = state["max_n"].as_u64().unwrap() as usize;
        let reply = match state["kind"].as_str().unwrap() {
            "need_clue" => world.answer_clue_request(state["relation"].as_str().unwrap(), max_n, &query, &mut rng),
            "need_entity_fact" => world.answer_entity_fact_request(state["entity"].as_str().unwrap(), max_n, &query, &mut rng),
            other => panic!("unexpected state {other}"),
        };
        turns.push(state["kind"].as_str().unwrap().to_owned());
        let (status, body) = call(&app, Method::POST, &format!("/sessions/{id}/facts"), Some(triples(&reply))).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        state = body["state"].clone();
    }
    assert_eq!(turns, ["need_clue", "need_entity_fact"]);
    let (status, body) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["transcript"], serde_json::to_value(&outcome.transcript).unwrap());
    assert_eq!(body["state"]["verdict"], serde_json::to_value(&outcome.verdict).unwrap());
    assert_eq!(body["query"], serde_json::to_value(&query).unwrap());
}

#[tokio::test]
async fn reject_policy_answers_409_while_busy() {
    let world = boston_world();
    let app = router(Service::new(engine_for(&world), BusyPolicy::Reject, None));
    let (status, first) = call(&app, Method::POST, "/sessions", Some(boston())).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(first["state"]["kind"], "need_clue");
    let (status, body) = call(&app, Method::POST, "/sessions", Some(boston())).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"]["code"], "busy");
    let (_, m) = call(&app, Method::GET, "/metrics", None).await;
    assert_eq!(m["active_session"], true);

    let id = first["session_id"].as_u64().unwrap();
    let (status, body) = call(&app, Method::DELETE, &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["state"]["kind"], "aborted");
    let (status, _) = call(&app, Method::POST, "/sessions", Some(boston())).await;
    assert_eq!(status, StatusCode::CREATED);
    let (_, m) = call(&app, Method::GET, "/metrics", None).await;
    assert_eq!(m["sessions_started"], 2);
    assert_eq!(m["sessions_aborted"], 1);
}

#[tokio::test]
async fn queue_policy_waits_for_the_active_session() {
    let world = boston_world();
    let app = router(Service::new(engine_for(&world), BusyPolicy::Queue, None));
    let (_, first) = call(&app, Method::POST, "/sessions", Some(boston())).await;
    let id = first["session_id"].as_u64().unwrap();
    let waiting = {
        let app = app.clone();
        tokio::spawn(async move { call(&app, Method::POST, "/sessions", Some(boston())).await })
    };
    tokio::time::sleep(Duration::from_millis(100)).await;
    assert!(!waiting.is_finished());
    call(&app, Method::DELETE, &format!("/sessions/{id}"), None).await;
    let (status, body) = tokio::time::timeout(Duration::from_secs(10), waiting).await.unwrap().unwrap();
    assert_eq!(status, StatusCode::CREATED);
    assert_ne!(body["session_id"].as_u64().unwrap(), id);
}

#[tokio::test]
async fn request_errors_use_the_error_envelope() {
    let world = boston_world();
    let app = router(Service::new(engine_for(&world), BusyPolicy::Reject, None));
    let (status, body) = call(&app, Method::GET, "/sessions/99", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["v"], 1);
    assert_eq!(body["error"]["code"], "not_found");

    let mut bad = boston();
    bad["v"] = json!(2);
    let (status, body) = call(&app, Method::POST, "/sessions", Some(bad)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"]["code"], "bad_request");

    let (_, created) = call(&app, Method::POST, "/sessions", Some(boston())).await;
    let id = created["session_id"].as_u64().unwrap();
    let off_topic = triples(&[Fact::new("Paris", "CapitalOf", "France")]);
    let (status, body) = call(&app, Method::POST, &format!("/sessions/{id}/facts"), Some(off_topic)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"]["code"], "invalid_facts");
    // The session still waits for a valid reply.
    let (_, s) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(s["state"]["kind"], "need_clue");

    call(&app, Method::POST, &format!("/sessions/{id}/facts"), Some(triples(&[]))).await;
    let (_, done) = call(&app, Method::POST, &format!("/sessions/{id}/facts"), Some(triples(&[]))).await;
    assert_eq!(done["state"]["kind"], "done");
    assert_eq!(done["state"]["verdict"]["kind"], "unanswerable");
    let (status, body) = call(&app, Method::POST, &format!("/sessions/{id}/facts"), Some(triples(&[]))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"]["code"], "finished");
}

#[tokio::test]
async fn read_only_endpoints_reflect_the_engine() {
    let world = boston_world();
    let app = router(Service::new(engine_for(&world), BusyPolicy::Reject, None));
    let (status, h) = call(&app, Method::GET, "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(h, json!({"v": 1, "status": "ok"}));
    let (_, stats) = call(&app, Method::GET, "/kb/stats", None).await;
    assert_eq!(stats["triples"], 5);
    assert_eq!(stats["relations"], 2);
    let (_, buffers) = call(&app, Method::GET, "/buffers", None).await;
    assert_eq!(buffers["v"], 1);
    assert!(buffers.get("performance").is_some() && buffers.get("thresholds").is_some());

    let (_, created) = call(&app, Method::POST, "/sessions", Some(boston())).await;
    let id = created["session_id"].as_u64().unwrap();
    let clue = triples(&[Fact::new("London", "LocatedInCountry", "UK")]);
    call(&app, Method::POST, &format!("/sessions/{id}/facts"), Some(clue)).await;
    let (_, stats) = call(&app, Method::GET, "/kb/stats", None).await;
    assert_eq!(stats["triples"], 6);
    assert_eq!(stats["relations"], 3);
    let (_, m) = call(&app, Method::GET, "/metrics", None).await;
    assert_eq!(m["facts_accepted"], 1);
    assert_eq!(m["sessions_completed"], 0);
}

#[tokio::test]
async fn accepted_facts_survive_a_restart() {
    let world = boston_world();
    let dir = tempfile::tempdir().unwrap();
    save_engine(dir.path(), &engine_for(&world)).unwrap();
    let svc: Arc<Service> = Service::new(load_engine(dir.path()).unwrap(), BusyPolicy::Reject, Some(dir.path().to_owned()));
    let app = router(svc);
    let (_, created) = call(&app, Method::POST, "/sessions", Some(boston())).await;
    let id = created["session_id"].as_u64().unwrap();
    let clue = triples(&[Fact::new("London", "LocatedInCountry", "UK")]);
    call(&app, Method::POST, &format!("/sessions/{id}/facts"), Some(clue)).await;

    // Mid-session: the fact is on disk ahead of the model.
    let mid = load_engine(dir.path()).unwrap();
    assert!(mid.kb.contains_fact(&Fact::new("London", "LocatedInCountry", "UK")));
    assert_eq!(mid.sessions(), 0);

    let fact = triples(&[Fact::new("Harvard_University", "UniversityLocatedIn", "Boston")]);
    let (_, done) = call(&app, Method::POST, &format!("/sessions/{id}/facts"), Some(fact)).await;
    assert_eq!(done["state"]["kind"], "done");
    let after = load_engine(dir.path()).unwrap();
    assert_eq!(after.sessions(), 1);
    assert_eq!(after.kb.len(), 7);
    assert!(after.kb.is_entity_known("Boston"));
    assert_eq!(after.model.num_entities(), after.kb.num_entities());

    let app = router(Service::new(after, BusyPolicy::Reject, Some(dir.path().to_owned())));
    let (_, stats) = call(&app, Method::GET, "/kb/stats", None).await;
    assert_eq!(stats["triples"], 7);
    let (status, created) = call(&app, Method::POST, "/sessions", Some(boston())).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(created["session_id"], 1);
}
