use cilk_core::checkpoint::{load_engine, save_engine};
use cilk_core::kb::{Fact, KnowledgeBase, Split};
use cilk_core::model::{Direction, ModelConfig};
use cilk_core::session::{session_rng, Engine, Event, InitConfig, SessionConfig, SessionOutcome};
use cilk_core::sim::{build_world, SimWorld, SimulatedUser, WorldBuildConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn synthetic(n_rel: usize, per_rel: usize, n_ent: usize, seed: u64) -> KnowledgeBase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kb = KnowledgeBase::new();
    for r in 0..n_rel {
        let mut added = 0;
        while added < per_rel {
            let (h, t) = (rng.random_range(0..n_ent), rng.random_range(0..n_ent));
            let f = Fact::new(format!("e{h}"), format!("r{r:02}"), format!("e{t}"));
            if kb.add_fact(&f, Split::Train).unwrap() == cilk_core::kb::Insertion::Added {
                added += 1;
            }
        }
    }
    kb
}

fn world() -> SimWorld {
    build_world(&synthetic(9, 80, 150, 1), &WorldBuildConfig::wordnet(5)).unwrap()
}

fn engine(world: &SimWorld) -> Engine {
    let init = InitConfig {
        model: ModelConfig {
            dim: 12,
            learning_rate: 0.01,
            ..ModelConfig::default()
        },
        epochs: 5,
        seed: 8,
    };
    Engine::initial_training(world.kb_base.clone(), init, SessionConfig::default())
}

fn answer(engine: &mut Engine, world: &SimWorld, idx: usize) -> SessionOutcome {
    let q = world.queries[idx].query.clone();
    let mut user = SimulatedUser::new(world, q.clone(), session_rng(77, idx as u64));
    engine.process_query(q, &mut user).unwrap()
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_stream() {
    let w = world();
    let n = 30.min(w.queries.len());
    let mut straight = engine(&w);
    let all: Vec<SessionOutcome> = (0..n).map(|i| answer(&mut straight, &w, i)).collect();

    let mut first = engine(&w);
    let mut resumed: Vec<SessionOutcome> = (0..n / 2).map(|i| answer(&mut first, &w, i)).collect();
    let dir = tempfile::tempdir().unwrap();
    save_engine(dir.path(), &first).unwrap();
    let mut second = load_engine(dir.path()).unwrap();
    resumed.extend((n / 2..n).map(|i| answer(&mut second, &w, i)));

    for (a, b) in all.iter().zip(&resumed) {
        assert_eq!(a.transcript, b.transcript, "query {}", a.index);
    }
    assert_eq!(straight.model.entity_table(), second.model.entity_table());
    assert_eq!(straight.kb.triples(), second.kb.triples());
}

#[test]
fn stream_keeps_kb_and_model_consistent() {
    let w = world();
    let mut e = engine(&w);
    for i in 0..w.queries.len().min(40) {
        let wq = &w.queries[i];
        let open = !(e.kb.is_entity_known(&wq.query.entity) && e.kb.is_relation_known(&wq.query.relation));
        let out = answer(&mut e, &w, i);
        for a in &wq.answers {
            assert!(!e.kb.contains_fact(&wq.query.completion(a)), "completion leaked for {}", wq.query);
        }
        let asked = out
            .transcript
            .iter()
            .any(|ev| matches!(ev, Event::ClueRequest { .. } | Event::EntityFactRequest { .. }));
        assert_eq!(asked, out.asked_clue || out.asked_fact);
        assert_eq!(out.open_world, open);
        assert_eq!(e.model.num_entities(), e.kb.num_entities());
        assert_eq!(e.model.num_relations(), e.kb.num_relations());
        assert!(e.model.all_finite());
    }
    assert_eq!(e.sessions(), w.queries.len().min(40) as u64);
}

#[test]
fn saved_worlds_reload_identically() {
    let w = world();
    let dir = tempfile::tempdir().unwrap();
    w.save(dir.path()).unwrap();
    let back = SimWorld::load(dir.path()).unwrap();
    assert_eq!(back.queries, w.queries);
    assert_eq!(back.kb_base.triples(), w.kb_base.triples());
    assert_eq!(back.kb_user.triples(), w.kb_user.triples());
    assert_eq!(back.test_relations, w.test_relations);
    assert_eq!(back.unknown_relations, w.unknown_relations);
}

#[test]
fn parallel_and_sequential_scoring_agree() {
    let w = world();
    let e = engine(&w);
    for a in 0..e.kb.num_entities().min(25) as u32 {
        for r in 0..e.kb.num_relations() as u32 {
            for dir in [Direction::Head, Direction::Tail] {
                let (a, r) = (cilk_core::kb::EntityId(a), cilk_core::kb::RelationId(r));
                assert_eq!(e.model.score_all(dir, a, r), e.model.score_all_seq(dir, a, r));
            }
        }
    }
}
