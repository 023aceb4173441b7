mod common;

use hybridrag::gateway::MockGateway;
use hybridrag::graph_store::{GraphError, GraphStore};
use hybridrag::unify::unify;
use hybridrag::vector_index::{IndexError, VectorIndex};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn vector_search_matches_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let idx = common::random_index(&mut rng, 300, 16);
    for k in [1, 5, 10, 50, 400] {
        for _ in 0..20 {
            let qv = common::random_unit(&mut rng, 16);
            let got: Vec<String> = idx.search(&qv, k).unwrap().into_iter().map(|h| h.chunk_id).collect();
            assert_eq!(got, common::oracle_search(&idx, &qv, k));
        }
    }
}

#[test]
fn duplicate_vectors_tie_break_by_id() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let v = common::random_unit(&mut rng, 8);
    let mut idx = VectorIndex::new(8);
    for id in ["b", "c", "a"] {
        idx.upsert(id, v.clone()).unwrap();
    }
    let ids: Vec<String> = idx.search(&v, 3).unwrap().into_iter().map(|h| h.chunk_id).collect();
    assert_eq!(ids, ["a", "b", "c"]);
}

#[test]
fn unify_matches_oracle_on_random_instances() {
    let gw = MockGateway::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut deduped = 0;
    for i in 0..100 {
        let inst = common::random_unify_instance(&mut rng, &gw);
        let pool = inst.vector_hits.len() + inst.graph_texts.len();
        let want = common::oracle_unify(
            &inst.qv,
            &inst.vector_hits,
            &inst.graph_texts,
            inst.cfg.k,
            inst.cfg.sim_threshold,
            &gw,
        );
        let got = unify(&inst.qv, inst.vector_hits, &inst.graph_texts, &inst.cfg, &gw).unwrap();
        let got: Vec<_> = got.items.into_iter().map(|c| (c.text, c.origin, c.score)).collect();
        if got.len() < inst.cfg.k.min(pool) {
            deduped += 1;
        }
        assert_eq!(got, want, "instance {i}");
    }
    assert!(deduped > 10, "only {deduped} instances exercised dedup");
}

#[test]
fn persistence_round_trips_and_rejects_corruption() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dir = tempfile::tempdir().unwrap();
    for i in 0..5 {
        let n = rng.gen_range(0..60);
        let idx = common::random_index(&mut rng, n, 12);
        let path = dir.path().join(format!("v{i}.bin"));
        idx.save(&path).unwrap();
        let back = VectorIndex::load(&path).unwrap();
        assert_eq!(back, idx);
        assert_eq!(back.to_bytes(), idx.to_bytes());

        let g = common::random_graph(&mut rng);
        let gpath = dir.path().join(format!("g{i}.jsonl"));
        g.save(&gpath).unwrap();
        let gback = GraphStore::load(&gpath).unwrap();
        assert_eq!(gback, g);
        assert_eq!(gback.to_jsonl(), g.to_jsonl());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let bytes = common::random_index(&mut rng, 10, 4).to_bytes();
    for pos in [0, 5, 12, bytes.len() / 2, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x40;
        assert!(matches!(VectorIndex::from_bytes(&bad), Err(IndexError::ChecksumMismatch)), "{pos}");
    }
    assert!(matches!(VectorIndex::from_bytes(&bytes[..bytes.len() - 3]), Err(IndexError::ChecksumMismatch)));

    let text = common::random_graph(&mut rng).to_jsonl();
    let tampered = text.replacen("related_to", "related_tx", 1).replacen("born_in", "born_ix", 1);
    assert_ne!(tampered, text);
    assert!(matches!(GraphStore::from_jsonl(&tampered), Err(GraphError::ChecksumMismatch)));
    let truncated = &text[..text.len() - 2];
    assert!(matches!(GraphStore::from_jsonl(truncated), Err(GraphError::ChecksumMismatch)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn search_returns_min_k_n_sorted(seed in any::<u64>(), n in 0usize..80, k in 0usize..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = common::random_index(&mut rng, n, 6);
        let qv = common::random_unit(&mut rng, 6);
        let hits = idx.search(&qv, k).unwrap();
        prop_assert_eq!(hits.len(), k.min(n));
        prop_assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn unify_never_exceeds_k_and_has_no_duplicates(seed in any::<u64>()) {
        let gw = MockGateway::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = common::random_unify_instance(&mut rng, &gw);
        let (k, thr) = (inst.cfg.k, inst.cfg.sim_threshold);
        let ctx = unify(&inst.qv, inst.vector_hits, &inst.graph_texts, &inst.cfg, &gw).unwrap();
        prop_assert!(ctx.items.len() <= k);
        for (i, a) in ctx.items.iter().enumerate() {
            for b in &ctx.items[i + 1..] {
                prop_assert!(a.vector.cosine(&b.vector) < thr);
                prop_assert!(a.score >= b.score);
            }
        }
    }
}
