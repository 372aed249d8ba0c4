use std::sync::Arc;

use proptest::prelude::*;

use matkv_core::kvstore::{ChunkId, KvStore};
use matkv_core::model::{build_model, ModelConfig};
use matkv_core::pipeline::{predict_makespan, Engine, EngineOptions, Mode, Request};
use matkv_core::policy::{AccessStats, AdmissionPolicy, EvictionPolicy};
use matkv_core::retrieval::{cosine, embed, VectorIndex};

fn engine(dir: &std::path::Path, admission: AdmissionPolicy, eviction: EvictionPolicy) -> Engine {
    let model = Arc::new(
        build_model(ModelConfig { n_layers: 2, n_heads: 2, head_dim: 8, vocab_size: 256, ..ModelConfig::default() })
            .unwrap(),
    );
    let store = KvStore::open(dir.join("store"), model.config_hash()).unwrap();
    let index = VectorIndex::new(32, 64).unwrap();
    Engine::new(model, store, index, admission, eviction, EngineOptions::default()).unwrap()
}

fn docs() -> impl Strategy<Value = Vec<Vec<u32>>> {
    prop::collection::vec(prop::collection::vec(0u32..256, 1..=40), 1..=8)
}

fn stage_times(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..10.0, (0u8..6).prop_map(f64::from)], n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn embeddings_are_deterministic_unit_vectors(tokens in prop::collection::vec(0u32..1000, 1..50), dim in 1usize..96) {
        let a = embed(&tokens, dim).unwrap();
        prop_assert_eq!(&a, &embed(&tokens, dim).unwrap());
        let norm: f64 = a.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-5, "norm {}", norm);
        let mut rev = tokens.clone();
        rev.reverse();
        prop_assert_eq!(a, embed(&rev, dim).unwrap());
    }

    #[test]
    fn search_equals_full_scan(corpus in docs(), query in prop::collection::vec(0u32..256, 1..10), k in 1usize..10) {
        let dir = tempfile::tempdir().unwrap();
        let e = engine(dir.path(), AdmissionPolicy::lazy(), EvictionPolicy::default());
        for (i, d) in corpus.iter().enumerate() {
            e.ingest(&format!("d{i}"), d).unwrap();
        }
        let hits = e.search(&query, k).unwrap();

        let q = embed(&query, 32).unwrap();
        let mut scan: Vec<(f64, ChunkId)> = e
            .index()
            .records()
            .into_iter()
            .map(|r| (cosine(&q, &embed(&r.tokens, 32).unwrap()), r.id))
            .collect();
        scan.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        scan.truncate(k);
        prop_assert_eq!(hits.ids, scan.iter().map(|s| s.1.clone()).collect::<Vec<_>>());
        prop_assert_eq!(hits.scores, scan.iter().map(|s| s.0).collect::<Vec<_>>());
    }

    #[test]
    fn eager_index_matches_store(corpus in docs()) {
        let dir = tempfile::tempdir().unwrap();
        let e = engine(dir.path(), AdmissionPolicy::eager(), EvictionPolicy::default());
        for (i, d) in corpus.iter().enumerate() {
            e.ingest(&format!("d{i}"), d).unwrap();
        }
        for r in e.index().records() {
            prop_assert!(r.materialized);
            prop_assert!(e.store().load_kv(&r.id).is_ok());
        }
        prop_assert_eq!(e.store().list().unwrap(), e.index().ids());
    }

    #[test]
    fn eviction_respects_capacity_and_flags(corpus in docs(), frac in 0.0f64..1.0) {
        let dir = tempfile::tempdir().unwrap();
        let full = {
            let e = engine(&dir.path().join("full"), AdmissionPolicy::eager(), EvictionPolicy::default());
            for (i, d) in corpus.iter().enumerate() {
                e.ingest(&format!("d{i}"), d).unwrap();
            }
            e.store().stats().unwrap().bytes
        };
        let cap = ((full as f64 * frac) as u64).max(1);
        let e = engine(&dir.path().join("capped"), AdmissionPolicy::eager(), EvictionPolicy::lru(cap));
        for (i, d) in corpus.iter().enumerate() {
            e.ingest(&format!("d{i}"), d).unwrap();
        }
        let stats = e.store().stats().unwrap();
        prop_assert!(stats.bytes <= cap || stats.files == 0);
        for r in e.index().records() {
            prop_assert_eq!(r.materialized, e.store().contains(&r.id), "{}", r.id);
        }
    }

    #[test]
    fn lru_victim_is_least_recent(accesses in prop::collection::vec((0usize..6, 0u8..3), 0..30), extra in 0usize..3) {
        let ids: Vec<ChunkId> = (0..6 + extra).map(|i| ChunkId::new(format!("c{i}")).unwrap()).collect();
        let mut stats = AccessStats::new();
        let mut now = 0.0;
        for (i, dt) in &accesses {
            now += f64::from(*dt);
            stats.record(&ids[*i], now).unwrap();
        }
        let got = EvictionPolicy::lru(1).victim(&stats, ids.iter()).unwrap();
        // brute force: never-accessed first, then oldest last access, then lowest id
        let expected = ids
            .iter()
            .min_by(|a, b| {
                let key = |id: &ChunkId| stats.get(id).map(|r| r.last_access_s);
                match (key(a), key(b)) {
                    (None, None) => a.cmp(b),
                    (None, Some(_)) => std::cmp::Ordering::Less,
                    (Some(_), None) => std::cmp::Ordering::Greater,
                    (Some(x), Some(y)) => x.total_cmp(&y).then_with(|| a.cmp(b)),
                }
            })
            .unwrap();
        prop_assert_eq!(&got, expected);
    }

    #[test]
    fn cold_start_is_transparent(corpus in docs(), query in prop::collection::vec(0u32..256, 1..10), k in 1usize..4) {
        let dir = tempfile::tempdir().unwrap();
        let e = engine(dir.path(), AdmissionPolicy::lazy(), EvictionPolicy::default());
        for (i, d) in corpus.iter().enumerate() {
            e.ingest(&format!("d{i}"), d).unwrap();
        }
        let req = e.request_for(&query, k, 5).unwrap();
        let cold = e.run_matkv(&req).unwrap();
        let warm = e.run_matkv(&req).unwrap();
        prop_assert_eq!(cold.generated, warm.generated);
    }

    #[test]
    fn schedules_agree_on_outputs(corpus in docs(), queries in prop::collection::vec(prop::collection::vec(0u32..256, 1..8), 1..10), batch in 1usize..4) {
        let dir = tempfile::tempdir().unwrap();
        let e = engine(dir.path(), AdmissionPolicy::eager(), EvictionPolicy::default());
        for (i, d) in corpus.iter().enumerate() {
            e.ingest(&format!("d{i}"), d).unwrap();
        }
        let requests: Vec<Request> = queries.iter().map(|q| e.request_for(q, 2, 3).unwrap()).collect();
        let batches: Vec<Vec<Request>> = requests.chunks(batch).map(|c| c.to_vec()).collect();
        let ser = e.run_batches(Mode::MatKv, &batches, None).unwrap();
        let ovl = e.run_batches(Mode::MatKvOverlap, &batches, None).unwrap();
        prop_assert_eq!(ser.generated(), ovl.generated());
    }

    #[test]
    fn makespan_bounds((a, b) in (1usize..16).prop_flat_map(|n| (stage_times(n), stage_times(n)))) {
        let ser = predict_makespan(&a, &b, false).unwrap();
        let ovl = predict_makespan(&a, &b, true).unwrap();
        let sum_a = a.iter().fold(0.0, |t, x| t + x);
        let sum_b = b.iter().fold(0.0, |t, x| t + x);
        let fill = b.iter().fold(a[0], |t, x| t + x);
        prop_assert!(ovl <= ser);
        prop_assert!(ovl >= sum_a.max(sum_b));
        prop_assert!(ovl >= fill, "{} < a0 + sum(b) = {}", ovl, fill);
    }
}
