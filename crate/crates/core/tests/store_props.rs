use proptest::prelude::*;

use matkv_core::kvstore::{decode_cache, encode_cache, ChunkId, DecodeError, KvStore, HEADER_LEN};
use matkv_core::model::KvCache;

const HASH: u64 = 0x5EED;

fn cache_strategy() -> impl Strategy<Value = KvCache> {
    (1usize..=3, 1usize..=3, 1usize..=6, 0usize..=6).prop_flat_map(|(layers, heads, dim, tokens)| {
        let len = heads * dim * tokens;
        let finite = any::<f32>().prop_filter("finite", |x| x.is_finite());
        (
            prop::collection::vec(prop::collection::vec(finite.clone(), len), layers),
            prop::collection::vec(prop::collection::vec(finite, len), layers),
        )
            .prop_map(move |(k, v)| KvCache::from_layers(HASH, heads, dim, 0, k, v).unwrap())
    })
}

fn bits(c: &KvCache) -> Vec<u32> {
    (0..c.n_layers())
        .flat_map(|l| c.layer_keys(l).iter().chain(c.layer_values(l)).map(|x| x.to_bits()))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn encode_decode_roundtrip(c in cache_strategy()) {
        let bytes = encode_cache(&c).unwrap();
        let (header, back) = decode_cache(&bytes).unwrap();
        prop_assert_eq!(bytes.len() as u64, HEADER_LEN as u64 + header.payload_len());
        prop_assert_eq!(bits(&back), bits(&c));
        prop_assert_eq!(back.n_tokens(), c.n_tokens());
    }

    #[test]
    fn any_single_bit_flip_is_a_checksum_error(c in cache_strategy(), pick in any::<prop::sample::Index>()) {
        let mut bytes = encode_cache(&c).unwrap();
        let bit = pick.index(bytes.len() * 8);
        bytes[bit / 8] ^= 1 << (bit % 8);
        let err = decode_cache(&bytes).unwrap_err();
        prop_assert!(matches!(err, DecodeError::Checksum { .. }), "bit {}: {}", bit, err);
    }

    #[test]
    fn failed_store_leaves_previous_version(old in cache_strategy(), new in cache_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let store = KvStore::open(dir.path(), HASH).unwrap();
        let id = ChunkId::new("x").unwrap();

        store.set_fail_before_rename(true);
        prop_assert!(store.store_kv(&id, &old).is_err());
        prop_assert!(!store.contains(&id));
        prop_assert!(store.load_kv(&id).unwrap_err().is_not_found());

        store.set_fail_before_rename(false);
        store.store_kv(&id, &old).unwrap();
        store.set_fail_before_rename(true);
        prop_assert!(store.store_kv(&id, &new).is_err());
        prop_assert_eq!(bits(&store.load_kv(&id).unwrap()), bits(&old));
        // no temp files linger next to the real one
        let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        prop_assert_eq!(names.len(), 1, "{:?}", names);
    }

    #[test]
    fn load_many_independent_of_parallelism(
        caches in prop::collection::vec(cache_strategy(), 1..8),
        order in any::<prop::sample::Index>(),
        parallelism in 1usize..6,
    ) {
        let dir = tempfile::tempdir().unwrap();
        let store = KvStore::open(dir.path(), HASH).unwrap();
        let ids: Vec<ChunkId> = (0..caches.len()).map(|i| ChunkId::new(format!("c{i}")).unwrap()).collect();
        for (id, c) in ids.iter().zip(&caches) {
            store.store_kv(id, c).unwrap();
        }
        let mut request = ids.clone();
        request.rotate_left(order.index(ids.len()));
        let serial = store.load_many(&request, 1).unwrap();
        let parallel = store.load_many(&request, parallelism).unwrap();
        for (a, b) in serial.caches.iter().zip(&parallel.caches) {
            prop_assert_eq!(bits(a), bits(b));
        }
        for (id, got) in request.iter().zip(&parallel.caches) {
            let i: usize = id.as_str()[1..].parse().unwrap();
            prop_assert_eq!(bits(got), bits(&caches[i]));
        }
    }
}
