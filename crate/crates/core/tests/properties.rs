use std::collections::BTreeSet;

use proptest::prelude::*;

use shardstore_core::chunking::{chunk_stream, ChunkParams};
use shardstore_core::erasure::{decode_chunk, encode_chunk, CodingParams};
use shardstore_core::metadata::{sync_meta, ChunkRef, FileMeta, RefCountTable, RefDelta};
use shardstore_core::wire::{self, Envelope, ErrorCode, Message};
use shardstore_core::{ChunkId, ClusterId};

fn shuffle<T>(items: &mut [T], mut seed: u64) {
    for i in (1..items.len()).rev() {
        seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let j = ((seed >> 33) as usize) % (i + 1);
        items.swap(i, j);
    }
}

fn arb_chunk_ref() -> impl Strategy<Value = ChunkRef> {
    (proptest::array::uniform20(any::<u8>()), any::<u16>()).prop_map(|(bytes, cluster)| ChunkRef {
        chunk_id: ChunkId::from_bytes(bytes),
        cluster_id: ClusterId(cluster),
    })
}

fn arb_meta() -> impl Strategy<Value = FileMeta> {
    (
        "[a-z]{1,8}",
        "[a-zA-Z0-9._/-]{1,16}",
        any::<u64>(),
        any::<u64>(),
        proptest::collection::vec(arb_chunk_ref(), 0..6),
    )
        .prop_map(|(user_id, file_name, timestamp_ms, total_len, chunks)| FileMeta {
            user_id,
            file_name,
            timestamp_ms,
            total_len,
            chunks,
        })
}

fn arb_message() -> impl Strategy<Value = Message> {
    prop_oneof![
        arb_meta()
            .prop_flat_map(|meta| {
                let n = meta.chunks.len();
                (Just(meta), proptest::collection::vec(any::<u32>(), n..=n))
            })
            .prop_map(|(meta, chunk_lens)| Message::StoreMeta { meta, chunk_lens }),
        proptest::collection::vec(arb_chunk_ref(), 0..8)
            .prop_map(|refs| Message::MissingList { refs }),
        (proptest::array::uniform20(any::<u8>()), any::<u8>())
            .prop_map(|(b, index)| Message::GetPiece { chunk_id: ChunkId::from_bytes(b), index }),
        (proptest::collection::vec(any::<u8>(), 1..2048), any::<u16>()).prop_map(
            |(payload, cluster)| Message::StoreChunk {
                chunk_id: ChunkId::of(&payload),
                cluster_id: ClusterId(cluster),
                payload,
            }
        ),
        "[ -~]{0,64}".prop_map(|detail| Message::ErrorReply { code: ErrorCode::Internal, detail }),
        any::<u64>().prop_map(|target| Message::Cancel { target }),
        arb_meta().prop_map(|m| Message::MetaReply { meta: Some(m) }),
        proptest::collection::vec(arb_meta(), 0..4).prop_map(|metas| Message::SyncReply { metas }),
    ]
}

proptest! {
    #[test]
    fn chunks_reassemble_within_bounds(
        input in proptest::collection::vec(any::<u8>(), 0..50_000),
        min in 64usize..512,
        factor in 2usize..8,
        bits in 6u32..13,
    ) {
        let max = min * factor;
        let params = ChunkParams::new(min, max, bits, 48).unwrap();
        let chunks = chunk_stream(&input, &params);

        let mut joined = Vec::new();
        for c in &chunks {
            joined.extend_from_slice(c.payload());
        }
        prop_assert_eq!(&joined, &input);
        prop_assert_eq!(chunks.is_empty(), input.is_empty());

        if !chunks.is_empty() {
            for c in &chunks[..chunks.len() - 1] {
                prop_assert!(c.len() > min && c.len() <= max, "interior chunk of {}", c.len());
            }
            prop_assert!(chunks.last().unwrap().len() <= max);
        }
    }

    #[test]
    fn chunking_twice_gives_identical_cuts(
        input in proptest::collection::vec(any::<u8>(), 0..20_000),
    ) {
        let params = ChunkParams::default();
        prop_assert_eq!(chunk_stream(&input, &params), chunk_stream(&input, &params));
    }

    #[test]
    fn any_k_subset_decodes(
        payload in proptest::collection::vec(any::<u8>(), 1..4096),
        n in 1u8..=12,
        k_seed in any::<u8>(),
        subset_seed in any::<u64>(),
    ) {
        let k = k_seed % n + 1;
        let params = CodingParams::new(n, k).unwrap();
        let pieces = encode_chunk(&payload, params).unwrap();
        prop_assert_eq!(pieces.len(), n as usize);

        let mut order: Vec<usize> = (0..n as usize).collect();
        shuffle(&mut order, subset_seed);
        let subset: Vec<_> = order[..k as usize].iter().map(|&i| pieces[i].clone()).collect();
        prop_assert_eq!(decode_chunk(&subset, params).unwrap(), payload);
    }

    #[test]
    fn messages_round_trip(msg in arb_message(), request_id in any::<u64>()) {
        let env = Envelope { request_id, message: msg };
        let frame = wire::encode(&env).unwrap();
        let (back, used) = wire::decode(&frame).unwrap();
        prop_assert_eq!(used, frame.len());
        prop_assert_eq!(back, env);
    }

    #[test]
    fn garbage_bytes_never_panic_the_decoder(
        bytes in proptest::collection::vec(any::<u8>(), 0..512),
    ) {
        let _ = wire::decode(&bytes);
    }

    #[test]
    fn corrupted_frames_never_panic_the_decoder(
        msg in arb_message(),
        pos_seed in any::<usize>(),
        bit in 0u32..8,
    ) {
        let env = Envelope { request_id: 7, message: msg };
        let mut frame = wire::encode(&env).unwrap();
        let pos = pos_seed % frame.len();
        frame[pos] ^= 1u8 << bit;
        let _ = wire::decode(&frame);
    }

    #[test]
    fn newer_timestamp_wins_regardless_of_direction(
        ts_a in any::<u64>(),
        ts_b in any::<u64>(),
        chunks_a in proptest::collection::vec(arb_chunk_ref(), 0..4),
        chunks_b in proptest::collection::vec(arb_chunk_ref(), 0..4),
    ) {
        prop_assume!(ts_a != ts_b);
        let a = FileMeta {
            user_id: "u".into(),
            file_name: "f".into(),
            timestamp_ms: ts_a,
            total_len: 1,
            chunks: chunks_a,
        };
        let b = FileMeta { timestamp_ms: ts_b, chunks: chunks_b, ..a.clone() };

        let one_way = sync_meta(Some(&a), Some(&b)).unwrap();
        let other_way = sync_meta(Some(&b), Some(&a)).unwrap();
        prop_assert_eq!(one_way, other_way);
        prop_assert_eq!(one_way.timestamp_ms, ts_a.max(ts_b));
    }

    #[test]
    fn refcounts_drain_to_empty_in_any_order(
        metas in proptest::collection::vec(arb_meta(), 1..10),
        order_seed in any::<u64>(),
    ) {
        let mut table = RefCountTable::new();
        for m in &metas {
            table.apply(m, RefDelta::Add).unwrap();
        }

        let mut order: Vec<usize> = (0..metas.len()).collect();
        shuffle(&mut order, order_seed);
        let mut dead = BTreeSet::new();
        for i in order {
            for r in table.apply(&metas[i], RefDelta::Remove).unwrap() {
                dead.insert(r);
            }
        }

        prop_assert!(table.is_empty());
        let all: BTreeSet<ChunkRef> =
            metas.iter().flat_map(|m| m.chunks.iter().copied()).collect();
        prop_assert_eq!(dead, all);
    }
}
