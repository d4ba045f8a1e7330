use ids_core::ledger::{
    sign_request, verify_blocks, verify_request, Block, ChainFault, ChainStatus, DeviceRegistry, Ledger, LogicalClock,
    NonceSet, RequestVerdict, SignedRequest, VerdictCode, BLOCK_BYTES, ZERO_HASH,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

struct Fixture {
    registry: DeviceRegistry,
    rng: ChaCha8Rng,
    clock: LogicalClock,
}

fn fixture() -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut registry = DeviceRegistry::new();
    registry.enroll("monitor-a", &mut rng).unwrap();
    registry.enroll("monitor-b", &mut rng).unwrap();
    Fixture {
        registry,
        rng,
        clock: LogicalClock::default(),
    }
}

fn chain(n: usize) -> Ledger {
    let mut f = fixture();
    let mut ledger = Ledger::new([5; 32]);
    for i in 0..n {
        let req = sign_request(&f.registry, "monitor-a", &[i as u8; 3], &mut f.rng, &mut f.clock).unwrap();
        let verdict = if i % 3 == 0 { VerdictCode::CLASSIFIED_ATTACK } else { VerdictCode::ACCEPTED_CLASSIFIER };
        ledger.append_block(&req, verdict, &mut f.clock).unwrap();
    }
    ledger
}

#[test]
fn identical_payloads_sign_differently() {
    let mut f = fixture();
    let a = sign_request(&f.registry, "monitor-a", b"same", &mut f.rng, &mut f.clock).unwrap();
    let b = sign_request(&f.registry, "monitor-a", b"same", &mut f.rng, &mut f.clock).unwrap();
    assert_ne!(a.nonce, b.nonce);
    assert_ne!(a.tag, b.tag);
    assert_ne!(a.canonical_bytes(), b.canonical_bytes());
}

#[test]
fn every_payload_byte_flip_breaks_the_tag() {
    let mut f = fixture();
    let req = sign_request(&f.registry, "monitor-b", b"heart-rate:72", &mut f.rng, &mut f.clock).unwrap();
    for i in 0..req.payload.len() {
        for bit in 0..8 {
            let mut t = req.clone();
            t.payload[i] ^= 1 << bit;
            assert_eq!(verify_request(&f.registry, &t, &NonceSet::new()), RequestVerdict::BadTag);
        }
    }
}

#[test]
fn key_of_another_device_does_not_verify() {
    let mut f = fixture();
    let mut req = sign_request(&f.registry, "monitor-a", b"x", &mut f.rng, &mut f.clock).unwrap();
    req.device_id = "monitor-b".into();
    assert_eq!(verify_request(&f.registry, &req, &NonceSet::new()), RequestVerdict::BadTag);
}

/// Accept iff device known, tag matches, nonce unseen; checked over every
/// combination of the three conditions.
#[test]
fn verify_truth_table() {
    let mut f = fixture();
    let good = sign_request(&f.registry, "monitor-a", b"p", &mut f.rng, &mut f.clock).unwrap();
    for known in [true, false] {
        for tag_ok in [true, false] {
            for fresh in [true, false] {
                let mut req = good.clone();
                if !known {
                    req.device_id = "stranger".into();
                }
                if !tag_ok {
                    req.tag[0] ^= 1;
                }
                let mut seen = NonceSet::new();
                if !fresh {
                    seen.insert((req.device_id.clone(), req.nonce));
                }
                let v = verify_request(&f.registry, &req, &seen);
                assert_eq!(v == RequestVerdict::Valid, known && tag_ok && fresh, "{known} {tag_ok} {fresh} -> {v:?}");
                let expected = if !known {
                    RequestVerdict::UnknownDevice
                } else if !tag_ok {
                    RequestVerdict::BadTag
                } else if !fresh {
                    RequestVerdict::Replay
                } else {
                    RequestVerdict::Valid
                };
                assert_eq!(v, expected);
            }
        }
    }
}

#[test]
fn first_append_links_to_genesis() {
    let ledger = chain(1);
    let b = &ledger.blocks()[1];
    assert_eq!(b.index, 1);
    assert_eq!(b.prev_hash, ledger.blocks()[0].block_hash);
    assert_eq!(ledger.blocks()[0].prev_hash, ZERO_HASH);
}

#[test]
fn block_hash_is_sha256_of_serialized_prefix() {
    let ledger = chain(4);
    for b in ledger.blocks() {
        let bytes = b.to_bytes();
        let digest: [u8; 32] = Sha256::digest(&bytes[..BLOCK_BYTES - 32]).into();
        assert_eq!(digest, b.block_hash);
        assert_eq!(&bytes[BLOCK_BYTES - 32..], &b.block_hash);
    }
}

#[test]
fn payload_hash_commits_to_full_request() {
    let mut f = fixture();
    let mut ledger = Ledger::new([1; 32]);
    let req = sign_request(&f.registry, "monitor-a", b"abc", &mut f.rng, &mut f.clock).unwrap();
    let b = ledger.append_block(&req, VerdictCode::BAD_TAG, &mut f.clock).unwrap();
    let expected: [u8; 32] = Sha256::digest(req.canonical_bytes()).into();
    assert_eq!(b.payload_hash, expected);
}

#[test]
fn fresh_chains_verify() {
    for k in [0, 1, 2, 3, 17] {
        assert_eq!(chain(k).verify_chain(), ChainStatus::Ok);
    }
}

#[test]
fn payload_hash_flip_reported_at_block() {
    let mut ledger = chain(6);
    ledger.blocks_mut()[4].payload_hash[7] ^= 0x40;
    assert_eq!(
        ledger.verify_chain(),
        ChainStatus::Broken {
            broken_at: 4,
            cause: ChainFault::HashMismatch
        }
    );
}

#[test]
fn spliced_out_block_detected() {
    for j in 1..6 {
        let mut ledger = chain(6);
        ledger.blocks_mut().remove(j);
        match ledger.verify_chain() {
            ChainStatus::Broken { broken_at, cause } => {
                assert_eq!(broken_at, j as u64);
                assert!(matches!(cause, ChainFault::IndexGap | ChainFault::LinkMismatch));
            }
            ChainStatus::Ok => panic!("splice at {j} undetected"),
        }
    }
}

#[test]
fn rehashed_forgery_breaks_the_next_link() {
    let mut ledger = chain(5);
    let b = &mut ledger.blocks_mut()[2];
    b.verdict = VerdictCode::KNOWN_ATTACK;
    b.block_hash = b.compute_hash();
    assert_eq!(
        ledger.verify_chain(),
        ChainStatus::Broken {
            broken_at: 3,
            cause: ChainFault::LinkMismatch
        }
    );
}

#[test]
fn corrupted_tip_refuses_append() {
    let mut f = fixture();
    let mut ledger = chain(3);
    ledger.blocks_mut().last_mut().unwrap().timestamp += 1;
    let req = sign_request(&f.registry, "monitor-a", b"z", &mut f.rng, &mut f.clock).unwrap();
    let err = ledger.append_block(&req, VerdictCode::REPLAY, &mut f.clock).unwrap_err();
    assert!(err.to_string().contains("chain invalid, refusing append"), "{err}");
    assert_eq!(ledger.len(), 4);
}

#[test]
fn countersignatures_only_on_acceptances() {
    let ledger = chain(6);
    for b in &ledger.blocks()[1..] {
        assert_eq!(b.countersignature == ZERO_HASH, !b.verdict.is_accepted());
        assert!(ledger.countersignature_valid(b));
    }
    let other = Ledger::from_blocks(ledger.blocks().to_vec(), Some([6; 32]));
    assert!(!other.countersignature_valid(&ledger.blocks()[2]));
}

#[test]
fn jsonl_round_trip_and_hex_fields() {
    let ledger = chain(4);
    let mut buf = Vec::new();
    ledger.write_jsonl(&mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert_eq!(text.lines().count(), 5);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["prev_hash"], "0".repeat(64));
    let blocks = Ledger::read_jsonl(&buf[..]).unwrap();
    assert_eq!(blocks, ledger.blocks());
    assert!(verify_blocks(&blocks).is_ok());
}

#[test]
fn requests_serialize_as_json() {
    let mut f = fixture();
    let req = sign_request(&f.registry, "monitor-a", b"abc", &mut f.rng, &mut f.clock).unwrap();
    let text = serde_json::to_string(&req).unwrap();
    let back: SignedRequest = serde_json::from_str(&text).unwrap();
    assert_eq!(back, req);
}

#[test]
fn hashes_are_reproducible_across_runs() {
    let a = chain(5);
    let b = chain(5);
    assert_eq!(a.blocks(), b.blocks());
    assert_eq!(hex::encode(Block::genesis().block_hash), hex::encode(a.blocks()[0].block_hash));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn any_single_byte_mutation_is_detected(
        n in 1usize..8,
        block in any::<prop::sample::Index>(),
        offset in 0usize..BLOCK_BYTES,
        delta in 1u8..=255,
    ) {
        let mut ledger = chain(n);
        let j = block.index(ledger.len());
        let mut bytes = ledger.blocks()[j].to_bytes();
        bytes[offset] = bytes[offset].wrapping_add(delta);
        ledger.blocks_mut()[j] = Block::from_bytes(&bytes).unwrap();
        prop_assert!(!ledger.verify_chain().is_ok());
    }
}
