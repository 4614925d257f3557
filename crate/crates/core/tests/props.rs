//! Property tests for the chain core: round-trips, monotone difficulty,
//! mining determinism, and tamper evidence under arbitrary inputs.

use proptest::prelude::*;

use votechain::block::{Block, VoteBlock};
use votechain::chain::{Chain, LevelPatterns};
use votechain::codec::{chain_to_string, encode_block, parse_block, read_chain};
use votechain::hash::{sha256, DifficultyPattern, HashDigest};
use votechain::mining::mine_nonce;

const BUDGET: u64 = 1 << 22;

fn id_strategy() -> impl Strategy<Value = String> {
    proptest::string::string_regex("[A-Za-z0-9_.:-]{1,12}").expect("valid regex")
}

fn vote_chain_strategy() -> impl Strategy<Value = (Chain, u32)> {
    (
        id_strategy(),
        id_strategy(),
        proptest::collection::vec(id_strategy(), 0..12),
        0u32..=2,
    )
        .prop_map(|(election, ballot_box, candidates, zero_bits)| {
            let mut chain = Chain::new(election, 0).expect("ids avoid delimiters");
            let pattern = DifficultyPattern::new(zero_bits);
            for candidate in candidates {
                chain
                    .append_mined_vote(&ballot_box, &candidate, pattern, BUDGET)
                    .expect("mining at tiny difficulty");
            }
            (chain, zero_bits)
        })
}

proptest! {
    // Round-trip: deserialize(serialize(chain)) identical, validity agrees.
    #[test]
    fn chain_files_round_trip((chain, zero_bits) in vote_chain_strategy()) {
        let text = chain_to_string(&chain);
        let back = read_chain(text.as_bytes()).expect("own exports parse");
        prop_assert_eq!(&back, &chain);
        let patterns = LevelPatterns::new(vec![zero_bits]);
        prop_assert!(chain.validate(&patterns).is_ok());
        prop_assert!(back.validate(&patterns).is_ok());
        prop_assert_eq!(chain_to_string(&back), text);
    }

    // Every generated block has exactly one canonical line.
    #[test]
    fn encode_parse_is_identity(
        election in id_strategy(),
        ballot_box in id_strategy(),
        candidate in id_strategy(),
        nonce in 0u64..1_000_000,
        seed in any::<u64>(),
    ) {
        let prev = sha256(&seed.to_le_bytes());
        let block = Block::Vote(
            VoteBlock::new(election, ballot_box, candidate, prev, nonce.to_string()).unwrap(),
        );
        let line = encode_block(&block);
        let parsed = parse_block(&line).expect("canonical lines parse");
        prop_assert_eq!(&parsed, &block);
        prop_assert_eq!(encode_block(&parsed), line);
    }

    // Monotone difficulty: matching k zero bits implies matching all k' <= k.
    #[test]
    fn difficulty_is_monotone(bytes in any::<[u8; 32]>(), k in 0u32..=256) {
        let digest = HashDigest::from_bytes(bytes);
        if DifficultyPattern::new(k).matches(&digest) {
            for smaller in (0..k).step_by(7) {
                prop_assert!(DifficultyPattern::new(smaller).matches(&digest));
            }
        } else {
            // Failing k means every harder pattern fails too.
            prop_assert!(!DifficultyPattern::new(k + 1).matches(&digest));
        }
    }

    // Same draft, same pattern, same nonce - every time.
    #[test]
    fn mining_is_deterministic_for_any_draft(
        election in id_strategy(),
        ballot_box in id_strategy(),
        candidate in id_strategy(),
        zero_bits in 0u32..=6,
    ) {
        let prev = Chain::new(election.clone(), 0).unwrap().tip_hash();
        let prefix = VoteBlock::mining_prefix(&election, &ballot_box, &candidate, &prev);
        let pattern = DifficultyPattern::new(zero_bits);
        let first = mine_nonce(&prefix, pattern, BUDGET).unwrap();
        let second = mine_nonce(&prefix, pattern, BUDGET).unwrap();
        prop_assert_eq!(first, second);
    }

    // Appending never touches earlier blocks, and hex digests round-trip.
    #[test]
    fn append_preserves_prefix((chain, zero_bits) in vote_chain_strategy()) {
        let pattern = DifficultyPattern::new(zero_bits);
        let mut extended = chain.clone();
        extended
            .append_mined_vote("PROP-BOX", "PROP-CAND", pattern, BUDGET)
            .unwrap();
        prop_assert_eq!(extended.len(), chain.len() + 1);
        for (a, b) in chain.blocks().iter().zip(extended.blocks()) {
            prop_assert_eq!(a, b);
        }
        let tip_hex = extended.tip_hash().to_hex();
        prop_assert_eq!(HashDigest::from_hex(&tip_hex).unwrap(), extended.tip_hash());
    }
}
