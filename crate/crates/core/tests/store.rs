mod common;

use common::instances::*;
use headsteer::store::*;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn caches_round_trip(seed in any::<u64>(), at in any::<u64>(), bit in any::<u8>()) {
        let c = random_cache(seed);
        let bytes = round_trips(&c, encode_cache, decode_cache).map_err(TestCaseError::fail)?;
        corruption_rejected(&bytes, at, bit, decode_cache).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), adapted in any::<bool>(), at in any::<u64>(), bit in any::<u8>()) {
        let ck = random_checkpoint(seed, adapted);
        let bytes = round_trips(&ck, encode_checkpoint, decode_checkpoint).map_err(TestCaseError::fail)?;
        corruption_rejected(&bytes, at, bit, decode_checkpoint).map_err(TestCaseError::fail)?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn demos_round_trip(seed in 0u64..1_000_000, at in any::<u64>(), bit in any::<u8>()) {
        let d = random_demos(seed);
        let bytes = round_trips(&d, encode_demos, decode_demos).map_err(TestCaseError::fail)?;
        corruption_rejected(&bytes, at, bit, decode_demos).map_err(TestCaseError::fail)?;
    }
}

#[test]
fn merged_checkpoint_forward_matches_in_memory() {
    use headsteer::numkit::RngStream;
    use headsteer::policy::{forward, random_sequence, ForwardOptions};
    let ck = random_checkpoint(5, true);
    let ad = ck.adapted().unwrap();
    let merged = Checkpoint::merged(&ad, None);
    let back = decode_checkpoint(&encode_checkpoint(&merged).unwrap())
        .unwrap()
        .params()
        .unwrap();
    let live = ad.effective();
    let mut rng = RngStream::new(1, 1);
    for _ in 0..10 {
        let seq = random_sequence(&live.config, 2, &mut rng);
        let a = forward(&live, &seq, &ForwardOptions::default()).unwrap();
        let b = forward(&back, &seq, &ForwardOptions::default()).unwrap();
        assert_eq!(a.context, b.context);
    }
}
