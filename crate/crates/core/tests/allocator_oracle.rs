mod common;

use common::oracle::{random_trace, replay, LinearBestFit, Op};
use disagg_store::allocator::ArenaAllocator;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ARENA: u64 = 4 << 20;

#[test]
fn oracle_matches_hand_worked_sequence() {
    let mut o = LinearBestFit::new(1000, true);
    assert_eq!(o.allocate(100), Some(0));
    assert_eq!(o.allocate(300), Some(100));
    assert_eq!(o.allocate(100), Some(400));
    o.deallocate(100);
    // holes: 100+300 and 500+500; best fit for 250 is the smaller one
    assert_eq!(o.allocate(250), Some(100));
    assert_eq!(o.free_regions(), &[(350, 50), (500, 500)]);
    o.deallocate(0);
    o.deallocate(100);
    o.deallocate(400);
    assert_eq!(o.free_regions(), &[(0, 1000)]);
}

#[test]
fn seeded_traces_agree_with_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let trace = random_trace(&mut rng, 2_000, 64 << 10);
        replay(&trace, ARENA, true).unwrap();
    }
}

#[test]
fn traces_without_coalescing_agree_with_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let trace = random_trace(&mut rng, 2_000, 64 << 10);
        replay(&trace, ARENA, false).unwrap();
    }
}

#[test]
fn small_arena_exhaustion_agrees_with_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let trace = random_trace(&mut rng, 500, 300);
        replay(&trace, 4096, true).unwrap();
    }
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (1u64..=65_536).prop_map(Op::Alloc),
        2 => any::<usize>().prop_map(Op::Free),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn allocator_equals_linear_best_fit(trace in prop::collection::vec(op(), 1..400), coalesce in any::<bool>()) {
        prop_assert_eq!(replay(&trace, ARENA, coalesce), Ok(()));
    }

    #[test]
    fn bytes_in_use_is_sum_of_live_extents(sizes in prop::collection::vec(1u64..10_000, 1..100), frees in prop::collection::vec(any::<usize>(), 0..100)) {
        let mut a = ArenaAllocator::new(1 << 20);
        let mut live = Vec::new();
        for s in sizes {
            if let Ok(off) = a.allocate(s) {
                live.push((off, s));
            }
        }
        for f in frees {
            if live.is_empty() {
                break;
            }
            let (off, s) = live.swap_remove(f % live.len());
            prop_assert_eq!(a.deallocate(off), Ok(s));
        }
        let stats = a.stats();
        prop_assert_eq!(stats.bytes_in_use, live.iter().map(|&(_, s)| s).sum::<u64>());
        let free: u64 = a.free_regions().iter().map(|r| r.size).sum();
        prop_assert_eq!(free + stats.bytes_in_use, 1 << 20);
    }

    #[test]
    fn freeing_everything_restores_one_region(sizes in prop::collection::vec(1u64..50_000, 1..60), order in any::<u64>()) {
        let mut a = ArenaAllocator::new(ARENA);
        let mut offs: Vec<u64> = sizes.iter().filter_map(|&s| a.allocate(s).ok()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(order);
        rand::seq::SliceRandom::shuffle(offs.as_mut_slice(), &mut rng);
        for o in offs {
            a.deallocate(o).unwrap();
        }
        prop_assert_eq!(a.free_regions().len(), 1);
        prop_assert_eq!(a.largest_free_region(), ARENA);
    }
}
