mod common;

use adsorbtext::graphemb::{pool_system_embedding, synthetic_graph_embeddings};
use adsorbtext::synthetic::synthetic_structures;
use common::{brute_force_pool, random_atoms};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn pooled_dominates_and_matches_oracle(seed in any::<u64>(), n in 1usize..30, c in 1usize..6, m in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let atoms = random_atoms(&mut rng, n, c, m);
        let pooled = pool_system_embedding(&atoms).unwrap();
        prop_assert_eq!(pooled.len(), c * m);
        prop_assert_eq!(&pooled, &brute_force_pool(&atoms));
        for a in &atoms {
            let flat: Vec<f64> = a.iter().flatten().copied().collect();
            prop_assert!(pooled.iter().zip(&flat).all(|(p, x)| p >= x));
        }
    }

    #[test]
    fn reorder_and_duplicate_invariance(seed in any::<u64>(), n in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let atoms = random_atoms(&mut rng, n, 3, 4);
        let base = pool_system_embedding(&atoms).unwrap();
        let mut shuffled = atoms.clone();
        shuffled.shuffle(&mut rng);
        prop_assert_eq!(&pool_system_embedding(&shuffled).unwrap(), &base);
        let mut dup = atoms.clone();
        let k = rng.gen_range(0..n);
        dup.insert(rng.gen_range(0..=n), atoms[k].clone());
        prop_assert_eq!(&pool_system_embedding(&dup).unwrap(), &base);
    }
}

#[test]
fn element_change_changes_embedding() {
    let mut s = synthetic_structures(1, 4).unwrap();
    let mut t = s.clone();
    let k = t[0].species.iter().position(|e| e != "Cu").unwrap();
    t[0].species[k] = "Cu".into();
    t[0].system_id = "other".into();
    s.extend(t);
    let set = synthetic_graph_embeddings(&s, 0, 8, 8).unwrap();
    let a = set.pooled(&s[0].system_id).unwrap().unwrap();
    let b = set.pooled("other").unwrap().unwrap();
    assert_eq!(a.len(), 64);
    assert_ne!(a, b);
}
