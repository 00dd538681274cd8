//! Parameter accounting against tensor enumeration, sampling uniformity and genome text.

mod common;

use common::enumerate_params;
use elm_core::archspace::{
    check_budget, count_params, ArchGenome, BlockChoice, LayerGene, ModelDims, ParamBudget, SearchSpace,
};
use elm_core::numkernel::DType;
use elm_core::supernet::Model;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_sized_genome(dims: &ModelDims, rng: &mut ChaCha8Rng) -> ArchGenome {
    let steps = (dims.ffn_max - dims.ffn_init) / dims.ffn_step;
    ArchGenome::new(
        (0..dims.layers)
            .map(|_| LayerGene {
                choice: BlockChoice::ALL[rng.random_range(0..6)],
                ffn_dim: dims.ffn_init + dims.ffn_step * rng.random_range(0..=steps),
                heads: dims.heads,
            })
            .collect(),
    )
}

#[test]
fn counts_match_enumeration_in_desk_and_full_profiles() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for dims in [ModelDims::desk(83), ModelDims::full(512)] {
        for _ in 0..200 {
            let g = random_sized_genome(&dims, &mut rng);
            assert_eq!(count_params(&g, &dims).unwrap(), enumerate_params(&g, &dims), "{g}");
        }
    }
}

#[test]
fn instantiated_models_hold_exactly_the_counted_parameters() {
    let dims = ModelDims::desk(83);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..10 {
        let g = random_sized_genome(&dims, &mut rng);
        let m = Model::new(dims.clone(), g.clone(), DType::F32, seed).unwrap();
        assert_eq!(m.param_count(), count_params(&g, &dims).unwrap());
    }
}

#[test]
fn hand_counted_standard_blocks() {
    let dims = ModelDims {
        vocab: 4,
        hidden: 8,
        layers: 1,
        heads: 2,
        inner: 4,
        ffn_init: 16,
        ffn_step: 16,
        ffn_max: 32,
        max_len: 4,
        tie_head: false,
    };
    use elm_core::archspace::block_params;
    assert_eq!(block_params(BlockChoice::ALL[0], 16, &dims), 600);
    assert_eq!(block_params(BlockChoice::ALL[1], 16, &dims), 528);
    assert_eq!(block_params(BlockChoice::ALL[2], 16, &dims), 528);
    let g = ArchGenome::new(vec![LayerGene {
        choice: BlockChoice::ALL[0],
        ffn_dim: 8,
        heads: 2,
    }]);
    assert!(count_params(&g, &dims).is_err());
}

#[test]
fn sharing_removes_one_projection() {
    use elm_core::archspace::block_params;
    let dims = ModelDims::full(512);
    for kind_base in [0, 3] {
        let none = block_params(BlockChoice::ALL[kind_base], 264, &dims);
        let qv = block_params(BlockChoice::ALL[kind_base + 1], 264, &dims);
        let kv = block_params(BlockChoice::ALL[kind_base + 2], 264, &dims);
        assert_eq!(qv, kv);
        assert!(qv < none);
    }
}

#[test]
fn budget_boundaries() {
    let dims = ModelDims::full(512);
    let space = SearchSpace::initial(&dims, true);
    let g = space.genome_from_choices(&[BlockChoice::ALL[1]; 12]);
    let n = count_params(&g, &dims).unwrap();
    assert!(check_budget(&g, &dims, &ParamBudget::new(n)).pass);
    assert!(!check_budget(&g, &dims, &ParamBudget::new(n - 1)).pass);
    assert!(!check_budget(&g, &dims, &ParamBudget::new(0)).pass);
    let widest = ArchGenome::new(vec![
        LayerGene {
            choice: BlockChoice::ALL[0],
            ffn_dim: 1056,
            heads: 12
        };
        12
    ]);
    assert!(!check_budget(&widest, &dims, &ParamBudget::new(5_000_000)).pass);
}

#[test]
fn random_choices_are_uniform_per_layer() {
    let dims = ModelDims::desk(83);
    let space = SearchSpace::initial(&dims, true);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let draws = 60_000;
    let mut counts = vec![[0usize; 6]; dims.layers];
    for _ in 0..draws {
        for (l, g) in space.random_genome(&mut rng).layers.iter().enumerate() {
            counts[l][g.choice.index()] += 1;
        }
    }
    for row in counts {
        for c in row {
            let f = c as f64 / draws as f64;
            assert!((f - 1.0 / 6.0).abs() < 0.01, "{f}");
        }
    }
    assert_eq!(SearchSpace::initial(&ModelDims::full(512), true).cardinality(), 6u128.pow(12));
    assert_eq!(SearchSpace::initial(&ModelDims::full(512), false).cardinality(), 2u128.pow(12));
}

#[test]
fn seeded_draws_repeat() {
    let space = SearchSpace::initial(&ModelDims::desk(83), true);
    let a = space.random_genome(&mut ChaCha8Rng::seed_from_u64(5));
    let b = space.random_genome(&mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(a, b);
}

#[test]
fn genome_file_format() {
    let space = SearchSpace::initial(&ModelDims::desk(83), true);
    let g = space.genome_from_choices(&[BlockChoice::ALL[0], BlockChoice::ALL[4], BlockChoice::ALL[2], BlockChoice::ALL[5]]);
    let text = g.to_text();
    assert!(text.starts_with("ELMGENOME 1\n"));
    assert!(text.contains("layer=1 kind=btl share=qv ffn=16 heads=8"));
    assert!(ArchGenome::from_text("ELMGENOME 2\n").is_err());
    assert!(ArchGenome::from_text("ELMGENOME 1\nlayer=0 kind=xyz share=none ffn=16 heads=8\n").is_err());
}

proptest! {
    #[test]
    fn genome_text_round_trips(seed in any::<u64>()) {
        let dims = ModelDims::full(512);
        let g = random_sized_genome(&dims, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(ArchGenome::from_text(&g.to_text()).unwrap(), g);
    }

    #[test]
    fn count_is_additive_in_ffn_width(seed in any::<u64>(), layer in 0usize..4) {
        let dims = ModelDims::desk(83);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = random_sized_genome(&dims, &mut rng);
        g.layers[layer].ffn_dim = dims.ffn_init;
        let before = count_params(&g, &dims).unwrap();
        g.layers[layer].ffn_dim += dims.ffn_step;
        let after = count_params(&g, &dims).unwrap();
        let width = dims.width(g.layers[layer].choice.kind) as u64;
        prop_assert_eq!(after - before, (2 * width + 1) * dims.ffn_step as u64);
    }
}
