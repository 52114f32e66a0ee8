//! Property tests for the data-type invariants.

use patchbridge::bench::{compute_metrics, frechet_distance, psnr, ssim};
use patchbridge::data::train_val_split;
use patchbridge::flow::{BackboneConfig, FlowBackbone, LatentControlNet};
use patchbridge::latent::{flatten_grid, reshape_to_grid, Image, PatchGrid};
use patchbridge::mar::{build_inference_schedule, MaskRatioSampler};
use patchbridge::mllm::{build_attention_mask, tile_segments, validate_segments, Mllm, MllmConfig, Modality};
use patchbridge::pipeline::{ModelConfig, Models};
use patchbridge::train::{initial_checkpoint, Checkpoint, TrainConfig};
use patchbridge::{ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn modality() -> impl Strategy<Value = Modality> {
    prop_oneof![Just(Modality::Text), Just(Modality::ImgU), Just(Modality::ImgG)]
}

fn random_image(seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Tensor::uniform(1, 3 * 32 * 32, 0.0, 1.0, &mut rng);
    Image::new(32, 32, t.into_data()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tiled_segments_cover_the_sequence(parts in prop::collection::vec((modality(), 1usize..6), 1..8)) {
        let segs = tile_segments(&parts);
        let n: usize = parts.iter().map(|p| p.1).sum();
        prop_assert_eq!(validate_segments(&segs).unwrap(), n);
        for w in segs.windows(2) {
            prop_assert_eq!(w[0].end(), w[1].start);
        }
    }

    #[test]
    fn every_mask_row_allows_itself(parts in prop::collection::vec((modality(), 1usize..6), 1..8)) {
        let mask = build_attention_mask(&tile_segments(&parts)).unwrap();
        for q in 0..mask.queries {
            prop_assert!(mask.get(q, q));
        }
    }

    #[test]
    fn gapped_segments_are_rejected(a in 1usize..5, b in 1usize..5, gap in 1usize..3) {
        let mut segs = tile_segments(&[(Modality::Text, a), (Modality::ImgU, b)]);
        segs[1].start += gap;
        prop_assert!(validate_segments(&segs).is_err());
        prop_assert!(build_attention_mask(&segs).is_err());
    }

    #[test]
    fn mask_ratios_stay_in_bounds(seed in any::<u64>()) {
        let mut s = MaskRatioSampler::new(seed);
        for _ in 0..200 {
            let r = s.sample();
            prop_assert!((0.7..=1.0).contains(&r));
        }
    }

    #[test]
    fn schedules_partition_the_grid(seed in any::<u64>(), n in 1usize..200, kf in 0.0f64..1.0) {
        let k = 1 + ((n - 1) as f64 * kf) as usize;
        let s = build_inference_schedule(&mut ChaCha8Rng::seed_from_u64(seed), n, k).unwrap();
        s.validate().unwrap();
        let mut all: Vec<usize> = s.steps.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn grid_flatten_round_trip(h in 1usize..9, w in 1usize..9, d in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = PatchGrid::new(h, w, Tensor::randn(h * w, d, 1.0, &mut rng)).unwrap();
        let back = reshape_to_grid(flatten_grid(&grid), h, w).unwrap();
        prop_assert!(back.bit_eq(&grid));
        let stored = PatchGrid::from_bytes(&grid.to_bytes()).unwrap();
        prop_assert!(stored.tokens().bit_eq(&grid.tokens().map(|v| v as f32 as f64)));
    }

    #[test]
    fn image_metrics_are_finite_and_bounded(a in any::<u64>(), b in any::<u64>()) {
        let (x, y) = (random_image(a), random_image(b));
        let p = psnr(&x, &y).unwrap();
        let s = ssim(&x, &y).unwrap();
        prop_assert!(p.is_finite() || a == b);
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn frechet_is_nonnegative_and_symmetric(seed in any::<u64>(), shift in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<Vec<f64>> = (0..40).map(|_| Tensor::randn(1, 4, 1.0, &mut rng).into_data()).collect();
        let b: Vec<Vec<f64>> = (0..40).map(|_| Tensor::randn(1, 4, 1.5, &mut rng).data().iter().map(|v| v + shift).collect()).collect();
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0 && ab.is_finite());
        prop_assert!((ab - ba).abs() < 1e-6 * (1.0 + ab));
    }

    #[test]
    fn dataset_regenerates_and_splits_are_disjoint(seed in 0u64..1000) {
        let (t1, v1) = train_val_split(seed, 48, 16).unwrap();
        let (t2, v2) = train_val_split(seed, 48, 16).unwrap();
        prop_assert_eq!(t1.checksum(), t2.checksum());
        prop_assert_eq!(v1.checksum(), v2.checksum());
        for v in &v1.samples {
            prop_assert!(t1.samples.iter().all(|t| t.image.pixels() != v.image.pixels()));
        }
    }

    #[test]
    fn config_survives_toml(seed in any::<u64>(), batch in 1usize..64, steps in 0usize..10_000, lr in 1e-5f64..1e-1) {
        let cfg = TrainConfig { seed, batch_size: batch, branch_steps: steps, branch_lr: lr, ..TrainConfig::default() };
        let back = TrainConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(back, cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn zero_init_controlnet_emits_zero_residuals(seed in any::<u64>(), t in 0.0f64..=1.0, scale in 0.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bb = FlowBackbone::new(BackboneConfig::default()).unwrap();
        let cn = LatentControlNet::new(16, 8);
        let mut store = ParamStore::new();
        bb.init(&mut store, &mut rng);
        cn.init(&bb, &mut store, &mut rng).unwrap();
        let grid = PatchGrid::new(8, 8, Tensor::randn(64, 16, 1.0, &mut rng)).unwrap();
        let z = Tensor::randn(bb.cfg.tokens(), bb.cfg.channels(), 1.0, &mut rng);
        let r = cn.residuals(&store, &bb, &z, t, &[1, 2, 3], &grid, scale).unwrap();
        prop_assert_eq!(r.len(), 5);
        for x in r.double.iter().chain(&r.single) {
            prop_assert!(x.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn generation_branch_mirrors_base_shapes(seed in any::<u64>(), layers in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Mllm::new(MllmConfig { layers, ..MllmConfig::default() });
        let mut store = ParamStore::new();
        m.init_base(&mut store, &mut rng);
        m.init_generation_branch(&mut store, &mut rng).unwrap();
        let mut copies = 0;
        for (name, p) in store.iter().filter(|(n, _)| n.starts_with("gen/layers")) {
            let base = store.get(&name.replacen("gen/", "base/", 1)).unwrap();
            prop_assert!(p.value.bit_eq(base), "{} differs from its base copy", name);
            copies += 1;
        }
        prop_assert_eq!(copies, store.names_with_prefix("base/layers").count());
        prop_assert!(copies > 0);
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>()) {
        let ck = initial_checkpoint(&TrainConfig { seed, ..TrainConfig::default() }).unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        prop_assert!(back.bit_eq(&ck));
    }

    #[test]
    fn identical_sets_score_perfectly(seed in any::<u64>()) {
        let models = Models::new(ModelConfig::default()).unwrap();
        let ck = initial_checkpoint(&TrainConfig { seed, ..TrainConfig::default() }).unwrap();
        let imgs: Vec<Image> = (0..6).map(|i| random_image(seed.wrapping_add(i))).collect();
        let q = compute_metrics(&models, &ck.params, &imgs, &imgs).unwrap();
        prop_assert!(q.toy_frechet.abs() < 1e-6);
        prop_assert!((q.ssim - 1.0).abs() < 1e-12);
        prop_assert!(q.psnr.is_finite());
    }
}
