use std::collections::HashSet;

use aal_core::augment::{AugmentProfile, AugmentationPolicy, OpKind};
use aal_core::backbone::{forward, image_batch, init_backbone, BackboneConfig, BnMode, Head};
use aal_core::data::{make_synthetic, strip_labels, DatasetIndex};
use aal_core::episode::{sample_supervised_episode, sample_unsupervised_episode, Episode, EpisodeSpec};
use aal_core::maml::{outer_loss, MamlConfig, MetaParams};
use aal_core::protonet::{classify, compute_prototypes, protonet_episode_loss, Metric};
use aal_core::{ImageTensor, RngStream};
use aal_tensor::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

const KINDS: [OpKind; 8] = [
    OpKind::Crop,
    OpKind::Hflip,
    OpKind::Vflip,
    OpKind::Rotate,
    OpKind::Warp,
    OpKind::PixelDropout,
    OpKind::Cutout,
    OpKind::Grayscale,
];

fn policy_from_mask(profile: AugmentProfile, mask: u8) -> AugmentationPolicy {
    let ops = KINDS
        .iter()
        .enumerate()
        .filter(|&(i, k)| mask & (1 << i) != 0 && !(profile == AugmentProfile::Omniglot && *k == OpKind::Grayscale))
        .map(|(_, &k)| profile.op(k).unwrap())
        .collect();
    AugmentationPolicy::new(ops).unwrap()
}

fn random_image(side: usize, channels: usize, seed: u64) -> ImageTensor {
    let mut rng = RngStream::new(seed);
    ImageTensor::new(side, side, channels, (0..side * side * channels).map(|_| rng.random::<f32>()).collect()).unwrap()
}

fn profile_strategy() -> impl Strategy<Value = AugmentProfile> {
    prop_oneof![Just(AugmentProfile::Omniglot), Just(AugmentProfile::MiniImagenet)]
}

fn pool_dataset() -> DatasetIndex {
    make_synthetic(25, 6, 28, 42).unwrap()
}

fn balanced_labels(n: usize, k: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).flat_map(|c| std::iter::repeat_n(c, k)).collect();
    labels.shuffle(rng);
    labels
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn policies_preserve_shape_and_range(profile in profile_strategy(), mask in any::<u8>(), seed in any::<u64>()) {
        let policy = policy_from_mask(profile, mask);
        let img = random_image(profile.side(), profile.channels(), seed);
        let out = policy.apply(&img, &mut RngStream::new(seed ^ 1)).unwrap();
        prop_assert!(out.same_shape(&img));
        prop_assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn policies_are_deterministic_per_seed(profile in profile_strategy(), mask in any::<u8>(), seed in any::<u64>()) {
        let policy = policy_from_mask(profile, mask);
        let img = random_image(profile.side(), profile.channels(), seed);
        let a = policy.apply(&img, &mut RngStream::new(seed)).unwrap();
        let b = policy.apply(&img, &mut RngStream::new(seed)).unwrap();
        prop_assert_eq!(a.pixels(), b.pixels());
    }

    #[test]
    fn policy_names_round_trip(profile in profile_strategy(), mask in any::<u8>()) {
        let policy = policy_from_mask(profile, mask);
        let name = policy.name();
        if policy.is_empty() {
            prop_assert_eq!(name, "NONE");
        } else {
            prop_assert_eq!(aal_core::augment::policy_from_name(&name.to_lowercase(), profile).unwrap(), policy);
        }
    }

    #[test]
    fn cutout_zeroes_are_bounded(profile in profile_strategy(), seed in any::<u64>()) {
        let op = profile.op(OpKind::Cutout).unwrap();
        let aal_core::augment::AugmentationOp::Cutout { holes, side_hi, .. } = op else { unreachable!() };
        let (s, c) = (profile.side(), profile.channels());
        let img = ImageTensor::filled(s, s, c, 1.0);
        let out = op.apply(&img, &mut RngStream::new(seed)).unwrap();
        let zeroed = (0..s * s).filter(|&p| (0..c).all(|ch| out.pixels()[p * c + ch] == 0.0)).count();
        prop_assert!(zeroed > 0);
        prop_assert!(zeroed <= holes * side_hi * side_hi);
    }

    #[test]
    fn unsupervised_episodes_follow_the_contract(n in 2usize..8, k in 1usize..4, m in 1usize..3, seed in any::<u64>()) {
        let pool = strip_labels(&pool_dataset()).unwrap();
        let policy = aal_core::augment::policy_from_name("CHV", AugmentProfile::Omniglot).unwrap();
        let spec = EpisodeSpec::unsupervised(n, k, m, policy);
        let ep = sample_unsupervised_episode(&pool, &spec, &mut RngStream::new(seed)).unwrap();
        ep.check().unwrap();
        prop_assert_eq!(ep.support_labels.len(), n * k);
        for c in 0..n {
            prop_assert_eq!(ep.support_labels.iter().filter(|&&l| l == c).count(), k);
        }
        prop_assert_eq!(&ep.target_labels, &ep.support_labels.repeat(m));
        prop_assert_eq!(&ep.target_sources, &ep.support_sources.repeat(m));
        let distinct: HashSet<_> = ep.support_sources.iter().collect();
        prop_assert_eq!(distinct.len(), n * k);
    }

    #[test]
    fn supervised_episodes_keep_support_and_target_apart(n in 2usize..6, k in 1usize..3, j in 1usize..4, seed in any::<u64>()) {
        let d = pool_dataset();
        let ep = sample_supervised_episode(&d, &EpisodeSpec::supervised(n, k, j), &mut RngStream::new(seed)).unwrap();
        ep.check().unwrap();
        let support: HashSet<_> = ep.support_sources.iter().collect();
        prop_assert!(ep.target_sources.iter().all(|s| !support.contains(s)));
        // every episode label maps to exactly one dataset class
        for l in 0..n {
            let classes: HashSet<usize> = ep.support_sources.iter().chain(&ep.target_sources)
                .zip(ep.support_labels.iter().chain(&ep.target_labels))
                .filter(|&(_, &el)| el == l)
                .map(|(&s, _)| d.label(s))
                .collect();
            prop_assert_eq!(classes.len(), 1);
        }
    }

    #[test]
    fn prototypes_match_brute_force(n in 2usize..6, k in 1usize..4, d in 1usize..6, q in 1usize..6, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed);
        let labels = balanced_labels(n, k, &mut rng);
        let emb: Vec<f64> = (0..n * k * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let queries: Vec<f64> = (0..q * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let protos = compute_prototypes(&Tensor::constant(vec![n * k, d], emb.clone()), &labels, n, Metric::SquaredEuclidean).unwrap();
        let probs = classify(&protos, &Tensor::constant(vec![q, d], queries.clone())).unwrap();

        let mut brute = vec![0.0; n * d];
        for (i, &l) in labels.iter().enumerate() {
            for x in 0..d {
                brute[l * d + x] += emb[i * d + x] / k as f64;
            }
        }
        for (a, b) in protos.prototypes.data().iter().zip(&brute) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
        for r in 0..q {
            let dist: Vec<f64> = (0..n)
                .map(|c| (0..d).map(|x| (queries[r * d + x] - brute[c * d + x]).powi(2)).sum())
                .collect();
            let lo = dist.iter().cloned().fold(f64::INFINITY, f64::min);
            let z: f64 = dist.iter().map(|v| (lo - v).exp()).sum();
            let row = &probs.data()[r * n..(r + 1) * n];
            for c in 0..n {
                prop_assert!((row[c] - (lo - dist[c]).exp() / z).abs() <= 1e-10);
            }
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}

fn small_episode(n: usize, seed: u64) -> Episode {
    let d = make_synthetic(8, 4, 8, 5).unwrap();
    sample_supervised_episode(&d, &EpisodeSpec::supervised(n, 1, 2), &mut RngStream::new(seed)).unwrap()
}

fn relabel(ep: &Episode, perm: &[usize]) -> Episode {
    Episode {
        support_labels: ep.support_labels.iter().map(|&l| perm[l]).collect(),
        target_labels: ep.target_labels.iter().map(|&l| perm[l]).collect(),
        ..ep.clone()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn protonet_is_label_permutation_invariant(seed in any::<u64>()) {
        let n = 4;
        let ep = small_episode(n, seed);
        let mut rng = RngStream::new(seed ^ 7);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let permuted = relabel(&ep, &perm);
        let cfg = BackboneConfig { in_channels: 1, side: 8, blocks: 2, filters: 4, head: Head::Embedding };
        let pc = init_backbone(cfg.clone(), &mut rng).unwrap();
        let ps = pc.constants();
        let (la, _) = protonet_episode_loss(&ps, &pc, &ep, Metric::SquaredEuclidean, BnMode::Stored(&pc.running)).unwrap();
        let (lb, _) = protonet_episode_loss(&ps, &pc, &permuted, Metric::SquaredEuclidean, BnMode::Stored(&pc.running)).unwrap();
        prop_assert!((la.item() - lb.item()).abs() <= 1e-10);

        let support = forward(&cfg, &ps, &image_batch(&cfg, &ep.support_images).unwrap(), BnMode::Stored(&pc.running), None).unwrap();
        let target = forward(&cfg, &ps, &image_batch(&cfg, &ep.target_images).unwrap(), BnMode::Stored(&pc.running), None).unwrap();
        let pa = classify(&compute_prototypes(&support, &ep.support_labels, n, Metric::SquaredEuclidean).unwrap(), &target).unwrap();
        let pb = classify(&compute_prototypes(&support, &permuted.support_labels, n, Metric::SquaredEuclidean).unwrap(), &target).unwrap();
        for r in 0..ep.target_labels.len() {
            for c in 0..n {
                prop_assert!((pa.data()[r * n + c] - pb.data()[r * n + perm[c]]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn maml_with_symmetric_head_is_label_permutation_invariant(seed in any::<u64>()) {
        let n = 3;
        let ep = small_episode(n, seed);
        let mut rng = RngStream::new(seed ^ 11);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let cfg = BackboneConfig { in_channels: 1, side: 8, blocks: 2, filters: 4, head: Head::Linear(n) };
        let mut theta = init_backbone(cfg, &mut rng).unwrap();
        // Identical head rows make the initialization itself symmetric in the classes.
        let last = theta.tensors.len();
        theta.tensors[last - 2].data.fill(0.0);
        theta.tensors[last - 1].data.fill(0.0);
        let mc = MamlConfig { inner_steps: 2, eval_inner_steps: 2, alpha_init: 0.2, ..MamlConfig::default() };
        let mp = MetaParams::new(theta, &mc).unwrap();
        let w = mc.step_weights(0);
        let a = outer_loss(&mp, &mc, &ep, &w).unwrap();
        let b = outer_loss(&mp, &mc, &relabel(&ep, &perm), &w).unwrap();
        prop_assert!((a - b).abs() <= 1e-10, "{} vs {}", a, b);
    }
}
