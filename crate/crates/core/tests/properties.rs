use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vqab_core::codec::{parameter_count, Decoder, Encoder, ModelConfig};
use vqab_core::harness::checkpoint::{Checkpoint, RngState};
use vqab_core::harness::data::resize_bilinear;
use vqab_core::harness::metrics::{read_metrics, MetricsRow, MetricsWriter, Split};
use vqab_core::losses::{self, LossBreakdown, LossWeights, SeededExtractor};
use vqab_core::nn::{GroupNorm, NonLocalBlock, ParamStore};
use vqab_core::pca::PcaModel;
use vqab_core::pos_encoding::PositionalEncoding2D;
use vqab_core::{Codebook, ExperimentSpec, Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn config() -> ProptestConfig {
    ProptestConfig::with_cases(32)
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn detach_blocks_gradient(seed in any::<u64>(), n in 1usize..20) {
        let tape = Tape::new();
        let x = tape.var(Tensor::uniform(&[n], -2.0, 2.0, &mut rng(seed)));
        let loss = x.detach().square().sum().add(x.scale(0.0).sum()).unwrap();
        let g = tape.backward(loss).unwrap();
        prop_assert!(g.wrt(x).data().iter().all(|v| *v == 0.0));
        prop_assert!(tape.backward(loss).is_err());
    }

    #[test]
    fn dropout_is_seed_deterministic(seed in any::<u64>(), rate in 0.0f64..0.9) {
        let x = Tensor::uniform(&[3, 7], -1.0, 1.0, &mut rng(seed));
        let run = || {
            let tape = Tape::new();
            tape.constant(x.clone()).dropout(rate, true, &mut rng(seed ^ 1)).unwrap().value().data().to_vec()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::uniform(&[rows, cols], -30.0, 30.0, &mut rng(seed)));
        let s = x.softmax(1).unwrap().value();
        for r in 0..rows {
            let sum: f64 = s.data()[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one(seed in any::<u64>(), c in 1usize..6, h in 1usize..4, w in 1usize..4) {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let block = NonLocalBlock::new(&mut store, "a", c, &mut r).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(Tensor::uniform(&[2, c, h, w], -3.0, 3.0, &mut r));
        let (weights, _) = block.attention(&p, x).unwrap();
        prop_assert_eq!(block.forward(&p, x).unwrap().shape(), vec![2, c, h, w]);
        let hw = h * w;
        for row in weights.value().data().chunks(hw) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn group_norm_output_has_zero_group_mean(seed in any::<u64>(), c in 1usize..9, hw in 1usize..5) {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let gn = GroupNorm::new(&mut store, "gn", c).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(Tensor::uniform(&[2, c, hw, hw], -5.0, 5.0, &mut r));
        let y = gn.forward(&p, x).unwrap().value();
        let group = c / gn.groups * hw * hw;
        for chunk in y.data().chunks(group) {
            let mean = chunk.iter().sum::<f64>() / group as f64;
            prop_assert!(mean.abs() < 1e-12);
        }
    }

    #[test]
    fn positional_table_is_bounded_and_paired(half_pairs in 1usize..5, h in 1usize..9, w in 1usize..9) {
        let c = 4 * half_pairs;
        let pe = PositionalEncoding2D::build_table(c, h, w).unwrap();
        let again = PositionalEncoding2D::build_table(c, h, w).unwrap();
        prop_assert_eq!(pe.table().data(), again.table().data());
        let t = pe.table().data();
        prop_assert!(t.iter().all(|v| v.abs() <= 1.0));
        let plane = h * w;
        for pair in (0..c).step_by(2) {
            for s in 0..plane {
                let (a, b) = (t[pair * plane + s], t[(pair + 1) * plane + s]);
                prop_assert!((a * a + b * b - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn positional_apply_is_additive_with_identity_gradient(seed in any::<u64>()) {
        let mut r = rng(seed);
        let pe = PositionalEncoding2D::build_table(4, 3, 3).unwrap();
        let f1 = Tensor::uniform(&[2, 4, 3, 3], -1.0, 1.0, &mut r);
        let f2 = Tensor::uniform(&[2, 4, 3, 3], -1.0, 1.0, &mut r);
        let tape = Tape::new();
        let sum = tape.constant(f1.clone()).add(tape.constant(f2.clone())).unwrap();
        let lhs = pe.apply(sum, false, &mut r).unwrap().sub(tape.constant(f2)).unwrap().value();
        let rhs = pe.apply(tape.constant(f1.clone()), false, &mut r).unwrap().value();
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((a - b).abs() < 1e-14);
        }
        let x = tape.var(f1);
        let up = Tensor::uniform(&[2, 4, 3, 3], -1.0, 1.0, &mut r);
        let out = pe.apply(x, true, &mut r).unwrap();
        let loss = out.mul(tape.constant(up.clone())).unwrap().sum();
        let gx = tape.backward(loss).unwrap().wrt(x);
        prop_assert_eq!(gx.data(), up.data());
    }
}

#[derive(Debug)]
struct Instance {
    z: Tensor,
    emb: Tensor,
}

fn instance() -> impl Strategy<Value = Instance> {
    (1usize..3, 1usize..5, 1usize..5, 1usize..17, 1usize..33, any::<u64>()).prop_map(|(n, h, w, d, k, seed)| {
        let mut r = rng(seed);
        Instance {
            z: Tensor::uniform(&[n, d, h, w], -1.0, 1.0, &mut r),
            emb: Tensor::uniform(&[k, d], -1.0, 1.0, &mut r),
        }
    })
}

fn quantize_values(z: &Tensor, emb: &Tensor) -> (Vec<usize>, Vec<f64>, Vec<f64>, f64, f64, Vec<u64>) {
    let (k, d) = (emb.shape()[0], emb.shape()[1]);
    let mut store = ParamStore::new();
    let mut book = Codebook::new(&mut store, "cb", k, d, &mut rng(0)).unwrap();
    store.set(book.embeddings, emb.clone()).unwrap();
    let tape = Tape::new();
    let p = store.bind(&tape);
    let q = book.quantize(tape.var(z.clone()), p.get(book.embeddings)).unwrap();
    (
        q.indices.clone(),
        q.z_q.value().data().to_vec(),
        q.straight_through.value().data().to_vec(),
        q.codebook_loss.item(),
        q.commitment_loss.item(),
        book.usage_counts().to_vec(),
    )
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn quantizer_picks_a_nearest_row(inst in instance()) {
        let (k, d) = (inst.emb.shape()[0], inst.emb.shape()[1]);
        let (indices, _, _, _, _, usage) = quantize_values(&inst.z, &inst.emb);
        let [n, _, h, w]: [usize; 4] = inst.z.shape().try_into().unwrap();
        prop_assert_eq!(usage.iter().sum::<u64>() as usize, n * h * w);
        for (m, &idx) in indices.iter().enumerate() {
            let (ni, s) = (m / (h * w), m % (h * w));
            let dist = |j: usize| (0..d)
                .map(|c| (inst.z.data()[(ni * d + c) * h * w + s] - inst.emb.data()[j * d + c]).powi(2))
                .sum::<f64>();
            let best = dist(idx);
            prop_assert!((0..k).all(|j| dist(j) >= best));
        }
    }

    #[test]
    fn straight_through_passes_upstream_gradient(inst in instance(), seed in any::<u64>()) {
        let (k, d) = (inst.emb.shape()[0], inst.emb.shape()[1]);
        let mut store = ParamStore::new();
        let mut book = Codebook::new(&mut store, "cb", k, d, &mut rng(0)).unwrap();
        store.set(book.embeddings, inst.emb.clone()).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let z = tape.var(inst.z.clone());
        let q = book.quantize(z, p.get(book.embeddings)).unwrap();
        let g = Tensor::randn(inst.z.shape(), &mut rng(seed));
        let loss = q.straight_through.mul(tape.constant(g.clone())).unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        let gz = grads.wrt(z);
        prop_assert_eq!(gz.data(), g.data());
        prop_assert!(grads.wrt(p.get(book.embeddings)).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn codebook_row_permutation_permutes_indices(inst in instance(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let (k, d) = (inst.emb.shape()[0], inst.emb.shape()[1]);
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng(seed));
        // new row j holds old row perm[j]
        let permuted = Tensor::from_fn(&[k, d], |i| inst.emb.data()[perm[i / d] * d + i % d]);
        let a = quantize_values(&inst.z, &inst.emb);
        let b = quantize_values(&inst.z, &permuted);
        for (&ia, &ib) in a.0.iter().zip(&b.0) {
            prop_assert_eq!(perm[ib], ia);
        }
        prop_assert_eq!(a.1, b.1);
        prop_assert_eq!(a.2, b.2);
        prop_assert_eq!(a.3, b.3);
        prop_assert_eq!(a.4, b.4);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn perceptual_is_nonnegative_symmetric_and_zero_on_diagonal(seed in any::<u64>()) {
        let mut r = rng(seed);
        let ex = SeededExtractor::default();
        let x = Tensor::uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut r);
        let y = Tensor::uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut r);
        let tape = Tape::new();
        let (xv, yv) = (tape.constant(x), tape.constant(y));
        let xy = losses::perceptual_distance(xv, yv, &ex).unwrap().item();
        let yx = losses::perceptual_distance(yv, xv, &ex).unwrap().item();
        let xx = losses::perceptual_distance(xv, xv, &ex).unwrap().item();
        prop_assert!(xy >= 0.0);
        prop_assert!((xy - yx).abs() <= 1e-12 * xy.max(1.0));
        prop_assert_eq!(xx, 0.0);
    }

    #[test]
    fn lambda_is_invariant_to_common_loss_scale(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut r = rng(seed);
        let x = Tensor::uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut r);
        let t = Tensor::uniform(&[1, 3, 3, 3], -1.0, 1.0, &mut r);
        let v = Tensor::uniform(&[1, 3, 3, 3], -1.0, 1.0, &mut r);
        let w0 = Tensor::uniform(&[3, 2, 1, 1], -1.0, 1.0, &mut r);
        let weights = LossWeights { lambda_eps: 0.0, ..Default::default() };
        let lambda = |c: f64| {
            let tape = Tape::new();
            let w = tape.var(w0.clone());
            let out = tape.constant(x.clone()).conv2d(w, None, 1, 0).unwrap();
            let rec = losses::reconstruction_l1(tape.constant(t.clone()), out).unwrap().scale(c);
            let gan = losses::generator_adversarial_loss(out.mul(tape.constant(v.clone())).unwrap()).scale(c);
            losses::calculate_lambda(&tape, rec, gan, w, &weights).unwrap()
        };
        let (a, b) = (lambda(1.0), lambda(scale));
        prop_assert!(((a - b) / a).abs() < 1e-12, "{} vs {}", a, b);
    }

    #[test]
    fn vq_loss_vanishes_on_perfect_reconstruction(seed in any::<u64>()) {
        let x = Tensor::uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut rng(seed));
        let tape = Tape::new();
        let xv = tape.constant(x);
        let zero = tape.constant(Tensor::scalar(0.0));
        prop_assert_eq!(losses::vq_loss(xv, xv, zero, zero, &LossWeights::default()).unwrap().item(), 0.0);
    }
}

fn images(seed: u64, m: usize, c: usize, h: usize, w: usize) -> Vec<Tensor> {
    let mut r = rng(seed);
    (0..m).map(|_| Tensor::uniform(&[c, h, w], -1.0, 1.0, &mut r)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pca_components_are_orthonormal_and_ordered(seed in any::<u64>(), m in 2usize..12, h in 1usize..4, w in 1usize..4) {
        let model = PcaModel::fit(&images(seed, m, 3, h, w), None).unwrap();
        for ch in &model.channels {
            for (i, a) in ch.components.iter().enumerate() {
                for (j, b) in ch.components.iter().enumerate() {
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((dot - want).abs() < 1e-10);
                }
            }
            prop_assert!(ch.eigenvalues.windows(2).all(|p| p[0] >= p[1]));
            prop_assert!(ch.explained_variance_ratio.iter().sum::<f64>() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn pca_projection_is_idempotent_and_monotone(seed in any::<u64>(), m in 3usize..10) {
        let imgs = images(seed, m, 3, 3, 3);
        let model = PcaModel::fit(&imgs, None).unwrap();
        for img in &imgs {
            let mut prev = f64::INFINITY;
            for n in 1..=model.n_max {
                let once = model.reconstruct(img, n).unwrap();
                let twice = model.reconstruct(&once, n).unwrap();
                for (a, b) in once.data().iter().zip(twice.data()) {
                    prop_assert!((a - b).abs() < 1e-8);
                }
                let err: f64 = once.data().iter().zip(img.data()).map(|(a, b)| (a - b).powi(2)).sum();
                prop_assert!(err <= prev + 1e-10);
                prev = err;
            }
        }
    }

    #[test]
    fn pca_channel_permutation_permutes_models(seed in any::<u64>(), m in 2usize..8) {
        let imgs = images(seed, m, 3, 2, 3);
        let order = [2usize, 0, 1];
        let permuted: Vec<Tensor> = imgs
            .iter()
            .map(|t| Tensor::from_fn(&[3, 2, 3], |i| t.data()[order[i / 6] * 6 + i % 6]))
            .collect();
        let a = PcaModel::fit(&imgs, None).unwrap();
        let b = PcaModel::fit(&permuted, None).unwrap();
        for (new, &old) in order.iter().enumerate() {
            prop_assert_eq!(&b.channels[new], &a.channels[old]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn codec_mirrors_shape_and_counts_params_purely(
        seed in any::<u64>(),
        size_pow in 3u32..5,
        nd in 1usize..3,
        d in 1usize..5,
        pe in any::<bool>(),
        small in any::<bool>(),
    ) {
        let cfg = ModelConfig {
            image_size: 1 << size_pow,
            base_channels: 4,
            channel_multipliers: vec![1, 2, 2],
            num_downsamples: nd,
            latent_dim: d,
            codebook_size: 5,
            use_positional_encoding: pe,
            small_network: small,
            attn_at_resolutions: vec![],
            ..ModelConfig::desk()
        };
        prop_assert_eq!(parameter_count(&cfg).unwrap(), parameter_count(&cfg).unwrap());
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&cfg, &mut store, &mut r).unwrap();
        let dec = Decoder::new(&cfg, &mut store, &mut r).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let shape = [2, 3, cfg.image_size, cfg.image_size];
        let z = enc.forward(&p, tape.constant(Tensor::uniform(&shape, -1.0, 1.0, &mut r)), true, &mut r).unwrap();
        prop_assert_eq!(z.shape(), vec![2, d, cfg.latent_size(), cfg.latent_size()]);
        let out = dec.forward(&p, z, true, &mut r).unwrap();
        prop_assert_eq!(out.shape(), shape.to_vec());
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>(), n in 0usize..4, draws in 0usize..50) {
        use rand::RngCore;
        let mut r = rng(seed);
        for _ in 0..draws {
            r.next_u32();
        }
        let tensors = (0..n)
            .map(|i| (format!("gen/t{i}"), Tensor::randn(&[i + 1, 2], &mut r)))
            .collect();
        let ck = Checkpoint {
            spec: ExperimentSpec::toy("rt", seed, 3),
            epoch: seed % 7,
            step: seed % 1000,
            rng: RngState::capture(&r),
            gen_opt_step: 3,
            disc_opt_step: 1,
            usage: (0..32).map(|i| (i ^ seed) % 5).collect(),
            tensors,
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(back.rng.restore().next_u64(), r.clone().next_u64());
    }

    #[test]
    fn resize_keeps_constant_images_constant(v in -1.0f64..1.0, h in 1usize..9, w in 1usize..9, oh in 1usize..9, ow in 1usize..9) {
        let out = resize_bilinear(&Tensor::full(&[3, h, w], v), oh, ow).unwrap();
        prop_assert_eq!(out.shape(), &[3, oh, ow]);
        prop_assert!(out.data().iter().all(|x| (x - v).abs() < 1e-15));
    }

    #[test]
    fn metrics_rows_round_trip(vals in proptest::collection::vec(-1e6f64..1e6, 10), epoch in 0usize..1000) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let b = LossBreakdown {
            rec_l1: vals[0],
            perceptual: vals[1],
            commitment: vals[2],
            codebook: vals[3],
            vq: vals[4],
            vq_core: vals[5],
            gan_generator: vals[6],
            lambda_value: vals[7],
            total: vals[8],
            ..Default::default()
        };
        let rows = vec![
            MetricsRow::new("exp", epoch, Split::Train, &b, vals[9]),
            MetricsRow::new("exp", epoch, Split::Val, &b, 0.5),
        ];
        let mut w = MetricsWriter::create(&path).unwrap();
        for row in &rows {
            w.append(row).unwrap();
        }
        drop(w);
        prop_assert_eq!(read_metrics(&path).unwrap(), rows);
    }
}
