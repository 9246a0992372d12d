use descattn_core::aggregator::{masked_keyframes, Aggregator, AggregatorConfig, GlobalMode};
use descattn_core::analysis::{abs_diff, cache_tokens, compare_flops, key_count};
use descattn_core::attention::{multi_head_attention, AttentionMask, MaskMode};
use descattn_core::compression::{AuxGroups, Compression, CompressionMethod, KeyframeMethod, KeyframeSelector};
use descattn_core::rng::Rng;
use descattn_core::streaming::{run_stream, StreamConfig, Streamer};
use descattn_core::tokens::generate_synthetic;
use descattn_core::{FrameLayout, Matrix};
use proptest::prelude::*;

fn small_layout(h: usize, w: usize, special: bool) -> FrameLayout {
    FrameLayout {
        height: h,
        width: w,
        n_camera: usize::from(special),
        n_register: if special { 2 } else { 0 },
        channels: 8,
    }
}

fn random(rows: usize, cols: usize, rng: &mut Rng) -> Matrix<f64> {
    let v: Vec<f64> = (0..rows * cols).map(|_| rng.normal()).collect();
    Matrix::from_f64(rows, cols, &v).unwrap()
}

fn aux_strategy() -> impl Strategy<Value = AuxGroups> {
    (any::<bool>(), any::<bool>(), any::<bool>()).prop_map(|(camera_register, first_frame, keyframes)| AuxGroups {
        camera_register,
        first_frame,
        keyframes,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attention_ignores_repeated_keys(q in 1usize..9, k in 1usize..9, copies in 2usize..4, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let (qm, km, vm) = (random(q, 8, &mut rng), random(k, 8, &mut rng), random(k, 8, &mut rng));
        let mask = AttentionMask::none();
        let (a, _) = multi_head_attention(&qm, &km, &vm, 2, &vec![0; q], &vec![0; k], &mask).unwrap();
        let kk = Matrix::vstack(&vec![&km; copies]).unwrap();
        let vv = Matrix::vstack(&vec![&vm; copies]).unwrap();
        let (b, _) = multi_head_attention(&qm, &kk, &vv, 2, &vec![0; q], &vec![0; k * copies], &mask).unwrap();
        prop_assert!(abs_diff(a.data(), b.data()).0 <= 1e-12);
    }

    #[test]
    fn core_ratio_is_token_ratio(
        h in 2usize..10, w in 2usize..10, r in 1usize..4, frames in 1usize..40,
        interval in 1usize..12, special in any::<bool>(), aux in aux_strategy(),
    ) {
        prop_assume!(r <= h.min(w));
        let cfg = AggregatorConfig {
            layers: 2,
            heads: 2,
            layout: small_layout(h, w, special),
            compression: Compression { method: CompressionMethod::Avgpool, ratio: r },
            aux,
            keyframes: KeyframeSelector { interval, ..Default::default() },
            ..Default::default()
        };
        let c = compare_flops(&cfg, frames);
        let (k, kd) = (c.descriptor.tokens as u128, c.descriptor.keys as u128);
        prop_assert_eq!(c.dense.attention_core() * kd, c.descriptor.attention_core() * k);
        if !aux.any() && !special && h % r == 0 && w % r == 0 {
            prop_assert_eq!(c.dense.attention_core(), (r * r) as u128 * c.descriptor.attention_core());
        }
    }

    #[test]
    fn blocked_keyframes_match_count(
        frames in 1usize..30, block in 1usize..10, interval in 1usize..8, method in 0usize..3, seed in any::<u64>(),
    ) {
        let sel = KeyframeSelector { method: KeyframeMethod::ALL[method], interval, seed };
        let t = generate_synthetic::<f32>(frames, small_layout(2, 2, false), seed).unwrap();
        let picked = masked_keyframes(&t, &sel, MaskMode::BlockCausal { block }).unwrap();
        prop_assert_eq!(picked.len(), sel.count_blocked(frames, block));
        prop_assert!(picked.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(picked.iter().all(|&f| f < frames));
        prop_assert_eq!(masked_keyframes(&t, &sel, MaskMode::None).unwrap().len(), sel.count(frames));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn live_cache_matches_closed_form(
        frames in 1usize..14, chunk in 1usize..6, retain in 1usize..5, r in 1usize..3,
        persist in any::<bool>(), aux in aux_strategy(), seed in any::<u64>(),
    ) {
        let cfg = StreamConfig {
            chunk,
            retain,
            persist_first_frame: persist,
            base: AggregatorConfig {
                layers: 1,
                heads: 2,
                layout: small_layout(4, 4, true),
                compression: Compression { method: CompressionMethod::Bilinear, ratio: r },
                aux,
                keyframes: KeyframeSelector { interval: 3, ..Default::default() },
                seed,
                ..Default::default()
            },
        };
        let t = generate_synthetic::<f32>(frames, cfg.base.layout, seed).unwrap();
        let mut s = Streamer::<f32>::new(cfg).unwrap();
        s.run(&t).unwrap();
        prop_assert_eq!(s.cache().token_count(0), cache_tokens(&cfg, frames).total);
    }

    #[test]
    fn later_frames_never_reach_earlier_outputs(
        frames in 2usize..8, block in 1usize..4, dense in any::<bool>(), seed in any::<u64>(),
    ) {
        prop_assume!(block < frames);
        let cfg = AggregatorConfig {
            layers: 1,
            heads: 2,
            layout: small_layout(4, 4, true),
            compression: Compression { method: CompressionMethod::Bilinear, ratio: 2 },
            global_mode: if dense { GlobalMode::Dense } else { GlobalMode::Descriptor },
            mask: MaskMode::BlockCausal { block },
            keyframes: KeyframeSelector { interval: 2, ..Default::default() },
            seed,
            ..Default::default()
        };
        let t = generate_synthetic::<f32>(frames, cfg.layout, seed).unwrap();
        let mut p = t.clone();
        for f in block..frames {
            p = p.map_frame(f, |v| 2.0 - v).unwrap();
        }
        let agg = Aggregator::<f32>::new(cfg).unwrap();
        let (a, b) = (agg.forward_offline(&t).unwrap(), agg.forward_offline(&p).unwrap());
        let n = block * t.tokens_per_frame() * t.channels();
        prop_assert!(abs_diff(&a.data()[..n], &b.data()[..n]).0 <= 1e-6);
        prop_assert_eq!(key_count(&cfg, frames), agg.forward_traced(&t).unwrap().bundles.first().map_or(t.total_tokens(), |b| b.len()));

        let stream = StreamConfig { chunk: block, retain: 1, persist_first_frame: true, base: cfg };
        let (a, b) = (run_stream(&t, &stream).unwrap(), run_stream(&p, &stream).unwrap());
        prop_assert!(abs_diff(&a.data()[..n], &b.data()[..n]).0 <= 1e-6);
    }
}
