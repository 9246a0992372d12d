//! Named invariant checks across every module.
//!
//! Each check builds its own small seeded instance from the verification
//! seed and returns a one-line detail on success.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregator::{Aggregator, AggregatorConfig};
use crate::analysis::{
    abs_diff, block_causal_core_flops, compare_flops, compare_layer_outputs, compare_modes, flops_attention,
    memory_model, paper_scale_claim, streaming_core_flops,
};
use crate::attention::{
    dense_global_attention, descriptor_attention, multi_head_attention, AttentionMask, BlockWeights, MaskMode,
};
use crate::bench::{sweep, BenchMode, BenchRun, BenchSpec, SweepAxes};
use crate::compression::{
    build_bundle, lloyd, select_keyframes, top_k_by_norm, AuxGroups, Compression, CompressionMethod, Compressor,
    DescriptorKind, KeyframeMethod, KeyframeSelector,
};
use crate::rng::Rng;
use crate::streaming::{run_stream, StreamConfig, Streamer};
use crate::tensor::{half_pixel_source, layer_norm, matmul, resample_bilinear, stable_softmax_rows, LAYER_NORM_EPS};
use crate::tokens::{generate_synthetic, load_dump, save_dump};
use crate::{FrameLayout, Grid, Matrix, Scalar, TokenTensor};

type CheckResult = std::result::Result<String, String>;
type CheckFn = fn(u64) -> CheckResult;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub millis: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub checks: Vec<CheckOutcome>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            s.push_str(&format!(
                "{} {:<42} {:>9.1} ms  {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.millis,
                c.detail
            ));
        }
        let failed = self.failures().count();
        s.push_str(&format!("{} checks, {} failed (seed {})\n", self.checks.len(), failed, self.seed));
        s
    }
}

pub const CHECKS: &[(&str, CheckFn)] = &[
    ("tensor.matmul_identity", matmul_identity),
    ("tensor.softmax_rows_sum_to_one", softmax_rows_sum_to_one),
    ("tensor.softmax_shift_invariance", softmax_shift_invariance),
    ("tensor.bilinear_exact_on_affine", bilinear_exact_on_affine),
    ("tensor.kernels_pure", kernels_pure),
    ("tokens.k_equals_s_times_n", k_equals_s_times_n),
    ("tokens.global_flatten_roundtrip", global_flatten_roundtrip),
    ("tokens.dump_roundtrip", dump_roundtrip),
    ("compression.descriptor_count", descriptor_count),
    ("compression.avgpool_preserves_mean", avgpool_preserves_mean),
    ("compression.lloyd_objective_nonincreasing", lloyd_nonincreasing),
    ("compression.keyframe_count", keyframe_count),
    ("compression.topk_order_stable", topk_order_stable),
    ("compression.provenance_partition", provenance_partition),
    ("attention.oracle_equivalence", oracle_equivalence),
    ("attention.key_duplication_invariance", key_duplication),
    ("attention.block_causal_independence", block_causal_independence),
    ("attention.probability_rows_sum_to_one", probability_rows),
    ("aggregator.mode_equivalence_every_layer", mode_equivalence_every_layer),
    ("aggregator.descriptors_recomputed_per_layer", descriptors_recomputed),
    ("aggregator.deterministic", aggregator_deterministic),
    ("streaming.first_chunk_equals_offline", first_chunk_offline),
    ("streaming.single_chunk_equals_offline", single_chunk_offline),
    ("streaming.block_causal_equivalence", streaming_block_causal),
    ("streaming.causality", streaming_causality),
    ("streaming.memory_law", memory_law),
    ("streaming.sublinear_growth", sublinear_growth),
    ("analysis.core_ratio_is_k_over_kd", core_ratio),
    ("analysis.totals_are_sums", totals_are_sums),
    ("analysis.memory_model_matches_cache", memory_model_matches_cache),
    ("analysis.chunking_preserves_core_flops", chunking_core_flops),
    ("analysis.paper_scale_reduction", paper_scale_reduction),
    ("analysis.self_comparison_is_zero", self_comparison),
    ("bench.repeat_determinism", bench_determinism),
    ("bench.flops_nonincreasing_in_ratio", bench_flops_monotone),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

/// Runs the checks whose name starts with any of `filters` (all when empty).
pub fn run_verify(seed: u64, filters: &[String]) -> VerifyReport {
    let selected: Vec<&(&str, CheckFn)> = CHECKS
        .iter()
        .filter(|(n, _)| filters.is_empty() || filters.iter().any(|f| n.starts_with(f.as_str())))
        .collect();
    let checks = selected
        .par_iter()
        .map(|(name, f)| {
            let start = Instant::now();
            let res = std::panic::catch_unwind(|| f(seed)).unwrap_or_else(|_| Err("check panicked".into()));
            let millis = start.elapsed().as_secs_f64() * 1e3;
            let (passed, detail) = match res {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckOutcome {
                name: name.to_string(),
                passed,
                detail,
                millis,
            }
        })
        .collect();
    VerifyReport { seed, checks }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn plain(h: usize, w: usize, c: usize) -> FrameLayout {
    FrameLayout {
        height: h,
        width: w,
        n_camera: 0,
        n_register: 0,
        channels: c,
    }
}

fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Matrix<f64> {
    let v: Vec<f64> = (0..rows * cols).map(|_| rng.normal() * scale).collect();
    Matrix::from_f64(rows, cols, &v).expect("shape")
}

fn frame_diff<T: Scalar>(a: &TokenTensor<T>, b: &TokenTensor<T>, frames: std::ops::Range<usize>) -> f64 {
    let n = a.tokens_per_frame() * a.channels();
    abs_diff(&a.data()[frames.start * n..frames.end * n], &b.data()[frames.start * n..frames.end * n]).0
}

fn matmul_identity(seed: u64) -> CheckResult {
    let mut rng = Rng::new(seed);
    let a = random_matrix(5, 7, 1.0, &mut rng);
    let left = matmul(&Matrix::identity(5), &a).map_err(err)?;
    let right = matmul(&a, &Matrix::identity(7)).map_err(err)?;
    ensure(left == a && right == a, || "identity product differs from A".into())?;
    Ok("I·A = A·I = A bitwise".into())
}

fn softmax_rows_sum_to_one(seed: u64) -> CheckResult {
    let mut rng = Rng::new(seed);
    let mut m = random_matrix(20, 33, 10.0, &mut rng);
    m.row_mut(0).iter_mut().for_each(|v| *v += 1e4);
    let s = stable_softmax_rows(&m);
    let worst = (0..s.rows())
        .map(|r| (s.row(r).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    ensure(worst <= 1e-6, || format!("row sum off by {worst:e}"))?;
    Ok(format!("max |sum-1| = {worst:.1e}"))
}

fn softmax_shift_invariance(seed: u64) -> CheckResult {
    let mut rng = Rng::new(seed);
    let m = random_matrix(10, 17, 5.0, &mut rng);
    let shifted = m.map(|v| v + 123.456);
    let d = abs_diff(stable_softmax_rows(&m).data(), stable_softmax_rows(&shifted).data()).0;
    ensure(d <= 1e-6, || format!("shift changed probabilities by {d:e}"))?;
    Ok(format!("max diff {d:.1e}"))
}

fn bilinear_exact_on_affine(seed: u64) -> CheckResult {
    let mut rng = Rng::new(seed);
    let coef: Vec<[f64; 3]> = (0..3).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect();
    let f = |i: f64, j: f64, c: usize| coef[c][0] + coef[c][1] * i + coef[c][2] * j;
    let grid: Grid<f64> = Grid::from_fn(9, 12, 3, |i, j, c| f(i as f64, j as f64, c));
    let mut worst = 0.0f64;
    for (oh, ow) in [(9, 12), (4, 6), (3, 5), (2, 3), (1, 1)] {
        let out = resample_bilinear(&grid, oh, ow).map_err(err)?;
        for i in 0..oh {
            for j in 0..ow {
                let (si, sj) = (half_pixel_source(i, 9, oh), half_pixel_source(j, 12, ow));
                for c in 0..3 {
                    worst = worst.max((out.token(i, j)[c] - f(si, sj, c)).abs());
                }
            }
        }
    }
    ensure(worst <= 1e-6, || format!("affine field off by {worst:e}"))?;
    Ok(format!("max error {worst:.1e} over 5 target sizes"))
}

fn kernels_pure(seed: u64) -> CheckResult {
    let mut rng = Rng::new(seed);
    let x = random_matrix(6, 8, 1.0, &mut rng).cast::<f32>();
    let w = random_matrix(8, 8, 1.0, &mut rng).cast::<f32>();
    let g = vec![1.0f32; 8];
    let b = vec![0.0f32; 8];
    let run = || -> crate::Result<Matrix<f32>> {
        let n = layer_norm(&x, &g, &b, LAYER_NORM_EPS)?;
        Ok(stable_softmax_rows(&matmul(&n, &w)?))
    };
    ensure(run().map_err(err)? == run().map_err(err)?, || "repeated calls differ".into())?;
    Ok("layer_norm → matmul → softmax repeatable bitwise".into())
}

fn k_equals_s_times_n(seed: u64) -> CheckResult {
    for (s, layout) in [(1, FrameLayout::desk()), (5, plain(3, 4, 6)), (3, FrameLayout::paper_scale(2))] {
        let t = generate_synthetic::<f32>(s, layout, seed).map_err(err)?;
        ensure(t.total_tokens() == s * layout.tokens_per_frame(), || "K != S·N".into())?;
        ensure(t.data().len() == t.total_tokens() * layout.channels, || "data length != K·C".into())?;
    }
    Ok("3 layouts".into())
}

fn global_flatten_roundtrip(seed: u64) -> CheckResult {
    let t = generate_synthetic::<f32>(4, FrameLayout::desk(), seed).map_err(err)?;
    let back = TokenTensor::from_global(4, t.layout(), t.to_global()).map_err(err)?;
    ensure(back == t, || "flatten/unflatten changed the tensor".into())?;
    Ok("bitwise".into())
}

fn dump_roundtrip(seed: u64) -> CheckResult {
    let t32 = generate_synthetic::<f32>(3, FrameLayout::desk(), seed).map_err(err)?;
    let t64 = generate_synthetic::<f64>(3, FrameLayout::desk(), seed).map_err(err)?;
    ensure(load_dump::<f32>(&save_dump(&t32)).map_err(err)? == t32, || "f32 dump differs".into())?;
    ensure(load_dump::<f64>(&save_dump(&t64)).map_err(err)? == t64, || "f64 dump differs".into())?;
    ensure(load_dump::<f64>(&save_dump(&t32)).is_err(), || "width mismatch accepted".into())?;
    Ok("f32 and f64".into())
}

fn descriptor_count(seed: u64) -> CheckResult {
    let mut cases = 0;
    for (h, w) in [(8, 8), (9, 7), (5, 12)] {
        let grid: Grid<f32> = Grid::from_fn(h, w, 4, |i, j, c| ((i * 31 + j * 7 + c) as f64 + seed as f64).sin());
        for method in CompressionMethod::ALL {
            for r in 1..=h.min(w) {
                let comp = Compressor::<f32>::new(Compression { method, ratio: r }, 4, seed);
                let out = comp.compress_frame(&grid).map_err(err)?;
                let got = out.grid.height() * out.grid.width();
                ensure(got == (h / r) * (w / r) && out.sources.len() == got, || {
                    format!("{method} r={r} on {h}x{w}: {got} descriptors")
                })?;
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} method/ratio/grid cases"))
}

fn avgpool_preserves_mean(seed: u64) -> CheckResult {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for r in [1, 2, 4, 8] {
        let vals: Vec<f64> = (0..8 * 16 * 3).map(|_| rng.normal()).collect();
        let grid = Grid::<f64>::from_vec(8, 16, 3, vals).map_err(err)?;
        let comp = Compressor::<f64>::new(Compression { method: CompressionMethod::Avgpool, ratio: r }, 3, 0);
        let out = comp.compress_frame(&grid).map_err(err)?;
        for c in 0..3 {
            let mean = |g: &Grid<f64>| g.data().iter().skip(c).step_by(3).sum::<f64>() / (g.height() * g.width()) as f64;
            worst = worst.max((mean(&grid) - mean(&out.grid)).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("mean drift {worst:e}"))?;
    Ok(format!("max drift {worst:.1e}"))
}

fn lloyd_nonincreasing(seed: u64) -> CheckResult {
    let mut rng = Rng::new(seed);
    let mut iterations = 0;
    for k in 1..=6 {
        let points: Vec<Vec<f64>> = (0..40).map(|_| (0..4).map(|_| rng.normal() * 2.0).collect()).collect();
        let km = lloyd(&points, k);
        for w in km.objective_history.windows(2) {
            ensure(w[1] <= w[0] * (1.0 + 1e-12), || format!("k={k}: objective rose {} -> {}", w[0], w[1]))?;
        }
        iterations += km.objective_history.len();
    }
    Ok(format!("{iterations} recorded objectives"))
}

fn keyframe_count(seed: u64) -> CheckResult {
    let layout = plain(2, 2, 3);
    let t = generate_synthetic::<f32>(30, layout, seed).map_err(err)?;
    let mut cases = 0;
    for s in 1..=30 {
        let ts = t.slice_frames(0..s).map_err(err)?;
        for interval in [1, 3, 7, 10, 200] {
            for method in KeyframeMethod::ALL {
                let sel = KeyframeSelector { method, interval, seed };
                let kf = select_keyframes(&ts, &sel).map_err(err)?;
                let mut dedup = kf.clone();
                dedup.dedup();
                ensure(
                    kf.len() == s.div_ceil(interval) && dedup.len() == kf.len() && kf.iter().all(|&f| f < s),
                    || format!("{} S={s} interval={interval}: {kf:?}", method.name()),
                )?;
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} cases"))
}

fn topk_order_stable(seed: u64) -> CheckResult {
    let mut rng = Rng::new(seed);
    let norms: Vec<f64> = (0..20).map(|_| rng.uniform() * 5.0).collect();
    let grid = Grid::<f64>::from_fn(4, 5, 1, |i, j, _| norms[i * 5 + j]);
    let picked = top_k_by_norm(&grid, 6);
    let mut expected: Vec<usize> = (0..20).collect();
    expected.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let mut expected: Vec<usize> = expected.into_iter().take(6).collect();
    expected.sort_unstable();
    ensure(picked == expected, || format!("picked {picked:?}, expected {expected:?}"))?;
    let ties = Grid::<f64>::from_fn(2, 3, 1, |_, _, _| 1.0);
    ensure(top_k_by_norm(&ties, 2) == vec![0, 1], || "ties not resolved to lower index".into())?;
    Ok("selection and row-major order match brute force".into())
}

fn provenance_partition(seed: u64) -> CheckResult {
    let layout = FrameLayout::desk();
    let t = generate_synthetic::<f32>(7, layout, seed).map_err(err)?;
    let sel = KeyframeSelector {
        interval: 3,
        ..Default::default()
    };
    let comp = Compressor::new(Compression::default(), layout.channels, seed);
    let b = build_bundle(&t, &comp, &sel, AuxGroups::all()).map_err(err)?;
    let kinds = [
        DescriptorKind::Compressed,
        DescriptorKind::Camera,
        DescriptorKind::Register,
        DescriptorKind::FirstFramePatch,
        DescriptorKind::KeyframePatch,
    ];
    let sum: usize = kinds.iter().map(|&k| b.count(k)).sum();
    ensure(b.provenance.len() == b.descriptors.rows() && sum == b.len(), || "provenance is not a partition".into())?;
    let expected = crate::compression::bundle_size(&layout, &Compression::default(), 7, 3, AuxGroups::all());
    ensure(b.len() == expected, || format!("bundle has {} rows, expected {expected}", b.len()))?;
    Ok(format!("{} descriptors", b.len()))
}

fn oracle_instance<T: Scalar>(frames: usize, seed: u64) -> Result<(f64, usize), String> {
    let layout = plain(8, 8, 32);
    let t = generate_synthetic::<T>(frames, layout, seed).map_err(err)?;
    let w = BlockWeights::<f64>::seeded(32, 4, &mut Rng::new(seed)).map_err(err)?.cast::<T>();
    let comp = Compressor::new(Compression { method: CompressionMethod::Bilinear, ratio: 1 }, 32, 0);
    let b = build_bundle(&t, &comp, &KeyframeSelector::default(), AuxGroups::none()).map_err(err)?;
    let mask = AttentionMask::none();
    let dense = dense_global_attention(&t, &w, &mask).map_err(err)?;
    let desc = descriptor_attention(&t, &b, &w, &mask).map_err(err)?;
    Ok((abs_diff(dense.data(), desc.data()).0, t.total_tokens()))
}

fn oracle_equivalence(seed: u64) -> CheckResult {
    let mut worst = (0.0f64, 0.0f64);
    for frames in [2, 4, 8] {
        worst.0 = worst.0.max(oracle_instance::<f32>(frames, seed)?.0);
        worst.1 = worst.1.max(oracle_instance::<f64>(frames, seed)?.0);
    }
    ensure(worst.0 <= 1e-5 && worst.1 <= 1e-10, || format!("f32 {:e}, f64 {:e}", worst.0, worst.1))?;
    Ok(format!("f32 {:.1e}, f64 {:.1e}", worst.0, worst.1))
}

fn key_duplication(seed: u64) -> CheckResult {
    let layout = FrameLayout::desk();
    let t = generate_synthetic::<f32>(3, layout, seed).map_err(err)?;
    let w = BlockWeights::<f64>::seeded(32, 4, &mut Rng::new(seed)).map_err(err)?.cast();
    let comp = Compressor::new(Compression::default(), 32, seed);
    let b = build_bundle(&t, &comp, &KeyframeSelector { interval: 2, ..Default::default() }, AuxGroups::all())
        .map_err(err)?;
    let mut doubled = b.clone();
    doubled.extend(&b).map_err(err)?;
    let mask = AttentionMask::none();
    let a = descriptor_attention(&t, &b, &w, &mask).map_err(err)?;
    let d = descriptor_attention(&t, &doubled, &w, &mask).map_err(err)?;
    let diff = abs_diff(a.data(), d.data()).0;
    ensure(diff <= 1e-6, || format!("duplication changed output by {diff:e}"))?;
    Ok(format!("max diff {diff:.1e}"))
}

fn block_causal_independence(seed: u64) -> CheckResult {
    let layout = FrameLayout::desk();
    let t = generate_synthetic::<f32>(6, layout, seed).map_err(err)?;
    let mut p = t.clone();
    for f in 2..6 {
        p = p.map_frame(f, |v| 3.0 * v - 1.0).map_err(err)?;
    }
    let w = BlockWeights::<f64>::seeded(32, 4, &mut Rng::new(seed)).map_err(err)?.cast();
    let mask = AttentionMask::from_mode(MaskMode::BlockCausal { block: 2 }, 6).map_err(err)?;
    let a = dense_global_attention(&t, &w, &mask).map_err(err)?;
    let b = dense_global_attention(&p, &w, &mask).map_err(err)?;
    let d = frame_diff(&a, &b, 0..2);
    ensure(d <= 1e-6, || format!("frames 0..2 moved by {d:e}"))?;
    Ok(format!("max diff {d:.1e}"))
}

fn probability_rows(seed: u64) -> CheckResult {
    let mut rng = Rng::new(seed);
    let q = random_matrix(9, 8, 3.0, &mut rng).cast::<f32>();
    let k = random_matrix(13, 8, 3.0, &mut rng).cast::<f32>();
    // with V all ones every output channel is a probability row sum
    let v = Matrix::<f32>::from_f64(13, 8, &[1.0; 104]).map_err(err)?;
    let (out, _) = multi_head_attention(&q, &k, &v, 4, &[0; 9], &[0; 13], &AttentionMask::none()).map_err(err)?;
    let worst = out.data().iter().map(|x| (x - 1.0).abs() as f64).fold(0.0, f64::max);
    ensure(worst <= 1e-6, || format!("row sum off by {worst:e}"))?;
    Ok(format!("max |sum-1| = {worst:.1e}"))
}

fn mode_equivalence_every_layer(seed: u64) -> CheckResult {
    let cfg = AggregatorConfig {
        layers: 4,
        layout: plain(8, 8, 32),
        aux: AuxGroups::none(),
        compression: Compression {
            ratio: 1,
            ..Default::default()
        },
        seed,
        ..Default::default()
    };
    let t = generate_synthetic::<f32>(4, cfg.layout, seed).map_err(err)?;
    let rep = compare_modes(&t, &cfg).map_err(err)?;
    for l in &rep.per_layer {
        ensure(l.max_abs <= 1e-5 * (l.layer + 1) as f64, || format!("layer {}: {:e}", l.layer, l.max_abs))?;
    }
    Ok(format!("final max {:.1e}", rep.final_max_abs))
}

fn descriptors_recomputed(seed: u64) -> CheckResult {
    let cfg = AggregatorConfig {
        layers: 3,
        seed,
        ..Default::default()
    };
    let t = generate_synthetic::<f32>(3, cfg.layout, seed).map_err(err)?;
    let tr = Aggregator::<f32>::new(cfg).map_err(err)?.forward_traced(&t).map_err(err)?;
    for w in tr.bundles.windows(2) {
        ensure(w[0].descriptors != w[1].descriptors, || "two layers share a bundle".into())?;
    }
    Ok(format!("{} distinct bundles", tr.bundles.len()))
}

fn aggregator_deterministic(seed: u64) -> CheckResult {
    let cfg = AggregatorConfig {
        seed,
        keyframes: KeyframeSelector {
            interval: 2,
            ..Default::default()
        },
        ..Default::default()
    };
    let t = generate_synthetic::<f32>(5, cfg.layout, seed).map_err(err)?;
    let a = Aggregator::<f32>::new(cfg).map_err(err)?.forward_offline(&t).map_err(err)?;
    let b = Aggregator::<f32>::new(cfg).map_err(err)?.forward_offline(&t).map_err(err)?;
    ensure(a == b, || "two runs differ".into())?;
    Ok("bitwise".into())
}

fn stream_cfg(chunk: usize, retain: usize, aux: AuxGroups, seed: u64) -> StreamConfig {
    StreamConfig {
        chunk,
        retain,
        persist_first_frame: true,
        base: AggregatorConfig {
            aux,
            seed,
            ..Default::default()
        },
    }
}

const AUX_NO_KEYFRAMES: AuxGroups = AuxGroups {
    camera_register: true,
    first_frame: true,
    keyframes: false,
};

fn first_chunk_offline(seed: u64) -> CheckResult {
    let c = stream_cfg(4, 5, AuxGroups::all(), seed);
    let t = generate_synthetic::<f32>(10, c.base.layout, seed).map_err(err)?;
    let head = t.slice_frames(0..4).map_err(err)?;
    let mut s = Streamer::<f32>::new(c).map_err(err)?;
    let a = s.step(&head).map_err(err)?;
    let b = Aggregator::<f32>::new(c.base).map_err(err)?.forward_offline(&head).map_err(err)?;
    let d = abs_diff(a.data(), b.data()).0;
    ensure(d <= 1e-6, || format!("diff {d:e}"))?;
    Ok(format!("max diff {d:.1e}"))
}

fn single_chunk_offline(seed: u64) -> CheckResult {
    let c = stream_cfg(8, 1, AuxGroups::all(), seed);
    let t = generate_synthetic::<f32>(8, c.base.layout, seed).map_err(err)?;
    let a = run_stream(&t, &c).map_err(err)?;
    let b = Aggregator::<f32>::new(c.base).map_err(err)?.forward_offline(&t).map_err(err)?;
    ensure(a == b, || format!("diff {:e}", abs_diff(a.data(), b.data()).0))?;
    Ok("c=S equals offline bitwise".into())
}

fn streaming_block_causal(seed: u64) -> CheckResult {
    let c = stream_cfg(4, 1, AUX_NO_KEYFRAMES, seed);
    let t = generate_synthetic::<f32>(12, c.base.layout, seed).map_err(err)?;
    let a = run_stream(&t, &c).map_err(err)?;
    let oracle = AggregatorConfig {
        mask: MaskMode::BlockCausal { block: 4 },
        ..c.base
    };
    let b = Aggregator::<f32>::new(oracle).map_err(err)?.forward_offline(&t).map_err(err)?;
    let d = abs_diff(a.data(), b.data()).0;
    ensure(d <= 1e-4, || format!("diff {d:e}"))?;
    Ok(format!("S=12 c=4 L=4 max diff {d:.1e}"))
}

fn streaming_causality(seed: u64) -> CheckResult {
    let c = stream_cfg(3, 2, AuxGroups::all(), seed);
    let t = generate_synthetic::<f32>(9, c.base.layout, seed).map_err(err)?;
    let mut p = t.clone();
    for f in 3..9 {
        p = p.map_frame(f, |v| -2.0 * v + 0.5).map_err(err)?;
    }
    let a = run_stream(&t, &c).map_err(err)?;
    let b = run_stream(&p, &c).map_err(err)?;
    let d = frame_diff(&a, &b, 0..3);
    ensure(d <= 1e-6, || format!("chunk 0 moved by {d:e}"))?;
    Ok(format!("max diff {d:.1e}"))
}

fn memory_law(seed: u64) -> CheckResult {
    let mut cases = 0;
    for p in [1, 2, 5] {
        for r in [1, 2, 4] {
            let mut c = stream_cfg(4, p, AuxGroups::none(), seed);
            c.base.layers = 1;
            c.base.compression.ratio = r;
            let t = generate_synthetic::<f32>(11, c.base.layout, seed).map_err(err)?;
            let mut s = Streamer::<f32>::new(c).map_err(err)?;
            s.run(&t).map_err(err)?;
            let dpf = c.base.compression.descriptors_per_frame(&c.base.layout);
            let expected = ((11 - 1) / p + 1) * dpf;
            let got = s.cache().layers[0].count(DescriptorKind::Compressed);
            ensure(got == expected, || format!("p={p} r={r}: {got} != {expected}"))?;
            cases += 1;
        }
    }
    Ok(format!("{cases} (p, r) cases at S=11"))
}

fn sublinear_growth(seed: u64) -> CheckResult {
    let c = stream_cfg(3, 4, AuxGroups::all(), seed);
    let layout = c.base.layout;
    let t = generate_synthetic::<f32>(14, layout, seed).map_err(err)?;
    let mut s = Streamer::<f32>::new(c).map_err(err)?;
    let dpf = c.base.compression.descriptors_per_frame(&layout);
    let mut seen = 0;
    while seen < 14 {
        let end = (seen + 3).min(14);
        s.step(&t.slice_frames(seen..end).map_err(err)?).map_err(err)?;
        seen = end;
        let bound = (seen / c.retain + 1) * (dpf + layout.special_tokens()) + layout.tokens_per_frame();
        let got = s.cache().token_count(0);
        ensure(got <= bound, || format!("after {seen} frames: {got} > {bound}"))?;
    }
    Ok(format!("final cache {} tokens/layer", s.cache().token_count(0)))
}

fn core_ratio(_seed: u64) -> CheckResult {
    let mut cases = 0;
    for layout in [FrameLayout::desk(), plain(8, 8, 32), plain(12, 6, 16)] {
        for r in [1, 2, 3, 4] {
            for aux in [AuxGroups::none(), AuxGroups::all()] {
                let cfg = AggregatorConfig {
                    layout,
                    aux,
                    compression: Compression {
                        ratio: r,
                        ..Default::default()
                    },
                    keyframes: KeyframeSelector {
                        interval: 3,
                        ..Default::default()
                    },
                    ..Default::default()
                };
                let c = compare_flops(&cfg, 10);
                let (k, kd) = (c.descriptor.tokens as u128, c.descriptor.keys as u128);
                ensure(c.dense.attention_core() * kd == c.descriptor.attention_core() * k, || {
                    format!("ratio != K/K_d for r={r} {layout:?}")
                })?;
                let divisible = layout.height % r == 0 && layout.width % r == 0;
                if !aux.any() && layout.special_tokens() == 0 && divisible {
                    ensure(c.dense.attention_core() == (r * r) as u128 * c.descriptor.attention_core(), || {
                        format!("ratio != r² for r={r}")
                    })?;
                }
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} configurations"))
}

fn totals_are_sums(_seed: u64) -> CheckResult {
    for mode in [crate::aggregator::GlobalMode::Dense, crate::aggregator::GlobalMode::Descriptor] {
        let rep = flops_attention(&AggregatorConfig::default().with_mode(mode), 9);
        let sum: u128 = rep.layers.iter().map(|l| l.frame.total() + l.global.total()).sum();
        ensure(sum == rep.total(), || format!("{}: parts {sum} != total {}", mode.name(), rep.total()))?;
    }
    Ok("dense and descriptor".into())
}

fn memory_model_matches_cache(seed: u64) -> CheckResult {
    let mut cases = 0;
    for s_len in [10, 20] {
        for p in [1, 2, 5] {
            for r in [1, 2, 4] {
                let mut c = stream_cfg(10, p, AuxGroups::none(), seed);
                c.base.layers = 1;
                c.base.compression.ratio = r;
                let t = generate_synthetic::<f32>(s_len, c.base.layout, seed).map_err(err)?;
                let mut s = Streamer::<f32>::new(c).map_err(err)?;
                s.run(&t).map_err(err)?;
                let live = s.report();
                let model = memory_model(&c, s_len, 4);
                ensure(
                    live.layers[0].total_tokens == model.cache_per_layer.total
                        && live.layers[0].bytes == model.cache_bytes,
                    || format!("S={s_len} p={p} r={r}"),
                )?;
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} runs"))
}

fn chunking_core_flops(_seed: u64) -> CheckResult {
    let base = AggregatorConfig {
        aux: AUX_NO_KEYFRAMES,
        ..Default::default()
    };
    for chunk in [1, 2, 5, 7, 20] {
        let s = StreamConfig {
            chunk,
            retain: 1,
            persist_first_frame: true,
            base,
        };
        ensure(streaming_core_flops(&s, 20) == block_causal_core_flops(&base, 20, chunk), || {
            format!("chunk {chunk}")
        })?;
    }
    let whole = StreamConfig {
        chunk: 20,
        retain: 1,
        persist_first_frame: true,
        base,
    };
    ensure(streaming_core_flops(&whole, 20) == flops_attention(&base, 20).attention_core(), || {
        "c=S differs from offline".into()
    })?;
    Ok("p=1 stream visits the block-causal key set for every chunk size".into())
}

fn paper_scale_reduction(_seed: u64) -> CheckResult {
    let c = paper_scale_claim(64);
    ensure(c.tokens == 1_374_000 && c.descriptor_keys == 94_244, || {
        format!("K={} K_d={}", c.tokens, c.descriptor_keys)
    })?;
    ensure((c.core_reduction - 14.58).abs() < 0.005, || format!("reduction {}", c.core_reduction))?;
    Ok(format!(
        "K/K_d = {:.4} (reference end-to-end {:.2})",
        c.core_reduction, c.reference_end_to_end
    ))
}

fn self_comparison(seed: u64) -> CheckResult {
    let cfg = AggregatorConfig {
        layers: 2,
        seed,
        ..Default::default()
    };
    let t = generate_synthetic::<f32>(2, cfg.layout, seed).map_err(err)?;
    let tr = Aggregator::<f32>::new(cfg).map_err(err)?.forward_traced(&t).map_err(err)?;
    let rep = compare_layer_outputs(&tr.layer_outputs, &tr.layer_outputs);
    ensure(rep.final_max_abs == 0.0, || "nonzero self error".into())?;
    Ok("zero".into())
}

fn small_run(mode: BenchMode, seed: u64) -> BenchRun {
    let mut run = BenchRun {
        mode,
        frames: 4,
        token_seed: seed,
        ..Default::default()
    };
    run.stream.chunk = 2;
    run.stream.base.layers = 1;
    run.stream.base.seed = seed;
    run
}

fn bench_determinism(seed: u64) -> CheckResult {
    let runs: Vec<BenchRun> = BenchMode::ALL.iter().map(|&m| small_run(m, seed)).collect();
    let seq = sweep(&BenchSpec {
        runs: runs.clone(),
        parallel: false,
    });
    let par = sweep(&BenchSpec { runs, parallel: true });
    ensure(seq.failures.is_empty() && par.failures.is_empty(), || "a run failed".into())?;
    ensure(seq.summaries.iter().all(|s| s.deterministic), || "repeats differ".into())?;
    let sums = |r: &crate::bench::BenchReport| r.summaries.iter().map(|s| s.checksum.clone()).collect::<Vec<_>>();
    ensure(sums(&seq) == sums(&par), || "parallel outputs differ".into())?;
    Ok("repeats and --parallel bitwise identical".into())
}

fn bench_flops_monotone(seed: u64) -> CheckResult {
    let axes = SweepAxes {
        ratios: vec![1, 2, 4, 8],
        ..Default::default()
    };
    let flops: Vec<u128> = axes
        .expand(&small_run(BenchMode::Descriptor, seed))
        .iter()
        .map(|r| r.attention_core_flops())
        .collect();
    ensure(flops.windows(2).all(|w| w[1] <= w[0]), || format!("{flops:?}"))?;
    Ok(format!("{flops:?}"))
}
