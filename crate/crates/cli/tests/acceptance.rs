//! Acceptance gate: one test per shipping criterion, each printing a
//! pass/fail line (visible with `--nocapture`; the per-test result lines
//! mirror them). Criteria 5 and 6 share one ablation grid fixture.

use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;

use crossfuse_core::backbone::FusionStrategy;
use crossfuse_core::block::{
    block_param_count, correlate, cross_fusion_forward, BlockParamIds, BlockParams,
    CorrelationKind, CrossFusionConfig, FeatureHierarchy,
};
use crossfuse_core::harness::{
    ablate, aggregate, correlation_axis, train, CellRun, GridCell, GridSpec, TrainConfig,
};
use crossfuse_core::reference::{block_forward_loop, conv1x1_loop, dilated_max_pool_loop};
use crossfuse_core::rng::{derive_seed, rng_from_seed, stream};
use crossfuse_core::synth::{gen_sample, GenConfig, SyntheticSample};
use crossfuse_core::tape::Tape;
use crossfuse_core::tensor::Tensor;

// ---------------------------------------------------------------------------
// Criterion 1: gradcheck CLI, all kinds, reference geometry, under a minute.
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_gradcheck_cli_passes_all_kinds_within_time_budget() {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_crossfuse"))
        .args(["gradcheck", "--kind", "all", "--eps", "1e-3", "--levels", "3", "--size", "6"])
        .output()
        .expect("binary runs");
    let secs = start.elapsed().as_secs_f64();
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "gradcheck failed:\n{text}");
    assert!(secs < 60.0, "gradcheck took {secs:.1}s, budget is 60s");
    println!("criterion 1 PASS: gradcheck all kinds < 1e-4 in {secs:.2}s\n{text}");
}

// ---------------------------------------------------------------------------
// Criterion 2: zero-initialized output projection leaves the target exactly
// unchanged on 100 random hierarchies.
// ---------------------------------------------------------------------------

fn random_hierarchy(rng: &mut impl Rng, max_hw: usize) -> (Vec<Tensor<f64>>, usize) {
    let levels = rng.gen_range(1..=4);
    let target = rng.gen_range(0..levels);
    let maps = (0..levels)
        .map(|_| {
            let c = rng.gen_range(1..=6);
            let h = rng.gen_range(2..=max_hw);
            let w = rng.gen_range(2..=max_hw);
            Tensor::from_fn(vec![c, h, w], |_| rng.gen_range(-1.0..1.0))
        })
        .collect();
    (maps, target)
}

fn random_cfg(rng: &mut impl Rng) -> CrossFusionConfig {
    CrossFusionConfig {
        correlation: CorrelationKind::ALL[rng.gen_range(0..3)],
        pool_kernel: [1, 3, 5][rng.gen_range(0..3)],
        pool_dilation: rng.gen_range(1..=3),
        ..CrossFusionConfig::default()
    }
}

/// Register maps as constants and params as given ids on a fresh tape, run
/// the block, and return (target data, output data).
fn run_block(
    maps: &[Tensor<f64>],
    target: usize,
    params: &BlockParams<f64>,
    cfg: &CrossFusionConfig,
) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let ids: Vec<_> = maps.iter().map(|m| tape.constant(m.clone())).collect();
    let pids = BlockParamIds {
        w_theta: tape.constant(params.w_theta.clone()),
        w_phi: params.w_phi.iter().map(|p| tape.constant(p.clone())).collect(),
        w_alpha: tape.constant(params.w_alpha.clone()),
    };
    let h = FeatureHierarchy { maps: ids.clone(), target_index: target };
    let out = cross_fusion_forward(&mut tape, &h, &pids, cfg).expect("forward");
    (tape.value(ids[target]).data().to_vec(), tape.value(out).data().to_vec())
}

#[test]
fn criterion_2_zero_output_projection_is_exact_identity() {
    let mut rng = rng_from_seed(0xACC2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (maps, target) = random_hierarchy(&mut rng, 8);
        let cfg = random_cfg(&mut rng);
        let channels: Vec<usize> = maps.iter().map(|m| m.dims()[0]).collect();
        // Fresh init keeps w_alpha at its exact-zero starting value.
        let params = BlockParams::<f64>::init(channels[target], &channels, &cfg, &mut rng).unwrap();
        let (x_p, out) = run_block(&maps, target, &params, &cfg);
        for (a, b) in x_p.iter().zip(&out) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst <= 1e-12, "identity violated by {worst:e}");
    println!("criterion 2 PASS: zero w_alpha keeps output == target, worst |diff| {worst:e}");
}

// ---------------------------------------------------------------------------
// Criterion 3: block forward against the scalar-loop oracle, plus pooling
// and 1x1 convolution against their loop oracles.
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_forward_matches_naive_oracles() {
    let mut rng = rng_from_seed(0xACC3);
    let mut worst_block = 0.0f64;
    for _ in 0..50 {
        let (maps, target) = random_hierarchy(&mut rng, 8);
        let cfg = random_cfg(&mut rng);
        let channels: Vec<usize> = maps.iter().map(|m| m.dims()[0]).collect();
        let mut params =
            BlockParams::<f64>::init(channels[target], &channels, &cfg, &mut rng).unwrap();
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        let (_, out) = run_block(&maps, target, &params, &cfg);
        let oracle = block_forward_loop(
            &maps,
            target,
            &params.w_theta,
            &params.w_phi,
            &params.w_alpha,
            cfg.correlation,
            cfg.pool_kernel,
            cfg.pool_dilation,
        );
        for (a, b) in out.iter().zip(oracle.data()) {
            worst_block = worst_block.max((a - b).abs());
        }
    }
    assert!(worst_block <= 1e-6, "block diverges from oracle by {worst_block:e}");

    let mut worst_pool = 0.0f64;
    for _ in 0..100 {
        let c = rng.gen_range(1..=4);
        let h = rng.gen_range(2..=9);
        let w = rng.gen_range(2..=9);
        let x = Tensor::from_fn(vec![c, h, w], |_| rng.gen_range(-2.0..2.0));
        let kernel = [1, 3, 5][rng.gen_range(0..3)];
        let dilation = rng.gen_range(1..=3);
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let y = tape.dilated_max_pool(xid, kernel, dilation).unwrap();
        let oracle = dilated_max_pool_loop(&x, kernel, dilation);
        for (a, b) in tape.value(y).data().iter().zip(oracle.data()) {
            worst_pool = worst_pool.max((a - b).abs());
        }
    }
    assert!(worst_pool <= 1e-6, "pool diverges from oracle by {worst_pool:e}");

    let mut worst_conv = 0.0f64;
    for _ in 0..100 {
        let c_in = rng.gen_range(1..=6);
        let c_out = rng.gen_range(1..=6);
        let h = rng.gen_range(1..=9);
        let w = rng.gen_range(1..=9);
        let x = Tensor::from_fn(vec![c_in, h, w], |_| rng.gen_range(-2.0..2.0));
        let wt = Tensor::from_fn(vec![c_out, c_in], |_| rng.gen_range(-1.0..1.0));
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let wid = tape.constant(wt.clone());
        let y = tape.conv1x1(xid, wid).unwrap();
        let oracle = conv1x1_loop(&x, &wt);
        for (a, b) in tape.value(y).data().iter().zip(oracle.data()) {
            worst_conv = worst_conv.max((a - b).abs());
        }
    }
    assert!(worst_conv <= 1e-6, "conv1x1 diverges from oracle by {worst_conv:e}");

    println!(
        "criterion 3 PASS: block worst {worst_block:e} (50 cases), \
         pool worst {worst_pool:e}, conv1x1 worst {worst_conv:e} (100 cases each)"
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: correlation weight laws per kind.
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_correlation_weight_laws_hold() {
    let mut rng = rng_from_seed(0xACC4);
    for _ in 0..20 {
        let n = rng.gen_range(1..=4);
        let c_e = rng.gen_range(1..=5);
        let h = rng.gen_range(2..=6);
        let w = rng.gen_range(2..=6);
        let q = Tensor::from_fn(vec![c_e, h, w], |_| rng.gen_range(-1.5..1.5));
        let keys: Vec<Tensor<f64>> = (0..n)
            .map(|_| Tensor::from_fn(vec![c_e, h, w], |_| rng.gen_range(-1.5..1.5)))
            .collect();

        let mut tape = Tape::new();
        let qid = tape.constant(q.clone());
        let kids: Vec<_> = keys.iter().map(|k| tape.constant(k.clone())).collect();
        let logits: Vec<Vec<f64>> = kids
            .iter()
            .map(|&k| {
                let l = tape.pointwise_dot(qid, k).unwrap();
                tape.value(l).data().to_vec()
            })
            .collect();

        let gauss = correlate(&mut tape, qid, &kids, CorrelationKind::EmbeddedGaussian).unwrap();
        let gw = tape.value(gauss).data().to_vec();
        for px in 0..h * w {
            let sum: f64 = (0..n).map(|j| gw[j * h * w + px]).sum();
            assert!((sum - 1.0).abs() <= 1e-6, "softmax weights sum to {sum}");
        }

        let sig = correlate(&mut tape, qid, &kids, CorrelationKind::Sigmoid).unwrap();
        for &v in tape.value(sig).data() {
            assert!(v > 0.0 && v < 1.0, "sigmoid weight {v} outside (0, 1)");
        }

        let dot = correlate(&mut tape, qid, &kids, CorrelationKind::DotProduct).unwrap();
        let dw = tape.value(dot).data().to_vec();
        for (j, logit) in logits.iter().enumerate() {
            for (px, &l) in logit.iter().enumerate() {
                let expected = l * (1.0 / n as f64);
                assert!(
                    dw[j * h * w + px] == expected,
                    "dot weight is not exactly logit/N: {} vs {expected}",
                    dw[j * h * w + px]
                );
            }
        }
    }
    println!("criterion 4 PASS: softmax sums to 1 within 1e-6, sigmoid in (0,1), dot == logits/N");
}

// ---------------------------------------------------------------------------
// Criteria 5 and 6 share one ablation grid on the default dataset:
// correlation axis (three kinds + no-fusion) plus a pooling-off cell,
// 5 paired seeds each.
// ---------------------------------------------------------------------------

const GRID_EPOCHS: usize = 5;

struct GridFixture {
    runs: Vec<CellRun>,
}

impl GridFixture {
    fn mean(&self, id: &str) -> f64 {
        aggregate(&self.runs)
            .into_iter()
            .find(|a| a.id == id)
            .unwrap_or_else(|| panic!("no aggregate for {id}"))
            .mean_miou
    }

    fn wall_ms(&self, ids: &[&str]) -> u64 {
        self.runs
            .iter()
            .filter(|r| ids.contains(&r.cell.id.as_str()))
            .filter_map(|r| r.outcome.as_ref().ok().map(|rep| rep.wall_ms))
            .sum()
    }
}

fn default_dataset() -> Vec<SyntheticSample> {
    let cfg = GenConfig::default();
    (0..cfg.samples)
        .map(|i| gen_sample(&cfg, derive_seed(cfg.seed, &[stream::SAMPLE, i as u64])).unwrap())
        .collect()
}

fn grid_fixture() -> &'static GridFixture {
    static FIXTURE: OnceLock<GridFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let data = default_dataset();
        let mut cells = correlation_axis();
        let mut off = GridCell::new("pooling/off", FusionStrategy::Cross);
        off.pool_kernel = 1;
        off.pool_dilation = 1;
        cells.push(off);
        let spec = GridSpec {
            cells,
            seeds: 5,
            master_seed: 0,
            base: TrainConfig { epochs: GRID_EPOCHS, ..TrainConfig::default() },
        };
        let runs = ablate::<f32>(&spec, &data, 1).expect("grid runs");
        assert!(runs.iter().all(|r| r.outcome.is_ok()), "a grid cell aborted");
        GridFixture { runs }
    })
}

#[test]
fn criterion_5_cross_fusion_beats_baselines_within_runtime_budget() {
    let fx = grid_fixture();
    let cross = fx.mean("correlation/gaussian");
    let none = fx.mean("correlation/none");
    let pooled = cross; // the gaussian cell runs the default (5, 3) pooling
    let pool_off = fx.mean("pooling/off");
    let wall = fx.wall_ms(&["correlation/gaussian", "correlation/none", "pooling/off"]);

    assert!(cross > none, "cross mean mIoU {cross:.4} not above no-fusion {none:.4}");
    assert!(
        pooled >= pool_off,
        "pooling (5,3) mean mIoU {pooled:.4} below pooling-off {pool_off:.4}"
    );
    assert!(wall < 30 * 60 * 1000, "grid took {} ms, budget is 30 min", wall);
    println!(
        "criterion 5 PASS: cross {cross:.4} > none {none:.4}; pooling (5,3) {pooled:.4} >= \
         off {pool_off:.4}; 15 runs in {:.1} min (absolute mIoUs recorded, not gated)",
        wall as f64 / 60_000.0
    );
}

#[test]
fn criterion_6_every_correlation_kind_beats_no_fusion() {
    let fx = grid_fixture();
    let none = fx.mean("correlation/none");
    let mut kinds: Vec<(&str, f64)> = vec![
        ("gaussian", fx.mean("correlation/gaussian")),
        ("sigmoid", fx.mean("correlation/sigmoid")),
        ("dot", fx.mean("correlation/dot")),
    ];
    for (name, miou) in &kinds {
        assert!(miou > &none, "{name} mean mIoU {miou:.4} not above no-fusion {none:.4}");
    }
    kinds.sort_by(|a, b| b.1.total_cmp(&a.1));
    let observed = kinds.iter().map(|(n, m)| format!("{n} {m:.4}")).collect::<Vec<_>>().join(" > ");
    println!(
        "criterion 6 PASS: all kinds above no-fusion {none:.4}; observed ordering {observed}; \
         reference ordering (AP %): gaussian 36.7, sigmoid 36.6, dot 36.1 (not gated)"
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: overhead accounting on the default backbone.
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_block_overhead_matches_closed_form_and_stays_small() {
    // Six default-geometry samples are enough for a one-epoch accounting run.
    let gen = GenConfig { samples: 6, ..GenConfig::default() };
    let data: Vec<SyntheticSample> =
        (0..6).map(|i| gen_sample(&gen, derive_seed(11, &[stream::SAMPLE, i])).unwrap()).collect();
    let cfg = TrainConfig { epochs: 1, batch: 6, ..TrainConfig::default() };
    let report = train::<f32>(&cfg, &data).unwrap();

    // Default taps s3_last (32ch), s4_first (64ch), s4_last (64ch) on the
    // 64-channel target with a half-width embedding.
    let c_e = CrossFusionConfig::default().embed_channels(64);
    let closed_form = block_param_count(64, c_e, &[32, 64, 64]);
    assert_eq!(c_e, 32);
    assert_eq!(closed_form, 32 * 64 + (32 * 32 + 32 * 64 + 32 * 64) + 64 * 32);
    assert_eq!(
        report.fusion_params, closed_form,
        "reported fusion params diverge from closed form"
    );
    assert!(
        report.fusion_param_percent < 8.0,
        "parameter overhead {:.3}% exceeds 8%",
        report.fusion_param_percent
    );
    assert!(
        report.fusion_flop_percent < 5.0,
        "FLOP overhead {:.3}% exceeds 5%",
        report.fusion_flop_percent
    );
    println!(
        "criterion 7 PASS: block params {} == closed form {}; overhead +{:.3}% params, \
         +{:.3}% FLOPs (printed in the run report)",
        report.fusion_params, closed_form, report.fusion_param_percent, report.fusion_flop_percent
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: ablate reruns are byte-identical under --strip-timing.
// ---------------------------------------------------------------------------

fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn criterion_8_ablate_reruns_are_byte_identical_without_timing() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = Command::new(env!("CARGO_BIN_EXE_crossfuse"))
        .args([
            "gen-data",
            "--out",
            data.to_str().unwrap(),
            "--n",
            "10",
            "--size",
            "16",
            "--scale-max",
            "4",
            "--seed",
            "21",
        ])
        .output()
        .expect("binary runs");
    assert_eq!(out.status.code(), Some(0));

    let run_grid = |dir: &Path| {
        let out = Command::new(env!("CARGO_BIN_EXE_crossfuse"))
            .args([
                "ablate",
                "--data",
                data.to_str().unwrap(),
                "--out",
                dir.to_str().unwrap(),
                "--axis",
                "pooling",
                "--seeds",
                "2",
                "--epochs",
                "1",
                "--batch",
                "4",
                "--master-seed",
                "33",
                "--strip-timing",
            ])
            .output()
            .expect("binary runs");
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    };
    let g1 = tmp.path().join("g1");
    let g2 = tmp.path().join("g2");
    run_grid(&g1);
    run_grid(&g2);
    let s1 = dir_snapshot(&g1);
    assert_eq!(s1, dir_snapshot(&g2));
    assert_eq!(s1.len(), 3, "grid.json, runs.csv, summary.txt");
    println!(
        "criterion 8 PASS: two ablate runs with master seed 33 produced byte-identical \
         grid.json, runs.csv, summary.txt"
    );
}
