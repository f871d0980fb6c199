//! Training, evaluation, and the ablation grid: everything needed to
//! measure a fusion strategy against its baselines under paired seeds.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    backbone_param_count, default_reference_taps, BackboneConfig, FusionStrategy, ModelBundle,
    TapName, NUM_CLASSES,
};
pub use crate::block::{fuse_addition, fuse_concat};
use crate::block::{CorrelationKind, CrossFusionConfig};
use crate::error::{CoreError, Result};
use crate::optim::Sgd;
use crate::rng::{derive_seed, rng_from_seed, stream};
use crate::synth::SyntheticSample;
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

pub const REPORT_SCHEMA: &str = "crossfuse-report/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Samples per optimizer step, accumulated in an outer loop.
    pub batch: usize,
    pub seed: u64,
    pub strategy: FusionStrategy,
    pub fusion: CrossFusionConfig,
    pub reference_taps: Vec<TapName>,
    /// Per-class loss weights; None computes inverse pixel frequency over
    /// the train split.
    pub class_weights: Option<[f64; NUM_CLASSES]>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            lr: 0.05,
            momentum: 0.9,
            batch: 8,
            seed: 0,
            strategy: FusionStrategy::Cross,
            fusion: CrossFusionConfig::default(),
            reference_taps: default_reference_taps(),
            class_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(CoreError::invalid("TrainConfig", "epochs and batch must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(CoreError::invalid("TrainConfig", "lr must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CoreError::invalid("TrainConfig", "momentum must lie in [0, 1)"));
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(CoreError::invalid("TrainConfig", "class weights must be positive"));
            }
        }
        self.fusion.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub iou: [f64; NUM_CLASSES],
    /// Mean IoU over background and both defect classes.
    pub miou: f64,
    pub pixel_accuracy: f64,
    #[serde(default)]
    pub loss_curve: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub precision: String,
    pub config: TrainConfig,
    /// Final metrics on the held-out split (train split when none is held
    /// out), with the per-epoch loss curve attached.
    pub metrics: Metrics,
    pub per_epoch: Vec<EpochRecord>,
    pub param_count: usize,
    pub fusion_params: usize,
    /// Fusion parameter overhead relative to the plain backbone, percent.
    pub fusion_param_percent: f64,
    pub flops: u64,
    /// Fusion FLOP overhead relative to the plain backbone, percent.
    pub fusion_flop_percent: f64,
    /// True when training left every parameter exactly at its initial
    /// value (e.g. lr = 0).
    pub params_unchanged: bool,
    pub wall_ms: u64,
}

impl RunReport {
    /// Zero the wall-time field so byte comparisons see only deterministic
    /// content.
    pub fn strip_timing(&mut self) {
        self.wall_ms = 0;
    }
}

/// First index of the held-out split: ceil(0.8 n) samples train, the rest
/// test, split by index before any shuffling.
pub fn split_index(n: usize) -> usize {
    (4 * n).div_ceil(5)
}

/// Inverse pixel-frequency weights over the given samples, normalized so
/// the mean weight is 1. Absent classes count as one pixel to stay finite.
pub fn inverse_class_weights(samples: &[SyntheticSample]) -> [f64; NUM_CLASSES] {
    let mut counts = [0u64; NUM_CLASSES];
    for s in samples {
        for &v in s.mask.data() {
            counts[v as usize] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    let mut w = [0.0; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        w[c] = total as f64 / (NUM_CLASSES as f64 * counts[c].max(1) as f64);
    }
    w
}

/// Per-class IoU, mean IoU, and pixel accuracy from a confusion matrix
/// indexed [truth][prediction]. Empty classes (no truth, no predictions)
/// score IoU 1.
pub fn confusion_metrics(conf: &[[u64; NUM_CLASSES]; NUM_CLASSES]) -> Metrics {
    let mut iou = [0.0; NUM_CLASSES];
    let mut correct = 0u64;
    for c in 0..NUM_CLASSES {
        let tp = conf[c][c];
        let fp: u64 = (0..NUM_CLASSES).map(|t| conf[t][c]).sum::<u64>() - tp;
        let fn_: u64 = conf[c].iter().sum::<u64>() - tp;
        iou[c] = if tp + fp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fp + fn_) as f64 };
        correct += tp;
    }
    let total: u64 = conf.iter().flatten().sum();
    Metrics {
        iou,
        miou: iou.iter().sum::<f64>() / NUM_CLASSES as f64,
        pixel_accuracy: if total == 0 { 1.0 } else { correct as f64 / total as f64 },
        loss_curve: Vec::new(),
    }
}

/// Argmax predictions against mask labels over a whole split.
pub fn evaluate<T: Scalar>(
    bundle: &ModelBundle<T>,
    samples: &[SyntheticSample],
) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(CoreError::invalid("evaluate", "evaluation split is empty"));
    }
    let mut conf = [[0u64; NUM_CLASSES]; NUM_CLASSES];
    for s in samples {
        let img: Tensor<T> = s.image.cast();
        let logits = bundle.predict(&img)?;
        let dims = logits.dims();
        let px = dims[1] * dims[2];
        let data = logits.data();
        for p in 0..px {
            let mut best = 0usize;
            let mut best_v = data[p];
            for c in 1..NUM_CLASSES {
                let v = data[c * px + p];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            conf[s.mask.data()[p] as usize][best] += 1;
        }
    }
    Ok(confusion_metrics(&conf))
}

fn check_uniform_dims(samples: &[SyntheticSample]) -> Result<(usize, usize)> {
    let dims = samples[0].image.dims().to_vec();
    for s in samples {
        if s.image.dims() != dims {
            return Err(CoreError::invalid(
                "train",
                format!("mixed sample shapes: {:?} vs {:?}", s.image.dims(), dims),
            ));
        }
    }
    Ok((dims[1], dims[2]))
}

/// Train a bundle per the config and report metrics on the held-out split.
///
/// Deterministic given `cfg.seed`: backbone init, fusion init, and data
/// order each draw from their own derived stream, so strategies sharing a
/// seed share backbone weights and batch order exactly.
pub fn train<T: Scalar>(cfg: &TrainConfig, samples: &[SyntheticSample]) -> Result<RunReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(CoreError::invalid("train", "dataset is empty"));
    }
    let start = Instant::now();
    let (h, w) = check_uniform_dims(samples)?;
    let split = split_index(samples.len());
    let train_set = &samples[..split];
    let test_set = &samples[split..];

    let class_weights = cfg.class_weights.unwrap_or_else(|| inverse_class_weights(train_set));
    let weights_t: Vec<T> = class_weights.iter().map(|&v| T::from_f64(v)).collect();

    let bcfg = BackboneConfig::default();
    let mut backbone_rng = rng_from_seed(derive_seed(cfg.seed, &[stream::BACKBONE_INIT]));
    let base = ModelBundle::<T>::init(bcfg.clone(), &mut backbone_rng)?;
    let base_flops = base.flops(h, w);
    let mut fusion_rng = rng_from_seed(derive_seed(cfg.seed, &[stream::FUSION_INIT]));
    let mut bundle = match cfg.strategy {
        FusionStrategy::None => base,
        FusionStrategy::Cross => {
            base.insert_block(cfg.fusion.clone(), &cfg.reference_taps, &mut fusion_rng)?
        }
        s => base.insert_baseline(s, cfg.fusion.clone(), &cfg.reference_taps)?,
    };
    let initial: Vec<Vec<T>> = bundle.param_tensors().iter().map(|t| t.data().to_vec()).collect();

    let images: Vec<Tensor<T>> = train_set.iter().map(|s| s.image.cast()).collect();
    let labels: Vec<Vec<u32>> =
        train_set.iter().map(|s| s.mask.data().iter().map(|&v| v as u32).collect()).collect();

    let mut data_rng = rng_from_seed(derive_seed(cfg.seed, &[stream::DATA_ORDER]));
    let mut sgd = Sgd::new(T::from_f64(cfg.lr), T::from_f64(cfg.momentum));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut per_epoch = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut data_rng);
        let mut loss_sum = 0.0;
        let mut step = 0usize;
        for chunk in order.chunks(cfg.batch) {
            for &i in chunk {
                let mut tape = Tape::new();
                let ids = bundle.leaf_into(&mut tape);
                let img = tape.constant(images[i].clone());
                let (_, logits) = bundle.forward_with_taps(&mut tape, &ids, img)?;
                let loss_id = tape.weighted_cross_entropy(logits, &labels[i], &weights_t)?;
                let loss = tape.value(loss_id).data()[0].to_f64_val();
                if !loss.is_finite() {
                    return Err(CoreError::NonFiniteLoss { epoch, step });
                }
                loss_sum += loss;
                tape.backward(loss_id)?;
                let id_list = ids.all();
                for (t, id) in bundle.param_tensors_mut().into_iter().zip(&id_list) {
                    if let Some(g) = tape.grad(*id) {
                        t.accumulate_grad(g);
                    }
                }
                step += 1;
            }
            let inv = T::from_f64(1.0 / chunk.len() as f64);
            let mut params = bundle.param_tensors_mut();
            for t in params.iter_mut() {
                t.scale_grad(inv);
            }
            sgd.step(params.as_mut_slice())?;
        }
        per_epoch.push(EpochRecord { epoch, mean_loss: loss_sum / train_set.len() as f64 });
    }

    let eval_split = if test_set.is_empty() { train_set } else { test_set };
    let mut metrics = evaluate(&bundle, eval_split)?;
    metrics.loss_curve = per_epoch.iter().map(|e| e.mean_loss).collect();

    let params_unchanged = bundle
        .param_tensors()
        .iter()
        .zip(&initial)
        .all(|(t, init)| t.data().iter().zip(init).all(|(a, b)| a == b));

    let backbone_params = backbone_param_count(&bcfg);
    let param_count = bundle.param_count();
    let fusion_params = param_count - backbone_params;
    let flops = bundle.flops(h, w);

    Ok(RunReport {
        schema: REPORT_SCHEMA.to_string(),
        precision: T::NAME.to_string(),
        config: cfg.clone(),
        metrics,
        per_epoch,
        param_count,
        fusion_params,
        fusion_param_percent: 100.0 * fusion_params as f64 / backbone_params as f64,
        flops,
        fusion_flop_percent: 100.0 * (flops - base_flops) as f64 / base_flops as f64,
        params_unchanged,
        wall_ms: start.elapsed().as_millis() as u64,
    })
}

// -- ablation grid -----------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub id: String,
    pub strategy: FusionStrategy,
    pub correlation: CorrelationKind,
    pub pool_kernel: usize,
    pub pool_dilation: usize,
    pub reference_taps: Vec<TapName>,
}

impl GridCell {
    /// Cell with the given strategy and every other axis at its default.
    pub fn new(id: &str, strategy: FusionStrategy) -> Self {
        let d = CrossFusionConfig::default();
        GridCell {
            id: id.to_string(),
            strategy,
            correlation: d.correlation,
            pool_kernel: d.pool_kernel,
            pool_dilation: d.pool_dilation,
            reference_taps: default_reference_taps(),
        }
    }

    /// Instantiate the cell over a shared base config.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.strategy = self.strategy;
        cfg.fusion.correlation = self.correlation;
        cfg.fusion.pool_kernel = self.pool_kernel;
        cfg.fusion.pool_dilation = self.pool_dilation;
        cfg.reference_taps = self.reference_taps.clone();
        cfg
    }
}

/// Correlation kinds under the cross strategy plus the no-fusion baseline.
pub fn correlation_axis() -> Vec<GridCell> {
    let mut cells: Vec<GridCell> = CorrelationKind::ALL
        .iter()
        .map(|&k| {
            let mut c = GridCell::new(&format!("correlation/{}", k.name()), FusionStrategy::Cross);
            c.correlation = k;
            c
        })
        .collect();
    cells.push(GridCell::new("correlation/none", FusionStrategy::None));
    cells
}

/// Fusion strategies under identical reference assembly.
pub fn strategy_axis() -> Vec<GridCell> {
    FusionStrategy::ALL
        .iter()
        .map(|&s| GridCell::new(&format!("strategy/{}", s.name()), s))
        .collect()
}

/// Pool kernel/dilation grid; (1,1) disables pooling.
pub fn pooling_axis() -> Vec<GridCell> {
    [(3, 3), (5, 2), (5, 3), (5, 4), (1, 1)]
        .iter()
        .map(|&(k, d)| {
            let id = if (k, d) == (1, 1) {
                "pooling/off".to_string()
            } else {
                format!("pooling/{k}x{d}")
            };
            let mut c = GridCell::new(&id, FusionStrategy::Cross);
            c.pool_kernel = k;
            c.pool_dilation = d;
            c
        })
        .collect()
}

/// Reference tap subsets, shallowest-in last-out; all include the target.
pub fn taps_axis() -> Vec<GridCell> {
    let sets: [&[TapName]; 4] = [
        &[TapName::S4Last],
        &[TapName::S4First, TapName::S4Last],
        &[TapName::S3Last, TapName::S4First, TapName::S4Last],
        &[TapName::S2Last, TapName::S3Last, TapName::S4First, TapName::S4Last],
    ];
    sets.iter()
        .map(|set| {
            let id = format!("taps/{}", set.iter().map(|t| t.name()).collect::<Vec<_>>().join("+"));
            let mut c = GridCell::new(&id, FusionStrategy::Cross);
            c.reference_taps = set.to_vec();
            c
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub cells: Vec<GridCell>,
    /// Paired seeds per cell; run r of every cell shares one derived seed.
    pub seeds: usize,
    pub master_seed: u64,
    pub base: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRun {
    pub cell: GridCell,
    pub seed_index: usize,
    pub seed: u64,
    /// Report, or the abort reason for a failed cell.
    pub outcome: std::result::Result<RunReport, String>,
}

/// Run every (cell, seed) pair; aborted cells are recorded and the grid
/// continues. `jobs` > 1 runs cells on worker threads; output order is
/// cell-major by construction regardless of completion order.
pub fn ablate<T: Scalar>(
    spec: &GridSpec,
    samples: &[SyntheticSample],
    jobs: usize,
) -> Result<Vec<CellRun>> {
    if spec.cells.is_empty() || spec.seeds == 0 {
        return Err(CoreError::invalid("ablate", "grid needs at least one cell and one seed"));
    }
    let tasks: Vec<(&GridCell, usize)> =
        spec.cells.iter().flat_map(|c| (0..spec.seeds).map(move |r| (c, r))).collect();
    let slots: Mutex<Vec<Option<CellRun>>> = Mutex::new(vec![None; tasks.len()]);
    let next = AtomicUsize::new(0);
    let run_task = |idx: usize| {
        let (cell, r) = tasks[idx];
        let mut cfg = cell.apply(&spec.base);
        cfg.seed = derive_seed(spec.master_seed, &[r as u64]);
        let outcome = train::<T>(&cfg, samples).map_err(|e| e.to_string());
        let run = CellRun { cell: cell.clone(), seed_index: r, seed: cfg.seed, outcome };
        slots.lock().expect("slots").get_mut(idx).map(|s| *s = Some(run));
    };
    let workers = jobs.max(1).min(tasks.len());
    if workers == 1 {
        for idx in 0..tasks.len() {
            run_task(idx);
        }
    } else {
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let idx = next.fetch_add(1, Ordering::Relaxed);
                    if idx >= tasks.len() {
                        break;
                    }
                    run_task(idx);
                });
            }
        });
    }
    Ok(slots
        .into_inner()
        .expect("slots")
        .into_iter()
        .map(|s| s.expect("every task filled"))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellAggregate {
    pub id: String,
    /// Successful runs aggregated; aborted runs are excluded.
    pub seeds: usize,
    pub mean_miou: f64,
    /// Sample standard deviation (n-1); zero for fewer than two runs.
    pub stddev_miou: f64,
}

/// Mean/stddev of test mIoU per cell, ordered by cell id.
pub fn aggregate(runs: &[CellRun]) -> Vec<CellAggregate> {
    let mut by_id: std::collections::BTreeMap<&str, Vec<f64>> = std::collections::BTreeMap::new();
    for run in runs {
        let entry = by_id.entry(&run.cell.id).or_default();
        if let Ok(report) = &run.outcome {
            entry.push(report.metrics.miou);
        }
    }
    by_id
        .into_iter()
        .map(|(id, mious)| {
            let n = mious.len();
            let mean = if n == 0 { f64::NAN } else { mious.iter().sum::<f64>() / n as f64 };
            let var = if n > 1 {
                mious.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
            } else {
                0.0
            };
            CellAggregate { id: id.to_string(), seeds: n, mean_miou: mean, stddev_miou: var.sqrt() }
        })
        .collect()
}
