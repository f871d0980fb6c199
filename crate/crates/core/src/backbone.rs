//! Toy multi-stage convolutional feature extractor with named tap points,
//! cross-layer fusion insertion before the last stage-4 residual unit, and a
//! dense per-pixel classification head.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::block::{
    cross_fusion_forward, fuse_addition, fuse_concat, BlockParamIds, BlockParams,
    CrossFusionConfig, FeatureHierarchy,
};
use crate::error::{CoreError, Result};
use crate::tape::{Tape, ValueId};
use crate::tensor::{Scalar, Tensor};

pub const NUM_CLASSES: usize = 3;

const BUNDLE_SCHEMA: &str = "crossfuse-bundle/1";

/// Named feature-map taps, ordered coarse-to-fine along the forward pass.
/// "last" taps sit before their stage's final residual unit; s4_first sits
/// right after the stage-4 entry convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapName {
    S2Last,
    S3Last,
    S4First,
    S4Last,
}

impl TapName {
    pub const ALL: [TapName; 4] =
        [TapName::S2Last, TapName::S3Last, TapName::S4First, TapName::S4Last];

    pub fn name(self) -> &'static str {
        match self {
            TapName::S2Last => "s2_last",
            TapName::S3Last => "s3_last",
            TapName::S4First => "s4_first",
            TapName::S4Last => "s4_last",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "s2_last" => Ok(TapName::S2Last),
            "s3_last" => Ok(TapName::S3Last),
            "s4_first" => Ok(TapName::S4First),
            "s4_last" => Ok(TapName::S4Last),
            other => Err(CoreError::invalid(
                "tap",
                format!("unknown tap {other:?}, expected s2_last | s3_last | s4_first | s4_last"),
            )),
        }
    }

    fn index(self) -> usize {
        match self {
            TapName::S2Last => 0,
            TapName::S3Last => 1,
            TapName::S4First => 2,
            TapName::S4Last => 3,
        }
    }
}

/// Default reference taps: the two preceding "last" taps plus the stage-4
/// entry map and the target itself.
pub fn default_reference_taps() -> Vec<TapName> {
    vec![TapName::S3Last, TapName::S4First, TapName::S4Last]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub input_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: vec![2, 2, 3],
            input_channels: 1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != 3 || self.blocks_per_stage.len() != 3 {
            return Err(CoreError::invalid(
                "BackboneConfig",
                format!(
                    "tap naming requires exactly 3 stages, got {} channel and {} block entries",
                    self.stage_channels.len(),
                    self.blocks_per_stage.len()
                ),
            ));
        }
        if self.stage_channels.iter().any(|&c| c == 0) || self.input_channels == 0 {
            return Err(CoreError::invalid("BackboneConfig", "channel counts must be positive"));
        }
        if self.blocks_per_stage.iter().any(|&b| b == 0) {
            return Err(CoreError::invalid("BackboneConfig", "each stage needs at least one unit"));
        }
        Ok(())
    }

    /// One stride-2 entry per stage: inputs must be divisible by 2^stages.
    pub fn required_multiple(&self) -> usize {
        1 << self.stage_channels.len()
    }

    pub fn tap_channels(&self, tap: TapName) -> usize {
        match tap {
            TapName::S2Last => self.stage_channels[0],
            TapName::S3Last => self.stage_channels[1],
            TapName::S4First | TapName::S4Last => self.stage_channels[2],
        }
    }
}

/// One residual unit: x -> relu(x + w2 * relu(w1 * x)) with a 4x channel
/// expansion in the hidden layer, all 1x1 convolutions.
#[derive(Clone, Debug)]
pub struct UnitParams<T: Scalar> {
    pub w1: Tensor<T>,
    pub w2: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct StageParams<T: Scalar> {
    /// 3x3 stride-2 entry convolution, [C_out, C_in, 3, 3].
    pub entry: Tensor<T>,
    pub units: Vec<UnitParams<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    None,
    Addition,
    Concat,
    Cross,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 4] = [
        FusionStrategy::None,
        FusionStrategy::Addition,
        FusionStrategy::Concat,
        FusionStrategy::Cross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::None => "none",
            FusionStrategy::Addition => "addition",
            FusionStrategy::Concat => "concat",
            FusionStrategy::Cross => "cross",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FusionStrategy::None),
            "addition" => Ok(FusionStrategy::Addition),
            "concat" => Ok(FusionStrategy::Concat),
            "cross" => Ok(FusionStrategy::Cross),
            other => Err(CoreError::invalid(
                "strategy",
                format!("unknown strategy {other:?}, expected none | addition | concat | cross"),
            )),
        }
    }
}

/// Fusion-specific parameters; exactly one strategy is active per bundle.
#[derive(Clone, Debug)]
pub enum FusionParams<T: Scalar> {
    None,
    /// One zero-initialized projection per reference tap.
    Addition {
        projs: Vec<Tensor<T>>,
    },
    /// A single zero-initialized projection over concatenated references.
    Concat {
        proj: Tensor<T>,
    },
    Cross {
        block: BlockParams<T>,
    },
}

/// Backbone, optional fusion, and head parameters with the wiring needed to
/// run them: which taps feed the fusion and how references are pooled.
#[derive(Clone, Debug)]
pub struct ModelBundle<T: Scalar> {
    pub cfg: BackboneConfig,
    pub fusion_cfg: CrossFusionConfig,
    pub reference_taps: Vec<TapName>,
    pub stages: Vec<StageParams<T>>,
    pub fusion: FusionParams<T>,
    /// 1x1 classifier over the fused stage-4 output, [NUM_CLASSES, C4].
    pub head: Tensor<T>,
    /// 1x1 skip classifier over the s3_last tap (/4), [NUM_CLASSES, C3].
    pub head_s3: Tensor<T>,
    /// 1x1 skip classifier over the s2_last tap (/2), [NUM_CLASSES, C2].
    pub head_s2: Tensor<T>,
}

fn kaiming<T: Scalar, R: Rng>(dims: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = dims.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect();
    Tensor::new(dims, data).expect("init shape").with_grad()
}

impl<T: Scalar> ModelBundle<T> {
    /// Kaiming-uniform fan-in init of backbone and head; no fusion.
    pub fn init<R: Rng>(cfg: BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(3);
        let mut c_in = cfg.input_channels;
        for (&c_out, &blocks) in cfg.stage_channels.iter().zip(&cfg.blocks_per_stage) {
            let entry = kaiming(vec![c_out, c_in, 3, 3], c_in * 9, rng);
            let hidden = 4 * c_out;
            // Residual branches close with zeros so every unit starts as an
            // identity; plain SGD tolerates much larger steps this way.
            let units = (0..blocks)
                .map(|_| UnitParams {
                    w1: kaiming(vec![hidden, c_out], c_out, rng),
                    w2: Tensor::zeros(vec![c_out, hidden]).with_grad(),
                })
                .collect();
            stages.push(StageParams { entry, units });
            c_in = c_out;
        }
        let head = kaiming(vec![NUM_CLASSES, c_in], c_in, rng);
        // Skip classifiers start at zero: the head alone defines the initial
        // logits and the finer-scale corrections fade in as training asks
        // for them, instead of injecting noise at /4 and /2.
        let c3 = cfg.stage_channels[1];
        let c2 = cfg.stage_channels[0];
        let head_s3 = Tensor::zeros(vec![NUM_CLASSES, c3]).with_grad();
        let head_s2 = Tensor::zeros(vec![NUM_CLASSES, c2]).with_grad();
        Ok(ModelBundle {
            cfg,
            fusion_cfg: CrossFusionConfig::default(),
            reference_taps: default_reference_taps(),
            stages,
            fusion: FusionParams::None,
            head,
            head_s3,
            head_s2,
        })
    }

    pub fn strategy(&self) -> FusionStrategy {
        match &self.fusion {
            FusionParams::None => FusionStrategy::None,
            FusionParams::Addition { .. } => FusionStrategy::Addition,
            FusionParams::Concat { .. } => FusionStrategy::Concat,
            FusionParams::Cross { .. } => FusionStrategy::Cross,
        }
    }

    fn checked_taps(&self, taps: &[TapName]) -> Result<Vec<TapName>> {
        if taps.is_empty() {
            return Err(CoreError::invalid("insert_fusion", "reference tap set is empty"));
        }
        let mut sorted = taps.to_vec();
        sorted.sort();
        sorted.dedup();
        if !sorted.contains(&TapName::S4Last) {
            return Err(CoreError::invalid(
                "insert_fusion",
                "reference taps must include the fusion target s4_last",
            ));
        }
        Ok(sorted)
    }

    /// Attach the cross-fusion block over `reference_taps` (always
    /// targeting s4_last), sizing one key embedding per tap.
    pub fn insert_block<R: Rng>(
        mut self,
        fusion_cfg: CrossFusionConfig,
        reference_taps: &[TapName],
        rng: &mut R,
    ) -> Result<Self> {
        let taps = self.checked_taps(reference_taps)?;
        let c_p = self.cfg.tap_channels(TapName::S4Last);
        let ref_channels: Vec<usize> = taps.iter().map(|&t| self.cfg.tap_channels(t)).collect();
        let block = BlockParams::init(c_p, &ref_channels, &fusion_cfg, rng)?;
        self.fusion = FusionParams::Cross { block };
        self.fusion_cfg = fusion_cfg;
        self.reference_taps = taps;
        Ok(self)
    }

    /// Attach a baseline fusion over the same tap set and pooling settings.
    /// Projections start at zero so every strategy is an identity at init.
    pub fn insert_baseline(
        mut self,
        strategy: FusionStrategy,
        fusion_cfg: CrossFusionConfig,
        reference_taps: &[TapName],
    ) -> Result<Self> {
        fusion_cfg.validate()?;
        let taps = self.checked_taps(reference_taps)?;
        let c_p = self.cfg.tap_channels(TapName::S4Last);
        self.fusion = match strategy {
            FusionStrategy::None => FusionParams::None,
            FusionStrategy::Addition => FusionParams::Addition {
                projs: taps
                    .iter()
                    .map(|&t| Tensor::zeros(vec![c_p, self.cfg.tap_channels(t)]).with_grad())
                    .collect(),
            },
            FusionStrategy::Concat => {
                let total: usize = taps.iter().map(|&t| self.cfg.tap_channels(t)).sum();
                FusionParams::Concat { proj: Tensor::zeros(vec![c_p, total]).with_grad() }
            }
            FusionStrategy::Cross => {
                return Err(CoreError::invalid(
                    "insert_baseline",
                    "cross strategy carries learned init, use insert_block",
                ));
            }
        };
        self.fusion_cfg = fusion_cfg;
        self.reference_taps = taps;
        Ok(self)
    }

    /// Flat parameter views in a fixed order: stages front to back (entry
    /// then units), fusion parameters, head. The optimizer, serialization,
    /// and tape leafing all follow this order.
    pub fn param_tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = Vec::new();
        for s in &self.stages {
            v.push(&s.entry);
            for u in &s.units {
                v.push(&u.w1);
                v.push(&u.w2);
            }
        }
        match &self.fusion {
            FusionParams::None => {}
            FusionParams::Addition { projs } => v.extend(projs.iter()),
            FusionParams::Concat { proj } => v.push(proj),
            FusionParams::Cross { block } => v.extend(block.tensors()),
        }
        v.push(&self.head);
        v.push(&self.head_s3);
        v.push(&self.head_s2);
        v
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = Vec::new();
        for s in &mut self.stages {
            v.push(&mut s.entry);
            for u in &mut s.units {
                v.push(&mut u.w1);
                v.push(&mut u.w2);
            }
        }
        match &mut self.fusion {
            FusionParams::None => {}
            FusionParams::Addition { projs } => v.extend(projs.iter_mut()),
            FusionParams::Concat { proj } => v.push(proj),
            FusionParams::Cross { block } => v.extend(block.tensors_mut()),
        }
        v.push(&mut self.head);
        v.push(&mut self.head_s3);
        v.push(&mut self.head_s2);
        v
    }

    /// Stable names matching [`Self::param_tensors`] order.
    pub fn param_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            let stage = i + 2;
            v.push(format!("stage{stage}.entry"));
            for u in 0..s.units.len() {
                v.push(format!("stage{stage}.unit{u}.w1"));
                v.push(format!("stage{stage}.unit{u}.w2"));
            }
        }
        match &self.fusion {
            FusionParams::None => {}
            FusionParams::Addition { projs } => {
                v.extend((0..projs.len()).map(|j| format!("fusion.proj{j}")));
            }
            FusionParams::Concat { .. } => v.push("fusion.proj".to_string()),
            FusionParams::Cross { block } => {
                v.push("block.w_theta".to_string());
                v.extend((0..block.w_phi.len()).map(|j| format!("block.w_phi{j}")));
                v.push("block.w_alpha".to_string());
            }
        }
        v.push("head.classifier".to_string());
        v.push("head.skip_s3".to_string());
        v.push("head.skip_s2".to_string());
        v
    }

    pub fn param_count(&self) -> usize {
        self.param_tensors().iter().map(|t| t.len()).sum()
    }

    /// Push every parameter onto the tape, preserving order.
    pub fn leaf_into(&self, tape: &mut Tape<T>) -> BundleIds {
        let stages = self
            .stages
            .iter()
            .map(|s| StageIds {
                entry: tape.leaf(s.entry.clone()),
                units: s
                    .units
                    .iter()
                    .map(|u| (tape.leaf(u.w1.clone()), tape.leaf(u.w2.clone())))
                    .collect(),
            })
            .collect();
        let fusion = match &self.fusion {
            FusionParams::None => FusionIds::None,
            FusionParams::Addition { projs } => {
                FusionIds::Addition { projs: projs.iter().map(|p| tape.leaf(p.clone())).collect() }
            }
            FusionParams::Concat { proj } => FusionIds::Concat { proj: tape.leaf(proj.clone()) },
            FusionParams::Cross { block } => FusionIds::Cross { block: block.leaf_into(tape) },
        };
        BundleIds {
            stages,
            fusion,
            head: tape.leaf(self.head.clone()),
            head_s3: tape.leaf(self.head_s3.clone()),
            head_s2: tape.leaf(self.head_s2.clone()),
        }
    }

    /// Full forward pass. Returns the four tap maps (target last) plus
    /// per-pixel class logits at input resolution. The fusion output
    /// replaces s4_last for all downstream computation.
    pub fn forward_with_taps(
        &self,
        tape: &mut Tape<T>,
        ids: &BundleIds,
        image: ValueId,
    ) -> Result<(FeatureHierarchy, ValueId)> {
        let dims = tape.value(image).dims().to_vec();
        if dims.len() != 3 || dims[0] != self.cfg.input_channels {
            return Err(CoreError::invalid(
                "forward_with_taps",
                format!("expected [{}, H, W] input, got {:?}", self.cfg.input_channels, dims),
            ));
        }
        let m = self.cfg.required_multiple();
        let (h, w) = (dims[1], dims[2]);
        if h % m != 0 || w % m != 0 {
            return Err(CoreError::invalid(
                "forward_with_taps",
                format!("input {h}x{w} must be divisible by {m}"),
            ));
        }

        let mut taps: [Option<ValueId>; 4] = [None; 4];
        let mut x = image;
        for (s, stage) in ids.stages.iter().enumerate() {
            let down = tape.conv3x3s2(x, stage.entry)?;
            x = tape.relu(down);
            if s == 2 {
                taps[TapName::S4First.index()] = Some(x);
            }
            let last = stage.units.len() - 1;
            for (u, &(w1, w2)) in stage.units.iter().enumerate() {
                if u == last {
                    let tap = [TapName::S2Last, TapName::S3Last, TapName::S4Last][s];
                    taps[tap.index()] = Some(x);
                    if s == 2 {
                        x = self.apply_fusion(tape, ids, &taps)?;
                    }
                }
                let a = tape.conv1x1(x, w1)?;
                let a = tape.relu(a);
                let b = tape.conv1x1(a, w2)?;
                let sum = tape.add(x, b)?;
                x = tape.relu(sum);
            }
        }

        // FCN-style head: coarse stage-4 logits refined by 1x1 skip
        // classifiers over the /4 and /2 taps, upsampled stepwise.
        let logits8 = tape.conv1x1(x, ids.head)?;
        let up4 = tape.resize_bilinear(logits8, h / 4, w / 4)?;
        let skip4 =
            tape.conv1x1(taps[TapName::S3Last.index()].expect("tap recorded"), ids.head_s3)?;
        let logits4 = tape.add(up4, skip4)?;
        let up2 = tape.resize_bilinear(logits4, h / 2, w / 2)?;
        let skip2 =
            tape.conv1x1(taps[TapName::S2Last.index()].expect("tap recorded"), ids.head_s2)?;
        let logits2 = tape.add(up2, skip2)?;
        let logits = tape.resize_bilinear(logits2, h, w)?;
        let maps: Vec<ValueId> = taps.into_iter().map(|t| t.expect("all taps recorded")).collect();
        Ok((FeatureHierarchy { maps, target_index: TapName::S4Last.index() }, logits))
    }

    fn apply_fusion(
        &self,
        tape: &mut Tape<T>,
        ids: &BundleIds,
        taps: &[Option<ValueId>; 4],
    ) -> Result<ValueId> {
        let target = taps[TapName::S4Last.index()].expect("target tap recorded");
        if matches!(ids.fusion, FusionIds::None) {
            return Ok(target);
        }
        let maps: Vec<ValueId> = self
            .reference_taps
            .iter()
            .map(|t| taps[t.index()].expect("tap recorded before fusion"))
            .collect();
        let target_index = self
            .reference_taps
            .iter()
            .position(|&t| t == TapName::S4Last)
            .expect("taps validated to include s4_last");
        let h = FeatureHierarchy { maps, target_index };
        match &ids.fusion {
            FusionIds::None => unreachable!(),
            FusionIds::Addition { projs } => fuse_addition(tape, &h, projs, &self.fusion_cfg),
            FusionIds::Concat { proj } => fuse_concat(tape, &h, *proj, &self.fusion_cfg),
            FusionIds::Cross { block } => cross_fusion_forward(tape, &h, block, &self.fusion_cfg),
        }
    }

    /// Inference convenience: forward on a private tape without gradients.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let ids = self.constants_into(&mut tape);
        let img = tape.constant(image.clone());
        let (_, logits) = self.forward_with_taps(&mut tape, &ids, img)?;
        Ok(tape.value(logits).clone())
    }

    fn constants_into(&self, tape: &mut Tape<T>) -> BundleIds {
        let stages = self
            .stages
            .iter()
            .map(|s| StageIds {
                entry: tape.constant(s.entry.clone()),
                units: s
                    .units
                    .iter()
                    .map(|u| (tape.constant(u.w1.clone()), tape.constant(u.w2.clone())))
                    .collect(),
            })
            .collect();
        let fusion = match &self.fusion {
            FusionParams::None => FusionIds::None,
            FusionParams::Addition { projs } => FusionIds::Addition {
                projs: projs.iter().map(|p| tape.constant(p.clone())).collect(),
            },
            FusionParams::Concat { proj } => {
                FusionIds::Concat { proj: tape.constant(proj.clone()) }
            }
            FusionParams::Cross { block } => {
                let mut frozen = block.clone();
                for t in frozen.tensors_mut() {
                    t.requires_grad = false;
                }
                FusionIds::Cross { block: frozen.leaf_into(tape) }
            }
        };
        BundleIds {
            stages,
            fusion,
            head: tape.constant(self.head.clone()),
            head_s3: tape.constant(self.head_s3.clone()),
            head_s2: tape.constant(self.head_s2.clone()),
        }
    }

    /// Estimated forward multiply-accumulates for one image, fusion
    /// included, at the given input resolution.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let mut total = 0u64;
        let mut c_in = self.cfg.input_channels as u64;
        let (mut sh, mut sw) = (h as u64, w as u64);
        for (&c_out, &blocks) in self.cfg.stage_channels.iter().zip(&self.cfg.blocks_per_stage) {
            sh /= 2;
            sw /= 2;
            let px = sh * sw;
            let c = c_out as u64;
            total += c * c_in * 9 * px;
            total += blocks as u64 * (8 * c * c) * px;
            c_in = c;
        }
        let k = NUM_CLASSES as u64;
        let px8 = (h as u64 / 8) * (w as u64 / 8);
        let px4 = (h as u64 / 4) * (w as u64 / 4);
        let px2 = (h as u64 / 2) * (w as u64 / 2);
        total += k * c_in * px8;
        // Stepwise skip refinement: each level pays one 1x1 classifier
        // plus bilinear interpolation of the incoming logits.
        total += 9 * k * px4 + k * self.cfg.stage_channels[1] as u64 * px4;
        total += 9 * k * px2 + k * self.cfg.stage_channels[0] as u64 * px2;
        total += 9 * k * (h as u64) * (w as u64);
        if !matches!(self.fusion, FusionParams::None) {
            let dims: Vec<(usize, usize, usize)> = self
                .reference_taps
                .iter()
                .map(|&t| {
                    let c = self.cfg.tap_channels(t);
                    let scale = match t {
                        TapName::S2Last => 2,
                        TapName::S3Last => 4,
                        TapName::S4First | TapName::S4Last => 8,
                    };
                    (c, h / scale, w / scale)
                })
                .collect();
            let target = self
                .reference_taps
                .iter()
                .position(|&t| t == TapName::S4Last)
                .expect("taps include target");
            total += crate::block::block_flops(&dims, target, &self.fusion_cfg);
        }
        total
    }

    /// Write the bundle as named flat tensor files plus a JSON manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir.display().to_string(), e))?;
        let names = self.param_names();
        let tensors = self.param_tensors();
        let mut entries = Vec::with_capacity(names.len());
        for (name, t) in names.iter().zip(&tensors) {
            let file = format!("{}.cft", name.replace('.', "_"));
            t.write_cft(&dir.join(&file))?;
            entries.push(TensorEntry { name: name.clone(), file, dims: t.dims().to_vec() });
        }
        let manifest = BundleManifest {
            schema: BUNDLE_SCHEMA.to_string(),
            backbone: self.cfg.clone(),
            fusion: self.fusion_cfg,
            strategy: self.strategy(),
            reference_taps: self.reference_taps.clone(),
            tensors: entries,
        };
        let path = dir.join("bundle.json");
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| CoreError::Json { path: path.display().to_string(), source: e })?;
        fs::write(&path, json).map_err(|e| CoreError::io(path.display().to_string(), e))?;
        Ok(())
    }

    /// Load a bundle saved by [`Self::save`], checking schema, names, and
    /// shapes against the manifest.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("bundle.json");
        let json =
            fs::read_to_string(&path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
        let manifest: BundleManifest = serde_json::from_str(&json)
            .map_err(|e| CoreError::Json { path: path.display().to_string(), source: e })?;
        if manifest.schema != BUNDLE_SCHEMA {
            return Err(CoreError::SchemaVersion {
                found: manifest.schema,
                expected: BUNDLE_SCHEMA.to_string(),
            });
        }
        let mut rng = crate::rng::rng_from_seed(0);
        let mut bundle = ModelBundle::<T>::init(manifest.backbone.clone(), &mut rng)?;
        bundle = match manifest.strategy {
            FusionStrategy::None => bundle,
            FusionStrategy::Cross => {
                bundle.insert_block(manifest.fusion, &manifest.reference_taps, &mut rng)?
            }
            s => bundle.insert_baseline(s, manifest.fusion, &manifest.reference_taps)?,
        };
        let names = bundle.param_names();
        if names.len() != manifest.tensors.len() {
            return Err(CoreError::ManifestMismatch {
                file: path.display().to_string(),
                reason: format!(
                    "manifest lists {} tensors, bundle shape needs {}",
                    manifest.tensors.len(),
                    names.len()
                ),
            });
        }
        for (slot, entry) in bundle.param_tensors_mut().into_iter().zip(&manifest.tensors) {
            let mut loaded = Tensor::<T>::read_cft(&dir.join(&entry.file))?;
            if loaded.dims() != entry.dims.as_slice() || loaded.dims() != slot.dims() {
                return Err(CoreError::ManifestMismatch {
                    file: entry.file.clone(),
                    reason: format!(
                        "tensor {} has shape {:?}, expected {:?}",
                        entry.name,
                        loaded.dims(),
                        slot.dims()
                    ),
                });
            }
            loaded.requires_grad = slot.requires_grad;
            *slot = loaded;
        }
        let loaded_names: Vec<&String> = manifest.tensors.iter().map(|e| &e.name).collect();
        for (want, got) in names.iter().zip(loaded_names) {
            if want != got {
                return Err(CoreError::ManifestMismatch {
                    file: path.display().to_string(),
                    reason: format!("tensor order mismatch: expected {want}, found {got}"),
                });
            }
        }
        Ok(bundle)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    file: String,
    dims: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct BundleManifest {
    schema: String,
    backbone: BackboneConfig,
    fusion: CrossFusionConfig,
    strategy: FusionStrategy,
    reference_taps: Vec<TapName>,
    tensors: Vec<TensorEntry>,
}

/// Tape handles for one forward pass's parameters.
pub struct BundleIds {
    pub stages: Vec<StageIds>,
    pub fusion: FusionIds,
    pub head: ValueId,
    pub head_s3: ValueId,
    pub head_s2: ValueId,
}

pub struct StageIds {
    pub entry: ValueId,
    pub units: Vec<(ValueId, ValueId)>,
}

pub enum FusionIds {
    None,
    Addition { projs: Vec<ValueId> },
    Concat { proj: ValueId },
    Cross { block: BlockParamIds },
}

impl BundleIds {
    /// Leaf ids in the same fixed order as [`ModelBundle::param_tensors`].
    pub fn all(&self) -> Vec<ValueId> {
        let mut ids = Vec::new();
        for s in &self.stages {
            ids.push(s.entry);
            for &(w1, w2) in &s.units {
                ids.push(w1);
                ids.push(w2);
            }
        }
        match &self.fusion {
            FusionIds::None => {}
            FusionIds::Addition { projs } => ids.extend(projs.iter().copied()),
            FusionIds::Concat { proj } => ids.push(*proj),
            FusionIds::Cross { block } => ids.extend(block.all()),
        }
        ids.push(self.head);
        ids.push(self.head_s3);
        ids.push(self.head_s2);
        ids
    }
}

/// Closed-form count of backbone plus head parameters (no fusion).
pub fn backbone_param_count(cfg: &BackboneConfig) -> usize {
    let mut total = 0;
    let mut c_in = cfg.input_channels;
    for (&c, &blocks) in cfg.stage_channels.iter().zip(&cfg.blocks_per_stage) {
        total += c * c_in * 9;
        total += blocks * (4 * c * c + 4 * c * c);
        c_in = c;
    }
    total + NUM_CLASSES * (c_in + cfg.stage_channels[1] + cfg.stage_channels[0])
}
