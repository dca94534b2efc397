//! Joint optimization of the backbone and the generator under the triplet
//! loss: triplet sampling, the augmentation variant, Adam with per-network
//! learning rates, and the epoch loop.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamConfig, AdamState};
use crate::augment::{augment, AugmentScope, AugmentationPolicy};
use crate::backbone::{Backbone, FeatureVec, ImageSample};
use crate::data::Dataset;
use crate::dcgpn::{Generator, LatentSeed};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::metric::{triplet_forward, MarginConfig};
use crate::rng::{rng_for, Stream};
use crate::tensor::Tensor;
use crate::Mode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Ddipnet,
    DdipnetPlus,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::Ddipnet => write!(f, "ddipnet"),
            Variant::DdipnetPlus => write!(f, "ddipnet+"),
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddipnet" => Ok(Variant::Ddipnet),
            "ddipnet+" | "ddipnet_plus" => Ok(Variant::DdipnetPlus),
            other => Err(Error::Config(format!(
                "unknown variant {other:?}; expected ddipnet or ddipnet+"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_backbone: f32,
    pub lr_generator: f32,
    pub margin: MarginConfig,
    pub variant: Variant,
    pub rng_seed: u64,
    pub adam: AdamConfig,
    pub augment: AugmentationPolicy,
    pub augment_scope: AugmentScope,
    /// Draw a fresh latent input every batch instead of freezing one per
    /// run. Off by default: the prior input stays fixed.
    pub resample_z: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            lr_backbone: 1e-6,
            lr_generator: 1e-4,
            margin: MarginConfig::default(),
            variant: Variant::Ddipnet,
            rng_seed: 0,
            adam: AdamConfig::default(),
            augment: AugmentationPolicy::default(),
            augment_scope: AugmentScope::All,
            resample_z: false,
        }
    }
}

impl TrainConfig {
    /// Zero learning rates are tolerated as explicit no-op diagnostics;
    /// negative ones are rejected.
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        for (name, lr) in [
            ("lr_backbone", self.lr_backbone),
            ("lr_generator", self.lr_generator),
        ] {
            if !lr.is_finite() || lr < 0.0 {
                return Err(Error::Config(format!("{name} must be >= 0, got {lr}")));
            }
        }
        MarginConfig::new(self.margin.m)?;
        self.augment.validate()?;
        Ok(())
    }
}

/// One triplet as indices into a dataset.
#[derive(Debug, Clone, Copy)]
pub struct Triplet {
    pub anchor: usize,
    pub negative: usize,
    pub positive: usize,
}

/// Sample a batch of triplets: anchors uniform over the dataset, positives
/// uniform over the anchor's class excluding the anchor, negatives uniform
/// over all other-class samples.
pub fn sample_triplets(
    dataset: &Dataset,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Triplet>> {
    let labels = dataset.labels();
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.classes];
    for (i, &l) in labels.iter().enumerate() {
        per_class[l].push(i);
    }
    let populated = per_class.iter().filter(|v| !v.is_empty()).count();
    if populated < 2 {
        return Err(Error::Data(format!(
            "triplet sampling needs >= 2 populated classes, found {populated}"
        )));
    }
    if let Some(c) = per_class.iter().position(|v| v.len() == 1) {
        return Err(Error::Data(format!(
            "class {c} is a singleton; triplet sampling needs >= 2 samples per class"
        )));
    }
    let n = dataset.len();
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let anchor = rng.gen_range(0..n);
        let class = labels[anchor];
        let same = &per_class[class];
        let positive = loop {
            let cand = same[rng.gen_range(0..same.len())];
            if cand != anchor {
                break cand;
            }
        };
        let other_total = n - same.len();
        let mut pick = rng.gen_range(0..other_total);
        let mut negative = 0;
        for (c, members) in per_class.iter().enumerate() {
            if c == class {
                continue;
            }
            if pick < members.len() {
                negative = members[pick];
                break;
            }
            pick -= members.len();
        }
        debug_assert_ne!(labels[negative], class);
        out.push(Triplet {
            anchor,
            negative,
            positive,
        });
    }
    Ok(out)
}

/// Per-epoch aggregates over all triplets seen in the epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_d1: f64,
    pub mean_d2: f64,
    pub wallclock_ms: u64,
}

/// The jointly trained pipeline. Prediction-time feature extraction uses
/// only the backbone; the generator rides along for checkpointing and for
/// the optional embedding-space transform.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub backbone: Option<Backbone>,
    pub generator: Generator,
    pub z: LatentSeed,
    pub variant: Variant,
    pub margin: MarginConfig,
}

impl TrainedModel {
    pub fn feature_width(&self) -> usize {
        self.generator.config().feature_width
    }

    /// Eval-mode features for one image.
    pub fn features(&self, img: &ImageSample) -> Result<FeatureVec> {
        let bb = self.backbone.as_ref().ok_or_else(|| {
            Error::Config("model has no backbone; dataset supplies features directly".into())
        })?;
        bb.features(img)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut ck = crate::checkpoint::Checkpoint::new();
        ck.put_meta("kind", "ddip-model");
        ck.put_meta("variant", self.variant);
        ck.put_meta("margin", self.margin.m);
        ck.put_meta("z_frozen", if self.z.is_frozen() { 1 } else { 0 });
        ck.put_meta(
            "generator_config",
            serde_json::to_string(self.generator.config())
                .map_err(|e| Error::Config(format!("generator config serialization: {e}")))?,
        );
        if let Some(bb) = &self.backbone {
            ck.put_meta(
                "backbone_spec",
                serde_json::to_string(bb.spec())
                    .map_err(|e| Error::Config(format!("backbone spec serialization: {e}")))?,
            );
            for p in bb.params.iter() {
                ck.put_tensor(format!("backbone/{}", p.name), p.value.clone());
            }
        }
        for p in self.generator.params.iter() {
            ck.put_tensor(format!("generator/{}", p.name), p.value.clone());
        }
        ck.put_tensor("z", self.z.values().clone());
        ck.save(path)
    }

    /// Rebuilds the canonical parameter structure from the stored configs
    /// and overlays the checkpointed values, so trainable flags and
    /// ordering cannot drift from what `build` produces.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ck = crate::checkpoint::Checkpoint::load(path)?;
        let meta = |key: &str| -> Result<&str> {
            ck.meta_get(key)
                .ok_or_else(|| Error::Config(format!("model checkpoint misses {key}")))
        };
        let variant: Variant = meta("variant")?.parse()?;
        let margin = MarginConfig::new(
            meta("margin")?
                .parse()
                .map_err(|_| Error::Config("bad margin in checkpoint".into()))?,
        )?;
        let gen_cfg: crate::dcgpn::GeneratorConfig = serde_json::from_str(meta("generator_config")?)
            .map_err(|e| Error::Config(format!("bad generator config: {e}")))?;
        let mut generator = Generator::build(gen_cfg, 0)?;
        overlay(&mut generator.params, &ck, "generator")?;

        let backbone = if let Some(spec_json) = ck.meta_get("backbone_spec") {
            let spec: crate::backbone::ArchitectureSpec = serde_json::from_str(spec_json)
                .map_err(|e| Error::Config(format!("bad backbone spec: {e}")))?;
            let mut bb = Backbone::build(spec, 0)?;
            overlay(&mut bb.params, &ck, "backbone")?;
            Some(bb)
        } else {
            None
        };

        let frozen = meta("z_frozen")? == "1";
        let z = LatentSeed::from_tensor(ck.tensor("z")?.clone(), frozen)?;
        Ok(TrainedModel {
            backbone,
            generator,
            z,
            variant,
            margin,
        })
    }
}

fn overlay(params: &mut crate::params::ParamSet, ck: &crate::checkpoint::Checkpoint, prefix: &str) -> Result<()> {
    let stored = ck.tensors_under(prefix);
    if stored.len() != params.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {} tensors under {prefix}/, expected {}",
            stored.len(),
            params.len()
        )));
    }
    for (name, value) in stored {
        let slot = params
            .get_mut(&name)
            .ok_or_else(|| Error::Config(format!("checkpoint tensor {prefix}/{name} has no slot")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Dim(format!(
                "checkpoint tensor {prefix}/{name} shape {:?} vs expected {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value;
    }
    Ok(())
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub history: Vec<EpochStats>,
}

/// Inputs materialized for one triplet member.
enum MemberInput {
    Image(ImageSample),
    Feature(FeatureVec),
}

/// Joint training. For image datasets both networks train; for feature
/// datasets the features stand in for backbone outputs and only the
/// generator trains. Fully reproducible from `cfg.rng_seed`.
pub fn train(
    dataset: &Dataset,
    mut backbone: Option<Backbone>,
    mut generator: Generator,
    mut z: LatentSeed,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let f = generator.config().feature_width;
    match (&backbone, dataset.is_images()) {
        (Some(bb), true) => {
            if bb.feature_width() != f {
                return Err(Error::Config(format!(
                    "backbone feature width {} vs generator feature width {f}",
                    bb.feature_width()
                )));
            }
        }
        (None, false) => {
            let w = dataset.feature_width().unwrap_or(0);
            if w != f {
                return Err(Error::Config(format!(
                    "dataset feature width {w} vs generator feature width {f}"
                )));
            }
        }
        (Some(_), false) => {
            return Err(Error::Config(
                "feature datasets bypass the backbone; build the pipeline without one".into(),
            ))
        }
        (None, true) => {
            return Err(Error::Config(
                "image datasets require a backbone".into(),
            ))
        }
    }
    if generator.config().classes != dataset.classes {
        return Err(Error::Config(format!(
            "generator built for {} classes, dataset has {}",
            generator.config().classes,
            dataset.classes
        )));
    }

    if !cfg.resample_z {
        z.freeze();
    }
    let mut triplet_rng = rng_for(cfg.rng_seed, Stream::Triplets);
    let mut augment_rng = rng_for(cfg.rng_seed, Stream::Augment);
    let mut latent_rng = rng_for(cfg.rng_seed, Stream::Latent);

    let mut backbone_adam = AdamState::new();
    let mut generator_adam = AdamState::new();

    let batches_per_epoch = usize::max(1, dataset.len().div_ceil(cfg.batch_size));
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0f64;
        let mut d1_sum = 0.0f64;
        let mut d2_sum = 0.0f64;
        let mut triplet_count = 0usize;

        for _ in 0..batches_per_epoch {
            let triplets = sample_triplets(dataset, cfg.batch_size, &mut triplet_rng)?;
            if cfg.resample_z {
                z = LatentSeed::sample(latent_rng.gen());
            }

            let mut g: Graph<f32> = Graph::new();
            let backbone_nodes = backbone
                .as_ref()
                .map(|bb| bb.params.insert_trainable(&mut g))
                .unwrap_or_default();
            let generator_nodes = generator.params.insert_trainable(&mut g);
            let z_node = g.constant(z.values().clone());
            let s_node = generator.forward_from_nodes(&mut g, z_node, &generator_nodes, Mode::Train)?;

            let mut losses = Vec::with_capacity(triplets.len());
            for t in &triplets {
                let members = [t.anchor, t.negative, t.positive];
                let mut nodes = Vec::with_capacity(3);
                for (slot, &idx) in members.iter().enumerate() {
                    let input = materialize(dataset, idx, slot, cfg, &mut augment_rng)?;
                    let feature_node = match input {
                        MemberInput::Image(img) => {
                            let img_node = g.constant(img.pixels);
                            backbone
                                .as_ref()
                                .unwrap()
                                .forward_from_nodes(&mut g, img_node, &backbone_nodes, Mode::Train)?
                        }
                        MemberInput::Feature(fv) => g.constant(fv.into_tensor()),
                    };
                    nodes.push(feature_node);
                }
                let out = triplet_forward(&mut g, nodes[0], nodes[1], nodes[2], s_node, &cfg.margin)?;
                let d1 = g.value(out.d1).item() as f64;
                let d2 = g.value(out.d2).item() as f64;
                let l = g.value(out.loss).item() as f64;
                if !l.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "triplet loss at epoch {epoch}"
                    )));
                }
                d1_sum += d1;
                d2_sum += d2;
                loss_sum += l;
                triplet_count += 1;
                losses.push(out.loss);
            }

            let batch_loss = g.mean_of(&losses)?;
            g.backward(batch_loss)?;

            if let Some(bb) = backbone.as_mut() {
                let grads = collect_grads(&g, &backbone_nodes);
                adam_step(&mut bb.params, &grads, &mut backbone_adam, cfg.lr_backbone, &cfg.adam)?;
            }
            let grads = collect_grads(&g, &generator_nodes);
            adam_step(
                &mut generator.params,
                &grads,
                &mut generator_adam,
                cfg.lr_generator,
                &cfg.adam,
            )?;
        }

        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / triplet_count as f64,
            mean_d1: d1_sum / triplet_count as f64,
            mean_d2: d2_sum / triplet_count as f64,
            wallclock_ms: started.elapsed().as_millis() as u64,
        };
        let stop = stats.mean_loss == 0.0;
        history.push(stats);
        if stop {
            break;
        }
    }

    Ok(TrainOutcome {
        model: TrainedModel {
            backbone,
            generator,
            z,
            variant: cfg.variant,
            margin: cfg.margin,
        },
        history,
    })
}

fn materialize(
    dataset: &Dataset,
    idx: usize,
    slot: usize,
    cfg: &TrainConfig,
    augment_rng: &mut impl Rng,
) -> Result<MemberInput> {
    if let Some(img) = dataset.image(idx) {
        let apply = cfg.variant == Variant::DdipnetPlus
            && match cfg.augment_scope {
                AugmentScope::All => true,
                AugmentScope::AnchorOnly => slot == 0,
                AugmentScope::PositiveOnly => slot == 2,
            };
        // Draws happen for every member regardless of scope so the stream
        // stays aligned across scope settings.
        if cfg.variant == Variant::DdipnetPlus {
            let candidate = augment(img, &cfg.augment, augment_rng);
            if apply {
                return Ok(MemberInput::Image(candidate));
            }
        }
        Ok(MemberInput::Image(img.clone()))
    } else {
        Ok(MemberInput::Feature(dataset.feature(idx).unwrap().clone()))
    }
}

fn collect_grads(g: &Graph<f32>, nodes: &[(String, NodeId)]) -> Vec<(String, Tensor<f32>)> {
    nodes
        .iter()
        .map(|(name, id)| {
            let grad = g
                .grad(*id)
                .unwrap_or_else(|| Tensor::zeros(g.value(*id).shape().to_vec()));
            (name.clone(), grad)
        })
        .collect()
}
