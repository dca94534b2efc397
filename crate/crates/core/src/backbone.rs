//! Projective backbone: a small VGG-style conv/pool/FC stack mapping images
//! to non-negative feature rows `F ∈ R₊^{1×f}`, plus a CSV ingestion path
//! for features exported from any pretrained extractor. Both paths produce
//! the same `FeatureVec` type and flow through identical downstream code.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{he_uniform, ParamSet};
use crate::tensor::{fmt_shape, Tensor};
use crate::Mode;

/// One image with its class label. Pixels are CHW in [0, 1].
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub pixels: Tensor<f32>,
    pub label: usize,
}

impl ImageSample {
    pub fn new(pixels: Tensor<f32>, label: usize) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(Error::Dim(format!(
                "image must be CxHxW with H == W, got {}",
                fmt_shape(s)
            )));
        }
        Ok(ImageSample { pixels, label })
    }

    pub fn side(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[0]
    }
}

/// Non-negative feature row `1×f`.
#[derive(Debug, Clone)]
pub struct FeatureVec(Tensor<f32>);

impl FeatureVec {
    pub fn new(t: Tensor<f32>) -> Result<Self> {
        if t.shape().len() != 2 || t.shape()[0] != 1 {
            return Err(Error::Dim(format!(
                "feature must be a 1xf row, got {}",
                fmt_shape(t.shape())
            )));
        }
        if t.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Data("feature with negative entry".into()));
        }
        Ok(FeatureVec(t))
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub out_channels: usize,
    /// Odd kernel size; padding `k/2` keeps the spatial side.
    pub kernel: usize,
    /// Append a 2×2/stride-2 max-pool after the activation.
    pub pool: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub input_channels: usize,
    pub input_side: usize,
    pub conv_blocks: Vec<ConvBlockSpec>,
    /// Fully connected widths; the last entry is the feature width `f`.
    pub fc_widths: Vec<usize>,
}

impl ArchitectureSpec {
    pub fn feature_width(&self) -> usize {
        *self.fc_widths.last().unwrap_or(&0)
    }

    /// Walk the layer chain, returning (side, channels) entering the FC
    /// stage. Rejects inconsistent chains.
    fn validate(&self) -> Result<(usize, usize)> {
        if self.input_channels == 0 || self.input_side == 0 {
            return Err(Error::Config("input extents must be positive".into()));
        }
        if self.fc_widths.is_empty() || self.fc_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(
                "fc_widths must be non-empty positive widths".into(),
            ));
        }
        let mut side = self.input_side;
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.out_channels == 0 {
                return Err(Error::Config(format!("conv block {i} has zero channels")));
            }
            if b.kernel == 0 || b.kernel % 2 == 0 || b.kernel > side {
                return Err(Error::Config(format!(
                    "conv block {i}: kernel {} invalid for side {side}",
                    b.kernel
                )));
            }
            if b.pool {
                if side < 2 {
                    return Err(Error::Config(format!(
                        "conv block {i}: cannot pool side {side}"
                    )));
                }
                side /= 2;
            }
        }
        let channels = self
            .conv_blocks
            .last()
            .map(|b| b.out_channels)
            .unwrap_or(self.input_channels);
        Ok((side, channels))
    }

    /// Analytic trainable-value count for this chain.
    pub fn param_count(&self) -> usize {
        let mut count = 0usize;
        let mut cin = self.input_channels;
        for b in &self.conv_blocks {
            count += b.out_channels * cin * b.kernel * b.kernel + b.out_channels;
            cin = b.out_channels;
        }
        let (side, channels) = match self.validate() {
            Ok(v) => v,
            Err(_) => return 0,
        };
        let mut width = side * side * channels;
        for &w in &self.fc_widths {
            count += width * w + w;
            width = w;
        }
        count
    }
}

/// The projective network. A terminal ReLU keeps every feature entry
/// non-negative.
#[derive(Debug, Clone)]
pub struct Backbone {
    spec: ArchitectureSpec,
    pub params: ParamSet,
}

impl Backbone {
    pub fn build(spec: ArchitectureSpec, rng_seed: u64) -> Result<Self> {
        let (side, channels) = spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut params = ParamSet::new();
        let mut cin = spec.input_channels;
        for (i, b) in spec.conv_blocks.iter().enumerate() {
            let fan_in = cin * b.kernel * b.kernel;
            params.insert(
                format!("conv{i}.w"),
                he_uniform(vec![b.out_channels, cin, b.kernel, b.kernel], fan_in, &mut rng),
                true,
            );
            params.insert(
                format!("conv{i}.b"),
                Tensor::zeros(vec![b.out_channels]),
                true,
            );
            cin = b.out_channels;
        }
        let mut width = side * side * channels;
        for (i, &w) in spec.fc_widths.iter().enumerate() {
            params.insert(
                format!("fc{i}.w"),
                he_uniform(vec![width, w], width, &mut rng),
                true,
            );
            params.insert(format!("fc{i}.b"), Tensor::zeros(vec![1, w]), true);
            width = w;
        }
        Ok(Backbone { spec, params })
    }

    pub fn from_parts(spec: ArchitectureSpec, params: ParamSet) -> Result<Self> {
        spec.validate()?;
        Ok(Backbone { spec, params })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn feature_width(&self) -> usize {
        self.spec.feature_width()
    }

    /// Forward from pre-inserted parameter leaves (training path).
    /// `mode` is accepted for interface symmetry; the stack has no layers
    /// that distinguish the modes.
    pub fn forward_from_nodes(
        &self,
        g: &mut Graph<f32>,
        image: NodeId,
        nodes: &[(String, NodeId)],
        _mode: Mode,
    ) -> Result<NodeId> {
        let look = |name: &str| -> Result<NodeId> {
            nodes
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, id)| *id)
                .ok_or_else(|| Error::Config(format!("backbone node map misses {name}")))
        };
        let shape = g.value(image).shape().to_vec();
        if shape != [self.spec.input_channels, self.spec.input_side, self.spec.input_side] {
            return Err(Error::Dim(format!(
                "backbone expects {}x{}x{} input, got {}",
                self.spec.input_channels,
                self.spec.input_side,
                self.spec.input_side,
                fmt_shape(&shape)
            )));
        }

        let mut x = image;
        for (i, b) in self.spec.conv_blocks.iter().enumerate() {
            let w = look(&format!("conv{i}.w"))?;
            let bias = look(&format!("conv{i}.b"))?;
            x = g.conv2d(x, w, Some(bias), 1, b.kernel / 2)?;
            x = g.relu(x);
            if b.pool {
                x = g.maxpool2d(x, 2, 2)?;
            }
        }
        let flat_len = g.value(x).len();
        x = g.reshape(x, vec![1, flat_len])?;
        for i in 0..self.spec.fc_widths.len() {
            let w = look(&format!("fc{i}.w"))?;
            let b = look(&format!("fc{i}.b"))?;
            x = g.matmul(x, w)?;
            x = g.add(x, b)?;
            x = g.relu(x);
        }
        Ok(x)
    }

    /// Eval-mode feature extraction with parameters as constants.
    pub fn features(&self, img: &ImageSample) -> Result<FeatureVec> {
        let mut g = Graph::new();
        let nodes: Vec<(String, NodeId)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), g.constant(p.value.clone())))
            .collect();
        let input = g.constant(img.pixels.clone());
        let out = self.forward_from_nodes(&mut g, input, &nodes, Mode::Eval)?;
        FeatureVec::new(g.value(out).clone())
    }
}

/// Parse the feature CSV format: header `label,f0,...,f{f-1}`, one sample
/// per row, '#' comment lines, decimal floats, non-negative features.
pub fn ingest_features(path: &Path) -> Result<Vec<(FeatureVec, usize)>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;

    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            row: 1,
            msg: e.to_string(),
        })?
        .clone();
    if headers.len() < 2 || headers.get(0) != Some("label") {
        return Err(Error::Parse {
            row: 1,
            msg: format!(
                "header must be label,f0,...  got {:?}",
                headers.iter().take(3).collect::<Vec<_>>()
            ),
        });
    }
    let width = headers.len() - 1;

    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2; // 1-based, after the header
        let record = record.map_err(|e| Error::Parse {
            row,
            msg: e.to_string(),
        })?;
        if record.len() != width + 1 {
            return Err(Error::Parse {
                row,
                msg: format!("expected {} columns, got {}", width + 1, record.len()),
            });
        }
        let label: usize = record
            .get(0)
            .unwrap()
            .parse()
            .map_err(|_| Error::Parse {
                row,
                msg: format!("bad label {:?}", record.get(0).unwrap()),
            })?;
        let mut values = Vec::with_capacity(width);
        for j in 1..=width {
            let cell = record.get(j).unwrap();
            let v: f32 = cell.parse().map_err(|_| Error::Parse {
                row,
                msg: format!("non-numeric cell {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    msg: format!("non-finite feature {v}"),
                });
            }
            if v < 0.0 {
                return Err(Error::Parse {
                    row,
                    msg: format!("negative feature {v}"),
                });
            }
            values.push(v);
        }
        let feature = FeatureVec::new(Tensor::row(values)?)?;
        out.push((feature, label));
    }
    if out.is_empty() {
        return Err(Error::Parse {
            row: 1,
            msg: "feature file contains no samples".into(),
        });
    }
    Ok(out)
}
