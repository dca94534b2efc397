//! Deep Convolutional Generative Prior Network.
//!
//! Maps a fixed 100-dimensional uniform latent row to the discriminant
//! matrix `S ∈ R^{f×c}`: a dense projection to a 4×4 volume, repeated
//! (transposed conv, batchnorm, ReLU) stages doubling the spatial side,
//! a final transposed conv to `c` channels with tanh, then a spatial
//! flatten of the `s×s×c` volume so row `r` of `S` corresponds to spatial
//! position `(r div s, r mod s)` across all channels.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{normal_init, ParamSet};
use crate::tensor::Tensor;
use crate::Mode;

pub const LATENT_DIM: usize = 100;

const BN_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;

/// Fixed random generator input. Sampled once per run; frozen when
/// training starts and stored in checkpoints so runs resume bit-exactly.
#[derive(Debug, Clone)]
pub struct LatentSeed {
    values: Tensor<f32>,
    frozen: bool,
}

impl LatentSeed {
    /// 100 i.i.d. uniform values on [-1, 1], reproducible from the seed.
    pub fn sample(rng_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let data = (0..LATENT_DIM)
            .map(|_| rng.gen_range(-1.0f32..=1.0))
            .collect();
        LatentSeed {
            values: Tensor::new(vec![1, LATENT_DIM], data).expect("uniform draw is finite"),
            frozen: false,
        }
    }

    pub fn from_tensor(values: Tensor<f32>, frozen: bool) -> Result<Self> {
        if values.shape() != [1, LATENT_DIM] {
            return Err(Error::Dim(format!(
                "latent seed must be 1x{LATENT_DIM}, got {:?}",
                values.shape()
            )));
        }
        Ok(LatentSeed { values, frozen })
    }

    pub fn values(&self) -> &Tensor<f32> {
        &self.values
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Class count; the depth of the last layer.
    pub classes: usize,
    /// Backbone feature width `f`; must equal `side²` for a valid side.
    pub feature_width: usize,
    /// Channel depth of the initial 4×4 volume; halves per upsampling stage.
    pub base_channels: usize,
}

impl GeneratorConfig {
    /// Spatial side `s = sqrt(f)`; `f` must be a perfect square with
    /// side >= 8 and side a power-of-two multiple of 4.
    pub fn side(&self) -> Result<usize> {
        let f = self.feature_width;
        let s = (f as f64).sqrt().round() as usize;
        if s * s != f {
            return Err(Error::Config(format!(
                "feature width {f} is not a perfect square"
            )));
        }
        if s < 8 || s % 4 != 0 || !(s / 4).is_power_of_two() {
            return Err(Error::Config(format!(
                "feature width {f} gives side {s}; side must be >= 8 and a power-of-two multiple of 4"
            )));
        }
        Ok(s)
    }

    /// Upsampling stages: log2(side / 4).
    pub fn stages(&self) -> Result<usize> {
        Ok((self.side()? / 4).trailing_zeros() as usize)
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "generator needs >= 2 classes, got {}",
                self.classes
            )));
        }
        let stages = self.stages()?;
        let div = 1usize << (stages - 1);
        if self.base_channels == 0 || self.base_channels % div != 0 {
            return Err(Error::Config(format!(
                "base_channels {} must be a positive multiple of {div} for {stages} stages",
                self.base_channels
            )));
        }
        Ok(())
    }
}

pub struct Generator {
    cfg: GeneratorConfig,
    pub params: ParamSet,
    forward_count: AtomicU64,
}

impl Clone for Generator {
    fn clone(&self) -> Self {
        Generator {
            cfg: self.cfg.clone(),
            params: self.params.clone(),
            forward_count: AtomicU64::new(self.forward_count.load(Ordering::Relaxed)),
        }
    }
}

impl std::fmt::Debug for Generator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Generator")
            .field("cfg", &self.cfg)
            .field("params", &self.params.len())
            .finish()
    }
}

impl Generator {
    /// Build with DCGAN-convention initialization: conv/dense weights
    /// N(0, 0.02), batchnorm gamma 1 and beta 0. Transposed convs carry no
    /// bias; the following batchnorm absorbs it.
    pub fn build(cfg: GeneratorConfig, rng_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let stages = cfg.stages()?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut params = ParamSet::new();

        let base = cfg.base_channels;
        params.insert(
            "proj.w",
            normal_init(vec![LATENT_DIM, base * 16], 0.02, &mut rng),
            true,
        );
        insert_bn(&mut params, "bn0", base);

        let mut ch = base;
        for i in 0..stages - 1 {
            let out = ch / 2;
            params.insert(
                format!("stage{i}.w"),
                normal_init(vec![ch, out, 4, 4], 0.02, &mut rng),
                true,
            );
            insert_bn(&mut params, &format!("bn{}", i + 1), out);
            ch = out;
        }
        params.insert(
            "final.w",
            normal_init(vec![ch, cfg.classes, 4, 4], 0.02, &mut rng),
            true,
        );

        Ok(Generator {
            cfg,
            params,
            forward_count: AtomicU64::new(0),
        })
    }

    pub fn from_parts(cfg: GeneratorConfig, params: ParamSet) -> Result<Self> {
        cfg.validate()?;
        Ok(Generator {
            cfg,
            params,
            forward_count: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    /// Total generator forwards since construction; the inference path is
    /// required to leave this untouched.
    pub fn forward_count(&self) -> u64 {
        self.forward_count.load(Ordering::Relaxed)
    }

    /// Forward from pre-inserted parameter leaves (training path). `nodes`
    /// maps trainable parameter names to graph leaves; running statistics
    /// are read from (and in train mode written back to) `self.params`.
    pub fn forward_from_nodes(
        &mut self,
        g: &mut Graph<f32>,
        z: NodeId,
        nodes: &[(String, NodeId)],
        mode: Mode,
    ) -> Result<NodeId> {
        self.forward_count.fetch_add(1, Ordering::Relaxed);
        let look = |name: &str| -> Result<NodeId> {
            nodes
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, id)| *id)
                .ok_or_else(|| Error::Config(format!("generator node map misses {name}")))
        };

        let zv = g.value(z);
        if zv.shape() != [1, LATENT_DIM] {
            return Err(Error::Dim(format!(
                "generator input must be 1x{LATENT_DIM}, got {:?}",
                zv.shape()
            )));
        }

        let stages = self.cfg.stages()?;
        let base = self.cfg.base_channels;

        let proj = look("proj.w")?;
        let flat = g.matmul(z, proj)?;
        let mut x = g.reshape(flat, vec![base, 4, 4])?;
        x = self.bn(g, x, "bn0", &look, mode)?;
        x = g.relu(x);

        let mut ch = base;
        for i in 0..stages - 1 {
            let w = look(&format!("stage{i}.w"))?;
            x = g.conv2d_transpose(x, w, None, 2, 1)?;
            x = self.bn(g, x, &format!("bn{}", i + 1), &look, mode)?;
            x = g.relu(x);
            ch /= 2;
        }
        let _ = ch;
        let w = look("final.w")?;
        x = g.conv2d_transpose(x, w, None, 2, 1)?;
        x = g.tanh(x);

        // c×s×s volume -> [c, s²] -> transpose -> [f, c].
        let side = self.cfg.side()?;
        let flat = g.reshape(x, vec![self.cfg.classes, side * side])?;
        g.transpose2d(flat)
    }

    /// Stand-alone forward with parameters as constants; used outside the
    /// training loop (tests, the optional embedding-path transform).
    pub fn forward(&mut self, g: &mut Graph<f32>, z: &LatentSeed, mode: Mode) -> Result<NodeId> {
        let nodes: Vec<(String, NodeId)> = self
            .params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| (p.name.clone(), g.constant(p.value.clone())))
            .collect();
        let z_id = g.constant(z.values().clone());
        self.forward_from_nodes(g, z_id, &nodes, mode)
    }

    /// Discriminant matrix as a plain tensor (eval mode).
    pub fn discriminant_matrix(&mut self, z: &LatentSeed) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let s = self.forward(&mut g, z, Mode::Eval)?;
        Ok(g.value(s).clone())
    }

    fn bn(
        &mut self,
        g: &mut Graph<f32>,
        x: NodeId,
        name: &str,
        look: &impl Fn(&str) -> Result<NodeId>,
        mode: Mode,
    ) -> Result<NodeId> {
        let gamma = look(&format!("{name}.gamma"))?;
        let beta = look(&format!("{name}.beta"))?;
        match mode {
            Mode::Train => {
                let (y, stats) = g.batchnorm2d_train(x, gamma, beta, BN_EPS)?;
                let mname = format!("{name}.running_mean");
                let vname = format!("{name}.running_var");
                self.params.update(&mname, |t| {
                    for (r, b) in t.data_mut().iter_mut().zip(&stats.mean) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                    }
                })?;
                self.params.update(&vname, |t| {
                    for (r, b) in t.data_mut().iter_mut().zip(&stats.var) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                    }
                })?;
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.params.require(&format!("{name}.running_mean"))?.clone();
                let var = self.params.require(&format!("{name}.running_var"))?.clone();
                g.batchnorm2d_eval(x, gamma, beta, mean.data(), var.data(), BN_EPS)
            }
        }
    }
}

fn insert_bn(params: &mut ParamSet, name: &str, channels: usize) {
    params.insert(
        format!("{name}.gamma"),
        Tensor::filled(vec![channels], 1.0),
        true,
    );
    params.insert(
        format!("{name}.beta"),
        Tensor::zeros(vec![channels]),
        true,
    );
    params.insert(
        format!("{name}.running_mean"),
        Tensor::zeros(vec![channels]),
        false,
    );
    params.insert(
        format!("{name}.running_var"),
        Tensor::filled(vec![channels], 1.0),
        false,
    );
}
