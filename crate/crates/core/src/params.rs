//! Named parameter registry with a deterministic initialization recipe.

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{NodeId, Tape};
use crate::config::{Aggregation, ModelConfig};
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::tensor::Tensor4;

#[derive(Debug, Clone)]
pub struct ModelParams {
    names: Vec<String>,
    index: HashMap<String, usize>,
    tensors: Vec<Tensor4>,
}

impl ModelParams {
    pub fn empty() -> Self {
        ModelParams { names: Vec::new(), index: HashMap::new(), tensors: Vec::new() }
    }

    /// Builds and initializes every parameter the configured model needs.
    /// Same seed, same config: bit-identical values.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder { rng: seeded(cfg.seed), params: ModelParams::empty() };
        register_all(&mut b, cfg)?;
        Ok(b.params)
    }

    pub fn register(&mut self, name: &str, t: Tensor4) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name '{}'", name)));
        }
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor4> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::Config(format!("unknown parameter '{}'", name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor4> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.tensors[i]),
            None => Err(Error::Config(format!("unknown parameter '{}'", name))),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor4)> {
        self.names.iter().zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor4)> {
        self.names.iter().zip(self.tensors.iter_mut())
    }

    pub fn tensor_count(&self) -> usize {
        self.tensors.len()
    }

    pub fn value_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Zero every value of every parameter whose name contains `fragment`.
    pub fn zero_matching(&mut self, fragment: &str) {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            if name.contains(fragment) {
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

/// Parameter leaves registered on a tape, looked up by name.
pub struct ParamNodes {
    map: HashMap<String, NodeId>,
    names: Vec<String>,
}

impl ParamNodes {
    pub fn new(tape: &mut Tape, params: &ModelParams) -> Self {
        let mut map = HashMap::new();
        let mut names = Vec::new();
        for (name, t) in params.iter() {
            map.insert(name.clone(), tape.leaf(t.clone()));
            names.push(name.clone());
        }
        ParamNodes { map, names }
    }

    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown parameter node '{}'", name)))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

struct Builder {
    rng: rand_chacha::ChaCha8Rng,
    params: ModelParams,
}

impl Builder {
    /// Seeded uniform fan-in scaling: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) -> Result<()> {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        let data = (0..c_out * c_in * k * k).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.params.register(&format!("{}.w", name), Tensor4::from_vec(c_out, c_in, k, k, data)?)?;
        self.params.register(&format!("{}.b", name), Tensor4::zeros(c_out, 1, 1, 1))
    }

    fn conv_zero(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) -> Result<()> {
        self.params.register(&format!("{}.w", name), Tensor4::zeros(c_out, c_in, k, k))?;
        self.params.register(&format!("{}.b", name), Tensor4::zeros(c_out, 1, 1, 1))
    }

    fn linear(&mut self, name: &str, c_out: usize, c_in: usize) -> Result<()> {
        self.conv(name, c_out, c_in, 1)
    }

    fn linear_zero(&mut self, name: &str, c_out: usize, c_in: usize) -> Result<()> {
        self.conv_zero(name, c_out, c_in, 1)
    }

    /// 1x1 map initialized to `s` times the identity.
    fn linear_scaled_identity(&mut self, name: &str, c: usize, s: f64) -> Result<()> {
        let mut w = Tensor4::zeros(c, c, 1, 1);
        for i in 0..c {
            *w.at_mut(i, i, 0, 0) = s;
        }
        self.params.register(&format!("{}.w", name), w)?;
        self.params.register(&format!("{}.b", name), Tensor4::zeros(c, 1, 1, 1))
    }

    fn layer_norm(&mut self, name: &str, c: usize) -> Result<()> {
        self.params.register(&format!("{}.gamma", name), Tensor4::full(c, 1, 1, 1, 1.0))?;
        self.params.register(&format!("{}.beta", name), Tensor4::zeros(c, 1, 1, 1))
    }

    fn stb(&mut self, prefix: &str, c: usize, mlp_ratio: usize) -> Result<()> {
        self.layer_norm(&format!("{}.ln1", prefix), c)?;
        self.linear(&format!("{}.q", prefix), c, c)?;
        self.linear(&format!("{}.k", prefix), c, c)?;
        self.linear(&format!("{}.v", prefix), c, c)?;
        self.linear(&format!("{}.proj", prefix), c, c)?;
        self.layer_norm(&format!("{}.ln2", prefix), c)?;
        self.linear(&format!("{}.mlp1", prefix), c * mlp_ratio, c)?;
        self.linear(&format!("{}.mlp2", prefix), c, c * mlp_ratio)
    }

    fn rstb(&mut self, prefix: &str, cfg: &ModelConfig) -> Result<()> {
        for j in 0..cfg.stbs_per_rstb {
            self.stb(&format!("{}.stb{}", prefix, j), cfg.channels, cfg.mlp_ratio)?;
        }
        self.conv(&format!("{}.conv", prefix), cfg.channels, cfg.channels, 3)
    }

    /// Offset head (final layer zero-initialized) plus deformable conv
    /// weights; optional modulation-mask head.
    fn dfi(&mut self, prefix: &str, cfg: &ModelConfig) -> Result<()> {
        let c = cfg.channels;
        let k = 3;
        self.conv(&format!("{}.og0", prefix), c, 2 * c, 3)?;
        self.conv_zero(&format!("{}.og1", prefix), 2 * k * k, c, 3)?;
        self.conv(&format!("{}.dconv", prefix), c, c, k)?;
        if cfg.modulation_mask {
            self.conv_zero(&format!("{}.mask", prefix), k * k, c, 3)?;
        }
        Ok(())
    }
}

fn register_all(b: &mut Builder, cfg: &ModelConfig) -> Result<()> {
    let c = cfg.channels;
    let ce = cfg.embed_channels;

    // Feature extraction: shallow conv + m_f RSTBs.
    b.conv("feat.shallow", c, 3, 3)?;
    for i in 0..cfg.m_f {
        b.rstb(&format!("feat.rstb{}", i), cfg)?;
    }

    // LSTFI: two directions; neighbor DFI always, hidden path only in
    // long-short mode. Blend and fusion maps are split per input so the
    // direction-swap symmetry is exact.
    for dir in ["fwd", "bwd"] {
        let p = format!("lstfi.{}", dir);
        b.dfi(&format!("{}.dfi_n", p), cfg)?;
        b.linear_scaled_identity(&format!("{}.blend_a", p), c, 0.5)?;
        b.linear_scaled_identity(&format!("{}.blend_b", p), c, 0.5)?;
        if cfg.variant.long_short_interpolation() {
            b.dfi(&format!("{}.dfi_h", p), cfg)?;
            b.linear_scaled_identity(&format!("{}.fs_p", p), c, 1.0)?;
            b.linear_zero(&format!("{}.fs_h", p), c, c)?;
            b.conv(&format!("{}.hid", p), c, c, 3)?;
        }
    }
    b.linear_scaled_identity("lstfi.fuse_f", c, 0.5)?;
    b.linear_scaled_identity("lstfi.fuse_b", c, 0.5)?;

    // STDFA: embeddings, offset head (deformable variants only), output map.
    match cfg.variant.aggregation() {
        Aggregation::None => {}
        agg => {
            b.linear("stdfa.q", ce, c)?;
            b.linear("stdfa.k", ce, c)?;
            b.linear("stdfa.v", ce, c)?;
            if agg == Aggregation::Deformable {
                let k = cfg.kernel_size;
                b.conv("stdfa.og0", ce, 2 * ce, 3)?;
                b.conv_zero("stdfa.og1", 2 * k * k, ce, 3)?;
            }
            b.linear_zero("stdfa.out", c, ce)?;
        }
    }

    // Reconstruction: m_b RSTBs + two-stage x2 pixel-shuffle upsampler.
    for i in 0..cfg.m_b {
        b.rstb(&format!("recon.rstb{}", i), cfg)?;
    }
    b.conv("up.conv1", 4 * c, c, 3)?;
    b.conv("up.conv2", 4 * c, c, 3)?;
    b.conv("up.out", 3, c, 3)?;
    Ok(())
}
