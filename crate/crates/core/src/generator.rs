//! The universal generator: a content feature map passed through a stack of
//! style-modulated blocks (conv, AdaIN from a per-level style code, leaky
//! rectifier), then a 1x1 conv and tanh to an RGB image.

use ndarray::{Array1, Array3, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autograd::{Scalar, Tape, Var};
use crate::encoders::{CodeKind, StyleCode};
use crate::error::{Error, Result};
use crate::nn::{self, Bound, Init, ParamStore};

pub const ADAIN_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub level: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Output resolution of the block.
    pub resolution: usize,
    /// Nearest-neighbour 2x upsample before the conv.
    pub upsample: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub content_channels: usize,
    pub content_size: usize,
    pub output_size: usize,
    pub style_dim: usize,
    pub blocks: Vec<BlockConfig>,
    pub use_ds: bool,
    pub use_div: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModulationParams {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
}

/// 0-based indices of upsampling blocks: every other block ending one before
/// the last when there is room (8 blocks, 3 doublings: 2, 4, 6), otherwise
/// the trailing blocks.
pub fn upsample_positions(n_blocks: usize, n_up: usize) -> Vec<usize> {
    if 2 * n_up <= n_blocks {
        (0..n_up).map(|k| n_blocks - 2 * n_up + 2 * k).collect()
    } else {
        (n_blocks - n_up..n_blocks).collect()
    }
}

impl GeneratorConfig {
    /// Block layout for `n_blocks` blocks that double the resolution from
    /// `content_size` to `output_size`; channels halve from `base_channels` at
    /// every upsample, never below 8.
    pub fn layout(
        content_channels: usize,
        content_size: usize,
        output_size: usize,
        style_dim: usize,
        n_blocks: usize,
        base_channels: usize,
    ) -> Result<Self> {
        if n_blocks == 0 || style_dim == 0 || content_size == 0 {
            return Err(Error::InvalidConfig("generator needs blocks, a style dim and a content size".into()));
        }
        let ratio = output_size / content_size;
        if ratio * content_size != output_size || !ratio.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "output size {output_size} is not a power-of-two multiple of content size {content_size}"
            )));
        }
        let n_up = ratio.trailing_zeros() as usize;
        if n_up > n_blocks {
            return Err(Error::InvalidConfig(format!("{n_blocks} blocks cannot upsample {n_up} times")));
        }
        let ups = upsample_positions(n_blocks, n_up);
        let mut blocks = Vec::with_capacity(n_blocks);
        let (mut ch, mut res, mut done) = (content_channels, content_size, 0);
        for level in 0..n_blocks {
            let upsample = ups.contains(&level);
            if upsample {
                done += 1;
                res *= 2;
            }
            let out = (base_channels >> done).max(8);
            blocks.push(BlockConfig { level, in_channels: ch, out_channels: out, resolution: res, upsample });
            ch = out;
        }
        Ok(Self { content_channels, content_size, output_size, style_dim, blocks, use_ds: true, use_div: true })
    }

    /// 256px output from a 512x32x32 content map through 8 blocks.
    pub fn full_scale() -> Self {
        Self::layout(512, 32, 256, 512, 8, 512).expect("valid preset")
    }

    /// 64px output from a 128x8x8 content map through 4 blocks.
    pub fn desk() -> Self {
        Self::layout(128, 8, 64, 128, 4, 128).expect("valid preset")
    }

    pub fn validate(&self) -> Result<()> {
        let Some(last) = self.blocks.last() else {
            return Err(Error::InvalidConfig("generator needs at least one block".into()));
        };
        let (mut ch, mut res) = (self.content_channels, self.content_size);
        for b in &self.blocks {
            let expect = if b.upsample { 2 * res } else { res };
            if b.in_channels != ch || b.resolution != expect {
                return Err(Error::InvalidConfig(format!("block {} does not chain", b.level)));
            }
            ch = b.out_channels;
            res = b.resolution;
        }
        if last.resolution != self.output_size {
            return Err(Error::InvalidConfig(format!(
                "blocks end at {} but output size is {}",
                last.resolution, self.output_size
            )));
        }
        Ok(())
    }
}

/// Per-channel AdaIN: `gamma[c] * (x[c] - mean_c) / (std_c + eps) + beta[c]`
/// with population statistics over the spatial extent.
pub fn adain(feat: &Array3<f32>, params: &ModulationParams, eps: f64) -> Result<Array3<f32>> {
    let (c, h, w) = feat.dim();
    if h * w < 2 {
        return Err(Error::DegenerateSpatial(h * w));
    }
    if params.gamma.len() != c || params.beta.len() != c {
        return Err(Error::ChannelMismatch(params.gamma.len().max(params.beta.len()), c));
    }
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        let plane = feat.index_axis(Axis(0), ch);
        let n = (h * w) as f64;
        let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let scale = params.gamma[ch] as f64 / (var.sqrt() + eps);
        let shift = params.beta[ch] as f64;
        out.index_axis_mut(Axis(0), ch)
            .zip_mut_with(&plane, |o, &v| *o = ((v as f64 - mean) * scale + shift) as f32);
    }
    Ok(out)
}

/// Tape AdaIN for `N x C x H x W` features with `N x C` gamma and beta.
pub fn adain_var<'t, T: Scalar>(feat: Var<'t, T>, gamma: Var<'t, T>, beta: Var<'t, T>) -> Var<'t, T> {
    let s = feat.shape();
    let g = gamma.reshape(&[s[0], s[1], 1, 1]);
    let b = beta.reshape(&[s[0], s[1], 1, 1]);
    feat.instance_norm(ADAIN_EPS).mul(g).add(b)
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub params: ParamStore,
}

impl Generator {
    /// Seeded weights: He-normal convs with zero biases, per-level style FCs
    /// with zero bias, small AdaIN maps so gamma starts near 1 and beta near 0.
    pub fn new(cfg: GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.style_dim;
        let mut init = Init::new(seed);
        let mut params = ParamStore::new();
        for b in &cfg.blocks {
            let l = b.level;
            init.linear(&mut params, &format!("style{l}.fc"), 2 * d, d, 1.0);
            init.conv(&mut params, &format!("block{l}.conv"), b.out_channels, b.in_channels, 3);
            params.insert(format!("block{l}.gamma.weight"), init.normal(&[d, b.out_channels], 0.2 / (d as f64).sqrt()));
            params.insert(format!("block{l}.beta.weight"), init.normal(&[d, b.out_channels], 0.2 / (d as f64).sqrt()));
        }
        let last = cfg.blocks.last().expect("validated").out_channels;
        init.conv(&mut params, "to_rgb", 3, last, 1);
        Ok(Self { cfg, params })
    }

    pub fn from_params(cfg: GeneratorConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, params })
    }

    fn block(&self, level: usize) -> Result<&BlockConfig> {
        self.cfg
            .blocks
            .get(level)
            .ok_or(Error::LevelOutOfRange { level, levels: self.cfg.blocks.len() })
    }

    /// `FC_level(concat(z_ds, z_div))` for `N x D` codes; disabled codes enter as zeros.
    pub fn integrate_var<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        z_ds: Var<'t, T>,
        z_div: Var<'t, T>,
        level: usize,
    ) -> Result<Var<'t, T>> {
        self.block(level)?;
        let d = self.cfg.style_dim;
        for z in [z_ds, z_div] {
            let s = z.shape();
            if s.len() != 2 || s[1] != d {
                return Err(Error::DimensionMismatch(s.last().copied().unwrap_or(0), d));
            }
        }
        let tape = z_ds.tape();
        let zero = |z: Var<'t, T>| tape.constant(ArrayD::zeros(IxDyn(&z.shape())));
        let ds = if self.cfg.use_ds { z_ds } else { zero(z_ds) };
        let div = if self.cfg.use_div { z_div } else { zero(z_div) };
        Ok(nn::linear(p, &format!("style{level}.fc"), Var::concat(&[ds, div], 1)))
    }

    /// `(gamma, beta) = (1 + z A, z B)` for `N x D` codes.
    pub fn affine_var<'t, T: Scalar>(&self, p: &Bound<'t, T>, z: Var<'t, T>, level: usize) -> Result<(Var<'t, T>, Var<'t, T>)> {
        self.block(level)?;
        let s = z.shape();
        if s.len() != 2 || s[1] != self.cfg.style_dim {
            return Err(Error::DimensionMismatch(s.last().copied().unwrap_or(0), self.cfg.style_dim));
        }
        let gamma = z.matmul(p.get(&format!("block{level}.gamma.weight"))).add_scalar(1.0);
        let beta = z.matmul(p.get(&format!("block{level}.beta.weight")));
        Ok((gamma, beta))
    }

    /// `[upsample] -> conv3x3 -> AdaIN -> leaky rectifier`.
    pub fn block_var<'t, T: Scalar>(&self, p: &Bound<'t, T>, feat: Var<'t, T>, z_style: Var<'t, T>, level: usize) -> Result<Var<'t, T>> {
        let b = *self.block(level)?;
        let s = feat.shape();
        let in_res = if b.upsample { b.resolution / 2 } else { b.resolution };
        if s.len() != 4 || s[1] != b.in_channels || s[2] != in_res || s[3] != in_res {
            return Err(Error::shape(["N", &b.in_channels.to_string(), &in_res.to_string(), &in_res.to_string()], s));
        }
        if b.resolution * b.resolution < 2 {
            return Err(Error::DegenerateSpatial(b.resolution * b.resolution));
        }
        let x = if b.upsample { feat.upsample2() } else { feat };
        let h = nn::conv(p, &format!("block{level}.conv"), x);
        let (gamma, beta) = self.affine_var(p, z_style, level)?;
        Ok(adain_var(h, gamma, beta).leaky_relu(LEAKY_SLOPE))
    }

    /// Full forward pass: content `N x C_con x CH x CW` and codes `N x D` to
    /// an `N x 3 x S x S` image in `[-1, 1]`.
    pub fn forward<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        content: Var<'t, T>,
        z_ds: Var<'t, T>,
        z_div: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let s = content.shape();
        let (c, cs) = (self.cfg.content_channels, self.cfg.content_size);
        if s.len() != 4 || s[1] != c || s[2] != cs || s[3] != cs {
            return Err(Error::shape(["N", &c.to_string(), &cs.to_string(), &cs.to_string()], s));
        }
        let mut h = content;
        for level in 0..self.cfg.blocks.len() {
            let z = self.integrate_var(p, z_ds, z_div, level)?;
            h = self.block_var(p, h, z, level)?;
        }
        Ok(nn::conv(p, "to_rgb", h).tanh())
    }

    pub fn bind<'t, T: Scalar>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        self.params.bind_as(tape, trainable)
    }

    pub fn integrate_styles(&self, z_ds: &StyleCode, z_div: &StyleCode, level: usize) -> Result<StyleCode> {
        let tape = Tape::<f32>::new();
        let p = self.bind(&tape, false);
        let row = |z: &StyleCode| tape.constant(z.values.clone().insert_axis(Axis(0)).into_dyn());
        let z = self.integrate_var(&p, row(z_ds), row(z_div), level)?;
        Ok(StyleCode { values: first_row(&z.value()), kind: CodeKind::Style })
    }

    pub fn style_affine(&self, z_style: &StyleCode, level: usize) -> Result<ModulationParams> {
        let tape = Tape::<f32>::new();
        let p = self.bind(&tape, false);
        let z = tape.constant(z_style.values.clone().insert_axis(Axis(0)).into_dyn());
        let (g, b) = self.affine_var(&p, z, level)?;
        Ok(ModulationParams { gamma: first_row(&g.value()), beta: first_row(&b.value()) })
    }

    pub fn styled_block(&self, feat: &Array3<f32>, z_style: &StyleCode, level: usize) -> Result<Array3<f32>> {
        let tape = Tape::<f32>::new();
        let p = self.bind(&tape, false);
        let x = tape.constant(feat.clone().insert_axis(Axis(0)).into_dyn());
        let z = tape.constant(z_style.values.clone().insert_axis(Axis(0)).into_dyn());
        let y = self.block_var(&p, x, z, level)?;
        Ok(y.value().index_axis(Axis(0), 0).to_owned().into_dimensionality().unwrap())
    }
}

fn first_row(a: &ArrayD<f32>) -> Array1<f32> {
    a.index_axis(Axis(0), 0).to_owned().into_dimensionality().expect("row vector")
}
