//! Four-level residual UNet predicting the diffusion noise.
//!
//! Every residual block adds a `gamma` embedding after its first
//! convolution and, when structure fusion is on, adds the structure feature
//! resampled to the block's resolution to its output.

use candle_core::{Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::sinusoidal_features;
use crate::nn::{channel_add, group_count, silu, upsample_nearest, Conv2d, GroupNorm, Linear, ParamPath};

/// How the structure information reaches the UNet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Encoder feature `x_e` added inside every residual block.
    FeatureFusion,
    /// Raw structure channels concatenated with `y_t` at the input.
    Concatenate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub widths: [usize; 4],
    /// Channels of the conditioning tensor: `C0` for fusion, `2 + o` for concatenation.
    pub cond_channels: usize,
    pub conditioning: Conditioning,
    pub embedding_dim: usize,
    pub max_groups: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            widths: [32, 64, 128, 256],
            cond_channels: 64,
            conditioning: Conditioning::FeatureFusion,
            embedding_dim: 32,
            max_groups: 8,
        }
    }
}

/// Scale applied to `-ln(gamma)` before the sinusoidal encoding.
const GAMMA_EMBED_SCALE: f64 = 1000.0;

pub fn gamma_features(gammas: &[f64], dim: usize) -> Vec<f64> {
    let pos: Vec<f64> = gammas.iter().map(|g| -g.ln() * GAMMA_EMBED_SCALE).collect();
    sinusoidal_features(&pos, dim)
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(p: &ParamPath, c_in: usize, c_out: usize, emb_dim: usize, max_groups: usize) -> Result<Self> {
        Ok(ResBlock {
            norm1: GroupNorm::new(&p.pp("norm1"), group_count(c_in, max_groups), c_in)?,
            conv1: Conv2d::new(&p.pp("conv1"), c_in, c_out, 3, 1, true)?,
            emb: Linear::new(&p.pp("emb"), emb_dim, c_out)?,
            norm2: GroupNorm::new(&p.pp("norm2"), group_count(c_out, max_groups), c_out)?,
            conv2: Conv2d::new(&p.pp("conv2"), c_out, c_out, 3, 1, true)?,
            skip: if c_in != c_out {
                Some(Conv2d::new(&p.pp("skip"), c_in, c_out, 1, 1, true)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, emb: &Tensor, fusion: Option<&Tensor>) -> Result<Tensor> {
        let h = self.conv1.forward(&silu(&self.norm1.forward(x)?)?)?;
        let e = self.emb.forward(emb)?;
        let h = channel_add(&h, &e)?;
        let h = self.conv2.forward(&silu(&self.norm2.forward(&h)?)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        let out = (h + skip)?;
        Ok(match fusion {
            Some(f) => (out + f)?,
            None => out,
        })
    }
}

#[derive(Debug, Clone)]
pub struct NoiseUNet {
    cfg: PredictorConfig,
    embed1: Linear,
    embed2: Linear,
    input: Conv2d,
    encoder: Vec<ResBlock>,
    down: Vec<Conv2d>,
    middle: ResBlock,
    decoder: Vec<ResBlock>,
    up: Vec<Conv2d>,
    cond_down: Vec<Conv2d>,
    out_norm: GroupNorm,
    output: Conv2d,
}

impl NoiseUNet {
    pub fn new(p: &ParamPath, cfg: &PredictorConfig) -> Result<Self> {
        let w = cfg.widths;
        if w.iter().any(|&c| c == 0) || cfg.embedding_dim == 0 || cfg.embedding_dim % 2 != 0 {
            return Err(Error::invalid("predictor widths must be positive and the embedding dim even"));
        }
        let emb = 4 * w[0];
        let g = cfg.max_groups;
        let in_ch = match cfg.conditioning {
            Conditioning::FeatureFusion => 1,
            Conditioning::Concatenate => 1 + cfg.cond_channels,
        };
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        let mut decoder = Vec::new();
        let mut up = Vec::new();
        let mut c_prev = w[0];
        for (l, &c) in w.iter().enumerate() {
            encoder.push(ResBlock::new(&p.pp(format!("enc{l}")), c_prev, c, emb, g)?);
            decoder.push(ResBlock::new(&p.pp(format!("dec{l}")), 2 * c, c, emb, g)?);
            if l < 3 {
                down.push(Conv2d::new(&p.pp(format!("down{l}")), c, c, 3, 2, true)?);
            }
            if l > 0 {
                up.push(Conv2d::new(&p.pp(format!("up{l}")), c, w[l - 1], 3, 1, true)?);
            }
            c_prev = c;
        }
        let cond_down = if cfg.conditioning == Conditioning::FeatureFusion {
            (0..4)
                .map(|l| {
                    let (c_in, stride) = if l == 0 { (cfg.cond_channels, 1) } else { (w[l - 1], 2) };
                    Conv2d::new(&p.pp(format!("cond{l}")), c_in, w[l], 3, stride, true)
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(NoiseUNet {
            cfg: cfg.clone(),
            embed1: Linear::new(&p.pp("embed1"), cfg.embedding_dim, emb)?,
            embed2: Linear::new(&p.pp("embed2"), emb, emb)?,
            input: Conv2d::new(&p.pp("input"), in_ch, w[0], 3, 1, true)?,
            encoder,
            down,
            middle: ResBlock::new(&p.pp("middle"), w[3], w[3], emb, g)?,
            decoder,
            up,
            cond_down,
            out_norm: GroupNorm::new(&p.pp("out_norm"), group_count(w[0], g), w[0])?,
            output: Conv2d::new(&p.pp("output"), w[0], 1, 3, 1, true)?,
        })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.cfg
    }

    fn check(&self, y_t: &Tensor, cond: &Tensor, gammas: &[f64]) -> Result<()> {
        let (b, c, h, w) = y_t.dims4()?;
        if c != 1 {
            return Err(Error::invalid(format!("noisy dose must have one channel, got {c}")));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::invalid(format!("spatial size {h}x{w} must be divisible by 8")));
        }
        crate::error::ensure_shape(&[b, self.cfg.cond_channels, h, w], cond.dims())?;
        if gammas.len() != b {
            return Err(Error::invalid(format!("{} gamma values for a batch of {b}", gammas.len())));
        }
        if let Some(g) = gammas.iter().find(|g| !(**g > 0.0 && **g <= 1.0)) {
            return Err(Error::invalid(format!("gamma {g} outside (0, 1]")));
        }
        Ok(())
    }

    /// Structure feature resampled for each level, `None` without fusion.
    pub fn fusion_features(&self, cond: &Tensor) -> Result<Option<Vec<Tensor>>> {
        if self.cond_down.is_empty() {
            return Ok(None);
        }
        let mut out: Vec<Tensor> = Vec::with_capacity(4);
        for (l, conv) in self.cond_down.iter().enumerate() {
            let src = if l == 0 { cond.clone() } else { silu(&out[l - 1])? };
            out.push(conv.forward(&src)?);
        }
        Ok(Some(out))
    }

    /// Predicts noise with one `gamma` per sample.
    pub fn forward(&self, y_t: &Tensor, cond: &Tensor, gammas: &[f64]) -> Result<Tensor> {
        self.check(y_t, cond, gammas)?;
        let dtype = y_t.dtype();
        let feats = gamma_features(gammas, self.cfg.embedding_dim);
        let feats = Tensor::from_vec(feats, (gammas.len(), self.cfg.embedding_dim), y_t.device())?.to_dtype(dtype)?;
        let emb = silu(&self.embed2.forward(&silu(&self.embed1.forward(&feats)?)?)?)?;

        let input = match self.cfg.conditioning {
            Conditioning::FeatureFusion => y_t.clone(),
            Conditioning::Concatenate => Tensor::cat(&[y_t, cond], 1)?,
        };
        let fusion = self.fusion_features(cond)?;
        let fuse = |l: usize| fusion.as_ref().map(|f| &f[l]);

        let mut h = self.input.forward(&input)?;
        let mut skips = Vec::with_capacity(4);
        for l in 0..4 {
            h = self.encoder[l].forward(&h, &emb, fuse(l))?;
            skips.push(h.clone());
            if l < 3 {
                h = self.down[l].forward(&h)?;
            }
        }
        h = self.middle.forward(&h, &emb, fuse(3))?;
        for l in (0..4).rev() {
            h = self.decoder[l].forward(&Tensor::cat(&[&h, &skips[l]], 1)?, &emb, fuse(l))?;
            if l > 0 {
                h = upsample_nearest(&self.up[l - 1].forward(&h)?, 2)?;
            }
        }
        Ok(self.output.forward(&silu(&self.out_norm.forward(&h)?)?)?)
    }

    /// Predicts noise for a whole batch at a single `gamma`.
    pub fn predict_noise(&self, y_t: &Tensor, cond: &Tensor, gamma_t: f64) -> Result<Tensor> {
        let b = y_t.dims().first().copied().unwrap_or(0);
        self.forward(y_t, cond, &vec![gamma_t; b])
    }
}

impl crate::diffusion::NoisePredictor for NoiseUNet {
    fn predict_noise(&self, y_t: &Tensor, cond: &Tensor, gamma_t: f64) -> Result<Tensor> {
        NoiseUNet::predict_noise(self, y_t, cond, gamma_t)
    }
}
