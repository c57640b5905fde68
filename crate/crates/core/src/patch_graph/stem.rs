//! Convolutional stem: patch pixels → node features ξ.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::Visit;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StemConfig {
    pub channels: usize,
    pub kernel1: usize,
    pub stride1: usize,
    pub kernel2: usize,
    pub stride2: usize,
}

impl Default for StemConfig {
    fn default() -> Self {
        StemConfig {
            channels: 8,
            kernel1: 3,
            stride1: 1,
            kernel2: 3,
            stride2: 2,
        }
    }
}

impl StemConfig {
    /// Rejects geometries whose second conv would not fit inside a patch.
    pub fn validate(&self, patch_size: usize) -> Result<()> {
        if [self.channels, self.kernel1, self.stride1, self.kernel2, self.stride2].contains(&0) {
            return Err(Error::Config("stem extents must be positive".into()));
        }
        if self.kernel1 > patch_size {
            return Err(Error::Config(format!(
                "stem kernel {} exceeds patch size {patch_size}",
                self.kernel1
            )));
        }
        let mid = (patch_size - self.kernel1) / self.stride1 + 1;
        if self.kernel2 > mid {
            return Err(Error::Config(format!(
                "second stem kernel {} exceeds intermediate extent {mid}",
                self.kernel2
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StemParams<T = Tensor> {
    /// `[k1, k1, 3, channels]`
    pub kernel1: T,
    pub bias1: T,
    /// `[k2, k2, channels, d]`
    pub kernel2: T,
    pub bias2: T,
}

impl StemParams {
    pub fn init(cfg: &StemConfig, d: usize, seed: u64) -> Self {
        let (k1, k2, c) = (cfg.kernel1, cfg.kernel2, cfg.channels);
        StemParams {
            kernel1: rng::glorot_uniform(&[k1, k1, 3, c], k1 * k1 * 3, c, rng::derive(seed, &[1])),
            bias1: Tensor::zeros(&[c]),
            kernel2: rng::glorot_uniform(&[k2, k2, c, d], k2 * k2 * c, d, rng::derive(seed, &[2])),
            bias2: Tensor::zeros(&[d]),
        }
    }
}

impl<T> Visit<T> for StemParams<T> {
    type Mapped<U> = StemParams<U>;

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a T)) {
        f("kernel1", &self.kernel1);
        f("bias1", &self.bias1);
        f("kernel2", &self.kernel2);
        f("bias2", &self.bias2);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut T)) {
        f("kernel1", &mut self.kernel1);
        f("bias1", &mut self.bias1);
        f("kernel2", &mut self.kernel2);
        f("bias2", &mut self.bias2);
    }

    fn map<U>(&self, f: &mut dyn FnMut(&str, &T) -> U) -> StemParams<U> {
        StemParams {
            kernel1: f("kernel1", &self.kernel1),
            bias1: f("bias1", &self.bias1),
            kernel2: f("kernel2", &self.kernel2),
            bias2: f("bias2", &self.bias2),
        }
    }
}

/// Embeds `[N, p, p, 3]` patches to `[N, d]` rows: conv → leaky_relu → conv →
/// leaky_relu → spatial mean. Each patch is processed independently.
pub fn embed_patches(
    tape: &mut Tape,
    patches: Var,
    params: &StemParams<Var>,
    cfg: &StemConfig,
    slope: f64,
) -> Result<Var> {
    let h = tape.conv2d(patches, params.kernel1, cfg.stride1)?;
    let h = tape.add_bias(h, params.bias1)?;
    let h = tape.leaky_relu(h, slope)?;
    let h = tape.conv2d(h, params.kernel2, cfg.stride2)?;
    let h = tape.add_bias(h, params.bias2)?;
    let h = tape.leaky_relu(h, slope)?;
    tape.spatial_mean(h)
}
