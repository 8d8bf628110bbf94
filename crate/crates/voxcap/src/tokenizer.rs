//! 3D convolutional spatio-temporal tokenizer.
//!
//! A voxel series [T, X, Y, Z] becomes L super-voxel tokens of width D via a
//! single strided 3D convolution whose T time frames enter as input channels.
//! Token order is lexicographic over the (x, y, z) output grid. No padding;
//! output extents use floor division.

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::{SeedRng, Tensor};
use crate::params::{Binder, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenizerConfig {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub out_channels: usize,
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel.iter().any(|&k| k == 0) || self.stride.iter().any(|&s| s == 0) {
            return Err(Error::validation("kernel and stride components must be >= 1"));
        }
        if self.out_channels < 8 {
            return Err(Error::validation(format!(
                "out_channels {} < 8",
                self.out_channels
            )));
        }
        Ok(())
    }
}

/// Output grid extents and token count: n = floor((dim - kernel)/stride) + 1.
pub fn token_grid_shape(
    dims: [usize; 3],
    cfg: &TokenizerConfig,
) -> Result<(usize, usize, usize, usize)> {
    cfg.validate()?;
    for a in 0..3 {
        if dims[a] < cfg.kernel[a] {
            return Err(Error::validation(format!(
                "kernel {} exceeds input extent {} on axis {a}",
                cfg.kernel[a], dims[a]
            )));
        }
    }
    let n = |a: usize| (dims[a] - cfg.kernel[a]) / cfg.stride[a] + 1;
    let (nx, ny, nz) = (n(0), n(1), n(2));
    Ok((nx, ny, nz, nx * ny * nz))
}

/// Flat gather offsets realizing im2col over [T, X, Y, Z]; rows are tokens in
/// lexicographic (x, y, z) order, columns taps in (t, dx, dy, dz) order.
pub fn im2col_offsets(
    input_shape: [usize; 4],
    cfg: &TokenizerConfig,
) -> Result<(Vec<usize>, usize, usize)> {
    let [t_frames, gx, gy, gz] = input_shape;
    let (nx, ny, nz, l) = token_grid_shape([gx, gy, gz], cfg)?;
    let [kx, ky, kz] = cfg.kernel;
    let [sx, sy, sz] = cfg.stride;
    let k = t_frames * kx * ky * kz;
    let mut offsets = Vec::with_capacity(l * k);
    for ix in 0..nx {
        for iy in 0..ny {
            for iz in 0..nz {
                let (bx, by, bz) = (ix * sx, iy * sy, iz * sz);
                for t in 0..t_frames {
                    for dx in 0..kx {
                        for dy in 0..ky {
                            for dz in 0..kz {
                                offsets.push(
                                    ((t * gx + bx + dx) * gy + by + dy) * gz + bz + dz,
                                );
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((offsets, l, k))
}

/// The trainable tokenizer: weight [D, T·kx·ky·kz] plus bias [D].
pub struct Tokenizer {
    pub cfg: TokenizerConfig,
    pub t_frames: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Tokenizer {
    pub fn init(
        store: &mut ParamStore,
        group: &str,
        cfg: TokenizerConfig,
        t_frames: usize,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        cfg.validate()?;
        let k = t_frames * cfg.kernel[0] * cfg.kernel[1] * cfg.kernel[2];
        let std = 1.0 / (k as f64).sqrt();
        let weight = store.init_normal(group, "tokenizer.weight", &[cfg.out_channels, k], std, rng)?;
        let bias = store.init_zeros(group, "tokenizer.bias", &[cfg.out_channels])?;
        Ok(Tokenizer {
            cfg,
            t_frames,
            weight,
            bias,
        })
    }

    pub fn token_count(&self, grid: [usize; 3]) -> Result<usize> {
        Ok(token_grid_shape(grid, &self.cfg)?.3)
    }

    /// Builds tokens [L, D] from an input node of shape [T, X, Y, Z].
    pub fn forward(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        input: NodeId,
    ) -> Result<NodeId> {
        let shape = g.value(input).shape();
        if shape.len() != 4 {
            return Err(Error::shape("[T, X, Y, Z] input", format!("{shape:?}")));
        }
        let input_shape = [shape[0], shape[1], shape[2], shape[3]];
        if input_shape[0] != self.t_frames {
            return Err(Error::shape(
                format!("{} time frames", self.t_frames),
                format!("{}", input_shape[0]),
            ));
        }
        let (offsets, l, k) = im2col_offsets(input_shape, &self.cfg)?;
        let patches = g.gather_flat(input, &offsets, &[l, k])?;
        let w = binder.node(g, self.weight);
        let wt = g.transpose(w)?;
        let lin = g.matmul(patches, wt)?;
        let b = binder.node(g, self.bias);
        g.add_bias(lin, b)
    }
}

/// Convenience forward on plain tensors (no gradients), for oracles and tests.
pub fn tokenize_tensor(tok: &Tokenizer, store: &ParamStore, input: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let groups = std::collections::BTreeSet::new();
    let mut binder = Binder::new(store, &groups);
    let inp = g.constant(input.clone());
    let out = tok.forward(&mut g, &mut binder, inp)?;
    Ok(g.value(out).clone())
}
