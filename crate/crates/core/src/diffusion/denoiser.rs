//! Residual temporal-convolution network predicting the clean hidden
//! sequence from a noisy one and its diffusion step.
//!
//! ```text
//! h_0     = x W_in + b_in
//! u_b     = h_b + (emb(t) W_t,b + b_t,b)          (broadcast over frames)
//! h_{b+1} = h_b + silu(conv_b(u_b))               (kernel k, same padding)
//! out     = [h_B | x] W_out + b_out               (W_out, b_out start at zero)
//! ```
//!
//! All parameters live in one flat buffer so optimizers, checkpoints and
//! finite-difference checks can treat them uniformly.

use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpaError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub k: usize,
    pub width: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub time_dim: usize,
}

impl DenoiserConfig {
    pub fn new(k: usize) -> Self {
        Self { k, width: 64, blocks: 4, kernel: 9, time_dim: 32 }
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 || self.width == 0 || self.kernel == 0 || self.time_dim < 2 {
            return Err(SpaError::Config(format!("degenerate denoiser {self:?}")));
        }
        if self.kernel % 2 == 0 {
            return Err(SpaError::Config("kernel width must be odd for same padding".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    t_w: Range<usize>,
    t_b: Range<usize>,
    conv_w: Range<usize>,
    conv_b: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    in_w: Range<usize>,
    in_b: Range<usize>,
    blocks: Vec<Block>,
    out_w: Range<usize>,
    out_b: Range<usize>,
    total: usize,
}

impl Layout {
    fn new(cfg: &DenoiserConfig) -> Self {
        let mut next = 0;
        let mut take = |n: usize| {
            let r = next..next + n;
            next += n;
            r
        };
        let (k, c, e) = (cfg.k, cfg.width, cfg.time_dim);
        let in_w = take(k * c);
        let in_b = take(c);
        let blocks = (0..cfg.blocks)
            .map(|_| Block {
                t_w: take(e * c),
                t_b: take(c),
                conv_w: take(cfg.kernel * c * c),
                conv_b: take(c),
            })
            .collect();
        let out_w = take((c + k) * k);
        let out_b = take(k);
        Self { in_w, in_b, blocks, out_w, out_b, total: next }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    layout: Layout,
    params: Vec<f64>,
}

/// Activations kept from the forward pass for backpropagation.
pub struct ForwardCache {
    x: Array2<f64>,
    temb: Array1<f64>,
    patches: Vec<Array2<f64>>,
    pre_act: Vec<Array2<f64>>,
    last_hidden: Array2<f64>,
}

fn view2<'a>(params: &'a [f64], r: &Range<usize>, rows: usize, cols: usize) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((rows, cols), &params[r.clone()]).expect("layout shape")
}

fn view2_mut<'a>(params: &'a mut [f64], r: &Range<usize>, rows: usize, cols: usize) -> ArrayViewMut2<'a, f64> {
    ArrayViewMut2::from_shape((rows, cols), &mut params[r.clone()]).expect("layout shape")
}

fn view1<'a>(params: &'a [f64], r: &Range<usize>) -> ArrayView1<'a, f64> {
    ArrayView1::from(&params[r.clone()])
}

fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

fn silu_grad(z: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    s * (1.0 + z * (1.0 - s))
}

/// Sinusoidal embedding of a diffusion step.
pub fn step_embedding(t: usize, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut emb = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        emb[i] = (t as f64 * freq).sin();
        emb[half + i] = (t as f64 * freq).cos();
    }
    emb
}

/// Rows `l + j - pad` of `u` laid side by side for every tap `j`; zero outside.
fn im2col(u: &Array2<f64>, kernel: usize) -> Array2<f64> {
    let (len, c) = u.dim();
    let pad = kernel / 2;
    let mut patches = Array2::zeros((len, kernel * c));
    for j in 0..kernel {
        let lo = pad.saturating_sub(j);
        let hi = (len + pad).saturating_sub(j).min(len);
        if lo >= hi {
            continue;
        }
        let src_lo = lo + j - pad;
        patches
            .slice_mut(s![lo..hi, j * c..(j + 1) * c])
            .assign(&u.slice(s![src_lo..src_lo + (hi - lo), ..]));
    }
    patches
}

fn col2im(dpatches: &Array2<f64>, kernel: usize, c: usize) -> Array2<f64> {
    let len = dpatches.nrows();
    let pad = kernel / 2;
    let mut du = Array2::zeros((len, c));
    for j in 0..kernel {
        let lo = pad.saturating_sub(j);
        let hi = (len + pad).saturating_sub(j).min(len);
        if lo >= hi {
            continue;
        }
        let src_lo = lo + j - pad;
        let mut target = du.slice_mut(s![src_lo..src_lo + (hi - lo), ..]);
        target += &dpatches.slice(s![lo..hi, j * c..(j + 1) * c]);
    }
    du
}

impl Denoiser {
    /// He-style random weights; the output projection starts at zero so a
    /// fresh model predicts the all-zero sequence.
    pub fn new<R: Rng + ?Sized>(cfg: DenoiserConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let mut params = vec![0.0; layout.total];
        let mut fill = |r: &Range<usize>, fan_in: usize, params: &mut [f64]| {
            let scale = (1.0 / fan_in as f64).sqrt();
            for p in &mut params[r.clone()] {
                *p = scale * rng.sample::<f64, _>(StandardNormal);
            }
        };
        fill(&layout.in_w, cfg.k, &mut params);
        for b in &layout.blocks {
            fill(&b.t_w, cfg.time_dim, &mut params);
            fill(&b.conv_w, cfg.kernel * cfg.width, &mut params);
        }
        Ok(Self { cfg, layout, params })
    }

    pub fn from_params(cfg: DenoiserConfig, params: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        if params.len() != layout.total {
            return Err(SpaError::DimensionMismatch(format!(
                "{} parameters for a layout of {}",
                params.len(),
                layout.total
            )));
        }
        Ok(Self { cfg, layout, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn forward(&self, x: &Array2<f64>, t: usize) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x, t)?.0)
    }

    pub fn forward_cached(&self, x: &Array2<f64>, t: usize) -> Result<(Array2<f64>, ForwardCache)> {
        let DenoiserConfig { k, width: c, kernel, time_dim: e, .. } = self.cfg;
        if x.ncols() != k {
            return Err(SpaError::DimensionMismatch(format!("input has {} channels, model expects {k}", x.ncols())));
        }
        let p = &self.params;
        let l = &self.layout;
        let temb = step_embedding(t, e);

        let mut h = x.dot(&view2(p, &l.in_w, k, c)) + view1(p, &l.in_b);
        let mut patches = Vec::with_capacity(l.blocks.len());
        let mut pre_act = Vec::with_capacity(l.blocks.len());
        for b in &l.blocks {
            let shift = temb.dot(&view2(p, &b.t_w, e, c)) + view1(p, &b.t_b);
            let u = &h + &shift;
            let cols = im2col(&u, kernel);
            let z = cols.dot(&view2(p, &b.conv_w, kernel * c, c)) + view1(p, &b.conv_b);
            h.zip_mut_with(&z, |hv, &zv| *hv += silu(zv));
            patches.push(cols);
            pre_act.push(z);
        }
        let out_w = view2(p, &l.out_w, c + k, k);
        let out = h.dot(&out_w.slice(s![..c, ..])) + x.dot(&out_w.slice(s![c.., ..])) + view1(p, &l.out_b);
        let cache = ForwardCache { x: x.clone(), temb, patches, pre_act, last_hidden: h };
        Ok((out, cache))
    }

    /// Accumulates `dLoss/dparams` into `grad` given `dLoss/dout`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Array2<f64>, grad: &mut [f64]) {
        let DenoiserConfig { k, width: c, kernel, time_dim: e, .. } = self.cfg;
        let p = &self.params;
        let l = &self.layout;

        let mut g_out_b = view2_mut(grad, &l.out_b, 1, k);
        g_out_b += &grad_out.sum_axis(Axis(0));
        {
            let mut g_out_w = view2_mut(grad, &l.out_w, c + k, k);
            g_out_w.slice_mut(s![..c, ..]).scaled_add(1.0, &cache.last_hidden.t().dot(grad_out));
            g_out_w.slice_mut(s![c.., ..]).scaled_add(1.0, &cache.x.t().dot(grad_out));
        }
        let out_w = view2(p, &l.out_w, c + k, k);
        let mut dh = grad_out.dot(&out_w.slice(s![..c, ..]).t());

        for (bi, b) in l.blocks.iter().enumerate().rev() {
            let z = &cache.pre_act[bi];
            let mut dz = dh.clone();
            dz.zip_mut_with(z, |d, &zv| *d *= silu_grad(zv));
            {
                let mut g = view2_mut(grad, &b.conv_b, 1, c);
                g += &dz.sum_axis(Axis(0));
            }
            {
                let mut g = view2_mut(grad, &b.conv_w, kernel * c, c);
                g.scaled_add(1.0, &cache.patches[bi].t().dot(&dz));
            }
            let dpatches = dz.dot(&view2(p, &b.conv_w, kernel * c, c).t());
            let du = col2im(&dpatches, kernel, c);
            let dshift = du.sum_axis(Axis(0));
            {
                let mut g = view2_mut(grad, &b.t_b, 1, c);
                g += &dshift;
            }
            {
                let mut g = view2_mut(grad, &b.t_w, e, c);
                let outer = cache
                    .temb
                    .view()
                    .insert_axis(Axis(1))
                    .dot(&dshift.view().insert_axis(Axis(0)));
                g += &outer;
            }
            dh += &du;
        }
        {
            let mut g = view2_mut(grad, &l.in_b, 1, c);
            g += &dh.sum_axis(Axis(0));
        }
        let mut g = view2_mut(grad, &l.in_w, k, c);
        g.scaled_add(1.0, &cache.x.t().dot(&dh));
    }

    /// Mean squared error against `target`, accumulating its gradient into `grad`.
    pub fn mse_loss_and_grad(
        &self,
        x: &Array2<f64>,
        t: usize,
        target: &Array2<f64>,
        weight: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        let (out, cache) = self.forward_cached(x, t)?;
        let diff = out - target;
        let n = diff.len() as f64;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
        let grad_out = diff * (2.0 * weight / n);
        self.backward(&cache, &grad_out, grad);
        Ok(loss)
    }
}
