//! Binary layers. Each has a training path over real batches (scale, sign,
//! STE backward) and an inference path over packed bits with no scales.

use rand::Rng;

use super::kernels;
use crate::binmath::{self, BitTensor, ConvGeometry};
use crate::error::{dim_err, Result};
use crate::qat::{sign, ste_pass, OutputScaleSpec, Param, ScaleSpec};
use crate::tensor::Act;

/// Values saved by a training forward pass for the backward pass.
#[derive(Clone, Debug)]
pub enum Cache {
    Conv { x: Act, pre: Vec<f64> },
    Pool { argmax: Vec<u32>, in_dims: [usize; 3] },
    Lgap { x: Act, pre: Vec<f64> },
    Dense { x: Act, pre: Vec<f64> },
    Residual { main: Vec<Cache> },
    Down { main: Vec<Cache>, side: Vec<Cache> },
}

/// `dpre = dy` where the STE passes, then times the scale.
fn masked_dz(dy: &[f64], pre: &[f64], s: f64) -> Vec<f64> {
    dy.iter()
        .zip(pre)
        .map(|(d, p)| if ste_pass(*p) { d * s } else { 0.0 })
        .collect()
}

/// Grouped binary convolution, then scale, then sign.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub geo: ConvGeometry,
    pub weight: Param,
    pub scale: ScaleSpec,
}

impl ConvBlock {
    pub fn new(name: &str, geo: ConvGeometry, k: f64, rng: &mut impl Rng) -> Result<Self> {
        geo.validate()?;
        let fan_out = geo.kernel_h * geo.kernel_w * geo.out_per_group();
        Ok(ConvBlock {
            weight: Param::binary(name, &geo.weight_shape(), geo.fan_in(), fan_out, rng),
            scale: ScaleSpec::new(geo.fan_in(), k)?,
            geo,
        })
    }

    /// `k`×`k` "same" convolution.
    pub fn square(
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        groups: usize,
        stride: usize,
        scale_k: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let geo = ConvGeometry {
            kernel_h: k,
            kernel_w: k,
            in_channels: cin,
            out_channels: cout,
            groups,
            stride,
            padding: k / 2,
        };
        Self::new(name, geo, scale_k, rng)
    }

    pub fn out_dims(&self, [h, w, c]: [usize; 3]) -> Result<[usize; 3]> {
        if c != self.geo.in_channels {
            return dim_err(format!("{} expects {} channels, got {c}", self.weight.name, self.geo.in_channels));
        }
        let (oh, ow) = self.geo.output_hw(h, w)?;
        Ok([oh, ow, self.geo.out_channels])
    }

    pub fn forward(&self, x: &Act) -> Result<(Act, Cache)> {
        let od = self.out_dims(x.dims)?;
        let [h, w, _] = x.dims;
        let mut pre = Act::zeros(x.n, od);
        let wts = self.weight.forward_values();
        for i in 0..x.n {
            kernels::conv_forward(x.sample(i), h, w, &self.geo, wts, pre.sample_mut(i));
        }
        let s = self.scale.value();
        pre.data.iter_mut().for_each(|v| *v *= s);
        let out = Act {
            n: x.n,
            dims: od,
            data: pre.data.iter().map(|v| sign(*v)).collect(),
        };
        Ok((out, Cache::Conv { x: x.clone(), pre: pre.data }))
    }

    fn backward(&mut self, x: &Act, pre: &[f64], dy: &Act, need_dx: bool) -> Option<Act> {
        let dz = masked_dz(&dy.data, pre, self.scale.value());
        let [h, w, _] = x.dims;
        let per_out = dy.per();
        let mut dx = need_dx.then(|| Act::zeros(x.n, x.dims));
        let wts = self.weight.forward_values().to_vec();
        for i in 0..x.n {
            let dxi = dx.as_mut().map(|d| d.sample_mut(i));
            kernels::conv_backward(
                x.sample(i),
                h,
                w,
                &self.geo,
                &wts,
                &dz[i * per_out..(i + 1) * per_out],
                &mut self.weight.grad,
                dxi,
            );
        }
        dx
    }

    pub fn infer(&self, x: &BitTensor) -> Result<BitTensor> {
        Ok(binmath::bin_conv2d(x, self.weight.bits(), &self.geo)?.sign())
    }
}

/// Learnable global average pooling: a GAP path with fixed `+1` weights and
/// a depthwise path with learned weights over the full spatial extent.
/// Output is `2c` channels: GAP first, then depthwise.
#[derive(Clone, Debug, PartialEq)]
pub struct Lgap {
    pub dims: [usize; 3],
    /// `[h·w, c]`.
    pub depthwise: Param,
    pub scale: ScaleSpec,
}

impl Lgap {
    pub fn new(dims: [usize; 3], k: f64, rng: &mut impl Rng) -> Result<Self> {
        let [h, w, c] = dims;
        Ok(Lgap {
            dims,
            depthwise: Param::binary("lgap.depthwise", &[h * w, c], h * w, 1, rng),
            scale: ScaleSpec::new(h * w, k)?,
        })
    }

    pub fn out_dims(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
        if dims != self.dims {
            return dim_err(format!("LGAP built for {:?}, got {dims:?}", self.dims));
        }
        Ok([1, 1, 2 * self.dims[2]])
    }

    pub fn forward(&self, x: &Act) -> Result<(Act, Cache)> {
        let od = self.out_dims(x.dims)?;
        let c = self.dims[2];
        let s = self.scale.value();
        let wts = self.depthwise.forward_values();
        let mut pre = Act::zeros(x.n, od);
        for i in 0..x.n {
            let xs = x.sample(i);
            let p = pre.sample_mut(i);
            for (pix, row) in xs.chunks_exact(c).enumerate() {
                let wr = &wts[pix * c..(pix + 1) * c];
                for ch in 0..c {
                    p[ch] += row[ch];
                    p[c + ch] += wr[ch] * row[ch];
                }
            }
            p.iter_mut().for_each(|v| *v *= s);
        }
        let out = Act {
            n: x.n,
            dims: od,
            data: pre.data.iter().map(|v| sign(*v)).collect(),
        };
        Ok((out, Cache::Lgap { x: x.clone(), pre: pre.data }))
    }

    fn backward(&mut self, x: &Act, pre: &[f64], dy: &Act, need_dx: bool) -> Option<Act> {
        let c = self.dims[2];
        let dz = masked_dz(&dy.data, pre, self.scale.value());
        let mut dx = need_dx.then(|| Act::zeros(x.n, x.dims));
        let wts = self.depthwise.forward_values().to_vec();
        for i in 0..x.n {
            let d = &dz[i * 2 * c..(i + 1) * 2 * c];
            let xs = x.sample(i);
            for (pix, row) in xs.chunks_exact(c).enumerate() {
                for ch in 0..c {
                    self.depthwise.grad[pix * c + ch] += row[ch] * d[c + ch];
                }
            }
            if let Some(dx) = dx.as_mut() {
                for (pix, out) in dx.sample_mut(i).chunks_exact_mut(c).enumerate() {
                    for ch in 0..c {
                        out[ch] = d[ch] + wts[pix * c + ch] * d[c + ch];
                    }
                }
            }
        }
        dx
    }

    pub fn infer(&self, x: &BitTensor) -> Result<BitTensor> {
        if x.shape() != self.dims {
            return dim_err(format!("LGAP built for {:?}, got {:?}", self.dims, x.shape()));
        }
        let [h, w, c] = self.dims;
        let wb = self.depthwise.bits();
        let mut gap = vec![0i32; c];
        let mut dw = vec![0i32; c];
        for pix in 0..h * w {
            for ch in 0..c {
                let v = if x.bit(pix * c + ch) { 1 } else { -1 };
                gap[ch] += v;
                dw[ch] += if wb.bit(pix * c + ch) { v } else { -v };
            }
        }
        Ok(BitTensor::from_fn(&[2 * c], |i| {
            if i < c {
                gap[i] >= 0
            } else {
                dw[i - c] >= 0
            }
        }))
    }
}

/// Grouped binary dense block. With `duplicate`, each input is fed twice so
/// a unit can cancel an input with a `±` weight pair; with `skip`, the block
/// input is concatenated after the `units` new activations.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseBlock {
    pub inputs: usize,
    pub units: usize,
    pub groups: usize,
    pub duplicate: bool,
    pub skip: bool,
    /// `[fan_in, units]`.
    pub weight: Param,
    pub scale: ScaleSpec,
}

impl DenseBlock {
    pub fn new(
        name: &str,
        inputs: usize,
        units: usize,
        groups: usize,
        duplicate: bool,
        skip: bool,
        k: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if groups == 0 || inputs % groups != 0 || units % groups != 0 {
            return crate::error::cfg_err(format!("dense {inputs}->{units} not divisible by {groups} groups"));
        }
        let fan_in = inputs / groups * if duplicate { 2 } else { 1 };
        Ok(DenseBlock {
            inputs,
            units,
            groups,
            duplicate,
            skip,
            weight: Param::binary(name, &[fan_in, units], fan_in, units / groups, rng),
            scale: ScaleSpec::new(fan_in, k)?,
        })
    }

    pub fn width(&self) -> usize {
        self.units + if self.skip { self.inputs } else { 0 }
    }

    pub fn out_dims(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
        let n: usize = dims.iter().product();
        if n != self.inputs {
            return dim_err(format!("{} expects {} inputs, got {n}", self.weight.name, self.inputs));
        }
        Ok([1, 1, self.width()])
    }

    pub fn forward(&self, x: &Act) -> Result<(Act, Cache)> {
        let od = self.out_dims(x.dims)?;
        let s = self.scale.value();
        let wts = self.weight.forward_values();
        let mut pre = vec![0.0; x.n * self.units];
        let mut out = Act::zeros(x.n, od);
        for i in 0..x.n {
            let p = &mut pre[i * self.units..(i + 1) * self.units];
            kernels::dense_forward(x.sample(i), self.groups, self.duplicate, wts, self.units, p);
            p.iter_mut().for_each(|v| *v *= s);
            let o = out.sample_mut(i);
            for (o, p) in o.iter_mut().zip(p.iter()) {
                *o = sign(*p);
            }
            if self.skip {
                o[self.units..].copy_from_slice(x.sample(i));
            }
        }
        Ok((out, Cache::Dense { x: x.clone(), pre }))
    }

    fn backward(&mut self, x: &Act, pre: &[f64], dy: &Act, need_dx: bool) -> Option<Act> {
        let s = self.scale.value();
        let mut dx = need_dx.then(|| Act::zeros(x.n, x.dims));
        let wts = self.weight.forward_values().to_vec();
        let width = self.width();
        for i in 0..x.n {
            let dyi = &dy.data[i * width..(i + 1) * width];
            let p = &pre[i * self.units..(i + 1) * self.units];
            let dz = masked_dz(&dyi[..self.units], p, s);
            let dxi = dx.as_mut().map(|d| d.sample_mut(i));
            let dxi = dxi.map(|d| {
                if self.skip {
                    d.copy_from_slice(&dyi[self.units..]);
                }
                d
            });
            kernels::dense_backward(
                x.sample(i),
                self.groups,
                self.duplicate,
                &wts,
                self.units,
                &dz,
                &mut self.weight.grad,
                dxi,
            );
        }
        dx
    }

    pub fn infer(&self, x: &BitTensor) -> Result<BitTensor> {
        if x.len() != self.inputs {
            return dim_err(format!("{} expects {} inputs, got {}", self.weight.name, self.inputs, x.len()));
        }
        let flat = x.clone().reshape(&[self.inputs])?;
        let fed = if self.duplicate {
            BitTensor::from_fn(&[2 * self.inputs], |i| flat.bit(i / 2))
        } else {
            flat.clone()
        };
        let z = binmath::bin_dense(&fed, self.weight.bits(), self.groups)?;
        let act = BitTensor::from_fn(&[self.units], |j| z[j] >= 0);
        if self.skip {
            binmath::concat_channels(&[&act, &flat])
        } else {
            Ok(act)
        }
    }
}

/// Channel shuffle with two groups: output `2j + g` takes input `g·C/2 + j`.
pub fn shuffle2(c: usize) -> Vec<usize> {
    (0..c).map(|o| (o % 2) * (c / 2) + o / 2).collect()
}

pub fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (j, &p) in perm.iter().enumerate() {
        inv[p] = j;
    }
    inv
}

fn chain_forward(blocks: &[ConvBlock], x: &Act) -> Result<(Act, Vec<Cache>)> {
    let mut caches = Vec::with_capacity(blocks.len());
    let mut cur = x.clone();
    for b in blocks {
        let (y, c) = b.forward(&cur)?;
        caches.push(c);
        cur = y;
    }
    Ok((cur, caches))
}

fn chain_backward(blocks: &mut [ConvBlock], caches: &[Cache], dy: Act, need_dx: bool) -> Option<Act> {
    let mut d = dy;
    for (k, (b, c)) in blocks.iter_mut().zip(caches).enumerate().rev() {
        let Cache::Conv { x, pre } = c else {
            unreachable!("conv chain holds conv caches")
        };
        match b.backward(x, pre, &d, k > 0 || need_dx) {
            Some(dx) => d = dx,
            None => return None,
        }
    }
    Some(d)
}

fn chain_infer(blocks: &[ConvBlock], x: &BitTensor) -> Result<BitTensor> {
    blocks.iter().try_fold(x.clone(), |cur, b| b.infer(&cur))
}

/// Residual unit: the first half of the channels runs through the main path,
/// the second half is passed through, and the halves are concatenated and
/// shuffled.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualUnit {
    pub channels: usize,
    pub main: Vec<ConvBlock>,
}

impl ResidualUnit {
    pub fn new(name: &str, channels: usize, groups: usize, k: f64, rng: &mut impl Rng) -> Result<Self> {
        let h = channels / 2;
        Ok(ResidualUnit {
            channels,
            main: vec![
                ConvBlock::square(&format!("{name}.main0"), 1, h, h, 1, 1, k, rng)?,
                ConvBlock::square(&format!("{name}.main1"), 3, h, h, groups, 1, k, rng)?,
                ConvBlock::square(&format!("{name}.main2"), 1, h, h, 1, 1, k, rng)?,
            ],
        })
    }

    pub fn out_dims(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
        if dims[2] != self.channels {
            return dim_err(format!("residual unit expects {} channels, got {}", self.channels, dims[2]));
        }
        Ok(dims)
    }

    pub fn forward(&self, x: &Act) -> Result<(Act, Cache)> {
        self.out_dims(x.dims)?;
        let (a, b) = x.split_channels(self.channels / 2);
        let (ya, main) = chain_forward(&self.main, &a)?;
        let y = Act::concat_channels(&ya, &b).permute_channels(&shuffle2(self.channels));
        Ok((y, Cache::Residual { main }))
    }

    fn backward(&mut self, caches: &[Cache], dy: &Act, need_dx: bool) -> Option<Act> {
        let d = dy.permute_channels(&inverse(&shuffle2(self.channels)));
        let (da, db) = d.split_channels(self.channels / 2);
        let dxa = chain_backward(&mut self.main, caches, da, need_dx)?;
        Some(Act::concat_channels(&dxa, &db))
    }

    pub fn infer(&self, x: &BitTensor) -> Result<BitTensor> {
        let (a, b) = binmath::split_channels(x, self.channels / 2)?;
        let ya = chain_infer(&self.main, &a)?;
        binmath::permute_channels(&binmath::concat_channels(&[&ya, &b])?, &shuffle2(self.channels))
    }
}

/// Down-sampling unit: a main path (1×1, strided 3×3, 1×1) and a side path
/// (strided 3×3, 1×1) both read the full input; each yields half the output
/// channels, then concatenation and shuffle.
#[derive(Clone, Debug, PartialEq)]
pub struct DownUnit {
    pub in_channels: usize,
    pub out_channels: usize,
    pub main: Vec<ConvBlock>,
    pub side: Vec<ConvBlock>,
}

impl DownUnit {
    pub fn new(name: &str, cin: usize, cout: usize, groups: usize, k: f64, rng: &mut impl Rng) -> Result<Self> {
        let h = cout / 2;
        Ok(DownUnit {
            in_channels: cin,
            out_channels: cout,
            main: vec![
                ConvBlock::square(&format!("{name}.main0"), 1, cin, h, 1, 1, k, rng)?,
                ConvBlock::square(&format!("{name}.main1"), 3, h, h, groups, 2, k, rng)?,
                ConvBlock::square(&format!("{name}.main2"), 1, h, h, 1, 1, k, rng)?,
            ],
            side: vec![
                ConvBlock::square(&format!("{name}.side0"), 3, cin, cin, groups, 2, k, rng)?,
                ConvBlock::square(&format!("{name}.side1"), 1, cin, h, 1, 1, k, rng)?,
            ],
        })
    }

    pub fn out_dims(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
        let a = self.main.iter().try_fold(dims, |d, b| b.out_dims(d))?;
        let b = self.side.iter().try_fold(dims, |d, b| b.out_dims(d))?;
        if a[..2] != b[..2] {
            return dim_err("down-sampling paths disagree on spatial size");
        }
        Ok([a[0], a[1], a[2] + b[2]])
    }

    pub fn forward(&self, x: &Act) -> Result<(Act, Cache)> {
        let (ya, main) = chain_forward(&self.main, x)?;
        let (yb, side) = chain_forward(&self.side, x)?;
        let y = Act::concat_channels(&ya, &yb).permute_channels(&shuffle2(self.out_channels));
        Ok((y, Cache::Down { main, side }))
    }

    fn backward(&mut self, main: &[Cache], side: &[Cache], dy: &Act, need_dx: bool) -> Option<Act> {
        let d = dy.permute_channels(&inverse(&shuffle2(self.out_channels)));
        let (da, db) = d.split_channels(self.out_channels / 2);
        let dxa = chain_backward(&mut self.main, main, da, need_dx);
        let dxb = chain_backward(&mut self.side, side, db, need_dx);
        match (dxa, dxb) {
            (Some(mut a), Some(b)) => {
                a.data.iter_mut().zip(&b.data).for_each(|(a, b)| *a += b);
                Some(a)
            }
            _ => None,
        }
    }

    pub fn infer(&self, x: &BitTensor) -> Result<BitTensor> {
        let ya = chain_infer(&self.main, x)?;
        let yb = chain_infer(&self.side, x)?;
        binmath::permute_channels(&binmath::concat_channels(&[&ya, &yb])?, &shuffle2(self.out_channels))
    }
}

/// One stage of the network graph.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(ConvBlock),
    MaxPool,
    Lgap(Lgap),
    Dense(DenseBlock),
    Residual(ResidualUnit),
    Down(DownUnit),
}

impl Layer {
    pub fn out_dims(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
        match self {
            Layer::Conv(b) => b.out_dims(dims),
            Layer::MaxPool => {
                let [h, w, c] = dims;
                if h % 2 != 0 || w % 2 != 0 {
                    return dim_err(format!("pool needs even spatial dims, got {h}x{w}"));
                }
                Ok([h / 2, w / 2, c])
            }
            Layer::Lgap(l) => l.out_dims(dims),
            Layer::Dense(d) => d.out_dims(dims),
            Layer::Residual(r) => r.out_dims(dims),
            Layer::Down(d) => d.out_dims(dims),
        }
    }

    pub fn forward(&self, x: &Act) -> Result<(Act, Cache)> {
        match self {
            Layer::Conv(b) => b.forward(x),
            Layer::MaxPool => pool_forward(x),
            Layer::Lgap(l) => l.forward(x),
            Layer::Dense(d) => d.forward(x),
            Layer::Residual(r) => r.forward(x),
            Layer::Down(d) => d.forward(x),
        }
    }

    /// Accumulates parameter gradients; returns the input gradient when
    /// `need_dx`.
    pub fn backward(&mut self, cache: &Cache, dy: &Act, need_dx: bool) -> Option<Act> {
        match (self, cache) {
            (Layer::Conv(b), Cache::Conv { x, pre }) => b.backward(x, pre, dy, need_dx),
            (Layer::MaxPool, Cache::Pool { argmax, in_dims }) => {
                need_dx.then(|| pool_backward(argmax, *in_dims, dy))
            }
            (Layer::Lgap(l), Cache::Lgap { x, pre }) => l.backward(x, pre, dy, need_dx),
            (Layer::Dense(d), Cache::Dense { x, pre }) => d.backward(x, pre, dy, need_dx),
            (Layer::Residual(r), Cache::Residual { main }) => r.backward(main, dy, need_dx),
            (Layer::Down(d), Cache::Down { main, side }) => d.backward(main, side, dy, need_dx),
            _ => unreachable!("cache does not belong to layer"),
        }
    }

    pub fn infer(&self, x: &BitTensor) -> Result<BitTensor> {
        match self {
            Layer::Conv(b) => b.infer(x),
            Layer::MaxPool => binmath::maxpool2x2(x),
            Layer::Lgap(l) => l.infer(x),
            Layer::Dense(d) => d.infer(x),
            Layer::Residual(r) => r.infer(x),
            Layer::Down(d) => d.infer(x),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Conv(b) => vec![&b.weight],
            Layer::MaxPool => vec![],
            Layer::Lgap(l) => vec![&l.depthwise],
            Layer::Dense(d) => vec![&d.weight],
            Layer::Residual(r) => r.main.iter().map(|b| &b.weight).collect(),
            Layer::Down(d) => d.main.iter().chain(&d.side).map(|b| &b.weight).collect(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Conv(b) => vec![&mut b.weight],
            Layer::MaxPool => vec![],
            Layer::Lgap(l) => vec![&mut l.depthwise],
            Layer::Dense(d) => vec![&mut d.weight],
            Layer::Residual(r) => r.main.iter_mut().map(|b| &mut b.weight).collect(),
            Layer::Down(d) => d.main.iter_mut().chain(d.side.iter_mut()).map(|b| &mut b.weight).collect(),
        }
    }

    /// Every scale used by the layer, for the scale-removal check.
    pub fn scales(&self) -> Vec<ScaleSpec> {
        match self {
            Layer::Conv(b) => vec![b.scale],
            Layer::MaxPool => vec![],
            Layer::Lgap(l) => vec![l.scale],
            Layer::Dense(d) => vec![d.scale],
            Layer::Residual(r) => r.main.iter().map(|b| b.scale).collect(),
            Layer::Down(d) => d.main.iter().chain(&d.side).map(|b| b.scale).collect(),
        }
    }
}

fn pool_forward(x: &Act) -> Result<(Act, Cache)> {
    let [h, w, c] = x.dims;
    let od = Layer::MaxPool.out_dims(x.dims)?;
    let (oh, ow) = (od[0], od[1]);
    let mut out = Act::zeros(x.n, od);
    let mut argmax = Vec::with_capacity(out.data.len());
    for i in 0..x.n {
        let xs = x.sample(i);
        let os = out.sample_mut(i);
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = 0usize;
                    let mut bv = f64::NEG_INFINITY;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let k = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                        if xs[k] > bv {
                            bv = xs[k];
                            best = k;
                        }
                    }
                    os[(oy * ow + ox) * c + ch] = bv;
                    argmax.push(best as u32);
                }
            }
        }
    }
    let _ = h;
    Ok((out, Cache::Pool { argmax, in_dims: x.dims }))
}

fn pool_backward(argmax: &[u32], in_dims: [usize; 3], dy: &Act) -> Act {
    let mut dx = Act::zeros(dy.n, in_dims);
    let per_out = dy.per();
    for i in 0..dy.n {
        let d = dy.sample(i);
        let dxs = dx.sample_mut(i);
        for (j, &k) in argmax[i * per_out..(i + 1) * per_out].iter().enumerate() {
            dxs[k as usize] += d[j];
        }
    }
    dx
}

/// Binary output layer. Logits are `α·z` with `z` the integer accumulation;
/// the prediction is `argmax z`. Weights are `[classes, fan_in]` so growing
/// the head appends rows.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputLayer {
    pub fan_in: usize,
    pub n_classes: usize,
    pub c: f64,
    pub weight: Param,
}

impl OutputLayer {
    pub fn new(fan_in: usize, n_classes: usize, c: f64, rng: &mut impl Rng) -> Self {
        OutputLayer {
            fan_in,
            n_classes,
            c,
            weight: Param::binary("head", &[n_classes, fan_in], fan_in, n_classes.max(1), rng),
        }
    }

    pub fn alpha(&self) -> f64 {
        OutputScaleSpec {
            fan_in: self.fan_in,
            n_classes: self.n_classes.max(1),
            c: self.c,
        }
        .value()
    }

    /// Appends freshly initialised rows; existing rows are untouched.
    pub fn grow(&mut self, n_classes: usize, rng: &mut impl Rng) -> Result<()> {
        if n_classes < self.n_classes {
            return crate::error::cfg_err(format!("cannot shrink head from {} to {n_classes}", self.n_classes));
        }
        let extra = OutputLayer::new(self.fan_in, n_classes - self.n_classes, self.c, rng);
        let mut proxy = self.weight.proxy.clone();
        proxy.extend_from_slice(&extra.weight.proxy);
        let mut m = self.weight.m.clone();
        m.resize(proxy.len(), 0.0);
        let mut v = self.weight.v.clone();
        v.resize(proxy.len(), 0.0);
        let mut w = Param::binary_from("head", &[n_classes, self.fan_in], proxy)?;
        w.restore(&w.proxy.clone(), &m, &v)?;
        self.weight = w;
        self.n_classes = n_classes;
        Ok(())
    }

    pub fn forward(&self, x: &Act) -> Result<Act> {
        if x.per() != self.fan_in {
            return dim_err(format!("head expects {} inputs, got {}", self.fan_in, x.per()));
        }
        let a = self.alpha();
        let w = self.weight.forward_values();
        let mut out = Act::zeros(x.n, [1, 1, self.n_classes]);
        for i in 0..x.n {
            let xs = x.sample(i).to_vec();
            for (k, o) in out.sample_mut(i).iter_mut().enumerate() {
                let row = &w[k * self.fan_in..(k + 1) * self.fan_in];
                *o = a * row.iter().zip(&xs).map(|(w, x)| w * x).sum::<f64>();
            }
        }
        Ok(out)
    }

    pub fn backward(&mut self, x: &Act, dlogits: &Act, need_dx: bool) -> Option<Act> {
        let a = self.alpha();
        let mut dx = need_dx.then(|| Act::zeros(x.n, x.dims));
        let w = self.weight.forward_values().to_vec();
        for i in 0..x.n {
            let xs = x.sample(i);
            let d = dlogits.sample(i);
            for k in 0..self.n_classes {
                let dz = a * d[k];
                if dz == 0.0 {
                    continue;
                }
                let g = &mut self.weight.grad[k * self.fan_in..(k + 1) * self.fan_in];
                for (g, x) in g.iter_mut().zip(xs) {
                    *g += dz * x;
                }
            }
            if let Some(dx) = dx.as_mut() {
                let out = dx.sample_mut(i);
                for k in 0..self.n_classes {
                    let dz = a * d[k];
                    let row = &w[k * self.fan_in..(k + 1) * self.fan_in];
                    for (o, w) in out.iter_mut().zip(row) {
                        *o += dz * w;
                    }
                }
            }
        }
        dx
    }

    /// Integer accumulations, one per class.
    pub fn infer(&self, x: &BitTensor) -> Result<Vec<i32>> {
        let flat = x.clone().reshape(&[x.len()])?;
        binmath::bin_rows(&flat, self.weight.bits())
    }
}
