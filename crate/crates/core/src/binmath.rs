//! Bit-packed ±1 tensors and the exact integer kernels of the inference path.
//!
//! A value of `+1` is stored as bit `1`, `-1` as bit `0`, packed row-major over
//! the logical index into 64-bit words. Bits past the logical length are always
//! zero so two tensors can be compared word by word.
//!
//! Every kernel reduces to `n - 2 * popcount(a ^ b)`, the ±1 dot product of two
//! packed vectors of length `n`.

use crate::error::{cfg_err, dim_err, Result};

const WORD: usize = 64;

fn words_for(len: usize) -> usize {
    len.div_ceil(WORD)
}

/// Shaped container of ±1 values packed 64 per word.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BitTensor {
    shape: Vec<usize>,
    len: usize,
    words: Vec<u64>,
}

impl BitTensor {
    /// Tensor filled with `-1`.
    pub fn minus_ones(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        BitTensor {
            shape: shape.to_vec(),
            len,
            words: vec![0; words_for(len)],
        }
    }

    /// Tensor filled with `+1`.
    pub fn plus_ones(shape: &[usize]) -> Self {
        Self::from_fn(shape, |_| true)
    }

    /// Builds a tensor where `f(i)` gives the bit (true = +1) at logical index `i`.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> bool) -> Self {
        let mut t = Self::minus_ones(shape);
        for i in 0..t.len {
            if f(i) {
                t.words[i / WORD] |= 1 << (i % WORD);
            }
        }
        t
    }

    /// Packs a sequence of ±1 values. Any other value is rejected.
    pub fn from_pm1(shape: &[usize], values: &[i8]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != values.len() {
            return dim_err(format!(
                "shape {shape:?} holds {len} values, got {}",
                values.len()
            ));
        }
        if let Some(v) = values.iter().find(|v| **v != 1 && **v != -1) {
            return dim_err(format!("value {v} is not ±1"));
        }
        Ok(Self::from_fn(shape, |i| values[i] == 1))
    }

    /// Binarizes reals with `x >= 0 -> +1`.
    pub fn from_signs(shape: &[usize], values: &[f64]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != values.len() {
            return dim_err(format!(
                "shape {shape:?} holds {len} values, got {}",
                values.len()
            ));
        }
        Ok(Self::from_fn(shape, |i| values[i] >= 0.0))
    }

    /// Wraps raw words. Padding bits must be zero.
    pub fn from_words(shape: &[usize], words: Vec<u64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if words.len() != words_for(len) {
            return dim_err(format!(
                "{len} bits need {} words, got {}",
                words_for(len),
                words.len()
            ));
        }
        let t = BitTensor {
            shape: shape.to_vec(),
            len,
            words,
        };
        if !t.padding_is_zero() {
            return dim_err("non-zero padding bits");
        }
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Bit at logical index `i` (true = +1).
    #[inline]
    pub fn bit(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        (self.words[i / WORD] >> (i % WORD)) & 1 == 1
    }

    /// Value at logical index `i` as ±1.
    #[inline]
    pub fn value(&self, i: usize) -> i8 {
        if self.bit(i) {
            1
        } else {
            -1
        }
    }

    #[inline]
    pub fn set(&mut self, i: usize, plus: bool) {
        debug_assert!(i < self.len);
        let mask = 1u64 << (i % WORD);
        if plus {
            self.words[i / WORD] |= mask;
        } else {
            self.words[i / WORD] &= !mask;
        }
    }

    pub fn to_pm1(&self) -> Vec<i8> {
        (0..self.len).map(|i| self.value(i)).collect()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.value(i) as f64).collect()
    }

    /// Number of `+1` entries.
    pub fn count_plus(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.len {
            return dim_err(format!("cannot reshape {:?} to {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Reads `n <= 64` bits starting at logical offset `start`, LSB first.
    #[inline]
    pub(crate) fn read_bits(&self, start: usize, n: usize) -> u64 {
        read_bits(&self.words, start, n)
    }

    fn padding_is_zero(&self) -> bool {
        let tail = self.len % WORD;
        tail == 0 || self.words.last().is_none_or(|w| w >> tail == 0)
    }
}

#[inline]
fn read_bits(words: &[u64], start: usize, n: usize) -> u64 {
    debug_assert!(n <= WORD);
    if n == 0 {
        return 0;
    }
    let w = start / WORD;
    let off = start % WORD;
    let mut v = words[w] >> off;
    if off + n > WORD {
        v |= words[w + 1] << (WORD - off);
    }
    if n < WORD {
        v &= (1u64 << n) - 1;
    }
    v
}

/// ORs `n <= 64` bits of `bits` into `words` at logical offset `start`.
#[inline]
fn write_bits(words: &mut [u64], start: usize, n: usize, bits: u64) {
    if n == 0 {
        return;
    }
    let w = start / WORD;
    let off = start % WORD;
    words[w] |= bits << off;
    if off + n > WORD {
        words[w + 1] |= bits >> (WORD - off);
    }
}

/// Copies `n` bits from `src` at `src_start` into zeroed `dst` at `dst_start`.
#[inline]
fn copy_bits(src: &[u64], src_start: usize, dst: &mut [u64], dst_start: usize, n: usize) {
    let mut done = 0;
    while done < n {
        let chunk = (n - done).min(WORD);
        let bits = read_bits(src, src_start + done, chunk);
        write_bits(dst, dst_start + done, chunk, bits);
        done += chunk;
    }
}

/// Signed integer tensor holding pre-activation accumulations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntTensor {
    pub shape: Vec<usize>,
    pub values: Vec<i32>,
}

impl IntTensor {
    /// Binarizes with `z >= 0 -> +1`.
    pub fn sign(&self) -> BitTensor {
        BitTensor::from_fn(&self.shape, |i| self.values[i] >= 0)
    }

    /// Index of the largest value; the first one wins ties.
    pub fn argmax(&self) -> usize {
        argmax_i32(&self.values)
    }
}

/// First index of the maximum.
pub fn argmax_i32(values: &[i32]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// ±1 dot product of two packed word slices holding `n` logical bits.
#[inline]
pub fn dot_words(a: &[u64], b: &[u64], n: usize) -> i32 {
    let diff: u32 = a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum();
    n as i32 - 2 * diff as i32
}

/// Exact ±1 dot product `Σ aᵢbᵢ = n − 2·popcount(a ⊕ b)`.
pub fn bin_dot(a: &BitTensor, b: &BitTensor) -> Result<i32> {
    if a.len != b.len {
        return dim_err(format!("dot of lengths {} and {}", a.len, b.len));
    }
    Ok(dot_words(&a.words, &b.words, a.len))
}

/// Filters of a weight tensor re-packed so each output unit owns a contiguous
/// bit vector, ready for `dot_words`.
struct PackedRows {
    row_len: usize,
    stride: usize,
    words: Vec<u64>,
}

impl PackedRows {
    /// `weights` is row-major `[row_len, rows]`: unit `r` reads bits `k*rows + r`.
    fn transpose(weights: &BitTensor, row_len: usize, rows: usize) -> Self {
        let stride = words_for(row_len);
        let mut words = vec![0u64; stride * rows];
        for k in 0..row_len {
            for r in 0..rows {
                if weights.bit(k * rows + r) {
                    words[r * stride + k / WORD] |= 1 << (k % WORD);
                }
            }
        }
        PackedRows {
            row_len,
            stride,
            words,
        }
    }

    #[inline]
    fn row(&self, r: usize) -> &[u64] {
        &self.words[r * self.stride..(r + 1) * self.stride]
    }
}

/// Geometry of a grouped 2-D convolution over HWC tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.stride == 0 || self.kernel_h == 0 || self.kernel_w == 0 {
            return cfg_err("kernel, stride and groups must be positive");
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return cfg_err(format!(
                "channels {}->{} not divisible by {} groups",
                self.in_channels, self.out_channels, self.groups
            ));
        }
        Ok(())
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Inputs accumulated by one output unit.
    pub fn fan_in(&self) -> usize {
        self.kernel_h * self.kernel_w * self.in_per_group()
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.kernel_h,
            self.kernel_w,
            self.in_per_group(),
            self.out_channels,
        ]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel_h || pw < self.kernel_w {
            return dim_err(format!("input {h}x{w} smaller than kernel"));
        }
        Ok((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }
}

/// Grouped ±1 convolution of an `[H, W, Cin]` input with `[kh, kw, Cin/g, Cout]`
/// weights. Out-of-bounds taps read `-1`.
pub fn bin_conv2d(input: &BitTensor, weights: &BitTensor, geo: &ConvGeometry) -> Result<IntTensor> {
    geo.validate()?;
    let &[h, w, cin] = input.shape() else {
        return dim_err(format!("conv input must be HWC, got {:?}", input.shape()));
    };
    if cin != geo.in_channels {
        return dim_err(format!("input has {cin} channels, geometry expects {}", geo.in_channels));
    }
    if weights.shape() != geo.weight_shape() {
        return dim_err(format!(
            "weights {:?} do not match {:?}",
            weights.shape(),
            geo.weight_shape()
        ));
    }
    let (oh, ow) = geo.output_hw(h, w)?;
    let cin_g = geo.in_per_group();
    let cout_g = geo.out_per_group();
    let cout = geo.out_channels;
    let patch_len = geo.fan_in();
    let filters = PackedRows::transpose(weights, patch_len, cout);
    let mut patch = vec![0u64; filters.stride];
    let mut out = vec![0i32; oh * ow * cout];

    for oy in 0..oh {
        for ox in 0..ow {
            for g in 0..geo.groups {
                patch.iter_mut().for_each(|x| *x = 0);
                for ky in 0..geo.kernel_h {
                    let iy = (oy * geo.stride + ky) as isize - geo.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..geo.kernel_w {
                        let ix = (ox * geo.stride + kx) as isize - geo.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = (iy as usize * w + ix as usize) * cin + g * cin_g;
                        let dst = (ky * geo.kernel_w + kx) * cin_g;
                        copy_bits(&input.words, src, &mut patch, dst, cin_g);
                    }
                }
                let base = (oy * ow + ox) * cout + g * cout_g;
                for co in 0..cout_g {
                    out[base + co] = dot_words(&patch, filters.row(g * cout_g + co), filters.row_len);
                }
            }
        }
    }
    Ok(IntTensor {
        shape: vec![oh, ow, cout],
        values: out,
    })
}

/// Grouped ±1 dense layer with `[in/g, out]` weights. Unit `j` of group
/// `j / (out/g)` reads the matching contiguous slice of the input.
pub fn bin_dense(input: &BitTensor, weights: &BitTensor, groups: usize) -> Result<Vec<i32>> {
    let n_in = input.len();
    let &[rows, n_out] = weights.shape() else {
        return dim_err(format!("dense weights must be 2-D, got {:?}", weights.shape()));
    };
    if groups == 0 || n_in % groups != 0 || n_out % groups != 0 {
        return cfg_err(format!("{n_in}->{n_out} not divisible by {groups} groups"));
    }
    let in_g = n_in / groups;
    if rows != in_g {
        return dim_err(format!("weights expect {rows} inputs per group, have {in_g}"));
    }
    let out_g = n_out / groups;
    let units = PackedRows::transpose(weights, in_g, n_out);
    let mut slice = vec![0u64; units.stride];
    let mut out = vec![0i32; n_out];
    for g in 0..groups {
        slice.iter_mut().for_each(|x| *x = 0);
        copy_bits(&input.words, g * in_g, &mut slice, 0, in_g);
        for j in 0..out_g {
            out[g * out_g + j] = dot_words(&slice, units.row(g * out_g + j), in_g);
        }
    }
    Ok(out)
}

/// Dot product of `input` with every row of `[rows, n]` weights.
pub fn bin_rows(input: &BitTensor, weights: &BitTensor) -> Result<Vec<i32>> {
    let &[rows, n] = weights.shape() else {
        return dim_err(format!("row weights must be 2-D, got {:?}", weights.shape()));
    };
    if n != input.len() {
        return dim_err(format!("rows of {n} against input of {}", input.len()));
    }
    let mut row = vec![0u64; words_for(n)];
    Ok((0..rows)
        .map(|r| {
            row.iter_mut().for_each(|x| *x = 0);
            copy_bits(&weights.words, r * n, &mut row, 0, n);
            dot_words(&input.words, &row, n)
        })
        .collect())
}

/// 2×2 max-pool with stride 2 over `[H, W, C]`. On ±1 data the result is `+1`
/// iff any element of the window is `+1`.
pub fn maxpool2x2(input: &BitTensor) -> Result<BitTensor> {
    let &[h, w, c] = input.shape() else {
        return dim_err(format!("pool input must be HWC, got {:?}", input.shape()));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return dim_err(format!("pool needs even spatial dims, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = BitTensor::minus_ones(&[oh, ow, c]);
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = (oy * ow + ox) * c;
            let mut done = 0;
            while done < c {
                let n = (c - done).min(WORD);
                let mut acc = 0u64;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let src = ((2 * oy + dy) * w + 2 * ox + dx) * c + done;
                    acc |= input.read_bits(src, n);
                }
                write_bits(&mut out.words, dst + done, n, acc);
                done += n;
            }
        }
    }
    Ok(out)
}

/// Concatenates HWC tensors along the channel axis.
pub fn concat_channels(parts: &[&BitTensor]) -> Result<BitTensor> {
    let Some(first) = parts.first() else {
        return dim_err("nothing to concatenate");
    };
    let (h, w) = hw(first)?;
    let mut cs = Vec::with_capacity(parts.len());
    for p in parts {
        if hw(p)? != (h, w) {
            return dim_err("spatial dims differ in channel concat");
        }
        cs.push(p.shape()[p.shape().len() - 1]);
    }
    let total: usize = cs.iter().sum();
    let mut out = BitTensor::minus_ones(&[h, w, total]);
    for pix in 0..h * w {
        let mut dst = pix * total;
        for (p, c) in parts.iter().zip(&cs) {
            copy_bits(&p.words, pix * c, &mut out.words, dst, *c);
            dst += c;
        }
    }
    if first.shape().len() == 1 {
        out = out.reshape(&[total])?;
    }
    Ok(out)
}

/// Splits the channels of an HWC tensor at `at`.
pub fn split_channels(input: &BitTensor, at: usize) -> Result<(BitTensor, BitTensor)> {
    let (h, w) = hw(input)?;
    let c = input.shape()[input.shape().len() - 1];
    if at > c {
        return dim_err(format!("split at {at} beyond {c} channels"));
    }
    let mut a = BitTensor::minus_ones(&[h, w, at]);
    let mut b = BitTensor::minus_ones(&[h, w, c - at]);
    for pix in 0..h * w {
        copy_bits(&input.words, pix * c, &mut a.words, pix * at, at);
        copy_bits(&input.words, pix * c + at, &mut b.words, pix * (c - at), c - at);
    }
    Ok((a, b))
}

/// Applies a channel permutation: output channel `j` takes input channel `perm[j]`.
pub fn permute_channels(input: &BitTensor, perm: &[usize]) -> Result<BitTensor> {
    let (h, w) = hw(input)?;
    let c = input.shape()[input.shape().len() - 1];
    if perm.len() != c {
        return dim_err("permutation length differs from channel count");
    }
    let mut out = BitTensor::minus_ones(input.shape());
    for pix in 0..h * w {
        for (j, &src) in perm.iter().enumerate() {
            if input.bit(pix * c + src) {
                out.set(pix * c + j, true);
            }
        }
    }
    Ok(out)
}

fn hw(t: &BitTensor) -> Result<(usize, usize)> {
    match t.shape() {
        [h, w, _] => Ok((*h, *w)),
        [_] => Ok((1, 1)),
        s => dim_err(format!("expected HWC or vector, got {s:?}")),
    }
}
