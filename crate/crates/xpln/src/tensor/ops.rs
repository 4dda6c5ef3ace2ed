use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};

use super::conv;
use super::{check_same_shape, Op, Tensor};

impl<S: Scalar> Tensor<S> {
    pub fn add(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        check_same_shape("add", self, rhs)?;
        let data = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Add(self.clone(), rhs.clone()),
        ))
    }

    pub fn mul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        check_same_shape("mul", self, rhs)?;
        let data = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Mul(self.clone(), rhs.clone()),
        ))
    }

    /// Elementwise `mul * x + add`.
    pub fn affine(&self, mul: S, add: S) -> Tensor<S> {
        let data = self.data().iter().map(|&v| mul * v + add).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Affine { x: self.clone(), mul })
    }

    pub fn square(&self) -> Tensor<S> {
        let data = self.data().iter().map(|&v| v * v).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Square(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor<S> {
        let data = self.data().iter().map(|&v| sigmoid(v)).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Sigmoid(self.clone()))
    }

    pub fn leaky_relu(&self, slope: S) -> Tensor<S> {
        let data = self
            .data()
            .iter()
            .map(|&v| if v > S::zero() { v } else { slope * v })
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::LeakyRelu { x: self.clone(), slope },
        )
    }

    /// `ln(max(x, floor))`; keeps cross-entropy finite near 0.
    pub fn ln_clipped(&self, floor: S) -> Tensor<S> {
        let data = self
            .data()
            .iter()
            .map(|&v| if v > floor { v.ln() } else { floor.ln() })
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::LnClipped { x: self.clone(), floor },
        )
    }

    /// Per-pixel softmax across the channel axis of a `[M, H, W]` tensor.
    pub fn softmax_channels(&self) -> Result<Tensor<S>> {
        let [m, h, w] = expect_rank3("softmax_channels", self)?;
        let hw = h * w;
        let x = self.data();
        let mut out = vec![S::zero(); x.len()];
        for p in 0..hw {
            let mut max = x[p];
            for ch in 1..m {
                let v = x[ch * hw + p];
                if v > max {
                    max = v;
                }
            }
            let mut sum = S::zero();
            for ch in 0..m {
                let e = (x[ch * hw + p] - max).exp();
                out[ch * hw + p] = e;
                sum = sum + e;
            }
            for ch in 0..m {
                out[ch * hw + p] = out[ch * hw + p] / sum;
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::SoftmaxChannels(self.clone()),
        ))
    }

    /// 2-D convolution: `x [Cin,H,W]`, `w [Cout,Cin,K,K]`, `b [Cout]`.
    pub fn conv2d(
        &self,
        w: &Tensor<S>,
        b: &Tensor<S>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<S>> {
        let [cin, h, wd] = expect_rank3("conv2d input", self)?;
        let ws = w.shape();
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::Shape(format!(
                "conv2d kernel must be [Cout,Cin,K,K], got {:?}",
                ws
            )));
        }
        let (cout, wcin, k) = (ws[0], ws[1], ws[2]);
        if wcin != cin {
            return Err(Error::Shape(format!(
                "conv2d kernel expects {} input channels, image has {}",
                wcin, cin
            )));
        }
        if b.shape() != [cout] {
            return Err(Error::Shape(format!(
                "conv2d bias shape {:?}, expected [{}]",
                b.shape(),
                cout
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d stride must be positive".into()));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::Shape(format!(
                "conv2d kernel {k}x{k} larger than padded input {h}x{wd} (pad {pad})"
            )));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let data = conv::forward(
            self.data(),
            w.data(),
            b.data(),
            conv::Geom { cin, h, w: wd, cout, k, stride, pad, ho, wo },
        );
        Ok(Tensor::from_op(
            vec![cout, ho, wo],
            data,
            Op::Conv2d {
                x: self.clone(),
                w: w.clone(),
                b: b.clone(),
                stride,
                pad,
            },
        ))
    }

    /// Fully-connected layer: `x [in]`, `w [out,in]`, `b [out]`.
    pub fn dense(&self, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        if self.shape().len() != 1 {
            return Err(Error::Shape(format!(
                "dense input must be rank 1, got {:?}",
                self.shape()
            )));
        }
        let n_in = self.shape()[0];
        let ws = w.shape();
        if ws.len() != 2 || ws[1] != n_in {
            return Err(Error::Shape(format!(
                "dense weight {:?} incompatible with input [{n_in}]",
                ws
            )));
        }
        let n_out = ws[0];
        if b.shape() != [n_out] {
            return Err(Error::Shape(format!(
                "dense bias shape {:?}, expected [{n_out}]",
                b.shape()
            )));
        }
        let x = self.data();
        let wd = w.data();
        let mut out = b.data().to_vec();
        for o in 0..n_out {
            let row = &wd[o * n_in..(o + 1) * n_in];
            let mut acc = S::zero();
            for (wv, xv) in row.iter().zip(x) {
                acc = acc + *wv * *xv;
            }
            out[o] = out[o] + acc;
        }
        Ok(Tensor::from_op(
            vec![n_out],
            out,
            Op::Dense { x: self.clone(), w: w.clone(), b: b.clone() },
        ))
    }

    /// Spatial maximum per channel.  Returns the pooled `[C]` tensor and the
    /// first (row-major) maximizing `(x, y)` position per channel; gradients
    /// flow only to those positions.
    pub fn global_max_pool(&self) -> Result<(Tensor<S>, Vec<(usize, usize)>)> {
        let [ch, h, w] = expect_rank3("global_max_pool", self)?;
        let hw = h * w;
        let x = self.data();
        let mut vals = Vec::with_capacity(ch);
        let mut argmax = Vec::with_capacity(ch);
        for cc in 0..ch {
            let plane = &x[cc * hw..(cc + 1) * hw];
            let mut best = plane[0];
            let mut best_i = 0;
            for (i, &v) in plane.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    best_i = i;
                }
            }
            vals.push(best);
            argmax.push(best_i);
        }
        let coords = argmax.iter().map(|&i| (i % w, i / w)).collect();
        let t = Tensor::from_op(
            vec![ch],
            vals,
            Op::GlobalMaxPool { x: self.clone(), argmax },
        );
        Ok((t, coords))
    }

    /// Spatial mean per channel.
    pub fn global_avg_pool(&self) -> Result<Tensor<S>> {
        let [ch, h, w] = expect_rank3("global_avg_pool", self)?;
        let hw = h * w;
        let inv = c::<S>(1.0 / hw as f64);
        let x = self.data();
        let mut vals = Vec::with_capacity(ch);
        for cc in 0..ch {
            let mut acc = S::zero();
            for &v in &x[cc * hw..(cc + 1) * hw] {
                acc = acc + v;
            }
            vals.push(acc * inv);
        }
        Ok(Tensor::from_op(vec![ch], vals, Op::GlobalAvgPool(self.clone())))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor<S>> {
        let [ch, h, w] = expect_rank3("upsample_nearest", self)?;
        if factor == 0 {
            return Err(Error::Shape("upsample factor must be positive".into()));
        }
        let (ho, wo) = (h * factor, w * factor);
        let x = self.data();
        let mut out = vec![S::zero(); ch * ho * wo];
        for cc in 0..ch {
            for y in 0..ho {
                let src = &x[cc * h * w + (y / factor) * w..][..w];
                let dst = &mut out[cc * ho * wo + y * wo..][..wo];
                for (xo, d) in dst.iter_mut().enumerate() {
                    *d = src[xo / factor];
                }
            }
        }
        Ok(Tensor::from_op(
            vec![ch, ho, wo],
            out,
            Op::UpsampleNearest { x: self.clone(), factor },
        ))
    }

    /// Contiguous slice `[start, start+len)` along axis 0.
    pub fn narrow0(&self, start: usize, len: usize) -> Result<Tensor<S>> {
        if self.shape().is_empty() {
            return Err(Error::Shape("narrow0 on rank-0 tensor".into()));
        }
        let n0 = self.shape()[0];
        if start + len > n0 || len == 0 {
            return Err(Error::Shape(format!(
                "narrow0 [{start}, {}) out of axis length {n0}",
                start + len
            )));
        }
        let inner: usize = self.shape()[1..].iter().product();
        let data = self.data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = self.shape().to_vec();
        shape[0] = len;
        Ok(Tensor::from_op(
            shape,
            data,
            Op::Narrow0 { x: self.clone(), start, len },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data().to_vec(),
            Op::Reshape(self.clone()),
        ))
    }

    /// Multiply a `[C,H,W]` tensor by a `[1,H,W]` map, broadcast over channels.
    pub fn mul_channel_broadcast(&self, map: &Tensor<S>) -> Result<Tensor<S>> {
        let [ch, h, w] = expect_rank3("mul_channel_broadcast input", self)?;
        let [mc, mh, mw] = expect_rank3("mul_channel_broadcast map", map)?;
        if mc != 1 || mh != h || mw != w {
            return Err(Error::Shape(format!(
                "broadcast map shape {:?} incompatible with image {:?}",
                map.shape(),
                self.shape()
            )));
        }
        let hw = h * w;
        let x = self.data();
        let mp = map.data();
        let mut out = vec![S::zero(); x.len()];
        for cc in 0..ch {
            let src = &x[cc * hw..(cc + 1) * hw];
            let dst = &mut out[cc * hw..(cc + 1) * hw];
            for i in 0..hw {
                dst[i] = src[i] * mp[i];
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::MulChannelBroadcast { x: self.clone(), map: map.clone() },
        ))
    }

    /// Sum of all elements (rank-0 result).
    pub fn sum_all(&self) -> Tensor<S> {
        let mut acc = S::zero();
        for &v in self.data() {
            acc = acc + v;
        }
        Tensor::from_op(Vec::new(), vec![acc], Op::SumAll(self.clone()))
    }

    /// Mean of all elements (rank-0 result).
    pub fn mean_all(&self) -> Tensor<S> {
        let mut acc = S::zero();
        for &v in self.data() {
            acc = acc + v;
        }
        let mean = acc * c::<S>(1.0 / self.numel() as f64);
        Tensor::from_op(Vec::new(), vec![mean], Op::MeanAll(self.clone()))
    }
}

/// Concatenate tensors along axis 0; trailing dimensions must agree.
pub fn concat0<S: Scalar>(parts: &[Tensor<S>]) -> Result<Tensor<S>> {
    if parts.is_empty() {
        return Err(Error::Shape("concat0 of zero tensors".into()));
    }
    let first = parts[0].shape();
    if first.is_empty() {
        return Err(Error::Shape("concat0 of rank-0 tensors".into()));
    }
    let mut n0 = 0;
    for p in parts {
        if p.shape().len() != first.len() || p.shape()[1..] != first[1..] {
            return Err(Error::Shape(format!(
                "concat0: shape {:?} incompatible with {:?}",
                p.shape(),
                first
            )));
        }
        n0 += p.shape()[0];
    }
    let mut data = Vec::with_capacity(n0 * first[1..].iter().product::<usize>());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    let mut shape = first.to_vec();
    shape[0] = n0;
    Ok(Tensor::from_op(shape, data, Op::Concat0(parts.to_vec())))
}

pub(crate) fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

fn expect_rank3<S: Scalar>(what: &str, t: &Tensor<S>) -> Result<[usize; 3]> {
    match *t.shape() {
        [a, b, c] => Ok([a, b, c]),
        _ => Err(Error::Shape(format!(
            "{what} expects rank 3, got {:?}",
            t.shape()
        ))),
    }
}
