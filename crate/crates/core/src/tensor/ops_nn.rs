//! Convolution, pooling and normalisation operators.

use std::fmt;
use std::str::FromStr;

use super::graph::{accumulate, needs, Node, Op};
use super::kernels::{col2im_into, im2col, matmul_into, swap_outer_into, ConvGeom};
use super::{Element, Graph, Result, Tensor, TensorError, Var};

/// Normalisation epsilon shared by group and layer norm.
pub const NORM_EPS: f64 = 1e-5;

/// 2x2 window reduction used by the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolKind {
    #[default]
    Average,
    Max,
}

impl fmt::Display for PoolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolKind::Average => "avg",
            PoolKind::Max => "max",
        })
    }
}

impl FromStr for PoolKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "avg" | "average" => Ok(PoolKind::Average),
            "max" => Ok(PoolKind::Max),
            other => Err(format!("unknown pooling kind '{}'", other)),
        }
    }
}

/// Splits an image tensor shape into `(batch, channels, h, w)`; rank 3 means batch 1.
fn image_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(TensorError::shape(op, "[C,H,W] or [N,C,H,W]", shape)),
    }
}

fn image_shape(rank: usize, n: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    if rank == 3 {
        vec![c, h, w]
    } else {
        vec![n, c, h, w]
    }
}

impl<T: Element> Graph<T> {
    /// 3x3 cross-correlation with zero padding 1 and stride 1.
    /// `kernels` is `[C_out, C_in, 3, 3]`.
    pub fn conv2d(&mut self, x: Var, kernels: Var) -> Result<Var> {
        self.conv2d_strided(x, kernels, 1)
    }

    pub fn conv2d_strided(&mut self, x: Var, kernels: Var, stride: usize) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(kernels)?);
        let (tx, tw) = (&self.nodes[ix].value, &self.nodes[iw].value);
        let (n, c_in, h, w) = image_dims("conv2d", tx.shape())?;
        let c_out = match *tw.shape() {
            [co, ci, 3, 3] if ci == c_in => co,
            _ => {
                return Err(TensorError::shape(
                    "conv2d",
                    format!("[C_out, {}, 3, 3] kernels", c_in),
                    tw.shape(),
                ))
            }
        };
        if stride == 0 {
            return Err(TensorError::Config {
                op: "conv2d",
                msg: "stride must be positive".into(),
            });
        }
        let geom = ConvGeom::new(n, c_in, h, w, stride);
        let plane = geom.out_h * geom.out_w;
        let in_len = c_in * h * w;
        let mut data = vec![T::zero(); n * c_out * plane];
        let mut out_t = Vec::new();
        for (start, g) in geom.chunks() {
            let cols = im2col(&tx.data()[start * in_len..][..g.batch * in_len], &g);
            out_t.resize(c_out * g.col_cols(), T::zero());
            matmul_into(
                c_out,
                g.col_rows(),
                g.col_cols(),
                tw.data(),
                false,
                &cols,
                false,
                &mut out_t,
                false,
            );
            swap_outer_into(
                &out_t,
                c_out,
                g.batch,
                plane,
                &mut data[start * c_out * plane..][..g.batch * c_out * plane],
            );
        }
        let shape = image_shape(tx.rank(), n, c_out, geom.out_h, geom.out_w);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Conv2d { x: ix, w: iw, geom },
            &[ix, iw],
        ))
    }

    /// Transposed 3x3 convolution: the adjoint of [`Graph::conv2d_strided`]
    /// with the same kernels, mapping `[C_in, H, W]` to `[C_out, sH, sW]`.
    /// `kernels` is `[C_in, C_out, 3, 3]`.
    pub fn conv2d_transposed(&mut self, x: Var, kernels: Var, stride: usize) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(kernels)?);
        let (tx, tw) = (&self.nodes[ix].value, &self.nodes[iw].value);
        let (n, c_in, h, w) = image_dims("conv2d_transposed", tx.shape())?;
        let c_out = match *tw.shape() {
            [ci, co, 3, 3] if ci == c_in => co,
            _ => {
                return Err(TensorError::shape(
                    "conv2d_transposed",
                    format!("[{}, C_out, 3, 3] kernels", c_in),
                    tw.shape(),
                ))
            }
        };
        if stride == 0 {
            return Err(TensorError::Config {
                op: "conv2d_transposed",
                msg: "stride must be positive".into(),
            });
        }
        let geom = ConvGeom::new(n, c_out, h * stride, w * stride, stride);
        debug_assert_eq!((geom.out_h, geom.out_w), (h, w));
        let plane = h * w;
        let out_len = c_out * geom.in_h * geom.in_w;
        let mut data = vec![T::zero(); n * out_len];
        let mut xt = Vec::new();
        let mut cols = Vec::new();
        for (start, g) in geom.chunks() {
            xt.resize(c_in * g.batch * plane, T::zero());
            swap_outer_into(
                &tx.data()[start * c_in * plane..][..g.batch * c_in * plane],
                g.batch,
                c_in,
                plane,
                &mut xt,
            );
            cols.resize(g.col_rows() * g.col_cols(), T::zero());
            matmul_into(
                g.col_rows(),
                c_in,
                g.col_cols(),
                tw.data(),
                true,
                &xt,
                false,
                &mut cols,
                false,
            );
            col2im_into(&cols, &g, &mut data[start * out_len..][..g.batch * out_len]);
        }
        let shape = image_shape(tx.rank(), n, c_out, geom.in_h, geom.in_w);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::ConvTranspose2d { x: ix, w: iw, geom },
            &[ix, iw],
        ))
    }

    /// Adds `bias[c]` to every element of channel `c` of `[N, C, ...]` or `[C, ...]`.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(bias)?);
        let (tx, tb) = (&self.nodes[ix].value, &self.nodes[ib].value);
        let c = tb.numel();
        let channel_axis = if tx.rank() == 4 { 1 } else { 0 };
        if tb.rank() != 1 || tx.rank() < 2 || tx.shape()[channel_axis] != c {
            return Err(TensorError::shape(
                "channel_bias",
                format!("[{}] bias", c),
                tx.shape(),
            ));
        }
        let plane: usize = tx.shape()[channel_axis + 1..].iter().product();
        let data = tx
            .data()
            .chunks_exact(plane)
            .enumerate()
            .flat_map(|(k, chunk)| {
                let b = tb.data()[k % c];
                chunk.iter().map(move |&v| v + b)
            })
            .collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(out, Op::ChannelBias { x: ix, bias: ib }, &[ix, ib]))
    }

    /// 2x2, stride-2 pooling; spatial dims must be even.
    pub fn pool2d(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let ix = self.check(x)?;
        let tx = &self.nodes[ix].value;
        let (n, c, h, w) = image_dims("pool2d", tx.shape())?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::shape(
                "pool2d",
                "even spatial dims",
                tx.shape(),
            ));
        }
        let (ho, wo) = (h / 2, w / 2);
        let planes = n * c;
        let mut data = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::new();
        let quarter = T::of(0.25);
        for p in 0..planes {
            let src = &tx.data()[p * h * w..][..h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let idx = [
                        2 * oy * w + 2 * ox,
                        2 * oy * w + 2 * ox + 1,
                        (2 * oy + 1) * w + 2 * ox,
                        (2 * oy + 1) * w + 2 * ox + 1,
                    ];
                    match kind {
                        PoolKind::Average => {
                            let s = idx.iter().fold(T::zero(), |a, &i| a + src[i]);
                            data.push(s * quarter);
                        }
                        PoolKind::Max => {
                            let best = idx.iter().copied().fold(idx[0], |b, i| {
                                if src[i] > src[b] {
                                    i
                                } else {
                                    b
                                }
                            });
                            data.push(src[best]);
                            argmax.push((p * h * w + best) as u32);
                        }
                    }
                }
            }
        }
        let shape = image_shape(tx.rank(), n, c, ho, wo);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Pool {
                x: ix,
                kind,
                argmax,
            },
            &[ix],
        ))
    }

    /// Group normalisation over `(C/G) x H x W` blocks followed by a per-channel
    /// affine map. `gain` and `bias` are `[C]`.
    pub fn group_norm(&mut self, x: Var, groups: usize, gain: Var, bias: Var) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        let tx = &self.nodes[ix].value;
        let (n, c, h, w) = image_dims("group_norm", tx.shape())?;
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::Config {
                op: "group_norm",
                msg: format!("{} channels are not divisible into {} groups", c, groups),
            });
        }
        let (tg, tb) = (&self.nodes[ig].value, &self.nodes[ib].value);
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(TensorError::shape(
                "group_norm",
                format!("[{}] affine", c),
                tg.shape(),
            ));
        }
        let plane = h * w;
        let group_len = (c / groups) * plane;
        let (xhat, inv_std) = normalize_chunks(tx.data(), group_len);
        let data = xhat
            .iter()
            .enumerate()
            .map(|(j, &v)| {
                let ch = (j / plane) % c;
                v * tg.data()[ch] + tb.data()[ch]
            })
            .collect();
        debug_assert_eq!(inv_std.len(), n * groups);
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(
            out,
            Op::GroupNorm {
                x: ix,
                gain: ig,
                bias: ib,
                groups,
                xhat,
                inv_std,
            },
            &[ix, ig, ib],
        ))
    }

    /// Layer normalisation over the last axis; `gain` and `bias` are `[D]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        let tx = &self.nodes[ix].value;
        let d = *tx.shape().last().unwrap();
        let (tg, tb) = (&self.nodes[ig].value, &self.nodes[ib].value);
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(TensorError::shape(
                "layer_norm",
                format!("[{}] affine", d),
                tg.shape(),
            ));
        }
        let (xhat, inv_std) = normalize_chunks(tx.data(), d);
        let data = xhat
            .iter()
            .enumerate()
            .map(|(j, &v)| v * tg.data()[j % d] + tb.data()[j % d])
            .collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: ix,
                gain: ig,
                bias: ib,
                xhat,
                inv_std,
            },
            &[ix, ig, ib],
        ))
    }
}

/// Standardises each contiguous chunk (two-pass mean/variance in `f64`).
fn normalize_chunks<T: Element>(x: &[T], chunk: usize) -> (Vec<T>, Vec<f64>) {
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(x.len() / chunk);
    for c in x.chunks_exact(chunk) {
        let mean = c.iter().map(|v| v.as_f64()).sum::<f64>() / chunk as f64;
        let var = c
            .iter()
            .map(|v| {
                let d = v.as_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / chunk as f64;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        inv_std.push(inv);
        xhat.extend(c.iter().map(|v| T::of((v.as_f64() - mean) * inv)));
    }
    (xhat, inv_std)
}

/// Gradient of the standardisation for one chunk given `dxhat`.
fn normalize_backward<T: Element>(dxhat: &[f64], xhat: &[T], inv_std: f64, out: &mut Vec<T>) {
    let n = dxhat.len() as f64;
    let mean_d = dxhat.iter().sum::<f64>() / n;
    let mean_dx = dxhat
        .iter()
        .zip(xhat)
        .map(|(d, x)| d * x.as_f64())
        .sum::<f64>()
        / n;
    out.extend(
        dxhat
            .iter()
            .zip(xhat)
            .map(|(d, x)| T::of(inv_std * (d - mean_d - x.as_f64() * mean_dx))),
    );
}

pub(super) fn backward<T: Element>(
    i: usize,
    gout: &[T],
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
) {
    match &nodes[i].op {
        &Op::Conv2d { x, w, geom } => {
            let c_out = nodes[w].value.shape()[0];
            let plane = geom.out_h * geom.out_w;
            let in_len = geom.channels * geom.in_h * geom.in_w;
            let (need_w, need_x) = (needs(nodes, w), needs(nodes, x));
            let mut gw = vec![T::zero(); c_out * geom.col_rows()];
            let mut gx = vec![T::zero(); if need_x { geom.batch * in_len } else { 0 }];
            let (mut gt, mut gcols) = (Vec::new(), Vec::new());
            for (start, g) in geom.chunks() {
                gt.resize(c_out * g.col_cols(), T::zero());
                swap_outer_into(
                    &gout[start * c_out * plane..][..g.batch * c_out * plane],
                    g.batch,
                    c_out,
                    plane,
                    &mut gt,
                );
                if need_w {
                    let cols = im2col(
                        &nodes[x].value.data()[start * in_len..][..g.batch * in_len],
                        &g,
                    );
                    matmul_into(
                        c_out,
                        g.col_cols(),
                        g.col_rows(),
                        &gt,
                        false,
                        &cols,
                        true,
                        &mut gw,
                        true,
                    );
                }
                if need_x {
                    gcols.resize(g.col_rows() * g.col_cols(), T::zero());
                    let wd = nodes[w].value.data();
                    matmul_into(
                        g.col_rows(),
                        c_out,
                        g.col_cols(),
                        wd,
                        true,
                        &gt,
                        false,
                        &mut gcols,
                        false,
                    );
                    col2im_into(&gcols, &g, &mut gx[start * in_len..][..g.batch * in_len]);
                }
            }
            if need_w {
                accumulate(nodes, grads, w, gw);
            }
            if need_x {
                accumulate(nodes, grads, x, gx);
            }
        }
        &Op::ConvTranspose2d { x, w, geom } => {
            let c_in = nodes[w].value.shape()[0];
            let plane = geom.out_h * geom.out_w;
            let out_len = geom.channels * geom.in_h * geom.in_w;
            let (need_w, need_x) = (needs(nodes, w), needs(nodes, x));
            let mut gw = vec![T::zero(); c_in * geom.col_rows()];
            let mut gx = vec![T::zero(); if need_x { geom.batch * c_in * plane } else { 0 }];
            let (mut gxt, mut xt) = (Vec::new(), Vec::new());
            for (start, g) in geom.chunks() {
                let gcols = im2col(&gout[start * out_len..][..g.batch * out_len], &g);
                if need_x {
                    gxt.resize(c_in * g.col_cols(), T::zero());
                    let wd = nodes[w].value.data();
                    matmul_into(
                        c_in,
                        g.col_rows(),
                        g.col_cols(),
                        wd,
                        false,
                        &gcols,
                        false,
                        &mut gxt,
                        false,
                    );
                    swap_outer_into(
                        &gxt,
                        c_in,
                        g.batch,
                        plane,
                        &mut gx[start * c_in * plane..][..g.batch * c_in * plane],
                    );
                }
                if need_w {
                    xt.resize(c_in * g.col_cols(), T::zero());
                    let xs =
                        &nodes[x].value.data()[start * c_in * plane..][..g.batch * c_in * plane];
                    swap_outer_into(xs, g.batch, c_in, plane, &mut xt);
                    matmul_into(
                        c_in,
                        g.col_cols(),
                        g.col_rows(),
                        &xt,
                        false,
                        &gcols,
                        true,
                        &mut gw,
                        true,
                    );
                }
            }
            if need_w {
                accumulate(nodes, grads, w, gw);
            }
            if need_x {
                accumulate(nodes, grads, x, gx);
            }
        }
        &Op::ChannelBias { x, bias } => {
            if needs(nodes, bias) {
                let tx = &nodes[x].value;
                let c = nodes[bias].value.numel();
                let channel_axis = if tx.rank() == 4 { 1 } else { 0 };
                let plane: usize = tx.shape()[channel_axis + 1..].iter().product();
                let mut gb = vec![0.0f64; c];
                for (k, chunk) in gout.chunks_exact(plane).enumerate() {
                    gb[k % c] += chunk.iter().map(|v| v.as_f64()).sum::<f64>();
                }
                accumulate(nodes, grads, bias, gb.into_iter().map(T::of).collect());
            }
            accumulate(nodes, grads, x, gout.to_vec());
        }
        Op::Pool { x, kind, argmax } => {
            let tx = &nodes[*x].value;
            let mut gx = vec![T::zero(); tx.numel()];
            match kind {
                PoolKind::Max => {
                    for (&g, &src) in gout.iter().zip(argmax) {
                        gx[src as usize] = gx[src as usize] + g;
                    }
                }
                PoolKind::Average => {
                    let (_, _, h, w) =
                        image_dims("pool2d", tx.shape()).expect("checked in forward");
                    let (ho, wo) = (h / 2, w / 2);
                    let quarter = T::of(0.25);
                    for (p, gplane) in gout.chunks_exact(ho * wo).enumerate() {
                        let dst = &mut gx[p * h * w..][..h * w];
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let g = gplane[oy * wo + ox] * quarter;
                                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    dst[(2 * oy + dy) * w + 2 * ox + dx] = g;
                                }
                            }
                        }
                    }
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::GroupNorm {
            x,
            gain,
            bias,
            groups,
            xhat,
            inv_std,
        } => {
            let tx = &nodes[*x].value;
            let (_, c, h, w) = image_dims("group_norm", tx.shape()).expect("checked in forward");
            let plane = h * w;
            let group_len = (c / groups) * plane;
            let tg = nodes[*gain].value.data();
            let mut ggain = vec![0.0f64; c];
            let mut gbias = vec![0.0f64; c];
            let mut gx = Vec::with_capacity(tx.numel());
            let mut dxhat = vec![0.0f64; group_len];
            for (k, (gchunk, xchunk)) in gout
                .chunks_exact(group_len)
                .zip(xhat.chunks_exact(group_len))
                .enumerate()
            {
                let first_channel = (k % groups) * (c / groups);
                for (j, (&g, &xh)) in gchunk.iter().zip(xchunk).enumerate() {
                    let ch = first_channel + j / plane;
                    let g = g.as_f64();
                    ggain[ch] += g * xh.as_f64();
                    gbias[ch] += g;
                    dxhat[j] = g * tg[ch].as_f64();
                }
                normalize_backward(&dxhat, xchunk, inv_std[k], &mut gx);
            }
            accumulate(nodes, grads, *gain, ggain.into_iter().map(T::of).collect());
            accumulate(nodes, grads, *bias, gbias.into_iter().map(T::of).collect());
            accumulate(nodes, grads, *x, gx);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let tg = nodes[*gain].value.data();
            let d = tg.len();
            let mut ggain = vec![0.0f64; d];
            let mut gbias = vec![0.0f64; d];
            let mut gx = Vec::with_capacity(gout.len());
            let mut dxhat = vec![0.0f64; d];
            for (k, (gchunk, xchunk)) in gout.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate()
            {
                for (j, (&g, &xh)) in gchunk.iter().zip(xchunk).enumerate() {
                    let g = g.as_f64();
                    ggain[j] += g * xh.as_f64();
                    gbias[j] += g;
                    dxhat[j] = g * tg[j].as_f64();
                }
                normalize_backward(&dxhat, xchunk, inv_std[k], &mut gx);
            }
            accumulate(nodes, grads, *gain, ggain.into_iter().map(T::of).collect());
            accumulate(nodes, grads, *bias, gbias.into_iter().map(T::of).collect());
            accumulate(nodes, grads, *x, gx);
        }
        _ => unreachable!("operator without a backward rule"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_padding_arithmetic() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[1, 3, 3]));
        let k = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = g.conv2d(x, k).unwrap();
        let d = g.value(y).data();
        assert_eq!(d[4], 9.0);
        assert_eq!([d[0], d[2], d[6], d[8]], [4.0; 4]);
        assert_eq!(d[1], 6.0);
    }

    #[test]
    fn zero_kernels_give_zero_output() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_fn(&[2, 5, 4], |i| i as f32));
        let k = g.constant(Tensor::zeros(&[3, 2, 3, 3]));
        let y = g.conv2d(x, k).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let kt = g.constant(Tensor::zeros(&[2, 3, 3, 3]));
        let z = g.conv2d_transposed(x, kt, 2).unwrap();
        assert_eq!(g.shape(z), &[3, 10, 8]);
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_channel_mismatch_is_error() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[2, 4, 4]));
        let k = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(g.conv2d(x, k), Err(TensorError::Shape { .. })));
        assert!(matches!(
            g.conv2d_transposed(x, k, 2),
            Err(TensorError::Shape { .. })
        ));
    }

    #[test]
    fn pool_average_values_and_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.pool2d(x, PoolKind::Average).unwrap();
        assert_eq!(g.value(y).data(), &[2.5]);
        let m = g.pool2d(x, PoolKind::Max).unwrap();
        assert_eq!(g.value(m).data(), &[4.0]);
        let c = g.constant(Tensor::full(&[2, 4, 6], 3.5));
        let p = g.pool2d(c, PoolKind::Average).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 3.5));
        let odd = g.constant(Tensor::zeros(&[1, 3, 2]));
        assert!(g.pool2d(odd, PoolKind::Average).is_err());
    }

    #[test]
    fn pool_average_gradient_is_quarter() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn(&[1, 4, 4], |i| i as f64));
        let y = g.pool2d(x, PoolKind::Average).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn group_norm_rejects_indivisible_channels() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[3, 2, 2]));
        let ga = g.constant(Tensor::ones(&[3]));
        let b = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(
            g.group_norm(x, 2, ga, b),
            Err(TensorError::Config { .. })
        ));
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[2, 5], 3.0));
        let ga = g.constant(Tensor::ones(&[5]));
        let b = g.constant(Tensor::zeros(&[5]));
        let y = g.layer_norm(x, ga, b).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pool_kind_parses() {
        assert_eq!("avg".parse::<PoolKind>().unwrap(), PoolKind::Average);
        assert_eq!("max".parse::<PoolKind>().unwrap(), PoolKind::Max);
        assert!("min".parse::<PoolKind>().is_err());
        assert_eq!(PoolKind::Max.to_string(), "max");
    }
}
