//! Single-sample reverse-mode tape over `[channels, height, width]` feature
//! maps. Parameters live in one flat slice; ops refer to them by offset.

use alloc::vec;
use alloc::vec::Vec;

pub(crate) const GN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn len(self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane(self) -> usize {
        self.h * self.w
    }
}

/// Convolution parameters: weight `[cout, cin, k, k]` at `w`, bias `[cout]`
/// at `b`, zero padding `k / 2`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvRef {
    pub w: usize,
    pub b: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Conv { x: usize, p: ConvRef },
    Add(usize, usize),
    AddChannel { x: usize, v: usize },
    Modulate { x: usize, gamma: usize, beta: usize },
    GroupNorm { x: usize, groups: usize, rstd: Vec<f64> },
    Silu(usize),
    Relu(usize),
    AvgPool2(usize),
    Upsample2(usize),
    Concat(Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Shape,
    value: Vec<f64>,
}

pub(crate) struct Tape<'p> {
    params: &'p [f64],
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

/// Output extent and the valid output range `[lo, hi)` along one axis for
/// kernel offset `kk` (input index `o * stride + kk - pad`).
fn conv_out(n: usize, k: usize, stride: usize) -> usize {
    let pad = k / 2;
    (n + 2 * pad - k) / stride + 1
}

fn valid_range(n_in: usize, n_out: usize, kk: usize, pad: usize, stride: usize) -> (usize, usize) {
    // o * stride + kk >= pad  and  o * stride + kk - pad < n_in
    let lo = if kk >= pad { 0 } else { (pad - kk).div_ceil(stride) };
    let hi = if n_in + pad > kk { ((n_in + pad - kk - 1) / stride + 1).min(n_out) } else { 0 };
    (lo, hi.max(lo))
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [f64]) -> Self {
        Self { params, nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, shape: Shape, value: Vec<f64>) -> usize {
        debug_assert_eq!(shape.len(), value.len());
        self.nodes.push(Node { op, shape, value });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: usize) -> &[f64] {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: usize) -> Shape {
        self.nodes[id].shape
    }

    pub fn input(&mut self, shape: Shape, value: Vec<f64>) -> usize {
        self.push(Op::Input, shape, value)
    }

    pub fn conv(&mut self, x: usize, p: ConvRef) -> usize {
        let s = self.nodes[x].shape;
        let (oh, ow) = (conv_out(s.h, p.k, p.stride), conv_out(s.w, p.k, p.stride));
        let out_shape = Shape::new(p.cout, oh, ow);
        let n = oh * ow;
        let kdim = s.c * p.k * p.k;
        let cols = im2col(&self.nodes[x].value, s, p.k, p.stride, oh, ow);
        let cols: &[f64] = cols.as_deref().unwrap_or(&self.nodes[x].value);
        let mut out = vec![0.0; out_shape.len()];
        for co in 0..p.cout {
            let row = &mut out[co * n..(co + 1) * n];
            row.fill(self.params[p.b + co]);
            let wrow = &self.params[p.w + co * kdim..p.w + (co + 1) * kdim];
            for (j, &wv) in wrow.iter().enumerate() {
                if wv != 0.0 {
                    axpy(row, wv, &cols[j * n..(j + 1) * n]);
                }
            }
        }
        self.push(Op::Conv { x, p }, out_shape, out)
    }

    pub fn add(&mut self, a: usize, b: usize) -> usize {
        let shape = self.nodes[a].shape;
        assert_eq!(shape, self.nodes[b].shape, "add shape mismatch");
        let v = self.nodes[a].value.iter().zip(&self.nodes[b].value).map(|(x, y)| x + y).collect();
        self.push(Op::Add(a, b), shape, v)
    }

    /// Adds a per-channel vector (`[c, 1, 1]` node) to every pixel.
    pub fn add_channel(&mut self, x: usize, v: usize) -> usize {
        let s = self.nodes[x].shape;
        assert_eq!(self.nodes[v].shape.len(), s.c, "add_channel width mismatch");
        let mut out = self.nodes[x].value.clone();
        for c in 0..s.c {
            let b = self.nodes[v].value[c];
            for o in &mut out[c * s.plane()..(c + 1) * s.plane()] {
                *o += b;
            }
        }
        self.push(Op::AddChannel { x, v }, s, out)
    }

    /// `x * (1 + gamma) + beta`, elementwise.
    pub fn modulate(&mut self, x: usize, gamma: usize, beta: usize) -> usize {
        let s = self.nodes[x].shape;
        assert!(self.nodes[gamma].shape == s && self.nodes[beta].shape == s, "modulation shape mismatch");
        let (xv, g, b) = (&self.nodes[x].value, &self.nodes[gamma].value, &self.nodes[beta].value);
        let out = (0..s.len()).map(|i| xv[i] * (1.0 + g[i]) + b[i]).collect();
        self.push(Op::Modulate { x, gamma, beta }, s, out)
    }

    /// Group normalization without affine parameters (biased variance).
    pub fn group_norm(&mut self, x: usize, groups: usize) -> usize {
        let s = self.nodes[x].shape;
        assert!(groups > 0 && s.c % groups == 0, "channels not divisible by groups");
        let per = s.c / groups * s.plane();
        let xv = &self.nodes[x].value;
        let mut out = vec![0.0; s.len()];
        let mut rstd = Vec::with_capacity(groups);
        for g in 0..groups {
            let seg = &xv[g * per..(g + 1) * per];
            let mean = seg.iter().sum::<f64>() / per as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            let r = 1.0 / libm::sqrt(var + GN_EPS);
            for (o, v) in out[g * per..(g + 1) * per].iter_mut().zip(seg) {
                *o = (v - mean) * r;
            }
            rstd.push(r);
        }
        self.push(Op::GroupNorm { x, groups, rstd }, s, out)
    }

    pub fn silu(&mut self, x: usize) -> usize {
        let s = self.nodes[x].shape;
        let out = self.nodes[x].value.iter().map(|&v| v * sigmoid(v)).collect();
        self.push(Op::Silu(x), s, out)
    }

    pub fn relu(&mut self, x: usize) -> usize {
        let s = self.nodes[x].shape;
        let out = self.nodes[x].value.iter().map(|&v| v.max(0.0)).collect();
        self.push(Op::Relu(x), s, out)
    }

    pub fn avg_pool2(&mut self, x: usize) -> usize {
        let s = self.nodes[x].shape;
        assert!(s.h % 2 == 0 && s.w % 2 == 0, "avg_pool2 needs even extent");
        let o = Shape::new(s.c, s.h / 2, s.w / 2);
        let xv = &self.nodes[x].value;
        let mut out = vec![0.0; o.len()];
        for c in 0..s.c {
            for y in 0..o.h {
                for xx in 0..o.w {
                    let base = c * s.plane() + 2 * y * s.w + 2 * xx;
                    out[c * o.plane() + y * o.w + xx] =
                        0.25 * (xv[base] + xv[base + 1] + xv[base + s.w] + xv[base + s.w + 1]);
                }
            }
        }
        self.push(Op::AvgPool2(x), o, out)
    }

    pub fn upsample2(&mut self, x: usize) -> usize {
        let s = self.nodes[x].shape;
        let o = Shape::new(s.c, s.h * 2, s.w * 2);
        let xv = &self.nodes[x].value;
        let mut out = vec![0.0; o.len()];
        for c in 0..s.c {
            for y in 0..o.h {
                for xx in 0..o.w {
                    out[c * o.plane() + y * o.w + xx] = xv[c * s.plane() + (y / 2) * s.w + xx / 2];
                }
            }
        }
        self.push(Op::Upsample2(x), o, out)
    }

    pub fn concat(&mut self, parts: &[usize]) -> usize {
        let first = self.nodes[parts[0]].shape;
        let mut c = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.nodes[p].shape;
            assert!(s.h == first.h && s.w == first.w, "concat extent mismatch");
            c += s.c;
            out.extend_from_slice(&self.nodes[p].value);
        }
        self.push(Op::Concat(parts.to_vec()), Shape::new(c, first.h, first.w), out)
    }

    /// Back-propagates `seed` (d loss / d output) from node `out`,
    /// accumulating parameter gradients into `grad`.
    pub fn backward(&self, out: usize, seed: Vec<f64>, grad: &mut [f64]) {
        assert_eq!(grad.len(), self.params.len());
        let mut g: Vec<Option<Vec<f64>>> = vec![None; out + 1];
        g[out] = Some(seed);
        for id in (0..=out).rev() {
            let Some(gy) = g[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Conv { x, p } => {
                    let s = self.nodes[*x].shape;
                    let (oh, ow) = (node.shape.h, node.shape.w);
                    let n = oh * ow;
                    let kdim = s.c * p.k * p.k;
                    let owned = im2col(&self.nodes[*x].value, s, p.k, p.stride, oh, ow);
                    let cols: &[f64] = owned.as_deref().unwrap_or(&self.nodes[*x].value);
                    let mut gcols = vec![0.0; kdim * n];
                    for co in 0..p.cout {
                        let grow = &gy[co * n..(co + 1) * n];
                        grad[p.b + co] += grow.iter().sum::<f64>();
                        for j in 0..kdim {
                            let widx = p.w + co * kdim + j;
                            grad[widx] += dot(grow, &cols[j * n..(j + 1) * n]);
                            axpy(&mut gcols[j * n..(j + 1) * n], self.params[widx], grow);
                        }
                    }
                    let gx = if owned.is_some() { col2im(&gcols, s, p.k, p.stride, oh, ow) } else { gcols };
                    accumulate(&mut g, *x, gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut g, *a, gy.clone());
                    accumulate(&mut g, *b, gy);
                }
                Op::AddChannel { x, v } => {
                    let s = node.shape;
                    let gv = (0..s.c).map(|c| gy[c * s.plane()..(c + 1) * s.plane()].iter().sum()).collect();
                    accumulate(&mut g, *v, gv);
                    accumulate(&mut g, *x, gy);
                }
                Op::Modulate { x, gamma, beta } => {
                    let xv = &self.nodes[*x].value;
                    let gm = &self.nodes[*gamma].value;
                    let gx = gy.iter().zip(gm).map(|(d, gg)| d * (1.0 + gg)).collect();
                    let ggam = gy.iter().zip(xv).map(|(d, v)| d * v).collect();
                    accumulate(&mut g, *x, gx);
                    accumulate(&mut g, *gamma, ggam);
                    accumulate(&mut g, *beta, gy);
                }
                Op::GroupNorm { x, groups, rstd } => {
                    let s = node.shape;
                    let per = s.c / groups * s.plane();
                    let xhat = &node.value;
                    let mut gx = vec![0.0; s.len()];
                    for gi in 0..*groups {
                        let r = gi * per..(gi + 1) * per;
                        let dy = &gy[r.clone()];
                        let xh = &xhat[r.clone()];
                        let mdy = dy.iter().sum::<f64>() / per as f64;
                        let mdyx = dy.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / per as f64;
                        for ((o, d), h) in gx[r].iter_mut().zip(dy).zip(xh) {
                            *o = rstd[gi] * (d - mdy - h * mdyx);
                        }
                    }
                    accumulate(&mut g, *x, gx);
                }
                Op::Silu(x) => {
                    let xv = &self.nodes[*x].value;
                    let gx = gy
                        .iter()
                        .zip(xv)
                        .map(|(d, &v)| {
                            let sg = sigmoid(v);
                            d * sg * (1.0 + v * (1.0 - sg))
                        })
                        .collect();
                    accumulate(&mut g, *x, gx);
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[*x].value;
                    let gx = gy.iter().zip(xv).map(|(d, &v)| if v > 0.0 { *d } else { 0.0 }).collect();
                    accumulate(&mut g, *x, gx);
                }
                Op::AvgPool2(x) => {
                    let s = self.nodes[*x].shape;
                    let o = node.shape;
                    let mut gx = vec![0.0; s.len()];
                    for c in 0..s.c {
                        for y in 0..o.h {
                            for xx in 0..o.w {
                                let d = 0.25 * gy[c * o.plane() + y * o.w + xx];
                                let base = c * s.plane() + 2 * y * s.w + 2 * xx;
                                gx[base] += d;
                                gx[base + 1] += d;
                                gx[base + s.w] += d;
                                gx[base + s.w + 1] += d;
                            }
                        }
                    }
                    accumulate(&mut g, *x, gx);
                }
                Op::Upsample2(x) => {
                    let s = self.nodes[*x].shape;
                    let o = node.shape;
                    let mut gx = vec![0.0; s.len()];
                    for c in 0..s.c {
                        for y in 0..o.h {
                            for xx in 0..o.w {
                                gx[c * s.plane() + (y / 2) * s.w + xx / 2] += gy[c * o.plane() + y * o.w + xx];
                            }
                        }
                    }
                    accumulate(&mut g, *x, gx);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.nodes[p].shape.len();
                        accumulate(&mut g, p, gy[off..off + n].to_vec());
                        off += n;
                    }
                }
            }
        }
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (d, v) in y.iter_mut().zip(x) {
        *d += a * v;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four lanes so the reduction can vectorize
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Unfolds `[c, h, w]` into `[c * k * k, oh * ow]` patch columns. `None`
/// when the input already is its own column matrix (1x1, stride 1).
fn im2col(x: &[f64], s: Shape, k: usize, stride: usize, oh: usize, ow: usize) -> Option<Vec<f64>> {
    if k == 1 && stride == 1 {
        return None;
    }
    let pad = k / 2;
    let n = oh * ow;
    let mut cols = vec![0.0; s.c * k * k * n];
    for c in 0..s.c {
        let src = &x[c * s.plane()..(c + 1) * s.plane()];
        for ky in 0..k {
            let (y0, y1) = valid_range(s.h, oh, ky, pad, stride);
            for kx in 0..k {
                let (x0, x1) = valid_range(s.w, ow, kx, pad, stride);
                let dst = &mut cols[((c * k + ky) * k + kx) * n..][..n];
                for oy in y0..y1 {
                    let iy = oy * stride + ky - pad;
                    let srow = &src[iy * s.w..(iy + 1) * s.w];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    for ox in x0..x1 {
                        drow[ox] = srow[ox * stride + kx - pad];
                    }
                }
            }
        }
    }
    Some(cols)
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f64], s: Shape, k: usize, stride: usize, oh: usize, ow: usize) -> Vec<f64> {
    let pad = k / 2;
    let n = oh * ow;
    let mut x = vec![0.0; s.len()];
    for c in 0..s.c {
        let dst = &mut x[c * s.plane()..(c + 1) * s.plane()];
        for ky in 0..k {
            let (y0, y1) = valid_range(s.h, oh, ky, pad, stride);
            for kx in 0..k {
                let (x0, x1) = valid_range(s.w, ow, kx, pad, stride);
                let src = &cols[((c * k + ky) * k + kx) * n..][..n];
                for oy in y0..y1 {
                    let iy = oy * stride + ky - pad;
                    for ox in x0..x1 {
                        dst[iy * s.w + ox * stride + kx - pad] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
    x
}

fn accumulate(g: &mut [Option<Vec<f64>>], id: usize, d: Vec<f64>) {
    match &mut g[id] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&d) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_ranges() {
        // 3x3, pad 1, stride 1 over 4 pixels: kk=0 skips output 0, kk=2 skips output 3
        assert_eq!(valid_range(4, 4, 0, 1, 1), (1, 4));
        assert_eq!(valid_range(4, 4, 1, 1, 1), (0, 4));
        assert_eq!(valid_range(4, 4, 2, 1, 1), (0, 3));
        // stride 2: outputs sample inputs 0 and 2 at the kernel centre
        assert_eq!(conv_out(4, 3, 2), 2);
        assert_eq!(valid_range(4, 2, 0, 1, 2), (1, 2));
        assert_eq!(valid_range(4, 2, 2, 1, 2), (0, 2));
        assert_eq!(conv_out(5, 1, 1), 5);
    }

    #[test]
    fn conv_identity_kernel() {
        // 3x3 kernel with a single centre tap is the identity
        let mut params = vec![0.0; 10];
        params[4] = 1.0;
        params[9] = 0.5;
        let mut t = Tape::new(&params);
        let x = t.input(Shape::new(1, 2, 3), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = t.conv(x, ConvRef { w: 0, b: 9, cout: 1, k: 3, stride: 1 });
        assert_eq!(t.value(y), &[1.5, 2.5, 3.5, 4.5, 5.5, 6.5]);
    }

    #[test]
    fn pooling_roundtrip() {
        let params = [];
        let mut t = Tape::new(&params);
        let x = t.input(Shape::new(1, 2, 2), vec![1.0, 2.0, 3.0, 6.0]);
        let p = t.avg_pool2(x);
        assert_eq!(t.value(p), &[3.0]);
        let u = t.upsample2(p);
        assert_eq!(t.value(u), &[3.0; 4]);
    }
}
