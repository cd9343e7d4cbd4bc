use rand::Rng;

use super::conv::{self, ConvGeom};
use super::{Float, Tensor};
use crate::error::{contract_err, dim_err, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, geom: ConvGeom },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Log(Var),
    Exp(Var),
    Neg(Var),
    Sum(Var),
    Mean(Var),
    MaxPool2d { input: Var, argmax: Vec<usize> },
    Upsample2x(Var),
    Concat(Var, Var),
    Dropout { input: Var, mask: Vec<T> },
    Clamp { input: Var, lo: T, hi: T },
    SoftmaxChannel(Var),
    ChannelSum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Append-only tape. Every op's inputs are recorded before the op itself, so
/// node order is a topological order and backward is a single reverse sweep.
pub struct Graph<T: Float = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn nchw(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => dim_err(format!("{what} expects a 4-d NCHW tensor, got {shape:?}")),
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Op::Leaf, false)
    }

    /// Records a leaf whose gradient is collected by [`Graph::backward`].
    pub fn variable(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = true;
        t.grad = None;
        self.push(t, Op::Leaf, true)
    }

    /// Copy of `v`'s value that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Records a leaf honoring the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        if t.requires_grad {
            self.variable(t.clone())
        } else {
            self.constant(t.clone())
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        let needs = self.needs(x);
        self.push(value, op, needs)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, padding: usize, stride: usize) -> Result<Var> {
        let (n, cin, h, w) = nchw(self.shape(input), "conv2d input")?;
        let (cout, kcin, kh, kw) = nchw(self.shape(kernel), "conv2d kernel")?;
        if kcin != cin {
            return dim_err(format!("conv2d: kernel expects {kcin} input channels, input has {cin}"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return dim_err(format!("conv2d: kernel {kh}x{kw} must have odd sides"));
        }
        if stride == 0 {
            return dim_err("conv2d: stride must be positive");
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return dim_err(format!("conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return dim_err(format!("conv2d: bias {:?} for {cout} output channels", self.shape(b)));
            }
        }
        let geom = ConvGeom { n, cin, h, w, cout, kh, kw, padding, stride };
        let out = conv::forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(vec![n, cout, geom.out_h(), geom.out_w()], out)?;
        let needs = self.needs(input) || self.needs(kernel) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::Conv2d { input, kernel, bias, geom }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        self.unary(x, Op::Scale(x, factor), |v| v * factor)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), T::ln)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), T::exp)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, Op::Clamp { input: x, lo, hi }, |v| v.max(lo).min(hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |acc, &v| acc + v);
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().fold(T::zero(), |acc, &v| acc + v) / T::of(t.numel() as f64);
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), needs)
    }

    /// Sums over the channel axis: `[N, C, H, W] -> [N, 1, H, W]`.
    pub fn channel_sum(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(x), "channel_sum")?;
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * hw];
        for b in 0..n {
            for ch in 0..c {
                let plane = &src[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                for (o, &v) in out[b * hw..(b + 1) * hw].iter_mut().zip(plane) {
                    *o += v;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![n, 1, h, w], out)?, Op::ChannelSum(x), needs))
    }

    /// 2x2 max pooling with stride 2. Ties route to the first index in
    /// row-major window order.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(x), "max_pool2d")?;
        if h % 2 != 0 || w % 2 != 0 {
            return dim_err(format!("max_pool2d needs even spatial dims, got {h}x{w}"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![n, c, oh, ow], out)?, Op::MaxPool2d { input: x, argmax }, needs))
    }

    /// Nearest-neighbour x2 upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(x), "upsample2x")?;
        let src = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    d[y * ow + xx] = s[(y / 2) * w + xx / 2];
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![n, c, oh, ow], out)?, Op::Upsample2x(x), needs))
    }

    /// Concatenates along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = nchw(self.shape(a), "concat")?;
        let (nb, cb, hb, wb) = nchw(self.shape(b), "concat")?;
        if (n, h, w) != (nb, hb, wb) {
            return dim_err(format!("concat: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let hw = h * w;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            out.extend_from_slice(&da[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&db[i * cb * hw..(i + 1) * cb * hw]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![n, ca + cb, h, w], out)?, Op::Concat(a, b), needs))
    }

    /// Inverted dropout. The mask is drawn once per call from `rng`; with
    /// `train == false` or `rate == 0` this is the identity and draws nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return contract_err(format!("dropout rate {rate} outside [0, 1)"));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Dropout { input: x, mask }, needs))
    }

    /// Per-pixel softmax over the channel axis, max-subtracted.
    pub fn softmax_channel(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(x), "softmax_channel")?;
        if c < 2 {
            return dim_err(format!("softmax_channel needs at least 2 channels, got {c}"));
        }
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..n {
            let base = b * c * hw;
            for j in 0..hw {
                let mut m = T::neg_infinity();
                for ch in 0..c {
                    m = m.max(src[base + ch * hw + j]);
                }
                let mut z = T::zero();
                for ch in 0..c {
                    let e = (src[base + ch * hw + j] - m).exp();
                    out[base + ch * hw + j] = e;
                    z += e;
                }
                for ch in 0..c {
                    out[base + ch * hw + j] = out[base + ch * hw + j] / z;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![n, c, h, w], out)?, Op::SoftmaxChannel(x), needs))
    }

    /// Populates gradients of `loss` with respect to every leaf that needs one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return contract_err("backward on an empty tape");
        }
        if !self.value(loss).is_scalar() {
            return contract_err(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let send = |v: Var, contrib: Vec<T>, grads: &mut [Option<Vec<T>>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let zip = |v: Var, f: &dyn Fn(T, T, T) -> T| -> Vec<T> {
            let x = self.value(v).data();
            x.iter().zip(out).zip(g).map(|((&x, &y), &g)| f(x, y, g)).collect()
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, geom } => {
                let want_in = self.needs(*input);
                let want_k = self.needs(*kernel);
                let want_b = bias.is_some_and(|b| self.needs(b));
                let r = conv::backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g,
                    want_in,
                    want_k,
                    want_b,
                );
                if let Some(d) = r.input {
                    send(*input, d, grads);
                }
                if let Some(d) = r.kernel {
                    send(*kernel, d, grads);
                }
                if let (Some(b), Some(d)) = (bias, r.bias) {
                    send(*b, d, grads);
                }
            }
            Op::Relu(x) => {
                let d = zip(*x, &|x, _, g| if x > T::zero() { g } else { T::zero() });
                send(*x, d, grads);
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec(), grads);
                send(*b, g.to_vec(), grads);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = self.value(*b).data();
                    send(*a, bv.iter().zip(g).map(|(&y, &g)| y * g).collect(), grads);
                }
                if self.needs(*b) {
                    let av = self.value(*a).data();
                    send(*b, av.iter().zip(g).map(|(&x, &g)| x * g).collect(), grads);
                }
            }
            Op::Scale(x, f) => send(*x, g.iter().map(|&v| v * *f).collect(), grads),
            Op::Log(x) => {
                let d = zip(*x, &|x, _, g| g / x);
                send(*x, d, grads);
            }
            Op::Exp(x) => {
                let d = zip(*x, &|_, y, g| g * y);
                send(*x, d, grads);
            }
            Op::Neg(x) => send(*x, g.iter().map(|&v| -v).collect(), grads),
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).numel()], grads),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                send(*x, vec![g[0] / T::of(n as f64); n], grads);
            }
            Op::ChannelSum(x) => {
                let shape = self.shape(*x);
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut d = vec![T::zero(); n * c * hw];
                for b in 0..n {
                    for ch in 0..c {
                        d[(b * c + ch) * hw..(b * c + ch + 1) * hw].copy_from_slice(&g[b * hw..(b + 1) * hw]);
                    }
                }
                send(*x, d, grads);
            }
            Op::MaxPool2d { input, argmax } => {
                let mut d = vec![T::zero(); self.value(*input).numel()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    d[idx] += gv;
                }
                send(*input, d, grads);
            }
            Op::Upsample2x(x) => {
                let shape = self.shape(*x);
                let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
                let ow = 2 * w;
                let mut d = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut d[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..ow {
                            dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
                        }
                    }
                }
                send(*x, d, grads);
            }
            Op::Concat(a, b) => {
                let sa = self.shape(*a);
                let (n, ca, hw) = (sa[0], sa[1], sa[2] * sa[3]);
                let cb = self.shape(*b)[1];
                let mut da = Vec::with_capacity(n * ca * hw);
                let mut db = Vec::with_capacity(n * cb * hw);
                for i in 0..n {
                    let base = i * (ca + cb) * hw;
                    da.extend_from_slice(&g[base..base + ca * hw]);
                    db.extend_from_slice(&g[base + ca * hw..base + (ca + cb) * hw]);
                }
                send(*a, da, grads);
                send(*b, db, grads);
            }
            Op::Dropout { input, mask } => {
                send(*input, g.iter().zip(mask).map(|(&g, &m)| g * m).collect(), grads);
            }
            Op::Clamp { input, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let d = zip(*input, &|x, _, g| if x >= lo && x <= hi { g } else { T::zero() });
                send(*input, d, grads);
            }
            Op::SoftmaxChannel(x) => {
                let shape = self.shape(*x);
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut d = vec![T::zero(); out.len()];
                for b in 0..n {
                    let base = b * c * hw;
                    for j in 0..hw {
                        let mut dot = T::zero();
                        for ch in 0..c {
                            let k = base + ch * hw + j;
                            dot += g[k] * out[k];
                        }
                        for ch in 0..c {
                            let k = base + ch * hw + j;
                            d[k] = out[k] * (g[k] - dot);
                        }
                    }
                }
                send(*x, d, grads);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_counts_overlaps() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let k = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, k, None, 1, 1).unwrap();
        let out = g.value(y).data();
        assert_eq!(out[4], 9.0);
        assert_eq!(out[0], 4.0);
        assert_eq!(out[1], 6.0);
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..20).map(|i| i as f64 * 0.37 - 2.0).collect();
        let x = g.constant(t(&[1, 1, 4, 5], &data));
        let mut kd = vec![0.0; 9];
        kd[4] = 1.0;
        let k = g.constant(t(&[1, 1, 3, 3], &kd));
        let y = g.conv2d(x, k, None, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_even_kernels() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let k = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(g.conv2d(x, k, None, 1, 1).is_err());
        let k2 = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(g.conv2d(x, k2, None, 0, 1).is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let p = g.variable(Tensor::full(&[2, 3], 0.7));
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient_is_twice_value() {
        let mut g = Graph::<f64>::new();
        let p = g.variable(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = g.mul(p, p).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn relu_values_and_mask() {
        let mut g = Graph::<f64>::new();
        let p = g.variable(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(p);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(r);
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn upsample_repeats_blocks() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.upsample2x(x).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 4, 4]);
        #[rustfmt::skip]
        let expected = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(g.value(y).data(), &expected);
    }

    #[test]
    fn max_pool_ties_route_to_first_index() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = g.max_pool2d(x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
        let odd = g.constant(Tensor::zeros(&[1, 1, 3, 2]));
        assert!(g.max_pool2d(odd).is_err());
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[1, 4, 2, 2]));
        let p = g.softmax_channel(z).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 0.25));
        let big = g.constant(t(&[1, 2, 1, 1], &[1000.0, 0.0]));
        let q = g.softmax_channel(big).unwrap();
        assert_eq!(g.value(q).data(), &[1.0, 0.0]);
        let one = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(g.softmax_channel(one).is_err());
    }

    #[test]
    fn dropout_is_identity_in_eval_and_masks_in_train() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::full(&[1, 1, 8, 8], 1.0));
        assert_eq!(g.dropout(x, 0.5, false, &mut rng).unwrap(), x);
        let y = g.dropout(x, 0.5, true, &mut rng).unwrap();
        let vals = g.value(y).data().to_vec();
        assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(vals.contains(&0.0));
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &vals[..]);
    }

    #[test]
    fn concat_stacks_channels() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[1, 1, 1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[1, 2, 1, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat(a, b).unwrap();
        assert_eq!(g.shape(c), &[1, 3, 1, 2]);
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let p = g.variable(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(p), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn add_rejects_shape_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2]));
        let b = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.add(a, b), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::full(&[2], 3.0));
        let p = g.variable(Tensor::full(&[2], 2.0));
        let m = g.mul(c, p).unwrap();
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(p).unwrap(), &[3.0, 3.0]);
    }
}
