//! Tape-based reverse-mode differentiation over the small set of operations
//! the super-resolution network needs.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Parameters
//! enter the tape by id from a [`ParamStore`]; after [`Tape::backward`] their
//! gradients are accumulated back into the store.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, LerpAxis, MapPlan};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T: Element> {
    Leaf,
    Param(ParamId),
    Conv {
        inputs: Vec<Var>,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        relu: bool,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        rows: usize,
        relu: bool,
    },
    Relu(Var),
    Add(Var, Var),
    AddChannelConst(Var),
    Scale(Var, T),
    Sum(Var),
    L1 {
        pred: Var,
        target: Var,
    },
    MetaMap {
        features: Var,
        filters: Var,
        plan: Arc<MapPlan>,
        rows: Vec<T>,
        out_c: usize,
    },
    Bilinear {
        input: Var,
        ys: LerpAxis,
        xs: LerpAxis,
    },
    FilterToKernel {
        input: Var,
        in_c: usize,
        out_c: usize,
        k: usize,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    track_params: bool,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Tape::gradients`].
pub struct Gradients<T: Element> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Element> Gradients<T> {
    /// Gradient with respect to a leaf, parameter or the loss itself.
    /// Intermediate gradients are released during the sweep.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradients of every parameter reached from the loss.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params
            .iter()
            .filter_map(|&(id, node)| self.grads[node].as_deref().map(|g| (id, g)))
    }

    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (id, g) in self.params() {
            store.get_mut(id).accumulate_grad(g)?;
        }
        Ok(())
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn add_into<T: Element>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(g.to_vec()),
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            track_params: true,
            param_vars: HashMap::new(),
        }
    }

    /// A tape that treats parameters as constants; used for inference.
    pub fn inference() -> Self {
        Tape {
            track_params: false,
            ..Self::new()
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert!(value.numel() > 0);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor; it is differentiated iff `requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs = t.requires_grad;
        let mut t = t;
        t.grad = None;
        self.push(t, Op::Leaf, needs)
    }

    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let mut value = store.get(id).clone();
        value.grad = None;
        let v = self.push(value, Op::Param(id), self.track_params);
        self.param_vars.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, padding: usize) -> Result<Var> {
        self.conv2d_fused(&[input], kernel, None, padding, false)
    }

    /// Convolution over the channel-concatenation of `inputs`, with optional
    /// per-channel bias and trailing ReLU.
    pub fn conv2d_fused(
        &mut self,
        inputs: &[Var],
        kernel: Var,
        bias: Option<Var>,
        padding: usize,
        relu: bool,
    ) -> Result<Var> {
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 4 || ks[2] != ks[3] || ks[2] % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel must be [Co,Ci,k,k] with odd k, got {ks:?}")));
        }
        let (co, ci, k) = (ks[0], ks[1], ks[2]);
        let first = *inputs.first().ok_or_else(|| Error::shape("conv2d", "no inputs"))?;
        let s0 = self.shape(first).to_vec();
        if s0.len() != 3 {
            return Err(Error::shape("conv2d", format!("input must be [C,H,W], got {s0:?}")));
        }
        let (h, w) = (s0[1], s0[2]);
        let mut total_c = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != 3 || s[1] != h || s[2] != w {
                return Err(Error::shape("conv2d", format!("input {s:?} does not match spatial size {h}x{w}")));
            }
            total_c += s[0];
        }
        if total_c != ci {
            return Err(Error::shape(
                "conv2d",
                format!("input has {total_c} channels but kernel expects C_in={ci}"),
            ));
        }
        if kernels::conv_out_len(h, k, padding).unwrap_or(0) == 0
            || kernels::conv_out_len(w, k, padding).unwrap_or(0) == 0
        {
            return Err(Error::shape("conv2d", format!("{h}x{w} input too small for k={k}, padding={padding}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [co] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {co} output channels", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            in_channels: ci,
            out_channels: co,
            h,
            w,
            k,
            padding,
        };
        let srcs: Vec<(&[T], usize)> = inputs
            .iter()
            .map(|&v| (self.value(v).data(), self.shape(v)[0]))
            .collect();
        let mut out = kernels::conv_forward(&srcs, self.value(kernel).data(), bias.map(|b| self.value(b).data()), &geom);
        if relu {
            out.iter_mut().for_each(|v| *v = v.max(T::zero()));
        }
        let needs = inputs.iter().any(|&v| self.needs(v)) || self.needs(kernel) || bias.map_or(false, |b| self.needs(b));
        let value = Tensor::new(&[co, geom.out_h(), geom.out_w()], out)?;
        Ok(self.push(
            value,
            Op::Conv {
                inputs: inputs.to_vec(),
                kernel,
                bias,
                geom,
                relu,
            },
            needs,
        ))
    }

    /// `y = x W^T + b` for `x` of shape `[n_in]` or `[N, n_in]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>, relu: bool) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if ws.len() != 2 {
            return Err(Error::shape("fully_connected", format!("weight must be [n_out,n_in], got {ws:?}")));
        }
        let (n_out, n_in) = (ws[0], ws[1]);
        let (rows, cols, out_shape) = match xs.as_slice() {
            [n] => (1, *n, vec![n_out]),
            [r, n] => (*r, *n, vec![*r, n_out]),
            _ => return Err(Error::shape("fully_connected", format!("input must be rank 1 or 2, got {xs:?}"))),
        };
        if cols != n_in {
            return Err(Error::shape(
                "fully_connected",
                format!("input width {cols} but weight expects {n_in}"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [n_out] {
                return Err(Error::shape("fully_connected", format!("bias {:?} for {n_out} outputs", self.shape(b))));
            }
        }
        let mut out = vec![T::zero(); rows * n_out];
        let beta = if let Some(b) = bias {
            let bv = self.value(b).data();
            out.chunks_mut(n_out).for_each(|r| r.copy_from_slice(bv));
            T::one()
        } else {
            T::zero()
        };
        gemm(rows, n_in, n_out, T::one(), self.value(input).data(), false, self.value(weight).data(), true, beta, &mut out);
        if relu {
            out.iter_mut().for_each(|v| *v = v.max(T::zero()));
        }
        let needs = self.needs(input) || self.needs(weight) || bias.map_or(false, |b| self.needs(b));
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            value,
            Op::Linear {
                input,
                weight,
                bias,
                rows,
                relu,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|v| v.max(T::zero())).collect();
        let value = Tensor::new(x.shape(), data).expect("same shape");
        let needs = self.needs(input);
        self.push(value, Op::Relu(input), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    /// Adds a fixed per-channel constant to a `[C,H,W]` tensor.
    pub fn add_channel_const(&mut self, input: Var, offsets: &[T]) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 3 || s[0] != offsets.len() {
            return Err(Error::shape("add_channel_const", format!("{s:?} with {} offsets", offsets.len())));
        }
        let plane = s[1] * s[2];
        let mut data = self.value(input).data().to_vec();
        for (chunk, &o) in data.chunks_mut(plane).zip(offsets) {
            chunk.iter_mut().for_each(|v| *v = *v + o);
        }
        let needs = self.needs(input);
        Ok(self.push(Tensor::new(&s, data)?, Op::AddChannelConst(input), needs))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(x.shape(), data).expect("same shape");
        let needs = self.needs(input);
        self.push(value, Op::Scale(input, factor), needs)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().fold(T::zero(), |a, &b| a + b);
        let needs = self.needs(input);
        self.push(Tensor::new(&[1], vec![s]).expect("scalar"), Op::Sum(input), needs)
    }

    /// Mean absolute error.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        same_shape("l1_loss", self.shape(pred), self.shape(target))?;
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let total = p.iter().zip(t).fold(T::zero(), |a, (&x, &y)| a + (x - y).abs());
        let mean = total / T::from_usize(p.len()).expect("length fits");
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(Tensor::new(&[1], vec![mean])?, Op::L1 { pred, target }, needs))
    }

    /// Per-pixel dynamic filtering: `features` is `[C,H,W]`, `filters` is
    /// `[G, C*k*k*out_c]` laid out as `(C*k*k, out_c)` per group.
    pub fn meta_map(&mut self, features: Var, filters: Var, plan: Arc<MapPlan>, out_c: usize) -> Result<Var> {
        let fs = self.shape(features).to_vec();
        if fs.len() != 3 || fs[1] != plan.in_h || fs[2] != plan.in_w {
            return Err(Error::shape("meta_map", format!("features {fs:?} vs plan {}x{}", plan.in_h, plan.in_w)));
        }
        let kdim = fs[0] * plan.k * plan.k;
        let ws = self.shape(filters).to_vec();
        if ws != [plan.n_groups, kdim * out_c] {
            return Err(Error::shape(
                "meta_map",
                format!("filters {ws:?}, expected [{}, {}]", plan.n_groups, kdim * out_c),
            ));
        }
        let rows = kernels::unfold_rows(self.value(features).data(), fs[0], &plan);
        let out = kernels::meta_map_forward(&rows, self.value(filters).data(), out_c, kdim, &plan);
        let needs = self.needs(features) || self.needs(filters);
        let value = Tensor::new(&[out_c, plan.out_h(), plan.out_w()], out)?;
        let rows = if needs { rows } else { Vec::new() };
        Ok(self.push(
            value,
            Op::MetaMap {
                features,
                filters,
                plan,
                rows,
                out_c,
            },
            needs,
        ))
    }

    /// Bilinear resampling of a `[C,H,W]` tensor to `[C,out_h,out_w]`.
    pub fn bilinear(&mut self, input: Var, out_h: usize, out_w: usize, scale: f64) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 3 || out_h == 0 || out_w == 0 || !(scale > 0.0) {
            return Err(Error::shape("bilinear", format!("{s:?} -> {out_h}x{out_w} at scale {scale}")));
        }
        let ys = LerpAxis::new(s[1], out_h, scale);
        let xs = LerpAxis::new(s[2], out_w, scale);
        let out = kernels::bilinear_forward(self.value(input).data(), s[0], s[1], s[2], &ys, &xs);
        let needs = self.needs(input);
        Ok(self.push(Tensor::new(&[s[0], out_h, out_w], out)?, Op::Bilinear { input, ys, xs }, needs))
    }

    /// Reorders a flat `(C_in*k*k, C_out)` filter into a `[C_out,C_in,k,k]`
    /// convolution kernel.
    pub fn filter_to_kernel(&mut self, input: Var, in_c: usize, out_c: usize, k: usize) -> Result<Var> {
        let kdim = in_c * k * k;
        if self.value(input).numel() != kdim * out_c {
            return Err(Error::shape("filter_to_kernel", format!("{:?} for ({kdim}, {out_c})", self.shape(input))));
        }
        let src = self.value(input).data();
        let mut out = vec![T::zero(); kdim * out_c];
        for m in 0..kdim {
            for o in 0..out_c {
                out[o * kdim + m] = src[m * out_c + o];
            }
        }
        let needs = self.needs(input);
        Ok(self.push(
            Tensor::new(&[out_c, in_c, k, k], out)?,
            Op::FilterToKernel { input, in_c, out_c, k },
            needs,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf | Op::Param(_)) || idx == loss.0 {
                grads[idx] = Some(g);
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    /// Computes gradients of `loss` and accumulates them into the
    /// parameters' `grad` buffers. Calling it twice accumulates twice.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.gradients(loss)?.accumulate_into(store)
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv {
                inputs,
                kernel,
                bias,
                geom,
                relu,
            } => {
                let masked;
                let g = if *relu {
                    masked = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gv, &y)| if y > T::zero() { gv } else { T::zero() })
                        .collect::<Vec<_>>();
                    &masked[..]
                } else {
                    g
                };
                if let Some(b) = bias.filter(|&b| self.needs(b)) {
                    let p = geom.out_h() * geom.out_w();
                    let gb: Vec<T> = g.chunks(p).map(|r| r.iter().fold(T::zero(), |a, &v| a + v)).collect();
                    add_into(&mut grads[b.0], &gb);
                }
                let want_in = inputs.iter().any(|&v| self.needs(v));
                let srcs: Vec<(&[T], usize)> = inputs
                    .iter()
                    .map(|&v| (self.value(v).data(), self.shape(v)[0]))
                    .collect();
                let (gk, gc) = kernels::conv_backward(&srcs, self.value(*kernel).data(), g, geom, self.needs(*kernel), want_in);
                if let Some(gk) = gk {
                    add_into(&mut grads[kernel.0], &gk);
                }
                if let Some(gc) = gc {
                    let mut c_off = 0;
                    for &v in inputs {
                        let ch = self.shape(v)[0];
                        if self.needs(v) {
                            let mut gi = vec![T::zero(); self.value(v).numel()];
                            kernels::fold_input_grad(&gc, geom, c_off, ch, &mut gi);
                            add_into(&mut grads[v.0], &gi);
                        }
                        c_off += ch;
                    }
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
                rows,
                relu,
            } => {
                let masked;
                let g = if *relu {
                    masked = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gv, &y)| if y > T::zero() { gv } else { T::zero() })
                        .collect::<Vec<_>>();
                    &masked[..]
                } else {
                    g
                };
                let ws = self.shape(*weight);
                let (n_out, n_in) = (ws[0], ws[1]);
                if let Some(b) = bias.filter(|&b| self.needs(b)) {
                    let mut gb = vec![T::zero(); n_out];
                    for r in g.chunks(n_out) {
                        gb.iter_mut().zip(r).for_each(|(a, &v)| *a = *a + v);
                    }
                    add_into(&mut grads[b.0], &gb);
                }
                if self.needs(*weight) {
                    let mut gw = vec![T::zero(); n_out * n_in];
                    gemm(n_out, *rows, n_in, T::one(), g, true, self.value(*input).data(), false, T::zero(), &mut gw);
                    add_into(&mut grads[weight.0], &gw);
                }
                if self.needs(*input) {
                    let mut gx = vec![T::zero(); rows * n_in];
                    gemm(*rows, n_out, n_in, T::one(), g, false, self.value(*weight).data(), false, T::zero(), &mut gx);
                    add_into(&mut grads[input.0], &gx);
                }
            }
            Op::Relu(x) => {
                let gx: Vec<T> = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                add_into(&mut grads[x.0], &gx);
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(*v) {
                        add_into(&mut grads[v.0], g);
                    }
                }
            }
            Op::AddChannelConst(x) => add_into(&mut grads[x.0], g),
            Op::Scale(x, f) => {
                let gx: Vec<T> = g.iter().map(|&v| v * *f).collect();
                add_into(&mut grads[x.0], &gx);
            }
            Op::Sum(x) => {
                let gx = vec![g[0]; self.value(*x).numel()];
                add_into(&mut grads[x.0], &gx);
            }
            Op::L1 { pred, target } => {
                let p = self.value(*pred).data();
                let t = self.value(*target).data();
                let scale = g[0] / T::from_usize(p.len()).expect("length fits");
                let gp: Vec<T> = p
                    .iter()
                    .zip(t)
                    .map(|(&a, &b)| {
                        let d = a - b;
                        if d > T::zero() {
                            scale
                        } else if d < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if self.needs(*target) {
                    let gt: Vec<T> = gp.iter().map(|&v| -v).collect();
                    add_into(&mut grads[target.0], &gt);
                }
                if self.needs(*pred) {
                    add_into(&mut grads[pred.0], &gp);
                }
            }
            Op::MetaMap {
                features,
                filters,
                plan,
                rows,
                out_c,
            } => {
                let ch = self.shape(*features)[0];
                let kdim = ch * plan.k * plan.k;
                let (gr, gf) = kernels::meta_map_backward(
                    rows,
                    self.value(*filters).data(),
                    g,
                    *out_c,
                    kdim,
                    plan,
                    self.needs(*features),
                    self.needs(*filters),
                );
                if let Some(gf) = gf {
                    add_into(&mut grads[filters.0], &gf);
                }
                if let Some(gr) = gr {
                    let mut gx = vec![T::zero(); self.value(*features).numel()];
                    kernels::fold_rows(&gr, ch, plan, &mut gx);
                    add_into(&mut grads[features.0], &gx);
                }
            }
            Op::Bilinear { input, ys, xs } => {
                let s = self.shape(*input);
                let mut gx = vec![T::zero(); self.value(*input).numel()];
                kernels::bilinear_backward(g, s[0], s[1], s[2], ys, xs, &mut gx);
                add_into(&mut grads[input.0], &gx);
            }
            Op::FilterToKernel { input, in_c, out_c, k } => {
                let kdim = in_c * k * k;
                let mut gx = vec![T::zero(); kdim * out_c];
                for m in 0..kdim {
                    for o in 0..*out_c {
                        gx[m * out_c + o] = g[o * kdim + m];
                    }
                }
                add_into(&mut grads[input.0], &gx);
            }
        }
    }
}
