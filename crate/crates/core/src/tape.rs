//! Reverse-mode differentiation over an explicit operation tape.
//!
//! Every primitive appends a node holding its forward value. `backward`
//! walks the nodes in reverse and applies each primitive's vector-Jacobian
//! product, accumulating into the gradients of its inputs. Nodes that do not
//! depend on any leaf are skipped.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    BiasAdd(Var, Var),
    LeakyRelu(Var, f64),
    Conv3x3(Var, Var),
    Upsample2x(Var),
    AvgPool2x(Var),
    ModDemod { weight: Var, style: Var, eps: f64 },
    L2Norm(Var),
    Normalize(Var),
    Dot(Var, Var),
    Sum(Var),
    Reshape(Var),
    Slice { src: Var, start: usize },
    Concat(Vec<Var>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    frozen: Option<FrozenPattern>,
}

#[derive(Clone, Debug)]
struct FrozenPattern {
    signs: Vec<bool>,
    pos: usize,
}

/// Gradients of a scalar w.r.t. every node that depends on a leaf.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Gradient of `v`, zeros when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn chw(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::shape(op, format!("expected [C,H,W], got {:?}", s))),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contribution) {
                *a += b;
            }
        }
        None => *slot = Some(contribution),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Forward-only tape whose leaky relus take their branch from `pattern`
    /// (as returned by [`Tape::activation_pattern`]) instead of the sign of
    /// their input. Evaluates the smooth piece selected by the pattern.
    pub fn frozen(pattern: Vec<bool>) -> Self {
        Self {
            nodes: Vec::new(),
            frozen: Some(FrozenPattern {
                signs: pattern,
                pos: 0,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Sign of every leaky-relu input on the tape, in recording order. Two
    /// evaluations with equal patterns lie on the same smooth piece.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::LeakyRelu(x, _) = n.op {
                out.extend(self.value(x).data().iter().map(|v| *v >= 0.0));
            }
        }
        out
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A fixed input; no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Const,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::invalid(format!("variable {} is not on this tape", v.0)));
        }
        Ok(())
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Matrix product. `a` is `[m,k]`; `b` is `[k,n]` or a `[k]` vector (giving `[m]`).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = match av.shape() {
            &[m, k] => (m, k),
            s => return Err(Error::shape("matmul", format!("left operand {:?}", s))),
        };
        let (k2, n, out_shape) = match bv.shape() {
            &[k2] => (k2, 1, vec![m]),
            &[k2, n] => (k2, n, vec![m, n]),
            s => return Err(Error::shape("matmul", format!("right operand {:?}", s))),
        };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let out = kernels::matmul(av.data(), bv.data(), m, k, n);
        self.push("matmul", Tensor::from_parts(out_shape, out), Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).add(self.value(b))?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).sub(self.value(b))?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mul", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).scale(c);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(|v| v + c);
        self.push("add_scalar", out, Op::AddScalar(a), &[a])
    }

    /// Adds `b[c]` to every element of channel `c` of `x` (`x` is `[C, ...]`, `b` is `[C]`).
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        self.check(x)?;
        self.check(b)?;
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rank() != 1 || xv.rank() == 0 || xv.shape()[0] != bv.len() {
            return Err(Error::shape(
                "bias_add",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let inner = xv.len() / bv.len();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv.data()[i / inner])
            .collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push("bias_add", out, Op::BiasAdd(x, b), &[x, b])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.check(x)?;
        let out = match &mut self.frozen {
            None => self.value(x).map(|v| if v >= 0.0 { v } else { slope * v }),
            Some(fz) => {
                let xs = self.nodes[x.0].value.data();
                let Some(signs) = fz.signs.get(fz.pos..fz.pos + xs.len()) else {
                    return Err(Error::invalid("frozen activation pattern is too short"));
                };
                let data = xs
                    .iter()
                    .zip(signs)
                    .map(|(v, pos)| if *pos { *v } else { slope * v })
                    .collect();
                fz.pos += xs.len();
                Tensor::from_parts(self.nodes[x.0].value.shape().to_vec(), data)
            }
        };
        self.push("leaky_relu", out, Op::LeakyRelu(x, slope), &[x])
    }

    /// 3x3 convolution with stride 1 and zero padding 1. `x: [Cin,H,W]`, `w: [Cout,Cin,3,3]`.
    pub fn conv3x3(&mut self, x: Var, w: Var) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let (xv, wv) = (self.value(x), self.value(w));
        let (cin, h, wd) = chw("conv3x3", xv)?;
        let cout = match wv.shape() {
            &[o, i, 3, 3] if i == cin => o,
            s => {
                return Err(Error::shape(
                    "conv3x3",
                    format!("kernel {:?} for input {:?}", s, xv.shape()),
                ))
            }
        };
        let out = kernels::conv3x3(xv.data(), wv.data(), cin, cout, h, wd);
        let out = Tensor::from_parts(vec![cout, h, wd], out);
        self.push("conv3x3", out, Op::Conv3x3(x, w), &[x, w])
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let (c, h, w) = chw("upsample2x", xv)?;
        let out = Tensor::from_parts(vec![c, 2 * h, 2 * w], kernels::upsample2x(xv.data(), c, h, w));
        self.push("upsample2x", out, Op::Upsample2x(x), &[x])
    }

    pub fn avgpool2x(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let (c, h, w) = chw("avgpool2x", xv)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("avgpool2x", format!("odd spatial size {:?}", xv.shape())));
        }
        let out = Tensor::from_parts(vec![c, h / 2, w / 2], kernels::avgpool2x(xv.data(), c, h, w));
        self.push("avgpool2x", out, Op::AvgPool2x(x), &[x])
    }

    /// Style modulation followed by per-output-map demodulation.
    /// `weight: [Cout, Cin, ...taps]`, `style: [Cin]`.
    pub fn mod_demod(&mut self, weight: Var, style: Var, eps: f64) -> Result<Var> {
        self.check(weight)?;
        self.check(style)?;
        if !(eps >= 0.0) {
            return Err(Error::invalid(format!("demodulation epsilon {} < 0", eps)));
        }
        let (wv, sv) = (self.value(weight), self.value(style));
        if wv.rank() < 2 || sv.rank() != 1 || wv.shape()[1] != sv.len() {
            return Err(Error::shape(
                "mod_demod",
                format!("weight {:?} with style {:?}", wv.shape(), sv.shape()),
            ));
        }
        let (cout, cin) = (wv.shape()[0], wv.shape()[1]);
        let taps = wv.len() / (cout * cin);
        let out = kernels::mod_demod(wv.data(), sv.data(), eps, cout, cin, taps)
            .ok_or_else(|| Error::ZeroNorm("mod_demod (all-zero style with eps = 0)".into()))?;
        let out = Tensor::from_parts(wv.shape().to_vec(), out);
        self.push(
            "mod_demod",
            out,
            Op::ModDemod { weight, style, eps },
            &[weight, style],
        )
    }

    /// Euclidean norm, as a scalar.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = Tensor::scalar(self.value(x).norm());
        self.push("l2_norm", out, Op::L2Norm(x), &[x])
    }

    /// `x / ‖x‖`; errors on a zero vector.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let n = xv.norm();
        if n == 0.0 {
            return Err(Error::ZeroNorm("normalize".into()));
        }
        let out = xv.map(|v| v / n);
        self.push("normalize", out, Op::Normalize(x), &[x])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("dot", av, bv)?;
        let out = Tensor::scalar(av.dot(bv));
        self.push("dot", out, Op::Dot(a, b), &[a, b])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).reshaped(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// Contiguous flat range `[start, start + prod(shape))` of `x`, reshaped.
    pub fn slice(&mut self, x: Var, start: usize, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let n: usize = shape.iter().product();
        if start + n > xv.len() {
            return Err(Error::shape(
                "slice",
                format!("[{}, {}) of {} elements", start, start + n, xv.len()),
            ));
        }
        let out = Tensor::from_parts(shape.to_vec(), xv.data()[start..start + n].to_vec());
        self.push("slice", out, Op::Slice { src: x, start }, &[x])
    }

    /// Row `i` of a rank-2 value.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.check(x)?;
        let (r, c) = match self.value(x).shape() {
            &[r, c] => (r, c),
            s => return Err(Error::shape("row", format!("{:?}", s))),
        };
        if i >= r {
            return Err(Error::shape("row", format!("row {} of {}", i, r)));
        }
        self.slice(x, i * c, &[c])
    }

    /// Flat concatenation, result shaped `shape`.
    pub fn concat(&mut self, parts: &[Var], shape: &[usize]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            self.check(p)?;
            data.extend_from_slice(self.value(p).data());
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(
                "concat",
                format!("{} elements into {:?}", data.len(), shape),
            ));
        }
        let out = Tensor::from_parts(shape.to_vec(), data);
        self.push("concat", out, Op::Concat(parts.to_vec()), parts)
    }

    /// Mean squared difference between `a` and `b`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Squared Euclidean norm.
    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        self.dot(x, x)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.frozen.is_some() {
            return Err(Error::invalid("frozen tapes are forward-only"));
        }
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = if bv.rank() == 1 { 1 } else { bv.shape()[1] };
                if needs(*a) {
                    accumulate(
                        &mut grads[a.0],
                        kernels::matmul_grad_left(g, bv.data(), m, k, n),
                    );
                }
                if needs(*b) {
                    accumulate(
                        &mut grads[b.0],
                        kernels::matmul_grad_right(av.data(), g, m, k, n),
                    );
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if needs(*b) {
                    accumulate(&mut grads[b.0], g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if needs(*b) {
                    accumulate(&mut grads[b.0], g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let c = g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[a.0], c);
                }
                if needs(*b) {
                    let c = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[b.0], c);
                }
            }
            Op::Scale(a, c) => {
                accumulate(&mut grads[a.0], g.iter().map(|v| v * c).collect());
            }
            Op::AddScalar(a) => accumulate(&mut grads[a.0], g.to_vec()),
            Op::BiasAdd(x, b) => {
                if needs(*x) {
                    accumulate(&mut grads[x.0], g.to_vec());
                }
                if needs(*b) {
                    let nb = val(*b).len();
                    let inner = g.len() / nb;
                    let c = (0..nb)
                        .map(|i| g[i * inner..(i + 1) * inner].iter().sum())
                        .collect();
                    accumulate(&mut grads[b.0], c);
                }
            }
            Op::LeakyRelu(x, slope) => {
                let c = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(gv, xv)| if *xv >= 0.0 { *gv } else { gv * slope })
                    .collect();
                accumulate(&mut grads[x.0], c);
            }
            Op::Conv3x3(x, w) => {
                let (xv, wv) = (val(*x), val(*w));
                let (cin, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let cout = wv.shape()[0];
                if needs(*x) {
                    accumulate(
                        &mut grads[x.0],
                        kernels::conv3x3_grad_input(g, wv.data(), cin, cout, h, wd),
                    );
                }
                if needs(*w) {
                    accumulate(
                        &mut grads[w.0],
                        kernels::conv3x3_grad_weight(g, xv.data(), cin, cout, h, wd),
                    );
                }
            }
            Op::Upsample2x(x) => {
                let s = val(*x).shape();
                accumulate(
                    &mut grads[x.0],
                    kernels::upsample2x_grad(g, s[0], s[1], s[2]),
                );
            }
            Op::AvgPool2x(x) => {
                let s = val(*x).shape();
                accumulate(
                    &mut grads[x.0],
                    kernels::avgpool2x_grad(g, s[0], s[1], s[2]),
                );
            }
            Op::ModDemod { weight, style, eps } => {
                let (wv, sv) = (val(*weight), val(*style));
                let (cout, cin) = (wv.shape()[0], wv.shape()[1]);
                let taps = wv.len() / (cout * cin);
                let (dw, ds) =
                    kernels::mod_demod_grad(g, wv.data(), sv.data(), *eps, cout, cin, taps);
                if needs(*weight) {
                    accumulate(&mut grads[weight.0], dw);
                }
                if needs(*style) {
                    accumulate(&mut grads[style.0], ds);
                }
            }
            Op::L2Norm(x) => {
                let norm = node.value.item();
                let xv = val(*x);
                let c = if norm > 0.0 {
                    xv.data().iter().map(|v| g[0] * v / norm).collect()
                } else {
                    vec![0.0; xv.len()]
                };
                accumulate(&mut grads[x.0], c);
            }
            Op::Normalize(x) => {
                let xv = val(*x);
                let norm = xv.norm();
                let unit = node.value.data();
                let proj: f64 = unit.iter().zip(g).map(|(u, gv)| u * gv).sum();
                let c = unit
                    .iter()
                    .zip(g)
                    .map(|(u, gv)| (gv - u * proj) / norm)
                    .collect();
                accumulate(&mut grads[x.0], c);
            }
            Op::Dot(a, b) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], val(*b).data().iter().map(|v| v * g[0]).collect());
                }
                if needs(*b) {
                    accumulate(&mut grads[b.0], val(*a).data().iter().map(|v| v * g[0]).collect());
                }
            }
            Op::Sum(x) => {
                accumulate(&mut grads[x.0], vec![g[0]; val(*x).len()]);
            }
            Op::Reshape(x) => accumulate(&mut grads[x.0], g.to_vec()),
            Op::Slice { src, start } => {
                let mut c = vec![0.0; val(*src).len()];
                c[*start..*start + g.len()].copy_from_slice(g);
                accumulate(&mut grads[src.0], c);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).len();
                    if needs(*p) {
                        accumulate(&mut grads[p.0], g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
        }
    }
}
