//! Primitive forward rules and their vector-Jacobian products.

use rand::Rng;

use super::kernels::{dot, mm, mm_a_bt, mm_at_b};
use super::{broadcast_index_map, broadcast_shape, strides, StreamKey, Tensor};
use crate::error::{shape_err, Error, Result};

/// One differentiable primitive together with its attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Broadcasting elementwise `a + b`.
    Add,
    /// Broadcasting elementwise `a - b`.
    Sub,
    /// Broadcasting elementwise `a * b`.
    Mul,
    Scale(f64),
    AddScalar(f64),
    /// `[m,k]·[k,n]`, or batched `[b,m,k]·[b,k,n]`.
    MatMul,
    /// `x·Wᵀ + b` with `x: [.., in]`, `W: [out, in]`, optional `b: [out]`.
    Affine,
    Sigmoid,
    Exp,
    Log,
    /// `x^c`; `x` must be non-negative unless `c` is an integer.
    Powf(f64),
    Clamp {
        lo: Option<f64>,
        hi: Option<f64>,
    },
    /// Softmax over the last axis.
    Softmax,
    /// Normalisation over the last axis (no gain/bias).
    LayerNorm {
        eps: f64,
    },
    /// tanh-approximated GELU.
    Gelu,
    /// Row lookup into a 2-D table.
    Gather {
        indices: Vec<usize>,
    },
    Concat {
        axis: usize,
    },
    Permute {
        perm: Vec<usize>,
    },
    Reshape {
        shape: Vec<usize>,
    },
    /// Sum over one axis, or over everything when `axis` is `None`.
    Sum {
        axis: Option<usize>,
    },
    Mean {
        axis: Option<usize>,
    },
    /// Inverted Bernoulli dropout; the mask is a pure function of `key`.
    Dropout {
        p: f64,
        key: StreamKey,
    },
    /// Stochastic-depth gate: scales the whole input by 0 or `1/(1-p)`.
    DropPath {
        p: f64,
        key: StreamKey,
    },
    /// Patch extraction `[H, W, C] -> [Ho·Wo, k·k·C]` with zero padding.
    Im2Col {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::AddScalar(_) => "add_scalar",
            Primitive::MatMul => "matmul",
            Primitive::Affine => "affine",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Powf(_) => "powf",
            Primitive::Clamp { .. } => "clamp",
            Primitive::Softmax => "softmax",
            Primitive::LayerNorm { .. } => "layer_norm",
            Primitive::Gelu => "gelu",
            Primitive::Gather { .. } => "gather",
            Primitive::Concat { .. } => "concat",
            Primitive::Permute { .. } => "permute",
            Primitive::Reshape { .. } => "reshape",
            Primitive::Sum { .. } => "sum",
            Primitive::Mean { .. } => "mean",
            Primitive::Dropout { .. } => "dropout",
            Primitive::DropPath { .. } => "drop_path",
            Primitive::Im2Col { .. } => "im2col",
        }
    }
}

/// Intermediates kept from the forward pass for the backward pass.
#[derive(Clone, Debug, Default)]
pub(crate) enum Saved {
    #[default]
    None,
    Mask(Vec<f64>),
    Factor(f64),
    Index(Vec<usize>),
    RowStats(Vec<f64>),
}

const PAD: usize = usize::MAX;

/// Evaluate a primitive on concrete inputs.
pub fn eval_primitive(prim: &Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
    forward(prim, inputs).map(|(t, _)| t)
}

fn arity(prim: &Primitive, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(shape_err(
            prim.name(),
            format!("expected {n} inputs, got {}", inputs.len()),
        ));
    }
    Ok(())
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    x.map(f)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.044_715;
fn gelu_s() -> f64 {
    (2.0 / std::f64::consts::PI).sqrt()
}

fn binary(
    prim: &Primitive,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape(), data);
    }
    let shape = broadcast_shape(prim.name(), a.shape(), b.shape())?;
    let ia = broadcast_index_map(a.shape(), &shape);
    let ib = broadcast_index_map(b.shape(), &shape);
    let data = ia
        .iter()
        .zip(&ib)
        .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
        .collect();
    Tensor::new(&shape, data)
}

/// Sum a gradient of shape `out_shape` down to `in_shape` (undo broadcasting).
fn reduce_to(g: Vec<f64>, out_shape: &[usize], in_shape: &[usize]) -> Tensor {
    if out_shape == in_shape {
        return Tensor::new(in_shape, g).expect("same shape");
    }
    let map = broadcast_index_map(in_shape, out_shape);
    let mut acc = vec![0.0; in_shape.iter().product()];
    for (v, &i) in g.iter().zip(&map) {
        acc[i] += v;
    }
    Tensor::new(in_shape, acc).expect("reduced shape")
}

fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match (a.shape(), b.shape()) {
        ([m, k], [k2, n]) if k == k2 => Ok((1, *m, *k, *n)),
        ([b1, m, k], [b2, k2, n]) if b1 == b2 && k == k2 => Ok((*b1, *m, *k, *n)),
        (sa, sb) => Err(shape_err("matmul", format!("cannot contract {sa:?} with {sb:?}"))),
    }
}

fn affine_dims(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<(usize, usize, usize)> {
    let (out, inp) = match w.shape() {
        [o, i] => (*o, *i),
        s => return Err(shape_err("affine", format!("weight must be 2-D, got {s:?}"))),
    };
    let last = x.shape().last().copied().unwrap_or(0);
    if x.rank() == 0 || last != inp {
        return Err(shape_err(
            "affine",
            format!("input {:?} does not end in {inp}", x.shape()),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [out] {
            return Err(shape_err(
                "affine",
                format!("bias {:?} does not match out={out}", b.shape()),
            ));
        }
    }
    Ok((x.numel() / inp, inp, out))
}

fn last_axis(prim: &Primitive, x: &Tensor) -> Result<(usize, usize)> {
    match x.shape().last() {
        Some(&d) if d > 0 => Ok((x.numel() / d, d)),
        _ => Err(shape_err(prim.name(), format!("bad shape {:?}", x.shape()))),
    }
}

fn check_axis(prim: &Primitive, x: &Tensor, axis: usize) -> Result<()> {
    if axis >= x.rank() {
        return Err(shape_err(
            prim.name(),
            format!("axis {axis} out of range for {:?}", x.shape()),
        ));
    }
    Ok(())
}

fn permute_map(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = shape.iter().product();
    let rank = shape.len();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..n {
        map.push(cur);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            cur += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            cur -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, map)
}

fn reduce_axis(x: &Tensor, axis: usize) -> (Vec<usize>, usize, usize, usize) {
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape.remove(axis);
    (out_shape, outer, len, inner)
}

fn im2col_map(
    shape: &[usize],
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let (h, w, c) = match shape {
        [h, w, c] => (*h, *w, *c),
        s => return Err(shape_err("im2col", format!("expected [H, W, C], got {s:?}"))),
    };
    if kernel == 0 || stride == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel {
        return Err(shape_err(
            "im2col",
            format!("kernel {kernel} stride {stride} pad {pad} invalid for {shape:?}"),
        ));
    }
    let ho = (h + 2 * pad - kernel) / stride + 1;
    let wo = (w + 2 * pad - kernel) / stride + 1;
    let mut map = Vec::with_capacity(ho * wo * kernel * kernel * c);
    for oy in 0..ho {
        for ox in 0..wo {
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let y = (oy * stride + ky) as isize - pad as isize;
                    let x = (ox * stride + kx) as isize - pad as isize;
                    let inside = y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w;
                    for ch in 0..c {
                        map.push(if inside {
                            ((y as usize) * w + x as usize) * c + ch
                        } else {
                            PAD
                        });
                    }
                }
            }
        }
    }
    Ok((vec![ho * wo, kernel * kernel * c], map))
}

pub(crate) fn forward(prim: &Primitive, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
    use Primitive as P;
    let out = match prim {
        P::Add | P::Sub | P::Mul => {
            arity(prim, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            match prim {
                P::Add => binary(prim, a, b, |x, y| x + y)?,
                P::Sub => binary(prim, a, b, |x, y| x - y)?,
                _ => binary(prim, a, b, |x, y| x * y)?,
            }
        }
        P::Scale(c) => {
            arity(prim, inputs, 1)?;
            unary(inputs[0], |x| c * x)
        }
        P::AddScalar(c) => {
            arity(prim, inputs, 1)?;
            unary(inputs[0], |x| x + c)
        }
        P::MatMul => {
            arity(prim, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            let (batch, m, k, n) = matmul_dims(a, b)?;
            let mut data = Vec::with_capacity(batch * m * n);
            for bi in 0..batch {
                data.extend(mm(
                    &a.data()[bi * m * k..(bi + 1) * m * k],
                    &b.data()[bi * k * n..(bi + 1) * k * n],
                    m,
                    k,
                    n,
                ));
            }
            let shape = if a.rank() == 2 { vec![m, n] } else { vec![batch, m, n] };
            Tensor::new(&shape, data)?
        }
        P::Affine => {
            if inputs.len() != 2 && inputs.len() != 3 {
                return Err(shape_err("affine", format!("expected 2 or 3 inputs, got {}", inputs.len())));
            }
            let (x, w, b) = (inputs[0], inputs[1], inputs.get(2).copied());
            let (rows, inp, out) = affine_dims(x, w, b)?;
            let mut data = mm_a_bt(x.data(), w.data(), rows, inp, out);
            if let Some(b) = b {
                for row in data.chunks_mut(out) {
                    for (o, bv) in row.iter_mut().zip(b.data()) {
                        *o += bv;
                    }
                }
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = out;
            Tensor::new(&shape, data)?
        }
        P::Sigmoid => {
            arity(prim, inputs, 1)?;
            unary(inputs[0], sigmoid)
        }
        P::Exp => {
            arity(prim, inputs, 1)?;
            unary(inputs[0], f64::exp)
        }
        P::Log => {
            arity(prim, inputs, 1)?;
            if let Some(bad) = inputs[0].data().iter().find(|&&x| !(x > 0.0)) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("argument {bad} is not positive"),
                });
            }
            unary(inputs[0], f64::ln)
        }
        P::Powf(c) => {
            arity(prim, inputs, 1)?;
            if c.fract() != 0.0 {
                if let Some(bad) = inputs[0].data().iter().find(|&&x| x < 0.0) {
                    return Err(Error::Domain {
                        op: "powf",
                        detail: format!("negative base {bad} with exponent {c}"),
                    });
                }
            }
            unary(inputs[0], |x| x.powf(*c))
        }
        P::Clamp { lo, hi } => {
            arity(prim, inputs, 1)?;
            unary(inputs[0], |mut x| {
                if let Some(l) = lo {
                    x = x.max(*l);
                }
                if let Some(h) = hi {
                    x = x.min(*h);
                }
                x
            })
        }
        P::Softmax => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            let (_, d) = last_axis(prim, x)?;
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(d) {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
            Tensor::new(x.shape(), data)?
        }
        P::LayerNorm { eps } => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            let (rows, d) = last_axis(prim, x)?;
            let mut data = x.data().to_vec();
            let mut rstd = Vec::with_capacity(rows);
            for row in data.chunks_mut(d) {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let r = 1.0 / (var + eps).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * r;
                }
                rstd.push(r);
            }
            return Ok((Tensor::new(x.shape(), data)?, Saved::RowStats(rstd)));
        }
        P::Gelu => {
            arity(prim, inputs, 1)?;
            let s = gelu_s();
            unary(inputs[0], |x| 0.5 * x * (1.0 + (s * (x + GELU_C * x * x * x)).tanh()))
        }
        P::Gather { indices } => {
            arity(prim, inputs, 1)?;
            let t = inputs[0];
            let (v, d) = match t.shape() {
                [v, d] => (*v, *d),
                s => return Err(shape_err("gather", format!("table must be 2-D, got {s:?}"))),
            };
            let mut data = Vec::with_capacity(indices.len() * d);
            for &i in indices {
                if i >= v {
                    return Err(shape_err("gather", format!("index {i} out of range for {v} rows")));
                }
                data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
            }
            Tensor::new(&[indices.len(), d], data)?
        }
        P::Concat { axis } => {
            if inputs.is_empty() {
                return Err(shape_err("concat", "no inputs"));
            }
            let first = inputs[0];
            check_axis(prim, first, *axis)?;
            let mut shape = first.shape().to_vec();
            shape[*axis] = 0;
            for t in inputs {
                let ok = t.rank() == first.rank()
                    && t.shape()
                        .iter()
                        .zip(first.shape())
                        .enumerate()
                        .all(|(i, (a, b))| i == *axis || a == b);
                if !ok {
                    return Err(shape_err(
                        "concat",
                        format!("{:?} incompatible with {:?} on axis {axis}", t.shape(), first.shape()),
                    ));
                }
                shape[*axis] += t.shape()[*axis];
            }
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for t in inputs {
                    let chunk = t.shape()[*axis] * inner;
                    data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::new(&shape, data)?
        }
        P::Permute { perm } => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            let mut seen = vec![false; x.rank()];
            if perm.len() != x.rank() || perm.iter().any(|&p| p >= x.rank() || std::mem::replace(&mut seen[p], true)) {
                return Err(shape_err(
                    "permute",
                    format!("{perm:?} is not a permutation of rank {}", x.rank()),
                ));
            }
            let (shape, map) = permute_map(x.shape(), perm);
            Tensor::new(&shape, map.iter().map(|&i| x.data()[i]).collect())?
        }
        P::Reshape { shape } => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            if shape.iter().product::<usize>() != x.numel() {
                return Err(shape_err(
                    "reshape",
                    format!("cannot view {:?} as {shape:?}", x.shape()),
                ));
            }
            Tensor::new(shape, x.data().to_vec())?
        }
        P::Sum { axis } | P::Mean { axis } => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            let mean = matches!(prim, P::Mean { .. });
            match axis {
                None => {
                    let s: f64 = x.data().iter().sum();
                    let n = x.numel().max(1) as f64;
                    Tensor::scalar(if mean { s / n } else { s })
                }
                Some(ax) => {
                    check_axis(prim, x, *ax)?;
                    let (shape, outer, len, inner) = reduce_axis(x, *ax);
                    let mut data = vec![0.0; outer * inner];
                    for o in 0..outer {
                        for l in 0..len {
                            let src = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    if mean {
                        data.iter_mut().for_each(|v| *v /= len as f64);
                    }
                    Tensor::new(&shape, data)?
                }
            }
        }
        P::Dropout { p, key } => {
            arity(prim, inputs, 1)?;
            check_prob("dropout", *p)?;
            let x = inputs[0];
            let mut rng = key.rng();
            let keep = 1.0 / (1.0 - p);
            let mask: Vec<f64> = (0..x.numel())
                .map(|_| if rng.random::<f64>() < *p { 0.0 } else { keep })
                .collect();
            let out = Tensor::new(
                x.shape(),
                x.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
            )?;
            return Ok((out, Saved::Mask(mask)));
        }
        P::DropPath { p, key } => {
            arity(prim, inputs, 1)?;
            check_prob("drop_path", *p)?;
            let u: f64 = key.rng().random();
            let factor = if u < *p { 0.0 } else { 1.0 / (1.0 - p) };
            return Ok((inputs[0].map(|x| x * factor), Saved::Factor(factor)));
        }
        P::Im2Col { kernel, stride, pad } => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            let (shape, map) = im2col_map(x.shape(), *kernel, *stride, *pad)?;
            let data = map
                .iter()
                .map(|&i| if i == PAD { 0.0 } else { x.data()[i] })
                .collect();
            return Ok((Tensor::new(&shape, data)?, Saved::Index(map)));
        }
    };
    Ok((out, Saved::None))
}

fn check_prob(op: &'static str, p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Domain {
            op,
            detail: format!("drop probability {p} outside [0, 1)"),
        });
    }
    Ok(())
}

/// Gradients of each input given the upstream gradient `g` of the output.
/// Entries for inputs with `needs[i] == false` are `None`.
pub(crate) fn vjp(
    prim: &Primitive,
    inputs: &[&Tensor],
    out: &Tensor,
    saved: &Saved,
    g: &Tensor,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    use Primitive as P;
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    let elementwise = |f: &dyn Fn(usize) -> f64| -> Tensor {
        Tensor::new(g.shape(), (0..g.numel()).map(f).collect()).expect("grad shape")
    };
    let gd = g.data();
    let grads = match prim {
        P::Add | P::Sub | P::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let shape = out.shape();
            let (ia, ib) = if a.shape() == b.shape() {
                (None, None)
            } else {
                (
                    Some(broadcast_index_map(a.shape(), shape)),
                    Some(broadcast_index_map(b.shape(), shape)),
                )
            };
            let at = |i: usize| ia.as_ref().map_or(i, |m| m[i]);
            let bt = |i: usize| ib.as_ref().map_or(i, |m| m[i]);
            let ga = want(0).then(|| {
                let full: Vec<f64> = match prim {
                    P::Mul => (0..gd.len()).map(|i| gd[i] * b.data()[bt(i)]).collect(),
                    _ => gd.to_vec(),
                };
                reduce_to(full, shape, a.shape())
            });
            let gb = want(1).then(|| {
                let full: Vec<f64> = match prim {
                    P::Mul => (0..gd.len()).map(|i| gd[i] * a.data()[at(i)]).collect(),
                    P::Sub => gd.iter().map(|v| -v).collect(),
                    _ => gd.to_vec(),
                };
                reduce_to(full, shape, b.shape())
            });
            vec![ga, gb]
        }
        P::Scale(c) => vec![Some(g.map(|v| v * c))],
        P::AddScalar(_) => vec![Some(g.clone())],
        P::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (batch, m, k, n) = matmul_dims(a, b)?;
            let ga = want(0).then(|| {
                let mut data = Vec::with_capacity(batch * m * k);
                for bi in 0..batch {
                    data.extend(mm_a_bt(
                        &gd[bi * m * n..(bi + 1) * m * n],
                        &b.data()[bi * k * n..(bi + 1) * k * n],
                        m,
                        n,
                        k,
                    ));
                }
                Tensor::new(a.shape(), data).expect("matmul grad a")
            });
            let gb = want(1).then(|| {
                let mut data = Vec::with_capacity(batch * k * n);
                for bi in 0..batch {
                    data.extend(mm_at_b(
                        &a.data()[bi * m * k..(bi + 1) * m * k],
                        &gd[bi * m * n..(bi + 1) * m * n],
                        m,
                        k,
                        n,
                    ));
                }
                Tensor::new(b.shape(), data).expect("matmul grad b")
            });
            vec![ga, gb]
        }
        P::Affine => {
            let (x, w) = (inputs[0], inputs[1]);
            let (rows, inp, outd) = affine_dims(x, w, inputs.get(2).copied())?;
            let gx = want(0).then(|| {
                Tensor::new(x.shape(), mm(gd, w.data(), rows, outd, inp)).expect("affine grad x")
            });
            let gw = want(1).then(|| {
                Tensor::new(w.shape(), mm_at_b(gd, x.data(), rows, outd, inp)).expect("affine grad w")
            });
            let mut res = vec![gx, gw];
            if inputs.len() == 3 {
                res.push(want(2).then(|| {
                    let mut acc = vec![0.0; outd];
                    for row in gd.chunks(outd) {
                        for (a, v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Tensor::from_vec(acc)
                }));
            }
            res
        }
        P::Sigmoid => {
            let y = out.data();
            vec![Some(elementwise(&|i| gd[i] * y[i] * (1.0 - y[i])))]
        }
        P::Exp => {
            let y = out.data();
            vec![Some(elementwise(&|i| gd[i] * y[i]))]
        }
        P::Log => {
            let x = inputs[0].data();
            vec![Some(elementwise(&|i| gd[i] / x[i]))]
        }
        P::Powf(c) => {
            let x = inputs[0].data();
            let c = *c;
            vec![Some(elementwise(&|i| {
                if c == 0.0 || (x[i] == 0.0 && c < 1.0) {
                    0.0
                } else {
                    gd[i] * c * x[i].powf(c - 1.0)
                }
            }))]
        }
        P::Clamp { lo, hi } => {
            let x = inputs[0].data();
            vec![Some(elementwise(&|i| {
                let inside = lo.is_none_or(|l| x[i] >= l) && hi.is_none_or(|h| x[i] <= h);
                if inside {
                    gd[i]
                } else {
                    0.0
                }
            }))]
        }
        P::Softmax => {
            let (_, d) = last_axis(prim, out)?;
            let mut data = Vec::with_capacity(out.numel());
            for (y, gr) in out.data().chunks(d).zip(gd.chunks(d)) {
                let s = dot(y, gr);
                data.extend(y.iter().zip(gr).map(|(yv, gv)| yv * (gv - s)));
            }
            vec![Some(Tensor::new(out.shape(), data)?)]
        }
        P::LayerNorm { .. } => {
            let (_, d) = last_axis(prim, out)?;
            let rstd = match saved {
                Saved::RowStats(r) => r,
                _ => return Err(Error::Usage("layer_norm backward without saved stats".into())),
            };
            let mut data = Vec::with_capacity(out.numel());
            for ((y, gr), r) in out.data().chunks(d).zip(gd.chunks(d)).zip(rstd) {
                let mg = gr.iter().sum::<f64>() / d as f64;
                let mgy = dot(gr, y) / d as f64;
                data.extend(y.iter().zip(gr).map(|(yv, gv)| r * (gv - mg - yv * mgy)));
            }
            vec![Some(Tensor::new(out.shape(), data)?)]
        }
        P::Gelu => {
            let x = inputs[0].data();
            let s = gelu_s();
            vec![Some(elementwise(&|i| {
                let v = x[i];
                let t = (s * (v + GELU_C * v * v * v)).tanh();
                let dt = (1.0 - t * t) * s * (1.0 + 3.0 * GELU_C * v * v);
                gd[i] * (0.5 * (1.0 + t) + 0.5 * v * dt)
            }))]
        }
        P::Gather { indices } => {
            let t = inputs[0];
            let d = t.shape()[1];
            let mut acc = vec![0.0; t.numel()];
            for (r, &i) in indices.iter().enumerate() {
                for (a, v) in acc[i * d..(i + 1) * d].iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                    *a += v;
                }
            }
            vec![Some(Tensor::new(t.shape(), acc)?)]
        }
        P::Concat { axis } => {
            let shape = out.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let mut parts: Vec<Vec<f64>> = inputs.iter().map(|t| Vec::with_capacity(t.numel())).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (t, part) in inputs.iter().zip(parts.iter_mut()) {
                    let chunk = t.shape()[*axis] * inner;
                    part.extend_from_slice(&gd[off..off + chunk]);
                    off += chunk;
                }
            }
            inputs
                .iter()
                .zip(parts)
                .enumerate()
                .map(|(i, (t, p))| want(i).then(|| Tensor::new(t.shape(), p).expect("concat grad")))
                .collect()
        }
        P::Permute { perm } => {
            let x = inputs[0];
            let (_, map) = permute_map(x.shape(), perm);
            let mut acc = vec![0.0; x.numel()];
            for (v, &i) in gd.iter().zip(&map) {
                acc[i] = *v;
            }
            vec![Some(Tensor::new(x.shape(), acc)?)]
        }
        P::Reshape { .. } => vec![Some(Tensor::new(inputs[0].shape(), gd.to_vec())?)],
        P::Sum { axis } | P::Mean { axis } => {
            let x = inputs[0];
            let mean = matches!(prim, P::Mean { .. });
            match axis {
                None => {
                    let v = gd[0] / if mean { x.numel().max(1) as f64 } else { 1.0 };
                    vec![Some(Tensor::full(x.shape(), v))]
                }
                Some(ax) => {
                    let (_, outer, len, inner) = reduce_axis(x, *ax);
                    let div = if mean { len as f64 } else { 1.0 };
                    let mut acc = vec![0.0; x.numel()];
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = &mut acc[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (d, s) in dst.iter_mut().zip(&gd[o * inner..(o + 1) * inner]) {
                                *d = s / div;
                            }
                        }
                    }
                    vec![Some(Tensor::new(x.shape(), acc)?)]
                }
            }
        }
        P::Dropout { .. } => match saved {
            Saved::Mask(m) => vec![Some(elementwise(&|i| gd[i] * m[i]))],
            _ => return Err(Error::Usage("dropout backward without mask".into())),
        },
        P::DropPath { .. } => match saved {
            Saved::Factor(f) => vec![Some(g.map(|v| v * f))],
            _ => return Err(Error::Usage("drop_path backward without gate".into())),
        },
        P::Im2Col { .. } => match saved {
            Saved::Index(map) => {
                let mut acc = vec![0.0; inputs[0].numel()];
                for (v, &i) in gd.iter().zip(map) {
                    if i != PAD {
                        acc[i] += v;
                    }
                }
                vec![Some(Tensor::new(inputs[0].shape(), acc)?)]
            }
            _ => return Err(Error::Usage("im2col backward without index map".into())),
        },
    };
    Ok(grads
        .into_iter()
        .enumerate()
        .map(|(i, g)| if want(i) { g } else { None })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let y = eval_primitive(&Primitive::Sigmoid, &[&Tensor::from_vec(vec![0.0])]).unwrap();
        assert_eq!(y.data(), &[0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::from_fn(&[3, 5], |i| (i as f64 * 1.7).sin() * 30.0);
        let y = eval_primitive(&Primitive::Softmax, &[&x]).unwrap();
        for row in y.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::from_fn(&[4, 4], |i| (i as f64 * 0.3).cos());
        let y = eval_primitive(&Primitive::MatMul, &[&a, &Tensor::eye(4)]).unwrap();
        assert_eq!(y, a);
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = eval_primitive(&Primitive::MatMul, &[&a, &b]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
        let err = eval_primitive(&Primitive::Add, &[&a, &Tensor::zeros(&[2])]).unwrap_err();
        assert!(err.to_string().contains("add"));
    }

    #[test]
    fn log_rejects_non_positive() {
        let err = eval_primitive(&Primitive::Log, &[&Tensor::from_vec(vec![1.0, 0.0])]).unwrap_err();
        assert!(matches!(err, Error::Domain { op: "log", .. }));
    }

    #[test]
    fn affine_matches_manual() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let w = t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = Tensor::from_vec(vec![0.5, -0.5, 0.0]);
        let y = eval_primitive(&Primitive::Affine, &[&x, &w, &b]).unwrap();
        assert_eq!(y.data(), &[1.5, 1.5, 3.0]);
    }

    #[test]
    fn concat_and_permute() {
        let a = t(&[2, 1], &[1.0, 2.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let c = eval_primitive(&Primitive::Concat { axis: 1 }, &[&a, &b]).unwrap();
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let p = eval_primitive(&Primitive::Permute { perm: vec![1, 0] }, &[&c]).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[1.0, 2.0, 3.0, 5.0, 4.0, 6.0]);
    }

    #[test]
    fn im2col_zero_pads() {
        let x = Tensor::from_fn(&[2, 2, 1], |i| i as f64 + 1.0);
        let y = eval_primitive(&Primitive::Im2Col { kernel: 3, stride: 1, pad: 1 }, &[&x]).unwrap();
        assert_eq!(y.shape(), &[4, 9]);
        // top-left output patch: centre is pixel (0,0)
        assert_eq!(&y.data()[0..9], &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 3.0, 4.0]);
    }

    #[test]
    fn drop_path_is_zero_or_rescaled() {
        let x = Tensor::full(&[3], 2.0);
        for c in 0..20 {
            let key = StreamKey::new(1, "layer", c);
            let y = eval_primitive(&Primitive::DropPath { p: 0.25, key }, &[&x]).unwrap();
            let v = y.data()[0];
            assert!(v == 0.0 || (v - 2.0 / 0.75).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardised() {
        let x = Tensor::from_fn(&[2, 6], |i| (i * i) as f64);
        let y = eval_primitive(&Primitive::LayerNorm { eps: 0.0 }, &[&x]).unwrap();
        for row in y.data().chunks(6) {
            let m: f64 = row.iter().sum::<f64>() / 6.0;
            let v: f64 = row.iter().map(|a| a * a).sum::<f64>() / 6.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        }
    }
}
