//! Dense row-major tensors with tape-based reverse-mode differentiation.
//!
//! All model math is built from the ops on [`Tape`]. A tape records one
//! forward computation; [`Tape::backward`] replays it in reverse and
//! accumulates gradients for every leaf created with `requires_grad`.
//! Tapes are single-threaded: one tape per training step.

use std::fmt;
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};

/// Floating-point substrate. Standard precision (f32) is used for
/// training; wide precision (f64) is required for finite-difference
/// gradient checks, which are noise-dominated in 32-bit.
pub trait Real:
    num_traits::Float
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Default
    + 'static
{
    const PRECISION: Precision;

    fn from_f64(x: f64) -> Self {
        num_traits::cast(x).expect("f64 conversion")
    }
    fn to_f64x(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("f64 conversion")
    }
    fn to_f32x(self) -> f32 {
        num_traits::ToPrimitive::to_f32(&self).expect("f32 conversion")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Standard,
    Wide,
}

impl Real for f32 {
    const PRECISION: Precision = Precision::Standard;
}

impl Real for f64 {
    const PRECISION: Precision = Precision::Wide;
}

/// Dense real array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(x: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
            requires_grad: false,
            grad: None,
        }
    }

    /// Uniform init in [-scale, scale] from the given generator.
    pub fn uniform<R: Rng>(shape: Vec<usize>, scale: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::from_f64(rng.gen_range(-scale..scale)))
            .collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn<T> = Box<dyn Fn(&[T]) -> Vec<(usize, Vec<T>)>>;

struct Node<T> {
    shape: Vec<usize>,
    data: Rc<Vec<T>>,
    requires_grad: bool,
    back: Option<BackFn<T>>,
}

/// Records one forward computation for reverse-mode differentiation.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        back: Option<BackFn<T>>,
    ) -> Var {
        self.nodes.push(Node {
            shape,
            data: Rc::new(data),
            requires_grad,
            back,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape.clone(), t.data.clone(), t.requires_grad, None)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Var {
        self.push(shape, data, false, None)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        Tensor {
            shape: self.nodes[v.0].shape.clone(),
            data: self.nodes[v.0].data.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    fn rc(&self, v: Var) -> Rc<Vec<T>> {
        Rc::clone(&self.nodes[v.0].data)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("expected matrix, got shape {s:?}"))),
        }
    }

    /// C = A·B, with dA = dC·Bᵀ and dB = Aᵀ·dC.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let ad = self.rc(a);
        let bd = self.rc(b);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ad[i * k + p];
                if av == T::zero() {
                    continue;
                }
                let row = &bd[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] = orow[j] + av * row[j];
                }
            }
        }
        let rg = self.rg(&[a, b]);
        let back: Option<BackFn<T>> = if rg {
            let ad = Rc::clone(&ad);
            let bd = Rc::clone(&bd);
            Some(Box::new(move |g: &[T]| {
                // dA[i,p] = sum_j g[i,j] * B[p,j]; dB[p,j] = sum_i A[i,p] * g[i,j]
                let mut da = vec![T::zero(); m * k];
                let mut db = vec![T::zero(); k * n];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = T::zero();
                        for j in 0..n {
                            s = s + g[i * n + j] * bd[p * n + j];
                        }
                        da[i * k + p] = s;
                    }
                }
                for p in 0..k {
                    for j in 0..n {
                        let mut s = T::zero();
                        for i in 0..m {
                            s = s + ad[i * k + p] * g[i * n + j];
                        }
                        db[p * n + j] = s;
                    }
                }
                vec![(a.0, da), (b.0, db)]
            }))
        } else {
            None
        };
        Ok(self.push(vec![m, n], out, rg, back))
    }

    /// C = A·Bᵀ. Used for tied output projections.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul_bt: {:?} x {:?}ᵀ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let ad = self.rc(a);
        let bd = self.rc(b);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = T::zero();
                for p in 0..k {
                    s = s + ad[i * k + p] * bd[j * k + p];
                }
                out[i * n + j] = s;
            }
        }
        let rg = self.rg(&[a, b]);
        let back: Option<BackFn<T>> = if rg {
            let ad = Rc::clone(&ad);
            let bd = Rc::clone(&bd);
            Some(Box::new(move |g: &[T]| {
                // dA = g·B; dB = gᵀ·A
                let mut da = vec![T::zero(); m * k];
                let mut db = vec![T::zero(); n * k];
                for i in 0..m {
                    for j in 0..n {
                        let gv = g[i * n + j];
                        if gv == T::zero() {
                            continue;
                        }
                        for p in 0..k {
                            da[i * k + p] = da[i * k + p] + gv * bd[j * k + p];
                            db[j * k + p] = db[j * k + p] + gv * ad[i * k + p];
                        }
                    }
                }
                vec![(a.0, da), (b.0, db)]
            }))
        } else {
            None
        };
        Ok(self.push(vec![m, n], out, rg, back))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let ad = self.rc(a);
        let bd = self.rc(b);
        let out: Vec<T> = ad.iter().zip(bd.iter()).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        let back: Option<BackFn<T>> = if rg {
            Some(Box::new(move |g: &[T]| {
                vec![(a.0, g.to_vec()), (b.0, g.to_vec())]
            }))
        } else {
            None
        };
        Ok(self.push(self.nodes[a.0].shape.clone(), out, rg, back))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, T::from_f64(-1.0));
        self.add(a, nb)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "mul: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let ad = self.rc(a);
        let bd = self.rc(b);
        let out: Vec<T> = ad.iter().zip(bd.iter()).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        let back: Option<BackFn<T>> = if rg {
            let ad = Rc::clone(&ad);
            let bd = Rc::clone(&bd);
            Some(Box::new(move |g: &[T]| {
                let da = g.iter().zip(bd.iter()).map(|(&gv, &y)| gv * y).collect();
                let db = g.iter().zip(ad.iter()).map(|(&gv, &x)| gv * x).collect();
                vec![(a.0, da), (b.0, db)]
            }))
        } else {
            None
        };
        Ok(self.push(self.nodes[a.0].shape.clone(), out, rg, back))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let ad = self.rc(a);
        let out: Vec<T> = ad.iter().map(|&x| x * c).collect();
        let rg = self.nodes[a.0].requires_grad;
        let back: Option<BackFn<T>> = if rg {
            Some(Box::new(move |g: &[T]| {
                vec![(a.0, g.iter().map(|&gv| gv * c).collect())]
            }))
        } else {
            None
        };
        self.push(self.nodes[a.0].shape.clone(), out, rg, back)
    }

    /// Adds a [c] bias row to every row of an [r×c] matrix.
    pub fn add_bias(&mut self, m: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2(m)?;
        if self.nodes[bias.0].data.len() != c {
            return Err(Error::Shape(format!(
                "add_bias: matrix {:?} vs bias {:?}",
                self.shape(m),
                self.shape(bias)
            )));
        }
        let md = self.rc(m);
        let bd = self.rc(bias);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(md[i * c + j] + bd[j]);
            }
        }
        let rg = self.rg(&[m, bias]);
        let bshape = self.nodes[bias.0].shape.clone();
        let back: Option<BackFn<T>> = if rg {
            let blen = bshape.iter().product::<usize>();
            Some(Box::new(move |g: &[T]| {
                let mut db = vec![T::zero(); blen];
                for i in 0..r {
                    for j in 0..c {
                        db[j] = db[j] + g[i * c + j];
                    }
                }
                vec![(m.0, g.to_vec()), (bias.0, db)]
            }))
        } else {
            None
        };
        Ok(self.push(vec![r, c], out, rg, back))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ad = self.rc(a);
        let out: Vec<T> = ad.iter().map(|&x| x.tanh()).collect();
        let rg = self.nodes[a.0].requires_grad;
        let out_rc = Rc::new(out);
        let back: Option<BackFn<T>> = if rg {
            let y = Rc::clone(&out_rc);
            Some(Box::new(move |g: &[T]| {
                let da = g
                    .iter()
                    .zip(y.iter())
                    .map(|(&gv, &yv)| gv * (T::one() - yv * yv))
                    .collect();
                vec![(a.0, da)]
            }))
        } else {
            None
        };
        self.nodes.push(Node {
            shape: self.nodes[a.0].shape.clone(),
            data: out_rc,
            requires_grad: rg,
            back,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ad = self.rc(a);
        let out: Vec<T> = ad
            .iter()
            .map(|&x| T::one() / (T::one() + (-x).exp()))
            .collect();
        let rg = self.nodes[a.0].requires_grad;
        let out_rc = Rc::new(out);
        let back: Option<BackFn<T>> = if rg {
            let y = Rc::clone(&out_rc);
            Some(Box::new(move |g: &[T]| {
                let da = g
                    .iter()
                    .zip(y.iter())
                    .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                    .collect();
                vec![(a.0, da)]
            }))
        } else {
            None
        };
        self.nodes.push(Node {
            shape: self.nodes[a.0].shape.clone(),
            data: out_rc,
            requires_grad: rg,
            back,
        });
        Var(self.nodes.len() - 1)
    }

    /// Max-stabilized softmax over the flattened input.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ad = self.rc(a);
        if ad.is_empty() {
            return Err(Error::Domain("softmax of empty vector".into()));
        }
        let out = softmax_slice(&ad);
        let rg = self.nodes[a.0].requires_grad;
        let out_rc = Rc::new(out);
        let back: Option<BackFn<T>> = if rg {
            let y = Rc::clone(&out_rc);
            Some(Box::new(move |g: &[T]| {
                // da_i = y_i * (g_i - sum_j g_j y_j)
                let dot: T = g.iter().zip(y.iter()).map(|(&gv, &yv)| gv * yv).sum();
                let da = g
                    .iter()
                    .zip(y.iter())
                    .map(|(&gv, &yv)| yv * (gv - dot))
                    .collect();
                vec![(a.0, da)]
            }))
        } else {
            None
        };
        self.nodes.push(Node {
            shape: self.nodes[a.0].shape.clone(),
            data: out_rc,
            requires_grad: rg,
            back,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Concatenates row vectors [1×cᵢ] into [1×Σcᵢ].
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Domain("concat of no parts".into()));
        }
        let mut out = Vec::new();
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let d = self.rc(p);
            lens.push(d.len());
            out.extend_from_slice(&d);
        }
        let total = out.len();
        let rg = self.rg(parts);
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let back: Option<BackFn<T>> = if rg {
            Some(Box::new(move |g: &[T]| {
                let mut res = Vec::with_capacity(ids.len());
                let mut off = 0;
                for (&id, &len) in ids.iter().zip(lens.iter()) {
                    res.push((id, g[off..off + len].to_vec()));
                    off += len;
                }
                res
            }))
        } else {
            None
        };
        Ok(self.push(vec![1, total], out, rg, back))
    }

    /// Stacks row vectors [1×d] into a matrix [n×d].
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::Domain("stack of no rows".into()));
        }
        let d = self.rc(rows[0]).len();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            let rd = self.rc(r);
            if rd.len() != d {
                return Err(Error::Shape("stack_rows: ragged rows".into()));
            }
            out.extend_from_slice(&rd);
        }
        let rg = self.rg(rows);
        let ids: Vec<usize> = rows.iter().map(|v| v.0).collect();
        let back: Option<BackFn<T>> = if rg {
            Some(Box::new(move |g: &[T]| {
                ids.iter()
                    .enumerate()
                    .map(|(i, &id)| (id, g[i * d..(i + 1) * d].to_vec()))
                    .collect()
            }))
        } else {
            None
        };
        Ok(self.push(vec![rows.len(), d], out, rg, back))
    }

    /// Row lookup into an [r×c] table; backward scatter-adds into the row.
    pub fn row(&mut self, table: Var, idx: usize) -> Result<Var> {
        let (r, c) = self.dims2(table)?;
        if idx >= r {
            return Err(Error::Index(format!("row {idx} out of {r}")));
        }
        let td = self.rc(table);
        let out = td[idx * c..(idx + 1) * c].to_vec();
        let rg = self.nodes[table.0].requires_grad;
        let back: Option<BackFn<T>> = if rg {
            Some(Box::new(move |g: &[T]| {
                let mut dt = vec![T::zero(); r * c];
                dt[idx * c..(idx + 1) * c].copy_from_slice(g);
                vec![(table.0, dt)]
            }))
        } else {
            None
        };
        Ok(self.push(vec![1, c], out, rg, back))
    }

    /// Scalar sum of all elements.
    pub fn sum(&mut self, a: Var) -> Var {
        let ad = self.rc(a);
        let s: T = ad.iter().copied().sum();
        let n = ad.len();
        let rg = self.nodes[a.0].requires_grad;
        let back: Option<BackFn<T>> = if rg {
            Some(Box::new(move |g: &[T]| vec![(a.0, vec![g[0]; n])]))
        } else {
            None
        };
        self.push(vec![1], vec![s], rg, back)
    }

    /// Multiplies a vector by one element of another tensor:
    /// out = s[idx] * a, with gradients to both.
    pub fn scale_by_elem(&mut self, a: Var, s: Var, idx: usize) -> Result<Var> {
        let sd = self.rc(s);
        if idx >= sd.len() {
            return Err(Error::Index(format!("elem {idx} out of {}", sd.len())));
        }
        let ad = self.rc(a);
        let w = sd[idx];
        let out: Vec<T> = ad.iter().map(|&x| x * w).collect();
        let rg = self.rg(&[a, s]);
        let slen = sd.len();
        let back: Option<BackFn<T>> = if rg {
            let ad = Rc::clone(&ad);
            Some(Box::new(move |g: &[T]| {
                let da = g.iter().map(|&gv| gv * w).collect();
                let mut ds = vec![T::zero(); slen];
                ds[idx] = g.iter().zip(ad.iter()).map(|(&gv, &x)| gv * x).sum();
                vec![(a.0, da), (s.0, ds)]
            }))
        } else {
            None
        };
        Ok(self.push(self.nodes[a.0].shape.clone(), out, rg, back))
    }

    /// Inverted dropout: keeps each element with probability 1-rate and
    /// rescales by 1/(1-rate). The mask comes from the caller's seeded
    /// generator so runs are reproducible.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Domain(format!("dropout rate {rate} not in [0,1)")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let n = self.nodes[a.0].data.len();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let m = self.constant(shape, mask);
        self.mul(a, m)
    }

    /// Mean over rows of −log softmax(logits_t)[target_t].
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (t, v) = self.dims2(logits)?;
        if t != targets.len() {
            return Err(Error::Shape(format!(
                "cross_entropy: {t} logit rows vs {} targets",
                targets.len()
            )));
        }
        for (i, &y) in targets.iter().enumerate() {
            if y >= v {
                return Err(Error::Index(format!(
                    "target id {y} at step {i} out of vocab {v}"
                )));
            }
        }
        let ld = self.rc(logits);
        let mut probs = Vec::with_capacity(t * v);
        let mut loss = T::zero();
        for i in 0..t {
            let row = softmax_slice(&ld[i * v..(i + 1) * v]);
            loss = loss - row[targets[i]].max(T::min_positive_value()).ln();
            probs.extend_from_slice(&row);
        }
        loss = loss / T::from_f64(t as f64);
        let rg = self.nodes[logits.0].requires_grad;
        let tv = targets.to_vec();
        let back: Option<BackFn<T>> = if rg {
            Some(Box::new(move |g: &[T]| {
                let gt = g[0] / T::from_f64(t as f64);
                let mut dl = probs.clone();
                for (i, &y) in tv.iter().enumerate() {
                    dl[i * v + y] = dl[i * v + y] - T::one();
                }
                for x in dl.iter_mut() {
                    *x = *x * gt;
                }
                vec![(logits.0, dl)]
            }))
        } else {
            None
        };
        Ok(self.push(vec![1], vec![loss], rg, back))
    }

    /// Test fixture with a deliberately wrong derivative; used as a
    /// negative control for the gradient checker.
    #[doc(hidden)]
    pub fn tanh_corrupted(&mut self, a: Var) -> Var {
        let ad = self.rc(a);
        let out: Vec<T> = ad.iter().map(|&x| x.tanh()).collect();
        let rg = self.nodes[a.0].requires_grad;
        let back: Option<BackFn<T>> = if rg {
            Some(Box::new(move |g: &[T]| {
                vec![(a.0, g.to_vec())] // wrong: ignores 1 - tanh²
            }))
        } else {
            None
        };
        self.push(self.nodes[a.0].shape.clone(), out, rg, back)
    }

    /// Populates gradients for every requires_grad leaf reachable from
    /// a scalar loss. Gradients are then available via [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].clone() else { continue };
            if let Some(back) = &self.nodes[id].back {
                for (pid, contrib) in back(&g) {
                    if !self.nodes[pid].requires_grad && self.nodes[pid].back.is_none() {
                        continue;
                    }
                    match &mut grads[pid] {
                        Some(acc) => {
                            for (x, c) in acc.iter_mut().zip(contrib) {
                                *x = *x + c;
                            }
                        }
                        slot => *slot = Some(contrib),
                    }
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass for `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

pub(crate) fn softmax_slice<T: Real>(v: &[T]) -> Vec<T> {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Standalone softmax over a plain slice.
pub fn softmax<T: Real>(v: &[T]) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(Error::Domain("softmax of empty vector".into()));
    }
    Ok(softmax_slice(v))
}

/// Central-difference gradient verification. Builds the graph twice to
/// detect non-determinism, takes analytic gradients by backward, then
/// perturbs every coordinate of every parameter by ±epsilon. Returns
/// the max over coordinates of |analytic−numeric| / max(|analytic|,
/// |numeric|, 1e-8).
pub fn grad_check<T, F>(f: F, params: &[Tensor<T>], epsilon: T) -> Result<T>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if epsilon <= T::zero() {
        return Err(Error::Domain("epsilon must be positive".into()));
    }
    let run = |ps: &[Tensor<T>]| -> Result<(Tape<T>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps
            .iter()
            .map(|p| {
                let mut p = p.clone();
                p.requires_grad = true;
                tape.leaf(&p)
            })
            .collect();
        let loss = f(&mut tape, &vars)?;
        if tape.data(loss).len() != 1 {
            return Err(Error::Contract("grad_check function must be scalar".into()));
        }
        Ok((tape, vars, loss))
    };

    let (mut tape, vars, loss) = run(params)?;
    let (tape2, _, loss2) = run(params)?;
    if tape.data(loss)[0] != tape2.data(loss2)[0] {
        return Err(Error::Contract(
            "grad_check: function is not deterministic".into(),
        ));
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<T>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![T::zero(); p.numel()])
        })
        .collect();

    let floor = T::from_f64(1e-8);
    let mut max_err = T::zero();
    for (pi, p) in params.iter().enumerate() {
        for ci in 0..p.numel() {
            let mut plus: Vec<Tensor<T>> = params.to_vec();
            plus[pi].data[ci] = plus[pi].data[ci] + epsilon;
            let (tp, _, lp) = run(&plus)?;
            let mut minus: Vec<Tensor<T>> = params.to_vec();
            minus[pi].data[ci] = minus[pi].data[ci] - epsilon;
            let (tm, _, lm) = run(&minus)?;
            let numeric =
                (tp.data(lp)[0] - tm.data(lm)[0]) / (T::from_f64(2.0) * epsilon);
            let a = analytic[pi][ci];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if err > max_err {
                max_err = err;
                if std::env::var_os("GRAD_CHECK_DEBUG").is_some() {
                    eprintln!("grad_check worst so far: param {pi} coord {ci} analytic {a} numeric {numeric} err {err}");
                }
            }
        }
    }
    Ok(max_err)
}
