use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_shared: bool,
        trans_b: bool,
    },
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
        dim: usize,
    },
    Softmax {
        a: Var,
        cols: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        dim: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Dropout {
        a: Var,
        keep: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
        classes: usize,
    },
    SplitHeads {
        a: Var,
        dims: [usize; 4],
    },
    MergeHeads {
        a: Var,
        dims: [usize; 4],
    },
    Transpose {
        a: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    MaskedMeanPool {
        a: Var,
        seq: usize,
        dim: usize,
        weights: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Records operations in execution order; `backward` replays them in reverse.
///
/// A tape supports one backward pass. Afterwards the recorded operations are
/// dropped and the accumulated gradients stay readable through [`Tape::grad`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, tensor: Tensor, requires_grad: bool) -> Var {
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, tensor: &Tensor) -> Var {
        self.leaf(tensor.clone(), true)
    }

    pub fn constant(&mut self, tensor: &Tensor) -> Var {
        self.leaf(tensor.clone(), false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("consistent node")
    }

    pub fn scalar(&self, v: Var) -> Option<f64> {
        let n = &self.nodes[v.0];
        (n.value.len() == 1).then(|| n.value[0])
    }

    /// Gradient accumulated by the last backward pass, if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// `a[.., m, k] x b[k, n]` (shared weight) or `a[.., m, k] x b[.., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[.., m, k] x b[.., n, k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || shape_err("matmul", format!("{sa:?} x {sb:?} (transpose_b={trans_b})"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (bk, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if bk != k {
            return Err(err());
        }
        let lead = &sa[..sa.len() - 2];
        let batch: usize = lead.iter().product();
        let b_shared = sb.len() == 2;
        if !b_shared && &sb[..sb.len() - 2] != lead {
            return Err(err());
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            if b_shared {
                gemm(batch * m, k, n, av, false, bv, trans_b, &mut out, 0.0);
            } else {
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &av[i * m * k..],
                        false,
                        &bv[i * k * n..],
                        trans_b,
                        &mut out[i * m * n..],
                        0.0,
                    );
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_shared,
                trans_b,
            },
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Add(a, b)))
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(a).last().unwrap_or(&0);
        if self.shape(bias) != [d] {
            return Err(shape_err("add_bias", format!("{:?} + {:?}", self.shape(a), self.shape(bias))));
        }
        let bv = self.value(bias);
        let out = self
            .value(a)
            .chunks(d)
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        let rg = self.rg(&[a, bias]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::AddBias(a, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * factor).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, rg, Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![], vec![s], rg, Op::Sum(a))
    }

    /// Gathers rows of `table[vocab, dim]`; output shape `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(shape_err("embedding", format!("table must be 2-D, got {st:?}")));
        }
        let (rows, dim) = (st[0], st[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(shape_err("embedding", format!("id {bad} out of range for {rows} rows")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&tv[i * dim..(i + 1) * dim]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![ids.len(), dim],
            out,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                dim,
            },
        ))
    }

    /// Softmax over the last axis. Entries whose `mask` flag is false get
    /// probability exactly zero; a fully masked row is all zeros.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let cols = *self.shape(a).last().ok_or_else(|| shape_err("softmax", "scalar input".into()))?;
        let av = self.value(a);
        if let Some(m) = mask {
            if m.len() != av.len() {
                return Err(shape_err("softmax", format!("mask length {} vs {} values", m.len(), av.len())));
            }
        }
        let mut out = vec![0.0; av.len()];
        for (r, (row, orow)) in av.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let keep = |j: usize| mask.is_none_or(|m| m[r * cols + j]);
            let max = (0..cols).filter(|&j| keep(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for j in 0..cols {
                if keep(j) {
                    let e = (row[j] - max).exp();
                    orow[j] = e;
                    total += e;
                }
            }
            orow.iter_mut().for_each(|v| *v /= total);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Softmax { a, cols }))
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let dim = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gain) != [dim] || self.shape(bias) != [dim] {
            return Err(shape_err(
                "layer_norm",
                format!("{:?} with gain {:?}, bias {:?}", self.shape(x), self.shape(gain), self.shape(bias)),
            ));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let rows = xv.len() / dim.max(1);
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * dim..(r + 1) * dim];
            let mean = row.iter().sum::<f64>() / dim as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..dim {
                let h = (row[j] - mean) * is;
                xhat[r * dim + j] = h;
                out[r * dim + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                dim,
                xhat,
                inv_std,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, rg, Op::Gelu(a))
    }

    /// Inverted dropout. The mask is a function of `(seed, call_index)` only;
    /// a zero rate is the identity and records nothing.
    pub fn dropout(&mut self, a: Var, rate: f64, seed: u64, call_index: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidInput(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(call_index);
        let scale = 1.0 / (1.0 - rate);
        let keep: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let out = self.value(a).iter().zip(&keep).map(|(x, k)| x * k).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Dropout { a, keep }))
    }

    /// Mean negative log-likelihood over rows whose `mask` flag is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Contract("cross_entropy needs at least one target position".into()));
        }
        let w = 1.0 / count as f64;
        let weights: Vec<f64> = mask.iter().map(|&m| if m { w } else { 0.0 }).collect();
        self.cross_entropy_weighted(logits, targets, &weights)
    }

    /// `sum_r weights[r] * -log softmax(logits[r])[targets[r]]`; rows with
    /// zero weight are skipped entirely.
    pub fn cross_entropy_weighted(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let classes = *self.shape(logits).last().unwrap_or(&0);
        let lv = self.value(logits);
        let rows = lv.len() / classes.max(1);
        if targets.len() != rows || weights.len() != rows {
            return Err(shape_err(
                "cross_entropy",
                format!("{rows} logit rows, {} targets, {} weights", targets.len(), weights.len()),
            ));
        }
        let mut probs = vec![0.0; lv.len()];
        let mut loss = 0.0;
        for r in 0..rows {
            if weights[r] == 0.0 {
                continue;
            }
            let t = targets[r];
            if t >= classes {
                return Err(shape_err("cross_entropy", format!("target {t} out of range for {classes} classes")));
            }
            let row = &lv[r * classes..(r + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + total.ln();
            loss += weights[r] * (lse - row[t]);
            for j in 0..classes {
                probs[r * classes + j] = (row[j] - lse).exp();
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![],
            vec![loss],
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                classes,
            },
        ))
    }

    /// `[batch * seq, heads * head_dim]` to `[batch, heads, seq, head_dim]`.
    pub fn split_heads(&mut self, a: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let total = self.value(a).len();
        if heads == 0 || batch * seq == 0 || !total.is_multiple_of(batch * seq * heads) {
            return Err(shape_err("split_heads", format!("{s:?} into {batch}x{seq} with {heads} heads")));
        }
        let hd = total / (batch * seq * heads);
        let dims = [batch, seq, heads, hd];
        let av = self.value(a);
        let mut out = vec![0.0; total];
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let src = ((b * seq + t) * heads + h) * hd;
                    let dst = ((b * heads + h) * seq + t) * hd;
                    out[dst..dst + hd].copy_from_slice(&av[src..src + hd]);
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![batch, heads, seq, hd], out, rg, Op::SplitHeads { a, dims }))
    }

    /// Inverse of [`Tape::split_heads`]: `[batch, heads, seq, hd]` to `[batch * seq, heads * hd]`.
    pub fn merge_heads(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(shape_err("merge_heads", format!("expected 4-D input, got {s:?}")));
        }
        let (batch, heads, seq, hd) = (s[0], s[1], s[2], s[3]);
        let av = self.value(a);
        let mut out = vec![0.0; av.len()];
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let dst = ((b * seq + t) * heads + h) * hd;
                    let src = ((b * heads + h) * seq + t) * hd;
                    out[dst..dst + hd].copy_from_slice(&av[src..src + hd]);
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            vec![batch * seq, heads * hd],
            out,
            rg,
            Op::MergeHeads {
                a,
                dims: [batch, seq, heads, hd],
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(shape_err("transpose", format!("needs at least 2 axes, got {s:?}")));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let batch: usize = s[..s.len() - 2].iter().product();
        let av = self.value(a);
        let mut out = vec![0.0; av.len()];
        for b in 0..batch {
            let off = b * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    out[off + j * rows + i] = av[off + i * cols + j];
                }
            }
        }
        let mut shape = s.clone();
        let n = shape.len();
        shape.swap(n - 1, n - 2);
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, rg, Op::Transpose { a, batch, rows, cols }))
    }

    /// Mean over valid sequence positions: `[batch * seq, dim]` to `[batch, dim]`.
    pub fn masked_mean_pool(&mut self, a: Var, batch: usize, valid: &[bool]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || batch == 0 || !s[0].is_multiple_of(batch) || valid.len() != s[0] {
            return Err(shape_err("masked_mean_pool", format!("{s:?} with batch {batch}, {} flags", valid.len())));
        }
        let (seq, dim) = (s[0] / batch, s[1]);
        let mut weights = vec![0.0; s[0]];
        for b in 0..batch {
            let n = valid[b * seq..(b + 1) * seq].iter().filter(|&&v| v).count();
            if n == 0 {
                return Err(Error::Contract(format!("sequence {b} has no valid positions to pool")));
            }
            for t in 0..seq {
                if valid[b * seq + t] {
                    weights[b * seq + t] = 1.0 / n as f64;
                }
            }
        }
        let av = self.value(a);
        let mut out = vec![0.0; batch * dim];
        for (r, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                let b = r / seq;
                for j in 0..dim {
                    out[b * dim + j] += w * av[r * dim + j];
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            vec![batch, dim],
            out,
            rg,
            Op::MaskedMeanPool {
                a,
                seq,
                dim,
                weights,
            },
        ))
    }

    /// Reverse pass from a scalar. Populates gradients of every value that
    /// requires them, then drops the recorded operations.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract(
                "backward already ran on this tape; record a fresh forward pass".into(),
            ));
        }
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        for n in &mut self.nodes {
            n.op = Op::Leaf;
        }
        self.consumed = true;
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let needs = |v: &Var| nodes[v.0].requires_grad;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_shared,
                trans_b,
            } => {
                let (batch, m, k, n, b_shared, trans_b) = (*batch, *m, *k, *n, *b_shared, *trans_b);
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if let Some(ga) = acc(nodes, grads, *a) {
                    if b_shared {
                        // dA = dC * op(B)^T
                        gemm(batch * m, n, k, g, false, bv, !trans_b, ga, 1.0);
                    } else {
                        for t in 0..batch {
                            gemm(m, n, k, &g[t * m * n..], false, &bv[t * k * n..], !trans_b, &mut ga[t * m * k..], 1.0);
                        }
                    }
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    let (rows, inner) = if b_shared { (batch * m, 1) } else { (m, batch) };
                    for t in 0..inner {
                        let (ga_off, gc_off, gb_off) = (t * m * k, t * m * n, t * k * n);
                        if trans_b {
                            // dB[n, k] = dC^T * A
                            gemm(n, rows, k, &g[gc_off..], true, &av[ga_off..], false, &mut gb[gb_off..], 1.0);
                        } else {
                            // dB[k, n] = A^T * dC
                            gemm(k, rows, n, &av[ga_off..], true, &g[gc_off..], false, &mut gb[gb_off..], 1.0);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = acc(nodes, grads, *v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddBias(a, bias) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = acc(nodes, grads, *bias) {
                    let d = gb.len();
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(ga) = acc(nodes, grads, *a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[j];
                    }
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    for j in 0..g.len() {
                        gb[j] += g[j] * av[j];
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * f);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Embedding { table, ids, dim } => {
                if let Some(gt) = acc(nodes, grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * dim..(r + 1) * dim];
                        gt[id * dim..(id + 1) * dim].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Softmax { a, cols } => {
                let y = &nodes[i].value;
                let cols = *cols;
                if let Some(ga) = acc(nodes, grads, *a) {
                    for r in 0..y.len() / cols {
                        let ys = &y[r * cols..(r + 1) * cols];
                        let gs = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = ys.iter().zip(gs).map(|(p, q)| p * q).sum();
                        for j in 0..cols {
                            ga[r * cols + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                dim,
                xhat,
                inv_std,
            } => {
                let dim = *dim;
                let gv = &nodes[gain.0].value;
                if needs(x) {
                    let mut dx = vec![0.0; g.len()];
                    let mut dxhat = vec![0.0; dim];
                    for r in 0..inv_std.len() {
                        let off = r * dim;
                        let (mut m1, mut m2) = (0.0, 0.0);
                        for j in 0..dim {
                            dxhat[j] = g[off + j] * gv[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat[off + j];
                        }
                        m1 /= dim as f64;
                        m2 /= dim as f64;
                        for j in 0..dim {
                            dx[off + j] = inv_std[r] * (dxhat[j] - m1 - xhat[off + j] * m2);
                        }
                    }
                    let gx = acc(nodes, grads, *x).expect("requires grad");
                    gx.iter_mut().zip(&dx).for_each(|(p, q)| *p += q);
                }
                if let Some(gg) = acc(nodes, grads, *gain) {
                    for (r, row) in g.chunks(dim).enumerate() {
                        for j in 0..dim {
                            gg[j] += row[j] * xhat[r * dim + j];
                        }
                    }
                }
                if let Some(gb) = acc(nodes, grads, *bias) {
                    for row in g.chunks(dim) {
                        gb.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                    }
                }
            }
            Op::Gelu(a) => {
                let av = &nodes[a.0].value;
                if let Some(ga) = acc(nodes, grads, *a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * gelu_grad(av[j]);
                    }
                }
            }
            Op::Dropout { a, keep } => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * keep[j];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                classes,
            } => {
                let c = *classes;
                if let Some(gl) = acc(nodes, grads, *logits) {
                    for (r, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let s = g[0] * w;
                        for j in 0..c {
                            gl[r * c + j] += s * probs[r * c + j];
                        }
                        gl[r * c + targets[r]] -= s;
                    }
                }
            }
            Op::SplitHeads { a, dims } => {
                let [batch, seq, heads, hd] = *dims;
                if let Some(ga) = acc(nodes, grads, *a) {
                    for b in 0..batch {
                        for t in 0..seq {
                            for h in 0..heads {
                                let src = ((b * seq + t) * heads + h) * hd;
                                let dst = ((b * heads + h) * seq + t) * hd;
                                for d in 0..hd {
                                    ga[src + d] += g[dst + d];
                                }
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { a, dims } => {
                let [batch, seq, heads, hd] = *dims;
                if let Some(ga) = acc(nodes, grads, *a) {
                    for b in 0..batch {
                        for t in 0..seq {
                            for h in 0..heads {
                                let dst = ((b * seq + t) * heads + h) * hd;
                                let src = ((b * heads + h) * seq + t) * hd;
                                for d in 0..hd {
                                    ga[src + d] += g[dst + d];
                                }
                            }
                        }
                    }
                }
            }
            Op::Transpose { a, batch, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                if let Some(ga) = acc(nodes, grads, *a) {
                    for b in 0..*batch {
                        let off = b * rows * cols;
                        for r in 0..rows {
                            for c in 0..cols {
                                ga[off + r * cols + c] += g[off + c * rows + r];
                            }
                        }
                    }
                }
            }
            Op::MaskedMeanPool {
                a,
                seq,
                dim,
                weights,
            } => {
                let (seq, dim) = (*seq, *dim);
                if let Some(ga) = acc(nodes, grads, *a) {
                    for (r, &w) in weights.iter().enumerate() {
                        if w != 0.0 {
                            let b = r / seq;
                            for j in 0..dim {
                                ga[r * dim + j] += w * g[b * dim + j];
                            }
                        }
                    }
                }
            }
        }
    }
}
