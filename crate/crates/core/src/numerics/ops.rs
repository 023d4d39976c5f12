//! Differentiable primitives recorded on a [`Tape`].
//!
//! Matrix-shaped ops view their inputs as `[rows × last_dim]`, so token
//! batches are passed flattened as `[B·T × D]`.

use super::kernels::gemm;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{dim_err, Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Tape {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value_rc(a), self.value_rc(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return dim_err("matmul", av.shape(), bv.shape());
        }
        let (p, q, r) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; p * r];
        gemm(p, q, r, 1.0, av.data(), q, 1, bv.data(), r, 1, 0.0, &mut out, r);
        let value = Tensor::new(vec![p, r], out)?;
        Ok(self.push(value, &[a, b], move |g, sink| {
            if sink.wants(a) {
                // dA = G · Bᵀ
                gemm(p, r, q, 1.0, g, r, 1, bv.data(), 1, r, 1.0, sink.buf(a), q);
            }
            if sink.wants(b) {
                // dB = Aᵀ · G
                gemm(q, p, r, 1.0, av.data(), 1, q, g, r, 1, 1.0, sink.buf(b), r);
            }
        }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return dim_err("add", av.shape(), bv.shape());
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, &[a, b], move |g, sink| {
            sink.add(a, g);
            sink.add(b, g);
        }))
    }

    /// `x[.., d] + bias[d]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let d = xv.last_dim();
        if bv.len() != d {
            return dim_err("add_bias", xv.shape(), bv.shape());
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, &[x, bias], move |g, sink| {
            sink.add(x, g);
            if sink.wants(bias) {
                let gb = sink.buf(bias);
                for row in g.chunks(d) {
                    for (a, b) in gb.iter_mut().zip(row) {
                        *a += b;
                    }
                }
            }
        }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, &[x], move |g, sink| {
            if sink.wants(x) {
                for (a, b) in sink.buf(x).iter_mut().zip(g) {
                    *a += c * b;
                }
            }
        })
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value_rc(a), self.value_rc(b));
        if av.shape() != bv.shape() {
            return dim_err("mul", av.shape(), bv.shape());
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, &[a, b], move |g, sink| {
            if sink.wants(a) {
                for ((s, gi), y) in sink.buf(a).iter_mut().zip(g).zip(bv.data()) {
                    *s += gi * y;
                }
            }
            if sink.wants(b) {
                for ((s, gi), x) in sink.buf(b).iter_mut().zip(g).zip(av.data()) {
                    *s += gi * x;
                }
            }
        }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), &[x], move |g, sink| {
            if sink.wants(x) {
                for a in sink.buf(x) {
                    *a += g[0];
                }
            }
        })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Metadata-only reshape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, &[x], move |g, sink| sink.add(x, g)))
    }

    /// Per-vector normalisation over the last axis, then `gamma·x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Argument(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (xv, gv, bv) = (self.value(x), self.value_rc(gamma), self.value(beta));
        let d = xv.last_dim();
        if gv.len() != d || bv.len() != d {
            return dim_err("layer_norm", xv.shape(), gv.shape());
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mu) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(value, &[x, gamma, beta], move |g, sink| {
            if sink.wants(gamma) {
                let gg = sink.buf(gamma);
                for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] += grow[j] * hrow[j];
                    }
                }
            }
            if sink.wants(beta) {
                let gb = sink.buf(beta);
                for grow in g.chunks(d) {
                    for j in 0..d {
                        gb[j] += grow[j];
                    }
                }
            }
            if sink.wants(x) {
                let gx = sink.buf(x);
                let mut dh = vec![0.0; d];
                for r in 0..rows {
                    let grow = &g[r * d..(r + 1) * d];
                    let hrow = &xhat[r * d..(r + 1) * d];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        dh[j] = grow[j] * gv.data()[j];
                        m1 += dh[j];
                        m2 += dh[j] * hrow[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        gx[r * d + j] += rstd[r] * (dh[j] - m1 - hrow[j] * m2);
                    }
                }
            }
        }))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value_rc(x);
        let value = xv.map(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()));
        self.push(value, &[x], move |g, sink| {
            if sink.wants(x) {
                for ((a, gi), &v) in sink.buf(x).iter_mut().zip(g).zip(xv.data()) {
                    let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    *a += gi * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                }
            }
        })
    }

    /// Multiplies row `i` by the constant `w[i]`; no gradient flows to `w`.
    pub fn scale_rows(&mut self, x: Var, w: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if w.len() != xv.rows() {
            return dim_err("scale_rows", xv.shape(), &[w.len()]);
        }
        let mut data = xv.data().to_vec();
        for (row, &wi) in data.chunks_mut(d).zip(w) {
            for v in row {
                *v *= wi;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let w = w.to_vec();
        Ok(self.push(value, &[x], move |g, sink| {
            if sink.wants(x) {
                let gx = sink.buf(x);
                for ((grow, arow), &wi) in g.chunks(d).zip(gx.chunks_mut(d)).zip(&w) {
                    for (a, gi) in arow.iter_mut().zip(grow) {
                        *a += wi * gi;
                    }
                }
            }
        }))
    }

    /// Rows scaled to unit L2 norm. A zero row is a numeric error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut out = xv.data().to_vec();
        let mut norms = Vec::with_capacity(xv.rows());
        for (r, row) in out.chunks_mut(d).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Numeric(format!("row {r} has norm {n}")));
            }
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let value = Tensor::new(xv.shape().to_vec(), out.clone())?;
        Ok(self.push(value, &[x], move |g, sink| {
            if sink.wants(x) {
                let gx = sink.buf(x);
                for r in 0..norms.len() {
                    let y = &out[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] += (gr[j] - y[j] * dot) / norms[r];
                    }
                }
            }
        }))
    }

    /// Mean of `-log softmax(logits)[i, labels[i]]` over rows.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 || lv.shape()[0] != labels.len() {
            return dim_err("softmax_cross_entropy", lv.shape(), &[labels.len()]);
        }
        let (n, c) = (lv.shape()[0], lv.shape()[1]);
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= c) {
            return Err(Error::Index(format!("label {y} at row {i} not in [0, {c})")));
        }
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &lv.data()[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            loss += lse - row[labels[i]];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        loss /= n as f64;
        let labels = labels.to_vec();
        Ok(self.push(Tensor::scalar(loss), &[logits], move |g, sink| {
            if sink.wants(logits) {
                let gl = sink.buf(logits);
                let s = g[0] / n as f64;
                for i in 0..n {
                    for j in 0..c {
                        let t = if j == labels[i] { 1.0 } else { 0.0 };
                        gl[i * c + j] += s * (probs[i * c + j] - t);
                    }
                }
            }
        }))
    }

    /// Prepends `cls[D]` to each of the `batch` token groups of
    /// `x[batch·M × D]`, giving `[batch·(M+1) × D]`.
    pub fn insert_cls(&mut self, x: Var, cls: Var, batch: usize) -> Result<Var> {
        let (xv, cv) = (self.value(x), self.value(cls));
        let d = xv.last_dim();
        if cv.len() != d || batch == 0 || xv.rows() % batch != 0 {
            return dim_err("insert_cls", xv.shape(), cv.shape());
        }
        let m = xv.rows() / batch;
        let t = m + 1;
        let mut out = Vec::with_capacity(batch * t * d);
        for b in 0..batch {
            out.extend_from_slice(cv.data());
            out.extend_from_slice(&xv.data()[b * m * d..(b + 1) * m * d]);
        }
        let value = Tensor::new(vec![batch * t, d], out)?;
        Ok(self.push(value, &[x, cls], move |g, sink| {
            if sink.wants(x) {
                let gx = sink.buf(x);
                for b in 0..batch {
                    let src = &g[(b * t + 1) * d..(b + 1) * t * d];
                    for (a, v) in gx[b * m * d..(b + 1) * m * d].iter_mut().zip(src) {
                        *a += v;
                    }
                }
            }
            if sink.wants(cls) {
                let gc = sink.buf(cls);
                for b in 0..batch {
                    for (a, v) in gc.iter_mut().zip(&g[b * t * d..(b * t + 1) * d]) {
                        *a += v;
                    }
                }
            }
        }))
    }

    /// Rows `idx` of `x` stacked into `[idx.len() × D]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let rows = xv.rows();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= rows {
                return Err(Error::Index(format!("row {i} of {rows}")));
            }
            out.extend_from_slice(xv.row(i));
        }
        let value = Tensor::new(vec![idx.len(), d], out)?;
        let idx = idx.to_vec();
        Ok(self.push(value, &[x], move |g, sink| {
            if sink.wants(x) {
                let gx = sink.buf(x);
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        gx[i * d + j] += g[k * d + j];
                    }
                }
            }
        }))
    }

    /// Fused multi-head scaled dot-product attention over `batch` sequences
    /// of length `seq`. `q`, `k`, `v` are `[batch·seq × D]` with heads laid
    /// out as contiguous column blocks.
    ///
    /// With `isolate_cls`, token 0 attends only to itself and the other
    /// tokens never attend to token 0.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        isolate_cls: bool,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value_rc(q), self.value_rc(k), self.value_rc(v));
        let d = qv.last_dim();
        for t in [&kv, &vv] {
            if t.shape() != qv.shape() {
                return dim_err("attention", qv.shape(), t.shape());
            }
        }
        if qv.rows() != batch * seq || heads == 0 || d % heads != 0 {
            return dim_err("attention", qv.shape(), &[batch, seq, heads]);
        }
        if isolate_cls && seq < 2 {
            return Err(Error::Argument("isolate_cls needs at least two tokens".into()));
        }
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let tt = seq * seq;
        let mut probs = vec![0.0; batch * heads * tt];
        let mut out = vec![0.0; batch * seq * d];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * hd;
                let p = &mut probs[(b * heads + h) * tt..(b * heads + h + 1) * tt];
                // S = Q Kᵀ · scale
                gemm(seq, hd, seq, scale, &qv.data()[off..], d, 1, &kv.data()[off..], 1, d, 0.0, p, seq);
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    if isolate_cls {
                        if i == 0 {
                            row[1..].iter_mut().for_each(|s| *s = f64::NEG_INFINITY);
                        } else {
                            row[0] = f64::NEG_INFINITY;
                        }
                    }
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for s in row.iter_mut() {
                        *s = (*s - m).exp();
                        z += *s;
                    }
                    row.iter_mut().for_each(|s| *s /= z);
                }
                gemm(seq, seq, hd, 1.0, p, seq, 1, &vv.data()[off..], d, 1, 0.0, &mut out[off..], d);
            }
        }
        let value = Tensor::new(qv.shape().to_vec(), out)?;
        Ok(self.push(value, &[q, k, v], move |g, sink| {
            let (wq, wk, wv) = (sink.wants(q), sink.wants(k), sink.wants(v));
            let mut dp = vec![0.0; tt];
            for b in 0..batch {
                for h in 0..heads {
                    let off = b * seq * d + h * hd;
                    let p = &probs[(b * heads + h) * tt..(b * heads + h + 1) * tt];
                    if wv {
                        // dV = Pᵀ dO
                        gemm(seq, seq, hd, 1.0, p, 1, seq, &g[off..], d, 1, 1.0, &mut sink.buf(v)[off..], d);
                    }
                    if !(wq || wk) {
                        continue;
                    }
                    // dP = dO Vᵀ
                    gemm(seq, hd, seq, 1.0, &g[off..], d, 1, &vv.data()[off..], 1, d, 0.0, &mut dp, seq);
                    // dS = P ⊙ (dP − rowsum(dP ⊙ P))
                    for i in 0..seq {
                        let pr = &p[i * seq..(i + 1) * seq];
                        let dr = &mut dp[i * seq..(i + 1) * seq];
                        let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                        for (x, &pv) in dr.iter_mut().zip(pr) {
                            *x = pv * (*x - dot);
                        }
                    }
                    if wq {
                        gemm(
                            seq,
                            seq,
                            hd,
                            scale,
                            &dp,
                            seq,
                            1,
                            &kv.data()[off..],
                            d,
                            1,
                            1.0,
                            &mut sink.buf(q)[off..],
                            d,
                        );
                    }
                    if wk {
                        gemm(
                            seq,
                            seq,
                            hd,
                            scale,
                            &dp,
                            1,
                            seq,
                            &qv.data()[off..],
                            d,
                            1,
                            1.0,
                            &mut sink.buf(k)[off..],
                            d,
                        );
                    }
                }
            }
        }))
    }
}
