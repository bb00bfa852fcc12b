use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::attention::{attention_backward, attention_weights, AttentionConstraint};
use super::{bce_sum, ConstraintSet, HeadFamily, HeadGates, HeadId, Model, Params};
use crate::corpus::{Document, TokenId};
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Mat};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    /// Inverted-dropout multipliers for `n` activations.
    fn mask(&mut self, n: usize) -> Vec<f64> {
        let keep = 1.0 - self.rate;
        (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect()
    }
}

fn apply_mask(m: &mut Mat, mask: &[f64]) {
    for (x, k) in m.data.iter_mut().zip(mask) {
        *x *= k;
    }
}

struct HeadCache {
    alpha: Mat,
    /// Ungated head output `α·V_h`.
    out: Mat,
    fixed: bool,
    gate: f64,
}

struct AttnCache {
    q: Mat,
    k: Mat,
    v: Mat,
    heads: Vec<HeadCache>,
    /// Gated head outputs, concatenated.
    concat: Mat,
}

struct LnCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

struct PalCache {
    proj: Mat,
    attn: AttnCache,
    mixed: Mat,
}

struct LayerCache {
    input: Mat,
    attn: AttnCache,
    drop_attn: Option<Vec<f64>>,
    ln1: LnCache,
    h1: Mat,
    z: Mat,
    gz: Mat,
    drop_ffn: Option<Vec<f64>>,
    ln2: LnCache,
    pal: Option<PalCache>,
}

/// Everything a forward pass produced, kept for inspection and for the
/// backward pass.
pub struct ForwardTrace {
    pub logits: Vec<f64>,
    tokens: Vec<TokenId>,
    bos: Vec<usize>,
    drop_embed: Option<Vec<f64>>,
    layers: Vec<LayerCache>,
    output: Mat,
}

impl ForwardTrace {
    /// Number of positions the pass covered.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn head(&self, h: HeadId) -> Option<&HeadCache> {
        let layer = self.layers.get(h.layer)?;
        match h.family {
            HeadFamily::Encoder => layer.attn.heads.get(h.head),
            HeadFamily::Pal => layer.pal.as_ref()?.attn.heads.get(h.head),
        }
    }

    /// Attention weights `α` of one head (`n×n`, row-stochastic).
    pub fn attention(&self, h: HeadId) -> Option<&Mat> {
        self.head(h).map(|c| &c.alpha)
    }

    /// Gated head output `ξ_h · α·V_h`, before the output projection.
    pub fn head_output(&self, h: HeadId) -> Option<Mat> {
        self.head(h).map(|c| {
            let mut m = c.out.clone();
            m.scale(c.gate);
            m
        })
    }

    /// Final hidden states.
    pub fn hidden(&self) -> &Mat {
        &self.output
    }
}

/// Gradients of the loss with respect to every parameter and every gate.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Params,
    pub gates: HeadGates,
    pub loss: f64,
}

fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_C * (z + GELU_A * z * z * z)).tanh())
}

fn gelu_grad(z: f64) -> f64 {
    let t = (GELU_C * (z + GELU_A * z * z * z)).tanh();
    0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * z * z)
}

fn layer_norm(x: &Mat, g: &Mat, b: &Mat) -> (Mat, LnCache) {
    let d = x.cols as f64;
    let mut y = Mat::zeros(x.rows, x.cols);
    let mut xhat = Mat::zeros(x.rows, x.cols);
    let mut inv_std = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        for j in 0..x.cols {
            let h = (row[j] - mean) * inv;
            xhat[(i, j)] = h;
            y[(i, j)] = g.data[j] * h + b.data[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(dy: &Mat, cache: &LnCache, g: &Mat) -> (Mat, Mat, Mat) {
    let d = dy.cols as f64;
    let mut dx = Mat::zeros(dy.rows, dy.cols);
    let mut dg = Mat::zeros(1, dy.cols);
    let mut db = Mat::zeros(1, dy.cols);
    for i in 0..dy.rows {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for j in 0..dy.cols {
            dg.data[j] += dyr[j] * xh[j];
            db.data[j] += dyr[j];
            let dxh = dyr[j] * g.data[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[j];
        }
        mean_dxh /= d;
        mean_dxh_xh /= d;
        let inv = cache.inv_std[i];
        for j in 0..dy.cols {
            let dxh = dyr[j] * g.data[j];
            dx[(i, j)] = inv * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
    (dx, dg, db)
}

fn linear(x: &Mat, w: &Mat, b: Option<&Mat>) -> Mat {
    let mut y = x.matmul(w);
    if let Some(b) = b {
        y.add_row_vector(&b.data);
    }
    y
}

fn multi_head(
    q: Mat,
    k: Mat,
    v: Mat,
    n_heads: usize,
    constraints: &[Option<&AttentionConstraint>],
    gates: &[f64],
) -> AttnCache {
    let dh = q.cols / n_heads;
    let mut concat = Mat::zeros(q.rows, q.cols);
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let c = constraints[h].unwrap_or(&AttentionConstraint::Free);
        let qh = q.column_block(h * dh, dh);
        let kh = k.column_block(h * dh, dh);
        let vh = v.column_block(h * dh, dh);
        let alpha = attention_weights(&qh, &kh, c);
        let out = alpha.matmul(&vh);
        let mut gated = out.clone();
        gated.scale(gates[h]);
        concat.set_column_block(h * dh, &gated);
        heads.push(HeadCache {
            alpha,
            out,
            fixed: c.is_fixed(),
            gate: gates[h],
        });
    }
    AttnCache {
        q,
        k,
        v,
        heads,
        concat,
    }
}

/// Backward through the per-head attention of one block. Returns
/// `(dQ, dK, dV, dgates)`.
fn multi_head_backward(cache: &AttnCache, dconcat: &Mat) -> (Mat, Mat, Mat, Vec<f64>) {
    let n_heads = cache.heads.len();
    let dh = cache.q.cols / n_heads;
    let mut dq = Mat::zeros(cache.q.rows, cache.q.cols);
    let mut dk = Mat::zeros(cache.k.rows, cache.k.cols);
    let mut dv = Mat::zeros(cache.v.rows, cache.v.cols);
    let mut dgates = Vec::with_capacity(n_heads);
    for (h, head) in cache.heads.iter().enumerate() {
        let mut dout = dconcat.column_block(h * dh, dh);
        let dgate: f64 = dout.data.iter().zip(&head.out.data).map(|(a, b)| a * b).sum();
        dgates.push(dgate);
        dout.scale(head.gate);
        let (dqh, dkh, dvh) = attention_backward(
            &cache.q.column_block(h * dh, dh),
            &cache.k.column_block(h * dh, dh),
            &cache.v.column_block(h * dh, dh),
            &head.alpha,
            head.fixed,
            &dout,
        );
        dq.set_column_block(h * dh, &dqh);
        dk.set_column_block(h * dh, &dkh);
        dv.set_column_block(h * dh, &dvh);
    }
    (dq, dk, dv, dgates)
}

impl Model {
    /// Dropout-free forward pass.
    pub fn forward(
        &self,
        doc: &Document,
        constraints: &ConstraintSet,
        gates: &HeadGates,
    ) -> Result<ForwardTrace> {
        self.forward_impl(doc, constraints, gates, None)
    }

    fn check_inputs(&self, tokens: &[TokenId], constraints: &ConstraintSet, gates: &HeadGates) -> Result<()> {
        let n = tokens.len();
        if n > self.config.max_len {
            return Err(Error::Shape(format!(
                "document length {n} exceeds max_len {}",
                self.config.max_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Shape(format!("token id {t} outside vocabulary")));
        }
        for (h, c) in constraints {
            if !self.has_head(*h) {
                return Err(Error::UnknownHead(h.to_string()));
            }
            c.check(n)?;
        }
        if gates.encoder.len() != self.config.n_layers
            || gates.encoder.iter().any(|l| l.len() != self.config.n_heads)
            || gates.pal.len() != self.config.n_layers
            || gates.pal.iter().any(|l| l.len() != self.n_pal_heads())
        {
            return Err(Error::Shape("gate vector does not match the model's heads".into()));
        }
        Ok(())
    }

    pub(crate) fn forward_impl(
        &self,
        doc: &Document,
        constraints: &ConstraintSet,
        gates: &HeadGates,
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<ForwardTrace> {
        let n = doc.len();
        let tokens = doc.flat[..n].to_vec();
        self.check_inputs(&tokens, constraints, gates)?;
        let p = &self.params;
        let cfg = &self.config;
        let d = cfg.d_model;

        let mut x = Mat::zeros(n, d);
        for (i, &t) in tokens.iter().enumerate() {
            let row = x.row_mut(i);
            for ((o, e), pe) in row.iter_mut().zip(p.tok_emb.row(t as usize)).zip(p.pos_emb.row(i)) {
                *o = e + pe;
            }
        }
        let drop_embed = dropout.as_mut().map(|dr| dr.mask(n * d));
        if let Some(m) = &drop_embed {
            apply_mask(&mut x, m);
        }

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for (l, lp) in p.layers.iter().enumerate() {
            let enc_constraints: Vec<_> = (0..cfg.n_heads)
                .map(|h| constraints.get(&HeadId::encoder(l, h)))
                .collect();
            let attn = multi_head(
                linear(&x, &lp.wq, Some(&lp.bq)),
                linear(&x, &lp.wk, Some(&lp.bk)),
                linear(&x, &lp.wv, Some(&lp.bv)),
                cfg.n_heads,
                &enc_constraints,
                &gates.encoder[l],
            );
            let mut a = linear(&attn.concat, &lp.wo, Some(&lp.bo));
            let drop_attn = dropout.as_mut().map(|dr| dr.mask(n * d));
            if let Some(m) = &drop_attn {
                apply_mask(&mut a, m);
            }
            a.add_assign(&x);
            let (h1, ln1) = layer_norm(&a, &lp.ln1_g, &lp.ln1_b);

            let z = linear(&h1, &lp.w1, Some(&lp.b1));
            let gz = Mat::from_vec(z.rows, z.cols, z.data.iter().map(|&v| gelu(v)).collect());
            let mut f = linear(&gz, &lp.w2, Some(&lp.b2));
            let drop_ffn = dropout.as_mut().map(|dr| dr.mask(n * d));
            if let Some(m) = &drop_ffn {
                apply_mask(&mut f, m);
            }
            f.add_assign(&h1);
            let (mut out, ln2) = layer_norm(&f, &lp.ln2_g, &lp.ln2_b);

            let pal = match (&lp.pal, &self.pal) {
                (Some(pp), Some(pc)) => {
                    let proj = x.matmul(&pp.down);
                    let pal_constraints: Vec<_> = (0..pc.n_heads)
                        .map(|h| constraints.get(&HeadId::pal(l, h)))
                        .collect();
                    let attn = multi_head(
                        proj.matmul(&pp.wq),
                        proj.matmul(&pp.wk),
                        proj.matmul(&pp.wv),
                        pc.n_heads,
                                &pal_constraints,
                        &gates.pal[l],
                    );
                    let mixed = attn.concat.matmul(&pp.wo);
                    out.add_assign(&mixed.matmul(&pp.up));
                    Some(PalCache { proj, attn, mixed })
                }
                _ => None,
            };

            let input = std::mem::replace(&mut x, out);
            layers.push(LayerCache {
                input,
                attn,
                drop_attn,
                ln1,
                h1,
                z,
                gz,
                drop_ffn,
                ln2,
                pal,
            });
        }

        let bos = doc.bos_positions();
        let logits = bos
            .iter()
            .map(|&i| {
                x.row(i)
                    .iter()
                    .zip(&p.cls_w.data)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    + p.cls_b.data[0]
            })
            .collect();

        Ok(ForwardTrace {
            logits,
            tokens,
            bos,
            drop_embed,
            layers,
            output: x,
        })
    }

    /// Reverse mode from `∂L/∂logits`.
    pub(crate) fn backward(&self, trace: &ForwardTrace, dlogits: &[f64]) -> (Params, HeadGates) {
        let p = &self.params;
        let mut g = p.zeros_like();
        let mut gates = HeadGates::filled(self, 0.0);
        let n = trace.len();

        let mut dx = Mat::zeros(n, self.config.d_model);
        for (&pos, &dz) in trace.bos.iter().zip(dlogits) {
            for (o, w) in dx.row_mut(pos).iter_mut().zip(&p.cls_w.data) {
                *o += dz * w;
            }
            for (o, h) in g.cls_w.data.iter_mut().zip(trace.output.row(pos)) {
                *o += dz * h;
            }
            g.cls_b.data[0] += dz;
        }

        for (l, cache) in trace.layers.iter().enumerate().rev() {
            let lp = &p.layers[l];
            let lg = &mut g.layers[l];
            let dout = dx;

            let mut dinput = Mat::zeros(n, self.config.d_model);
            if let (Some(pc), Some(pp), Some(pg)) = (&cache.pal, &lp.pal, lg.pal.as_mut()) {
                pg.up.add_assign(&pc.mixed.t_matmul(&dout));
                let dmixed = dout.matmul_t(&pp.up);
                pg.wo.add_assign(&pc.attn.concat.t_matmul(&dmixed));
                let dconcat = dmixed.matmul_t(&pp.wo);
                let (dq, dk, dv, dg) = multi_head_backward(&pc.attn, &dconcat);
                gates.pal[l] = dg;
                pg.wq.add_assign(&pc.proj.t_matmul(&dq));
                pg.wk.add_assign(&pc.proj.t_matmul(&dk));
                pg.wv.add_assign(&pc.proj.t_matmul(&dv));
                let mut dproj = dq.matmul_t(&pp.wq);
                dproj.add_assign(&dk.matmul_t(&pp.wk));
                dproj.add_assign(&dv.matmul_t(&pp.wv));
                pg.down.add_assign(&cache.input.t_matmul(&dproj));
                dinput.add_assign(&dproj.matmul_t(&pp.down));
            }

            let (dr2, dg2, db2) = layer_norm_backward(&dout, &cache.ln2, &lp.ln2_g);
            lg.ln2_g.add_assign(&dg2);
            lg.ln2_b.add_assign(&db2);
            let mut dh1 = dr2.clone();
            let mut df = dr2;
            if let Some(m) = &cache.drop_ffn {
                apply_mask(&mut df, m);
            }
            lg.w2.add_assign(&cache.gz.t_matmul(&df));
            lg.b2.data.iter_mut().zip(df.column_sums()).for_each(|(a, b)| *a += b);
            let mut dz = df.matmul_t(&lp.w2);
            for (dzv, &zv) in dz.data.iter_mut().zip(&cache.z.data) {
                *dzv *= gelu_grad(zv);
            }
            lg.w1.add_assign(&cache.h1.t_matmul(&dz));
            lg.b1.data.iter_mut().zip(dz.column_sums()).for_each(|(a, b)| *a += b);
            dh1.add_assign(&dz.matmul_t(&lp.w1));

            let (dr1, dg1, db1) = layer_norm_backward(&dh1, &cache.ln1, &lp.ln1_g);
            lg.ln1_g.add_assign(&dg1);
            lg.ln1_b.add_assign(&db1);
            dinput.add_assign(&dr1);
            let mut da = dr1;
            if let Some(m) = &cache.drop_attn {
                apply_mask(&mut da, m);
            }
            lg.wo.add_assign(&cache.attn.concat.t_matmul(&da));
            lg.bo.data.iter_mut().zip(da.column_sums()).for_each(|(a, b)| *a += b);
            let dconcat = da.matmul_t(&lp.wo);
            let (dq, dk, dv, dg) = multi_head_backward(&cache.attn, &dconcat);
            gates.encoder[l] = dg;
            for (w, b, dproj) in [
                (&mut lg.wq, &mut lg.bq, &dq),
                (&mut lg.wk, &mut lg.bk, &dk),
                (&mut lg.wv, &mut lg.bv, &dv),
            ] {
                w.add_assign(&cache.input.t_matmul(dproj));
                b.data.iter_mut().zip(dproj.column_sums()).for_each(|(a, c)| *a += c);
            }
            dinput.add_assign(&dq.matmul_t(&lp.wq));
            dinput.add_assign(&dk.matmul_t(&lp.wk));
            dinput.add_assign(&dv.matmul_t(&lp.wv));
            dx = dinput;
        }

        if let Some(m) = &trace.drop_embed {
            apply_mask(&mut dx, m);
        }
        for (i, &t) in trace.tokens.iter().enumerate() {
            let row = dx.row(i);
            for (o, v) in g.tok_emb.row_mut(t as usize).iter_mut().zip(row) {
                *o += v;
            }
            for (o, v) in g.pos_emb.row_mut(i).iter_mut().zip(row) {
                *o += v;
            }
        }
        (g, gates)
    }

    /// Exact gradients of the mean-BCE loss of one document.
    pub fn gradients(
        &self,
        doc: &Document,
        constraints: &ConstraintSet,
        gates: &HeadGates,
        labels: &[bool],
    ) -> Result<Gradients> {
        let trace = self.forward(doc, constraints, gates)?;
        let loss = super::loss(&trace, labels)?;
        let scale = 1.0 / labels.len().max(1) as f64;
        let (params, gates) = self.backward(&trace, &bce_dlogits(&trace.logits, labels, scale));
        Ok(Gradients {
            params,
            gates,
            loss,
        })
    }

    /// Gradients of `Σ_sentences BCE` (unnormalized) under optional dropout.
    /// Training divides accumulated sums by the total sentence count.
    pub(crate) fn gradients_sum(
        &self,
        doc: &Document,
        constraints: &ConstraintSet,
        labels: &[bool],
        dropout: Option<Dropout<'_>>,
    ) -> Result<(Params, f64)> {
        let gates = HeadGates::ones(self);
        let trace = self.forward_impl(doc, constraints, &gates, dropout)?;
        if trace.logits.len() != labels.len() {
            return Err(Error::LabelMismatch {
                labels: labels.len(),
                sentences: trace.logits.len(),
            });
        }
        let loss = bce_sum(&trace.logits, labels);
        let (params, _) = self.backward(&trace, &bce_dlogits(&trace.logits, labels, 1.0));
        Ok((params, loss))
    }
}

fn bce_dlogits(logits: &[f64], labels: &[bool], scale: f64) -> Vec<f64> {
    logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| scale * (sigmoid(z) - if y { 1.0 } else { 0.0 }))
        .collect()
}
