use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::tensor::Mat;

/// Bias-free projected attention layer: `d_model → d_pal`, attention in the
/// projected space, `d_pal → d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct PalParams {
    pub down: Mat,
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub up: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Mat,
    pub bq: Mat,
    pub wk: Mat,
    pub bk: Mat,
    pub wv: Mat,
    pub bv: Mat,
    pub wo: Mat,
    pub bo: Mat,
    pub ln1_g: Mat,
    pub ln1_b: Mat,
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
    pub ln2_g: Mat,
    pub ln2_b: Mat,
    pub pal: Option<PalParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tok_emb: Mat,
    pub pos_emb: Mat,
    pub layers: Vec<LayerParams>,
    pub cls_w: Mat,
    pub cls_b: Mat,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect())
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, a: f64) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect())
}

fn ones(n: usize) -> Mat {
    Mat::from_vec(1, n, vec![1.0; n])
}

impl PalParams {
    /// Random projections with a zero up-projection, so a fresh adapter is an
    /// exact no-op.
    pub fn init(d_model: usize, d_pal: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            down: xavier(rng, d_model, d_pal),
            wq: xavier(rng, d_pal, d_pal),
            wk: xavier(rng, d_pal, d_pal),
            wv: xavier(rng, d_pal, d_pal),
            wo: xavier(rng, d_pal, d_pal),
            up: Mat::zeros(d_pal, d_model),
        }
    }

    fn zeros_like(&self) -> Self {
        let z = |m: &Mat| Mat::zeros(m.rows, m.cols);
        Self {
            down: z(&self.down),
            wq: z(&self.wq),
            wk: z(&self.wk),
            wv: z(&self.wv),
            wo: z(&self.wo),
            up: z(&self.up),
        }
    }
}

impl Params {
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let emb_scale = 1.0 / (d as f64).sqrt();
        let tok_emb = uniform(&mut rng, config.vocab_size, d, emb_scale);
        let pos_emb = uniform(&mut rng, config.max_len, d, emb_scale);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                wq: xavier(&mut rng, d, d),
                bq: Mat::zeros(1, d),
                wk: xavier(&mut rng, d, d),
                bk: Mat::zeros(1, d),
                wv: xavier(&mut rng, d, d),
                bv: Mat::zeros(1, d),
                wo: xavier(&mut rng, d, d),
                bo: Mat::zeros(1, d),
                ln1_g: ones(d),
                ln1_b: Mat::zeros(1, d),
                w1: xavier(&mut rng, d, config.d_ff),
                b1: Mat::zeros(1, config.d_ff),
                w2: xavier(&mut rng, config.d_ff, d),
                b2: Mat::zeros(1, d),
                ln2_g: ones(d),
                ln2_b: Mat::zeros(1, d),
                pal: None,
            })
            .collect();
        let cls_w = xavier(&mut rng, 1, d);
        Self {
            tok_emb,
            pos_emb,
            layers,
            cls_w,
            cls_b: Mat::zeros(1, 1),
        }
    }

    /// Same structure, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let z = |m: &Mat| Mat::zeros(m.rows, m.cols);
        Self {
            tok_emb: z(&self.tok_emb),
            pos_emb: z(&self.pos_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    wq: z(&l.wq),
                    bq: z(&l.bq),
                    wk: z(&l.wk),
                    bk: z(&l.bk),
                    wv: z(&l.wv),
                    bv: z(&l.bv),
                    wo: z(&l.wo),
                    bo: z(&l.bo),
                    ln1_g: z(&l.ln1_g),
                    ln1_b: z(&l.ln1_b),
                    w1: z(&l.w1),
                    b1: z(&l.b1),
                    w2: z(&l.w2),
                    b2: z(&l.b2),
                    ln2_g: z(&l.ln2_g),
                    ln2_b: z(&l.ln2_b),
                    pal: l.pal.as_ref().map(PalParams::zeros_like),
                })
                .collect(),
            cls_w: z(&self.cls_w),
            cls_b: z(&self.cls_b),
        }
    }

    /// Every tensor with its stable name, in checkpoint order.
    pub fn named(&self) -> Vec<(String, &Mat)> {
        let mut out: Vec<(String, &Mat)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            out.extend([
                (p("attn.wq"), &l.wq),
                (p("attn.bq"), &l.bq),
                (p("attn.wk"), &l.wk),
                (p("attn.bk"), &l.bk),
                (p("attn.wv"), &l.wv),
                (p("attn.bv"), &l.bv),
                (p("attn.wo"), &l.wo),
                (p("attn.bo"), &l.bo),
                (p("ln1.gamma"), &l.ln1_g),
                (p("ln1.beta"), &l.ln1_b),
                (p("ffn.w1"), &l.w1),
                (p("ffn.b1"), &l.b1),
                (p("ffn.w2"), &l.w2),
                (p("ffn.b2"), &l.b2),
                (p("ln2.gamma"), &l.ln2_g),
                (p("ln2.beta"), &l.ln2_b),
            ]);
            if let Some(pal) = &l.pal {
                out.extend([
                    (p("pal.down"), &pal.down),
                    (p("pal.wq"), &pal.wq),
                    (p("pal.wk"), &pal.wk),
                    (p("pal.wv"), &pal.wv),
                    (p("pal.wo"), &pal.wo),
                    (p("pal.up"), &pal.up),
                ]);
            }
        }
        out.push(("classifier.w".into(), &self.cls_w));
        out.push(("classifier.b".into(), &self.cls_b));
        out
    }

    /// Mutable view in the same order as [`Params::named`].
    pub fn named_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out: Vec<(String, &mut Mat)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            out.extend([
                (p("attn.wq"), &mut l.wq),
                (p("attn.bq"), &mut l.bq),
                (p("attn.wk"), &mut l.wk),
                (p("attn.bk"), &mut l.bk),
                (p("attn.wv"), &mut l.wv),
                (p("attn.bv"), &mut l.bv),
                (p("attn.wo"), &mut l.wo),
                (p("attn.bo"), &mut l.bo),
                (p("ln1.gamma"), &mut l.ln1_g),
                (p("ln1.beta"), &mut l.ln1_b),
                (p("ffn.w1"), &mut l.w1),
                (p("ffn.b1"), &mut l.b1),
                (p("ffn.w2"), &mut l.w2),
                (p("ffn.b2"), &mut l.b2),
                (p("ln2.gamma"), &mut l.ln2_g),
                (p("ln2.beta"), &mut l.ln2_b),
            ]);
            if let Some(pal) = &mut l.pal {
                out.extend([
                    (p("pal.down"), &mut pal.down),
                    (p("pal.wq"), &mut pal.wq),
                    (p("pal.wk"), &mut pal.wk),
                    (p("pal.wv"), &mut pal.wv),
                    (p("pal.wo"), &mut pal.wo),
                    (p("pal.up"), &mut pal.up),
                ]);
            }
        }
        out.push(("classifier.w".into(), &mut self.cls_w));
        out.push(("classifier.b".into(), &mut self.cls_b));
        out
    }

    pub fn add_assign(&mut self, other: &Params) {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, m) in self.named_mut() {
            m.scale(s);
        }
    }

    pub fn max_abs_diff(&self, other: &Params) -> f64 {
        self.named()
            .into_iter()
            .zip(other.named())
            .flat_map(|((_, a), (_, b))| a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}
