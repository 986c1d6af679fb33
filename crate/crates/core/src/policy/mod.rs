//! Attention-based encoder-decoder policy over linearized queries.
//!
//! Encoder: bidirectional GRU over source embeddings, `h_i = [fwd_i; bwd_i]`.
//! Decoder state init: `s_0 = tanh(W_init mean_i(h_i) + b_init)`.
//! Each decoder step j (conditional GRU):
//!
//! ```text
//! e    = E_y[y_{j-1}]                       (y_0 = BOS)
//! s'   = GRU_1(e, s_{j-1})
//! a_i  = v . tanh(W_a h_i + U_a s' + b_a)
//! c    = sum_i softmax(a)_i h_i
//! s_j  = GRU_2(c, s')
//! t    = tanh(R_s s_j + R_e e + R_c c + b_r)
//! p    = softmax(W_o t + b_o)                (over the full output vocabulary)
//! ```
//!
//! GRU: `z = σ(Wz x + Uz h + bz)`, `r = σ(Wr x + Ur h + br)`,
//! `ĥ = tanh(Wh x + Uh (r ⊙ h) + bh)`, `h' = z ⊙ h + (1 - z) ⊙ ĥ`.
//!
//! All parameters live in one flat vector described by [`Layout`]. Gradients
//! are computed by [`Policy::backward`] for an arbitrary per-token weighting
//! `Σ_j c_j log π(y_j | y_<j, x)`; every training objective reduces to such
//! a weighting.

mod beam;
mod checkpoint;
pub mod linalg;
mod optim;

pub use beam::{greedy_decode, Hypothesis};
pub use checkpoint::CheckpointError;
pub use optim::{clip_global_norm, Adadelta, AdadeltaConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mrl::LinearQuery;
use crate::vocab::{Vocab, BOS_ID, EOS_ID};
use linalg::*;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("token `{0}` is not in the output vocabulary")]
    UnknownToken(String),
    #[error("output sequence is empty")]
    EmptyOutput,
    #[error("minibatch is empty")]
    EmptyBatch,
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub emb: usize,
    /// Maximum number of decoded tokens, EOS included.
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 64,
            emb: 32,
            max_len: 60,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.hidden == 0 || self.emb == 0 || self.max_len == 0 {
            return Err(PolicyError::Config("hidden, emb and max_len must be positive".into()));
        }
        Ok(())
    }
}

/// A named block of the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    pub name: &'static str,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    #[inline]
    fn row(&self, i: usize) -> std::ops::Range<usize> {
        let s = self.offset + i * self.cols;
        s..s + self.cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Gru {
    w: Tensor,
    u: Tensor,
    b: Tensor,
    hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    tensors: Vec<Tensor>,
    total: usize,
    src_emb: Tensor,
    tgt_emb: Tensor,
    enc_f: Gru,
    enc_b: Gru,
    w_init: Tensor,
    b_init: Tensor,
    dec1: Gru,
    w_att: Tensor,
    u_att: Tensor,
    b_att: Tensor,
    v_att: Tensor,
    dec2: Gru,
    r_s: Tensor,
    r_e: Tensor,
    r_c: Tensor,
    b_r: Tensor,
    w_out: Tensor,
    b_out: Tensor,
}

struct LayoutBuilder {
    tensors: Vec<Tensor>,
    total: usize,
}

impl LayoutBuilder {
    fn add(&mut self, name: &'static str, rows: usize, cols: usize) -> Tensor {
        let t = Tensor {
            name,
            offset: self.total,
            rows,
            cols,
        };
        self.total += rows * cols;
        self.tensors.push(t);
        t
    }

    fn gru(&mut self, prefix: [&'static str; 3], input: usize, hidden: usize) -> Gru {
        Gru {
            w: self.add(prefix[0], 3 * hidden, input),
            u: self.add(prefix[1], 3 * hidden, hidden),
            b: self.add(prefix[2], 3 * hidden, 1),
            hidden,
        }
    }
}

impl Layout {
    pub fn new(config: &ModelConfig, src_vocab: usize, tgt_vocab: usize) -> Self {
        let (h, e) = (config.hidden, config.emb);
        let ctx = 2 * h;
        let mut b = LayoutBuilder {
            tensors: Vec::new(),
            total: 0,
        };
        let src_emb = b.add("src_emb", src_vocab, e);
        let tgt_emb = b.add("tgt_emb", tgt_vocab, e);
        let enc_f = b.gru(["enc_fwd.W", "enc_fwd.U", "enc_fwd.b"], e, h);
        let enc_b = b.gru(["enc_bwd.W", "enc_bwd.U", "enc_bwd.b"], e, h);
        let w_init = b.add("init.W", h, ctx);
        let b_init = b.add("init.b", h, 1);
        let dec1 = b.gru(["dec1.W", "dec1.U", "dec1.b"], e, h);
        let w_att = b.add("att.W", h, ctx);
        let u_att = b.add("att.U", h, h);
        let b_att = b.add("att.b", h, 1);
        let v_att = b.add("att.v", h, 1);
        let dec2 = b.gru(["dec2.W", "dec2.U", "dec2.b"], ctx, h);
        let r_s = b.add("readout.Rs", e, h);
        let r_e = b.add("readout.Re", e, e);
        let r_c = b.add("readout.Rc", e, ctx);
        let b_r = b.add("readout.b", e, 1);
        let w_out = b.add("out.W", tgt_vocab, e);
        let b_out = b.add("out.b", tgt_vocab, 1);
        Layout {
            tensors: b.tensors,
            total: b.total,
            src_emb,
            tgt_emb,
            enc_f,
            enc_b,
            w_init,
            b_init,
            dec1,
            w_att,
            u_att,
            b_att,
            v_att,
            dec2,
            r_s,
            r_e,
            r_c,
            b_r,
            w_out,
            b_out,
        }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

#[derive(Debug, Clone)]
struct GruCache {
    x: Vec<f64>,
    h: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    hh: Vec<f64>,
    out: Vec<f64>,
}

fn gru_forward(p: &[f64], g: &Gru, x: Vec<f64>, h: Vec<f64>) -> GruCache {
    let n = g.hidden;
    let mut a = p[g.b.range()].to_vec();
    matvec_acc(&mut a, &p[g.w.range()], g.w.cols, &x);
    let u = &p[g.u.range()];
    matvec_acc(&mut a[..2 * n], &u[..2 * n * n], n, &h);
    let z: Vec<f64> = a[..n].iter().map(|&v| sigmoid(v)).collect();
    let r: Vec<f64> = a[n..2 * n].iter().map(|&v| sigmoid(v)).collect();
    let rh: Vec<f64> = r.iter().zip(&h).map(|(a, b)| a * b).collect();
    let mut ah = a[2 * n..].to_vec();
    matvec_acc(&mut ah, &u[2 * n * n..], n, &rh);
    let hh: Vec<f64> = ah.iter().map(|v| v.tanh()).collect();
    let out = (0..n).map(|i| z[i] * h[i] + (1.0 - z[i]) * hh[i]).collect();
    GruCache { x, h, z, r, hh, out }
}

/// Accumulates parameter gradients into `grad` and input/state gradients
/// into `dx` / `dh`.
fn gru_backward(p: &[f64], g: &Gru, c: &GruCache, dout: &[f64], grad: &mut [f64], dx: &mut [f64], dh: &mut [f64]) {
    let n = g.hidden;
    let mut da = vec![0.0; 3 * n];
    for i in 0..n {
        let dz = dout[i] * (c.h[i] - c.hh[i]);
        let dhh = dout[i] * (1.0 - c.z[i]);
        dh[i] += dout[i] * c.z[i];
        da[i] = dz * c.z[i] * (1.0 - c.z[i]);
        da[2 * n + i] = dhh * (1.0 - c.hh[i] * c.hh[i]);
    }
    let u = &p[g.u.range()];
    let mut drh = vec![0.0; n];
    matvec_t_acc(&mut drh, &u[2 * n * n..], n, &da[2 * n..]);
    for i in 0..n {
        dh[i] += drh[i] * c.r[i];
        da[n + i] = drh[i] * c.h[i] * c.r[i] * (1.0 - c.r[i]);
    }
    matvec_t_acc(dh, &u[..2 * n * n], n, &da[..2 * n]);
    matvec_t_acc(dx, &p[g.w.range()], g.w.cols, &da);

    outer_acc(&mut grad[g.w.range()], &da, &c.x);
    axpy(&mut grad[g.b.range()], 1.0, &da);
    let gu = &mut grad[g.u.range()];
    outer_acc(&mut gu[..2 * n * n], &da[..2 * n], &c.h);
    let rh: Vec<f64> = c.r.iter().zip(&c.h).map(|(a, b)| a * b).collect();
    outer_acc(&mut gu[2 * n * n..], &da[2 * n..], &rh);
}

/// Encoder activations for one source sentence.
#[derive(Debug, Clone)]
pub struct Encoded {
    x: Vec<usize>,
    fwd: Vec<GruCache>,
    bwd: Vec<GruCache>,
    /// `n x 2H` annotations.
    ctx: Vec<f64>,
    mean: Vec<f64>,
    s0: Vec<f64>,
    /// `n x H` precomputed `W_a h_i`.
    wah: Vec<f64>,
}

impl Encoded {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn initial_state(&self) -> &[f64] {
        &self.s0
    }
}

/// One decoder step's activations.
#[derive(Debug, Clone)]
pub struct Step {
    y_prev: usize,
    e: Vec<f64>,
    g1: GruCache,
    /// `n x H` attention hidden activations.
    att: Vec<f64>,
    alpha: Vec<f64>,
    c: Vec<f64>,
    g2: GruCache,
    t: Vec<f64>,
    /// Log-probabilities over the output vocabulary.
    pub logp: Vec<f64>,
}

impl Step {
    pub fn state(&self) -> &[f64] {
        &self.g2.out
    }

    pub fn attention(&self) -> &[f64] {
        &self.alpha
    }
}

/// Forward pass over a complete output sequence.
#[derive(Debug, Clone)]
pub struct SeqForward {
    enc: Encoded,
    y: Vec<usize>,
    steps: Vec<Step>,
}

impl SeqForward {
    /// `log π(y_j | y_<j, x)` for every position, EOS included.
    pub fn token_logprobs(&self) -> Vec<f64> {
        self.steps.iter().zip(&self.y).map(|(s, &y)| s.logp[y]).collect()
    }

    pub fn logprob(&self) -> f64 {
        self.token_logprobs().iter().sum()
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Policy {
    config: ModelConfig,
    src: Vocab,
    tgt: Vocab,
    layout: Layout,
    params: Vec<f64>,
}

impl Policy {
    /// Uniform initialization in `[-scale, scale]`.
    pub fn new(config: ModelConfig, src: Vocab, tgt: Vocab, seed: u64, scale: f64) -> Result<Self, PolicyError> {
        config.validate()?;
        let layout = Layout::new(&config, src.len(), tgt.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = if scale > 0.0 {
            (0..layout.total).map(|_| rng.gen_range(-scale..=scale)).collect()
        } else {
            vec![0.0; layout.total]
        };
        Ok(Policy {
            config,
            src,
            tgt,
            layout,
            params,
        })
    }

    pub fn with_params(config: ModelConfig, src: Vocab, tgt: Vocab, params: Vec<f64>) -> Result<Self, PolicyError> {
        config.validate()?;
        let layout = Layout::new(&config, src.len(), tgt.len());
        if params.len() != layout.total {
            return Err(PolicyError::Config(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Policy {
            config,
            src,
            tgt,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn src_vocab(&self) -> &Vocab {
        &self.src
    }

    pub fn tgt_vocab(&self) -> &Vocab {
        &self.tgt
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn zero_grad(&self) -> Vec<f64> {
        vec![0.0; self.layout.total]
    }

    /// Source ids with a closing EOS.
    pub fn encode_source<S: AsRef<str>>(&self, x: &[S]) -> Vec<usize> {
        x.iter()
            .map(|t| self.src.id_or_unk(t.as_ref()))
            .chain(std::iter::once(EOS_ID))
            .collect()
    }

    /// Target ids with a closing EOS.
    pub fn encode_target(&self, y: &LinearQuery) -> Result<Vec<usize>, PolicyError> {
        self.encode_target_strs(&y.token_strings())
    }

    pub fn encode_target_strs<S: AsRef<str>>(&self, y: &[S]) -> Result<Vec<usize>, PolicyError> {
        y.iter()
            .map(|t| {
                self.tgt
                    .id(t.as_ref())
                    .ok_or_else(|| PolicyError::UnknownToken(t.as_ref().to_string()))
            })
            .chain(std::iter::once(Ok(EOS_ID)))
            .collect()
    }

    pub fn encode(&self, x: &[usize]) -> Encoded {
        let p = &self.params;
        let l = &self.layout;
        let h = self.config.hidden;
        let n = x.len();
        let emb = |id: usize| p[l.src_emb.row(id)].to_vec();
        let mut fwd: Vec<GruCache> = Vec::with_capacity(n);
        let mut prev = vec![0.0; h];
        for &id in x {
            let c = gru_forward(p, &l.enc_f, emb(id), prev);
            prev = c.out.clone();
            fwd.push(c);
        }
        let mut bwd: Vec<Option<GruCache>> = vec![None; n];
        let mut prev = vec![0.0; h];
        for i in (0..n).rev() {
            let c = gru_forward(p, &l.enc_b, emb(x[i]), prev);
            prev = c.out.clone();
            bwd[i] = Some(c);
        }
        let bwd: Vec<GruCache> = bwd.into_iter().map(|c| c.expect("filled")).collect();
        let mut ctx = Vec::with_capacity(n * 2 * h);
        for i in 0..n {
            ctx.extend_from_slice(&fwd[i].out);
            ctx.extend_from_slice(&bwd[i].out);
        }
        let mut mean = vec![0.0; 2 * h];
        for row in ctx.chunks_exact(2 * h) {
            axpy(&mut mean, 1.0 / n as f64, row);
        }
        let mut s0 = p[l.b_init.range()].to_vec();
        matvec_acc(&mut s0, &p[l.w_init.range()], 2 * h, &mean);
        s0.iter_mut().for_each(|v| *v = v.tanh());
        let mut wah = vec![0.0; n * h];
        for (out, row) in wah.chunks_exact_mut(h).zip(ctx.chunks_exact(2 * h)) {
            matvec_acc(out, &p[l.w_att.range()], 2 * h, row);
        }
        Encoded {
            x: x.to_vec(),
            fwd,
            bwd,
            ctx,
            mean,
            s0,
            wah,
        }
    }

    /// One decoder step from state `s_prev` after emitting `y_prev`.
    pub fn step(&self, enc: &Encoded, s_prev: &[f64], y_prev: usize) -> Step {
        let p = &self.params;
        let l = &self.layout;
        let h = self.config.hidden;
        let n = enc.len();
        let e = p[l.tgt_emb.row(y_prev)].to_vec();
        let g1 = gru_forward(p, &l.dec1, e.clone(), s_prev.to_vec());
        let mut u = p[l.b_att.range()].to_vec();
        matvec_acc(&mut u, &p[l.u_att.range()], h, &g1.out);
        let v = &p[l.v_att.range()];
        let mut att = vec![0.0; n * h];
        let mut alpha = vec![0.0; n];
        for i in 0..n {
            let row = &mut att[i * h..(i + 1) * h];
            for k in 0..h {
                row[k] = (enc.wah[i * h + k] + u[k]).tanh();
            }
            alpha[i] = dot(v, row);
        }
        softmax(&mut alpha);
        let mut c = vec![0.0; 2 * h];
        for (a, row) in alpha.iter().zip(enc.ctx.chunks_exact(2 * h)) {
            axpy(&mut c, *a, row);
        }
        let s_mid = g1.out.clone();
        let g2 = gru_forward(p, &l.dec2, c.clone(), s_mid);
        let mut t = p[l.b_r.range()].to_vec();
        matvec_acc(&mut t, &p[l.r_s.range()], h, &g2.out);
        matvec_acc(&mut t, &p[l.r_e.range()], self.config.emb, &e);
        matvec_acc(&mut t, &p[l.r_c.range()], 2 * h, &c);
        t.iter_mut().for_each(|v| *v = v.tanh());
        let mut logp = p[l.b_out.range()].to_vec();
        matvec_acc(&mut logp, &p[l.w_out.range()], self.config.emb, &t);
        log_softmax(&mut logp);
        Step {
            y_prev,
            e,
            g1,
            att,
            alpha,
            c,
            g2,
            t,
            logp,
        }
    }

    /// Teacher-forced forward pass; `y` must end with EOS for a full
    /// sequence probability.
    pub fn forward(&self, x: &[usize], y: &[usize]) -> SeqForward {
        let enc = self.encode(x);
        let mut steps: Vec<Step> = Vec::with_capacity(y.len());
        let mut prev = BOS_ID;
        for &tok in y {
            let st = match steps.last() {
                Some(last) => self.step(&enc, last.state(), prev),
                None => self.step(&enc, &enc.s0, prev),
            };
            steps.push(st);
            prev = tok;
        }
        SeqForward {
            enc,
            y: y.to_vec(),
            steps,
        }
    }

    /// Adds `∇ Σ_j coeffs[j] · log π(y_j | y_<j, x)` to `grad`.
    pub fn backward(&self, fwd: &SeqForward, coeffs: &[f64], grad: &mut [f64]) {
        assert_eq!(coeffs.len(), fwd.y.len(), "one coefficient per output position");
        assert_eq!(grad.len(), self.layout.total);
        if coeffs.iter().all(|&c| c == 0.0) {
            return;
        }
        let p = &self.params;
        let l = &self.layout;
        let h = self.config.hidden;
        let emb = self.config.emb;
        let enc = &fwd.enc;
        let n = enc.len();
        let mut dctx = vec![0.0; n * 2 * h];
        let mut dwah = vec![0.0; n * h];
        let mut ds_next = vec![0.0; h];

        for (j, st) in fwd.steps.iter().enumerate().rev() {
            let cj = coeffs[j];
            let mut ds = std::mem::take(&mut ds_next);
            let mut de = vec![0.0; emb];
            let mut dc = vec![0.0; 2 * h];
            if cj != 0.0 {
                let mut dlog: Vec<f64> = st.logp.iter().map(|lp| -cj * lp.exp()).collect();
                dlog[fwd.y[j]] += cj;
                outer_acc(&mut grad[l.w_out.range()], &dlog, &st.t);
                axpy(&mut grad[l.b_out.range()], 1.0, &dlog);
                let mut dt = vec![0.0; emb];
                matvec_t_acc(&mut dt, &p[l.w_out.range()], emb, &dlog);
                let dpre: Vec<f64> = dt.iter().zip(&st.t).map(|(d, t)| d * (1.0 - t * t)).collect();
                matvec_t_acc(&mut ds, &p[l.r_s.range()], h, &dpre);
                outer_acc(&mut grad[l.r_s.range()], &dpre, &st.g2.out);
                matvec_t_acc(&mut de, &p[l.r_e.range()], emb, &dpre);
                outer_acc(&mut grad[l.r_e.range()], &dpre, &st.e);
                matvec_t_acc(&mut dc, &p[l.r_c.range()], 2 * h, &dpre);
                outer_acc(&mut grad[l.r_c.range()], &dpre, &st.c);
                axpy(&mut grad[l.b_r.range()], 1.0, &dpre);
            }

            let mut ds_mid = vec![0.0; h];
            gru_backward(p, &l.dec2, &st.g2, &ds, grad, &mut dc, &mut ds_mid);

            // attention
            let mut dalpha = vec![0.0; n];
            for i in 0..n {
                let row = &enc.ctx[i * 2 * h..(i + 1) * 2 * h];
                dalpha[i] = dot(&dc, row);
                axpy(&mut dctx[i * 2 * h..(i + 1) * 2 * h], st.alpha[i], &dc);
            }
            let mean_d = dot(&st.alpha, &dalpha);
            let v = &p[l.v_att.range()];
            let mut dpre_sum = vec![0.0; h];
            {
                let mut dv = vec![0.0; h];
                for i in 0..n {
                    let da = st.alpha[i] * (dalpha[i] - mean_d);
                    if da == 0.0 {
                        continue;
                    }
                    let row = &st.att[i * h..(i + 1) * h];
                    axpy(&mut dv, da, row);
                    let dw = &mut dwah[i * h..(i + 1) * h];
                    for k in 0..h {
                        let d = da * v[k] * (1.0 - row[k] * row[k]);
                        dw[k] += d;
                        dpre_sum[k] += d;
                    }
                }
                axpy(&mut grad[l.v_att.range()], 1.0, &dv);
            }
            outer_acc(&mut grad[l.u_att.range()], &dpre_sum, &st.g1.out);
            axpy(&mut grad[l.b_att.range()], 1.0, &dpre_sum);
            matvec_t_acc(&mut ds_mid, &p[l.u_att.range()], h, &dpre_sum);

            let mut ds_prev = vec![0.0; h];
            gru_backward(p, &l.dec1, &st.g1, &ds_mid, grad, &mut de, &mut ds_prev);
            axpy(&mut grad[l.tgt_emb.row(st.y_prev)], 1.0, &de);
            ds_next = ds_prev;
        }

        // s_0 = tanh(W_init mean + b_init)
        let dpre0: Vec<f64> = ds_next.iter().zip(&enc.s0).map(|(d, s)| d * (1.0 - s * s)).collect();
        outer_acc(&mut grad[l.w_init.range()], &dpre0, &enc.mean);
        axpy(&mut grad[l.b_init.range()], 1.0, &dpre0);
        let mut dmean = vec![0.0; 2 * h];
        matvec_t_acc(&mut dmean, &p[l.w_init.range()], 2 * h, &dpre0);
        for i in 0..n {
            let row = &enc.ctx[i * 2 * h..(i + 1) * 2 * h];
            let dw = &dwah[i * h..(i + 1) * h];
            outer_acc(&mut grad[l.w_att.range()], dw, row);
            let drow = &mut dctx[i * 2 * h..(i + 1) * 2 * h];
            matvec_t_acc(drow, &p[l.w_att.range()], 2 * h, dw);
            axpy(drow, 1.0 / n as f64, &dmean);
        }

        // encoder
        let mut dnext = vec![0.0; h];
        for i in (0..n).rev() {
            let mut dout = dctx[i * 2 * h..i * 2 * h + h].to_vec();
            axpy(&mut dout, 1.0, &dnext);
            let mut dx = vec![0.0; emb];
            let mut dprev = vec![0.0; h];
            gru_backward(p, &l.enc_f, &enc.fwd[i], &dout, grad, &mut dx, &mut dprev);
            axpy(&mut grad[l.src_emb.row(enc.x[i])], 1.0, &dx);
            dnext = dprev;
        }
        let mut dnext = vec![0.0; h];
        for i in 0..n {
            let mut dout = dctx[i * 2 * h + h..(i + 1) * 2 * h].to_vec();
            axpy(&mut dout, 1.0, &dnext);
            let mut dx = vec![0.0; emb];
            let mut dprev = vec![0.0; h];
            gru_backward(p, &l.enc_b, &enc.bwd[i], &dout, grad, &mut dx, &mut dprev);
            axpy(&mut grad[l.src_emb.row(enc.x[i])], 1.0, &dx);
            dnext = dprev;
        }
    }

    /// `log π(candidate | prefix, x)`.
    pub fn token_logprob<S: AsRef<str>, T: AsRef<str>>(&self, x: &[S], prefix: &[T], candidate: &str) -> Result<f64, PolicyError> {
        let cand = self
            .tgt
            .id(candidate)
            .ok_or_else(|| PolicyError::UnknownToken(candidate.to_string()))?;
        let dist = self.next_token_logprobs(x, prefix)?;
        Ok(dist[cand])
    }

    /// Full next-token log-distribution after `prefix`.
    pub fn next_token_logprobs<S: AsRef<str>, T: AsRef<str>>(&self, x: &[S], prefix: &[T]) -> Result<Vec<f64>, PolicyError> {
        let mut y = self.encode_target_strs(prefix)?;
        y.pop();
        let enc = self.encode(&self.encode_source(x));
        let mut state = enc.s0.clone();
        let mut prev = BOS_ID;
        for &tok in &y {
            state = self.step(&enc, &state, prev).g2.out;
            prev = tok;
        }
        Ok(self.step(&enc, &state, prev).logp)
    }

    /// `log π(y | x)` including the closing EOS.
    pub fn sequence_logprob<S: AsRef<str>>(&self, x: &[S], y: &LinearQuery) -> Result<f64, PolicyError> {
        let yi = self.encode_target(y)?;
        Ok(self.forward(&self.encode_source(x), &yi).logprob())
    }

    /// `∇ log π(y | x)`.
    pub fn grad_sequence_logprob<S: AsRef<str>>(&self, x: &[S], y: &LinearQuery) -> Result<Vec<f64>, PolicyError> {
        let yi = self.encode_target(y)?;
        let fwd = self.forward(&self.encode_source(x), &yi);
        let mut g = self.zero_grad();
        self.backward(&fwd, &vec![1.0; yi.len()], &mut g);
        Ok(g)
    }

    pub fn beam_search<S: AsRef<str>>(&self, x: &[S], beam_size: usize) -> Vec<Hypothesis> {
        beam::beam_search(self, &self.encode_source(x), beam_size)
    }

    pub fn checkpoint_string(&self) -> String {
        checkpoint::to_string(self)
    }

    pub fn from_checkpoint(text: &str, src: Vocab, tgt: Vocab) -> Result<Self, CheckpointError> {
        checkpoint::from_str(text, src, tgt)
    }

    pub fn save(&self, dir: &std::path::Path) -> Result<(), CheckpointError> {
        checkpoint::save(self, dir)
    }

    pub fn load(dir: &std::path::Path) -> Result<Self, CheckpointError> {
        checkpoint::load(dir)
    }
}

/// Cross-entropy objective over supervised pairs, already id-encoded.
pub fn ce_loss(policy: &Policy, batch: &[(Vec<usize>, Vec<usize>)]) -> f64 {
    let n = batch.len() as f64;
    -batch.iter().map(|(x, y)| policy.forward(x, y).logprob()).sum::<f64>() / n
}

/// Gradient of [`ce_loss`].
pub fn ce_grad(policy: &Policy, batch: &[(Vec<usize>, Vec<usize>)]) -> Result<Vec<f64>, PolicyError> {
    if batch.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    let mut g = policy.zero_grad();
    let c = -1.0 / batch.len() as f64;
    for (x, y) in batch {
        let fwd = policy.forward(x, y);
        policy.backward(&fwd, &vec![c; y.len()], &mut g);
    }
    Ok(g)
}

/// One clipped ADADELTA step on the cross-entropy loss; returns the loss
/// before the update.
pub fn ce_train_step(
    policy: &mut Policy,
    batch: &[(Vec<usize>, Vec<usize>)],
    opt: &mut Adadelta,
    clip: f64,
) -> Result<f64, PolicyError> {
    if batch.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    let mut g = policy.zero_grad();
    let c = -1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for (x, y) in batch {
        let fwd = policy.forward(x, y);
        loss -= fwd.logprob();
        policy.backward(&fwd, &vec![c; y.len()], &mut g);
    }
    clip_global_norm(&mut g, clip);
    opt.descend(policy.params_mut(), &g);
    Ok(loss / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(seed: u64, scale: f64) -> Policy {
        let cfg = ModelConfig {
            hidden: 3,
            emb: 2,
            max_len: 6,
        };
        Policy::new(
            cfg,
            Vocab::from_tokens(["a", "b"]),
            Vocab::from_tokens(["x@0", "y@s"]),
            seed,
            scale,
        )
        .unwrap()
    }

    #[test]
    fn layout_is_contiguous() {
        let p = tiny(0, 0.1);
        let mut off = 0;
        for t in p.layout().tensors() {
            assert_eq!(t.offset, off);
            off += t.len();
        }
        assert_eq!(off, p.params().len());
    }

    #[test]
    fn distributions_normalize() {
        let p = tiny(1, 0.5);
        let d = p.next_token_logprobs(&["a", "b"], &["x@0"]).unwrap();
        let s: f64 = d.iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_params_give_uniform() {
        let p = tiny(0, 0.0);
        let d = p.next_token_logprobs(&["a"], &[] as &[&str]).unwrap();
        for v in d {
            assert!((v.exp() - 1.0 / 5.0).abs() < 1e-15);
        }
    }

    #[test]
    fn unknown_candidate() {
        let p = tiny(0, 0.1);
        assert_eq!(
            p.token_logprob(&["a"], &[] as &[&str], "nope@0"),
            Err(PolicyError::UnknownToken("nope@0".into()))
        );
    }

    #[test]
    fn empty_batch_rejected() {
        let mut p = tiny(0, 0.1);
        let mut opt = Adadelta::new(p.params().len(), Default::default());
        assert_eq!(ce_train_step(&mut p, &[], &mut opt, 1.0), Err(PolicyError::EmptyBatch));
    }
}
