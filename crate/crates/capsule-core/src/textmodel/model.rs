//! Forward, backward, generation, and losses for the tiny transformer.
//!
//! Architecture: learned token + position embeddings, pre-RMSNorm blocks of
//! causal multi-head attention and a GELU MLP, a final RMSNorm, and a weight
//! tied output head. Hidden-state outputs are the post-final-norm states, so
//! pooled embeddings share the scale the head sees.
//!
//! The incremental decode path and the full-sequence path run the same
//! per-position code with identical accumulation order, so their outputs are
//! bit-identical; `ForwardPass::backward` propagates upstream gradients on
//! logits and/or hidden states into parameter space.

use super::math::{self, Mat};
use super::{ModelParams, TokenId, TokenSequence};
use crate::error::{Error, Result};
use crate::seed;
use rand::Rng;
use std::collections::BTreeMap;

/// Parameter gradients, keyed like `ModelParams::weights`.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub mats: BTreeMap<String, Mat>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients {
            mats: params
                .weights
                .iter()
                .map(|(k, m)| (k.clone(), Mat::zeros(m.rows, m.cols)))
                .collect(),
        }
    }

    pub fn zero(&mut self) {
        for m in self.mats.values_mut() {
            m.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.mats
            .values()
            .map(|m| m.data.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for m in self.mats.values_mut() {
            m.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Global-norm clipping. Returns the pre-clip norm.
    pub fn clip_to_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.mats
            .values()
            .all(|m| m.data.iter().all(|v| v.is_finite()))
    }
}

/// Per-layer growing key/value cache for incremental decoding.
#[derive(Debug, Clone)]
pub struct DecodeState {
    k: Vec<Vec<Vec<f64>>>,
    v: Vec<Vec<Vec<f64>>>,
    len: usize,
}

impl DecodeState {
    pub fn new(n_layers: usize) -> Self {
        DecodeState {
            k: vec![Vec::new(); n_layers],
            v: vec![Vec::new(); n_layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Bytes held by the cache; the latency bench uses this for its
    /// out-of-memory guard.
    pub fn approx_bytes(&self) -> usize {
        let per_layer: usize = self.k.first().map(|l| l.len()).unwrap_or(0);
        self.k.len() * per_layer * self.k.first().and_then(|l| l.first()).map(|r| r.len()).unwrap_or(0) * 16
    }
}

struct LayerTrace {
    x_in: Vec<Vec<f64>>,
    a_norm: Vec<Vec<f64>>,
    ri_a: Vec<f64>,
    q: Vec<Vec<f64>>,
    attn_w: Vec<Vec<Vec<f64>>>,
    head_out: Vec<Vec<f64>>,
    x_mid: Vec<Vec<f64>>,
    b_norm: Vec<Vec<f64>>,
    ri_b: Vec<f64>,
    h1: Vec<Vec<f64>>,
    g: Vec<Vec<f64>>,
}

impl LayerTrace {
    fn new() -> Self {
        LayerTrace {
            x_in: Vec::new(),
            a_norm: Vec::new(),
            ri_a: Vec::new(),
            q: Vec::new(),
            attn_w: Vec::new(),
            head_out: Vec::new(),
            x_mid: Vec::new(),
            b_norm: Vec::new(),
            ri_b: Vec::new(),
            h1: Vec::new(),
            g: Vec::new(),
        }
    }
}

/// Activations of one full forward pass, kept for backward.
pub struct ForwardPass {
    ids: Vec<TokenId>,
    layers: Vec<LayerTrace>,
    kv: DecodeState,
    x_final: Vec<Vec<f64>>,
    ri_final: Vec<f64>,
    hidden: Vec<Vec<f64>>,
    logits: Vec<Vec<f64>>,
}

impl ForwardPass {
    /// One score vector of width |V| per position.
    pub fn logits(&self) -> &[Vec<f64>] {
        &self.logits
    }

    /// One d-dimensional hidden state per position (final layer, post-norm).
    pub fn hidden(&self) -> &[Vec<f64>] {
        &self.hidden
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Accumulates parameter gradients for upstream gradients `d_logits`
    /// and/or `d_hidden` (either may be absent; lengths must equal the
    /// sequence length when present).
    pub fn backward(
        &self,
        params: &ModelParams,
        d_logits: Option<&[Vec<f64>]>,
        d_hidden: Option<&[Vec<f64>]>,
        grads: &mut Gradients,
    ) {
        let t_len = self.ids.len();
        if t_len == 0 {
            return;
        }
        let cfg = &params.config;
        let d = cfg.d_model;
        let hd = cfg.head_dim();
        let scale = (hd as f64).sqrt();
        let wte = &params.weights["wte"];

        // head + upstream hidden gradients → pre-final-norm stream
        let mut dx: Vec<Vec<f64>> = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let mut d_hn = vec![0.0; d];
            if let Some(dl) = d_logits {
                math::matvec_bwd_x(&mut d_hn, wte, &dl[t]);
                math::matvec_bwd_w(grads.mats.get_mut("wte").unwrap(), &dl[t], &self.hidden[t]);
            }
            if let Some(dh) = d_hidden {
                math::add_assign(&mut d_hn, &dh[t]);
            }
            dx.push(math::rmsnorm_bwd(&d_hn, &self.x_final[t], self.ri_final[t]));
        }

        for l in (0..cfg.n_layers).rev() {
            let lt = &self.layers[l];
            let w_fc1 = &params.weights[&format!("l{l}.fc1")];
            let w_fc2 = &params.weights[&format!("l{l}.fc2")];
            let w_q = &params.weights[&format!("l{l}.wq")];
            let w_k = &params.weights[&format!("l{l}.wk")];
            let w_v = &params.weights[&format!("l{l}.wv")];
            let w_o = &params.weights[&format!("l{l}.wo")];

            // MLP sublayer (per-position)
            for t in 0..t_len {
                let d_mlp = dx[t].clone();
                math::matvec_bwd_w(
                    grads.mats.get_mut(&format!("l{l}.fc2")).unwrap(),
                    &d_mlp,
                    &lt.g[t],
                );
                let mut dg = vec![0.0; 4 * d];
                math::matvec_bwd_x(&mut dg, w_fc2, &d_mlp);
                let dh1: Vec<f64> = dg
                    .iter()
                    .zip(&lt.h1[t])
                    .map(|(dgi, h)| dgi * math::gelu_grad(*h))
                    .collect();
                math::matvec_bwd_w(
                    grads.mats.get_mut(&format!("l{l}.fc1")).unwrap(),
                    &dh1,
                    &lt.b_norm[t],
                );
                let mut db = vec![0.0; d];
                math::matvec_bwd_x(&mut db, w_fc1, &dh1);
                let d_norm = math::rmsnorm_bwd(&db, &lt.x_mid[t], lt.ri_b[t]);
                math::add_assign(&mut dx[t], &d_norm);
            }

            // Attention sublayer (cross-position through k/v)
            let mut d_q = vec![vec![0.0; d]; t_len];
            let mut d_k = vec![vec![0.0; d]; t_len];
            let mut d_v = vec![vec![0.0; d]; t_len];
            for t in 0..t_len {
                let d_attn = dx[t].clone();
                math::matvec_bwd_w(
                    grads.mats.get_mut(&format!("l{l}.wo")).unwrap(),
                    &d_attn,
                    &lt.head_out[t],
                );
                let mut d_ho = vec![0.0; d];
                math::matvec_bwd_x(&mut d_ho, w_o, &d_attn);

                for h in 0..cfg.n_heads {
                    let hs = h * hd;
                    let aw = &lt.attn_w[t][h];
                    // value gradients and raw weight gradients
                    let mut dw_raw = vec![0.0; t + 1];
                    for u in 0..=t {
                        let vu = &self.kv.v[l][u][hs..hs + hd];
                        let dho_h = &d_ho[hs..hs + hd];
                        dw_raw[u] = math::dot(dho_h, vu);
                        let dvu = &mut d_v[u][hs..hs + hd];
                        for i in 0..hd {
                            dvu[i] += aw[u] * dho_h[i];
                        }
                    }
                    // softmax backward over the causal row
                    let dot_aw = math::dot(aw, &dw_raw);
                    for u in 0..=t {
                        let ds = aw[u] * (dw_raw[u] - dot_aw);
                        let ku = &self.kv.k[l][u][hs..hs + hd];
                        let qt = &lt.q[t][hs..hs + hd];
                        let dqt = &mut d_q[t][hs..hs + hd];
                        for i in 0..hd {
                            dqt[i] += ds * ku[i] / scale;
                        }
                        let dku = &mut d_k[u][hs..hs + hd];
                        for i in 0..hd {
                            dku[i] += ds * qt[i] / scale;
                        }
                    }
                }
            }
            // project q/k/v gradients back through their weights
            for t in 0..t_len {
                let a = &lt.a_norm[t];
                math::matvec_bwd_w(grads.mats.get_mut(&format!("l{l}.wq")).unwrap(), &d_q[t], a);
                math::matvec_bwd_w(grads.mats.get_mut(&format!("l{l}.wk")).unwrap(), &d_k[t], a);
                math::matvec_bwd_w(grads.mats.get_mut(&format!("l{l}.wv")).unwrap(), &d_v[t], a);
                let mut da = vec![0.0; d];
                math::matvec_bwd_x(&mut da, w_q, &d_q[t]);
                math::matvec_bwd_x(&mut da, w_k, &d_k[t]);
                math::matvec_bwd_x(&mut da, w_v, &d_v[t]);
                let d_norm = math::rmsnorm_bwd(&da, &lt.x_in[t], lt.ri_a[t]);
                math::add_assign(&mut dx[t], &d_norm);
            }
        }

        // embeddings
        let wte_g = grads.mats.get_mut("wte").unwrap();
        for t in 0..t_len {
            math::add_assign(wte_g.row_mut(self.ids[t] as usize), &dx[t]);
        }
        let wpe_g = grads.mats.get_mut("wpe").unwrap();
        for t in 0..t_len {
            math::add_assign(wpe_g.row_mut(t), &dx[t]);
        }
    }
}

fn layer_weights<'a>(params: &'a ModelParams, l: usize) -> [&'a Mat; 6] {
    [
        &params.weights[&format!("l{l}.wq")],
        &params.weights[&format!("l{l}.wk")],
        &params.weights[&format!("l{l}.wv")],
        &params.weights[&format!("l{l}.wo")],
        &params.weights[&format!("l{l}.fc1")],
        &params.weights[&format!("l{l}.fc2")],
    ]
}

/// Advances one position: consumes `id` at position `pos`, growing `kv`.
/// Returns (hidden, logits) for that position. When `trace` is set, all
/// intermediates needed by backward are recorded.
fn advance(
    params: &ModelParams,
    id: TokenId,
    pos: usize,
    kv: &mut DecodeState,
    mut trace: Option<&mut ForwardPass>,
) -> (Vec<f64>, Vec<f64>) {
    let cfg = &params.config;
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let scale = (hd as f64).sqrt();

    let wte = &params.weights["wte"];
    let wpe = &params.weights["wpe"];
    let mut x: Vec<f64> = wte
        .row(id as usize)
        .iter()
        .zip(wpe.row(pos))
        .map(|(a, b)| a + b)
        .collect();

    for l in 0..cfg.n_layers {
        let [w_q, w_k, w_v, w_o, w_fc1, w_fc2] = layer_weights(params, l);
        let x_in = x.clone();
        let (a_norm, ri_a) = math::rmsnorm(&x_in);
        let q = math::matvec(w_q, &a_norm);
        let k = math::matvec(w_k, &a_norm);
        let v = math::matvec(w_v, &a_norm);
        kv.k[l].push(k);
        kv.v[l].push(v);
        let t_len = kv.k[l].len();

        let mut head_out = vec![0.0; d];
        let mut aw_heads: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let hs = h * hd;
            let qh = &q[hs..hs + hd];
            let scores: Vec<f64> = (0..t_len)
                .map(|u| math::dot(qh, &kv.k[l][u][hs..hs + hd]) / scale)
                .collect();
            let aw = math::softmax(&scores);
            for i in 0..hd {
                let mut acc = 0.0;
                for u in 0..t_len {
                    acc += aw[u] * kv.v[l][u][hs + i];
                }
                head_out[hs + i] = acc;
            }
            aw_heads.push(aw);
        }
        let attn_out = math::matvec(w_o, &head_out);
        let x_mid: Vec<f64> = x_in.iter().zip(&attn_out).map(|(a, b)| a + b).collect();

        let (b_norm, ri_b) = math::rmsnorm(&x_mid);
        let h1 = math::matvec(w_fc1, &b_norm);
        let g: Vec<f64> = h1.iter().map(|v| math::gelu(*v)).collect();
        let mlp_out = math::matvec(w_fc2, &g);
        x = x_mid.iter().zip(&mlp_out).map(|(a, b)| a + b).collect();

        if let Some(tr) = trace.as_deref_mut() {
            let lt = &mut tr.layers[l];
            lt.x_in.push(x_in);
            lt.a_norm.push(a_norm);
            lt.ri_a.push(ri_a);
            lt.q.push(q);
            lt.attn_w.push(aw_heads);
            lt.head_out.push(head_out);
            lt.x_mid.push(x_mid);
            lt.b_norm.push(b_norm);
            lt.ri_b.push(ri_b);
            lt.h1.push(h1);
            lt.g.push(g);
        }
    }
    kv.len += 1;

    let (hn, ri_f) = math::rmsnorm(&x);
    let logits = math::matvec(wte, &hn);
    if let Some(tr) = trace {
        tr.x_final.push(x);
        tr.ri_final.push(ri_f);
        tr.hidden.push(hn.clone());
        tr.logits.push(logits.clone());
        tr.ids.push(id);
    }
    (hn, logits)
}

/// Full forward pass with activation recording; the entry point for
/// training-time computation and for hidden-state/logit inspection.
pub fn forward(params: &ModelParams, seq: &TokenSequence) -> Result<ForwardPass> {
    let window = params.config.context_window;
    if seq.len() > window {
        return Err(Error::SequenceTooLong {
            len: seq.len(),
            window,
        });
    }
    let mut pass = ForwardPass {
        ids: Vec::with_capacity(seq.len()),
        layers: (0..params.config.n_layers).map(|_| LayerTrace::new()).collect(),
        kv: DecodeState::new(params.config.n_layers),
        x_final: Vec::with_capacity(seq.len()),
        ri_final: Vec::with_capacity(seq.len()),
        hidden: Vec::with_capacity(seq.len()),
        logits: Vec::with_capacity(seq.len()),
    };
    let mut kv = DecodeState::new(params.config.n_layers);
    for (pos, &id) in seq.ids.iter().enumerate() {
        advance(params, id, pos, &mut kv, Some(&mut pass));
    }
    pass.kv = kv;
    Ok(pass)
}

/// Decoding strategy for generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeStrategy {
    Greedy,
    Sampled { seed: u64 },
}

/// Streaming decoder over a growing context. Used directly by the latency
/// bench to run several sequences in lockstep.
pub struct Decoder<'a> {
    params: &'a ModelParams,
    kv: DecodeState,
    last_logits: Vec<f64>,
    last_hidden: Vec<f64>,
}

impl<'a> Decoder<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        Decoder {
            params,
            kv: DecodeState::new(params.config.n_layers),
            last_logits: Vec::new(),
            last_hidden: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.kv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kv.is_empty()
    }

    pub fn kv_bytes(&self) -> usize {
        self.kv.approx_bytes()
    }

    /// Feeds one token; afterwards `logits()` scores the next token.
    pub fn feed(&mut self, id: TokenId) -> Result<()> {
        let pos = self.kv.len();
        if pos >= self.params.config.context_window {
            return Err(Error::ContextOverflow {
                prompt: pos,
                requested: 1,
                window: self.params.config.context_window,
            });
        }
        let (hidden, logits) = advance(self.params, id, pos, &mut self.kv, None);
        self.last_logits = logits;
        self.last_hidden = hidden;
        Ok(())
    }

    pub fn logits(&self) -> &[f64] {
        &self.last_logits
    }

    /// Hidden state at the most recently fed position.
    pub fn hidden(&self) -> &[f64] {
        &self.last_hidden
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_categorical(probs: &[f64], rng: &mut rand_chacha::ChaCha8Rng) -> usize {
    let mut dart: f64 = rng.gen::<f64>();
    for (i, p) in probs.iter().enumerate() {
        dart -= p;
        if dart <= 0.0 {
            return i;
        }
    }
    probs.len() - 1
}

/// Generates up to `max_new` tokens after `prompt`, stopping early at
/// `eos_id`. Returns only the newly generated tokens.
pub fn generate(
    params: &ModelParams,
    prompt: &TokenSequence,
    max_new: usize,
    strategy: DecodeStrategy,
) -> Result<TokenSequence> {
    let window = params.config.context_window;
    if prompt.len() + max_new > window {
        return Err(Error::ContextOverflow {
            prompt: prompt.len(),
            requested: max_new,
            window,
        });
    }
    if prompt.is_empty() {
        return Err(Error::SequenceTooShort { len: 0, min: 1 });
    }
    if max_new == 0 {
        return Ok(TokenSequence::default());
    }
    let mut dec = Decoder::new(params);
    for &id in &prompt.ids {
        dec.feed(id)?;
    }
    let mut rng = match strategy {
        DecodeStrategy::Greedy => None,
        DecodeStrategy::Sampled { seed } => Some(seed::rng_from(seed, "generate")),
    };
    let eos = params.vocab.eos_id;
    let mut out = Vec::new();
    for _ in 0..max_new {
        let next = match rng.as_mut() {
            None => argmax(dec.logits()) as TokenId,
            Some(r) => sample_categorical(&math::softmax(dec.logits()), r) as TokenId,
        };
        if next == eos {
            break;
        }
        out.push(next);
        if out.len() < max_new {
            dec.feed(next)?;
        }
    }
    Ok(TokenSequence::new(out))
}

/// Mean next-token negative log-likelihood. Finite for any valid input.
pub fn lm_loss(params: &ModelParams, seq: &TokenSequence) -> Result<f64> {
    let pass = forward(params, seq)?;
    lm_loss_from_pass(&pass, seq)
}

fn lm_loss_from_pass(pass: &ForwardPass, seq: &TokenSequence) -> Result<f64> {
    if seq.len() < 2 {
        return Err(Error::SequenceTooShort {
            len: seq.len(),
            min: 2,
        });
    }
    let n_pred = seq.len() - 1;
    let mut total = 0.0;
    for t in 0..n_pred {
        total -= math::log_softmax_at(&pass.logits()[t], seq.ids[t + 1] as usize);
    }
    Ok(total / n_pred as f64)
}

/// LM loss plus parameter gradients (accumulated into `grads`).
pub fn lm_loss_grad(
    params: &ModelParams,
    seq: &TokenSequence,
    grads: &mut Gradients,
) -> Result<f64> {
    lm_loss_grad_masked(params, seq, 0, grads)
}

/// Completion-masked LM loss: mean next-token NLL over predictions of
/// positions ≥ `target_from` only. `target_from = 0` is the plain LM loss;
/// a prompt-length offset trains answer/summary completions without
/// spending gradient on modelling the context.
pub fn lm_loss_grad_masked(
    params: &ModelParams,
    seq: &TokenSequence,
    target_from: usize,
    grads: &mut Gradients,
) -> Result<f64> {
    if seq.len() < 2 {
        return Err(Error::SequenceTooShort {
            len: seq.len(),
            min: 2,
        });
    }
    // predictions at positions first..seq.len()-1 target ids[t+1]
    let first = target_from.saturating_sub(1);
    if first >= seq.len() - 1 {
        return Err(Error::EmptySpan("loss mask covers no predictions".into()));
    }
    let pass = forward(params, seq)?;
    let n_pred = seq.len() - 1 - first;
    let norm = 1.0 / n_pred as f64;
    let v = params.vocab_size();
    let mut loss = 0.0;
    let mut d_logits: Vec<Vec<f64>> = Vec::with_capacity(seq.len());
    for t in 0..seq.len() {
        if t >= first && t < seq.len() - 1 {
            loss -= math::log_softmax_at(&pass.logits()[t], seq.ids[t + 1] as usize);
            let mut dl = math::softmax(&pass.logits()[t]);
            dl[seq.ids[t + 1] as usize] -= 1.0;
            dl.iter_mut().for_each(|x| *x *= norm);
            d_logits.push(dl);
        } else {
            d_logits.push(vec![0.0; v]);
        }
    }
    pass.backward(params, Some(&d_logits), None, grads);
    Ok(loss * norm)
}

/// Central finite-difference gradients of an arbitrary scalar loss over the
/// parameters. Test oracle; restores the parameters it perturbs.
pub fn finite_difference_grad<F>(params: &mut ModelParams, step: f64, mut loss: F) -> Gradients
where
    F: FnMut(&ModelParams) -> f64,
{
    let names: Vec<String> = params.weights.keys().cloned().collect();
    let mut out = Gradients::zeros_like(params);
    for name in names {
        let len = params.weights[&name].len();
        for i in 0..len {
            let orig = params.weights[&name].data[i];
            params.weights.get_mut(&name).unwrap().data[i] = orig + step;
            let lp = loss(params);
            params.weights.get_mut(&name).unwrap().data[i] = orig - step;
            let lm = loss(params);
            params.weights.get_mut(&name).unwrap().data[i] = orig;
            out.mats.get_mut(&name).unwrap().data[i] = (lp - lm) / (2.0 * step);
        }
    }
    out
}

/// Outcome of comparing analytic gradients against a finite-difference
/// oracle, parameter by parameter.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub n_params: usize,
    pub within_tight: usize,
    pub within_loose: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
}

impl GradCheckReport {
    pub fn frac_tight(&self) -> f64 {
        self.within_tight as f64 / self.n_params as f64
    }

    pub fn all_loose(&self) -> bool {
        self.within_loose == self.n_params
    }
}

/// Relative-error comparison between two gradient sets.
pub fn compare_gradients(
    analytic: &Gradients,
    oracle: &Gradients,
    tight: f64,
    loose: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        n_params: 0,
        within_tight: 0,
        within_loose: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
    };
    for (name, a) in &analytic.mats {
        let b = &oracle.mats[name];
        for (i, (x, y)) in a.data.iter().zip(&b.data).enumerate() {
            report.n_params += 1;
            let rel = if x.abs() < 1e-12 && y.abs() < 1e-12 {
                0.0
            } else {
                (x - y).abs() / x.abs().max(y.abs()).max(1e-8)
            };
            if rel <= tight {
                report.within_tight += 1;
            }
            if rel <= loose {
                report.within_loose += 1;
            }
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = format!("{name}[{i}]");
            }
        }
    }
    report
}
