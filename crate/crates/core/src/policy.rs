//! The policy: a small softmax language model over the shared vocabulary.
//!
//! The hidden state is the mean embedding of the last `window` context
//! tokens plus the projection of every conditioning image feature; the
//! next-token logits are a linear read-out of that state. Gradients are
//! derived by hand and exact.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vocab::{TokenId, Vocab};

pub const DEFAULT_WINDOW: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub vocab_size: usize,
    pub dim: usize,
    pub image_dim: usize,
    pub window: usize,
    /// `vocab_size × dim`, row-major.
    pub embedding: Vec<f64>,
    /// `dim × vocab_size`, row-major.
    pub output: Vec<f64>,
    /// `image_dim × dim`, row-major.
    pub image_projection: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(vocab_size: usize, dim: usize, image_dim: usize, window: usize) -> Self {
        assert!(vocab_size > 0 && dim > 0 && window > 0);
        PolicyParams {
            vocab_size,
            dim,
            image_dim,
            window,
            embedding: vec![0.0; vocab_size * dim],
            output: vec![0.0; dim * vocab_size],
            image_projection: vec![0.0; image_dim * dim],
        }
    }

    /// Uniform entries in `[-scale, scale]`.
    pub fn random(vocab_size: usize, dim: usize, image_dim: usize, window: usize, scale: f64, seed: u64) -> Self {
        let mut p = Self::zeros(vocab_size, dim, image_dim, window);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for x in p.values_mut() {
            *x = rng.gen_range(-scale..=scale);
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.vocab_size, self.dim, self.image_dim, self.window)
    }

    pub fn same_shape(&self, other: &PolicyParams) -> bool {
        self.vocab_size == other.vocab_size
            && self.dim == other.dim
            && self.image_dim == other.image_dim
            && self.window == other.window
    }

    pub fn num_params(&self) -> usize {
        self.embedding.len() + self.output.len() + self.image_projection.len()
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.embedding.iter().chain(&self.output).chain(&self.image_projection)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.embedding
            .iter_mut()
            .chain(self.output.iter_mut())
            .chain(self.image_projection.iter_mut())
    }

    fn slot(&mut self, i: usize) -> &mut f64 {
        let (e, o) = (self.embedding.len(), self.output.len());
        if i < e {
            &mut self.embedding[i]
        } else if i < e + o {
            &mut self.output[i - e]
        } else {
            &mut self.image_projection[i - e - o]
        }
    }

    /// Flat view over (embedding, output, image projection).
    pub fn get_flat(&self, i: usize) -> f64 {
        let (e, o) = (self.embedding.len(), self.output.len());
        if i < e {
            self.embedding[i]
        } else if i < e + o {
            self.output[i - e]
        } else {
            self.image_projection[i - e - o]
        }
    }

    pub fn set_flat(&mut self, i: usize, v: f64) {
        *self.slot(i) = v;
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &PolicyParams) {
        assert!(self.same_shape(other), "parameter shapes differ");
        for (x, y) in self.values_mut().zip(other.values()) {
            *x += alpha * y;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values_mut().for_each(|x| *x *= alpha);
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|x| x.is_finite())
    }

    fn e_row(&self, token: TokenId) -> &[f64] {
        let t = token as usize;
        &self.embedding[t * self.dim..(t + 1) * self.dim]
    }
}

/// Tokens seen so far plus the conditioning image features.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Context {
    pub tokens: Vec<TokenId>,
    pub images: Vec<Vec<f64>>,
}

impl Context {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Context { tokens, images: Vec::new() }
    }

    pub fn with_image(mut self, image: Option<Vec<f64>>) -> Self {
        self.images.extend(image);
        self
    }
}

/// Log-probabilities over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct NextTokenDist(pub Vec<f64>);

impl NextTokenDist {
    pub fn logprob(&self, token: TokenId) -> f64 {
        self.0[token as usize]
    }

    pub fn log_sum_exp(&self) -> f64 {
        log_sum_exp(&self.0)
    }

    pub fn argmax(&self) -> TokenId {
        argmax(&self.0) as TokenId
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// First index of the maximum.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn image_state(theta: &PolicyParams, images: &[Vec<f64>]) -> Vec<f64> {
    let d = theta.dim;
    let mut s = vec![0.0; d];
    for img in images {
        assert_eq!(img.len(), theta.image_dim, "image feature dimension mismatch");
        for (a, &x) in img.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &theta.image_projection[a * d..(a + 1) * d];
            for (sk, &p) in s.iter_mut().zip(row) {
                *sk += x * p;
            }
        }
    }
    s
}

fn hidden(theta: &PolicyParams, window: &[TokenId], img: &[f64]) -> Vec<f64> {
    let mut h = img.to_vec();
    if !window.is_empty() {
        let inv = 1.0 / window.len() as f64;
        for &t in window {
            for (hk, &e) in h.iter_mut().zip(theta.e_row(t)) {
                *hk += inv * e;
            }
        }
    }
    h
}

fn logprobs_from_hidden(theta: &PolicyParams, h: &[f64]) -> Vec<f64> {
    let v = theta.vocab_size;
    let mut logits = vec![0.0; v];
    for (k, &hk) in h.iter().enumerate() {
        if hk == 0.0 {
            continue;
        }
        let row = &theta.output[k * v..(k + 1) * v];
        for (l, &w) in logits.iter_mut().zip(row) {
            *l += hk * w;
        }
    }
    let lse = log_sum_exp(&logits);
    logits.iter_mut().for_each(|l| *l -= lse);
    logits
}

fn window_of(tokens: &[TokenId], w: usize) -> &[TokenId] {
    &tokens[tokens.len().saturating_sub(w)..]
}

pub fn next_token_logprobs(theta: &PolicyParams, ctx: &Context) -> NextTokenDist {
    let img = image_state(theta, &ctx.images);
    let h = hidden(theta, window_of(&ctx.tokens, theta.window), &img);
    NextTokenDist(logprobs_from_hidden(theta, &h))
}

/// Incremental scorer: the image projection is computed once.
pub struct Scorer<'a> {
    theta: &'a PolicyParams,
    img: Vec<f64>,
}

impl<'a> Scorer<'a> {
    pub fn new(theta: &'a PolicyParams, images: &[Vec<f64>]) -> Self {
        Scorer {
            theta,
            img: image_state(theta, images),
        }
    }

    /// Next-token distribution after `tokens` (the full context stream).
    pub fn next(&self, tokens: &[TokenId]) -> NextTokenDist {
        let h = hidden(self.theta, window_of(tokens, self.theta.window), &self.img);
        NextTokenDist(logprobs_from_hidden(self.theta, &h))
    }
}

/// `log π(tokens[t] | c0 + tokens[..t])` for every position.
pub fn sequence_logprobs(theta: &PolicyParams, c0: &Context, tokens: &[TokenId]) -> Vec<f64> {
    let scorer = Scorer::new(theta, &c0.images);
    let mut stream = c0.tokens.clone();
    stream.reserve(tokens.len());
    let mut out = Vec::with_capacity(tokens.len());
    for &t in tokens {
        out.push(scorer.next(&stream).logprob(t));
        stream.push(t);
    }
    out
}

/// Gradient of `Σ_t weights[t] · log π(tokens[t] | ·)` with respect to all
/// parameters. Positions with weight exactly zero are skipped.
pub fn grad_sequence_logprob(theta: &PolicyParams, c0: &Context, tokens: &[TokenId], weights: &[f64]) -> PolicyParams {
    let mut grad = theta.zeros_like();
    accumulate_grad(theta, c0, tokens, weights, &mut grad);
    grad
}

/// Adds the weighted log-likelihood gradient into `grad`.
pub fn accumulate_grad(theta: &PolicyParams, c0: &Context, tokens: &[TokenId], weights: &[f64], grad: &mut PolicyParams) {
    assert_eq!(tokens.len(), weights.len(), "one weight per token");
    let (d, v) = (theta.dim, theta.vocab_size);
    let img = image_state(theta, &c0.images);
    let mut stream = c0.tokens.clone();
    stream.extend_from_slice(tokens);
    let base = c0.tokens.len();
    let mut dimg = vec![0.0; d];
    let mut g = vec![0.0; v];
    let mut dh = vec![0.0; d];
    for (t, (&y, &w)) in tokens.iter().zip(weights).enumerate() {
        if w == 0.0 {
            continue;
        }
        let window = window_of(&stream[..base + t], theta.window);
        let h = hidden(theta, window, &img);
        let lp = logprobs_from_hidden(theta, &h);
        // d(w·logp_y)/dlogits = w·(onehot(y) − p)
        for (gv, l) in g.iter_mut().zip(&lp) {
            *gv = -w * l.exp();
        }
        g[y as usize] += w;
        dh.iter_mut().for_each(|x| *x = 0.0);
        for k in 0..d {
            let wrow = &theta.output[k * v..(k + 1) * v];
            let grow = &mut grad.output[k * v..(k + 1) * v];
            let hk = h[k];
            let mut acc = 0.0;
            for ((gw, &wk), &gv) in grow.iter_mut().zip(wrow).zip(&g) {
                *gw += hk * gv;
                acc += wk * gv;
            }
            dh[k] = acc;
        }
        if !window.is_empty() {
            let inv = 1.0 / window.len() as f64;
            for &c in window {
                let row = &mut grad.embedding[c as usize * d..(c as usize + 1) * d];
                for (r, &x) in row.iter_mut().zip(&dh) {
                    *r += inv * x;
                }
            }
        }
        for (a, &x) in dimg.iter_mut().zip(&dh) {
            *a += x;
        }
    }
    for img in &c0.images {
        for (a, &x) in img.iter().enumerate() {
            let row = &mut grad.image_projection[a * d..(a + 1) * d];
            for (r, &dk) in row.iter_mut().zip(&dimg) {
                *r += x * dk;
            }
        }
    }
}

/// Decoding mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Sampling {
    /// Zero-temperature limit: argmax, ties to the lowest id.
    Greedy,
    Temperature(f64),
}

impl Sampling {
    /// `temperature <= 0` selects greedy decoding.
    pub fn from_temperature(t: f64) -> Self {
        if t <= 0.0 {
            Sampling::Greedy
        } else {
            Sampling::Temperature(t)
        }
    }
}

/// Draws a token, optionally restricted to `allowed`.
pub fn sample_token<R: Rng>(dist: &NextTokenDist, allowed: Option<&[TokenId]>, sampling: Sampling, rng: &mut R) -> TokenId {
    let candidates: Vec<TokenId> = match allowed {
        Some(a) => a.to_vec(),
        None => (0..dist.0.len() as TokenId).collect(),
    };
    assert!(!candidates.is_empty(), "no candidate tokens");
    let lps: Vec<f64> = candidates.iter().map(|&t| dist.logprob(t)).collect();
    match sampling {
        Sampling::Greedy => candidates[argmax(&lps)],
        Sampling::Temperature(temp) => {
            assert!(temp > 0.0, "temperature must be positive");
            let scaled: Vec<f64> = lps.iter().map(|l| l / temp).collect();
            let lse = log_sum_exp(&scaled);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (&t, s) in candidates.iter().zip(&scaled) {
                acc += (s - lse).exp();
                if u < acc {
                    return t;
                }
            }
            *candidates.last().unwrap()
        }
    }
}

/// Seeded ancestral sampling until a stop token (included) or `max_len`.
pub fn sample_sequence(
    theta: &PolicyParams,
    prompt: &Context,
    stop_tokens: &[TokenId],
    max_len: usize,
    sampling: Sampling,
    seed: u64,
) -> Vec<TokenId> {
    assert!(max_len >= 1, "max_len must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scorer = Scorer::new(theta, &prompt.images);
    let mut stream = prompt.tokens.clone();
    let mut out = Vec::new();
    while out.len() < max_len {
        let t = sample_token(&scorer.next(&stream), None, sampling, &mut rng);
        out.push(t);
        stream.push(t);
        if stop_tokens.contains(&t) {
            break;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_FORMAT: &str = "rwr-policy";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
}

/// JSON checkpoint: a format/version header, the vocabulary, the shape
/// fields and the three row-major parameter arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub vocab: Vec<String>,
    #[serde(flatten)]
    pub params: PolicyParams,
}

impl Checkpoint {
    pub fn new(vocab: &Vocab, params: PolicyParams) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            vocab: vocab.tokens().to_vec(),
            params,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Vocab, PolicyParams), CheckpointError> {
        let ck: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
        ck.into_parts()
    }

    pub fn into_parts(self) -> Result<(Vocab, PolicyParams), CheckpointError> {
        let bad = |m: String| CheckpointError::Invalid(m);
        if self.format != CHECKPOINT_FORMAT {
            return Err(bad(format!("format `{}`", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {}", self.version)));
        }
        let p = self.params;
        let vocab = Vocab::from_token_list(self.vocab).map_err(bad)?;
        if vocab.len() != p.vocab_size {
            return Err(bad(format!("vocab has {} tokens, params expect {}", vocab.len(), p.vocab_size)));
        }
        let shapes = [
            ("embedding", p.embedding.len(), p.vocab_size * p.dim),
            ("output", p.output.len(), p.dim * p.vocab_size),
            ("image_projection", p.image_projection.len(), p.image_dim * p.dim),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(bad(format!("{name} has {got} entries, expected {want}")));
            }
        }
        if p.window == 0 || p.dim == 0 {
            return Err(bad("window and dim must be positive".into()));
        }
        if !p.is_finite() {
            return Err(bad("non-finite parameter".into()));
        }
        Ok((vocab, p))
    }
}
