//! Routing gates.
//!
//! A row gate predicts, per token, whether the token goes through the
//! transformer stage (index 0) or the identity mapping (index 1). A column
//! gate makes one decision for the whole response map from its mean-pooled
//! token: downsample into the next level (index 0) or not (index 1).
//!
//! Training samples a hard decision with the Gumbel-max trick and passes
//! gradients through the tempered softmax relaxation (straight-through).
//! Inference takes the argmax of the probabilities predicted by the
//! momentum-averaged weights, with ties resolved to index 0.

use rand::Rng;

use crate::autodiff::{softmax_rows_values, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::Tensor;

/// Lower/upper clamp applied to uniform draws before the double log.
pub const UNIFORM_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateKind {
    Row,
    Col,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
    /// Averaged weights with Gumbel sampling and no gradient; used for routing statistics.
    Sample,
}

/// Where Gumbel noise is added during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GumbelInput {
    /// Noise on the projection logits: exact softmax sampling distribution.
    Logits,
    /// Noise on the softmax probabilities themselves.
    Probs,
}

/// Learnable projection `w` (d×2) and bias (1×2), with momentum-averaged copies.
#[derive(Clone, Debug)]
pub struct RoutingGate {
    pub kind: GateKind,
    pub w: ParamId,
    pub b: ParamId,
    pub w_hat: ParamId,
    pub b_hat: ParamId,
    pub momentum: f64,
    pub tau: f64,
    pub noise_on: GumbelInput,
}

/// Output of one gate evaluation.
#[derive(Clone, Debug)]
pub struct GateDecision {
    /// Exact 0/1 values; `l×1` for row gates, `1×1` for column gates.
    pub hard: Tensor,
    /// Value used in forward composition: numerically `hard`, gradient via `soft`.
    pub value: Var,
    /// First-column relaxation (execute probability under noise and temperature).
    pub soft: Var,
    /// Softmax of the projection logits, `k×2`.
    pub probs: Var,
}

impl GateDecision {
    pub fn kept(&self) -> usize {
        self.hard.data().iter().filter(|&&v| v == 1.0).count()
    }
}

impl RoutingGate {
    /// Registers a gate with `w ~ N(0, w_std²)` and bias giving `keep_prob` on zero input.
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        kind: GateKind,
        dim: usize,
        keep_prob: f64,
        w_std: f64,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let w = if w_std > 0.0 {
            Tensor::randn(&[dim, 2], w_std, rng)
        } else {
            Tensor::zeros(&[dim, 2])
        };
        let b = Tensor::from_rows(&[&[keep_logit(keep_prob), 0.0]]);
        let w_hat = w.clone();
        let b_hat = b.clone();
        Self {
            kind,
            w: store.add(format!("{name}.w"), w, trainable, false),
            b: store.add(format!("{name}.b"), b, trainable, false),
            w_hat: store.add(format!("{name}.w_hat"), w_hat, false, false),
            b_hat: store.add(format!("{name}.b_hat"), b_hat, false, false),
            momentum: 0.99,
            tau: 1.0,
            noise_on: GumbelInput::Logits,
        }
    }

    fn logits(&self, s: &mut Session<'_>, x: Var, phase: Phase) -> Result<Var> {
        let (w, b) = match phase {
            Phase::Train => (s.p(self.w), s.p(self.b)),
            Phase::Infer | Phase::Sample => (s.p(self.w_hat), s.p(self.b_hat)),
        };
        let d = s.graph.value(w).rows();
        if s.graph.value(x).cols() != d {
            return Err(Error::shape("gate", s.graph.value(x).shape(), s.graph.value(w).shape()));
        }
        // the gate reads the map but does not shape it
        let x = {
            let v = s.graph.value(x).clone();
            s.graph.constant(v)
        };
        let z = s.graph.matmul(x, w)?;
        s.graph.add_row(z, b)
    }

    fn decide<R: Rng + ?Sized>(
        &self,
        s: &mut Session<'_>,
        x: Var,
        rng: &mut R,
        phase: Phase,
    ) -> Result<GateDecision> {
        let logits = self.logits(s, x, phase)?;
        let probs = s.graph.softmax_rows(logits)?;
        match phase {
            Phase::Train => {
                let source = match self.noise_on {
                    GumbelInput::Logits => logits,
                    GumbelInput::Probs => probs,
                };
                let (hard, soft) = gumbel_hard(&mut s.graph, source, self.tau, rng)?;
                let value = s.graph.straight_through(hard.clone(), soft)?;
                Ok(GateDecision {
                    hard,
                    value,
                    soft,
                    probs,
                })
            }
            Phase::Sample => {
                let (hard, soft) = gumbel_hard(&mut s.graph, logits, self.tau, rng)?;
                let value = s.graph.constant(hard.clone());
                Ok(GateDecision {
                    hard,
                    value,
                    soft,
                    probs,
                })
            }
            Phase::Infer => {
                let hard = argmax_first(s.graph.value(probs));
                let value = s.graph.constant(hard.clone());
                let soft = s.graph.slice_cols(probs, 0, 1)?;
                Ok(GateDecision {
                    hard,
                    value,
                    soft,
                    probs,
                })
            }
        }
    }

    /// Per-token decision on an `l×d` response map.
    pub fn row_forward<R: Rng + ?Sized>(
        &self,
        s: &mut Session<'_>,
        f: Var,
        rng: &mut R,
        phase: Phase,
    ) -> Result<GateDecision> {
        if self.kind != GateKind::Row {
            return Err(Error::Contract("row_forward on a column gate".into()));
        }
        self.decide(s, f, rng, phase)
    }

    /// Whole-map decision from the mean-pooled token.
    pub fn col_forward<R: Rng + ?Sized>(
        &self,
        s: &mut Session<'_>,
        f: Var,
        rng: &mut R,
        phase: Phase,
    ) -> Result<GateDecision> {
        if self.kind != GateKind::Col {
            return Err(Error::Contract("col_forward on a row gate".into()));
        }
        let pooled = s.graph.mean_pool_rows(f)?;
        self.decide(s, pooled, rng, phase)
    }

    /// `ŵ ← m·ŵ + (1−m)·w`, applied to both projection and bias. `w` is untouched.
    pub fn momentum_update(&self, store: &mut ParamStore) {
        let m = self.momentum;
        for (src, dst) in [(self.w, self.w_hat), (self.b, self.b_hat)] {
            let w = store.value(src).clone();
            for (h, x) in store.value_mut(dst).data_mut().iter_mut().zip(w.data()) {
                *h = m * *h + (1.0 - m) * x;
            }
        }
    }
}

/// Bias logit giving execute probability `p` against a zero skip logit.
pub fn keep_logit(p: f64) -> f64 {
    let p = p.clamp(1e-9, 1.0 - 1e-9);
    (p / (1.0 - p)).ln()
}

/// One standard Gumbel draw via `−ln(−ln u)`, `u` clamped away from 0 and 1.
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen::<f64>().clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
    -(-u.ln()).ln()
}

/// Hard Gumbel-Softmax over `k×2` scores.
///
/// Returns the `k×1` indicator of column 0 winning `argmax(scores + g)` (ties
/// to column 0) and the matching column of `softmax((scores + g) / tau)`.
pub fn gumbel_hard<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    scores: Var,
    tau: f64,
    rng: &mut R,
) -> Result<(Tensor, Var)> {
    if !(tau > 0.0) {
        return Err(Error::Contract(format!("gumbel temperature must be > 0, got {tau}")));
    }
    let shape = g.value(scores).shape().to_vec();
    if shape.len() != 2 || shape[1] != 2 {
        return Err(Error::shape("gumbel_hard", &shape, &[0, 2]));
    }
    let k = shape[0];
    let noise: Vec<f64> = (0..2 * k).map(|_| sample_gumbel(rng)).collect();
    let noise = g.constant(Tensor::new(shape, noise)?);
    let perturbed = g.add(scores, noise)?;
    let tempered = g.scale(perturbed, 1.0 / tau)?;
    let probs = g.softmax_rows(tempered)?;
    let hard = argmax_first(g.value(perturbed));
    let soft = g.slice_cols(probs, 0, 1)?;
    Ok((hard, soft))
}

/// `k×1` indicator of column 0 being the row maximum; ties go to column 0.
pub fn argmax_first(x: &Tensor) -> Tensor {
    let data = (0..x.rows())
        .map(|r| if x.get(r, 0) >= x.get(r, 1) { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(vec![x.rows(), 1], data).expect("k×1")
}

/// Plain probability prediction for analysis: `softmax(x·w + b)`.
pub fn predict_probs(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let xv = g.constant_ref(x);
    let wv = g.constant_ref(w);
    let bv = g.constant_ref(b);
    let z = g.matmul(xv, wv).expect("shape");
    let z = g.add_row(z, bv).expect("shape");
    softmax_rows_values(g.value(z))
}

/// Non-learned gate variants used for ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    Random,
    Attention,
    Learnable,
}

/// I.i.d. Bernoulli(`p`) mask of `l` tokens.
pub fn random_mask<R: Rng + ?Sized>(l: usize, p: f64, rng: &mut R) -> Tensor {
    let data = (0..l)
        .map(|_| if rng.gen::<f64>() < p { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(vec![l, 1], data).expect("l×1")
}

/// Keeps the `⌈p·l⌉` tokens receiving the most attention (column means of
/// a row-stochastic `l×l` matrix). Equal scores keep the lower index.
pub fn attention_mask(attention: Option<&Tensor>, p: f64) -> Result<Tensor> {
    let attn = attention.ok_or_else(|| {
        Error::Contract("attention gate needs the block's attention matrix".into())
    })?;
    let l = attn.rows();
    if attn.cols() != l {
        return Err(Error::shape("attention_mask", attn.shape(), &[l, l]));
    }
    let mut scores = vec![0.0; l];
    for r in 0..l {
        for (s, v) in scores.iter_mut().zip(attn.row(r)) {
            *s += v;
        }
    }
    for s in &mut scores {
        *s /= l as f64;
    }
    let keep = ((p.clamp(0.0, 1.0) * l as f64).ceil() as usize).min(l);
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut mask = vec![0.0; l];
    for &i in &order[..keep] {
        mask[i] = 1.0;
    }
    Tensor::new(vec![l, 1], mask)
}
