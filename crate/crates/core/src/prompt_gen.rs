//! Prompt generator over class text embeddings, the encoder-side global
//! knowledge it induces, and its hand-derived gradient.
//!
//! Forward path for the attention generator, per head `i` with `d_h = d / H`:
//!
//! ```text
//! Q_i = E Wq_i,  K_i = E Wk_i,  V_i = E Wv_i
//! A_i = rowsoftmax(Q_i K_i^T / sqrt(d_h))
//! Hp  = [A_1 V_1 | ... | A_H V_H] Wh          (C x d prompts)
//! M   = Hp P^T                                 (frozen image encoder)
//! G   = rowsoftmax(cos(M_c, E_j) / tau2)       (C x C global knowledge)
//! ```
//!
//! The MLP generator replaces the attention block with `relu(E W1 + b1) W2 + b2`,
//! mapping each class embedding independently.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frozen_fm::{EmbeddingMatrix, FrozenImageEncoder};
use crate::numerics::{self, ProbVec, Temperature, LOG_EPS};
use crate::server::AggregatedKnowledge;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Attention,
    Mlp,
}

impl GeneratorKind {
    pub fn label(self) -> &'static str {
        match self {
            GeneratorKind::Attention => "attention",
            GeneratorKind::Mlp => "mlp",
        }
    }
}

/// Weights on the two terms of the generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub ce: f64,
    pub kd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { ce: 1.0, kd: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
}

/// Generator weights.
#[derive(Debug, Clone, PartialEq)]
pub enum PromptGenParams {
    Attention {
        heads: Vec<AttentionHead>,
        /// Head-merge projection, d x d.
        wh: Array2<f64>,
    },
    Mlp {
        w1: Array2<f64>,
        b1: Array1<f64>,
        w2: Array2<f64>,
        b2: Array1<f64>,
    },
}

/// Init bound of the attention weights. Class embeddings are unit vectors that
/// can be nearly parallel, so a `1/sqrt(d)` bound leaves every attention row
/// close to uniform and every prompt close to the same vector.
pub const ATTENTION_INIT_BOUND: f64 = 1.0;

fn uniform(shape: (usize, usize), bound: f64, rng: &mut seed::Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..bound))
}

impl PromptGenParams {
    /// Attention generator with `heads` heads, weights uniform in
    /// `+-ATTENTION_INIT_BOUND`.
    pub fn attention(d: usize, heads: usize, seed: u64) -> Result<Self> {
        if heads == 0 || d == 0 || !d.is_multiple_of(heads) {
            return Err(Error::InvalidInput(format!("{heads} heads do not divide d = {d}")));
        }
        let dh = d / heads;
        let bound = ATTENTION_INIT_BOUND;
        let mut rng = seed::rng(seed);
        let heads = (0..heads)
            .map(|_| AttentionHead {
                wq: uniform((d, dh), bound, &mut rng),
                wk: uniform((d, dh), bound, &mut rng),
                wv: uniform((d, dh), bound, &mut rng),
            })
            .collect();
        let wh = uniform((d, d), bound, &mut rng);
        Ok(PromptGenParams::Attention { heads, wh })
    }

    /// Two-layer rectifier MLP `d -> hidden -> d`, weights uniform in
    /// `+-1/sqrt(d)`, zero biases.
    pub fn mlp(d: usize, hidden: usize, seed: u64) -> Result<Self> {
        if d == 0 || hidden == 0 {
            return Err(Error::InvalidInput(format!("bad MLP generator shape d={d}, hidden={hidden}")));
        }
        let bound = 1.0 / (d as f64).sqrt();
        let mut rng = seed::rng(seed);
        Ok(PromptGenParams::Mlp {
            w1: uniform((d, hidden), bound, &mut rng),
            b1: Array1::zeros(hidden),
            w2: uniform((hidden, d), bound, &mut rng),
            b2: Array1::zeros(d),
        })
    }

    pub fn kind(&self) -> GeneratorKind {
        match self {
            PromptGenParams::Attention { .. } => GeneratorKind::Attention,
            PromptGenParams::Mlp { .. } => GeneratorKind::Mlp,
        }
    }

    /// Embedding dimension the generator consumes and produces.
    pub fn dim(&self) -> usize {
        match self {
            PromptGenParams::Attention { wh, .. } => wh.ncols(),
            PromptGenParams::Mlp { w1, .. } => w1.nrows(),
        }
    }

    fn arrays(&self) -> Vec<ArrayView2<'_, f64>> {
        match self {
            PromptGenParams::Attention { heads, wh } => {
                let mut out: Vec<_> = heads
                    .iter()
                    .flat_map(|h| [h.wq.view(), h.wk.view(), h.wv.view()])
                    .collect();
                out.push(wh.view());
                out
            }
            PromptGenParams::Mlp { w1, b1, w2, b2 } => vec![
                w1.view(),
                b1.view().insert_axis(Axis(0)),
                w2.view(),
                b2.view().insert_axis(Axis(0)),
            ],
        }
    }

    fn values_mut(&mut self) -> Vec<&mut f64> {
        match self {
            PromptGenParams::Attention { heads, wh } => heads
                .iter_mut()
                .flat_map(|h| h.wq.iter_mut().chain(h.wk.iter_mut()).chain(h.wv.iter_mut()))
                .chain(wh.iter_mut())
                .collect(),
            PromptGenParams::Mlp { w1, b1, w2, b2 } => w1
                .iter_mut()
                .chain(b1.iter_mut())
                .chain(w2.iter_mut())
                .chain(b2.iter_mut())
                .collect(),
        }
    }

    /// Named parameter blocks with their ranges in [`Self::to_flat`] order.
    pub fn blocks(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let names: Vec<String> = match self {
            PromptGenParams::Attention { heads, .. } => (0..heads.len())
                .flat_map(|i| [format!("wq[{i}]"), format!("wk[{i}]"), format!("wv[{i}]")])
                .chain(std::iter::once("wh".to_string()))
                .collect(),
            PromptGenParams::Mlp { .. } => ["w1", "b1", "w2", "b2"].map(String::from).to_vec(),
        };
        let mut start = 0;
        names
            .into_iter()
            .zip(self.arrays())
            .map(|(n, a)| {
                let r = start..start + a.len();
                start = r.end;
                (n, r)
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.arrays().iter().map(|a| a.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.arrays().iter().flat_map(|a| a.iter().copied().collect::<Vec<_>>()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.num_params();
        if flat.len() != n {
            return Err(Error::Shape(format!("{} values for {n} generator parameters", flat.len())));
        }
        for (dst, src) in self.values_mut().into_iter().zip(flat) {
            *dst = *src;
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for v in z.values_mut() {
            *v = 0.0;
        }
        z
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|a| a.iter().all(|v| v.is_finite()))
    }

    /// `self -= lr * grad`; both must have the same layout.
    fn apply(&mut self, grad: &PromptGenParams, lr: f64) {
        let g = grad.to_flat();
        for (p, g) in self.values_mut().into_iter().zip(g) {
            *p -= lr * g;
        }
    }
}

/// Per-class distributions induced by the encoder scoring each prompt against
/// every class text embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalKnowledge {
    pub per_class: Vec<ProbVec>,
    pub round: usize,
}

impl GlobalKnowledge {
    pub fn max_simplex_error(&self) -> f64 {
        self.per_class.iter().map(ProbVec::deviation).fold(0.0, f64::max)
    }

    /// Numbers sent to each client.
    pub fn transmitted_numbers(&self) -> usize {
        self.per_class.iter().map(ProbVec::len).sum()
    }
}

fn rowsoftmax(mut m: Array2<f64>, tau: f64) -> Array2<f64> {
    for mut row in m.outer_iter_mut() {
        numerics::softmax_in_place(row.as_slice_mut().expect("standard layout"), tau);
    }
    m
}

/// `dS` for `A = rowsoftmax(S)` given `dA`.
fn rowsoftmax_backward(a: &Array2<f64>, da: &Array2<f64>) -> Array2<f64> {
    let mut ds = a * da;
    for (mut row, arow) in ds.outer_iter_mut().zip(a.outer_iter()) {
        let s = row.sum();
        row.zip_mut_with(&arow, |d, a| *d -= a * s);
    }
    ds
}

struct HeadCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    a: Array2<f64>,
}

enum ForwardCache {
    Attention { heads: Vec<HeadCache>, concat: Array2<f64> },
    Mlp { z1: Array2<f64>, a1: Array2<f64> },
}

fn check_dims(omega: &PromptGenParams, e: &EmbeddingMatrix) -> Result<()> {
    if omega.dim() != e.dim() {
        return Err(Error::Shape(format!(
            "generator dimension {} but embeddings have dimension {}",
            omega.dim(),
            e.dim()
        )));
    }
    Ok(())
}

fn forward(omega: &PromptGenParams, e: &Array2<f64>) -> (Array2<f64>, ForwardCache) {
    match omega {
        PromptGenParams::Attention { heads, wh } => {
            let (c, d) = e.dim();
            let dh = d / heads.len();
            let scale = 1.0 / (dh as f64).sqrt();
            let mut concat = Array2::zeros((c, d));
            let mut cache = Vec::with_capacity(heads.len());
            for (i, h) in heads.iter().enumerate() {
                let q = e.dot(&h.wq);
                let k = e.dot(&h.wk);
                let v = e.dot(&h.wv);
                let a = rowsoftmax(q.dot(&k.t()) * scale, 1.0);
                concat.slice_mut(s![.., i * dh..(i + 1) * dh]).assign(&a.dot(&v));
                cache.push(HeadCache { q, k, v, a });
            }
            (concat.dot(wh), ForwardCache::Attention { heads: cache, concat })
        }
        PromptGenParams::Mlp { w1, b1, w2, b2 } => {
            let z1 = e.dot(w1) + b1;
            let a1 = z1.mapv(|v| v.max(0.0));
            (a1.dot(w2) + b2, ForwardCache::Mlp { z1, a1 })
        }
    }
}

fn backward(omega: &PromptGenParams, e: &Array2<f64>, cache: &ForwardCache, dprompts: &Array2<f64>) -> PromptGenParams {
    match (omega, cache) {
        (PromptGenParams::Attention { heads, wh }, ForwardCache::Attention { heads: hc, concat }) => {
            let d = e.ncols();
            let dh = d / heads.len();
            let scale = 1.0 / (dh as f64).sqrt();
            let dwh = concat.t().dot(dprompts);
            let dconcat = dprompts.dot(&wh.t());
            let grads = heads
                .iter()
                .zip(hc)
                .enumerate()
                .map(|(i, (_, c))| {
                    let dout = dconcat.slice(s![.., i * dh..(i + 1) * dh]);
                    let da = dout.dot(&c.v.t());
                    let dv = c.a.t().dot(&dout);
                    let dscores = rowsoftmax_backward(&c.a, &da) * scale;
                    let dq = dscores.dot(&c.k);
                    let dk = dscores.t().dot(&c.q);
                    AttentionHead {
                        wq: e.t().dot(&dq),
                        wk: e.t().dot(&dk),
                        wv: e.t().dot(&dv),
                    }
                })
                .collect();
            PromptGenParams::Attention { heads: grads, wh: dwh }
        }
        (PromptGenParams::Mlp { w2, .. }, ForwardCache::Mlp { z1, a1 }) => {
            let dw2 = a1.t().dot(dprompts);
            let db2 = dprompts.sum_axis(Axis(0));
            let mut dz1 = dprompts.dot(&w2.t());
            dz1.zip_mut_with(z1, |d, z| {
                if *z <= 0.0 {
                    *d = 0.0;
                }
            });
            PromptGenParams::Mlp {
                w1: e.t().dot(&dz1),
                b1: dz1.sum_axis(Axis(0)),
                w2: dw2,
                b2: db2,
            }
        }
        _ => unreachable!("cache built from the same parameters"),
    }
}

/// Class-specific prompts, one row per class.
pub fn gen_forward(omega: &PromptGenParams, e: &EmbeddingMatrix) -> Result<Array2<f64>> {
    check_dims(omega, e)?;
    Ok(forward(omega, e.rows()).0)
}

/// Per-head attention weight matrices (C x C, rows on the simplex).
pub fn attention_weights(omega: &PromptGenParams, e: &EmbeddingMatrix) -> Result<Vec<Array2<f64>>> {
    check_dims(omega, e)?;
    match forward(omega, e.rows()).1 {
        ForwardCache::Attention { heads, .. } => Ok(heads.into_iter().map(|h| h.a).collect()),
        ForwardCache::Mlp { .. } => Err(Error::InvalidInput("MLP generator has no attention".into())),
    }
}

/// Row-wise cosine between encoded prompts and class embeddings, plus the norms
/// of the encoded prompts.
fn cosines(encoded: &Array2<f64>, e: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>, Vec<f64>)> {
    let mut unit = encoded.clone();
    let mut norms = Vec::with_capacity(unit.nrows());
    for (c, mut row) in unit.outer_iter_mut().enumerate() {
        let n = row.dot(&row).sqrt();
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::DegeneratePrompt { class: c });
        }
        row /= n;
        norms.push(n);
    }
    let mut e_unit = e.clone();
    for mut row in e_unit.outer_iter_mut() {
        let n = row.dot(&row).sqrt();
        row /= n;
    }
    let cos = unit.dot(&e_unit.t());
    Ok((cos, unit, norms))
}

fn to_knowledge(g: &Array2<f64>, round: usize) -> Result<GlobalKnowledge> {
    let per_class = g
        .outer_iter()
        .map(|r| ProbVec::new(r.to_vec()))
        .collect::<Result<_>>()?;
    Ok(GlobalKnowledge { per_class, round })
}

/// `g_c = softmax_j(cos(F_image(h_c), e_j) / tau2)`.
pub fn global_knowledge(
    prompts: &Array2<f64>,
    e: &EmbeddingMatrix,
    enc: &FrozenImageEncoder,
    tau2: Temperature,
) -> Result<GlobalKnowledge> {
    if prompts.dim() != e.rows().dim() || enc.dim() != e.dim() {
        return Err(Error::Shape(format!(
            "prompts {:?}, embeddings {:?}, encoder dim {}",
            prompts.dim(),
            e.rows().dim(),
            enc.dim()
        )));
    }
    let (cos, _, _) = cosines(&enc.encode_rows(prompts), e.rows())?;
    to_knowledge(&rowsoftmax(cos, tau2.get()), 0)
}

/// Per-class target weights `t_cj = w_ce [j == c] + w_kd a_cj`; the loss is
/// `sum_cj t_cj (-ln g_cj)` up to the constant negative entropy of `a`.
fn loss_terms(g: &Array2<f64>, a: &[ProbVec], w: LossWeights) -> f64 {
    let mut loss = 0.0;
    for (c, (grow, ac)) in g.outer_iter().zip(a).enumerate() {
        loss -= w.ce * grow[c].max(LOG_EPS).ln();
        loss += w.kd * numerics::kl_raw(ac.as_slice(), grow.as_slice().expect("standard layout"));
    }
    loss
}

/// `sum_c w_ce CE(g_c, onehot(c)) + w_kd KL(a_c || g_c)`.
pub fn gen_loss(g: &GlobalKnowledge, a: &AggregatedKnowledge, w: LossWeights) -> Result<f64> {
    let classes = g.per_class.len();
    if a.classes() != classes {
        return Err(Error::Shape(format!("{classes} global vs {} aggregated classes", a.classes())));
    }
    let mut loss = 0.0;
    for (c, (gc, ac)) in g.per_class.iter().zip(&a.per_class).enumerate() {
        loss += w.ce * numerics::cross_entropy(gc, &ProbVec::one_hot(gc.len(), c))?;
        loss += w.kd * numerics::kl_div(ac, gc)?;
    }
    Ok(loss)
}

/// Frozen inputs of the generator objective.
#[derive(Debug, Clone, Copy)]
pub struct GenProblem<'a> {
    pub embeddings: &'a EmbeddingMatrix,
    pub encoder: &'a FrozenImageEncoder,
    pub aggregated: &'a AggregatedKnowledge,
    pub tau2: Temperature,
    pub weights: LossWeights,
}

impl GenProblem<'_> {
    fn check(&self, omega: &PromptGenParams) -> Result<()> {
        check_dims(omega, self.embeddings)?;
        if self.encoder.dim() != self.embeddings.dim() {
            return Err(Error::Shape("encoder and embedding dimensions differ".into()));
        }
        let c = self.embeddings.classes();
        if self.aggregated.classes() != c || self.aggregated.per_class.iter().any(|p| p.len() != c) {
            return Err(Error::Shape("aggregated knowledge does not match class count".into()));
        }
        Ok(())
    }
}

/// Full forward evaluation: loss and global knowledge.
pub fn evaluate_generator(omega: &PromptGenParams, problem: &GenProblem<'_>) -> Result<(f64, GlobalKnowledge)> {
    problem.check(omega)?;
    let prompts = forward(omega, problem.embeddings.rows()).0;
    let (cos, _, _) = cosines(&problem.encoder.encode_rows(&prompts), problem.embeddings.rows())?;
    let g = rowsoftmax(cos, problem.tau2.get());
    let loss = loss_terms(&g, &problem.aggregated.per_class, problem.weights);
    Ok((loss, to_knowledge(&g, problem.aggregated.round)?))
}

/// Loss and its exact gradient w.r.t. every generator parameter. The encoder and
/// embeddings receive no gradient.
pub fn gen_backward(omega: &PromptGenParams, problem: &GenProblem<'_>) -> Result<(f64, PromptGenParams)> {
    problem.check(omega)?;
    let e = problem.embeddings.rows();
    let tau2 = problem.tau2.get();
    let w = problem.weights;
    let (prompts, cache) = forward(omega, e);
    let encoded = problem.encoder.encode_rows(&prompts);
    let (cos, unit, norms) = cosines(&encoded, e)?;
    let g = rowsoftmax(cos, tau2);
    let loss = loss_terms(&g, &problem.aggregated.per_class, w);

    // dL/dlogits with u_cj = g_cj dL/dg_cj = -t_cj (zero where the log clamp is active)
    let classes = g.nrows();
    let mut dlogits = Array2::zeros((classes, classes));
    for c in 0..classes {
        let a = problem.aggregated.per_class[c].as_slice();
        let grow = g.row(c);
        let u: Vec<f64> = (0..classes)
            .map(|j| {
                let t = w.kd * a[j] + if j == c { w.ce } else { 0.0 };
                if grow[j] > LOG_EPS { -t } else { 0.0 }
            })
            .collect();
        let su: f64 = u.iter().sum();
        for j in 0..classes {
            dlogits[(c, j)] = u[j] - grow[j] * su;
        }
    }
    let dcos = dlogits / tau2;

    let mut e_unit = e.clone();
    for mut row in e_unit.outer_iter_mut() {
        let n = row.dot(&row).sqrt();
        row /= n;
    }
    // through the row normalization of the encoded prompts
    let dunit = dcos.dot(&e_unit);
    let mut dencoded = dunit.clone();
    for (c, mut row) in dencoded.outer_iter_mut().enumerate() {
        let u = unit.row(c);
        let radial = u.dot(&dunit.row(c));
        row.zip_mut_with(&u, |d, uv| *d = (*d - radial * uv) / norms[c]);
    }
    let dprompts = dencoded.dot(problem.encoder.projection());
    Ok((loss, backward(omega, e, &cache, &dprompts)))
}

/// Output of [`train_generator`].
#[derive(Debug, Clone)]
pub struct GenTraining {
    pub params: PromptGenParams,
    /// Loss before each update step.
    pub loss_curve: Vec<f64>,
    pub final_loss: f64,
    pub knowledge: GlobalKnowledge,
    /// Largest simplex deviation of any global knowledge row seen during training.
    pub simplex_error: f64,
}

/// Full-batch gradient descent on the generator objective.
pub fn train_generator(
    omega: &PromptGenParams,
    problem: &GenProblem<'_>,
    steps: usize,
    lr: f64,
) -> Result<GenTraining> {
    if steps < 1 {
        return Err(Error::InvalidInput("generator steps must be >= 1".into()));
    }
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::InvalidInput(format!("generator learning rate must be non-negative, got {lr}")));
    }
    let mut params = omega.clone();
    let mut loss_curve = Vec::with_capacity(steps);
    let mut simplex_error: f64 = 0.0;
    for step in 0..steps {
        let (loss, grad) = gen_backward(&params, problem)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        loss_curve.push(loss);
        params.apply(&grad, lr);
        let (_, g) = evaluate_generator(&params, problem)?;
        simplex_error = simplex_error.max(g.max_simplex_error());
    }
    let (final_loss, knowledge) = evaluate_generator(&params, problem)?;
    if !final_loss.is_finite() {
        return Err(Error::Divergence { step: steps, loss: final_loss });
    }
    Ok(GenTraining {
        params,
        loss_curve,
        final_loss,
        knowledge,
        simplex_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frozen_fm::{prompt_template, synth_text_embed, DatasetKind};
    use crate::numerics::{finite_diff_grad, max_relative_error, FD_STEP};

    fn embeddings(c: usize, d: usize) -> EmbeddingMatrix {
        let desc: Vec<String> = (0..c).map(|i| prompt_template(DatasetKind::Synthetic, &i.to_string())).collect();
        synth_text_embed(&desc, d, 11).unwrap()
    }

    fn aggregated(c: usize, seed: u64) -> AggregatedKnowledge {
        let mut rng = seed::rng(seed);
        let per_class = (0..c)
            .map(|k| {
                let mut raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..1.0)).collect();
                raw[k] += 2.0;
                let s: f64 = raw.iter().sum();
                ProbVec::new(raw.iter().map(|v| v / s).collect()).unwrap()
            })
            .collect();
        AggregatedKnowledge { per_class, totals: vec![10; c], round: 0 }
    }

    fn temp(t: f64) -> Temperature {
        Temperature::new(t).unwrap()
    }

    #[test]
    fn single_class_attention_is_value_projection() {
        let e = embeddings(2, 4);
        let one = EmbeddingMatrix::new(
            e.rows().slice(s![0..1, ..]).to_owned(),
            vec!["a".into()],
            vec!["a".into()],
        )
        .unwrap();
        let omega = PromptGenParams::attention(4, 1, 3).unwrap();
        let h = gen_forward(&omega, &one).unwrap();
        let PromptGenParams::Attention { heads, wh } = &omega else { unreachable!() };
        let expected = one.rows().dot(&heads[0].wv).dot(wh);
        assert!(h.iter().zip(expected.iter()).all(|(a, b)| (a - b).abs() < 1e-14));
        assert_eq!(attention_weights(&omega, &one).unwrap()[0][(0, 0)], 1.0);
    }

    #[test]
    fn identical_embeddings_give_identical_prompts() {
        let e = embeddings(2, 4);
        let row = e.rows().row(0).to_owned();
        let rows = Array2::from_shape_fn((3, 4), |(_, j)| row[j]);
        let same = EmbeddingMatrix::new(rows, vec!["a".into(), "b".into(), "c".into()], vec!["".into(); 3]).unwrap();
        for omega in [PromptGenParams::attention(4, 2, 1).unwrap(), PromptGenParams::mlp(4, 6, 1).unwrap()] {
            let h = gen_forward(&omega, &same).unwrap();
            for r in 1..3 {
                assert!(h.row(r).iter().zip(h.row(0).iter()).all(|(a, b)| (a - b).abs() < 1e-14));
            }
        }
    }

    #[test]
    fn zero_values_zero_prompts() {
        let e = embeddings(3, 4);
        let mut omega = PromptGenParams::attention(4, 2, 1).unwrap();
        if let PromptGenParams::Attention { heads, .. } = &mut omega {
            for h in heads {
                h.wv.fill(0.0);
            }
        }
        assert!(gen_forward(&omega, &e).unwrap().iter().all(|v| *v == 0.0));
        // zero prompts are degenerate for the encoder
        let enc = FrozenImageEncoder::identity(4);
        let h = gen_forward(&omega, &e).unwrap();
        assert!(matches!(global_knowledge(&h, &e, &enc, temp(0.1)), Err(Error::DegeneratePrompt { class: 0 })));
    }

    #[test]
    fn heads_must_divide_dimension() {
        assert!(PromptGenParams::attention(6, 4, 0).is_err());
        let e = embeddings(3, 8);
        assert!(matches!(gen_forward(&PromptGenParams::attention(4, 2, 0).unwrap(), &e), Err(Error::Shape(_))));
    }

    #[test]
    fn global_knowledge_examples() {
        // identity encoder, orthonormal class embeddings, prompts chosen for given cosines
        let e = EmbeddingMatrix::new(Array2::eye(2), vec!["a".into(), "b".into()], vec!["x".into(), "y".into()]).unwrap();
        let enc = FrozenImageEncoder::identity(2);
        let prompts = ndarray::array![[1.0, 0.0], [1.0, 1.0]];
        let g = global_knowledge(&prompts, &e, &enc, temp(0.1)).unwrap();
        let expected = 10f64.exp() / (10f64.exp() + 1.0);
        assert!((g.per_class[0][0] - 0.99995).abs() < 1e-5);
        assert!((g.per_class[0][0] - expected).abs() < 1e-12);
        // equal cosines for class 1 -> uniform
        assert!((g.per_class[1][0] - 0.5).abs() < 1e-12);
        let hot = global_knowledge(&prompts, &e, &enc, temp(1e6)).unwrap();
        for p in &hot.per_class {
            assert!(p.as_slice().iter().all(|v| (v - 0.5).abs() < 1e-5));
        }
    }

    #[test]
    fn gen_loss_examples() {
        let c = 3;
        let g = GlobalKnowledge { per_class: (0..c).map(|k| ProbVec::one_hot(c, k)).collect(), round: 0 };
        let a = AggregatedKnowledge { per_class: g.per_class.clone(), totals: vec![1; c], round: 0 };
        assert!(gen_loss(&g, &a, LossWeights::default()).unwrap() <= c as f64 * 1e-10);

        let half = ProbVec::uniform(2);
        let g = GlobalKnowledge { per_class: vec![half.clone(), half.clone()], round: 0 };
        let a = AggregatedKnowledge { per_class: vec![half.clone(), half], totals: vec![1, 1], round: 0 };
        let l = gen_loss(&g, &a, LossWeights::default()).unwrap();
        assert!((l - 1.38629).abs() < 1e-5 && (l - 2.0 * 2f64.ln()).abs() < 1e-12);

        let a = aggregated(2, 4);
        let ce_only = gen_loss(&g, &a, LossWeights { ce: 1.0, kd: 0.0 }).unwrap();
        assert!((ce_only - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    fn check_gradient(omega: &PromptGenParams, problem: &GenProblem<'_>) -> f64 {
        let (_, grad) = gen_backward(omega, problem).unwrap();
        let numeric = finite_diff_grad(
            |flat| {
                let mut p = omega.clone();
                p.set_flat(flat).unwrap();
                evaluate_generator(&p, problem).unwrap().0
            },
            &omega.to_flat(),
            FD_STEP,
        )
        .unwrap();
        let analytic = grad.to_flat();
        omega
            .blocks()
            .into_iter()
            .map(|(_, r)| max_relative_error(&analytic[r.clone()], &numeric[r], 1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let e = embeddings(5, 8);
        let enc = FrozenImageEncoder::synthetic(8, 2).unwrap();
        let a = aggregated(5, 3);
        let problem = GenProblem { embeddings: &e, encoder: &enc, aggregated: &a, tau2: temp(0.5), weights: LossWeights { ce: 1.0, kd: 0.8 } };
        for omega in [
            PromptGenParams::attention(8, 1, 5).unwrap(),
            PromptGenParams::attention(8, 2, 6).unwrap(),
            PromptGenParams::mlp(8, 12, 7).unwrap(),
        ] {
            let err = check_gradient(&omega, &problem);
            assert!(err < 1e-4, "{:?}: relative error {err}", omega.kind());
        }
    }

    #[test]
    fn zero_weights_zero_gradient() {
        let e = embeddings(5, 8);
        let enc = FrozenImageEncoder::synthetic(8, 2).unwrap();
        let a = aggregated(5, 3);
        let problem = GenProblem { embeddings: &e, encoder: &enc, aggregated: &a, tau2: temp(0.1), weights: LossWeights { ce: 0.0, kd: 0.0 } };
        let (_, g) = gen_backward(&PromptGenParams::attention(8, 2, 1).unwrap(), &problem).unwrap();
        assert!(g.to_flat().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn training_descends_and_keeps_encoder_frozen() {
        let e = embeddings(5, 8);
        let enc = FrozenImageEncoder::synthetic(8, 2).unwrap();
        let a = aggregated(5, 3);
        let (fe, fp) = (e.fingerprint(), enc.fingerprint());
        let problem = GenProblem { embeddings: &e, encoder: &enc, aggregated: &a, tau2: temp(0.1), weights: LossWeights::default() };
        let omega = PromptGenParams::attention(8, 2, 9).unwrap();
        let out = train_generator(&omega, &problem, 100, 0.05).unwrap();
        assert!(out.final_loss < out.loss_curve[0], "{} vs {}", out.final_loss, out.loss_curve[0]);
        assert!(out.simplex_error <= 1e-9);
        assert_eq!((e.fingerprint(), enc.fingerprint()), (fe, fp));

        let still = train_generator(&omega, &problem, 5, 0.0).unwrap();
        assert_eq!(still.params, omega);
        assert!(still.loss_curve.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn attention_rows_sum_to_one_and_permute() {
        let e = embeddings(5, 8);
        let omega = PromptGenParams::attention(8, 2, 4).unwrap();
        for a in attention_weights(&omega, &e).unwrap() {
            for row in a.outer_iter() {
                assert!((row.sum() - 1.0).abs() < 1e-9);
            }
        }
        let perm = [3, 0, 4, 1, 2];
        let h = gen_forward(&omega, &e).unwrap();
        let hp = gen_forward(&omega, &e.permuted(&perm).unwrap()).unwrap();
        for (i, p) in perm.iter().enumerate() {
            assert!(hp.row(i).iter().zip(h.row(*p).iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }
}
