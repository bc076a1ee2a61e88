//! Position-wise MLP denoiser and classifier with mean-pooled sequence
//! context.
//!
//! Per-position features are the token embedding plus a position encoding,
//! plus a shared row made of the projected mean token embedding, the
//! projected time features `(alpha_t, 1 - alpha_t)` and (for conditional
//! denoisers) a condition embedding. One `tanh` hidden layer follows. The
//! denoiser maps each position to `N` logits; the classifier mean-pools the
//! hidden layer and maps it to `K` logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Classifier, Condition, Denoiser};
use crate::autodiff::{log_sum_exp, softmax_in_place, Matrix, Tape, Var};
use crate::error::{domain, shape, Result};
use crate::schedule::NoiseSchedule;
use crate::vocab::Token;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserShapes {
    /// Vocabulary size `N` (including the mask token, if any).
    pub vocab: usize,
    pub seq_len: usize,
    pub embed: usize,
    pub hidden: usize,
    /// Conditioning classes `K`; 0 for an unconditional model.
    pub classes: usize,
    /// Mask token of absorbing-state models; its logit is fixed at `-inf`.
    pub mask: Option<Token>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierShapes {
    pub vocab: usize,
    pub seq_len: usize,
    pub embed: usize,
    pub hidden: usize,
    pub classes: usize,
}

/// Gradients of every parameter array, in declared field order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(pub Vec<Matrix>);

impl ParamGrads {
    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for m in &mut self.0 {
            m.data.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Matrix::is_finite)
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().flat_map(|m| m.data.iter()).fold(0.0, |a, v| a.max(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserParams {
    pub shapes: DenoiserShapes,
    pub schedule: NoiseSchedule,
    pub token_embedding: Matrix,
    pub position_encoding: Matrix,
    pub pool_projection: Matrix,
    pub time_projection: Matrix,
    /// `(K + 1) x d`; row `K` is the dropped-condition row.
    pub condition_embedding: Option<Matrix>,
    pub hidden_weight: Matrix,
    pub hidden_bias: Matrix,
    pub output_weight: Matrix,
    pub output_bias: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub shapes: ClassifierShapes,
    pub schedule: NoiseSchedule,
    pub token_embedding: Matrix,
    pub position_encoding: Matrix,
    pub pool_projection: Matrix,
    pub time_projection: Matrix,
    pub hidden_weight: Matrix,
    pub hidden_bias: Matrix,
    pub output_weight: Matrix,
    pub output_bias: Matrix,
}

enum Init<'r, R: Rng> {
    Zero,
    Random(&'r mut R),
}

impl<R: Rng> Init<'_, R> {
    fn matrix(&mut self, rows: usize, cols: usize, half_width: f64) -> Matrix {
        match self {
            Init::Zero => Matrix::zeros(rows, cols),
            Init::Random(rng) => {
                Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-half_width..=half_width)).collect())
            }
        }
    }
}

fn glorot(fan_in: usize) -> f64 {
    (3.0 / fan_in as f64).sqrt()
}

impl DenoiserParams {
    pub fn zeros(shapes: DenoiserShapes, schedule: NoiseSchedule) -> Result<Self> {
        Self::build(shapes, schedule, &mut Init::<rand_chacha::ChaCha8Rng>::Zero, 0.0)
    }

    /// Every array drawn uniformly; outputs are far from uniform.
    pub fn random<R: Rng>(shapes: DenoiserShapes, schedule: NoiseSchedule, rng: &mut R) -> Result<Self> {
        Self::build(shapes, schedule, &mut Init::Random(rng), 2.0)
    }

    /// Training initialization: random trunk, zero output head, so the
    /// initial prediction is uniform.
    pub fn init<R: Rng>(shapes: DenoiserShapes, schedule: NoiseSchedule, rng: &mut R) -> Result<Self> {
        let mut p = Self::build(shapes, schedule, &mut Init::Random(rng), 0.0)?;
        p.output_weight = Matrix::zeros(shapes.hidden, shapes.vocab);
        p.output_bias = Matrix::zeros(1, shapes.vocab);
        p.hidden_bias = Matrix::zeros(1, shapes.hidden);
        Ok(p)
    }

    fn build<R: Rng>(shapes: DenoiserShapes, schedule: NoiseSchedule, init: &mut Init<R>, out_gain: f64) -> Result<Self> {
        let DenoiserShapes { vocab, seq_len, embed, hidden, classes, mask } = shapes;
        if vocab < 2 || seq_len == 0 || embed == 0 || hidden == 0 {
            return domain(format!("invalid denoiser shapes {shapes:?}"));
        }
        if mask.is_some_and(|m| m >= vocab) {
            return domain("mask token outside vocabulary");
        }
        Ok(Self {
            shapes,
            schedule,
            token_embedding: init.matrix(vocab, embed, 0.5),
            position_encoding: init.matrix(seq_len, embed, 0.5),
            pool_projection: init.matrix(embed, embed, glorot(embed)),
            time_projection: init.matrix(2, embed, 0.5),
            condition_embedding: (classes > 0).then(|| init.matrix(classes + 1, embed, 0.5)),
            hidden_weight: init.matrix(embed, hidden, glorot(embed)),
            hidden_bias: init.matrix(1, hidden, 0.1),
            output_weight: init.matrix(hidden, vocab, glorot(hidden) * out_gain),
            output_bias: init.matrix(1, vocab, 0.1 * out_gain),
        })
    }

    pub fn arrays(&self) -> Vec<&Matrix> {
        let mut v = vec![&self.token_embedding, &self.position_encoding, &self.pool_projection, &self.time_projection];
        if let Some(c) = &self.condition_embedding {
            v.push(c);
        }
        v.extend([&self.hidden_weight, &self.hidden_bias, &self.output_weight, &self.output_bias]);
        v
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = vec![
            &mut self.token_embedding,
            &mut self.position_encoding,
            &mut self.pool_projection,
            &mut self.time_projection,
        ];
        if let Some(c) = &mut self.condition_embedding {
            v.push(c);
        }
        v.extend([&mut self.hidden_weight, &mut self.hidden_bias, &mut self.output_weight, &mut self.output_bias]);
        v
    }

    /// Field names matching [`Self::arrays`].
    pub fn array_names(&self) -> Vec<&'static str> {
        let mut v = vec!["token_embedding", "position_encoding", "pool_projection", "time_projection"];
        if self.condition_embedding.is_some() {
            v.push("condition_embedding");
        }
        v.extend(["hidden_weight", "hidden_bias", "output_weight", "output_bias"]);
        v
    }

    pub fn expected_shapes(&self) -> Vec<(usize, usize)> {
        let s = self.shapes;
        let mut v = vec![(s.vocab, s.embed), (s.seq_len, s.embed), (s.embed, s.embed), (2, s.embed)];
        if s.classes > 0 {
            v.push((s.classes + 1, s.embed));
        }
        v.extend([(s.embed, s.hidden), (1, s.hidden), (s.hidden, s.vocab), (1, s.vocab)]);
        v
    }

    pub fn validate(&self) -> Result<()> {
        if (self.shapes.classes > 0) != self.condition_embedding.is_some() {
            return shape("condition embedding presence disagrees with class count");
        }
        for ((name, m), want) in self.array_names().iter().zip(self.arrays()).zip(self.expected_shapes()) {
            if m.shape() != want || m.data.len() != want.0 * want.1 {
                return shape(format!("{name} has shape {:?}, expected {want:?}", m.shape()));
            }
            if !m.is_finite() {
                return domain(format!("{name} contains non-finite values"));
            }
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> ParamGrads {
        ParamGrads(self.arrays().iter().map(|m| Matrix::zeros(m.rows, m.cols)).collect())
    }

    /// Records one evaluation on a tape for later backpropagation.
    pub fn forward_pass(&self, z: &[Token], t: f64, cond: Condition) -> Result<DenoiserPass<'_>> {
        self.check_input(z, t, cond)?;
        let mut tape = Tape::new();
        let params: Vec<Var> = self.arrays().into_iter().map(|m| tape.param(m)).collect();
        let has_cond = self.condition_embedding.is_some();
        let (e, p, wp, wt) = (params[0], params[1], params[2], params[3]);
        let rest = &params[if has_cond { 5 } else { 4 }..];
        let (wh, bh, wo, bo) = (rest[0], rest[1], rest[2], rest[3]);

        let input = tape.constant(Matrix::one_hot_rows(z, self.shapes.vocab));
        let mut shared = None;
        if has_cond {
            let row = match cond {
                Condition::Dropped => self.shapes.classes,
                Condition::Class(k) => k,
            };
            shared = Some(tape.select_row(params[4], row));
        }
        let alpha = self.schedule.alpha(t)?;
        let hidden = trunk(&mut tape, input, alpha, [e, p, wp, wt, wh, bh], shared);
        let logits = tape.matmul(hidden, wo);
        let mut logits = tape.add_row(logits, bo);
        if let Some(m) = self.shapes.mask {
            let mut row = vec![0.0; self.shapes.vocab];
            row[m] = f64::NEG_INFINITY;
            let mask_row = tape.constant(Matrix::row_vector(row));
            logits = tape.add_row(logits, mask_row);
        }
        let probs = tape.softmax_rows(logits);
        Ok(DenoiserPass { tape, probs, params })
    }
}

/// Shared trunk. `w = [token_embedding, position_encoding, pool_projection,
/// time_projection, hidden_weight, hidden_bias]`.
fn trunk(tape: &mut Tape<'_>, input: Var, alpha: f64, w: [Var; 6], extra_row: Option<Var>) -> Var {
    let [e, p, wp, wt, wh, bh] = w;
    let tok = tape.matmul(input, e);
    let pooled = tape.mean_rows(tok);
    let pooled = tape.matmul(pooled, wp);
    let time = tape.constant(Matrix::row_vector(vec![alpha, 1.0 - alpha]));
    let time = tape.matmul(time, wt);
    let mut shared = tape.add(pooled, time);
    if let Some(r) = extra_row {
        shared = tape.add(shared, r);
    }
    let features = tape.add(tok, p);
    let features = tape.add_row(features, shared);
    let h = tape.matmul(features, wh);
    let h = tape.add_row(h, bh);
    tape.tanh(h)
}

/// Tape-free evaluation of [`trunk`] for inference on token inputs.
fn trunk_direct(z: &[Token], alpha: f64, w: [&Matrix; 6], extra_row: Option<&[f64]>) -> Matrix {
    let [e, p, wp, wt, wh, bh] = w;
    let d = e.cols;
    let mut pooled = vec![0.0; d];
    for &v in z {
        pooled.iter_mut().zip(e.row(v)).for_each(|(a, b)| *a += b);
    }
    pooled.iter_mut().for_each(|a| *a /= z.len() as f64);
    let mut shared = Matrix::row_vector(pooled).matmul(wp);
    let time = Matrix::row_vector(vec![alpha, 1.0 - alpha]).matmul(wt);
    shared.add_assign(&time);
    if let Some(r) = extra_row {
        shared.data.iter_mut().zip(r).for_each(|(a, b)| *a += b);
    }
    let mut features = Matrix::zeros(z.len(), d);
    for (l, &v) in z.iter().enumerate() {
        for (k, f) in features.row_mut(l).iter_mut().enumerate() {
            *f = e.get(v, k) + p.get(l, k) + shared.data[k];
        }
    }
    let mut h = features.matmul(wh);
    for r in 0..h.rows {
        h.row_mut(r).iter_mut().zip(bh.row(0)).for_each(|(v, b)| *v = (*v + b).tanh());
    }
    h
}

/// A recorded denoiser evaluation.
pub struct DenoiserPass<'a> {
    tape: Tape<'a>,
    probs: Var,
    params: Vec<Var>,
}

impl DenoiserPass<'_> {
    /// `L x N` predicted clean-token distributions.
    pub fn probs(&self) -> &Matrix {
        self.tape.value(self.probs)
    }

    pub fn tape(&self) -> &Tape<'_> {
        &self.tape
    }

    /// Backpropagates `d loss / d probs` into parameter gradients.
    pub fn backward(&self, adjoint: Matrix) -> ParamGrads {
        let g = self.tape.backward(self.probs, adjoint);
        ParamGrads(
            self.params
                .iter()
                .map(|&v| {
                    g.get(v).cloned().unwrap_or_else(|| {
                        let m = self.tape.value(v);
                        Matrix::zeros(m.rows, m.cols)
                    })
                })
                .collect(),
        )
    }
}

impl Denoiser for DenoiserParams {
    fn vocab_size(&self) -> usize {
        self.shapes.vocab
    }
    fn seq_len(&self) -> usize {
        self.shapes.seq_len
    }
    fn num_classes(&self) -> usize {
        self.shapes.classes
    }
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }
    fn predict(&self, z: &[Token], t: f64, cond: Condition) -> Result<Matrix> {
        self.check_input(z, t, cond)?;
        let extra = self.condition_embedding.as_ref().map(|m| match cond {
            Condition::Dropped => m.row(self.shapes.classes),
            Condition::Class(k) => m.row(k),
        });
        let alpha = self.schedule.alpha(t)?;
        let [e, p, wp, wt, wh, bh] = [
            &self.token_embedding,
            &self.position_encoding,
            &self.pool_projection,
            &self.time_projection,
            &self.hidden_weight,
            &self.hidden_bias,
        ];
        let hidden = trunk_direct(z, alpha, [e, p, wp, wt, wh, bh], extra);
        let mut logits = hidden.matmul(&self.output_weight);
        for r in 0..logits.rows {
            let row = logits.row_mut(r);
            row.iter_mut().zip(self.output_bias.row(0)).for_each(|(v, b)| *v += b);
            if let Some(m) = self.shapes.mask {
                row[m] = f64::NEG_INFINITY;
            }
            softmax_in_place(row);
        }
        Ok(logits)
    }
}

impl ClassifierParams {
    pub fn zeros(shapes: ClassifierShapes, schedule: NoiseSchedule) -> Result<Self> {
        Self::build(shapes, schedule, &mut Init::<rand_chacha::ChaCha8Rng>::Zero, 0.0)
    }

    pub fn random<R: Rng>(shapes: ClassifierShapes, schedule: NoiseSchedule, rng: &mut R) -> Result<Self> {
        Self::build(shapes, schedule, &mut Init::Random(rng), 2.0)
    }

    pub fn init<R: Rng>(shapes: ClassifierShapes, schedule: NoiseSchedule, rng: &mut R) -> Result<Self> {
        let mut p = Self::build(shapes, schedule, &mut Init::Random(rng), 0.0)?;
        p.hidden_bias = Matrix::zeros(1, shapes.hidden);
        Ok(p)
    }

    fn build<R: Rng>(shapes: ClassifierShapes, schedule: NoiseSchedule, init: &mut Init<R>, out_gain: f64) -> Result<Self> {
        let ClassifierShapes { vocab, seq_len, embed, hidden, classes } = shapes;
        if vocab < 2 || seq_len == 0 || embed == 0 || hidden == 0 || classes < 1 {
            return domain(format!("invalid classifier shapes {shapes:?}"));
        }
        Ok(Self {
            shapes,
            schedule,
            token_embedding: init.matrix(vocab, embed, 0.5),
            position_encoding: init.matrix(seq_len, embed, 0.5),
            pool_projection: init.matrix(embed, embed, glorot(embed)),
            time_projection: init.matrix(2, embed, 0.5),
            hidden_weight: init.matrix(embed, hidden, glorot(embed)),
            hidden_bias: init.matrix(1, hidden, 0.1),
            output_weight: init.matrix(hidden, classes, glorot(hidden) * out_gain),
            output_bias: init.matrix(1, classes, 0.1 * out_gain),
        })
    }

    pub fn arrays(&self) -> Vec<&Matrix> {
        vec![
            &self.token_embedding,
            &self.position_encoding,
            &self.pool_projection,
            &self.time_projection,
            &self.hidden_weight,
            &self.hidden_bias,
            &self.output_weight,
            &self.output_bias,
        ]
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.token_embedding,
            &mut self.position_encoding,
            &mut self.pool_projection,
            &mut self.time_projection,
            &mut self.hidden_weight,
            &mut self.hidden_bias,
            &mut self.output_weight,
            &mut self.output_bias,
        ]
    }

    pub fn array_names(&self) -> Vec<&'static str> {
        vec![
            "token_embedding",
            "position_encoding",
            "pool_projection",
            "time_projection",
            "hidden_weight",
            "hidden_bias",
            "output_weight",
            "output_bias",
        ]
    }

    pub fn expected_shapes(&self) -> Vec<(usize, usize)> {
        let s = self.shapes;
        vec![
            (s.vocab, s.embed),
            (s.seq_len, s.embed),
            (s.embed, s.embed),
            (2, s.embed),
            (s.embed, s.hidden),
            (1, s.hidden),
            (s.hidden, s.classes),
            (1, s.classes),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for ((name, m), want) in self.array_names().iter().zip(self.arrays()).zip(self.expected_shapes()) {
            if m.shape() != want || m.data.len() != want.0 * want.1 {
                return shape(format!("{name} has shape {:?}, expected {want:?}", m.shape()));
            }
            if !m.is_finite() {
                return domain(format!("{name} contains non-finite values"));
            }
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> ParamGrads {
        ParamGrads(self.arrays().iter().map(|m| Matrix::zeros(m.rows, m.cols)).collect())
    }

    /// Records one evaluation on a relaxed `L x N` input matrix.
    pub fn forward_pass_relaxed(&self, input: Matrix, t: f64) -> Result<ClassifierPass<'_>> {
        if input.shape() != (self.shapes.seq_len, self.shapes.vocab) {
            return shape(format!(
                "classifier input {:?}, expected {:?}",
                input.shape(),
                (self.shapes.seq_len, self.shapes.vocab)
            ));
        }
        let alpha = self.schedule.alpha(t)?;
        let mut tape = Tape::new();
        let params: Vec<Var> = self.arrays().into_iter().map(|m| tape.param(m)).collect();
        let input = tape.constant(input);
        let hidden = trunk(&mut tape, input, alpha, [params[0], params[1], params[2], params[3], params[4], params[5]], None);
        let pooled = tape.mean_rows(hidden);
        let logits = tape.matmul(pooled, params[6]);
        let logits = tape.add_row(logits, params[7]);
        let log_probs = tape.log_softmax_rows(logits);
        Ok(ClassifierPass { tape, log_probs, input, params })
    }

    pub fn forward_pass(&self, z: &[Token], t: f64) -> Result<ClassifierPass<'_>> {
        check_tokens(z, self.shapes.seq_len, self.shapes.vocab)?;
        self.forward_pass_relaxed(Matrix::one_hot_rows(z, self.shapes.vocab), t)
    }
}

pub(crate) fn check_tokens(z: &[Token], seq_len: usize, vocab: usize) -> Result<()> {
    if z.len() != seq_len {
        return shape(format!("sequence length {} != model length {seq_len}", z.len()));
    }
    if let Some(bad) = z.iter().find(|&&v| v >= vocab) {
        return domain(format!("token {bad} outside vocabulary of size {vocab}"));
    }
    Ok(())
}

/// A recorded classifier evaluation.
pub struct ClassifierPass<'a> {
    tape: Tape<'a>,
    log_probs: Var,
    input: Var,
    params: Vec<Var>,
}

impl ClassifierPass<'_> {
    /// Length-`K` log-probabilities.
    pub fn log_probs(&self) -> &[f64] {
        &self.tape.value(self.log_probs).data
    }

    /// Backpropagates `d loss / d log_probs` (length `K`) into parameter
    /// gradients and the gradient with respect to the input matrix.
    pub fn backward(&self, adjoint: Vec<f64>) -> (ParamGrads, Matrix) {
        let g = self.tape.backward(self.log_probs, Matrix::row_vector(adjoint));
        let zeros = |v: Var| {
            let m = self.tape.value(v);
            Matrix::zeros(m.rows, m.cols)
        };
        let grads = ParamGrads(self.params.iter().map(|&v| g.get(v).cloned().unwrap_or_else(|| zeros(v))).collect());
        let input = g.get(self.input).cloned().unwrap_or_else(|| zeros(self.input));
        (grads, input)
    }
}

impl Classifier for ClassifierParams {
    fn num_classes(&self) -> usize {
        self.shapes.classes
    }
    fn seq_len(&self) -> usize {
        self.shapes.seq_len
    }
    fn vocab_size(&self) -> usize {
        self.shapes.vocab
    }
    fn log_probs(&self, z: &[Token], t: f64) -> Result<Vec<f64>> {
        check_tokens(z, self.shapes.seq_len, self.shapes.vocab)?;
        let alpha = self.schedule.alpha(t)?;
        let w = [
            &self.token_embedding,
            &self.position_encoding,
            &self.pool_projection,
            &self.time_projection,
            &self.hidden_weight,
            &self.hidden_bias,
        ];
        let h = trunk_direct(z, alpha, w, None);
        let mut pooled = vec![0.0; h.cols];
        for r in 0..h.rows {
            pooled.iter_mut().zip(h.row(r)).for_each(|(a, b)| *a += b);
        }
        pooled.iter_mut().for_each(|a| *a /= h.rows as f64);
        let mut logits = Matrix::row_vector(pooled).matmul(&self.output_weight).data;
        logits.iter_mut().zip(self.output_bias.row(0)).for_each(|(v, b)| *v += b);
        let lse = log_sum_exp(&logits);
        Ok(logits.into_iter().map(|v| v - lse).collect())
    }
    fn log_prob_with_input_grad(&self, z: &[Token], t: f64, y: usize) -> Result<(f64, Matrix)> {
        if y >= self.shapes.classes {
            return domain(format!("class {y} >= {}", self.shapes.classes));
        }
        let pass = self.forward_pass(z, t)?;
        let mut adj = vec![0.0; self.shapes.classes];
        adj[y] = 1.0;
        let lp = pass.log_probs()[y];
        let (_, grad) = pass.backward(adj);
        Ok((lp, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dshapes(classes: usize, mask: Option<Token>) -> DenoiserShapes {
        DenoiserShapes { vocab: 4, seq_len: 3, embed: 5, hidden: 6, classes, mask }
    }

    #[test]
    fn zero_params_give_uniform_rows() {
        let p = DenoiserParams::zeros(dshapes(2, None), NoiseSchedule::default()).unwrap();
        let rows = p.predict(&[0, 1, 3], 0.4, Condition::Class(1)).unwrap();
        assert!(rows.data.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let c = ClassifierParams::zeros(
            ClassifierShapes { vocab: 4, seq_len: 3, embed: 5, hidden: 6, classes: 3 },
            NoiseSchedule::default(),
        )
        .unwrap();
        let lp = c.log_probs(&[0, 1, 2], 0.3).unwrap();
        assert!(lp.iter().all(|v| (v - (1.0f64 / 3.0).ln()).abs() < 1e-15));
    }

    #[test]
    fn direct_inference_matches_the_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cs = ClassifierShapes { vocab: 4, seq_len: 3, embed: 5, hidden: 6, classes: 3 };
        for mask in [None, Some(3)] {
            let p = DenoiserParams::random(dshapes(2, mask), NoiseSchedule::default(), &mut rng).unwrap();
            let c = ClassifierParams::random(cs, NoiseSchedule::default(), &mut rng).unwrap();
            for _ in 0..50 {
                let z: Vec<Token> = (0..3).map(|_| rng.gen_range(0..4)).collect();
                let t = rng.gen::<f64>();
                let cond = if rng.gen_bool(0.5) { Condition::Dropped } else { Condition::Class(rng.gen_range(0..2)) };
                let a = p.predict(&z, t, cond).unwrap();
                let b = p.forward_pass(&z, t, cond).unwrap().probs().clone();
                assert!(a.data.iter().zip(&b.data).all(|(x, y)| (x - y).abs() < 1e-13));
                let a = c.log_probs(&z, t).unwrap();
                let b = c.forward_pass(&z, t).unwrap().log_probs().to_vec();
                assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-13));
            }
        }
    }

    #[test]
    fn rows_normalize_and_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = DenoiserParams::random(dshapes(2, None), NoiseSchedule::default(), &mut rng).unwrap();
        for _ in 0..100 {
            let z: Vec<Token> = (0..3).map(|_| rng.gen_range(0..4)).collect();
            let t = rng.gen::<f64>();
            let cond = if rng.gen_bool(0.5) { Condition::Dropped } else { Condition::Class(rng.gen_range(0..2)) };
            let a = p.predict(&z, t, cond).unwrap();
            let b = p.predict(&z, t, cond).unwrap();
            assert_eq!(a, b);
            for r in 0..a.rows {
                assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mask_logit_is_excluded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = DenoiserParams::random(dshapes(0, Some(3)), NoiseSchedule::default(), &mut rng).unwrap();
        let rows = p.predict(&[3, 3, 1], 0.7, Condition::Dropped).unwrap();
        for r in 0..3 {
            assert_eq!(rows.get(r, 3), 0.0);
        }
    }

    #[test]
    fn input_errors() {
        let p = DenoiserParams::zeros(dshapes(2, None), NoiseSchedule::default()).unwrap();
        assert!(p.predict(&[0, 1], 0.5, Condition::Dropped).is_err());
        assert!(p.predict(&[0, 1, 4], 0.5, Condition::Dropped).is_err());
        assert!(p.predict(&[0, 1, 2], 0.5, Condition::Class(2)).is_err());
        let u = DenoiserParams::zeros(dshapes(0, None), NoiseSchedule::default()).unwrap();
        assert!(u.predict(&[0, 1, 2], 0.5, Condition::Class(0)).is_err());
    }

    fn fd_check_denoiser(p: &mut DenoiserParams, z: &[Token], t: f64, cond: Condition, adj: &Matrix) {
        let grads = p.forward_pass(z, t, cond).unwrap().backward(adj.clone());
        let f = |p: &DenoiserParams| -> f64 {
            let probs = p.predict(z, t, cond).unwrap();
            probs.data.iter().zip(&adj.data).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        let n_arrays = p.arrays().len();
        for a in 0..n_arrays {
            let len = p.arrays()[a].data.len();
            for i in 0..len {
                let orig = p.arrays()[a].data[i];
                p.arrays_mut()[a].data[i] = orig + h;
                let fp = f(p);
                p.arrays_mut()[a].data[i] = orig - h;
                let fm = f(p);
                p.arrays_mut()[a].data[i] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let an = grads.0[a].data[i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
                assert!(rel < 1e-4, "array {} [{i}]: fd={fd} analytic={an}", p.array_names()[a]);
            }
        }
    }

    #[test]
    fn denoiser_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (classes, mask) in [(0, None), (2, None), (0, Some(3))] {
            let mut p = DenoiserParams::random(dshapes(classes, mask), NoiseSchedule::default(), &mut rng).unwrap();
            let z: Vec<Token> = (0..3).map(|_| rng.gen_range(0..4)).collect();
            let adj = Matrix::from_vec(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let cond = if classes > 0 { Condition::Class(1) } else { Condition::Dropped };
            fd_check_denoiser(&mut p, &z, 0.37, cond, &adj);
        }
    }

    #[test]
    fn classifier_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let shapes = ClassifierShapes { vocab: 4, seq_len: 3, embed: 5, hidden: 6, classes: 3 };
        for _ in 0..20 {
            let c = ClassifierParams::random(shapes, NoiseSchedule::default(), &mut rng).unwrap();
            let z: Vec<Token> = (0..3).map(|_| rng.gen_range(0..4)).collect();
            let y = rng.gen_range(0..3);
            let t = rng.gen_range(0.05..0.95);
            let (_, grad) = c.log_prob_with_input_grad(&z, t, y).unwrap();
            let base = Matrix::one_hot_rows(&z, 4);
            let h = 1e-5;
            for i in 0..base.data.len() {
                let mut plus = base.clone();
                plus.data[i] += h;
                let mut minus = base.clone();
                minus.data[i] -= h;
                let fp = c.forward_pass_relaxed(plus, t).unwrap().log_probs()[y];
                let fm = c.forward_pass_relaxed(minus, t).unwrap().log_probs()[y];
                let fd = (fp - fm) / (2.0 * h);
                let rel = (fd - grad.data[i]).abs() / fd.abs().max(grad.data[i].abs()).max(1e-4);
                assert!(rel < 1e-4, "[{i}] fd={fd} analytic={}", grad.data[i]);
            }
        }
    }

    #[test]
    fn constant_classifier_has_zero_input_gradient() {
        let c = ClassifierParams::zeros(
            ClassifierShapes { vocab: 4, seq_len: 3, embed: 5, hidden: 6, classes: 2 },
            NoiseSchedule::default(),
        )
        .unwrap();
        let (_, g) = c.log_prob_with_input_grad(&[0, 1, 2], 0.5, 1).unwrap();
        assert!(g.data.iter().all(|v| *v == 0.0));
    }
}
