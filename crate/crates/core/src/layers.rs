//! Encoder and head building blocks: embedding lookup, LSTM, BiLSTM,
//! dot-product attention pooling, MLP heads, dropout and cross-entropy.

use rand::Rng as _;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Rng;

/// Reserved vocabulary index for padding.
pub const PAD: usize = 0;
/// Reserved vocabulary index for out-of-vocabulary tokens.
pub const UNK: usize = 1;

/// Default width of every task head's hidden layer.
pub const MLP_HIDDEN: usize = 20;

const INIT_RANGE: f64 = 0.1;

/// Static (non-contextual) word vectors, one row per vocabulary entry.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenEmbeddingTable {
    pub rows: Tensor,
    pub trainable: bool,
}

impl TokenEmbeddingTable {
    /// Uniform `[-0.1, 0.1]` rows with zeroed PAD and UNK rows.
    pub fn random(vocab_size: usize, dim: usize, rng: &mut Rng) -> Self {
        let mut rows = Tensor::uniform(&[vocab_size, dim], -INIT_RANGE, INIT_RANGE, rng);
        let reserved = vocab_size.min(2) * dim;
        rows.data_mut()[..reserved].fill(0.0);
        TokenEmbeddingTable {
            rows,
            trainable: false,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }
}

/// Gate weights for one LSTM direction. Each gate matrix has shape
/// `hidden × (input + hidden)` and multiplies the concatenation `[x_t; h_{t-1}]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub w_input: Tensor,
    pub w_forget: Tensor,
    pub w_cell: Tensor,
    pub w_output: Tensor,
    pub b_input: Tensor,
    pub b_forget: Tensor,
    pub b_cell: Tensor,
    pub b_output: Tensor,
}

impl LstmParams {
    /// Uniform `[-0.1, 0.1]` weights; forget bias starts at 1.0.
    pub fn init(input_dim: usize, hidden_dim: usize, rng: &mut Rng) -> Self {
        let w = |rng: &mut Rng| {
            Tensor::uniform(&[hidden_dim, input_dim + hidden_dim], -INIT_RANGE, INIT_RANGE, rng)
        };
        let b = |rng: &mut Rng| Tensor::uniform(&[hidden_dim], -INIT_RANGE, INIT_RANGE, rng);
        LstmParams {
            w_input: w(rng),
            w_forget: w(rng),
            w_cell: w(rng),
            w_output: w(rng),
            b_input: b(rng),
            b_forget: Tensor::filled(&[hidden_dim], 1.0),
            b_cell: b(rng),
            b_output: b(rng),
        }
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let w = || Tensor::zeros(&[hidden_dim, input_dim + hidden_dim]);
        let b = || Tensor::zeros(&[hidden_dim]);
        LstmParams {
            w_input: w(),
            w_forget: w(),
            w_cell: w(),
            w_output: w(),
            b_input: b(),
            b_forget: b(),
            b_cell: b(),
            b_output: b(),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_input.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.w_input.shape()[1] - self.hidden_dim()
    }

    pub fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.w_input,
            &self.w_forget,
            &self.w_cell,
            &self.w_output,
            &self.b_input,
            &self.b_forget,
            &self.b_cell,
            &self.b_output,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.w_input,
            &mut self.w_forget,
            &mut self.w_cell,
            &mut self.w_output,
            &mut self.b_input,
            &mut self.b_forget,
            &mut self.b_cell,
            &mut self.b_output,
        ]
    }

    pub const NAMES: [&'static str; 8] = [
        "w_input", "w_forget", "w_cell", "w_output", "b_input", "b_forget", "b_cell", "b_output",
    ];
}

/// Query vector `w` of dot-product attention, length `2·d2`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionQuery {
    pub w: Tensor,
}

impl AttentionQuery {
    pub fn init(dim: usize, rng: &mut Rng) -> Self {
        AttentionQuery {
            w: Tensor::uniform(&[dim], -INIT_RANGE, INIT_RANGE, rng),
        }
    }
}

/// One task head: dropout → `relu(z·W₁ + b₁)` → `h·W₂ + b₂`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpHead {
    pub w_hidden: Tensor,
    pub b_hidden: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub dropout: f64,
}

impl MlpHead {
    pub fn init(input: usize, hidden: usize, classes: usize, dropout: f64, rng: &mut Rng) -> Self {
        MlpHead {
            w_hidden: Tensor::uniform(&[input, hidden], -INIT_RANGE, INIT_RANGE, rng),
            b_hidden: Tensor::uniform(&[hidden], -INIT_RANGE, INIT_RANGE, rng),
            w_out: Tensor::uniform(&[hidden, classes], -INIT_RANGE, INIT_RANGE, rng),
            b_out: Tensor::uniform(&[classes], -INIT_RANGE, INIT_RANGE, rng),
            dropout,
        }
    }

    pub fn zeros(input: usize, hidden: usize, classes: usize, dropout: f64) -> Self {
        MlpHead {
            w_hidden: Tensor::zeros(&[input, hidden]),
            b_hidden: Tensor::zeros(&[hidden]),
            w_out: Tensor::zeros(&[hidden, classes]),
            b_out: Tensor::zeros(&[classes]),
            dropout,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.w_out.shape()[1]
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w_hidden, &self.b_hidden, &self.w_out, &self.b_out]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [
            &mut self.w_hidden,
            &mut self.b_hidden,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    pub const NAMES: [&'static str; 4] = ["w_hidden", "b_hidden", "w_out", "b_out"];
}

/// Looks up static vectors for `ids` and, when given, appends the per-token
/// contextual vectors: row `i` is `[static_i; sidecar_i]`.
///
/// Ids outside the table fall back to the UNK row.
pub fn embed_sequence<'a>(
    g: &mut Graph<'a>,
    table: &'a TokenEmbeddingTable,
    ids: &[usize],
    sidecar: Option<&Tensor>,
    instance_id: &str,
) -> Result<NodeId> {
    let vocab = table.vocab_size();
    let ids: Vec<usize> = ids.iter().map(|&i| if i < vocab { i } else { UNK }).collect();
    let rows = if table.trainable {
        g.param(&table.rows)
    } else {
        g.constant_ref(&table.rows)
    };
    let x = g.gather(rows, &ids)?;
    match sidecar {
        None => Ok(x),
        Some(ctx) => {
            if ctx.rank() != 2 || ctx.shape()[0] != ids.len() {
                return Err(Error::data(format!(
                    "instance {instance_id}: contextual vectors cover {} tokens, expected {}",
                    ctx.shape().first().copied().unwrap_or(0),
                    ids.len()
                )));
            }
            let c = g.constant(ctx.clone());
            g.concat(x, c)
        }
    }
}

/// One LSTM step with the standard gate equations:
///
/// ```text
/// i = σ(W_i[x;h] + b_i)   f = σ(W_f[x;h] + b_f)   o = σ(W_o[x;h] + b_o)
/// g = tanh(W_g[x;h] + b_g)
/// c' = f∘c + i∘g          h' = o∘tanh(c')
/// ```
pub fn lstm_step<'a>(
    g: &mut Graph<'a>,
    x_t: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
    p: &'a LstmParams,
) -> Result<(NodeId, NodeId)> {
    let hidden = p.hidden_dim();
    if g.value(h_prev).shape() != [hidden] || g.value(c_prev).shape() != [hidden] {
        return Err(Error::contract(format!(
            "lstm state shape {:?} does not match hidden size {hidden}",
            g.value(h_prev).shape()
        )));
    }
    if g.value(x_t).shape() != [p.input_dim()] {
        return Err(Error::contract(format!(
            "lstm input shape {:?} does not match input size {}",
            g.value(x_t).shape(),
            p.input_dim()
        )));
    }
    let xh = g.concat(x_t, h_prev)?;
    let gate = |g: &mut Graph<'a>, w: &'a Tensor, b: &'a Tensor| -> Result<NodeId> {
        let w = g.param(w);
        let b = g.param(b);
        let pre = g.matvec(w, xh)?;
        g.add(pre, b)
    };
    let i = gate(g, &p.w_input, &p.b_input)?;
    let f = gate(g, &p.w_forget, &p.b_forget)?;
    let c_hat = gate(g, &p.w_cell, &p.b_cell)?;
    let o = gate(g, &p.w_output, &p.b_output)?;
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let o = g.sigmoid(o);
    let c_hat = g.tanh(c_hat);

    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, c_hat)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

/// Runs an LSTM over the rows of `x` in the given order, returning the hidden
/// state after each position indexed by original row.
fn run_direction<'a>(
    g: &mut Graph<'a>,
    x: NodeId,
    n: usize,
    p: &'a LstmParams,
    reverse: bool,
) -> Result<Vec<NodeId>> {
    let d2 = p.hidden_dim();
    let mut h = g.constant(Tensor::zeros(&[d2]));
    let mut c = g.constant(Tensor::zeros(&[d2]));
    let mut out = vec![h; n];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..n).rev())
    } else {
        Box::new(0..n)
    };
    for t in order {
        let x_t = g.row(x, t)?;
        (h, c) = lstm_step(g, x_t, h, c, p)?;
        out[t] = h;
    }
    Ok(out)
}

/// Bidirectional encoding: row `i` is `[→h_i; ←h_i]` where the forward pass
/// has consumed tokens `0..=i` and the backward pass tokens `n-1..=i`.
pub fn bilstm_encode<'a>(
    g: &mut Graph<'a>,
    x: NodeId,
    fwd: &'a LstmParams,
    bwd: &'a LstmParams,
) -> Result<NodeId> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::contract(format!(
            "bilstm_encode needs a non-empty n×d input, got {shape:?}"
        )));
    }
    let n = shape[0];
    let f = run_direction(g, x, n, fwd, false)?;
    let b = run_direction(g, x, n, bwd, true)?;
    let rows = f
        .into_iter()
        .zip(b)
        .map(|(hf, hb)| g.concat(hf, hb))
        .collect::<Result<Vec<_>>>()?;
    g.stack(&rows)
}

/// `alpha = softmax(H·w)`, `z = Σ alpha_i h_i`. Returns `(z, alpha)`.
pub fn attention_pool<'a>(
    g: &mut Graph<'a>,
    h: NodeId,
    query: &'a AttentionQuery,
) -> Result<(NodeId, NodeId)> {
    if g.value(h).rank() != 2 || g.value(h).shape()[0] == 0 {
        return Err(Error::contract("attention over an empty sequence"));
    }
    let w = g.param(&query.w);
    let scores = g.matvec(h, w)?;
    let alpha = g.softmax(scores)?;
    let z = g.vecmat(alpha, h)?;
    Ok((z, alpha))
}

/// Inverted-dropout mask: entries are 0 with probability `rate`, otherwise
/// `1/(1-rate)`.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

/// Inverted dropout. Identity when `rate == 0` or `rng` is `None`.
pub fn dropout(g: &mut Graph<'_>, x: NodeId, rate: f64, rng: Option<&mut Rng>) -> Result<NodeId> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::contract(format!("dropout rate {rate} outside [0, 1)")));
    }
    match rng {
        Some(rng) if rate > 0.0 => {
            let v = g.value(x);
            let shape = v.shape().to_vec();
            let mask = Tensor::new(shape, dropout_mask(v.len(), rate, rng))?;
            let m = g.constant(mask);
            g.mul(x, m)
        }
        _ => Ok(x),
    }
}

/// Task-head logits. Dropout on `z` is applied only when `rng` is given
/// (training); softmax is left to the caller.
pub fn mlp_head_forward<'a>(
    g: &mut Graph<'a>,
    z: NodeId,
    head: &'a MlpHead,
    rng: Option<&mut Rng>,
) -> Result<NodeId> {
    let z = dropout(g, z, head.dropout, rng)?;
    let w1 = g.param(&head.w_hidden);
    let b1 = g.param(&head.b_hidden);
    let w2 = g.param(&head.w_out);
    let b2 = g.param(&head.b_out);
    let pre = g.vecmat(z, w1)?;
    let pre = g.add(pre, b1)?;
    let hidden = g.relu(pre);
    let logits = g.vecmat(hidden, w2)?;
    g.add(logits, b2)
}

/// Negative log-likelihood of `gold` under `softmax(logits)`.
pub fn cross_entropy(g: &mut Graph<'_>, logits: NodeId, gold: usize) -> Result<NodeId> {
    g.cross_entropy(logits, gold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{sigmoid, softmax};
    use crate::Rng;
    use crate::gradcheck::{grad_check, Parameters};
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> Rng {
        Rng::seed_from_u64(seed)
    }

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn embed_shapes() {
        let mut r = rng(0);
        let table = TokenEmbeddingTable::random(10, 100, &mut r);
        let mut g = Graph::new();
        let x = embed_sequence(&mut g, &table, &[2, 3, 4], None, "a").unwrap();
        assert_eq!(g.value(x).shape(), &[3, 100]);

        let side = Tensor::zeros(&[3, 1024]);
        let x = embed_sequence(&mut g, &table, &[2, 3, 4], Some(&side), "a").unwrap();
        assert_eq!(g.value(x).shape(), &[3, 1124]);
    }

    #[test]
    fn embed_unknown_id_uses_unk_row() {
        let mut r = rng(0);
        let mut table = TokenEmbeddingTable::random(5, 3, &mut r);
        table.rows.data_mut()[UNK * 3..UNK * 3 + 3].copy_from_slice(&[7.0, 8.0, 9.0]);
        let mut g = Graph::new();
        let x = embed_sequence(&mut g, &table, &[99], None, "a").unwrap();
        assert_eq!(g.value(x).data(), &[7.0, 8.0, 9.0]);
    }

    #[test]
    fn embed_sidecar_length_mismatch_names_instance() {
        let mut r = rng(0);
        let table = TokenEmbeddingTable::random(5, 3, &mut r);
        let side = Tensor::zeros(&[2, 4]);
        let mut g = Graph::new();
        let err = embed_sequence(&mut g, &table, &[2, 3, 4], Some(&side), "cite-42").unwrap_err();
        assert!(matches!(err, Error::Data { .. }));
        assert!(err.to_string().contains("cite-42"));
    }

    #[test]
    fn lstm_zero_case() {
        let p = LstmParams::zeros(2, 3);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2]));
        let h0 = g.constant(Tensor::zeros(&[3]));
        let c0 = g.constant(Tensor::zeros(&[3]));
        let (h, _) = lstm_step(&mut g, x, h0, c0, &p).unwrap();
        assert_eq!(g.value(h).data(), &[0.0; 3]);
    }

    #[test]
    fn lstm_saturated_forget_gate_keeps_cell() {
        let mut p = LstmParams::zeros(1, 2);
        p.b_forget = Tensor::filled(&[2], 50.0);
        p.b_input = Tensor::filled(&[2], -50.0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.7]));
        let h0 = g.constant(Tensor::zeros(&[2]));
        let c0 = g.constant(Tensor::vector(vec![0.3, -0.8]));
        let (_, c) = lstm_step(&mut g, x, h0, c0, &p).unwrap();
        close(g.value(c).data()[0], 0.3, 1e-12);
        close(g.value(c).data()[1], -0.8, 1e-12);
    }

    #[test]
    fn lstm_one_dim_hand_unrolled() {
        // input 1, hidden 1: each gate row is [w_x, w_h].
        let mut p = LstmParams::zeros(1, 1);
        p.w_input = Tensor::matrix(1, 2, vec![0.5, -0.3]).unwrap();
        p.w_forget = Tensor::matrix(1, 2, vec![0.2, 0.4]).unwrap();
        p.w_cell = Tensor::matrix(1, 2, vec![-0.7, 0.1]).unwrap();
        p.w_output = Tensor::matrix(1, 2, vec![0.9, 0.6]).unwrap();
        p.b_input = Tensor::vector(vec![0.1]);
        p.b_forget = Tensor::vector(vec![1.0]);
        p.b_cell = Tensor::vector(vec![-0.2]);
        p.b_output = Tensor::vector(vec![0.05]);
        let (x, h_prev, c_prev) = (1.5, -0.4, 0.25);

        let i = sigmoid(0.5 * x - 0.3 * h_prev + 0.1);
        let f = sigmoid(0.2 * x + 0.4 * h_prev + 1.0);
        let gc = (-0.7 * x + 0.1 * h_prev - 0.2f64).tanh();
        let o = sigmoid(0.9 * x + 0.6 * h_prev + 0.05);
        let c_exp = f * c_prev + i * gc;
        let h_exp = o * c_exp.tanh();

        let mut g = Graph::new();
        let xn = g.constant(Tensor::vector(vec![x]));
        let hn = g.constant(Tensor::vector(vec![h_prev]));
        let cn = g.constant(Tensor::vector(vec![c_prev]));
        let (h, c) = lstm_step(&mut g, xn, hn, cn, &p).unwrap();
        close(g.value(c).item(), c_exp, 1e-15);
        close(g.value(h).item(), h_exp, 1e-15);
    }

    #[test]
    fn lstm_rejects_bad_dims() {
        let p = LstmParams::zeros(2, 3);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[4]));
        let h0 = g.constant(Tensor::zeros(&[3]));
        let c0 = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(
            lstm_step(&mut g, x, h0, c0, &p),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn bilstm_singleton_and_width() {
        let mut r = rng(3);
        let fwd = LstmParams::init(4, 50, &mut r);
        let bwd = LstmParams::init(4, 50, &mut r);
        let mut g = Graph::new();
        let x = g.constant(Tensor::uniform(&[1, 4], -1.0, 1.0, &mut r));
        let h = bilstm_encode(&mut g, x, &fwd, &bwd).unwrap();
        assert_eq!(g.value(h).shape(), &[1, 100]);

        let empty = g.constant(Tensor::zeros(&[0, 4]));
        assert!(matches!(
            bilstm_encode(&mut g, empty, &fwd, &bwd),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn bilstm_palindrome_symmetry_with_tied_params() {
        let mut r = rng(4);
        let p = LstmParams::init(3, 5, &mut r);
        let a = vec![0.1, -0.5, 0.9];
        let b = vec![0.7, 0.2, -0.3];
        let c = vec![-0.6, 0.4, 0.0];
        let x = Tensor::from_rows(&[a.clone(), b.clone(), c, b, a]).unwrap();
        let mut g = Graph::new();
        let xn = g.constant(x);
        let h = bilstm_encode(&mut g, xn, &p, &p).unwrap();
        let h = g.value(h);
        let n = 5;
        for i in 0..n {
            let fwd = &h.row(i)[..5];
            let bwd = &h.row(n - 1 - i)[5..];
            for (x, y) in fwd.iter().zip(bwd) {
                close(*x, *y, 1e-15);
            }
        }
    }

    #[test]
    fn bilstm_causality() {
        let mut r = rng(5);
        let fwd = LstmParams::init(3, 4, &mut r);
        let bwd = LstmParams::init(3, 4, &mut r);
        let base = Tensor::uniform(&[6, 3], -1.0, 1.0, &mut r);
        let encode = |x: Tensor| {
            let mut g = Graph::new();
            let xn = g.constant(x);
            let h = bilstm_encode(&mut g, xn, &fwd, &bwd).unwrap();
            g.value(h).clone()
        };
        let h0 = encode(base.clone());
        let pos = 3;
        let mut perturbed = base.clone();
        perturbed.data_mut()[pos * 3] += 0.5;
        let h1 = encode(perturbed);
        for i in 0..6 {
            if i < pos {
                assert_eq!(&h0.row(i)[..4], &h1.row(i)[..4], "forward row {i}");
            }
            if i > pos {
                assert_eq!(&h0.row(i)[4..], &h1.row(i)[4..], "backward row {i}");
            }
        }
        assert_ne!(h0.row(pos), h1.row(pos));
    }

    #[test]
    fn attention_examples() {
        let mut r = rng(6);
        let q = AttentionQuery::init(4, &mut r);
        let row = vec![0.3, -0.2, 0.8, 0.1];
        let mut g = Graph::new();
        let h = g.constant(Tensor::from_rows(&[row.clone(), row.clone(), row.clone()]).unwrap());
        let (z, alpha) = attention_pool(&mut g, h, &q).unwrap();
        for &a in g.value(alpha).data() {
            close(a, 1.0 / 3.0, 1e-15);
        }
        for (a, b) in g.value(z).data().iter().zip(&row) {
            close(*a, *b, 1e-15);
        }

        let zero = AttentionQuery {
            w: Tensor::zeros(&[2]),
        };
        let h = g.constant(Tensor::from_rows(&[vec![5.0, -1.0], vec![0.0, 3.0]]).unwrap());
        let (_, alpha) = attention_pool(&mut g, h, &zero).unwrap();
        assert_eq!(g.value(alpha).data(), &[0.5, 0.5]);

        // Scores w·h = (1, 3).
        let unit = AttentionQuery {
            w: Tensor::vector(vec![1.0, 0.0]),
        };
        let h = g.constant(Tensor::from_rows(&[vec![1.0, 9.0], vec![3.0, -4.0]]).unwrap());
        let (_, alpha) = attention_pool(&mut g, h, &unit).unwrap();
        let a = g.value(alpha).data();
        close(a[0], 1.0 / (1.0 + 2f64.exp()), 1e-15);
        close(a[0], 0.1192, 1e-4);
        close(a[1], 0.8808, 1e-4);
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let head = MlpHead::zeros(4, MLP_HIDDEN, 3, 0.2);
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![0.5, -1.0, 2.0, 0.1]));
        let logits = mlp_head_forward(&mut g, z, &head, None).unwrap();
        assert_eq!(g.value(logits).data(), &[0.0; 3]);
        for p in softmax(g.value(logits).data()) {
            close(p, 1.0 / 3.0, 1e-15);
        }
    }

    #[test]
    fn mlp_hand_evaluated() {
        // 2 → 2 → 2
        let head = MlpHead {
            w_hidden: Tensor::matrix(2, 2, vec![1.0, -1.0, 0.5, 2.0]).unwrap(),
            b_hidden: Tensor::vector(vec![0.0, -1.0]),
            w_out: Tensor::matrix(2, 2, vec![1.0, 2.0, -1.0, 0.5]).unwrap(),
            b_out: Tensor::vector(vec![0.1, 0.2]),
            dropout: 0.2,
        };
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![2.0, 1.0]));
        let logits = mlp_head_forward(&mut g, z, &head, None).unwrap();
        // hidden pre = [2·1 + 1·0.5, 2·(−1) + 1·2] + [0, −1] = [2.5, −1] → relu [2.5, 0]
        // logits = [2.5·1 + 0·(−1), 2.5·2 + 0·0.5] + [0.1, 0.2] = [2.6, 5.2]
        let l = g.value(logits).data();
        close(l[0], 2.6, 1e-15);
        close(l[1], 5.2, 1e-15);
    }

    #[test]
    fn inference_head_is_rng_independent() {
        let mut r = rng(8);
        let head = MlpHead::init(6, MLP_HIDDEN, 3, 0.2, &mut r);
        let z0 = Tensor::uniform(&[6], -1.0, 1.0, &mut r);
        let run = || {
            let mut g = Graph::new();
            let z = g.constant(z0.clone());
            let l = mlp_head_forward(&mut g, z, &head, None).unwrap();
            g.value(l).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn dropout_identity_and_expectation() {
        let mut r = rng(9);
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[10], 1.0));
        assert_eq!(dropout(&mut g, x, 0.0, Some(&mut r)).unwrap(), x);
        assert_eq!(dropout(&mut g, x, 0.2, None).unwrap(), x);
        assert!(dropout(&mut g, x, 1.0, Some(&mut r)).is_err());

        let big = g.constant(Tensor::filled(&[1_000_000], 1.0));
        let y = dropout(&mut g, big, 0.2, Some(&mut r)).unwrap();
        let v = g.value(y).data();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        close(mean, 1.0, 0.01);
        let zeros = v.iter().filter(|&&a| a == 0.0).count() as f64 / v.len() as f64;
        close(zeros, 0.2, 0.01);
        assert!(v.iter().all(|&a| a == 0.0 || (a - 1.25).abs() < 1e-15));
    }

    struct LayerParams {
        table: TokenEmbeddingTable,
        fwd: LstmParams,
        bwd: LstmParams,
        query: AttentionQuery,
        head: MlpHead,
    }

    impl Parameters for LayerParams {
        fn tensors(&self) -> Vec<&Tensor> {
            let mut v = vec![&self.table.rows];
            v.extend(self.fwd.tensors());
            v.extend(self.bwd.tensors());
            v.push(&self.query.w);
            v.extend(self.head.tensors());
            v
        }
        fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
            let mut v = vec![&mut self.table.rows];
            v.extend(self.fwd.tensors_mut());
            v.extend(self.bwd.tensors_mut());
            v.push(&mut self.query.w);
            v.extend(self.head.tensors_mut());
            v
        }
    }

    fn scale_up(p: &mut LayerParams, r: &mut Rng) {
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v = r.gen_range(-1.0..=1.0);
            }
        }
    }

    #[test]
    fn full_encoder_and_head_pass_grad_check() {
        let mut r = rng(10);
        let mut table = TokenEmbeddingTable::random(6, 3, &mut r);
        table.trainable = true;
        let mut p = LayerParams {
            table,
            fwd: LstmParams::init(3, 2, &mut r),
            bwd: LstmParams::init(3, 2, &mut r),
            query: AttentionQuery::init(4, &mut r),
            head: MlpHead::init(4, 5, 3, 0.0, &mut r),
        };
        scale_up(&mut p, &mut r);
        let res = grad_check(&mut p, 1e-5, |g, p| {
            let x = embed_sequence(g, &p.table, &[2, 5, 3, 2], None, "gc")?;
            let h = bilstm_encode(g, x, &p.fwd, &p.bwd)?;
            let (z, _) = attention_pool(g, h, &p.query)?;
            let logits = mlp_head_forward(g, z, &p.head, None)?;
            cross_entropy(g, logits, 1)
        })
        .unwrap();
        assert!(res.max_rel_error < 1e-4, "{res:?}");
    }

    proptest! {
        #[test]
        fn attention_weights_are_a_distribution(
            n in 1usize..8,
            seed in 0u64..1000,
        ) {
            let mut r = rng(seed);
            let q = AttentionQuery { w: Tensor::uniform(&[4], -3.0, 3.0, &mut r) };
            let mut g = Graph::new();
            let h = g.constant(Tensor::uniform(&[n, 4], -3.0, 3.0, &mut r));
            let (_, alpha) = attention_pool(&mut g, h, &q).unwrap();
            let a = g.value(alpha).data();
            prop_assert!(a.iter().all(|&v| v >= 0.0));
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
