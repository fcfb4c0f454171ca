//! Stacked bidirectional LSTM encoder.
//!
//! The word embedding is the concatenation of the top layer's forward state
//! after the last frame and its backward state after the first frame. The
//! per-frame output of a lower layer (the "tap", layer 1 by default) feeds
//! the frame-level softmax head.
//!
//! Two forward paths exist: a plain per-frame recurrence ([`run_direction`],
//! [`encode`]) and a padded, batched path recorded on a [`Graph`]
//! ([`forward_batch`]) that training differentiates through. They are kept
//! independent so each can check the other.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::WordId;
use crate::error::{Error, Result};
use crate::numcore::{sigmoid_scalar, Graph, Matrix, Var};

/// Shape of an encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    /// 1-based index of the layer whose frame outputs feed the softmax head.
    pub tap_layer: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("hidden", self.hidden),
            ("input_dim", self.input_dim),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::config(format!("model.{name}"), "must be positive"));
            }
        }
        if self.tap_layer == 0 || self.tap_layer > self.num_layers {
            return Err(Error::config(
                "model.tap_layer",
                format!("must be in 1..={}", self.num_layers),
            ));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        2 * self.hidden
    }

    fn layer_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            2 * self.hidden
        }
    }
}

/// Weights of one LSTM direction. Gate blocks are ordered
/// `[input, forget, candidate, output]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCellParams {
    /// `4H x D`
    pub input_weights: Matrix,
    /// `4H x H`
    pub recurrent_weights: Matrix,
    /// `1 x 4H`
    pub biases: Matrix,
}

impl LstmCellParams {
    pub fn hidden(&self) -> usize {
        self.recurrent_weights.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.input_weights.cols()
    }

    fn check(&self) -> Result<()> {
        let h = self.hidden();
        let ok = h > 0
            && self.input_dim() > 0
            && self.input_weights.rows() == 4 * h
            && self.recurrent_weights.rows() == 4 * h
            && self.biases.shape() == (1, 4 * h);
        if !ok {
            return Err(Error::invalid(format!(
                "inconsistent LSTM cell shapes: input {:?}, recurrent {:?}, bias {:?}",
                self.input_weights.shape(),
                self.recurrent_weights.shape(),
                self.biases.shape()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiLayer {
    pub forward: LstmCellParams,
    pub backward: LstmCellParams,
}

/// Affine frame classifier on the tap layer output.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxHead {
    /// `C x 2H`
    pub weights: Matrix,
    /// `1 x C`
    pub bias: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub layers: Vec<BiLayer>,
    pub head: SoftmaxHead,
}

impl EncoderParams {
    /// All weight matrices in checkpoint order.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = Vec::with_capacity(6 * self.layers.len() + 2);
        for layer in &self.layers {
            for cell in [&layer.forward, &layer.backward] {
                out.extend([&cell.input_weights, &cell.recurrent_weights, &cell.biases]);
            }
        }
        out.extend([&self.head.weights, &self.head.bias]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::with_capacity(6 * self.layers.len() + 2);
        for layer in &mut self.layers {
            for cell in [&mut layer.forward, &mut layer.backward] {
                out.push(&mut cell.input_weights);
                out.push(&mut cell.recurrent_weights);
                out.push(&mut cell.biases);
            }
        }
        out.push(&mut self.head.weights);
        out.push(&mut self.head.bias);
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for l in 0..self.layers.len() {
            for dir in ["fwd", "bwd"] {
                for part in ["input_weights", "recurrent_weights", "biases"] {
                    out.push(format!("layer{}.{dir}.{part}", l + 1));
                }
            }
        }
        out.push("head.weights".into());
        out.push("head.bias".into());
        out
    }

    /// Expected `(rows, cols)` of every tensor, in [`Self::tensors`] order.
    pub fn expected_shapes(config: &EncoderConfig) -> Vec<(usize, usize)> {
        let h = config.hidden;
        let mut out = Vec::new();
        for l in 0..config.num_layers {
            let d = config.layer_input_dim(l);
            for _ in 0..2 {
                out.extend([(4 * h, d), (4 * h, h), (1, 4 * h)]);
            }
        }
        out.extend([(config.num_classes, 2 * h), (1, config.num_classes)]);
        out
    }

    /// Rebuilds parameters from tensors in [`Self::tensors`] order.
    pub fn from_tensors(config: EncoderConfig, tensors: Vec<Matrix>) -> Result<Self> {
        config.validate()?;
        let shapes = Self::expected_shapes(&config);
        if tensors.len() != shapes.len() {
            return Err(Error::invalid(format!(
                "expected {} tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (i, (t, s)) in tensors.iter().zip(&shapes).enumerate() {
            if t.shape() != *s {
                return Err(Error::invalid(format!(
                    "tensor {i} has shape {:?}, expected {s:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let cell = |it: &mut std::vec::IntoIter<Matrix>| LstmCellParams {
            input_weights: it.next().unwrap(),
            recurrent_weights: it.next().unwrap(),
            biases: it.next().unwrap(),
        };
        let layers = (0..config.num_layers)
            .map(|_| BiLayer {
                forward: cell(&mut it),
                backward: cell(&mut it),
            })
            .collect();
        let head = SoftmaxHead {
            weights: it.next().unwrap(),
            bias: it.next().unwrap(),
        };
        Ok(EncoderParams {
            config,
            layers,
            head,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Matrix {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-s..s)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

fn init_cell(rng: &mut ChaCha8Rng, h: usize, d: usize) -> LstmCellParams {
    let mut biases = Matrix::zeros(1, 4 * h);
    biases.data_mut()[h..2 * h].fill(1.0);
    LstmCellParams {
        input_weights: glorot(rng, 4 * h, d, d, 4 * h),
        recurrent_weights: glorot(rng, 4 * h, h, h, 4 * h),
        biases,
    }
}

/// Glorot-uniform weights, zero biases except a forget-gate bias of 1.
pub fn init_params(config: EncoderConfig, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = config.hidden;
    let layers = (0..config.num_layers)
        .map(|l| {
            let d = config.layer_input_dim(l);
            BiLayer {
                forward: init_cell(&mut rng, h, d),
                backward: init_cell(&mut rng, h, d),
            }
        })
        .collect();
    let head = SoftmaxHead {
        weights: glorot(&mut rng, config.num_classes, 2 * h, 2 * h, config.num_classes),
        bias: Matrix::zeros(1, config.num_classes),
    };
    Ok(EncoderParams {
        config,
        layers,
        head,
    })
}

/// Fixed-size word vector: `[forward final state | backward final state]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub word: Option<WordId>,
}

/// Per-frame outputs (`T x 2H`) of the tap layer for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameStates {
    pub per_frame: Matrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// One LSTM step on plain vectors.
pub fn cell_step(
    params: &LstmCellParams,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    params.check()?;
    let h = params.hidden();
    if x.len() != params.input_dim() || h_prev.len() != h || c_prev.len() != h {
        return Err(Error::invalid(format!(
            "cell_step dims: x {} (want {}), h {} / c {} (want {h})",
            x.len(),
            params.input_dim(),
            h_prev.len(),
            c_prev.len()
        )));
    }
    let mut z = params.biases.row(0).to_vec();
    for (k, zk) in z.iter_mut().enumerate() {
        let wx: f64 = params.input_weights.row(k).iter().zip(x).map(|(w, v)| w * v).sum();
        let wh: f64 = params.recurrent_weights.row(k).iter().zip(h_prev).map(|(w, v)| w * v).sum();
        *zk += wx + wh;
    }
    let mut h_out = vec![0.0; h];
    let mut c_out = vec![0.0; h];
    for j in 0..h {
        let i = sigmoid_scalar(z[j]);
        let f = sigmoid_scalar(z[h + j]);
        let g = z[2 * h + j].tanh();
        let o = sigmoid_scalar(z[3 * h + j]);
        c_out[j] = f * c_prev[j] + i * g;
        h_out[j] = o * c_out[j].tanh();
    }
    Ok((h_out, c_out))
}

/// Runs one direction over `T x D` frames from zero state. Row `t` of the
/// result is the hidden state after consuming frame `t`.
pub fn run_direction(params: &LstmCellParams, frames: &Matrix, direction: Direction) -> Result<Matrix> {
    let t_len = frames.rows();
    if t_len == 0 {
        return Err(Error::invalid("run_direction on an empty sequence"));
    }
    let h = params.hidden();
    let mut out = Matrix::zeros(t_len, h);
    let mut state = (vec![0.0; h], vec![0.0; h]);
    let steps: Box<dyn Iterator<Item = usize>> = match direction {
        Direction::Forward => Box::new(0..t_len),
        Direction::Backward => Box::new((0..t_len).rev()),
    };
    for t in steps {
        state = cell_step(params, frames.row(t), &state.0, &state.1)?;
        out.row_mut(t).copy_from_slice(&state.0);
    }
    Ok(out)
}

fn concat_features(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), a.cols() + b.cols());
    for r in 0..a.rows() {
        let row = out.row_mut(r);
        row[..a.cols()].copy_from_slice(a.row(r));
        row[a.cols()..].copy_from_slice(b.row(r));
    }
    out
}

/// Encodes one unpadded `T x D` sequence.
pub fn encode(params: &EncoderParams, frames: &Matrix) -> Result<(Embedding, FrameStates)> {
    if frames.rows() == 0 {
        return Err(Error::invalid("encode on an empty sequence"));
    }
    if frames.cols() != params.config.input_dim {
        return Err(Error::ShapeMismatch {
            op: "encode",
            left: frames.shape(),
            right: (frames.rows(), params.config.input_dim),
        });
    }
    let mut input = frames.clone();
    let mut tap = None;
    let mut embedding = Vec::new();
    for (l, layer) in params.layers.iter().enumerate() {
        let fwd = run_direction(&layer.forward, &input, Direction::Forward)?;
        let bwd = run_direction(&layer.backward, &input, Direction::Backward)?;
        if l + 1 == params.layers.len() {
            embedding = fwd.row(fwd.rows() - 1).to_vec();
            embedding.extend_from_slice(bwd.row(0));
        }
        input = concat_features(&fwd, &bwd);
        if l + 1 == params.config.tap_layer {
            tap = Some(input.clone());
        }
    }
    Ok((
        Embedding {
            vector: embedding,
            word: None,
        },
        FrameStates {
            per_frame: tap.expect("tap layer within stack"),
        },
    ))
}

/// Zero-padded batch of sequences, `N x T_max x D`.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    n: usize,
    t_max: usize,
    dim: usize,
    data: Vec<f64>,
    lengths: Vec<usize>,
}

impl PaddedBatch {
    /// `data` is indexed `[(seq * t_max + t) * dim + d]`.
    pub fn new(t_max: usize, dim: usize, data: Vec<f64>, lengths: Vec<usize>) -> Result<Self> {
        let n = lengths.len();
        if data.len() != n * t_max * dim {
            return Err(Error::invalid(format!(
                "padded batch has {} values, expected {n}x{t_max}x{dim}",
                data.len()
            )));
        }
        if let Some(&bad) = lengths.iter().find(|&&l| l == 0 || l > t_max) {
            return Err(Error::invalid(format!(
                "sequence length {bad} outside 1..={t_max}"
            )));
        }
        Ok(PaddedBatch {
            n,
            t_max,
            dim,
            data,
            lengths,
        })
    }

    pub fn from_sequences(seqs: &[&Matrix]) -> Result<Self> {
        let dim = seqs
            .first()
            .map(|m| m.cols())
            .ok_or_else(|| Error::invalid("empty batch"))?;
        let t_max = seqs.iter().map(|m| m.rows()).max().unwrap_or(0);
        let mut data = vec![0.0; seqs.len() * t_max * dim];
        for (i, s) in seqs.iter().enumerate() {
            if s.cols() != dim {
                return Err(Error::ShapeMismatch {
                    op: "batch",
                    left: seqs[0].shape(),
                    right: s.shape(),
                });
            }
            let start = i * t_max * dim;
            data[start..start + s.len()].copy_from_slice(s.data());
        }
        let lengths = seqs.iter().map(|m| m.rows()).collect();
        Self::new(t_max, dim, data, lengths)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn frame(&self, seq: usize, t: usize) -> &[f64] {
        let start = (seq * self.t_max + t) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// `(T_max * N) x D` with row `t * N + seq`.
    fn time_major(&self) -> Matrix {
        let mut out = Matrix::zeros(self.t_max * self.n, self.dim);
        for t in 0..self.t_max {
            for s in 0..self.n {
                out.row_mut(t * self.n + s).copy_from_slice(self.frame(s, t));
            }
        }
        out
    }
}

/// Graph handles for one LSTM direction.
#[derive(Clone, Copy, Debug)]
pub struct CellVars {
    pub input_weights: Var,
    pub recurrent_weights: Var,
    pub biases: Var,
}

/// Encoder parameters registered as graph leaves.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub config: EncoderConfig,
    pub layers: Vec<(CellVars, CellVars)>,
    pub head_weights: Var,
    pub head_bias: Var,
}

impl ParamVars {
    pub fn register(g: &mut Graph, params: &EncoderParams) -> Self {
        let cell = |g: &mut Graph, c: &LstmCellParams| CellVars {
            input_weights: g.leaf(c.input_weights.clone()),
            recurrent_weights: g.leaf(c.recurrent_weights.clone()),
            biases: g.leaf(c.biases.clone()),
        };
        let layers = params
            .layers
            .iter()
            .map(|l| (cell(g, &l.forward), cell(g, &l.backward)))
            .collect();
        ParamVars {
            config: params.config,
            layers,
            head_weights: g.leaf(params.head.weights.clone()),
            head_bias: g.leaf(params.head.bias.clone()),
        }
    }

    /// Wraps existing nodes given in checkpoint order.
    pub fn from_vars(config: EncoderConfig, vars: &[Var]) -> Result<Self> {
        let expected = 6 * config.num_layers + 2;
        if vars.len() != expected {
            return Err(Error::invalid(format!(
                "expected {expected} parameter nodes, got {}",
                vars.len()
            )));
        }
        let cell = |k: usize| CellVars {
            input_weights: vars[k],
            recurrent_weights: vars[k + 1],
            biases: vars[k + 2],
        };
        let layers = (0..config.num_layers).map(|l| (cell(6 * l), cell(6 * l + 3))).collect();
        Ok(ParamVars {
            config,
            layers,
            head_weights: vars[expected - 2],
            head_bias: vars[expected - 1],
        })
    }

    /// Leaves in checkpoint order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (f, b) in &self.layers {
            for c in [f, b] {
                out.extend([c.input_weights, c.recurrent_weights, c.biases]);
            }
        }
        out.extend([self.head_weights, self.head_bias]);
        out
    }

    /// Removes and returns the accumulated gradients in checkpoint order.
    pub fn take_gradients(&self, g: &mut Graph) -> Vec<Matrix> {
        self.all().into_iter().map(|v| g.take_grad(v)).collect()
    }
}

/// Graph outputs of a batched forward pass.
#[derive(Clone, Debug)]
pub struct BatchForward {
    /// `N x 2H`
    pub embeddings: Var,
    /// Tap-layer outputs, `(T_max * N) x 2H`, row `t * N + seq`.
    pub tap_states: Var,
    pub n: usize,
    pub t_max: usize,
}

fn direction_on_graph(
    g: &mut Graph,
    cell: &CellVars,
    inputs: Var,
    lengths: &[usize],
    direction: Direction,
) -> Result<Var> {
    let proj = g.matmul_nt(inputs, cell.input_weights)?;
    let proj = g.add_row(proj, cell.biases)?;
    g.lstm_sequence(proj, cell.recurrent_weights, lengths, direction == Direction::Backward)
}

/// Records the batched encoder forward pass on `g`.
///
/// Padded steps hold the previous state (forward) or the zero initial state
/// (backward), so padding never reaches embeddings, tap states of valid
/// frames, or gradients.
pub fn forward_batch(g: &mut Graph, vars: &ParamVars, batch: &PaddedBatch) -> Result<BatchForward> {
    let cfg = vars.config;
    if batch.dim() != cfg.input_dim {
        return Err(Error::ShapeMismatch {
            op: "forward_batch",
            left: (batch.t_max(), batch.dim()),
            right: (batch.t_max(), cfg.input_dim),
        });
    }
    let (n, t_max) = (batch.len(), batch.t_max());
    let mut input = g.leaf(batch.time_major());
    let mut tap = None;
    let mut embeddings = None;
    for (l, (fcell, bcell)) in vars.layers.iter().enumerate() {
        let fwd = direction_on_graph(g, fcell, input, batch.lengths(), Direction::Forward)?;
        let bwd = direction_on_graph(g, bcell, input, batch.lengths(), Direction::Backward)?;
        let last = l + 1 == vars.layers.len();
        if last {
            let f_last = g.slice_rows(fwd, (t_max - 1) * n, n)?;
            let b_first = g.slice_rows(bwd, 0, n)?;
            embeddings = Some(g.concat_cols(&[f_last, b_first])?);
        }
        if !last || l + 1 == cfg.tap_layer {
            input = g.concat_cols(&[fwd, bwd])?;
            if l + 1 == cfg.tap_layer {
                tap = Some(input);
            }
        }
    }
    Ok(BatchForward {
        embeddings: embeddings.expect("at least one layer"),
        tap_states: tap.expect("tap layer within stack"),
        n,
        t_max,
    })
}

/// Batched inference. Returns `N x 2H` embeddings and per-sequence unpadded
/// tap states.
pub fn encode_batch(params: &EncoderParams, batch: &PaddedBatch) -> Result<(Matrix, Vec<FrameStates>)> {
    let mut g = Graph::new();
    let vars = ParamVars::register(&mut g, params);
    let out = forward_batch(&mut g, &vars, batch)?;
    let tap = g.value(out.tap_states);
    let states = batch
        .lengths()
        .iter()
        .enumerate()
        .map(|(s, &len)| {
            let mut m = Matrix::zeros(len, tap.cols());
            for t in 0..len {
                m.row_mut(t).copy_from_slice(tap.row(t * out.n + s));
            }
            FrameStates { per_frame: m }
        })
        .collect();
    Ok((g.value(out.embeddings).clone(), states))
}

/// Embeds many sequences in fixed-size chunks.
pub fn embed_all(params: &EncoderParams, seqs: &[&Matrix], chunk: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(seqs.len());
    for part in seqs.chunks(chunk.max(1)) {
        let batch = PaddedBatch::from_sequences(part)?;
        let (emb, _) = encode_batch(params, &batch)?;
        out.extend((0..emb.rows()).map(|r| emb.row(r).to_vec()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{gradcheck, Unary};

    fn cfg(layers: usize, hidden: usize, input: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: layers,
            hidden,
            input_dim: input,
            num_classes: 4,
            tap_layer: 1,
        }
    }

    fn frames(t: usize, d: usize, phase: f64) -> Matrix {
        let data = (0..t * d).map(|i| (i as f64 * 0.61 + phase).sin()).collect();
        Matrix::from_vec(t, d, data).unwrap()
    }

    fn scalar_cell(wx: [f64; 4], wh: [f64; 4], b: [f64; 4]) -> LstmCellParams {
        LstmCellParams {
            input_weights: Matrix::from_vec(4, 1, wx.to_vec()).unwrap(),
            recurrent_weights: Matrix::from_vec(4, 1, wh.to_vec()).unwrap(),
            biases: Matrix::from_vec(1, 4, b.to_vec()).unwrap(),
        }
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    // Hand-expanded scalar LSTM recurrence.
    fn scalar_step(wx: [f64; 4], wh: [f64; 4], b: [f64; 4], x: f64, h: f64, c: f64) -> (f64, f64) {
        let i = sig(wx[0] * x + wh[0] * h + b[0]);
        let f = sig(wx[1] * x + wh[1] * h + b[1]);
        let g = (wx[2] * x + wh[2] * h + b[2]).tanh();
        let o = sig(wx[3] * x + wh[3] * h + b[3]);
        let c = f * c + i * g;
        (o * c.tanh(), c)
    }

    const WX: [f64; 4] = [0.5, -0.3, 0.8, 0.2];
    const WH: [f64; 4] = [0.1, 0.4, -0.6, 0.9];
    const B: [f64; 4] = [0.0, 1.0, -0.2, 0.3];

    #[test]
    fn zero_params_give_zero_state() {
        let p = scalar_cell([0.0; 4], [0.0; 4], [0.0; 4]);
        let (h, c) = cell_step(&p, &[3.0], &[0.7], &[0.0]).unwrap();
        assert_eq!(h, vec![0.0]);
        assert_eq!(c, vec![0.0]);
    }

    #[test]
    fn scalar_cell_matches_hand_expansion() {
        let p = scalar_cell(WX, WH, B);
        let (h, c) = cell_step(&p, &[0.7], &[-0.4], &[0.25]).unwrap();
        let (eh, ec) = scalar_step(WX, WH, B, 0.7, -0.4, 0.25);
        assert!((h[0] - eh).abs() < 1e-12);
        assert!((c[0] - ec).abs() < 1e-12);
    }

    #[test]
    fn two_frame_scalar_directions_match_hand_expansion() {
        let p = scalar_cell(WX, WH, B);
        let x = Matrix::from_vec(2, 1, vec![0.9, -1.3]).unwrap();
        let fwd = run_direction(&p, &x, Direction::Forward).unwrap();
        let (h1, c1) = scalar_step(WX, WH, B, 0.9, 0.0, 0.0);
        let (h2, _) = scalar_step(WX, WH, B, -1.3, h1, c1);
        assert!((fwd.get(0, 0) - h1).abs() < 1e-12);
        assert!((fwd.get(1, 0) - h2).abs() < 1e-12);

        let bwd = run_direction(&p, &x, Direction::Backward).unwrap();
        let (b2, bc2) = scalar_step(WX, WH, B, -1.3, 0.0, 0.0);
        let (b1, _) = scalar_step(WX, WH, B, 0.9, b2, bc2);
        assert!((bwd.get(1, 0) - b2).abs() < 1e-12);
        assert!((bwd.get(0, 0) - b1).abs() < 1e-12);
    }

    #[test]
    fn cell_step_rejects_bad_dims() {
        let p = scalar_cell(WX, WH, B);
        assert!(cell_step(&p, &[1.0, 2.0], &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn backward_direction_is_reversed_forward() {
        let params = init_params(cfg(1, 5, 3), 11).unwrap();
        let cell = &params.layers[0].backward;
        let x = frames(7, 3, 0.2);
        let bwd = run_direction(cell, &x, Direction::Backward).unwrap();
        let via_fwd = run_direction(cell, &x.reverse_rows(), Direction::Forward)
            .unwrap()
            .reverse_rows();
        assert_eq!(bwd, via_fwd);
    }

    #[test]
    fn single_frame_directions_agree() {
        let params = init_params(cfg(1, 4, 3), 5).unwrap();
        let cell = &params.layers[0].forward;
        let x = frames(1, 3, 0.0);
        assert_eq!(
            run_direction(cell, &x, Direction::Forward).unwrap(),
            run_direction(cell, &x, Direction::Backward).unwrap()
        );
    }

    #[test]
    fn empty_sequence_rejected() {
        let params = init_params(cfg(1, 2, 3), 5).unwrap();
        let x = Matrix::zeros(0, 3);
        assert!(run_direction(&params.layers[0].forward, &x, Direction::Forward).is_err());
        assert!(encode(&params, &x).is_err());
    }

    #[test]
    fn embedding_dim_is_twice_hidden() {
        let c = EncoderConfig {
            num_layers: 2,
            hidden: 128,
            input_dim: 40,
            num_classes: 48,
            tap_layer: 1,
        };
        let params = init_params(c, 1).unwrap();
        let (e, states) = encode(&params, &frames(3, 40, 0.0)).unwrap();
        assert_eq!(e.vector.len(), 256);
        assert_eq!(states.per_frame.shape(), (3, 256));
    }

    #[test]
    fn encode_is_deterministic() {
        let params = init_params(cfg(2, 4, 3), 9).unwrap();
        let x = frames(6, 3, 1.0);
        assert_eq!(encode(&params, &x).unwrap(), encode(&params, &x).unwrap());
    }

    #[test]
    fn single_layer_tap_is_top_layer() {
        let params = init_params(cfg(1, 4, 3), 2).unwrap();
        let x = frames(5, 3, 0.3);
        let (e, states) = encode(&params, &x).unwrap();
        let fwd = run_direction(&params.layers[0].forward, &x, Direction::Forward).unwrap();
        let bwd = run_direction(&params.layers[0].backward, &x, Direction::Backward).unwrap();
        assert_eq!(states.per_frame, concat_features(&fwd, &bwd));
        assert_eq!(&e.vector[..4], fwd.row(4));
        assert_eq!(&e.vector[4..], bwd.row(0));
    }

    #[test]
    fn init_is_seeded() {
        let a = init_params(cfg(2, 3, 2), 1).unwrap();
        let b = init_params(cfg(2, 3, 2), 1).unwrap();
        let c = init_params(cfg(2, 3, 2), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let fb = &a.layers[1].forward.biases;
        assert!(fb.data()[3..6].iter().all(|&x| x == 1.0));
        assert!(fb.data()[..3].iter().all(|&x| x == 0.0));
        assert!(fb.data()[6..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn init_weights_are_centered() {
        let c = EncoderConfig {
            num_layers: 1,
            hidden: 64,
            input_dim: 40,
            num_classes: 2,
            tap_layer: 1,
        };
        let w = &init_params(c, 77).unwrap().layers[0].forward.input_weights;
        let n = w.len() as f64;
        assert!(n >= 1e4);
        let s = (6.0 / (40.0 + 256.0_f64)).sqrt();
        let se = s / 3f64.sqrt() / n.sqrt();
        let mean = w.sum() / n;
        assert!(mean.abs() < 3.0 * se, "mean {mean} se {se}");
        assert!(w.data().iter().all(|x| x.abs() <= s));
    }

    #[test]
    fn init_rejects_zero_dims() {
        assert!(init_params(cfg(2, 0, 3), 1).is_err());
        let mut bad = cfg(2, 3, 3);
        bad.tap_layer = 3;
        assert!(init_params(bad, 1).is_err());
    }

    #[test]
    fn fused_cell_matches_primitive_ops() {
        let z = frames(3, 8, 0.4);
        let c0 = frames(3, 2, 2.0);
        let fused = gradcheck(
            |g, v| {
                let hc = g.lstm_cell(v[0], v[1])?;
                let sq = g.mul(hc, hc)?;
                Ok(g.sum(sq))
            },
            &[z.clone(), c0.clone()],
            1e-6,
        )
        .unwrap();
        assert!(fused.max_relative_error < 1e-6, "{}", fused.max_relative_error);

        // Same function written with elementwise ops only.
        let composed = |g: &mut Graph, v: &[Var]| -> Result<Var> {
            let block = |g: &mut Graph, k: usize| g.slice_cols(v[0], 2 * k, 2);
            let zi = block(g, 0)?;
            let zf = block(g, 1)?;
            let zg = block(g, 2)?;
            let zo = block(g, 3)?;
            let i = g.unary(Unary::Sigmoid, zi)?;
            let f = g.sigmoid(zf)?;
            let gg = g.tanh(zg)?;
            let o = g.sigmoid(zo)?;
            let fc = g.mul(f, v[1])?;
            let ig = g.mul(i, gg)?;
            let c = g.add(fc, ig)?;
            let tc = g.tanh(c)?;
            let h = g.mul(o, tc)?;
            let hc = g.concat_cols(&[h, c])?;
            let sq = g.mul(hc, hc)?;
            Ok(g.sum(sq))
        };
        let reference = gradcheck(composed, &[z, c0], 1e-6).unwrap();
        for (a, b) in fused.analytic.iter().zip(&reference.analytic) {
            assert!(a.max_abs_diff(b) < 1e-13);
        }
    }

    #[test]
    fn cell_gradient_matches_finite_differences() {
        let params = init_params(cfg(1, 3, 4), 21).unwrap();
        let cell = &params.layers[0].forward;
        let x = frames(1, 4, 0.9);
        let h0 = frames(1, 3, 0.1);
        let c0 = frames(1, 3, 1.7);
        let report = gradcheck(
            |g, v| {
                let x = g.leaf(x.clone());
                let wx = g.matmul_nt(x, v[0])?;
                let wh = g.matmul_nt(v[3], v[1])?;
                let z = g.add(wx, wh)?;
                let z = g.add_row(z, v[2])?;
                let hc = g.lstm_cell(z, v[4])?;
                let h = g.slice_cols(hc, 0, 3)?;
                let w = g.leaf(Matrix::from_rows(&[[0.3, -1.1, 0.7]]).unwrap());
                let p = g.mul(h, w)?;
                Ok(g.sum(p))
            },
            &[
                cell.input_weights.clone(),
                cell.recurrent_weights.clone(),
                cell.biases.clone(),
                h0,
                c0,
            ],
            1e-6,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-6, "{}", report.max_relative_error);
    }

    #[test]
    fn graph_path_matches_plain_path() {
        let params = init_params(cfg(2, 4, 3), 8).unwrap();
        let x = frames(6, 3, 0.5);
        let (e, states) = encode(&params, &x).unwrap();
        let (be, bstates) = encode_batch(&params, &PaddedBatch::from_sequences(&[&x]).unwrap()).unwrap();
        let diff = e
            .vector
            .iter()
            .zip(be.row(0))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12);
        assert!(states.per_frame.max_abs_diff(&bstates[0].per_frame) < 1e-12);
    }

    #[test]
    fn padded_batch_validates_lengths() {
        assert!(PaddedBatch::new(3, 2, vec![0.0; 12], vec![3, 4]).is_err());
        assert!(PaddedBatch::new(3, 2, vec![0.0; 12], vec![3, 0]).is_err());
        assert!(PaddedBatch::new(3, 2, vec![0.0; 12], vec![3, 2]).is_ok());
    }
}
