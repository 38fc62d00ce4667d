//! Recurrent cells, Gaussian heads and the three sequence networks: the z₂
//! encoder, the z₁ encoder and the frame decoder.
//!
//! Parameters live in a flat [`ParamSet`]; the network structs only hold
//! indices into it, so optimizers and checkpoints can treat the whole model
//! as a list of named arrays.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::diffcore::{Array, Tape, Var};
use crate::error::{Error, Result};
use crate::fhvae::{GaussianDiag, LOGVAR_CLAMP};

pub const INIT_SCALE: f64 = 0.05;
pub const FORGET_BIAS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Lstm,
    Gru,
    Rnn,
    /// Feed-forward over the flattened segment.
    Fc,
}

impl CellKind {
    fn gates(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
            CellKind::Rnn | CellKind::Fc => 1,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            CellKind::Lstm => 0,
            CellKind::Gru => 1,
            CellKind::Rnn => 2,
            CellKind::Fc => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => CellKind::Lstm,
            1 => CellKind::Gru,
            2 => CellKind::Rnn,
            3 => CellKind::Fc,
            _ => return None,
        })
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
            CellKind::Rnn => "rnn",
            CellKind::Fc => "fc",
        })
    }
}

impl FromStr for CellKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            "rnn" => Ok(CellKind::Rnn),
            "fc" => Ok(CellKind::Fc),
            other => Err(Error::Config(format!("unknown cell kind `{other}`"))),
        }
    }
}

/// Named, ordered parameter arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Array>,
    /// Whether L2 regularization applies (weights yes, biases no).
    decay: Vec<bool>,
}

impl ParamSet {
    pub fn push(&mut self, name: String, value: Array, decay: bool) -> usize {
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.decay.push(decay);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array] {
        &mut self.values
    }

    pub fn decays(&self) -> &[bool] {
        &self.decay
    }

    pub fn get(&self, i: usize) -> &Array {
        &self.values[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }

    /// Records every parameter as a differentiable leaf, in order.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.values.iter().map(|v| tape.param(v.clone())).collect()
    }

    /// Records every parameter as a constant.
    pub fn bind_const<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.values.iter().map(|v| tape.constant(v.clone())).collect()
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..=scale)).collect())
}

/// `y = x W + b`
#[derive(Debug, Clone, Copy)]
pub struct Affine {
    pub weight: usize,
    pub bias: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Affine {
    fn new(ps: &mut ParamSet, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let weight = ps.push(format!("{name}.w"), uniform(rng, &[in_dim, out_dim], INIT_SCALE), true);
        let bias = ps.push(format!("{name}.b"), Array::zeros(&[out_dim]), false);
        Affine { weight, bias, in_dim, out_dim }
    }

    pub fn apply<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Var<'t> {
        x.matmul(p[self.weight]).add_row(p[self.bias])
    }
}

/// Mean and log-variance maps from a hidden state. Each is a single affine
/// layer; the log-variance is clamped before use.
#[derive(Debug, Clone, Copy)]
pub struct GaussianHead {
    pub mean: Affine,
    pub logvar: Affine,
}

impl GaussianHead {
    fn new(ps: &mut ParamSet, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        GaussianHead {
            mean: Affine::new(ps, &format!("{name}.mu"), in_dim, out_dim, rng),
            logvar: Affine::new(ps, &format!("{name}.logvar"), in_dim, out_dim, rng),
        }
    }

    pub fn apply<'t>(&self, p: &[Var<'t>], h: Var<'t>) -> GaussianVar<'t> {
        GaussianVar { mean: self.mean.apply(p, h), logvar: self.logvar.apply(p, h).clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP) }
    }
}

/// Batched diagonal Gaussian on a tape: rows are batch items.
#[derive(Clone, Copy)]
pub struct GaussianVar<'t> {
    pub mean: Var<'t>,
    pub logvar: Var<'t>,
}

impl<'t> GaussianVar<'t> {
    /// Splits a batch into one [`GaussianDiag`] per row.
    pub fn to_rows(&self) -> Vec<GaussianDiag> {
        let (m, lv) = (self.mean.value(), self.logvar.value());
        (0..m.rows()).map(|r| GaussianDiag::new(m.row(r).to_vec(), lv.row(r).to_vec())).collect()
    }

    /// `mean + exp(logvar / 2) ⊙ noise`
    pub fn sample(&self, noise: Var<'t>) -> Var<'t> {
        self.mean + self.logvar.scale(0.5).exp() * noise
    }
}

/// Weights of one cell. For recurrent kinds the gate blocks are stacked
/// along the column axis (LSTM order: input, forget, candidate, output;
/// GRU order: reset, update, new).
#[derive(Debug, Clone, Copy)]
pub struct CellParams {
    pub kind: CellKind,
    pub input_dim: usize,
    pub hidden: usize,
    pub w_ih: usize,
    pub w_hh: Option<usize>,
    pub b_ih: usize,
    /// GRU keeps a separate hidden bias inside the reset product.
    pub b_hh: Option<usize>,
}

impl CellParams {
    fn new(ps: &mut ParamSet, name: &str, kind: CellKind, input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let g = kind.gates() * hidden;
        let w_ih = ps.push(format!("{name}.w_ih"), uniform(rng, &[input_dim, g], INIT_SCALE), true);
        let w_hh = (kind != CellKind::Fc)
            .then(|| ps.push(format!("{name}.w_hh"), uniform(rng, &[hidden, g], INIT_SCALE), true));
        let mut bias = Array::zeros(&[g]);
        if kind == CellKind::Lstm {
            bias.data_mut()[hidden..2 * hidden].fill(FORGET_BIAS);
        }
        let b_ih = ps.push(format!("{name}.b_ih"), bias, false);
        let b_hh = (kind == CellKind::Gru).then(|| ps.push(format!("{name}.b_hh"), Array::zeros(&[g]), false));
        CellParams { kind, input_dim, hidden, w_ih, w_hh, b_ih, b_hh }
    }

    /// Input projection `x W_ih + b_ih`, shared by every step that sees `x`.
    pub fn project<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Var<'t> {
        x.matmul(p[self.w_ih]).add_row(p[self.b_ih])
    }

    /// One recurrent step from a precomputed input projection. Returns the
    /// new hidden state and, for LSTM, the new cell state.
    pub fn step<'t>(&self, p: &[Var<'t>], proj: Var<'t>, h: Var<'t>, c: Option<Var<'t>>) -> (Var<'t>, Option<Var<'t>>) {
        let hd = self.hidden;
        let w_hh = p[self.w_hh.expect("step on a feed-forward cell")];
        match self.kind {
            CellKind::Lstm => {
                let gates = proj + h.matmul(w_hh);
                let i = gates.slice_cols(0, hd).sigmoid();
                let f = gates.slice_cols(hd, hd).sigmoid();
                let g = gates.slice_cols(2 * hd, hd).tanh();
                let o = gates.slice_cols(3 * hd, hd).sigmoid();
                let c_new = f * c.expect("LSTM needs a cell state") + i * g;
                let h_new = o * c_new.tanh();
                (h_new, Some(c_new))
            }
            CellKind::Gru => {
                let hp = h.matmul(w_hh).add_row(p[self.b_hh.expect("GRU hidden bias")]);
                let r = (proj.slice_cols(0, hd) + hp.slice_cols(0, hd)).sigmoid();
                let z = (proj.slice_cols(hd, hd) + hp.slice_cols(hd, hd)).sigmoid();
                let n = (proj.slice_cols(2 * hd, hd) + r * hp.slice_cols(2 * hd, hd)).tanh();
                (n + z * (h - n), None)
            }
            CellKind::Rnn => ((proj + h.matmul(w_hh)).tanh(), None),
            CellKind::Fc => unreachable!(),
        }
    }

    /// Runs the cell over per-step inputs and returns the final hidden state
    /// (recurrent kinds) or the hidden layer of the flattened input (FC).
    fn run_final<'t>(&self, p: &[Var<'t>], inputs: &[Var<'t>]) -> Var<'t> {
        self.run(p, inputs, None).pop().expect("at least one step")
    }

    /// Hidden states for every step. With `repeat = Some(T)`, `inputs` must
    /// hold a single input fed at each of the `T` steps.
    fn run<'t>(&self, p: &[Var<'t>], inputs: &[Var<'t>], repeat: Option<usize>) -> Vec<Var<'t>> {
        if self.kind == CellKind::Fc {
            let flat = if inputs.len() == 1 { inputs[0] } else { Var::concat(inputs) };
            return vec![self.project(p, flat).tanh()];
        }
        let tape = inputs[0].tape();
        let batch = inputs[0].value().rows();
        let zeros = tape.constant(Array::zeros(&[batch, self.hidden]));
        let mut h = zeros;
        let mut c = (self.kind == CellKind::Lstm).then_some(zeros);
        let steps = repeat.unwrap_or(inputs.len());
        let shared = repeat.map(|_| self.project(p, inputs[0]));
        let mut out = Vec::with_capacity(steps);
        for proj in (0..steps).map(|t| shared.unwrap_or_else(|| self.project(p, inputs[t]))) {
            let (h2, c2) = self.step(p, proj, h, c);
            h = h2;
            c = c2;
            out.push(h);
        }
        out
    }
}

/// One of the three sequence networks: a cell plus a Gaussian head.
#[derive(Debug, Clone, Copy)]
pub struct SeqNet {
    pub cell: CellParams,
    pub head: GaussianHead,
}

/// The z₂ encoder, z₁ encoder and frame decoder. No parameters are shared.
#[derive(Debug, Clone)]
pub struct Networks {
    pub params: ParamSet,
    pub enc_z2: SeqNet,
    pub enc_z1: SeqNet,
    pub dec_x: SeqNet,
    pub kind: CellKind,
    pub frame_dim: usize,
    pub seg_len: usize,
    pub z1_dim: usize,
    pub z2_dim: usize,
}

/// Dimensions needed to lay out the networks.
#[derive(Debug, Clone, Copy)]
pub struct NetShape {
    pub kind: CellKind,
    pub frame_dim: usize,
    pub seg_len: usize,
    pub z1_dim: usize,
    pub z2_dim: usize,
    pub hidden: usize,
}

impl Networks {
    pub fn new(shape: NetShape, rng: &mut impl Rng) -> Self {
        let NetShape { kind, frame_dim: f, seg_len: t, z1_dim, z2_dim, hidden } = shape;
        let mut ps = ParamSet::default();
        let (x_in, out_frames) = match kind {
            CellKind::Fc => (f * t, f * t),
            _ => (f, f),
        };
        let enc_z2 = SeqNet {
            cell: CellParams::new(&mut ps, "enc_z2.cell", kind, x_in, hidden, rng),
            head: GaussianHead::new(&mut ps, "enc_z2.head", hidden, z2_dim, rng),
        };
        let enc_z1 = SeqNet {
            cell: CellParams::new(&mut ps, "enc_z1.cell", kind, x_in + z2_dim, hidden, rng),
            head: GaussianHead::new(&mut ps, "enc_z1.head", hidden, z1_dim, rng),
        };
        let dec_x = SeqNet {
            cell: CellParams::new(&mut ps, "dec_x.cell", kind, z1_dim + z2_dim, hidden, rng),
            head: GaussianHead::new(&mut ps, "dec_x.head", hidden, out_frames, rng),
        };
        Networks { params: ps, enc_z2, enc_z1, dec_x, kind, frame_dim: f, seg_len: t, z1_dim, z2_dim }
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    fn check_frames(&self, frames: &[Var<'_>]) {
        assert!(!frames.is_empty(), "segment with zero frames");
        if self.kind == CellKind::Fc {
            assert_eq!(frames.len(), self.seg_len, "FC networks are tied to T = {}", self.seg_len);
        }
        for x in frames {
            assert_eq!(x.value().cols(), self.frame_dim, "frame dim mismatch");
        }
    }

    /// q(z₂ | x): `frames[t]` holds frame `t` of every batch item.
    pub fn encode_z2<'t>(&self, p: &[Var<'t>], frames: &[Var<'t>]) -> GaussianVar<'t> {
        self.check_frames(frames);
        let h = self.enc_z2.cell.run_final(p, frames);
        self.enc_z2.head.apply(p, h)
    }

    /// q(z₁ | x, z₂): every step consumes `[x_t; z₂]`.
    pub fn encode_z1<'t>(&self, p: &[Var<'t>], frames: &[Var<'t>], z2: Var<'t>) -> GaussianVar<'t> {
        self.check_frames(frames);
        let h = if self.kind == CellKind::Fc {
            let mut parts = frames.to_vec();
            parts.push(z2);
            self.enc_z1.cell.run_final(p, &[Var::concat(&parts)])
        } else {
            let inputs: Vec<Var<'t>> = frames.iter().map(|&x| Var::concat(&[x, z2])).collect();
            self.enc_z1.cell.run_final(p, &inputs)
        };
        self.enc_z1.head.apply(p, h)
    }

    /// p(x_t | z₁, z₂) for `t = 1..T`; `[z₁; z₂]` is the input at every step.
    pub fn decode_x<'t>(&self, p: &[Var<'t>], z1: Var<'t>, z2: Var<'t>, steps: usize) -> Vec<GaussianVar<'t>> {
        assert!(steps >= 1, "decode with T = 0");
        let input = Var::concat(&[z1, z2]);
        if self.kind == CellKind::Fc {
            assert_eq!(steps, self.seg_len, "FC networks are tied to T = {}", self.seg_len);
            let h = self.dec_x.cell.run(p, &[input], None)[0];
            let g = self.dec_x.head.apply(p, h);
            let f = self.frame_dim;
            return (0..steps)
                .map(|t| GaussianVar { mean: g.mean.slice_cols(t * f, f), logvar: g.logvar.slice_cols(t * f, f) })
                .collect();
        }
        self.dec_x.cell.run(p, &[input], Some(steps)).into_iter().map(|h| self.dec_x.head.apply(p, h)).collect()
    }
}

/// Standalone LSTM step on plain vectors; `w_ih` is `[I, 4H]`, `w_hh` is
/// `[H, 4H]`, `bias` is `[4H]`.
pub fn lstm_step(
    x: &[f64],
    h: &[f64],
    c: &[f64],
    w_ih: &Array,
    w_hh: &Array,
    bias: &Array,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let hd = h.len();
    if c.len() != hd || w_ih.shape() != [x.len(), 4 * hd] || w_hh.shape() != [hd, 4 * hd] || bias.len() != 4 * hd {
        return Err(Error::Shape(format!(
            "lstm_step: x {}, h {}, c {}, w_ih {:?}, w_hh {:?}, b {:?}",
            x.len(),
            hd,
            c.len(),
            w_ih.shape(),
            w_hh.shape(),
            bias.shape()
        )));
    }
    if !x.iter().chain(h).chain(c).all(|v| v.is_finite()) {
        return Err(Error::Shape("lstm_step: non-finite input".into()));
    }
    let tape = Tape::new();
    let p = [tape.constant(w_ih.clone()), tape.constant(w_hh.clone()), tape.constant(bias.clone())];
    let cell = CellParams {
        kind: CellKind::Lstm,
        input_dim: x.len(),
        hidden: hd,
        w_ih: 0,
        w_hh: Some(1),
        b_ih: 2,
        b_hh: None,
    };
    let xv = tape.constant(Array::matrix(1, x.len(), x.to_vec()));
    let hv = tape.constant(Array::matrix(1, hd, h.to_vec()));
    let cv = tape.constant(Array::matrix(1, hd, c.to_vec()));
    let (h2, c2) = cell.step(&p, cell.project(&p, xv), hv, Some(cv));
    Ok((h2.value().data().to_vec(), c2.expect("lstm").value().data().to_vec()))
}

/// `mean + exp(logvar / 2) ⊙ noise`
pub fn reparam_sample(g: &GaussianDiag, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != g.dim() {
        return Err(Error::Shape(format!("noise dim {} vs gaussian dim {}", noise.len(), g.dim())));
    }
    Ok(g.mean.iter().zip(&g.logvar).zip(noise).map(|((m, lv), e)| m + (0.5 * lv).exp() * e).collect())
}

/// Parameter count for a single cell of the given kind.
pub fn cell_param_count(kind: CellKind, input_dim: usize, hidden: usize) -> usize {
    let g = kind.gates() * hidden;
    match kind {
        CellKind::Fc => input_dim * hidden + hidden,
        CellKind::Gru => input_dim * g + hidden * g + 2 * g,
        _ => input_dim * g + hidden * g + g,
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diffcore::gradcheck::check_gradients;

    fn shape(kind: CellKind) -> NetShape {
        NetShape { kind, frame_dim: 2, seg_len: 3, z1_dim: 2, z2_dim: 2, hidden: 3 }
    }

    fn frames<'t>(tape: &'t Tape, seg: &[Vec<f64>]) -> Vec<Var<'t>> {
        seg.iter().map(|f| tape.constant(Array::matrix(1, f.len(), f.clone()))).collect()
    }

    fn zero_params(nets: &mut Networks) {
        for v in nets.params.values_mut() {
            v.data_mut().fill(0.0);
        }
    }

    #[test]
    fn zero_lstm_step_is_zero() {
        let (h, c) =
            lstm_step(&[0.0, 0.0], &[0.0], &[0.0], &Array::zeros(&[2, 4]), &Array::zeros(&[1, 4]), &Array::zeros(&[4]))
                .unwrap();
        assert_eq!((h, c), (vec![0.0], vec![0.0]));
    }

    #[test]
    fn scalar_lstm_step_matches_hand_rolled() {
        // H = 1, I = 1: gates i, f, g, o.
        let w_ih = Array::matrix(1, 4, vec![0.5, -0.3, 0.8, 0.2]);
        let w_hh = Array::matrix(1, 4, vec![0.1, 0.4, -0.6, 0.7]);
        let b = Array::vector(vec![0.05, 1.0, -0.1, 0.0]);
        let (x, h0, c0) = (0.7, -0.2, 0.3);
        let pre = |k: usize| w_ih.data()[k] * x + w_hh.data()[k] * h0 + b.data()[k];
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let c1 = s(pre(1)) * c0 + s(pre(0)) * pre(2).tanh();
        let h1 = s(pre(3)) * c1.tanh();
        let (h, c) = lstm_step(&[x], &[h0], &[c0], &w_ih, &w_hh, &b).unwrap();
        assert!((h[0] - h1).abs() < 1e-15 && (c[0] - c1).abs() < 1e-15);
        let again = lstm_step(&[x], &[h0], &[c0], &w_ih, &w_hh, &b).unwrap();
        assert_eq!((h, c), again);
    }

    #[test]
    fn lstm_step_rejects_bad_input() {
        let z = Array::zeros(&[1, 4]);
        let b = Array::zeros(&[4]);
        assert!(lstm_step(&[f64::NAN], &[0.0], &[0.0], &z, &z, &b).is_err());
        assert!(lstm_step(&[0.0, 0.0], &[0.0], &[0.0], &z, &z, &b).is_err());
    }

    #[test]
    fn zero_weights_give_head_biases() {
        for kind in [CellKind::Lstm, CellKind::Gru, CellKind::Rnn, CellKind::Fc] {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut nets = Networks::new(shape(kind), &mut rng);
            zero_params(&mut nets);
            let mu_b = nets.enc_z2.head.mean.bias;
            let lv_b = nets.enc_z2.head.logvar.bias;
            nets.params.values_mut()[mu_b] = Array::vector(vec![0.3, -0.4]);
            nets.params.values_mut()[lv_b] = Array::vector(vec![0.1, 0.2]);
            let dec_mu = nets.dec_x.head.mean.bias;
            let out = nets.params.get(dec_mu).len();
            nets.params.values_mut()[dec_mu] = Array::vector((0..out).map(|i| i as f64).collect());

            let tape = Tape::new();
            let p = nets.params.bind_const(&tape);
            let x = frames(&tape, &[vec![1.0, 2.0], vec![-1.0, 0.5], vec![3.0, 3.0]]);
            let q2 = nets.encode_z2(&p, &x);
            assert_eq!(q2.mean.value().data(), &[0.3, -0.4]);
            assert_eq!(q2.logvar.value().data(), &[0.1, 0.2]);
            let z2 = tape.constant(Array::matrix(1, 2, vec![5.0, -5.0]));
            let q1 = nets.encode_z1(&p, &x, z2);
            assert_eq!(q1.mean.value().data(), &[0.0, 0.0]);
            assert_eq!(q1.logvar.value().shape(), &[1, 2]);
            let px = nets.decode_x(&p, q1.mean, z2, 3);
            assert_eq!(px.len(), 3);
            for (t, g) in px.iter().enumerate() {
                let expect: Vec<f64> = match kind {
                    CellKind::Fc => vec![(2 * t) as f64, (2 * t + 1) as f64],
                    _ => vec![0.0, 1.0],
                };
                assert_eq!(g.mean.value().data(), &expect[..], "{kind}");
            }
        }
    }

    #[test]
    fn decoder_output_shape_at_paper_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let nets = Networks::new(
            NetShape { kind: CellKind::Lstm, frame_dim: 80, seg_len: 20, z1_dim: 32, z2_dim: 32, hidden: 16 },
            &mut rng,
        );
        let tape = Tape::new();
        let p = nets.params.bind_const(&tape);
        let z = tape.constant(Array::zeros(&[1, 32]));
        let px = nets.decode_x(&p, z, z, 20);
        assert_eq!(px.len(), 20);
        assert!(px.iter().all(|g| g.mean.value().shape() == [1, 80]));
    }

    #[test]
    fn z1_encoder_sees_z2() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nets = Networks::new(shape(CellKind::Lstm), &mut rng);
        let tape = Tape::new();
        let p = nets.params.bind_const(&tape);
        let x = frames(&tape, &[vec![0.1, 0.2], vec![0.3, 0.4]]);
        let a = nets.encode_z1(&p, &x, tape.constant(Array::matrix(1, 2, vec![0.0, 0.0])));
        let b = nets.encode_z1(&p, &x, tape.constant(Array::matrix(1, 2, vec![1.0, -1.0])));
        assert_ne!(a.mean.value().data(), b.mean.value().data());
    }

    /// Hand-rolled scalar networks: T = 2, F = 1, H = 1, J = 1.
    #[test]
    fn tiny_encoder_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let nets = Networks::new(
            NetShape { kind: CellKind::Lstm, frame_dim: 1, seg_len: 2, z1_dim: 1, z2_dim: 1, hidden: 1 },
            &mut rng,
        );
        let ps = &nets.params;
        let v = |name: &str| ps.get(ps.index_of(name).unwrap()).data().to_vec();
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        let step = |wi: &[f64], wh: &[f64], b: &[f64], inp: &[f64], h: f64, c: f64| {
            // wi is [I, 4] row-major.
            let pre = |k: usize| inp.iter().enumerate().map(|(r, x)| wi[r * 4 + k] * x).sum::<f64>() + wh[k] * h + b[k];
            let c2 = s(pre(1)) * c + s(pre(0)) * pre(2).tanh();
            (s(pre(3)) * c2.tanh(), c2)
        };
        let xs = [0.4, -0.9];
        let (wi, wh, b) = (v("enc_z2.cell.w_ih"), v("enc_z2.cell.w_hh"), v("enc_z2.cell.b_ih"));
        let (mut h, mut c) = (0.0, 0.0);
        for x in xs {
            (h, c) = step(&wi, &wh, &b, &[x], h, c);
        }
        let mu2 = v("enc_z2.head.mu.w")[0] * h + v("enc_z2.head.mu.b")[0];

        let (wi, wh, b) = (v("enc_z1.cell.w_ih"), v("enc_z1.cell.w_hh"), v("enc_z1.cell.b_ih"));
        let (mut h1, mut c1) = (0.0, 0.0);
        for x in xs {
            (h1, c1) = step(&wi, &wh, &b, &[x, mu2], h1, c1);
        }
        let lv1 = v("enc_z1.head.logvar.w")[0] * h1 + v("enc_z1.head.logvar.b")[0];

        let (wi, wh, b) = (v("dec_x.cell.w_ih"), v("dec_x.cell.w_hh"), v("dec_x.cell.b_ih"));
        let (mut hx, mut cx) = (0.0, 0.0);
        let mut dec = vec![];
        for _ in 0..2 {
            (hx, cx) = step(&wi, &wh, &b, &[0.5, mu2], hx, cx);
            dec.push(v("dec_x.head.mu.w")[0] * hx + v("dec_x.head.mu.b")[0]);
        }

        let tape = Tape::new();
        let p = ps.bind_const(&tape);
        let x = frames(&tape, &[vec![xs[0]], vec![xs[1]]]);
        let q2 = nets.encode_z2(&p, &x);
        assert!((q2.mean.value().item() - mu2).abs() < 1e-14);
        let q1 = nets.encode_z1(&p, &x, q2.mean);
        assert!((q1.logvar.value().item() - lv1).abs() < 1e-14);
        let z1 = tape.constant(Array::matrix(1, 1, vec![0.5]));
        let px = nets.decode_x(&p, z1, q2.mean, 2);
        for t in 0..2 {
            assert!((px[t].mean.value().item() - dec[t]).abs() < 1e-14);
        }
    }

    #[test]
    fn network_gradients_match_fd() {
        for kind in [CellKind::Lstm, CellKind::Gru, CellKind::Rnn, CellKind::Fc] {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut nets = Networks::new(shape(kind), &mut rng);
            // Larger weights so every gate is away from its linear regime.
            for v in nets.params.values_mut() {
                for x in v.data_mut() {
                    *x = rng.random_range(-0.8..0.8);
                }
            }
            let template = nets.clone();
            let seg = Array::matrix(3, 2, vec![0.3, -0.2, 0.9, 0.1, -0.5, 0.4]);
            fn probe<'t>(nets: &Networks, seg: &Array, tape: &'t Tape, v: &[Var<'t>]) -> Var<'t> {
                let x: Vec<Var<'t>> = (0..3).map(|t| tape.constant(Array::matrix(1, 2, seg.row(t).to_vec()))).collect();
                let q2 = nets.encode_z2(v, &x);
                let q1 = nets.encode_z1(v, &x, q2.mean);
                let px = nets.decode_x(v, q1.mean, q2.mean, 3);
                let mut acc = q2.logvar.sum() + q1.mean.square().sum();
                for g in px {
                    acc = acc + g.mean.tanh().sum() + g.logvar.sum();
                }
                acc
            }
            let report = check_gradients(nets.params.values(), 1e-5, &|tape, v| probe(&template, &seg, tape, v));
            assert!(report.passes(1e-6), "{kind}: {report:?}");
        }
    }

    #[test]
    fn param_count_ranking() {
        for (i, h) in [(80, 256), (3, 4), (1, 2), (96, 16)] {
            let r = cell_param_count(CellKind::Rnn, i, h);
            let g = cell_param_count(CellKind::Gru, i, h);
            let l = cell_param_count(CellKind::Lstm, i, h);
            assert!(r < g && g < l, "I={i} H={h}: {r} {g} {l}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let counts: Vec<usize> = [CellKind::Rnn, CellKind::Gru, CellKind::Lstm]
            .into_iter()
            .map(|k| Networks::new(NetShape { kind: k, ..shape(k) }, &mut rng).param_count())
            .collect();
        assert!(counts[0] < counts[1] && counts[1] < counts[2]);
        let lstm = Networks::new(shape(CellKind::Lstm), &mut rng);
        let cell = cell_param_count(CellKind::Lstm, 2, 3);
        let ix = lstm.params.index_of("enc_z2.cell.w_ih").unwrap();
        assert_eq!(lstm.params.get(ix).len() + 9 * 4 + 12, cell);
    }

    #[test]
    fn init_follows_convention() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let nets = Networks::new(shape(CellKind::Lstm), &mut rng);
        for ((name, v), decay) in nets.params.names().iter().zip(nets.params.values()).zip(nets.params.decays()) {
            if name.ends_with(".b_ih") {
                assert!(!decay);
                assert_eq!(&v.data()[..3], &[0.0; 3]);
                assert_eq!(&v.data()[3..6], &[FORGET_BIAS; 3]);
            } else if *decay {
                assert!(v.data().iter().all(|x| x.abs() <= INIT_SCALE));
            }
        }
    }

    #[test]
    fn reparam_examples() {
        let g = GaussianDiag::new(vec![1.0, -2.0], vec![0.0, 0.0]);
        assert_eq!(reparam_sample(&g, &[0.0, 0.0]).unwrap(), vec![1.0, -2.0]);
        assert_eq!(reparam_sample(&g, &[0.5, 0.25]).unwrap(), vec![1.5, -1.75]);
        assert!(reparam_sample(&g, &[0.0]).is_err());
    }

    #[test]
    fn reparam_moments_match_over_many_draws() {
        use rand_distr::{Distribution, StandardNormal};
        let g = GaussianDiag::new(vec![0.7], vec![-0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| reparam_sample(&g, &[StandardNormal.sample(&mut rng)]).unwrap()[0]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let true_var = (-0.5f64).exp();
        let se_mean = (true_var / n as f64).sqrt();
        let se_var = true_var * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean - 0.7).abs() < 3.0 * se_mean);
        assert!((var - true_var).abs() < 3.0 * se_var);
    }
}
