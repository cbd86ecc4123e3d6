//! Layers built on the tape: affine maps, MLPs, GRU cells, the encoder
//! attention layer and cyclic positional encodings.

use rand::Rng as _;

use super::tape::{Matrix, ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn init_uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut Rng) -> Matrix {
    let b = 1.0 / (fan_in.max(1) as f64).sqrt();
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-b..=b)).collect())
}

fn check_width(tape: &Tape, x: Var, width: usize, what: &str) -> Result<()> {
    let c = tape.value(x).cols;
    if c != width {
        return Err(Error::Shape(format!("{what}: expected width {width}, got {c}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, input: usize, output: usize, bias: bool, rng: &mut Rng) -> Self {
        let w = ps.add(format!("{name}.w"), init_uniform(input, output, input, rng));
        let b = bias.then(|| ps.add(format!("{name}.b"), init_uniform(1, output, input, rng)));
        Linear { w, b, input, output }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.w);
        let y = tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Affine layers with ReLU between them; the last layer is linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(ps: &mut ParamSet, name: &str, sizes: &[usize], rng: &mut Rng) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(ps, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Mlp { layers }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        check_width(tape, x, self.input_width(), "mlp input")?;
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(tape, h);
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// Gated recurrent unit with update gate `z`, reset gate `r` and candidate
/// `c`: `h' = (1 - z) ⊙ h + z ⊙ c`.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub wz: Linear,
    pub uz: Linear,
    pub wr: Linear,
    pub ur: Linear,
    pub wc: Linear,
    pub uc: Linear,
    pub width: usize,
}

impl GruCell {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize, rng: &mut Rng) -> Self {
        GruCell {
            wz: Linear::new(ps, &format!("{name}.wz"), d, d, true, rng),
            uz: Linear::new(ps, &format!("{name}.uz"), d, d, false, rng),
            wr: Linear::new(ps, &format!("{name}.wr"), d, d, true, rng),
            ur: Linear::new(ps, &format!("{name}.ur"), d, d, false, rng),
            wc: Linear::new(ps, &format!("{name}.wc"), d, d, true, rng),
            uc: Linear::new(ps, &format!("{name}.uc"), d, d, false, rng),
            width: d,
        }
    }

    pub fn step(&self, tape: &mut Tape, input: Var, state: Var) -> Result<Var> {
        check_width(tape, input, self.width, "gru input")?;
        check_width(tape, state, self.width, "gru state")?;
        let xz = self.wz.forward(tape, input);
        let hz = self.uz.forward(tape, state);
        let z = tape.add(xz, hz);
        let z = tape.sigmoid(z);
        let xr = self.wr.forward(tape, input);
        let hr = self.ur.forward(tape, state);
        let r = tape.add(xr, hr);
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, state);
        let xc = self.wc.forward(tape, input);
        let hc = self.uc.forward(tape, rh);
        let c = tape.add(xc, hc);
        let c = tape.tanh(c);
        let delta = tape.sub(c, state);
        let zd = tape.mul(z, delta);
        Ok(tape.add(state, zd))
    }
}

/// Learnable per-feature scale and shift after row standardization.
#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl Norm {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize) -> Self {
        Norm {
            gain: ps.add(format!("{name}.gain"), Matrix::from_vec(1, d, vec![1.0; d])),
            shift: ps.add(format!("{name}.shift"), Matrix::zeros(1, d)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let s = tape.standardize(x);
        let g = tape.param(self.gain);
        let b = tape.param(self.shift);
        let y = tape.mul_row(s, g);
        tape.add_row(y, b)
    }
}

/// Multi-head self-attention with residual + normalization and a
/// feed-forward sublayer. When positional embeddings are supplied, their
/// own query/key projections contribute an additive logit stream.
#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub heads: usize,
    pub d: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub pos_q: Option<Linear>,
    pub pos_k: Option<Linear>,
    pub norm1: Norm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: Norm,
}

impl AttentionLayer {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize, heads: usize, positional: bool, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Shape(format!("width {d} not divisible into {heads} heads")));
        }
        Ok(AttentionLayer {
            heads,
            d,
            wq: Linear::new(ps, &format!("{name}.wq"), d, d, false, rng),
            wk: Linear::new(ps, &format!("{name}.wk"), d, d, false, rng),
            wv: Linear::new(ps, &format!("{name}.wv"), d, d, false, rng),
            wo: Linear::new(ps, &format!("{name}.wo"), d, d, false, rng),
            pos_q: positional.then(|| Linear::new(ps, &format!("{name}.pq"), d, d, false, rng)),
            pos_k: positional.then(|| Linear::new(ps, &format!("{name}.pk"), d, d, false, rng)),
            norm1: Norm::new(ps, &format!("{name}.norm1"), d),
            ff1: Linear::new(ps, &format!("{name}.ff1"), d, d, true, rng),
            ff2: Linear::new(ps, &format!("{name}.ff2"), d, d, true, rng),
            norm2: Norm::new(ps, &format!("{name}.norm2"), d),
        })
    }

    pub fn forward(&self, tape: &mut Tape, h: Var, pos: Option<Var>) -> Result<Var> {
        check_width(tape, h, self.d, "attention input")?;
        if let Some(p) = pos {
            check_width(tape, p, self.d, "positional input")?;
            if tape.value(p).rows != tape.value(h).rows {
                return Err(Error::Shape("positional rows differ from node rows".into()));
            }
        }
        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.wq.forward(tape, h);
        let k = self.wk.forward(tape, h);
        let v = self.wv.forward(tape, h);
        let pos_qk = match (pos, &self.pos_q, &self.pos_k) {
            (Some(p), Some(pq), Some(pk)) => Some((pq.forward(tape, p), pk.forward(tape, p))),
            _ => None,
        };
        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let qh = tape.slice_cols(q, head * dh, dh);
            let kh = tape.slice_cols(k, head * dh, dh);
            let vh = tape.slice_cols(v, head * dh, dh);
            let mut logits = tape.matmul_nt(qh, kh);
            if let Some((pq, pk)) = pos_qk {
                let pqh = tape.slice_cols(pq, head * dh, dh);
                let pkh = tape.slice_cols(pk, head * dh, dh);
                let pl = tape.matmul_nt(pqh, pkh);
                logits = tape.add(logits, pl);
            }
            let logits = tape.scale(logits, scale);
            let a = tape.softmax_rows(logits);
            outs.push(tape.matmul(a, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
        let att = self.wo.forward(tape, cat);
        let x = tape.add(h, att);
        let x = self.norm1.forward(tape, x);
        let f = self.ff1.forward(tape, x);
        let f = tape.relu(f);
        let f = self.ff2.forward(tape, f);
        let y = tape.add(x, f);
        Ok(self.norm2.forward(tape, y))
    }
}

/// Cyclic positional encoding: row `i` holds `[sin(2π k i / n), cos(2π k i / n)]`
/// for `k = 1..=d/2`, so rows are exactly periodic in `i` with period `n`.
pub fn cpe_table(n: usize, d: usize) -> Result<Matrix> {
    if !d.is_multiple_of(2) || d == 0 {
        return Err(Error::InvalidArgument(format!("positional width must be even, got {d}")));
    }
    let mut m = Matrix::zeros(n, d);
    for i in 0..n {
        for k in 0..d / 2 {
            let phase = 2.0 * std::f64::consts::PI * ((k + 1) * i) as f64 / n as f64;
            m.data[i * d + 2 * k] = phase.sin();
            m.data[i * d + 2 * k + 1] = phase.cos();
        }
    }
    Ok(m)
}
