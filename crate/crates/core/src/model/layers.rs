use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, ParamId, ParamStore, Result, Scalar, Tensor, Var};

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// `y = x W + b` with `W` stored as `[in × out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), uniform(rng, &[fan_in, fan_out], bound)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

/// Two linear layers with a GeLU between them.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
    ) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), input, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, output),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Single-layer LSTM with hidden size equal to the input size.
///
/// Gate columns are ordered input, forget, cell, output.
#[derive(Clone, Copy, Debug)]
pub struct Lstm {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl Lstm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, dim: usize) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        Self {
            w_input: store.add(format!("{name}.w_input"), uniform(rng, &[dim, 4 * dim], bound)),
            w_hidden: store.add(format!("{name}.w_hidden"), uniform(rng, &[dim, 4 * dim], bound)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[4 * dim])),
            dim,
        }
    }

    /// One recurrence step. `gates_x` is the `[1 × 4d]` input projection of
    /// the current frame (bias included); returns `(h, c)`.
    pub fn cell<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        gates_x: Var,
        w_hidden: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        let d = self.dim;
        let rec = g.matmul(h, w_hidden)?;
        let gates = g.add(gates_x, rec)?;
        let i = g.slice_cols(gates, 0, d)?;
        let f = g.slice_cols(gates, d, 2 * d)?;
        let z = g.slice_cols(gates, 2 * d, 3 * d)?;
        let o = g.slice_cols(gates, 3 * d, 4 * d)?;
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let z = g.tanh(z);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, z)?;
        let c_next = g.add(keep, write)?;
        let squashed = g.tanh(c_next);
        let h_next = g.mul(o, squashed)?;
        Ok((h_next, c_next))
    }

    /// Hidden states for every prefix of `x` (`[n × d]`), starting from zero state.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (n, _) = g.value(x).dims2("lstm")?;
        let w_in = g.param(store, self.w_input);
        let w_hid = g.param(store, self.w_hidden);
        let bias = g.param(store, self.bias);
        let proj = g.matmul(x, w_in)?;
        let proj = g.add_bias(proj, bias)?;
        let mut h = g.constant(Tensor::zeros(&[1, self.dim]));
        let mut c = g.constant(Tensor::zeros(&[1, self.dim]));
        let mut states = Vec::with_capacity(n);
        for t in 0..n {
            let gx = g.slice_rows(proj, t, t + 1)?;
            (h, c) = self.cell(g, gx, w_hid, h, c)?;
            states.push(h);
        }
        g.concat(&states, 0)
    }
}
