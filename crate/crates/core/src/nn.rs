//! Small dense networks with an explicit activation tape, exact reverse-mode
//! gradients and Adam.
//!
//! Parameters live in one flat buffer, layer by layer: the row-major weight
//! matrix (`out x in`) followed by the bias vector. [`Gradients`] and
//! [`AdamState`] share that layout.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
    Softplus,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
            Activation::Softplus => softplus(z),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
            // a = ln(1 + e^z)  =>  sigmoid(z) = 1 - e^{-a}
            Activation::Softplus => -(-a).exp_m1(),
        }
    }
}

pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerLayout {
    n_in: usize,
    n_out: usize,
    w: usize,
    b: usize,
}

/// Multi-layer perceptron with fixed architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    activations: Vec<Activation>,
    layout: Vec<LayerLayout>,
    params: Vec<f64>,
    generation: u64,
}

/// Layer outputs recorded by [`Mlp::forward`]; `values[0]` is the input.
#[derive(Debug, Clone)]
pub struct Tape {
    generation: u64,
    values: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.values.last().expect("tape has at least the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<f64>);

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Gradients(vec![0.0; net.num_params()])
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|g| *g *= s);
    }

    pub fn sq_norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }
}

fn build_layout(sizes: &[usize]) -> (Vec<LayerLayout>, usize) {
    let mut layout = Vec::with_capacity(sizes.len() - 1);
    let mut off = 0;
    for w in sizes.windows(2) {
        let (n_in, n_out) = (w[0], w[1]);
        layout.push(LayerLayout { n_in, n_out, w: off, b: off + n_in * n_out });
        off += n_in * n_out + n_out;
    }
    (layout, off)
}

impl Mlp {
    /// All-zero network.
    pub fn zeros(sizes: &[usize], activations: &[Activation]) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::ShapeMismatch(format!("bad layer sizes {sizes:?}")));
        }
        if activations.len() != sizes.len() - 1 {
            return Err(Error::ShapeMismatch(format!(
                "{} activations for {} layers",
                activations.len(),
                sizes.len() - 1
            )));
        }
        let (layout, n) = build_layout(sizes);
        Ok(Self {
            sizes: sizes.to_vec(),
            activations: activations.to_vec(),
            layout,
            params: vec![0.0; n],
            generation: 0,
        })
    }

    /// Orthogonal weights scaled by the per-layer gain, zero biases.
    pub fn orthogonal<R: Rng>(sizes: &[usize], activations: &[Activation], gains: &[f64], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes, activations)?;
        if gains.len() != net.layout.len() {
            return Err(Error::ShapeMismatch(format!("{} gains for {} layers", gains.len(), net.layout.len())));
        }
        for (l, &gain) in net.layout.clone().iter().zip(gains) {
            let w = orthogonal_matrix(l.n_out, l.n_in, rng);
            for (dst, v) in net.params[l.w..l.w + l.n_in * l.n_out].iter_mut().zip(w) {
                *dst = gain * v;
            }
        }
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access. Invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.generation += 1;
        &mut self.params
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Weight `(row, col)` and bias of layer `layer`.
    pub fn weight(&self, layer: usize, row: usize, col: usize) -> f64 {
        let l = &self.layout[layer];
        self.params[l.w + row * l.n_in + col]
    }

    pub fn bias(&self, layer: usize, row: usize) -> f64 {
        self.params[self.layout[layer].b + row]
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        if input.len() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input of length {} for network with input size {}",
                input.len(),
                self.input_dim()
            )));
        }
        let mut values = Vec::with_capacity(self.layout.len() + 1);
        values.push(input.to_vec());
        for (l, act) in self.layout.iter().zip(&self.activations) {
            let x = values.last().unwrap();
            let mut out = Vec::with_capacity(l.n_out);
            for r in 0..l.n_out {
                let row = &self.params[l.w + r * l.n_in..l.w + (r + 1) * l.n_in];
                let z = self.params[l.b + r] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
                out.push(act.apply(z));
            }
            values.push(out);
        }
        let output = values.last().unwrap().clone();
        Ok((output, Tape { generation: self.generation, values }))
    }

    /// Gradient of `<output_grad, output>` with respect to the parameters.
    pub fn backward(&self, tape: &Tape, output_grad: &[f64]) -> Result<Gradients> {
        let mut g = Gradients::zeros_like(self);
        self.backward_into(tape, output_grad, &mut g)?;
        Ok(g)
    }

    /// Like [`backward`](Self::backward), accumulating into `grads`.
    pub fn backward_into(&self, tape: &Tape, output_grad: &[f64], grads: &mut Gradients) -> Result<()> {
        if tape.generation != self.generation || tape.values.len() != self.layout.len() + 1 {
            return Err(Error::StaleTape);
        }
        if output_grad.len() != self.output_dim() || grads.0.len() != self.num_params() {
            return Err(Error::ShapeMismatch("output gradient or gradient buffer".into()));
        }
        let mut upstream = output_grad.to_vec();
        for (i, l) in self.layout.iter().enumerate().rev() {
            let act = self.activations[i];
            let out = &tape.values[i + 1];
            let x = &tape.values[i];
            let dz: Vec<f64> = upstream
                .iter()
                .zip(out)
                .map(|(u, a)| u * act.derivative_from_output(*a))
                .collect();
            let mut down = vec![0.0; l.n_in];
            for (r, d) in dz.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                grads.0[l.b + r] += d;
                let w_row = l.w + r * l.n_in;
                for c in 0..l.n_in {
                    grads.0[w_row + c] += d * x[c];
                    down[c] += d * self.params[w_row + c];
                }
            }
            upstream = down;
        }
        Ok(())
    }

    /// Applies one Adam step. Non-finite gradients leave the net untouched.
    pub fn adam_step(&mut self, grads: &Gradients, state: &mut AdamState) -> Result<AdamOutcome> {
        let outcome = state.step(&mut self.params, &grads.0)?;
        if outcome == AdamOutcome::Applied {
            self.generation += 1;
        }
        Ok(outcome)
    }

    pub fn to_checkpoint(&self, optimizer: Option<&AdamState>) -> MlpCheckpoint {
        MlpCheckpoint {
            layer_sizes: self.sizes.clone(),
            activations: self.activations.clone(),
            weights: self.layout.iter().map(|l| self.params[l.w..l.b].to_vec()).collect(),
            biases: self.layout.iter().map(|l| self.params[l.b..l.b + l.n_out].to_vec()).collect(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn from_checkpoint(ck: &MlpCheckpoint) -> Result<Self> {
        let mut net = Self::zeros(&ck.layer_sizes, &ck.activations).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.weights.len() != net.layout.len() || ck.biases.len() != net.layout.len() {
            return Err(Error::Checkpoint("layer count does not match layer_sizes".into()));
        }
        for (i, l) in net.layout.clone().iter().enumerate() {
            if ck.weights[i].len() != l.n_in * l.n_out || ck.biases[i].len() != l.n_out {
                return Err(Error::Checkpoint(format!("layer {i} has wrong parameter count")));
            }
            net.params[l.w..l.b].copy_from_slice(&ck.weights[i]);
            net.params[l.b..l.b + l.n_out].copy_from_slice(&ck.biases[i]);
        }
        if net.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        if let Some(opt) = &ck.optimizer {
            if opt.m.len() != net.num_params() || opt.v.len() != net.num_params() {
                return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
            }
        }
        Ok(net)
    }
}

/// Semi-orthogonal `rows x cols` matrix, row-major, from Gram-Schmidt on a
/// Gaussian draw (rows orthonormal if `rows <= cols`, else columns).
fn orthogonal_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Vec<f64> {
    let (n_vec, len) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(n_vec);
    while vecs.len() < n_vec {
        let mut v: Vec<f64> = (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for u in &vecs {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            vecs.push(v);
        }
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = if rows <= cols { vecs[r][c] } else { vecs[c][r] };
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdamOutcome {
    Applied,
    SkippedNonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub cfg: AdamConfig,
}

impl AdamState {
    pub fn new(n_params: usize, cfg: AdamConfig) -> Self {
        Self { m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0, cfg }
    }

    pub fn for_net(net: &Mlp, cfg: AdamConfig) -> Self {
        Self::new(net.num_params(), cfg)
    }

    /// Bias-corrected Adam update.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<AdamOutcome> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam state for {} params, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Ok(AdamOutcome::SkippedNonFinite);
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(AdamOutcome::Applied)
    }
}

/// JSON layout of a network checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub layer_sizes: Vec<usize>,
    pub activations: Vec<Activation>,
    /// Row-major `out x in` weights per layer.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<AdamState>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(sizes: &[usize], seed: u64) -> Mlp {
        let acts: Vec<_> = (0..sizes.len() - 1)
            .map(|i| if i + 2 == sizes.len() { Activation::Identity } else { Activation::Tanh })
            .collect();
        let gains = vec![1.0; sizes.len() - 1];
        Mlp::orthogonal(sizes, &acts, &gains, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn zero_weights_output_biases() {
        let mut n = Mlp::zeros(&[3, 4, 2], &[Activation::Tanh, Activation::Identity]).unwrap();
        let nb = n.num_params();
        n.params_mut()[nb - 2] = 0.5;
        n.params_mut()[nb - 1] = -1.5;
        let (out, _) = n.forward(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(out, vec![0.5, -1.5]);
    }

    #[test]
    fn single_identity_layer_is_affine() {
        let mut n = Mlp::zeros(&[3, 2], &[Activation::Identity]).unwrap();
        n.params_mut().copy_from_slice(&[1.0, 2.0, 3.0, -1.0, 0.5, 0.25, 10.0, 20.0]);
        let (out, _) = n.forward(&[1.0, -1.0, 2.0]).unwrap();
        assert_eq!(out, vec![1.0 - 2.0 + 6.0 + 10.0, -1.0 - 0.5 + 0.5 + 20.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let n = net(&[3, 4, 2], 0);
        assert!(matches!(n.forward(&[1.0]), Err(Error::ShapeMismatch(_))));
        let (_, tape) = n.forward(&[1.0, 2.0, 3.0]).unwrap();
        assert!(n.backward(&tape, &[1.0]).is_err());
    }

    #[test]
    fn outputs_finite_on_fuzzed_inputs() {
        let n = net(&[7, 64, 64, 3], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let x: Vec<f64> = (0..7).map(|_| rng.random_range(-10.0..10.0)).collect();
            let (out, _) = n.forward(&x).unwrap();
            assert!(out.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let w = orthogonal_matrix(4, 9, &mut ChaCha8Rng::seed_from_u64(3));
        for a in 0..4 {
            for b in 0..4 {
                let d: f64 = (0..9).map(|c| w[a * 9 + c] * w[b * 9 + c]).sum();
                assert!((d - if a == b { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        let w = orthogonal_matrix(9, 4, &mut ChaCha8Rng::seed_from_u64(3));
        for a in 0..4 {
            for b in 0..4 {
                let d: f64 = (0..9).map(|r| w[r * 4 + a] * w[r * 4 + b]).sum();
                assert!((d - if a == b { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for acts in [
            [Activation::Tanh, Activation::Tanh, Activation::Identity],
            [Activation::Tanh, Activation::Tanh, Activation::Softplus],
        ] {
            let mut n = Mlp::orthogonal(&[7, 8, 8, 3], &acts, &[1.0, 1.0, 1.0], &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
            // non-zero biases so every path is exercised
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            for p in n.params_mut() {
                *p += rng.random_range(-0.3..0.3);
            }
            let x: Vec<f64> = (0..7).map(|_| rng.random_range(-2.0..2.0)).collect();
            let og = [0.7, -1.3, 0.4];
            let (_, tape) = n.forward(&x).unwrap();
            let g = n.backward(&tape, &og).unwrap();
            let f = |m: &Mlp| -> f64 {
                let (o, _) = m.forward(&x).unwrap();
                o.iter().zip(&og).map(|(a, b)| a * b).sum()
            };
            for i in 0..n.num_params() {
                let mut p = n.clone();
                p.params_mut()[i] += 1e-5;
                let mut m = n.clone();
                m.params_mut()[i] -= 1e-5;
                let fd = (f(&p) - f(&m)) / 2e-5;
                assert!((g.0[i] - fd).abs() / (1.0 + g.0[i].abs()) < 1e-5, "param {i}: {} vs {fd}", g.0[i]);
            }
        }
    }

    #[test]
    fn zero_output_grad_gives_zero_gradients() {
        let n = net(&[7, 8, 8, 3], 6);
        let (_, tape) = n.forward(&[0.1; 7]).unwrap();
        let g = n.backward(&tape, &[0.0; 3]).unwrap();
        assert!(g.0.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_is_linear_in_output_grad() {
        let n = net(&[7, 8, 8, 3], 7);
        let (_, tape) = n.forward(&[0.3; 7]).unwrap();
        let g0 = n.backward(&tape, &[1.0, 0.0, 0.0]).unwrap();
        let g1 = n.backward(&tape, &[0.0, 1.0, 0.0]).unwrap();
        let both = n.backward(&tape, &[1.0, 1.0, 0.0]).unwrap();
        for i in 0..both.0.len() {
            assert!((both.0[i] - g0.0[i] - g1.0[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn stale_tape_rejected() {
        let mut n = net(&[2, 3, 1], 8);
        let (_, tape) = n.forward(&[0.1, 0.2]).unwrap();
        n.params_mut()[0] += 1.0;
        assert!(matches!(n.backward(&tape, &[1.0]), Err(Error::StaleTape)));
    }

    #[test]
    fn adam_zero_grads_keep_params() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2, AdamConfig::default());
        s.step(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let cfg = AdamConfig::default();
        let mut p = vec![0.0, 0.0];
        let mut s = AdamState::new(2, cfg);
        s.step(&mut p, &[2.5, -0.5]).unwrap();
        // m_hat = g, v_hat = g^2, so step = lr * g / (|g| + eps).
        assert!((p[0] + cfg.lr * 2.5 / (2.5 + cfg.eps)).abs() < 1e-15);
        assert!((p[1] - cfg.lr * 0.5 / (0.5 + cfg.eps)).abs() < 1e-15);
        assert!((p[0] + cfg.lr).abs() < 1e-8);
    }

    #[test]
    fn adam_skips_non_finite() {
        let mut p = vec![1.0];
        let mut s = AdamState::new(1, AdamConfig::default());
        assert_eq!(s.step(&mut p, &[f64::NAN]).unwrap(), AdamOutcome::SkippedNonFinite);
        assert_eq!(p, vec![1.0]);
        assert_eq!(s.t, 0);
        assert!(s.step(&mut p, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn adam_minimizes_quadratic_bowl() {
        let cfg = AdamConfig { lr: 0.05, ..Default::default() };
        let mut p = vec![1.0, -2.0, 0.5];
        let f0: f64 = p.iter().map(|v| v * v).sum();
        let mut s = AdamState::new(3, cfg);
        for _ in 0..500 {
            let g: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
            s.step(&mut p, &g).unwrap();
        }
        let f: f64 = p.iter().map(|v| v * v).sum();
        assert!(f * 100.0 <= f0, "{f0} -> {f}");
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let n = net(&[7, 16, 16, 4], 9);
        let mut opt = AdamState::for_net(&n, AdamConfig::default());
        opt.m[3] = 1.0 / 3.0;
        let json = serde_json::to_string(&n.to_checkpoint(Some(&opt))).unwrap();
        let ck: MlpCheckpoint = serde_json::from_str(&json).unwrap();
        let back = Mlp::from_checkpoint(&ck).unwrap();
        assert!(n.params().iter().zip(back.params()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.sizes(), n.sizes());
        assert_eq!(ck.optimizer.unwrap(), opt);
    }

    #[test]
    fn corrupt_checkpoint_rejected() {
        let n = net(&[3, 4, 2], 10);
        let mut ck = n.to_checkpoint(None);
        ck.weights[0].pop();
        assert!(Mlp::from_checkpoint(&ck).is_err());
    }
}
