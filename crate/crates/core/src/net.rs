//! Dense feed-forward networks with a hand-written reverse pass.
//!
//! Rows of an input matrix are independent samples; every layer computes
//! `act(x W + b)`. The forward pass records a [`Tape`] which [`Mlp::backward`]
//! consumes to accumulate parameter gradients and return the gradient with
//! respect to the input batch.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{check_dim, usage, MemrError, Result};
use crate::rng::MemrRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => z.mapv_inplace(f64::tanh),
            Activation::Identity => {}
        }
    }

    /// Multiplies `delta` by the activation derivative, expressed through the
    /// activation's output.
    fn backprop(self, delta: &mut Array2<f64>, output: &Array2<f64>) {
        match self {
            Activation::Relu => delta.zip_mut_with(output, |d, &y| {
                if y <= 0.0 {
                    *d = 0.0
                }
            }),
            Activation::Tanh => delta.zip_mut_with(output, |d, &y| *d *= 1.0 - y * y),
            Activation::Identity => {}
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `fan_in x fan_out`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    /// Uniform init in `+-1/sqrt(fan_in)` for weights and bias.
    pub fn init(fan_in: usize, fan_out: usize, activation: Activation, rng: &mut MemrRng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-bound..bound));
        let bias = Array1::from_shape_simple_fn(fan_out, || rng.random_range(-bound..bound));
        Self { weight, bias, activation }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Values recorded by a forward pass. Consumed by [`Mlp::backward`].
#[derive(Debug)]
pub struct Tape {
    inputs: Vec<Array2<f64>>,
    outputs: Vec<Array2<f64>>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        self.outputs.last().expect("tape has at least one layer")
    }
}

/// Parameter gradients, shaped like the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Grads {
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
    }

    pub fn flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            *w *= factor;
        }
        for b in &mut self.biases {
            *b *= factor;
        }
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.iter().all(|g| *g == 0.0)
    }
}

impl Mlp {
    /// Builds `sizes.len() - 1` layers; hidden layers use `hidden`, the last
    /// layer `output`.
    pub fn new(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut MemrRng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::init(w[0], w[1], if i == last { output } else { hidden }, rng))
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return usage("network needs at least one layer");
        }
        for (i, l) in layers.iter().enumerate() {
            check_dim(&format!("layer {i} bias"), l.fan_out(), l.bias.len())?;
            if i > 0 {
                check_dim(&format!("layer {i} input"), layers[i - 1].fan_out(), l.fan_in())?;
            }
        }
        let net = Self { layers };
        if net.params().any(|p| !p.is_finite()) {
            return Err(MemrError::Numerical("non-finite network parameter".into()));
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().fan_out()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.params().copied().collect()
    }

    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<()> {
        check_dim("flat parameters", self.param_count(), values.len())?;
        for (p, v) in self.params_mut().zip(values) {
            *p = *v;
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            weights: self.layers.iter().map(|l| Array2::zeros(l.weight.raw_dim())).collect(),
            biases: self.layers.iter().map(|l| Array1::zeros(l.bias.len())).collect(),
        }
    }

    /// Batched forward pass with a tape for [`Mlp::backward`].
    pub fn forward(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, Tape)> {
        check_dim("network input", self.input_dim(), input.ncols())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut x = input.to_owned();
        for layer in &self.layers {
            let mut z = x.dot(&layer.weight);
            z += &layer.bias;
            layer.activation.apply(&mut z);
            inputs.push(x);
            x = z.clone();
            outputs.push(z);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(MemrError::Numerical("non-finite network output".into()));
        }
        Ok((x, Tape { inputs, outputs }))
    }

    /// Forward pass without recording.
    pub fn predict(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim("network input", self.input_dim(), input.ncols())?;
        let mut x = input.to_owned();
        for layer in &self.layers {
            let mut z = x.dot(&layer.weight);
            z += &layer.bias;
            layer.activation.apply(&mut z);
            x = z;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(MemrError::Numerical("non-finite network output".into()));
        }
        Ok(x)
    }

    pub fn predict_one(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| MemrError::Usage(e.to_string()))?;
        Ok(self.predict(x)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_one(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| MemrError::Usage(e.to_string()))?;
        let (y, tape) = self.forward(x)?;
        Ok((y.into_raw_vec_and_offset().0, tape))
    }

    /// Reverse pass: accumulates `d(sum_ij grad_out_ij * y_ij)/d params` into
    /// `grads` and returns the gradient with respect to the input batch.
    pub fn backward(&self, tape: Tape, grad_out: ArrayView2<f64>, grads: &mut Grads) -> Result<Array2<f64>> {
        if tape.inputs.len() != self.layers.len() {
            return usage("tape was recorded on a different network");
        }
        let out = tape.output();
        if out.dim() != grad_out.dim() {
            return usage(format!(
                "output gradient shape {:?} does not match output {:?}",
                grad_out.dim(),
                out.dim()
            ));
        }
        if grads.weights.len() != self.layers.len() {
            return usage("gradient buffer shaped for a different network");
        }
        let mut delta = grad_out.to_owned();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            layer.activation.backprop(&mut delta, &tape.outputs[l]);
            general_mat_mul(1.0, &tape.inputs[l].t(), &delta, 1.0, &mut grads.weights[l]);
            grads.biases[l] += &delta.sum_axis(Axis(0));
            delta = delta.dot(&layer.weight.t());
        }
        Ok(delta)
    }

    /// `self <- (1 - tau) * self + tau * online`.
    pub fn soft_update_from(&mut self, online: &Mlp, tau: f64) {
        for (t, o) in self.params_mut().zip(online.params()) {
            // Incremental form keeps equal parameters bitwise equal.
            *t = if tau == 1.0 { *o } else { *t + tau * (o - *t) };
        }
    }

    /// Little-endian blob: layer count, then per layer `(fan_in, fan_out,
    /// activation tag)`, then all weights row-major followed by biases.
    pub fn write_blob(&self, w: &mut Writer) {
        w.put_u32(self.layers.len() as u32);
        for l in &self.layers {
            w.put_u32(l.fan_in() as u32);
            w.put_u32(l.fan_out() as u32);
            w.put_u8(l.activation.tag());
        }
        for l in &self.layers {
            for v in l.weight.iter() {
                w.put_f64(*v);
            }
            for v in l.bias.iter() {
                w.put_f64(*v);
            }
        }
    }

    pub fn read_blob(r: &mut Reader<'_>) -> Result<Self> {
        let n = r.u32()? as usize;
        if n == 0 || n > 64 {
            return Err(r.error(format!("implausible layer count {n}")));
        }
        let mut shapes = Vec::with_capacity(n);
        for _ in 0..n {
            let fan_in = r.u32()? as usize;
            let fan_out = r.u32()? as usize;
            let act = Activation::from_tag(r.u8()?).ok_or_else(|| r.error("unknown activation tag"))?;
            shapes.push((fan_in, fan_out, act));
        }
        let total: usize = shapes.iter().map(|(i, o, _)| i * o + o).sum();
        if total.saturating_mul(8) > r.remaining() {
            return Err(r.error("network blob truncated"));
        }
        let mut layers = Vec::with_capacity(n);
        for (fan_in, fan_out, activation) in shapes {
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| r.f64()).collect::<Result<_>>()?;
            let b: Vec<f64> = (0..fan_out).map(|_| r.f64()).collect::<Result<_>>()?;
            layers.push(Dense {
                weight: Array2::from_shape_vec((fan_in, fan_out), w).map_err(|e| r.error(e.to_string()))?,
                bias: Array1::from(b),
                activation,
            });
        }
        Mlp::from_layers(layers).map_err(|e| r.error(e.to_string()))
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Smoothly bounds `raw` to `[lo, hi]`: an upper softplus wall followed by a
/// lower one. Returns the bounded value and its derivative.
pub fn soft_bound(raw: f64, lo: f64, hi: f64) -> (f64, f64) {
    let upper = hi - softplus(hi - raw);
    let value = lo + softplus(upper - lo);
    // The lower wall can overshoot `hi` by at most softplus(lo - hi).
    (value.min(hi), sigmoid(hi - raw) * sigmoid(upper - lo))
}

/// Raw input whose [`soft_bound`] equals `value`, for `lo < value < hi`.
pub fn soft_bound_inverse(value: f64, lo: f64, hi: f64) -> f64 {
    let upper = lo + (value - lo).exp_m1().ln();
    hi - (hi - upper).exp_m1().ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct NllOutput {
    pub loss: f64,
    pub d_mean: Vec<f64>,
    pub d_log_var: Vec<f64>,
}

/// `sum_d 1/2 [ (target - mean)^2 exp(-log_var) + log_var + ln 2pi ]`.
pub fn gaussian_nll(mean: &[f64], log_var: &[f64], target: &[f64]) -> Result<NllOutput> {
    check_dim("nll log_var", mean.len(), log_var.len())?;
    check_dim("nll target", mean.len(), target.len())?;
    let mut out = NllOutput {
        loss: 0.0,
        d_mean: vec![0.0; mean.len()],
        d_log_var: vec![0.0; mean.len()],
    };
    for d in 0..mean.len() {
        let (l, dm, dl) = nll_term(mean[d], log_var[d], target[d]);
        out.loss += l;
        out.d_mean[d] = dm;
        out.d_log_var[d] = dl;
    }
    if !out.loss.is_finite() {
        return Err(MemrError::Numerical("gaussian nll is not finite".into()));
    }
    Ok(out)
}

#[inline]
fn nll_term(mean: f64, log_var: f64, target: f64) -> (f64, f64, f64) {
    let inv_var = (-log_var).exp();
    let r = target - mean;
    let loss = 0.5 * (r * r * inv_var + log_var + crate::gaussian::LN_2PI);
    (loss, -r * inv_var, 0.5 * (1.0 - r * r * inv_var))
}

/// Batched [`gaussian_nll`]: returns the loss summed over all entries and the
/// elementwise gradients.
pub fn gaussian_nll_batch(
    mean: ArrayView2<f64>,
    log_var: ArrayView2<f64>,
    target: ArrayView2<f64>,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if mean.dim() != log_var.dim() || mean.dim() != target.dim() {
        return usage("gaussian_nll_batch: shape mismatch");
    }
    let mut d_mean = Array2::zeros(mean.raw_dim());
    let mut d_log_var = Array2::zeros(mean.raw_dim());
    let mut loss = 0.0;
    ndarray::Zip::from(&mut d_mean)
        .and(&mut d_log_var)
        .and(mean)
        .and(log_var)
        .and(target)
        .for_each(|dm, dl, &m, &lv, &t| {
            let (l, a, b) = nll_term(m, lv, t);
            loss += l;
            *dm = a;
            *dl = b;
        });
    if !loss.is_finite() {
        return Err(MemrError::Numerical("gaussian nll is not finite".into()));
    }
    Ok((loss, d_mean, d_log_var))
}

/// Bias-corrected adaptive-moment optimizer over a flat parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(param_count: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    pub fn for_net(net: &Mlp, lr: f64) -> Self {
        Self::new(net.param_count(), lr)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update<'a, 'b>(
        &mut self,
        params: impl Iterator<Item = &'a mut f64>,
        grads: impl Iterator<Item = &'b f64>,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut count = 0;
        for (((p, g), m), v) in params.zip(grads).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            count += 1;
        }
        debug_assert_eq!(count, self.m.len(), "adam state and parameters disagree in size");
    }

    pub fn step_net(&mut self, net: &mut Mlp, grads: &Grads) {
        self.update(net.params_mut(), grads.iter());
    }

    pub fn write(&self, w: &mut Writer) {
        w.put_f64(self.lr);
        w.put_f64(self.beta1);
        w.put_f64(self.beta2);
        w.put_f64(self.eps);
        w.put_u64(self.step);
        w.put_f64s(&self.m);
        w.put_f64s(&self.v);
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self> {
        let lr = r.f64()?;
        let beta1 = r.f64()?;
        let beta2 = r.f64()?;
        let eps = r.f64()?;
        let step = r.u64()?;
        let m = r.f64s()?;
        let v = r.f64s()?;
        if m.len() != v.len() {
            return Err(r.error("adam moment vectors differ in length"));
        }
        Ok(Self { lr, beta1, beta2, eps, step, m, v })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_bound_range_derivative_and_inverse() {
        for raw in [-100.0, -10.0, -1.0, 0.0, 2.0, 50.0] {
            let (v, d) = soft_bound(raw, -10.0, 2.0);
            assert!((-10.0..=2.0).contains(&v));
            assert!((0.0..=1.0).contains(&d));
        }
        let h = 1e-6;
        for raw in [-3.0, 0.5, 1.9, -9.5] {
            let fd = (soft_bound(raw + h, -10.0, 2.0).0 - soft_bound(raw - h, -10.0, 2.0).0) / (2.0 * h);
            assert!((soft_bound(raw, -10.0, 2.0).1 - fd).abs() <= 1e-7);
        }
        for v in [-9.0, -1.0, 0.0, 1.5] {
            assert!((soft_bound(soft_bound_inverse(v, -10.0, 2.0), -10.0, 2.0).0 - v).abs() <= 1e-9);
        }
    }

    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn single(weight: Array2<f64>, bias: Array1<f64>, act: Activation) -> Mlp {
        Mlp::from_layers(vec![Dense { weight, bias, activation: act }]).unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = single(Array2::eye(3), Array1::zeros(3), Activation::Identity);
        let (y, _) = net.forward_one(&[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(y, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn affine_scalar_layer() {
        let net = single(array![[2.0]], array![1.0], Activation::Identity);
        assert_eq!(net.forward_one(&[3.0]).unwrap().0, vec![7.0]);
    }

    #[test]
    fn relu_zeroes_negative_preactivations() {
        let net = single(array![[1.0, 2.0]], array![-5.0, -7.0], Activation::Relu);
        assert_eq!(net.forward_one(&[1.0]).unwrap().0, vec![0.0, 0.0]);
    }

    #[test]
    fn forward_dimension_mismatch() {
        let net = single(array![[1.0]], array![0.0], Activation::Identity);
        assert!(matches!(net.forward_one(&[1.0, 2.0]), Err(MemrError::Usage(_))));
    }

    #[test]
    fn mismatched_layers_rejected() {
        let l0 = Dense { weight: Array2::zeros((2, 3)), bias: Array1::zeros(3), activation: Activation::Tanh };
        let l1 = Dense { weight: Array2::zeros((4, 1)), bias: Array1::zeros(1), activation: Activation::Identity };
        assert!(Mlp::from_layers(vec![l0, l1]).is_err());
    }

    #[test]
    fn product_rule_gradients() {
        let net = single(array![[2.0]], array![0.0], Activation::Identity);
        let (_, tape) = net.forward_one(&[3.0]).unwrap();
        let mut g = net.zero_grads();
        let dx = net.backward(tape, array![[1.0]].view(), &mut g).unwrap();
        assert_eq!(g.weights[0][[0, 0]], 3.0);
        assert_eq!(dx[[0, 0]], 2.0);
    }

    #[test]
    fn zero_output_grad_gives_zero_gradients() {
        let mut rng = seeded(1);
        let net = Mlp::new(&[3, 5, 2], Activation::Tanh, Activation::Identity, &mut rng);
        let (_, tape) = net.forward(array![[0.1, 0.2, 0.3]].view()).unwrap();
        let mut g = net.zero_grads();
        let dx = net.backward(tape, Array2::zeros((1, 2)).view(), &mut g).unwrap();
        assert!(g.is_zero());
        assert!(dx.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_rejects_foreign_tape_and_shape() {
        let mut rng = seeded(2);
        let a = Mlp::new(&[2, 4, 1], Activation::Tanh, Activation::Identity, &mut rng);
        let b = Mlp::new(&[2, 1], Activation::Tanh, Activation::Identity, &mut rng);
        let (_, tape) = a.forward(array![[0.1, 0.2]].view()).unwrap();
        assert!(b.backward(tape, array![[1.0]].view(), &mut b.zero_grads()).is_err());
        let (_, tape) = a.forward(array![[0.1, 0.2]].view()).unwrap();
        assert!(a.backward(tape, array![[1.0, 2.0]].view(), &mut a.zero_grads()).is_err());
    }

    fn fd_check(act: Activation, seed: u64) {
        let mut rng = seeded(seed);
        let mut net = Mlp::new(&[3, 6, 4, 2], act, Activation::Identity, &mut rng);
        let x = Array2::from_shape_simple_fn((4, 3), || rng.random_range(-1.0..1.0));
        let w = Array2::from_shape_simple_fn((4, 2), || rng.random_range(-1.0..1.0));
        let loss = |n: &Mlp| (n.predict(x.view()).unwrap() * &w).sum();
        let (_, tape) = net.forward(x.view()).unwrap();
        let mut g = net.zero_grads();
        let dx = net.backward(tape, w.view(), &mut g).unwrap();
        let analytic = g.flat();
        let base = net.params_flat();
        let h = 1e-5;
        let mut fd = vec![0.0; base.len()];
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += h;
            net.set_params_flat(&p).unwrap();
            let up = loss(&net);
            p[i] -= 2.0 * h;
            net.set_params_flat(&p).unwrap();
            let down = loss(&net);
            fd[i] = (up - down) / (2.0 * h);
        }
        net.set_params_flat(&base).unwrap();
        let diff: f64 = analytic.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(diff / scale <= 1e-4, "relative error {}", diff / scale);

        // Input gradient.
        for i in 0..x.len() {
            let (r, c) = (i / 3, i % 3);
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let up = (net.predict(xp.view()).unwrap() * &w).sum();
            xp[[r, c]] -= 2.0 * h;
            let down = (net.predict(xp.view()).unwrap() * &w).sum();
            assert_abs_diff_eq!(dx[[r, c]], (up - down) / (2.0 * h), epsilon = 1e-6);
        }
    }

    #[test]
    fn tanh_net_matches_finite_differences() {
        for seed in 0..5 {
            fd_check(Activation::Tanh, seed);
        }
    }

    #[test]
    fn relu_net_matches_finite_differences() {
        fd_check(Activation::Relu, 7);
    }

    #[test]
    fn nll_examples() {
        let out = gaussian_nll(&[1.0, -2.0], &[0.0, 0.0], &[1.0, -2.0]).unwrap();
        assert_abs_diff_eq!(out.loss, crate::gaussian::LN_2PI, epsilon = 1e-12);
        assert_eq!(out.d_mean, vec![0.0, 0.0]);
        let out = gaussian_nll(&[0.0], &[0.0], &[2.0]).unwrap();
        assert_abs_diff_eq!(out.loss, 2.0 + 0.5 * crate::gaussian::LN_2PI, epsilon = 1e-12);
        assert!(gaussian_nll(&[0.0], &[f64::NAN], &[0.0]).is_err());
        assert!(gaussian_nll(&[0.0], &[0.0, 1.0], &[0.0]).is_err());
    }

    #[test]
    fn nll_gradients_match_finite_differences() {
        let (m, lv, t) = (0.3, -0.7, 1.1);
        let out = gaussian_nll(&[m], &[lv], &[t]).unwrap();
        let f = |m: f64, lv: f64| gaussian_nll(&[m], &[lv], &[t]).unwrap().loss;
        let h = 1e-6;
        assert_abs_diff_eq!(out.d_mean[0], (f(m + h, lv) - f(m - h, lv)) / (2.0 * h), epsilon = 1e-8);
        assert_abs_diff_eq!(out.d_log_var[0], (f(m, lv + h) - f(m, lv - h)) / (2.0 * h), epsilon = 1e-8);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = vec![1.0, -2.0];
        let mut opt = Adam::new(2, 1e-3);
        opt.update(p.iter_mut(), [0.0, 0.0].iter());
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr_against_gradient() {
        let mut p = vec![0.0, 0.0];
        let mut opt = Adam::new(2, 0.01);
        opt.update(p.iter_mut(), [3.0, -0.002].iter());
        assert_abs_diff_eq!(p[0], -0.01, epsilon = 1e-7);
        assert_abs_diff_eq!(p[1], 0.01, epsilon = 1e-4);
    }

    #[test]
    fn adam_is_deterministic() {
        let mut rng = seeded(3);
        let net = Mlp::new(&[2, 3, 1], Activation::Tanh, Activation::Identity, &mut rng);
        let mut g = net.zero_grads();
        g.weights[0].fill(0.5);
        let (mut a, mut b) = (net.clone(), net.clone());
        let (mut oa, mut ob) = (Adam::for_net(&a, 1e-3), Adam::for_net(&b, 1e-3));
        oa.step_net(&mut a, &g);
        ob.step_net(&mut b, &g);
        assert_eq!(a, b);
    }

    #[test]
    fn blob_roundtrip_and_truncation() {
        let mut rng = seeded(4);
        let net = Mlp::new(&[3, 4, 2], Activation::Relu, Activation::Tanh, &mut rng);
        let mut w = Writer::new();
        net.write_blob(&mut w);
        let bytes = w.into_bytes();
        let back = Mlp::read_blob(&mut Reader::new(&bytes, "net")).unwrap();
        assert_eq!(back, net);
        assert!(Mlp::read_blob(&mut Reader::new(&bytes[..bytes.len() - 1], "net")).is_err());
    }

    #[test]
    fn soft_update_endpoints() {
        let mut rng = seeded(5);
        let online = Mlp::new(&[2, 3, 1], Activation::Tanh, Activation::Identity, &mut rng);
        let mut target = Mlp::new(&[2, 3, 1], Activation::Tanh, Activation::Identity, &mut rng);
        target.soft_update_from(&online, 1.0);
        assert_eq!(target, online);
    }

    #[test]
    fn forward_is_bitwise_pure() {
        let mut rng = seeded(6);
        let net = Mlp::new(&[4, 8, 8, 3], Activation::Tanh, Activation::Identity, &mut rng);
        let x = Array2::from_shape_simple_fn((5, 4), || rng.random_range(-2.0..2.0));
        assert_eq!(net.predict(x.view()).unwrap(), net.predict(x.view()).unwrap());
        assert_eq!(net.forward(x.view()).unwrap().0, net.predict(x.view()).unwrap());
    }
}
